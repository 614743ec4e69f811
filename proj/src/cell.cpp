#include "cellflow/cell.hpp"

#include <algorithm>

#include "cellflow/error.hpp"

namespace cellflow {

std::string_view to_string(CellKind k) {
    return k == CellKind::Markdown ? "markdown" : "code";
}

std::string_view to_string(Origin o) {
    switch (o) {
        case Origin::Init: return "Init";
        case Origin::Plan: return "Plan";
        case Origin::Exec: return "Exec";
        case Origin::Debug: return "Debug";
        case Origin::Filter: return "Filter";
        case Origin::User: return "User";
    }
    return "?";
}

std::string_view to_string(OutputChannel c) {
    switch (c) {
        case OutputChannel::Stdout: return "stdout";
        case OutputChannel::Stderr: return "stderr";
        case OutputChannel::Rich: return "rich";
        case OutputChannel::Error: return "error";
    }
    return "?";
}

std::optional<CellKind> cell_kind_from_string(std::string_view s) {
    if (s == "markdown") return CellKind::Markdown;
    if (s == "code") return CellKind::Code;
    return std::nullopt;
}

std::optional<Origin> origin_from_string(std::string_view s) {
    for (auto o : {Origin::Init, Origin::Plan, Origin::Exec, Origin::Debug, Origin::Filter, Origin::User}) {
        if (to_string(o) == s) return o;
    }
    return std::nullopt;
}

std::optional<OutputChannel> channel_from_string(std::string_view s) {
    for (auto c : {OutputChannel::Stdout, OutputChannel::Stderr, OutputChannel::Rich, OutputChannel::Error}) {
        if (to_string(c) == s) return c;
    }
    return std::nullopt;
}

Origin origin_for(AgentState s) {
    switch (s) {
        case AgentState::Idle: return Origin::User;
        case AgentState::Plan: return Origin::Plan;
        case AgentState::Exec: return Origin::Exec;
        case AgentState::Debug: return Origin::Debug;
        case AgentState::Filter: return Origin::Filter;
    }
    return Origin::Plan;
}

CellOutput CellOutput::stdout_text(std::string text) {
    CellOutput o;
    o.channel = OutputChannel::Stdout;
    o.text = std::move(text);
    return o;
}

CellOutput CellOutput::stderr_text(std::string text) {
    CellOutput o;
    o.channel = OutputChannel::Stderr;
    o.text = std::move(text);
    return o;
}

CellOutput CellOutput::rich(std::string mime, std::string text, std::optional<std::string> payload_path) {
    CellOutput o;
    o.channel = OutputChannel::Rich;
    o.mime = std::move(mime);
    o.text = std::move(text);
    o.payload_path = std::move(payload_path);
    return o;
}

CellOutput CellOutput::error(std::string name, std::string value, std::vector<std::string> traceback) {
    CellOutput o;
    o.channel = OutputChannel::Error;
    o.text = name + ": " + value;
    o.error_name = std::move(name);
    o.error_value = std::move(value);
    o.traceback = std::move(traceback);
    return o;
}

Cell Cell::markdown(std::string source, Origin origin) {
    Cell c;
    c.kind = CellKind::Markdown;
    c.source = std::move(source);
    c.origin = origin;
    return c;
}

Cell Cell::code(std::string source, std::string language_tag, Origin origin) {
    Cell c;
    c.kind = CellKind::Code;
    c.language_tag = std::move(language_tag);
    c.source = std::move(source);
    c.origin = origin;
    return c;
}

bool Action::has_code() const {
    return std::any_of(cells.begin(), cells.end(), [](const Cell& c) { return c.is_code(); });
}

void to_json(nlohmann::json& j, const CellOutput& o) {
    j = nlohmann::json{{"channel", to_string(o.channel)}, {"text", o.text}};
    if (o.truncated) j["truncated"] = true;
    if (o.channel == OutputChannel::Rich) {
        if (o.mime) j["mime"] = *o.mime;
        if (o.payload_path) j["payload_path"] = *o.payload_path;
    }
    if (o.channel == OutputChannel::Error) {
        j["error_name"] = o.error_name.value_or("");
        j["error_value"] = o.error_value.value_or("");
        j["traceback"] = o.traceback;
    }
}

void from_json(const nlohmann::json& j, CellOutput& o) {
    auto ch = channel_from_string(j.at("channel").get<std::string>());
    if (!ch) throw Error("unknown output channel " + j.at("channel").dump());
    o = CellOutput{};
    o.channel = *ch;
    o.text = j.value("text", "");
    o.truncated = j.value("truncated", false);
    if (o.channel == OutputChannel::Rich) {
        if (j.contains("mime")) o.mime = j["mime"].get<std::string>();
        if (j.contains("payload_path")) o.payload_path = j["payload_path"].get<std::string>();
    }
    if (o.channel == OutputChannel::Error) {
        o.error_name = j.value("error_name", "");
        o.error_value = j.value("error_value", "");
        o.traceback = j.value("traceback", std::vector<std::string>{});
    }
}

void to_json(nlohmann::json& j, const Cell& c) {
    j = nlohmann::json{{"id", c.id},
                       {"kind", to_string(c.kind)},
                       {"language_tag", c.language_tag},
                       {"source", c.source},
                       {"outputs", c.outputs},
                       {"origin_stage", to_string(c.origin)}};
}

void from_json(const nlohmann::json& j, Cell& c) {
    auto kind = cell_kind_from_string(j.at("kind").get<std::string>());
    auto origin = origin_from_string(j.value("origin_stage", "Plan"));
    if (!kind || !origin) throw Error("malformed cell record: " + j.dump());
    c.id = j.value("id", "");
    c.kind = *kind;
    c.language_tag = j.value("language_tag", "python");
    c.source = j.at("source").get<std::string>();
    c.outputs = j.value("outputs", std::vector<CellOutput>{});
    c.origin = *origin;
}

void to_json(nlohmann::json& j, const Action& a) {
    j = nlohmann::json{{"signal", to_string(a.signal.canonical)},
                       {"raw_signal", a.signal.raw},
                       {"stage", to_string(a.stage)},
                       {"cells", a.cells}};
}

void from_json(const nlohmann::json& j, Action& a) {
    auto sig = signal_from_string(j.at("signal").get<std::string>());
    auto st = state_from_string(j.at("stage").get<std::string>());
    if (!sig || !st) throw Error("malformed action record: " + j.dump());
    a.signal = ActionSignal{*sig, j.value("raw_signal", std::string(canonical_token(*sig)))};
    a.stage = *st;
    a.cells = j.at("cells").get<std::vector<Cell>>();
}

}  // namespace cellflow
