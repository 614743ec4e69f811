#include "cellflow/notebook.hpp"

#include <regex>

#include "cellflow/codec.hpp"

namespace cellflow {

namespace {

using nlohmann::json;

const std::string& checked(const std::string& s, std::string_view what) {
    if (!codec::is_valid_utf8(s)) throw SerializationError(std::string(what) + " is not valid UTF-8");
    return s;
}

std::string notebook_cell_id(const Cell& cell, std::size_t index) {
    static const std::regex kValid("^[a-zA-Z0-9_-]{1,64}$");
    if (std::regex_match(cell.id, kValid)) return cell.id;
    return "cell-" + std::to_string(index);
}

json rich_output(const CellOutput& out, const SessionMeta& meta) {
    const std::string mime = out.mime.value_or("text/plain");
    json data = json::object();
    if (out.payload_path) {
        auto path = std::filesystem::path(*out.payload_path);
        if (path.is_relative()) path = meta.workdir / path;
        std::string bytes;
        try {
            bytes = codec::read_file(path);
        } catch (const Error& e) {
            throw SerializationError("rich payload unavailable: " + std::string(e.what()));
        }
        data[mime] = codec::base64_encode(bytes);
        if (!out.text.empty() && mime != "text/plain") data["text/plain"] = checked(out.text, "rich text");
    } else if (mime.find("json") != std::string::npos) {
        try {
            data[mime] = json::parse(out.text);
        } catch (const json::parse_error& e) {
            throw SerializationError("rich JSON payload does not parse: " + std::string(e.what()));
        }
    } else {
        data[mime] = checked(out.text, "rich text");
    }
    return json{{"output_type", "display_data"}, {"data", data}, {"metadata", json::object()}};
}

json output_json(const CellOutput& out, const SessionMeta& meta) {
    switch (out.channel) {
        case OutputChannel::Stdout:
        case OutputChannel::Stderr:
            return json{{"output_type", "stream"},
                        {"name", out.channel == OutputChannel::Stdout ? "stdout" : "stderr"},
                        {"text", checked(out.text, "stream text")}};
        case OutputChannel::Rich: return rich_output(out, meta);
        case OutputChannel::Error: {
            json tb = json::array();
            for (const auto& line : out.traceback) tb.push_back(checked(line, "traceback"));
            return json{{"output_type", "error"},
                        {"ename", checked(out.error_name.value_or("Error"), "error name")},
                        {"evalue", checked(out.error_value.value_or(""), "error value")},
                        {"traceback", tb}};
        }
    }
    return json::object();
}

}  // namespace

json export_notebook(std::span<const Cell> trace, const SessionMeta& meta) {
    json cells = json::array();
    int execution_count = 0;
    for (std::size_t i = 0; i < trace.size(); ++i) {
        const auto& cell = trace[i];
        json c{{"id", notebook_cell_id(cell, i)},
               {"metadata", {{"cellflow", {{"origin_stage", to_string(cell.origin)}}}}},
               {"source", checked(cell.source, "cell source")}};
        if (cell.kind == CellKind::Markdown) {
            c["cell_type"] = "markdown";
        } else {
            c["cell_type"] = "code";
            c["execution_count"] = ++execution_count;
            json outs = json::array();
            for (const auto& o : cell.outputs) outs.push_back(output_json(o, meta));
            c["outputs"] = outs;
        }
        cells.push_back(std::move(c));
    }
    json metadata{{"kernelspec", {{"name", meta.language_tag}, {"display_name", meta.language_tag},
                                  {"language", meta.language_tag}}},
                  {"language_info", {{"name", meta.language_tag}}},
                  {"cellflow", {{"session_id", meta.session_id}, {"model", meta.model}}}};
    return json{{"nbformat", 4}, {"nbformat_minor", 5}, {"metadata", metadata}, {"cells", cells}};
}

std::string export_notebook_text(std::span<const Cell> trace, const SessionMeta& meta) {
    try {
        return export_notebook(trace, meta).dump(1);
    } catch (const json::type_error& e) {
        throw SerializationError(e.what());
    }
}

}  // namespace cellflow
