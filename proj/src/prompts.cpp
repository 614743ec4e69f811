#include "cellflow/prompts.hpp"

#include "cellflow/codec.hpp"
#include "cellflow/error.hpp"
#include "cellflow/resources.hpp"

namespace cellflow {

namespace {

void replace_all(std::string& s, std::string_view from, std::string_view to) {
    std::size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
        s.replace(pos, from.size(), to);
        pos += to.size();
    }
}

}  // namespace

std::string_view to_string(PromptKind k) {
    switch (k) {
        case PromptKind::Initial: return "initial";
        case PromptKind::Planning: return "planning";
        case PromptKind::Execution: return "execution";
        case PromptKind::Debugging: return "debugging";
        case PromptKind::PostFiltering: return "post_filtering";
    }
    return "?";
}

std::string_view template_file(PromptKind k) {
    switch (k) {
        case PromptKind::Initial: return "initial.txt";
        case PromptKind::Planning: return "planning.txt";
        case PromptKind::Execution: return "execution.txt";
        case PromptKind::Debugging: return "debugging.txt";
        case PromptKind::PostFiltering: return "post_filtering.txt";
    }
    return "?";
}

PromptKind prompt_for(AgentState stage, bool opening_turn) {
    switch (stage) {
        case AgentState::Plan: return opening_turn ? PromptKind::Initial : PromptKind::Planning;
        case AgentState::Exec: return PromptKind::Execution;
        case AgentState::Debug: return PromptKind::Debugging;
        case AgentState::Filter: return PromptKind::PostFiltering;
        case AgentState::Idle: break;
    }
    throw Error("no prompt for the Idle state");
}

PromptCatalog PromptCatalog::builtin() {
    PromptCatalog c;
    for (auto k : kAllPrompts) {
        auto text = resources::find("prompts/" + std::string(template_file(k)));
        if (!text) throw Error("missing built-in template " + std::string(template_file(k)));
        c.set_text(k, std::string(*text));
    }
    return c;
}

PromptCatalog PromptCatalog::load(const std::filesystem::path& dir) {
    PromptCatalog c;
    for (auto k : kAllPrompts) c.set_text(k, codec::read_file(dir / template_file(k)));
    return c;
}

void PromptCatalog::write_defaults(const std::filesystem::path& dir) {
    const auto c = builtin();
    for (auto k : kAllPrompts) codec::write_file(dir / template_file(k), c.text(k));
}

std::string PromptCatalog::render(PromptKind k, std::string_view instruction, std::string_view step_goal) const {
    std::string out = text(k);
    replace_all(out, kInstructionPlaceholder, instruction);
    replace_all(out, kStepPlaceholder, step_goal);
    return out;
}

std::set<Signal> PromptCatalog::offered_signals(PromptKind k, const SignalAliasTable& aliases) const {
    std::set<Signal> out;
    const auto& t = text(k);
    constexpr std::string_view kLabel = "Available Action Space:";
    const auto at = t.find(kLabel);
    if (at == std::string::npos) return out;
    const auto line_end = t.find('\n', at);
    const auto line = std::string_view(t).substr(at, line_end == std::string::npos ? std::string::npos : line_end - at);
    std::size_t pos = 0;
    while ((pos = line.find('<', pos)) != std::string_view::npos) {
        const auto close = line.find('>', pos);
        if (close == std::string_view::npos) break;
        if (auto s = aliases.lookup(line.substr(pos, close - pos + 1))) out.insert(*s);
        pos = close + 1;
    }
    return out;
}

}  // namespace cellflow
