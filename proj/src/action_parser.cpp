#include "cellflow/action_parser.hpp"

#include <algorithm>
#include <cctype>

#include "cellflow/fst.hpp"

namespace cellflow {

namespace {

constexpr std::size_t kMaxTokenLength = 64;

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

bool is_space(char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
    return s;
}

// Token interior with case folded and whitespace runs collapsed.
std::string normalize_interior(std::string_view token) {
    if (token.size() >= 2 && token.front() == '<' && token.back() == '>') {
        token = token.substr(1, token.size() - 2);
    }
    std::string out;
    bool pending_space = false;
    for (char c : trim(token)) {
        if (is_space(c)) {
            pending_space = true;
            continue;
        }
        if (pending_space && !out.empty()) out.push_back(' ');
        pending_space = false;
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    return out;
}

std::vector<std::string_view> split_lines(std::string_view text) {
    std::vector<std::string_view> lines;
    std::size_t start = 0;
    while (true) {
        auto nl = text.find('\n', start);
        if (nl == std::string_view::npos) {
            lines.push_back(text.substr(start));
            break;
        }
        lines.push_back(text.substr(start, nl - start));
        start = nl + 1;
    }
    return lines;
}

std::size_t leading_backticks(std::string_view s) {
    std::size_t n = 0;
    while (n < s.size() && s[n] == '`') ++n;
    return n;
}

// Opening fences may be indented by up to three spaces.
std::string_view strip_fence_indent(std::string_view line) {
    std::size_t k = 0;
    while (k < 3 && k < line.size() && line[k] == ' ') ++k;
    return line.substr(k);
}

bool is_closing_fence(std::string_view line, std::size_t open_len) {
    auto t = trim(line);
    auto n = leading_backticks(t);
    return n >= open_len && n == t.size();
}

std::string join(const std::vector<std::string_view>& lines) {
    std::string out;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (i) out.push_back('\n');
        out.append(lines[i]);
    }
    return out;
}

}  // namespace

std::string_view to_string(ParseErrorKind k) {
    switch (k) {
        case ParseErrorKind::NoSignal: return "NoSignal";
        case ParseErrorKind::InadmissibleSignal: return "InadmissibleSignal";
        case ParseErrorKind::EmptyAction: return "EmptyAction";
        case ParseErrorKind::UnexpectedCode: return "UnexpectedCode";
        case ParseErrorKind::MissingStepGoal: return "MissingStepGoal";
    }
    return "?";
}

SignalAliasTable SignalAliasTable::standard() {
    SignalAliasTable t;
    for (auto s : kAllSignals) t.add(canonical_token(s), s);
    // Spellings used in the stage prompts.
    t.add("<Advance to Next STEP>", Signal::AdvanceNextStep);
    t.add("<Iterate on Current STEP>", Signal::IterateCurrentStep);
    t.add("<Fulfill USER INSTRUCTION>", Signal::FulfilInstruction);
    t.add("<await>", Signal::Await);
    t.add("<end_step>", Signal::EndStep);
    t.add("<end_debug>", Signal::EndDebug);
    t.add("<debug_success>", Signal::DebugSuccess);
    t.add("<debug_failure>", Signal::DebugFailure);
    return t;
}

void SignalAliasTable::add(std::string_view token, Signal canonical) {
    auto key = normalize_interior(token);
    auto [it, inserted] = by_interior_.emplace(key, canonical);
    if (!inserted && it->second != canonical) {
        throw Error("alias " + std::string(token) + " already maps to " + std::string(to_string(it->second)));
    }
}

std::optional<Signal> SignalAliasTable::lookup(std::string_view token) const {
    auto it = by_interior_.find(normalize_interior(token));
    if (it == by_interior_.end()) return std::nullopt;
    return it->second;
}

std::vector<Cell> parse_cells(std::string_view text, std::string_view code_tag) {
    std::vector<Cell> cells;
    std::vector<std::string_view> prose;
    const std::string tag = lower(code_tag);

    auto flush_prose = [&] {
        auto body = trim(join(prose));
        if (!body.empty()) cells.push_back(Cell::markdown(std::string(body)));
        prose.clear();
    };

    const auto lines = split_lines(text);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        auto candidate = strip_fence_indent(lines[i]);
        const auto ticks = leading_backticks(candidate);
        const auto info = trim(candidate.substr(ticks));
        if (ticks < 3 || info.find('`') != std::string_view::npos) {
            prose.push_back(lines[i]);
            continue;
        }
        flush_prose();
        std::vector<std::string_view> body;
        std::size_t j = i + 1;
        while (j < lines.size() && !is_closing_fence(lines[j], ticks)) body.push_back(lines[j++]);
        i = j;  // an unclosed fence runs to the end of the text

        const auto info_lower = lower(info);
        if (!tag.empty() && info_lower == tag) {
            cells.push_back(Cell::code(join(body), std::string(code_tag)));
        } else {
            cells.push_back(Cell::markdown(join(body)));
        }
    }
    flush_prose();
    return cells;
}

Action parse_action(std::string_view raw, AgentState stage, const SignalAliasTable& aliases,
                    const ParseOptions& options) {
    const std::set<Signal> allowed = options.allowed.empty() ? admissible_signals(stage) : options.allowed;

    std::size_t pos = 0;
    while (pos < raw.size() && is_space(raw[pos])) ++pos;
    if (pos >= raw.size() || raw[pos] != '<') {
        throw ParseError(ParseErrorKind::NoSignal, "reply does not start with an action signal");
    }
    const auto close = raw.find('>', pos);
    if (close == std::string_view::npos || close - pos > kMaxTokenLength ||
        raw.substr(pos, close - pos).find('\n') != std::string_view::npos) {
        throw ParseError(ParseErrorKind::NoSignal, "reply does not start with an action signal");
    }
    const auto token = raw.substr(pos, close - pos + 1);
    const auto sig = aliases.lookup(token);
    if (!sig) {
        throw ParseError(ParseErrorKind::NoSignal, "unknown action signal " + std::string(token));
    }
    if (!allowed.count(*sig)) {
        throw ParseError(ParseErrorKind::InadmissibleSignal,
                         std::string(token) + " is not available in the " + std::string(to_string(stage)) +
                             " stage");
    }

    Action action;
    action.signal = ActionSignal{*sig, std::string(token)};
    action.stage = stage;
    action.cells = parse_cells(raw.substr(close + 1), options.code_tag);
    const auto origin = origin_for(stage);
    for (auto& c : action.cells) c.origin = origin;

    const bool progressing = *sig == Signal::Await || *sig == Signal::AdvanceNextStep ||
                             *sig == Signal::IterateCurrentStep;
    if (progressing && action.cells.empty()) {
        throw ParseError(ParseErrorKind::EmptyAction, std::string(token) + " requires at least one cell");
    }
    if ((*sig == Signal::FulfilInstruction || *sig == Signal::DebugFailure) && action.has_code()) {
        throw ParseError(ParseErrorKind::UnexpectedCode, std::string(token) + " must not carry code cells");
    }
    return action;
}

std::optional<std::string> step_goal_of(const Cell& cell) {
    if (cell.kind != CellKind::Markdown) return std::nullopt;
    auto s = trim(cell.source);
    while (!s.empty() && (s.front() == '#' || s.front() == ' ')) s.remove_prefix(1);
    constexpr std::string_view kLabel = "[STEP GOAL]:";
    if (s.substr(0, kLabel.size()) != kLabel) return std::nullopt;
    return std::string(trim(s.substr(kLabel.size())));
}

}  // namespace cellflow
