#pragma once

#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "cellflow/cell.hpp"
#include "cellflow/error.hpp"
#include "cellflow/signals.hpp"

namespace cellflow {

enum class ParseErrorKind {
    NoSignal,            // reply does not open with a known signal token
    InadmissibleSignal,  // known token, wrong stage
    EmptyAction,         // progressing signal with nothing to run
    UnexpectedCode,      // code cells under a signal that forbids them
    MissingStepGoal,     // planning reply without a "[STEP GOAL]:" cell
};

std::string_view to_string(ParseErrorKind k);

class ParseError : public CodedError<ParseErrorKind> {
public:
    using CodedError::CodedError;
};

/// Maps signal token spellings to canonical signals. Lookup is
/// case-insensitive on the token interior (the text between '<' and '>').
class SignalAliasTable {
public:
    /// Canonical tokens plus every spelling used by the stage prompts.
    static SignalAliasTable standard();

    void add(std::string_view token, Signal canonical);
    std::optional<Signal> lookup(std::string_view token) const;
    const std::map<std::string, Signal>& entries() const noexcept { return by_interior_; }

private:
    std::map<std::string, Signal> by_interior_;
};

struct ParseOptions {
    std::string code_tag = "python";
    /// When non-empty, overrides the stage's admissible set (used by ablations).
    std::set<Signal> allowed;
};

/// Turns a raw reply into an Action. Cells come back without ids.
Action parse_action(std::string_view raw, AgentState stage, const SignalAliasTable& aliases,
                    const ParseOptions& options = {});

/// Splits fenced blocks and surrounding prose into cells; no signal handling.
std::vector<Cell> parse_cells(std::string_view text, std::string_view code_tag);

/// Returns the goal text if `cell` is a "[STEP GOAL]: ..." markdown cell.
std::optional<std::string> step_goal_of(const Cell& cell);

}  // namespace cellflow
