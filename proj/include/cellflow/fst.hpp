#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "cellflow/error.hpp"
#include "cellflow/signals.hpp"

namespace cellflow {

enum class FstErrorCode { IdleHasNoSignals, InadmissiblePair, InvalidOrigin, InvalidBudgets };

class FstError : public CodedError<FstErrorCode> {
public:
    using CodedError::CodedError;
};

struct ErrorDetail {
    std::string name;
    std::string value;
    std::string cell_id;

    friend bool operator==(const ErrorDetail&, const ErrorDetail&) = default;
};

/// Environment feedback for one executed action. `detail` is set iff error.
struct Feedback {
    bool error = false;
    std::optional<ErrorDetail> detail;

    static Feedback ok() { return {}; }
    static Feedback failure(ErrorDetail d) { return Feedback{true, std::move(d)}; }
    bool is_error() const noexcept { return error; }

    friend bool operator==(const Feedback&, const Feedback&) = default;
};

/// Transition guardrails. `max_planning_execution_number` is unbounded when unset.
struct Budgets {
    std::int64_t max_planning_number = 7;
    std::int64_t max_execution_number = 6;
    std::int64_t max_debug_number = 8;
    std::optional<std::int64_t> max_planning_execution_number = 15;

    /// Throws FstError(InvalidBudgets) unless every limit is positive.
    void validate() const;
};

struct Counters {
    std::int64_t planning_entries = 0;
    std::int64_t exec_entries_current_step = 0;
    std::int64_t debug_attempts_current_episode = 0;
    std::int64_t nonroot_nodes = 0;
    std::int64_t llm_calls = 0;
    std::int64_t repair_episodes = 0;

    friend bool operator==(const Counters&, const Counters&) = default;
};

enum class ForcedRule { DebugBudget, ExecutionBudget, PlanningBudget, NodeBudget };

std::string_view to_string(ForcedRule r);
std::optional<ForcedRule> forced_rule_from_string(std::string_view s);

struct ForcedMove {
    ForcedRule rule;
    AgentState requested;  // what the unconstrained machine wanted
    AgentState target;     // where the guardrail sends it
    Signal synthetic;      // signal recorded on behalf of the machine, flagged forced
};

struct BudgetDecision {
    AgentState state;
    std::optional<ForcedMove> forced;
};

std::set<Signal> admissible_signals(AgentState q);
bool is_admissible(AgentState q, Signal s) noexcept;

/// The transition function. `resume` is consulted when leaving Filter.
AgentState next_state(AgentState q, Signal sigma, const Feedback& f,
                      std::optional<AgentState> resume = std::nullopt);

/// Where control returns after post-filtering: the state the machine would
/// have entered had the erroring action succeeded.
AgentState compute_resume(AgentState pre_error_state, Signal pre_error_signal);

BudgetDecision apply_budgets(AgentState q_next, const Counters& counters, const Budgets& budgets);

/// Every (state, admissible signal, feedback) triple with its successor.
/// Successors that depend on the resume target are reported as "resume".
nlohmann::json transition_table_json();

void to_json(nlohmann::json& j, const Budgets& b);
void from_json(const nlohmann::json& j, Budgets& b);
void to_json(nlohmann::json& j, const Counters& c);
void from_json(const nlohmann::json& j, Counters& c);
void to_json(nlohmann::json& j, const Feedback& f);
void from_json(const nlohmann::json& j, Feedback& f);

}  // namespace cellflow
