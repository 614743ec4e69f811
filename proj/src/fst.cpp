#include "cellflow/fst.hpp"

namespace cellflow {

namespace {

std::string pair_name(AgentState q, Signal s) {
    return "(" + std::string(to_string(q)) + ", " + std::string(to_string(s)) + ")";
}

}  // namespace

void Budgets::validate() const {
    if (max_planning_number <= 0 || max_execution_number <= 0 || max_debug_number <= 0 ||
        (max_planning_execution_number && *max_planning_execution_number <= 0)) {
        throw FstError(FstErrorCode::InvalidBudgets, "all budgets must be positive");
    }
}

std::string_view to_string(ForcedRule r) {
    switch (r) {
        case ForcedRule::DebugBudget: return "max_debug_number";
        case ForcedRule::ExecutionBudget: return "max_execution_number";
        case ForcedRule::PlanningBudget: return "max_planning_number";
        case ForcedRule::NodeBudget: return "max_planning_execution_number";
    }
    return "?";
}

std::optional<ForcedRule> forced_rule_from_string(std::string_view s) {
    for (auto r : {ForcedRule::DebugBudget, ForcedRule::ExecutionBudget, ForcedRule::PlanningBudget,
                   ForcedRule::NodeBudget}) {
        if (to_string(r) == s) return r;
    }
    return std::nullopt;
}

std::set<Signal> admissible_signals(AgentState q) {
    switch (q) {
        case AgentState::Plan:
            return {Signal::AdvanceNextStep, Signal::IterateCurrentStep, Signal::FulfilInstruction};
        case AgentState::Exec: return {Signal::Await, Signal::EndStep};
        case AgentState::Debug: return {Signal::Await, Signal::EndDebug};
        case AgentState::Filter: return {Signal::DebugFailure, Signal::DebugSuccess};
        case AgentState::Idle: break;
    }
    throw FstError(FstErrorCode::IdleHasNoSignals, "Idle consumes user input, not action signals");
}

bool is_admissible(AgentState q, Signal s) noexcept {
    if (q == AgentState::Idle) return false;
    return admissible_signals(q).count(s) != 0;
}

AgentState next_state(AgentState q, Signal sigma, const Feedback& f, std::optional<AgentState> resume) {
    if (!is_admissible(q, sigma)) {
        throw FstError(FstErrorCode::InadmissiblePair, "inadmissible pair " + pair_name(q, sigma));
    }
    switch (q) {
        case AgentState::Plan:
            if (f.is_error()) return AgentState::Debug;
            return sigma == Signal::FulfilInstruction ? AgentState::Idle : AgentState::Exec;
        case AgentState::Exec:
            if (f.is_error()) return AgentState::Debug;
            return sigma == Signal::Await ? AgentState::Exec : AgentState::Plan;
        case AgentState::Debug:
            // Errors raised by debugging code are observations, not a nested repair.
            if (f.is_error() || sigma == Signal::Await) return AgentState::Debug;
            return AgentState::Filter;
        case AgentState::Filter:
            // Cleaned code that still fails reopens repair.
            if (sigma == Signal::DebugSuccess && f.is_error()) return AgentState::Debug;
            if (!resume) {
                throw FstError(FstErrorCode::InadmissiblePair,
                               "leaving Filter requires a resume target " + pair_name(q, sigma));
            }
            return *resume;
        case AgentState::Idle: break;
    }
    throw FstError(FstErrorCode::InadmissiblePair, "no transition from " + pair_name(q, sigma));
}

AgentState compute_resume(AgentState pre_error_state, Signal pre_error_signal) {
    if (pre_error_state != AgentState::Plan && pre_error_state != AgentState::Exec) {
        throw FstError(FstErrorCode::InvalidOrigin,
                       "repair can only start from Plan or Exec, not " + std::string(to_string(pre_error_state)));
    }
    return next_state(pre_error_state, pre_error_signal, Feedback::ok());
}

BudgetDecision apply_budgets(AgentState q_next, const Counters& c, const Budgets& b) {
    const bool nodes_exhausted =
        b.max_planning_execution_number && c.nonroot_nodes >= *b.max_planning_execution_number;
    switch (q_next) {
        case AgentState::Debug:
            if (c.debug_attempts_current_episode >= b.max_debug_number) {
                return {AgentState::Filter,
                        ForcedMove{ForcedRule::DebugBudget, q_next, AgentState::Filter, Signal::EndDebug}};
            }
            break;
        case AgentState::Exec:
            if (nodes_exhausted) {
                return {AgentState::Idle,
                        ForcedMove{ForcedRule::NodeBudget, q_next, AgentState::Idle, Signal::FulfilInstruction}};
            }
            if (c.exec_entries_current_step >= b.max_execution_number) {
                return {AgentState::Plan,
                        ForcedMove{ForcedRule::ExecutionBudget, q_next, AgentState::Plan, Signal::EndStep}};
            }
            break;
        case AgentState::Plan:
            if (c.planning_entries >= b.max_planning_number) {
                return {AgentState::Idle, ForcedMove{ForcedRule::PlanningBudget, q_next, AgentState::Idle,
                                                     Signal::FulfilInstruction}};
            }
            if (nodes_exhausted) {
                return {AgentState::Idle,
                        ForcedMove{ForcedRule::NodeBudget, q_next, AgentState::Idle, Signal::FulfilInstruction}};
            }
            break;
        case AgentState::Filter:
        case AgentState::Idle: break;
    }
    return {q_next, std::nullopt};
}

nlohmann::json transition_table_json() {
    nlohmann::json rows = nlohmann::json::array();
    for (auto q : kAllStates) {
        if (q == AgentState::Idle) continue;
        for (auto s : admissible_signals(q)) {
            for (bool err : {false, true}) {
                Feedback f;
                f.error = err;
                if (err) f.detail = ErrorDetail{};
                std::string next;
                if (q == AgentState::Filter && !(s == Signal::DebugSuccess && err)) {
                    next = "resume";
                } else {
                    next = std::string(to_string(next_state(q, s, f)));
                }
                rows.push_back({{"state", to_string(q)},
                                {"signal", to_string(s)},
                                {"token", canonical_token(s)},
                                {"feedback", err ? "error" : "no_error"},
                                {"next", next}});
            }
        }
    }
    return nlohmann::json{{"initial", "Idle"}, {"final", "Idle"}, {"transitions", rows}};
}

void to_json(nlohmann::json& j, const Budgets& b) {
    j = nlohmann::json{{"max_planning_number", b.max_planning_number},
                       {"max_execution_number", b.max_execution_number},
                       {"max_debug_number", b.max_debug_number},
                       {"max_planning_execution_number", nullptr}};
    if (b.max_planning_execution_number) j["max_planning_execution_number"] = *b.max_planning_execution_number;
}

void from_json(const nlohmann::json& j, Budgets& b) {
    b = Budgets{};
    b.max_planning_number = j.value("max_planning_number", b.max_planning_number);
    b.max_execution_number = j.value("max_execution_number", b.max_execution_number);
    b.max_debug_number = j.value("max_debug_number", b.max_debug_number);
    if (j.contains("max_planning_execution_number")) {
        const auto& v = j["max_planning_execution_number"];
        if (v.is_null()) b.max_planning_execution_number.reset();
        else b.max_planning_execution_number = v.get<std::int64_t>();
    }
}

void to_json(nlohmann::json& j, const Counters& c) {
    j = nlohmann::json{{"planning_entries", c.planning_entries},
                       {"exec_entries_current_step", c.exec_entries_current_step},
                       {"debug_attempts_current_episode", c.debug_attempts_current_episode},
                       {"nonroot_nodes", c.nonroot_nodes},
                       {"llm_calls", c.llm_calls},
                       {"repair_episodes", c.repair_episodes}};
}

void from_json(const nlohmann::json& j, Counters& c) {
    c.planning_entries = j.value("planning_entries", 0);
    c.exec_entries_current_step = j.value("exec_entries_current_step", 0);
    c.debug_attempts_current_episode = j.value("debug_attempts_current_episode", 0);
    c.nonroot_nodes = j.value("nonroot_nodes", 0);
    c.llm_calls = j.value("llm_calls", 0);
    c.repair_episodes = j.value("repair_episodes", 0);
}

void to_json(nlohmann::json& j, const Feedback& f) {
    j = nlohmann::json{{"kind", f.error ? "error" : "no_error"}};
    if (f.detail) {
        j["detail"] = {{"name", f.detail->name}, {"value", f.detail->value}, {"cell_id", f.detail->cell_id}};
    }
}

void from_json(const nlohmann::json& j, Feedback& f) {
    f = Feedback{};
    f.error = j.at("kind").get<std::string>() == "error";
    if (j.contains("detail")) {
        const auto& d = j["detail"];
        f.detail = ErrorDetail{d.value("name", ""), d.value("value", ""), d.value("cell_id", "")};
    }
}

}  // namespace cellflow
