#include "cellflow/orchestrator.hpp"

#include <algorithm>
#include <regex>

namespace cellflow {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

// ---------------------------------------------------------------------------
// Configuration

void SessionConfig::validate() const {
    budgets.validate();
    if (model.empty()) throw OrchestratorError(OrchestratorErrorCode::InvalidConfig, "model must be set");
    if (!(temperature >= 0)) throw OrchestratorError(OrchestratorErrorCode::InvalidConfig, "temperature must be >= 0");
    if (!(timeout_seconds > 0)) throw OrchestratorError(OrchestratorErrorCode::InvalidConfig, "timeout must be > 0");
    if (retry_on_parse_error < 0 || max_repair_reentries < 0) {
        throw OrchestratorError(OrchestratorErrorCode::InvalidConfig, "retry counts must be >= 0");
    }
    if (language_tag.empty()) throw OrchestratorError(OrchestratorErrorCode::InvalidConfig, "language tag is empty");
    if (visual_tool.limit < 0) throw OrchestratorError(OrchestratorErrorCode::InvalidConfig, "visual tool limit < 0");
}

void to_json(json& j, const SessionConfig& c) {
    j = json{{"model", c.model},
             {"temperature", c.temperature},
             {"max_tokens", c.max_tokens ? json(*c.max_tokens) : json(nullptr)},
             {"budgets", c.budgets},
             {"language_tag", c.language_tag},
             {"workdir", c.workdir.generic_string()},
             {"ablations", {{"disable_planning", c.ablations.disable_planning},
                            {"disable_repair", c.ablations.disable_repair}}},
             {"timeout_seconds", c.timeout_seconds},
             {"retry_on_parse_error", c.retry_on_parse_error},
             {"max_repair_reentries", c.max_repair_reentries},
             {"truncation", {{"head_chars", c.truncation.head_chars}, {"tail_chars", c.truncation.tail_chars}}},
             {"visual_tool", {{"enabled", c.visual_tool.enabled},
                              {"limit", c.visual_tool.limit},
                              {"judge_model", c.visual_tool.judge_model}}},
             {"tools", c.tools}};
}

void from_json(const json& j, SessionConfig& c) {
    c = SessionConfig{};
    c.model = j.value("model", c.model);
    c.temperature = j.value("temperature", c.temperature);
    if (j.contains("max_tokens") && !j["max_tokens"].is_null()) c.max_tokens = j["max_tokens"].get<std::int64_t>();
    if (j.contains("budgets")) c.budgets = j["budgets"].get<Budgets>();
    c.language_tag = j.value("language_tag", c.language_tag);
    if (j.contains("workdir")) c.workdir = j["workdir"].get<std::string>();
    if (j.contains("ablations")) {
        c.ablations.disable_planning = j["ablations"].value("disable_planning", false);
        c.ablations.disable_repair = j["ablations"].value("disable_repair", false);
    }
    c.timeout_seconds = j.value("timeout_seconds", c.timeout_seconds);
    c.retry_on_parse_error = j.value("retry_on_parse_error", c.retry_on_parse_error);
    c.max_repair_reentries = j.value("max_repair_reentries", c.max_repair_reentries);
    if (j.contains("truncation")) {
        c.truncation.head_chars = j["truncation"].value("head_chars", c.truncation.head_chars);
        c.truncation.tail_chars = j["truncation"].value("tail_chars", c.truncation.tail_chars);
    }
    if (j.contains("visual_tool")) {
        c.visual_tool.enabled = j["visual_tool"].value("enabled", c.visual_tool.enabled);
        c.visual_tool.limit = j["visual_tool"].value("limit", c.visual_tool.limit);
        c.visual_tool.judge_model = j["visual_tool"].value("judge_model", c.visual_tool.judge_model);
    }
    if (j.contains("tools")) c.tools = j["tools"].get<std::vector<ToolDescriptor>>();
}

std::string_view to_string(Outcome o) {
    switch (o) {
        case Outcome::Fulfilled: return "Fulfilled";
        case Outcome::BudgetStop: return "BudgetStop";
        case Outcome::Timeout: return "Timeout";
        case Outcome::Aborted: return "Aborted";
    }
    return "?";
}

std::optional<Outcome> outcome_from_string(std::string_view s) {
    for (auto o : {Outcome::Fulfilled, Outcome::BudgetStop, Outcome::Timeout, Outcome::Aborted}) {
        if (to_string(o) == s) return o;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Session

namespace {

/// Unwinds the loop when the run must end outside the transition function.
struct StopRun {
    Outcome outcome;
    std::string rule;
    std::string reason;
};

json feedback_json(const Feedback& f) { return f; }

json signal_json(std::optional<Signal> s) { return s ? json(to_string(*s)) : json(nullptr); }

std::string action_space_of(const std::string& prompt_template) {
    constexpr std::string_view kLabel = "Available Action Space:";
    const auto at = prompt_template.find(kLabel);
    if (at == std::string::npos) return {};
    const auto start = at + kLabel.size();
    const auto end = prompt_template.find('\n', start);
    auto line = prompt_template.substr(start, end == std::string::npos ? std::string::npos : end - start);
    const auto first = line.find_first_not_of(' ');
    return first == std::string::npos ? std::string{} : line.substr(first);
}

std::string seconds_text(double s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", s);
    return buf;
}

}  // namespace

struct Session::Impl {
    Session& self;
    SessionConfig& cfg;
    SessionDeps deps;
    std::unique_ptr<Transcript> own_transcript;
    Transcript* transcript = nullptr;

    mutable std::mutex mu;
    ContextHistory history;
    Counters counters;
    CostLedger ledger;
    Money base_cost;
    CellIdSource ids;

    std::mutex visual_mu;
    VisualToolState visual;
    std::unique_ptr<ToolBridge> bridge;

    bool initialized = false;
    bool config_echoed = false;
    std::atomic<bool> cancelled{false};
    std::optional<Outcome> last_outcome;

    // Per-instruction state.
    Clock::time_point task_start;
    std::vector<AgentState> states;
    std::int64_t instruction_index = 0;
    std::string stop_rule;
    std::vector<Cell> stop_summary;
    std::vector<std::string> initial_files;

    Impl(Session& s, SessionConfig& c, SessionDeps d) : self(s), cfg(c), deps(std::move(d)), ledger(deps.prices) {
        if (!deps.llm) throw OrchestratorError(OrchestratorErrorCode::InvalidConfig, "session needs an LLM provider");
        if (!deps.kernel) throw OrchestratorError(OrchestratorErrorCode::InvalidConfig, "session needs a kernel");
        if (!deps.judge) deps.judge = deps.llm;
        if (deps.transcript) {
            transcript = deps.transcript;
        } else {
            own_transcript = std::make_unique<Transcript>();
            transcript = own_transcript.get();
        }
        if (!deps.prices.empty()) {
            deps.prices.at(cfg.model);
            if (cfg.visual_tool.enabled) deps.prices.at(cfg.visual_tool.judge_model);
        }
        visual.global_cnt = cfg.visual_tool.limit;
    }

    template <typename F>
    void locked(F&& f) {
        std::lock_guard lock(mu);
        f();
    }

    Event emit(EventType type, json payload) { return transcript->append(type, std::move(payload)); }

    double elapsed() const { return std::chrono::duration<double>(Clock::now() - task_start).count(); }

    void check_time() {
        if (cancelled) throw StopRun{Outcome::Aborted, "cancelled", "session cancelled"};
        if (elapsed() >= cfg.timeout_seconds) {
            throw StopRun{Outcome::Timeout, "timeout_seconds",
                          "time limit of " + seconds_text(cfg.timeout_seconds) + " s reached"};
        }
    }

    std::string current_goal() const {
        const auto step = history.tree.current_step();
        return step == history.tree.root() ? std::string{} : history.tree.node(step).goal_text;
    }

    const std::string& current_instruction() const { return history.instructions.back().text; }

    // -- model calls ----------------------------------------------------------

    Completion call_model(LlmProvider& provider, const std::vector<ChatMessage>& messages,
                          const CompletionParams& params) {
        return provider.complete(messages, params);
    }

    void record_call(const std::string& purpose, std::optional<AgentState> stage, const std::vector<ChatMessage>& messages,
                     const CompletionParams& params, const Completion& c, json extra) {
        Money cost;
        locked([&] {
            cost = ledger.record(params.model, c.usage);
            ++counters.llm_calls;
        });
        json payload{{"purpose", purpose},
                     {"stage", stage ? json(to_string(*stage)) : json(nullptr)},
                     {"model", params.model},
                     {"temperature", params.temperature},
                     {"request_hash", request_hash(messages, params)},
                     {"messages", messages.size()},
                     {"reply", c.text},
                     {"usage", c.usage},
                     {"cost", cost.to_string()},
                     {"retries", c.retries}};
        for (auto& [k, v] : extra.items()) payload[k] = v;
        emit(EventType::LlmCall, std::move(payload));
    }

    CompletionParams agent_params() const { return CompletionParams{cfg.model, cfg.temperature, cfg.max_tokens}; }

    // -- parsing ----------------------------------------------------------------

    Action parse_turn(AgentState stage, bool opening, const std::string& text) {
        ParseOptions opts{cfg.language_tag, {}};
        if (stage == AgentState::Plan && cfg.ablations.disable_planning) {
            opts.allowed = {Signal::AdvanceNextStep, Signal::FulfilInstruction};
        }
        Action action;
        if (opening) {
            opts.allowed = {Signal::AdvanceNextStep};
            try {
                action = parse_action(text, AgentState::Plan, deps.aliases, opts);
            } catch (const ParseError& e) {
                if (e.code() != ParseErrorKind::NoSignal || text.find_first_not_of(" \t\r\n") == std::string::npos ||
                    text[text.find_first_not_of(" \t\r\n")] == '<') {
                    throw;
                }
                action.signal = ActionSignal{Signal::AdvanceNextStep, ""};
                action.stage = AgentState::Plan;
                action.cells = parse_cells(text, cfg.language_tag);
                if (action.cells.empty()) throw ParseError(ParseErrorKind::EmptyAction, "reply contains no cells");
            }
        } else {
            action = parse_action(text, stage, deps.aliases, opts);
        }

        const auto sig = action.signal.canonical;
        auto count = [&](CellKind k) {
            return std::count_if(action.cells.begin(), action.cells.end(), [k](const Cell& c) { return c.kind == k; });
        };
        if (sig == Signal::AdvanceNextStep || sig == Signal::IterateCurrentStep) {
            const bool has_goal = std::any_of(action.cells.begin(), action.cells.end(),
                                              [](const Cell& c) { return step_goal_of(c).has_value(); });
            if (!has_goal) {
                throw ParseError(ParseErrorKind::MissingStepGoal,
                                 "a markdown cell starting with \"[STEP GOAL]:\" is required");
            }
        }
        if (sig == Signal::IterateCurrentStep && history.tree.current_step() == history.tree.root()) {
            throw ParseError(ParseErrorKind::InadmissibleSignal, "there is no current step to iterate on");
        }
        if ((sig == Signal::FulfilInstruction || sig == Signal::DebugFailure) && count(CellKind::Markdown) == 0) {
            throw ParseError(ParseErrorKind::EmptyAction,
                             action.signal.raw + " requires a markdown cell with the summary or report");
        }
        if (sig == Signal::DebugSuccess && count(CellKind::Code) == 0) {
            throw ParseError(ParseErrorKind::EmptyAction, action.signal.raw + " requires the cleaned code cells");
        }

        const auto origin = origin_for(stage);
        for (auto& c : action.cells) {
            c.origin = origin;
            c.language_tag = cfg.language_tag;
        }
        action.stage = stage;
        return action;
    }

    std::string reminder(PromptKind kind, const ParseError& e) const {
        std::string line = "Format error: " + std::string(e.what()) + ".";
        const auto space = action_space_of(deps.prompts.text(kind));
        if (!space.empty()) {
            line += " Your response MUST start with exactly one of the action signals " + space + ".";
        } else {
            line += " Your response must include a markdown cell starting with \"[STEP GOAL]:\".";
        }
        return line;
    }

    /// nullopt when every attempt failed to parse.
    std::optional<Action> generate_turn(AgentState stage, bool opening) {
        const auto kind = prompt_for(stage, opening);
        const auto prompt = deps.prompts.render(kind, current_instruction(), current_goal());
        const auto base = assemble_context(history, stage, prompt, cfg.truncation);
        auto messages = base;
        const auto params = agent_params();
        for (int attempt = 0; attempt <= cfg.retry_on_parse_error; ++attempt) {
            check_time();
            auto reply = call_model(*deps.llm, messages, params);
            json extra{{"prompt", to_string(kind)}, {"attempt", attempt}};
            try {
                auto action = parse_turn(stage, opening, reply.text);
                record_call("agent", stage, messages, params, reply, extra);
                for (auto& c : action.cells) c.id = ids.next();
                return action;
            } catch (const ParseError& e) {
                extra["parse_error"] = {{"kind", to_string(e.code())}, {"message", e.what()}};
                record_call("agent", stage, messages, params, reply, extra);
                messages = base;
                messages.push_back(ChatMessage::assistant(reply.text));
                messages.push_back(ChatMessage::user(reminder(kind, e)));
            }
            check_time();
        }
        return std::nullopt;
    }

    // -- execution ------------------------------------------------------------------

    ExecResult execute(const std::vector<Cell>& cells) {
        check_time();
        const bool any_code = std::any_of(cells.begin(), cells.end(), [](const Cell& c) { return c.is_code(); });
        if (!any_code) {
            ExecResult r;
            r.cells = cells;
            return r;
        }
        const auto remaining = std::chrono::duration<double>(cfg.timeout_seconds - elapsed());
        auto r = execute_cells(*deps.kernel, cells,
                               std::max(std::chrono::milliseconds(1),
                                        std::chrono::duration_cast<std::chrono::milliseconds>(remaining)));
        return r;
    }

    /// Emits the execution event, then stops the run if the kernel died or time ran out.
    void after_execution(AgentState stage, const ExecResult& r, std::optional<NodeId> node, json tree_op) {
        json payload{{"stage", to_string(stage)},
                     {"cells", r.cells},
                     {"feedback", feedback_json(r.feedback)},
                     {"aborted_at_cell", r.aborted_at_cell ? json(*r.aborted_at_cell) : json(nullptr)},
                     {"elapsed_seconds", r.elapsed_seconds}};
        if (node) payload["node_id"] = *node;
        if (!tree_op.is_null()) payload["tree_op"] = std::move(tree_op);
        emit(EventType::Execution, std::move(payload));
        if (!deps.kernel->alive()) {
            throw ExecutorError(ExecutorErrorCode::KernelDead, "kernel died during execution");
        }
        // Cells only ever run against the session's remaining time.
        if (r.feedback.detail && r.feedback.detail->name == kTimeoutError) {
            throw StopRun{Outcome::Timeout, "timeout_seconds",
                          "time limit of " + seconds_text(cfg.timeout_seconds) + " s reached"};
        }
        check_time();
    }

    // -- transitions ------------------------------------------------------------------

    void enter_state(AgentState q) {
        locked([&] {
            switch (q) {
                case AgentState::Plan: ++counters.planning_entries; break;
                case AgentState::Exec: ++counters.exec_entries_current_step; break;
                case AgentState::Debug: ++counters.debug_attempts_current_episode; break;
                case AgentState::Filter:
                case AgentState::Idle: break;
            }
        });
        states.push_back(q);
        self.state_ = q;
    }

    void stop_with_budget(const std::string& rule, const std::string& detail) {
        stop_rule = rule;
        auto summary = Cell::markdown("Stopped before the instruction was fulfilled: " + detail, Origin::Plan);
        summary.id = ids.next();
        summary.language_tag = cfg.language_tag;
        stop_summary = {summary};
    }

    std::string budget_detail(ForcedRule rule) const {
        std::int64_t limit = 0;
        switch (rule) {
            case ForcedRule::DebugBudget: limit = cfg.budgets.max_debug_number; break;
            case ForcedRule::ExecutionBudget: limit = cfg.budgets.max_execution_number; break;
            case ForcedRule::PlanningBudget: limit = cfg.budgets.max_planning_number; break;
            case ForcedRule::NodeBudget: limit = cfg.budgets.max_planning_execution_number.value_or(0); break;
        }
        return "the " + std::string(to_string(rule)) + " budget (" + std::to_string(limit) + ") was exhausted.";
    }

    /// Moves to `requested` through the guardrails, recording either a
    /// transition or a forced move. `initial_rule` marks a move that is
    /// already forced (e.g. by parse exhaustion) before budgets apply.
    AgentState move(AgentState from, AgentState requested, std::optional<Signal> signal, const std::string& raw,
                    const Feedback& feedback, std::optional<AgentState> resume = std::nullopt,
                    std::optional<std::string> initial_rule = std::nullopt,
                    std::optional<Signal> synthetic = std::nullopt, bool repair_disabled = false) {
        std::vector<std::string> rules;
        if (initial_rule) rules.push_back(*initial_rule);
        AgentState target = requested;
        std::optional<ForcedRule> last_budget;
        for (int guard = 0; guard < 4; ++guard) {
            Counters snapshot;
            locked([&] { snapshot = counters; });
            const auto d = apply_budgets(target, snapshot, cfg.budgets);
            if (!d.forced) break;
            rules.emplace_back(to_string(d.forced->rule));
            if (!synthetic) synthetic = d.forced->synthetic;
            last_budget = d.forced->rule;
            if (d.state == target) break;
            target = d.state;
        }

        if (rules.empty()) {
            json payload{{"from", to_string(from)},
                         {"to", to_string(target)},
                         {"signal", signal_json(signal)},
                         {"raw_signal", raw},
                         {"feedback", feedback_json(feedback)}};
            if (resume) payload["resume"] = to_string(*resume);
            if (repair_disabled) payload["repair_disabled"] = true;
            emit(EventType::Transition, std::move(payload));
        } else {
            json payload{{"from", to_string(from)},
                         {"requested", to_string(requested)},
                         {"to", to_string(target)},
                         {"rule", rules.back()},
                         {"rules", rules},
                         {"signal", signal_json(signal)},
                         {"feedback", feedback_json(feedback)},
                         {"synthetic_signal", signal_json(synthetic)},
                         {"forced", true}};
            if (resume) payload["resume"] = to_string(*resume);
            emit(EventType::Forced, std::move(payload));
            if (target == AgentState::Idle && stop_rule.empty()) {
                if (last_budget) {
                    stop_with_budget(std::string(to_string(*last_budget)), budget_detail(*last_budget));
                } else {
                    stop_with_budget(rules.back(), "no well-formed response within the retry limit.");
                }
            }
        }
        enter_state(target);
        return target;
    }

    // -- stage turns ------------------------------------------------------------------

    json action_payload(const Action& a) const {
        json j = a;
        return j;
    }

    AgentState plan_turn(bool opening) {
        auto action = generate_turn(AgentState::Plan, opening);
        if (!action) {
            return move(AgentState::Plan, AgentState::Idle, std::nullopt, "", Feedback::ok(), std::nullopt,
                        std::string(kParseRetryRule), Signal::FulfilInstruction);
        }
        const auto sig = action->signal.canonical;
        if (sig == Signal::FulfilInstruction) {
            locked([&] { history.instructions.back().conclusion = action->cells; });
            emit(EventType::Action, action_payload(*action));
            return move(AgentState::Plan, next_state(AgentState::Plan, sig, Feedback::ok()), sig, action->signal.raw,
                        Feedback::ok());
        }

        const auto goal_at = static_cast<std::size_t>(
            std::find_if(action->cells.begin(), action->cells.end(),
                         [](const Cell& c) { return step_goal_of(c).has_value(); }) -
            action->cells.begin());
        const auto goal = *step_goal_of(action->cells[goal_at]);
        NodeId node = 0;
        json op;
        if (sig == Signal::IterateCurrentStep) {
            std::vector<Cell> observations(action->cells.begin(), action->cells.begin() + goal_at);
            std::vector<Cell> rest(action->cells.begin() + goal_at, action->cells.end());
            op = op_replace(observations, goal, rest);
            locked([&] {
                node = history.tree.backtrack_replace(observations, goal, rest);
                counters.nonroot_nodes = history.tree.count_nonroot();
                counters.exec_entries_current_step = 0;
            });
        } else {
            op = op_advance(goal, action->cells);
            locked([&] {
                node = history.tree.advance(goal, action->cells);
                counters.nonroot_nodes = history.tree.count_nonroot();
                counters.exec_entries_current_step = 0;
            });
        }
        auto payload = action_payload(*action);
        payload["node_id"] = node;
        payload["tree_op"] = op;
        emit(EventType::Action, std::move(payload));

        const auto cells = history.tree.node(node).cells;
        auto r = execute(cells);
        locked([&] { history.tree.record_execution(node, r.cells, r.feedback.error); });
        after_execution(AgentState::Plan, r, node, op_record_execution(node, r.cells, r.feedback.error));
        return after_feedback(AgentState::Plan, *action, r.feedback, node);
    }

    AgentState exec_turn() {
        auto action = generate_turn(AgentState::Exec, false);
        if (!action) {
            return move(AgentState::Exec, AgentState::Plan, std::nullopt, "", Feedback::ok(), std::nullopt,
                        std::string(kParseRetryRule), Signal::EndStep);
        }
        std::optional<NodeId> node;
        auto payload = action_payload(*action);
        if (!action->cells.empty()) {
            const auto op = op_exec_turn(action->cells);
            locked([&] {
                node = history.tree.add_exec_turn(action->cells);
                counters.nonroot_nodes = history.tree.count_nonroot();
            });
            payload["node_id"] = *node;
            payload["tree_op"] = op;
        }
        emit(EventType::Action, std::move(payload));
        if (!node) {
            return move(AgentState::Exec, next_state(AgentState::Exec, action->signal.canonical, Feedback::ok()),
                        action->signal.canonical, action->signal.raw, Feedback::ok());
        }
        auto r = execute(action->cells);
        locked([&] { history.tree.record_execution(*node, r.cells, r.feedback.error); });
        after_execution(AgentState::Exec, r, node, op_record_execution(*node, r.cells, r.feedback.error));
        return after_feedback(AgentState::Exec, *action, r.feedback, *node);
    }

    AgentState after_feedback(AgentState stage, const Action& action, const Feedback& f, NodeId node) {
        const auto sig = action.signal.canonical;
        if (!f.error) return move(stage, next_state(stage, sig, f), sig, action.signal.raw, f);
        if (cfg.ablations.disable_repair) {
            return move(stage, compute_resume(stage, sig), sig, action.signal.raw, f, std::nullopt, std::nullopt,
                        std::nullopt, true);
        }
        locked([&] {
            counters.debug_attempts_current_episode = 0;
            ++counters.repair_episodes;
        });
        const auto q = move(stage, next_state(stage, sig, f), sig, action.signal.raw, f);
        return repair(node, stage, sig, f, q);
    }

    AgentState repair(NodeId failed, AgentState origin_state, Signal origin_signal, const Feedback& origin_feedback,
                      AgentState q) {
        const auto resume = compute_resume(origin_state, origin_signal);
        locked([&] { history.repair_turns.clear(); });
        int reentries_left = cfg.max_repair_reentries;
        std::int64_t debug_turns = 0;
        RepairOutcome outcome;
        outcome.resolved_error = origin_feedback.detail;
        std::optional<AgentState> settled;  // set when a forced move already left Filter
        Signal filter_signal = Signal::DebugFailure;
        std::string filter_raw;

        while (true) {
            while (q == AgentState::Debug) {
                auto action = generate_turn(AgentState::Debug, false);
                if (!action) {
                    q = move(AgentState::Debug, AgentState::Filter, std::nullopt, "", Feedback::ok(), std::nullopt,
                             std::string(kParseRetryRule), Signal::EndDebug);
                    outcome.forced = true;
                    break;
                }
                ++debug_turns;
                emit(EventType::Action, action_payload(*action));
                auto r = execute(action->cells);
                locked([&] {
                    history.repair_turns.insert(history.repair_turns.end(), r.cells.begin(), r.cells.end());
                });
                after_execution(AgentState::Debug, r, std::nullopt, nullptr);
                const auto sig = action->signal.canonical;
                q = move(AgentState::Debug, next_state(AgentState::Debug, sig, r.feedback), sig, action->signal.raw,
                         r.feedback);
                if (q == AgentState::Filter && sig != Signal::EndDebug) outcome.forced = true;
            }

            auto action = generate_turn(AgentState::Filter, false);
            if (!action) {
                outcome.kind = RepairOutcome::Kind::Failure;
                outcome.forced = true;
                outcome.cells = {synthetic_report("post-debugging produced no well-formed response", origin_feedback)};
                settled = move(AgentState::Filter, resume, std::nullopt, "", Feedback::ok(), resume,
                               std::string(kParseRetryRule), Signal::DebugFailure);
                break;
            }
            emit(EventType::Action, action_payload(*action));
            filter_signal = action->signal.canonical;
            filter_raw = action->signal.raw;
            if (filter_signal == Signal::DebugFailure) {
                outcome.kind = RepairOutcome::Kind::Failure;
                outcome.cells = {merge_report(action->cells)};
                break;
            }
            auto r = execute(action->cells);
            after_execution(AgentState::Filter, r, std::nullopt, nullptr);
            if (!r.feedback.error) {
                outcome.kind = RepairOutcome::Kind::Success;
                outcome.cells = r.cells;
                break;
            }
            if (reentries_left > 0) {
                --reentries_left;
                locked([&] {
                    history.repair_turns = r.cells;
                    counters.debug_attempts_current_episode = 0;
                    ++counters.repair_episodes;
                });
                q = move(AgentState::Filter, next_state(AgentState::Filter, filter_signal, r.feedback), filter_signal,
                         filter_raw, r.feedback);
                continue;
            }
            outcome.kind = RepairOutcome::Kind::Failure;
            outcome.forced = true;
            outcome.cells = {synthetic_report("the cleaned code failed again with " + r.feedback.detail->name + ": " +
                                                  r.feedback.detail->value,
                                              origin_feedback)};
            settled = move(AgentState::Filter, resume, filter_signal, filter_raw, r.feedback, resume,
                           std::string("max_repair_reentries"), Signal::DebugFailure);
            break;
        }

        outcome.episode_turns = debug_turns;
        const auto op = op_splice(failed, outcome);
        locked([&] {
            history.tree.splice_repair(failed, outcome);
            history.repair_turns.clear();
        });
        emit(EventType::RepairOutcome, json{{"node_id", failed}, {"outcome", outcome}, {"tree_op", op}});
        if (settled) return *settled;
        return move(AgentState::Filter, next_state(AgentState::Filter, filter_signal, Feedback::ok(), resume),
                    filter_signal, filter_raw, Feedback::ok(), resume);
    }

    Cell synthetic_report(const std::string& what, const Feedback& origin) {
        std::string text = "Debugging report: " + what + ".";
        if (origin.detail) {
            text += " The original error " + origin.detail->name + ": " + origin.detail->value + " remains unresolved.";
        }
        auto c = Cell::markdown(text, Origin::Filter);
        c.id = ids.next();
        c.language_tag = cfg.language_tag;
        return c;
    }

    Cell merge_report(const std::vector<Cell>& cells) {
        std::string text;
        std::string id;
        for (const auto& c : cells) {
            if (c.kind != CellKind::Markdown) continue;
            if (id.empty()) id = c.id;
            if (!text.empty()) text += "\n\n";
            text += c.source;
        }
        auto report = Cell::markdown(text, Origin::Filter);
        report.id = id;
        report.language_tag = cfg.language_tag;
        return report;
    }

    // -- lifecycle -------------------------------------------------------------------

    void bootstrap_kernel() {
        if (cfg.visual_tool.enabled && !bridge) {
            bridge = std::make_unique<ToolBridge>([this](const std::filesystem::path& path, const std::string& req,
                                                         const std::string& query) { return run_visual(path, req, query); });
        }
        if (bridge) {
            deps.kernel->run("bootstrap", "import os\nos.environ['CELLFLOW_TOOL_BRIDGE'] = '" + bridge->url() + "'",
                             std::chrono::seconds(60));
        }
    }

    std::string run_visual(const std::filesystem::path& path, const std::string& req, const std::string& query) {
        std::lock_guard lock(visual_mu);
        const CompletionParams params{cfg.visual_tool.judge_model, cfg.temperature, std::nullopt};
        return evaluate_image(path, req, query, visual, *deps.judge, params,
                              [&](const std::vector<ChatMessage>& messages, const Completion& c) {
                                  record_call("visual_tool", self.state_.load(), messages, params, c,
                                              json{{"evaluation_cnt", visual.evaluation_cnt + 1}});
                              });
    }

    void initialize() {
        bootstrap_kernel();
        auto tools = cfg.tools;
        if (cfg.visual_tool.enabled) tools.push_back(visual_tool_descriptor(cfg.visual_tool.limit));
        const auto env = scan_environment(deps.kernel->workdir(), cfg.language_tag);
        initial_files = env.files;
        auto pre = inject_tools(tools, env, deps.kernel, ids);
        locked([&] { history.preamble = std::move(pre.cells); });
        initialized = true;
    }

    SessionResult run_instruction(const std::string& text) {
        if (text.find_first_not_of(" \t\r\n") == std::string::npos) {
            throw OrchestratorError(OrchestratorErrorCode::EmptyInstruction, "instruction is empty");
        }
        self.running_ = true;
        task_start = Clock::now();
        states.clear();
        stop_rule.clear();
        stop_summary.clear();
        {
            std::lock_guard lock(visual_mu);
            visual.evaluation_cnt = 0;
        }

        SessionResult result;
        try {
            if (!initialized) initialize();
            locked([&] {
                history.instructions.push_back({text, {}});
                history.tree.begin_instruction();
                counters.exec_entries_current_step = 0;
                counters.debug_attempts_current_episode = 0;
            });
            instruction_index = static_cast<std::int64_t>(history.instructions.size()) - 1;
            json payload{{"instruction", text}, {"index", instruction_index}, {"tree_op", op_begin_instruction()}};
            if (!config_echoed) {
                payload["config"] = cfg;
                payload["preamble"] = history.preamble;
                payload["workdir_files"] = initial_files;
                payload["prices"] = deps.prices.to_json();
                config_echoed = true;
            }
            emit(EventType::UserInput, std::move(payload));

            auto q = move(AgentState::Idle, AgentState::Plan, std::nullopt, "", Feedback::ok());
            bool opening = true;
            while (q != AgentState::Idle) {
                if (q == AgentState::Plan) {
                    q = plan_turn(opening);
                    opening = false;
                } else if (q == AgentState::Exec) {
                    q = exec_turn();
                } else {
                    throw Error("orchestrator reached " + std::string(to_string(q)) + " outside a repair episode");
                }
            }
            result.outcome = stop_rule.empty() ? Outcome::Fulfilled : Outcome::BudgetStop;
            result.stop_rule = stop_rule;
        } catch (const StopRun& s) {
            result.outcome = s.outcome;
            result.stop_rule = s.rule;
            result.reason = s.reason;
        } catch (const LlmError& e) {
            result.outcome = Outcome::Aborted;
            result.stop_rule = "llm_unavailable";
            result.reason = e.what();
        } catch (const ExecutorError& e) {
            result.outcome = Outcome::Aborted;
            result.stop_rule = "executor_crashed";
            result.reason = e.what();
        }

        if (result.outcome == Outcome::Timeout || result.outcome == Outcome::Aborted) {
            auto note = Cell::markdown("Stopped before the instruction was fulfilled: " + result.reason + ".",
                                       Origin::Plan);
            note.id = ids.next();
            note.language_tag = cfg.language_tag;
            stop_summary = {note};
        }
        if (!stop_summary.empty() && !history.instructions.empty()) {
            locked([&] {
                auto& conclusion = history.instructions.back().conclusion;
                conclusion.insert(conclusion.end(), stop_summary.begin(), stop_summary.end());
                history.repair_turns.clear();
            });
        }

        result.wall_time_seconds =
            result.outcome == Outcome::Timeout ? cfg.timeout_seconds : std::min(elapsed(), cfg.timeout_seconds);
        locked([&] {
            result.history = history;
            result.counters = counters;
            result.cost = base_cost + ledger.total();
        });
        result.states = states;
        last_outcome = result.outcome;
        if (result.outcome == Outcome::Aborted) self.dead_ = true;

        json payload{{"outcome", to_string(result.outcome)},
                     {"stop_rule", result.stop_rule},
                     {"reason", result.reason},
                     {"instruction", instruction_index},
                     {"counters", result.counters},
                     {"cost", result.cost.to_string()},
                     {"cell_ids_issued", ids.issued()},
                     {"summary_cells", stop_summary},
                     {"wall_time_seconds", result.wall_time_seconds}};
        emit(EventType::Final, std::move(payload));
        self.state_ = AgentState::Idle;
        self.running_ = false;
        return result;
    }
};

Session::Session(SessionConfig config, SessionDeps deps) : config_(std::move(config)) {
    config_.validate();
    impl_ = std::make_unique<Impl>(*this, config_, std::move(deps));
}

Session::~Session() = default;

SessionResult Session::run(const std::string& instruction) {
    if (running_) throw OrchestratorError(OrchestratorErrorCode::Busy, "session is running");
    if (dead_) throw OrchestratorError(OrchestratorErrorCode::SessionDead, "session was aborted");
    return impl_->run_instruction(instruction);
}

SessionResult Session::resume(const std::string& followup) {
    if (running_) throw OrchestratorError(OrchestratorErrorCode::Busy, "session is running");
    if (dead_ || impl_->last_outcome == Outcome::Aborted) {
        throw OrchestratorError(OrchestratorErrorCode::SessionDead, "session was aborted");
    }
    return impl_->run_instruction(followup);
}

SessionResult Session::resume_from(const RecoveredSession& recovered, const std::string& followup) {
    if (running_) throw OrchestratorError(OrchestratorErrorCode::Busy, "session is running");
    if (recovered.last_outcome == Outcome::Aborted) {
        throw OrchestratorError(OrchestratorErrorCode::SessionDead, "the recorded session was aborted");
    }
    if (followup.find_first_not_of(" \t\r\n") == std::string::npos) {
        throw OrchestratorError(OrchestratorErrorCode::EmptyInstruction, "instruction is empty");
    }
    auto& im = *impl_;
    im.locked([&] {
        im.history = recovered.history;
        im.counters = recovered.counters;
        im.base_cost = recovered.cost;
    });
    im.ids.advance_to(recovered.cell_ids_issued);
    im.config_echoed = true;
    im.initialized = true;
    im.last_outcome = recovered.last_outcome;

    im.bootstrap_kernel();
    std::vector<Cell> restore;
    for (const auto& c : recovered.history.preamble) {
        if (c.is_code()) restore.push_back(c);
    }
    for (const auto& c : recovered.history.tree.context_cells()) {
        if (c.is_code()) restore.push_back(c);
    }
    for (const auto& c : restore) {
        im.deps.kernel->run(c.id, c.source, std::chrono::seconds(600));
        if (!im.deps.kernel->alive()) {
            throw OrchestratorError(OrchestratorErrorCode::SessionDead, "kernel died while restoring the session");
        }
    }
    return im.run_instruction(followup);
}

void Session::interrupt() {
    if (running_ && impl_->deps.kernel->alive()) impl_->deps.kernel->interrupt();
}

void Session::cancel() {
    impl_->cancelled = true;
    interrupt();
}

Counters Session::counters() const {
    std::lock_guard lock(impl_->mu);
    return impl_->counters;
}

Money Session::cost() const {
    std::lock_guard lock(impl_->mu);
    return impl_->base_cost + impl_->ledger.total();
}

ContextHistory Session::history() const {
    std::lock_guard lock(impl_->mu);
    return impl_->history;
}

std::vector<Cell> Session::notebook_cells() const {
    std::lock_guard lock(impl_->mu);
    return cellflow::notebook_cells(impl_->history);
}

std::vector<Cell> notebook_cells(const ContextHistory& history) {
    std::vector<Cell> out = history.preamble;
    for (std::size_t i = 0; i < history.instructions.size(); ++i) {
        auto instr = Cell::markdown("[USER INSTRUCTION]:\n" + history.instructions[i].text, Origin::User);
        instr.id = "instruction-" + std::to_string(i + 1);
        out.push_back(std::move(instr));
        auto part = history.tree.context_cells(static_cast<std::int64_t>(i));
        out.insert(out.end(), part.begin(), part.end());
        const auto& conclusion = history.instructions[i].conclusion;
        out.insert(out.end(), conclusion.begin(), conclusion.end());
    }
    return out;
}

SessionResult run_task(const std::string& instruction, const SessionConfig& config, SessionDeps deps) {
    Session session(config, std::move(deps));
    return session.run(instruction);
}

// ---------------------------------------------------------------------------
// Recovery

namespace {

void scan_ids(const json& j, std::uint64_t& max_id) {
    static const std::regex id_re("^c([0-9]+)$");
    if (j.is_object()) {
        if (j.contains("id") && j["id"].is_string()) {
            std::smatch m;
            const auto s = j["id"].get<std::string>();
            if (std::regex_match(s, m, id_re)) max_id = std::max<std::uint64_t>(max_id, std::stoull(m[1]));
        }
        for (const auto& [_, v] : j.items()) scan_ids(v, max_id);
    } else if (j.is_array()) {
        for (const auto& v : j) scan_ids(v, max_id);
    }
}

}  // namespace

RecoveredSession recover_session(const std::vector<Event>& events) {
    RecoveredSession r;
    std::uint64_t max_id = 0;
    for (const auto& e : events) {
        const auto& p = e.payload;
        try {
            if (p.contains("tree_op")) r.history.tree.apply(p["tree_op"]);
            switch (e.type) {
                case EventType::UserInput:
                    if (p.contains("config")) r.config = p["config"];
                    if (p.contains("preamble")) r.history.preamble = p["preamble"].get<std::vector<Cell>>();
                    if (p.contains("prices")) r.prices = PriceTable::from_json(p["prices"]);
                    if (p.contains("workdir_files")) {
                        r.workdir_files = p["workdir_files"].get<std::vector<std::string>>();
                    }
                    r.history.instructions.push_back({p.value("instruction", ""), {}});
                    r.instructions.push_back(p.value("instruction", ""));
                    break;
                case EventType::Action:
                    if (p.value("stage", "") == "Plan" && p.value("signal", "") == "FulfilInstruction" &&
                        !r.history.instructions.empty()) {
                        r.history.instructions.back().conclusion = p["cells"].get<std::vector<Cell>>();
                    }
                    break;
                case EventType::Final:
                    if (p.contains("summary_cells") && !r.history.instructions.empty()) {
                        auto cells = p["summary_cells"].get<std::vector<Cell>>();
                        auto& conclusion = r.history.instructions.back().conclusion;
                        conclusion.insert(conclusion.end(), cells.begin(), cells.end());
                    }
                    if (p.contains("counters")) r.counters = p["counters"].get<Counters>();
                    if (p.contains("outcome")) r.last_outcome = outcome_from_string(p["outcome"].get<std::string>());
                    if (p.contains("cost")) r.cost = Money::parse(p["cost"].get<std::string>());
                    break;
                default: break;
            }
        } catch (const CorruptTranscript&) {
            throw;
        } catch (const std::exception& ex) {
            throw CorruptTranscript("event " + std::to_string(e.seq) + ": " + ex.what());
        }
        scan_ids(p, max_id);
    }
    if (r.config.is_null()) throw CorruptTranscript("transcript has no configuration event");
    r.cell_ids_issued = max_id;
    return r;
}

}  // namespace cellflow
