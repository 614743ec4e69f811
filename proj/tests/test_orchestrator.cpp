#include <gtest/gtest.h>

#include <thread>

#include "cellflow/orchestrator.hpp"
#include "scenarios.hpp"

using namespace cellflow;
using namespace cftest;
using nlohmann::json;

namespace {

std::optional<std::string> simple_success(Turn t, int n, const std::vector<ChatMessage>&) {
    switch (t) {
        case Turn::Initial: return "<Advance to Next STEP>\n" + goal("load", "PRINT(loaded)");
        case Turn::Exec: return n == 0 ? "<await>\n" + py("PRINT(more)") : std::string("<end_step>");
        case Turn::Plan: return "<Fulfill USER INSTRUCTION>\n" + md("All done.");
        default: return std::nullopt;
    }
}

std::vector<std::string> state_names(const std::vector<AgentState>& states) {
    std::vector<std::string> out;
    for (auto s : states) out.emplace_back(to_string(s));
    return out;
}

}  // namespace

TEST(Orchestrator, HappyPathVisitsPlanExecPlanIdle) {
    Harness h(simple_success);
    const auto r = run_task("load the data", test_config(), h.deps());
    EXPECT_EQ(r.outcome, Outcome::Fulfilled);
    EXPECT_EQ(state_names(r.states), (std::vector<std::string>{"Plan", "Exec", "Exec", "Plan", "Idle"}));
    EXPECT_EQ(r.counters.llm_calls, 4);
    EXPECT_EQ(r.counters.planning_entries, 2);
    EXPECT_EQ(r.counters.nonroot_nodes, 2);
    ASSERT_EQ(r.history.instructions.size(), 1u);
    ASSERT_EQ(r.history.instructions[0].conclusion.size(), 1u);
    EXPECT_EQ(r.history.instructions[0].conclusion[0].source, "All done.");

    const auto events = h.transcript.events();
    EXPECT_EQ(events.front().type, EventType::UserInput);
    EXPECT_EQ(events.back().type, EventType::Final);
    EXPECT_EQ(events.back().payload["outcome"], "Fulfilled");
    const auto transitions = h.of_type(EventType::Transition);
    EXPECT_EQ(transitions.front().payload["from"], "Idle");
    EXPECT_EQ(transitions.front().payload["to"], "Plan");
    EXPECT_TRUE(h.of_type(EventType::Forced).empty());
}

TEST(Orchestrator, CellIdsAreUniqueAndMonotonic) {
    Harness h(simple_success);
    const auto r = run_task("load", test_config(), h.deps());
    std::set<std::string> seen;
    int last = 0;
    for (const auto& c : notebook_cells(r.history)) {
        if (c.id.rfind("instruction-", 0) == 0) continue;
        EXPECT_TRUE(seen.insert(c.id).second) << c.id;
        const int n = std::stoi(c.id.substr(1));
        EXPECT_GT(n, last);
        last = n;
    }
}

TEST(Orchestrator, BudgetExhaustionTerminatesWithinLimits) {
    Harness h(never_fixing);
    const auto r = run_task("never works", test_config(), h.deps());
    EXPECT_EQ(r.outcome, Outcome::BudgetStop);
    const auto shape = shape_of(h.transcript.events());
    ASSERT_FALSE(shape.debug_turns_per_episode.empty());
    for (int n : shape.debug_turns_per_episode) EXPECT_EQ(n, 8);
    EXPECT_LE(shape.max_exec_entries_per_step, 6);
    EXPECT_LE(shape.planning_entries, 7);
    EXPECT_LE(shape.nonroot_nodes, 15);
    EXPECT_TRUE(shape.terminated);
    EXPECT_EQ(shape.nonroot_nodes, r.history.tree.count_nonroot());
    ASSERT_FALSE(r.history.instructions[0].conclusion.empty());
    EXPECT_NE(r.history.instructions[0].conclusion.back().source.find("Stopped before the instruction was fulfilled"),
              std::string::npos);
    // Every forced move carries its rule and a synthetic signal.
    for (const auto& f : h.of_type(EventType::Forced)) {
        EXPECT_TRUE(f.payload["forced"].get<bool>());
        EXPECT_FALSE(f.payload["rule"].get<std::string>().empty());
        EXPECT_FALSE(f.payload["synthetic_signal"].is_null());
    }
}

TEST(Orchestrator, SmallBudgetsAreHonoredExactly) {
    Harness h(never_fixing);
    auto cfg = test_config();
    cfg.budgets.max_debug_number = 2;
    cfg.budgets.max_execution_number = 1;
    cfg.budgets.max_planning_number = 2;
    cfg.budgets.max_planning_execution_number = 3;
    const auto r = run_task("never works", cfg, h.deps());
    EXPECT_EQ(r.outcome, Outcome::BudgetStop);
    const auto shape = shape_of(h.transcript.events());
    for (int n : shape.debug_turns_per_episode) EXPECT_EQ(n, 2);
    EXPECT_LE(shape.max_exec_entries_per_step, 1);
    EXPECT_LE(shape.planning_entries, 2);
    EXPECT_LE(shape.nonroot_nodes, 3);
}

TEST(Orchestrator, RepairHygieneProperty) {
    int successes = 0, failures = 0;
    for (unsigned seed = 1; seed <= 60; ++seed) {
        const auto t = repair_hygiene_trial(seed);
        for (const auto& v : t.violations) ADD_FAILURE() << "seed " << seed << ": " << v;
        successes += t.successes;
        failures += t.failures;
    }
    // The generator must exercise both outcomes.
    EXPECT_GT(successes, 10);
    EXPECT_GT(failures, 10);
}

TEST(Orchestrator, PostFilterResumesPerResumeRule) {
    const auto cases = resume_cases();
    for (const auto& c : cases) {
        Harness h([&](Turn t, int n, const std::vector<ChatMessage>&) { return c.script(t, n); });
        const auto r = run_task("go", test_config(), h.deps());
        EXPECT_EQ(r.outcome, Outcome::Fulfilled) << c.name;
        int leaving_filter = 0;
        for (const auto& e : h.transcript.events()) {
            if ((e.type == EventType::Transition || e.type == EventType::Forced) && e.payload["from"] == "Filter") {
                ++leaving_filter;
                EXPECT_EQ(e.payload["to"], c.expected) << c.name;
                EXPECT_EQ(e.payload["resume"], c.expected) << c.name;
            }
        }
        EXPECT_EQ(leaving_filter, 1) << c.name;
    }
}

TEST(Orchestrator, FailedValidationReentersDebugOnce) {
    Harness h([](Turn t, int, const std::vector<ChatMessage>&) -> std::optional<std::string> {
        if (t == Turn::Initial) return "<Advance to Next STEP>\n" + goal("a", "RAISE(E)");
        if (t == Turn::Exec) return std::string("<end_step>");
        if (t == Turn::Plan) return "<Fulfill USER INSTRUCTION>\n" + md("ok");
        if (t == Turn::Debug) return std::string("<end_debug>");
        if (t == Turn::Filter) return "<debug_success>\n" + py("RAISE(Still)");
        return std::nullopt;
    });
    const auto r = run_task("go", test_config(), h.deps());
    EXPECT_EQ(r.outcome, Outcome::Fulfilled);
    EXPECT_EQ(r.counters.repair_episodes, 2);
    const auto outcomes = h.of_type(EventType::RepairOutcome);
    ASSERT_EQ(outcomes.size(), 1u);
    EXPECT_EQ(outcomes[0].payload["outcome"]["kind"], "failure");
    EXPECT_TRUE(outcomes[0].payload["outcome"]["forced"].get<bool>());
    const auto forced = h.of_type(EventType::Forced);
    ASSERT_EQ(forced.size(), 1u);
    EXPECT_EQ(forced[0].payload["rule"], "max_repair_reentries");
}

TEST(Orchestrator, DisableRepairSkipsDebugAndFilter) {
    Harness h(never_fixing);
    auto cfg = test_config();
    cfg.ablations.disable_repair = true;
    const auto r = run_task("never works", cfg, h.deps());
    EXPECT_EQ(r.outcome, Outcome::BudgetStop);
    for (auto s : r.states) {
        EXPECT_NE(s, AgentState::Debug);
        EXPECT_NE(s, AgentState::Filter);
    }
    for (const auto& e : h.transcript.events()) {
        if (e.type == EventType::Transition || e.type == EventType::Forced) {
            EXPECT_NE(e.payload["to"], "Debug");
            EXPECT_NE(e.payload["to"], "Filter");
        }
    }
    EXPECT_FALSE(h.of_type(EventType::Transition).empty());
    EXPECT_EQ(r.counters.repair_episodes, 0);
}

TEST(Orchestrator, DisablePlanningKeepsStepsLinear) {
    Harness h([](Turn t, int n, const std::vector<ChatMessage>& m) -> std::optional<std::string> {
        const bool reminded = m.back().text.rfind("Format error", 0) == 0;
        switch (t) {
            case Turn::Initial: return "<Advance to Next STEP>\n" + goal("s0");
            case Turn::Plan:
                if (!reminded) return "<Iterate on Current STEP>\n" + goal("retry " + std::to_string(n));
                return "<Advance to Next STEP>\n" + goal("next " + std::to_string(n));
            case Turn::Exec: return std::string("<end_step>");
            default: return std::nullopt;
        }
    });
    auto cfg = test_config();
    cfg.ablations.disable_planning = true;
    const auto r = run_task("go", cfg, h.deps());
    EXPECT_EQ(r.outcome, Outcome::BudgetStop);
    std::optional<NodeId> prev = r.history.tree.root();
    for (const auto& node : r.history.tree.nodes()) {
        if (node.kind != NodeKind::StepGoal) continue;
        EXPECT_NE(node.status, NodeStatus::Replaced);
        EXPECT_EQ(node.parent, prev);
        prev = node.id;
    }
    int rejected = 0;
    for (const auto& e : h.of_type(EventType::LlmCall)) {
        if (e.payload.contains("parse_error")) {
            EXPECT_EQ(e.payload["parse_error"]["kind"], "InadmissibleSignal");
            ++rejected;
        }
    }
    EXPECT_GT(rejected, 0);
}

TEST(Orchestrator, ParseRetriesAreCountedAndCharged) {
    Harness h([](Turn t, int n, const std::vector<ChatMessage>& m) -> std::optional<std::string> {
        if (t == Turn::Initial) return "<Advance to Next STEP>\n" + goal("a");
        if (t == Turn::Exec && n == 0) return std::string("I will now run the code.");
        if (t == Turn::Exec) {
            EXPECT_NE(m.back().text.find("Format error"), std::string::npos);
            EXPECT_NE(m.back().text.find("<await>"), std::string::npos);
            return std::string("<end_step>");
        }
        if (t == Turn::Plan) return "<Fulfill USER INSTRUCTION>\n" + md("ok");
        return std::nullopt;
    });
    auto deps = h.deps();
    deps.prices.set("gpt-4o", ModelPrice{Money::parse("0.0025"), Money::parse("0.01")});
    const auto r = run_task("go", test_config(), deps);
    EXPECT_EQ(r.outcome, Outcome::Fulfilled);
    const auto calls = h.of_type(EventType::LlmCall);
    EXPECT_EQ(static_cast<std::int64_t>(calls.size()), r.counters.llm_calls);
    EXPECT_EQ(calls.size(), 4u);
    Money sum;
    for (const auto& c : calls) sum += Money::parse(c.payload["cost"].get<std::string>());
    EXPECT_EQ(sum, r.cost);
    EXPECT_GT(r.cost, Money{});
}

TEST(Orchestrator, ParseExhaustionInPlanStops) {
    Harness h([](Turn, int, const std::vector<ChatMessage>&) -> std::optional<std::string> {
        return std::string("<nonsense>");
    });
    const auto r = run_task("go", test_config(), h.deps());
    EXPECT_EQ(r.outcome, Outcome::BudgetStop);
    EXPECT_EQ(r.stop_rule, std::string(kParseRetryRule));
    EXPECT_EQ(r.counters.llm_calls, 3);
}

TEST(Orchestrator, ParseExhaustionInExecReturnsToPlan) {
    Harness h([](Turn t, int, const std::vector<ChatMessage>&) -> std::optional<std::string> {
        if (t == Turn::Initial) return "<Advance to Next STEP>\n" + goal("a");
        if (t == Turn::Exec) return std::string("no signal here");
        if (t == Turn::Plan) return "<Fulfill USER INSTRUCTION>\n" + md("ok");
        return std::nullopt;
    });
    const auto r = run_task("go", test_config(), h.deps());
    EXPECT_EQ(r.outcome, Outcome::Fulfilled);
    const auto forced = h.of_type(EventType::Forced);
    ASSERT_EQ(forced.size(), 1u);
    EXPECT_EQ(forced[0].payload["to"], "Plan");
    EXPECT_EQ(forced[0].payload["synthetic_signal"], "EndStep");
}

TEST(Orchestrator, OpeningTurnWithoutSignalIsImplicitAdvance) {
    Harness h([](Turn t, int, const std::vector<ChatMessage>&) -> std::optional<std::string> {
        if (t == Turn::Initial) return goal("load");
        if (t == Turn::Exec) return std::string("<end_step>");
        if (t == Turn::Plan) return "<Fulfill USER INSTRUCTION>\n" + md("ok");
        return std::nullopt;
    });
    EXPECT_EQ(run_task("go", test_config(), h.deps()).outcome, Outcome::Fulfilled);
}

TEST(Orchestrator, TimeoutStopsWithElapsedEqualToLimit) {
    Harness h([](Turn t, int, const std::vector<ChatMessage>&) -> std::optional<std::string> {
        if (t == Turn::Initial) return "<Advance to Next STEP>\n" + goal("slow", "SLEEP(10000)");
        return std::nullopt;
    });
    auto cfg = test_config();
    cfg.timeout_seconds = 0.5;
    const auto start = std::chrono::steady_clock::now();
    const auto r = run_task("go", cfg, h.deps());
    EXPECT_LT(std::chrono::steady_clock::now() - start, std::chrono::seconds(5));
    EXPECT_EQ(r.outcome, Outcome::Timeout);
    EXPECT_DOUBLE_EQ(r.wall_time_seconds, 0.5);
    EXPECT_EQ(h.of_type(EventType::Final).back().payload["wall_time_seconds"], 0.5);
}

TEST(Orchestrator, CancelAbortsAndKillsSession) {
    Harness h([](Turn t, int, const std::vector<ChatMessage>&) -> std::optional<std::string> {
        if (t == Turn::Initial) return "<Advance to Next STEP>\n" + goal("slow", "SLEEP(20000)");
        if (t == Turn::Debug) return std::string("<end_debug>");
        if (t == Turn::Filter) return "<debug_failure>\n" + md("interrupted");
        return "<Fulfill USER INSTRUCTION>\n" + md("ok");
    });
    Session s(test_config(), h.deps());
    std::thread stopper([&] {
        while (!h.kernel.busy()) std::this_thread::sleep_for(std::chrono::milliseconds(5));
        s.cancel();
        s.interrupt();
    });
    const auto r = s.run("go");
    stopper.join();
    EXPECT_EQ(r.outcome, Outcome::Aborted);
    EXPECT_TRUE(s.dead());
    EXPECT_THROW(s.resume("again"), OrchestratorError);
}

TEST(Orchestrator, InterruptSurfacesAsErrorAndRepairs) {
    Harness h([](Turn t, int, const std::vector<ChatMessage>&) -> std::optional<std::string> {
        if (t == Turn::Initial) return "<Advance to Next STEP>\n" + goal("slow", "SLEEP(20000)");
        if (t == Turn::Debug) return std::string("<end_debug>");
        if (t == Turn::Filter) return "<debug_success>\n" + py("quick = 1");
        if (t == Turn::Exec) return std::string("<end_step>");
        return "<Fulfill USER INSTRUCTION>\n" + md("ok");
    });
    Session s(test_config(), h.deps());
    std::thread stopper([&] {
        while (!h.kernel.busy()) std::this_thread::sleep_for(std::chrono::milliseconds(5));
        s.interrupt();
    });
    const auto r = s.run("go");
    stopper.join();
    EXPECT_EQ(r.outcome, Outcome::Fulfilled);
    const auto execs = h.of_type(EventType::Execution);
    ASSERT_FALSE(execs.empty());
    EXPECT_EQ(execs[0].payload["feedback"]["detail"]["name"], "Interrupted");
}

TEST(Orchestrator, KernelDeathAborts) {
    Harness h([](Turn t, int, const std::vector<ChatMessage>&) -> std::optional<std::string> {
        if (t == Turn::Initial) return "<Advance to Next STEP>\n" + goal("die", "DIE");
        return std::nullopt;
    });
    const auto r = run_task("go", test_config(), h.deps());
    EXPECT_EQ(r.outcome, Outcome::Aborted);
    EXPECT_EQ(r.stop_rule, "executor_crashed");
}

TEST(Orchestrator, ProviderFailureAborts) {
    Harness h([](Turn, int, const std::vector<ChatMessage>&) -> std::optional<std::string> { return std::nullopt; });
    const auto r = run_task("go", test_config(), h.deps());
    EXPECT_EQ(r.outcome, Outcome::Aborted);
    EXPECT_EQ(r.stop_rule, "llm_unavailable");
}

TEST(Orchestrator, EmptyInstructionAndBadConfigRejected) {
    Harness h(simple_success);
    Session s(test_config(), h.deps());
    EXPECT_THROW(s.run("  \n"), OrchestratorError);
    auto cfg = test_config();
    cfg.timeout_seconds = 0;
    EXPECT_THROW(Session(cfg, h.deps()), OrchestratorError);
    cfg = test_config();
    cfg.budgets.max_execution_number = 0;
    EXPECT_THROW(Session(cfg, h.deps()), FstError);
}

TEST(Orchestrator, UnpricedModelIsRejectedWhenPricesGiven) {
    Harness h(simple_success);
    auto deps = h.deps();
    deps.prices.set("other-model", ModelPrice{});
    EXPECT_THROW(Session(test_config(), deps), Error);
}

TEST(Orchestrator, FollowUpSharesContextAndKernel) {
    int plan_turns = 0;
    Harness h([&](Turn t, int n, const std::vector<ChatMessage>& m) -> std::optional<std::string> {
        if (t == Turn::Initial && n == 1) {
            // Second instruction sees the first one's trace and conclusion.
            EXPECT_NE(m[1].text.find("[USER INSTRUCTION]:\nfirst"), std::string::npos);
            EXPECT_NE(m[1].text.find("[USER INSTRUCTION]:\nsecond"), std::string::npos);
            EXPECT_NE(m[2].text.find("First done."), std::string::npos);
        }
        if (t == Turn::Initial) return "<Advance to Next STEP>\n" + goal("g" + std::to_string(n));
        if (t == Turn::Exec) return std::string("<end_step>");
        if (t == Turn::Plan) return "<Fulfill USER INSTRUCTION>\n" + md(plan_turns++ == 0 ? "First done." : "Second.");
        return std::nullopt;
    });
    Session s(test_config(), h.deps());
    EXPECT_EQ(s.run("first").outcome, Outcome::Fulfilled);
    const auto r = s.resume("second");
    EXPECT_EQ(r.outcome, Outcome::Fulfilled);
    EXPECT_EQ(r.history.instructions.size(), 2u);
    const auto inputs = h.of_type(EventType::UserInput);
    ASSERT_EQ(inputs.size(), 2u);
    EXPECT_EQ(inputs[1].payload["index"], 1);
    EXPECT_FALSE(inputs[1].payload.contains("config"));
    const auto cells = s.notebook_cells();
    EXPECT_EQ(std::count_if(cells.begin(), cells.end(),
                            [](const Cell& c) { return c.id.rfind("instruction-", 0) == 0; }),
              2);
}

TEST(Orchestrator, RecoveredSessionResumesWithRestoredKernelState) {
    Harness h(simple_success);
    {
        Session s(test_config(), h.deps());
        ASSERT_EQ(s.run("first").outcome, Outcome::Fulfilled);
    }
    const auto rec = recover_session(h.transcript.events());
    EXPECT_EQ(rec.instructions, std::vector<std::string>{"first"});
    EXPECT_EQ(rec.last_outcome, Outcome::Fulfilled);
    EXPECT_GT(rec.cell_ids_issued, 0u);

    Harness h2(simple_success);
    h2.transcript.restore(h.transcript.events());
    Session s2(SessionConfig(rec.config.get<SessionConfig>()), h2.deps());
    const auto r = s2.resume_from(rec, "second");
    EXPECT_EQ(r.outcome, Outcome::Fulfilled);
    // Live code cells of the first instruction were re-run before continuing.
    const auto log = h2.kernel.log();
    ASSERT_GE(log.size(), 2u);
    EXPECT_EQ(log[0], "PRINT(loaded)");
    EXPECT_EQ(log[1], "PRINT(more)");
    // Ids continue past the recorded ones.
    for (const auto& c : r.history.tree.context_cells(1)) {
        EXPECT_GT(std::stoull(c.id.substr(1)), rec.cell_ids_issued);
    }
    const auto again = recover_session(h2.transcript.events());
    EXPECT_EQ(again.instructions.size(), 2u);
    EXPECT_EQ(again.history.tree, r.history.tree);
}

TEST(Orchestrator, RecoverRejectsTranscriptWithoutConfig) {
    Transcript t;
    t.append(EventType::UserInput, {{"instruction", "x"}, {"index", 0}});
    EXPECT_THROW(recover_session(t.events()), CorruptTranscript);
}

TEST(Orchestrator, ConfigJsonRoundTrip) {
    SessionConfig c;
    c.model = "m";
    c.budgets.max_debug_number = 3;
    c.ablations.disable_planning = true;
    c.visual_tool.enabled = true;
    c.truncation.head_chars = 10;
    const json j = c;
    const auto back = j.get<SessionConfig>();
    EXPECT_EQ(json(back), j);
    EXPECT_EQ(outcome_from_string("BudgetStop"), Outcome::BudgetStop);
}
