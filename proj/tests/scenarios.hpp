#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "support.hpp"

namespace cftest {

/// Every turn produces failing code; repairs never succeed.
inline std::optional<std::string> never_fixing(Turn t, int n, const std::vector<ChatMessage>&) {
    switch (t) {
        case Turn::Initial:
        case Turn::Plan: return "<Advance to Next STEP>\n" + goal("step " + std::to_string(n), "RAISE(ValueError)");
        case Turn::Exec: return "<await>\n" + py("RAISE(ValueError)");
        case Turn::Debug: return "<await>\n" + py("# DEBUGTRY\nRAISE(KeyError)");
        case Turn::Filter: return "<debug_failure>\n" + md("could not fix it");
        case Turn::Unknown: break;
    }
    return std::nullopt;
}

/// One erroring action per case; `expected` is where control must go after post-filtering.
struct ResumeCase {
    std::string name;
    std::function<std::optional<std::string>(Turn, int)> script;
    std::string expected;
};

inline std::vector<ResumeCase> resume_cases() {
    return {
        {"plan-advance",
         [](Turn t, int n) -> std::optional<std::string> {
             if (t == Turn::Initial) return "<Advance to Next STEP>\n" + goal("a", "RAISE(E)");
             if (t == Turn::Exec) return std::string("<end_step>");
             if (t == Turn::Plan) return "<Fulfill USER INSTRUCTION>\n" + md("ok");
             if (t == Turn::Debug) return std::string("<end_debug>");
             if (t == Turn::Filter) return "<debug_failure>\n" + md("r" + std::to_string(n));
             return std::nullopt;
         },
         "Exec"},
        {"plan-iterate",
         [](Turn t, int n) -> std::optional<std::string> {
             if (t == Turn::Initial) return "<Advance to Next STEP>\n" + goal("a");
             if (t == Turn::Exec) return std::string("<end_step>");
             if (t == Turn::Plan && n == 0) return "<Iterate on Current STEP>\n" + goal("b", "RAISE(E)");
             if (t == Turn::Plan) return "<Fulfill USER INSTRUCTION>\n" + md("ok");
             if (t == Turn::Debug) return std::string("<end_debug>");
             if (t == Turn::Filter) return "<debug_failure>\n" + md("r");
             return std::nullopt;
         },
         "Exec"},
        {"exec-await",
         [](Turn t, int n) -> std::optional<std::string> {
             if (t == Turn::Initial) return "<Advance to Next STEP>\n" + goal("a");
             if (t == Turn::Exec && n == 0) return "<await>\n" + py("RAISE(E)");
             if (t == Turn::Exec) return std::string("<end_step>");
             if (t == Turn::Plan) return "<Fulfill USER INSTRUCTION>\n" + md("ok");
             if (t == Turn::Debug) return std::string("<end_debug>");
             if (t == Turn::Filter) return "<debug_success>\n" + py("fixed = 1");
             return std::nullopt;
         },
         "Exec"},
        {"exec-end-step",
         [](Turn t, int) -> std::optional<std::string> {
             if (t == Turn::Initial) return "<Advance to Next STEP>\n" + goal("a");
             if (t == Turn::Exec) return "<end_step>\n" + py("RAISE(E)");
             if (t == Turn::Plan) return "<Fulfill USER INSTRUCTION>\n" + md("ok");
             if (t == Turn::Debug) return std::string("<end_debug>");
             if (t == Turn::Filter) return "<debug_success>\n" + py("fixed = 1");
             return std::nullopt;
         },
         "Plan"},
    };
}

/// Counts recomputed from the event stream alone.
struct RunShape {
    std::vector<int> debug_turns_per_episode;
    int max_exec_entries_per_step = 0;
    int planning_entries = 0;
    int nonroot_nodes = 0;
    bool terminated = false;
};

inline RunShape shape_of(const std::vector<Event>& events) {
    RunShape s;
    int exec_in_step = 0;
    for (const auto& e : events) {
        const auto& p = e.payload;
        if (e.type == EventType::Transition || e.type == EventType::Forced) {
            const auto to = p.value("to", "");
            if (to == "Debug" && p.value("from", "") != "Debug") s.debug_turns_per_episode.push_back(0);
            if (to == "Plan") ++s.planning_entries;
            if (to == "Exec") s.max_exec_entries_per_step = std::max(s.max_exec_entries_per_step, ++exec_in_step);
        } else if (e.type == EventType::Action) {
            const auto stage = p.value("stage", "");
            if (stage == "Debug" && !s.debug_turns_per_episode.empty()) ++s.debug_turns_per_episode.back();
            if (p.contains("tree_op")) {
                const auto op = p["tree_op"].value("op", "");
                if (op == "advance" || op == "replace") exec_in_step = 0;
                if (op == "advance" || op == "replace" || op == "exec_turn") ++s.nonroot_nodes;
            }
        } else if (e.type == EventType::Final) {
            s.terminated = true;
        }
    }
    return s;
}

/// Outcome of one randomized repair episode run.
struct HygieneTrial {
    int successes = 0;
    int failures = 0;
    std::vector<std::string> violations;
};

/// Random scripted session with frequent repairs. Checks, at every Plan and
/// Exec turn, that no debugging code or faulty code reached the context, and
/// at the end that every failed repair left exactly one markdown report.
inline HygieneTrial repair_hygiene_trial(unsigned seed) {
    auto rng = std::make_shared<std::mt19937>(seed);
    auto trial = std::make_shared<HygieneTrial>();
    auto coin = [rng](double p) { return std::uniform_real_distribution<double>(0, 1)(*rng) < p; };
    auto maybe_fail = [coin](const std::string& ok) { return coin(0.5) ? std::string("RAISE(ValueError)") : ok; };

    Harness h([=](Turn t, int n, const std::vector<ChatMessage>& m) -> std::optional<std::string> {
        if (t == Turn::Plan || t == Turn::Exec) {
            for (const auto& msg : m) {
                if (msg.text.find("DEBUGTRY") != std::string::npos) {
                    trial->violations.push_back("debug cell visible in " + std::string(t == Turn::Plan ? "Plan" : "Exec"));
                }
                if (msg.text.find("RAISE(") != std::string::npos) {
                    trial->violations.push_back("faulty code visible after repair");
                }
            }
        }
        switch (t) {
            case Turn::Initial:
            case Turn::Plan:
                if (n >= 3) return "<Fulfill USER INSTRUCTION>\n" + md("done");
                return "<Advance to Next STEP>\n" + goal("s" + std::to_string(n), maybe_fail("a = 1"));
            case Turn::Exec:
                if (n % 3 == 2) return std::string("<end_step>");
                return "<await>\n" + py(maybe_fail("b = 1"));
            case Turn::Debug:
                if (coin(0.4)) return std::string("<end_debug>");
                return "<await>\n" + py("# DEBUGTRY\n" + maybe_fail("c = 1"));
            case Turn::Filter:
                if (coin(0.5)) return "<debug_success>\n" + py(coin(0.2) ? "RAISE(TypeError)" : "fixed = 1");
                return "<debug_failure>\n" + md("REPORT: still broken") + md("more detail");
            case Turn::Unknown: break;
        }
        return std::nullopt;
    });
    auto cfg = test_config();
    const auto result = run_task("analyze the data", cfg, h.deps());
    if (result.outcome != Outcome::Fulfilled && result.outcome != Outcome::BudgetStop) {
        trial->violations.push_back("run did not terminate cleanly: " + result.reason);
    }

    for (const auto& e : h.of_type(EventType::RepairOutcome)) {
        const auto& o = e.payload["outcome"];
        if (o["kind"] == "success") {
            ++trial->successes;
        } else {
            ++trial->failures;
            if (o["cells"].size() != 1 || o["cells"][0]["kind"] != "markdown") {
                trial->violations.push_back("failed repair without a single markdown report");
            }
        }
    }
    const auto& tree = result.history.tree;
    for (const auto& c : tree.context_cells()) {
        if (c.origin == Origin::Debug) trial->violations.push_back("Debug-origin cell " + c.id + " in final context");
    }
    int reports = 0;
    for (const auto& node : tree.nodes()) {
        if (node.kind != NodeKind::RepairReport) continue;
        ++reports;
        if (node.cells.size() != 1 || node.cells[0].is_code()) {
            trial->violations.push_back("report node " + std::to_string(node.id) + " is not one markdown cell");
        }
    }
    if (reports != trial->failures) trial->violations.push_back("report count differs from failed repairs");
    return *trial;
}

}  // namespace cftest
