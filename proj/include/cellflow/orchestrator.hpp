#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellflow/action_parser.hpp"
#include "cellflow/cost.hpp"
#include "cellflow/executor.hpp"
#include "cellflow/fst.hpp"
#include "cellflow/llm.hpp"
#include "cellflow/prompts.hpp"
#include "cellflow/render.hpp"
#include "cellflow/toolkit.hpp"
#include "cellflow/trajectory.hpp"
#include "cellflow/transcript.hpp"

namespace cellflow {

enum class OrchestratorErrorCode { SessionDead, EmptyInstruction, Busy, InvalidConfig };

class OrchestratorError : public CodedError<OrchestratorErrorCode> {
public:
    using CodedError::CodedError;
};

struct Ablations {
    bool disable_planning = false;
    bool disable_repair = false;
};

struct VisualToolConfig {
    bool enabled = false;
    int limit = 4;
    std::string judge_model = "gpt-4o-mini";
};

struct SessionConfig {
    std::string model = "gpt-4o";
    double temperature = 0.0;
    std::optional<std::int64_t> max_tokens;
    Budgets budgets;
    std::string language_tag = "python";
    std::filesystem::path workdir = "workdir";
    Ablations ablations;
    double timeout_seconds = 3600;
    int retry_on_parse_error = 2;
    /// Fresh repair episodes allowed when cleaned code fails its validation run.
    int max_repair_reentries = 1;
    TruncationPolicy truncation;
    VisualToolConfig visual_tool;
    std::vector<ToolDescriptor> tools;

    /// Throws OrchestratorError(InvalidConfig) or FstError(InvalidBudgets).
    void validate() const;
};

void to_json(nlohmann::json& j, const SessionConfig& c);
void from_json(const nlohmann::json& j, SessionConfig& c);

enum class Outcome { Fulfilled, BudgetStop, Timeout, Aborted };

std::string_view to_string(Outcome o);
std::optional<Outcome> outcome_from_string(std::string_view s);

/// Rule name recorded when a turn could not be parsed within the retry budget.
inline constexpr std::string_view kParseRetryRule = "retry_on_parse_error";

struct SessionResult {
    Outcome outcome = Outcome::Aborted;
    /// Budget or retry rule that stopped the run (BudgetStop), or the abort reason.
    std::string stop_rule;
    std::string reason;
    ContextHistory history;
    Counters counters;
    double wall_time_seconds = 0;
    Money cost;
    /// States entered during this instruction, starting with Plan.
    std::vector<AgentState> states;

    bool completed() const { return outcome == Outcome::Fulfilled; }
};

/// Everything a session talks to. Providers and kernel are borrowed.
struct SessionDeps {
    LlmProvider* llm = nullptr;
    /// Vision model for the image tool; defaults to `llm`.
    LlmProvider* judge = nullptr;
    Kernel* kernel = nullptr;
    Transcript* transcript = nullptr;
    PromptCatalog prompts = PromptCatalog::builtin();
    SignalAliasTable aliases = SignalAliasTable::standard();
    PriceTable prices;
};

/// Session state recovered from a transcript.
struct RecoveredSession {
    nlohmann::json config;
    ContextHistory history;
    Counters counters;
    std::uint64_t cell_ids_issued = 0;
    std::optional<Outcome> last_outcome;
    Money cost;
    std::vector<std::string> instructions;
    /// Workdir files present when the session started.
    std::vector<std::string> workdir_files;
    PriceTable prices;
};

/// Preamble, then per instruction: the instruction, its live trace and conclusion.
std::vector<Cell> notebook_cells(const ContextHistory& history);

/// Rebuilds history, counters and cell numbering from recorded events.
RecoveredSession recover_session(const std::vector<Event>& events);

/// One agent session: the Plan/Exec/Debug/Filter loop over a shared kernel.
/// run() starts the session; resume() continues it with a follow-up.
class Session {
public:
    Session(SessionConfig config, SessionDeps deps);
    ~Session();

    Session(const Session&) = delete;
    Session& operator=(const Session&) = delete;

    /// Initializes the preamble and runs the first instruction to Idle.
    SessionResult run(const std::string& instruction);

    /// Runs a follow-up instruction on the same context and kernel.
    /// Throws SessionDead after an abort, EmptyInstruction for blank text.
    SessionResult resume(const std::string& followup);

    /// Continues a session recovered from a transcript: replays the preamble
    /// setup and live code cells into the kernel, then runs `followup`.
    SessionResult resume_from(const RecoveredSession& recovered, const std::string& followup);

    /// Interrupts the running cell; the loop sees an "Interrupted" error.
    void interrupt();
    /// Stops the loop before its next model call or execution (outcome Aborted).
    void cancel();

    AgentState state() const { return state_.load(); }
    bool running() const { return running_.load(); }
    bool dead() const { return dead_.load(); }
    Counters counters() const;
    Money cost() const;
    ContextHistory history() const;
    /// Preamble plus live trace, as exported to a notebook.
    std::vector<Cell> notebook_cells() const;
    const SessionConfig& config() const { return config_; }

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    SessionConfig config_;
    std::atomic<AgentState> state_{AgentState::Idle};
    std::atomic<bool> running_{false};
    std::atomic<bool> dead_{false};
};

/// Convenience wrapper: one session, one instruction.
SessionResult run_task(const std::string& instruction, const SessionConfig& config, SessionDeps deps);

}  // namespace cellflow
