#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellflow/error.hpp"
#include "cellflow/orchestrator.hpp"
#include "cellflow/transcript.hpp"

namespace cellflow {

enum class EvalErrorCode { Empty, DegenerateBounds, InvalidFlag, Manifest, Grader };

class EvalError : public CodedError<EvalErrorCode> {
public:
    using CodedError::CodedError;
};

// -- metrics ------------------------------------------------------------------

struct QuestionResult {
    std::string id;
    std::vector<int> flags;  // one 0/1 per subquestion
};

struct AnalysisScores {
    double pasq = 0;
    double abq = 0;
    double uasq = 0;
};

AnalysisScores score_analysis(const std::vector<QuestionResult>& results);

enum class MetricDirection { HigherBetter, LowerBetter };

struct ModelingEntry {
    std::string id;
    double p = 0;  // submission score
    double b = 0;  // baseline score
    double g = 0;  // best known score
    bool completed = true;
    double elapsed = 0;
    MetricDirection direction = MetricDirection::HigherBetter;
};

/// Mean of max((p-b)/(g-b), 0). Incomplete entries score p = b. Lower-better
/// metrics are negated first.
double score_rpg(const std::vector<ModelingEntry>& entries);

// -- transition statistics ---------------------------------------------------------

struct TaskTransitionCounts {
    std::string task;
    std::int64_t llm_calls = 0;
    std::int64_t planning_entries = 0;
    std::int64_t repair_entries = 0;
};

struct TransitionStats {
    double avg_llm_calls = 0;
    double avg_planning_entries = 0;
    double avg_repair_entries = 0;
    std::vector<TaskTransitionCounts> per_task;
};

/// Counts from one transcript: llm_call events, entries into Plan (normal or
/// forced), and repair episodes (entries into Debug from another state).
TaskTransitionCounts count_transitions(const std::vector<Event>& events, std::string task = {});
TransitionStats transition_stats(const std::vector<TaskTransitionCounts>& tasks);
/// Reads JSONL transcripts; throws CorruptTranscript.
TransitionStats transition_stats(const std::vector<std::filesystem::path>& transcripts);
std::string render_stats_table(const TransitionStats& stats);

void to_json(nlohmann::json& j, const TransitionStats& s);

// -- tasks and grading -----------------------------------------------------------

enum class GraderKind { ExactAnswer, FileExists, External };

struct ExpectedAnswer {
    std::string name;
    std::string value;
    std::optional<double> tolerance;
};

struct ModelingSpec {
    double baseline = 0;
    double best = 0;
    MetricDirection direction = MetricDirection::HigherBetter;
};

/// task.json:
///   {id, instruction_path, input_dir, expected_artifact, grader,
///    answers: [{name, value, tolerance?}],      exact_answer
///    external: {command: [argv...]},            external
///    modeling: {baseline, best, direction}}     optional RPG entry
/// Paths are relative to the manifest's directory.
struct TaskManifest {
    std::string id;
    std::filesystem::path dir;
    std::filesystem::path instruction_path;
    std::filesystem::path input_dir;
    std::optional<std::filesystem::path> expected_artifact;
    GraderKind grader = GraderKind::FileExists;
    std::vector<ExpectedAnswer> answers;
    std::vector<std::string> external_command;
    std::optional<ModelingSpec> modeling;

    std::string instruction() const;
};

/// Throws EvalError(Manifest).
TaskManifest load_manifest(const std::filesystem::path& path);
/// Every task.json below `root`, sorted.
std::vector<std::filesystem::path> find_manifests(const std::filesystem::path& root);

/// `@name[value]` pairs in order of appearance.
std::vector<std::pair<std::string, std::string>> extract_answers(const std::string& text);
bool answer_matches(const std::string& got, const ExpectedAnswer& expected, double default_tolerance);
/// The artifact exists and parses: JSON must parse, CSV needs a header and a row, anything else must be non-empty.
bool artifact_well_formed(const std::filesystem::path& path);

struct GradeResult {
    bool success = false;
    std::optional<QuestionResult> question;
    std::optional<double> score;
    std::string detail;
};

// -- benchmark runner --------------------------------------------------------------

/// Per-task collaborators built by the caller.
struct TaskResources {
    std::unique_ptr<LlmProvider> llm;
    std::unique_ptr<LlmProvider> judge;
    std::unique_ptr<Kernel> kernel;
};

using TaskResourceFactory = std::function<TaskResources(const TaskManifest&, const std::filesystem::path& workdir)>;

struct BenchOptions {
    SessionConfig config;
    double limit_seconds = 3600;
    int workers = 1;
    std::filesystem::path output_dir = "bench-out";
    double answer_tolerance = 1e-6;
    PriceTable prices;
};

struct TaskReport {
    std::string id;
    std::string manifest;
    bool manifest_error = false;
    std::string error;
    std::optional<Outcome> outcome;
    bool completed = false;
    bool success = false;
    double elapsed_seconds = 0;
    Money cost;
    TaskTransitionCounts transitions;
    std::optional<QuestionResult> question;
    std::optional<ModelingEntry> modeling;
    std::filesystem::path transcript;
};

struct BenchReport {
    std::vector<TaskReport> tasks;
    double success_rate = 0;
    double avg_elapsed_seconds = 0;
    Money total_cost;
    std::optional<AnalysisScores> analysis;
    std::optional<double> rpg;
    TransitionStats transitions;
    double limit_seconds = 0;
};

void to_json(nlohmann::json& j, const TaskReport& t);
void to_json(nlohmann::json& j, const BenchReport& r);
std::string render_bench_table(const BenchReport& r);

GradeResult grade_task(const TaskManifest& task, const SessionResult& result, const std::filesystem::path& workdir,
                       double default_tolerance);

BenchReport run_benchmark(const std::filesystem::path& task_dir, const BenchOptions& options,
                          const TaskResourceFactory& factory);

}  // namespace cellflow
