#include "cellflow/evalharness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <regex>
#include <sstream>
#include <thread>

namespace cellflow {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Metrics

AnalysisScores score_analysis(const std::vector<QuestionResult>& results) {
    if (results.empty()) throw EvalError(EvalErrorCode::Empty, "no question results");
    double pasq = 0;
    double abq = 0;
    std::int64_t correct = 0;
    std::int64_t total = 0;
    for (const auto& q : results) {
        if (q.flags.empty()) throw EvalError(EvalErrorCode::Empty, "question " + q.id + " has no subquestions");
        std::int64_t right = 0;
        for (int f : q.flags) {
            if (f != 0 && f != 1) throw EvalError(EvalErrorCode::InvalidFlag, "flags must be 0 or 1");
            right += f;
        }
        const auto n = static_cast<std::int64_t>(q.flags.size());
        pasq += static_cast<double>(right) / static_cast<double>(n);
        abq += right == n ? 1.0 : 0.0;
        correct += right;
        total += n;
    }
    const auto count = static_cast<double>(results.size());
    return AnalysisScores{pasq / count, abq / count, static_cast<double>(correct) / static_cast<double>(total)};
}

double score_rpg(const std::vector<ModelingEntry>& entries) {
    if (entries.empty()) throw EvalError(EvalErrorCode::Empty, "no modeling entries");
    double sum = 0;
    for (const auto& e : entries) {
        if (e.g == e.b) throw EvalError(EvalErrorCode::DegenerateBounds, "entry " + e.id + ": best equals baseline");
        const double sign = e.direction == MetricDirection::LowerBetter ? -1.0 : 1.0;
        const double b = sign * e.b;
        const double g = sign * e.g;
        const double p = e.completed ? sign * e.p : b;
        sum += std::max((p - b) / (g - b), 0.0);
    }
    return sum / static_cast<double>(entries.size());
}

// ---------------------------------------------------------------------------
// Transition statistics

TaskTransitionCounts count_transitions(const std::vector<Event>& events, std::string task) {
    TaskTransitionCounts c;
    c.task = std::move(task);
    for (const auto& e : events) {
        if (e.type == EventType::LlmCall) {
            ++c.llm_calls;
        } else if (e.type == EventType::Transition || e.type == EventType::Forced) {
            const auto to = e.payload.value("to", "");
            const auto from = e.payload.value("from", "");
            if (to == "Plan") ++c.planning_entries;
            if (to == "Debug" && from != "Debug") ++c.repair_entries;
        }
    }
    return c;
}

TransitionStats transition_stats(const std::vector<TaskTransitionCounts>& tasks) {
    TransitionStats s;
    s.per_task = tasks;
    if (tasks.empty()) return s;
    for (const auto& t : tasks) {
        s.avg_llm_calls += static_cast<double>(t.llm_calls);
        s.avg_planning_entries += static_cast<double>(t.planning_entries);
        s.avg_repair_entries += static_cast<double>(t.repair_entries);
    }
    const auto n = static_cast<double>(tasks.size());
    s.avg_llm_calls /= n;
    s.avg_planning_entries /= n;
    s.avg_repair_entries /= n;
    return s;
}

TransitionStats transition_stats(const std::vector<fs::path>& transcripts) {
    std::vector<TaskTransitionCounts> tasks;
    for (const auto& p : transcripts) tasks.push_back(count_transitions(read_transcript(p), p.string()));
    return transition_stats(tasks);
}

namespace {

std::string fixed(double v, int digits = 2) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }

}  // namespace

std::string render_stats_table(const TransitionStats& stats) {
    std::size_t w = 4;
    for (const auto& t : stats.per_task) w = std::max(w, t.task.size());
    std::ostringstream out;
    out << pad("Task", w) << "  Avg. LLM Calls  Avg. Planning Entries  Avg. Repair Entries\n";
    for (const auto& t : stats.per_task) {
        out << pad(t.task, w) << "  " << pad(std::to_string(t.llm_calls), 14) << "  "
            << pad(std::to_string(t.planning_entries), 21) << "  " << t.repair_entries << "\n";
    }
    out << pad("Mean", w) << "  " << pad(fixed(stats.avg_llm_calls), 14) << "  "
        << pad(fixed(stats.avg_planning_entries), 21) << "  " << fixed(stats.avg_repair_entries) << "\n";
    return out.str();
}

void to_json(json& j, const TransitionStats& s) {
    json per = json::array();
    for (const auto& t : s.per_task) {
        per.push_back({{"task", t.task},
                       {"llm_calls", t.llm_calls},
                       {"planning_entries", t.planning_entries},
                       {"repair_entries", t.repair_entries}});
    }
    j = json{{"avg_llm_calls", s.avg_llm_calls},
             {"avg_planning_entries", s.avg_planning_entries},
             {"avg_repair_entries", s.avg_repair_entries},
             {"per_task", per}};
}

// ---------------------------------------------------------------------------
// Manifests and grading

std::string TaskManifest::instruction() const {
    std::ifstream in(dir / instruction_path, std::ios::binary);
    if (!in) throw EvalError(EvalErrorCode::Manifest, "cannot read instruction " + (dir / instruction_path).string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

TaskManifest load_manifest(const fs::path& path) {
    auto fail = [&](const std::string& why) { return EvalError(EvalErrorCode::Manifest, path.string() + ": " + why); };
    std::ifstream in(path);
    if (!in) throw fail("cannot open");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw fail(e.what());
    }
    if (!j.is_object()) throw fail("manifest must be an object");
    TaskManifest m;
    m.dir = path.parent_path();
    try {
        m.id = j.at("id").get<std::string>();
        m.instruction_path = j.at("instruction_path").get<std::string>();
        m.input_dir = j.value("input_dir", std::string{});
        if (j.contains("expected_artifact") && !j["expected_artifact"].is_null()) {
            m.expected_artifact = j["expected_artifact"].get<std::string>();
        }
        const auto grader = j.at("grader").get<std::string>();
        if (grader == "exact_answer") m.grader = GraderKind::ExactAnswer;
        else if (grader == "file_exists") m.grader = GraderKind::FileExists;
        else if (grader == "external") m.grader = GraderKind::External;
        else throw fail("unknown grader \"" + grader + "\"");
        for (const auto& a : j.value("answers", json::array())) {
            ExpectedAnswer e{a.at("name").get<std::string>(), {}, std::nullopt};
            e.value = a.at("value").is_string() ? a["value"].get<std::string>() : a["value"].dump();
            if (a.contains("tolerance")) e.tolerance = a["tolerance"].get<double>();
            m.answers.push_back(std::move(e));
        }
        if (j.contains("external")) m.external_command = j["external"].at("command").get<std::vector<std::string>>();
        if (j.contains("modeling")) {
            const auto& md = j["modeling"];
            ModelingSpec s;
            s.baseline = md.at("baseline").get<double>();
            s.best = md.at("best").get<double>();
            const auto dir = md.value("direction", std::string("higher"));
            if (dir == "lower") s.direction = MetricDirection::LowerBetter;
            else if (dir != "higher") throw fail("direction must be \"higher\" or \"lower\"");
            if (s.baseline == s.best) throw fail("modeling baseline equals best");
            m.modeling = s;
        }
    } catch (const json::exception& e) {
        throw fail(e.what());
    }
    if (m.id.empty()) throw fail("empty id");
    if (m.grader == GraderKind::ExactAnswer && m.answers.empty()) throw fail("exact_answer needs answers");
    if (m.grader == GraderKind::FileExists && !m.expected_artifact) throw fail("file_exists needs expected_artifact");
    if (m.grader == GraderKind::External && m.external_command.empty()) throw fail("external needs a command");
    if (!fs::exists(m.dir / m.instruction_path)) throw fail("instruction file is missing");
    if (!m.input_dir.empty() && !fs::is_directory(m.dir / m.input_dir)) throw fail("input_dir is not a directory");
    return m;
}

std::vector<fs::path> find_manifests(const fs::path& root) {
    std::vector<fs::path> out;
    if (!fs::is_directory(root)) return out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file() && e.path().filename() == "task.json") out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<std::pair<std::string, std::string>> extract_answers(const std::string& text) {
    static const std::regex re(R"(@([A-Za-z_][A-Za-z0-9_]*)\[([^\]]*)\])");
    std::vector<std::pair<std::string, std::string>> out;
    for (auto it = std::sregex_iterator(text.begin(), text.end(), re); it != std::sregex_iterator(); ++it) {
        out.emplace_back((*it)[1].str(), (*it)[2].str());
    }
    return out;
}

namespace {

std::string normalize(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n\"'");
    const auto e = s.find_last_not_of(" \t\r\n\"'");
    s = b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

std::optional<double> as_number(const std::string& s) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    return std::nullopt;
}

std::string shell_quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
    return out + "'";
}

}  // namespace

bool answer_matches(const std::string& got, const ExpectedAnswer& expected, double default_tolerance) {
    const auto a = normalize(got);
    const auto b = normalize(expected.value);
    const auto x = as_number(a);
    const auto y = as_number(b);
    if (x && y) return std::fabs(*x - *y) <= expected.tolerance.value_or(default_tolerance);
    return a == b;
}

bool artifact_well_formed(const fs::path& path) {
    std::error_code ec;
    if (!fs::is_regular_file(path, ec) || fs::file_size(path, ec) == 0) return false;
    std::ifstream in(path, std::ios::binary);
    const auto ext = path.extension().string();
    if (ext == ".json") {
        return json::accept(in);
    }
    if (ext == ".csv") {
        std::string header;
        std::string row;
        return std::getline(in, header) && !header.empty() && std::getline(in, row) && !row.empty();
    }
    return true;
}

GradeResult grade_task(const TaskManifest& task, const SessionResult& result, const fs::path& workdir,
                       double default_tolerance) {
    GradeResult g;
    const bool aborted = result.outcome == Outcome::Aborted;
    switch (task.grader) {
        case GraderKind::ExactAnswer: {
            std::string conclusion;
            if (!result.history.instructions.empty()) {
                for (const auto& c : result.history.instructions.back().conclusion) conclusion += c.source + "\n";
            }
            const auto found = extract_answers(conclusion);
            QuestionResult q{task.id, {}};
            bool all_present = true;
            for (const auto& expected : task.answers) {
                auto it = std::find_if(found.rbegin(), found.rend(),
                                       [&](const auto& kv) { return kv.first == expected.name; });
                if (it == found.rend()) all_present = false;
                q.flags.push_back(it != found.rend() && answer_matches(it->second, expected, default_tolerance) ? 1 : 0);
            }
            g.question = q;
            g.success = result.outcome == Outcome::Fulfilled && all_present;
            g.detail = std::to_string(found.size()) + " answers found";
            break;
        }
        case GraderKind::FileExists: {
            const auto artifact = workdir / *task.expected_artifact;
            g.success = !aborted && artifact_well_formed(artifact);
            g.detail = g.success ? "artifact ok" : "artifact missing or malformed: " + artifact.string();
            break;
        }
        case GraderKind::External: {
            std::string cmd = "cd " + shell_quote(fs::absolute(task.dir).string()) + " &&";
            for (const auto& a : task.external_command) cmd += " " + shell_quote(a);
            cmd += " " + shell_quote(task.expected_artifact ? fs::absolute(workdir / *task.expected_artifact).string()
                                                            : std::string{});
            cmd += " " + shell_quote(fs::absolute(workdir).string());
            FILE* pipe = ::popen(cmd.c_str(), "r");
            if (!pipe) throw EvalError(EvalErrorCode::Grader, "cannot start grader for " + task.id);
            std::string out;
            char buf[4096];
            while (auto n = std::fread(buf, 1, sizeof buf, pipe)) out.append(buf, n);
            const int status = ::pclose(pipe);
            if (status != 0) {
                g.detail = "grader exited with status " + std::to_string(status);
                break;
            }
            try {
                const auto j = json::parse(out);
                g.success = !aborted && j.value("success", false);
                if (j.contains("score") && j["score"].is_number()) g.score = j["score"].get<double>();
                g.detail = j.value("detail", std::string{});
            } catch (const json::exception& e) {
                g.detail = std::string("grader output is not JSON: ") + e.what();
            }
            break;
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Runner

void to_json(json& j, const TaskReport& t) {
    j = json{{"id", t.id},
             {"manifest", t.manifest},
             {"manifest_error", t.manifest_error},
             {"error", t.error},
             {"outcome", t.outcome ? json(to_string(*t.outcome)) : json(nullptr)},
             {"completed", t.completed},
             {"success", t.success},
             {"elapsed_seconds", t.elapsed_seconds},
             {"cost", t.cost.to_string()},
             {"llm_calls", t.transitions.llm_calls},
             {"planning_entries", t.transitions.planning_entries},
             {"repair_entries", t.transitions.repair_entries},
             {"transcript", t.transcript.generic_string()}};
    if (t.question) j["subquestion_flags"] = t.question->flags;
    if (t.modeling) {
        j["modeling"] = {{"p", t.modeling->p}, {"b", t.modeling->b}, {"g", t.modeling->g}};
    }
}

void to_json(json& j, const BenchReport& r) {
    j = json{{"tasks", r.tasks},
             {"success_rate", r.success_rate},
             {"avg_elapsed_seconds", r.avg_elapsed_seconds},
             {"total_cost", r.total_cost.to_string()},
             {"limit_seconds", r.limit_seconds},
             {"transition_stats", r.transitions}};
    if (r.analysis) j["analysis"] = {{"pasq", r.analysis->pasq}, {"abq", r.analysis->abq}, {"uasq", r.analysis->uasq}};
    if (r.rpg) j["rpg"] = *r.rpg;
}

std::string render_bench_table(const BenchReport& r) {
    std::size_t w = 4;
    for (const auto& t : r.tasks) w = std::max(w, t.id.size());
    std::ostringstream out;
    out << pad("Task", w) << "  Outcome     Success  Time (s)  Cost        LLM Calls  Plan  Repair\n";
    for (const auto& t : r.tasks) {
        const std::string outcome = t.manifest_error ? "manifest" : t.outcome ? std::string(to_string(*t.outcome)) : "error";
        out << pad(t.id, w) << "  " << pad(outcome, 10) << "  " << pad(t.success ? "yes" : "no", 7) << "  "
            << pad(fixed(t.elapsed_seconds, 1), 8) << "  " << pad(t.cost.to_string(), 10) << "  "
            << pad(std::to_string(t.transitions.llm_calls), 9) << "  " << pad(std::to_string(t.transitions.planning_entries), 4)
            << "  " << t.transitions.repair_entries << "\n";
    }
    out << "\nTask success rate: " << fixed(100 * r.success_rate, 1) << "%\n";
    out << "Avg. inference time: " << fixed(r.avg_elapsed_seconds, 1) << " s (limit " << fixed(r.limit_seconds, 0)
        << " s)\n";
    out << "Total cost: $" << r.total_cost.to_string() << "\n";
    if (r.analysis) {
        out << "PASQ " << fixed(100 * r.analysis->pasq) << "  ABQ " << fixed(100 * r.analysis->abq) << "  UASQ "
            << fixed(100 * r.analysis->uasq) << "\n";
    }
    if (r.rpg) out << "RPG " << fixed(100 * *r.rpg) << "\n";
    out << "Avg. LLM calls " << fixed(r.transitions.avg_llm_calls) << "  Avg. planning entries "
        << fixed(r.transitions.avg_planning_entries) << "  Avg. repair entries "
        << fixed(r.transitions.avg_repair_entries) << "\n";
    return out.str();
}

namespace {

TaskReport run_one(const fs::path& manifest_path, const BenchOptions& options, const TaskResourceFactory& factory) {
    TaskReport report;
    report.manifest = manifest_path.generic_string();
    TaskManifest task;
    try {
        task = load_manifest(manifest_path);
    } catch (const EvalError& e) {
        report.id = manifest_path.parent_path().filename().string();
        report.manifest_error = true;
        report.error = e.what();
        return report;
    }
    report.id = task.id;

    const auto dir = options.output_dir / task.id;
    const auto workdir = dir / "workdir";
    report.transcript = dir / "transcript.jsonl";
    report.elapsed_seconds = options.limit_seconds;
    try {
        fs::remove_all(workdir);
        fs::create_directories(workdir);
        if (!task.input_dir.empty()) {
            fs::copy(task.dir / task.input_dir, workdir, fs::copy_options::recursive);
        }
        auto resources = factory(task, workdir);
        Transcript transcript(report.transcript);
        SessionConfig config = options.config;
        config.timeout_seconds = options.limit_seconds;
        config.workdir = workdir;
        SessionDeps deps;
        deps.llm = resources.llm.get();
        deps.judge = resources.judge ? resources.judge.get() : nullptr;
        deps.kernel = resources.kernel.get();
        deps.transcript = &transcript;
        deps.prices = options.prices;

        SessionResult result;
        {
            Session session(config, std::move(deps));
            result = session.run(task.instruction());
        }
        transcript.close();
        resources.kernel->shutdown();

        report.outcome = result.outcome;
        report.completed = result.outcome == Outcome::Fulfilled || result.outcome == Outcome::BudgetStop;
        report.elapsed_seconds = report.completed ? result.wall_time_seconds : options.limit_seconds;
        report.cost = result.cost;
        report.transitions = count_transitions(transcript.events(), task.id);
        if (result.outcome == Outcome::Aborted) report.error = result.reason;

        const auto grade = grade_task(task, result, workdir, options.answer_tolerance);
        report.success = grade.success;
        report.question = grade.question;
        if (!grade.success && report.error.empty()) report.error = grade.detail;
        if (task.modeling) {
            ModelingEntry e;
            e.id = task.id;
            e.b = task.modeling->baseline;
            e.g = task.modeling->best;
            e.direction = task.modeling->direction;
            e.completed = report.success && grade.score.has_value();
            e.p = e.completed ? *grade.score : e.b;
            e.elapsed = report.elapsed_seconds;
            report.modeling = e;
        }
    } catch (const std::exception& e) {
        report.error = e.what();
        report.completed = false;
        report.success = false;
        report.elapsed_seconds = options.limit_seconds;
    }
    report.transitions.task = task.id;
    return report;
}

}  // namespace

BenchReport run_benchmark(const fs::path& task_dir, const BenchOptions& options, const TaskResourceFactory& factory) {
    BenchReport report;
    report.limit_seconds = options.limit_seconds;
    const auto manifests = find_manifests(task_dir);
    report.tasks.resize(manifests.size());

    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (auto i = next++; i < manifests.size(); i = next++) {
            report.tasks[i] = run_one(manifests[i], options, factory);
        }
    };
    const auto n = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(options.workers, 1)), 1,
                                           std::max<std::size_t>(manifests.size(), 1));
    std::vector<std::thread> pool;
    for (std::size_t i = 1; i < n; ++i) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    std::vector<QuestionResult> questions;
    std::vector<ModelingEntry> modeling;
    std::vector<TaskTransitionCounts> counts;
    std::size_t scored = 0;
    std::size_t successes = 0;
    double elapsed = 0;
    for (const auto& t : report.tasks) {
        if (t.manifest_error) continue;
        ++scored;
        successes += t.success ? 1 : 0;
        elapsed += t.elapsed_seconds;
        report.total_cost += t.cost;
        counts.push_back(t.transitions);
        if (t.question) questions.push_back(*t.question);
        if (t.modeling) modeling.push_back(*t.modeling);
    }
    if (scored > 0) {
        report.success_rate = static_cast<double>(successes) / static_cast<double>(scored);
        report.avg_elapsed_seconds = elapsed / static_cast<double>(scored);
    }
    if (!questions.empty()) report.analysis = score_analysis(questions);
    if (!modeling.empty()) report.rpg = score_rpg(modeling);
    report.transitions = transition_stats(counts);
    return report;
}

}  // namespace cellflow
