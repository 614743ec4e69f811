#include "cellflow/cli.hpp"

#include <glob.h>
#include <stdlib.h>

#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "cellflow/config.hpp"
#include "cellflow/evalharness.hpp"
#include "cellflow/notebook.hpp"
#include "cellflow/orchestrator.hpp"
#include "cellflow/sessionservice.hpp"

namespace cellflow {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_text(const std::string& path) {
    if (path == "-") {
        std::ostringstream s;
        s << std::cin.rdbuf();
        return s.str();
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read " + path);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
}

struct Overrides {
    std::optional<std::string> model;
    std::optional<double> temperature;
    std::optional<std::int64_t> max_planning;
    std::optional<std::int64_t> max_execution;
    std::optional<std::int64_t> max_debug;
    std::optional<std::int64_t> max_nodes;
    std::optional<std::string> backend;
    std::optional<double> timeout;
    bool disable_planning = false;
    bool disable_repair = false;
    bool visual_tool = false;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--model", model, "Agent model name");
        cmd->add_option("--temperature", temperature, "Sampling temperature");
        cmd->add_option("--max-planning", max_planning, "max_planning_number");
        cmd->add_option("--max-execution", max_execution, "max_execution_number");
        cmd->add_option("--max-debug", max_debug, "max_debug_number");
        cmd->add_option("--max-nodes", max_nodes, "max_planning_execution_number");
        cmd->add_option("--backend", backend, "Executor backend")->check(CLI::IsMember({"local", "gateway"}));
        cmd->add_option("--timeout", timeout, "Per-task time limit in seconds");
        cmd->add_flag("--disable-planning", disable_planning, "Linear steps only");
        cmd->add_flag("--disable-repair", disable_repair, "Skip self-debugging and post-filtering");
        cmd->add_flag("--visual-tool", visual_tool, "Enable the image evaluation tool");
    }

    void apply(AppConfig& c) const {
        if (model) c.session.model = *model;
        if (temperature) c.session.temperature = *temperature;
        if (max_planning) c.session.budgets.max_planning_number = *max_planning;
        if (max_execution) c.session.budgets.max_execution_number = *max_execution;
        if (max_debug) c.session.budgets.max_debug_number = *max_debug;
        if (max_nodes) c.session.budgets.max_planning_execution_number = *max_nodes;
        if (backend) c.executor.backend = *backend;
        if (timeout) c.session.timeout_seconds = *timeout;
        if (disable_planning) c.session.ablations.disable_planning = true;
        if (disable_repair) c.session.ablations.disable_repair = true;
        if (visual_tool) c.session.visual_tool.enabled = true;
        c.session.validate();
    }
};

AppConfig load_config(const std::string& path) {
    return path.empty() ? parse_app_config(json::object()) : load_app_config(path);
}

int exit_for(Outcome o) { return o == Outcome::Aborted ? kExitAborted : kExitOk; }

void print_result(const SessionResult& r, const fs::path& transcript, const fs::path& notebook) {
    std::cout << "outcome: " << to_string(r.outcome);
    if (!r.stop_rule.empty()) std::cout << " (" << r.stop_rule << ")";
    if (!r.reason.empty()) std::cout << ": " << r.reason;
    std::cout << "\nllm calls: " << r.counters.llm_calls << "  planning entries: " << r.counters.planning_entries
              << "  repair episodes: " << r.counters.repair_episodes << "\ncost: $" << r.cost.to_string()
              << "  wall time: " << r.wall_time_seconds << " s\n";
    std::cout << "transcript: " << transcript.string() << "\n";
    if (!notebook.empty()) std::cout << "notebook: " << notebook.string() << "\n";
}

void write_notebook(const fs::path& path, const std::vector<Cell>& cells, const SessionConfig& config,
                    const std::string& id, const fs::path& workdir) {
    SessionMeta meta{id, config.language_tag, config.model, workdir};
    write_text(path, export_notebook_text(cells, meta));
}

std::vector<fs::path> expand_globs(const std::vector<std::string>& patterns) {
    std::vector<fs::path> out;
    for (const auto& p : patterns) {
        glob_t g{};
        if (::glob(p.c_str(), 0, nullptr, &g) == 0) {
            for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
        }
        ::globfree(&g);
    }
    return out;
}

fs::path make_scratch_dir() {
    auto tmpl = (fs::temp_directory_path() / "cellflow-replay-XXXXXX").string();
    if (!::mkdtemp(tmpl.data())) throw Error("cannot create scratch directory");
    return tmpl;
}

}  // namespace

ReplayReport replay_transcript(const fs::path& transcript, const ReplayOptions& options) {
    const auto recorded = read_transcript(transcript);
    const auto recovered = recover_session(recorded);
    auto config = recovered.config.get<SessionConfig>();

    std::vector<RecordedCall> calls;
    for (const auto& e : recorded) {
        if (e.type != EventType::LlmCall) continue;
        calls.push_back(RecordedCall{e.payload.at("request_hash").get<std::string>(),
                                     e.payload.at("reply").get<std::string>(), e.payload.at("usage").get<Usage>()});
    }
    ReplayProvider provider(calls);

    const auto scratch = make_scratch_dir();
    const auto workdir = scratch / "workdir";
    fs::create_directories(workdir);
    const auto source = options.source_workdir.empty() ? config.workdir : options.source_workdir;
    for (const auto& rel : recovered.workdir_files) {
        const auto from = source / rel;
        if (!fs::exists(from)) {
            fs::remove_all(scratch);
            throw ConfigError("replay needs " + from.string() + " from the recorded workdir");
        }
        fs::create_directories((workdir / rel).parent_path());
        fs::copy_file(from, workdir / rel);
    }

    ReplayReport report;
    report.recorded_events = recorded.size();
    Transcript replayed;
    {
        LocalSandboxKernel kernel(LocalSandboxConfig{}, workdir);
        SessionDeps deps;
        deps.llm = &provider;
        deps.judge = &provider;
        deps.kernel = &kernel;
        deps.transcript = &replayed;
        deps.prices = recovered.prices;
        deps.prompts = options.prompts_dir.empty() ? PromptCatalog::builtin() : PromptCatalog::load(options.prompts_dir);
        Session session(config, std::move(deps));
        for (std::size_t i = 0; i < recovered.instructions.size(); ++i) {
            const auto r = i == 0 ? session.run(recovered.instructions[i]) : session.resume(recovered.instructions[i]);
            if (r.outcome == Outcome::Aborted) {
                report.detail = r.reason;
                break;
            }
        }
        kernel.shutdown();
    }
    if (!options.keep_scratch) fs::remove_all(scratch);

    const auto replayed_events = replayed.events();
    report.replayed_events = replayed_events.size();
    const auto a = normalized_text(recorded);
    const auto b = normalized_text(replayed_events);
    report.identical = a == b && provider.served() == calls.size();
    if (!report.identical) {
        std::istringstream sa(a);
        std::istringstream sb(b);
        std::string la;
        std::string lb;
        std::size_t line = 0;
        while (true) {
            ++line;
            const bool ha = static_cast<bool>(std::getline(sa, la));
            const bool hb = static_cast<bool>(std::getline(sb, lb));
            if (!ha && !hb) break;
            if (!ha || !hb || la != lb) {
                report.first_difference = line;
                break;
            }
        }
        if (report.detail.empty()) report.detail = "normalized transcripts differ";
    }
    return report;
}

int cli_main(int argc, char** argv) {
    CLI::App app{"cellflow: notebook-native agent orchestration"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("-c,--config", config_path, "Config file (JSON)")->check(CLI::ExistingFile);

    // run
    auto* run = app.add_subcommand("run", "Run one instruction as a new session");
    std::string instruction_path;
    std::string workdir;
    std::string transcript_path = "transcript.jsonl";
    std::string notebook_path = "notebook.ipynb";
    Overrides overrides;
    run->add_option("--instruction", instruction_path, "Instruction file, or - for stdin")->required();
    run->add_option("--workdir", workdir, "Session working directory");
    run->add_option("--transcript", transcript_path, "Transcript output path");
    run->add_option("--notebook", notebook_path, "Notebook output path");
    overrides.add_to(run);

    // resume
    auto* resume = app.add_subcommand("resume", "Continue a recorded session with a follow-up instruction");
    std::string resume_transcript;
    std::string followup;
    std::string resume_notebook = "notebook.ipynb";
    std::string resume_workdir;
    resume->add_option("--transcript", resume_transcript, "Transcript to continue (appended in place)")
        ->required()
        ->check(CLI::ExistingFile);
    resume->add_option("--followup", followup, "Follow-up instruction text")->required();
    resume->add_option("--workdir", resume_workdir, "Working directory (default: the recorded one)");
    resume->add_option("--notebook", resume_notebook, "Notebook output path");

    // replay
    auto* replay = app.add_subcommand("replay", "Re-run a transcript against its recorded replies");
    std::string replay_transcript_path;
    ReplayOptions replay_options;
    std::string replay_source;
    std::string replay_prompts;
    replay->add_option("--transcript", replay_transcript_path, "Recorded transcript")->required()->check(CLI::ExistingFile);
    replay->add_option("--source-workdir", replay_source, "Directory holding the session's input files");
    replay->add_option("--prompts-dir", replay_prompts, "Prompt templates to use");
    replay->add_flag("--keep-scratch", replay_options.keep_scratch, "Keep the scratch workdir");

    // bench
    auto* bench = app.add_subcommand("bench", "Run every task.json under a directory");
    std::string tasks_dir;
    double limit_seconds = 3600;
    std::string bench_out = "bench-out";
    std::optional<int> workers;
    std::string report_path;
    bench->add_option("--tasks", tasks_dir, "Task directory")->required();
    bench->add_option("--limit-seconds", limit_seconds, "Per-task time limit");
    bench->add_option("--out", bench_out, "Output directory for workdirs and transcripts");
    bench->add_option("--workers", workers, "Parallel sessions");
    bench->add_option("--report", report_path, "Write the JSON report here");
    Overrides bench_overrides;
    bench_overrides.add_to(bench);

    // stats
    auto* stats = app.add_subcommand("stats", "Transition statistics over transcripts");
    std::vector<std::string> stat_patterns;
    bool stats_json = false;
    stats->add_option("--transcripts", stat_patterns, "Transcript files or glob patterns")->required();
    stats->add_flag("--json", stats_json, "Print JSON instead of a table");

    // export-notebook
    auto* exportnb = app.add_subcommand("export-notebook", "Write the live trace of a transcript as .ipynb");
    std::string export_transcript;
    std::string export_out;
    exportnb->add_option("--transcript", export_transcript, "Transcript")->required()->check(CLI::ExistingFile);
    exportnb->add_option("--out", export_out, "Notebook path")->required();

    // serve
    auto* serve = app.add_subcommand("serve", "Serve the session API");
    std::optional<int> port;
    std::optional<std::string> host;
    serve->add_option("--port", port, "Port");
    serve->add_option("--host", host, "Bind address");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        auto cfg = load_config(config_path);

        if (*run) {
            overrides.apply(cfg);
            if (!workdir.empty()) cfg.session.workdir = workdir;
            const auto text = read_text(instruction_path);
            fs::create_directories(cfg.session.workdir);
            Transcript transcript(transcript_path);
            auto llm = make_provider(cfg.provider);
            auto kernel = start_session(cfg.executor, cfg.session.workdir);
            SessionDeps deps;
            deps.llm = llm.get();
            deps.kernel = kernel.get();
            deps.transcript = &transcript;
            deps.prompts = cfg.prompts();
            deps.prices = cfg.prices;
            Session session(cfg.session, std::move(deps));
            SessionResult result;
            try {
                result = session.run(text);
            } catch (...) {
                transcript.close();
                throw;
            }
            transcript.close();
            kernel->shutdown();
            write_notebook(notebook_path, session.notebook_cells(), cfg.session, kernel->session_id(),
                           cfg.session.workdir);
            print_result(result, transcript_path, notebook_path);
            return exit_for(result.outcome);
        }

        if (*resume) {
            const auto events = read_transcript(resume_transcript);
            const auto recovered = recover_session(events);
            auto session_cfg = recovered.config.get<SessionConfig>();
            const fs::path wd = resume_workdir.empty() ? session_cfg.workdir : fs::path(resume_workdir);
            auto llm = make_provider(cfg.provider);
            auto kernel = start_session(cfg.executor, wd);
            Transcript transcript(resume_transcript);
            transcript.restore(events);
            SessionDeps deps;
            deps.llm = llm.get();
            deps.kernel = kernel.get();
            deps.transcript = &transcript;
            deps.prompts = cfg.prompts();
            deps.prices = cfg.prices.empty() ? recovered.prices : cfg.prices;
            Session session(session_cfg, std::move(deps));
            const auto result = session.resume_from(recovered, followup);
            transcript.close();
            kernel->shutdown();
            write_notebook(resume_notebook, session.notebook_cells(), session_cfg, kernel->session_id(), wd);
            print_result(result, resume_transcript, resume_notebook);
            return exit_for(result.outcome);
        }

        if (*replay) {
            replay_options.source_workdir = replay_source;
            replay_options.prompts_dir = replay_prompts.empty() && cfg.prompts_dir ? *cfg.prompts_dir
                                                                                  : fs::path(replay_prompts);
            const auto report = replay_transcript(replay_transcript_path, replay_options);
            if (report.identical) {
                std::cout << "replay identical: " << report.recorded_events << " events\n";
                return kExitOk;
            }
            std::cout << "replay diverged at normalized line " << report.first_difference << " (recorded "
                      << report.recorded_events << " events, replayed " << report.replayed_events
                      << "): " << report.detail << "\n";
            return kExitDivergence;
        }

        if (*bench) {
            bench_overrides.apply(cfg);
            BenchOptions options;
            options.config = cfg.session;
            options.limit_seconds = limit_seconds;
            options.workers = workers.value_or(cfg.bench_workers);
            options.output_dir = bench_out;
            options.prices = cfg.prices;
            const auto manifests = find_manifests(tasks_dir);
            if (manifests.empty()) {
                std::cout << "no tasks found under " << tasks_dir << "\n";
                BenchReport empty;
                empty.limit_seconds = limit_seconds;
                if (!report_path.empty()) write_text(report_path, json(empty).dump(2) + "\n");
                return kExitOk;
            }
            const auto prompts = cfg.prompts();
            const auto report = run_benchmark(tasks_dir, options, [&](const TaskManifest&, const fs::path& wd) {
                TaskResources r;
                r.llm = make_provider(cfg.provider);
                r.kernel = start_session(cfg.executor, wd);
                return r;
            });
            std::cout << render_bench_table(report);
            if (!report_path.empty()) {
                write_text(report_path, json(report).dump(2) + "\n");
                std::cout << "report: " << report_path << "\n";
            }
            for (const auto& t : report.tasks) {
                if (t.outcome == Outcome::Aborted) return kExitAborted;
            }
            return kExitOk;
        }

        if (*stats) {
            const auto files = expand_globs(stat_patterns);
            if (files.empty()) {
                std::cerr << "no transcripts match\n";
                return kExitUsage;
            }
            const auto s = transition_stats(files);
            if (stats_json) {
                std::cout << json(s).dump(2) << "\n";
            } else {
                std::cout << render_stats_table(s);
            }
            return kExitOk;
        }

        if (*exportnb) {
            const auto recovered = recover_session(read_transcript(export_transcript));
            const auto session_cfg = recovered.config.get<SessionConfig>();
            write_notebook(export_out, notebook_cells(recovered.history), session_cfg,
                           fs::path(export_transcript).stem().string(), session_cfg.workdir);
            std::cout << "notebook: " << export_out << "\n";
            return kExitOk;
        }

        if (*serve) {
            ServiceOptions options;
            options.root = cfg.service.root;
            const char* token = std::getenv(cfg.service.token_env.c_str());
            options.token = token ? token : "";
            options.defaults = cfg.session;
            options.prices = cfg.prices;
            options.prompts = cfg.prompts();
            SessionService service(options, [&](const SessionConfig&, const fs::path& wd) {
                SessionResources r;
                r.llm = make_provider(cfg.provider);
                r.kernel = start_session(cfg.executor, wd);
                return r;
            });
            const auto h = host.value_or(cfg.service.host);
            const auto p = port.value_or(cfg.service.port);
            std::cout << "serving on http://" << h << ":" << p << (options.token.empty() ? " (no auth)" : "") << "\n"
                      << std::flush;
            service.serve(h, p);
            return kExitOk;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const OrchestratorError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.code() == OrchestratorErrorCode::InvalidConfig || e.code() == OrchestratorErrorCode::EmptyInstruction
                   ? kExitUsage
                   : kExitAborted;
    } catch (const FstError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitAborted;
    }
    return kExitUsage;
}

int cli_main(const std::vector<std::string>& args) {
    std::vector<std::string> copy = args;
    std::vector<char*> argv;
    for (auto& a : copy) argv.push_back(a.data());
    argv.push_back(nullptr);
    return cli_main(static_cast<int>(copy.size()), argv.data());
}

}  // namespace cellflow
