#pragma once

#include <stdlib.h>

#include <atomic>
#include <condition_variable>
#include <filesystem>
#include <map>
#include <mutex>
#include <regex>
#include <string>
#include <thread>
#include <vector>

#include "cellflow/executor.hpp"
#include "cellflow/llm.hpp"
#include "cellflow/orchestrator.hpp"

namespace cftest {

using namespace cellflow;

inline std::string md(const std::string& s) { return "```markdown\n" + s + "\n```\n"; }
inline std::string py(const std::string& s) { return "```python\n" + s + "\n```\n"; }

inline std::string goal(const std::string& g, const std::string& code = "x = 1") {
    return md("[STEP GOAL]: " + g) + py(code);
}

/// Which prompt a request was built from.
enum class Turn { Initial, Plan, Exec, Debug, Filter, Unknown };

inline Turn turn_of(const std::vector<ChatMessage>& messages) {
    for (auto it = messages.rbegin(); it != messages.rend(); ++it) {
        if (it->role != Role::User) continue;
        const auto& t = it->text;
        if (t.rfind("Currently in the Post-Debugging Stage.", 0) == 0) return Turn::Filter;
        if (t.find("Currently in the Debugging Stage.") != std::string::npos) return Turn::Debug;
        if (t.find("Currently in the Incremental Execution Stage.") != std::string::npos) return Turn::Exec;
        if (t.find("Currently in the Planning Stage.") != std::string::npos) return Turn::Plan;
        if (t.rfind("Let's address the [USER INSTRUCTION] STEP by STEP", 0) == 0) return Turn::Initial;
    }
    return Turn::Unknown;
}

/// Scripted provider that answers per prompt kind. The callback receives the
/// turn, how many times that turn has been asked so far, and the messages.
using StageFn = std::function<std::optional<std::string>(Turn, int, const std::vector<ChatMessage>&)>;

inline std::unique_ptr<ScriptedProvider> stage_provider(StageFn fn) {
    auto counts = std::make_shared<std::map<Turn, int>>();
    return std::make_unique<ScriptedProvider>(
        [fn, counts](const std::vector<ChatMessage>& m, std::size_t) -> std::optional<std::string> {
            const auto t = turn_of(m);
            const int n = (*counts)[t]++;
            return fn(t, n, m);
        });
}

/// In-process stand-in for a Python kernel. Recognized markers in code:
///   RAISE(Name)   error output Name: boom
///   SLEEP(ms)     blocks, honoring interrupt and timeout
///   DIE           kernel dies mid-cell
///   PRINT(text)   stdout text
/// Anything else prints "ran <cell id>".
class FakeKernel : public Kernel {
public:
    explicit FakeKernel(std::filesystem::path workdir = ".") : workdir_(std::move(workdir)) {}

    std::string backend() const override { return "fake"; }
    std::string session_id() const override { return "fake-1"; }
    const std::filesystem::path& workdir() const override { return workdir_; }
    bool alive() const override { return alive_; }

    CellRun run(const std::string& cell_id, const std::string& code, std::chrono::milliseconds timeout) override {
        if (!alive_) throw ExecutorError(ExecutorErrorCode::KernelDead, "fake kernel is dead");
        {
            std::lock_guard lock(mu_);
            log_.push_back(code);
            ids_.push_back(cell_id);
        }
        CellRun r;
        static const std::regex raise_re(R"(RAISE\((\w+)\))");
        static const std::regex sleep_re(R"(SLEEP\((\d+)\))");
        static const std::regex print_re(R"(PRINT\(([^)]*)\))");
        std::smatch m;
        if (std::regex_search(code, m, sleep_re)) {
            const auto want = std::chrono::milliseconds(std::stoll(m[1]));
            std::unique_lock lock(mu_);
            busy_ = true;
            interrupted_ = false;
            const auto limit = std::min(want, timeout);
            const bool hit = cv_.wait_for(lock, limit, [&] { return interrupted_; });
            busy_ = false;
            if (hit) {
                r.outputs.push_back(CellOutput::error(std::string(kInterruptedError), "execution was interrupted"));
                return r;
            }
            if (want > timeout) {
                r.outputs.push_back(CellOutput::error(std::string(kTimeoutError), "execution exceeded limit"));
                return r;
            }
        }
        if (code.find("DIE") != std::string::npos) {
            alive_ = false;
            r.finished = false;
            r.outputs.push_back(CellOutput::error(std::string(kKernelDiedError), "kernel exited"));
            return r;
        }
        if (std::regex_search(code, m, raise_re)) {
            r.outputs.push_back(CellOutput::error(m[1], "boom", {"Traceback: " + cell_id}));
            return r;
        }
        if (std::regex_search(code, m, print_re)) {
            r.outputs.push_back(CellOutput::stdout_text(m[1].str() + "\n"));
            return r;
        }
        r.outputs.push_back(CellOutput::stdout_text("ran " + cell_id + "\n"));
        return r;
    }

    void interrupt() override {
        std::lock_guard lock(mu_);
        if (busy_) {
            interrupted_ = true;
            cv_.notify_all();
        }
    }

    void shutdown() override { alive_ = false; }

    std::vector<std::string> log() const {
        std::lock_guard lock(mu_);
        return log_;
    }

    bool busy() const {
        std::lock_guard lock(mu_);
        return busy_;
    }

private:
    std::filesystem::path workdir_;
    std::atomic<bool> alive_{true};
    mutable std::mutex mu_;
    std::condition_variable cv_;
    bool busy_ = false;
    bool interrupted_ = false;
    std::vector<std::string> log_;
    std::vector<std::string> ids_;
};

/// Temporary directory removed on destruction.
class TempDir {
public:
    TempDir() {
        auto tmpl = (std::filesystem::temp_directory_path() / "cellflow-test-XXXXXX").string();
        if (!::mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
        path_ = tmpl;
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

/// Config with test-friendly defaults.
inline SessionConfig test_config() {
    SessionConfig c;
    c.timeout_seconds = 60;
    return c;
}

struct Harness {
    std::unique_ptr<ScriptedProvider> llm;
    FakeKernel kernel;
    Transcript transcript;

    explicit Harness(StageFn fn) : llm(stage_provider(std::move(fn))) {}

    SessionDeps deps() {
        SessionDeps d;
        d.llm = llm.get();
        d.kernel = &kernel;
        d.transcript = &transcript;
        return d;
    }

    std::vector<Event> of_type(EventType t) const {
        std::vector<Event> out;
        for (auto& e : transcript.events()) {
            if (e.type == t) out.push_back(e);
        }
        return out;
    }
};

}  // namespace cftest
