#include "cellflow/executor.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <random>
#include <thread>

#include "cellflow/render.hpp"
#include "cellflow/resources.hpp"
#include "executor_internal.hpp"

extern char** environ;

namespace cellflow {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

/// Stored outputs are capped so a runaway print loop cannot exhaust memory;
/// prompt rendering truncates much further.
constexpr TruncationPolicy kStoragePolicy{512 * 1024, 512 * 1024};

std::string random_hex(std::size_t n) {
    static thread_local std::mt19937_64 rng{std::random_device{}()};
    static constexpr char kHex[] = "0123456789abcdef";
    std::string s;
    for (std::size_t i = 0; i < n; ++i) s += kHex[rng() % 16];
    return s;
}

std::string seconds_text(std::chrono::milliseconds ms) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", static_cast<double>(ms.count()) / 1000.0);
    return buf;
}

}  // namespace

std::chrono::duration<double> Kernel::busy_time() const {
    std::lock_guard lock(time_mu_);
    return busy_;
}

void Kernel::add_busy_time(std::chrono::duration<double> d) {
    std::lock_guard lock(time_mu_);
    busy_ += d;
}

namespace detail {

void append_stream(std::vector<CellOutput>& outs, OutputChannel channel, const std::string& text) {
    if (!outs.empty() && outs.back().channel == channel) {
        outs.back().text += text;
    } else {
        outs.push_back(channel == OutputChannel::Stdout ? CellOutput::stdout_text(text) : CellOutput::stderr_text(text));
    }
}

void cap_outputs(std::vector<CellOutput>& outs) {
    for (auto& o : outs) {
        bool cut = false;
        o.text = truncate_middle(o.text, kStoragePolicy, &cut);
        o.truncated = o.truncated || cut;
    }
}

bool has_error(const std::vector<CellOutput>& outs) {
    for (const auto& o : outs) {
        if (o.channel == OutputChannel::Error) return true;
    }
    return false;
}

}  // namespace detail

using detail::append_stream;
using detail::cap_outputs;
using detail::has_error;

// ---------------------------------------------------------------------------
// Local sandbox

LocalSandboxKernel::LocalSandboxKernel(LocalSandboxConfig config, std::filesystem::path workdir)
    : config_(std::move(config)), workdir_(std::move(workdir)), session_id_("local-" + random_hex(12)) {
    std::error_code ec;
    std::filesystem::create_directories(workdir_, ec);
    if (ec) {
        throw ExecutorError(ExecutorErrorCode::BackendUnavailable,
                            "cannot create workdir " + workdir_.string() + ": " + ec.message());
    }
    workdir_ = std::filesystem::absolute(workdir_);

    const auto script = resources::find("python/sandbox_worker.py");
    if (!script) throw ExecutorError(ExecutorErrorCode::BackendUnavailable, "sandbox worker script missing");

    int in_pipe[2];
    int out_pipe[2];
    if (pipe2(in_pipe, O_CLOEXEC) != 0 || pipe2(out_pipe, O_CLOEXEC) != 0) {
        throw ExecutorError(ExecutorErrorCode::BackendUnavailable, std::string("pipe: ") + std::strerror(errno));
    }

    static std::once_flag ignore_sigpipe;
    std::call_once(ignore_sigpipe, [] { ::signal(SIGPIPE, SIG_IGN); });

    posix_spawnattr_t attr;
    posix_spawnattr_init(&attr);
    sigset_t defaults;
    sigemptyset(&defaults);
    sigaddset(&defaults, SIGPIPE);
    sigaddset(&defaults, SIGINT);
    posix_spawnattr_setsigdefault(&attr, &defaults);
    posix_spawnattr_setflags(&attr, POSIX_SPAWN_SETSIGDEF);

    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_adddup2(&actions, in_pipe[0], 0);
    posix_spawn_file_actions_adddup2(&actions, out_pipe[1], 1);
    posix_spawn_file_actions_addchdir_np(&actions, workdir_.c_str());

    std::map<std::string, std::string> env;
    for (char** e = environ; e && *e; ++e) {
        std::string kv(*e);
        const auto eq = kv.find('=');
        if (eq != std::string::npos) env[kv.substr(0, eq)] = kv.substr(eq + 1);
    }
    env["MPLBACKEND"] = "Agg";
    env["PYTHONUNBUFFERED"] = "1";
    env["PYTHONHASHSEED"] = "0";
    env["PYTHONDONTWRITEBYTECODE"] = "1";
    env["CELLFLOW_ALLOW_SHELL"] = config_.allow_shell ? "1" : "0";
    for (const auto& [k, v] : config_.env) env[k] = v;
    std::vector<std::string> env_strings;
    for (const auto& [k, v] : env) env_strings.push_back(k + "=" + v);
    std::vector<char*> envp;
    for (auto& s : env_strings) envp.push_back(s.data());
    envp.push_back(nullptr);

    std::string arg0 = config_.python;
    std::string arg1 = "-c";
    std::string arg2(*script);
    std::vector<char*> argv{arg0.data(), arg1.data(), arg2.data(), nullptr};

    pid_t pid = -1;
    const int rc = posix_spawnp(&pid, config_.python.c_str(), &actions, &attr, argv.data(), envp.data());
    posix_spawn_file_actions_destroy(&actions);
    posix_spawnattr_destroy(&attr);
    close(in_pipe[0]);
    close(out_pipe[1]);
    if (rc != 0) {
        close(in_pipe[1]);
        close(out_pipe[0]);
        throw ExecutorError(ExecutorErrorCode::BackendUnavailable,
                            "cannot launch " + config_.python + ": " + std::strerror(rc));
    }
    pid_ = pid;
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];
    alive_ = true;

    try {
        const auto ready = read_frame(Clock::now() + config_.startup_timeout);
        if (!ready || ready->value("type", "") != "ready") {
            throw ExecutorError(ExecutorErrorCode::BackendUnavailable, "sandbox worker did not report ready");
        }
    } catch (const ExecutorError& e) {
        kill_child();
        throw ExecutorError(ExecutorErrorCode::BackendUnavailable, std::string("sandbox failed to start: ") + e.what());
    }
}

LocalSandboxKernel::~LocalSandboxKernel() { shutdown(); }

void LocalSandboxKernel::kill_child() {
    alive_ = false;
    {
        std::lock_guard lock(write_mu_);
        if (to_child_ >= 0) close(to_child_);
        to_child_ = -1;
    }
    if (pid_ > 0) {
        ::kill(pid_, SIGKILL);
        int status = 0;
        waitpid(pid_, &status, 0);
        pid_ = -1;
    }
    if (from_child_ >= 0) close(from_child_);
    from_child_ = -1;
}

void LocalSandboxKernel::shutdown() {
    std::lock_guard lock(write_mu_);
    if (pid_ <= 0) return;
    alive_ = false;
    if (to_child_ >= 0) close(to_child_);
    to_child_ = -1;
    // The worker exits when its input closes; give it a moment before killing.
    for (int i = 0; i < 50; ++i) {
        int status = 0;
        if (waitpid(pid_, &status, WNOHANG) == pid_) {
            pid_ = -1;
            break;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    if (pid_ > 0) {
        ::kill(pid_, SIGKILL);
        int status = 0;
        waitpid(pid_, &status, 0);
        pid_ = -1;
    }
    if (from_child_ >= 0) close(from_child_);
    from_child_ = -1;
}

void LocalSandboxKernel::send(const json& frame) {
    const auto body = frame.dump();
    std::string data(4, '\0');
    const auto n = static_cast<std::uint32_t>(body.size());
    data[0] = static_cast<char>((n >> 24) & 0xff);
    data[1] = static_cast<char>((n >> 16) & 0xff);
    data[2] = static_cast<char>((n >> 8) & 0xff);
    data[3] = static_cast<char>(n & 0xff);
    data += body;
    std::lock_guard lock(write_mu_);
    std::size_t off = 0;
    while (off < data.size()) {
        if (to_child_ < 0) throw ExecutorError(ExecutorErrorCode::KernelDead, "sandbox input is closed");
        const auto w = ::write(to_child_, data.data() + off, data.size() - off);
        if (w < 0) {
            if (errno == EINTR) continue;
            throw ExecutorError(ExecutorErrorCode::KernelDead, std::string("write to sandbox: ") + std::strerror(errno));
        }
        off += static_cast<std::size_t>(w);
    }
}

std::optional<json> LocalSandboxKernel::read_frame(Clock::time_point deadline) {
    while (true) {
        if (read_buf_.size() >= 4) {
            const auto* p = reinterpret_cast<const unsigned char*>(read_buf_.data());
            const std::size_t n = (std::size_t{p[0]} << 24) | (std::size_t{p[1]} << 16) | (std::size_t{p[2]} << 8) | p[3];
            if (read_buf_.size() >= 4 + n) {
                auto body = read_buf_.substr(4, n);
                read_buf_.erase(0, 4 + n);
                try {
                    return json::parse(body);
                } catch (const json::parse_error& e) {
                    throw ExecutorError(ExecutorErrorCode::Protocol, std::string("bad frame: ") + e.what());
                }
            }
        }
        const auto now = Clock::now();
        if (now >= deadline) return std::nullopt;
        const auto wait = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count();
        pollfd pfd{from_child_, POLLIN, 0};
        const int pr = ::poll(&pfd, 1, static_cast<int>(std::min<long long>(wait + 1, 1000)));
        if (pr < 0) {
            if (errno == EINTR) continue;
            throw ExecutorError(ExecutorErrorCode::KernelDead, std::string("poll: ") + std::strerror(errno));
        }
        if (pr == 0) continue;
        char buf[65536];
        const auto r = ::read(from_child_, buf, sizeof buf);
        if (r < 0) {
            if (errno == EINTR) continue;
            throw ExecutorError(ExecutorErrorCode::KernelDead, std::string("read: ") + std::strerror(errno));
        }
        if (r == 0) throw ExecutorError(ExecutorErrorCode::KernelDead, "sandbox process exited");
        read_buf_.append(buf, static_cast<std::size_t>(r));
    }
}

CellRun LocalSandboxKernel::run(const std::string& cell_id, const std::string& code, std::chrono::milliseconds timeout) {
    std::lock_guard lock(run_mu_);
    if (!alive_) throw ExecutorError(ExecutorErrorCode::KernelDead, "sandbox kernel is not running");
    const auto start = Clock::now();
    CellRun result;
    busy_ = true;
    bool timed_out = false;
    try {
        send(json{{"type", "exec"}, {"id", cell_id}, {"code", code}});
        auto deadline = start + timeout;
        while (true) {
            auto frame = read_frame(deadline);
            if (!frame) {
                if (timed_out) {
                    // The worker ignored the interrupt; it cannot be trusted any more.
                    kill_child();
                    result.outputs.push_back(CellOutput::error(
                        std::string(kTimeoutError), "execution exceeded " + seconds_text(timeout) + " s; kernel killed"));
                    result.finished = false;
                    break;
                }
                timed_out = true;
                send(json{{"type", "interrupt"}});
                deadline = Clock::now() + config_.interrupt_grace;
                continue;
            }
            const auto type = frame->value("type", "");
            if (type == "stdout" || type == "stderr") {
                append_stream(result.outputs, type == "stdout" ? OutputChannel::Stdout : OutputChannel::Stderr,
                              frame->value("text", ""));
            } else if (type == "rich") {
                std::optional<std::string> path;
                if (frame->contains("payload_path")) path = (*frame)["payload_path"].get<std::string>();
                result.outputs.push_back(
                    CellOutput::rich(frame->value("mime", "text/plain"), frame->value("text", ""), path));
            } else if (type == "error") {
                std::vector<std::string> tb;
                if (frame->contains("traceback")) tb = (*frame)["traceback"].get<std::vector<std::string>>();
                std::string name = frame->value("ename", "Error");
                std::string value = frame->value("evalue", "");
                if (timed_out && name == kInterruptedError) {
                    name = kTimeoutError;
                    value = "execution exceeded " + seconds_text(timeout) + " s";
                } else if (name == kInterruptedError && value.empty()) {
                    value = "execution was interrupted";
                }
                result.outputs.push_back(CellOutput::error(name, value, std::move(tb)));
            } else if (type == "done") {
                break;
            }
        }
    } catch (const ExecutorError& e) {
        busy_ = false;
        if (e.code() != ExecutorErrorCode::KernelDead) throw;
        kill_child();
        result.outputs.push_back(CellOutput::error(std::string(kKernelDiedError), e.what()));
        result.finished = false;
    }
    busy_ = false;
    if (timed_out && !has_error(result.outputs)) {
        result.outputs.push_back(
            CellOutput::error(std::string(kTimeoutError), "execution exceeded " + seconds_text(timeout) + " s"));
    }
    cap_outputs(result.outputs);
    add_busy_time(Clock::now() - start);
    return result;
}

void LocalSandboxKernel::interrupt() {
    if (!alive_) throw ExecutorError(ExecutorErrorCode::KernelDead, "sandbox kernel is not running");
    if (!busy_) return;
    send(json{{"type", "interrupt"}});
}

// ---------------------------------------------------------------------------
// Shared helpers

ExecResult execute_cells(Kernel& kernel, const std::vector<Cell>& cells, std::chrono::milliseconds timeout) {
    ExecResult result;
    result.cells = cells;
    const auto start = Clock::now();
    const auto deadline = start + timeout;
    for (std::size_t i = 0; i < result.cells.size(); ++i) {
        auto& cell = result.cells[i];
        if (!cell.is_code()) continue;
        auto remaining = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
        if (remaining.count() <= 0) {
            cell.outputs = {CellOutput::error(std::string(kTimeoutError),
                                              "execution exceeded " + seconds_text(timeout) + " s")};
            result.aborted_at_cell = i;
            break;
        }
        auto run = kernel.run(cell.id, cell.source, remaining);
        cell.outputs = std::move(run.outputs);
        if (has_error(cell.outputs)) {
            result.aborted_at_cell = i;
            break;
        }
    }
    result.elapsed_seconds = std::chrono::duration<double>(Clock::now() - start).count();
    result.feedback = classify_feedback(result.cells);
    return result;
}

Feedback classify_feedback(const std::vector<Cell>& executed) {
    for (const auto& cell : executed) {
        for (const auto& o : cell.outputs) {
            if (o.channel == OutputChannel::Error) {
                return Feedback::failure(ErrorDetail{o.error_name.value_or("Error"), o.error_value.value_or(""), cell.id});
            }
        }
    }
    return Feedback::ok();
}

std::unique_ptr<Kernel> start_session(const ExecutorConfig& config, const std::filesystem::path& workdir) {
    if (config.backend == "local") return std::make_unique<LocalSandboxKernel>(config.local, workdir);
    if (config.backend == "gateway") return std::make_unique<GatewayKernel>(config.gateway, workdir);
    throw ExecutorError(ExecutorErrorCode::BackendUnavailable, "unknown executor backend '" + config.backend + "'");
}

}  // namespace cellflow
