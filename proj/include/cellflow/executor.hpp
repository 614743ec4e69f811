#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellflow/cell.hpp"
#include "cellflow/error.hpp"
#include "cellflow/fst.hpp"

namespace cellflow {

enum class ExecutorErrorCode { BackendUnavailable, KernelDead, Protocol };

class ExecutorError : public CodedError<ExecutorErrorCode> {
public:
    using CodedError::CodedError;
};

/// Error names synthesized by the executor rather than raised by user code.
inline constexpr std::string_view kTimeoutError = "Timeout";
inline constexpr std::string_view kInterruptedError = "Interrupted";
inline constexpr std::string_view kKernelDiedError = "KernelDied";

/// Outputs of one code cell. `finished` is false when the cell never
/// completed (timeout without recovery, kernel death).
struct CellRun {
    std::vector<CellOutput> outputs;
    bool finished = true;
};

/// One stateful interpreter. Executions are serialized; interrupt() may be
/// called from any thread.
class Kernel {
public:
    virtual ~Kernel() = default;

    virtual std::string backend() const = 0;
    virtual std::string session_id() const = 0;
    virtual const std::filesystem::path& workdir() const = 0;
    virtual bool alive() const = 0;

    /// Runs one cell. A timeout interrupts the run and yields an error output
    /// named "Timeout". Throws ExecutorError(KernelDead) on a dead kernel.
    virtual CellRun run(const std::string& cell_id, const std::string& code, std::chrono::milliseconds timeout) = 0;

    /// Aborts the running cell, which then reports an "Interrupted" error.
    /// No-op when idle; throws ExecutorError(KernelDead) on a dead kernel.
    virtual void interrupt() = 0;

    virtual void shutdown() = 0;

    /// Total time spent inside run().
    std::chrono::duration<double> busy_time() const;

protected:
    void add_busy_time(std::chrono::duration<double> d);

private:
    mutable std::mutex time_mu_;
    std::chrono::duration<double> busy_{0};
};

struct LocalSandboxConfig {
    std::string python = "python3";
    bool allow_shell = false;
    std::map<std::string, std::string> env;
    /// How long a timed-out or interrupted cell gets to unwind before the child is killed.
    std::chrono::milliseconds interrupt_grace{3000};
    std::chrono::milliseconds startup_timeout{30000};
};

/// Python child process speaking the framed pipe protocol; the working
/// directory of the child is the session workdir.
class LocalSandboxKernel : public Kernel {
public:
    LocalSandboxKernel(LocalSandboxConfig config, std::filesystem::path workdir);
    ~LocalSandboxKernel() override;

    std::string backend() const override { return "local"; }
    std::string session_id() const override { return session_id_; }
    const std::filesystem::path& workdir() const override { return workdir_; }
    bool alive() const override { return alive_; }
    CellRun run(const std::string& cell_id, const std::string& code, std::chrono::milliseconds timeout) override;
    void interrupt() override;
    void shutdown() override;

    int pid() const { return pid_; }

private:
    void send(const nlohmann::json& frame);
    /// Reads one frame; nullopt on deadline. Throws KernelDead on EOF.
    std::optional<nlohmann::json> read_frame(std::chrono::steady_clock::time_point deadline);
    void kill_child();

    LocalSandboxConfig config_;
    std::filesystem::path workdir_;
    std::string session_id_;
    int pid_ = -1;
    int to_child_ = -1;
    int from_child_ = -1;
    std::atomic<bool> alive_{false};
    std::atomic<bool> busy_{false};
    std::mutex run_mu_;
    std::mutex write_mu_;
    std::string read_buf_;
};

struct GatewayConfig {
    std::string url = "http://127.0.0.1:8888";  // http://host:port
    std::string kernel_name = "python3";
    std::string protocol_version = "5.3";
    std::string token;  // sent as "Authorization: token <token>" when non-empty
    std::chrono::milliseconds interrupt_grace{5000};
    std::chrono::milliseconds connect_timeout{10000};
};

/// Kernel hosted by a Jupyter kernel-gateway: REST for lifecycle, WebSocket
/// channels for execute_request / iopub traffic.
class GatewayKernel : public Kernel {
public:
    GatewayKernel(GatewayConfig config, std::filesystem::path workdir);
    ~GatewayKernel() override;

    std::string backend() const override { return "gateway"; }
    std::string session_id() const override { return kernel_id_; }
    const std::filesystem::path& workdir() const override { return workdir_; }
    bool alive() const override { return alive_; }
    CellRun run(const std::string& cell_id, const std::string& code, std::chrono::milliseconds timeout) override;
    void interrupt() override;
    void shutdown() override;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    GatewayConfig config_;
    std::filesystem::path workdir_;
    std::string kernel_id_;
    std::atomic<bool> alive_{false};
    std::atomic<bool> busy_{false};
    std::mutex run_mu_;
};

struct ExecResult {
    /// Input cells with outputs attached; cells after the failing one are
    /// returned untouched.
    std::vector<Cell> cells;
    Feedback feedback;
    double elapsed_seconds = 0;
    std::optional<std::size_t> aborted_at_cell;
};

/// Runs the code cells in order (markdown cells are skipped), stopping at
/// the first error. `timeout` bounds the whole action.
ExecResult execute_cells(Kernel& kernel, const std::vector<Cell>& cells, std::chrono::milliseconds timeout);

/// Error iff some cell carries an Error output; detail names the first one.
Feedback classify_feedback(const std::vector<Cell>& executed);

struct ExecutorConfig {
    std::string backend = "local";  // "local" | "gateway"
    LocalSandboxConfig local;
    GatewayConfig gateway;
};

/// Starts a kernel for `workdir` (created if missing). Throws
/// ExecutorError(BackendUnavailable) if the backend cannot be reached.
std::unique_ptr<Kernel> start_session(const ExecutorConfig& config, const std::filesystem::path& workdir);

}  // namespace cellflow
