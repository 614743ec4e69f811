#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

#include "cellflow/error.hpp"
#include "cellflow/orchestrator.hpp"

namespace cellflow {

enum class ServiceErrorCode { UnknownSession, Busy, EmptyInstruction, SessionAborted, SessionClosed, BadRequest };

class ServiceError : public CodedError<ServiceErrorCode> {
public:
    using CodedError::CodedError;
};

/// HTTP status for a service error.
int http_status(ServiceErrorCode code);
std::string_view to_string(ServiceErrorCode code);

enum class SessionStatus { Idle, Running, AwaitingUser, Aborted, Closed };
std::string_view to_string(SessionStatus s);

/// Providers and kernel owned by one live session.
struct SessionResources {
    std::unique_ptr<LlmProvider> llm;
    std::unique_ptr<LlmProvider> judge;
    std::unique_ptr<Kernel> kernel;
};

/// Builds resources for a new session; throws ExecutorError(BackendUnavailable)
/// when the kernel cannot start.
using SessionFactory = std::function<SessionResources(const SessionConfig&, const std::filesystem::path& workdir)>;

struct ServiceOptions {
    /// Each session gets root/<id>/{workdir, transcript.jsonl}.
    std::filesystem::path root = "sessions";
    /// Bearer token; empty disables auth.
    std::string token;
    SessionConfig defaults;
    PriceTable prices;
    PromptCatalog prompts = PromptCatalog::builtin();
    /// Keep-alive comment interval on idle event streams.
    std::chrono::milliseconds heartbeat{15000};
};

/// Live sessions behind an HTTP API:
///   POST /sessions                      body: config overrides   -> record
///   GET  /sessions                                               -> [record]
///   GET  /sessions/{id}                                          -> record
///   POST /sessions/{id}/instruction     {"text": ...}            -> 202 record
///   POST /sessions/{id}/interrupt                                -> record
///   GET  /sessions/{id}/events?since=k  server-sent events, data = transcript line
///   GET  /sessions/{id}/notebook                                 -> ipynb
///   DELETE /sessions/{id}                                        -> record (Closed)
class SessionService {
public:
    SessionService(ServiceOptions options, SessionFactory factory);
    ~SessionService();

    SessionService(const SessionService&) = delete;
    SessionService& operator=(const SessionService&) = delete;

    nlohmann::json create(const nlohmann::json& overrides);
    nlohmann::json post_instruction(const std::string& id, const std::string& text);
    nlohmann::json interrupt(const std::string& id);
    nlohmann::json close(const std::string& id);
    nlohmann::json record(const std::string& id) const;
    nlohmann::json list() const;
    std::string notebook(const std::string& id) const;
    /// Transcript events with seq > since.
    std::vector<Event> events(const std::string& id, std::int64_t since) const;
    /// Blocks until the session is not running or the timeout elapses.
    bool wait_idle(const std::string& id, std::chrono::milliseconds timeout) const;

    /// Binds and serves in a background thread; returns the bound port
    /// (pass 0 for an ephemeral one).
    int start(const std::string& host, int port);
    /// Serves on the calling thread until stop().
    void serve(const std::string& host, int port);
    void stop();

private:
    struct Live;
    struct Server;
    std::shared_ptr<Live> find(const std::string& id) const;
    nlohmann::json record_of(const Live& live) const;
    void install_routes();

    ServiceOptions options_;
    SessionFactory factory_;
    mutable std::mutex mu_;
    std::map<std::string, std::shared_ptr<Live>> sessions_;
    std::uint64_t next_id_ = 0;
    std::unique_ptr<Server> server_;
    std::thread server_thread_;
};

}  // namespace cellflow
