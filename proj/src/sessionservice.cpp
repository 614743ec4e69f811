#include "cellflow/sessionservice.hpp"

#include <atomic>
#include <condition_variable>
#include <random>

#include <httplib.h>

#include "cellflow/notebook.hpp"

namespace cellflow {

namespace fs = std::filesystem;
using nlohmann::json;

int http_status(ServiceErrorCode code) {
    switch (code) {
        case ServiceErrorCode::UnknownSession: return 404;
        case ServiceErrorCode::Busy: return 409;
        case ServiceErrorCode::SessionAborted: return 409;
        case ServiceErrorCode::SessionClosed: return 409;
        case ServiceErrorCode::EmptyInstruction: return 422;
        case ServiceErrorCode::BadRequest: return 400;
    }
    return 500;
}

std::string_view to_string(ServiceErrorCode code) {
    switch (code) {
        case ServiceErrorCode::UnknownSession: return "UnknownSession";
        case ServiceErrorCode::Busy: return "Busy";
        case ServiceErrorCode::EmptyInstruction: return "EmptyInstruction";
        case ServiceErrorCode::SessionAborted: return "SessionAborted";
        case ServiceErrorCode::SessionClosed: return "SessionClosed";
        case ServiceErrorCode::BadRequest: return "BadRequest";
    }
    return "?";
}

std::string_view to_string(SessionStatus s) {
    switch (s) {
        case SessionStatus::Idle: return "Idle";
        case SessionStatus::Running: return "Running";
        case SessionStatus::AwaitingUser: return "AwaitingUser";
        case SessionStatus::Aborted: return "Aborted";
        case SessionStatus::Closed: return "Closed";
    }
    return "?";
}

struct SessionService::Live {
    std::string id;
    fs::path workdir;
    SessionConfig config;
    std::unique_ptr<Transcript> transcript;
    SessionResources resources;
    std::unique_ptr<Session> session;

    mutable std::mutex mu;
    mutable std::condition_variable cv;
    std::thread worker;
    bool running = false;
    bool started = false;
    bool closed = false;

    SessionStatus status() const {
        if (closed) return SessionStatus::Closed;
        if (running) return SessionStatus::Running;
        if (session->dead()) return SessionStatus::Aborted;
        return started ? SessionStatus::AwaitingUser : SessionStatus::Idle;
    }

    void join() {
        if (worker.joinable()) worker.join();
    }
};

struct SessionService::Server {
    httplib::Server http;
    std::atomic<bool> stopping{false};
};

SessionService::SessionService(ServiceOptions options, SessionFactory factory)
    : options_(std::move(options)), factory_(std::move(factory)), server_(std::make_unique<Server>()) {
    install_routes();
}

SessionService::~SessionService() {
    stop();
    std::map<std::string, std::shared_ptr<Live>> sessions;
    {
        std::lock_guard lock(mu_);
        sessions = sessions_;
    }
    for (auto& [id, live] : sessions) {
        try {
            close(id);
        } catch (const std::exception&) {
        }
    }
}

std::shared_ptr<SessionService::Live> SessionService::find(const std::string& id) const {
    std::lock_guard lock(mu_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw ServiceError(ServiceErrorCode::UnknownSession, "no session " + id);
    return it->second;
}

json SessionService::record_of(const Live& live) const {
    bool running = false;
    SessionStatus status;
    {
        std::lock_guard lock(live.mu);
        status = live.status();
        running = live.running;
    }
    return json{{"id", live.id},
                {"status", to_string(status)},
                {"running", running},
                {"state", to_string(live.session->state())},
                {"config", {{"model", live.config.model},
                            {"temperature", live.config.temperature},
                            {"budgets", live.config.budgets},
                            {"ablations", {{"disable_planning", live.config.ablations.disable_planning},
                                           {"disable_repair", live.config.ablations.disable_repair}}},
                            {"timeout_seconds", live.config.timeout_seconds}}},
                {"counters", live.session->counters()},
                {"cost", live.session->cost().to_string()},
                {"last_seq", live.transcript->last_seq()},
                {"workdir", live.workdir.generic_string()}};
}

json SessionService::create(const json& overrides) {
    if (!overrides.is_null() && !overrides.is_object()) {
        throw ServiceError(ServiceErrorCode::BadRequest, "config overrides must be a JSON object");
    }
    SessionConfig config;
    try {
        json merged = options_.defaults;
        if (overrides.is_object()) merged.merge_patch(overrides);
        config = merged.get<SessionConfig>();
        config.validate();
    } catch (const std::exception& e) {
        throw ServiceError(ServiceErrorCode::BadRequest, std::string("invalid config: ") + e.what());
    }

    std::string id;
    {
        std::lock_guard lock(mu_);
        std::random_device rd;
        char buf[32];
        std::snprintf(buf, sizeof buf, "s%llu-%08x", static_cast<unsigned long long>(++next_id_), rd());
        id = buf;
    }
    auto live = std::make_shared<Live>();
    live->id = id;
    const auto dir = options_.root / id;
    live->workdir = dir / "workdir";
    fs::create_directories(live->workdir);
    config.workdir = live->workdir;
    live->config = config;
    try {
        live->resources = factory_(config, live->workdir);
        live->transcript = std::make_unique<Transcript>(dir / "transcript.jsonl");
        SessionDeps deps;
        deps.llm = live->resources.llm.get();
        deps.judge = live->resources.judge ? live->resources.judge.get() : nullptr;
        deps.kernel = live->resources.kernel.get();
        deps.transcript = live->transcript.get();
        deps.prompts = options_.prompts;
        deps.prices = options_.prices;
        live->session = std::make_unique<Session>(config, std::move(deps));
    } catch (...) {
        if (live->resources.kernel) live->resources.kernel->shutdown();
        std::error_code ec;
        fs::remove_all(dir, ec);
        throw;
    }
    {
        std::lock_guard lock(mu_);
        sessions_[id] = live;
    }
    return record_of(*live);
}

json SessionService::post_instruction(const std::string& id, const std::string& text) {
    auto live = find(id);
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) {
        throw ServiceError(ServiceErrorCode::EmptyInstruction, "instruction text is empty");
    }
    {
        std::lock_guard lock(live->mu);
        if (live->closed) throw ServiceError(ServiceErrorCode::SessionClosed, "session " + id + " is closed");
        if (live->running) throw ServiceError(ServiceErrorCode::Busy, "session " + id + " is running");
        if (live->session->dead()) throw ServiceError(ServiceErrorCode::SessionAborted, "session " + id + " was aborted");
        live->join();
        const bool first = !live->started;
        live->started = true;
        live->running = true;
        live->worker = std::thread([live, text, first] {
            try {
                if (first) {
                    live->session->run(text);
                } else {
                    live->session->resume(text);
                }
            } catch (const std::exception&) {
                // The outcome is in the transcript; nothing else to report.
            }
            std::lock_guard lock(live->mu);
            live->running = false;
            live->cv.notify_all();
        });
    }
    return record_of(*live);
}

json SessionService::interrupt(const std::string& id) {
    auto live = find(id);
    live->session->interrupt();
    return record_of(*live);
}

json SessionService::close(const std::string& id) {
    auto live = find(id);
    bool already = false;
    {
        std::lock_guard lock(live->mu);
        already = live->closed;
    }
    if (already) return record_of(*live);
    live->session->cancel();
    {
        std::unique_lock lock(live->mu);
        live->cv.wait(lock, [&] { return !live->running; });
        live->join();
        live->closed = true;
    }
    live->resources.kernel->shutdown();
    live->transcript->close();
    return record_of(*live);
}

json SessionService::record(const std::string& id) const { return record_of(*find(id)); }

json SessionService::list() const {
    std::vector<std::shared_ptr<Live>> all;
    {
        std::lock_guard lock(mu_);
        for (const auto& [_, live] : sessions_) all.push_back(live);
    }
    json out = json::array();
    for (const auto& live : all) out.push_back(record_of(*live));
    return out;
}

std::string SessionService::notebook(const std::string& id) const {
    auto live = find(id);
    const auto cells = live->session->notebook_cells();
    SessionMeta meta{live->id, live->config.language_tag, live->config.model, live->workdir};
    return export_notebook_text(cells, meta);
}

std::vector<Event> SessionService::events(const std::string& id, std::int64_t since) const {
    return find(id)->transcript->events(since);
}

bool SessionService::wait_idle(const std::string& id, std::chrono::milliseconds timeout) const {
    auto live = find(id);
    std::unique_lock lock(live->mu);
    return live->cv.wait_for(lock, timeout, [&] { return !live->running; });
}

// ---------------------------------------------------------------------------
// HTTP

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view kind, const std::string& message) {
    send_json(res, status, json{{"error", kind}, {"message", message}});
}

template <typename F>
void guarded(httplib::Response& res, F&& f) {
    try {
        f();
    } catch (const ServiceError& e) {
        send_error(res, http_status(e.code()), to_string(e.code()), e.what());
    } catch (const ExecutorError& e) {
        send_error(res, 503, "BackendUnavailable", e.what());
    } catch (const json::exception& e) {
        send_error(res, 400, "BadRequest", e.what());
    } catch (const std::exception& e) {
        send_error(res, 500, "Internal", e.what());
    }
}

json body_json(const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    try {
        return json::parse(req.body);
    } catch (const json::parse_error& e) {
        throw ServiceError(ServiceErrorCode::BadRequest, std::string("body is not JSON: ") + e.what());
    }
}

}  // namespace

void SessionService::install_routes() {
    auto& http = server_->http;
    http.new_task_queue = [] { return new httplib::ThreadPool(64); };

    http.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
        if (options_.token.empty()) return httplib::Server::HandlerResponse::Unhandled;
        if (req.get_header_value("Authorization") == "Bearer " + options_.token) {
            return httplib::Server::HandlerResponse::Unhandled;
        }
        send_error(res, 401, "Unauthorized", "missing or wrong bearer token");
        return httplib::Server::HandlerResponse::Handled;
    });

    http.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { send_json(res, 201, create(body_json(req))); });
    });
    http.Get("/sessions", [this](const httplib::Request&, httplib::Response& res) {
        guarded(res, [&] { send_json(res, 200, list()); });
    });
    http.Get(R"(/sessions/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { send_json(res, 200, record(req.matches[1])); });
    });
    http.Delete(R"(/sessions/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { send_json(res, 200, close(req.matches[1])); });
    });
    http.Post(R"(/sessions/([^/]+)/instruction)", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const auto body = body_json(req);
            if (!body.contains("text") || !body["text"].is_string()) {
                throw ServiceError(ServiceErrorCode::EmptyInstruction, "body needs a \"text\" string");
            }
            send_json(res, 202, post_instruction(req.matches[1], body["text"].get<std::string>()));
        });
    });
    http.Post(R"(/sessions/([^/]+)/interrupt)", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { send_json(res, 200, interrupt(req.matches[1])); });
    });
    http.Get(R"(/sessions/([^/]+)/notebook)", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            res.status = 200;
            res.set_content(notebook(req.matches[1]), "application/x-ipynb+json");
        });
    });
    http.Get(R"(/sessions/([^/]+)/events)", [this](const httplib::Request& req, httplib::Response& res) {
        std::shared_ptr<Live> live;
        try {
            live = find(req.matches[1]);
        } catch (const ServiceError& e) {
            res.status = 404;
            res.set_content("event: error\ndata: " + json{{"error", to_string(e.code())}, {"message", e.what()}}.dump() +
                                "\n\n",
                            "text/event-stream");
            return;
        }
        std::int64_t since = 0;
        try {
            if (req.has_param("since")) since = std::stoll(req.get_param_value("since"));
            else if (req.has_header("Last-Event-ID")) since = std::stoll(req.get_header_value("Last-Event-ID"));
        } catch (const std::exception&) {
            send_error(res, 400, "BadRequest", "since must be an integer");
            return;
        }
        const bool follow = req.get_param_value("follow") != "0";
        res.set_header("Cache-Control", "no-cache");
        auto* server = server_.get();
        const auto heartbeat = options_.heartbeat;
        auto last_write = std::make_shared<std::chrono::steady_clock::time_point>(std::chrono::steady_clock::now());
        res.set_chunked_content_provider(
            "text/event-stream",
            [live, since, follow, server, heartbeat, last_write](std::size_t, httplib::DataSink& sink) mutable {
                const auto batch = live->transcript->events(since);
                for (const auto& e : batch) {
                    const auto frame = "id: " + std::to_string(e.seq) + "\ndata: " + e.to_line() + "\n\n";
                    if (!sink.write(frame.data(), frame.size())) return false;
                    since = e.seq;
                    *last_write = std::chrono::steady_clock::now();
                }
                if (!batch.empty()) return true;
                if (!follow || live->transcript->closed() || server->stopping) {
                    sink.done();
                    return true;
                }
                if (!live->transcript->wait_for(since, std::chrono::milliseconds(200))) {
                    if (!sink.is_writable()) return false;
                    if (std::chrono::steady_clock::now() - *last_write >= heartbeat) {
                        static constexpr std::string_view ping = ": keep-alive\n\n";
                        if (!sink.write(ping.data(), ping.size())) return false;
                        *last_write = std::chrono::steady_clock::now();
                    }
                }
                return true;
            });
    });
}

int SessionService::start(const std::string& host, int port) {
    auto& http = server_->http;
    const int bound = port == 0 ? http.bind_to_any_port(host) : (http.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
    server_thread_ = std::thread([this] { server_->http.listen_after_bind(); });
    server_->http.wait_until_ready();
    return bound;
}

void SessionService::serve(const std::string& host, int port) {
    if (!server_->http.listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
}

void SessionService::stop() {
    server_->stopping = true;
    server_->http.stop();
    if (server_thread_.joinable()) server_thread_.join();
}

}  // namespace cellflow
