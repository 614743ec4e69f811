#include <boost/asio/connect.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include <httplib.h>

#include <random>
#include <regex>

#include "cellflow/codec.hpp"
#include "cellflow/executor.hpp"
#include "cellflow/render.hpp"
#include "cellflow/transcript.hpp"
#include "executor_internal.hpp"

namespace cellflow {

namespace beast = boost::beast;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

std::string uuid4() {
    static thread_local std::mt19937_64 rng{std::random_device{}()};
    std::uniform_int_distribution<int> d(0, 15);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string s;
    for (int i = 0; i < 32; ++i) {
        if (i == 8 || i == 12 || i == 16 || i == 20) s += '-';
        s += kHex[d(rng)];
    }
    return s;
}

std::string strip_ansi(const std::string& s) {
    static const std::regex ansi("\x1b\\[[0-9;]*[A-Za-z]");
    return std::regex_replace(s, ansi, "");
}

struct Endpoint {
    std::string host;
    std::string port;
};

Endpoint parse_url(const std::string& url) {
    static const std::regex re(R"(^(https?|wss?)://([^/:]+)(?::(\d+))?/?$)");
    std::smatch m;
    if (!std::regex_match(url, m, re)) {
        throw ExecutorError(ExecutorErrorCode::BackendUnavailable, "gateway url must be http://host[:port], got " + url);
    }
    if (m[1] == "https" || m[1] == "wss") {
        throw ExecutorError(ExecutorErrorCode::BackendUnavailable, "TLS gateway connections are not supported");
    }
    return {m[2], m[3].matched ? std::string(m[3]) : std::string("80")};
}

httplib::Headers auth_headers(const std::string& token) {
    httplib::Headers h;
    if (!token.empty()) h.emplace("Authorization", "token " + token);
    return h;
}

}  // namespace

struct GatewayKernel::Impl {
    net::io_context ioc;
    websocket::stream<beast::tcp_stream> ws{ioc};
    beast::flat_buffer buffer;
    Endpoint endpoint;
    std::string session = uuid4();
    bool read_pending = false;
    bool read_done = false;
    beast::error_code read_ec;

    void start_read() {
        read_done = false;
        read_pending = true;
        ws.async_read(buffer, [this](beast::error_code ec, std::size_t) {
            read_ec = ec;
            read_done = true;
            read_pending = false;
        });
    }

    /// Waits up to `slice` for the pending read; returns true once it completed.
    bool pump(std::chrono::milliseconds slice) {
        ioc.restart();
        ioc.run_for(slice);
        return read_done;
    }
};

GatewayKernel::GatewayKernel(GatewayConfig config, std::filesystem::path workdir)
    : impl_(std::make_unique<Impl>()), config_(std::move(config)), workdir_(std::move(workdir)) {
    std::error_code fec;
    std::filesystem::create_directories(workdir_, fec);
    if (fec) {
        throw ExecutorError(ExecutorErrorCode::BackendUnavailable,
                            "cannot create workdir " + workdir_.string() + ": " + fec.message());
    }
    workdir_ = std::filesystem::absolute(workdir_);
    impl_->endpoint = parse_url(config_.url);

    httplib::Client http(config_.url);
    http.set_connection_timeout(std::chrono::duration_cast<std::chrono::seconds>(config_.connect_timeout));
    auto res = http.Post("/api/kernels", auth_headers(config_.token), json{{"name", config_.kernel_name}}.dump(),
                         "application/json");
    if (!res) {
        throw ExecutorError(ExecutorErrorCode::BackendUnavailable,
                            "gateway " + config_.url + " unreachable: " + httplib::to_string(res.error()));
    }
    if (res->status / 100 != 2) {
        throw ExecutorError(ExecutorErrorCode::BackendUnavailable,
                            "gateway refused kernel creation: HTTP " + std::to_string(res->status) + " " + res->body);
    }
    try {
        kernel_id_ = json::parse(res->body).at("id").get<std::string>();
    } catch (const std::exception& e) {
        throw ExecutorError(ExecutorErrorCode::BackendUnavailable, std::string("bad kernel creation reply: ") + e.what());
    }

    try {
        tcp::resolver resolver(impl_->ioc);
        auto results = resolver.resolve(impl_->endpoint.host, impl_->endpoint.port);
        beast::get_lowest_layer(impl_->ws).connect(results);
        const auto token = config_.token;
        impl_->ws.set_option(websocket::stream_base::decorator([token](websocket::request_type& req) {
            if (!token.empty()) req.set(beast::http::field::authorization, "token " + token);
        }));
        impl_->ws.read_message_max(64 * 1024 * 1024);
        impl_->ws.handshake(impl_->endpoint.host + ":" + impl_->endpoint.port,
                            "/api/kernels/" + kernel_id_ + "/channels?session_id=" + impl_->session);
        impl_->ws.text(true);
    } catch (const std::exception& e) {
        http.Delete("/api/kernels/" + kernel_id_, auth_headers(config_.token));
        throw ExecutorError(ExecutorErrorCode::BackendUnavailable, std::string("gateway websocket: ") + e.what());
    }
    alive_ = true;
}

GatewayKernel::~GatewayKernel() { shutdown(); }

void GatewayKernel::shutdown() {
    std::lock_guard lock(run_mu_);
    if (kernel_id_.empty()) return;
    if (alive_) {
        beast::error_code ec;
        impl_->ws.close(websocket::close_code::normal, ec);
    }
    alive_ = false;
    httplib::Client http(config_.url);
    http.set_connection_timeout(std::chrono::seconds(2));
    http.Delete("/api/kernels/" + kernel_id_, auth_headers(config_.token));
    kernel_id_.clear();
}

void GatewayKernel::interrupt() {
    if (!alive_) throw ExecutorError(ExecutorErrorCode::KernelDead, "gateway kernel is not running");
    if (!busy_) return;
    httplib::Client http(config_.url);
    http.set_connection_timeout(std::chrono::seconds(5));
    auto res = http.Post("/api/kernels/" + kernel_id_ + "/interrupt", auth_headers(config_.token), "", "application/json");
    if (!res) throw ExecutorError(ExecutorErrorCode::KernelDead, "interrupt failed: " + httplib::to_string(res.error()));
}

CellRun GatewayKernel::run(const std::string& cell_id, const std::string& code, std::chrono::milliseconds timeout) {
    std::lock_guard lock(run_mu_);
    if (!alive_) throw ExecutorError(ExecutorErrorCode::KernelDead, "gateway kernel is not running");
    const auto start = Clock::now();
    busy_ = true;
    CellRun result;

    const auto msg_id = uuid4();
    json msg{{"header",
              {{"msg_id", msg_id},
               {"username", "cellflow"},
               {"session", impl_->session},
               {"date", iso8601_now()},
               {"msg_type", "execute_request"},
               {"version", config_.protocol_version}}},
             {"parent_header", json::object()},
             {"metadata", json::object()},
             {"content",
              {{"code", code},
               {"silent", false},
               {"store_history", true},
               {"user_expressions", json::object()},
               {"allow_stdin", false},
               {"stop_on_error", true}}},
             {"channel", "shell"},
             {"buffers", json::array()}};

    int image_no = 0;
    bool timed_out = false;
    auto deadline = start + timeout;
    auto fail_dead = [&](const std::string& why) {
        alive_ = false;
        beast::get_lowest_layer(impl_->ws).close();
        result.outputs.push_back(CellOutput::error(std::string(timed_out ? kTimeoutError : kKernelDiedError), why));
        result.finished = false;
    };

    try {
        impl_->ws.write(net::buffer(msg.dump()));
    } catch (const std::exception& e) {
        busy_ = false;
        fail_dead(std::string("gateway connection lost: ") + e.what());
        add_busy_time(Clock::now() - start);
        return result;
    }

    while (true) {
        if (!impl_->read_pending && !impl_->read_done) impl_->start_read();
        const auto now = Clock::now();
        if (now >= deadline) {
            if (timed_out) {
                fail_dead("kernel did not respond to interrupt after timeout");
                break;
            }
            timed_out = true;
            try {
                interrupt();
            } catch (const ExecutorError&) {
            }
            deadline = Clock::now() + config_.interrupt_grace;
            continue;
        }
        const auto slice = std::min(std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now),
                                    std::chrono::milliseconds(200));
        if (!impl_->pump(slice + std::chrono::milliseconds(1))) continue;
        impl_->read_done = false;
        if (impl_->read_ec) {
            fail_dead("gateway connection lost: " + impl_->read_ec.message());
            break;
        }
        const auto text = beast::buffers_to_string(impl_->buffer.data());
        impl_->buffer.consume(impl_->buffer.size());
        json m;
        try {
            m = json::parse(text);
        } catch (const json::parse_error&) {
            continue;
        }
        if (!m.contains("parent_header") || m["parent_header"].value("msg_id", "") != msg_id) continue;
        const auto type = m.contains("header") ? m["header"].value("msg_type", "") : m.value("msg_type", "");
        const auto& content = m.contains("content") ? m["content"] : json::object();
        if (type == "stream") {
            const auto name = content.value("name", "stdout");
            detail::append_stream(result.outputs, name == "stderr" ? OutputChannel::Stderr : OutputChannel::Stdout,
                                 content.value("text", ""));
        } else if (type == "execute_result" || type == "display_data") {
            const auto data = content.value("data", json::object());
            if (data.contains("image/png") && data["image/png"].is_string()) {
                const auto rel = "outputs/" + cell_id + "_" + std::to_string(++image_no) + ".png";
                codec::write_file(workdir_ / rel, codec::base64_decode(data["image/png"].get<std::string>()));
                result.outputs.push_back(CellOutput::rich("image/png", "", rel));
            } else if (data.contains("text/plain") && data["text/plain"].is_string()) {
                result.outputs.push_back(CellOutput::rich("text/plain", data["text/plain"].get<std::string>()));
            } else {
                for (const auto& [mime, value] : data.items()) {
                    if (value.is_string()) {
                        result.outputs.push_back(CellOutput::rich(mime, value.get<std::string>()));
                        break;
                    }
                }
            }
        } else if (type == "error") {
            std::string name = content.value("ename", "Error");
            std::string value = content.value("evalue", "");
            if (name == "KeyboardInterrupt") {
                name = std::string(timed_out ? kTimeoutError : kInterruptedError);
                if (timed_out) value = "execution exceeded time limit";
            }
            std::vector<std::string> tb;
            if (content.contains("traceback")) {
                for (const auto& line : content["traceback"]) tb.push_back(strip_ansi(line.get<std::string>()));
            }
            result.outputs.push_back(CellOutput::error(name, value, std::move(tb)));
        } else if (type == "status" && content.value("execution_state", "") == "idle") {
            break;
        }
    }
    busy_ = false;
    if (timed_out && !detail::has_error(result.outputs)) {
        result.outputs.push_back(CellOutput::error(std::string(kTimeoutError), "execution exceeded time limit"));
    }
    detail::cap_outputs(result.outputs);
    add_busy_time(Clock::now() - start);
    return result;
}

}  // namespace cellflow
