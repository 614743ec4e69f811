#pragma once

#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include <atomic>
#include <condition_variable>
#include <mutex>
#include <regex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

namespace cftest {

/// Minimal kernel-gateway double: POST/DELETE /api/kernels, interrupt, and
/// the channels WebSocket. Code understood by its "kernel":
///   print(<text>)  stream on stdout
///   raise          error ValueError
///   sleep          blocks until interrupted (KeyboardInterrupt)
///   png            display_data with a 1x1 PNG
///   anything else  execute_result "ok"
class FakeGateway {
public:
    FakeGateway() : acceptor_(ioc_, {boost::asio::ip::make_address("127.0.0.1"), 0}) {
        port_ = acceptor_.local_endpoint().port();
        thread_ = std::thread([this] { accept_loop(); });
    }

    ~FakeGateway() {
        stopping_ = true;
        boost::system::error_code ec;
        {
            // Wake the blocking accept.
            boost::asio::io_context wake_ioc;
            boost::asio::ip::tcp::socket wake(wake_ioc);
            wake.connect({boost::asio::ip::make_address("127.0.0.1"), static_cast<unsigned short>(port_)}, ec);
        }
        {
            std::lock_guard lock(mu_);
            interrupted_ = true;
            cv_.notify_all();
        }
        thread_.join();
        acceptor_.close(ec);
        for (auto& t : workers_) t.join();
    }

    std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

    std::string token;
    std::atomic<int> kernels_created{0};
    std::atomic<int> kernels_deleted{0};
    std::atomic<int> interrupts{0};
    std::atomic<int> auth_failures{0};
    std::vector<std::string> executed() const {
        std::lock_guard lock(mu_);
        return executed_;
    }

private:
    void accept_loop() {
        while (!stopping_) {
            boost::system::error_code ec;
            boost::asio::ip::tcp::socket sock(ioc_);
            acceptor_.accept(sock, ec);
            if (ec) return;
            std::lock_guard lock(workers_mu_);
            workers_.emplace_back([this, s = std::move(sock)]() mutable { serve(std::move(s)); });
        }
    }

    bool authorized(const std::string& header) {
        if (token.empty() || header == "token " + token) return true;
        ++auth_failures;
        return false;
    }

    void serve(boost::asio::ip::tcp::socket sock) {
        namespace beast = boost::beast;
        namespace http = beast::http;
        try {
            beast::flat_buffer buf;
            http::request<http::string_body> req;
            http::read(sock, buf, req);
            if (beast::websocket::is_upgrade(req)) {
                if (!authorized(std::string(req[http::field::authorization]))) return;
                beast::websocket::stream<boost::asio::ip::tcp::socket> ws(std::move(sock));
                ws.accept(req);
                channel(ws);
                return;
            }
            http::response<http::string_body> res;
            res.version(req.version());
            res.keep_alive(false);
            const std::string target(req.target());
            static const std::regex kernel_re(R"(^/api/kernels/([^/]+)(/interrupt)?$)");
            std::smatch m;
            if (!authorized(std::string(req[http::field::authorization]))) {
                res.result(http::status::forbidden);
            } else if (req.method() == http::verb::post && target == "/api/kernels") {
                ++kernels_created;
                res.result(http::status::created);
                res.body() = R"({"id":"k-1","name":"python3"})";
            } else if (std::regex_match(target, m, kernel_re) && m[2].matched && req.method() == http::verb::post) {
                ++interrupts;
                std::lock_guard lock(mu_);
                interrupted_ = true;
                cv_.notify_all();
                res.result(http::status::no_content);
            } else if (std::regex_match(target, m, kernel_re) && req.method() == http::verb::delete_) {
                ++kernels_deleted;
                res.result(http::status::no_content);
            } else {
                res.result(http::status::not_found);
            }
            res.prepare_payload();
            http::write(sock, res);
        } catch (const std::exception&) {
        }
    }

    template <class Ws>
    void channel(Ws& ws) {
        using nlohmann::json;
        while (!stopping_) {
            boost::beast::flat_buffer buf;
            boost::system::error_code ec;
            ws.read(buf, ec);
            if (ec) return;
            const auto req = json::parse(boost::beast::buffers_to_string(buf.data()));
            const auto parent = req["header"];
            const auto code = req["content"]["code"].get<std::string>();
            {
                std::lock_guard lock(mu_);
                executed_.push_back(code);
            }
            auto send = [&](const std::string& type, json content) {
                json msg{{"header", {{"msg_type", type}, {"msg_id", "x"}}},
                         {"parent_header", parent},
                         {"msg_type", type},
                         {"content", std::move(content)},
                         {"channel", "iopub"}};
                ws.write(boost::asio::buffer(msg.dump()));
            };
            // Traffic for other requests must be ignored by the client.
            ws.write(boost::asio::buffer(
                json{{"parent_header", {{"msg_id", "other"}}}, {"header", {{"msg_type", "stream"}}},
                     {"content", {{"name", "stdout"}, {"text", "noise"}}}}
                    .dump()));
            send("status", {{"execution_state", "busy"}});
            static const std::regex print_re(R"(print\((.*)\))");
            std::smatch m;
            if (std::regex_search(code, m, print_re)) {
                send("stream", {{"name", "stdout"}, {"text", m[1].str() + "\n"}});
            } else if (code.find("raise") != std::string::npos) {
                send("error", {{"ename", "ValueError"},
                               {"evalue", "bad"},
                               {"traceback", {"\x1b[31mValueError\x1b[0m: bad"}}});
            } else if (code.find("sleep") != std::string::npos) {
                std::unique_lock lock(mu_);
                interrupted_ = false;
                cv_.wait(lock, [&] { return interrupted_; });
                lock.unlock();
                send("error", {{"ename", "KeyboardInterrupt"}, {"evalue", ""}, {"traceback", json::array()}});
            } else if (code.find("png") != std::string::npos) {
                send("display_data",
                     {{"data",
                       {{"image/png",
                         "iVBORw0KGgoAAAANSUhEUgAAAAEAAAABCAYAAAAfFcSJAAAADUlEQVR42mNkYPhfDwAChwGA60e6kgAAAABJRU5ErkJggg=="},
                        {"text/plain", "<Figure>"}}}});
            } else {
                send("execute_result", {{"data", {{"text/plain", "ok"}}}, {"execution_count", 1}});
            }
            send("status", {{"execution_state", "idle"}});
        }
    }

    boost::asio::io_context ioc_;
    boost::asio::ip::tcp::acceptor acceptor_;
    int port_ = 0;
    std::thread thread_;
    std::mutex workers_mu_;
    std::vector<std::thread> workers_;
    std::atomic<bool> stopping_{false};
    mutable std::mutex mu_;
    std::condition_variable cv_;
    bool interrupted_ = false;
    std::vector<std::string> executed_;
};

}  // namespace cftest
