#include "cellflow/llm.hpp"

#include <algorithm>
#include <thread>

#include <httplib.h>

#include "cellflow/codec.hpp"

namespace cellflow {

using nlohmann::json;

void to_json(json& j, const Usage& u) {
    j = json{{"prompt_tokens", u.prompt_tokens},
             {"completion_tokens", u.completion_tokens},
             {"estimated", u.estimated}};
}

void from_json(const json& j, Usage& u) {
    u.prompt_tokens = j.value("prompt_tokens", 0);
    u.completion_tokens = j.value("completion_tokens", 0);
    u.estimated = j.value("estimated", false);
}

std::int64_t estimate_tokens(std::size_t chars) {
    return static_cast<std::int64_t>((chars + 3) / 4);
}

Usage estimate_usage(const std::vector<ChatMessage>& messages, const std::string& reply) {
    std::size_t prompt_chars = 0;
    for (const auto& m : messages) prompt_chars += m.text.size();
    return Usage{estimate_tokens(prompt_chars), estimate_tokens(reply.size()), true};
}

std::string request_hash(const std::vector<ChatMessage>& messages, const CompletionParams& params) {
    json canon{{"model", params.model}, {"temperature", params.temperature}, {"messages", to_wire(messages)}};
    return codec::sha256_hex(canon.dump());
}

ScriptedProvider::ScriptedProvider(std::deque<std::string> replies) : replies_(std::move(replies)) {}

ScriptedProvider::ScriptedProvider(Policy policy) : policy_(std::move(policy)) {}

Completion ScriptedProvider::complete(const std::vector<ChatMessage>& messages, const CompletionParams&) {
    std::lock_guard lock(mu_);
    std::optional<std::string> reply;
    if (policy_) {
        reply = policy_(messages, calls_);
    } else if (!replies_.empty()) {
        reply = std::move(replies_.front());
        replies_.pop_front();
    }
    if (!reply) throw LlmError(LlmErrorCode::ScriptExhausted, "scripted provider has no reply left");
    ++calls_;
    return Completion{*reply, estimate_usage(messages, *reply), 0};
}

std::size_t ScriptedProvider::calls() const {
    std::lock_guard lock(mu_);
    return calls_;
}

ReplayProvider::ReplayProvider(std::vector<RecordedCall> calls) : calls_(std::move(calls)) {}

Completion ReplayProvider::complete(const std::vector<ChatMessage>& messages, const CompletionParams& params) {
    std::lock_guard lock(mu_);
    if (next_ >= calls_.size()) {
        throw LlmError(LlmErrorCode::ReplayDivergence,
                       "replay diverged at call " + std::to_string(next_) + ": recording has no more calls");
    }
    const auto hash = request_hash(messages, params);
    const auto& rec = calls_[next_];
    if (hash != rec.request_hash) {
        throw LlmError(LlmErrorCode::ReplayDivergence, "replay diverged at call " + std::to_string(next_) +
                                                           ": request hash " + hash + " != recorded " +
                                                           rec.request_hash);
    }
    ++next_;
    return Completion{rec.reply, rec.usage, 0};
}

std::size_t ReplayProvider::served() const {
    std::lock_guard lock(mu_);
    return next_;
}

TokenBucket::TokenBucket(double capacity, double refill_per_second)
    : capacity_(capacity), refill_(refill_per_second), tokens_(capacity), last_(std::chrono::steady_clock::now()) {}

void TokenBucket::acquire() {
    std::unique_lock lock(mu_);
    while (true) {
        const auto now = std::chrono::steady_clock::now();
        const std::chrono::duration<double> dt = now - last_;
        last_ = now;
        tokens_ = std::min(capacity_, tokens_ + dt.count() * refill_);
        if (tokens_ >= 1.0) {
            tokens_ -= 1.0;
            return;
        }
        const auto wait = std::chrono::duration<double>((1.0 - tokens_) / refill_);
        lock.unlock();
        std::this_thread::sleep_for(wait);
        lock.lock();
    }
}

HttpChatProvider::HttpChatProvider(HttpProviderConfig config) : config_(std::move(config)) {
    if (config_.rate_capacity > 0) bucket_.emplace(config_.rate_capacity, config_.rate_per_second);
}

namespace {

bool looks_like_overflow(const std::string& body) {
    return body.find("context_length_exceeded") != std::string::npos ||
           body.find("maximum context length") != std::string::npos;
}

}  // namespace

Completion HttpChatProvider::complete(const std::vector<ChatMessage>& messages, const CompletionParams& params) {
    json body{{"model", params.model}, {"messages", to_wire(messages)}, {"temperature", params.temperature}};
    if (params.max_tokens) body["max_tokens"] = *params.max_tokens;
    const auto payload = body.dump();

    httplib::Headers headers;
    if (!config_.api_key.empty()) headers.emplace(config_.auth_header, config_.auth_prefix + config_.api_key);

    std::string last_error;
    auto backoff = config_.initial_backoff;
    for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(backoff);
            backoff = std::min(config_.max_backoff, backoff * 2);
        }
        if (bucket_) bucket_->acquire();

        httplib::Client client(config_.base_url);
        client.set_connection_timeout(std::chrono::seconds(10));
        client.set_read_timeout(config_.timeout);
        client.set_write_timeout(config_.timeout);
        auto res = client.Post(config_.path, headers, payload, "application/json");
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status == 429 || res->status >= 500) {
            last_error = "HTTP " + std::to_string(res->status);
            continue;
        }
        if (res->status >= 400) {
            if (looks_like_overflow(res->body)) {
                throw LlmError(LlmErrorCode::ContextOverflow, "provider reported context overflow: " + res->body);
            }
            throw LlmError(LlmErrorCode::Unavailable,
                           "HTTP " + std::to_string(res->status) + " from provider: " + res->body);
        }
        json reply;
        try {
            reply = json::parse(res->body);
        } catch (const json::parse_error& e) {
            throw LlmError(LlmErrorCode::BadResponse, std::string("reply is not JSON: ") + e.what());
        }
        const auto* content = reply.contains("choices") && !reply["choices"].empty()
                                  ? &reply["choices"][0]["message"]["content"]
                                  : nullptr;
        if (!content || !content->is_string()) {
            throw LlmError(LlmErrorCode::BadResponse, "reply has no choices[0].message.content");
        }
        Completion out;
        out.text = content->get<std::string>();
        out.retries = attempt;
        if (reply.contains("usage") && reply["usage"].is_object()) {
            out.usage.prompt_tokens = reply["usage"].value("prompt_tokens", 0);
            out.usage.completion_tokens = reply["usage"].value("completion_tokens", 0);
        } else {
            out.usage = estimate_usage(messages, out.text);
        }
        return out;
    }
    throw LlmError(LlmErrorCode::Unavailable,
                   "provider unavailable after " + std::to_string(config_.max_retries) + " retries (" + last_error +
                       ")");
}

}  // namespace cellflow
