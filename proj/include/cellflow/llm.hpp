#pragma once

#include <chrono>
#include <cstdint>
#include <deque>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellflow/chat.hpp"
#include "cellflow/error.hpp"

namespace cellflow {

enum class LlmErrorCode { Unavailable, ContextOverflow, ScriptExhausted, ReplayDivergence, BadResponse };

class LlmError : public CodedError<LlmErrorCode> {
public:
    using CodedError::CodedError;
};

struct Usage {
    std::int64_t prompt_tokens = 0;
    std::int64_t completion_tokens = 0;
    /// True when counts come from the chars/4 heuristic rather than a server.
    bool estimated = false;

    friend bool operator==(const Usage&, const Usage&) = default;
};

void to_json(nlohmann::json& j, const Usage& u);
void from_json(const nlohmann::json& j, Usage& u);

/// ceil(chars / 4).
std::int64_t estimate_tokens(std::size_t chars);
Usage estimate_usage(const std::vector<ChatMessage>& messages, const std::string& reply);

struct CompletionParams {
    std::string model;
    double temperature = 0.0;
    std::optional<std::int64_t> max_tokens;
};

struct Completion {
    std::string text;
    Usage usage;
    int retries = 0;
};

/// Hash identifying a request: SHA-256 over model, temperature and the full
/// wire-form message sequence.
std::string request_hash(const std::vector<ChatMessage>& messages, const CompletionParams& params);

class LlmProvider {
public:
    virtual ~LlmProvider() = default;
    virtual Completion complete(const std::vector<ChatMessage>& messages, const CompletionParams& params) = 0;
};

/// Answers from a fixed queue or a policy callback. Usage is estimated.
class ScriptedProvider : public LlmProvider {
public:
    /// Returns the reply for call `index`, or nullopt when the script is spent.
    using Policy = std::function<std::optional<std::string>(const std::vector<ChatMessage>&, std::size_t index)>;

    explicit ScriptedProvider(std::deque<std::string> replies);
    explicit ScriptedProvider(Policy policy);

    Completion complete(const std::vector<ChatMessage>& messages, const CompletionParams& params) override;
    std::size_t calls() const;

private:
    mutable std::mutex mu_;
    std::deque<std::string> replies_;
    Policy policy_;
    std::size_t calls_ = 0;
};

/// One recorded completion, as stored in llm_call transcript events.
struct RecordedCall {
    std::string request_hash;
    std::string reply;
    Usage usage;
};

/// Serves recorded replies in order, refusing any request whose hash differs
/// from the recording.
class ReplayProvider : public LlmProvider {
public:
    explicit ReplayProvider(std::vector<RecordedCall> calls);

    Completion complete(const std::vector<ChatMessage>& messages, const CompletionParams& params) override;
    std::size_t served() const;

private:
    mutable std::mutex mu_;
    std::vector<RecordedCall> calls_;
    std::size_t next_ = 0;
};

/// Blocking token bucket; one token per request.
class TokenBucket {
public:
    TokenBucket(double capacity, double refill_per_second);
    void acquire();

private:
    std::mutex mu_;
    double capacity_;
    double refill_;
    double tokens_;
    std::chrono::steady_clock::time_point last_;
};

struct HttpProviderConfig {
    std::string base_url;  // scheme://host[:port]
    std::string path = "/v1/chat/completions";
    std::string auth_header = "Authorization";
    std::string auth_prefix = "Bearer ";
    std::string api_key;  // read from the environment by the caller, never from config files
    int max_retries = 3;
    std::chrono::milliseconds initial_backoff{500};
    std::chrono::milliseconds max_backoff{8000};
    std::chrono::seconds timeout{300};
    double rate_capacity = 0;  // 0 disables rate limiting
    double rate_per_second = 1;
};

/// Chat-completions client. Request body: {model, messages, temperature,
/// max_tokens?}; reply text from choices[0].message.content, token counts
/// from usage.{prompt_tokens, completion_tokens}.
class HttpChatProvider : public LlmProvider {
public:
    explicit HttpChatProvider(HttpProviderConfig config);
    Completion complete(const std::vector<ChatMessage>& messages, const CompletionParams& params) override;

private:
    HttpProviderConfig config_;
    std::optional<TokenBucket> bucket_;
};

}  // namespace cellflow
