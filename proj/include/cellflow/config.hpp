#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "cellflow/cost.hpp"
#include "cellflow/error.hpp"
#include "cellflow/executor.hpp"
#include "cellflow/llm.hpp"
#include "cellflow/orchestrator.hpp"
#include "cellflow/prompts.hpp"

namespace cellflow {

class ConfigError : public Error {
public:
    using Error::Error;
};

struct ProviderSettings {
    std::string kind = "http";  // "http" | "scripted"
    HttpProviderConfig http;
    /// Environment variable holding the API key. Keys never live in config files.
    std::string api_key_env = "CELLFLOW_API_KEY";
    /// Scripted replies: a JSON array of strings, or {"replies": [...], "repeat_last": bool}.
    std::filesystem::path script;
};

struct ServiceSettings {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string token_env = "CELLFLOW_SERVICE_TOKEN";
    std::filesystem::path root = "sessions";
};

struct AppConfig {
    SessionConfig session;
    ProviderSettings provider;
    ExecutorConfig executor;
    std::string gateway_token_env = "CELLFLOW_GATEWAY_TOKEN";
    PriceTable prices;
    std::optional<std::filesystem::path> prompts_dir;
    ServiceSettings service;
    int bench_workers = 1;

    PromptCatalog prompts() const;
};

/// Parses the config tree; relative paths resolve against `base`. Secrets are
/// read from the environment variables the tree names.
AppConfig parse_app_config(const nlohmann::json& tree, const std::filesystem::path& base = {});
AppConfig load_app_config(const std::filesystem::path& path);
nlohmann::json app_config_to_json(const AppConfig& c);

std::unique_ptr<LlmProvider> make_provider(const ProviderSettings& settings);
std::unique_ptr<LlmProvider> load_scripted_provider(const std::filesystem::path& script);

}  // namespace cellflow
