#include "cellflow/config.hpp"

#include <cstdlib>
#include <fstream>

namespace cellflow {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string env_or_empty(const std::string& name) {
    if (name.empty()) return {};
    const char* v = std::getenv(name.c_str());
    return v ? std::string(v) : std::string{};
}

fs::path resolve(const fs::path& base, const fs::path& p) {
    if (p.empty() || p.is_absolute() || base.empty()) return p;
    return base / p;
}

void reject_secret(const json& obj, const char* where) {
    for (const char* key : {"api_key", "token"}) {
        if (obj.contains(key)) {
            throw ConfigError(std::string(where) + "." + key +
                              " is not allowed in config files; name an environment variable instead");
        }
    }
}

}  // namespace

PromptCatalog AppConfig::prompts() const {
    return prompts_dir ? PromptCatalog::load(*prompts_dir) : PromptCatalog::builtin();
}

AppConfig parse_app_config(const json& tree, const fs::path& base) {
    if (!tree.is_object()) throw ConfigError("config root must be an object");
    AppConfig c;
    try {
        if (tree.contains("session")) c.session = tree["session"].get<SessionConfig>();
        c.session.workdir = resolve(base, c.session.workdir);

        if (tree.contains("provider")) {
            const auto& p = tree["provider"];
            reject_secret(p, "provider");
            c.provider.kind = p.value("kind", c.provider.kind);
            c.provider.http.base_url = p.value("base_url", c.provider.http.base_url);
            c.provider.http.path = p.value("path", c.provider.http.path);
            c.provider.http.auth_header = p.value("auth_header", c.provider.http.auth_header);
            c.provider.http.auth_prefix = p.value("auth_prefix", c.provider.http.auth_prefix);
            c.provider.http.max_retries = p.value("max_retries", c.provider.http.max_retries);
            c.provider.http.initial_backoff =
                std::chrono::milliseconds(p.value("initial_backoff_ms", c.provider.http.initial_backoff.count()));
            c.provider.http.max_backoff =
                std::chrono::milliseconds(p.value("max_backoff_ms", c.provider.http.max_backoff.count()));
            c.provider.http.timeout = std::chrono::seconds(p.value("timeout_seconds", c.provider.http.timeout.count()));
            c.provider.http.rate_capacity = p.value("rate_capacity", c.provider.http.rate_capacity);
            c.provider.http.rate_per_second = p.value("rate_per_second", c.provider.http.rate_per_second);
            c.provider.api_key_env = p.value("api_key_env", c.provider.api_key_env);
            if (p.contains("script")) c.provider.script = resolve(base, p["script"].get<std::string>());
        }
        if (c.provider.kind != "http" && c.provider.kind != "scripted") {
            throw ConfigError("provider.kind must be \"http\" or \"scripted\"");
        }
        c.provider.http.api_key = env_or_empty(c.provider.api_key_env);

        if (tree.contains("executor")) {
            const auto& e = tree["executor"];
            reject_secret(e, "executor");
            c.executor.backend = e.value("backend", c.executor.backend);
            c.executor.local.python = e.value("python", c.executor.local.python);
            c.executor.local.allow_shell = e.value("allow_shell", c.executor.local.allow_shell);
            if (e.contains("env")) c.executor.local.env = e["env"].get<std::map<std::string, std::string>>();
            c.executor.gateway.url = e.value("gateway_url", c.executor.gateway.url);
            c.executor.gateway.kernel_name = e.value("kernel_name", c.executor.gateway.kernel_name);
            c.gateway_token_env = e.value("gateway_token_env", c.gateway_token_env);
        }
        if (c.executor.backend != "local" && c.executor.backend != "gateway") {
            throw ConfigError("executor.backend must be \"local\" or \"gateway\"");
        }
        c.executor.gateway.token = env_or_empty(c.gateway_token_env);

        if (tree.contains("prices")) c.prices = PriceTable::from_json(tree["prices"]);
        if (tree.contains("prompts_dir")) c.prompts_dir = resolve(base, tree["prompts_dir"].get<std::string>());

        if (tree.contains("service")) {
            const auto& s = tree["service"];
            reject_secret(s, "service");
            c.service.host = s.value("host", c.service.host);
            c.service.port = s.value("port", c.service.port);
            c.service.token_env = s.value("token_env", c.service.token_env);
            if (s.contains("root")) c.service.root = resolve(base, s["root"].get<std::string>());
        }
        if (tree.contains("bench")) c.bench_workers = tree["bench"].value("workers", c.bench_workers);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad config value: ") + e.what());
    }
    c.session.validate();
    if (c.bench_workers < 1) throw ConfigError("bench.workers must be >= 1");
    return c;
}

AppConfig load_app_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json tree;
    try {
        tree = json::parse(in, nullptr, true, true);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return parse_app_config(tree, path.parent_path());
}

json app_config_to_json(const AppConfig& c) {
    json j{{"session", c.session},
           {"provider", {{"kind", c.provider.kind},
                         {"base_url", c.provider.http.base_url},
                         {"path", c.provider.http.path},
                         {"api_key_env", c.provider.api_key_env},
                         {"max_retries", c.provider.http.max_retries},
                         {"script", c.provider.script.generic_string()}}},
           {"executor", {{"backend", c.executor.backend},
                         {"python", c.executor.local.python},
                         {"allow_shell", c.executor.local.allow_shell},
                         {"gateway_url", c.executor.gateway.url},
                         {"kernel_name", c.executor.gateway.kernel_name},
                         {"gateway_token_env", c.gateway_token_env}}},
           {"prices", c.prices.to_json()},
           {"service", {{"host", c.service.host},
                        {"port", c.service.port},
                        {"token_env", c.service.token_env},
                        {"root", c.service.root.generic_string()}}},
           {"bench", {{"workers", c.bench_workers}}}};
    if (c.prompts_dir) j["prompts_dir"] = c.prompts_dir->generic_string();
    return j;
}

std::unique_ptr<LlmProvider> load_scripted_provider(const fs::path& script) {
    std::ifstream in(script);
    if (!in) throw ConfigError("cannot open script " + script.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(script.string() + ": " + e.what());
    }
    bool repeat_last = false;
    json replies = j;
    if (j.is_object()) {
        replies = j.value("replies", json::array());
        repeat_last = j.value("repeat_last", false);
    }
    if (!replies.is_array()) throw ConfigError(script.string() + ": replies must be an array of strings");
    auto list = replies.get<std::vector<std::string>>();
    if (!repeat_last) return std::make_unique<ScriptedProvider>(std::deque<std::string>(list.begin(), list.end()));
    return std::make_unique<ScriptedProvider>(
        [list](const std::vector<ChatMessage>&, std::size_t i) -> std::optional<std::string> {
            if (list.empty()) return std::nullopt;
            return list[std::min(i, list.size() - 1)];
        });
}

std::unique_ptr<LlmProvider> make_provider(const ProviderSettings& settings) {
    if (settings.kind == "scripted") return load_scripted_provider(settings.script);
    if (settings.http.base_url.empty()) throw ConfigError("provider.base_url is required for the http provider");
    return std::make_unique<HttpChatProvider>(settings.http);
}

}  // namespace cellflow
