#include "cellflow/toolkit.hpp"

#include <algorithm>
#include <thread>

#include <httplib.h>

#include "cellflow/codec.hpp"
#include "cellflow/resources.hpp"

namespace cellflow {

using nlohmann::json;

void to_json(json& j, const ToolDescriptor& t) {
    j = json{{"name", t.name}, {"description", t.description}, {"setup_code", t.setup_code}, {"contract", t.contract}};
}

void from_json(const json& j, ToolDescriptor& t) {
    t.name = j.at("name").get<std::string>();
    t.description = j.value("description", "");
    t.setup_code = j.value("setup_code", "");
    t.contract = j.value("contract", "");
    if (t.name.empty()) throw Error("tool descriptor needs a name");
}

std::vector<ToolDescriptor> load_tool_registry(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(codec::read_file(path));
    } catch (const json::exception& e) {
        throw Error("tool registry " + path.string() + ": " + e.what());
    }
    if (!j.is_array()) throw Error("tool registry " + path.string() + " must be a JSON array");
    return j.get<std::vector<ToolDescriptor>>();
}

namespace {

std::string count_word(int n) {
    static constexpr const char* kWords[] = {"zero", "one", "two", "three", "four", "five",
                                             "six",  "seven", "eight", "nine", "ten"};
    return n >= 0 && n <= 10 ? kWords[n] : std::to_string(n);
}

}  // namespace

ToolDescriptor visual_tool_descriptor(int limit) {
    ToolDescriptor t;
    t.name = kVisualToolName;
    t.description =
        "## Tool: evaluate_image\n"
        "`evaluate_image(image_path, requirements, query)` sends an image file to a vision model and returns its "
        "textual assessment of the image against the expected requirements.\n"
        "- `image_path`: path of a saved image file\n"
        "- `requirements`: what the image is expected to show\n"
        "- `query`: the question to answer about the image";
    t.setup_code = std::string(resources::find("python/visual_tool.py").value_or(""));
    while (!t.setup_code.empty() && t.setup_code.back() == '\n') t.setup_code.pop_back();
    t.contract = "`evaluate_image` may be called at most " + count_word(limit) +
                 " times per task. Further calls return \"" + std::string(kVisualLimitMessage) + "\"";
    return t;
}

EnvInfo scan_environment(const std::filesystem::path& workdir, const std::string& language_tag) {
    EnvInfo info;
    info.language_tag = language_tag;
    std::error_code ec;
    if (!std::filesystem::is_directory(workdir, ec)) return info;
    for (auto it = std::filesystem::recursive_directory_iterator(workdir, ec);
         !ec && it != std::filesystem::recursive_directory_iterator(); it.increment(ec)) {
        const auto rel = std::filesystem::relative(it->path(), workdir, ec).generic_string();
        if (it->is_directory() && (rel == "outputs" || rel.starts_with("."))) {
            it.disable_recursion_pending();
            continue;
        }
        if (it->is_regular_file() && !rel.starts_with(".")) info.files.push_back(rel);
    }
    std::sort(info.files.begin(), info.files.end());
    return info;
}

std::string render_env_info(const EnvInfo& info) {
    std::string s = "# Environment\n";
    s += "- Kernel language: " + info.language_tag + "\n";
    s += "- Working directory: the kernel's current directory; save generated files under `outputs/`\n";
    if (info.files.empty()) {
        s += "- Files: none";
    } else {
        s += "- Files:";
        for (const auto& f : info.files) s += "\n  - `" + f + "`";
    }
    for (const auto& n : info.notes) s += "\n- " + n;
    return s;
}

Preamble inject_tools(const std::vector<ToolDescriptor>& tools, const EnvInfo& env, Kernel* kernel,
                      CellIdSource& ids, std::chrono::milliseconds setup_timeout) {
    Preamble p;
    auto info = Cell::markdown(render_env_info(env), Origin::Init);
    info.id = ids.next();
    info.language_tag = env.language_tag;
    p.cells.push_back(std::move(info));

    for (const auto& tool : tools) {
        std::string text = tool.description;
        if (!tool.contract.empty()) text += (text.empty() ? "" : "\n\n") + tool.contract;
        auto desc = Cell::markdown(text, Origin::Init);
        desc.id = ids.next();
        desc.language_tag = env.language_tag;

        std::optional<Cell> setup;
        std::optional<ErrorDetail> failure;
        if (!tool.setup_code.empty()) {
            setup = Cell::code(tool.setup_code, env.language_tag, Origin::Init);
            setup->id = ids.next();
            if (kernel) {
                auto r = execute_cells(*kernel, {*setup}, setup_timeout);
                setup = r.cells.front();
                if (r.feedback.error) failure = r.feedback.detail;
            }
        }
        if (failure) {
            auto warn = Cell::markdown("Warning: tool `" + tool.name + "` is unavailable; its setup failed with " +
                                           failure->name + ": " + failure->value,
                                       Origin::Init);
            warn.id = ids.next();
            warn.language_tag = env.language_tag;
            p.cells.push_back(std::move(warn));
            p.disabled.push_back(tool.name);
            continue;
        }
        p.cells.push_back(std::move(desc));
        if (setup) p.cells.push_back(std::move(*setup));
        p.enabled.push_back(tool.name);
    }
    return p;
}

std::string_view to_string(VisualToolErrorCode c) {
    switch (c) {
        case VisualToolErrorCode::InvalidImagePath: return "InvalidImagePath";
        case VisualToolErrorCode::EmptyArgument: return "EmptyArgument";
        case VisualToolErrorCode::ModelCallFailed: return "ModelCallFailed";
    }
    return "?";
}

std::string visual_tool_prompt(const std::string& requirements, const std::string& query) {
    std::string prompt = "Expected Requirements:\n" + requirements;
    prompt += "\nQuery:\n" + query;
    prompt += "\nYour response:\n";
    return prompt;
}

std::string image_media_type(const std::filesystem::path& path) {
    auto ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
    if (ext == ".gif") return "image/gif";
    if (ext == ".webp") return "image/webp";
    return "image/png";
}

std::string evaluate_image(const std::filesystem::path& image_path, const std::string& requirements,
                           const std::string& query, VisualToolState& state, LlmProvider& llm,
                           const CompletionParams& params,
                           const std::function<void(const std::vector<ChatMessage>&, const Completion&)>& on_call) {
    if (state.evaluation_cnt >= state.global_cnt) return std::string(kVisualLimitMessage);

    std::error_code ec;
    if (image_path.empty() || !std::filesystem::is_regular_file(image_path, ec)) {
        throw VisualToolError(VisualToolErrorCode::InvalidImagePath,
                              "image path is invalid or does not exist: " + image_path.string());
    }
    if (requirements.empty() || query.empty()) {
        throw VisualToolError(VisualToolErrorCode::EmptyArgument, "requirements and query must be non-empty");
    }

    ChatMessage msg = ChatMessage::user(visual_tool_prompt(requirements, query));
    msg.images.push_back(ImagePart{image_media_type(image_path), codec::base64_encode(codec::read_file(image_path))});
    const std::vector<ChatMessage> messages{msg};

    Completion reply;
    try {
        reply = llm.complete(messages, params);
    } catch (const std::exception& e) {
        throw VisualToolError(VisualToolErrorCode::ModelCallFailed, std::string("vision model call failed: ") + e.what());
    }
    if (on_call) on_call(messages, reply);
    ++state.evaluation_cnt;
    return reply.text;
}

struct ToolBridge::Impl {
    httplib::Server server;
    std::thread thread;
    int port = -1;
};

ToolBridge::ToolBridge(Handler evaluate) : impl_(std::make_unique<Impl>()) {
    impl_->server.Post("/evaluate_image", [evaluate](const httplib::Request& req, httplib::Response& res) {
        auto fail = [&](int status, std::string_view kind, const std::string& message) {
            res.status = status;
            res.set_content(json{{"error", kind}, {"message", message}}.dump(), "application/json");
        };
        json body;
        try {
            body = json::parse(req.body);
        } catch (const json::parse_error& e) {
            return fail(400, "BadRequest", e.what());
        }
        try {
            auto text = evaluate(body.value("image_path", ""), body.value("requirements", ""), body.value("query", ""));
            res.set_content(json{{"text", text}}.dump(), "application/json");
        } catch (const VisualToolError& e) {
            fail(e.code() == VisualToolErrorCode::ModelCallFailed ? 502 : 400, to_string(e.code()), e.what());
        } catch (const std::exception& e) {
            fail(500, "ModelCallFailed", e.what());
        }
    });
    impl_->port = impl_->server.bind_to_any_port("127.0.0.1");
    if (impl_->port < 0) throw Error("tool bridge could not bind a loopback port");
    impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
}

ToolBridge::~ToolBridge() { stop(); }

std::string ToolBridge::url() const { return "http://127.0.0.1:" + std::to_string(impl_->port); }

void ToolBridge::stop() {
    if (!impl_->thread.joinable()) return;
    impl_->server.stop();
    impl_->thread.join();
}

}  // namespace cellflow
