#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellflow/cell.hpp"
#include "cellflow/error.hpp"
#include "cellflow/executor.hpp"
#include "cellflow/llm.hpp"

namespace cellflow {

struct ToolDescriptor {
    std::string name;
    std::string description;  // markdown
    std::string setup_code;   // empty when the tool needs no import cell
    std::string contract;     // usage rules shown to the model
};

void to_json(nlohmann::json& j, const ToolDescriptor& t);
void from_json(const nlohmann::json& j, ToolDescriptor& t);

/// Registry file: JSON array of {name, description, setup_code?, contract?}.
std::vector<ToolDescriptor> load_tool_registry(const std::filesystem::path& path);

inline constexpr const char* kVisualToolName = "evaluate_image";

/// Built-in descriptor for the image evaluation tool; `limit` is quoted in its contract.
ToolDescriptor visual_tool_descriptor(int limit = 4);

struct EnvInfo {
    std::string language_tag = "python";
    /// Files available to the task, relative to the workdir.
    std::vector<std::string> files;
    std::vector<std::string> notes;
};

/// Lists regular files under `workdir` (relative paths, sorted), skipping
/// the outputs/ directory.
EnvInfo scan_environment(const std::filesystem::path& workdir, const std::string& language_tag);

std::string render_env_info(const EnvInfo& info);

struct Preamble {
    std::vector<Cell> cells;
    std::vector<std::string> enabled;
    std::vector<std::string> disabled;
};

/// Builds and runs the preamble: env-info markdown, then per tool its
/// description and setup cell. A setup cell that errors disables its tool
/// and is followed by a warning cell.
Preamble inject_tools(const std::vector<ToolDescriptor>& tools, const EnvInfo& env, Kernel* kernel,
                      CellIdSource& ids, std::chrono::milliseconds setup_timeout = std::chrono::seconds(120));

enum class VisualToolErrorCode { InvalidImagePath, EmptyArgument, ModelCallFailed };

class VisualToolError : public CodedError<VisualToolErrorCode> {
public:
    using CodedError::CodedError;
};

std::string_view to_string(VisualToolErrorCode c);

inline constexpr std::string_view kVisualLimitMessage = "Usage limit reached. Please manually evaluate.";

struct VisualToolState {
    int evaluation_cnt = 0;
    int global_cnt = 4;
};

/// "Expected Requirements:\n" + requirements + "\nQuery:\n" + query + "\nYour response:\n".
std::string visual_tool_prompt(const std::string& requirements, const std::string& query);

/// Media type guessed from the file extension (png, jpg/jpeg, gif, webp).
std::string image_media_type(const std::filesystem::path& path);

/// Asks the judge model about an image. Returns the limit message once the
/// budget is spent; only successful model calls consume budget.
/// `on_call` observes every completed model call (for accounting).
std::string evaluate_image(const std::filesystem::path& image_path, const std::string& requirements,
                           const std::string& query, VisualToolState& state, LlmProvider& llm,
                           const CompletionParams& params,
                           const std::function<void(const std::vector<ChatMessage>&, const Completion&)>& on_call = {});

/// Loopback HTTP endpoint through which code running in the kernel reaches
/// engine-side tools. POST /evaluate_image {image_path, requirements, query}
/// answers {text} or an error status with {error, message}.
class ToolBridge {
public:
    using Handler = std::function<std::string(const std::filesystem::path&, const std::string&, const std::string&)>;

    explicit ToolBridge(Handler evaluate);
    ~ToolBridge();
    ToolBridge(const ToolBridge&) = delete;
    ToolBridge& operator=(const ToolBridge&) = delete;

    /// e.g. "http://127.0.0.1:40123".
    std::string url() const;
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace cellflow
