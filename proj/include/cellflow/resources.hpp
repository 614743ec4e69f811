#pragma once

#include <optional>
#include <string_view>

namespace cellflow::resources {

/// Files compiled into the library: "prompts/<name>.txt",
/// "python/sandbox_worker.py", "python/visual_tool.py".
std::optional<std::string_view> find(std::string_view key);

}  // namespace cellflow::resources
