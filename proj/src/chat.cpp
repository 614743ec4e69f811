#include "cellflow/chat.hpp"

namespace cellflow {

std::string_view to_string(Role r) {
    switch (r) {
        case Role::System: return "system";
        case Role::User: return "user";
        case Role::Assistant: return "assistant";
    }
    return "user";
}

nlohmann::json to_wire(const ChatMessage& m) {
    if (m.images.empty()) return {{"role", to_string(m.role)}, {"content", m.text}};
    nlohmann::json parts = nlohmann::json::array();
    parts.push_back({{"type", "text"}, {"text", m.text}});
    for (const auto& img : m.images) {
        parts.push_back({{"type", "image_url"},
                         {"image_url", {{"url", "data:" + img.media_type + ";base64," + img.base64}}}});
    }
    return {{"role", to_string(m.role)}, {"content", parts}};
}

nlohmann::json to_wire(const std::vector<ChatMessage>& ms) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& m : ms) out.push_back(to_wire(m));
    return out;
}

}  // namespace cellflow
