#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace cellflow {

enum class Role { System, User, Assistant };

std::string_view to_string(Role r);

/// Image attached to a message, already base64 encoded.
struct ImagePart {
    std::string media_type = "image/png";
    std::string base64;

    friend bool operator==(const ImagePart&, const ImagePart&) = default;
};

struct ChatMessage {
    Role role = Role::User;
    std::string text;
    std::vector<ImagePart> images;

    static ChatMessage system(std::string t) { return {Role::System, std::move(t), {}}; }
    static ChatMessage user(std::string t) { return {Role::User, std::move(t), {}}; }
    static ChatMessage assistant(std::string t) { return {Role::Assistant, std::move(t), {}}; }

    friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

/// Wire form used by chat-completions servers: plain string content, or a
/// parts array ({"type":"text"} / {"type":"image_url"}) when images are attached.
nlohmann::json to_wire(const ChatMessage& m);
nlohmann::json to_wire(const std::vector<ChatMessage>& ms);

}  // namespace cellflow
