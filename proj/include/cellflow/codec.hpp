#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace cellflow::codec {

std::string base64_encode(std::string_view bytes);
/// Throws cellflow::Error on malformed input.
std::string base64_decode(std::string_view text);

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);

/// Whole-file read/write helpers; throw cellflow::Error on I/O failure.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

bool is_valid_utf8(std::string_view s);

}  // namespace cellflow::codec
