#include "cellflow/render.hpp"

#include <algorithm>

namespace cellflow {

namespace {

bool is_continuation(char c) {
    return (static_cast<unsigned char>(c) & 0xC0) == 0x80;
}

std::string block(std::string_view info, std::string_view body) {
    const auto fence = fence_for(body);
    std::string out;
    out.reserve(body.size() + 2 * fence.size() + info.size() + 2);
    out.append(fence).append(info).push_back('\n');
    out.append(body).push_back('\n');
    out.append(fence);
    return out;
}

}  // namespace

std::string elision_marker(std::size_t elided) {
    return "\n[... " + std::to_string(elided) + " chars elided ...]\n";
}

std::string truncate_middle(std::string_view text, const TruncationPolicy& policy, bool* truncated) {
    if (truncated) *truncated = false;
    if (text.size() <= policy.head_chars + policy.tail_chars) return std::string(text);

    std::size_t head_end = policy.head_chars;
    while (head_end > 0 && is_continuation(text[head_end])) --head_end;
    std::size_t tail_begin = text.size() - policy.tail_chars;
    while (tail_begin < text.size() && is_continuation(text[tail_begin])) ++tail_begin;

    if (truncated) *truncated = true;
    std::string out(text.substr(0, head_end));
    out += elision_marker(tail_begin - head_end);
    out.append(text.substr(tail_begin));
    return out;
}

std::string fence_for(std::string_view body) {
    std::size_t longest = 0;
    std::size_t pos = 0;
    while (pos <= body.size()) {
        auto nl = body.find('\n', pos);
        auto line = body.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        while (!line.empty() && (line.front() == ' ' || line.front() == '\t')) line.remove_prefix(1);
        std::size_t n = 0;
        while (n < line.size() && line[n] == '`') ++n;
        longest = std::max(longest, n);
        if (nl == std::string_view::npos) break;
        pos = nl + 1;
    }
    return std::string(std::max<std::size_t>(3, longest + 1), '`');
}

std::string render_output(const CellOutput& out, const TruncationPolicy& policy) {
    switch (out.channel) {
        case OutputChannel::Stdout: return block("stdout", truncate_middle(out.text, policy));
        case OutputChannel::Stderr: return block("stderr", truncate_middle(out.text, policy));
        case OutputChannel::Rich: {
            std::string body;
            if (out.payload_path) {
                body = "[" + out.mime.value_or("application/octet-stream") + " saved to " + *out.payload_path + "]";
            } else {
                body = truncate_middle(out.text, policy);
            }
            return block("result", body);
        }
        case OutputChannel::Error: {
            std::string body = out.error_name.value_or("Error") + ": " + out.error_value.value_or("");
            for (const auto& line : out.traceback) body += "\n" + line;
            return block("error", truncate_middle(body, policy));
        }
    }
    return {};
}

std::string render_cell(const Cell& cell, const TruncationPolicy& policy) {
    if (cell.kind == CellKind::Markdown) return block("markdown", cell.source);
    std::string out = block(cell.language_tag, cell.source);
    for (const auto& o : cell.outputs) {
        out += "\n";
        out += render_output(o, policy);
    }
    return out;
}

std::string render_context(std::span<const Cell> cells, const TruncationPolicy& policy) {
    std::string out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += "\n\n";
        out += render_cell(cells[i], policy);
    }
    return out;
}

}  // namespace cellflow
