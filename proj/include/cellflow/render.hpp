#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>

#include "cellflow/cell.hpp"

namespace cellflow {

/// Head/tail character budget applied to every output stream in prompt text.
struct TruncationPolicy {
    std::size_t head_chars = 2000;
    std::size_t tail_chars = 2000;
};

/// Keeps the first `head` and last `tail` bytes (cut on UTF-8 boundaries)
/// and inserts an elision marker between them. Returns the input unchanged
/// when it fits.
std::string truncate_middle(std::string_view text, const TruncationPolicy& policy, bool* truncated = nullptr);

/// Marker inserted by truncate_middle; `elided` is the number of bytes dropped.
std::string elision_marker(std::size_t elided);

/// Fence of backticks long enough to wrap `body` safely (at least three).
std::string fence_for(std::string_view body);

std::string render_cell(const Cell& cell, const TruncationPolicy& policy = {});
std::string render_output(const CellOutput& out, const TruncationPolicy& policy = {});

/// Deterministic prompt text for a cell sequence. Cells are separated by a
/// blank line; code cells are followed by their outputs as labeled blocks.
std::string render_context(std::span<const Cell> cells, const TruncationPolicy& policy = {});

}  // namespace cellflow
