#pragma once

#include <string>
#include <vector>

#include "cellflow/cell.hpp"

namespace cellflow::detail {

/// Appends stream text, merging with the previous output of the same channel.
void append_stream(std::vector<CellOutput>& outs, OutputChannel channel, const std::string& text);

/// Bounds stored output size; prompt rendering truncates much further.
void cap_outputs(std::vector<CellOutput>& outs);

bool has_error(const std::vector<CellOutput>& outs);

}  // namespace cellflow::detail
