#pragma once

#include <array>
#include <filesystem>
#include <set>
#include <string>
#include <string_view>

#include "cellflow/action_parser.hpp"
#include "cellflow/signals.hpp"

namespace cellflow {

enum class PromptKind { Initial, Planning, Execution, Debugging, PostFiltering };

inline constexpr std::array<PromptKind, 5> kAllPrompts = {
    PromptKind::Initial, PromptKind::Planning, PromptKind::Execution, PromptKind::Debugging,
    PromptKind::PostFiltering};

std::string_view to_string(PromptKind k);
/// Template file name, e.g. "planning.txt".
std::string_view template_file(PromptKind k);

/// Prompt used for a turn in `stage`; the opening turn of an instruction
/// uses the initial prompt.
PromptKind prompt_for(AgentState stage, bool opening_turn);

inline constexpr std::string_view kInstructionPlaceholder = "{{the description of user instruction}}";
inline constexpr std::string_view kStepPlaceholder = "{{the description of current step}}";

class PromptCatalog {
public:
    /// Templates compiled into the binary.
    static PromptCatalog builtin();
    /// Reads every template from `dir`; throws cellflow::Error if one is missing.
    static PromptCatalog load(const std::filesystem::path& dir);
    /// Writes the built-in templates to `dir` for editing.
    static void write_defaults(const std::filesystem::path& dir);

    const std::string& text(PromptKind k) const { return templates_[static_cast<std::size_t>(k)]; }
    void set_text(PromptKind k, std::string text) { templates_[static_cast<std::size_t>(k)] = std::move(text); }

    std::string render(PromptKind k, std::string_view instruction, std::string_view step_goal) const;

    /// Signals listed on the template's "Available Action Space:" line.
    std::set<Signal> offered_signals(PromptKind k, const SignalAliasTable& aliases) const;

private:
    std::array<std::string, 5> templates_;
};

}  // namespace cellflow
