#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace cellflow {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitAborted = 3;
inline constexpr int kExitDivergence = 4;

/// Entry point of the `cellflow` command.
int cli_main(int argc, char** argv);
int cli_main(const std::vector<std::string>& args);

struct ReplayReport {
    bool identical = false;
    std::size_t recorded_events = 0;
    std::size_t replayed_events = 0;
    /// 1-based line of the first normalized difference, 0 when identical.
    std::size_t first_difference = 0;
    std::string detail;
};

struct ReplayOptions {
    /// Where the recorded session's input files are copied from; defaults to the recorded workdir.
    std::filesystem::path source_workdir;
    /// Prompt templates to replay with; builtin when empty.
    std::filesystem::path prompts_dir;
    bool keep_scratch = false;
};

/// Re-runs a recorded session against its recorded LLM replies in a scratch
/// workdir and compares normalized transcripts.
ReplayReport replay_transcript(const std::filesystem::path& transcript, const ReplayOptions& options);

}  // namespace cellflow
