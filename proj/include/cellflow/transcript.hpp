#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellflow/error.hpp"

namespace cellflow {

enum class EventType { UserInput, LlmCall, Action, Execution, Transition, Forced, RepairOutcome, Final };

std::string_view to_string(EventType t);
std::optional<EventType> event_type_from_string(std::string_view s);

class CorruptTranscript : public Error {
public:
    using Error::Error;
};

struct Event {
    std::int64_t seq = 0;
    std::string wall_clock;  // ISO-8601 UTC with milliseconds
    EventType type = EventType::UserInput;
    nlohmann::json payload = nlohmann::json::object();

    nlohmann::json to_json() const;
    static Event from_json(const nlohmann::json& j);
    /// One JSONL line, without the trailing newline.
    std::string to_line() const;
};

/// Append-only event log. Appends are numbered from 1, optionally mirrored
/// to a JSONL file (flushed per line), and observable by waiting readers.
class Transcript {
public:
    Transcript() = default;
    /// Mirrors every event to `file`, truncating it first.
    explicit Transcript(const std::filesystem::path& file);

    Transcript(const Transcript&) = delete;
    Transcript& operator=(const Transcript&) = delete;

    Event append(EventType type, nlohmann::json payload);
    /// Re-appends recorded events verbatim (seq must continue the sequence).
    void restore(const std::vector<Event>& events);

    /// Events with seq > since.
    std::vector<Event> events(std::int64_t since = 0) const;
    std::int64_t last_seq() const;

    /// Blocks until an event with seq > since exists, the log is closed, or
    /// the timeout elapses. Returns true if new events are available.
    bool wait_for(std::int64_t since, std::chrono::milliseconds timeout) const;

    /// Wakes waiters; further appends are still accepted.
    void close();
    bool closed() const;

    std::optional<std::filesystem::path> file() const { return path_; }

private:
    void write_line(const Event& e);

    mutable std::mutex mu_;
    mutable std::condition_variable cv_;
    std::vector<Event> events_;
    std::optional<std::filesystem::path> path_;
    std::ofstream out_;
    bool closed_ = false;
};

/// Parses JSONL text; throws CorruptTranscript on malformed lines or gaps in seq.
std::vector<Event> parse_jsonl(std::string_view text);
std::vector<Event> read_transcript(const std::filesystem::path& path);

/// Event without wall_clock and without any timing field ("elapsed_seconds",
/// "wall_time_seconds", "retries") at any depth.
nlohmann::json normalize_event(const Event& e);
/// Normalized events, one per line.
std::string normalized_text(const std::vector<Event>& events);

std::string iso8601_now();

}  // namespace cellflow
