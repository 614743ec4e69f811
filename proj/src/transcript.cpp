#include "cellflow/transcript.hpp"

#include <array>
#include <ctime>
#include <sstream>

#include "cellflow/codec.hpp"

namespace cellflow {

using nlohmann::json;

namespace {

constexpr std::array<std::pair<EventType, std::string_view>, 8> kTypeNames = {{
    {EventType::UserInput, "user_input"},
    {EventType::LlmCall, "llm_call"},
    {EventType::Action, "action"},
    {EventType::Execution, "execution"},
    {EventType::Transition, "transition"},
    {EventType::Forced, "forced"},
    {EventType::RepairOutcome, "repair_outcome"},
    {EventType::Final, "final"},
}};

constexpr std::array<std::string_view, 3> kTimingKeys = {"elapsed_seconds", "wall_time_seconds", "retries"};

void strip_timing(json& j) {
    if (j.is_object()) {
        for (auto key : kTimingKeys) j.erase(std::string(key));
        for (auto& [_, v] : j.items()) strip_timing(v);
    } else if (j.is_array()) {
        for (auto& v : j) strip_timing(v);
    }
}

}  // namespace

std::string_view to_string(EventType t) {
    for (const auto& [type, name] : kTypeNames) {
        if (type == t) return name;
    }
    return "?";
}

std::optional<EventType> event_type_from_string(std::string_view s) {
    for (const auto& [type, name] : kTypeNames) {
        if (name == s) return type;
    }
    return std::nullopt;
}

std::string iso8601_now() {
    const auto now = std::chrono::system_clock::now();
    const auto t = std::chrono::system_clock::to_time_t(now);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
    char out[40];
    std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
    return out;
}

json Event::to_json() const {
    return json{{"seq", seq}, {"wall_clock", wall_clock}, {"type", to_string(type)}, {"payload", payload}};
}

Event Event::from_json(const json& j) {
    if (!j.is_object() || !j.contains("seq") || !j.contains("type") || !j["seq"].is_number_integer()) {
        throw CorruptTranscript("event lacks seq/type: " + j.dump());
    }
    Event e;
    e.seq = j["seq"].get<std::int64_t>();
    e.wall_clock = j.value("wall_clock", "");
    const auto type = event_type_from_string(j["type"].get<std::string>());
    if (!type) throw CorruptTranscript("unknown event type '" + j["type"].get<std::string>() + "'");
    e.type = *type;
    e.payload = j.value("payload", json::object());
    return e;
}

std::string Event::to_line() const { return to_json().dump(); }

Transcript::Transcript(const std::filesystem::path& file) : path_(file) {
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    out_.open(file, std::ios::binary | std::ios::trunc);
    if (!out_) throw Error("cannot open transcript file " + file.string());
}

void Transcript::write_line(const Event& e) {
    if (!out_.is_open()) return;
    out_ << e.to_line() << '\n';
    out_.flush();
}

Event Transcript::append(EventType type, json payload) {
    Event e;
    {
        std::lock_guard lock(mu_);
        e.seq = static_cast<std::int64_t>(events_.size()) + 1;
        e.wall_clock = iso8601_now();
        e.type = type;
        e.payload = std::move(payload);
        events_.push_back(e);
        write_line(e);
    }
    cv_.notify_all();
    return e;
}

void Transcript::restore(const std::vector<Event>& events) {
    {
        std::lock_guard lock(mu_);
        for (const auto& e : events) {
            if (e.seq != static_cast<std::int64_t>(events_.size()) + 1) {
                throw CorruptTranscript("restored event seq " + std::to_string(e.seq) + " does not continue the log");
            }
            events_.push_back(e);
            write_line(e);
        }
    }
    cv_.notify_all();
}

std::vector<Event> Transcript::events(std::int64_t since) const {
    std::lock_guard lock(mu_);
    if (since < 0) since = 0;
    if (static_cast<std::size_t>(since) >= events_.size()) return {};
    return {events_.begin() + since, events_.end()};
}

std::int64_t Transcript::last_seq() const {
    std::lock_guard lock(mu_);
    return static_cast<std::int64_t>(events_.size());
}

bool Transcript::wait_for(std::int64_t since, std::chrono::milliseconds timeout) const {
    std::unique_lock lock(mu_);
    cv_.wait_for(lock, timeout, [&] { return closed_ || static_cast<std::int64_t>(events_.size()) > since; });
    return static_cast<std::int64_t>(events_.size()) > since;
}

void Transcript::close() {
    {
        std::lock_guard lock(mu_);
        closed_ = true;
    }
    cv_.notify_all();
}

bool Transcript::closed() const {
    std::lock_guard lock(mu_);
    return closed_;
}

std::vector<Event> parse_jsonl(std::string_view text) {
    std::vector<Event> out;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        const auto line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw CorruptTranscript("line " + std::to_string(line_no) + ": " + e.what());
        }
        auto ev = Event::from_json(j);
        if (ev.seq != static_cast<std::int64_t>(out.size()) + 1) {
            throw CorruptTranscript("line " + std::to_string(line_no) + ": expected seq " +
                                    std::to_string(out.size() + 1) + ", found " + std::to_string(ev.seq));
        }
        out.push_back(std::move(ev));
    }
    return out;
}

std::vector<Event> read_transcript(const std::filesystem::path& path) {
    return parse_jsonl(codec::read_file(path));
}

json normalize_event(const Event& e) {
    json j{{"seq", e.seq}, {"type", to_string(e.type)}, {"payload", e.payload}};
    strip_timing(j["payload"]);
    return j;
}

std::string normalized_text(const std::vector<Event>& events) {
    std::string out;
    for (const auto& e : events) {
        out += normalize_event(e).dump();
        out += '\n';
    }
    return out;
}

}  // namespace cellflow
