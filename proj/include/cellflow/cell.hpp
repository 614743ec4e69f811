#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellflow/signals.hpp"

namespace cellflow {

enum class CellKind { Markdown, Code };

/// Which part of the loop produced a cell.
enum class Origin { Init, Plan, Exec, Debug, Filter, User };

enum class OutputChannel { Stdout, Stderr, Rich, Error };

std::string_view to_string(CellKind k);
std::string_view to_string(Origin o);
std::string_view to_string(OutputChannel c);
std::optional<CellKind> cell_kind_from_string(std::string_view s);
std::optional<Origin> origin_from_string(std::string_view s);
std::optional<OutputChannel> channel_from_string(std::string_view s);

/// Origin used for cells generated while the machine sits in `s`.
Origin origin_for(AgentState s);

struct CellOutput {
    OutputChannel channel = OutputChannel::Stdout;
    std::string text;
    std::optional<std::string> mime;          // Rich only
    std::optional<std::string> payload_path;  // Rich only, relative to the session workdir
    std::optional<std::string> error_name;    // Error only
    std::optional<std::string> error_value;   // Error only
    std::vector<std::string> traceback;       // Error only
    bool truncated = false;

    static CellOutput stdout_text(std::string text);
    static CellOutput stderr_text(std::string text);
    static CellOutput rich(std::string mime, std::string text, std::optional<std::string> payload_path = {});
    static CellOutput error(std::string name, std::string value, std::vector<std::string> traceback = {});

    friend bool operator==(const CellOutput&, const CellOutput&) = default;
};

struct Cell {
    std::string id;
    CellKind kind = CellKind::Markdown;
    std::string language_tag = "python";
    std::string source;
    std::vector<CellOutput> outputs;
    Origin origin = Origin::Plan;

    static Cell markdown(std::string source, Origin origin = Origin::Plan);
    static Cell code(std::string source, std::string language_tag = "python", Origin origin = Origin::Plan);

    bool is_code() const noexcept { return kind == CellKind::Code; }

    friend bool operator==(const Cell&, const Cell&) = default;
};

/// A parsed LLM turn: one signal plus its cells.
struct Action {
    ActionSignal signal;
    std::vector<Cell> cells;
    AgentState stage = AgentState::Plan;

    bool has_code() const;
};

void to_json(nlohmann::json& j, const CellOutput& o);
void from_json(const nlohmann::json& j, CellOutput& o);
void to_json(nlohmann::json& j, const Cell& c);
void from_json(const nlohmann::json& j, Cell& c);
void to_json(nlohmann::json& j, const Action& a);
void from_json(const nlohmann::json& j, Action& a);

/// Mints session-unique cell ids ("c1", "c2", ...).
class CellIdSource {
public:
    std::string next() { return "c" + std::to_string(++counter_); }
    std::uint64_t issued() const noexcept { return counter_; }
    void advance_to(std::uint64_t n) { if (n > counter_) counter_ = n; }

private:
    std::uint64_t counter_ = 0;
};

}  // namespace cellflow
