#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellflow/cell.hpp"
#include "cellflow/chat.hpp"
#include "cellflow/error.hpp"
#include "cellflow/fst.hpp"
#include "cellflow/render.hpp"

namespace cellflow {

enum class TrajectoryErrorCode { NothingToReplace, UnknownTurn, InvalidGoal, InvalidOutcome, MalformedOp };

class TrajectoryError : public CodedError<TrajectoryErrorCode> {
public:
    using CodedError::CodedError;
};

using NodeId = std::int64_t;

enum class NodeKind { Root, StepGoal, ExecTurn, RepairReport };
enum class NodeStatus { Active, Replaced, Completed, Failed };

std::string_view to_string(NodeKind k);
std::string_view to_string(NodeStatus s);

/// Result of a repair episode, spliced over the faulty turn.
struct RepairOutcome {
    enum class Kind { Success, Failure };

    Kind kind = Kind::Failure;
    /// Success: cleaned cells (at least one code cell). Failure: one markdown report.
    std::vector<Cell> cells;
    std::int64_t episode_turns = 0;
    std::optional<ErrorDetail> resolved_error;
    /// Set when a guardrail, not the model, ended the episode.
    bool forced = false;

    /// Throws TrajectoryError(InvalidOutcome) if the cell shape is wrong.
    void validate() const;
};

void to_json(nlohmann::json& j, const RepairOutcome& o);
void from_json(const nlohmann::json& j, RepairOutcome& o);

struct TrajectoryNode {
    NodeId id = 0;
    NodeKind kind = NodeKind::Root;
    NodeStatus status = NodeStatus::Active;
    std::optional<NodeId> parent;
    std::vector<NodeId> children;
    std::string goal_text;  // StepGoal only
    /// Cells as they currently appear in context (outputs attached, repairs spliced).
    std::vector<Cell> cells;
    std::int64_t instruction = 0;
    bool errored = false;
    std::optional<RepairOutcome::Kind> repaired;

    friend bool operator==(const TrajectoryNode&, const TrajectoryNode&) = default;
};

/// Step goals form a chain (each next step hangs below the previous one);
/// execution turns and repair reports are ordered children of their step.
/// Every mutation is also expressible as a JSON op so a transcript can
/// rebuild the tree exactly.
class TrajectoryTree {
public:
    TrajectoryTree();

    NodeId root() const noexcept { return 0; }
    const TrajectoryNode& node(NodeId id) const;
    const std::vector<TrajectoryNode>& nodes() const noexcept { return nodes_; }

    /// Deepest live step, or the root before the first step.
    NodeId current_step() const noexcept { return current_; }
    std::int64_t instruction() const noexcept { return instruction_; }

    /// Root-to-current chain of live step goals, root included.
    std::vector<NodeId> active_path() const;

    /// Starts a new instruction: the next advance hangs a step under the root.
    void begin_instruction();

    NodeId advance(const std::string& goal, std::vector<Cell> cells);
    NodeId backtrack_replace(std::vector<Cell> observations, const std::string& goal, std::vector<Cell> cells);
    NodeId add_exec_turn(std::vector<Cell> cells);

    /// Stores executed cells (with outputs) on a node and remembers whether it failed.
    void record_execution(NodeId id, std::vector<Cell> executed, bool error);

    void splice_repair(NodeId failed_turn, const RepairOutcome& outcome);

    /// Cells of one instruction's subtree in context order, skipping replaced nodes.
    std::vector<Cell> context_cells(std::int64_t instruction) const;
    /// All live cells across instructions.
    std::vector<Cell> context_cells() const;

    /// StepGoal + ExecTurn nodes, replaced ones included.
    std::int64_t count_nonroot() const;

    /// Applies one op as produced by the mutators (see op_* helpers below).
    void apply(const nlohmann::json& op);

    nlohmann::json to_json() const;
    static TrajectoryTree from_json(const nlohmann::json& j);

    friend bool operator==(const TrajectoryTree&, const TrajectoryTree&) = default;

private:
    TrajectoryNode& mut(NodeId id);
    NodeId add_node(NodeKind kind, NodeId parent, std::optional<std::size_t> position);
    void mark_replaced(NodeId id);
    void collect(NodeId id, std::vector<Cell>& out) const;

    std::vector<TrajectoryNode> nodes_;
    NodeId current_ = 0;
    std::int64_t instruction_ = 0;
    bool begun_ = false;
};

/// JSON op constructors; TrajectoryTree::apply consumes the same shapes.
nlohmann::json op_begin_instruction();
nlohmann::json op_advance(const std::string& goal, const std::vector<Cell>& cells);
nlohmann::json op_replace(const std::vector<Cell>& observations, const std::string& goal,
                          const std::vector<Cell>& cells);
nlohmann::json op_exec_turn(const std::vector<Cell>& cells);
nlohmann::json op_record_execution(NodeId id, const std::vector<Cell>& executed, bool error);
nlohmann::json op_splice(NodeId id, const RepairOutcome& outcome);

struct InstructionEntry {
    std::string text;
    std::vector<Cell> conclusion;
};

struct ContextHistory {
    std::vector<Cell> preamble;
    std::vector<InstructionEntry> instructions;
    TrajectoryTree tree;
    /// Turns of the repair episode in progress (debug + filter cells with outputs).
    std::vector<Cell> repair_turns;
};

/// Message sequence for one LLM call: preamble, instruction log, live trace,
/// then the stage prompt. Repair turns are included only in Debug/Filter.
std::vector<ChatMessage> assemble_context(const ContextHistory& history, AgentState stage,
                                          const std::string& stage_prompt, const TruncationPolicy& policy);

}  // namespace cellflow
