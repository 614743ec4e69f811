#include "cellflow/trajectory.hpp"

#include <algorithm>

#include "cellflow/action_parser.hpp"

namespace cellflow {

using nlohmann::json;

std::string_view to_string(NodeKind k) {
    switch (k) {
        case NodeKind::Root: return "Root";
        case NodeKind::StepGoal: return "StepGoal";
        case NodeKind::ExecTurn: return "ExecTurn";
        case NodeKind::RepairReport: return "RepairReport";
    }
    return "?";
}

std::string_view to_string(NodeStatus s) {
    switch (s) {
        case NodeStatus::Active: return "Active";
        case NodeStatus::Replaced: return "Replaced";
        case NodeStatus::Completed: return "Completed";
        case NodeStatus::Failed: return "Failed";
    }
    return "?";
}

namespace {

NodeKind node_kind_from(const std::string& s) {
    for (auto k : {NodeKind::Root, NodeKind::StepGoal, NodeKind::ExecTurn, NodeKind::RepairReport}) {
        if (to_string(k) == s) return k;
    }
    throw TrajectoryError(TrajectoryErrorCode::MalformedOp, "unknown node kind " + s);
}

NodeStatus node_status_from(const std::string& s) {
    for (auto st : {NodeStatus::Active, NodeStatus::Replaced, NodeStatus::Completed, NodeStatus::Failed}) {
        if (to_string(st) == s) return st;
    }
    throw TrajectoryError(TrajectoryErrorCode::MalformedOp, "unknown node status " + s);
}

// Leading markdown cells of a step turn (observations and the goal label).
std::vector<Cell> markdown_prefix(const std::vector<Cell>& cells) {
    std::vector<Cell> out;
    for (const auto& c : cells) {
        if (c.is_code()) break;
        out.push_back(c);
    }
    return out;
}

}  // namespace

void RepairOutcome::validate() const {
    const auto code = std::count_if(cells.begin(), cells.end(), [](const Cell& c) { return c.is_code(); });
    if (kind == Kind::Success && code == 0) {
        throw TrajectoryError(TrajectoryErrorCode::InvalidOutcome, "a successful repair needs a code cell");
    }
    if (kind == Kind::Failure && (cells.size() != 1 || code != 0)) {
        throw TrajectoryError(TrajectoryErrorCode::InvalidOutcome,
                              "a failed repair carries exactly one markdown report");
    }
}

void to_json(json& j, const RepairOutcome& o) {
    j = json{{"kind", o.kind == RepairOutcome::Kind::Success ? "success" : "failure"},
             {"cells", o.cells},
             {"episode_turns", o.episode_turns},
             {"forced", o.forced}};
    if (o.resolved_error) {
        j["resolved_error"] = {{"name", o.resolved_error->name},
                               {"value", o.resolved_error->value},
                               {"cell_id", o.resolved_error->cell_id}};
    }
}

void from_json(const json& j, RepairOutcome& o) {
    o = RepairOutcome{};
    o.kind = j.at("kind").get<std::string>() == "success" ? RepairOutcome::Kind::Success
                                                          : RepairOutcome::Kind::Failure;
    o.cells = j.at("cells").get<std::vector<Cell>>();
    o.episode_turns = j.value("episode_turns", 0);
    o.forced = j.value("forced", false);
    if (j.contains("resolved_error")) {
        const auto& e = j["resolved_error"];
        o.resolved_error = ErrorDetail{e.value("name", ""), e.value("value", ""), e.value("cell_id", "")};
    }
}

TrajectoryTree::TrajectoryTree() {
    TrajectoryNode root;
    root.id = 0;
    root.kind = NodeKind::Root;
    nodes_.push_back(root);
}

const TrajectoryNode& TrajectoryTree::node(NodeId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
        throw TrajectoryError(TrajectoryErrorCode::UnknownTurn, "no node " + std::to_string(id));
    }
    return nodes_[static_cast<std::size_t>(id)];
}

TrajectoryNode& TrajectoryTree::mut(NodeId id) {
    return const_cast<TrajectoryNode&>(std::as_const(*this).node(id));
}

NodeId TrajectoryTree::add_node(NodeKind kind, NodeId parent, std::optional<std::size_t> position) {
    TrajectoryNode n;
    n.id = static_cast<NodeId>(nodes_.size());
    n.kind = kind;
    n.parent = parent;
    n.instruction = instruction_;
    nodes_.push_back(n);
    auto& siblings = mut(parent).children;
    if (position && *position <= siblings.size()) {
        siblings.insert(siblings.begin() + static_cast<std::ptrdiff_t>(*position), n.id);
    } else {
        siblings.push_back(n.id);
    }
    return n.id;
}

std::vector<NodeId> TrajectoryTree::active_path() const {
    std::vector<NodeId> path;
    for (auto id = std::optional<NodeId>(current_); id; id = node(*id).parent) path.push_back(*id);
    std::reverse(path.begin(), path.end());
    return path;
}

void TrajectoryTree::begin_instruction() {
    if (current_ != root() && mut(current_).status == NodeStatus::Active) {
        mut(current_).status = NodeStatus::Completed;
    }
    if (begun_) ++instruction_;
    begun_ = true;
    current_ = root();
}

NodeId TrajectoryTree::advance(const std::string& goal, std::vector<Cell> cells) {
    if (goal.empty()) throw TrajectoryError(TrajectoryErrorCode::InvalidGoal, "step goal text is required");
    if (current_ != root()) mut(current_).status = NodeStatus::Completed;
    const auto id = add_node(NodeKind::StepGoal, current_, std::nullopt);
    auto& n = mut(id);
    n.goal_text = goal;
    n.cells = std::move(cells);
    current_ = id;
    return id;
}

void TrajectoryTree::mark_replaced(NodeId id) {
    auto& n = mut(id);
    n.status = NodeStatus::Replaced;
    for (auto c : n.children) mark_replaced(c);
}

NodeId TrajectoryTree::backtrack_replace(std::vector<Cell> observations, const std::string& goal,
                                         std::vector<Cell> cells) {
    if (current_ == root()) {
        throw TrajectoryError(TrajectoryErrorCode::NothingToReplace, "no current step to replace");
    }
    if (goal.empty()) throw TrajectoryError(TrajectoryErrorCode::InvalidGoal, "step goal text is required");
    const auto old = current_;
    const auto parent = *node(old).parent;
    mark_replaced(old);
    const auto& siblings = node(parent).children;
    const auto pos = static_cast<std::size_t>(std::find(siblings.begin(), siblings.end(), old) - siblings.begin());
    const auto id = add_node(NodeKind::StepGoal, parent, pos + 1);
    auto& n = mut(id);
    n.goal_text = goal;
    n.cells = std::move(observations);
    n.cells.insert(n.cells.end(), std::make_move_iterator(cells.begin()), std::make_move_iterator(cells.end()));
    current_ = id;
    return id;
}

NodeId TrajectoryTree::add_exec_turn(std::vector<Cell> cells) {
    if (current_ == root()) {
        throw TrajectoryError(TrajectoryErrorCode::UnknownTurn, "execution turn outside any step");
    }
    const auto id = add_node(NodeKind::ExecTurn, current_, std::nullopt);
    mut(id).cells = std::move(cells);
    return id;
}

void TrajectoryTree::record_execution(NodeId id, std::vector<Cell> executed, bool error) {
    auto& n = mut(id);
    if (n.kind != NodeKind::StepGoal && n.kind != NodeKind::ExecTurn) {
        throw TrajectoryError(TrajectoryErrorCode::UnknownTurn, "node " + std::to_string(id) + " is not a turn");
    }
    n.cells = std::move(executed);
    n.errored = error;
}

void TrajectoryTree::splice_repair(NodeId failed_turn, const RepairOutcome& outcome) {
    auto& n = mut(failed_turn);
    if ((n.kind != NodeKind::StepGoal && n.kind != NodeKind::ExecTurn) || !n.errored || n.repaired) {
        throw TrajectoryError(TrajectoryErrorCode::UnknownTurn,
                              "node " + std::to_string(failed_turn) + " has no pending execution error");
    }
    outcome.validate();
    n.repaired = outcome.kind;

    if (outcome.kind == RepairOutcome::Kind::Success) {
        std::vector<Cell> cells = n.kind == NodeKind::StepGoal ? markdown_prefix(n.cells) : std::vector<Cell>{};
        cells.insert(cells.end(), outcome.cells.begin(), outcome.cells.end());
        n.cells = std::move(cells);
        return;
    }

    if (n.kind == NodeKind::StepGoal) {
        n.cells = markdown_prefix(n.cells);
        const auto id = add_node(NodeKind::RepairReport, failed_turn, 0);
        mut(id).cells = outcome.cells;
        return;
    }
    n.status = NodeStatus::Replaced;
    const auto parent = *n.parent;
    const auto& siblings = node(parent).children;
    const auto pos =
        static_cast<std::size_t>(std::find(siblings.begin(), siblings.end(), failed_turn) - siblings.begin());
    const auto id = add_node(NodeKind::RepairReport, parent, pos + 1);
    mut(id).cells = outcome.cells;
}

void TrajectoryTree::collect(NodeId id, std::vector<Cell>& out) const {
    const auto& n = node(id);
    if (n.status == NodeStatus::Replaced) return;
    out.insert(out.end(), n.cells.begin(), n.cells.end());
    for (auto c : n.children) {
        const auto& child = node(c);
        if (child.kind != NodeKind::StepGoal && child.status != NodeStatus::Replaced) {
            out.insert(out.end(), child.cells.begin(), child.cells.end());
        }
    }
    for (auto c : n.children) {
        if (node(c).kind == NodeKind::StepGoal) collect(c, out);
    }
}

std::vector<Cell> TrajectoryTree::context_cells(std::int64_t instruction) const {
    std::vector<Cell> out;
    for (auto c : node(root()).children) {
        if (node(c).instruction == instruction) collect(c, out);
    }
    return out;
}

std::vector<Cell> TrajectoryTree::context_cells() const {
    std::vector<Cell> out;
    for (auto c : node(root()).children) collect(c, out);
    return out;
}

std::int64_t TrajectoryTree::count_nonroot() const {
    return std::count_if(nodes_.begin(), nodes_.end(), [](const TrajectoryNode& n) {
        return n.kind == NodeKind::StepGoal || n.kind == NodeKind::ExecTurn;
    });
}

json op_begin_instruction() { return json{{"op", "begin_instruction"}}; }

json op_advance(const std::string& goal, const std::vector<Cell>& cells) {
    return json{{"op", "advance"}, {"goal", goal}, {"cells", cells}};
}

json op_replace(const std::vector<Cell>& observations, const std::string& goal, const std::vector<Cell>& cells) {
    return json{{"op", "replace"}, {"observations", observations}, {"goal", goal}, {"cells", cells}};
}

json op_exec_turn(const std::vector<Cell>& cells) { return json{{"op", "exec_turn"}, {"cells", cells}}; }

json op_record_execution(NodeId id, const std::vector<Cell>& executed, bool error) {
    return json{{"op", "record_execution"}, {"node", id}, {"cells", executed}, {"error", error}};
}

json op_splice(NodeId id, const RepairOutcome& outcome) {
    return json{{"op", "splice"}, {"node", id}, {"outcome", outcome}};
}

void TrajectoryTree::apply(const json& op) {
    try {
        const auto name = op.at("op").get<std::string>();
        if (name == "begin_instruction") {
            begin_instruction();
        } else if (name == "advance") {
            advance(op.at("goal").get<std::string>(), op.at("cells").get<std::vector<Cell>>());
        } else if (name == "replace") {
            backtrack_replace(op.at("observations").get<std::vector<Cell>>(), op.at("goal").get<std::string>(),
                              op.at("cells").get<std::vector<Cell>>());
        } else if (name == "exec_turn") {
            add_exec_turn(op.at("cells").get<std::vector<Cell>>());
        } else if (name == "record_execution") {
            record_execution(op.at("node").get<NodeId>(), op.at("cells").get<std::vector<Cell>>(),
                             op.at("error").get<bool>());
        } else if (name == "splice") {
            splice_repair(op.at("node").get<NodeId>(), op.at("outcome").get<RepairOutcome>());
        } else {
            throw TrajectoryError(TrajectoryErrorCode::MalformedOp, "unknown tree op " + name);
        }
    } catch (const json::exception& e) {
        throw TrajectoryError(TrajectoryErrorCode::MalformedOp, std::string("malformed tree op: ") + e.what());
    }
}

json TrajectoryTree::to_json() const {
    json nodes = json::array();
    for (const auto& n : nodes_) {
        json rec{{"id", n.id},
                 {"kind", to_string(n.kind)},
                 {"status", to_string(n.status)},
                 {"parent", n.parent ? json(*n.parent) : json(nullptr)},
                 {"children", n.children},
                 {"cells", n.cells},
                 {"instruction", n.instruction},
                 {"errored", n.errored}};
        if (n.kind == NodeKind::StepGoal) rec["goal_text"] = n.goal_text;
        if (n.repaired) rec["repaired"] = *n.repaired == RepairOutcome::Kind::Success ? "success" : "failure";
        nodes.push_back(std::move(rec));
    }
    return json{{"current", current_}, {"instruction", instruction_}, {"begun", begun_}, {"nodes", nodes}};
}

TrajectoryTree TrajectoryTree::from_json(const json& j) {
    TrajectoryTree t;
    t.nodes_.clear();
    for (const auto& rec : j.at("nodes")) {
        TrajectoryNode n;
        n.id = rec.at("id").get<NodeId>();
        n.kind = node_kind_from(rec.at("kind").get<std::string>());
        n.status = node_status_from(rec.at("status").get<std::string>());
        if (!rec.at("parent").is_null()) n.parent = rec["parent"].get<NodeId>();
        n.children = rec.at("children").get<std::vector<NodeId>>();
        n.cells = rec.at("cells").get<std::vector<Cell>>();
        n.instruction = rec.value("instruction", 0);
        n.errored = rec.value("errored", false);
        n.goal_text = rec.value("goal_text", "");
        if (rec.contains("repaired")) {
            n.repaired = rec["repaired"] == "success" ? RepairOutcome::Kind::Success : RepairOutcome::Kind::Failure;
        }
        t.nodes_.push_back(std::move(n));
    }
    t.current_ = j.at("current").get<NodeId>();
    t.instruction_ = j.value("instruction", 0);
    t.begun_ = j.value("begun", false);
    return t;
}

std::vector<ChatMessage> assemble_context(const ContextHistory& history, AgentState stage,
                                          const std::string& stage_prompt, const TruncationPolicy& policy) {
    std::vector<ChatMessage> messages;
    messages.push_back(ChatMessage::system(render_context(history.preamble, policy)));

    std::string log;
    for (std::size_t i = 0; i < history.instructions.size(); ++i) {
        if (i) log += "\n\n";
        log += "[USER INSTRUCTION]:\n" + history.instructions[i].text;
    }
    messages.push_back(ChatMessage::user(log));

    std::vector<Cell> trace;
    for (std::size_t i = 0; i < history.instructions.size(); ++i) {
        auto part = history.tree.context_cells(static_cast<std::int64_t>(i));
        trace.insert(trace.end(), part.begin(), part.end());
        const auto& conclusion = history.instructions[i].conclusion;
        trace.insert(trace.end(), conclusion.begin(), conclusion.end());
    }
    if (stage == AgentState::Debug || stage == AgentState::Filter) {
        trace.insert(trace.end(), history.repair_turns.begin(), history.repair_turns.end());
    }
    if (!trace.empty()) messages.push_back(ChatMessage::assistant(render_context(trace, policy)));

    messages.push_back(ChatMessage::user(stage_prompt));
    return messages;
}

}  // namespace cellflow
