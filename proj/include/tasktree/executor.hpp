#pragma once

// The node execution engine: an enhanced preorder traversal FSM. One node
// executes per step; composites descend, atoms dispatch simulator actions and
// fall through to their preorder successor, if nodes branch to arbitrary
// targets, jumps reset the traversal stack to the target's root path, exits
// terminate. Patches and replacement trees apply only between steps.
//
// States are values: step() returns a new EngineState and leaves its input
// untouched. The simulator lives behind an EnvironmentHandle the engine
// drives; the anomaly controller observes through per-step snapshots and
// feeds decisions back through a queue drained at node boundaries.

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "tasktree/anomaly.hpp"
#include "tasktree/core.hpp"
#include "tasktree/metadata.hpp"
#include "tasktree/primitives.hpp"
#include "tasktree/sim.hpp"

namespace tasktree {

struct Frame {
    std::string node;
    std::size_t child_index = 0;

    friend bool operator==(const Frame&, const Frame&) = default;
};

enum class EngineStatus { Running, Done, Failed, PatchPending };

struct EngineState {
    ExecutionTree tree;
    std::string cursor;
    std::vector<Frame> stack;
    int steps_taken = 0;
    EngineStatus status = EngineStatus::Running;
    ParamEnv param_env;
};

struct Terminated {};

using NextNode = std::variant<std::string, Terminated>;

struct StepOutcome {
    std::string executed;
    std::optional<SimAction> action_issued;
    NextNode next = Terminated{};
    double duration = 0.0;
    ActionResult action_result = ActionResult::success(0.0);
    std::optional<LocateNote> locate;
    std::optional<std::string> grasped;
    std::optional<std::pair<std::string, Vec3>> released;
    std::optional<std::pair<std::string, Vec3>> pushed;
};

enum class RunStatus { Success, Failure, StepLimit, Aborted };

inline std::string run_status_name(RunStatus s) {
    switch (s) {
        case RunStatus::Success: return "success";
        case RunStatus::Failure: return "failure";
        case RunStatus::StepLimit: return "step-limit";
        case RunStatus::Aborted: return "aborted";
    }
    return "?";
}

struct RunReport {
    RunStatus status = RunStatus::Failure;
    int steps = 0;
    double sim_time = 0.0;
    std::vector<std::string> visit_log;
    int planner_calls = 0;
    ControllerCounters anomalies;
    int patch_failures = 0;
    int replacements = 0;
};

inline nlohmann::json run_report_to_json(const RunReport& r) {
    nlohmann::json j;
    j["status"] = run_status_name(r.status);
    j["steps"] = r.steps;
    j["sim_time"] = r.sim_time;
    j["visit_log"] = r.visit_log;
    j["planner_calls"] = r.planner_calls;
    j["anomalies"] = {{"events_total", r.anomalies.events_total}, {"t1", r.anomalies.handled_t1},
                      {"t2", r.anomalies.handled_t2},             {"t3", r.anomalies.handled_t3},
                      {"rollbacks", r.anomalies.rollbacks},       {"abandoned", r.anomalies.abandoned},
                      {"suppressed", r.anomalies.suppressed},     {"aborts", r.anomalies.aborts}};
    j["patch_failures"] = r.patch_failures;
    j["replacements"] = r.replacements;
    return j;
}

struct RunLimits {
    int max_steps = 500;
    double max_sim_time = 300.0;
};

// Owns the authoritative simulator state for one run and serves snapshot
// reads. The engine is its only writer.
class EnvironmentHandle {
public:
    EnvironmentHandle(const Scenario& scenario, WorldLimits limits = {})
        : scenario_(&scenario), limits_(limits), sim_(reset(scenario)) {
        injection_done_.assign(scenario.injections.size(), false);
        refresh_observation();
    }

    const Observation& last_obs() const { return last_obs_; }
    const WorldLimits& limits() const { return limits_; }
    SimState& sim() { return sim_; }
    const SimState& sim() const { return sim_; }
    double clock() const { return sim_.clock; }

    void refresh_observation() { last_obs_ = observe(sim_); }
    void advance_clock(double seconds) { sim_.clock += seconds; }

    // Applies every injection that is due and currently meaningful; returns
    // notes for the controller's scoring attribution.
    std::vector<AppliedInjectionNote> apply_due_injections() {
        std::vector<AppliedInjectionNote> notes;
        for (std::size_t i = 0; i < scenario_->injections.size(); ++i) {
            if (injection_done_[i]) {
                continue;
            }
            const AnomalyInjection& inj = scenario_->injections[i];
            if (inj.at > sim_.clock || !injection_applicable(sim_, inj)) {
                continue;
            }
            sim_ = inject(std::move(sim_), inj, limits_);
            injection_done_[i] = true;
            notes.push_back({inj.kind, inj.cls(), inj.target});
        }
        return notes;
    }

    bool goal_met() const { return check_goal(sim_, *scenario_); }
    const Scenario& scenario() const { return *scenario_; }

private:
    const Scenario* scenario_;
    WorldLimits limits_;
    SimState sim_;
    Observation last_obs_;
    std::vector<bool> injection_done_;
};

namespace engine_detail {

inline std::vector<Frame> frames_for(const ExecutionTree& tree, const std::string& target) {
    std::vector<std::string> path = root_path(tree, target);
    std::vector<Frame> frames;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
        const TaskNode& parent = tree.at(path[i]);
        for (std::size_t c = 0; c < parent.children.size(); ++c) {
            if (parent.children[c] == path[i + 1]) {
                frames.push_back({path[i], c});
                break;
            }
        }
    }
    return frames;
}

// Preorder successor after a completed node: next sibling, else the parent
// chain's next sibling. Empty optional means the traversal ran off the end.
inline std::optional<std::string> preorder_successor(const ExecutionTree& tree, std::vector<Frame>& stack) {
    while (!stack.empty()) {
        Frame& top = stack.back();
        const TaskNode& parent = tree.at(top.node);
        if (top.child_index + 1 < parent.children.size()) {
            ++top.child_index;
            return parent.children[top.child_index];
        }
        stack.pop_back();
    }
    return std::nullopt;
}

}  // namespace engine_detail

inline EngineState make_engine_state(ExecutionTree tree) {
    EngineState s;
    s.cursor = tree.root;
    s.tree = std::move(tree);
    return s;
}

// Where the engine goes after the cursor node executes, per node kind. If
// arms read the supplied metadata snapshot; totality is guaranteed by the
// mandatory default arm and parse-time target resolution.
inline NextNode resolve_next(const EngineState& state, const SceneMetadata& doc) {
    const TaskNode& node = state.tree.at(state.cursor);
    switch (node.kind) {
        case NodeKind::Exit:
            return Terminated{};
        case NodeKind::Composite:
            return node.children.front();
        case NodeKind::Jump:
            return node.jump_target;
        case NodeKind::If: {
            for (const BranchArm& arm : node.arms) {
                if (eval_predicate(arm.pred, doc)) {
                    return arm.target;
                }
            }
            return node.default_target;
        }
        case NodeKind::Atom: {
            std::vector<Frame> scratch = state.stack;
            std::optional<std::string> next = engine_detail::preorder_successor(state.tree, scratch);
            if (!next) {
                return Terminated{};
            }
            return *next;
        }
    }
    return Terminated{};
}

// Executes the cursor node and advances. The input state is unchanged; the
// environment carries the world side effects.
inline std::pair<EngineState, StepOutcome> step(const EngineState& state, EnvironmentHandle& env) {
    EngineState next = state;
    StepOutcome outcome;
    outcome.executed = state.cursor;
    const TaskNode& node = next.tree.at(next.cursor);
    ++next.steps_taken;

    auto finish_terminated = [&](EngineStatus status) {
        next.status = status;
        outcome.next = Terminated{};
    };

    switch (node.kind) {
        case NodeKind::Exit:
            finish_terminated(EngineStatus::Done);
            return {std::move(next), std::move(outcome)};

        case NodeKind::Atom: {
            AtomOutcome atom = execute_atom(node, next.param_env, env.last_obs(), env.sim(), env.limits());
            outcome.action_issued = atom.action;
            outcome.action_result = atom.result;
            outcome.duration = atom.result.duration;
            if (atom.result.ok) {
                if (atom.primitive == "grasp") {
                    outcome.grasped = std::get<Grasp>(*atom.action).obj;
                } else if (atom.primitive == "release" && env.last_obs().holding) {
                    // Landing spot of the object the gripper just let go of.
                    const std::string& released_id = *env.last_obs().holding;
                    auto it = env.sim().objects.find(released_id);
                    if (it != env.sim().objects.end()) {
                        outcome.released = {released_id, it->second.pos};
                    }
                } else if (atom.primitive == "push") {
                    const Push& p = std::get<Push>(*atom.action);
                    outcome.pushed = {p.obj, p.to};
                } else if (atom.primitive == "locate") {
                    const Locate& l = std::get<Locate>(*atom.action);
                    LocateNote note;
                    note.object = l.obj;
                    auto it = next.param_env.find("loc." + l.obj);
                    if (it != next.param_env.end()) {
                        if (const Vec3* v = std::get_if<Vec3>(&it->second)) {
                            note.seen = *v;
                        }
                    }
                    note.gripper_has_it = env.sim().gripper.holding == l.obj;
                    outcome.locate = note;
                }
            }
            std::optional<std::string> succ = engine_detail::preorder_successor(next.tree, next.stack);
            if (!succ) {
                finish_terminated(EngineStatus::Failed);
                return {std::move(next), std::move(outcome)};
            }
            next.cursor = *succ;
            outcome.next = *succ;
            return {std::move(next), std::move(outcome)};
        }

        case NodeKind::Composite: {
            next.stack.push_back({next.cursor, 0});
            next.cursor = node.children.front();
            outcome.next = next.cursor;
            return {std::move(next), std::move(outcome)};
        }

        case NodeKind::If:
        case NodeKind::Jump: {
            SceneMetadata doc = build_metadata(env.last_obs(), nullptr, next.param_env);
            std::string target;
            if (node.kind == NodeKind::Jump) {
                target = node.jump_target;
            } else {
                target = node.default_target;
                for (const BranchArm& arm : node.arms) {
                    if (eval_predicate(arm.pred, doc)) {
                        target = arm.target;
                        break;
                    }
                }
            }
            next.stack = engine_detail::frames_for(next.tree, target);
            if (next.stack.empty() && target != next.tree.root) {
                // Target unreachable through the child structure; cannot
                // resume preorder from it.
                finish_terminated(EngineStatus::Failed);
                return {std::move(next), std::move(outcome)};
            }
            next.cursor = target;
            outcome.next = target;
            return {std::move(next), std::move(outcome)};
        }
    }
    finish_terminated(EngineStatus::Failed);
    return {std::move(next), std::move(outcome)};
}

// Structural patch at a node boundary. An empty anchor means "at the
// cursor". On any splice error the pre-call state is returned unchanged to
// the caller via the thrown TreeError (engine state is a value).
inline EngineState apply_patch(const EngineState& state, RecoveryPatch patch) {
    EngineState next = state;
    if (patch.anchor.empty()) {
        patch.anchor = state.cursor;
    }
    std::set<std::string> replaced;
    if (patch.mode == PatchMode::ReplaceSubtree) {
        replaced = child_subtree(next.tree, patch.anchor);
    }
    next.tree = splice(next.tree, patch.anchor, patch);
    switch (patch.mode) {
        case PatchMode::InsertBefore:
            if (patch.anchor == state.cursor) {
                next.cursor = patch.fragment.root;
            }
            break;
        case PatchMode::ReplaceSubtree:
            if (replaced.count(state.cursor)) {
                next.cursor = patch.fragment.root;
            }
            break;
        case PatchMode::AppendAfter:
            break;
    }
    next.stack = engine_detail::frames_for(next.tree, next.cursor);
    next.status = EngineStatus::Running;
    return next;
}

inline std::string failure_target(const StepOutcome& outcome) {
    if (!outcome.action_issued) {
        return {};
    }
    return std::visit(
        [](const auto& a) -> std::string {
            if constexpr (requires { a.obj; }) {
                return a.obj;
            } else {
                return {};
            }
        },
        *outcome.action_issued);
}

inline std::string stage_entry_of(const EngineState& state) {
    std::vector<std::string> path = root_path(state.tree, state.cursor);
    if (path.size() >= 2) {
        return path[1];
    }
    return state.cursor;
}

// The control loop. Drains controller decisions at every node boundary,
// executes one node per step, publishes a snapshot after each step, and
// stops on exit, abort or resource limits.
inline RunReport run(ExecutionTree tree, EnvironmentHandle& env, AnomalyController& controller,
                     const RunLimits& limits = {}) {
    EngineState state = make_engine_state(std::move(tree));
    RunReport report;
    bool aborted = false;

    while (state.status == EngineStatus::Running) {
        // Node boundary: apply pending decisions before the next step.
        std::vector<TierDecision> decisions = controller.drain_decisions();
        if (!decisions.empty()) {
            state.status = EngineStatus::PatchPending;
        }
        for (TierDecision& decision : decisions) {
            env.advance_clock(decision.latency_cost);
            if (RecoveryPatch* patch = std::get_if<RecoveryPatch>(&decision.action)) {
                try {
                    state = apply_patch(state, *patch);
                } catch (const TreeError&) {
                    ++report.patch_failures;
                }
            } else if (ReplacementTree* repl = std::get_if<ReplacementTree>(&decision.action)) {
                EngineState fresh = make_engine_state(repl->doc.tree);
                fresh.steps_taken = state.steps_taken;
                state = std::move(fresh);
                ++report.replacements;
                env.refresh_observation();
                controller.on_tree_replaced(repl->doc, env.last_obs());
            } else if (CursorRollback* rb = std::get_if<CursorRollback>(&decision.action)) {
                if (state.tree.find(rb->target)) {
                    state.cursor = rb->target;
                    state.stack = engine_detail::frames_for(state.tree, state.cursor);
                }
            } else if (std::get_if<AbortDecision>(&decision.action)) {
                aborted = true;
            }
        }
        if (aborted) {
            break;
        }
        state.status = EngineStatus::Running;

        if (state.steps_taken >= limits.max_steps || env.clock() > limits.max_sim_time) {
            report.status = RunStatus::StepLimit;
            report.steps = state.steps_taken;
            report.sim_time = env.clock();
            report.anomalies = controller.counters();
            return report;
        }

        auto [next, outcome] = step(state, env);
        state = std::move(next);
        report.visit_log.push_back(outcome.executed);

        StepSnapshot snap;
        snap.step_index = state.steps_taken;
        snap.injections = env.apply_due_injections();
        env.refresh_observation();
        snap.clock = env.clock();
        snap.cursor = state.cursor;
        if (const TaskNode* cur = state.tree.find(state.cursor)) {
            snap.cursor_kind = cur->kind;
        }
        snap.obs = env.last_obs();
        snap.env = state.param_env;
        snap.stage_entry = stage_entry_of(state);
        if (!outcome.action_result.ok) {
            ActionFailureNote note;
            note.node = outcome.executed;
            note.primitive = outcome.action_issued ? action_name(*outcome.action_issued) : std::string{};
            if (note.primitive.empty()) {
                const TaskNode* executed = state.tree.find(outcome.executed);
                note.primitive = executed ? executed->description : outcome.executed;
            }
            note.reason = outcome.action_result.reason;
            note.offending = outcome.action_result.offending;
            note.target = failure_target(outcome);
            snap.failures.push_back(std::move(note));
        }
        if (outcome.locate) {
            snap.locates.push_back(*outcome.locate);
        }
        snap.grasped = outcome.grasped;
        snap.released = outcome.released;
        snap.pushed = outcome.pushed;
        controller.on_step(snap);
    }

    report.steps = state.steps_taken;
    report.sim_time = env.clock();
    report.anomalies = controller.counters();
    if (aborted) {
        report.status = RunStatus::Aborted;
    } else if (state.status == EngineStatus::Done) {
        report.status = env.goal_met() ? RunStatus::Success : RunStatus::Failure;
    } else {
        report.status = RunStatus::Failure;
    }
    return report;
}

}  // namespace tasktree
