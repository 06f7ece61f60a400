#pragma once

// Tiered anomaly handling: scene-state extraction, deviation against the
// expectation model, declarative tier-1 monitors, a rule-based tier-2 local
// expert that reorganizes the call sequence, tier-3 replanning, and the
// controller that routes every anomaly to exactly one tier.
//
// The controller runs as a monitor loop interleaved with the engine's
// control loop at step granularity: after every engine step it receives an
// immutable snapshot, derives events, routes them, and queues decisions the
// engine drains at its next node boundary. The engine is the only writer of
// engine state; the controller never touches it directly.

#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "tasktree/core.hpp"
#include "tasktree/dsl.hpp"
#include "tasktree/metadata.hpp"
#include "tasktree/planner.hpp"
#include "tasktree/primitives.hpp"
#include "tasktree/sim.hpp"

namespace tasktree {

// --- scene state and deviation --------------------------------------------

// Keypoint snapshot: tracked object positions, Missing (nullopt) when the
// detector lost the object.
struct SceneState {
    std::map<std::string, std::optional<Vec3>> keypoints;
    double timestamp = 0.0;
};

class UnknownKeypoint : public std::runtime_error {
public:
    explicit UnknownKeypoint(const std::string& id) : std::runtime_error("unknown keypoint: " + id) {}
};

class NoOverlap : public std::runtime_error {
public:
    NoOverlap() : std::runtime_error("deviation: no keypoint common to state and expectation") {}
};

// `declared` is the universe of keypoints the scenario has ever exposed;
// a tracked id outside it is a caller bug, a declared id absent from the
// observation is Missing (removed or never detected).
inline SceneState extract_scene_state(const Observation& obs, const std::set<std::string>& tracked,
                                      const std::set<std::string>& declared) {
    SceneState s;
    s.timestamp = obs.clock;
    for (const std::string& id : tracked) {
        if (declared.find(id) == declared.end()) {
            throw UnknownKeypoint(id);
        }
        const ObsObject* o = obs.find(id);
        if (o && o->pos) {
            s.keypoints[id] = *o->pos;
        } else {
            s.keypoints[id] = std::nullopt;
        }
    }
    return s;
}

// Predicted keypoint positions; nullopt entries are don't-care.
struct Expectation {
    std::map<std::string, std::optional<Vec3>> keypoints;
    double valid_from = 0.0;
    double valid_to = std::numeric_limits<double>::infinity();
};

// Max keypoint mismatch in meters. A Missing observation against a concrete
// expectation is an infinite deviation.
inline double deviation(const SceneState& s, const Expectation& u) {
    double worst = 0.0;
    bool any = false;
    for (const auto& [id, expected] : u.keypoints) {
        auto it = s.keypoints.find(id);
        if (it == s.keypoints.end()) {
            continue;
        }
        any = true;
        if (!expected) {
            continue;  // don't-care
        }
        if (!it->second) {
            return std::numeric_limits<double>::infinity();
        }
        worst = std::max(worst, distance(*it->second, *expected));
    }
    if (!any) {
        throw NoOverlap();
    }
    return worst;
}

// --- events and decisions --------------------------------------------------

enum class AnomalySource { MonitorTrigger, DeviationThreshold, ActionFailure };

inline std::string anomaly_source_name(AnomalySource s) {
    switch (s) {
        case AnomalySource::MonitorTrigger: return "monitor-trigger";
        case AnomalySource::DeviationThreshold: return "deviation-threshold";
        case AnomalySource::ActionFailure: return "action-failure";
    }
    return "?";
}

struct AnomalyEvent {
    double detected_at = 0.0;
    double deviation = 0.0;
    AnomalySource source = AnomalySource::DeviationThreshold;
    std::optional<AnomalyClass> ground_truth_class;  // injector label, scoring only
    std::string object;                              // offending keypoint / object
    std::string cursor;                              // engine cursor at detection
    std::string monitor_id;                          // MonitorTrigger only
    std::string failure_reason;                      // ActionFailure only
    std::string failure_primitive;                   // ActionFailure only
    std::string summary;                             // human-readable cause line
};

enum class Tier { T1Predefined, T2LocalExpert, T3Replan };

inline std::string tier_name(Tier t) {
    switch (t) {
        case Tier::T1Predefined: return "T1-predefined";
        case Tier::T2LocalExpert: return "T2-local-expert";
        case Tier::T3Replan: return "T3-replan";
    }
    return "?";
}

struct ReplacementTree {
    PlanDocument doc;
};
struct AbortDecision {
    std::string reason;
};
struct CursorRollback {
    std::string target;  // stage entry node
};

struct TierDecision {
    Tier tier = Tier::T1Predefined;
    std::variant<RecoveryPatch, ReplacementTree, AbortDecision, CursorRollback> action;
    double latency_cost = 0.0;
    AnomalyEvent cause;
};

struct TierConfig {
    double t1_latency_s = 0.3;
    double t2_latency_s = 3.0;
    double t3_latency_s = 20.9;
    double rollback_latency_s = 0.8;
    int t3_retries = 1;
    int rollback_limit = 6;
    int monitor_cadence_steps = 1;
    double monitor_cooldown_s = 2.0;
};

enum class HandlingPolicy { MAH, NaiveRollback, FullReplan, LocalOnly };

inline std::string handling_policy_name(HandlingPolicy p) {
    switch (p) {
        case HandlingPolicy::MAH: return "mah";
        case HandlingPolicy::NaiveRollback: return "rollback";
        case HandlingPolicy::FullReplan: return "replan";
        case HandlingPolicy::LocalOnly: return "local";
    }
    return "?";
}

inline std::optional<HandlingPolicy> handling_policy_from_name(const std::string& name) {
    if (name == "mah") return HandlingPolicy::MAH;
    if (name == "rollback") return HandlingPolicy::NaiveRollback;
    if (name == "replan") return HandlingPolicy::FullReplan;
    if (name == "local") return HandlingPolicy::LocalOnly;
    return std::nullopt;
}

// --- monitor runtime --------------------------------------------------------

// Stateful wrapper per declared monitor: cooldown clock and, for
// moved-beyond predicates, the positional reference. The reference re-bases
// while the watched object rides the gripper (expected motion) and whenever
// a locate re-localizes it; only exogenous drift can trigger.
class MonitorRuntime {
public:
    void install(std::vector<MonitorSpec> specs, const SceneMetadata& initial, double cooldown_default) {
        monitors_.clear();
        for (MonitorSpec& spec : specs) {
            State st;
            st.spec = std::move(spec);
            if (st.spec.cooldown <= 0.0) {
                st.spec.cooldown = cooldown_default;
            }
            st.watched_object = object_of_path(st.spec.pred.path);
            if (st.spec.pred.op == PredOp::MovedBeyond) {
                if (const nlohmann::json* at = metadata_at(initial, st.spec.pred.path)) {
                    if (at->is_array() && at->size() == 3) {
                        st.reference = vec3_from_json(*at);
                    }
                }
            }
            monitors_.push_back(std::move(st));
        }
    }

    static std::string object_of_path(const std::string& path) {
        if (path.rfind("obj.", 0) != 0) {
            return {};
        }
        std::size_t dot = path.find('.', 4);
        return dot == std::string::npos ? path.substr(4) : path.substr(4, dot - 4);
    }

    void rebase(const std::string& object, const SceneMetadata& doc) {
        for (State& st : monitors_) {
            if (st.spec.pred.op == PredOp::MovedBeyond && st.watched_object == object) {
                if (const nlohmann::json* at = metadata_at(doc, st.spec.pred.path)) {
                    if (at->is_array() && at->size() == 3) {
                        st.reference = vec3_from_json(*at);
                    }
                }
            }
        }
    }

    struct Fired {
        const MonitorSpec* spec;
        double deviation;  // displacement for moved-beyond, 0 otherwise
    };

    // One fired entry per monitor whose predicate holds and whose cooldown
    // has elapsed; cooldown timestamps update on fire.
    std::vector<Fired> run(const SceneMetadata& doc, double clock) {
        std::vector<Fired> fired;
        for (State& st : monitors_) {
            // Expected motion keeps moved-beyond references current.
            if (st.spec.pred.op == PredOp::MovedBeyond && !st.watched_object.empty()) {
                const nlohmann::json* held = metadata_at(doc, "obj." + st.watched_object + ".held");
                if (held && held->is_boolean() && held->get<bool>()) {
                    rebase(st.watched_object, doc);
                }
            }
            double dev = 0.0;
            if (!condition_holds(st, doc, &dev)) {
                continue;
            }
            if (st.last_fired >= 0.0 && clock - st.last_fired < st.spec.cooldown) {
                continue;
            }
            st.last_fired = clock;
            fired.push_back({&st.spec, dev});
        }
        return fired;
    }

    // Level query without cooldown or side effects (used for latch release).
    bool condition_active(const std::string& object, const SceneMetadata& doc) const {
        for (const State& st : monitors_) {
            if (st.watched_object != object) {
                continue;
            }
            double dev = 0.0;
            if (condition_holds(st, doc, &dev)) {
                return true;
            }
        }
        return false;
    }

    std::size_t size() const { return monitors_.size(); }

    const MonitorSpec* find(const std::string& id) const {
        for (const State& st : monitors_) {
            if (st.spec.id == id) {
                return &st.spec;
            }
        }
        return nullptr;
    }

private:
    struct State {
        MonitorSpec spec;
        std::string watched_object;
        std::optional<Vec3> reference;
        double last_fired = -1.0;
    };

    static bool condition_holds(const State& st, const SceneMetadata& doc, double* dev) {
        if (st.spec.pred.op == PredOp::MovedBeyond) {
            const nlohmann::json* at = metadata_at(doc, st.spec.pred.path);
            if (!at || !at->is_array() || at->size() != 3 || !st.reference || !st.spec.pred.rhs) {
                return false;
            }
            const double* eps = std::get_if<double>(&*st.spec.pred.rhs);
            if (!eps) {
                return false;
            }
            double d = distance(vec3_from_json(*at), *st.reference);
            *dev = d;
            return d > *eps;
        }
        return eval_predicate(st.spec.pred, doc);
    }

    std::vector<State> monitors_;
};

// --- expectation tracker ----------------------------------------------------

// Nominal-model predictions derived from the action stream: an object the
// plan grasped is expected at the gripper; everything else is expected where
// it was last localized. No ground truth enters here.
class ExpectationTracker {
public:
    void init(const Observation& obs) {
        expected_.clear();
        believed_held_.clear();
        declared_.clear();
        for (const ObsObject& o : obs.objects) {
            declared_.insert(o.id);
            if (o.pos) {
                expected_[o.id] = *o.pos;
            }
        }
    }

    void note_declared(const Observation& obs) {
        for (const ObsObject& o : obs.objects) {
            declared_.insert(o.id);
        }
    }

    void on_grasp(const std::string& obj) { believed_held_.insert(obj); }
    void on_release(const std::string& obj, const std::optional<Vec3>& landed) {
        believed_held_.erase(obj);
        if (landed) {
            expected_[obj] = *landed;
        }
    }
    void on_push(const std::string& obj, const Vec3& to) { expected_[obj] = to; }
    void on_locate(const std::string& obj, const std::optional<Vec3>& seen, bool gripper_has_it) {
        if (seen) {
            expected_[obj] = *seen;
        }
        if (!gripper_has_it) {
            believed_held_.erase(obj);
        } else {
            believed_held_.insert(obj);
        }
    }

    bool believed_held(const std::string& obj) const { return believed_held_.count(obj) > 0; }

    Expectation at(const Observation& obs) const {
        Expectation u;
        u.valid_from = obs.clock;
        for (const auto& [id, pos] : expected_) {
            if (believed_held_.count(id)) {
                u.keypoints[id] = obs.gripper_pos;
            } else {
                u.keypoints[id] = pos;
            }
        }
        return u;
    }

    std::set<std::string> tracked() const {
        std::set<std::string> out;
        for (const auto& [id, pos] : expected_) {
            out.insert(id);
        }
        return out;
    }
    const std::set<std::string>& declared() const { return declared_; }

private:
    std::map<std::string, Vec3> expected_;
    std::set<std::string> believed_held_;
    std::set<std::string> declared_;
};

// --- tier 2: local expert ---------------------------------------------------

struct ExpertContext {
    bool believed_held = false;           // tracker thought the gripper had the object
    std::string failed_target;            // object the failed action addressed
    NodeKind cursor_kind = NodeKind::Atom;
    Vec3 clear_spot{0.66, 0.38, 0.02};    // where obstructions get pushed
};

// Deterministic sequence-reorganization rules. Anything outside the table is
// declined and escalates.
inline std::optional<RecoveryPatch> local_expert_recover(const AnomalyEvent& event, const ExpertContext& ctx,
                                                         int patch_counter) {
    std::string prefix = "p" + std::to_string(patch_counter) + ".";
    auto atom = [&](const std::string& id, const std::string& prim, std::vector<Param> params) {
        return build_node(NodeKind::Atom, prefix + id, prim, std::move(params));
    };
    auto make_patch = [&](const std::string& desc, std::vector<TaskNode> atoms) {
        ExecutionTree frag;
        frag.subtask_label = desc;
        frag.tau = 1.0;
        std::vector<std::string> order;
        for (TaskNode& n : atoms) {
            order.push_back(n.id);
            frag.nodes.emplace(n.id, std::move(n));
        }
        TaskNode seq = build_node(NodeKind::Composite, prefix + "seq", desc, {}, {.children = order});
        frag.root = prefix + "seq";
        frag.nodes.emplace(frag.root, std::move(seq));
        RecoveryPatch patch;
        patch.mode = PatchMode::InsertBefore;
        patch.fragment = std::move(frag);
        return patch;
    };

    // Dropped while believed held: re-locate, re-approach, re-grasp.
    if (event.source == AnomalySource::DeviationThreshold && ctx.believed_held && !event.object.empty() &&
        std::isfinite(event.deviation)) {
        return make_patch("re-acquire " + event.object,
                          {atom("relocate", "locate", {{"obj", event.object}}),
                           atom("approach", "move_to", {{"target", std::string("@") + event.object}}),
                           atom("regrasp", "grasp", {{"obj", event.object}})});
    }

    // Obstructed grasp: clear the blocker, then redo the approach and grasp.
    if (event.source == AnomalySource::ActionFailure && event.failure_reason == "obstructed" &&
        !event.object.empty() && !ctx.failed_target.empty()) {
        return make_patch("clear " + event.object + " and retry",
                          {atom("clear", "push", {{"obj", event.object}, {"to", ctx.clear_spot}}),
                           atom("confirm", "locate", {{"obj", event.object}}),
                           atom("relocate", "locate", {{"obj", ctx.failed_target}}),
                           atom("approach", "move_to", {{"target", std::string("@") + ctx.failed_target}}),
                           atom("regrasp", "grasp", {{"obj", ctx.failed_target}})});
    }

    return std::nullopt;  // decline: outside the sequence-reorganization scope
}

// --- tier 3: replanning -----------------------------------------------------

struct ReplanOutcome {
    std::optional<PlanDocument> doc;
    SourceText source;
    int retries_used = 0;
    std::string abort_reason;
};

// One planner call, one bounded retry with the parse diagnostic appended to
// the context so the backend can react.
inline ReplanOutcome replan(const AnomalyEvent& event, const Observation& obs, PlannerContext context,
                            Planner& planner, const std::string& instruction, int retries) {
    ReplanOutcome outcome;
    PlanRequest req;
    req.instruction = instruction;
    req.purpose = PlanPurpose::Replan;
    req.observation = obs;
    req.context = std::move(context);
    req.anomaly = AnomalySummary{"complex", event.summary};
    for (int attempt = 0; attempt <= retries; ++attempt) {
        outcome.retries_used = attempt;
        PlanBundle bundle;
        try {
            bundle = planner.plan(req);
        } catch (const PlannerError& e) {
            outcome.abort_reason = e.what();
            continue;
        }
        ParseResult parsed = parse_document(extract_plan_source(bundle.source.text));
        if (parsed.ok()) {
            outcome.doc = std::move(parsed.doc);
            outcome.source = bundle.source;
            outcome.abort_reason.clear();
            return outcome;
        }
        outcome.abort_reason = "replan output rejected: " + parsed.first_error().str();
        req.context.memory_snippets.push_back("previous replan attempt failed to parse: " +
                                              parsed.first_error().str());
    }
    return outcome;
}

// --- controller --------------------------------------------------------------

struct ActionFailureNote {
    std::string node;
    std::string primitive;
    std::string reason;
    std::string offending;  // blocker or unreachable object
    std::string target;     // object the action addressed
};

struct AppliedInjectionNote {
    AnomalyKind kind = AnomalyKind::ObjectDisplacement;
    AnomalyClass cls = AnomalyClass::Predictable;
    std::string target;
};

struct LocateNote {
    std::string object;
    std::optional<Vec3> seen;
    bool gripper_has_it = false;
};

// Immutable per-step view the engine publishes to the monitor loop.
struct StepSnapshot {
    int step_index = 0;
    double clock = 0.0;
    std::string cursor;       // node the engine will execute next
    std::string stage_entry;  // root-level stage containing the cursor
    NodeKind cursor_kind = NodeKind::Atom;
    Observation obs;
    ParamEnv env;
    std::vector<ActionFailureNote> failures;
    std::vector<AppliedInjectionNote> injections;
    std::vector<LocateNote> locates;
    std::optional<std::string> grasped;                       // object grasped this step
    std::optional<std::pair<std::string, Vec3>> released;     // object and landing spot
    std::optional<std::pair<std::string, Vec3>> pushed;
};

struct ControllerCounters {
    int events_total = 0;
    int handled_t1 = 0;
    int handled_t2 = 0;
    int handled_t3 = 0;
    int rollbacks = 0;
    int abandoned = 0;   // declined under local-only
    int suppressed = 0;  // same-cause repeats muted while a recovery runs
    int aborts = 0;
};

class AnomalyController {
public:
    AnomalyController(HandlingPolicy policy, TierConfig config, Planner* planner, std::string instruction,
                      std::function<PlannerContext()> context_provider)
        : policy_(policy),
          config_(std::move(config)),
          planner_(planner),
          instruction_(std::move(instruction)),
          context_provider_(std::move(context_provider)) {}

    void install_plan(const PlanDocument& doc, const Observation& initial_obs, double tau) {
        tau_ = tau;
        tracker_.init(initial_obs);
        prev_obs_ = initial_obs;
        SceneMetadata doc0 = build_metadata(initial_obs, nullptr, {});
        monitors_.install(doc.monitors, doc0, config_.monitor_cooldown_s);
        latches_.clear();
    }

    // Monitor-loop body, invoked once per engine step (at the configured
    // cadence). Reads the snapshot, updates the expectation model, derives
    // fused per-object events, routes each one, and queues decisions.
    void on_step(const StepSnapshot& snap) {
        if (config_.monitor_cadence_steps > 1 && snap.step_index % config_.monitor_cadence_steps != 0) {
            absorb_model_updates(snap);
            prev_obs_ = snap.obs;
            return;
        }
        absorb_model_updates(snap);
        SceneMetadata doc = build_metadata(snap.obs, &prev_obs_, snap.env);

        for (const AppliedInjectionNote& note : snap.injections) {
            attribution_[note.target] = note.cls;
            if (note.kind == AnomalyKind::MidTaskObstruction) {
                attribution_["intruder"] = note.cls;
            }
            if (note.kind == AnomalyKind::TopologyChange) {
                attribution_[note.target + "2"] = note.cls;
            }
        }
        tracker_.note_declared(snap.obs);

        // Detection pass: monitors first, then deviation, then action
        // failures, fused per offending object so one physical anomaly
        // yields one event.
        std::map<std::string, AnomalyEvent> events;

        for (const MonitorRuntime::Fired& f : monitors_.run(doc, snap.clock)) {
            std::string object = MonitorRuntime::object_of_path(f.spec->pred.path);
            if (latched(object)) {
                ++counters_.suppressed;
                continue;
            }
            AnomalyEvent& ev = events[object];
            if (ev.source == AnomalySource::MonitorTrigger && !ev.monitor_id.empty()) {
                continue;  // earlier monitor already claimed this object
            }
            ev.detected_at = snap.clock;
            ev.source = AnomalySource::MonitorTrigger;
            ev.object = object;
            ev.monitor_id = f.spec->id;
            ev.deviation = f.deviation;
            ev.cursor = snap.cursor;
            ev.summary = "monitor " + f.spec->id + " tripped on " + f.spec->pred.path;
        }

        SceneState scene = extract_scene_state(snap.obs, tracker_.tracked(), tracker_.declared());
        Expectation expectation = tracker_.at(snap.obs);
        for (const auto& [id, expected] : expectation.keypoints) {
            if (!expected) {
                continue;
            }
            auto it = scene.keypoints.find(id);
            if (it == scene.keypoints.end()) {
                continue;
            }
            double dev = it->second ? distance(*it->second, *expected) : std::numeric_limits<double>::infinity();
            if (dev <= tau_) {
                continue;
            }
            if (latched(id)) {
                ++counters_.suppressed;
                continue;
            }
            if (events.count(id)) {
                continue;  // a monitor already owns this object's anomaly
            }
            AnomalyEvent ev;
            ev.detected_at = snap.clock;
            ev.source = AnomalySource::DeviationThreshold;
            ev.object = id;
            ev.deviation = dev;
            ev.cursor = snap.cursor;
            ev.summary = std::isfinite(dev)
                             ? id + " deviates " + dsl_detail::format_number(dev) + " m from expectation"
                             : "keypoint " + id + " missing from scene";
            events.emplace(id, std::move(ev));
        }

        for (const ActionFailureNote& f : snap.failures) {
            std::string object = f.offending.empty() ? f.target : f.offending;
            if (events.count(object) || latched(object)) {
                continue;
            }
            AnomalyEvent ev;
            ev.detected_at = snap.clock;
            ev.source = AnomalySource::ActionFailure;
            ev.object = object;
            ev.cursor = snap.cursor;
            ev.failure_reason = f.reason;
            ev.failure_primitive = f.primitive;
            ev.summary = "action " + f.primitive + " failed: " + f.reason +
                         (f.offending.empty() ? "" : " (" + f.offending + ")");
            ev.deviation = 0.0;
            failed_targets_[object] = f.target;
            events.emplace(object, std::move(ev));
        }

        for (auto& [object, ev] : events) {
            if (auto it = attribution_.find(object); it != attribution_.end()) {
                ev.ground_truth_class = it->second;
            }
            ++counters_.events_total;
            event_log_.push_back(ev);
            handle(ev, snap, doc);
        }

        release_latches(doc, scene, expectation);
        prev_obs_ = snap.obs;
    }

    std::vector<TierDecision> drain_decisions() {
        std::vector<TierDecision> out;
        out.swap(pending_);
        return out;
    }

    // Invoked by the engine when a replacement tree goes live: monitors are
    // replaced and expectations re-baseline on the current observation.
    void on_tree_replaced(const PlanDocument& doc, const Observation& obs) {
        tracker_.init(obs);
        SceneMetadata meta = build_metadata(obs, nullptr, {});
        monitors_.install(doc.monitors, meta, config_.monitor_cooldown_s);
        latches_.clear();
        prev_obs_ = obs;
    }

    const ControllerCounters& counters() const { return counters_; }
    const std::vector<AnomalyEvent>& event_log() const { return event_log_; }
    HandlingPolicy policy() const { return policy_; }
    const TierConfig& config() const { return config_; }

private:
    bool latched(const std::string& object) const { return latches_.count(object) > 0; }

    void absorb_model_updates(const StepSnapshot& snap) {
        if (snap.grasped) {
            tracker_.on_grasp(*snap.grasped);
        }
        if (snap.released) {
            tracker_.on_release(snap.released->first, snap.released->second);
        }
        if (snap.pushed) {
            tracker_.on_push(snap.pushed->first, snap.pushed->second);
        }
        for (const LocateNote& note : snap.locates) {
            tracker_.on_locate(note.object, note.seen, note.gripper_has_it);
            if (note.seen) {
                SceneMetadata doc = build_metadata(snap.obs, nullptr, snap.env);
                monitors_.rebase(note.object, doc);
            }
        }
    }

    void handle(const AnomalyEvent& ev, const StepSnapshot& snap, const SceneMetadata& doc) {
        switch (policy_) {
            case HandlingPolicy::NaiveRollback: {
                if (counters_.rollbacks >= config_.rollback_limit) {
                    push_abort(ev, "rollback limit exhausted");
                    return;
                }
                ++counters_.rollbacks;
                TierDecision d;
                d.tier = Tier::T1Predefined;
                d.action = CursorRollback{snap.stage_entry.empty() ? snap.cursor : snap.stage_entry};
                d.latency_cost = config_.rollback_latency_s;
                d.cause = ev;
                latches_.insert(ev.object);
                pending_.push_back(std::move(d));
                return;
            }
            case HandlingPolicy::FullReplan: {
                push_replan(ev, snap);
                return;
            }
            case HandlingPolicy::MAH:
            case HandlingPolicy::LocalOnly:
                break;
        }

        // Escalation chain: matched monitor -> T1; expert rule -> T2;
        // otherwise T3 (or abandonment under local-only).
        if (ev.source == AnomalySource::MonitorTrigger) {
            const MonitorSpec* spec = monitors_.find(ev.monitor_id);
            if (spec) {
                TierDecision d;
                d.tier = Tier::T1Predefined;
                d.action = namespaced_patch(spec->handler);
                d.latency_cost = config_.t1_latency_s;
                d.cause = ev;
                ++counters_.handled_t1;
                latches_.insert(ev.object);
                pending_.push_back(std::move(d));
                return;
            }
        }

        ExpertContext ctx;
        ctx.believed_held = tracker_.believed_held(ev.object);
        ctx.cursor_kind = snap.cursor_kind;
        if (auto it = failed_targets_.find(ev.object); it != failed_targets_.end()) {
            ctx.failed_target = it->second;
        }
        if (std::optional<RecoveryPatch> patch = local_expert_recover(ev, ctx, ++patch_counter_)) {
            TierDecision d;
            d.tier = Tier::T2LocalExpert;
            d.action = std::move(*patch);
            d.latency_cost = config_.t2_latency_s;
            d.cause = ev;
            ++counters_.handled_t2;
            latches_.insert(ev.object);
            pending_.push_back(std::move(d));
            return;
        }

        if (policy_ == HandlingPolicy::LocalOnly) {
            ++counters_.abandoned;
            latches_.insert(ev.object);
            return;
        }
        push_replan(ev, snap);
        (void)doc;
    }

    void push_replan(const AnomalyEvent& ev, const StepSnapshot& snap) {
        ReplanOutcome outcome =
            replan(ev, snap.obs, context_provider_(), *planner_, instruction_, config_.t3_retries);
        TierDecision d;
        d.tier = Tier::T3Replan;
        d.latency_cost = config_.t3_latency_s;
        d.cause = ev;
        if (outcome.doc) {
            d.action = ReplacementTree{std::move(*outcome.doc)};
            ++counters_.handled_t3;
        } else {
            d.action = AbortDecision{outcome.abort_reason};
            ++counters_.aborts;
        }
        latches_.insert(ev.object);
        pending_.push_back(std::move(d));
    }

    void push_abort(const AnomalyEvent& ev, const std::string& reason) {
        TierDecision d;
        d.tier = Tier::T3Replan;
        d.action = AbortDecision{reason};
        d.latency_cost = 0.0;
        d.cause = ev;
        ++counters_.aborts;
        pending_.push_back(std::move(d));
    }

    RecoveryPatch namespaced_patch(const ExecutionTree& handler) {
        std::string prefix = "p" + std::to_string(++patch_counter_) + ".";
        ExecutionTree frag;
        frag.subtask_label = handler.subtask_label;
        frag.tau = handler.tau;
        frag.root = prefix + handler.root;
        for (const auto& [id, node] : handler.nodes) {
            TaskNode copy = node;
            copy.id = prefix + id;
            for (std::string& child : copy.children) {
                child = prefix + child;
            }
            for (BranchArm& arm : copy.arms) {
                arm.target = prefix + arm.target;
            }
            if (!copy.default_target.empty()) {
                copy.default_target = prefix + copy.default_target;
            }
            if (!copy.jump_target.empty()) {
                copy.jump_target = prefix + copy.jump_target;
            }
            frag.nodes.emplace(copy.id, std::move(copy));
        }
        RecoveryPatch patch;
        patch.mode = PatchMode::InsertBefore;
        patch.fragment = std::move(frag);
        return patch;
    }

    // A latch mutes re-detection of the same cause while its recovery runs;
    // it lifts once every condition implicating the object has cleared.
    void release_latches(const SceneMetadata& doc, const SceneState& scene, const Expectation& expectation) {
        std::vector<std::string> release;
        for (const std::string& object : latches_) {
            if (monitors_.condition_active(object, doc)) {
                continue;
            }
            bool deviating = false;
            auto uit = expectation.keypoints.find(object);
            auto sit = scene.keypoints.find(object);
            if (uit != expectation.keypoints.end() && uit->second && sit != scene.keypoints.end()) {
                double dev = sit->second ? distance(*sit->second, *uit->second)
                                         : std::numeric_limits<double>::infinity();
                deviating = dev > tau_;
            }
            if (!deviating) {
                release.push_back(object);
            }
        }
        for (const std::string& object : release) {
            latches_.erase(object);
        }
    }

    HandlingPolicy policy_;
    TierConfig config_;
    Planner* planner_;
    std::string instruction_;
    std::function<PlannerContext()> context_provider_;

    double tau_ = 0.05;
    MonitorRuntime monitors_;
    ExpectationTracker tracker_;
    Observation prev_obs_;
    std::set<std::string> latches_;
    std::map<std::string, AnomalyClass> attribution_;
    std::map<std::string, std::string> failed_targets_;
    std::vector<TierDecision> pending_;
    std::vector<AnomalyEvent> event_log_;
    ControllerCounters counters_;
    int patch_counter_ = 0;
};

}  // namespace tasktree
