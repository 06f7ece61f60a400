#pragma once

// Deterministic tabletop world: objects with poses, a one-slot gripper,
// teleport-with-duration action semantics, ground-truth keypoints behind an
// observation interface, goal checking, and a controlled anomaly injector.
// Everything is a value; (scenario, seed, action sequence) fully determines
// the final state and clock.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "tasktree/core.hpp"

namespace tasktree {

// Portable deterministic draws: mt19937_64 with explicit mapping so results
// do not depend on the standard library's distribution implementations.
class Rng {
public:
    Rng() : engine_(0) {}
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double uniform(double lo, double hi) {
        double u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
        return lo + u * (hi - lo);
    }
    int uniform_int(int lo, int hi) {  // inclusive
        return lo + static_cast<int>(engine_() % static_cast<std::uint64_t>(hi - lo + 1));
    }
    Vec3 planar_offset(double norm) {
        double angle = uniform(0.0, 6.283185307179586);
        return {norm * std::cos(angle), norm * std::sin(angle), 0.0};
    }
    std::uint64_t raw() { return engine_(); }

private:
    std::mt19937_64 engine_;
};

struct WorldLimits {
    double table_z = 0.02;          // resting height of an object center
    double object_height = 0.04;    // stacking increment
    double grasp_radius = 0.03;
    double reach_radius = 0.04;     // open/close/press reach
    double obstruction_radius = 0.03;
    double stack_snap_xy = 0.022;   // release lands on an object this close in xy
    double pour_radius = 0.05;
    double gripper_speed = 0.5;     // m/s
    double motion_time = 0.5;       // fixed cost of grasp/release/push/open/close/press
    double x_min = 0.2, x_max = 0.7;
    double y_min = -0.4, y_max = 0.4;
};

struct ObjectState {
    Vec3 pos;
    bool held = false;
    double occluded_until = -1.0;  // occluded while clock < occluded_until
    std::optional<bool> container_open;
    std::set<std::string> flags;  // free-form tags, e.g. "class:block"

    bool occluded(double clock) const { return clock < occluded_until; }
};

struct GripperState {
    Vec3 pos{0.35, 0.0, 0.25};
    std::optional<std::string> holding;
};

// Exogenous sensor bias active on one object for a bounded interval. The
// offset flips sign on every observation so consecutive readings of a static
// object visibly disagree.
struct SensorNoise {
    std::string target;
    double sigma = 0.01;
    double until = 0.0;
};

struct SimState {
    std::map<std::string, ObjectState> objects;
    GripperState gripper;
    double clock = 0.0;
    std::uint64_t rng_seed = 0;
    Rng rng;
    std::optional<SensorNoise> noise;
    std::uint64_t observe_count = 0;

    const ObjectState* find(const std::string& id) const {
        auto it = objects.find(id);
        return it == objects.end() ? nullptr : &it->second;
    }
};

// --- actions -----------------------------------------------------------

struct MoveTo { Vec3 target; };
struct Grasp { std::string obj; };
struct Release {};
struct Locate { std::string obj; };
struct Push { std::string obj; Vec3 to; };
struct OpenContainer { std::string obj; };
struct CloseContainer { std::string obj; };
struct PressButton { std::string obj; };
struct Wait { double seconds = 0.0; };

using SimAction =
    std::variant<MoveTo, Grasp, Release, Locate, Push, OpenContainer, CloseContainer, PressButton, Wait>;

inline std::string action_name(const SimAction& a) {
    struct Visitor {
        std::string operator()(const MoveTo&) const { return "move_to"; }
        std::string operator()(const Grasp&) const { return "grasp"; }
        std::string operator()(const Release&) const { return "release"; }
        std::string operator()(const Locate&) const { return "locate"; }
        std::string operator()(const Push&) const { return "push"; }
        std::string operator()(const OpenContainer&) const { return "open_container"; }
        std::string operator()(const CloseContainer&) const { return "close_container"; }
        std::string operator()(const PressButton&) const { return "press_button"; }
        std::string operator()(const Wait&) const { return "wait"; }
    };
    return std::visit(Visitor{}, a);
}

struct ActionResult {
    bool ok = true;
    std::string reason;          // failure reason, empty on success
    std::string offending;       // object implicated in the failure
    double duration = 0.0;

    static ActionResult success(double duration) { return {true, "", "", duration}; }
    static ActionResult failed(std::string reason, std::string offending, double duration) {
        return {false, std::move(reason), std::move(offending), duration};
    }
};

// --- observation --------------------------------------------------------

struct ObsObject {
    std::string id;
    std::optional<Vec3> pos;  // nullopt while occluded
    bool occluded = false;
    bool held = false;
    std::set<std::string> flags;
};

struct Observation {
    double clock = 0.0;
    std::vector<ObsObject> objects;  // sorted by id
    Vec3 gripper_pos;
    std::optional<std::string> holding;

    const ObsObject* find(const std::string& id) const {
        for (const ObsObject& o : objects) {
            if (o.id == id) {
                return &o;
            }
        }
        return nullptr;
    }
};

// --- anomaly taxonomy ----------------------------------------------------

enum class AnomalyClass { Predictable, Recoverable, Complex };

enum class AnomalyKind {
    ObjectDisplacement,
    SensorNoise,
    MinorPoseDeviation,
    ExpectedCollision,
    TemporaryOcclusion,
    GripperSlip,
    PartialObjectDrop,
    MidTaskObstruction,
    TopologyChange,
    CrossTaskConflict,
};

inline AnomalyClass kind_class(AnomalyKind k) {
    switch (k) {
        case AnomalyKind::ObjectDisplacement:
        case AnomalyKind::SensorNoise:
        case AnomalyKind::MinorPoseDeviation:
        case AnomalyKind::ExpectedCollision:
        case AnomalyKind::TemporaryOcclusion:
            return AnomalyClass::Predictable;
        case AnomalyKind::GripperSlip:
        case AnomalyKind::PartialObjectDrop:
        case AnomalyKind::MidTaskObstruction:
            return AnomalyClass::Recoverable;
        case AnomalyKind::TopologyChange:
        case AnomalyKind::CrossTaskConflict:
            return AnomalyClass::Complex;
    }
    return AnomalyClass::Complex;
}

inline std::string anomaly_class_name(AnomalyClass c) {
    switch (c) {
        case AnomalyClass::Predictable: return "predictable";
        case AnomalyClass::Recoverable: return "recoverable";
        case AnomalyClass::Complex: return "complex";
    }
    return "?";
}

inline std::string anomaly_kind_name(AnomalyKind k) {
    switch (k) {
        case AnomalyKind::ObjectDisplacement: return "object-displacement";
        case AnomalyKind::SensorNoise: return "sensor-noise";
        case AnomalyKind::MinorPoseDeviation: return "minor-pose-deviation";
        case AnomalyKind::ExpectedCollision: return "expected-collision";
        case AnomalyKind::TemporaryOcclusion: return "temporary-occlusion";
        case AnomalyKind::GripperSlip: return "gripper-slip";
        case AnomalyKind::PartialObjectDrop: return "partial-object-drop";
        case AnomalyKind::MidTaskObstruction: return "mid-task-obstruction";
        case AnomalyKind::TopologyChange: return "topology-change";
        case AnomalyKind::CrossTaskConflict: return "cross-task-conflict";
    }
    return "?";
}

inline std::optional<AnomalyKind> anomaly_kind_from_name(const std::string& name) {
    static const std::pair<const char*, AnomalyKind> table[] = {
        {"object-displacement", AnomalyKind::ObjectDisplacement},
        {"sensor-noise", AnomalyKind::SensorNoise},
        {"minor-pose-deviation", AnomalyKind::MinorPoseDeviation},
        {"expected-collision", AnomalyKind::ExpectedCollision},
        {"temporary-occlusion", AnomalyKind::TemporaryOcclusion},
        {"gripper-slip", AnomalyKind::GripperSlip},
        {"partial-object-drop", AnomalyKind::PartialObjectDrop},
        {"mid-task-obstruction", AnomalyKind::MidTaskObstruction},
        {"topology-change", AnomalyKind::TopologyChange},
        {"cross-task-conflict", AnomalyKind::CrossTaskConflict},
    };
    for (const auto& [n, k] : table) {
        if (name == n) {
            return k;
        }
    }
    return std::nullopt;
}

struct AnomalyInjection {
    double at = 0.0;
    AnomalyKind kind = AnomalyKind::ObjectDisplacement;
    std::string target;          // perturbed object (or slipped-from object)
    double magnitude = 0.0;      // kind-specific: offset norm or sigma; 0 = draw from range
    double duration = 0.0;       // occlusion / noise window length

    AnomalyClass cls() const { return kind_class(kind); }
};

// --- goals ---------------------------------------------------------------

// Selector: "id:blockA" matches one object, "class:block" matches any object
// flagged "class:block". Class selectors keep goals decidable after
// topology-change recoveries swap in replacement objects.
struct ObjectSelector {
    enum class By { Id, Class } by = By::Id;
    std::string key;

    static ObjectSelector parse(const std::string& text) {
        if (text.rfind("class:", 0) == 0) {
            return {By::Class, text.substr(6)};
        }
        if (text.rfind("id:", 0) == 0) {
            return {By::Id, text.substr(3)};
        }
        return {By::Id, text};
    }
    std::string str() const { return (by == By::Class ? "class:" : "id:") + key; }

    std::vector<const ObjectState*> matches(const SimState& s, std::vector<std::string>* ids = nullptr) const {
        std::vector<const ObjectState*> out;
        for (const auto& [id, obj] : s.objects) {
            bool hit = by == By::Id ? id == key : obj.flags.count("class:" + key) > 0;
            if (hit) {
                out.push_back(&obj);
                if (ids) {
                    ids->push_back(id);
                }
            }
        }
        return out;
    }
};

struct GoalPred {
    enum class Kind { Stacked, FlagTrue, FlagFalse, Near } kind = Kind::Near;
    ObjectSelector a;       // subject
    ObjectSelector b;       // base (Stacked only)
    Vec3 pos;               // Near only
    double tol = 0.02;
};

struct ObjectSpec {
    std::string id;
    std::optional<Vec3> pos;              // fixed placement
    std::optional<std::pair<Vec3, Vec3>> region;  // randomized placement box
    std::set<std::string> flags;
    bool open = false;
    bool has_container_state = false;
};

struct Scenario {
    std::string name;
    std::uint64_t seed = 0;
    std::vector<ObjectSpec> objects;
    std::vector<GoalPred> goal;
    std::vector<AnomalyInjection> injections;
    WorldLimits limits;

    std::set<std::string> keypoints() const {
        std::set<std::string> out;
        for (const ObjectSpec& o : objects) {
            out.insert(o.id);
        }
        return out;
    }
};

// --- scenario json -------------------------------------------------------

inline nlohmann::json vec3_to_json(const Vec3& v) { return nlohmann::json::array({v.x, v.y, v.z}); }

inline Vec3 vec3_from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.size() != 3) {
        throw std::runtime_error("scenario: expected [x, y, z]");
    }
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline nlohmann::json scenario_to_json(const Scenario& sc) {
    nlohmann::json j;
    j["name"] = sc.name;
    j["seed"] = sc.seed;
    j["objects"] = nlohmann::json::array();
    for (const ObjectSpec& o : sc.objects) {
        nlohmann::json jo;
        jo["id"] = o.id;
        if (o.pos) {
            jo["pos"] = vec3_to_json(*o.pos);
        }
        if (o.region) {
            jo["region"] = {{"min", vec3_to_json(o.region->first)}, {"max", vec3_to_json(o.region->second)}};
        }
        nlohmann::json flags = nlohmann::json::array();
        for (const std::string& f : o.flags) {
            flags.push_back(f);
        }
        if (o.has_container_state) {
            flags.push_back(o.open ? "open" : "closed");
        }
        jo["flags"] = flags;
        j["objects"].push_back(jo);
    }
    j["goal"] = nlohmann::json::array();
    for (const GoalPred& g : sc.goal) {
        nlohmann::json jg;
        switch (g.kind) {
            case GoalPred::Kind::Stacked:
                jg["kind"] = "stacked";
                jg["top"] = g.a.str();
                jg["base"] = g.b.str();
                jg["xy_tol"] = g.tol;
                break;
            case GoalPred::Kind::FlagTrue:
                jg["kind"] = "state-open";
                jg["obj"] = g.a.str();
                break;
            case GoalPred::Kind::FlagFalse:
                jg["kind"] = "state-closed";
                jg["obj"] = g.a.str();
                break;
            case GoalPred::Kind::Near:
                jg["kind"] = "near";
                jg["obj"] = g.a.str();
                jg["pos"] = vec3_to_json(g.pos);
                jg["tol"] = g.tol;
                break;
        }
        j["goal"].push_back(jg);
    }
    j["injections"] = nlohmann::json::array();
    for (const AnomalyInjection& inj : sc.injections) {
        nlohmann::json ji;
        ji["at"] = inj.at;
        ji["class"] = anomaly_class_name(inj.cls());
        ji["kind"] = anomaly_kind_name(inj.kind);
        ji["target"] = inj.target;
        if (inj.magnitude != 0.0) {
            ji["magnitude"] = inj.magnitude;
        }
        if (inj.duration != 0.0) {
            ji["duration"] = inj.duration;
        }
        j["injections"].push_back(ji);
    }
    return j;
}

inline Scenario scenario_from_json(const nlohmann::json& j) {
    Scenario sc;
    sc.name = j.at("name").get<std::string>();
    sc.seed = j.value("seed", 0ull);
    for (const nlohmann::json& jo : j.at("objects")) {
        ObjectSpec o;
        o.id = jo.at("id").get<std::string>();
        if (jo.contains("pos")) {
            o.pos = vec3_from_json(jo.at("pos"));
        }
        if (jo.contains("region")) {
            o.region = {vec3_from_json(jo.at("region").at("min")), vec3_from_json(jo.at("region").at("max"))};
        }
        if (!o.pos && !o.region) {
            throw std::runtime_error("scenario: object '" + o.id + "' needs pos or region");
        }
        for (const nlohmann::json& jf : jo.value("flags", nlohmann::json::array())) {
            std::string f = jf.get<std::string>();
            if (f == "open") {
                o.has_container_state = true;
                o.open = true;
            } else if (f == "closed") {
                o.has_container_state = true;
                o.open = false;
            } else {
                o.flags.insert(f);
            }
        }
        sc.objects.push_back(std::move(o));
    }
    for (const nlohmann::json& jg : j.value("goal", nlohmann::json::array())) {
        GoalPred g;
        std::string kind = jg.at("kind").get<std::string>();
        if (kind == "stacked") {
            g.kind = GoalPred::Kind::Stacked;
            g.a = ObjectSelector::parse(jg.at("top").get<std::string>());
            g.b = ObjectSelector::parse(jg.at("base").get<std::string>());
            g.tol = jg.value("xy_tol", 0.02);
        } else if (kind == "state-open") {
            g.kind = GoalPred::Kind::FlagTrue;
            g.a = ObjectSelector::parse(jg.at("obj").get<std::string>());
        } else if (kind == "state-closed") {
            g.kind = GoalPred::Kind::FlagFalse;
            g.a = ObjectSelector::parse(jg.at("obj").get<std::string>());
        } else if (kind == "near") {
            g.kind = GoalPred::Kind::Near;
            g.a = ObjectSelector::parse(jg.at("obj").get<std::string>());
            g.pos = vec3_from_json(jg.at("pos"));
            g.tol = jg.value("tol", 0.02);
        } else {
            throw std::runtime_error("scenario: unknown goal kind '" + kind + "'");
        }
        sc.goal.push_back(g);
    }
    for (const nlohmann::json& ji : j.value("injections", nlohmann::json::array())) {
        AnomalyInjection inj;
        inj.at = ji.at("at").get<double>();
        std::string kind = ji.at("kind").get<std::string>();
        std::optional<AnomalyKind> k = anomaly_kind_from_name(kind);
        if (!k) {
            throw std::runtime_error("scenario: unknown injection kind '" + kind + "'");
        }
        inj.kind = *k;
        if (ji.contains("class") && ji.at("class").get<std::string>() != anomaly_class_name(inj.cls())) {
            throw std::runtime_error("scenario: injection class does not match its kind's class");
        }
        inj.target = ji.value("target", std::string{});
        inj.magnitude = ji.value("magnitude", 0.0);
        inj.duration = ji.value("duration", 0.0);
        sc.injections.push_back(inj);
    }
    return sc;
}

// --- core operations ------------------------------------------------------

inline SimState reset(const Scenario& sc) {
    SimState s;
    s.rng_seed = sc.seed;
    s.rng = Rng(sc.seed);
    for (const ObjectSpec& spec : sc.objects) {
        ObjectState obj;
        if (spec.pos) {
            obj.pos = *spec.pos;
        } else {
            const auto& [lo, hi] = *spec.region;
            obj.pos = {s.rng.uniform(lo.x, hi.x), s.rng.uniform(lo.y, hi.y), s.rng.uniform(lo.z, hi.z)};
        }
        obj.flags = spec.flags;
        if (spec.has_container_state) {
            obj.container_open = spec.open;
        }
        s.objects.emplace(spec.id, std::move(obj));
    }
    return s;
}

namespace sim_detail {

inline double move_duration(const Vec3& from, const Vec3& to, const WorldLimits& lim) {
    return distance(from, to) / lim.gripper_speed;
}

inline const std::string* obstructor(const SimState& s, const std::string& target, const WorldLimits& lim) {
    const ObjectState& t = s.objects.at(target);
    for (const auto& [id, obj] : s.objects) {
        if (id == target || obj.held) {
            continue;
        }
        if (distance(obj.pos, t.pos) < lim.obstruction_radius) {
            return &id;
        }
    }
    return nullptr;
}

}  // namespace sim_detail

inline std::pair<SimState, ActionResult> apply_action(SimState s, const SimAction& action,
                                                      const WorldLimits& lim = {}) {
    ActionResult result = ActionResult::success(0.0);
    struct Visitor {
        SimState& s;
        const WorldLimits& lim;
        ActionResult operator()(const MoveTo& a) {
            double d = sim_detail::move_duration(s.gripper.pos, a.target, lim);
            s.gripper.pos = a.target;
            if (s.gripper.holding) {
                s.objects.at(*s.gripper.holding).pos = a.target;
            }
            return ActionResult::success(d);
        }
        ActionResult operator()(const Grasp& a) {
            auto it = s.objects.find(a.obj);
            if (it == s.objects.end()) {
                return ActionResult::failed("unknown-object", a.obj, lim.motion_time);
            }
            if (s.gripper.holding && *s.gripper.holding == a.obj) {
                return ActionResult::success(lim.motion_time);  // idempotent re-grasp
            }
            if (s.gripper.holding) {
                return ActionResult::failed("gripper-full", *s.gripper.holding, lim.motion_time);
            }
            if (it->second.occluded(s.clock)) {
                return ActionResult::failed("occluded", a.obj, lim.motion_time);
            }
            if (distance(s.gripper.pos, it->second.pos) > lim.grasp_radius) {
                return ActionResult::failed("out-of-reach", a.obj, lim.motion_time);
            }
            if (const std::string* blocker = sim_detail::obstructor(s, a.obj, lim)) {
                return ActionResult::failed("obstructed", *blocker, lim.motion_time);
            }
            it->second.held = true;
            it->second.pos = s.gripper.pos;
            s.gripper.holding = a.obj;
            return ActionResult::success(lim.motion_time);
        }
        ActionResult operator()(const Release&) {
            if (!s.gripper.holding) {
                return ActionResult::failed("empty-gripper", "", lim.motion_time);
            }
            ObjectState& held = s.objects.at(*s.gripper.holding);
            double land_z = lim.table_z;
            for (const auto& [id, obj] : s.objects) {
                if (id == *s.gripper.holding || obj.held) {
                    continue;
                }
                if (distance_xy(obj.pos, s.gripper.pos) <= lim.stack_snap_xy) {
                    land_z = std::max(land_z, obj.pos.z + lim.object_height);
                }
            }
            held.pos = {s.gripper.pos.x, s.gripper.pos.y, land_z};
            held.held = false;
            s.gripper.holding.reset();
            return ActionResult::success(lim.motion_time);
        }
        ActionResult operator()(const Locate& a) {
            auto it = s.objects.find(a.obj);
            if (it == s.objects.end()) {
                return ActionResult::failed("unknown-object", a.obj, 0.0);
            }
            if (it->second.occluded(s.clock)) {
                return ActionResult::failed("occluded", a.obj, 0.0);
            }
            return ActionResult::success(0.0);  // perception primitives cost no sim time
        }
        ActionResult operator()(const Push& a) {
            auto it = s.objects.find(a.obj);
            if (it == s.objects.end()) {
                return ActionResult::failed("unknown-object", a.obj, lim.motion_time);
            }
            if (it->second.held) {
                return ActionResult::failed("held-object", a.obj, lim.motion_time);
            }
            it->second.pos = a.to;
            return ActionResult::success(lim.motion_time);
        }
        ActionResult operator()(const OpenContainer& a) { return toggle(a.obj, true); }
        ActionResult operator()(const CloseContainer& a) { return toggle(a.obj, false); }
        ActionResult operator()(const PressButton& a) {
            auto it = s.objects.find(a.obj);
            if (it == s.objects.end()) {
                return ActionResult::failed("unknown-object", a.obj, lim.motion_time);
            }
            if (distance(s.gripper.pos, it->second.pos) > lim.reach_radius) {
                return ActionResult::failed("out-of-reach", a.obj, lim.motion_time);
            }
            it->second.container_open = true;  // pressed latch
            return ActionResult::success(lim.motion_time);
        }
        ActionResult operator()(const Wait& a) { return ActionResult::success(std::max(0.0, a.seconds)); }

        ActionResult toggle(const std::string& id, bool open) {
            auto it = s.objects.find(id);
            if (it == s.objects.end()) {
                return ActionResult::failed("unknown-object", id, lim.motion_time);
            }
            bool held = s.gripper.holding && *s.gripper.holding == id;
            if (!held && distance(s.gripper.pos, it->second.pos) > lim.reach_radius) {
                return ActionResult::failed("out-of-reach", id, lim.motion_time);
            }
            it->second.container_open = open;
            // Opening a held container above a vessel pours into it.
            if (open && held) {
                for (auto& [vid, vobj] : s.objects) {
                    if (vid == id || !vobj.flags.count("vessel")) {
                        continue;
                    }
                    if (distance_xy(s.gripper.pos, vobj.pos) <= lim.pour_radius) {
                        vobj.container_open = true;
                    }
                }
            }
            return ActionResult::success(lim.motion_time);
        }
    };
    result = std::visit(Visitor{s, lim}, action);
    s.clock += result.duration;
    return {std::move(s), result};
}

// Observation with sensor-noise and occlusion effects applied. Noise flips
// the offset direction on each consecutive observation, so frame-to-frame
// jitter on the affected object is at least twice the draw's magnitude.
inline Observation observe(SimState& s) {
    Observation obs;
    obs.clock = s.clock;
    obs.gripper_pos = s.gripper.pos;
    obs.holding = s.gripper.holding;
    ++s.observe_count;
    for (const auto& [id, obj] : s.objects) {
        ObsObject o;
        o.id = id;
        o.held = obj.held;
        o.flags = obj.flags;
        if (obj.occluded(s.clock)) {
            o.occluded = true;
        } else {
            Vec3 pos = obj.pos;
            if (s.noise && s.noise->target == id && s.clock < s.noise->until) {
                double mag = s.rng.uniform(s.noise->sigma, 3.0 * s.noise->sigma);
                double sign = (s.observe_count % 2 == 0) ? 1.0 : -1.0;
                pos = pos + Vec3{sign * mag, 0.0, 0.0};
            }
            o.pos = pos;
        }
        obs.objects.push_back(std::move(o));
    }
    return obs;
}

namespace sim_detail {

// Deterministic clear-spot sampling: rejection draws inside the workspace,
// falling back to a coarse grid scan when the draws keep landing near
// existing objects.
inline Vec3 sample_clear_spot(SimState& s, const WorldLimits& lim, double min_clearance,
                              const std::optional<Vec3>& near_pos = std::nullopt, double near_lo = 0.0,
                              double near_hi = 0.0, const std::string& ignore = {}) {
    auto clear = [&](const Vec3& p) {
        for (const auto& [id, obj] : s.objects) {
            if (id == ignore) {
                continue;
            }
            if (!obj.held && distance_xy(obj.pos, p) < min_clearance) {
                return false;
            }
        }
        return true;
    };
    for (int attempt = 0; attempt < 64; ++attempt) {
        Vec3 p;
        if (near_pos) {
            double norm = s.rng.uniform(near_lo, near_hi);
            p = *near_pos + s.rng.planar_offset(norm);
            p.z = lim.table_z;
        } else {
            p = {s.rng.uniform(lim.x_min, lim.x_max), s.rng.uniform(lim.y_min, lim.y_max), lim.table_z};
        }
        if (p.x < lim.x_min || p.x > lim.x_max || p.y < lim.y_min || p.y > lim.y_max) {
            continue;
        }
        if (clear(p)) {
            return p;
        }
    }
    for (double x = lim.x_min; x <= lim.x_max; x += 0.05) {
        for (double y = lim.y_min; y <= lim.y_max; y += 0.05) {
            Vec3 p{x, y, lim.table_z};
            if (clear(p)) {
                return p;
            }
        }
    }
    return {lim.x_max, lim.y_max, lim.table_z};
}

}  // namespace sim_detail

// Kind-specific perturbation. Draws come from the scenario rng stream, so a
// given (scenario, seed) always perturbs identically.
inline SimState inject(SimState s, const AnomalyInjection& inj, const WorldLimits& lim = {}) {
    auto require_target = [&]() -> ObjectState& {
        auto it = s.objects.find(inj.target);
        if (it == s.objects.end()) {
            throw std::runtime_error("inject: unknown object '" + inj.target + "'");
        }
        return it->second;
    };
    switch (inj.kind) {
        case AnomalyKind::ObjectDisplacement: {
            ObjectState& obj = require_target();
            double norm = inj.magnitude > 0 ? inj.magnitude : s.rng.uniform(0.05, 0.15);
            Vec3 spot = sim_detail::sample_clear_spot(s, lim, 0.12, obj.pos, norm, norm, inj.target);
            spot.z = obj.pos.z;
            obj.pos = spot;
            break;
        }
        case AnomalyKind::MinorPoseDeviation: {
            ObjectState& obj = require_target();
            double norm = inj.magnitude > 0 ? inj.magnitude : s.rng.uniform(0.06, 0.1);
            Vec3 spot = sim_detail::sample_clear_spot(s, lim, 0.12, obj.pos, norm, norm, inj.target);
            spot.z = obj.pos.z;
            obj.pos = spot;
            break;
        }
        case AnomalyKind::SensorNoise: {
            require_target();
            double sigma = inj.magnitude > 0 ? inj.magnitude : 0.01;
            double duration = inj.duration > 0 ? inj.duration : 2.0;
            s.noise = SensorNoise{inj.target, sigma, s.clock + duration};
            break;
        }
        case AnomalyKind::ExpectedCollision: {
            ObjectState& obj = require_target();
            double norm = s.rng.uniform(0.01, 0.04);
            Vec3 p = s.gripper.pos + s.rng.planar_offset(norm);
            p.z = lim.table_z;
            obj.pos = p;
            break;
        }
        case AnomalyKind::TemporaryOcclusion: {
            ObjectState& obj = require_target();
            double duration = inj.duration > 0 ? inj.duration : s.rng.uniform(2.0, 3.0);
            obj.occluded_until = s.clock + duration;
            break;
        }
        case AnomalyKind::GripperSlip: {
            ObjectState& obj = require_target();
            obj.held = false;
            double norm = s.rng.uniform(0.0, 0.03);
            Vec3 p = s.gripper.pos + s.rng.planar_offset(norm);
            obj.pos = {p.x, p.y, lim.table_z};
            if (s.gripper.holding && *s.gripper.holding == inj.target) {
                s.gripper.holding.reset();
            }
            break;
        }
        case AnomalyKind::PartialObjectDrop: {
            ObjectState& obj = require_target();
            obj.held = false;
            double norm = s.rng.uniform(0.02, 0.04);
            Vec3 p = s.gripper.pos + s.rng.planar_offset(norm);
            obj.pos = {p.x, p.y, lim.table_z};
            if (s.gripper.holding && *s.gripper.holding == inj.target) {
                s.gripper.holding.reset();
            }
            break;
        }
        case AnomalyKind::MidTaskObstruction: {
            ObjectState& obj = require_target();
            double norm = s.rng.uniform(0.015, 0.025);
            ObjectState intruder;
            Vec3 p = obj.pos + s.rng.planar_offset(norm);
            intruder.pos = {p.x, p.y, lim.table_z};
            intruder.flags = {"intruder"};
            s.objects.emplace("intruder", std::move(intruder));
            break;
        }
        case AnomalyKind::TopologyChange: {
            // The tracked object vanishes and a duplicate appears elsewhere
            // ("the bottle count changed from one to two" flavor: the world
            // the plan described no longer exists).
            ObjectState obj = require_target();
            s.objects.erase(inj.target);
            Vec3 spot = sim_detail::sample_clear_spot(s, lim, 0.12);
            obj.pos = spot;
            obj.held = false;
            obj.flags.insert("duplicate");
            s.objects.emplace(inj.target + "2", std::move(obj));
            break;
        }
        case AnomalyKind::CrossTaskConflict: {
            ObjectState& obj = require_target();
            double norm = inj.magnitude > 0 ? inj.magnitude : s.rng.uniform(0.2, 0.3);
            Vec3 spot = sim_detail::sample_clear_spot(s, lim, 0.12, obj.pos, norm, norm, inj.target);
            spot.z = obj.pos.z;
            obj.pos = spot;
            break;
        }
    }
    return s;
}

// An injection fires at the first moment it is both due and meaningful.
inline bool injection_applicable(const SimState& s, const AnomalyInjection& inj) {
    const ObjectState* target = s.find(inj.target);
    switch (inj.kind) {
        case AnomalyKind::GripperSlip:
        case AnomalyKind::PartialObjectDrop:
            return target && target->held;
        case AnomalyKind::ObjectDisplacement:
        case AnomalyKind::MinorPoseDeviation:
        case AnomalyKind::TemporaryOcclusion:
        case AnomalyKind::MidTaskObstruction:
        case AnomalyKind::TopologyChange:
            return target && !target->held;
        case AnomalyKind::SensorNoise:
        case AnomalyKind::CrossTaskConflict:
            return target != nullptr;
        case AnomalyKind::ExpectedCollision:
            return target != nullptr && !target->held;
    }
    return false;
}

inline bool check_goal(const SimState& s, const Scenario& sc) {
    for (const GoalPred& g : sc.goal) {
        switch (g.kind) {
            case GoalPred::Kind::Stacked: {
                bool ok = false;
                for (const ObjectState* top : g.a.matches(s)) {
                    for (const ObjectState* base : g.b.matches(s)) {
                        if (top == base) {
                            continue;
                        }
                        if (distance_xy(top->pos, base->pos) <= g.tol && top->pos.z > base->pos.z) {
                            ok = true;
                        }
                    }
                }
                if (!ok) {
                    return false;
                }
                break;
            }
            case GoalPred::Kind::FlagTrue:
            case GoalPred::Kind::FlagFalse: {
                bool want = g.kind == GoalPred::Kind::FlagTrue;
                bool ok = false;
                for (const ObjectState* obj : g.a.matches(s)) {
                    if (obj->container_open && *obj->container_open == want) {
                        ok = true;
                    }
                }
                if (!ok) {
                    return false;
                }
                break;
            }
            case GoalPred::Kind::Near: {
                bool ok = false;
                for (const ObjectState* obj : g.a.matches(s)) {
                    if (distance(obj->pos, g.pos) <= g.tol) {
                        ok = true;
                    }
                }
                if (!ok) {
                    return false;
                }
                break;
            }
        }
    }
    return true;
}

// Canonical dump of the observable final state, used by replay comparison.
inline nlohmann::json sim_state_to_json(const SimState& s) {
    nlohmann::json j;
    j["clock"] = s.clock;
    j["gripper"] = {{"pos", vec3_to_json(s.gripper.pos)},
                    {"holding", s.gripper.holding ? nlohmann::json(*s.gripper.holding) : nlohmann::json()}};
    j["objects"] = nlohmann::json::object();
    for (const auto& [id, obj] : s.objects) {
        nlohmann::json jo;
        jo["pos"] = vec3_to_json(obj.pos);
        jo["held"] = obj.held;
        jo["occluded"] = obj.occluded(s.clock);
        if (obj.container_open) {
            jo["open"] = *obj.container_open;
        }
        j["objects"][id] = jo;
    }
    return j;
}

}  // namespace tasktree
