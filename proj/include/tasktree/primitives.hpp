#pragma once

// Atom dispatch: maps an atom node's description and parameters onto a
// simulator action or an engine-local parameter operation. Shared by the
// execution engine and the skill test runner.
//
// Reference values resolve at dispatch time from the latest observation:
//   "@apple"     -> observed position of object "apple"
//   "@env.key"   -> engine parameter binding "key"
//   "@loc.apple" -> position bound by the most recent locate of "apple"

#include <map>
#include <optional>
#include <string>
#include <variant>

#include "tasktree/core.hpp"
#include "tasktree/sim.hpp"

namespace tasktree {

using ParamEnv = std::map<std::string, ParamValue>;

struct AtomOutcome {
    std::string primitive;
    std::optional<SimAction> action;  // set when a simulator action was issued
    ActionResult result = ActionResult::success(0.0);
    bool env_op = false;
};

namespace prim_detail {

inline const ParamValue* find_param(const TaskNode& node, const std::string& name) {
    for (const Param& p : node.params) {
        if (p.name == name) {
            return &p.value;
        }
    }
    return nullptr;
}

inline std::optional<ParamValue> resolve_ref(const std::string& ref, const ParamEnv& env, const Observation& obs) {
    if (ref.rfind("@env.", 0) == 0) {
        auto it = env.find(ref.substr(5));
        if (it == env.end()) {
            return std::nullopt;
        }
        return it->second;
    }
    if (ref.rfind("@loc.", 0) == 0) {
        auto it = env.find(ref.substr(1));  // locate binds under "loc.<id>"
        if (it == env.end()) {
            return std::nullopt;
        }
        return it->second;
    }
    const ObsObject* o = obs.find(ref.substr(1));
    if (!o || !o->pos) {
        return std::nullopt;
    }
    return ParamValue{*o->pos};
}

inline std::optional<ParamValue> resolve_value(const ParamValue& v, const ParamEnv& env, const Observation& obs) {
    if (is_reference(v)) {
        return resolve_ref(std::get<std::string>(v), env, obs);
    }
    return v;
}

inline AtomOutcome fail(std::string primitive, std::string reason, std::string offending = {}) {
    AtomOutcome out;
    out.primitive = std::move(primitive);
    out.result = ActionResult::failed(std::move(reason), std::move(offending), 0.0);
    return out;
}

}  // namespace prim_detail

inline bool is_known_primitive(const std::string& name) {
    static const std::set<std::string> names = {"move_to", "grasp", "release", "locate",
                                                "push", "open_container", "close_container",
                                                "press_button", "wait", "env_set", "env_add", "noop"};
    return names.count(name) > 0;
}

// Executes one atom against the simulator. Failures are results, never
// exceptions: the anomaly layer decides what to do with them.
inline AtomOutcome execute_atom(const TaskNode& node, ParamEnv& env, const Observation& obs, SimState& sim,
                                const WorldLimits& lim = {}) {
    using prim_detail::fail;
    using prim_detail::find_param;
    using prim_detail::resolve_value;

    const std::string& name = node.description;
    AtomOutcome out;
    out.primitive = name;

    auto string_param = [&](const char* key) -> std::optional<std::string> {
        const ParamValue* v = find_param(node, key);
        if (!v) {
            return std::nullopt;
        }
        const std::string* s = std::get_if<std::string>(v);
        if (!s) {
            return std::nullopt;
        }
        return *s;
    };
    auto vec_param = [&](const char* key) -> std::optional<Vec3> {
        const ParamValue* v = find_param(node, key);
        if (!v) {
            return std::nullopt;
        }
        std::optional<ParamValue> resolved = resolve_value(*v, env, obs);
        if (!resolved) {
            return std::nullopt;
        }
        const Vec3* p = std::get_if<Vec3>(&*resolved);
        if (!p) {
            return std::nullopt;
        }
        return *p;
    };
    auto num_param = [&](const char* key) -> std::optional<double> {
        const ParamValue* v = find_param(node, key);
        if (!v) {
            return std::nullopt;
        }
        std::optional<ParamValue> resolved = resolve_value(*v, env, obs);
        if (!resolved) {
            return std::nullopt;
        }
        const double* d = std::get_if<double>(&*resolved);
        if (!d) {
            return std::nullopt;
        }
        return *d;
    };
    auto issue = [&](SimAction action) {
        auto [next, result] = apply_action(std::move(sim), action, lim);
        sim = std::move(next);
        out.action = std::move(action);
        out.result = result;
    };

    if (name == "move_to") {
        std::optional<Vec3> target = vec_param("target");
        if (!target) {
            return fail(name, "unresolved-target", string_param("target").value_or(""));
        }
        if (std::optional<Vec3> offset = vec_param("offset")) {
            target = *target + *offset;
        }
        issue(MoveTo{*target});
    } else if (name == "grasp") {
        std::optional<std::string> obj = string_param("obj");
        if (!obj) {
            return fail(name, "missing-param-obj");
        }
        issue(Grasp{*obj});
    } else if (name == "release") {
        issue(Release{});
    } else if (name == "locate") {
        std::optional<std::string> obj = string_param("obj");
        if (!obj) {
            return fail(name, "missing-param-obj");
        }
        issue(Locate{*obj});
        if (out.result.ok) {
            const ObsObject* seen = obs.find(*obj);
            if (seen && seen->pos) {
                env["loc." + *obj] = *seen->pos;
            } else {
                // Visible to ground truth but not yet observed this frame:
                // bind the simulator pose the locate call just confirmed.
                env["loc." + *obj] = sim.objects.at(*obj).pos;
            }
        }
    } else if (name == "push") {
        std::optional<std::string> obj = string_param("obj");
        if (!obj) {
            return fail(name, "missing-param-obj");
        }
        std::optional<Vec3> to = vec_param("to");
        if (!to) {
            std::optional<Vec3> delta = vec_param("delta");
            const ObsObject* seen = obs.find(*obj);
            if (!delta || !seen || !seen->pos) {
                return fail(name, "unresolved-target", *obj);
            }
            to = *seen->pos + *delta;
        }
        issue(Push{*obj, *to});
    } else if (name == "open_container") {
        std::optional<std::string> obj = string_param("obj");
        if (!obj) {
            return fail(name, "missing-param-obj");
        }
        issue(OpenContainer{*obj});
    } else if (name == "close_container") {
        std::optional<std::string> obj = string_param("obj");
        if (!obj) {
            return fail(name, "missing-param-obj");
        }
        issue(CloseContainer{*obj});
    } else if (name == "press_button") {
        std::optional<std::string> obj = string_param("obj");
        if (!obj) {
            return fail(name, "missing-param-obj");
        }
        issue(PressButton{*obj});
    } else if (name == "wait") {
        issue(Wait{num_param("seconds").value_or(0.0)});
    } else if (name == "env_set") {
        std::optional<std::string> key = string_param("key");
        const ParamValue* value = find_param(node, "value");
        if (!key || !value) {
            return fail(name, "missing-param");
        }
        std::optional<ParamValue> resolved = resolve_value(*value, env, obs);
        if (!resolved) {
            return fail(name, "unresolved-ref");
        }
        env[*key] = *resolved;
        out.env_op = true;
    } else if (name == "env_add") {
        std::optional<std::string> key = string_param("key");
        if (!key) {
            return fail(name, "missing-param-key");
        }
        double addend = 0.0;
        if (std::optional<double> v = num_param("value")) {
            addend = *v;
        } else if (std::optional<std::string> from = string_param("from")) {
            auto it = env.find(*from);
            const double* d = it == env.end() ? nullptr : std::get_if<double>(&it->second);
            if (!d) {
                return fail(name, "unresolved-ref", *from);
            }
            addend = *d;
        } else {
            return fail(name, "missing-param-value");
        }
        double base = 0.0;
        if (auto it = env.find(*key); it != env.end()) {
            if (const double* d = std::get_if<double>(&it->second)) {
                base = *d;
            }
        }
        env[*key] = base + addend;
        out.env_op = true;
    } else if (name == "noop") {
        out.env_op = true;
    } else {
        return fail(name, "unknown-primitive");
    }
    return out;
}

}  // namespace tasktree
