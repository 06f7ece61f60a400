#pragma once

// Scene metadata: the low-dimensional world view that monitors, branch
// predicates and the anomaly router read. Built from observations (never
// ground truth), augmented with engine parameter bindings under "env.*" and
// derived per-object signals (frame-to-frame jitter, distance to gripper).

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tasktree/core.hpp"
#include "tasktree/sim.hpp"

namespace tasktree {

using SceneMetadata = nlohmann::json;

inline nlohmann::json param_value_to_json(const ParamValue& v) {
    if (const double* d = std::get_if<double>(&v)) {
        return *d;
    }
    if (const Vec3* p = std::get_if<Vec3>(&v)) {
        return vec3_to_json(*p);
    }
    if (const bool* b = std::get_if<bool>(&v)) {
        return *b;
    }
    return std::get<std::string>(v);
}

inline SceneMetadata build_metadata(const Observation& obs, const Observation* prev,
                                    const std::map<std::string, ParamValue>& env) {
    SceneMetadata doc;
    doc["clock"] = obs.clock;
    doc["object_count"] = static_cast<int>(obs.objects.size());
    doc["gripper"] = {{"pos", vec3_to_json(obs.gripper_pos)},
                      {"holding", obs.holding ? nlohmann::json(*obs.holding) : nlohmann::json()}};
    nlohmann::json objects = nlohmann::json::object();
    for (const ObsObject& o : obs.objects) {
        nlohmann::json jo;
        jo["occluded"] = o.occluded;
        jo["held"] = o.held;
        if (o.pos) {
            jo["pos"] = vec3_to_json(*o.pos);
            jo["dist_to_gripper"] = distance(*o.pos, obs.gripper_pos);
            if (prev && !o.held) {
                const ObsObject* was = prev->find(o.id);
                if (was && was->pos && !was->held) {
                    jo["jitter"] = distance(*o.pos, *was->pos);
                }
            }
        }
        objects[o.id] = std::move(jo);
    }
    doc["obj"] = std::move(objects);
    nlohmann::json jenv = nlohmann::json::object();
    for (const auto& [key, value] : env) {
        jenv[key] = param_value_to_json(value);
    }
    doc["env"] = std::move(jenv);
    return doc;
}

// Dotted-path lookup; "pos.x" style component access maps onto the vec3
// arrays. Returns nullptr when any segment is missing.
inline const nlohmann::json* metadata_at(const SceneMetadata& doc, std::string_view path) {
    const nlohmann::json* cur = &doc;
    std::size_t start = 0;
    while (start <= path.size()) {
        std::size_t dot = path.find('.', start);
        std::string_view seg = dot == std::string_view::npos ? path.substr(start) : path.substr(start, dot - start);
        if (seg.empty()) {
            return nullptr;
        }
        if (cur->is_array() && cur->size() == 3 && seg.size() == 1 &&
            (seg[0] == 'x' || seg[0] == 'y' || seg[0] == 'z')) {
            cur = &(*cur)[static_cast<std::size_t>(seg[0] - 'x')];
        } else if (cur->is_object()) {
            auto it = cur->find(std::string(seg));
            if (it == cur->end()) {
                return nullptr;
            }
            cur = &*it;
        } else {
            return nullptr;
        }
        if (dot == std::string_view::npos) {
            break;
        }
        start = dot + 1;
    }
    return cur->is_null() ? nullptr : cur;
}

namespace metadata_detail {

inline bool json_equals_value(const nlohmann::json& j, const ParamValue& v) {
    if (const double* d = std::get_if<double>(&v)) {
        return j.is_number() && j.get<double>() == *d;
    }
    if (const bool* b = std::get_if<bool>(&v)) {
        return j.is_boolean() && j.get<bool>() == *b;
    }
    if (const std::string* s = std::get_if<std::string>(&v)) {
        return j.is_string() && j.get<std::string>() == *s;
    }
    const Vec3& p = std::get<Vec3>(v);
    return j.is_array() && j.size() == 3 && j[0].is_number() && vec3_from_json(j) == p;
}

}  // namespace metadata_detail

// Total predicate evaluation: type mismatches and missing paths make the
// comparison false rather than raising. moved-beyond is stateful and lives in
// the monitor runtime; outside it the predicate never holds.
inline bool eval_predicate(const Predicate& pred, const SceneMetadata& doc) {
    const nlohmann::json* at = metadata_at(doc, pred.path);
    switch (pred.op) {
        case PredOp::Exists:
            return at != nullptr;
        case PredOp::Absent:
            return at == nullptr;
        case PredOp::MovedBeyond:
            return false;
        case PredOp::Eq:
            return at && pred.rhs && metadata_detail::json_equals_value(*at, *pred.rhs);
        case PredOp::Ne:
            return at && pred.rhs && !metadata_detail::json_equals_value(*at, *pred.rhs);
        case PredOp::Lt:
        case PredOp::Le:
        case PredOp::Ge:
        case PredOp::Gt: {
            if (!at || !at->is_number() || !pred.rhs) {
                return false;
            }
            const double* rhs = std::get_if<double>(&*pred.rhs);
            if (!rhs) {
                return false;
            }
            double lhs = at->get<double>();
            switch (pred.op) {
                case PredOp::Lt: return lhs < *rhs;
                case PredOp::Le: return lhs <= *rhs;
                case PredOp::Ge: return lhs >= *rhs;
                case PredOp::Gt: return lhs > *rhs;
                default: return false;
            }
        }
    }
    return false;
}

}  // namespace tasktree
