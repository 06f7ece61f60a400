#pragma once

// HTTP planner backend. One POST per call; the response body carries the plan
// source, possibly wrapped in prose with a fenced code block.
//
//   request:  { "instruction": str, "purpose": "initial-plan"|"replan",
//               "observation": [{"id": str, "pos": [x,y,z], "flags": [str]}],
//               "context": { "skills": [str], "memory": [str], "hints": [str] },
//               "anomaly": { "class_hint": str, "summary": str } | null }
//   response: { "source": str }

#include <string>

#include <httplib.h>
#include <json.hpp>

#include "tasktree/planner.hpp"

namespace tasktree {

inline nlohmann::json plan_request_to_json(const PlanRequest& req) {
    nlohmann::json j;
    j["instruction"] = req.instruction;
    j["purpose"] = plan_purpose_name(req.purpose);
    j["observation"] = nlohmann::json::array();
    for (const ObsObject& o : req.observation.objects) {
        nlohmann::json jo;
        jo["id"] = o.id;
        jo["pos"] = o.pos ? vec3_to_json(*o.pos) : nlohmann::json();
        nlohmann::json flags = nlohmann::json::array();
        for (const std::string& f : o.flags) {
            flags.push_back(f);
        }
        if (o.occluded) {
            flags.push_back("occluded");
        }
        jo["flags"] = flags;
        j["observation"].push_back(jo);
    }
    j["context"] = {{"skills", req.context.skill_digest},
                    {"memory", req.context.memory_snippets},
                    {"hints", req.context.lifelong_hints}};
    j["anomaly"] = req.anomaly
                       ? nlohmann::json{{"class_hint", req.anomaly->class_hint}, {"summary", req.anomaly->summary}}
                       : nlohmann::json();
    j["prompt"] = build_prompt(req);
    return j;
}

class RemotePlanner : public PlannerBackend {
public:
    struct Config {
        std::string host;       // e.g. "127.0.0.1"
        int port = 0;
        std::string path = "/plan";
        std::string token;      // bearer credential, optional
        double timeout_s = 60.0;
    };

    explicit RemotePlanner(Config cfg) : cfg_(std::move(cfg)) {}

    PlanBundle plan(const PlanRequest& req) override {
        httplib::Client client(cfg_.host, cfg_.port);
        client.set_connection_timeout(static_cast<time_t>(cfg_.timeout_s), 0);
        client.set_read_timeout(static_cast<time_t>(cfg_.timeout_s), 0);
        httplib::Headers headers;
        if (!cfg_.token.empty()) {
            headers.emplace("Authorization", "Bearer " + cfg_.token);
        }
        std::string body = plan_request_to_json(req).dump();
        httplib::Result res = client.Post(cfg_.path, headers, body, "application/json");
        if (!res) {
            auto err = res.error();
            if (err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read) {
                throw PlannerError(PlannerError::Kind::Timeout, "remote planner: timed out");
            }
            throw PlannerError(PlannerError::Kind::BackendUnavailable,
                               "remote planner: " + httplib::to_string(err));
        }
        if (res->status != 200) {
            throw PlannerError(PlannerError::Kind::BackendUnavailable,
                               "remote planner: HTTP " + std::to_string(res->status));
        }
        nlohmann::json parsed = nlohmann::json::parse(res->body, nullptr, /*allow_exceptions=*/false);
        if (parsed.is_discarded() || !parsed.contains("source") || !parsed["source"].is_string()) {
            throw PlannerError(PlannerError::Kind::MalformedResponse, "remote planner: response lacks source");
        }
        std::string source = extract_plan_source(parsed["source"].get<std::string>());
        PlanBundle bundle;
        bundle.source = SourceText{std::move(source), SourceText::Origin::remote_planner};
        bundle.planner_id = id();
        bundle.token_estimate = static_cast<int>((body.size() + res->body.size()) / 4);
        return bundle;
    }

    std::string id() const override { return "remote:" + cfg_.host + ":" + std::to_string(cfg_.port); }

private:
    Config cfg_;
};

}  // namespace tasktree
