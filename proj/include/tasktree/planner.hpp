#pragma once

// The planner seam: anything that maps (instruction, observation, context)
// to a plan document. Two backends ship — a deterministic scripted planner
// that answers from registered programs (the test backbone) and an HTTP
// client for a real model endpoint (planner_remote.hpp). Call accounting
// lives here: every plan() invocation counts, including failures.

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tasktree/dsl.hpp"
#include "tasktree/sim.hpp"

namespace tasktree {

struct PlannerContext {
    std::vector<std::string> skill_digest;
    std::vector<std::string> memory_snippets;
    std::vector<std::string> lifelong_hints;

    friend bool operator==(const PlannerContext&, const PlannerContext&) = default;
};

enum class PlanPurpose { InitialPlan, Replan };

inline std::string plan_purpose_name(PlanPurpose p) {
    return p == PlanPurpose::InitialPlan ? "initial-plan" : "replan";
}

struct AnomalySummary {
    std::string class_hint;  // the router's own tier label, not injector truth
    std::string summary;
};

struct PlanRequest {
    std::string instruction;
    PlanPurpose purpose = PlanPurpose::InitialPlan;
    Observation observation;
    PlannerContext context;
    std::optional<AnomalySummary> anomaly;  // replan requests carry the trigger
};

struct PlanBundle {
    SourceText source;
    std::string planner_id;
    double latency = 0.0;
    int token_estimate = 0;
};

class PlannerError : public std::runtime_error {
public:
    enum class Kind { BackendUnavailable, Timeout, MalformedResponse, ParseRejected, MissingRegistration };
    PlannerError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

// Fixed prompt template. Identical requests produce byte-identical prompts.
inline std::string build_prompt(const PlanRequest& req) {
    std::string out;
    out += "You control a tabletop manipulator. Emit exactly one plan document:\n";
    out += "one (tree ...) form, then zero or more (monitor ...) forms, inside a\n";
    out += "fenced code block. Atom descriptions name primitives: move_to grasp\n";
    out += "release locate push open_container close_container press_button wait.\n";
    out += "\n## Task\n" + req.instruction + "\n";
    out += "\n## Purpose\n" + plan_purpose_name(req.purpose) + "\n";
    out += "\n## Scene\n";
    for (const ObsObject& o : req.observation.objects) {
        out += "- " + o.id;
        if (o.pos) {
            out += " at (" + dsl_detail::format_number(o.pos->x) + " " + dsl_detail::format_number(o.pos->y) + " " +
                   dsl_detail::format_number(o.pos->z) + ")";
        } else {
            out += " (not visible)";
        }
        for (const std::string& f : o.flags) {
            out += " [" + f + "]";
        }
        out += "\n";
    }
    out += "- gripper at (" + dsl_detail::format_number(req.observation.gripper_pos.x) + " " +
           dsl_detail::format_number(req.observation.gripper_pos.y) + " " +
           dsl_detail::format_number(req.observation.gripper_pos.z) + ")";
    out += req.observation.holding ? " holding " + *req.observation.holding + "\n" : "\n";
    out += "\n## Available skills\n";
    for (const std::string& s : req.context.skill_digest) {
        out += "- " + s + "\n";
    }
    out += "\n## Relevant memory\n";
    for (const std::string& s : req.context.memory_snippets) {
        out += "- " + s + "\n";
    }
    out += "\n## Operator guidance\n";
    for (const std::string& s : req.context.lifelong_hints) {
        out += "- " + s + "\n";
    }
    if (req.anomaly) {
        out += "\n## Anomaly\nclass: " + req.anomaly->class_hint + "\n" + req.anomaly->summary + "\n";
    }
    return out;
}

// First fenced code block wins; a bare document passes through untouched.
inline std::string extract_plan_source(const std::string& response) {
    std::size_t fence = response.find("```");
    if (fence == std::string::npos) {
        return response;
    }
    std::size_t start = response.find('\n', fence);
    if (start == std::string::npos) {
        return response;
    }
    ++start;
    std::size_t end = response.find("```", start);
    if (end == std::string::npos) {
        return response.substr(start);
    }
    return response.substr(start, end - start);
}

class PlannerBackend {
public:
    virtual ~PlannerBackend() = default;
    virtual PlanBundle plan(const PlanRequest& req) = 0;
    virtual std::string id() const = 0;
};

// Call accounting. Monotone counters keyed by purpose; one increment per
// plan() call no matter how the backend fares.
class CallLedger {
public:
    void count(PlanPurpose purpose) {
        std::lock_guard<std::mutex> lock(mu_);
        ++counts_[purpose];
    }
    int total() const {
        std::lock_guard<std::mutex> lock(mu_);
        int sum = 0;
        for (const auto& [p, n] : counts_) {
            sum += n;
        }
        return sum;
    }
    int count_of(PlanPurpose purpose) const {
        std::lock_guard<std::mutex> lock(mu_);
        auto it = counts_.find(purpose);
        return it == counts_.end() ? 0 : it->second;
    }

private:
    mutable std::mutex mu_;
    std::map<PlanPurpose, int> counts_;
};

// Front door used by the engine side: counts, then delegates.
class Planner {
public:
    explicit Planner(PlannerBackend* backend) : backend_(backend) {}

    PlanBundle plan(const PlanRequest& req) {
        ledger_.count(req.purpose);
        return backend_->plan(req);
    }

    const CallLedger& ledger() const { return ledger_; }
    PlannerBackend* backend() const { return backend_; }

private:
    PlannerBackend* backend_;
    CallLedger ledger_;
};

// Deterministic lookup backend. Registrations are keyed by (task, purpose);
// a replan registration may additionally require a substring of the anomaly
// summary, and any registration may require a skill to be present in the
// request context (so plans can use promoted skills once they exist).
// Re-registering a key replaces the previous entry: last write wins.
class ScriptedPlanner : public PlannerBackend {
public:
    struct Options {
        std::string summary_contains;  // replan selector, matched against anomaly summary
        std::string requires_skill;    // only eligible when this skill is in context
    };

    void register_program(const std::string& task_key, PlanPurpose purpose, const SourceText& source,
                          Options options = {}) {
        ParseResult parsed = parse_document(source.text);
        if (!parsed.ok()) {
            throw PlannerError(PlannerError::Kind::ParseRejected,
                               "scripted planner: program for '" + task_key +
                                   "' rejected: " + parsed.first_error().str());
        }
        Entry entry{source, options};
        auto& slot = programs_[key(task_key, purpose)];
        for (Registration& existing : slot) {
            if (existing.options.summary_contains == options.summary_contains &&
                existing.options.requires_skill == options.requires_skill) {
                existing.entry = entry;
                return;
            }
        }
        slot.push_back({entry, options});
    }

    PlanBundle plan(const PlanRequest& req) override {
        auto it = programs_.find(key(req.instruction, req.purpose));
        if (it == programs_.end()) {
            throw PlannerError(PlannerError::Kind::MissingRegistration,
                               "scripted planner: no program registered for '" + req.instruction + "' (" +
                                   plan_purpose_name(req.purpose) + ")");
        }
        const Registration* best = nullptr;
        for (const Registration& reg : it->second) {
            if (!reg.options.requires_skill.empty() && !has_skill(req.context, reg.options.requires_skill)) {
                continue;
            }
            if (!reg.options.summary_contains.empty()) {
                if (!req.anomaly || req.anomaly->summary.find(reg.options.summary_contains) == std::string::npos) {
                    continue;
                }
            }
            if (!best || specificity(reg) > specificity(*best)) {
                best = &reg;
            }
        }
        if (!best) {
            throw PlannerError(PlannerError::Kind::MissingRegistration,
                               "scripted planner: no registration matches request for '" + req.instruction + "'");
        }
        PlanBundle bundle;
        bundle.source = best->entry.source;
        bundle.source.origin = SourceText::Origin::scripted_planner;
        bundle.planner_id = id();
        bundle.token_estimate = static_cast<int>(build_prompt(req).size() / 4);
        return bundle;
    }

    std::string id() const override { return "scripted"; }

private:
    struct Entry {
        SourceText source;
        Options options;
    };
    struct Registration {
        Entry entry;
        Options options;
    };

    static int specificity(const Registration& reg) {
        return (reg.options.summary_contains.empty() ? 0 : 1) + (reg.options.requires_skill.empty() ? 0 : 2);
    }
    static bool has_skill(const PlannerContext& ctx, const std::string& name) {
        for (const std::string& entry : ctx.skill_digest) {
            if (entry.rfind(name + "(", 0) == 0 || entry == name) {
                return true;
            }
        }
        return false;
    }
    static std::string key(const std::string& task, PlanPurpose purpose) {
        return task + "\x1f" + plan_purpose_name(purpose);
    }

    std::map<std::string, std::vector<Registration>> programs_;
};

// Test helper: wraps any backend and fails the first N calls.
class FlakyBackend : public PlannerBackend {
public:
    FlakyBackend(PlannerBackend* inner, int failures_before_success,
                 PlannerError::Kind kind = PlannerError::Kind::MalformedResponse)
        : inner_(inner), remaining_(failures_before_success), kind_(kind) {}

    PlanBundle plan(const PlanRequest& req) override {
        if (remaining_ > 0) {
            --remaining_;
            if (kind_ == PlannerError::Kind::MalformedResponse) {
                PlanBundle bundle;
                bundle.source = SourceText{"(tree \"broken\" :tau", SourceText::Origin::scripted_planner};
                bundle.planner_id = id();
                return bundle;
            }
            throw PlannerError(kind_, "flaky backend: induced failure");
        }
        return inner_->plan(req);
    }
    std::string id() const override { return "flaky+" + inner_->id(); }

private:
    PlannerBackend* inner_;
    int remaining_;
    PlannerError::Kind kind_;
};

}  // namespace tasktree
