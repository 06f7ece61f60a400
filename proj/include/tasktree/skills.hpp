#pragma once

// Incremental skill pool: atomic primitives and DAG-described composite
// skills, grown under strict gates — a template must be invoked more than
// five times and its synthesized skill must reach 90% DAG-node test coverage
// before admission. Skills instantiate into tree fragments in a topological
// order of their DAG; failures mark skills suspect until their tests pass
// again.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tasktree/core.hpp"
#include "tasktree/dsl.hpp"
#include "tasktree/memory.hpp"
#include "tasktree/planner.hpp"
#include "tasktree/primitives.hpp"
#include "tasktree/sim.hpp"

namespace tasktree {

enum class ValueKind { Num, Pos, Str, Bool };

inline std::string value_kind_name(ValueKind k) {
    switch (k) {
        case ValueKind::Num: return "num";
        case ValueKind::Pos: return "pos";
        case ValueKind::Str: return "str";
        case ValueKind::Bool: return "bool";
    }
    return "?";
}

inline std::optional<ValueKind> value_kind_from_name(const std::string& name) {
    if (name == "num") return ValueKind::Num;
    if (name == "pos") return ValueKind::Pos;
    if (name == "str") return ValueKind::Str;
    if (name == "bool") return ValueKind::Bool;
    return std::nullopt;
}

inline ValueKind value_kind_of(const ParamValue& v) {
    if (std::holds_alternative<double>(v)) return ValueKind::Num;
    if (std::holds_alternative<Vec3>(v)) return ValueKind::Pos;
    if (std::holds_alternative<bool>(v)) return ValueKind::Bool;
    return ValueKind::Str;
}

enum class SkillTier { Atomic, Composite };

struct DagNode {
    std::string id;
    std::string primitive;
    std::vector<Param> params;

    friend bool operator==(const DagNode&, const DagNode&) = default;
};

struct SkillTest {
    std::vector<ObjectSpec> objects;
    std::vector<Param> args;
};

struct SkillDef {
    std::string name;
    SkillTier tier = SkillTier::Composite;
    std::vector<std::pair<std::string, ValueKind>> param_schema;
    std::vector<DagNode> dag_nodes;                        // Composite
    std::vector<std::pair<std::string, std::string>> dag_edges;
    std::string atomic_primitive;                          // Atomic
    std::vector<SkillTest> tests;
    double coverage = 0.0;
    int invocation_count = 0;
    bool suspect = false;
    std::uint64_t source_hash = 0;  // normalized-call hash this skill grew from

    std::string signature() const {
        std::string out = name + "(";
        bool first = true;
        for (const auto& [pname, kind] : param_schema) {
            if (!first) {
                out += ", ";
            }
            first = false;
            out += pname + ": " + value_kind_name(kind);
        }
        out += ")";
        return out;
    }
};

class SkillError : public std::runtime_error {
public:
    enum class Kind { UnknownSkill, SuspectSkill, ArgSchemaMismatch, InvalidSkill };
    SkillError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

// Deterministic topological order (Kahn's algorithm, lexicographic
// tie-break). Empty result on a cycle.
inline std::vector<std::string> topo_order(const SkillDef& skill) {
    std::map<std::string, int> indegree;
    std::map<std::string, std::set<std::string>> out_edges;
    for (const DagNode& n : skill.dag_nodes) {
        indegree[n.id];
    }
    for (const auto& [from, to] : skill.dag_edges) {
        if (out_edges[from].insert(to).second) {
            ++indegree[to];
        }
    }
    std::set<std::string> ready;
    for (const auto& [id, deg] : indegree) {
        if (deg == 0) {
            ready.insert(id);
        }
    }
    std::vector<std::string> order;
    while (!ready.empty()) {
        std::string next = *ready.begin();
        ready.erase(ready.begin());
        order.push_back(next);
        for (const std::string& to : out_edges[next]) {
            if (--indegree[to] == 0) {
                ready.insert(to);
            }
        }
    }
    if (order.size() != skill.dag_nodes.size()) {
        return {};
    }
    return order;
}

inline void validate_skill(const SkillDef& skill) {
    if (skill.name.empty()) {
        throw SkillError(SkillError::Kind::InvalidSkill, "skill needs a name");
    }
    if (skill.tier == SkillTier::Atomic) {
        if (skill.atomic_primitive.empty() || !is_known_primitive(skill.atomic_primitive)) {
            throw SkillError(SkillError::Kind::InvalidSkill,
                             "atomic skill '" + skill.name + "' must bind exactly one known primitive");
        }
        return;
    }
    if (skill.dag_nodes.empty()) {
        throw SkillError(SkillError::Kind::InvalidSkill, "composite skill '" + skill.name + "' has no nodes");
    }
    std::set<std::string> ids;
    for (const DagNode& n : skill.dag_nodes) {
        if (!ids.insert(n.id).second) {
            throw SkillError(SkillError::Kind::InvalidSkill,
                             "composite skill '" + skill.name + "' repeats node id '" + n.id + "'");
        }
    }
    for (const auto& [from, to] : skill.dag_edges) {
        if (!ids.count(from) || !ids.count(to)) {
            throw SkillError(SkillError::Kind::InvalidSkill,
                             "composite skill '" + skill.name + "' has an edge to an unknown node");
        }
    }
    if (topo_order(skill).empty()) {
        throw SkillError(SkillError::Kind::InvalidSkill,
                         "composite skill '" + skill.name + "' DAG has a cycle");
    }
}

class SkillPool {
public:
    void add(SkillDef skill) {
        validate_skill(skill);
        skills_.insert_or_assign(skill.name, std::move(skill));
    }
    const SkillDef* find(const std::string& name) const {
        auto it = skills_.find(name);
        return it == skills_.end() ? nullptr : &it->second;
    }
    SkillDef* find_mutable(const std::string& name) {
        auto it = skills_.find(name);
        return it == skills_.end() ? nullptr : &it->second;
    }
    bool has_source_hash(std::uint64_t hash) const {
        for (const auto& [name, skill] : skills_) {
            if (skill.source_hash == hash) {
                return true;
            }
        }
        return false;
    }
    const std::map<std::string, SkillDef>& skills() const { return skills_; }
    std::size_t size() const { return skills_.size(); }

private:
    std::map<std::string, SkillDef> skills_;
};

namespace skill_detail {

inline ParamValue substitute_arg(const ParamValue& value, const std::map<std::string, ParamValue>& args,
                                 const std::string& skill_name) {
    const std::string* s = std::get_if<std::string>(&value);
    if (!s) {
        return value;
    }
    if (s->rfind("@arg.", 0) == 0) {
        auto it = args.find(s->substr(5));
        if (it == args.end()) {
            throw SkillError(SkillError::Kind::ArgSchemaMismatch,
                             skill_name + ": missing argument '" + s->substr(5) + "'");
        }
        return it->second;
    }
    if (s->rfind("@argpos.", 0) == 0) {
        // Positional indirection: the argument names an object; the value
        // becomes a runtime reference to that object's observed position.
        auto it = args.find(s->substr(8));
        if (it == args.end()) {
            throw SkillError(SkillError::Kind::ArgSchemaMismatch,
                             skill_name + ": missing argument '" + s->substr(8) + "'");
        }
        const std::string* obj = std::get_if<std::string>(&it->second);
        if (!obj) {
            throw SkillError(SkillError::Kind::ArgSchemaMismatch,
                             skill_name + ": positional indirection needs a string argument");
        }
        return ParamValue{"@" + *obj};
    }
    return value;
}

}  // namespace skill_detail

// Expands a skill call into a tree fragment: a composite wrapper whose
// children are the DAG nodes in topological order, ids namespaced
// "s<counter>.". Deterministic given (skill, args, counter).
inline ExecutionTree instantiate_skill(const SkillPool& pool, const std::string& name,
                                       const std::vector<Param>& args, int counter) {
    const SkillDef* skill = pool.find(name);
    if (!skill) {
        throw SkillError(SkillError::Kind::UnknownSkill, "no skill named '" + name + "'");
    }
    if (skill->suspect) {
        throw SkillError(SkillError::Kind::SuspectSkill, "skill '" + name + "' is suspect pending revalidation");
    }
    std::map<std::string, ParamValue> arg_map;
    for (const Param& a : args) {
        arg_map[a.name] = a.value;
    }
    for (const auto& [pname, kind] : skill->param_schema) {
        auto it = arg_map.find(pname);
        if (it == arg_map.end()) {
            throw SkillError(SkillError::Kind::ArgSchemaMismatch,
                             name + ": required argument '" + pname + "' missing");
        }
        if (value_kind_of(it->second) != kind) {
            throw SkillError(SkillError::Kind::ArgSchemaMismatch,
                             name + ": argument '" + pname + "' expects " + value_kind_name(kind));
        }
    }

    std::string prefix = "s" + std::to_string(counter) + ".";
    ExecutionTree frag;
    frag.subtask_label = name;
    frag.tau = 1.0;

    if (skill->tier == SkillTier::Atomic) {
        std::vector<Param> params;
        for (const Param& a : args) {
            params.push_back(a);
        }
        std::string id = prefix + name;
        frag.nodes.emplace(id, build_node(NodeKind::Atom, id, skill->atomic_primitive, params));
        frag.root = id;
        return frag;
    }

    std::vector<std::string> order = topo_order(*skill);
    std::vector<std::string> children;
    for (const std::string& node_id : order) {
        const DagNode* dag = nullptr;
        for (const DagNode& n : skill->dag_nodes) {
            if (n.id == node_id) {
                dag = &n;
            }
        }
        std::vector<Param> params;
        for (const Param& p : dag->params) {
            params.push_back({p.name, skill_detail::substitute_arg(p.value, arg_map, name)});
        }
        std::string id = prefix + node_id;
        frag.nodes.emplace(id, build_node(NodeKind::Atom, id, dag->primitive, params));
        children.push_back(id);
    }
    std::string root = prefix + name;
    frag.nodes.emplace(root, build_node(NodeKind::Composite, root, name, args, {.children = children}));
    frag.root = root;
    return frag;
}

// --- skill tests and coverage -------------------------------------------------

struct SkillTestRun {
    std::set<std::string> exercised;  // DAG node ids whose atom executed
    bool passed = false;
    std::string failure;
};

// Replays the skill fragment in a fresh simulator built from the test's
// object layout. Execution stops at the first failing action; later nodes
// stay unexercised.
inline SkillTestRun run_skill_test(const SkillDef& skill, const SkillTest& test) {
    SkillTestRun result;
    Scenario sc;
    sc.name = "skill-test:" + skill.name;
    sc.objects = test.objects;
    SimState sim = reset(sc);

    SkillPool scratch;
    SkillDef copy = skill;
    copy.suspect = false;
    scratch.add(copy);
    ExecutionTree frag;
    try {
        frag = instantiate_skill(scratch, skill.name, test.args, 1);
    } catch (const SkillError& e) {
        result.failure = e.what();
        return result;
    }

    ParamEnv env;
    const TaskNode& root = frag.at(frag.root);
    std::vector<std::string> atoms = root.kind == NodeKind::Composite ? root.children
                                                                      : std::vector<std::string>{frag.root};
    std::string prefix = "s1.";
    for (const std::string& id : atoms) {
        Observation obs = observe(sim);
        AtomOutcome out = execute_atom(frag.at(id), env, obs, sim);
        result.exercised.insert(id.substr(prefix.size()));
        if (!out.result.ok) {
            result.failure = out.primitive + ": " + out.result.reason;
            return result;
        }
    }
    result.passed = true;
    return result;
}

// Node coverage: fraction of DAG nodes exercised across all attached tests.
inline double measure_coverage(const SkillDef& skill) {
    if (skill.tier == SkillTier::Atomic) {
        return skill.tests.empty() ? 0.0 : 1.0;
    }
    if (skill.dag_nodes.empty()) {
        return 0.0;
    }
    std::set<std::string> exercised;
    for (const SkillTest& test : skill.tests) {
        SkillTestRun run = run_skill_test(skill, test);
        exercised.insert(run.exercised.begin(), run.exercised.end());
    }
    return static_cast<double>(exercised.size()) / static_cast<double>(skill.dag_nodes.size());
}

// The admission gate, verbatim: invoked more than five times, and at least
// 90% test coverage.
inline bool promotion_admits(int count, double coverage) { return count > 5 && coverage >= 0.90; }

// --- synthesis from recorded call sequences ------------------------------------

// Generalizes the first recorded instance of a template into a reusable
// skill: literals equal to an invocation argument become "@arg.<name>";
// positions a preceding locate bound for an argument object become
// positional indirections resolved from live observations at call time.
inline SkillDef synthesize_skill(const std::string& name, const InvocationDetail& detail,
                                 std::uint64_t source_hash, int invocation_count) {
    SkillDef skill;
    skill.name = name;
    skill.tier = SkillTier::Composite;
    skill.source_hash = source_hash;
    skill.invocation_count = invocation_count;
    for (const Param& a : detail.args) {
        skill.param_schema.emplace_back(a.name, value_kind_of(a.value));
    }

    std::map<std::string, std::string> located_arg;  // object id -> arg name (via locate)
    int index = 0;
    std::string prev_id;
    for (const CallRecord& call : detail.sequence) {
        DagNode node;
        node.id = "n" + std::to_string(index++);
        node.primitive = call.primitive;
        for (const Param& p : call.params) {
            ParamValue value = p.value;
            bool replaced = false;
            for (const Param& a : detail.args) {
                if (value == a.value) {
                    value = ParamValue{"@arg." + a.name};
                    replaced = true;
                    break;
                }
            }
            if (!replaced) {
                if (const Vec3* pos = std::get_if<Vec3>(&value)) {
                    for (const CallRecord& earlier : detail.sequence) {
                        if (&earlier == &call) {
                            break;
                        }
                        if (earlier.located && distance(earlier.located->second, *pos) < 1e-9) {
                            auto it = located_arg.find(earlier.located->first);
                            if (it != located_arg.end()) {
                                value = ParamValue{"@argpos." + it->second};
                            }
                            break;
                        }
                    }
                }
            }
            node.params.push_back({p.name, value});
        }
        if (call.located) {
            for (const Param& a : detail.args) {
                if (const std::string* s = std::get_if<std::string>(&a.value);
                    s && *s == call.located->first) {
                    located_arg[call.located->first] = a.name;
                }
            }
        }
        if (!prev_id.empty()) {
            skill.dag_edges.emplace_back(prev_id, node.id);
        }
        prev_id = node.id;
        skill.dag_nodes.push_back(std::move(node));
    }

    // One attached test: the recorded instance replayed against the objects
    // the sequence touched, placed where they were localized.
    SkillTest test;
    test.args = detail.args;
    std::set<std::string> placed;
    for (const CallRecord& call : detail.sequence) {
        if (call.located && placed.insert(call.located->first).second) {
            ObjectSpec spec;
            spec.id = call.located->first;
            spec.pos = call.located->second;
            test.objects.push_back(std::move(spec));
        }
    }
    skill.tests.push_back(std::move(test));
    return skill;
}

// --- promotion -----------------------------------------------------------------

struct PromotionRow {
    std::string name;
    std::string canonical;
    int count = 0;
    double coverage = 0.0;
    bool admitted = false;
    std::string reason;
};

struct PromotionReport {
    std::vector<PromotionRow> rows;
};

inline std::string skill_name_of_canonical(const std::string& canonical) {
    std::size_t paren = canonical.find('(');
    return paren == std::string::npos ? canonical : canonical.substr(0, paren);
}

// Candidates are templates invoked more than five times with no admitted
// skill of the same hash. Each candidate is synthesized, its attached tests
// run in fresh simulator instances, and it is admitted only at >= 90%
// measured coverage.
inline PromotionReport promote_candidates(const MediumTermMemory& mtm, SkillPool& pool) {
    PromotionReport report;
    for (const auto& [hash, tmpl] : mtm.templates) {
        if (tmpl.count <= 5) {
            continue;
        }
        if (pool.has_source_hash(hash)) {
            continue;
        }
        PromotionRow row;
        row.canonical = tmpl.canonical;
        row.count = tmpl.count;
        row.name = skill_name_of_canonical(tmpl.canonical);
        if (!tmpl.first_detail || tmpl.first_detail->sequence.empty()) {
            row.reason = "no recorded call sequence";
            report.rows.push_back(std::move(row));
            continue;
        }
        if (pool.find(row.name)) {
            row.reason = "name already in pool";
            report.rows.push_back(std::move(row));
            continue;
        }
        SkillDef skill = synthesize_skill(row.name, *tmpl.first_detail, hash, tmpl.count);
        try {
            validate_skill(skill);
        } catch (const SkillError& e) {
            row.reason = e.what();
            report.rows.push_back(std::move(row));
            continue;
        }
        skill.coverage = measure_coverage(skill);
        row.coverage = skill.coverage;
        if (promotion_admits(tmpl.count, skill.coverage)) {
            row.admitted = true;
            pool.add(skill);
        } else {
            row.reason = skill.coverage < 0.90 ? "coverage-below-gate" : "count-below-gate";
        }
        report.rows.push_back(std::move(row));
    }
    return report;
}

// --- exception-driven revalidation ----------------------------------------------

struct RevalidationRow {
    std::string skill;
    bool tests_passed = false;
    bool cleared = false;
};

struct RevalidationReport {
    std::vector<RevalidationRow> rows;
};

// Skills whose instantiations contributed failing nodes turn suspect; their
// tests rerun in fresh simulators; passing skills clear, failing skills stay
// suspect and drop out of the context digest.
inline RevalidationReport revalidate(SkillPool& pool, const std::set<std::string>& failed_nodes,
                                     const std::map<std::string, std::string>& node_provenance) {
    std::set<std::string> implicated;
    for (const std::string& node : failed_nodes) {
        auto it = node_provenance.find(node);
        if (it != node_provenance.end()) {
            implicated.insert(it->second);
        }
    }
    RevalidationReport report;
    for (const std::string& name : implicated) {
        SkillDef* skill = pool.find_mutable(name);
        if (!skill) {
            continue;
        }
        skill->suspect = true;
        RevalidationRow row;
        row.skill = name;
        bool all_passed = !skill->tests.empty();
        for (const SkillTest& test : skill->tests) {
            if (!run_skill_test(*skill, test).passed) {
                all_passed = false;
            }
        }
        row.tests_passed = all_passed;
        if (all_passed) {
            skill->suspect = false;
            row.cleared = true;
        }
        report.rows.push_back(std::move(row));
    }
    return report;
}

// --- context assembly ------------------------------------------------------------

struct HimmState {
    ShortTermMemory stm;
    MediumTermMemory mtm;
    LifelongMemory lifelong;
    SkillPool pool;
};

// Deterministic context: every non-suspect skill's signature, top-3 memory
// snippets by similarity, and all verified hints.
inline PlannerContext assemble_context(const std::string& instruction, const HimmState& state) {
    PlannerContext ctx;
    for (const auto& [name, skill] : state.pool.skills()) {
        if (!skill.suspect) {
            ctx.skill_digest.push_back(skill.signature());
        }
    }
    ctx.memory_snippets = rank_memory_snippets(instruction, state.stm, state.mtm);
    ctx.lifelong_hints = state.lifelong.verified_texts();
    return ctx;
}

// --- persistence -------------------------------------------------------------------

inline std::string skill_to_text(const SkillDef& skill) {
    std::string out = "(skill " + skill.name + " " +
                      (skill.tier == SkillTier::Atomic ? "atomic" : "composite") + "\n";
    out += "  (params";
    for (const auto& [name, kind] : skill.param_schema) {
        out += " (" + name + " " + value_kind_name(kind) + ")";
    }
    out += ")\n";
    if (skill.tier == SkillTier::Atomic) {
        out += "  (primitive " + dsl_detail::quote_string(skill.atomic_primitive) + ")\n";
    } else {
        out += "  (dag\n";
        for (const DagNode& n : skill.dag_nodes) {
            out += "    (node " + n.id + " " + dsl_detail::quote_string(n.primitive);
            for (const Param& p : n.params) {
                out += " :" + p.name + " " + dsl_detail::format_value(p.value);
            }
            out += ")\n";
        }
        for (const auto& [from, to] : skill.dag_edges) {
            out += "    (edge " + from + " " + to + ")\n";
        }
        out += "  )\n";
    }
    out += "  (tests\n";
    for (const SkillTest& test : skill.tests) {
        out += "    (test (objects";
        for (const ObjectSpec& o : test.objects) {
            out += " (object " + dsl_detail::quote_string(o.id);
            if (o.pos) {
                out += " (" + dsl_detail::format_number(o.pos->x) + " " + dsl_detail::format_number(o.pos->y) +
                       " " + dsl_detail::format_number(o.pos->z) + ")";
            }
            out += ")";
        }
        out += ") (args";
        for (const Param& a : test.args) {
            out += " :" + a.name + " " + dsl_detail::format_value(a.value);
        }
        out += "))\n";
    }
    out += "  )\n";
    std::ostringstream hash_hex;
    hash_hex << std::hex << skill.source_hash;
    out += "  (meta :source_hash \"" + hash_hex.str() + "\" :coverage " +
           dsl_detail::format_number(skill.coverage) + " :invocations " +
           std::to_string(skill.invocation_count) + "))\n";
    return out;
}

class SkillParseError : public std::runtime_error {
public:
    explicit SkillParseError(const std::string& what) : std::runtime_error(what) {}
};

namespace skill_detail {

class SkillReader {
public:
    explicit SkillReader(std::string_view text) : lexer_(text) { bump(); }

    SkillDef read() {
        expect_lparen();
        expect_ident("skill");
        SkillDef skill;
        skill.name = expect_any_ident();
        std::string tier = expect_any_ident();
        if (tier == "atomic") {
            skill.tier = SkillTier::Atomic;
        } else if (tier == "composite") {
            skill.tier = SkillTier::Composite;
        } else {
            fail("unknown skill tier '" + tier + "'");
        }
        while (cur_.kind == dsl_detail::TokKind::LParen) {
            bump();
            std::string section = expect_any_ident();
            if (section == "params") {
                read_params(skill);
            } else if (section == "primitive") {
                skill.atomic_primitive = expect_string();
                expect_rparen();
            } else if (section == "dag") {
                read_dag(skill);
            } else if (section == "tests") {
                read_tests(skill);
            } else if (section == "meta") {
                read_meta(skill);
            } else {
                fail("unknown skill section '" + section + "'");
            }
        }
        expect_rparen();
        validate_skill(skill);
        return skill;
    }

private:
    [[noreturn]] void fail(const std::string& message) {
        throw SkillParseError("skill document " + std::to_string(cur_.line) + ":" + std::to_string(cur_.col) +
                              ": " + message);
    }
    void bump() {
        cur_ = lexer_.next();
        if (cur_.kind == dsl_detail::TokKind::Bad) {
            fail(cur_.text);
        }
    }
    void expect_lparen() {
        if (cur_.kind != dsl_detail::TokKind::LParen) {
            fail("expected '('");
        }
        bump();
    }
    void expect_rparen() {
        if (cur_.kind != dsl_detail::TokKind::RParen) {
            fail("expected ')'");
        }
        bump();
    }
    void expect_ident(const std::string& word) {
        if (cur_.kind != dsl_detail::TokKind::Ident || cur_.text != word) {
            fail("expected '" + word + "'");
        }
        bump();
    }
    std::string expect_any_ident() {
        if (cur_.kind != dsl_detail::TokKind::Ident) {
            fail("expected identifier");
        }
        std::string out = cur_.text;
        bump();
        return out;
    }
    std::string expect_string() {
        if (cur_.kind != dsl_detail::TokKind::Str) {
            fail("expected string");
        }
        std::string out = cur_.text;
        bump();
        return out;
    }
    double expect_number() {
        if (cur_.kind != dsl_detail::TokKind::Num) {
            fail("expected number");
        }
        double out = cur_.number;
        bump();
        return out;
    }
    ParamValue read_value() {
        switch (cur_.kind) {
            case dsl_detail::TokKind::Num: {
                double v = cur_.number;
                bump();
                return v;
            }
            case dsl_detail::TokKind::Str: {
                std::string s = cur_.text;
                bump();
                return s;
            }
            case dsl_detail::TokKind::Ident:
                if (cur_.text == "true" || cur_.text == "false") {
                    bool b = cur_.text == "true";
                    bump();
                    return b;
                }
                fail("unexpected identifier value");
            case dsl_detail::TokKind::LParen: {
                bump();
                double x = expect_number();
                double y = expect_number();
                double z = expect_number();
                expect_rparen();
                return Vec3{x, y, z};
            }
            default:
                fail("expected a value");
        }
    }
    std::vector<Param> read_kwargs() {
        std::vector<Param> out;
        while (cur_.kind == dsl_detail::TokKind::Keyword) {
            std::string name = cur_.text;
            bump();
            out.push_back({name, read_value()});
        }
        return out;
    }
    void read_params(SkillDef& skill) {
        while (cur_.kind == dsl_detail::TokKind::LParen) {
            bump();
            std::string name = expect_any_ident();
            std::string kind_name = expect_any_ident();
            std::optional<ValueKind> kind = value_kind_from_name(kind_name);
            if (!kind) {
                fail("unknown param kind '" + kind_name + "'");
            }
            skill.param_schema.emplace_back(name, *kind);
            expect_rparen();
        }
        expect_rparen();
    }
    void read_dag(SkillDef& skill) {
        while (cur_.kind == dsl_detail::TokKind::LParen) {
            bump();
            std::string head = expect_any_ident();
            if (head == "node") {
                DagNode node;
                node.id = expect_any_ident();
                node.primitive = expect_string();
                node.params = read_kwargs();
                skill.dag_nodes.push_back(std::move(node));
            } else if (head == "edge") {
                std::string from = expect_any_ident();
                std::string to = expect_any_ident();
                skill.dag_edges.emplace_back(from, to);
            } else {
                fail("unknown dag entry '" + head + "'");
            }
            expect_rparen();
        }
        expect_rparen();
    }
    void read_tests(SkillDef& skill) {
        while (cur_.kind == dsl_detail::TokKind::LParen) {
            bump();
            expect_ident("test");
            SkillTest test;
            while (cur_.kind == dsl_detail::TokKind::LParen) {
                bump();
                std::string head = expect_any_ident();
                if (head == "objects") {
                    while (cur_.kind == dsl_detail::TokKind::LParen) {
                        bump();
                        expect_ident("object");
                        ObjectSpec spec;
                        spec.id = expect_string();
                        if (cur_.kind == dsl_detail::TokKind::LParen) {
                            bump();
                            double x = expect_number();
                            double y = expect_number();
                            double z = expect_number();
                            expect_rparen();
                            spec.pos = Vec3{x, y, z};
                        }
                        test.objects.push_back(std::move(spec));
                        expect_rparen();
                    }
                    expect_rparen();
                } else if (head == "args") {
                    test.args = read_kwargs();
                    expect_rparen();
                } else {
                    fail("unknown test section '" + head + "'");
                }
            }
            skill.tests.push_back(std::move(test));
            expect_rparen();
        }
        expect_rparen();
    }
    void read_meta(SkillDef& skill) {
        std::vector<Param> kwargs = read_kwargs();
        for (const Param& p : kwargs) {
            if (p.name == "source_hash") {
                if (const std::string* s = std::get_if<std::string>(&p.value)) {
                    skill.source_hash = std::stoull(*s, nullptr, 16);
                }
            } else if (p.name == "coverage") {
                if (const double* d = std::get_if<double>(&p.value)) {
                    skill.coverage = *d;
                }
            } else if (p.name == "invocations") {
                if (const double* d = std::get_if<double>(&p.value)) {
                    skill.invocation_count = static_cast<int>(*d);
                }
            }
        }
        expect_rparen();
    }

    dsl_detail::Lexer lexer_;
    dsl_detail::Token cur_;
};

}  // namespace skill_detail

inline SkillDef skill_from_text(std::string_view text) { return skill_detail::SkillReader(text).read(); }

inline void save_skill(const SkillDef& skill, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream out(dir / (skill.name + ".skill"));
    out << skill_to_text(skill);
}

inline SkillPool load_skill_pool(const std::filesystem::path& dir, std::vector<std::string>* warnings = nullptr) {
    SkillPool pool;
    if (!std::filesystem::exists(dir)) {
        return pool;
    }
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.path().extension() == ".skill") {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    for (const std::filesystem::path& file : files) {
        std::ifstream in(file);
        std::stringstream buf;
        buf << in.rdbuf();
        try {
            pool.add(skill_from_text(buf.str()));
        } catch (const std::exception& e) {
            if (warnings) {
                warnings->push_back(file.string() + ": " + e.what());
            }
        }
    }
    return pool;
}

}  // namespace tasktree
