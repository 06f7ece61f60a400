#pragma once

// Execution-tree domain types and structural algebra: node kinds, parameter
// values, predicates, tree validation and copy-on-write patching. Trees are
// immutable values; every mutation returns a fresh tree.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <variant>
#include <vector>

namespace tasktree {

struct Vec3 {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;

    friend Vec3 operator+(const Vec3& a, const Vec3& b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
    friend Vec3 operator-(const Vec3& a, const Vec3& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
    friend Vec3 operator*(const Vec3& a, double s) { return {a.x * s, a.y * s, a.z * s}; }
    friend bool operator==(const Vec3& a, const Vec3& b) { return a.x == b.x && a.y == b.y && a.z == b.z; }

    double norm() const { return std::sqrt(x * x + y * y + z * z); }
    double norm_xy() const { return std::sqrt(x * x + y * y); }
    bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }
};

inline double distance(const Vec3& a, const Vec3& b) { return (a - b).norm(); }
inline double distance_xy(const Vec3& a, const Vec3& b) { return (a - b).norm_xy(); }

// Scalar | position | text | flag. Object references are strings with a
// leading '@' resolved at dispatch time ("@apple", "@env.count").
using ParamValue = std::variant<double, Vec3, std::string, bool>;

inline bool is_reference(const ParamValue& v) {
    const std::string* s = std::get_if<std::string>(&v);
    return s && !s->empty() && (*s)[0] == '@';
}

struct Param {
    std::string name;
    ParamValue value;

    friend bool operator==(const Param&, const Param&) = default;
};

enum class PredOp {
    Lt,
    Le,
    Eq,
    Ge,
    Gt,
    Ne,
    Exists,
    Absent,
    MovedBeyond,  // stateful: distance from a captured reference exceeds rhs
};

inline std::string_view pred_op_name(PredOp op) {
    switch (op) {
        case PredOp::Lt: return "<";
        case PredOp::Le: return "<=";
        case PredOp::Eq: return "=";
        case PredOp::Ge: return ">=";
        case PredOp::Gt: return ">";
        case PredOp::Ne: return "!=";
        case PredOp::Exists: return "exists";
        case PredOp::Absent: return "absent";
        case PredOp::MovedBeyond: return "moved-beyond";
    }
    return "?";
}

inline bool pred_op_takes_value(PredOp op) { return op != PredOp::Exists && op != PredOp::Absent; }

// Comparison against a dotted metadata path ("obj.apple.pos.x",
// "gripper.holding", "env.i").
struct Predicate {
    PredOp op = PredOp::Eq;
    std::string path;
    std::optional<ParamValue> rhs;

    friend bool operator==(const Predicate&, const Predicate&) = default;
};

enum class NodeKind { Atom, Composite, If, Jump, Exit };

inline std::string_view node_kind_name(NodeKind k) {
    switch (k) {
        case NodeKind::Atom: return "atom";
        case NodeKind::Composite: return "comp";
        case NodeKind::If: return "if";
        case NodeKind::Jump: return "jump";
        case NodeKind::Exit: return "exit";
    }
    return "?";
}

struct BranchArm {
    Predicate pred;
    std::string target;

    friend bool operator==(const BranchArm&, const BranchArm&) = default;
};

// One tree node: description text, ordered parameter list, and the child
// mapping realized per kind (ordered children, predicate arms + default,
// or an explicit jump target).
struct TaskNode {
    std::string id;
    NodeKind kind = NodeKind::Atom;
    std::string description;
    std::vector<Param> params;
    std::vector<std::string> children;      // Composite only
    std::vector<BranchArm> arms;            // If only
    std::string default_target;             // If only, mandatory
    std::string jump_target;                // Jump only

    friend bool operator==(const TaskNode&, const TaskNode&) = default;
};

struct ExecutionTree {
    std::string root;
    std::map<std::string, TaskNode> nodes;
    std::string subtask_label;
    double tau = 0.02;  // deviation threshold in meters

    const TaskNode* find(const std::string& id) const {
        auto it = nodes.find(id);
        return it == nodes.end() ? nullptr : &it->second;
    }
    const TaskNode& at(const std::string& id) const {
        auto it = nodes.find(id);
        if (it == nodes.end()) {
            throw std::out_of_range("tree: unknown node id: " + id);
        }
        return it->second;
    }
    std::size_t size() const { return nodes.size(); }

    friend bool operator==(const ExecutionTree&, const ExecutionTree&) = default;
};

enum class PatchMode { InsertBefore, ReplaceSubtree, AppendAfter };

inline std::string_view patch_mode_name(PatchMode m) {
    switch (m) {
        case PatchMode::InsertBefore: return "insert-before";
        case PatchMode::ReplaceSubtree: return "replace-subtree";
        case PatchMode::AppendAfter: return "append-after";
    }
    return "?";
}

// Structural repair: a validated fragment plus where and how to insert it.
// Producers namespace fragment ids with a "p<counter>." prefix so they can
// never collide with planner-chosen ids.
struct RecoveryPatch {
    PatchMode mode = PatchMode::InsertBefore;
    std::string anchor;
    ExecutionTree fragment;
};

enum class TreeErrc {
    invalid_links,
    duplicate_param,
    unknown_anchor,
    id_collision,
    result_invalid,
    invalid_tree,
};

class TreeError : public std::runtime_error {
public:
    TreeError(TreeErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
    TreeErrc code() const { return code_; }

private:
    TreeErrc code_;
};

struct Violation {
    std::string node_id;
    std::string rule;
    std::string detail;
};

struct ValidationReport {
    std::vector<Violation> violations;
    bool ok() const { return violations.empty(); }
};

struct NodeLinks {
    std::vector<std::string> children;
    std::vector<BranchArm> arms;
    std::string default_target;
    std::string jump_target;
};

inline TaskNode build_node(NodeKind kind, std::string id, std::string description,
                           std::vector<Param> params, NodeLinks links = {}) {
    std::unordered_set<std::string> names;
    for (const Param& p : params) {
        if (!names.insert(p.name).second) {
            throw TreeError(TreeErrc::duplicate_param, "duplicate param name '" + p.name + "' in node " + id);
        }
    }
    auto require = [&](bool cond, const char* msg) {
        if (!cond) {
            throw TreeError(TreeErrc::invalid_links, std::string(msg) + " (node " + id + ")");
        }
    };
    switch (kind) {
        case NodeKind::Atom:
        case NodeKind::Exit:
            require(links.children.empty() && links.arms.empty() && links.default_target.empty() &&
                        links.jump_target.empty(),
                    "leaf node takes no links");
            break;
        case NodeKind::Composite:
            require(!links.children.empty(), "composite requires at least one child");
            require(links.arms.empty() && links.default_target.empty() && links.jump_target.empty(),
                    "composite takes only children");
            break;
        case NodeKind::If:
            require(!links.arms.empty(), "if requires at least one arm");
            require(!links.default_target.empty(), "if requires a default target");
            require(links.children.empty() && links.jump_target.empty(), "if takes arms and a default only");
            break;
        case NodeKind::Jump:
            require(!links.jump_target.empty(), "jump requires a target");
            require(links.children.empty() && links.arms.empty() && links.default_target.empty(),
                    "jump takes only a target");
            break;
    }
    TaskNode n;
    n.id = std::move(id);
    n.kind = kind;
    n.description = std::move(description);
    n.params = std::move(params);
    n.children = std::move(links.children);
    n.arms = std::move(links.arms);
    n.default_target = std::move(links.default_target);
    n.jump_target = std::move(links.jump_target);
    return n;
}

// All outgoing edges of a node: children, arm targets, default, jump.
inline std::vector<std::string> out_edges(const TaskNode& n) {
    std::vector<std::string> out = n.children;
    for (const BranchArm& a : n.arms) {
        out.push_back(a.target);
    }
    if (!n.default_target.empty()) {
        out.push_back(n.default_target);
    }
    if (!n.jump_target.empty()) {
        out.push_back(n.jump_target);
    }
    return out;
}

namespace detail {

inline void check_node_shape(const TaskNode& n, ValidationReport& report) {
    auto flag = [&](const char* rule, std::string detail) {
        report.violations.push_back({n.id, rule, std::move(detail)});
    };
    switch (n.kind) {
        case NodeKind::Atom:
        case NodeKind::Exit:
            if (!n.children.empty() || !n.arms.empty() || !n.default_target.empty() || !n.jump_target.empty()) {
                flag("leaf-with-links", "atom/exit nodes carry no children, arms or targets");
            }
            break;
        case NodeKind::Composite:
            if (n.children.empty()) {
                flag("empty-composite", "composite children list is empty");
            }
            if (!n.arms.empty() || !n.default_target.empty() || !n.jump_target.empty()) {
                flag("composite-with-links", "composite carries arms or targets");
            }
            break;
        case NodeKind::If:
            if (n.arms.empty()) {
                flag("if-without-arms", "if node has no arms");
            }
            if (n.default_target.empty()) {
                flag("if-without-default", "if node has no default target");
            }
            if (!n.children.empty() || !n.jump_target.empty()) {
                flag("if-with-links", "if node carries children or jump target");
            }
            break;
        case NodeKind::Jump:
            if (n.jump_target.empty()) {
                flag("jump-without-target", "jump node has no target");
            }
            if (!n.children.empty() || !n.arms.empty() || !n.default_target.empty()) {
                flag("jump-with-links", "jump node carries children or arms");
            }
            break;
    }
    std::unordered_set<std::string> names;
    for (const Param& p : n.params) {
        if (!names.insert(p.name).second) {
            report.violations.push_back({n.id, "duplicate-param", "param '" + p.name + "' repeats"});
        }
        if (const Vec3* v = std::get_if<Vec3>(&p.value); v && !v->finite()) {
            report.violations.push_back({n.id, "nonfinite-vec3", "param '" + p.name + "' is not finite"});
        }
    }
}

inline ValidationReport validate_impl(const ExecutionTree& tree, bool require_reachable_exit) {
    ValidationReport report;
    if (tree.nodes.empty() || tree.nodes.find(tree.root) == tree.nodes.end()) {
        report.violations.push_back({tree.root, "missing-root", "root id does not resolve"});
        return report;
    }
    if (require_reachable_exit && !(tree.tau > 0.0)) {
        report.violations.push_back({tree.root, "nonpositive-tau", "deviation threshold must be > 0"});
    }
    for (const auto& [id, node] : tree.nodes) {
        if (id != node.id) {
            report.violations.push_back({id, "id-mismatch", "map key differs from node id"});
        }
        check_node_shape(node, report);
        for (const std::string& target : out_edges(node)) {
            if (tree.nodes.find(target) == tree.nodes.end()) {
                report.violations.push_back({id, "unresolved-target", "edge to unknown node '" + target + "'"});
            }
        }
    }
    if (!report.ok()) {
        return report;
    }
    if (require_reachable_exit) {
        std::unordered_set<std::string> seen{tree.root};
        std::queue<std::string> frontier;
        frontier.push(tree.root);
        bool exit_reachable = false;
        while (!frontier.empty()) {
            const TaskNode& n = tree.at(frontier.front());
            frontier.pop();
            if (n.kind == NodeKind::Exit) {
                exit_reachable = true;
                break;
            }
            for (const std::string& target : out_edges(n)) {
                if (seen.insert(target).second) {
                    frontier.push(target);
                }
            }
        }
        if (!exit_reachable) {
            report.violations.push_back({tree.root, "no-reachable-exit", "no exit node reachable from root"});
        }
    }
    return report;
}

}  // namespace detail

inline ValidationReport validate_tree(const ExecutionTree& tree) {
    return detail::validate_impl(tree, /*require_reachable_exit=*/true);
}

// Fragment validation: same structural rules, but a fragment need not
// contain an exit and carries no tau of its own.
inline ValidationReport validate_fragment(const ExecutionTree& fragment) {
    return detail::validate_impl(fragment, /*require_reachable_exit=*/false);
}

// Map node id -> parent id over children edges. Every non-root node produced
// by the grammar or by splice has exactly one structural parent.
inline std::map<std::string, std::string> parent_map(const ExecutionTree& tree) {
    std::map<std::string, std::string> parents;
    for (const auto& [id, node] : tree.nodes) {
        for (const std::string& child : node.children) {
            parents[child] = id;
        }
    }
    return parents;
}

// Path root -> ... -> id over children edges; empty when id is unreachable
// through the child structure.
inline std::vector<std::string> root_path(const ExecutionTree& tree, const std::string& id) {
    auto parents = parent_map(tree);
    std::vector<std::string> path{id};
    std::string cur = id;
    std::unordered_set<std::string> guard{id};
    while (cur != tree.root) {
        auto it = parents.find(cur);
        if (it == parents.end()) {
            return {};
        }
        cur = it->second;
        if (!guard.insert(cur).second) {
            return {};
        }
        path.push_back(cur);
    }
    std::reverse(path.begin(), path.end());
    return path;
}

// Nodes of the child-subtree rooted at id (children edges only).
inline std::set<std::string> child_subtree(const ExecutionTree& tree, const std::string& id) {
    std::set<std::string> out;
    std::vector<std::string> stack{id};
    while (!stack.empty()) {
        std::string cur = stack.back();
        stack.pop_back();
        if (!out.insert(cur).second) {
            continue;
        }
        const TaskNode* n = tree.find(cur);
        if (n) {
            for (const std::string& c : n->children) {
                stack.push_back(c);
            }
        }
    }
    return out;
}

// Copy-on-write structural patch. The input tree is never modified; on any
// error the exception carries the reason and the caller keeps its tree.
inline ExecutionTree splice(const ExecutionTree& tree, const std::string& anchor, const RecoveryPatch& patch) {
    if (tree.nodes.find(anchor) == tree.nodes.end()) {
        throw TreeError(TreeErrc::unknown_anchor, "splice: anchor '" + anchor + "' not in tree");
    }
    ValidationReport frag_report = validate_fragment(patch.fragment);
    if (!frag_report.ok()) {
        throw TreeError(TreeErrc::result_invalid,
                        "splice: fragment invalid: " + frag_report.violations.front().rule + " at " +
                            frag_report.violations.front().node_id);
    }
    for (const auto& [id, node] : patch.fragment.nodes) {
        if (patch.mode == PatchMode::ReplaceSubtree) {
            // Ids inside the replaced subtree are about to be removed, so a
            // collision with them is only real if the node survives.
            continue;
        }
        if (tree.nodes.find(id) != tree.nodes.end()) {
            throw TreeError(TreeErrc::id_collision, "splice: fragment id '" + id + "' already in tree");
        }
    }

    ExecutionTree out = tree;
    const std::string frag_root = patch.fragment.root;

    if (patch.mode == PatchMode::ReplaceSubtree) {
        std::set<std::string> removed = child_subtree(out, anchor);
        for (const auto& [id, node] : patch.fragment.nodes) {
            if (out.nodes.find(id) != out.nodes.end() && removed.find(id) == removed.end()) {
                throw TreeError(TreeErrc::id_collision, "splice: fragment id '" + id + "' already in tree");
            }
        }
        auto parents = parent_map(out);
        auto parent_it = parents.find(anchor);
        for (const std::string& id : removed) {
            out.nodes.erase(id);
        }
        for (const auto& [id, node] : patch.fragment.nodes) {
            out.nodes.emplace(id, node);
        }
        if (anchor == out.root) {
            out.root = frag_root;
        } else if (parent_it != parents.end()) {
            TaskNode& parent = out.nodes.at(parent_it->second);
            for (std::string& child : parent.children) {
                if (child == anchor) {
                    child = frag_root;
                }
            }
        }
    } else {
        for (const auto& [id, node] : patch.fragment.nodes) {
            out.nodes.emplace(id, node);
        }
        auto parents = parent_map(tree);
        auto parent_it = parents.find(anchor);
        if (parent_it == parents.end()) {
            // Anchor is the root (or structurally parentless): wrap both the
            // fragment and the old root under a fresh composite.
            std::string wrap_id = frag_root + ".wrap";
            if (out.nodes.find(wrap_id) != out.nodes.end()) {
                throw TreeError(TreeErrc::id_collision, "splice: wrapper id '" + wrap_id + "' already in tree");
            }
            std::vector<std::string> order = patch.mode == PatchMode::InsertBefore
                                                 ? std::vector<std::string>{frag_root, anchor}
                                                 : std::vector<std::string>{anchor, frag_root};
            TaskNode wrap = build_node(NodeKind::Composite, wrap_id, "patch wrapper", {}, {.children = order});
            out.nodes.emplace(wrap_id, std::move(wrap));
            if (anchor == out.root) {
                out.root = wrap_id;
            }
        } else {
            TaskNode& parent = out.nodes.at(parent_it->second);
            std::vector<std::string> rebuilt;
            rebuilt.reserve(parent.children.size() + 1);
            for (const std::string& child : parent.children) {
                if (child == anchor && patch.mode == PatchMode::InsertBefore) {
                    rebuilt.push_back(frag_root);
                }
                rebuilt.push_back(child);
                if (child == anchor && patch.mode == PatchMode::AppendAfter) {
                    rebuilt.push_back(frag_root);
                }
            }
            parent.children = std::move(rebuilt);
        }
    }

    ValidationReport post = validate_tree(out);
    if (!post.ok()) {
        throw TreeError(TreeErrc::result_invalid, "splice: result invalid: " + post.violations.front().rule +
                                                      " at " + post.violations.front().node_id);
    }
    return out;
}

}  // namespace tasktree
