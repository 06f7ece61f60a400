#include <catch2/catch_amalgamated.hpp>

#include "generators.hpp"
#include "tasktree/dsl.hpp"
#include "tasktree/executor.hpp"

using namespace tasktree;

namespace {

Scenario empty_scene() {
    Scenario sc;
    sc.name = "empty";
    sc.objects.push_back({"marker", Vec3{0.6, 0.35, 0.02}, std::nullopt, {}, false, false});
    GoalPred g;
    g.kind = GoalPred::Kind::Near;
    g.a = ObjectSelector::parse("id:marker");
    g.pos = Vec3{0.6, 0.35, 0.02};
    g.tol = 0.05;
    sc.goal.push_back(g);
    return sc;
}

struct Fixture {
    Scenario scenario = empty_scene();
    ScriptedPlanner backend;
    Planner planner{&backend};
    EnvironmentHandle env{scenario};
    AnomalyController controller{HandlingPolicy::MAH, TierConfig{}, &planner, "test", [] {
                                     return PlannerContext{};
                                 }};

    RunReport run_tree(ExecutionTree tree, RunLimits limits = {}) {
        controller.install_plan(PlanDocument{tree, {}}, env.last_obs(), tree.tau);
        return run(std::move(tree), env, controller, limits);
    }
};

ExecutionTree parse_tree_text(const std::string& text) {
    ParseResult r = parse(text);
    REQUIRE(r.ok());
    return r.doc->tree;
}

}  // namespace

TEST_CASE("step on an exit node terminates with Done") {
    Fixture fx;
    ExecutionTree t = parse_tree_text(R"((tree "t" :tau 0.05 (exit e1 "done")))");
    EngineState s = make_engine_state(t);
    auto [next, outcome] = step(s, fx.env);
    CHECK(next.status == EngineStatus::Done);
    CHECK(std::holds_alternative<Terminated>(outcome.next));
    CHECK(outcome.executed == "e1");
    CHECK(s.steps_taken == 0);  // input state untouched
    CHECK(next.steps_taken == 1);
}

TEST_CASE("linear composite follows preorder sibling order") {
    Fixture fx;
    ExecutionTree t = parse_tree_text(R"((tree "t" :tau 0.05
      (comp c0 "main"
        (atom a1 "noop")
        (atom a2 "noop")
        (atom a3 "noop")
        (exit e1 "done"))))");
    EngineState s = make_engine_state(t);
    SceneMetadata doc = build_metadata(fx.env.last_obs(), nullptr, {});
    auto [s1, o1] = step(s, fx.env);
    CHECK(std::get<std::string>(o1.next) == "a1");
    auto [s2, o2] = step(s1, fx.env);
    CHECK(std::get<std::string>(o2.next) == "a2");
    // resolve_next mirrors what step will do, without side effects
    CHECK(std::get<std::string>(resolve_next(s2, doc)) == "a3");
    auto [s3, o3] = step(s2, fx.env);
    auto [s4, o4] = step(s3, fx.env);
    CHECK(std::get<std::string>(o4.next) == "e1");
}

TEST_CASE("if nodes pick the first matching arm, else default") {
    Fixture fx;
    ExecutionTree t = parse_tree_text(R"((tree "t" :tau 0.05
      (comp c0 "main"
        (atom init "env_set" :key "mode" :value 2)
        (if gate "route"
          (arm (= env.mode 1) a1)
          (arm (= env.mode 2) a2)
          :default a3)
        (atom a1 "noop")
        (atom a2 "noop")
        (atom a3 "noop")
        (exit e1 "done"))))");
    RunReport r = fx.run_tree(t);
    CHECK(r.status == RunStatus::Success);
    // gate routes straight to a2; a3 and e1 then follow in preorder.
    std::vector<std::string> expect{"c0", "init", "gate", "a2", "a3", "e1"};
    CHECK(r.visit_log == expect);
}

TEST_CASE("if default fires when no arm matches") {
    Fixture fx;
    ExecutionTree t = parse_tree_text(R"((tree "t" :tau 0.05
      (comp c0 "main"
        (if gate "route" (arm (= env.mode 1) a1) :default a3)
        (atom a1 "noop")
        (atom a3 "noop")
        (exit e1 "done"))))");
    RunReport r = fx.run_tree(t);
    CHECK(r.status == RunStatus::Success);
    std::vector<std::string> expect{"c0", "gate", "a3", "e1"};
    CHECK(r.visit_log == expect);
}

TEST_CASE("self-jump hits the step limit") {
    Fixture fx;
    ExecutionTree t = parse_tree_text(R"((tree "t" :tau 0.05
      (comp c0 "main"
        (jump j1 "spin" :to j1)
        (exit e1 "done"))))");
    RunLimits limits;
    limits.max_steps = 100;
    RunReport r = fx.run_tree(t, limits);
    CHECK(r.status == RunStatus::StepLimit);
    CHECK(r.steps == 100);
}

TEST_CASE("executor visit order equals recursive preorder on jump-free trees") {
    ttest::Rng rng(0xBEEF);
    int mismatches = 0;
    for (int i = 0; i < 1000; ++i) {
        ExecutionTree t = ttest::gen_jump_free_tree(rng, 50);
        std::vector<std::string> oracle = ttest::preorder_oracle(t);
        Fixture fx;
        RunLimits limits;
        limits.max_steps = 500;
        limits.max_sim_time = 1e9;
        RunReport r = fx.run_tree(t, limits);
        if (r.visit_log != oracle) {
            ++mismatches;
            INFO("iteration " << i << "\n" << serialize(t));
            REQUIRE(r.visit_log == oracle);
        }
    }
    CHECK(mismatches == 0);
}

TEST_CASE("determinism: identical tree and seed give identical visit logs") {
    ttest::Rng rng(0x5EED);
    for (int i = 0; i < 25; ++i) {
        ExecutionTree t = ttest::gen_jump_free_tree(rng, 40);
        Fixture a;
        Fixture b;
        RunReport ra = a.run_tree(t);
        RunReport rb = b.run_tree(t);
        REQUIRE(ra.visit_log == rb.visit_log);
        REQUIRE(run_report_to_json(ra) == run_report_to_json(rb));
    }
}

TEST_CASE("counter loop program computes the 10th triangular number") {
    // Loop-and-branch witness: acc accumulates 1..10 with only if, jump and
    // atom nodes. Hand-derived trace:
    //   comp + 2 env_set                  ->  3 steps
    //   9 iterations of inc/add/chk/jump  -> 36 steps
    //   final inc/add/chk (no jump)       ->  3 steps
    //   exit                              ->  1 step   => 43 steps total
    Fixture fx;
    ExecutionTree t = parse_tree_text(R"((tree "triangular" :tau 0.05
      (comp main "loop"
        (atom init_i "env_set" :key "i" :value 0)
        (atom init_acc "env_set" :key "acc" :value 0)
        (atom inc_i "env_add" :key "i" :value 1)
        (atom add_acc "env_add" :key "acc" :from "i")
        (if chk "again?" (arm (< env.i 10) back) :default fin)
        (jump back "loop" :to inc_i)
        (exit fin "done"))))");
    fx.controller.install_plan(PlanDocument{t, {}}, fx.env.last_obs(), t.tau);
    EngineState s = make_engine_state(t);
    RunReport r;
    while (s.status == EngineStatus::Running) {
        auto [next, outcome] = step(s, fx.env);
        s = std::move(next);
        r.visit_log.push_back(outcome.executed);
    }
    CHECK(s.status == EngineStatus::Done);
    REQUIRE(s.param_env.count("acc") == 1);
    CHECK(std::get<double>(s.param_env.at("acc")) == 55.0);
    CHECK(r.visit_log.size() == 43);
    CHECK(s.steps_taken == 43);
    // Spot-check the shape of the trace.
    CHECK(r.visit_log.front() == "main");
    CHECK(r.visit_log.back() == "fin");
    CHECK(std::count(r.visit_log.begin(), r.visit_log.end(), "inc_i") == 10);
    CHECK(std::count(r.visit_log.begin(), r.visit_log.end(), "back") == 9);
}

TEST_CASE("apply_patch inserts before the cursor and repositions") {
    Fixture fx;
    ExecutionTree t = parse_tree_text(R"((tree "t" :tau 0.05
      (comp c0 "main"
        (atom a1 "noop")
        (atom a2 "noop")
        (exit e1 "done"))))");
    EngineState s = make_engine_state(t);
    auto [s1, o1] = step(s, fx.env);   // comp -> cursor a1
    auto [s2, o2] = step(s1, fx.env);  // a1 -> cursor a2

    ExecutionTree frag;
    frag.subtask_label = "patch";
    frag.tau = 1.0;
    frag.nodes.emplace("p1.x", build_node(NodeKind::Atom, "p1.x", "noop", {}));
    frag.nodes.emplace("p1.y", build_node(NodeKind::Atom, "p1.y", "noop", {}));
    frag.nodes.emplace("p1.seq",
                       build_node(NodeKind::Composite, "p1.seq", "fix", {}, {.children = {"p1.x", "p1.y"}}));
    frag.root = "p1.seq";
    RecoveryPatch patch{PatchMode::InsertBefore, "", frag};

    EngineState patched = apply_patch(s2, patch);
    CHECK(patched.cursor == "p1.seq");
    CHECK(validate_tree(patched.tree).ok());

    // Execution now visits the patch nodes, then the original cursor node.
    std::vector<std::string> rest;
    EngineState cur = patched;
    while (cur.status == EngineStatus::Running) {
        auto [next, outcome] = step(cur, fx.env);
        cur = std::move(next);
        rest.push_back(outcome.executed);
    }
    std::vector<std::string> expect{"p1.seq", "p1.x", "p1.y", "a2", "e1"};
    CHECK(rest == expect);
}

TEST_CASE("apply_patch replace-remaining with exit ends the run") {
    Fixture fx;
    ExecutionTree t = parse_tree_text(R"((tree "t" :tau 0.05
      (comp c0 "main"
        (atom a1 "noop")
        (atom a2 "noop")
        (exit e1 "done"))))");
    EngineState s = make_engine_state(t);
    auto [s1, o1] = step(s, fx.env);
    ExecutionTree frag;
    frag.subtask_label = "halt";
    frag.tau = 1.0;
    frag.nodes.emplace("p1.halt", build_node(NodeKind::Exit, "p1.halt", "halt", {}));
    frag.root = "p1.halt";
    EngineState patched = apply_patch(s1, RecoveryPatch{PatchMode::ReplaceSubtree, "c0", frag});
    CHECK(patched.cursor == "p1.halt");
    auto [done, outcome] = step(patched, fx.env);
    CHECK(done.status == EngineStatus::Done);
}

TEST_CASE("apply_patch with colliding ids leaves the engine state unchanged") {
    Fixture fx;
    ExecutionTree t = parse_tree_text(R"((tree "t" :tau 0.05
      (comp c0 "main" (atom a1 "noop") (exit e1 "done"))))");
    EngineState s = make_engine_state(t);
    ExecutionTree frag;
    frag.subtask_label = "bad";
    frag.tau = 1.0;
    frag.nodes.emplace("a1", build_node(NodeKind::Atom, "a1", "noop", {}));
    frag.root = "a1";
    std::string before = serialize(s.tree);
    CHECK_THROWS_AS(apply_patch(s, RecoveryPatch{PatchMode::InsertBefore, "", frag}), TreeError);
    CHECK(serialize(s.tree) == before);
    CHECK(s.cursor == "c0");
}

TEST_CASE("run never exceeds max_steps on random trees with jumps") {
    ttest::Rng rng(0x99);
    for (int i = 0; i < 120; ++i) {
        ExecutionTree t = ttest::gen_tree(rng, 30);
        Fixture fx;
        RunLimits limits;
        limits.max_steps = 200;
        limits.max_sim_time = 1e9;
        RunReport r = fx.run_tree(t, limits);
        REQUIRE(r.steps <= 200);
        REQUIRE((int)r.visit_log.size() == r.steps);
    }
}
