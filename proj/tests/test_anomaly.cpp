#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "generators.hpp"
#include "tasktree/anomaly.hpp"

using namespace tasktree;

namespace {

Observation obs_with(std::vector<std::pair<std::string, std::optional<Vec3>>> objects, double clock = 0.0,
                     Vec3 gripper = {0.35, 0.0, 0.25}) {
    Observation obs;
    obs.clock = clock;
    obs.gripper_pos = gripper;
    for (auto& [id, pos] : objects) {
        ObsObject o;
        o.id = id;
        o.pos = pos;
        o.occluded = !pos.has_value();
        obs.objects.push_back(std::move(o));
    }
    return obs;
}

}  // namespace

TEST_CASE("extract_scene_state maps tracked keypoints and flags occlusion") {
    Observation obs = obs_with({{"apple", Vec3{0.3, 0.1, 0.02}}, {"cup", std::nullopt}});
    std::set<std::string> declared{"apple", "cup", "plate"};
    SceneState s = extract_scene_state(obs, {"apple", "cup", "plate"}, declared);
    CHECK(s.keypoints.at("apple") == Vec3{0.3, 0.1, 0.02});
    CHECK_FALSE(s.keypoints.at("cup").has_value());   // occluded
    CHECK_FALSE(s.keypoints.at("plate").has_value()); // declared but gone
    CHECK_THROWS_AS(extract_scene_state(obs, {"ghost"}, declared), UnknownKeypoint);
}

TEST_CASE("deviation is zero on identical states") {
    SceneState s;
    s.keypoints["a"] = Vec3{0.1, 0.2, 0.3};
    Expectation u;
    u.keypoints["a"] = Vec3{0.1, 0.2, 0.3};
    CHECK(deviation(s, u) == 0.0);
}

TEST_CASE("deviation of a 3-4-5 displacement is 0.05") {
    SceneState s;
    s.keypoints["a"] = Vec3{0.0, 0.0, 0.0};
    Expectation u;
    u.keypoints["a"] = Vec3{0.03, 0.04, 0.0};
    CHECK(deviation(s, u) == Catch::Approx(0.05).epsilon(1e-12));
}

TEST_CASE("deviation equals brute-force max of keypoint norms") {
    ttest::Rng rng(0xDE7);
    for (int trial = 0; trial < 200; ++trial) {
        SceneState s;
        Expectation u;
        double expect = 0.0;
        int n = rng.pick(1, 5);
        for (int i = 0; i < n; ++i) {
            std::string id = "k" + std::to_string(i);
            Vec3 a{rng.real(-1, 1), rng.real(-1, 1), rng.real(-1, 1)};
            Vec3 b{rng.real(-1, 1), rng.real(-1, 1), rng.real(-1, 1)};
            s.keypoints[id] = a;
            u.keypoints[id] = b;
            double d = std::sqrt((a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y) +
                                 (a.z - b.z) * (a.z - b.z));
            expect = std::max(expect, d);
        }
        REQUIRE(deviation(s, u) == Catch::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("missing keypoint against a concrete expectation is infinite") {
    SceneState s;
    s.keypoints["a"] = std::nullopt;
    Expectation u;
    u.keypoints["a"] = Vec3{0, 0, 0};
    CHECK(std::isinf(deviation(s, u)));
    // Don't-care expectations ignore the miss.
    u.keypoints["a"] = std::nullopt;
    CHECK(deviation(s, u) == 0.0);
}

TEST_CASE("deviation with no common keypoints throws NoOverlap") {
    SceneState s;
    s.keypoints["a"] = Vec3{0, 0, 0};
    Expectation u;
    u.keypoints["b"] = Vec3{0, 0, 0};
    CHECK_THROWS_AS(deviation(s, u), NoOverlap);
}

namespace {

MonitorSpec moved_beyond_spec(const std::string& id, const std::string& obj, double eps) {
    MonitorSpec m;
    m.id = id;
    m.watch = "obj." + obj + ".pos";
    m.pred = {PredOp::MovedBeyond, "obj." + obj + ".pos", ParamValue{eps}};
    ExecutionTree handler;
    handler.subtask_label = "relocate";
    handler.tau = 1.0;
    handler.nodes.emplace("h1", build_node(NodeKind::Atom, "h1", "locate", {{"obj", obj}}));
    handler.root = "h1";
    m.handler = handler;
    m.cooldown = 2.0;
    return m;
}

SceneMetadata doc_for(const Observation& obs) { return build_metadata(obs, nullptr, {}); }

}  // namespace

TEST_CASE("moved-beyond monitor fires past epsilon and respects cooldown") {
    MonitorRuntime rt;
    Observation start = obs_with({{"apple", Vec3{0.3, 0.1, 0.02}}});
    rt.install({moved_beyond_spec("m1", "apple", 0.05)}, doc_for(start), 2.0);

    // 3 cm: below epsilon.
    Observation small = obs_with({{"apple", Vec3{0.33, 0.1, 0.02}}}, 1.0);
    CHECK(rt.run(doc_for(small), 1.0).empty());

    // 8 cm: fires once.
    Observation big = obs_with({{"apple", Vec3{0.38, 0.1, 0.02}}}, 5.0);
    auto fired = rt.run(doc_for(big), 5.0);
    REQUIRE(fired.size() == 1);
    CHECK(fired[0].spec->id == "m1");
    CHECK(fired[0].deviation == Catch::Approx(0.08));

    // Still displaced at t=6.0: cooldown mutes it until t=7.0.
    CHECK(rt.run(doc_for(big), 6.0).empty());
    CHECK(rt.run(doc_for(big), 6.9).empty());
    CHECK(rt.run(doc_for(big), 7.0).size() == 1);
}

TEST_CASE("moved-beyond reference follows the object while held") {
    MonitorRuntime rt;
    Observation start = obs_with({{"apple", Vec3{0.3, 0.1, 0.02}}});
    rt.install({moved_beyond_spec("m1", "apple", 0.05)}, doc_for(start), 2.0);

    // Carried far away, flagged held: reference re-bases, no trigger.
    Observation carried = obs_with({{"apple", Vec3{0.6, -0.2, 0.15}}}, 1.0);
    carried.objects[0].held = true;
    CHECK(rt.run(doc_for(carried), 1.0).empty());

    // Released there (not held), still at the re-based spot: no trigger.
    Observation released = obs_with({{"apple", Vec3{0.6, -0.2, 0.06}}}, 2.0);
    auto fired = rt.run(doc_for(released), 2.0);
    REQUIRE(fired.size() == 1);  // 9 cm drop from carried z is past epsilon
    // ... but after re-localization the reference re-bases.
    rt.rebase("apple", doc_for(released));
    CHECK(rt.run(doc_for(released), 10.0).empty());
}

TEST_CASE("predicate monitors evaluate over metadata") {
    MonitorSpec m;
    m.id = "m2";
    m.watch = "obj.apple.occluded";
    m.pred = {PredOp::Eq, "obj.apple.occluded", ParamValue{true}};
    ExecutionTree handler;
    handler.subtask_label = "wait";
    handler.tau = 1.0;
    handler.nodes.emplace("h1", build_node(NodeKind::Atom, "h1", "wait", {{"seconds", 4.0}}));
    handler.root = "h1";
    m.handler = handler;

    MonitorRuntime rt;
    Observation start = obs_with({{"apple", Vec3{0.3, 0.1, 0.02}}});
    rt.install({m}, doc_for(start), 2.0);
    CHECK(rt.run(doc_for(start), 0.5).empty());
    Observation hidden = obs_with({{"apple", std::nullopt}}, 1.0);
    CHECK(rt.run(doc_for(hidden), 1.0).size() == 1);
    CHECK(rt.condition_active("apple", doc_for(hidden)));
    CHECK_FALSE(rt.condition_active("apple", doc_for(start)));
}

TEST_CASE("local expert re-acquires objects dropped while believed held") {
    AnomalyEvent ev;
    ev.source = AnomalySource::DeviationThreshold;
    ev.object = "apple";
    ev.deviation = 0.13;
    ExpertContext ctx;
    ctx.believed_held = true;
    std::optional<RecoveryPatch> patch = local_expert_recover(ev, ctx, 3);
    REQUIRE(patch.has_value());
    CHECK(patch->mode == PatchMode::InsertBefore);
    CHECK(validate_fragment(patch->fragment).ok());
    // locate -> move -> grasp, namespaced p3.
    CHECK(patch->fragment.nodes.count("p3.relocate") == 1);
    CHECK(patch->fragment.nodes.count("p3.approach") == 1);
    CHECK(patch->fragment.nodes.count("p3.regrasp") == 1);
    CHECK(patch->fragment.at("p3.regrasp").description == "grasp");
    CHECK(std::get<std::string>(patch->fragment.at("p3.approach").params[0].value) == "@apple");
}

TEST_CASE("local expert clears obstructions on failed grasps") {
    AnomalyEvent ev;
    ev.source = AnomalySource::ActionFailure;
    ev.object = "intruder";
    ev.failure_reason = "obstructed";
    ev.failure_primitive = "grasp";
    ExpertContext ctx;
    ctx.failed_target = "blockA";
    std::optional<RecoveryPatch> patch = local_expert_recover(ev, ctx, 1);
    REQUIRE(patch.has_value());
    CHECK(patch->fragment.nodes.count("p1.clear") == 1);
    CHECK(patch->fragment.at("p1.clear").description == "push");
    CHECK(patch->fragment.nodes.count("p1.regrasp") == 1);
}

TEST_CASE("local expert declines topology-level anomalies") {
    AnomalyEvent missing;
    missing.source = AnomalySource::DeviationThreshold;
    missing.object = "blockA";
    missing.deviation = std::numeric_limits<double>::infinity();
    ExpertContext ctx;
    ctx.believed_held = false;
    CHECK_FALSE(local_expert_recover(missing, ctx, 1).has_value());

    AnomalyEvent moved_base;
    moved_base.source = AnomalySource::DeviationThreshold;
    moved_base.object = "blockB";
    moved_base.deviation = 0.25;
    CHECK_FALSE(local_expert_recover(moved_base, ctx, 1).has_value());
}

TEST_CASE("expectation tracker predicts held objects at the gripper") {
    ExpectationTracker tracker;
    Observation start = obs_with({{"apple", Vec3{0.3, 0.1, 0.02}}});
    tracker.init(start);
    CHECK_FALSE(tracker.believed_held("apple"));

    tracker.on_grasp("apple");
    Observation moved = obs_with({{"apple", Vec3{0.5, 0.0, 0.15}}}, 1.0, Vec3{0.5, 0.0, 0.15});
    Expectation u = tracker.at(moved);
    CHECK(*u.keypoints.at("apple") == Vec3{0.5, 0.0, 0.15});

    // Slip: object observed on the table while the tracker still believes
    // it is in hand -> large deviation.
    Observation slipped = obs_with({{"apple", Vec3{0.51, 0.01, 0.02}}}, 2.0, Vec3{0.5, 0.0, 0.15});
    SceneState s = extract_scene_state(slipped, tracker.tracked(), tracker.declared());
    double dev = deviation(s, tracker.at(slipped));
    CHECK(dev > 0.1);

    // Re-localization corrects the belief.
    tracker.on_locate("apple", Vec3{0.51, 0.01, 0.02}, /*gripper_has_it=*/false);
    CHECK_FALSE(tracker.believed_held("apple"));
    CHECK(deviation(extract_scene_state(slipped, tracker.tracked(), tracker.declared()), tracker.at(slipped)) ==
          Catch::Approx(0.0));
}

TEST_CASE("replan retries once on malformed output then aborts") {
    ScriptedPlanner scripted;
    SourceText good{R"((tree "fix" :tau 0.05 (exit e1 "done")))", SourceText::Origin::scripted_planner};
    scripted.register_program("task", PlanPurpose::Replan, good);

    AnomalyEvent ev;
    ev.summary = "keypoint blockA missing from scene";
    Observation obs = obs_with({{"blockA", Vec3{0.3, 0.1, 0.02}}});

    SECTION("clean backend needs no retry") {
        Planner planner(&scripted);
        ReplanOutcome out = replan(ev, obs, {}, planner, "task", 1);
        REQUIRE(out.doc.has_value());
        CHECK(out.retries_used == 0);
        CHECK(planner.ledger().total() == 1);
    }
    SECTION("one malformed response then success") {
        FlakyBackend flaky(&scripted, 1);
        Planner planner(&flaky);
        ReplanOutcome out = replan(ev, obs, {}, planner, "task", 1);
        REQUIRE(out.doc.has_value());
        CHECK(out.retries_used == 1);
        CHECK(planner.ledger().total() == 2);  // failures count as calls
    }
    SECTION("persistent garbage aborts after bounded retries") {
        FlakyBackend flaky(&scripted, 5);
        Planner planner(&flaky);
        ReplanOutcome out = replan(ev, obs, {}, planner, "task", 1);
        CHECK_FALSE(out.doc.has_value());
        CHECK_FALSE(out.abort_reason.empty());
        CHECK(planner.ledger().total() == 2);  // initial try + one retry
    }
}

TEST_CASE("router never reads the injector's ground-truth label") {
    // Identical events, one labeled one not: decisions must match.
    ScriptedPlanner scripted;
    Planner planner(&scripted);
    auto make_controller = [&]() {
        return AnomalyController(HandlingPolicy::MAH, TierConfig{}, &planner, "task",
                                 [] { return PlannerContext{}; });
    };
    Observation start = obs_with({{"apple", Vec3{0.3, 0.1, 0.02}}});

    auto run_once = [&](std::optional<AnomalyClass> label) {
        AnomalyController ctrl = make_controller();
        PlanDocument doc;
        doc.tree.subtask_label = "t";
        doc.tree.tau = 0.05;
        doc.tree.nodes.emplace("e1", build_node(NodeKind::Exit, "e1", "done", {}));
        doc.tree.root = "e1";
        doc.monitors.push_back(moved_beyond_spec("m1", "apple", 0.05));
        ctrl.install_plan(doc, start, 0.05);

        StepSnapshot snap;
        snap.step_index = 1;
        snap.clock = 1.0;
        snap.cursor = "e1";
        snap.obs = obs_with({{"apple", Vec3{0.45, 0.1, 0.02}}}, 1.0);
        if (label) {
            snap.injections.push_back({AnomalyKind::ObjectDisplacement, *label, "apple"});
        }
        ctrl.on_step(snap);
        return ctrl.drain_decisions();
    };

    std::vector<TierDecision> labeled = run_once(AnomalyClass::Predictable);
    std::vector<TierDecision> unlabeled = run_once(std::nullopt);
    REQUIRE(labeled.size() == 1);
    REQUIRE(unlabeled.size() == 1);
    CHECK(labeled[0].tier == unlabeled[0].tier);
    CHECK(labeled[0].latency_cost == unlabeled[0].latency_cost);
    CHECK(labeled[0].cause.ground_truth_class == AnomalyClass::Predictable);
    CHECK_FALSE(unlabeled[0].cause.ground_truth_class.has_value());
}

TEST_CASE("monitor match routes T1 and mutes repeats while the cause persists") {
    ScriptedPlanner scripted;
    Planner planner(&scripted);
    AnomalyController ctrl(HandlingPolicy::MAH, TierConfig{}, &planner, "task", [] { return PlannerContext{}; });
    Observation start = obs_with({{"apple", Vec3{0.3, 0.1, 0.02}}});
    PlanDocument doc;
    doc.tree.subtask_label = "t";
    doc.tree.tau = 0.05;
    doc.tree.nodes.emplace("e1", build_node(NodeKind::Exit, "e1", "done", {}));
    doc.tree.root = "e1";
    doc.monitors.push_back(moved_beyond_spec("m1", "apple", 0.05));
    ctrl.install_plan(doc, start, 0.05);

    Observation displaced = obs_with({{"apple", Vec3{0.45, 0.1, 0.02}}}, 1.0);
    for (int i = 1; i <= 8; ++i) {
        StepSnapshot snap;
        snap.step_index = i;
        snap.clock = 1.0 + i;  // well past the cooldown each pass
        snap.cursor = "e1";
        snap.obs = displaced;
        ctrl.on_step(snap);
    }
    std::vector<TierDecision> decisions = ctrl.drain_decisions();
    REQUIRE(decisions.size() == 1);  // one anomaly, one decision
    CHECK(decisions[0].tier == Tier::T1Predefined);
    CHECK(ctrl.counters().handled_t1 == 1);
    CHECK(ctrl.counters().events_total == 1);
    CHECK(ctrl.counters().suppressed > 0);
    const RecoveryPatch& patch = std::get<RecoveryPatch>(decisions[0].action);
    CHECK(patch.fragment.root.rfind("p1.", 0) == 0);  // namespaced handler copy
}
