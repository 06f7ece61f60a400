#include <catch2/catch_amalgamated.hpp>

#include "generators.hpp"
#include "tasktree/core.hpp"
#include "tasktree/dsl.hpp"

using namespace tasktree;

TEST_CASE("parse accepts the minimal program") {
    ParseResult r = parse(R"((tree "pick" :tau 0.02 (exit e1 "done")))");
    REQUIRE(r.ok());
    CHECK(r.doc->tree.size() == 1);
    CHECK(r.doc->tree.root == "e1");
    CHECK(r.doc->tree.at("e1").kind == NodeKind::Exit);
    CHECK(r.doc->tree.subtask_label == "pick");
    CHECK(r.doc->tree.tau == 0.02);
    CHECK(r.doc->monitors.empty());
}

TEST_CASE("parse accepts a valid self-jump tree") {
    // Termination is the executor's concern, bounded by its step limit; the
    // grammar permits arbitrary jumps. A reachable exit elsewhere keeps the
    // tree valid.
    ParseResult r = parse(R"((tree "t" :tau 0.02
      (comp c0 "main"
        (if gate "spin?" (arm (= env.go true) j1) :default e1)
        (jump j1 "loop" :to j1)
        (exit e1 "done"))))");
    REQUIRE(r.ok());
    CHECK(r.doc->tree.at("j1").jump_target == "j1");
}

TEST_CASE("parse rejects a jump-only tree with no reachable exit") {
    ParseResult r = parse(R"((tree "t" :tau 0.02 (jump j1 "loop" :to j1)))");
    REQUIRE_FALSE(r.ok());
    CHECK(r.first_error().message.find("no-reachable-exit") != std::string::npos);
}

TEST_CASE("serialize emits the frozen canonical form for the minimal tree") {
    ExecutionTree t;
    t.subtask_label = "pick";
    t.tau = 0.02;
    t.nodes.emplace("e1", build_node(NodeKind::Exit, "e1", "done", {}));
    t.root = "e1";
    CHECK(serialize(t) == "(tree \"pick\" :tau 0.02\n  (exit e1 \"done\"))\n");
}

TEST_CASE("parse of serialize is the identity on generated trees") {
    ttest::Rng rng(0xD51);
    for (int i = 0; i < 1000; ++i) {
        ExecutionTree t = ttest::gen_tree(rng, 50);
        std::string text = serialize(t);
        ParseResult r = parse(text);
        INFO("iteration " << i << "\n" << text);
        REQUIRE(r.ok());
        REQUIRE(r.doc->tree == t);
    }
}

TEST_CASE("structurally equal trees serialize identically regardless of insertion order") {
    ttest::Rng rng(0xAB);
    for (int i = 0; i < 50; ++i) {
        ExecutionTree t = ttest::gen_tree(rng, 30);
        ExecutionTree reordered;
        reordered.root = t.root;
        reordered.subtask_label = t.subtask_label;
        reordered.tau = t.tau;
        std::vector<std::pair<std::string, TaskNode>> entries(t.nodes.begin(), t.nodes.end());
        std::reverse(entries.begin(), entries.end());
        for (auto& [id, node] : entries) {
            reordered.nodes.emplace(id, node);
        }
        REQUIRE(serialize(t) == serialize(reordered));
    }
}

TEST_CASE("parse never crashes on arbitrary bytes") {
    ttest::Rng rng(0xF022);
    int outcomes = 0;
    for (int i = 0; i < 5000; ++i) {
        std::string bytes = ttest::random_bytes(rng);
        ParseResult r = parse(bytes);
        outcomes += r.ok() ? 1 : 0;
        if (!r.ok()) {
            const Diagnostic& d = r.first_error();
            CHECK(d.line >= 1);
            CHECK(d.column >= 1);
        }
    }
    for (int i = 0; i < 5000; ++i) {
        std::string bytes = ttest::dsl_flavored_bytes(rng);
        ParseResult r = parse(bytes);
        outcomes += r.ok() ? 1 : 0;
    }
    SUCCEED("fuzz inputs all yielded a tree or a diagnostic");
    (void)outcomes;
}

TEST_CASE("diagnostics point at the offending token") {
    // Column of the bad tau value: line 1, after "(tree \"t\" :tau ".
    ParseResult r = parse("(tree \"t\" :tau oops (exit e \"d\")))");
    REQUIRE_FALSE(r.ok());
    CHECK(r.first_error().line == 1);
    CHECK(r.first_error().column == 16);

    ParseResult r2 = parse("(tree \"t\" :tau 0.02\n  (jump j1 \"x\" :to nowhere))");
    REQUIRE_FALSE(r2.ok());
    CHECK(r2.first_error().line == 2);
    CHECK(r2.first_error().message.find("unresolved-target") != std::string::npos);

    ParseResult r3 = parse("(tree \"t\" :tau 0.02 (atom a1 \"x\" :k 0.3.))");
    REQUIRE_FALSE(r3.ok());
    CHECK(r3.first_error().message.find("number") != std::string::npos);
}

TEST_CASE("duplicate node ids are rejected at parse time") {
    ParseResult r = parse(R"((tree "t" :tau 0.02
      (comp c0 "main"
        (atom a1 "x")
        (atom a1 "y")
        (exit e1 "done"))))");
    REQUIRE_FALSE(r.ok());
    CHECK(r.first_error().message.find("duplicate node id") != std::string::npos);
}

TEST_CASE("parse_monitor_specs reads the monitor block of a document") {
    std::string text = R"((tree "pick" :tau 0.05
      (comp c0 "main"
        (atom a1 "locate" :obj "apple")
        (exit e1 "done")))
    (monitor m1 :watch obj.apple.pos :pred (moved-beyond 0.05) :handler
      (comp m1h "re-acquire"
        (atom m1h1 "locate" :obj "apple")
        (atom m1h2 "grasp" :obj "apple"))))";
    MonitorParseResult r = parse_monitor_specs(text);
    REQUIRE(r.ok());
    REQUIRE(r.specs->size() == 1);
    const MonitorSpec& m = r.specs->at(0);
    CHECK(m.id == "m1");
    CHECK(m.watch == "obj.apple.pos");
    CHECK(m.pred.op == PredOp::MovedBeyond);
    CHECK(m.pred.path == "obj.apple.pos");  // defaulted from :watch
    REQUIRE(m.pred.rhs.has_value());
    CHECK(std::get<double>(*m.pred.rhs) == 0.05);
    CHECK(m.handler.size() == 3);
}

TEST_CASE("plans may have zero monitors") {
    MonitorParseResult r = parse_monitor_specs(R"((tree "t" :tau 0.02 (exit e1 "done")))");
    REQUIRE(r.ok());
    CHECK(r.specs->empty());
    MonitorParseResult r2 = parse_monitor_specs("");
    REQUIRE(r2.ok());
    CHECK(r2.specs->empty());
}

TEST_CASE("monitor handler with unresolved jump is a diagnostic") {
    std::string text = R"((tree "t" :tau 0.02 (exit e1 "done"))
    (monitor m1 :watch obj.a.pos :pred (moved-beyond 0.05) :handler
      (comp h "bad" (jump h1 "x" :to nowhere))))";
    MonitorParseResult r = parse_monitor_specs(text);
    REQUIRE_FALSE(r.ok());
    REQUIRE_FALSE(r.diagnostics.empty());
    CHECK(r.diagnostics.front().message.find("handler invalid") != std::string::npos);
}

TEST_CASE("documents round-trip with monitors") {
    std::string text = R"((tree "pick" :tau 0.05
      (comp c0 "main"
        (atom a1 "move_to" :target (0.4 0.1 0.02) :speed 0.5)
        (if i1 "held?" (arm (= gripper.holding "apple") e1) :default a1)
        (exit e1 "done")))
    (monitor m1 :watch obj.apple.occluded :pred (= true) :handler
      (atom m1h "wait" :seconds 4)))";
    ParseResult first = parse_document(text);
    REQUIRE(first.ok());
    std::string canon = serialize_document(*first.doc);
    ParseResult second = parse_document(canon);
    REQUIRE(second.ok());
    CHECK(*second.doc == *first.doc);
    CHECK(serialize_document(*second.doc) == canon);
}

TEST_CASE("engine-namespaced dotted ids survive a round trip") {
    ExecutionTree t;
    t.subtask_label = "patched";
    t.tau = 0.05;
    t.nodes.emplace("p1.fix", build_node(NodeKind::Atom, "p1.fix", "grasp", {{"obj", std::string("apple")}}));
    t.nodes.emplace("e1", build_node(NodeKind::Exit, "e1", "done", {}));
    t.nodes.emplace("c0", build_node(NodeKind::Composite, "c0", "main", {}, {.children = {"p1.fix", "e1"}}));
    t.root = "c0";
    ParseResult r = parse(serialize(t));
    REQUIRE(r.ok());
    CHECK(r.doc->tree == t);
}

TEST_CASE("measure_source counts nodes and lines") {
    std::string text = "(tree \"t\" :tau 0.02\n  (comp c \"m\"\n    (atom a \"x\")\n    (exit e \"d\")))\n";
    SourceSize size = measure_source(text);
    CHECK(size.node_count == 3);
    CHECK(size.line_count == 5);
}
