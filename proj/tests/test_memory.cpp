#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "generators.hpp"
#include "tasktree/memory.hpp"

using namespace tasktree;

namespace {

MemoryEntry invocation(double ts, const std::string& payload) {
    MemoryEntry e;
    e.timestamp = ts;
    e.kind = MemoryKind::Invocation;
    e.payload = payload;
    e.task_label = "test";
    return e;
}

MemoryEntry outcome(double ts, const std::string& payload, const std::string& label) {
    MemoryEntry e;
    e.timestamp = ts;
    e.kind = MemoryKind::Outcome;
    e.payload = payload;
    e.task_label = label;
    return e;
}

}  // namespace

TEST_CASE("short-term memory is a ten-entry rolling window") {
    ShortTermMemory stm;
    stm = record_event(std::move(stm), invocation(0.0, "a()"));
    CHECK(stm.size() == 1);
    for (int i = 1; i <= 10; ++i) {
        stm = record_event(std::move(stm), invocation(i, "e" + std::to_string(i) + "()"));
    }
    CHECK(stm.size() == 10);
    CHECK(stm.entries().front().payload == "e1()");  // "a()" evicted
}

TEST_CASE("short-term memory holds the last ten of a long stream") {
    ShortTermMemory stm;
    for (int i = 0; i < 1000; ++i) {
        stm.record(invocation(i, "call" + std::to_string(i) + "()"));
    }
    REQUIRE(stm.size() == 10);
    int expect = 990;
    for (const MemoryEntry& e : stm.entries()) {
        CHECK(e.payload == "call" + std::to_string(expect++) + "()");
    }
}

TEST_CASE("short-term capacity holds under random event streams") {
    ttest::Rng rng(0x10);
    ShortTermMemory stm;
    for (int i = 0; i < 10000; ++i) {
        MemoryEntry e;
        e.timestamp = i * 0.1;
        e.kind = static_cast<MemoryKind>(rng.pick(0, 2));
        e.payload = "p" + std::to_string(rng.pick(0, 99)) + "()";
        stm.record(std::move(e));
        REQUIRE(stm.size() <= ShortTermMemory::kCapacity);
    }
    CHECK(stm.size() == 10);
}

TEST_CASE("normalize collapses keyword order and literal values") {
    NormalizedCall a = normalize(R"(grasp(:obj "apple" :force 2.0))");
    NormalizedCall b = normalize(R"(grasp(:force 2.1 :obj "pear"))");
    CHECK(a.canonical == b.canonical);
    CHECK(a.hash == b.hash);
    CHECK(a.canonical == "grasp(:force ‹num› :obj ‹str›)");
}

TEST_CASE("normalize is idempotent on canonical forms modulo placeholders") {
    // Identical texts always hash identically.
    CHECK(normalize("move_to(:target (0.3 0 0.2))").hash == normalize("move_to(:target (0.3 0 0.2))").hash);
    // Re-normalizing a canonicalized call (placeholders replaced by sample
    // literals) is stable.
    NormalizedCall first = normalize(R"(pour(:from "teapot" :into "cup" :rate 0.5))");
    NormalizedCall again = normalize(R"(pour(:rate 9.9 :into "mug" :from "kettle"))");
    CHECK(first.canonical == again.canonical);
}

TEST_CASE("distinct head symbols never collide") {
    CHECK(normalize(R"(grasp(:obj "a"))").hash != normalize(R"(release(:obj "a"))").hash);
}

TEST_CASE("normalize rejects non-call text") {
    CHECK_THROWS_AS(normalize("not a call"), UnparseableCall);
    CHECK_THROWS_AS(normalize("f(:k"), UnparseableCall);
    CHECK_THROWS_AS(normalize("f(:k oops)"), UnparseableCall);
    CHECK_THROWS_AS(normalize(""), UnparseableCall);
}

TEST_CASE("consolidation honors the ten-minute gate") {
    ShortTermMemory stm;
    stm.record(invocation(100.0, R"(move_to(:target (0.1 0.2 0.3)))"));
    MediumTermMemory mtm;
    mtm.last_consolidated = 0.0;
    MediumTermMemory after = consolidate(stm, mtm, 300.0);  // only 300 s elapsed
    CHECK(after.templates.empty());
    CHECK(after.last_consolidated == 0.0);
}

TEST_CASE("four invocations within the hour form one retained template") {
    ShortTermMemory stm;
    // Different literals, one canonical form.
    stm.record(invocation(100, R"(move_to(:target (0.1 0.2 0.3)))"));
    stm.record(invocation(200, R"(move_to(:target (0.4 0.0 0.1)))"));
    stm.record(invocation(300, R"(move_to(:target (0.9 0.9 0.9)))"));
    stm.record(invocation(400, R"(move_to(:target (0.2 0.2 0.2)))"));
    MediumTermMemory mtm = consolidate(stm, {}, 600.0);
    REQUIRE(mtm.templates.size() == 1);
    const CallTemplate& tmpl = mtm.templates.begin()->second;
    CHECK(tmpl.count == 4);
    CHECK(tmpl.canonical == "move_to(:target ‹pos›)");
}

TEST_CASE("two invocations per hour get pruned at consolidation") {
    ShortTermMemory stm;
    stm.record(invocation(100, R"(pour(:from "teapot"))"));
    stm.record(invocation(200, R"(pour(:from "kettle"))"));
    stm.record(invocation(150, R"(move_to(:target (0.1 0.2 0.3)))"));
    stm.record(invocation(250, R"(move_to(:target (0.4 0.0 0.1)))"));
    stm.record(invocation(350, R"(move_to(:target (0.9 0.9 0.9)))"));
    MediumTermMemory mtm = consolidate(stm, {}, 600.0);
    REQUIRE(mtm.templates.size() == 1);  // pour pruned, move_to retained
    CHECK(mtm.templates.begin()->second.canonical == "move_to(:target ‹pos›)");
}

TEST_CASE("consolidation counts each entry once across ticks") {
    ShortTermMemory stm;
    stm.record(invocation(100, R"(grasp(:obj "a"))"));
    stm.record(invocation(200, R"(grasp(:obj "b"))"));
    stm.record(invocation(300, R"(grasp(:obj "c"))"));
    MediumTermMemory mtm = consolidate(stm, {}, 600.0);
    REQUIRE(mtm.templates.size() == 1);
    CHECK(mtm.templates.begin()->second.count == 3);
    // Nothing new: counts stay put at the next tick.
    stm.record(invocation(700, R"(grasp(:obj "d"))"));
    mtm = consolidate(stm, std::move(mtm), 1300.0);
    REQUIRE(mtm.templates.size() == 1);
    CHECK(mtm.templates.begin()->second.count == 4);
}

TEST_CASE("lifelong memory loads only verified lines") {
    std::filesystem::path path = std::filesystem::temp_directory_path() / "tasktree_hints.txt";
    {
        std::ofstream out(path);
        out << "VERIFIED\tkeep the wrist horizontal during grasping\n";
        out << "unverified noise line\n";
        out << "VERIFIED\tapproach containers from above\n";
    }
    std::vector<std::string> warnings;
    LifelongMemory mem = load_lifelong_memory(path.string(), &warnings);
    REQUIRE(mem.hints.size() == 2);
    CHECK(mem.hints[0].verified);
    CHECK(mem.verified_texts()[0] == "keep the wrist horizontal during grasping");
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find("unverified") != std::string::npos);
    std::filesystem::remove(path);
}

TEST_CASE("memory snippets rank by token-set similarity with recency tie-break") {
    ShortTermMemory stm;
    stm.record(outcome(10.0, "stacked the red block successfully", "stack the red block"));
    stm.record(outcome(20.0, "poured tea into the cup", "pour tea"));
    stm.record(outcome(30.0, "stacked the blue block successfully", "stack the blue block"));
    MediumTermMemory mtm;

    std::vector<std::string> ranked = rank_memory_snippets("stack the red block", stm, mtm, 3);
    REQUIRE(ranked.size() == 3);
    // Exhaustive oracle: compute every Jaccard by hand.
    auto q = token_set("stack the red block");
    double red = jaccard(q, token_set("stacked the red block successfully stack the red block"));
    double tea = jaccard(q, token_set("poured tea into the cup pour tea"));
    double blue = jaccard(q, token_set("stacked the blue block successfully stack the blue block"));
    REQUIRE(red > blue);
    REQUIRE(blue > tea);
    CHECK(ranked[0].find("red") != std::string::npos);
    CHECK(ranked[1].find("blue") != std::string::npos);
    CHECK(ranked[2].find("tea") != std::string::npos);
}

TEST_CASE("equal-similarity snippets prefer the newer entry") {
    ShortTermMemory stm;
    stm.record(outcome(10.0, "sorted trash bin alpha", "task"));
    stm.record(outcome(50.0, "sorted trash bin omega", "task"));
    MediumTermMemory mtm;
    std::vector<std::string> ranked = rank_memory_snippets("sorted trash bin", stm, mtm, 1);
    REQUIRE(ranked.size() == 1);
    CHECK(ranked[0] == "sorted trash bin omega");
}
