#include <catch2/catch_amalgamated.hpp>

#include "pamas/pamas.hpp"
#include "test_helpers.hpp"

using namespace pamas;
using helpers::uniform_specs;

namespace {

Judgment judge_once(SimulatedBackend& b, const std::string& agent,
                    const std::string& instance, int label) {
    Features view;
    view.add("f0", 1.0);
    Profile prof{"", {"f0"}};
    JudgeContext ctx;
    ctx.agent_id = agent;
    ctx.instance_id = instance;
    ctx.view = &view;
    ctx.profile = &prof;
    ctx.hidden_label = label;
    return b.judge(ctx);
}

}  // namespace

TEST_CASE("simulated judgments are deterministic and order-independent") {
    SimulatedBackend b1(uniform_specs(0.7), 42);
    SimulatedBackend b2(uniform_specs(0.7), 42);
    std::vector<int> first, second;
    for (int i = 0; i < 50; ++i)
        first.push_back(judge_once(b1, "a", "x" + std::to_string(i), 1).decision);
    for (int i = 49; i >= 0; --i)
        second.push_back(judge_once(b2, "a", "x" + std::to_string(i), 1).decision);
    std::reverse(second.begin(), second.end());
    REQUIRE(first == second);

    SECTION("a different seed changes the pattern") {
        SimulatedBackend b3(uniform_specs(0.7), 43);
        std::vector<int> third;
        for (int i = 0; i < 50; ++i)
            third.push_back(
                judge_once(b3, "a", "x" + std::to_string(i), 1).decision);
        REQUIRE(first != third);
    }
}

TEST_CASE("perfect and anti-perfect simulated agents") {
    SimulatedBackend perfect(uniform_specs(1.0), 9);
    SimulatedBackend anti(uniform_specs(0.0), 9);
    for (int i = 0; i < 20; ++i) {
        std::string id = "x" + std::to_string(i);
        REQUIRE(judge_once(perfect, "a", id, 0).decision == 0);
        REQUIRE(judge_once(perfect, "a", id, 1).decision == 1);
        REQUIRE(judge_once(anti, "a", id, 0).decision == 1);
        REQUIRE(judge_once(anti, "a", id, 1).decision == 0);
    }
}

TEST_CASE("empirical accuracy converges to base accuracy") {
    for (double base : {0.3, 0.7, 0.9}) {
        SimulatedBackend b(uniform_specs(base), 1234);
        int hits = 0;
        const int n = 1000;
        for (int i = 0; i < n; ++i) {
            int label = i % 2;
            if (judge_once(b, "agent", "v" + std::to_string(i), label)
                    .decision == label)
                ++hits;
        }
        double emp = double(hits) / n;
        INFO("base " << base << " empirical " << emp);
        REQUIRE(std::abs(emp - base) < 0.05);
    }
}

TEST_CASE("correlation groups share error patterns") {
    SimulatedSpecSet specs;
    specs.default_spec.base_accuracy = 0.7;
    SimulatedAgentSpec grouped;
    grouped.base_accuracy = 0.7;
    grouped.correlation_group = "g";
    grouped.corr_strength = 1.0;
    specs.per_agent["a1"] = grouped;
    specs.per_agent["a2"] = grouped;
    SimulatedAgentSpec loose = grouped;
    loose.corr_strength = 0.0;
    specs.per_agent["a3"] = loose;

    SimulatedBackend b(specs, 77);
    std::vector<int> p1, p2, p3;
    for (int i = 0; i < 200; ++i) {
        std::string id = "x" + std::to_string(i);
        int label = i % 2;
        p1.push_back(judge_once(b, "a1", id, label).decision);
        p2.push_back(judge_once(b, "a2", id, label).decision);
        p3.push_back(judge_once(b, "a3", id, label).decision);
    }
    REQUIRE(p1 == p2);   // strength 1.0: identical patterns
    REQUIRE(p1 != p3);   // independent agent diverges somewhere
}

TEST_CASE("deterministic embedder produces stable unit vectors") {
    HashEmbedder e(11, 32);
    auto v1 = e.embed("suspiciously repetitive reviews");
    auto v2 = e.embed("suspiciously repetitive reviews");
    REQUIRE(v1 == v2);

    double norm = 0.0, dot = 0.0;
    for (std::size_t i = 0; i < v1.size(); ++i) {
        norm += v1[i] * v1[i];
        dot += v1[i] * v2[i];
    }
    REQUIRE(std::abs(std::sqrt(norm) - 1.0) <= 1e-9);
    REQUIRE(dot == Catch::Approx(1.0).margin(1e-12));

    REQUIRE(e.embed("abc") != e.embed("xyz"));
    REQUIRE_THROWS_AS(e.embed(""), DataError);

    SECTION("tokenization normalizes case and punctuation") {
        REQUIRE(e.embed("Fake, Reviews!") == e.embed("fake reviews"));
    }
}

TEST_CASE("reply parser extracts the decision contract leniently") {
    SECTION("paper-style single line") {
        auto j = parse_agent_reply(
            "User: 1327, Decision: 1, Reason: reviews are excessively "
            "repetitive and sentimentally exaggerated");
        REQUIRE(j.has_value());
        REQUIRE(j->decision == 1);
        REQUIRE(j->reason ==
                "reviews are excessively repetitive and sentimentally "
                "exaggerated");
    }
    SECTION("multi-line and markup variants") {
        auto j = parse_agent_reply(
            "Here is my analysis.\nDecision: **0**\nReason: consistent review "
            "lengths\n");
        REQUIRE(j.has_value());
        REQUIRE(j->decision == 0);
        REQUIRE(j->reason == "consistent review lengths");
    }
    SECTION("first decision wins, last reason wins") {
        auto j = parse_agent_reply(
            "Decision: 1, Reason: first\nDecision: 0, Reason: second");
        REQUIRE(j->decision == 1);
        REQUIRE(j->reason == "second");
    }
    SECTION("missing reason falls back to placeholder") {
        auto j = parse_agent_reply("decision: 1");
        REQUIRE(j.has_value());
        REQUIRE(j->reason == "no reason given");
    }
    SECTION("no parseable decision is a failure, never a default") {
        REQUIRE_FALSE(parse_agent_reply("the user looks fine").has_value());
        REQUIRE_FALSE(parse_agent_reply("Decision: maybe").has_value());
        REQUIRE_FALSE(parse_agent_reply("").has_value());
    }
}

TEST_CASE("per-child adjustments parse from refine replies") {
    std::vector<std::string> ids = {"coord-1-00", "coord-1-01", "coord-1-02"};
    SECTION("weights line with separators and noise") {
        auto got = parse_child_adjustments(
            "Weights: coord-1-00=0.8, coord-1-01: 0.35\n"
            "New Experience: sharpen sentiment checks",
            ids);
        REQUIRE(got.size() == 2);
        REQUIRE(got.at("coord-1-00") == 0.8);
        REQUIRE(got.at("coord-1-01") == 0.35);
        REQUIRE(got.count("coord-1-02") == 0);
    }
    SECTION("out-of-range values are dropped") {
        auto got = parse_child_adjustments("coord-1-00 -> 1.7", ids);
        REQUIRE(got.empty());
    }
    SECTION("absent ids fall back upstream") {
        REQUIRE(parse_child_adjustments("no numbers here", ids).empty());
    }
}

TEST_CASE("simulated synthesize folds a direct judgment at weight 1") {
    SimulatedBackend b(uniform_specs(1.0), 5);
    Features full;
    full.add("f0", 1.0);
    SynthContext sc;
    sc.agent_id = "dm";
    sc.instance_id = "x1";
    sc.full_view = &full;
    sc.hidden_label = 1;  // perfect accuracy: direct judgment is 1

    SECTION("unanimous summaries") {
        sc.summaries = {{"c1", 1, 0.9, "r1"}, {"c2", 1, 0.8, "r2"}};
        Synthesis out = b.synthesize(sc);
        REQUIRE(out.judgment.decision == 1);
        REQUIRE(out.votes.size() == 3);
        REQUIRE(out.votes.back().voter_id == "dm");
        REQUIRE(out.votes.back().weight == 1.0);
        REQUIRE(out.signed_sum == Catch::Approx(0.9 + 0.8 + 1.0));
    }
    SECTION("hand-evaluated split vote") {
        sc.summaries = {{"c1", 1, 0.73, "r1"}, {"c2", 0, 0.41, "r2"}};
        Synthesis out = b.synthesize(sc);
        REQUIRE(out.signed_sum == Catch::Approx(0.73 - 0.41 + 1.0));
        REQUIRE(out.judgment.decision == 1);
    }
    SECTION("empty summaries reduce to the direct judgment") {
        Synthesis out = b.synthesize(sc);
        REQUIRE(out.votes.size() == 1);
        REQUIRE(out.judgment.decision == 1);
    }
    SECTION("repeat calls agree (order independence)") {
        sc.summaries = {{"c1", 1, 0.73, "r1"}, {"c2", 0, 0.41, "r2"}};
        Synthesis a = b.synthesize(sc);
        Synthesis c = b.synthesize(sc);
        REQUIRE(a.judgment.decision == c.judgment.decision);
        REQUIRE(a.signed_sum == c.signed_sum);
    }
}

TEST_CASE("simulated reflection templates") {
    SimulatedBackend b(uniform_specs(1.0), 5);
    SECTION("missed positive") {
        ReflectContext rc;
        rc.agent_id = "dm";
        rc.instance_id = "u9";
        rc.feature_names = {"a", "b"};
        rc.predicted = 0;
        rc.truth = 1;
        ExperienceFragment f = b.self_reflect(rc).fragment;
        REQUIRE(f.text.rfind("missed-positive on features", 0) == 0);
        REQUIRE_NOTHROW(f.validate(b.embedding_dim()));
    }
    SECTION("false positive") {
        ReflectContext rc;
        rc.agent_id = "dm";
        rc.instance_id = "u9";
        rc.feature_names = {"a"};
        rc.predicted = 1;
        rc.truth = 0;
        REQUIRE(b.self_reflect(rc).fragment.text.rfind("false-positive", 0) == 0);
    }
    SECTION("fragment merge references every input") {
        ReflectContext rc;
        rc.agent_id = "a0";
        rc.fragment_texts = {"A", "B"};
        ExperienceFragment f = b.self_reflect(rc).fragment;
        REQUIRE(f.text.find("A") != std::string::npos);
        REQUIRE(f.text.find("B") != std::string::npos);
    }
    SECTION("empty context is rejected") {
        ReflectContext rc;
        rc.agent_id = "a0";
        REQUIRE_THROWS_AS(b.self_reflect(rc), DataError);
    }
}

TEST_CASE("token metering is exact and complete") {
    SimulatedBackend b(uniform_specs(1.0, 100), 5);
    REQUIRE(b.meter().total() == 0);

    b.meter().set_phase(Phase::Forward);
    judge_once(b, "a1", "x1", 1);
    judge_once(b, "a2", "x1", 1);
    Features full;
    full.add("f0", 1.0);
    SynthContext sc;
    sc.agent_id = "dm";
    sc.instance_id = "x1";
    sc.full_view = &full;
    sc.hidden_label = 1;
    b.synthesize(sc);

    SECTION("three constant-T calls total 300") {
        REQUIRE(b.meter().total() == 300);
        REQUIRE(b.meter().size() == 3);  // one usage record per call
    }

    SECTION("per-kind and per-agent totals are additive") {
        b.meter().set_phase(Phase::Correction);
        ReflectContext rc;
        rc.agent_id = "dm";
        rc.instance_id = "x1";
        rc.feature_names = {"f0"};
        rc.predicted = 0;
        rc.truth = 1;
        b.self_reflect(rc);  // reflect(T) + embed(0)

        MeterTotals t = b.meter().totals();
        REQUIRE(t.grand == 400);
        REQUIRE(t.per_kind.at("judge") == 200);
        REQUIRE(t.per_kind.at("synthesize") == 100);
        REQUIRE(t.per_kind.at("reflect") == 100);
        REQUIRE(t.per_kind.at("embed") == 0);
        REQUIRE(t.per_agent.at("a1") == 100);
        REQUIRE(t.per_agent.at("dm") == 200);
        REQUIRE(b.meter().total_phase(Phase::Forward) == 300);
        REQUIRE(b.meter().total_phase(Phase::Correction) == 100);
        REQUIRE(b.meter().call_count(Phase::Correction, CallKind::Reflect) == 1);
        REQUIRE(b.meter().call_count(Phase::Correction, CallKind::Embed) == 1);
    }
}
