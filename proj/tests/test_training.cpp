#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "pamas/pamas.hpp"
#include "test_helpers.hpp"

using namespace pamas;
using helpers::make_instances;
using helpers::make_test_auditors;
using helpers::make_test_dm;
using helpers::uniform_specs;

namespace {

class FailingBackend : public SimulatedBackend {
public:
    FailingBackend(SimulatedSpecSet specs, std::uint64_t seed,
                   std::string fail_agent)
        : SimulatedBackend(std::move(specs), seed),
          fail_agent_(std::move(fail_agent)) {}

    Judgment judge(const JudgeContext& ctx) override {
        if (ctx.agent_id == fail_agent_)
            throw BackendError("injected failure");
        return SimulatedBackend::judge(ctx);
    }

private:
    std::string fail_agent_;
};

ExperienceFragment frag_with(std::vector<double> e, const std::string& text) {
    ExperienceFragment f;
    f.text = text;
    f.embedding = std::move(e);
    return f;
}

}  // namespace

TEST_CASE("confidence_update implements the EMA rule") {
    SECTION("hand case: w=1, alpha=0.3, f_ref=hist=1 gives 1.3") {
        REQUIRE(confidence_update(1.0, 1.0, 1.0, 0.3) ==
                Catch::Approx(1.3).margin(1e-15));
    }
    SECTION("alpha 0 leaves the weight unchanged") {
        REQUIRE(confidence_update(0.83, 0.0, 1.0, 0.0) == 0.83);
    }
    SECTION("geometric convergence toward the constant target") {
        Rng rng(2718);
        for (int round = 0; round < 100; ++round) {
            double alpha = 0.05 + 0.9 * rng.uniform();
            double c = 2.0 * rng.uniform();
            double w0 = 2.0 * rng.uniform();
            double w = w0;
            for (int t = 1; t <= 50; ++t) {
                w = confidence_update(w, c / 2.0, c / 2.0, alpha);
                double want = std::pow(1.0 - alpha, t) * std::abs(w0 - c);
                REQUIRE_THAT(std::abs(w - c),
                             Catch::Matchers::WithinAbs(want, 1e-12));
            }
        }
    }
    SECTION("weights stay in [0,2] forever from w0 = 1") {
        Rng rng(99);
        double w = 1.0;
        for (int t = 0; t < 2000; ++t) {
            w = confidence_update(w, rng.uniform(), rng.uniform(),
                                  0.05 + 0.9 * rng.uniform());
            REQUIRE(w >= 0.0);
            REQUIRE(w <= 2.0);
        }
    }
    SECTION("out-of-range terms are rejected") {
        REQUIRE_THROWS_AS(confidence_update(1.0, 1.5, 0.5, 0.3), DataError);
        REQUIRE_THROWS_AS(confidence_update(1.0, 0.5, -0.1, 0.3), DataError);
        REQUIRE_THROWS_AS(confidence_update(1.0, 0.5, 0.5, 1.5), DataError);
        REQUIRE_THROWS_AS(confidence_update(-1.0, 0.5, 0.5, 0.3), DataError);
    }
}

TEST_CASE("dm_self_learning appends one fragment per labeled instance") {
    SimulatedBackend backend(uniform_specs(0.8), 31);
    AgentNode dm = make_test_dm(4);
    auto instances = make_instances(10, 4, 31);

    dm_self_learning(dm, backend, instances);
    REQUIRE(dm.experience->size() == 10);
    for (const auto& f : dm.experience->fragments()) {
        REQUIRE(f.origin == FragmentOrigin::SelfLearned);
        REQUIRE_NOTHROW(f.validate(backend.embedding_dim()));
    }
    REQUIRE(dm.actions.size() == 10);
    REQUIRE(dm.actions.records().front().mode == ActionMode::SelfLearning);

    SECTION("zero instances leave the memory unchanged") {
        AgentNode fresh = make_test_dm(4);
        dm_self_learning(fresh, backend, {});
        REQUIRE(fresh.experience->empty());
    }
    SECTION("fragment texts are deterministic under the seed") {
        SimulatedBackend b2(uniform_specs(0.8), 31);
        AgentNode dm2 = make_test_dm(4);
        dm_self_learning(dm2, b2, instances);
        for (std::size_t i = 0; i < dm.experience->size(); ++i)
            REQUIRE(dm.experience->fragments()[i].text ==
                    dm2.experience->fragments()[i].text);
    }
    SECTION("unlabeled instances are a caller error") {
        Instance bad = instances[0];
        bad.label = std::nullopt;
        AgentNode fresh = make_test_dm(4);
        REQUIRE_THROWS_AS(dm_self_learning(fresh, backend, {bad}), DataError);
    }
}

TEST_CASE("top-k retrieval ranks by cosine with insertion-order ties") {
    SECTION("orthogonal pool, query equals one element") {
        std::vector<ExperienceFragment> frags;
        frags.push_back(frag_with({1, 0, 0, 0}, "e0"));
        frags.push_back(frag_with({0, 1, 0, 0}, "e1"));
        frags.push_back(frag_with({0, 0, 1, 0}, "e2"));
        std::vector<const ExperienceFragment*> pool;
        for (auto& f : frags) pool.push_back(&f);
        auto got = top_k_by_cosine(pool, {0, 1, 0, 0}, 1);
        REQUIRE(got == std::vector<std::size_t>{1});
    }
    SECTION("k larger than the pool returns everything") {
        std::vector<ExperienceFragment> frags;
        frags.push_back(frag_with({1, 0}, "a"));
        frags.push_back(frag_with({0, 1}, "b"));
        std::vector<const ExperienceFragment*> pool;
        for (auto& f : frags) pool.push_back(&f);
        REQUIRE(top_k_by_cosine(pool, {1, 0}, 10).size() == 2);
    }
    SECTION("ties resolve by insertion order") {
        std::vector<ExperienceFragment> frags;
        frags.push_back(frag_with({0, 1}, "first"));
        frags.push_back(frag_with({0, 1}, "second"));
        std::vector<const ExperienceFragment*> pool;
        for (auto& f : frags) pool.push_back(&f);
        auto got = top_k_by_cosine(pool, {0, 1}, 1);
        REQUIRE(got == std::vector<std::size_t>{0});
    }
}

TEST_CASE("auditor bootstrap distills the k nearest DM fragments") {
    SimulatedBackend backend(uniform_specs(0.8), 47);
    AgentNode dm = make_test_dm(4);
    auto instances = make_instances(20, 4, 47);
    dm_self_learning(dm, backend, instances);
    REQUIRE(dm.experience->size() == 20);

    AgentNode auditor = make_test_auditors(1, 4)[0];
    std::vector<std::string> log;
    auditor_bootstrap(auditor, *dm.experience, backend, 5, nullptr, &log);

    REQUIRE(auditor.experience->size() == 1);
    REQUIRE(auditor.experience->fragments()[0].origin ==
            FragmentOrigin::Retrieved);
    REQUIRE(auditor.consumed_fragment_ids.size() == 5);

    SECTION("retrieval matches the exhaustive cosine ranking oracle") {
        std::vector<std::vector<double>> pool;
        for (const auto& f : dm.experience->fragments())
            pool.push_back(f.embedding);
        auto query = backend.embed(
            render_feature_names(auditor.profile.feature_subset), "probe");
        auto want_idx = oracles::brute_top_k(pool, query, 5);
        std::set<std::uint64_t> want_ids;
        for (auto i : want_idx)
            want_ids.insert(dm.experience->fragments()[i].id);
        REQUIRE(auditor.consumed_fragment_ids == want_ids);
    }
    SECTION("k beyond memory size retrieves all and warns") {
        AgentNode a2 = make_test_auditors(1, 4)[0];
        std::vector<std::string> log2;
        auditor_bootstrap(a2, *dm.experience, backend, 100, nullptr, &log2);
        REQUIRE(a2.consumed_fragment_ids.size() == 20);
        REQUIRE_FALSE(log2.empty());
        REQUIRE(log2.front().find("retrieving all") != std::string::npos);
    }
    SECTION("an empty DM memory is a precondition failure") {
        ExperienceMemory empty;
        AgentNode a3 = make_test_auditors(1, 4)[0];
        REQUIRE_THROWS_AS(auditor_bootstrap(a3, empty, backend, 3), DataError);
    }
}

TEST_CASE("auditor epoch refresh excludes already-distilled fragments") {
    SimulatedSpecSet specs = uniform_specs(0.8);
    SimulatedBackend backend(specs, 7, 4);  // 4-dim embeddings for hand data

    AgentNode dm = make_test_dm(4);
    double n = std::sqrt(0.81 + 0.19);
    dm.experience->append(frag_with({1, 0, 0, 0}, "t1"));
    std::uint64_t id1 = dm.experience->fragments().back().id;
    dm.experience->append(frag_with({0, 1, 0, 0}, "t2"));
    dm.experience->append(
        frag_with({0.9 / n, 0, std::sqrt(0.19) / n, 0}, "t3"));
    std::uint64_t id3 = dm.experience->fragments().back().id;

    AgentNode auditor = make_test_auditors(1, 4)[0];
    auditor.experience->append(frag_with({1, 0, 0, 0}, "own"));
    auditor.consumed_fragment_ids.insert(id1);  // nearest is excluded

    auditor_epoch_refresh(auditor, *dm.experience, backend, 1);
    // t1 excluded; t3 (cos 0.9) beats t2 (cos 0).
    REQUIRE(auditor.consumed_fragment_ids.count(id3) == 1);
    REQUIRE(auditor.experience->size() == 2);
    REQUIRE(auditor.experience->fragments().back().text.find("t3") !=
            std::string::npos);

    SECTION("empty auditor memory falls back to the bootstrap query") {
        AgentNode fresh = make_test_auditors(1, 4)[0];
        auditor_epoch_refresh(fresh, *dm.experience, backend, 2);
        REQUIRE(fresh.experience->size() == 1);
        REQUIRE(fresh.consumed_fragment_ids.size() == 2);
    }
    SECTION("empty DM memory is a logged no-op") {
        ExperienceMemory empty;
        AgentNode fresh = make_test_auditors(1, 4)[0];
        std::vector<std::string> log;
        auditor_epoch_refresh(fresh, empty, backend, 2, nullptr, &log);
        REQUIRE(fresh.experience->empty());
        REQUIRE_FALSE(log.empty());
    }
    SECTION("fully consumed DM memory is a logged no-op") {
        std::vector<std::string> log;
        AgentNode done = make_test_auditors(1, 4)[0];
        for (const auto& f : dm.experience->fragments())
            done.consumed_fragment_ids.insert(f.id);
        auditor_epoch_refresh(done, *dm.experience, backend, 2, nullptr, &log);
        REQUIRE(done.experience->empty());
        REQUIRE_FALSE(log.empty());
    }
}

TEST_CASE("forward pass activates every agent and logs one record each") {
    helpers::SmallWorld world(4, {2}, 12, 8, uniform_specs(1.0), 21);
    Hierarchy& h = world.hierarchy;

    std::map<std::string, std::size_t> before;
    for (const auto& layer : h.layers)
        for (const auto& id : layer) before[id] = h.node(id).actions.size();

    Instance x = world.train[0];
    ForwardTrace trace = forward_pass(h, world.backend, x);
    REQUIRE_FALSE(trace.failed);
    REQUIRE(trace.entries.size() == 4 + 2 + 1);

    SECTION("perfect agents propagate the label unanimously") {
        for (const auto& [id, entry] : trace.entries)
            REQUIRE(entry.decision == *x.label);
        REQUIRE(trace.final_decision == *x.label);
    }
    SECTION("each agent logged exactly one forward record") {
        for (const auto& layer : h.layers)
            for (const auto& id : layer) {
                const auto& recs = h.node(id).actions.records();
                REQUIRE(recs.size() == before[id] + 1);
                REQUIRE(recs.back().instance_id == x.id);
                REQUIRE(recs.back().mode == ActionMode::Forward);
            }
    }
    SECTION("coordinator records snapshot votes and weights") {
        const std::string cid = h.layers[1][0];
        const auto& rec = h.node(cid).actions.records().back();
        REQUIRE(rec.votes.size() == h.children(cid).size());
        for (const auto& v : rec.votes) REQUIRE(v.weight == 1.0);
    }
    SECTION("decision-maker record carries the direct vote for replay") {
        const auto& rec = h.dm().actions.records().back();
        REQUIRE(rec.votes.size() == h.children("dm").size() + 1);
        REQUIRE(rec.votes.back().voter_id == "dm");
    }
}

TEST_CASE("forward pass equals the composed vote arithmetic") {
    helpers::SmallWorld world(8, {3, 2}, 10, 10, uniform_specs(0.65), 77);
    Hierarchy& h = world.hierarchy;

    for (const auto& x : world.train) {
        ForwardTrace trace = forward_core(h, world.backend, x, false);

        std::map<std::string, int> decision;
        for (const auto& id : h.layers[0])
            decision[id] = trace.entries.at(id).decision;
        for (std::size_t l = 1; l + 1 < h.layers.size(); ++l) {
            for (const auto& cid : h.layers[l]) {
                std::vector<oracles::VoteRow> rows;
                for (const auto& child : h.children(cid))
                    rows.push_back({child, decision.at(child),
                                    h.node(cid).confidence->get(child)});
                decision[cid] = oracles::brute_weighted_vote(rows);
                REQUIRE(trace.entries.at(cid).decision == decision[cid]);
            }
        }
        int truth = world.backend.hidden_label(x.id, x.label);
        int direct =
            world.backend.sim_decision("dm", x.id, "synthesize", truth);
        std::vector<oracles::VoteRow> top;
        for (const auto& child : h.children("dm"))
            top.push_back({child, decision.at(child),
                           h.dm().confidence->get(child)});
        top.push_back({"dm", direct, 1.0});
        REQUIRE(trace.final_decision == oracles::brute_weighted_vote(top));
    }
}

TEST_CASE("a backend failure marks the trace and the record") {
    SimulatedSpecSet specs = uniform_specs(1.0);
    auto auditors = make_test_auditors(4, 6);
    auto train = make_instances(6, 6, 5);
    auto val = make_instances(6, 6, 6);
    SimulatedBackend clean(specs, 5);
    Hyperparameters hp;
    hp.seed = 5;
    hp.layer_spec = {2};
    InitResult init = initialize_hierarchy(auditors, make_test_dm(6), clean,
                                           train, val, hp);
    Hierarchy h = std::move(init.hierarchy);

    FailingBackend failing(specs, 5, h.layers[0][1]);
    ForwardTrace trace = forward_pass(h, failing, train[0]);
    REQUIRE(trace.failed);
    REQUIRE(trace.failure.find("injected failure") != std::string::npos);
    const auto& recs = h.node(h.layers[0][1]).actions.records();
    REQUIRE_FALSE(recs.empty());
    REQUIRE(recs.back().failed);
}

TEST_CASE("targeted correction applies the EMA exactly where it should") {
    Hierarchy h = helpers::manual_hierarchy(
        {{"c1", {"a1", "a2"}}, {"c2", {"a3", "a4"}}}, {});
    SimulatedBackend backend(uniform_specs(1.0), 3);
    Hyperparameters hp;
    hp.alpha = 0.3;
    Trainer trainer(h, backend, hp);
    trainer.state().hist["c1"] = 1.0;
    trainer.state().hist["c2"] = 0.5;
    trainer.state().hist["a3"] = 0.25;
    trainer.state().hist["a4"] = 0.25;

    Instance x;
    x.id = "u7";
    x.label = 1;
    for (auto& n : helpers::feature_names(4)) x.features.add(n, 1.0);

    ForwardTrace trace;
    trace.instance_id = "u7";
    trace.label = 1;
    trace.final_decision = 0;  // wrong
    trace.final_reason = "r";
    auto entry = [&](const std::string& id, Role role, int d,
                     std::vector<Vote> votes) {
        TraceEntry e;
        e.agent_id = id;
        e.role = role;
        e.decision = d;
        e.reason = "r";
        e.votes = std::move(votes);
        trace.entries[id] = e;
    };
    entry("a1", Role::Auditor, 1, {});
    entry("a2", Role::Auditor, 1, {});
    entry("a3", Role::Auditor, 0, {});
    entry("a4", Role::Auditor, 1, {});
    entry("c1", Role::Coordinator, 1,
          {{"a1", 1, 1.0, "r"}, {"a2", 1, 1.0, "r"}});
    entry("c2", Role::Coordinator, 0,
          {{"a3", 0, 1.0, "r"}, {"a4", 1, 1.0, "r"}});
    entry("dm", Role::DecisionMaker, 0,
          {{"c1", 1, 1.0, "r"}, {"c2", 0, 1.0, "r"}, {"dm", 0, 1.0, "r"}});

    CorrectionReport rep = trainer.targeted_correction(x, trace);

    SECTION("decision-maker weights follow the hand evaluation") {
        REQUIRE(h.dm().confidence->get("c1") == Catch::Approx(1.3));
        REQUIRE(h.dm().confidence->get("c2") == Catch::Approx(0.85));
    }
    SECTION("only erring agents correct themselves") {
        REQUIRE(rep.corrected_agents == std::vector<std::string>{"dm", "c2"});
        for (const auto& [id, d] : rep.agent_decisions) REQUIRE(d != 1);
        // c1 was right: its children keep their weights.
        REQUIRE(h.node("c1").confidence->get("a1") == 1.0);
        REQUIRE(h.node("c1").confidence->get("a2") == 1.0);
        // c2 was wrong: both children updated per the rule.
        REQUIRE(h.node("c2").confidence->get("a3") ==
                Catch::Approx(0.7 + 0.3 * (0.0 + 0.25)));
        REQUIRE(h.node("c2").confidence->get("a4") ==
                Catch::Approx(0.7 + 0.3 * (1.0 + 0.25)));
    }
    SECTION("the decision-maker reflects once") {
        REQUIRE(rep.fragments_appended == 1);
        REQUIRE(h.dm().experience->size() == 1);
        REQUIRE(h.dm().experience->fragments()[0].origin ==
                FragmentOrigin::Reflected);
    }
    SECTION("a correct final decision leaves everything untouched") {
        ForwardTrace good = trace;
        good.final_decision = 1;
        Hierarchy h2 = helpers::manual_hierarchy(
            {{"c1", {"a1", "a2"}}, {"c2", {"a3", "a4"}}}, {});
        Trainer t2(h2, backend, hp);
        CorrectionReport rep2 = t2.targeted_correction(x, good);
        REQUIRE(rep2.empty());
        REQUIRE(h2.dm().experience->empty());
        REQUIRE(h2.dm().confidence->get("c1") == 1.0);
    }
}

namespace {

// Stands in for a live backend whose refine reply carries per-child trust
// adjustments.
class AdjustingBackend : public SimulatedBackend {
public:
    using SimulatedBackend::SimulatedBackend;
    std::map<std::string, double> adjustments;

    Reflection self_reflect(const ReflectContext& ctx) override {
        Reflection out = SimulatedBackend::self_reflect(ctx);
        if (!ctx.child_votes.empty()) out.child_f_ref = adjustments;
        return out;
    }
};

}  // namespace

TEST_CASE("parsed refine adjustments override the match indicator") {
    Hierarchy h = helpers::manual_hierarchy(
        {{"c1", {"a1", "a2"}}, {"c2", {"a3", "a4"}}}, {});
    AdjustingBackend backend(helpers::uniform_specs(1.0), 3);
    backend.adjustments = {{"c1", 0.4}, {"c2", 0.6}};
    Hyperparameters hp;
    hp.alpha = 0.3;
    Trainer trainer(h, backend, hp);
    trainer.state().hist["c1"] = 1.0;
    trainer.state().hist["c2"] = 0.5;

    Instance x;
    x.id = "u8";
    x.label = 1;
    for (auto& n : helpers::feature_names(4)) x.features.add(n, 1.0);

    ForwardTrace trace;
    trace.instance_id = "u8";
    trace.label = 1;
    trace.final_decision = 0;
    TraceEntry dm_entry;
    dm_entry.agent_id = "dm";
    dm_entry.role = Role::DecisionMaker;
    dm_entry.decision = 0;
    dm_entry.votes = {{"c1", 1, 1.0, "r"}, {"c2", 0, 1.0, "r"},
                      {"dm", 0, 1.0, "r"}};
    trace.entries["dm"] = dm_entry;

    trainer.targeted_correction(x, trace);
    // f_ref comes from the reply (0.4 / 0.6), not the indicator (1 / 0).
    REQUIRE(h.dm().confidence->get("c1") ==
            Catch::Approx(0.7 + 0.3 * (0.4 + 1.0)));
    REQUIRE(h.dm().confidence->get("c2") ==
            Catch::Approx(0.7 + 0.3 * (0.6 + 0.5)));
}

TEST_CASE("training loop is deterministic and errors-only") {
    auto run_once = [](double accuracy) {
        auto world = std::make_unique<helpers::SmallWorld>(
            6, std::vector<int>{3, 2}, 24, 10, uniform_specs(accuracy), 2024);
        TrainOptions opt;
        opt.batch_size = 8;
        opt.adapt = true;
        Hyperparameters hp;
        hp.seed = 2024;
        hp.layer_spec = {3, 2};
        auto trainer = std::make_unique<Trainer>(world->hierarchy,
                                                 world->backend, hp, opt);
        trainer->run_epochs(world->train, world->val, 2);
        return std::make_pair(std::move(world), std::move(trainer));
    };

    SECTION("perfect agents need zero corrections") {
        auto [world, trainer] = run_once(1.0);
        REQUIRE(trainer->state().corrections.empty());
        for (const auto& em : trainer->state().history) {
            REQUIRE(em.corrected_instances == 0);
            REQUIRE(em.correction_tokens == 0);
            REQUIRE(em.validation.accuracy == 1.0);
        }
    }
    SECTION("identical runs produce identical histories") {
        auto [w1, t1] = run_once(0.7);
        auto [w2, t2] = run_once(0.7);
        REQUIRE(to_json(t1->state()).dump() == to_json(t2->state()).dump());
        REQUIRE(t1->state().epochs_done == 2);
    }
    SECTION("corrections only happen on wrong final decisions") {
        auto [world, trainer] = run_once(0.6);
        REQUIRE_FALSE(trainer->state().corrections.empty());
        for (const auto& rep : trainer->state().corrections) {
            REQUIRE(rep.final_decision != rep.truth);
            for (const auto& [agent, d] : rep.agent_decisions)
                REQUIRE(d != rep.truth);
        }
    }
    SECTION("epoch target zero is a no-op") {
        auto world = std::make_unique<helpers::SmallWorld>(
            6, std::vector<int>{3, 2}, 24, 10, uniform_specs(0.7), 2024);
        Hyperparameters hp;
        hp.seed = 2024;
        hp.layer_spec = {3, 2};
        Trainer trainer(world->hierarchy, world->backend, hp);
        trainer.run_epochs(world->train, world->val, 0);
        REQUIRE(trainer.state().epochs_done == 0);
        REQUIRE(trainer.state().history.empty());
    }
}

TEST_CASE("logged decisions replay exactly from action memories") {
    helpers::SmallWorld world(6, {3, 2}, 20, 10, uniform_specs(0.65), 404);
    Hyperparameters hp;
    hp.seed = 404;
    hp.layer_spec = {3, 2};
    TrainOptions opt;
    opt.batch_size = 10;
    Trainer trainer(world.hierarchy, world.backend, hp, opt);
    trainer.run_epochs(world.train, world.val, 1);

    std::size_t replayed = 0;
    for (const auto& [id, node] : world.hierarchy.nodes) {
        for (const auto& rec : node.actions.records()) {
            if (rec.failed || rec.votes.empty()) continue;
            double s = 0.0;
            for (const auto& v : rec.votes)
                s += v.weight * (2 * v.decision - 1);
            REQUIRE(rec.decision == (s > 0.0 ? 1 : 0));
            ++replayed;
        }
    }
    REQUIRE(replayed > 0);
}

TEST_CASE("probe_validation propagates auditor bits through the weights") {
    helpers::SmallWorld world(4, {2}, 10, 6, uniform_specs(0.7), 11);
    Hyperparameters hp;
    hp.seed = 11;
    hp.layer_spec = {2};
    Trainer trainer(world.hierarchy, world.backend, hp);
    ValidationEval ev = trainer.probe_validation(world.val);

    Hierarchy& h = world.hierarchy;
    for (const auto& cid : h.layers[1]) {
        const auto& kids = h.children(cid);
        for (std::size_t t = 0; t < ev.labels.size(); ++t) {
            double s = 0.0;
            for (const auto& k : kids)
                s += h.node(cid).confidence->get(k) *
                     (2 * ev.vector_of(k).bits[t] - 1);
            REQUIRE(ev.vector_of(cid).bits[t] == (s > 0.0 ? 1 : 0));
        }
    }
    for (const auto& r : h.reserve_auditors)
        REQUIRE(ev.vectors.count(r) == 1);
}
