#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "pamas/pamas.hpp"

namespace helpers {

using namespace pamas;

// Labeled numeric instances with feature names f0..f{k-1}.
inline std::vector<Instance> make_instances(std::size_t n,
                                            std::size_t feature_count,
                                            std::uint64_t seed,
                                            double balance = 0.5) {
    std::vector<Instance> out;
    Rng rng(keyed_hash(seed, "instances"));
    for (std::size_t i = 0; i < n; ++i) {
        Instance x;
        x.id = "x" + padded_index(i, n);
        x.label = rng.uniform() < balance ? 1 : 0;
        for (std::size_t f = 0; f < feature_count; ++f)
            x.features.add("f" + std::to_string(f), rng.uniform());
        out.push_back(std::move(x));
    }
    return out;
}

inline std::vector<std::string> feature_names(std::size_t k) {
    std::vector<std::string> out;
    for (std::size_t f = 0; f < k; ++f) out.push_back("f" + std::to_string(f));
    return out;
}

// Auditors with rotating 2-feature subsets over f0..f{k-1}.
inline std::vector<AgentNode> make_test_auditors(int count,
                                                 std::size_t feature_count,
                                                 std::size_t capacity = 256) {
    std::vector<AgentNode> out;
    auto names = feature_names(feature_count);
    for (int i = 0; i < count; ++i) {
        Profile p;
        p.persona = "test auditor";
        p.feature_subset = {names[i % names.size()],
                            names[(i + 1) % names.size()]};
        out.push_back(make_agent(
            "auditor-" + padded_index(std::size_t(i), std::size_t(count)),
            Role::Auditor, p, capacity));
    }
    return out;
}

inline AgentNode make_test_dm(std::size_t feature_count,
                              std::size_t capacity = 256) {
    Profile p;
    p.persona = "test decision maker";
    p.feature_subset = feature_names(feature_count);
    return make_agent("dm", Role::DecisionMaker, p, capacity);
}

// Fabricated validation results: seeded random prediction vectors.
inline ValidationEval make_validation_eval(
    const std::vector<std::string>& agent_ids, std::size_t n,
    std::uint64_t seed, double accuracy = 0.7) {
    ValidationEval ev;
    Rng rng(keyed_hash(seed, "val"));
    for (std::size_t t = 0; t < n; ++t) {
        ev.instance_ids.push_back("v" + std::to_string(t));
        ev.labels.push_back(rng.uniform() < 0.5 ? 1 : 0);
    }
    for (const auto& id : agent_ids) {
        PredictionVector pv;
        for (std::size_t t = 0; t < n; ++t) {
            bool correct = rng.uniform() < accuracy;
            pv.bits.push_back(
                static_cast<std::uint8_t>(correct ? ev.labels[t]
                                                  : 1 - ev.labels[t]));
        }
        ev.vectors[id] = std::move(pv);
    }
    return ev;
}

inline SimulatedSpecSet uniform_specs(double accuracy,
                                      std::uint64_t token_cost = 100) {
    SimulatedSpecSet set;
    set.token_cost = token_cost;
    set.default_spec.base_accuracy = accuracy;
    return set;
}

// Initialized hierarchy over a small simulated population.
struct SmallWorld {
    std::vector<Instance> train;
    std::vector<Instance> val;
    SimulatedBackend backend;
    Hierarchy hierarchy;

    SmallWorld(int auditors, std::vector<int> layer_spec, std::size_t n_train,
               std::size_t n_val, SimulatedSpecSet specs, std::uint64_t seed,
               std::size_t features = 6)
        : train(make_instances(n_train, features, keyed_hash(seed, "tr"))),
          val(make_instances(n_val, features, keyed_hash(seed, "va"))),
          backend(std::move(specs), seed) {
        Hyperparameters hp;
        hp.seed = seed;
        hp.layer_spec = std::move(layer_spec);
        InitResult init = initialize_hierarchy(
            make_test_auditors(auditors, features), make_test_dm(features),
            backend, train, val, hp);
        hierarchy = std::move(init.hierarchy);
    }
};

// Hand-assembled one-coordinator-layer hierarchy for adaptation tests:
// exact group membership, per-child weights, and reserve pool.
inline Hierarchy manual_hierarchy(
    const std::vector<std::pair<std::string, std::vector<std::string>>>& groups,
    const std::vector<std::string>& reserve,
    const std::map<std::string, double>& child_weights = {},
    std::size_t feature_count = 4) {
    Hierarchy h;
    h.dm_id = "dm";
    auto names = feature_names(feature_count);
    auto add_auditor = [&](const std::string& id) {
        if (h.nodes.count(id)) return;
        Profile p;
        p.persona = "test auditor";
        p.feature_subset = {names[0], names[1]};
        h.nodes.emplace(id, make_agent(id, Role::Auditor, p));
    };

    std::vector<std::string> layer0, layer1;
    AgentNode dm = make_test_dm(feature_count);
    for (const auto& [cid, members] : groups) {
        AgentNode coord = make_agent(cid, Role::Coordinator, Profile{});
        for (const auto& m : members) {
            add_auditor(m);
            layer0.push_back(m);
            double w = child_weights.count(m) ? child_weights.at(m) : 1.0;
            coord.confidence->set(m, w);
        }
        h.edges[cid] = members;
        h.anchors[cid] = members.front();
        h.nodes.emplace(cid, std::move(coord));
        layer1.push_back(cid);
        dm.confidence->set(cid, 1.0);
    }
    for (const auto& r : reserve) add_auditor(r);
    h.reserve_auditors = reserve;
    std::sort(h.reserve_auditors.begin(), h.reserve_auditors.end());
    h.edges["dm"] = layer1;
    h.nodes.emplace("dm", std::move(dm));
    h.layers = {layer0, layer1, {"dm"}};
    return h;
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() /
               ("pamas-test-" + tag + "-" + std::to_string(::getpid()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::string file(const std::string& name) const {
        return (path / name).string();
    }
};

}  // namespace helpers
