#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pamas/aggregation.hpp"
#include "pamas/common.hpp"
#include "pamas/core.hpp"

namespace pamas {

// Per-agent results of a validation sweep: 0/1 predictions in instance order.
struct ValidationEval {
    std::vector<std::string> instance_ids;
    std::vector<int> labels;
    std::map<std::string, PredictionVector> vectors;

    std::size_t size() const { return instance_ids.size(); }

    const PredictionVector& vector_of(const std::string& agent_id) const {
        auto it = vectors.find(agent_id);
        if (it == vectors.end())
            throw DataError("no validation predictions for agent '" + agent_id +
                            "'");
        return it->second;
    }

    double accuracy_of(const std::string& agent_id) const {
        const auto& v = vector_of(agent_id);
        if (v.size() != labels.size())
            throw DataError("prediction vector length mismatch for '" +
                            agent_id + "'");
        if (labels.empty()) return 0.0;
        std::size_t hit = 0;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (v.bits[i] == labels[i]) ++hit;
        return static_cast<double>(hit) / static_cast<double>(labels.size());
    }

    double f1_of(const std::string& agent_id) const {
        const auto& v = vector_of(agent_id);
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (v.bits[i] == 1 && labels[i] == 1) ++tp;
            if (v.bits[i] == 1 && labels[i] == 0) ++fp;
            if (v.bits[i] == 0 && labels[i] == 1) ++fn;
        }
        if (tp == 0) return 0.0;
        double p = static_cast<double>(tp) / static_cast<double>(tp + fp);
        double r = static_cast<double>(tp) / static_cast<double>(tp + fn);
        return 2.0 * p * r / (p + r);
    }
};

// ---------------------------------------------------------------------------
// Agglomerative clustering: average linkage under cosine distance between
// prediction vectors. Deterministic: the scan picks the minimum-distance pair
// with the smallest (i, j) cluster indices on ties.
// ---------------------------------------------------------------------------

inline std::vector<std::vector<std::size_t>> agglomerate(
    const std::vector<const PredictionVector*>& vecs, std::size_t target) {
    const std::size_t n = vecs.size();
    if (n == 0) throw DataError("clustering: no prediction vectors");
    if (target < 1 || target > n)
        throw DataError("clustering: target count out of range");
    for (const auto* v : vecs)
        if (!v || v->size() == 0)
            throw DataError("clustering: empty validation set");

    std::vector<std::vector<double>> dist(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            dist[i][j] = dist[j][i] = 1.0 - prediction_cosine(*vecs[i], *vecs[j]);

    std::vector<std::vector<std::size_t>> clusters;
    clusters.reserve(n);
    for (std::size_t i = 0; i < n; ++i) clusters.push_back({i});

    while (clusters.size() > target) {
        double best = 0.0;
        std::size_t bi = 0, bj = 0;
        bool found = false;
        for (std::size_t a = 0; a < clusters.size(); ++a) {
            for (std::size_t b = a + 1; b < clusters.size(); ++b) {
                double sum = 0.0;
                for (std::size_t i : clusters[a])
                    for (std::size_t j : clusters[b]) sum += dist[i][j];
                double avg = sum / static_cast<double>(clusters[a].size() *
                                                       clusters[b].size());
                if (!found || avg < best) {
                    best = avg;
                    bi = a;
                    bj = b;
                    found = true;
                }
            }
        }
        clusters[bi].insert(clusters[bi].end(), clusters[bj].begin(),
                            clusters[bj].end());
        clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bj));
    }
    return clusters;
}

inline std::vector<std::vector<std::string>> cluster_by_predictions(
    const std::vector<std::string>& ids, const ValidationEval& val,
    std::size_t target) {
    std::vector<const PredictionVector*> vecs;
    vecs.reserve(ids.size());
    for (const auto& id : ids) vecs.push_back(&val.vector_of(id));
    auto idx_clusters = agglomerate(vecs, target);
    std::vector<std::vector<std::string>> out;
    out.reserve(idx_clusters.size());
    for (const auto& c : idx_clusters) {
        std::vector<std::string> members;
        members.reserve(c.size());
        for (std::size_t i : c) members.push_back(ids[i]);
        out.push_back(std::move(members));
    }
    return out;
}

// Highest validation F1 wins; ties go to the lowest id.
inline std::string select_anchor(const std::vector<std::string>& cluster,
                                 const std::map<std::string, double>& f1) {
    if (cluster.empty()) throw DataError("anchor selection on empty cluster");
    const std::string* best = nullptr;
    double best_f1 = -1.0;
    for (const auto& id : cluster) {
        auto it = f1.find(id);
        if (it == f1.end())
            throw DataError("no F1 entry for agent '" + id + "'");
        if (!best || it->second > best_f1 ||
            (it->second == best_f1 && id < *best)) {
            best = &id;
            best_f1 = it->second;
        }
    }
    return *best;
}

// ---------------------------------------------------------------------------
// Group scoring: weighted-vote ensembles over validation prediction vectors.
// ---------------------------------------------------------------------------

struct GroupContext {
    std::vector<std::string> member_ids;
    std::map<std::string, PredictionVector> vectors;  // members + candidates
    std::map<std::string, double> weights;            // members (+ trial weight 1)
    std::vector<int> labels;

    const PredictionVector& vec(const std::string& id) const {
        auto it = vectors.find(id);
        if (it == vectors.end())
            throw DataError("group context: no vector for '" + id + "'");
        return it->second;
    }

    double weight(const std::string& id) const {
        auto it = weights.find(id);
        return it == weights.end() ? 1.0 : it->second;
    }
};

inline PredictionVector group_votes(const std::vector<std::string>& members,
                                    const GroupContext& ctx) {
    if (members.empty()) throw DataError("group vote over empty member set");
    PredictionVector out;
    out.bits.resize(ctx.labels.size());
    for (std::size_t t = 0; t < ctx.labels.size(); ++t) {
        double s = 0.0;
        for (const auto& m : members)
            s += ctx.weight(m) * (2 * ctx.vec(m).bits[t] - 1);
        out.bits[t] = s > 0.0 ? 1 : 0;
    }
    return out;
}

inline double group_accuracy(const std::vector<std::string>& members,
                             const GroupContext& ctx) {
    PredictionVector v = group_votes(members, ctx);
    if (ctx.labels.empty()) return 0.0;
    std::size_t hit = 0;
    for (std::size_t t = 0; t < ctx.labels.size(); ++t)
        if (v.bits[t] == ctx.labels[t]) ++hit;
    return static_cast<double>(hit) / static_cast<double>(ctx.labels.size());
}

// Marginal accuracy of keeping the member, minus lambda times its average
// cosine redundancy with peers. Negative scores mark removal candidates.
inline double prune_score(const std::string& member_id, const GroupContext& ctx,
                          double lambda) {
    if (ctx.member_ids.size() < 2)
        throw DataError("prune_score: group must have at least 2 members");
    double acc_full = group_accuracy(ctx.member_ids, ctx);
    std::vector<std::string> without;
    without.reserve(ctx.member_ids.size() - 1);
    for (const auto& m : ctx.member_ids)
        if (m != member_id) without.push_back(m);
    if (without.size() == ctx.member_ids.size())
        throw DataError("prune_score: '" + member_id + "' not in group");
    double acc_without = group_accuracy(without, ctx);

    double cos_sum = 0.0;
    for (const auto& m : without)
        cos_sum += prediction_cosine(ctx.vec(member_id), ctx.vec(m));
    double redundancy = cos_sum / static_cast<double>(without.size());
    return (acc_full - acc_without) - lambda * redundancy;
}

// Accuracy improvement from admitting the candidate (at trial weight 1),
// minus gamma times its average cosine similarity to current members.
inline double expansion_gain(const std::string& candidate_id,
                             const GroupContext& ctx, double gamma) {
    if (ctx.member_ids.empty())
        throw DataError("expansion_gain: empty group");
    for (const auto& m : ctx.member_ids)
        if (m == candidate_id)
            throw DataError("expansion_gain: candidate already a member");
    double acc_before = group_accuracy(ctx.member_ids, ctx);
    std::vector<std::string> with = ctx.member_ids;
    with.push_back(candidate_id);
    double acc_after = group_accuracy(with, ctx);

    double cos_sum = 0.0;
    for (const auto& m : ctx.member_ids)
        cos_sum += prediction_cosine(ctx.vec(candidate_id), ctx.vec(m));
    double similarity = cos_sum / static_cast<double>(ctx.member_ids.size());
    return (acc_after - acc_before) - gamma * similarity;
}

// Fraction of ensemble errors on which every member is simultaneously wrong.
// No ensemble errors means nothing is correlated enough to trigger expansion.
inline double shared_error_fraction(const GroupContext& ctx) {
    PredictionVector ens = group_votes(ctx.member_ids, ctx);
    std::size_t ens_wrong = 0, all_wrong = 0;
    for (std::size_t t = 0; t < ctx.labels.size(); ++t) {
        if (ens.bits[t] == ctx.labels[t]) continue;
        ++ens_wrong;
        bool all = true;
        for (const auto& m : ctx.member_ids) {
            if (ctx.vec(m).bits[t] == ctx.labels[t]) {
                all = false;
                break;
            }
        }
        if (all) ++all_wrong;
    }
    if (ens_wrong == 0) return 0.0;
    return static_cast<double>(all_wrong) / static_cast<double>(ens_wrong);
}

struct GroupEvalReport {
    std::string group_id;
    double ensemble_accuracy = 0.0;
    std::map<std::string, PredictionVector> member_vectors;
    double shared_error_fraction = 0.0;
};

inline GroupEvalReport evaluate_group(const std::string& group_id,
                                      const std::vector<std::string>& members,
                                      const std::map<std::string, double>& weights,
                                      const ValidationEval& val) {
    GroupContext ctx;
    ctx.member_ids = members;
    ctx.labels = val.labels;
    ctx.weights = weights;
    for (const auto& m : members) ctx.vectors[m] = val.vector_of(m);
    GroupEvalReport rep;
    rep.group_id = group_id;
    rep.ensemble_accuracy = group_accuracy(members, ctx);
    rep.shared_error_fraction = shared_error_fraction(ctx);
    for (const auto& m : members) rep.member_vectors[m] = ctx.vectors[m];
    return rep;
}

// ---------------------------------------------------------------------------
// Hierarchy
// ---------------------------------------------------------------------------

struct Hierarchy {
    // Active structure: layers[0] are Auditors, the last layer is the
    // Decision-Maker alone. Nodes not reachable from the top live in
    // reserve_auditors and serve as expansion candidates.
    std::vector<std::vector<std::string>> layers;
    std::map<std::string, std::vector<std::string>> edges;
    std::map<std::string, AgentNode> nodes;
    std::vector<std::string> reserve_auditors;  // kept sorted by id
    std::map<std::string, std::string> anchors;  // coordinator -> anchor member
    std::string dm_id;

    AgentNode& node(const std::string& id) {
        auto it = nodes.find(id);
        if (it == nodes.end()) throw DataError("unknown agent '" + id + "'");
        return it->second;
    }

    const AgentNode& node(const std::string& id) const {
        auto it = nodes.find(id);
        if (it == nodes.end()) throw DataError("unknown agent '" + id + "'");
        return it->second;
    }

    const std::vector<std::string>& children(const std::string& id) const {
        static const std::vector<std::string> none;
        auto it = edges.find(id);
        return it == edges.end() ? none : it->second;
    }

    AgentNode& dm() { return node(dm_id); }
    const AgentNode& dm() const { return node(dm_id); }

    std::size_t active_auditor_count() const {
        return layers.empty() ? 0 : layers.front().size();
    }

    std::size_t active_coordinator_count() const {
        std::size_t n = 0;
        for (std::size_t l = 1; l + 1 < layers.size(); ++l) n += layers[l].size();
        return n;
    }

    // First-level Coordinators: the ones whose subordinates are Auditors.
    // Topology adaptation operates on exactly these groups.
    const std::vector<std::string>& first_level_coordinators() const {
        if (layers.size() < 2) throw DataError("hierarchy has no coordinators");
        return layers[1];
    }

    // Structural audit of every hierarchy invariant. Throws on violation.
    void audit(int n_max) const {
        if (layers.size() < 2) throw DataError("audit: fewer than two layers");
        if (layers.back().size() != 1)
            throw DataError("audit: top layer must hold exactly one node");
        if (layers.back().front() != dm_id)
            throw DataError("audit: top node is not the decision-maker");

        std::set<std::string> active;
        for (const auto& layer : layers)
            for (const auto& id : layer)
                if (!active.insert(id).second)
                    throw DataError("audit: '" + id + "' appears twice");

        std::map<std::string, int> parent_count;
        for (std::size_t l = 0; l < layers.size(); ++l) {
            std::set<std::string> below;
            if (l > 0)
                below.insert(layers[l - 1].begin(), layers[l - 1].end());
            for (const auto& id : layers[l]) {
                const AgentNode& n = node(id);
                validate_role_memories(n);
                Role expect = l == 0 ? Role::Auditor
                              : l + 1 == layers.size() ? Role::DecisionMaker
                                                       : Role::Coordinator;
                if (n.role != expect)
                    throw DataError("audit: '" + id + "' has role " +
                                    role_name(n.role) + ", expected " +
                                    role_name(expect));
                if (l == 0) {
                    if (edges.count(id))
                        throw DataError("audit: auditor '" + id +
                                        "' has children");
                    continue;
                }
                const auto& kids = children(id);
                if (kids.empty())
                    throw DataError("audit: '" + id + "' has no children");
                if (n.role == Role::Coordinator &&
                    kids.size() > static_cast<std::size_t>(n_max))
                    throw DataError("audit: group of '" + id +
                                    "' exceeds n_max");
                std::set<std::string> kid_set;
                for (const auto& k : kids) {
                    if (!below.count(k))
                        throw DataError("audit: child '" + k + "' of '" + id +
                                        "' is not in the layer below");
                    if (!kid_set.insert(k).second)
                        throw DataError("audit: duplicate child '" + k + "'");
                    parent_count[k]++;
                }
                if (!n.confidence)
                    throw DataError("audit: '" + id + "' lacks confidence");
                std::set<std::string> conf_keys;
                for (const auto& [k, w] : n.confidence->weights()) {
                    conf_keys.insert(k);
                    if (!std::isfinite(w) || w < 0.0)
                        throw DataError("audit: bad weight for '" + k + "'");
                }
                if (conf_keys != kid_set)
                    throw DataError(
                        "audit: confidence keys of '" + id +
                        "' do not match its child set");
                if (n.role == Role::Coordinator) {
                    auto a = anchors.find(id);
                    if (a == anchors.end())
                        throw DataError("audit: '" + id + "' has no anchor");
                    if (!kid_set.count(a->second))
                        throw DataError("audit: anchor of '" + id +
                                        "' is not among its children");
                }
            }
        }
        for (std::size_t l = 0; l + 1 < layers.size(); ++l)
            for (const auto& id : layers[l])
                if (parent_count[id] != 1)
                    throw DataError("audit: '" + id + "' has " +
                                    std::to_string(parent_count[id]) +
                                    " parents");
        for (const auto& id : reserve_auditors) {
            if (active.count(id))
                throw DataError("audit: reserve node '" + id + "' is active");
            if (node(id).role != Role::Auditor)
                throw DataError("audit: reserve node '" + id +
                                "' is not an auditor");
        }
    }
};

inline std::string padded_index(std::size_t i, std::size_t count) {
    std::size_t width = 2;
    while (count > std::size_t(1) << (width * 3)) ++width;  // rarely > 2
    std::ostringstream os;
    std::string s = std::to_string(i);
    while (s.size() < width) s.insert(s.begin(), '0');
    return s;
}

// ---------------------------------------------------------------------------
// Hierarchy construction
// ---------------------------------------------------------------------------

namespace detail {

inline PredictionVector weighted_group_vector(
    const std::vector<std::string>& members,
    const std::map<std::string, PredictionVector>& vectors,
    const std::map<std::string, double>& weights, std::size_t len) {
    PredictionVector out;
    out.bits.resize(len);
    for (std::size_t t = 0; t < len; ++t) {
        double s = 0.0;
        for (const auto& m : members) {
            auto it = vectors.find(m);
            if (it == vectors.end())
                throw DataError("no prediction vector for '" + m + "'");
            double w = 1.0;
            auto wi = weights.find(m);
            if (wi != weights.end()) w = wi->second;
            s += w * (2 * it->second.bits[t] - 1);
        }
        out.bits[t] = s > 0.0 ? 1 : 0;
    }
    return out;
}

inline std::vector<double> centroid(const std::vector<std::string>& members,
                                    const std::map<std::string, PredictionVector>& vectors,
                                    std::size_t len) {
    std::vector<double> c(len, 0.0);
    for (const auto& m : members) {
        const auto& bits = vectors.at(m).bits;
        for (std::size_t t = 0; t < len; ++t) c[t] += bits[t];
    }
    for (double& x : c) x /= static_cast<double>(members.size());
    return c;
}

inline double real_cosine(const std::vector<double>& a,
                          const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 && nb == 0.0) return 1.0;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace detail

// Builds the layered hierarchy from scored auditors: cluster by prediction
// vectors, pick anchors by F1, fill groups by seeded sampling (spilling to
// the nearest cluster when short), then recurse on the freshly created
// Coordinators until the Decision-Maker caps the stack. Auditors that end up
// in no group become expansion reserves.
inline Hierarchy build_hierarchy(std::vector<AgentNode> auditors, AgentNode dm,
                                 const ValidationEval& val,
                                 const Hyperparameters& hp,
                                 std::vector<std::string>* build_log = nullptr) {
    hp.validate();
    if (dm.role != Role::DecisionMaker)
        throw ConfigError("build_hierarchy: top node must be a decision-maker");
    if (auditors.size() < static_cast<std::size_t>(hp.layer_spec[0]))
        throw ConfigError("build_hierarchy: more first-layer coordinators than "
                          "auditors");
    for (std::size_t l = 1; l < hp.layer_spec.size(); ++l)
        if (hp.layer_spec[l] > hp.layer_spec[l - 1])
            throw ConfigError("build_hierarchy: layer " + std::to_string(l) +
                              " wants more coordinators than available "
                              "children");
    if (val.size() == 0)
        throw DataError("build_hierarchy: empty validation set");

    // Profile invariants are checked here, against the DM's full feature set.
    std::set<std::string> full_set(dm.profile.feature_subset.begin(),
                                   dm.profile.feature_subset.end());
    if (full_set.empty())
        throw ConfigError("decision-maker profile has no features");
    for (const auto& a : auditors) {
        if (a.profile.feature_subset.empty())
            throw ConfigError("auditor '" + a.id + "' has an empty subset");
        if (a.profile.feature_subset.size() >= full_set.size())
            throw ConfigError("auditor '" + a.id +
                              "' must observe a proper subset of the features");
        for (const auto& name : a.profile.feature_subset)
            if (!full_set.count(name))
                throw ConfigError("auditor '" + a.id + "' references unknown "
                                  "feature '" + name + "'");
    }

    auto log = [&](const std::string& m) {
        if (build_log) build_log->push_back(m);
    };

    Hierarchy h;
    h.dm_id = dm.id;

    std::vector<std::string> level_ids;
    std::map<std::string, PredictionVector> level_vectors;
    std::map<std::string, double> level_f1;
    for (auto& a : auditors) {
        if (a.role != Role::Auditor)
            throw ConfigError("build_hierarchy: '" + a.id +
                              "' is not an auditor");
        level_ids.push_back(a.id);
        level_vectors[a.id] = val.vector_of(a.id);
        level_f1[a.id] = val.f1_of(a.id);
        h.nodes.emplace(a.id, std::move(a));
    }
    const std::size_t vlen = val.size();

    std::vector<std::vector<std::string>> built_layers;
    built_layers.push_back(level_ids);  // provisional; pruned to assigned below

    for (std::size_t level = 0; level < hp.layer_spec.size(); ++level) {
        const std::size_t target = static_cast<std::size_t>(hp.layer_spec[level]);
        if (target > level_ids.size())
            throw ConfigError("build_hierarchy: layer " + std::to_string(level) +
                              " infeasible after previous layer");

        ValidationEval level_val;
        level_val.instance_ids = val.instance_ids;
        level_val.labels = val.labels;
        level_val.vectors = level_vectors;
        auto clusters = cluster_by_predictions(level_ids, level_val, target);

        // Anchors first, so no group can poach another group's anchor.
        std::set<std::string> assigned;
        std::vector<std::string> anchor_of_cluster;
        for (const auto& cluster : clusters) {
            std::string anchor = select_anchor(cluster, level_f1);
            anchor_of_cluster.push_back(anchor);
            assigned.insert(anchor);
        }

        std::vector<std::vector<std::string>> groups(clusters.size());
        for (std::size_t c = 0; c < clusters.size(); ++c) {
            groups[c].push_back(anchor_of_cluster[c]);
            std::vector<std::string> pool;
            for (const auto& id : clusters[c])
                if (!assigned.count(id)) pool.push_back(id);
            Rng rng(keyed_hash(hp.seed, "build-fill", std::uint64_t(level),
                               std::uint64_t(c)));
            rng.shuffle(pool);
            for (const auto& id : pool) {
                if (groups[c].size() >= static_cast<std::size_t>(hp.n_max)) break;
                groups[c].push_back(id);
                assigned.insert(id);
            }
        }

        // Short groups pull from the nearest cluster by centroid cosine.
        if (clusters.size() > 1) {
            std::vector<std::vector<double>> cents;
            for (const auto& cluster : clusters)
                cents.push_back(detail::centroid(cluster, level_vectors, vlen));
            for (std::size_t c = 0; c < groups.size(); ++c) {
                if (groups[c].size() >= static_cast<std::size_t>(hp.n_max))
                    continue;
                std::size_t nearest = c;
                double best = -2.0;
                for (std::size_t o = 0; o < clusters.size(); ++o) {
                    if (o == c) continue;
                    double cs = detail::real_cosine(cents[c], cents[o]);
                    if (cs > best) {
                        best = cs;
                        nearest = o;
                    }
                }
                if (nearest == c) continue;
                std::vector<std::string> pool;
                for (const auto& id : clusters[nearest])
                    if (!assigned.count(id)) pool.push_back(id);
                Rng rng(keyed_hash(hp.seed, "build-spill", std::uint64_t(level),
                                   std::uint64_t(c)));
                rng.shuffle(pool);
                for (const auto& id : pool) {
                    if (groups[c].size() >= static_cast<std::size_t>(hp.n_max))
                        break;
                    groups[c].push_back(id);
                    assigned.insert(id);
                    log("build: group " + std::to_string(c) + " at level " +
                        std::to_string(level) + " supplemented with '" + id +
                        "' from nearest cluster");
                }
            }
        }

        // Create one Coordinator per cluster and wire the group under it.
        std::vector<std::string> new_ids;
        std::map<std::string, PredictionVector> new_vectors;
        std::map<std::string, double> new_f1;
        for (std::size_t c = 0; c < groups.size(); ++c) {
            std::string cid = "coord-" + std::to_string(level + 1) + "-" +
                              padded_index(c, groups.size());
            Profile prof;
            prof.persona = "coordinator aggregating subordinate judgments";
            AgentNode coord = make_agent(cid, Role::Coordinator, prof);
            for (const auto& m : groups[c]) coord.confidence->set(m, 1.0);
            h.nodes.emplace(cid, std::move(coord));
            h.edges[cid] = groups[c];
            h.anchors[cid] = anchor_of_cluster[c];

            std::map<std::string, double> unit;
            PredictionVector pv = detail::weighted_group_vector(
                groups[c], level_vectors, unit, vlen);
            std::size_t tp = 0, fp = 0, fn = 0, hit = 0;
            for (std::size_t t = 0; t < vlen; ++t) {
                if (pv.bits[t] == val.labels[t]) ++hit;
                if (pv.bits[t] == 1 && val.labels[t] == 1) ++tp;
                if (pv.bits[t] == 1 && val.labels[t] == 0) ++fp;
                if (pv.bits[t] == 0 && val.labels[t] == 1) ++fn;
            }
            double f1 = 0.0;
            if (tp > 0) {
                double p = double(tp) / double(tp + fp);
                double r = double(tp) / double(tp + fn);
                f1 = 2.0 * p * r / (p + r);
            }
            new_ids.push_back(cid);
            new_vectors[cid] = std::move(pv);
            new_f1[cid] = f1;
        }

        // Nodes of the previous level that landed in no group.
        std::vector<std::string> unassigned;
        for (const auto& id : level_ids)
            if (!assigned.count(id)) unassigned.push_back(id);
        if (level == 0) {
            for (const auto& id : unassigned) {
                h.reserve_auditors.push_back(id);
                log("build: auditor '" + id + "' unassigned, held in reserve");
            }
        } else if (!unassigned.empty()) {
            // An uncovered coordinator cannot be re-admitted later; release
            // its subtree and drop it.
            for (const auto& id : unassigned) {
                log("build: coordinator '" + id +
                    "' uncovered by the next layer, releasing its group");
                std::vector<std::string> stack = {id};
                while (!stack.empty()) {
                    std::string cur = stack.back();
                    stack.pop_back();
                    for (const auto& k : h.children(cur)) {
                        if (h.node(k).role == Role::Auditor)
                            h.reserve_auditors.push_back(k);
                        else
                            stack.push_back(k);
                    }
                    h.edges.erase(cur);
                    h.anchors.erase(cur);
                    h.nodes.erase(cur);
                }
            }
        }

        // The assigned survivors form the committed layer below.
        std::vector<std::string> committed;
        for (const auto& id : built_layers.back())
            if (assigned.count(id)) committed.push_back(id);
        built_layers.back() = committed;
        built_layers.push_back(new_ids);

        level_ids = std::move(new_ids);
        level_vectors = std::move(new_vectors);
        level_f1 = std::move(new_f1);
    }

    // Decision-Maker adopts every top-layer coordinator.
    for (const auto& cid : level_ids) dm.confidence->set(cid, 1.0);
    h.edges[dm.id] = level_ids;
    built_layers.push_back({dm.id});
    h.nodes.emplace(dm.id, std::move(dm));
    h.layers = std::move(built_layers);

    // Layer 0 may have lost members to released subtrees; drop them from the
    // active list (they are already in reserve).
    std::set<std::string> reserved(h.reserve_auditors.begin(),
                                   h.reserve_auditors.end());
    std::vector<std::string> active0;
    for (const auto& id : h.layers[0])
        if (!reserved.count(id)) active0.push_back(id);
    h.layers[0] = std::move(active0);
    std::sort(h.reserve_auditors.begin(), h.reserve_auditors.end());

    h.audit(hp.n_max);
    return h;
}

// ---------------------------------------------------------------------------
// Topology adaptation
// ---------------------------------------------------------------------------

struct TopologyChange {
    int epoch = 0;
    std::string group_id;
    std::string action;  // prune | expand | skip
    std::string member_id;
    double score = 0.0;
    std::string reason;
};

// One adaptation round over every first-level Coordinator group: batch-score
// members against the current weights and drop the negatives (anchor kept,
// never below two members), then, if the group's errors are sufficiently
// correlated, admit the single best-gaining reserve auditor.
inline std::vector<TopologyChange> adapt_topology(Hierarchy& h,
                                                  const ValidationEval& val,
                                                  const Hyperparameters& hp,
                                                  int epoch) {
    std::vector<TopologyChange> changes;
    auto change = [&](const std::string& group, const std::string& action,
                      const std::string& member, double score,
                      const std::string& reason) {
        changes.push_back(TopologyChange{epoch, group, action, member, score,
                                         reason});
    };

    std::vector<std::string> coords = h.first_level_coordinators();
    for (const auto& cid : coords) {
        AgentNode& coord = h.node(cid);
        std::vector<std::string>& group = h.edges[cid];
        const std::string anchor = h.anchors.at(cid);

        GroupContext ctx;
        ctx.member_ids = group;
        ctx.labels = val.labels;
        for (const auto& m : group) {
            ctx.vectors[m] = val.vector_of(m);
            ctx.weights[m] = coord.confidence->get(m);
        }

        // Prune: all scores from the pre-removal composition.
        if (group.size() >= 2) {
            std::vector<std::pair<double, std::string>> negatives;
            for (const auto& m : group) {
                double s = prune_score(m, ctx, hp.lambda);
                if (s >= 0.0) continue;
                if (m == anchor) {
                    change(cid, "skip", m, s, "anchor protected");
                    continue;
                }
                negatives.emplace_back(s, m);
            }
            std::sort(negatives.begin(), negatives.end());
            for (const auto& [s, m] : negatives) {
                if (group.size() <= 2) {
                    change(cid, "skip", m, s, "group floor of 2 members");
                    continue;
                }
                group.erase(std::find(group.begin(), group.end(), m));
                coord.confidence->erase(m);
                h.reserve_auditors.push_back(m);
                change(cid, "prune", m, s, "negative prune score");
            }
            std::sort(h.reserve_auditors.begin(), h.reserve_auditors.end());
        }

        // Expand: triggered by correlated failures on the post-prune group.
        GroupContext post = ctx;
        post.member_ids = group;
        post.weights.clear();
        for (const auto& m : group) post.weights[m] = coord.confidence->get(m);
        double sef = shared_error_fraction(post);
        if (sef < hp.expansion_trigger_rho) continue;
        if (group.size() >= static_cast<std::size_t>(hp.n_max)) {
            change(cid, "skip", "", sef, "group already at n_max");
            continue;
        }
        if (h.reserve_auditors.empty()) {
            change(cid, "skip", "", sef, "no reserve candidates");
            continue;
        }
        std::string best_id;
        double best_gain = 0.0;
        for (const auto& cand : h.reserve_auditors) {
            GroupContext trial = post;
            trial.vectors[cand] = val.vector_of(cand);
            trial.weights[cand] = 1.0;
            double g = expansion_gain(cand, trial, hp.gamma);
            if (best_id.empty() || g > best_gain ||
                (g == best_gain && cand < best_id)) {
                best_id = cand;
                best_gain = g;
            }
        }
        if (best_gain > 0.0) {
            group.push_back(best_id);
            coord.confidence->set(best_id, 1.0);
            h.reserve_auditors.erase(std::find(h.reserve_auditors.begin(),
                                               h.reserve_auditors.end(),
                                               best_id));
            auto& layer0 = h.layers[0];
            if (std::find(layer0.begin(), layer0.end(), best_id) ==
                layer0.end())
                layer0.push_back(best_id);
            change(cid, "expand", best_id, best_gain,
                   "correlated failures, positive gain");
        } else {
            change(cid, "skip", best_id, best_gain, "no positive gain");
        }
    }

    // Reserve auditors readmitted elsewhere may still linger in layer 0 from
    // a previous round; rebuild the active auditor list from the edges.
    std::set<std::string> attached;
    for (const auto& cid : h.first_level_coordinators())
        for (const auto& m : h.children(cid)) attached.insert(m);
    std::vector<std::string> active0;
    for (const auto& id : h.layers[0])
        if (attached.count(id)) active0.push_back(id);
    h.layers[0] = std::move(active0);

    return changes;
}

}  // namespace pamas
