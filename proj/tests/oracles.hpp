#pragma once

// Independent reference implementations used as test oracles. These are
// deliberately plain re-implementations that never call into the library
// paths they check.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace oracles {

// Literal weighted-vote evaluation: sum w * (2d - 1), strict > 0.
struct VoteRow {
    std::string id;
    int decision;
    double weight;
};

inline int brute_weighted_vote(const std::vector<VoteRow>& votes,
                               double* sum_out = nullptr) {
    double s = 0.0;
    for (const auto& v : votes) s += v.weight * (2 * v.decision - 1);
    if (sum_out) *sum_out = s;
    return s > 0.0 ? 1 : 0;
}

// Cosine between 0/1 vectors with the zero-vector convention used across the
// project: both zero -> 1, one zero -> 0.
inline double cos01(const std::vector<std::uint8_t>& a,
                    const std::vector<std::uint8_t>& b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += double(a[i]) * b[i];
        na += double(a[i]) * a[i];
        nb += double(b[i]) * b[i];
    }
    if (na == 0 && nb == 0) return 1.0;
    if (na == 0 || nb == 0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Instance-by-instance weighted ensemble accuracy.
inline double brute_ensemble_accuracy(
    const std::vector<std::string>& members,
    const std::map<std::string, std::vector<std::uint8_t>>& vectors,
    const std::map<std::string, double>& weights,
    const std::vector<int>& labels) {
    std::size_t hit = 0;
    for (std::size_t t = 0; t < labels.size(); ++t) {
        double s = 0.0;
        for (const auto& m : members)
            s += weights.at(m) * (2 * vectors.at(m)[t] - 1);
        int d = s > 0.0 ? 1 : 0;
        if (d == labels[t]) ++hit;
    }
    return labels.empty() ? 0.0
                          : double(hit) / double(labels.size());
}

// Eq-literal prune score via the brute ensemble evaluator.
inline double brute_prune_score(
    const std::string& member, const std::vector<std::string>& group,
    const std::map<std::string, std::vector<std::uint8_t>>& vectors,
    const std::map<std::string, double>& weights,
    const std::vector<int>& labels, double lambda) {
    double acc_full = brute_ensemble_accuracy(group, vectors, weights, labels);
    std::vector<std::string> rest;
    for (const auto& m : group)
        if (m != member) rest.push_back(m);
    double acc_rest = brute_ensemble_accuracy(rest, vectors, weights, labels);
    double cs = 0.0;
    for (const auto& m : rest) cs += cos01(vectors.at(member), vectors.at(m));
    return (acc_full - acc_rest) - lambda * cs / double(rest.size());
}

inline double brute_expansion_gain(
    const std::string& candidate, const std::vector<std::string>& group,
    const std::map<std::string, std::vector<std::uint8_t>>& vectors,
    std::map<std::string, double> weights, const std::vector<int>& labels,
    double gamma) {
    double before = brute_ensemble_accuracy(group, vectors, weights, labels);
    std::vector<std::string> with = group;
    with.push_back(candidate);
    weights[candidate] = 1.0;
    double after = brute_ensemble_accuracy(with, vectors, weights, labels);
    double cs = 0.0;
    for (const auto& m : group) cs += cos01(vectors.at(candidate), vectors.at(m));
    return (after - before) - gamma * cs / double(group.size());
}

// Straightforward average-linkage agglomeration over cosine distances,
// recomputed from scratch each merge; min pair wins, ties to the smallest
// (i, j).
inline std::vector<std::vector<std::size_t>> brute_average_linkage(
    const std::vector<std::vector<std::uint8_t>>& vecs, std::size_t target) {
    std::size_t n = vecs.size();
    std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            d[i][j] = 1.0 - cos01(vecs[i], vecs[j]);
    std::vector<std::vector<std::size_t>> cl;
    for (std::size_t i = 0; i < n; ++i) cl.push_back({i});
    while (cl.size() > target) {
        double best = 0.0;
        std::size_t bi = 0, bj = 0;
        bool found = false;
        for (std::size_t a = 0; a < cl.size(); ++a)
            for (std::size_t b = a + 1; b < cl.size(); ++b) {
                double sum = 0.0;
                for (auto i : cl[a])
                    for (auto j : cl[b]) sum += d[i][j];
                double avg = sum / double(cl[a].size() * cl[b].size());
                if (!found || avg < best) {
                    best = avg;
                    bi = a;
                    bj = b;
                    found = true;
                }
            }
        cl[bi].insert(cl[bi].end(), cl[bj].begin(), cl[bj].end());
        cl.erase(cl.begin() + std::ptrdiff_t(bj));
    }
    return cl;
}

// Exhaustive cosine ranking for retrieval checks (unit vectors assumed).
inline std::vector<std::size_t> brute_top_k(
    const std::vector<std::vector<double>>& pool,
    const std::vector<double>& query, std::size_t k) {
    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        double dot = 0.0;
        for (std::size_t d2 = 0; d2 < query.size(); ++d2)
            dot += pool[i][d2] * query[d2];
        scored.emplace_back(dot, i);
    }
    // selection sort keeps ties in insertion order
    std::vector<std::size_t> out;
    std::vector<bool> used(pool.size(), false);
    for (std::size_t round = 0; round < k && round < pool.size(); ++round) {
        std::size_t best = pool.size();
        for (std::size_t i = 0; i < pool.size(); ++i) {
            if (used[i]) continue;
            if (best == pool.size() || scored[i].first > scored[best].first)
                best = i;
        }
        used[best] = true;
        out.push_back(best);
    }
    return out;
}

// Confusion-matrix recount.
struct BruteConfusion {
    long long tp = 0, fp = 0, tn = 0, fn = 0;
};

inline BruteConfusion brute_confusion(const std::vector<int>& decisions,
                                      const std::vector<int>& labels) {
    BruteConfusion c;
    for (std::size_t i = 0; i < decisions.size(); ++i) {
        if (decisions[i] == 1 && labels[i] == 1) ++c.tp;
        if (decisions[i] == 1 && labels[i] == 0) ++c.fp;
        if (decisions[i] == 0 && labels[i] == 0) ++c.tn;
        if (decisions[i] == 0 && labels[i] == 1) ++c.fn;
    }
    return c;
}

}  // namespace oracles
