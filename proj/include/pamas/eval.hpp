#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pamas/backends.hpp"
#include "pamas/common.hpp"
#include "pamas/core.hpp"
#include "pamas/topology.hpp"

namespace pamas {

// ---------------------------------------------------------------------------
// Classification metrics
// ---------------------------------------------------------------------------

struct MetricsReport {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::optional<double> auc;  // absent for single-class label sets
    long long tp = 0, fp = 0, tn = 0, fn = 0;
    long long n = 0;
};

struct PredictionRow {
    double score = 0.5;  // graded confidence toward class 1, used for AUC
    int decision = 0;
    int label = 0;
};

// Standard confusion-matrix metrics; AUC by rank statistic with midrank tie
// handling. Zero-denominator precision/recall/F1 report as 0 so epoch curves
// stay total.
inline MetricsReport compute_metrics(const std::vector<PredictionRow>& rows) {
    if (rows.empty()) throw DataError("compute_metrics: empty prediction set");
    MetricsReport r;
    r.n = static_cast<long long>(rows.size());
    for (const auto& row : rows) {
        if (row.label != 0 && row.label != 1)
            throw DataError("compute_metrics: labels must be binary");
        if (row.decision == 1 && row.label == 1) ++r.tp;
        if (row.decision == 1 && row.label == 0) ++r.fp;
        if (row.decision == 0 && row.label == 0) ++r.tn;
        if (row.decision == 0 && row.label == 1) ++r.fn;
    }
    r.accuracy = static_cast<double>(r.tp + r.tn) / static_cast<double>(r.n);
    r.precision = (r.tp + r.fp) > 0
                      ? static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp)
                      : 0.0;
    r.recall = (r.tp + r.fn) > 0
                   ? static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn)
                   : 0.0;
    r.f1 = (r.precision + r.recall) > 0.0
               ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
               : 0.0;

    long long pos = r.tp + r.fn, neg = r.fp + r.tn;
    if (pos > 0 && neg > 0) {
        std::vector<std::size_t> idx(rows.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            return rows[a].score < rows[b].score;
        });
        std::vector<double> rank(rows.size(), 0.0);
        std::size_t i = 0;
        while (i < idx.size()) {
            std::size_t j = i;
            while (j + 1 < idx.size() &&
                   rows[idx[j + 1]].score == rows[idx[i]].score)
                ++j;
            double mid = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
            for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = mid;
            i = j + 1;
        }
        double pos_rank_sum = 0.0;
        for (std::size_t k = 0; k < rows.size(); ++k)
            if (rows[k].label == 1) pos_rank_sum += rank[k];
        double p = static_cast<double>(pos), q = static_cast<double>(neg);
        r.auc = (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q);
    }
    return r;
}

// Map a signed vote sum onto (0,1): s / (1+|s|) squashed, then shifted.
inline double score_from_signed_sum(double s) {
    double squashed = s / (1.0 + std::abs(s));
    return (squashed + 1.0) / 2.0;
}

// ---------------------------------------------------------------------------
// Token cost model: exact rational arithmetic so equality checks never see
// floating drift.
// ---------------------------------------------------------------------------

struct Rational {
    long long num = 0;
    long long den = 1;

    Rational() = default;
    Rational(long long n) : num(n), den(1) {}  // NOLINT(google-explicit-constructor)
    Rational(long long n, long long d) : num(n), den(d) { normalize(); }

    static Rational from_counts(long long part, long long whole) {
        if (whole <= 0) throw DataError("rational from_counts: whole must be > 0");
        return Rational(part, whole);
    }

    void normalize() {
        if (den == 0) throw DataError("rational with zero denominator");
        if (den < 0) {
            den = -den;
            num = -num;
        }
        long long g = std::gcd(num < 0 ? -num : num, den);
        if (g > 1) {
            num /= g;
            den /= g;
        }
    }

    Rational operator+(const Rational& o) const {
        return Rational(num * o.den + o.num * den, den * o.den);
    }
    Rational operator-(const Rational& o) const {
        return Rational(num * o.den - o.num * den, den * o.den);
    }
    Rational operator*(const Rational& o) const {
        return Rational(num * o.num, den * o.den);
    }
    bool operator==(const Rational& o) const {
        return num == o.num && den == o.den;
    }
    bool operator!=(const Rational& o) const { return !(*this == o); }

    bool is_integer() const { return den == 1; }
    double to_double() const {
        return static_cast<double>(num) / static_cast<double>(den);
    }
    std::string to_string() const {
        if (den == 1) return std::to_string(num);
        return std::to_string(num) + "/" + std::to_string(den);
    }
};

struct CostModelParams {
    long long tokens_per_call = 100;   // T
    long long batch_n = 0;             // N
    Rational p_err{0, 1};              // error rate, exact
    long long n_auditors = 0;          // post-adaptation auditor count
    long long n_coordinators = 0;      // post-adaptation coordinator count
    long long routed_activations = 0;  // m, summed over the inference window
    long long n_agents = 0;            // n for general topologies (sum for layered)

    void validate() const {
        if (tokens_per_call < 0 || batch_n < 0 || n_auditors < 0 ||
            n_coordinators < 0 || routed_activations < 0 || n_agents < 0)
            throw ConfigError("cost model params must be nonnegative");
        double p = p_err.to_double();
        if (p < 0.0 || p > 1.0)
            throw ConfigError("cost model p_err must be in [0,1]");
    }
};

enum class CostVariant {
    PamasTA,
    PamasTATC,
    PamasTATCCR,
    Chain,
    Star,
    FullyConnected,
    Layered,
    Tree
};

inline CostVariant cost_variant_from_string(const std::string& s) {
    if (s == "TA") return CostVariant::PamasTA;
    if (s == "TA+TC") return CostVariant::PamasTATC;
    if (s == "TA+TC+CR") return CostVariant::PamasTATCCR;
    if (s == "chain") return CostVariant::Chain;
    if (s == "star") return CostVariant::Star;
    if (s == "fully-connected") return CostVariant::FullyConnected;
    if (s == "layered") return CostVariant::Layered;
    if (s == "tree") return CostVariant::Tree;
    throw ConfigError("unknown cost variant '" + s + "'");
}

struct CostEstimate {
    Rational training;
    Rational inference;
};

inline CostEstimate cost_model_expected(const CostModelParams& p,
                                        CostVariant variant) {
    p.validate();
    const Rational T(p.tokens_per_call);
    const Rational N(p.batch_n);
    const Rational nA(p.n_auditors);
    const Rational nC(p.n_coordinators);
    const Rational n(p.n_agents);
    const Rational one(1);
    const Rational two(2);

    CostEstimate out;
    switch (variant) {
        case CostVariant::Chain:
        case CostVariant::Star:
        case CostVariant::Tree:
        case CostVariant::Layered:
            out.training = two * N * n * T;
            out.inference = n * T;
            break;
        case CostVariant::FullyConnected:
            out.training = two * N * n * n * T;
            out.inference = n * n * T;
            break;
        case CostVariant::PamasTA:
            out.training = N * ((nA + one) + (nA + nC)) * T;
            out.inference = (nA + one) * T;
            break;
        case CostVariant::PamasTATC:
            out.training = N * ((nA + one) + p.p_err * (nA + nC)) * T;
            out.inference = (nA + one) * T;
            break;
        case CostVariant::PamasTATCCR:
            out.training = N * ((nA + one) + p.p_err * (nA + nC)) * T;
            out.inference = Rational(p.routed_activations) * T;
            break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Meter reconciliation: binds the idealized cost-model units to the call
// counts the meter actually recorded. The refinement mapping is explicit:
// the model charges (n_A + n_C) refinement units per erring instance, while
// the engine performs one Decision-Maker reflect call per erring instance.
// ---------------------------------------------------------------------------

struct MeterWindow {
    std::uint64_t forward_tokens = 0;
    std::uint64_t correction_tokens = 0;
    std::uint64_t inference_tokens = 0;
    std::uint64_t reflect_calls = 0;     // reflect calls in the correction phase
    long long instances = 0;             // training instances in the window
    long long errors = 0;                // instances with a wrong final decision
    long long inferred_instances = 0;    // instances in the inference window
    long long routed_activations = 0;    // total backend calls across routed traces
};

struct ReconciliationRow {
    std::string phase;
    long long measured = 0;
    Rational expected;
    bool match = false;
    std::string mapping;
};

struct Reconciliation {
    std::vector<ReconciliationRow> rows;
    bool all_match = true;
};

inline Reconciliation reconcile_meter(const MeterWindow& w,
                                      const CostModelParams& params,
                                      bool routed_inference) {
    Reconciliation rec;
    const Rational T(params.tokens_per_call);
    auto push = [&](std::string phase, long long measured, Rational expected,
                    std::string mapping) {
        ReconciliationRow row;
        row.phase = std::move(phase);
        row.measured = measured;
        row.expected = expected;
        row.match = expected.is_integer() && expected.num == measured;
        row.mapping = std::move(mapping);
        rec.rows.push_back(row);
        rec.all_match = rec.all_match && rec.rows.back().match;
    };

    push("training/forward", static_cast<long long>(w.forward_tokens),
         Rational(w.instances) * (Rational(params.n_auditors) + Rational(1)) * T,
         "forward = (n_A + 1) calls per instance");

    push("training/refinement-measured",
         static_cast<long long>(w.correction_tokens),
         Rational(static_cast<long long>(w.reflect_calls)) * T,
         "one decision-maker reflect call per erring instance");

    // Idealized accounting: each erring instance charges (n_A + n_C) units.
    Rational p_err = w.instances > 0
                         ? Rational::from_counts(w.errors, w.instances)
                         : Rational(0);
    push("training/refinement-idealized",
         w.errors * (params.n_auditors + params.n_coordinators) *
             params.tokens_per_call,
         Rational(w.instances) * p_err *
             (Rational(params.n_auditors) + Rational(params.n_coordinators)) * T,
         "(n_A + n_C) refinement units per erring instance");

    if (routed_inference) {
        push("inference/routed", static_cast<long long>(w.inference_tokens),
             Rational(w.routed_activations) * T,
             "m backend calls read from the activation traces");
    } else {
        push("inference/full", static_cast<long long>(w.inference_tokens),
             Rational(w.inferred_instances) *
                 (Rational(params.n_auditors) + Rational(1)) * T,
             "(n_A + 1) calls per instance under full activation");
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Flat-majority reference baseline
// ---------------------------------------------------------------------------

inline int flat_majority(const std::vector<int>& decisions) {
    if (decisions.empty()) throw DataError("flat majority over no auditors");
    int margin = majority_margin(decisions);
    return margin > 0 ? 1 : 0;
}

// Unweighted majority over every active auditor's judgment of the instance.
inline int flat_majority_baseline(Hierarchy& h, Backend& backend,
                                  const Instance& x) {
    std::vector<int> decisions;
    for (const auto& id : h.layers.at(0)) {
        AgentNode& a = h.node(id);
        Features view = project_features(x, a.profile);
        JudgeContext ctx;
        ctx.agent_id = id;
        ctx.backend_model = a.backend_model;
        ctx.instance_id = x.id;
        ctx.view = &view;
        ctx.profile = &a.profile;
        ctx.experience = a.experience ? &*a.experience : nullptr;
        ctx.hidden_label = x.label;
        decisions.push_back(backend.judge(ctx).decision);
    }
    return flat_majority(decisions);
}

}  // namespace pamas
