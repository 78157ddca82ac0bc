#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pamas/aggregation.hpp"
#include "pamas/backends.hpp"
#include "pamas/common.hpp"
#include "pamas/core.hpp"
#include "pamas/eval.hpp"
#include "pamas/topology.hpp"

namespace pamas {

// EMA trust update: w' = (1-alpha) * w + alpha * (f_ref + hist). Both bracket
// terms live in [0,1], so weights started in [0,2] stay in [0,2] forever.
inline double confidence_update(double w, double f_ref, double hist,
                                double alpha) {
    if (!(f_ref >= 0.0 && f_ref <= 1.0))
        throw DataError("confidence_update: f_ref must be in [0,1]");
    if (!(hist >= 0.0 && hist <= 1.0))
        throw DataError("confidence_update: hist must be in [0,1]");
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw DataError("confidence_update: alpha must be in [0,1]");
    if (!std::isfinite(w) || w < 0.0)
        throw DataError("confidence_update: weight must be finite and >= 0");
    return (1.0 - alpha) * w + alpha * (f_ref + hist);
}

struct TraceEntry {
    std::string agent_id;
    Role role = Role::Auditor;
    int decision = 0;
    std::string reason;
    std::vector<Vote> votes;  // Coordinators and Decision-Maker
    double signed_sum = 0.0;
};

struct ForwardTrace {
    std::string instance_id;
    std::optional<int> label;
    std::map<std::string, TraceEntry> entries;
    int final_decision = 0;
    std::string final_reason;
    double final_signed_sum = 0.0;
    bool failed = false;
    std::string failure;
};

namespace detail {

inline std::string history_summary(const AgentNode& agent, std::size_t n = 3) {
    const auto& recs = agent.actions.records();
    std::ostringstream os;
    std::size_t start = recs.size() > n ? recs.size() - n : 0;
    for (std::size_t i = start; i < recs.size(); ++i)
        os << recs[i].instance_id << ": " << recs[i].decision << "\n";
    return os.str();
}

}  // namespace detail

// Bottom-up evaluation of one instance: Auditors judge their projected
// views, Coordinators aggregate by weighted vote and inherit a reason, the
// Decision-Maker synthesizes over the top-layer summaries. With `record` the
// pass is a real forward pass and every agent logs one action record; without
// it the pass is an evaluation probe and leaves no trace in memories.
inline ForwardTrace forward_core(Hierarchy& h, Backend& backend,
                                 const Instance& x, bool record) {
    ForwardTrace trace;
    trace.instance_id = x.id;
    trace.label = x.label;

    auto fail = [&](const std::string& agent_id, const std::string& what) {
        trace.failed = true;
        trace.failure = "agent " + agent_id + ": " + what;
        if (record) {
            ActionRecord rec;
            rec.instance_id = x.id;
            rec.decision = 0;
            rec.reason = "backend error: " + what;
            rec.failed = true;
            record_action(h.node(agent_id), std::move(rec));
        }
    };

    // Auditors
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
        ctx.history_summary = record ? detail::history_summary(a) : "";
        ctx.hidden_label = x.label;
        Judgment j;
        try {
            j = backend.judge(ctx);
        } catch (const BackendError& e) {
            fail(id, e.what());
            return trace;
        }
        TraceEntry te;
        te.agent_id = id;
        te.role = Role::Auditor;
        te.decision = j.decision;
        te.reason = j.reason;
        trace.entries[id] = te;
        if (record) {
            ActionRecord rec;
            rec.instance_id = x.id;
            rec.decision = j.decision;
            rec.reason = j.reason;
            record_action(a, std::move(rec));
        }
    }

    // Coordinator layers, bottom-up
    for (std::size_t l = 1; l + 1 < h.layers.size(); ++l) {
        for (const auto& cid : h.layers[l]) {
            AgentNode& c = h.node(cid);
            std::vector<Vote> votes;
            for (const auto& child : h.children(cid)) {
                const TraceEntry& sub = trace.entries.at(child);
                votes.push_back(Vote{child, sub.decision,
                                     c.confidence->get(child), sub.reason});
            }
            VoteOutcome out = weighted_vote(votes);
            std::string reason;
            try {
                reason = inherit_reason(votes, out.decision);
            } catch (const DataError&) {
                // Tie forced the decision to 0 with no aligned subordinate.
                reason = "tie resolved to 0 with no aligned subordinate";
            }
            TraceEntry te;
            te.agent_id = cid;
            te.role = Role::Coordinator;
            te.decision = out.decision;
            te.reason = reason;
            te.votes = votes;
            te.signed_sum = out.signed_sum;
            trace.entries[cid] = te;
            if (record) {
                ActionRecord rec;
                rec.instance_id = x.id;
                rec.decision = out.decision;
                rec.reason = reason;
                rec.votes = votes;
                record_action(c, std::move(rec));
            }
        }
    }

    // Decision-Maker
    AgentNode& dm = h.dm();
    Features full = project_features(x, dm.profile);
    SynthContext sc;
    sc.agent_id = dm.id;
    sc.backend_model = dm.backend_model;
    sc.instance_id = x.id;
    sc.full_view = &full;
    for (const auto& child : h.children(dm.id)) {
        const TraceEntry& sub = trace.entries.at(child);
        sc.summaries.push_back(Vote{child, sub.decision,
                                    dm.confidence->get(child), sub.reason});
    }
    sc.experience = dm.experience ? &*dm.experience : nullptr;
    sc.confidence = dm.confidence ? &*dm.confidence : nullptr;
    sc.hidden_label = x.label;
    Synthesis syn;
    try {
        syn = backend.synthesize(sc);
    } catch (const BackendError& e) {
        fail(dm.id, e.what());
        return trace;
    }
    TraceEntry te;
    te.agent_id = dm.id;
    te.role = Role::DecisionMaker;
    te.decision = syn.judgment.decision;
    te.reason = syn.judgment.reason;
    te.votes = syn.votes;
    te.signed_sum = syn.signed_sum;
    trace.entries[dm.id] = te;
    trace.final_decision = syn.judgment.decision;
    trace.final_reason = syn.judgment.reason;
    trace.final_signed_sum = syn.signed_sum;
    if (record) {
        ActionRecord rec;
        rec.instance_id = x.id;
        rec.decision = syn.judgment.decision;
        rec.reason = syn.judgment.reason;
        rec.votes = syn.votes;
        record_action(dm, std::move(rec));
    }
    return trace;
}

inline ForwardTrace forward_pass(Hierarchy& h, Backend& backend,
                                 const Instance& x) {
    return forward_core(h, backend, x, true);
}

// ---------------------------------------------------------------------------
// Retrieval
// ---------------------------------------------------------------------------

// Indices of the k fragments most similar to the query (unit vectors, so the
// dot product is the cosine); ties resolve by insertion order.
inline std::vector<std::size_t> top_k_by_cosine(
    const std::vector<const ExperienceFragment*>& pool,
    const std::vector<double>& query, std::size_t k) {
    std::vector<double> score(pool.size(), 0.0);
    for (std::size_t i = 0; i < pool.size(); ++i) {
        const auto& e = pool[i]->embedding;
        if (e.size() != query.size())
            throw DataError("retrieval: embedding dimension mismatch");
        double dot = 0.0;
        for (std::size_t d = 0; d < e.size(); ++d) dot += e[d] * query[d];
        score[i] = dot;
    }
    std::vector<std::size_t> idx(pool.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return score[a] > score[b];
    });
    if (idx.size() > k) idx.resize(k);
    return idx;
}

inline std::string render_feature_names(const std::vector<std::string>& names) {
    std::ostringstream os;
    os << "features: ";
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (i) os << ", ";
        os << names[i];
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Initialization: Decision-Maker self-learning, retrieval-guided Auditor
// bootstrap, validation probes, hierarchy construction.
// ---------------------------------------------------------------------------

// The DM judges each labeled instance directly (no coordinator summaries yet)
// and reflects against the ground truth, appending one fragment per instance.
inline void dm_self_learning(AgentNode& dm, Backend& backend,
                             const std::vector<Instance>& instances,
                             std::vector<EvictionEvent>* evictions = nullptr,
                             std::vector<std::string>* log = nullptr) {
    if (dm.role != Role::DecisionMaker)
        throw ConfigError("dm_self_learning on a non-decision-maker");
    std::size_t failures = 0;
    std::string last_error;
    for (const Instance& x : instances) {
        if (!x.label)
            throw DataError("dm_self_learning: instance '" + x.id +
                            "' has no label");
        try {
            Features full = project_features(x, dm.profile);
            SynthContext sc;
            sc.agent_id = dm.id;
            sc.backend_model = dm.backend_model;
            sc.instance_id = x.id;
            sc.full_view = &full;
            sc.experience = &*dm.experience;
            sc.confidence = &*dm.confidence;
            sc.hidden_label = x.label;
            Synthesis syn = backend.synthesize(sc);

            ActionRecord rec;
            rec.instance_id = x.id;
            rec.decision = syn.judgment.decision;
            rec.reason = syn.judgment.reason;
            rec.votes = syn.votes;
            rec.mode = ActionMode::SelfLearning;
            record_action(dm, std::move(rec));

            ReflectContext rc;
            rc.agent_id = dm.id;
            rc.backend_model = dm.backend_model;
            rc.instance_id = x.id;
            rc.feature_names = dm.profile.feature_subset;
            rc.predicted = syn.judgment.decision;
            rc.predicted_reason = syn.judgment.reason;
            rc.truth = x.label;
            ExperienceFragment frag = backend.self_reflect(rc).fragment;
            frag.origin = FragmentOrigin::SelfLearned;
            if (auto ev = dm.experience->append(std::move(frag)); ev && evictions)
                evictions->push_back(EvictionEvent{dm.id, ev->id});
        } catch (const BackendError& e) {
            ++failures;
            last_error = e.what();
            if (log)
                log->push_back("self-learning skipped instance '" + x.id +
                               "': " + e.what());
        }
    }
    // Per-instance failures are skips; losing every instance is a dead
    // backend and must surface as such.
    if (!instances.empty() && failures == instances.size())
        throw BackendError("self-learning failed on all " +
                           std::to_string(failures) +
                           " instances; last error: " + last_error);
}

// Bootstrap one Auditor from the DM's experience: embed the profile's feature
// names, retrieve the top-k nearest DM fragments, distill them into a single
// heuristic.
inline void auditor_bootstrap(AgentNode& auditor,
                              const ExperienceMemory& dm_experience,
                              Backend& backend, int top_k,
                              std::vector<EvictionEvent>* evictions = nullptr,
                              std::vector<std::string>* log = nullptr) {
    if (auditor.role != Role::Auditor)
        throw ConfigError("auditor_bootstrap on a non-auditor");
    if (dm_experience.empty())
        throw DataError("auditor_bootstrap: decision-maker experience is empty");

    std::string desc = render_feature_names(auditor.profile.feature_subset);
    std::vector<double> query = backend.embed(desc, auditor.id);

    std::vector<const ExperienceFragment*> pool;
    for (const auto& f : dm_experience.fragments()) pool.push_back(&f);
    std::size_t k = static_cast<std::size_t>(top_k);
    if (k > pool.size()) {
        if (log)
            log->push_back("bootstrap " + auditor.id + ": top_k " +
                           std::to_string(top_k) + " exceeds memory size " +
                           std::to_string(pool.size()) + ", retrieving all");
        k = pool.size();
    }
    auto picks = top_k_by_cosine(pool, query, k);

    ReflectContext rc;
    rc.agent_id = auditor.id;
    rc.backend_model = auditor.backend_model;
    rc.feature_names = auditor.profile.feature_subset;
    std::ostringstream retrieved;
    for (std::size_t i : picks) {
        rc.fragment_texts.push_back(pool[i]->text);
        auditor.consumed_fragment_ids.insert(pool[i]->id);
        retrieved << " " << pool[i]->id;
    }
    ExperienceFragment frag = backend.self_reflect(rc).fragment;
    frag.origin = FragmentOrigin::Retrieved;
    if (auto ev = auditor.experience->append(std::move(frag)); ev && evictions)
        evictions->push_back(EvictionEvent{auditor.id, ev->id});
    if (log)
        log->push_back("bootstrap " + auditor.id + ": retrieved fragments" +
                       retrieved.str());
}

// End-of-epoch enrichment: query the DM memory by the centroid of the
// auditor's own fragments (bootstrap query as fallback), skipping fragments
// this auditor has already distilled.
inline void auditor_epoch_refresh(AgentNode& auditor,
                                  const ExperienceMemory& dm_experience,
                                  Backend& backend, int top_k,
                                  std::vector<EvictionEvent>* evictions = nullptr,
                                  std::vector<std::string>* log = nullptr) {
    if (auditor.role != Role::Auditor)
        throw ConfigError("auditor_epoch_refresh on a non-auditor");
    if (dm_experience.empty()) {
        if (log)
            log->push_back("refresh " + auditor.id +
                           ": decision-maker memory empty, no-op");
        return;
    }
    std::vector<const ExperienceFragment*> pool;
    for (const auto& f : dm_experience.fragments())
        if (!auditor.consumed_fragment_ids.count(f.id)) pool.push_back(&f);
    if (pool.empty()) {
        if (log)
            log->push_back("refresh " + auditor.id +
                           ": all fragments already distilled, no-op");
        return;
    }

    std::vector<double> query;
    if (auditor.experience->empty()) {
        query = backend.embed(render_feature_names(auditor.profile.feature_subset),
                              auditor.id);
    } else {
        const auto& own = auditor.experience->fragments();
        query.assign(own.front().embedding.size(), 0.0);
        for (const auto& f : own)
            for (std::size_t d = 0; d < query.size(); ++d)
                query[d] += f.embedding[d];
        double norm = 0.0;
        for (double v : query) norm += v * v;
        norm = std::sqrt(norm);
        if (norm > 0.0) {
            for (double& v : query) v /= norm;
        } else {
            query = backend.embed(
                render_feature_names(auditor.profile.feature_subset),
                auditor.id);
        }
    }

    std::size_t k = std::min(static_cast<std::size_t>(top_k), pool.size());
    auto picks = top_k_by_cosine(pool, query, k);

    ReflectContext rc;
    rc.agent_id = auditor.id;
    rc.backend_model = auditor.backend_model;
    rc.feature_names = auditor.profile.feature_subset;
    if (!auditor.experience->empty())
        rc.current_experience = auditor.experience->fragments().back().text;
    std::ostringstream retrieved;
    for (std::size_t i : picks) {
        rc.fragment_texts.push_back(pool[i]->text);
        auditor.consumed_fragment_ids.insert(pool[i]->id);
        retrieved << " " << pool[i]->id;
    }
    ExperienceFragment frag = backend.self_reflect(rc).fragment;
    frag.origin = FragmentOrigin::Retrieved;
    if (auto ev = auditor.experience->append(std::move(frag)); ev && evictions)
        evictions->push_back(EvictionEvent{auditor.id, ev->id});
    if (log)
        log->push_back("refresh " + auditor.id + ": retrieved fragments" +
                       retrieved.str());
}

// Validation predictions for a set of bare auditors (pre-hierarchy).
inline ValidationEval probe_auditors(std::vector<AgentNode*> auditors,
                                     Backend& backend,
                                     const std::vector<Instance>& val_set) {
    if (val_set.empty()) throw DataError("probe: empty validation set");
    ValidationEval ev;
    for (const auto& x : val_set) {
        if (!x.label)
            throw DataError("probe: validation instance '" + x.id +
                            "' has no label");
        ev.instance_ids.push_back(x.id);
        ev.labels.push_back(*x.label);
    }
    for (AgentNode* a : auditors) {
        PredictionVector pv;
        pv.bits.reserve(val_set.size());
        for (const auto& x : val_set) {
            Features view = project_features(x, a->profile);
            JudgeContext ctx;
            ctx.agent_id = a->id;
            ctx.backend_model = a->backend_model;
            ctx.instance_id = x.id;
            ctx.view = &view;
            ctx.profile = &a->profile;
            ctx.experience = a->experience ? &*a->experience : nullptr;
            ctx.hidden_label = x.label;
            pv.bits.push_back(
                static_cast<std::uint8_t>(backend.judge(ctx).decision));
        }
        ev.vectors[a->id] = std::move(pv);
    }
    return ev;
}

struct InitResult {
    Hierarchy hierarchy;
    std::vector<std::string> log;
    std::vector<EvictionEvent> evictions;
};

// Full initialization: DM self-learning, auditor bootstrap, validation
// probes, then clustering-driven hierarchy construction.
inline InitResult initialize_hierarchy(std::vector<AgentNode> auditors,
                                       AgentNode dm, Backend& backend,
                                       const std::vector<Instance>& train_set,
                                       const std::vector<Instance>& val_set,
                                       const Hyperparameters& hp) {
    hp.validate();
    InitResult out;
    backend.meter().set_phase(Phase::Init);

    dm_self_learning(dm, backend, train_set, &out.evictions, &out.log);
    if (dm.experience->empty())
        throw DataError("initialization produced no decision-maker experience");
    for (auto& a : auditors)
        auditor_bootstrap(a, *dm.experience, backend, hp.top_k, &out.evictions,
                          &out.log);

    std::vector<AgentNode*> ptrs;
    ptrs.reserve(auditors.size());
    for (auto& a : auditors) ptrs.push_back(&a);
    ValidationEval ev = probe_auditors(ptrs, backend, val_set);

    out.hierarchy = build_hierarchy(std::move(auditors), std::move(dm), ev, hp,
                                    &out.log);
    return out;
}

// ---------------------------------------------------------------------------
// Targeted correction and the epoch loop
// ---------------------------------------------------------------------------

struct WeightDelta {
    std::string parent_id;
    std::string child_id;
    double before = 0.0;
    double after = 0.0;
};

struct CorrectionReport {
    std::string instance_id;
    int truth = 0;
    int final_decision = 0;
    std::vector<std::string> corrected_agents;
    std::map<std::string, int> agent_decisions;  // trace decision per corrected agent
    std::vector<WeightDelta> weight_deltas;
    std::uint64_t fragments_appended = 0;

    bool empty() const { return corrected_agents.empty(); }
};

struct EpochMetrics {
    int epoch = 0;
    MetricsReport validation;
    std::uint64_t corrected_instances = 0;
    std::uint64_t corrected_agents = 0;
    std::uint64_t weight_updates = 0;
    std::uint64_t fragments_added = 0;
    std::uint64_t prunes = 0;
    std::uint64_t expansions = 0;
    std::uint64_t forward_tokens = 0;
    std::uint64_t adaptation_tokens = 0;
    std::uint64_t correction_tokens = 0;
    std::uint64_t refresh_tokens = 0;
    std::uint64_t validation_tokens = 0;
};

struct TrainState {
    int epochs_done = 0;
    std::map<std::string, double> hist;  // running validation accuracy
    std::vector<EpochMetrics> history;
    std::vector<TopologyChange> changes;
    std::vector<EvictionEvent> evictions;
    std::vector<CorrectionReport> corrections;  // nonempty reports only
    std::vector<std::string> log;
};

struct TrainOptions {
    int batch_size = 32;
    bool adapt = true;
};

class Trainer {
public:
    Trainer(Hierarchy& h, Backend& backend, Hyperparameters hp,
            TrainOptions opt = {})
        : h_(h), backend_(backend), hp_(std::move(hp)), opt_(opt) {
        hp_.validate();
        if (opt_.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    }

    TrainState& state() { return state_; }
    const TrainState& state() const { return state_; }

    // Historical-accuracy term; seeded at 1.0 before any evidence, matching
    // the weight initialization.
    double hist_of(const std::string& id) const {
        auto it = state_.hist.find(id);
        return it == state_.hist.end() ? 1.0 : it->second;
    }

    // Fresh validation predictions for every auditor (active and reserve),
    // propagated upward through the current weights for every coordinator.
    ValidationEval probe_validation(const std::vector<Instance>& val_set) {
        std::vector<AgentNode*> auditors;
        for (auto& [id, node] : h_.nodes)
            if (node.role == Role::Auditor) auditors.push_back(&node);
        ValidationEval ev = probe_auditors(auditors, backend_, val_set);
        for (std::size_t l = 1; l + 1 < h_.layers.size(); ++l) {
            for (const auto& cid : h_.layers[l]) {
                const AgentNode& c = h_.node(cid);
                PredictionVector pv;
                pv.bits.resize(ev.labels.size());
                for (std::size_t t = 0; t < ev.labels.size(); ++t) {
                    double s = 0.0;
                    for (const auto& child : h_.children(cid)) {
                        s += c.confidence->get(child) *
                             (2 * ev.vector_of(child).bits[t] - 1);
                    }
                    pv.bits[t] = s > 0.0 ? 1 : 0;
                }
                ev.vectors[cid] = std::move(pv);
            }
        }
        return ev;
    }

    // Errors-only, top-down refinement. Runs only when the final decision is
    // wrong; within it, each Coordinator self-updates only if its own
    // decision was wrong. Auditors are deferred to the epoch refresh.
    CorrectionReport targeted_correction(const Instance& x,
                                         const ForwardTrace& trace) {
        if (!x.label)
            throw DataError("targeted_correction: unlabeled instance");
        const int y = *x.label;
        CorrectionReport rep;
        rep.instance_id = x.id;
        rep.truth = y;
        rep.final_decision = trace.final_decision;
        if (trace.final_decision == y) return rep;

        AgentNode& dm = h_.dm();
        ReflectContext rc;
        rc.agent_id = dm.id;
        rc.backend_model = dm.backend_model;
        rc.instance_id = x.id;
        rc.feature_names = dm.profile.feature_subset;
        rc.predicted = trace.final_decision;
        rc.predicted_reason = trace.final_reason;
        rc.truth = y;
        auto dm_entry = trace.entries.find(dm.id);
        if (dm_entry != trace.entries.end()) {
            for (const auto& v : dm_entry->second.votes)
                if (v.voter_id != dm.id)  // exclude the direct-judgment row
                    rc.child_votes.push_back(v);
        }
        Reflection refl = backend_.self_reflect(rc);
        refl.fragment.origin = FragmentOrigin::Reflected;
        if (auto ev = dm.experience->append(std::move(refl.fragment)))
            state_.evictions.push_back(EvictionEvent{dm.id, ev->id});
        ++rep.fragments_appended;
        rep.corrected_agents.push_back(dm.id);
        rep.agent_decisions[dm.id] = trace.final_decision;

        apply_confidence_updates(dm, trace, y, rep, refl.child_f_ref);

        // Coordinators, top-down; only those whose own decision was wrong.
        for (std::size_t l = h_.layers.size() - 1; l-- > 1;) {
            for (const auto& cid : h_.layers[l]) {
                auto it = trace.entries.find(cid);
                if (it == trace.entries.end()) continue;  // admitted post-trace
                if (it->second.decision == y) continue;
                AgentNode& c = h_.node(cid);
                std::size_t before = rep.weight_deltas.size();
                apply_confidence_updates(c, trace, y, rep, {});
                if (rep.weight_deltas.size() > before) {
                    rep.corrected_agents.push_back(cid);
                    rep.agent_decisions[cid] = it->second.decision;
                }
            }
        }
        return rep;
    }

    // Algorithm loop: per batch, forward passes, one adaptation round, then
    // targeted corrections; per epoch, the auditor refresh and validation
    // metrics. Safe to call repeatedly with a growing epoch target.
    void run_epochs(const std::vector<Instance>& train_set,
                    const std::vector<Instance>& val_set, int target_epochs) {
        while (state_.epochs_done < target_epochs) {
            const int epoch = state_.epochs_done + 1;
            EpochMetrics em;
            em.epoch = epoch;
            TokenMeter& meter = backend_.meter();
            const std::uint64_t t_fwd = meter.total_phase(Phase::Forward);
            const std::uint64_t t_ada = meter.total_phase(Phase::Adaptation);
            const std::uint64_t t_cor = meter.total_phase(Phase::Correction);
            const std::uint64_t t_ref = meter.total_phase(Phase::Refresh);
            const std::uint64_t t_val = meter.total_phase(Phase::Validation);

            for (std::size_t start = 0; start < train_set.size();
                 start += static_cast<std::size_t>(opt_.batch_size)) {
                std::size_t end = std::min(
                    train_set.size(),
                    start + static_cast<std::size_t>(opt_.batch_size));

                meter.set_phase(Phase::Forward);
                std::vector<ForwardTrace> traces;
                traces.reserve(end - start);
                for (std::size_t i = start; i < end; ++i)
                    traces.push_back(forward_pass(h_, backend_, train_set[i]));

                if (opt_.adapt) {
                    meter.set_phase(Phase::Adaptation);
                    ValidationEval ev = probe_validation(val_set);
                    auto changes = adapt_topology(h_, ev, hp_, epoch);
                    for (const auto& ch : changes) {
                        if (ch.action == "prune") ++em.prunes;
                        if (ch.action == "expand") ++em.expansions;
                        state_.changes.push_back(ch);
                    }
                    h_.audit(hp_.n_max);
                    refresh_hist(ev);
                }

                meter.set_phase(Phase::Correction);
                for (std::size_t i = start; i < end; ++i) {
                    const Instance& x = train_set[i];
                    const ForwardTrace& tr = traces[i - start];
                    if (tr.failed) {
                        state_.log.push_back("epoch " + std::to_string(epoch) +
                                             ": skipped correction for '" +
                                             x.id + "': " + tr.failure);
                        continue;
                    }
                    if (!x.label) continue;
                    CorrectionReport rep = targeted_correction(x, tr);
                    if (rep.empty()) continue;
                    ++em.corrected_instances;
                    em.corrected_agents += rep.corrected_agents.size();
                    em.weight_updates += rep.weight_deltas.size();
                    em.fragments_added += rep.fragments_appended;
                    state_.corrections.push_back(std::move(rep));
                }
            }

            meter.set_phase(Phase::Refresh);
            const AgentNode& dm = h_.dm();
            std::vector<std::string> auditor_ids = h_.layers.at(0);
            for (const auto& id : auditor_ids)
                auditor_epoch_refresh(h_.node(id), *dm.experience, backend_,
                                      hp_.top_k, &state_.evictions,
                                      &state_.log);

            meter.set_phase(Phase::Validation);
            em.validation = compute_metrics(evaluate(val_set));

            em.forward_tokens = meter.total_phase(Phase::Forward) - t_fwd;
            em.adaptation_tokens = meter.total_phase(Phase::Adaptation) - t_ada;
            em.correction_tokens = meter.total_phase(Phase::Correction) - t_cor;
            em.refresh_tokens = meter.total_phase(Phase::Refresh) - t_ref;
            em.validation_tokens = meter.total_phase(Phase::Validation) - t_val;
            state_.history.push_back(em);
            state_.epochs_done = epoch;
        }
    }

    // Full-activation evaluation probe; leaves no action records.
    std::vector<PredictionRow> evaluate(const std::vector<Instance>& set) {
        if (set.empty()) throw DataError("evaluate: empty instance set");
        std::vector<PredictionRow> rows;
        rows.reserve(set.size());
        for (const auto& x : set) {
            if (!x.label)
                throw DataError("evaluate: instance '" + x.id +
                                "' has no label");
            ForwardTrace tr = forward_core(h_, backend_, x, false);
            if (tr.failed)
                throw BackendError("evaluate: " + tr.failure);
            rows.push_back(PredictionRow{
                score_from_signed_sum(tr.final_signed_sum), tr.final_decision,
                *x.label});
        }
        return rows;
    }

private:
    // f_ref defaults to the match indicator; live runs may override it per
    // child with the adjustment parsed from the DM refine reply.
    void apply_confidence_updates(AgentNode& parent, const ForwardTrace& trace,
                                  int y, CorrectionReport& rep,
                                  const std::map<std::string, double>& f_ref_override) {
        auto it = trace.entries.find(parent.id);
        if (it == trace.entries.end()) return;
        const TraceEntry& entry = it->second;
        for (const auto& child : h_.children(parent.id)) {
            const Vote* vote = nullptr;
            for (const auto& v : entry.votes)
                if (v.voter_id == child) {
                    vote = &v;
                    break;
                }
            if (!vote) continue;  // admitted after this trace
            double f_ref = vote->decision == y ? 1.0 : 0.0;
            if (auto ov = f_ref_override.find(child);
                ov != f_ref_override.end())
                f_ref = ov->second;
            double before = parent.confidence->get(child);
            double after =
                confidence_update(before, f_ref, hist_of(child), hp_.alpha);
            parent.confidence->set(child, after);
            rep.weight_deltas.push_back(
                WeightDelta{parent.id, child, before, after});
        }
    }

    void refresh_hist(const ValidationEval& ev) {
        for (const auto& [id, vec] : ev.vectors)
            state_.hist[id] = ev.accuracy_of(id);
    }

    Hierarchy& h_;
    Backend& backend_;
    Hyperparameters hp_;
    TrainOptions opt_;
    TrainState state_;
};

}  // namespace pamas
