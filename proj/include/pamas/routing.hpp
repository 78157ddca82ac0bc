#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pamas/aggregation.hpp"
#include "pamas/backends.hpp"
#include "pamas/core.hpp"
#include "pamas/topology.hpp"

namespace pamas {

struct NodeActivation {
    std::string node_id;
    std::vector<std::string> activated;  // children, in activation order
    std::vector<double> margins;         // margin after each escalation step
    bool tie_break = false;              // exhausted with margin 0
    int decision = 0;
    std::string reason;
};

struct RouteResult {
    int decision = 0;
    std::string reason;
    double signed_sum = 0.0;  // Decision-Maker synthesis sum
    std::vector<Vote> dm_votes;
    std::map<std::string, NodeActivation> per_node;
    std::vector<std::string> activated_agents;  // every consulted agent
    std::size_t backend_calls = 0;              // judges + one synthesize
};

struct RoutingOptions {
    bool weighted_margin = false;  // Eq-as-written uses unweighted margins
    bool record_actions = true;
};

namespace detail {

struct RouteCtx {
    Hierarchy& h;
    Backend& backend;
    const Instance& x;
    RoutingOptions opt;
    RouteResult& result;
};

// Children in descending confidence, ties to the lowest id.
inline std::vector<std::string> confidence_order(const AgentNode& parent,
                                                 const std::vector<std::string>& children) {
    std::vector<std::string> order = children;
    std::sort(order.begin(), order.end(),
              [&](const std::string& a, const std::string& b) {
                  double wa = parent.confidence->get(a);
                  double wb = parent.confidence->get(b);
                  if (wa != wb) return wa > wb;
                  return a < b;
              });
    return order;
}

inline double margin_of(const std::vector<Vote>& votes, bool weighted) {
    double m = 0.0;
    for (const auto& v : votes)
        m += (weighted ? v.weight : 1.0) * (2 * v.decision - 1);
    return m;
}

inline std::pair<int, std::string> route_node(RouteCtx& ctx,
                                              const std::string& id);

// Escalate through `order` two at a time (one on an odd tail), resolving each
// activated child depth-first, until the margin leaves zero. Returns the
// accumulated votes and the filled activation record.
inline std::vector<Vote> escalate(RouteCtx& ctx, const AgentNode& parent,
                                  const std::vector<std::string>& order,
                                  NodeActivation& act) {
    std::vector<Vote> votes;
    std::size_t idx = 0;
    auto step = [&](std::size_t count) {
        for (std::size_t i = 0; i < count && idx < order.size(); ++i) {
            const std::string& child = order[idx++];
            auto [d, r] = route_node(ctx, child);
            votes.push_back(Vote{child, d, parent.confidence->get(child), r});
            act.activated.push_back(child);
        }
    };
    step(2);  // single child yields one activation and a nonzero margin
    double margin = margin_of(votes, ctx.opt.weighted_margin);
    act.margins.push_back(margin);
    while (margin == 0.0 && idx < order.size()) {
        step(2);
        margin = margin_of(votes, ctx.opt.weighted_margin);
        act.margins.push_back(margin);
    }
    return votes;
}

// Resolve one node during routing: Auditors judge directly, Coordinators
// recurse over their own children and stop at the first non-tie majority.
inline std::pair<int, std::string> route_node(RouteCtx& ctx,
                                              const std::string& id) {
    AgentNode& node = ctx.h.node(id);
    ctx.result.activated_agents.push_back(id);

    if (node.role == Role::Auditor) {
        Features view = project_features(ctx.x, node.profile);
        JudgeContext jc;
        jc.agent_id = id;
        jc.backend_model = node.backend_model;
        jc.instance_id = ctx.x.id;
        jc.view = &view;
        jc.profile = &node.profile;
        jc.experience = node.experience ? &*node.experience : nullptr;
        jc.hidden_label = ctx.x.label;
        Judgment j = ctx.backend.judge(jc);
        ++ctx.result.backend_calls;
        if (ctx.opt.record_actions) {
            ActionRecord rec;
            rec.instance_id = ctx.x.id;
            rec.decision = j.decision;
            rec.reason = j.reason;
            rec.mode = ActionMode::Routed;
            record_action(node, std::move(rec));
        }
        return {j.decision, j.reason};
    }

    NodeActivation act;
    act.node_id = id;
    std::vector<std::string> order = confidence_order(node, ctx.h.children(id));
    std::vector<Vote> votes = escalate(ctx, node, order, act);

    double margin = act.margins.back();
    int decision;
    if (margin != 0.0) {
        decision = margin > 0.0 ? 1 : 0;
    } else {
        // Every child consulted and still tied: fall back to the single
        // highest-confidence child's vote, flagged for reporting.
        act.tie_break = true;
        decision = votes.front().decision;
    }
    std::string reason = inherit_reason(votes, decision);

    act.decision = decision;
    act.reason = reason;
    ctx.result.per_node[id] = act;

    if (ctx.opt.record_actions) {
        ActionRecord rec;
        rec.instance_id = ctx.x.id;
        rec.decision = decision;
        rec.reason = reason;
        rec.votes = votes;
        rec.mode = ActionMode::Routed;
        record_action(node, std::move(rec));
    }
    return {decision, reason};
}

}  // namespace detail

// Confidence-guided inference. The Decision-Maker escalates over top-layer
// Coordinators until a non-tie majority fixes the minimal active set, each
// activated Coordinator resolves its own subtree the same way, and exactly
// one synthesize call integrates the routed summaries with the full feature
// view. Agents outside the activation trace incur zero backend calls.
inline RouteResult route_inference(Hierarchy& h, Backend& backend,
                                   const Instance& x, RoutingOptions opt = {}) {
    RouteResult result;
    detail::RouteCtx ctx{h, backend, x, opt, result};

    AgentNode& dm = h.dm();
    result.activated_agents.push_back(dm.id);

    NodeActivation act;
    act.node_id = dm.id;
    std::vector<std::string> order =
        detail::confidence_order(dm, h.children(dm.id));
    std::vector<Vote> summaries = detail::escalate(ctx, dm, order, act);
    if (act.margins.back() == 0.0) act.tie_break = true;

    Features full = project_features(x, dm.profile);
    SynthContext sc;
    sc.agent_id = dm.id;
    sc.backend_model = dm.backend_model;
    sc.instance_id = x.id;
    sc.full_view = &full;
    sc.summaries = summaries;
    sc.experience = dm.experience ? &*dm.experience : nullptr;
    sc.confidence = dm.confidence ? &*dm.confidence : nullptr;
    sc.hidden_label = x.label;
    Synthesis syn = backend.synthesize(sc);
    ++result.backend_calls;

    act.decision = syn.judgment.decision;
    act.reason = syn.judgment.reason;
    result.per_node[dm.id] = act;

    result.decision = syn.judgment.decision;
    result.reason = syn.judgment.reason;
    result.signed_sum = syn.signed_sum;
    result.dm_votes = syn.votes;

    if (opt.record_actions) {
        ActionRecord rec;
        rec.instance_id = x.id;
        rec.decision = syn.judgment.decision;
        rec.reason = syn.judgment.reason;
        rec.votes = syn.votes;
        rec.mode = ActionMode::Routed;
        record_action(dm, std::move(rec));
    }
    return result;
}

}  // namespace pamas
