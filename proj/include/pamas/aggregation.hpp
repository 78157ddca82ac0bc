#pragma once

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "pamas/core.hpp"

namespace pamas {

struct VoteOutcome {
    int decision = 0;
    double signed_sum = 0.0;
    bool tie = false;  // signed sum exactly zero; resolved toward 0
};

inline void validate_votes(const std::vector<Vote>& votes) {
    if (votes.empty()) throw DataError("empty vote set");
    std::set<std::string> ids;
    for (const auto& v : votes) {
        if (!ids.insert(v.voter_id).second)
            throw DataError("duplicate voter id '" + v.voter_id + "'");
        if (v.decision != 0 && v.decision != 1)
            throw DataError("vote decision must be 0 or 1");
        if (!std::isfinite(v.weight) || v.weight < 0.0)
            throw DataError("vote weight must be finite and >= 0");
    }
}

// Weighted vote: sum of w_j * (2 d_j - 1); decision 1 iff the sum is strictly
// positive, so an exact tie resolves to 0.
inline VoteOutcome weighted_vote(const std::vector<Vote>& votes) {
    validate_votes(votes);
    double sum = 0.0;
    for (const auto& v : votes) sum += v.weight * (2 * v.decision - 1);
    VoteOutcome out;
    out.signed_sum = sum;
    out.decision = sum > 0.0 ? 1 : 0;
    out.tie = sum == 0.0;
    return out;
}

// Unweighted majority margin over an active set.
inline int majority_margin(const std::vector<int>& decisions) {
    if (decisions.empty()) throw DataError("majority margin over empty set");
    int m = 0;
    for (int d : decisions) {
        if (d != 0 && d != 1) throw DataError("decision must be 0 or 1");
        m += 2 * d - 1;
    }
    return m;
}

// A Coordinator does not generate reasoning of its own: its reason is the
// reason of the highest-weight vote whose decision aligns with the aggregate,
// ties broken by lowest voter id.
inline const std::string& inherit_reason(const std::vector<Vote>& votes,
                                         int aggregated_decision) {
    validate_votes(votes);
    const Vote* best = nullptr;
    for (const auto& v : votes) {
        if (v.decision != aggregated_decision) continue;
        if (!best || v.weight > best->weight ||
            (v.weight == best->weight && v.voter_id < best->voter_id)) {
            best = &v;
        }
    }
    if (!best)
        throw DataError("no vote aligned with decision " +
                        std::to_string(aggregated_decision) +
                        "; degenerate confidence state");
    return best->reason;
}

}  // namespace pamas
