#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "pamas/common.hpp"

namespace pamas {

// A feature value is either a numeric scalar or a short text; agents see
// features rendered as "name: value" lines either way.
using FeatureValue = std::variant<double, std::string>;

inline std::string feature_value_to_string(const FeatureValue& v) {
    if (std::holds_alternative<double>(v)) {
        std::ostringstream os;
        os << std::get<double>(v);
        return os.str();
    }
    return std::get<std::string>(v);
}

// Ordered name -> value map. Order is the header/profile order and is part of
// the contract (projection preserves the profile's order).
class Features {
public:
    void add(std::string name, FeatureValue value) {
        if (index_.count(name))
            throw DataError("duplicate feature name '" + name + "'");
        index_.emplace(name, entries_.size());
        entries_.emplace_back(std::move(name), std::move(value));
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    const FeatureValue& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end())
            throw DataError("missing feature '" + name + "'");
        return entries_[it->second].second;
    }

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    const std::vector<std::pair<std::string, FeatureValue>>& entries() const {
        return entries_;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [n, v] : entries_) out.push_back(n);
        return out;
    }

    std::string render() const {
        std::ostringstream os;
        for (const auto& [n, v] : entries_)
            os << n << ": " << feature_value_to_string(v) << "\n";
        return os.str();
    }

    bool operator==(const Features& other) const {
        return entries_ == other.entries_;
    }

private:
    std::vector<std::pair<std::string, FeatureValue>> entries_;
    std::map<std::string, std::size_t> index_;
};

// One item under audit.
struct Instance {
    std::string id;
    Features features;
    std::optional<int> label;  // 0 or 1 when present

    void validate() const {
        if (id.empty()) throw DataError("instance with empty id");
        if (label && *label != 0 && *label != 1)
            throw DataError("instance '" + id + "': label must be 0 or 1");
    }
};

// Universal agent output: binary decision plus a natural-language reason.
struct Judgment {
    int decision = 0;
    std::string reason;

    static Judgment make(int decision, std::string reason) {
        if (decision != 0 && decision != 1)
            throw DataError("judgment decision must be 0 or 1");
        if (reason.empty()) reason = "no reason given";
        return Judgment{decision, std::move(reason)};
    }
};

enum class Role { Auditor, Coordinator, DecisionMaker };

inline const char* role_name(Role r) {
    switch (r) {
        case Role::Auditor: return "auditor";
        case Role::Coordinator: return "coordinator";
        case Role::DecisionMaker: return "decision-maker";
    }
    return "?";
}

// Persona plus the feature names this agent is allowed to observe.
// Auditors: nonempty proper subset. Decision-Maker: full set.
// Coordinators: empty (they never see raw features).
struct Profile {
    std::string persona;
    std::vector<std::string> feature_subset;
};

enum class FragmentOrigin { SelfLearned, Retrieved, Reflected };

inline const char* origin_name(FragmentOrigin o) {
    switch (o) {
        case FragmentOrigin::SelfLearned: return "self-learned";
        case FragmentOrigin::Retrieved: return "retrieved";
        case FragmentOrigin::Reflected: return "reflected";
    }
    return "?";
}

// One distilled heuristic sentence with its embedding. Fragment ids are
// per-memory counters and survive eviction, so retrieval bookkeeping can
// reference fragments that are no longer resident.
struct ExperienceFragment {
    std::uint64_t id = 0;
    std::string text;
    std::vector<double> embedding;  // unit L2 norm
    FragmentOrigin origin = FragmentOrigin::Reflected;

    void validate(std::size_t expected_dim) const {
        if (text.empty()) throw DataError("experience fragment with empty text");
        if (embedding.size() != expected_dim)
            throw DataError("fragment embedding dimension mismatch");
        double n2 = 0.0;
        for (double x : embedding) n2 += x * x;
        if (std::abs(std::sqrt(n2) - 1.0) > 1e-9)
            throw DataError("fragment embedding is not unit-normalized");
    }
};

struct EvictionEvent {
    std::string owner_id;
    std::uint64_t fragment_id;
};

// Append-only store of heuristics. Capacity-bounded with oldest-first
// eviction; evictions are surfaced to the caller so runs can log them.
class ExperienceMemory {
public:
    explicit ExperienceMemory(std::size_t capacity = 256) : capacity_(capacity) {}

    std::optional<ExperienceFragment> append(ExperienceFragment frag) {
        frag.id = next_id_++;
        fragments_.push_back(std::move(frag));
        if (fragments_.size() > capacity_) {
            ExperienceFragment evicted = std::move(fragments_.front());
            fragments_.erase(fragments_.begin());
            return evicted;
        }
        return std::nullopt;
    }

    const std::vector<ExperienceFragment>& fragments() const { return fragments_; }
    std::size_t size() const { return fragments_.size(); }
    bool empty() const { return fragments_.empty(); }
    std::size_t capacity() const { return capacity_; }
    std::uint64_t next_id() const { return next_id_; }

    // Checkpoint restore path only.
    void restore(std::vector<ExperienceFragment> frags, std::uint64_t next_id,
                 std::size_t capacity) {
        fragments_ = std::move(frags);
        next_id_ = next_id;
        capacity_ = capacity;
    }

private:
    std::vector<ExperienceFragment> fragments_;
    std::uint64_t next_id_ = 1;
    std::size_t capacity_;
};

// One subordinate's contribution to an aggregated decision. Weight is the
// parent's trust weight at decision time (snapshotted for exact replay).
struct Vote {
    std::string voter_id;
    int decision = 0;
    double weight = 1.0;
    std::string reason;
};

enum class ActionMode { Forward, Routed, SelfLearning };

inline const char* action_mode_name(ActionMode m) {
    switch (m) {
        case ActionMode::Forward: return "forward";
        case ActionMode::Routed: return "routed";
        case ActionMode::SelfLearning: return "self-learning";
    }
    return "?";
}

// Audit-log entry. Auditors store (decision, reason); Coordinators and the
// Decision-Maker additionally store the votes that produced the decision.
struct ActionRecord {
    std::uint64_t seq = 0;  // assigned on append; strictly increasing per agent
    std::string instance_id;
    int decision = 0;
    std::string reason;
    std::vector<Vote> votes;
    ActionMode mode = ActionMode::Forward;
    bool failed = false;
};

class ActionMemory {
public:
    const ActionRecord& append(ActionRecord rec) {
        rec.seq = ++last_seq_;
        records_.push_back(std::move(rec));
        return records_.back();
    }

    const std::vector<ActionRecord>& records() const { return records_; }
    std::size_t size() const { return records_.size(); }
    std::uint64_t last_seq() const { return last_seq_; }

    void restore(std::vector<ActionRecord> recs, std::uint64_t last_seq) {
        records_ = std::move(recs);
        last_seq_ = last_seq;
    }

private:
    std::vector<ActionRecord> records_;
    std::uint64_t last_seq_ = 0;
};

// Parent-held trust weights over current subordinates.
class ConfidenceMemory {
public:
    void set(const std::string& subordinate_id, double w) {
        if (!std::isfinite(w) || w < 0.0)
            throw DataError("confidence weight must be finite and >= 0");
        weights_[subordinate_id] = w;
    }

    double get(const std::string& subordinate_id) const {
        auto it = weights_.find(subordinate_id);
        if (it == weights_.end())
            throw DataError("no confidence entry for '" + subordinate_id + "'");
        return it->second;
    }

    bool has(const std::string& subordinate_id) const {
        return weights_.count(subordinate_id) > 0;
    }

    void erase(const std::string& subordinate_id) { weights_.erase(subordinate_id); }

    const std::map<std::string, double>& weights() const { return weights_; }

private:
    std::map<std::string, double> weights_;
};

// An agent's 0/1 predictions over the validation set, in instance order.
struct PredictionVector {
    std::vector<std::uint8_t> bits;

    std::size_t size() const { return bits.size(); }
};

// Cosine similarity between prediction vectors treated as real vectors.
// Binary vectors can be all-zero; convention: two zero vectors are identical
// (1), a zero against a nonzero shares nothing (0).
inline double prediction_cosine(const PredictionVector& a, const PredictionVector& b) {
    if (a.size() != b.size())
        throw DataError("prediction vectors of mismatched length");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.bits.size(); ++i) {
        dot += static_cast<double>(a.bits[i]) * b.bits[i];
        na += static_cast<double>(a.bits[i]) * a.bits[i];
        nb += static_cast<double>(b.bits[i]) * b.bits[i];
    }
    if (na == 0.0 && nb == 0.0) return 1.0;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

struct Hyperparameters {
    double lambda = 0.5;  // redundancy weight in the prune score
    double gamma = 0.5;   // similarity penalty in the expansion gain
    double alpha = 0.3;   // EMA factor for confidence updates
    int top_k = 5;        // retrieval count
    int n_max = 4;        // maximum group size
    std::vector<int> layer_spec = {6, 5, 4};  // Coordinator count per layer
    double expansion_trigger_rho = 0.5;       // shared-error fraction trigger
    std::uint64_t seed = 1;

    void validate() const {
        if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
        if (gamma < 0.0) throw ConfigError("gamma must be >= 0");
        if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must be in (0,1)");
        if (top_k < 1) throw ConfigError("top_k must be >= 1");
        if (n_max < 2) throw ConfigError("n_max must be >= 2");
        if (layer_spec.empty()) throw ConfigError("layer_spec must be nonempty");
        for (int c : layer_spec)
            if (c <= 0) throw ConfigError("layer_spec entries must be positive");
        if (!(expansion_trigger_rho > 0.0 && expansion_trigger_rho <= 1.0))
            throw ConfigError("expansion_trigger_rho must be in (0,1]");
    }
};

// Role-typed agent. Memory presence follows the role:
//   Auditor         experience + action
//   Coordinator     confidence + action
//   Decision-Maker  confidence + experience + action
struct AgentNode {
    std::string id;
    Role role = Role::Auditor;
    Profile profile;
    std::optional<ExperienceMemory> experience;
    ActionMemory actions;
    std::optional<ConfidenceMemory> confidence;
    std::string backend_model;  // judgment-provider binding (Auditors, DM)

    // Retrieval bookkeeping: DM fragment ids this auditor has already
    // distilled (bootstrap and epoch refresh exclude them).
    std::set<std::uint64_t> consumed_fragment_ids;
};

inline void validate_role_memories(const AgentNode& node) {
    const bool wants_exp = node.role != Role::Coordinator;
    const bool wants_conf = node.role != Role::Auditor;
    if (node.experience.has_value() != wants_exp)
        throw ConfigError("agent '" + node.id + "': " + role_name(node.role) +
                          (wants_exp ? " requires" : " must not carry") +
                          " an experience memory");
    if (node.confidence.has_value() != wants_conf)
        throw ConfigError("agent '" + node.id + "': " + role_name(node.role) +
                          (wants_conf ? " requires" : " must not carry") +
                          " a confidence memory");
    if (node.role == Role::Coordinator && !node.backend_model.empty())
        throw ConfigError("agent '" + node.id +
                          "': coordinators carry no backend binding");
}

inline AgentNode make_agent(std::string id, Role role, Profile profile,
                            std::size_t experience_capacity = 256,
                            std::string backend_model = "") {
    AgentNode node;
    node.id = std::move(id);
    node.role = role;
    node.profile = std::move(profile);
    if (role != Role::Coordinator) {
        node.experience.emplace(experience_capacity);
        node.backend_model = std::move(backend_model);
    }
    if (role != Role::Auditor) node.confidence.emplace();
    validate_role_memories(node);
    return node;
}

// Restrict an instance to the feature names an agent may observe, in profile
// order. Errors name the first absent feature (dataset/profile mismatch).
inline Features project_features(const Instance& instance, const Profile& profile) {
    Features out;
    for (const auto& name : profile.feature_subset) {
        if (!instance.features.has(name))
            throw DataError("instance '" + instance.id + "': missing feature '" +
                            name + "'");
        out.add(name, instance.features.at(name));
    }
    return out;
}

inline const ActionRecord& record_action(AgentNode& agent, ActionRecord rec) {
    if (rec.instance_id.empty())
        throw DataError("action record with empty instance id");
    return agent.actions.append(std::move(rec));
}

}  // namespace pamas
