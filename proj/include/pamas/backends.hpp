#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pamas/aggregation.hpp"
#include "pamas/common.hpp"
#include "pamas/core.hpp"

namespace pamas {

enum class CallKind { Judge, Synthesize, Reflect, Embed };

inline const char* call_kind_name(CallKind k) {
    switch (k) {
        case CallKind::Judge: return "judge";
        case CallKind::Synthesize: return "synthesize";
        case CallKind::Reflect: return "reflect";
        case CallKind::Embed: return "embed";
    }
    return "?";
}

// Run phases; every metered call is tagged with the phase that was active
// when it happened, so cost reconciliation can slice the log per stage.
enum class Phase {
    Init,
    Forward,
    Adaptation,
    Correction,
    Refresh,
    Validation,
    Inference,
    Other
};

inline const char* phase_name(Phase p) {
    switch (p) {
        case Phase::Init: return "init";
        case Phase::Forward: return "forward";
        case Phase::Adaptation: return "adaptation";
        case Phase::Correction: return "correction";
        case Phase::Refresh: return "refresh";
        case Phase::Validation: return "validation";
        case Phase::Inference: return "inference";
        case Phase::Other: return "other";
    }
    return "?";
}

struct TokenUsage {
    std::uint64_t prompt_tokens = 0;
    std::uint64_t completion_tokens = 0;
    CallKind kind = CallKind::Judge;
    Phase phase = Phase::Other;
    std::string agent_id;
    std::string instance_id;

    std::uint64_t total() const { return prompt_tokens + completion_tokens; }
};

struct MeterTotals {
    std::uint64_t grand = 0;
    std::map<std::string, std::uint64_t> per_agent;
    std::map<std::string, std::uint64_t> per_kind;
    std::map<std::string, std::uint64_t> per_phase;
};

// Atomic append log of every backend call. Phase changes happen between
// serialized pipeline stages; appends may come from concurrent workers.
class TokenMeter {
public:
    void set_phase(Phase p) {
        std::lock_guard<std::mutex> lock(mu_);
        phase_ = p;
    }

    Phase phase() const {
        std::lock_guard<std::mutex> lock(mu_);
        return phase_;
    }

    void add(TokenUsage u) {
        std::lock_guard<std::mutex> lock(mu_);
        u.phase = phase_;
        log_.push_back(std::move(u));
    }

    std::vector<TokenUsage> records() const {
        std::lock_guard<std::mutex> lock(mu_);
        return log_;
    }

    std::uint64_t total() const {
        std::lock_guard<std::mutex> lock(mu_);
        std::uint64_t t = 0;
        for (const auto& u : log_) t += u.total();
        return t;
    }

    std::uint64_t total_phase(Phase p) const {
        std::lock_guard<std::mutex> lock(mu_);
        std::uint64_t t = 0;
        for (const auto& u : log_)
            if (u.phase == p) t += u.total();
        return t;
    }

    std::size_t call_count(std::optional<Phase> p = std::nullopt,
                           std::optional<CallKind> k = std::nullopt) const {
        std::lock_guard<std::mutex> lock(mu_);
        std::size_t n = 0;
        for (const auto& u : log_) {
            if (p && u.phase != *p) continue;
            if (k && u.kind != *k) continue;
            ++n;
        }
        return n;
    }

    std::uint64_t total_agent(const std::string& agent_id) const {
        std::lock_guard<std::mutex> lock(mu_);
        std::uint64_t t = 0;
        for (const auto& u : log_)
            if (u.agent_id == agent_id) t += u.total();
        return t;
    }

    MeterTotals totals() const {
        std::lock_guard<std::mutex> lock(mu_);
        MeterTotals out;
        for (const auto& u : log_) {
            out.grand += u.total();
            out.per_agent[u.agent_id] += u.total();
            out.per_kind[call_kind_name(u.kind)] += u.total();
            out.per_phase[phase_name(u.phase)] += u.total();
        }
        return out;
    }

    void reset() {
        std::lock_guard<std::mutex> lock(mu_);
        log_.clear();
    }

    std::size_t size() const {
        std::lock_guard<std::mutex> lock(mu_);
        return log_.size();
    }

private:
    mutable std::mutex mu_;
    std::vector<TokenUsage> log_;
    Phase phase_ = Phase::Other;
};

// ---------------------------------------------------------------------------
// Deterministic text embedder: seeded hashing of normalized tokens, then L2
// normalization. Identical texts always produce identical unit vectors.
// ---------------------------------------------------------------------------

class HashEmbedder {
public:
    HashEmbedder(std::uint64_t seed, std::size_t dim) : seed_(seed), dim_(dim) {
        if (dim_ == 0) throw ConfigError("embedding dimension must be positive");
    }

    std::size_t dim() const { return dim_; }

    std::vector<double> embed(const std::string& text) const {
        if (text.empty()) throw DataError("embed: empty text");
        std::vector<std::string> tokens = tokenize(text);
        if (tokens.empty()) tokens.push_back(text);  // punctuation-only input

        std::vector<double> v(dim_, 0.0);
        for (const auto& tok : tokens) {
            std::uint64_t h = keyed_hash(seed_, "tok", tok);
            std::size_t idx = static_cast<std::size_t>(h % dim_);
            double sign = (h >> 63) ? 1.0 : -1.0;
            // Amplitude jitter keeps distinct tokens from cancelling exactly.
            double amp = 0.5 + keyed_uniform(seed_, "amp", tok);
            v[idx] += sign * amp;
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm == 0.0) {
            v[0] = 1.0;
            return v;
        }
        for (double& x : v) x /= norm;
        return v;
    }

private:
    static std::vector<std::string> tokenize(const std::string& text) {
        std::vector<std::string> out;
        std::string cur;
        for (char c : text) {
            if (std::isalnum(static_cast<unsigned char>(c))) {
                cur.push_back(static_cast<char>(
                    std::tolower(static_cast<unsigned char>(c))));
            } else if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        }
        if (!cur.empty()) out.push_back(cur);
        return out;
    }

    std::uint64_t seed_;
    std::size_t dim_;
};

// ---------------------------------------------------------------------------
// Reply parsing for the live chat path. Lenient and line-oriented: the first
// "Decision: <0|1>" wins, the last "Reason: ..." supplies the explanation.
// An unparseable decision is a hard failure, never a silent default.
// ---------------------------------------------------------------------------

inline std::optional<std::size_t> find_ci(const std::string& haystack,
                                          const std::string& needle,
                                          std::size_t from = 0) {
    if (needle.empty() || haystack.size() < needle.size()) return std::nullopt;
    for (std::size_t i = from; i + needle.size() <= haystack.size(); ++i) {
        bool hit = true;
        for (std::size_t j = 0; j < needle.size(); ++j) {
            if (std::tolower(static_cast<unsigned char>(haystack[i + j])) !=
                std::tolower(static_cast<unsigned char>(needle[j]))) {
                hit = false;
                break;
            }
        }
        if (hit) return i;
    }
    return std::nullopt;
}

inline std::string strip(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

inline std::optional<Judgment> parse_agent_reply(const std::string& reply) {
    std::optional<int> decision;
    std::size_t pos = 0;
    while (auto at = find_ci(reply, "decision", pos)) {
        std::size_t i = *at + 8;
        while (i < reply.size() &&
               (reply[i] == ':' || reply[i] == '=' ||
                std::isspace(static_cast<unsigned char>(reply[i])) ||
                reply[i] == '*'))  // tolerate "Decision: **1**" style markup
            ++i;
        if (i < reply.size() && (reply[i] == '0' || reply[i] == '1')) {
            decision = reply[i] - '0';
            break;
        }
        pos = *at + 8;
    }
    if (!decision) return std::nullopt;

    std::string reason;
    std::size_t last = std::string::npos;
    pos = 0;
    while (auto at = find_ci(reply, "reason", pos)) {
        last = *at;
        pos = *at + 6;
    }
    if (last != std::string::npos) {
        std::size_t i = last + 6;
        while (i < reply.size() && (reply[i] == ':' || reply[i] == '=')) ++i;
        std::size_t eol = reply.find('\n', i);
        reason = strip(reply.substr(i, eol == std::string::npos
                                           ? std::string::npos
                                           : eol - i));
    }
    return Judgment::make(*decision, std::move(reason));
}

// ---------------------------------------------------------------------------
// Backend boundary: everything that "thinks" lives behind this interface.
// ---------------------------------------------------------------------------

struct JudgeContext {
    std::string agent_id;
    std::string backend_model;  // per-agent backbone binding, fixed at init
    std::string instance_id;
    const Features* view = nullptr;
    const Profile* profile = nullptr;
    const ExperienceMemory* experience = nullptr;
    std::string history_summary;
    std::optional<int> hidden_label;  // consumed by the simulated backend only
};

struct SynthContext {
    std::string agent_id;
    std::string backend_model;
    std::string instance_id;
    const Features* full_view = nullptr;
    std::vector<Vote> summaries;  // (coordinator, decision, weight, reason)
    const ExperienceMemory* experience = nullptr;
    const ConfidenceMemory* confidence = nullptr;
    std::optional<int> hidden_label;
};

struct ReflectContext {
    std::string agent_id;
    std::string backend_model;
    std::string instance_id;
    std::vector<std::string> feature_names;
    std::optional<int> predicted;
    std::string predicted_reason;
    std::optional<int> truth;
    std::vector<std::string> fragment_texts;  // nonempty => distill/merge mode
    std::string current_experience;
    std::vector<Vote> child_votes;  // set during corrections: the DM refine
                                    // reply may carry per-child adjustments
};

// Reflection output: the distilled fragment plus, on the live path, any
// per-child trust adjustments parsed from the refine reply. Children without
// a parseable value fall back to the match-indicator upstream.
struct Reflection {
    ExperienceFragment fragment;
    std::map<std::string, double> child_f_ref;
};

// Scan a refine reply for "child-id <sep> number" pairs with values in [0,1].
inline std::map<std::string, double> parse_child_adjustments(
    const std::string& reply, const std::vector<std::string>& child_ids) {
    std::map<std::string, double> out;
    for (const auto& id : child_ids) {
        auto at = find_ci(reply, id);
        if (!at) continue;
        std::size_t i = *at + id.size();
        while (i < reply.size() &&
               (reply[i] == ':' || reply[i] == '=' || reply[i] == '-' ||
                reply[i] == '>' ||
                std::isspace(static_cast<unsigned char>(reply[i]))))
            ++i;
        if (i >= reply.size()) continue;
        const char* begin = reply.c_str() + i;
        char* end = nullptr;
        double v = std::strtod(begin, &end);
        if (end == begin) continue;
        if (v >= 0.0 && v <= 1.0) out[id] = v;
    }
    return out;
}

// Outcome of a Decision-Maker synthesis. `votes` snapshots every weighted
// contribution at decision time (including, for the simulated backend, the
// DM's own direct judgment at weight 1), which makes decisions replayable
// from action logs alone.
struct Synthesis {
    Judgment judgment;
    double signed_sum = 0.0;
    std::vector<Vote> votes;
};

class Backend {
public:
    virtual ~Backend() = default;

    virtual Judgment judge(const JudgeContext& ctx) = 0;
    virtual Synthesis synthesize(const SynthContext& ctx) = 0;
    virtual Reflection self_reflect(const ReflectContext& ctx) = 0;
    virtual std::vector<double> embed(const std::string& text,
                                      const std::string& agent_id) = 0;

    TokenMeter& meter() { return meter_; }
    const TokenMeter& meter() const { return meter_; }

    virtual std::size_t embedding_dim() const = 0;

protected:
    TokenMeter meter_;
};

// ---------------------------------------------------------------------------
// Simulated backend: deterministic agents with configurable accuracy and
// correlated error structure, for desk-scale verification of every formula.
// ---------------------------------------------------------------------------

struct SimulatedAgentSpec {
    double base_accuracy = 0.7;       // P(judgment matches hidden truth)
    std::string correlation_group;    // agents sharing a tag share error coins
    double corr_strength = 0.0;       // P(using the shared coin on an instance)
    std::int64_t seed_offset = 0;

    void validate() const {
        if (!(base_accuracy >= 0.0 && base_accuracy <= 1.0))
            throw ConfigError("base_accuracy must be in [0,1]");
        if (!(corr_strength >= 0.0 && corr_strength <= 1.0))
            throw ConfigError("corr_strength must be in [0,1]");
    }
};

struct SimulatedSpecSet {
    std::uint64_t token_cost = 100;       // constant T per judge/synth/reflect call
    std::uint64_t embed_token_cost = 0;   // embeds are metered but free by default
    SimulatedAgentSpec default_spec;
    std::map<std::string, SimulatedAgentSpec> per_agent;

    const SimulatedAgentSpec& for_agent(const std::string& id) const {
        auto it = per_agent.find(id);
        return it == per_agent.end() ? default_spec : it->second;
    }

    void validate() const {
        default_spec.validate();
        for (const auto& [id, s] : per_agent) s.validate();
    }
};

class SimulatedBackend : public Backend {
public:
    SimulatedBackend(SimulatedSpecSet specs, std::uint64_t seed,
                     std::size_t embedding_dim = 32)
        : specs_(std::move(specs)),
          seed_(seed),
          embedder_(keyed_hash(seed, "embedder"), embedding_dim) {
        specs_.validate();
    }

    std::size_t embedding_dim() const override { return embedder_.dim(); }
    const SimulatedSpecSet& specs() const { return specs_; }

    // Ground truth seen by the simulation. Unlabeled instances get a stable
    // pseudo-label so inference on fresh data stays deterministic.
    int hidden_label(const std::string& instance_id,
                     std::optional<int> label) const {
        if (label) return *label;
        return keyed_uniform(seed_, "latent", instance_id) < 0.5 ? 1 : 0;
    }

    // Per-call randomness is keyed on (seed, agent, instance, call kind), so
    // results are order-independent and repeat calls agree.
    int sim_decision(const std::string& agent_id, const std::string& instance_id,
                     const char* kind, int truth) const {
        const SimulatedAgentSpec& sp = specs_.for_agent(agent_id);
        double u;
        if (!sp.correlation_group.empty() && sp.corr_strength > 0.0) {
            double mix = keyed_uniform(seed_, "mix", kind, agent_id,
                                       sp.seed_offset, instance_id);
            if (mix < sp.corr_strength) {
                u = keyed_uniform(seed_, "corr", kind, sp.correlation_group,
                                  instance_id);
            } else {
                u = keyed_uniform(seed_, "own", kind, agent_id, sp.seed_offset,
                                  instance_id);
            }
        } else {
            u = keyed_uniform(seed_, "own", kind, agent_id, sp.seed_offset,
                              instance_id);
        }
        bool correct = u < sp.base_accuracy;
        return correct ? truth : 1 - truth;
    }

    Judgment judge(const JudgeContext& ctx) override {
        if (!ctx.view || ctx.view->empty())
            throw DataError("judge: empty feature view");
        int truth = hidden_label(ctx.instance_id, ctx.hidden_label);
        int d = sim_decision(ctx.agent_id, ctx.instance_id, "judge", truth);
        std::string reason =
            (d == 1 ? std::string("anomalous signals across ")
                    : std::string("consistent signals across ")) +
            join_names(ctx.view->names());
        charge(CallKind::Judge, ctx.agent_id, ctx.instance_id, specs_.token_cost);
        return Judgment::make(d, std::move(reason));
    }

    Synthesis synthesize(const SynthContext& ctx) override {
        int truth = hidden_label(ctx.instance_id, ctx.hidden_label);
        int direct =
            sim_decision(ctx.agent_id, ctx.instance_id, "synthesize", truth);
        std::string direct_reason =
            (direct == 1 ? std::string("direct assessment finds anomalies in ")
                         : std::string("direct assessment finds no anomaly in ")) +
            (ctx.full_view ? join_names(ctx.full_view->names())
                           : std::string("the full feature set"));

        Synthesis out;
        out.votes = ctx.summaries;
        out.votes.push_back(Vote{ctx.agent_id, direct, 1.0, direct_reason});
        double sum = 0.0;
        for (const auto& v : out.votes) sum += v.weight * (2 * v.decision - 1);
        out.signed_sum = sum;
        int d = sum > 0.0 ? 1 : 0;

        std::string reason;
        if (ctx.summaries.empty()) {
            reason = direct_reason;
        } else {
            std::size_t aligned = 0;
            for (const auto& v : ctx.summaries)
                if (v.decision == d) ++aligned;
            std::ostringstream os;
            if (aligned == ctx.summaries.size()) {
                os << "all " << ctx.summaries.size()
                   << " coordinators support decision " << d
                   << "; direct assessment "
                   << (direct == d ? "concurs" : "dissents");
            } else {
                os << aligned << " of " << ctx.summaries.size()
                   << " coordinator votes favor decision " << d
                   << " (weighted sum " << sum << "); direct assessment says "
                   << direct;
            }
            reason = os.str();
        }
        out.judgment = Judgment::make(d, std::move(reason));
        charge(CallKind::Synthesize, ctx.agent_id, ctx.instance_id,
               specs_.token_cost);
        return out;
    }

    Reflection self_reflect(const ReflectContext& ctx) override {
        if (ctx.fragment_texts.empty() && !ctx.predicted && !ctx.truth)
            throw DataError("self_reflect: empty context");
        std::string text;
        if (!ctx.fragment_texts.empty()) {
            std::ostringstream os;
            os << "combined heuristic: ";
            for (std::size_t i = 0; i < ctx.fragment_texts.size(); ++i) {
                if (i) os << "; ";
                os << ctx.fragment_texts[i];
            }
            text = os.str();
        } else {
            int y = ctx.truth.value_or(0);
            int d = ctx.predicted.value_or(0);
            std::string names = join_names(ctx.feature_names);
            if (d != y) {
                text = (y == 1 ? "missed-positive on features "
                               : "false-positive on features ") +
                       names + " for instance " + ctx.instance_id;
            } else {
                text = "confirmed decision " + std::to_string(d) +
                       " on features " + names + " for instance " +
                       ctx.instance_id;
            }
        }
        charge(CallKind::Reflect, ctx.agent_id, ctx.instance_id,
               specs_.token_cost);
        Reflection out;
        out.fragment.text = text;
        out.fragment.embedding = embed(text, ctx.agent_id);
        out.fragment.origin = FragmentOrigin::Reflected;
        return out;
    }

    std::vector<double> embed(const std::string& text,
                              const std::string& agent_id) override {
        auto v = embedder_.embed(text);
        charge(CallKind::Embed, agent_id, "", specs_.embed_token_cost);
        return v;
    }

private:
    static std::string join_names(const std::vector<std::string>& names) {
        std::ostringstream os;
        os << "{";
        for (std::size_t i = 0; i < names.size(); ++i) {
            if (i) os << ", ";
            os << names[i];
        }
        os << "}";
        return os.str();
    }

    void charge(CallKind kind, const std::string& agent_id,
                const std::string& instance_id, std::uint64_t tokens) {
        TokenUsage u;
        u.prompt_tokens = tokens;
        u.completion_tokens = 0;
        u.kind = kind;
        u.agent_id = agent_id;
        u.instance_id = instance_id;
        meter_.add(std::move(u));
    }

    SimulatedSpecSet specs_;
    std::uint64_t seed_;
    HashEmbedder embedder_;
};

}  // namespace pamas
