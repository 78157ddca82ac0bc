#pragma once

// Live chat-completion client. Kept in its own header so the test binaries
// that only need the simulated backend do not pull in the HTTP stack.
//
// Configuration comes from the environment:
//   PAMAS_API_BASE  e.g. http://localhost:8000 (scheme + host[:port])
//   PAMAS_MODEL     model name passed through to the endpoint
//   PAMAS_API_KEY   bearer token (optional for local servers)
//
// HTTPS requires compiling with PAMAS_ENABLE_TLS and linking OpenSSL.

#if defined(PAMAS_ENABLE_TLS)
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif

#include <cstdlib>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "pamas/backends.hpp"

namespace pamas {

class RemoteBackend : public Backend {
public:
    explicit RemoteBackend(std::size_t embedding_dim = 32,
                           std::uint64_t embed_seed = 1, int timeout_s = 0)
        : embedder_(keyed_hash(embed_seed, "embedder"), embedding_dim) {
        base_url_ = env_or("PAMAS_API_BASE", "");
        model_ = env_or("PAMAS_MODEL", "");
        api_key_ = env_or("PAMAS_API_KEY", "");
        if (timeout_s > 0) {
            timeout_s_ = timeout_s;
        } else {
            std::string t = env_or("PAMAS_TIMEOUT_S", "60");
            timeout_s_ = std::max(1, std::atoi(t.c_str()));
        }
        if (base_url_.empty())
            throw ConfigError("remote backend: PAMAS_API_BASE is not set");
        if (model_.empty())
            throw ConfigError("remote backend: PAMAS_MODEL is not set");
    }

    std::size_t embedding_dim() const override { return embedder_.dim(); }

    Judgment judge(const JudgeContext& ctx) override {
        if (!ctx.view || ctx.view->empty())
            throw DataError("judge: empty feature view");
        std::ostringstream os;
        os << "You are a misinformation-detection expert reviewing one item.\n"
           << "Observable features:\n"
           << ctx.view->render();
        if (ctx.experience && !ctx.experience->empty()) {
            os << "Your accumulated experience:\n";
            for (const auto& f : ctx.experience->fragments())
                os << "- " << f.text << "\n";
        }
        if (!ctx.history_summary.empty())
            os << "Your recent decisions:\n" << ctx.history_summary << "\n";
        os << "Decide whether this item is misinformation (1) or legitimate "
              "(0).\n"
           << "Answer on one line exactly as: User: " << ctx.instance_id
           << ", Decision: <0 or 1>, Reason: <one concise sentence>";
        std::string reply = chat(os.str(), CallKind::Judge, ctx.agent_id,
                                 ctx.instance_id, ctx.backend_model);
        return parse_or_throw(reply, CallKind::Judge, ctx.agent_id,
                              ctx.instance_id, ctx.backend_model);
    }

    Synthesis synthesize(const SynthContext& ctx) override {
        std::ostringstream os;
        os << "You are the final decision expert of a detection hierarchy.\n";
        if (ctx.full_view)
            os << "Full feature set:\n" << ctx.full_view->render();
        if (!ctx.summaries.empty()) {
            os << "Coordinator judgments (decision, trust weight, reason):\n";
            for (const auto& s : ctx.summaries)
                os << "- " << s.voter_id << ": decision " << s.decision
                   << ", weight " << s.weight << ", reason: " << s.reason
                   << "\n";
        }
        if (ctx.experience && !ctx.experience->empty()) {
            os << "Your accumulated experience:\n";
            for (const auto& f : ctx.experience->fragments())
                os << "- " << f.text << "\n";
        }
        os << "Combine the coordinator judgments with your own direct "
              "assessment of the features and decide whether the item is "
              "misinformation (1) or legitimate (0).\n"
           << "Answer on one line exactly as: User: " << ctx.instance_id
           << ", Decision: <0 or 1>, Reason: <one concise sentence>";
        std::string reply = chat(os.str(), CallKind::Synthesize, ctx.agent_id,
                                 ctx.instance_id, ctx.backend_model);
        Judgment j = parse_or_throw(reply, CallKind::Synthesize, ctx.agent_id,
                                    ctx.instance_id, ctx.backend_model);
        Synthesis out;
        out.votes = ctx.summaries;
        double sum = 0.0;
        for (const auto& v : out.votes) sum += v.weight * (2 * v.decision - 1);
        out.signed_sum = sum;
        out.judgment = std::move(j);
        return out;
    }

    Reflection self_reflect(const ReflectContext& ctx) override {
        std::ostringstream os;
        if (!ctx.fragment_texts.empty()) {
            os << "You are refining your detection experience.\n";
            if (!ctx.current_experience.empty())
                os << "Current experience: " << ctx.current_experience << "\n";
            os << "You have studied these heuristics from another agent:\n";
            for (const auto& t : ctx.fragment_texts) os << "- " << t << "\n";
            os << "Integrate them into exactly one concise sentence of "
                  "updated experience. Reply with the sentence only.";
        } else {
            os << "You predicted decision " << ctx.predicted.value_or(-1)
               << " (reason: " << ctx.predicted_reason << ") for instance "
               << ctx.instance_id << "; the ground truth is "
               << ctx.truth.value_or(-1) << ".\n";
            if (!ctx.child_votes.empty()) {
                os << "Your subordinates judged (id, decision, weight):\n";
                for (const auto& v : ctx.child_votes)
                    os << "- " << v.voter_id << ": decision " << v.decision
                       << ", weight " << v.weight << "\n";
                os << "Reply with two lines exactly:\n"
                   << "Weights: <id>=<value in [0,1]> for each subordinate, "
                      "comma separated\n"
                   << "New Experience: <one concise sentence>";
            } else {
                os << "Summarize what to learn from this in exactly one "
                      "concise sentence. Reply with the sentence only.";
            }
        }
        std::string reply = chat(os.str(), CallKind::Reflect, ctx.agent_id,
                                 ctx.instance_id, ctx.backend_model);
        std::string text = first_sentence(reply);
        if (text.empty())
            throw BackendError("reflect: empty reply from model for agent " +
                               ctx.agent_id);
        Reflection out;
        out.fragment.text = text;
        out.fragment.embedding = embed(text, ctx.agent_id);
        out.fragment.origin = FragmentOrigin::Reflected;
        if (!ctx.child_votes.empty()) {
            std::vector<std::string> ids;
            for (const auto& v : ctx.child_votes) ids.push_back(v.voter_id);
            out.child_f_ref = parse_child_adjustments(reply, ids);
        }
        return out;
    }

    // Embeddings are engine bookkeeping, not model output; the deterministic
    // hash embedder serves both backends.
    std::vector<double> embed(const std::string& text,
                              const std::string& agent_id) override {
        auto v = embedder_.embed(text);
        TokenUsage u;
        u.kind = CallKind::Embed;
        u.agent_id = agent_id;
        meter_.add(std::move(u));
        return v;
    }

private:
    static std::string env_or(const char* name, const std::string& fallback) {
        const char* v = std::getenv(name);
        return v ? std::string(v) : fallback;
    }

    static std::string first_sentence(const std::string& reply) {
        std::istringstream is(reply);
        std::string line;
        while (std::getline(is, line)) {
            line = strip(line);
            if (line.empty()) continue;
            if (line.rfind("Weights:", 0) == 0 ||
                line.rfind("weights:", 0) == 0)
                continue;  // adjustment line of the refine contract
            for (const char* prefix :
                 {"New Experience:", "new experience:", "Experience:"}) {
                if (line.rfind(prefix, 0) == 0)
                    line = strip(line.substr(std::string(prefix).size()));
            }
            return line;
        }
        return "";
    }

    Judgment parse_or_throw(std::string reply, CallKind kind,
                            const std::string& agent_id,
                            const std::string& instance_id,
                            const std::string& model_hint) {
        if (auto j = parse_agent_reply(reply)) return *j;
        // One retry on parse failure, then surface with the raw reply.
        reply = chat("Your previous answer could not be parsed. " +
                         std::string("Answer again on one line exactly as: ") +
                         "User: " + instance_id + ", Decision: <0 or 1>, " +
                         "Reason: <one concise sentence>",
                     kind, agent_id, instance_id, model_hint);
        if (auto j = parse_agent_reply(reply)) return *j;
        throw BackendError("unparseable model reply for agent " + agent_id +
                           " on instance " + instance_id + ": " + reply);
    }

    std::string chat(const std::string& prompt, CallKind kind,
                     const std::string& agent_id,
                     const std::string& instance_id,
                     const std::string& model_hint = "") {
        httplib::Client cli(base_url_);
        cli.set_connection_timeout(timeout_s_, 0);
        cli.set_read_timeout(timeout_s_, 0);

        nlohmann::json body = {
            {"model", model_hint.empty() ? model_ : model_hint},
            {"messages",
             nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
        };
        httplib::Headers headers;
        if (!api_key_.empty())
            headers.emplace("Authorization", "Bearer " + api_key_);

        auto res = cli.Post("/v1/chat/completions", headers, body.dump(),
                            "application/json");
        if (!res) {
            throw BackendError("transport error calling " + base_url_ +
                               " (" + call_kind_name(kind) + ", agent " +
                               agent_id + ", instance " + instance_id + "): " +
                               httplib::to_string(res.error()));
        }
        if (res->status != 200) {
            throw BackendError("HTTP " + std::to_string(res->status) +
                               " from " + base_url_ + " (" +
                               call_kind_name(kind) + ", agent " + agent_id +
                               "): " + res->body);
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(res->body);
        } catch (const std::exception& e) {
            throw BackendError(std::string("malformed completion payload: ") +
                               e.what());
        }
        std::string content;
        try {
            content = j.at("choices").at(0).at("message").at("content")
                          .get<std::string>();
        } catch (const std::exception&) {
            throw BackendError("completion payload missing choices[0].message"
                               ".content: " + res->body);
        }

        TokenUsage u;
        u.kind = kind;
        u.agent_id = agent_id;
        u.instance_id = instance_id;
        if (j.contains("usage")) {
            u.prompt_tokens = j["usage"].value("prompt_tokens", 0ULL);
            u.completion_tokens = j["usage"].value("completion_tokens", 0ULL);
        } else {
            // Rough fallback when the server omits usage accounting.
            u.prompt_tokens = prompt.size() / 4;
            u.completion_tokens = content.size() / 4;
        }
        meter_.add(std::move(u));
        return content;
    }

    HashEmbedder embedder_;
    std::string base_url_;
    std::string model_;
    std::string api_key_;
    int timeout_s_;
};

}  // namespace pamas
