#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pamas/backends.hpp"
#include "pamas/common.hpp"
#include "pamas/core.hpp"
#include "pamas/routing.hpp"
#include "pamas/topology.hpp"
#include "pamas/training.hpp"

namespace pamas {

using nlohmann::json;

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

// RFC-4180-ish line parser: quoted fields, doubled quotes, commas in quotes.
// Multi-line fields are not supported.
inline std::vector<std::string> parse_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out += "\"";
    return out;
}

inline std::optional<double> try_parse_double(const std::string& s) {
    if (s.empty()) return std::nullopt;
    const char* begin = s.c_str();
    char* end = nullptr;
    double v = std::strtod(begin, &end);
    if (end != begin + s.size()) return std::nullopt;
    return v;
}

// ---------------------------------------------------------------------------
// Dataset ingestion and splitting
// ---------------------------------------------------------------------------

struct SplitRatios {
    double train = 0.7;
    double val = 0.1;
    double test = 0.2;

    void validate() const {
        if (train <= 0.0 || val <= 0.0 || test <= 0.0)
            throw ConfigError("split ratios must be positive");
        if (std::abs(train + val + test - 1.0) > 1e-9)
            throw ConfigError("split ratios must sum to 1");
    }
};

struct SplitAssignment {
    std::vector<std::string> train;
    std::vector<std::string> val;
    std::vector<std::string> test;
};

struct IngestResult {
    std::vector<Instance> instances;
    std::vector<std::string> feature_names;
    SplitAssignment split;
    std::vector<std::string> rejects;  // "row N: reason"
    bool has_labels = false;
};

// Largest-remainder apportionment so 100 rows at 7:1:2 give exactly 70/10/20.
inline std::array<std::size_t, 3> split_counts(std::size_t n,
                                               const SplitRatios& r) {
    std::array<double, 3> want = {n * r.train, n * r.val, n * r.test};
    std::array<std::size_t, 3> counts{};
    std::size_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
        counts[i] = static_cast<std::size_t>(want[i]);
        assigned += counts[i];
    }
    std::array<int, 3> order = {0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        double fa = want[a] - static_cast<double>(counts[a]);
        double fb = want[b] - static_cast<double>(counts[b]);
        if (fa != fb) return fa > fb;
        return a < b;
    });
    for (std::size_t i = 0; assigned < n; ++i, ++assigned)
        counts[order[i % 3]]++;
    return counts;
}

inline IngestResult ingest_dataset(const std::string& path,
                                   const SplitRatios& ratios,
                                   std::uint64_t seed,
                                   bool require_label = true) {
    ratios.validate();
    std::ifstream in(path);
    if (!in) throw DataError("cannot open dataset '" + path + "'");

    std::string header;
    if (!std::getline(in, header))
        throw DataError("dataset '" + path + "' is empty");
    std::vector<std::string> cols = parse_csv_line(header);

    int id_col = -1, label_col = -1;
    std::vector<std::pair<int, std::string>> feature_cols;
    for (std::size_t i = 0; i < cols.size(); ++i) {
        if (cols[i] == "id") id_col = static_cast<int>(i);
        else if (cols[i] == "label") label_col = static_cast<int>(i);
        else feature_cols.emplace_back(static_cast<int>(i), cols[i]);
    }
    if (id_col < 0) throw DataError("dataset is missing the 'id' column");
    if (require_label && label_col < 0)
        throw DataError("dataset is missing the required 'label' column");
    if (feature_cols.empty())
        throw DataError("dataset has no feature columns");

    IngestResult out;
    out.has_labels = label_col >= 0;
    for (const auto& [i, name] : feature_cols) out.feature_names.push_back(name);

    std::map<std::string, bool> seen_ids;
    std::string line;
    std::size_t row = 1;
    std::size_t data_rows = 0;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        ++data_rows;
        auto reject = [&](const std::string& why) {
            out.rejects.push_back("row " + std::to_string(row) + ": " + why);
        };
        std::vector<std::string> fields = parse_csv_line(line);
        if (fields.size() != cols.size()) {
            reject("expected " + std::to_string(cols.size()) + " fields, got " +
                   std::to_string(fields.size()));
            continue;
        }
        Instance inst;
        inst.id = fields[static_cast<std::size_t>(id_col)];
        if (inst.id.empty()) {
            reject("empty id");
            continue;
        }
        if (seen_ids.count(inst.id)) {
            reject("duplicate id '" + inst.id + "'");
            continue;
        }
        if (label_col >= 0) {
            const std::string& lv = fields[static_cast<std::size_t>(label_col)];
            if (lv == "0") inst.label = 0;
            else if (lv == "1") inst.label = 1;
            else if (lv.empty() && !require_label) inst.label = std::nullopt;
            else {
                reject("label must be 0 or 1, got '" + lv + "'");
                continue;
            }
        }
        bool bad = false;
        for (const auto& [col, name] : feature_cols) {
            const std::string& raw = fields[static_cast<std::size_t>(col)];
            if (raw.empty()) {
                reject("missing value for feature '" + name + "'");
                bad = true;
                break;
            }
            if (auto d = try_parse_double(raw))
                inst.features.add(name, *d);
            else
                inst.features.add(name, raw);
        }
        if (bad) continue;
        seen_ids[inst.id] = true;
        out.instances.push_back(std::move(inst));
    }

    if (data_rows == 0) throw DataError("dataset '" + path + "' has no rows");
    if (static_cast<double>(out.rejects.size()) >=
        0.05 * static_cast<double>(data_rows)) {
        throw DataError("dataset '" + path + "' rejected " +
                        std::to_string(out.rejects.size()) + " of " +
                        std::to_string(data_rows) + " rows (>= 5%)");
    }

    // Seeded shuffle, then apportioned split.
    std::vector<std::size_t> idx(out.instances.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(keyed_hash(seed, "split"));
    rng.shuffle(idx);
    auto counts = split_counts(idx.size(), ratios);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const std::string& id = out.instances[idx[i]].id;
        if (i < counts[0]) out.split.train.push_back(id);
        else if (i < counts[0] + counts[1]) out.split.val.push_back(id);
        else out.split.test.push_back(id);
    }
    return out;
}

inline std::vector<Instance> select_instances(
    const std::vector<Instance>& all, const std::vector<std::string>& ids) {
    std::map<std::string, const Instance*> by_id;
    for (const auto& x : all) by_id[x.id] = &x;
    std::vector<Instance> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        auto it = by_id.find(id);
        if (it == by_id.end())
            throw DataError("split references unknown instance '" + id + "'");
        out.push_back(*it->second);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic dataset generation
// ---------------------------------------------------------------------------

struct SynthSpec {
    long long count = 200;
    int feature_count = 20;
    double balance = 0.5;       // fraction of positive labels
    double separability = 1.0;  // label-conditional mean shift per feature
    double noise = 1.0;         // Gaussian noise sigma
    std::vector<double> per_feature_separability;  // optional override
    std::uint64_t seed = 1;

    void validate() const {
        if (count <= 0) throw ConfigError("synthetic count must be > 0");
        if (feature_count <= 0)
            throw ConfigError("synthetic feature_count must be > 0");
        if (balance < 0.0 || balance > 1.0)
            throw ConfigError("synthetic balance must be in [0,1]");
        if (noise < 0.0) throw ConfigError("synthetic noise must be >= 0");
        if (!per_feature_separability.empty() &&
            per_feature_separability.size() !=
                static_cast<std::size_t>(feature_count))
            throw ConfigError("per_feature_separability length mismatch");
    }
};

// Numeric features carrying per-feature signal about a balanced binary
// label: feature j ~ N((2y-1) * sep_j, noise^2). Byte-identical output for a
// fixed spec.
inline void generate_synthetic(const SynthSpec& spec, const std::string& path) {
    spec.validate();
    std::ofstream outf(path, std::ios::binary);
    if (!outf) throw DataError("cannot write synthetic dataset '" + path + "'");

    const std::size_t n = static_cast<std::size_t>(spec.count);
    std::vector<int> labels(n, 0);
    std::size_t n_pos = static_cast<std::size_t>(
        std::llround(spec.balance * static_cast<double>(spec.count)));
    for (std::size_t i = 0; i < n_pos && i < n; ++i) labels[i] = 1;
    Rng rng(keyed_hash(spec.seed, "synth"));
    rng.shuffle(labels);

    std::ostringstream head;
    head << "id";
    for (int j = 0; j < spec.feature_count; ++j)
        head << ",f" << padded_index(static_cast<std::size_t>(j),
                                     static_cast<std::size_t>(spec.feature_count));
    head << ",label\n";
    outf << head.str();

    char buf[64];
    for (std::size_t i = 0; i < n; ++i) {
        outf << "inst-" << padded_index(i, n);
        for (int j = 0; j < spec.feature_count; ++j) {
            double sep = spec.per_feature_separability.empty()
                             ? spec.separability
                             : spec.per_feature_separability[static_cast<std::size_t>(j)];
            double v = (2 * labels[i] - 1) * sep + spec.noise * rng.normal();
            std::snprintf(buf, sizeof buf, "%.6f", v);
            outf << "," << buf;
        }
        outf << "," << labels[i] << "\n";
    }
}

// ---------------------------------------------------------------------------
// JSON bindings
// ---------------------------------------------------------------------------

inline json to_json(const Hyperparameters& hp) {
    return json{{"lambda", hp.lambda},
                {"gamma", hp.gamma},
                {"alpha", hp.alpha},
                {"top_k", hp.top_k},
                {"n_max", hp.n_max},
                {"layer_spec", hp.layer_spec},
                {"expansion_trigger_rho", hp.expansion_trigger_rho},
                {"seed", hp.seed}};
}

inline Hyperparameters hyper_from_json(const json& j) {
    Hyperparameters hp;
    hp.lambda = j.value("lambda", hp.lambda);
    hp.gamma = j.value("gamma", hp.gamma);
    hp.alpha = j.value("alpha", hp.alpha);
    hp.top_k = j.value("top_k", hp.top_k);
    hp.n_max = j.value("n_max", hp.n_max);
    hp.layer_spec = j.value("layer_spec", hp.layer_spec);
    hp.expansion_trigger_rho =
        j.value("expansion_trigger_rho", hp.expansion_trigger_rho);
    hp.seed = j.value("seed", hp.seed);
    hp.validate();
    return hp;
}

struct RunConfig {
    std::string dataset_path;
    SplitRatios ratios;
    int epochs = 1;
    int batch_size = 32;
    int auditor_count = 16;
    int features_per_auditor = 3;
    std::size_t experience_capacity = 256;
    std::size_t embedding_dim = 32;
    bool adapt = true;
    Hyperparameters hyper;
    std::string backend_type = "simulated";  // "simulated" | "remote"
    std::string backend_spec_path;
    std::string report_path;
    std::string checkpoint_path;
    std::vector<std::string> model_pool;  // per-agent backbone bindings
    std::map<std::string, std::vector<std::string>> explicit_subsets;

    json to_json() const {
        json subsets = json::object();
        for (const auto& [k, v] : explicit_subsets) subsets[k] = v;
        return json{{"dataset", dataset_path},
                    {"split_ratios", {ratios.train, ratios.val, ratios.test}},
                    {"epochs", epochs},
                    {"batch_size", batch_size},
                    {"auditor_count", auditor_count},
                    {"features_per_auditor", features_per_auditor},
                    {"experience_capacity", experience_capacity},
                    {"embedding_dim", embedding_dim},
                    {"adapt_topology", adapt},
                    {"hyper", pamas::to_json(hyper)},
                    {"backend", {{"type", backend_type},
                                 {"spec", backend_spec_path}}},
                    {"report_path", report_path},
                    {"checkpoint_path", checkpoint_path},
                    {"model_pool", model_pool},
                    {"auditor_subsets", subsets}};
    }

    static RunConfig from_json(const json& j) {
        RunConfig c;
        c.dataset_path = j.value("dataset", std::string());
        if (j.contains("split_ratios")) {
            auto r = j["split_ratios"];
            if (!r.is_array() || r.size() != 3)
                throw ConfigError("split_ratios must be a 3-element array");
            c.ratios.train = r[0].get<double>();
            c.ratios.val = r[1].get<double>();
            c.ratios.test = r[2].get<double>();
        }
        c.ratios.validate();
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.auditor_count = j.value("auditor_count", c.auditor_count);
        c.features_per_auditor =
            j.value("features_per_auditor", c.features_per_auditor);
        c.experience_capacity =
            j.value("experience_capacity", c.experience_capacity);
        c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
        c.adapt = j.value("adapt_topology", c.adapt);
        if (j.contains("hyper")) c.hyper = hyper_from_json(j["hyper"]);
        if (j.contains("backend")) {
            c.backend_type = j["backend"].value("type", c.backend_type);
            c.backend_spec_path = j["backend"].value("spec", std::string());
        }
        if (c.backend_type != "simulated" && c.backend_type != "remote")
            throw ConfigError("backend type must be 'simulated' or 'remote'");
        c.report_path = j.value("report_path", std::string());
        c.checkpoint_path = j.value("checkpoint_path", std::string());
        c.model_pool = j.value("model_pool", std::vector<std::string>{});
        if (j.contains("auditor_subsets")) {
            for (auto it = j["auditor_subsets"].begin();
                 it != j["auditor_subsets"].end(); ++it)
                c.explicit_subsets[it.key()] =
                    it.value().get<std::vector<std::string>>();
        }
        if (c.epochs < 0) throw ConfigError("epochs must be >= 0");
        if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (c.auditor_count < 1) throw ConfigError("auditor_count must be >= 1");
        return c;
    }

    static RunConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config '" + path + "'");
        json j;
        try {
            in >> j;
        } catch (const std::exception& e) {
            throw ConfigError("config '" + path + "' is not valid JSON: " +
                              e.what());
        }
        RunConfig c = from_json(j);
        if (c.dataset_path.empty())
            throw ConfigError("config is missing 'dataset'");
        if (!std::filesystem::exists(c.dataset_path))
            throw ConfigError("dataset '" + c.dataset_path + "' not found");
        if (c.backend_type == "simulated" && !c.backend_spec_path.empty() &&
            !std::filesystem::exists(c.backend_spec_path))
            throw ConfigError("backend spec '" + c.backend_spec_path +
                              "' not found");
        return c;
    }
};

inline SimulatedAgentSpec sim_agent_from_json(const json& j) {
    SimulatedAgentSpec s;
    s.base_accuracy = j.value("base_accuracy", s.base_accuracy);
    s.correlation_group = j.value("correlation_group", s.correlation_group);
    s.corr_strength = j.value("corr_strength", s.corr_strength);
    s.seed_offset = j.value("seed_offset", s.seed_offset);
    s.validate();
    return s;
}

inline SimulatedSpecSet load_sim_spec(const std::string& path) {
    SimulatedSpecSet set;
    if (path.empty()) return set;  // all defaults
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open backend spec '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError("backend spec '" + path + "' is not valid JSON: " +
                          e.what());
    }
    set.token_cost = j.value("token_cost", set.token_cost);
    set.embed_token_cost = j.value("embed_token_cost", set.embed_token_cost);
    if (j.contains("default")) set.default_spec = sim_agent_from_json(j["default"]);
    if (j.contains("agents"))
        for (auto it = j["agents"].begin(); it != j["agents"].end(); ++it)
            set.per_agent[it.key()] = sim_agent_from_json(it.value());
    set.validate();
    return set;
}

// ---------------------------------------------------------------------------
// Agent construction from configuration
// ---------------------------------------------------------------------------

// Deal each auditor a seeded random draw of `per` feature names, retrying a
// few times when a draw collides with an earlier subset so perspectives stay
// distinct whenever the feature space allows it.
inline std::vector<std::vector<std::string>> assign_feature_subsets(
    const std::vector<std::string>& feature_names, int count, int per,
    std::uint64_t seed) {
    const std::size_t f = feature_names.size();
    if (f < 2)
        throw ConfigError("need at least 2 features to form proper subsets");
    if (per < 1 || static_cast<std::size_t>(per) >= f)
        throw ConfigError("features_per_auditor must be in [1, feature_count-1]");
    std::set<std::vector<std::string>> used;
    std::vector<std::vector<std::string>> out;
    for (int i = 0; i < count; ++i) {
        std::vector<std::string> subset;
        for (std::uint64_t attempt = 0; attempt < 32; ++attempt) {
            std::vector<std::string> pool = feature_names;
            Rng rng(keyed_hash(seed, "subset", std::uint64_t(i), attempt));
            rng.shuffle(pool);
            subset.assign(pool.begin(), pool.begin() + per);
            std::vector<std::string> key = subset;
            std::sort(key.begin(), key.end());
            if (used.insert(key).second) break;
        }
        out.push_back(std::move(subset));
    }
    return out;
}

inline std::vector<AgentNode> make_auditors(
    const RunConfig& cfg, const std::vector<std::string>& feature_names) {
    auto subsets = assign_feature_subsets(feature_names, cfg.auditor_count,
                                          cfg.features_per_auditor,
                                          cfg.hyper.seed);
    std::vector<AgentNode> out;
    for (int i = 0; i < cfg.auditor_count; ++i) {
        std::string id = "auditor-" +
                         padded_index(static_cast<std::size_t>(i),
                                      static_cast<std::size_t>(cfg.auditor_count));
        Profile prof;
        prof.persona = "detection auditor specializing in a feature subset";
        auto it = cfg.explicit_subsets.find(id);
        prof.feature_subset = it != cfg.explicit_subsets.end()
                                  ? it->second
                                  : subsets[static_cast<std::size_t>(i)];
        if (prof.feature_subset.empty() ||
            prof.feature_subset.size() >= feature_names.size())
            throw ConfigError("auditor '" + id +
                              "' needs a nonempty proper feature subset");
        std::string model;
        if (!cfg.model_pool.empty())
            model = cfg.model_pool[keyed_hash(cfg.hyper.seed, "model", id) %
                                   cfg.model_pool.size()];
        out.push_back(make_agent(id, Role::Auditor, prof,
                                 cfg.experience_capacity, model));
    }
    return out;
}

inline AgentNode make_decision_maker(
    const RunConfig& cfg, const std::vector<std::string>& feature_names) {
    Profile prof;
    prof.persona =
        "final decision expert with full feature access and evolving memory";
    prof.feature_subset = feature_names;
    std::string model = cfg.model_pool.empty() ? "" : cfg.model_pool.front();
    return make_agent("dm", Role::DecisionMaker, prof,
                      cfg.experience_capacity, model);
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

inline json to_json(const ExperienceFragment& f) {
    return json{{"id", f.id},
                {"text", f.text},
                {"embedding", f.embedding},
                {"origin", origin_name(f.origin)}};
}

inline ExperienceFragment fragment_from_json(const json& j) {
    ExperienceFragment f;
    f.id = j.at("id").get<std::uint64_t>();
    f.text = j.at("text").get<std::string>();
    f.embedding = j.at("embedding").get<std::vector<double>>();
    std::string o = j.at("origin").get<std::string>();
    if (o == "self-learned") f.origin = FragmentOrigin::SelfLearned;
    else if (o == "retrieved") f.origin = FragmentOrigin::Retrieved;
    else if (o == "reflected") f.origin = FragmentOrigin::Reflected;
    else throw DataError("unknown fragment origin '" + o + "'");
    return f;
}

inline json to_json(const Vote& v) {
    return json{{"voter", v.voter_id},
                {"decision", v.decision},
                {"weight", v.weight},
                {"reason", v.reason}};
}

inline Vote vote_from_json(const json& j) {
    Vote v;
    v.voter_id = j.at("voter").get<std::string>();
    v.decision = j.at("decision").get<int>();
    v.weight = j.at("weight").get<double>();
    v.reason = j.at("reason").get<std::string>();
    return v;
}

inline json to_json(const ActionRecord& r) {
    json votes = json::array();
    for (const auto& v : r.votes) votes.push_back(to_json(v));
    return json{{"seq", r.seq},          {"instance", r.instance_id},
                {"decision", r.decision}, {"reason", r.reason},
                {"votes", votes},         {"mode", action_mode_name(r.mode)},
                {"failed", r.failed}};
}

inline ActionRecord action_from_json(const json& j) {
    ActionRecord r;
    r.seq = j.at("seq").get<std::uint64_t>();
    r.instance_id = j.at("instance").get<std::string>();
    r.decision = j.at("decision").get<int>();
    r.reason = j.at("reason").get<std::string>();
    for (const auto& v : j.at("votes")) r.votes.push_back(vote_from_json(v));
    std::string m = j.at("mode").get<std::string>();
    if (m == "forward") r.mode = ActionMode::Forward;
    else if (m == "routed") r.mode = ActionMode::Routed;
    else if (m == "self-learning") r.mode = ActionMode::SelfLearning;
    else throw DataError("unknown action mode '" + m + "'");
    r.failed = j.at("failed").get<bool>();
    return r;
}

inline json to_json(const AgentNode& a) {
    json j{{"id", a.id},
           {"role", role_name(a.role)},
           {"persona", a.profile.persona},
           {"feature_subset", a.profile.feature_subset},
           {"backend_model", a.backend_model},
           {"consumed_fragments",
            std::vector<std::uint64_t>(a.consumed_fragment_ids.begin(),
                                       a.consumed_fragment_ids.end())}};
    json actions = json::array();
    for (const auto& r : a.actions.records()) actions.push_back(to_json(r));
    j["actions"] = json{{"last_seq", a.actions.last_seq()},
                        {"records", actions}};
    if (a.experience) {
        json frags = json::array();
        for (const auto& f : a.experience->fragments())
            frags.push_back(to_json(f));
        j["experience"] = json{{"capacity", a.experience->capacity()},
                               {"next_id", a.experience->next_id()},
                               {"fragments", frags}};
    }
    if (a.confidence) j["confidence"] = a.confidence->weights();
    return j;
}

inline AgentNode agent_from_json(const json& j) {
    AgentNode a;
    a.id = j.at("id").get<std::string>();
    std::string role = j.at("role").get<std::string>();
    if (role == "auditor") a.role = Role::Auditor;
    else if (role == "coordinator") a.role = Role::Coordinator;
    else if (role == "decision-maker") a.role = Role::DecisionMaker;
    else throw DataError("unknown role '" + role + "'");
    a.profile.persona = j.at("persona").get<std::string>();
    a.profile.feature_subset =
        j.at("feature_subset").get<std::vector<std::string>>();
    a.backend_model = j.value("backend_model", std::string());
    for (auto id : j.value("consumed_fragments", std::vector<std::uint64_t>{}))
        a.consumed_fragment_ids.insert(id);
    std::vector<ActionRecord> recs;
    for (const auto& r : j.at("actions").at("records"))
        recs.push_back(action_from_json(r));
    a.actions.restore(std::move(recs),
                      j.at("actions").at("last_seq").get<std::uint64_t>());
    if (j.contains("experience")) {
        std::vector<ExperienceFragment> frags;
        for (const auto& f : j["experience"].at("fragments"))
            frags.push_back(fragment_from_json(f));
        ExperienceMemory mem;
        mem.restore(std::move(frags),
                    j["experience"].at("next_id").get<std::uint64_t>(),
                    j["experience"].at("capacity").get<std::size_t>());
        a.experience = std::move(mem);
    }
    if (j.contains("confidence")) {
        ConfidenceMemory conf;
        for (auto it = j["confidence"].begin(); it != j["confidence"].end(); ++it)
            conf.set(it.key(), it.value().get<double>());
        a.confidence = std::move(conf);
    }
    validate_role_memories(a);
    return a;
}

inline json to_json(const Hierarchy& h) {
    json nodes = json::object();
    for (const auto& [id, node] : h.nodes) nodes[id] = to_json(node);
    json edges = json::object();
    for (const auto& [parent, kids] : h.edges) edges[parent] = kids;
    json anchors = json::object();
    for (const auto& [c, a] : h.anchors) anchors[c] = a;
    return json{{"layers", h.layers},   {"edges", edges},
                {"nodes", nodes},       {"reserve_auditors", h.reserve_auditors},
                {"anchors", anchors},   {"dm_id", h.dm_id}};
}

inline Hierarchy hierarchy_from_json(const json& j) {
    Hierarchy h;
    h.layers = j.at("layers").get<std::vector<std::vector<std::string>>>();
    for (auto it = j.at("edges").begin(); it != j.at("edges").end(); ++it)
        h.edges[it.key()] = it.value().get<std::vector<std::string>>();
    for (auto it = j.at("nodes").begin(); it != j.at("nodes").end(); ++it)
        h.nodes.emplace(it.key(), agent_from_json(it.value()));
    h.reserve_auditors =
        j.at("reserve_auditors").get<std::vector<std::string>>();
    for (auto it = j.at("anchors").begin(); it != j.at("anchors").end(); ++it)
        h.anchors[it.key()] = it.value().get<std::string>();
    h.dm_id = j.at("dm_id").get<std::string>();
    return h;
}

inline json to_json(const MetricsReport& m) {
    json j{{"accuracy", m.accuracy}, {"precision", m.precision},
           {"recall", m.recall},     {"f1", m.f1},
           {"tp", m.tp},             {"fp", m.fp},
           {"tn", m.tn},             {"fn", m.fn},
           {"n", m.n}};
    j["auc"] = m.auc ? json(*m.auc) : json(nullptr);
    return j;
}

inline MetricsReport metrics_from_json(const json& j) {
    MetricsReport m;
    m.accuracy = j.at("accuracy").get<double>();
    m.precision = j.at("precision").get<double>();
    m.recall = j.at("recall").get<double>();
    m.f1 = j.at("f1").get<double>();
    if (!j.at("auc").is_null()) m.auc = j.at("auc").get<double>();
    m.tp = j.at("tp").get<long long>();
    m.fp = j.at("fp").get<long long>();
    m.tn = j.at("tn").get<long long>();
    m.fn = j.at("fn").get<long long>();
    m.n = j.at("n").get<long long>();
    return m;
}

inline json to_json(const EpochMetrics& e) {
    return json{{"epoch", e.epoch},
                {"validation", to_json(e.validation)},
                {"corrected_instances", e.corrected_instances},
                {"corrected_agents", e.corrected_agents},
                {"weight_updates", e.weight_updates},
                {"fragments_added", e.fragments_added},
                {"prunes", e.prunes},
                {"expansions", e.expansions},
                {"tokens", {{"forward", e.forward_tokens},
                            {"adaptation", e.adaptation_tokens},
                            {"correction", e.correction_tokens},
                            {"refresh", e.refresh_tokens},
                            {"validation", e.validation_tokens}}}};
}

inline EpochMetrics epoch_metrics_from_json(const json& j) {
    EpochMetrics e;
    e.epoch = j.at("epoch").get<int>();
    e.validation = metrics_from_json(j.at("validation"));
    e.corrected_instances = j.at("corrected_instances").get<std::uint64_t>();
    e.corrected_agents = j.at("corrected_agents").get<std::uint64_t>();
    e.weight_updates = j.at("weight_updates").get<std::uint64_t>();
    e.fragments_added = j.at("fragments_added").get<std::uint64_t>();
    e.prunes = j.at("prunes").get<std::uint64_t>();
    e.expansions = j.at("expansions").get<std::uint64_t>();
    const auto& t = j.at("tokens");
    e.forward_tokens = t.at("forward").get<std::uint64_t>();
    e.adaptation_tokens = t.at("adaptation").get<std::uint64_t>();
    e.correction_tokens = t.at("correction").get<std::uint64_t>();
    e.refresh_tokens = t.at("refresh").get<std::uint64_t>();
    e.validation_tokens = t.at("validation").get<std::uint64_t>();
    return e;
}

inline json to_json(const TopologyChange& c) {
    return json{{"epoch", c.epoch},       {"group", c.group_id},
                {"action", c.action},     {"member", c.member_id},
                {"score", c.score},       {"reason", c.reason}};
}

inline TopologyChange change_from_json(const json& j) {
    TopologyChange c;
    c.epoch = j.at("epoch").get<int>();
    c.group_id = j.at("group").get<std::string>();
    c.action = j.at("action").get<std::string>();
    c.member_id = j.at("member").get<std::string>();
    c.score = j.at("score").get<double>();
    c.reason = j.at("reason").get<std::string>();
    return c;
}

inline json to_json(const TrainState& s) {
    json history = json::array();
    for (const auto& e : s.history) history.push_back(to_json(e));
    json changes = json::array();
    for (const auto& c : s.changes) changes.push_back(to_json(c));
    json evictions = json::array();
    for (const auto& ev : s.evictions)
        evictions.push_back(json{{"owner", ev.owner_id}, {"fragment", ev.fragment_id}});
    return json{{"epochs_done", s.epochs_done},
                {"hist", s.hist},
                {"history", history},
                {"changes", changes},
                {"evictions", evictions},
                {"log", s.log}};
}

inline TrainState train_state_from_json(const json& j) {
    TrainState s;
    s.epochs_done = j.at("epochs_done").get<int>();
    for (auto it = j.at("hist").begin(); it != j.at("hist").end(); ++it)
        s.hist[it.key()] = it.value().get<double>();
    for (const auto& e : j.at("history"))
        s.history.push_back(epoch_metrics_from_json(e));
    for (const auto& c : j.at("changes"))
        s.changes.push_back(change_from_json(c));
    for (const auto& ev : j.at("evictions"))
        s.evictions.push_back(EvictionEvent{
            ev.at("owner").get<std::string>(),
            ev.at("fragment").get<std::uint64_t>()});
    s.log = j.at("log").get<std::vector<std::string>>();
    return s;
}

struct Checkpoint {
    static constexpr int kFormatVersion = 1;
    RunConfig config;
    Hierarchy hierarchy;
    TrainState train;
    SplitAssignment split;
};

inline std::string payload_digest(const std::string& payload) {
    return to_hex(fnv1a(fnv1a_init(), payload));
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    json payload{{"config", ckpt.config.to_json()},
                 {"hierarchy", to_json(ckpt.hierarchy)},
                 {"train", to_json(ckpt.train)},
                 {"split", {{"train", ckpt.split.train},
                            {"val", ckpt.split.val},
                            {"test", ckpt.split.test}}}};
    std::string body = payload.dump();
    json envelope{{"format_version", Checkpoint::kFormatVersion},
                  {"digest", payload_digest(body)},
                  {"payload", payload}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint '" + path + "'");
    out << envelope.dump(2) << "\n";
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open checkpoint '" + path + "'");
    json envelope;
    try {
        in >> envelope;
    } catch (const std::exception& e) {
        throw DataError("checkpoint '" + path + "' is not valid JSON: " +
                        e.what());
    }
    int version = envelope.value("format_version", -1);
    if (version != Checkpoint::kFormatVersion)
        throw DataError("unsupported checkpoint format_version " +
                        std::to_string(version));
    if (!envelope.contains("payload") || !envelope.contains("digest"))
        throw DataError("checkpoint '" + path + "' is missing payload/digest");
    const json& payload = envelope["payload"];
    std::string digest = payload_digest(payload.dump());
    if (digest != envelope["digest"].get<std::string>())
        throw DataError("checkpoint '" + path + "' failed digest verification");

    Checkpoint ckpt;
    ckpt.config = RunConfig::from_json(payload.at("config"));
    ckpt.hierarchy = hierarchy_from_json(payload.at("hierarchy"));
    ckpt.train = train_state_from_json(payload.at("train"));
    ckpt.split.train = payload.at("split").at("train").get<std::vector<std::string>>();
    ckpt.split.val = payload.at("split").at("val").get<std::vector<std::string>>();
    ckpt.split.test = payload.at("split").at("test").get<std::vector<std::string>>();
    return ckpt;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

// Token totals are summed from the persisted per-epoch history (not the
// process meter), so a resumed run reports the same bytes as an
// uninterrupted one.
inline json run_report_json(const RunConfig& cfg, const TrainState& state,
                            const std::vector<std::string>& build_log) {
    json history = json::array();
    for (const auto& e : state.history) history.push_back(to_json(e));
    json changes = json::array();
    for (const auto& c : state.changes) changes.push_back(to_json(c));
    json evictions = json::array();
    for (const auto& ev : state.evictions)
        evictions.push_back(json{{"owner", ev.owner_id},
                                 {"fragment", ev.fragment_id}});
    std::uint64_t fwd = 0, ada = 0, cor = 0, ref = 0, val = 0;
    for (const auto& e : state.history) {
        fwd += e.forward_tokens;
        ada += e.adaptation_tokens;
        cor += e.correction_tokens;
        ref += e.refresh_tokens;
        val += e.validation_tokens;
    }
    return json{{"format_version", 1},
                {"config", cfg.to_json()},
                {"metrics_history", history},
                {"topology_changes", changes},
                {"evictions", evictions},
                {"build_log", build_log},
                {"training_tokens", {{"forward", fwd},
                                     {"adaptation", ada},
                                     {"correction", cor},
                                     {"refresh", ref},
                                     {"validation", val},
                                     {"total", fwd + ada + cor + ref + val}}}};
}

inline void write_text_file(const std::string& path, const std::string& body) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << body;
}

inline std::string format_weight(double w) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", w);
    return buf;
}

// Decision-trace block for a full forward pass, one case box per instance:
// the final verdict first, then per-level votes with the weights behind them.
inline std::string render_forward_trace(const ForwardTrace& trace,
                                        const Hierarchy& h) {
    std::ostringstream os;
    os << "=== instance " << trace.instance_id << " ===\n";
    if (trace.failed) {
        os << "FAILED: " << trace.failure << "\n";
        return os.str();
    }
    os << "Decision: " << trace.final_decision << "\n";
    os << "Reason: " << trace.final_reason << "\n";
    for (std::size_t l = h.layers.size(); l-- > 1;) {
        for (const auto& id : h.layers[l]) {
            auto it = trace.entries.find(id);
            if (it == trace.entries.end()) continue;
            const TraceEntry& e = it->second;
            os << (e.role == Role::DecisionMaker
                       ? std::string("decision-maker")
                       : "level " + std::to_string(l) + " " + id)
               << " -> " << e.decision << ", votes:";
            for (const auto& v : e.votes)
                os << " " << v.voter_id << "=" << v.decision << " (w "
                   << format_weight(v.weight) << ")";
            os << "\n";
        }
    }
    return os.str();
}

inline std::string render_route_result(const RouteResult& r,
                                       const Hierarchy& h,
                                       const std::string& instance_id) {
    std::ostringstream os;
    os << "=== instance " << instance_id << " ===\n";
    os << "Decision: " << r.decision << "\n";
    os << "Reason: " << r.reason << "\n";
    os << "Activated " << r.activated_agents.size() << " agents, "
       << r.backend_calls << " backend calls\n";
    for (std::size_t l = h.layers.size(); l-- > 1;) {
        for (const auto& id : h.layers[l]) {
            auto it = r.per_node.find(id);
            if (it == r.per_node.end()) continue;
            const NodeActivation& act = it->second;
            os << (id == h.dm_id ? std::string("decision-maker")
                                 : "level " + std::to_string(l) + " " + id)
               << " -> " << act.decision << ", activated:";
            for (const auto& c : act.activated) os << " " << c;
            os << ", margins:";
            for (double m : act.margins) os << " " << m;
            if (act.tie_break) os << " [tie-break]";
            os << "\n";
        }
    }
    return os.str();
}

}  // namespace pamas
