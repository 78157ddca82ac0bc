// Command-line surface of the engine: init/train/infer/eval/costcheck/synth.
//
// Exit codes: 0 success, 1 usage/config error, 2 data error, 3 backend error.

#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pamas/pamas.hpp"
#include "pamas/remote.hpp"

namespace {

using namespace pamas;

std::unique_ptr<Backend> build_backend(const RunConfig& cfg) {
    if (cfg.backend_type == "simulated") {
        SimulatedSpecSet specs = load_sim_spec(cfg.backend_spec_path);
        return std::make_unique<SimulatedBackend>(specs, cfg.hyper.seed,
                                                  cfg.embedding_dim);
    }
    return std::make_unique<RemoteBackend>(cfg.embedding_dim, cfg.hyper.seed);
}

struct LoadedRun {
    RunConfig cfg;
    std::vector<Instance> instances;
    SplitAssignment split;
    std::vector<std::string> feature_names;
};

LoadedRun load_dataset_for(const RunConfig& cfg) {
    LoadedRun run;
    run.cfg = cfg;
    IngestResult ing = ingest_dataset(cfg.dataset_path, cfg.ratios,
                                      cfg.hyper.seed, true);
    run.instances = std::move(ing.instances);
    run.split = std::move(ing.split);
    run.feature_names = std::move(ing.feature_names);
    for (const auto& r : ing.rejects)
        std::cerr << "ingest reject: " << r << "\n";
    return run;
}

Checkpoint run_init(const RunConfig& cfg) {
    LoadedRun run = load_dataset_for(cfg);
    auto backend = build_backend(cfg);

    std::vector<Instance> train_set = select_instances(run.instances,
                                                       run.split.train);
    std::vector<Instance> val_set = select_instances(run.instances,
                                                     run.split.val);

    std::vector<AgentNode> auditors = make_auditors(cfg, run.feature_names);
    AgentNode dm = make_decision_maker(cfg, run.feature_names);
    InitResult init = initialize_hierarchy(std::move(auditors), std::move(dm),
                                           *backend, train_set, val_set,
                                           cfg.hyper);

    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.hierarchy = std::move(init.hierarchy);
    ckpt.train.evictions = std::move(init.evictions);
    ckpt.train.log = std::move(init.log);
    ckpt.split = run.split;
    return ckpt;
}

void run_train(Checkpoint& ckpt, Backend& backend, int target_epochs) {
    LoadedRun run = load_dataset_for(ckpt.config);
    std::vector<Instance> train_set = select_instances(run.instances,
                                                       ckpt.split.train);
    std::vector<Instance> val_set = select_instances(run.instances,
                                                     ckpt.split.val);

    TrainOptions opt;
    opt.batch_size = ckpt.config.batch_size;
    opt.adapt = ckpt.config.adapt;
    Trainer trainer(ckpt.hierarchy, backend, ckpt.config.hyper, opt);
    trainer.state() = std::move(ckpt.train);
    trainer.run_epochs(train_set, val_set, target_epochs);
    ckpt.train = std::move(trainer.state());
}

std::string resolve_ckpt_path(const RunConfig& cfg, const std::string& flag) {
    if (!flag.empty()) return flag;
    if (!cfg.checkpoint_path.empty()) return cfg.checkpoint_path;
    throw ConfigError("no checkpoint path: set checkpoint_path in the config "
                      "or pass --ckpt");
}

const std::vector<std::string>& pick_split(const SplitAssignment& split,
                                           const std::string& name) {
    if (name == "train") return split.train;
    if (name == "val") return split.val;
    if (name == "test") return split.test;
    throw ConfigError("unknown split '" + name + "'");
}

int cmd_init(const std::string& config_path, const std::string& ckpt_flag) {
    RunConfig cfg = RunConfig::load(config_path);
    Checkpoint ckpt = run_init(cfg);
    std::string path = resolve_ckpt_path(cfg, ckpt_flag);
    save_checkpoint(path, ckpt);
    json out{{"checkpoint", path},
             {"auditors", ckpt.hierarchy.active_auditor_count()},
             {"coordinators", ckpt.hierarchy.active_coordinator_count()},
             {"reserve", ckpt.hierarchy.reserve_auditors.size()},
             {"layers", ckpt.hierarchy.layers.size()}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& resume_path,
              const std::string& ckpt_flag, std::optional<int> epochs_flag) {
    Checkpoint ckpt;
    if (!resume_path.empty()) {
        ckpt = load_checkpoint(resume_path);
    } else {
        if (config_path.empty())
            throw ConfigError("train needs --config (or --resume)");
        RunConfig cfg = RunConfig::load(config_path);
        ckpt = run_init(cfg);
    }
    int target = epochs_flag.value_or(ckpt.config.epochs);
    auto backend = build_backend(ckpt.config);
    run_train(ckpt, *backend, target);

    std::string path = resolve_ckpt_path(ckpt.config, ckpt_flag);
    save_checkpoint(path, ckpt);
    if (!ckpt.config.report_path.empty()) {
        json report = run_report_json(ckpt.config, ckpt.train, {});
        write_text_file(ckpt.config.report_path, report.dump(2) + "\n");
    }
    json out{{"checkpoint", path}, {"epochs_done", ckpt.train.epochs_done}};
    if (!ckpt.train.history.empty())
        out["final_validation"] = to_json(ckpt.train.history.back().validation);
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_infer(const std::string& ckpt_path, const std::string& input_path,
              bool full, const std::string& out_path) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    auto backend = build_backend(ckpt.config);
    backend->meter().set_phase(Phase::Inference);

    IngestResult ing = ingest_dataset(input_path, ckpt.config.ratios,
                                      ckpt.config.hyper.seed, false);
    std::ostringstream body;
    for (const auto& x : ing.instances) {
        if (full) {
            ForwardTrace tr = forward_core(ckpt.hierarchy, *backend, x, false);
            body << render_forward_trace(tr, ckpt.hierarchy) << "\n";
        } else {
            RoutingOptions opt;
            opt.record_actions = false;
            RouteResult r = route_inference(ckpt.hierarchy, *backend, x, opt);
            body << render_route_result(r, ckpt.hierarchy, x.id) << "\n";
        }
    }
    if (out_path.empty())
        std::cout << body.str();
    else
        write_text_file(out_path, body.str());
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& split_name,
             bool routed) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    auto backend = build_backend(ckpt.config);
    backend->meter().set_phase(Phase::Inference);

    LoadedRun run = load_dataset_for(ckpt.config);
    const auto& ids = pick_split(ckpt.split, split_name);
    if (ids.empty())
        throw DataError("split '" + split_name + "' is empty");
    std::vector<Instance> set = select_instances(run.instances, ids);

    std::vector<PredictionRow> rows;
    rows.reserve(set.size());
    for (const auto& x : set) {
        if (!x.label)
            throw DataError("instance '" + x.id + "' has no label");
        if (routed) {
            RoutingOptions opt;
            opt.record_actions = false;
            RouteResult r = route_inference(ckpt.hierarchy, *backend, x, opt);
            rows.push_back(PredictionRow{score_from_signed_sum(r.signed_sum),
                                         r.decision, *x.label});
        } else {
            ForwardTrace tr = forward_core(ckpt.hierarchy, *backend, x, false);
            if (tr.failed) throw BackendError(tr.failure);
            rows.push_back(PredictionRow{
                score_from_signed_sum(tr.final_signed_sum), tr.final_decision,
                *x.label});
        }
    }
    MetricsReport m = compute_metrics(rows);
    json out = to_json(m);
    out["split"] = split_name;
    out["mode"] = routed ? "routing" : "full";
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_costcheck(const std::string& ckpt_path, long long limit) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    if (ckpt.config.backend_type != "simulated")
        throw ConfigError("costcheck requires the simulated backend");
    SimulatedSpecSet specs = load_sim_spec(ckpt.config.backend_spec_path);
    SimulatedBackend backend(specs, ckpt.config.hyper.seed,
                             ckpt.config.embedding_dim);

    LoadedRun run = load_dataset_for(ckpt.config);
    std::vector<Instance> train_set = select_instances(run.instances,
                                                       ckpt.split.train);
    std::vector<Instance> test_set = select_instances(run.instances,
                                                      ckpt.split.test);
    if (limit > 0) {
        if (train_set.size() > static_cast<std::size_t>(limit))
            train_set.resize(static_cast<std::size_t>(limit));
        if (test_set.size() > static_cast<std::size_t>(limit))
            test_set.resize(static_cast<std::size_t>(limit));
    }
    if (train_set.empty() || test_set.empty())
        throw DataError("costcheck needs nonempty train and test windows");

    Hierarchy& h = ckpt.hierarchy;
    TokenMeter& meter = backend.meter();

    // Measured training window: forward passes plus one reflect unit per
    // erring instance, topology frozen.
    meter.set_phase(Phase::Forward);
    long long errors = 0;
    for (const auto& x : train_set) {
        ForwardTrace tr = forward_core(h, backend, x, false);
        if (x.label && tr.final_decision != *x.label) ++errors;
    }
    std::uint64_t forward_tokens = meter.total_phase(Phase::Forward);

    meter.set_phase(Phase::Correction);
    const AgentNode& dm = h.dm();
    for (long long i = 0; i < errors; ++i) {
        ReflectContext rc;
        rc.agent_id = dm.id;
        rc.instance_id = "costcheck-" + std::to_string(i);
        rc.feature_names = dm.profile.feature_subset;
        rc.predicted = 0;
        rc.truth = 1;
        backend.self_reflect(rc);  // measurement only; output discarded
    }
    std::uint64_t correction_tokens = meter.total_phase(Phase::Correction);
    std::uint64_t reflect_calls =
        meter.call_count(Phase::Correction, CallKind::Reflect);

    // Routed inference window.
    meter.set_phase(Phase::Inference);
    long long routed_calls = 0;
    for (const auto& x : test_set) {
        RoutingOptions opt;
        opt.record_actions = false;
        RouteResult r = route_inference(h, backend, x, opt);
        routed_calls += static_cast<long long>(r.backend_calls);
    }
    std::uint64_t routed_tokens = meter.total_phase(Phase::Inference);

    // Full-activation inference window.
    meter.set_phase(Phase::Validation);
    for (const auto& x : test_set) forward_core(h, backend, x, false);
    std::uint64_t full_tokens = meter.total_phase(Phase::Validation);

    CostModelParams params;
    params.tokens_per_call = static_cast<long long>(specs.token_cost);
    params.batch_n = static_cast<long long>(train_set.size());
    params.p_err = Rational::from_counts(errors,
                                         static_cast<long long>(train_set.size()));
    params.n_auditors = static_cast<long long>(h.active_auditor_count());
    params.n_coordinators =
        static_cast<long long>(h.active_coordinator_count());
    params.routed_activations = routed_calls;

    MeterWindow routed_window;
    routed_window.forward_tokens = forward_tokens;
    routed_window.correction_tokens = correction_tokens;
    routed_window.reflect_calls = reflect_calls;
    routed_window.instances = static_cast<long long>(train_set.size());
    routed_window.errors = errors;
    routed_window.inference_tokens = routed_tokens;
    routed_window.inferred_instances = static_cast<long long>(test_set.size());
    routed_window.routed_activations = routed_calls;
    Reconciliation rec = reconcile_meter(routed_window, params, true);

    MeterWindow full_window = routed_window;
    full_window.inference_tokens = full_tokens;
    Reconciliation rec_full = reconcile_meter(full_window, params, false);
    rec.rows.push_back(rec_full.rows.back());
    rec.all_match = rec.all_match && rec_full.rows.back().match;

    json rows = json::array();
    for (const auto& row : rec.rows) {
        rows.push_back(json{{"phase", row.phase},
                            {"measured", row.measured},
                            {"expected", row.expected.to_string()},
                            {"match", row.match},
                            {"mapping", row.mapping}});
        std::cout << (row.match ? "OK   " : "FAIL ") << row.phase << ": measured "
                  << row.measured << ", expected " << row.expected.to_string()
                  << "  [" << row.mapping << "]\n";
    }
    json out{{"rows", rows},
             {"all_match", rec.all_match},
             {"params", {{"T", params.tokens_per_call},
                         {"N", params.batch_n},
                         {"p_err", params.p_err.to_string()},
                         {"n_auditors", params.n_auditors},
                         {"n_coordinators", params.n_coordinators},
                         {"m", params.routed_activations}}}};
    std::cout << out.dump(2) << "\n";
    return rec.all_match ? 0 : 2;
}

int cmd_synth(const std::string& spec_path, const std::string& out_flag) {
    std::ifstream in(spec_path);
    if (!in) throw ConfigError("cannot open synth spec '" + spec_path + "'");
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError("synth spec is not valid JSON: " +
                          std::string(e.what()));
    }
    SynthSpec spec;
    spec.count = j.value("count", spec.count);
    spec.feature_count = j.value("feature_count", spec.feature_count);
    spec.balance = j.value("balance", spec.balance);
    spec.separability = j.value("separability", spec.separability);
    spec.noise = j.value("noise", spec.noise);
    spec.per_feature_separability = j.value("per_feature_separability",
                                            std::vector<double>{});
    spec.seed = j.value("seed", spec.seed);
    std::string out_path = !out_flag.empty()
                               ? out_flag
                               : j.value("out", std::string("synthetic.csv"));
    generate_synthetic(spec, out_path);
    json out{{"dataset", out_path},
             {"rows", spec.count},
             {"features", spec.feature_count}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

void print_error(const char* category, const std::exception& e) {
    json err{{"error", {{"category", category}, {"message", e.what()}}}};
    std::cerr << err.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hierarchical multi-agent misinformation-detection engine"};
    app.require_subcommand(1);

    std::string config_path, ckpt_flag, resume_path, input_path, out_path,
        split_name = "test", spec_path;
    bool full = false, routing = false;
    std::optional<int> epochs_flag;
    long long limit = 50;

    auto* init = app.add_subcommand("init", "Build and checkpoint an "
                                            "initialized hierarchy");
    init->add_option("--config", config_path, "Run configuration (JSON)")
        ->required();
    init->add_option("--ckpt", ckpt_flag, "Checkpoint output path override");

    auto* train = app.add_subcommand("train", "Run optimization epochs");
    train->add_option("--config", config_path, "Run configuration (JSON)");
    train->add_option("--resume", resume_path, "Resume from a checkpoint");
    train->add_option("--ckpt", ckpt_flag, "Checkpoint output path override");
    train->add_option("--epochs", epochs_flag, "Override the epoch target");

    auto* infer = app.add_subcommand("infer", "Per-instance decisions with "
                                              "decision traces");
    infer->add_option("--ckpt", ckpt_flag, "Trained checkpoint")->required();
    infer->add_option("--input", input_path, "Tabular input file")->required();
    auto* full_flag = infer->add_flag("--full", full, "Activate every agent");
    infer->add_flag("--routing", routing, "Confidence-guided routing (default)")
        ->excludes(full_flag);
    infer->add_option("--out", out_path, "Write traces to a file");

    auto* eval = app.add_subcommand("eval", "Metrics over a dataset split");
    eval->add_option("--ckpt", ckpt_flag, "Trained checkpoint")->required();
    eval->add_option("--split", split_name, "train | val | test");
    eval->add_flag("--routing", routing, "Evaluate with routed inference");

    auto* cost = app.add_subcommand("costcheck", "Token cost-model "
                                                 "reconciliation");
    cost->add_option("--ckpt", ckpt_flag, "Trained checkpoint")->required();
    cost->add_option("--limit", limit, "Max instances per measured window");

    auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
    synth->add_option("--spec", spec_path, "Synthesis spec (JSON)")->required();
    synth->add_option("--out", out_path, "Output CSV path override");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return 1;
    }

    try {
        if (init->parsed()) return cmd_init(config_path, ckpt_flag);
        if (train->parsed())
            return cmd_train(config_path, resume_path, ckpt_flag, epochs_flag);
        if (infer->parsed())
            return cmd_infer(ckpt_flag, input_path, full, out_path);
        if (eval->parsed()) return cmd_eval(ckpt_flag, split_name, routing);
        if (cost->parsed()) return cmd_costcheck(ckpt_flag, limit);
        if (synth->parsed()) return cmd_synth(spec_path, out_path);
    } catch (const ConfigError& e) {
        print_error("config", e);
        return 1;
    } catch (const BackendError& e) {
        print_error("backend", e);
        return 3;
    } catch (const DataError& e) {
        print_error("data", e);
        return 2;
    } catch (const std::exception& e) {
        print_error("internal", e);
        return 2;
    }
    return 0;
}
