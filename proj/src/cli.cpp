#include "moenc/cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "moenc/checkpoint.hpp"
#include "moenc/config_io.hpp"
#include "moenc/flops.hpp"

namespace moenc::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Fresh run-NNNN directory under `out`; reruns never touch prior results.
// A LOCK file guards the directory against concurrent writers for the
// lifetime of the command.
class RunDir {
public:
    explicit RunDir(const fs::path& out) {
        fs::create_directories(out);
        for (int i = 1; i < 100000; ++i) {
            char name[16];
            std::snprintf(name, sizeof(name), "run-%04d", i);
            fs::path candidate = out / name;
            std::error_code ec;
            if (fs::create_directory(candidate, ec)) {
                dir_ = candidate;
                break;
            }
            if (ec && ec != std::errc::file_exists) {
                throw IoError("cannot create run directory " + candidate.string() + ": " + ec.message());
            }
        }
        if (dir_.empty()) throw IoError("run directory space exhausted under " + out.string());
        lock_fd_ = ::open((dir_ / "LOCK").c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (lock_fd_ < 0) throw IoError("cannot acquire lock in " + dir_.string());
    }

    ~RunDir() {
        if (lock_fd_ >= 0) {
            ::close(lock_fd_);
            std::error_code ec;
            fs::remove(dir_ / "LOCK", ec);
        }
    }

    const fs::path& path() const { return dir_; }

private:
    fs::path dir_;
    int lock_fd_ = -1;
};

void write_text_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << content;
}

json stats_to_json(const RoutingStats& stats) {
    return json{{"selection_counts", stats.selection_counts},
                {"frequencies", stats.frequencies},
                {"range_gap", stats.range_gap},
                {"expert_recovery_accuracy", stats.expert_recovery_accuracy},
                {"task_accuracy", stats.task_accuracy}};
}

json loss_to_json(int step, const LossValues& v, double lr) {
    return json{{"step", step}, {"lm", v.lm},   {"ba", v.ba},       {"be", v.be},
                {"ie", v.ie},   {"ia", v.ia},   {"total", v.total}, {"lr", lr}};
}

struct CommonOptions {
    std::string config_path;
    std::string out_dir = "runs";
    std::optional<std::uint64_t> seed;
    std::optional<std::string> router;
    std::optional<std::string> checkpoint;
};

TrainConfig resolve_train_config(const CommonOptions& opts, json j) {
    TrainConfig cfg = train_config_from_json(j);
    if (opts.seed) cfg.seed = *opts.seed;
    if (opts.router) cfg.router = router_variant_from_string(*opts.router);
    return cfg;
}

void print_stats(const RoutingStats& stats) {
    std::printf("selection frequencies:");
    for (double f : stats.frequencies) std::printf(" %.4f", f);
    std::printf("\nrange gap: %.2f points\n", stats.range_gap);
    std::printf("expert recovery accuracy: %.4f\n", stats.expert_recovery_accuracy);
    std::printf("task accuracy: %.4f\n", stats.task_accuracy);
}

int cmd_train(const CommonOptions& opts, const json& config_json) {
    TrainConfig cfg = resolve_train_config(opts, config_json);
    RunDir run(opts.out_dir);
    write_text_file(run.path() / "resolved_config.json", train_config_to_json(cfg).dump(2) + "\n");

    std::ofstream metrics(run.path() / "metrics.jsonl");
    if (!metrics) throw IoError("cannot write metrics.jsonl");
    TrainResult result = train(cfg, [&](int step, const LossValues& v, double lr) {
        metrics << loss_to_json(step, v, lr).dump() << "\n";
    });
    metrics.close();

    Checkpoint ckpt = Checkpoint::from_model(result.model, cfg.steps);
    save_checkpoint(run.path() / "checkpoint.bin", ckpt);
    write_text_file(run.path() / "report.json", stats_to_json(result.stats).dump(2) + "\n");

    std::printf("run directory: %s\n", run.path().c_str());
    print_stats(result.stats);
    return 0;
}

int cmd_evaluate(const CommonOptions& opts, json config_json) {
    std::string ckpt_path;
    if (opts.checkpoint) ckpt_path = *opts.checkpoint;
    if (config_json.contains("checkpoint")) {
        ckpt_path = config_json.at("checkpoint").get<std::string>();
        config_json.erase("checkpoint");
    }
    if (ckpt_path.empty()) {
        throw ConfigError("evaluate: no checkpoint given (use --checkpoint or a 'checkpoint' config key)");
    }
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    if (!config_json.empty()) {
        TrainConfig requested = resolve_train_config(opts, config_json);
        check_checkpoint_compatible(ckpt, requested);
    }
    Model model = model_from_checkpoint(ckpt);
    if (opts.seed) model.config.seed = *opts.seed;

    RoutingStats stats = evaluate_routing(model, make_eval_set(model));
    RunDir run(opts.out_dir);
    write_text_file(run.path() / "report.json", stats_to_json(stats).dump(2) + "\n");
    std::printf("run directory: %s\n", run.path().c_str());
    print_stats(stats);
    return 0;
}

int cmd_sweep(const CommonOptions& opts, json config_json) {
    if (!config_json.contains("grid") || !config_json.at("grid").is_array() ||
        config_json.at("grid").empty()) {
        throw ConfigError("sweep: config needs a nonempty 'grid' array of lambda records");
    }
    std::vector<LossWeights> grid;
    for (const auto& item : config_json.at("grid")) {
        LossWeights w;
        for (const auto& [key, value] : item.items()) {
            if (key == "lambda_ba") w.lambda_ba = value.get<double>();
            else if (key == "lambda_be") w.lambda_be = value.get<double>();
            else if (key == "lambda_ie") w.lambda_ie = value.get<double>();
            else if (key == "lambda_ia") w.lambda_ia = value.get<double>();
            else throw ConfigError("sweep grid: unknown key '" + key + "'");
        }
        grid.push_back(w);
    }
    config_json.erase("grid");
    TrainConfig base = resolve_train_config(opts, config_json);

    std::vector<SweepRow> rows = sweep_lambdas(base, grid);

    RunDir run(opts.out_dir);
    json table = json::array();
    std::printf("%8s %8s %8s %8s %10s %10s\n", "l_be", "l_ie", "l_ba", "l_ia", "accuracy", "range");
    for (const SweepRow& r : rows) {
        std::printf("%8.2f %8.2f %8.2f %8.2f %10.4f %10.2f\n", r.weights.lambda_be, r.weights.lambda_ie,
                    r.weights.lambda_ba, r.weights.lambda_ia, r.mean_task_accuracy, r.range_gap);
        table.push_back({{"lambda_ba", r.weights.lambda_ba},
                         {"lambda_be", r.weights.lambda_be},
                         {"lambda_ie", r.weights.lambda_ie},
                         {"lambda_ia", r.weights.lambda_ia},
                         {"mean_task_accuracy", r.mean_task_accuracy},
                         {"range_gap", r.range_gap}});
    }
    write_text_file(run.path() / "sweep.json", table.dump(2) + "\n");
    std::printf("run directory: %s\n", run.path().c_str());
    return 0;
}

json config_cost_to_json(const flops::ConfigCost& c) {
    json j{{"label", c.label},
           {"encoders", c.encoders},
           {"s0", c.s0},
           {"llm_prefill_flops", c.prefill},
           {"llm_decode_flops", c.decode},
           {"llm_total_flops", c.llm_total},
           {"llm_total_tflops", flops::to_tflops(c.llm_total)},
           {"total_tflops", c.total_tflops}};
    if (c.encoder_tflops_known) j["encoder_tflops"] = c.encoder_tflops;
    return j;
}

int cmd_flops(const CommonOptions& opts, const json& config_json) {
    static constexpr const char* kKeys[] = {"width",  "height", "prompt_tokens", "generation_tokens",
                                            "encoders", "llm",   "zoo"};
    for (const auto& [key, value] : config_json.items()) {
        bool ok = false;
        for (const char* k : kKeys) ok = ok || key == k;
        if (!ok) throw ConfigError("flops config: unknown key '" + key + "'");
    }
    flops::ScenarioSpec scenario;
    if (config_json.contains("width")) scenario.width = config_json.at("width").get<int>();
    if (config_json.contains("height")) scenario.height = config_json.at("height").get<int>();
    if (config_json.contains("prompt_tokens")) {
        scenario.prompt_tokens = config_json.at("prompt_tokens").get<int>();
    }
    if (config_json.contains("generation_tokens")) {
        scenario.generation_tokens = config_json.at("generation_tokens").get<int>();
    }
    if (config_json.contains("encoders")) {
        scenario.active_routed = config_json.at("encoders").get<std::vector<std::string>>();
    }
    flops::LlmSpec llm;
    if (config_json.contains("llm")) {
        const json& l = config_json.at("llm");
        for (const auto& [key, value] : l.items()) {
            if (key == "layers") llm.layers = value.get<std::int64_t>();
            else if (key == "hidden") llm.hidden = value.get<std::int64_t>();
            else if (key == "ffn") llm.ffn = value.get<std::int64_t>();
            else throw ConfigError("flops config: unknown llm key '" + key + "'");
        }
    }
    std::vector<flops::EncoderTokenSpec> zoo =
        config_json.contains("zoo") ? flops::load_encoder_zoo(config_json.at("zoo").get<std::string>())
                                    : flops::default_encoder_zoo();
    if (scenario.active_routed.empty()) {
        for (const auto& e : zoo) {
            if (!e.shared) scenario.active_routed.push_back(e.name);
        }
    }

    flops::ComputeReport report = flops::scenario_report(scenario, zoo, llm);

    std::printf("%-28s %14s %14s\n", "encoder", "vision tokens", "S0 (single)");
    for (const auto& row : report.token_table) {
        std::printf("%-28s %14lld %14lld\n", row.name.c_str(), static_cast<long long>(row.tokens),
                    static_cast<long long>(row.single_s0));
    }
    std::printf("\n%-28s %8s %12s %12s %12s %8s\n", "configuration", "S0", "prefill TF", "decode TF",
                "total TF", "saving");
    auto print_cost = [&](const flops::ConfigCost& c, double saving) {
        std::printf("%-28s %8lld %12.3f %12.3f %12.3f %7.1f%%\n", c.label.c_str(),
                    static_cast<long long>(c.s0), flops::to_tflops(c.prefill), flops::to_tflops(c.decode),
                    c.total_tflops, 100.0 * saving);
    };
    for (std::size_t i = 0; i < report.single_encoder_configs.size(); ++i) {
        print_cost(report.single_encoder_configs[i], report.single_savings[i]);
    }
    print_cost(report.all_encoders, 0.0);
    std::printf("\nactive configuration:\n");
    print_cost(report.active, report.saving);

    json out;
    out["token_table"] = json::array();
    for (const auto& row : report.token_table) {
        out["token_table"].push_back(
            {{"name", row.name}, {"vision_tokens", row.tokens}, {"single_s0", row.single_s0}});
    }
    out["active"] = config_cost_to_json(report.active);
    out["active"]["saving_vs_all"] = report.saving;
    out["all_encoders"] = config_cost_to_json(report.all_encoders);
    out["single_encoder_configs"] = json::array();
    for (std::size_t i = 0; i < report.single_encoder_configs.size(); ++i) {
        json c = config_cost_to_json(report.single_encoder_configs[i]);
        c["saving_vs_all"] = report.single_savings[i];
        out["single_encoder_configs"].push_back(std::move(c));
    }
    out["notes"] = json::array({"llm flops come from the closed-form counts and are not calibrated "
                                "to any published per-configuration totals",
                                "encoder_tflops values are user-supplied constants per encoder, not "
                                "derived quantities"});

    RunDir run(opts.out_dir);
    write_text_file(run.path() / "flops_report.json", out.dump(2) + "\n");
    std::printf("\nrun directory: %s\n", run.path().c_str());
    return 0;
}

int cmd_route_demo(const CommonOptions& opts, json config_json) {
    int count = 8;
    bool export_batch = false;
    if (config_json.contains("count")) {
        count = config_json.at("count").get<int>();
        config_json.erase("count");
    }
    if (config_json.contains("export_batch")) {
        export_batch = config_json.at("export_batch").get<bool>();
        config_json.erase("export_batch");
    }
    std::string ckpt_path;
    if (opts.checkpoint) ckpt_path = *opts.checkpoint;
    if (config_json.contains("checkpoint")) {
        ckpt_path = config_json.at("checkpoint").get<std::string>();
        config_json.erase("checkpoint");
    }
    if (count < 1) throw ConfigError("route-demo: count must be >= 1");

    Model model = ckpt_path.empty() ? Model::init(resolve_train_config(opts, config_json))
                                    : model_from_checkpoint(load_checkpoint(ckpt_path));
    if (!ckpt_path.empty() && opts.seed) model.config.seed = *opts.seed;

    auto batch = model.workload.generate_batch(split_seed(model.config.seed, 77), count);

    RunDir run(opts.out_dir);
    std::ofstream routes(run.path() / "routes.jsonl");
    std::printf("%6s %8s %9s %8s  q\n", "inst", "planted", "selected", "top-q");
    for (int i = 0; i < count; ++i) {
        const SyntheticInstance& inst = batch[static_cast<std::size_t>(i)];
        ad::Tape tape;
        RouterInput input;
        input.shared_features = model.workload.shared_encoder().apply(tape, inst.image_features);
        if (model.config.router == RouterVariant::cross_attention) {
            input.text_embedding = inst.prompt_embedding;
        }
        ad::Var z = route(tape, model.router, input);
        ad::Var q = instance_distribution(tape, z);
        const int k = select_top1(q);
        std::printf("%6d %8d %9d %8.4f  [", i, inst.planted_expert, k, q.value()[k]);
        for (std::size_t e = 0; e < q.value().size(); ++e) {
            std::printf("%s%.4f", e ? ", " : "", q.value()[e]);
        }
        std::printf("]\n");
        routes << json{{"instance", i},
                       {"planted_expert", inst.planted_expert},
                       {"selected", k},
                       {"q", q.value()}}
                      .dump()
               << "\n";
    }
    if (export_batch) {
        std::ofstream records(run.path() / "batch.jsonl");
        write_batch_records(records, batch);
    }
    std::printf("run directory: %s\n", run.path().c_str());
    return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
    CLI::App app{"desk-scale mixture-of-encoders routing laboratory"};
    app.require_subcommand(1);

    CommonOptions opts;
    std::string command;
    for (const char* name : {"train", "evaluate", "sweep", "flops", "route-demo"}) {
        CLI::App* sub = app.add_subcommand(name);
        sub->add_option("--config", opts.config_path, "JSON config file");
        sub->add_option("--out", opts.out_dir, "output directory (default: runs)");
        sub->add_option("--seed", [&opts](const CLI::results_t& r) {
            opts.seed = std::stoull(r[0]);
            return true;
        }, "seed override");
        sub->add_option("--router", [&opts](const CLI::results_t& r) {
            opts.router = r[0];
            return true;
        }, "router variant: ca, sa, or mlp");
        if (std::string(name) == "evaluate" || std::string(name) == "route-demo") {
            sub->add_option("--checkpoint", [&opts](const CLI::results_t& r) {
                opts.checkpoint = r[0];
                return true;
            }, "checkpoint file");
        }
        sub->callback([&command, name]() { command = name; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        json config_json = json::object();
        if (!opts.config_path.empty()) config_json = load_json_file(opts.config_path);
        if (command == "train") return cmd_train(opts, config_json);
        if (command == "evaluate") return cmd_evaluate(opts, std::move(config_json));
        if (command == "sweep") return cmd_sweep(opts, std::move(config_json));
        if (command == "flops") return cmd_flops(opts, config_json);
        if (command == "route-demo") return cmd_route_demo(opts, std::move(config_json));
        std::fprintf(stderr, "error: no command selected\n");
        return 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

int run(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    argv.reserve(args.size());
    for (const std::string& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace moenc::cli
