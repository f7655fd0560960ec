#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "moenc/checkpoint.hpp"
#include "moenc/cli.hpp"
#include "moenc/config_io.hpp"

using namespace moenc;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

TrainConfig tiny_config() {
    TrainConfig c;
    c.steps = 15;
    c.batch_size = 6;
    c.eval_size = 60;
    c.d_router = 16;
    c.num_heads = 2;
    c.workload.n_img = 16;
    c.workload.d_img = 20;
    c.workload.n_shared = 4;
    c.workload.n_routed = 4;
    c.workload.d_shared = 8;
    c.workload.d_routed = 8;
    c.workload.n_text = 3;
    c.workload.d_text = 8;
    c.workload.num_classes = 4;
    c.workload.num_experts = 4;
    c.seed = 5;
    return c;
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("moenc-test-" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

std::vector<char> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>{});
}

void write_config(const fs::path& p, const json& j) {
    std::ofstream out(p);
    out << j.dump(2);
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("checkpoint round trip is bitwise") {
    TempDir tmp;
    TrainConfig cfg = tiny_config();
    TrainResult r = train(cfg);
    Checkpoint ckpt = Checkpoint::from_model(r.model, cfg.steps);

    const fs::path p1 = tmp.path / "a.bin";
    const fs::path p2 = tmp.path / "b.bin";
    save_checkpoint(p1, ckpt);
    Checkpoint loaded = load_checkpoint(p1);
    save_checkpoint(p2, loaded);
    CHECK(slurp(p1) == slurp(p2));

    REQUIRE(loaded.tensors.size() == ckpt.tensors.size());
    for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
        CHECK(loaded.tensors[i].first == ckpt.tensors[i].first);
        CHECK(loaded.tensors[i].second.value() == ckpt.tensors[i].second.value());
    }
    CHECK(loaded.step == cfg.steps);
}

TEST_CASE("truncated checkpoints are rejected without partial loads") {
    TempDir tmp;
    TrainConfig cfg = tiny_config();
    cfg.steps = 0;
    Model model = Model::init(cfg);
    const fs::path p = tmp.path / "full.bin";
    save_checkpoint(p, Checkpoint::from_model(model, 0));

    auto bytes = slurp(p);
    for (std::size_t keep : {bytes.size() / 3, bytes.size() - 5}) {
        const fs::path cut = tmp.path / "cut.bin";
        std::ofstream out(cut, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(keep));
        out.close();
        CHECK_THROWS_AS(load_checkpoint(cut), IoError);
    }
}

TEST_CASE("checkpoints from a different expert pool are rejected") {
    TempDir tmp;
    TrainConfig cfg = tiny_config();
    cfg.steps = 0;
    Model model = Model::init(cfg);
    const fs::path p = tmp.path / "k4.bin";
    save_checkpoint(p, Checkpoint::from_model(model, 0));

    Checkpoint ckpt = load_checkpoint(p);
    TrainConfig other = tiny_config();
    other.workload.num_experts = 3;
    other.workload.d_img = 20;
    try {
        check_checkpoint_compatible(ckpt, other);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("experts") != std::string::npos);
    }
}

TEST_CASE("model restored from checkpoint evaluates identically") {
    TempDir tmp;
    TrainConfig cfg = tiny_config();
    TrainResult r = train(cfg);
    const fs::path p = tmp.path / "model.bin";
    save_checkpoint(p, Checkpoint::from_model(r.model, cfg.steps));

    Model restored = model_from_checkpoint(load_checkpoint(p));
    RoutingStats again = evaluate_routing(restored, make_eval_set(restored));
    CHECK(again.range_gap == r.stats.range_gap);
    CHECK(again.expert_recovery_accuracy == r.stats.expert_recovery_accuracy);
    CHECK(again.task_accuracy == r.stats.task_accuracy);
    CHECK(again.selection_counts == r.stats.selection_counts);
}

TEST_CASE("config files reject unknown keys by name") {
    json j = train_config_to_json(tiny_config());
    j["learnig_rate"] = 0.1;  // typo
    try {
        train_config_from_json(j);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("learnig_rate") != std::string::npos);
    }
    json w = train_config_to_json(tiny_config());
    w["workload"]["d_imgg"] = 3;
    CHECK_THROWS_AS(train_config_from_json(w), ConfigError);
}

TEST_CASE("config json round-trips through parsing") {
    TrainConfig cfg = tiny_config();
    cfg.weights = LossWeights{0.35, 0.15, 0.55, 0.75};
    cfg.router = RouterVariant::mlp;
    cfg.schedule = LrSchedule::constant;
    TrainConfig back = train_config_from_json(train_config_to_json(cfg));
    CHECK(train_config_to_json(back) == train_config_to_json(cfg));
}

TEST_CASE("malformed config names the parse position") {
    TempDir tmp;
    const fs::path p = tmp.path / "bad.json";
    std::ofstream(p) << "{\n  \"steps\": 5,\n  oops\n}\n";
    try {
        load_json_file(p.string());
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("bad.json") != std::string::npos);
        CHECK(msg.find("line") != std::string::npos);
    }
}

TEST_CASE("cli flops command emits the prefill-length table") {
    TempDir tmp;
    const int rc = cli::run({"moenc", "flops", "--out", (tmp.path / "runs").string()});
    CHECK(rc == 0);
    const fs::path report = tmp.path / "runs" / "run-0001" / "flops_report.json";
    REQUIRE(fs::exists(report));
    json j = json::parse(std::ifstream(report));
    std::vector<std::int64_t> s0;
    for (const auto& row : j.at("token_table")) s0.push_back(row.at("single_s0").get<std::int64_t>());
    CHECK(s0 == std::vector<std::int64_t>{1100, 256, 1100, 832, 832});
}

TEST_CASE("cli train then evaluate reproduces the final routing stats") {
    TempDir tmp;
    const fs::path cfg_path = tmp.path / "config.json";
    write_config(cfg_path, train_config_to_json(tiny_config()));
    const fs::path out = tmp.path / "runs";

    REQUIRE(cli::run({"moenc", "train", "--config", cfg_path.string(), "--out", out.string()}) == 0);
    const fs::path train_report = out / "run-0001" / "report.json";
    const fs::path ckpt = out / "run-0001" / "checkpoint.bin";
    REQUIRE(fs::exists(train_report));
    REQUIRE(fs::exists(ckpt));
    REQUIRE(fs::exists(out / "run-0001" / "metrics.jsonl"));

    REQUIRE(cli::run({"moenc", "evaluate", "--checkpoint", ckpt.string(), "--out", out.string()}) == 0);
    const fs::path eval_report = out / "run-0002" / "report.json";
    REQUIRE(fs::exists(eval_report));

    json a = json::parse(std::ifstream(train_report));
    json b = json::parse(std::ifstream(eval_report));
    CHECK(a == b);
}

TEST_CASE("reruns append new run directories and leave prior results intact") {
    TempDir tmp;
    const fs::path out = tmp.path / "runs";
    REQUIRE(cli::run({"moenc", "flops", "--out", out.string()}) == 0);
    const auto before = slurp(out / "run-0001" / "flops_report.json");
    REQUIRE(cli::run({"moenc", "flops", "--out", out.string()}) == 0);
    CHECK(fs::exists(out / "run-0002" / "flops_report.json"));
    CHECK(slurp(out / "run-0001" / "flops_report.json") == before);
}

TEST_CASE("unknown subcommands exit nonzero") {
    CHECK(cli::run({"moenc", "transmogrify"}) != 0);
    CHECK(cli::run({"moenc"}) != 0);
}

TEST_CASE("route-demo runs from config defaults and writes routes") {
    TempDir tmp;
    const fs::path cfg_path = tmp.path / "config.json";
    json j = train_config_to_json(tiny_config());
    j["count"] = 5;
    j["export_batch"] = true;
    write_config(cfg_path, j);
    const fs::path out = tmp.path / "runs";
    REQUIRE(cli::run({"moenc", "route-demo", "--config", cfg_path.string(), "--out", out.string()}) == 0);
    std::ifstream routes(out / "run-0001" / "routes.jsonl");
    REQUIRE(routes);
    int lines = 0;
    std::string line;
    while (std::getline(routes, line)) {
        if (!line.empty()) ++lines;
    }
    CHECK(lines == 5);
    CHECK(fs::exists(out / "run-0001" / "batch.jsonl"));
}

TEST_CASE("cli sweep writes a table with one row per grid point") {
    TempDir tmp;
    const fs::path cfg_path = tmp.path / "sweep.json";
    json j = train_config_to_json(tiny_config());
    j["steps"] = 6;
    j["eval_size"] = 24;
    j["grid"] = json::array({json{{"lambda_ba", 0.2}, {"lambda_be", 0.2}, {"lambda_ie", 0.6}, {"lambda_ia", 0.6}},
                             json{{"lambda_ba", 0.0}, {"lambda_be", 0.0}, {"lambda_ie", 0.0}, {"lambda_ia", 0.0}}});
    write_config(cfg_path, j);
    const fs::path out = tmp.path / "runs";
    REQUIRE(cli::run({"moenc", "sweep", "--config", cfg_path.string(), "--out", out.string()}) == 0);
    json table = json::parse(std::ifstream(out / "run-0001" / "sweep.json"));
    CHECK(table.size() == 2);
}

TEST_CASE("seed and router flags override the config") {
    TempDir tmp;
    const fs::path cfg_path = tmp.path / "config.json";
    write_config(cfg_path, train_config_to_json(tiny_config()));
    const fs::path out = tmp.path / "runs";
    REQUIRE(cli::run({"moenc", "train", "--config", cfg_path.string(), "--out", out.string(), "--seed",
                      "99", "--router", "mlp"}) == 0);
    json resolved = json::parse(std::ifstream(out / "run-0001" / "resolved_config.json"));
    CHECK(resolved.at("seed").get<std::uint64_t>() == 99);
    CHECK(resolved.at("router").get<std::string>() == "mlp");
}

}  // TEST_SUITE
