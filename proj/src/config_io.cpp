#include "moenc/config_io.hpp"

#include <fstream>

namespace moenc {

namespace {

using nlohmann::json;

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* where) {
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) {
            if (key == a) {
                ok = true;
                break;
            }
        }
        if (!ok) {
            throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
        }
    }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

json train_config_to_json(const TrainConfig& c) {
    json w{{"n_img", c.workload.n_img},
           {"d_img", c.workload.d_img},
           {"n_shared", c.workload.n_shared},
           {"n_routed", c.workload.n_routed},
           {"d_shared", c.workload.d_shared},
           {"d_routed", c.workload.d_routed},
           {"n_text", c.workload.n_text},
           {"d_text", c.workload.d_text},
           {"classes", c.workload.num_classes},
           {"experts", c.workload.num_experts},
           {"noise_level", c.workload.noise_level}};
    return json{{"steps", c.steps},
                {"batch_size", c.batch_size},
                {"learning_rate", c.learning_rate},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"weight_decay", c.weight_decay},
                {"eps_opt", c.eps_opt},
                {"schedule", to_string(c.schedule)},
                {"lambda_ba", c.weights.lambda_ba},
                {"lambda_be", c.weights.lambda_be},
                {"lambda_ie", c.weights.lambda_ie},
                {"lambda_ia", c.weights.lambda_ia},
                {"router", to_string(c.router)},
                {"mix_weighting", to_string(c.mix_weighting)},
                {"seed", c.seed},
                {"tile_count", c.tile_count},
                {"d_router", c.d_router},
                {"num_heads", c.num_heads},
                {"eval_size", c.eval_size},
                {"workload", std::move(w)}};
}

TrainConfig train_config_from_json(const json& j) {
    check_keys(j,
               {"steps", "batch_size", "learning_rate", "beta1", "beta2", "weight_decay", "eps_opt",
                "schedule", "lambda_ba", "lambda_be", "lambda_ie", "lambda_ia", "router",
                "mix_weighting", "seed", "tile_count", "d_router", "num_heads", "eval_size",
                "workload"},
               "config");
    TrainConfig c;
    read(j, "steps", c.steps);
    read(j, "batch_size", c.batch_size);
    read(j, "learning_rate", c.learning_rate);
    read(j, "beta1", c.beta1);
    read(j, "beta2", c.beta2);
    read(j, "weight_decay", c.weight_decay);
    read(j, "eps_opt", c.eps_opt);
    if (j.contains("schedule")) c.schedule = schedule_from_string(j.at("schedule").get<std::string>());
    read(j, "lambda_ba", c.weights.lambda_ba);
    read(j, "lambda_be", c.weights.lambda_be);
    read(j, "lambda_ie", c.weights.lambda_ie);
    read(j, "lambda_ia", c.weights.lambda_ia);
    if (j.contains("router")) c.router = router_variant_from_string(j.at("router").get<std::string>());
    if (j.contains("mix_weighting")) {
        c.mix_weighting = mix_weighting_from_string(j.at("mix_weighting").get<std::string>());
    }
    read(j, "seed", c.seed);
    read(j, "tile_count", c.tile_count);
    read(j, "d_router", c.d_router);
    read(j, "num_heads", c.num_heads);
    read(j, "eval_size", c.eval_size);
    if (j.contains("workload")) {
        const json& w = j.at("workload");
        check_keys(w,
                   {"n_img", "d_img", "n_shared", "n_routed", "d_shared", "d_routed", "n_text",
                    "d_text", "classes", "experts", "noise_level"},
                   "config.workload");
        read(w, "n_img", c.workload.n_img);
        read(w, "d_img", c.workload.d_img);
        read(w, "n_shared", c.workload.n_shared);
        read(w, "n_routed", c.workload.n_routed);
        read(w, "d_shared", c.workload.d_shared);
        read(w, "d_routed", c.workload.d_routed);
        read(w, "n_text", c.workload.n_text);
        read(w, "d_text", c.workload.d_text);
        read(w, "classes", c.workload.num_classes);
        read(w, "experts", c.workload.num_experts);
        read(w, "noise_level", c.workload.noise_level);
    }
    return c;
}

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

}  // namespace moenc
