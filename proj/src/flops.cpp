#include "moenc/flops.hpp"

#include <algorithm>
#include <fstream>
#include <limits>

#include "json.hpp"

namespace moenc::flops {

namespace {

using int128 = __int128;

std::int64_t narrow(int128 v, const char* what) {
    if (v < 0 || v > static_cast<int128>(std::numeric_limits<std::int64_t>::max())) {
        throw ContractError(std::string(what) + ": FLOPs value overflows 64-bit range");
    }
    return static_cast<std::int64_t>(v);
}

std::int64_t ceil_div(std::int64_t a, std::int64_t b) {
    return (a + b - 1) / b;
}

const EncoderTokenSpec* find_encoder(const std::vector<EncoderTokenSpec>& zoo, const std::string& name) {
    for (const EncoderTokenSpec& e : zoo) {
        if (e.name == name) return &e;
    }
    return nullptr;
}

ConfigCost cost_for(const std::string& label, const std::vector<const EncoderTokenSpec*>& encoders,
                    const ScenarioSpec& scenario, const LlmSpec& llm) {
    ConfigCost c;
    c.label = label;
    c.s0 = scenario.prompt_tokens;
    c.encoder_tflops_known = true;
    for (const EncoderTokenSpec* e : encoders) {
        c.encoders.push_back(e->name);
        c.s0 += vision_token_count(*e, scenario.width, scenario.height);
        if (e->encoder_tflops.has_value()) {
            c.encoder_tflops += *e->encoder_tflops;
        } else {
            c.encoder_tflops_known = false;
        }
    }
    c.prefill = prefill_flops(llm, c.s0);
    c.decode = decode_flops(llm, c.s0, scenario.generation_tokens);
    c.llm_total = narrow(static_cast<int128>(c.prefill) + static_cast<int128>(c.decode), "config total");
    c.total_tflops = to_tflops(c.llm_total) + c.encoder_tflops;
    return c;
}

}  // namespace

void LlmSpec::validate() const {
    if (layers < 1 || hidden < 1 || ffn < 1) {
        throw ConfigError("llm spec: layers, hidden, and ffn must be positive");
    }
}

std::int64_t EncoderTokenSpec::divisor() const {
    return mode == Mode::patch_merge ? static_cast<std::int64_t>(patch) * merge
                                     : static_cast<std::int64_t>(stride);
}

void EncoderTokenSpec::validate() const {
    if (name.empty()) throw ConfigError("encoder spec: missing name");
    if (mode == Mode::patch_merge) {
        if (patch < 1 || merge < 1) throw ConfigError("encoder spec '" + name + "': patch and merge must be positive");
    } else if (stride < 1) {
        throw ConfigError("encoder spec '" + name + "': stride must be positive");
    }
}

void ScenarioSpec::validate() const {
    if (width < 1 || height < 1) throw ConfigError("scenario: image dimensions must be positive");
    if (prompt_tokens < 1) throw ConfigError("scenario: prompt_tokens must be positive");
    if (generation_tokens < 1) throw ConfigError("scenario: generation_tokens must be positive");
}

std::int64_t vision_token_count(const EncoderTokenSpec& spec, int width, int height) {
    spec.validate();
    if (width < 1 || height < 1) throw ContractError("vision_token_count: nonpositive image size");
    const std::int64_t d = spec.divisor();
    return ceil_div(width, d) * ceil_div(height, d);
}

std::int64_t prefill_flops(const LlmSpec& llm, std::int64_t s0) {
    llm.validate();
    if (s0 < 1) throw ContractError("prefill_flops: S0 must be >= 1");
    const int128 s = s0, d = llm.hidden, f = llm.ffn, layers = llm.layers;
    const int128 per_layer = 4 * s * d * d + 2 * s * s * d + 2 * s * d * f;
    return narrow(layers * per_layer, "prefill_flops");
}

std::int64_t decode_flops(const LlmSpec& llm, std::int64_t s0, std::int64_t t_gen) {
    llm.validate();
    if (s0 < 1) throw ContractError("decode_flops: S0 must be >= 1");
    if (t_gen < 1) throw ContractError("decode_flops: T must be >= 1");
    const int128 t = t_gen, s = s0, d = llm.hidden, f = llm.ffn, layers = llm.layers;
    // KV-cached decoding: step t attends over s0 + t - 1 positions.
    const int128 per_layers = 4 * t * d * d + 2 * d * (t * s + t * (t - 1) / 2) + 2 * t * d * f;
    return narrow(layers * per_layers, "decode_flops");
}

std::vector<EncoderTokenSpec> default_encoder_zoo() {
    // Shared ViT (patch 14, 2x2 merge) plus the four routed encoders.
    // Encoder-side TFLOPs are published constants for the 1024x768 setting.
    std::vector<EncoderTokenSpec> zoo(5);
    zoo[0].name = "qwen2.5-vit";
    zoo[0].mode = EncoderTokenSpec::Mode::patch_merge;
    zoo[0].patch = 14;
    zoo[0].merge = 2;
    zoo[0].shared = true;
    zoo[0].encoder_tflops = 2.24;

    zoo[1].name = "convllava-convnext-1536";
    zoo[1].mode = EncoderTokenSpec::Mode::stride;
    zoo[1].stride = 64;
    zoo[1].encoder_tflops = 1.08;

    zoo[2].name = "siglip2-so400m-p14";
    zoo[2].mode = EncoderTokenSpec::Mode::patch_merge;
    zoo[2].patch = 14;
    zoo[2].merge = 2;
    zoo[2].encoder_tflops = 2.77;

    zoo[3].name = "dinov3-convnext-l";
    zoo[3].mode = EncoderTokenSpec::Mode::stride;
    zoo[3].stride = 32;
    zoo[3].encoder_tflops = 1.08;

    zoo[4].name = "dinov3-vit-l16";
    zoo[4].mode = EncoderTokenSpec::Mode::patch_merge;
    zoo[4].patch = 16;
    zoo[4].merge = 2;
    zoo[4].encoder_tflops = 1.40;
    return zoo;
}

std::vector<EncoderTokenSpec> load_encoder_zoo(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open encoder zoo file: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("encoder zoo " + path + ": " + e.what());
    }
    if (!j.contains("encoders") || !j["encoders"].is_array()) {
        throw ConfigError("encoder zoo " + path + ": expected top-level 'encoders' array");
    }
    std::vector<EncoderTokenSpec> zoo;
    for (const auto& item : j["encoders"]) {
        EncoderTokenSpec spec;
        for (const auto& [key, value] : item.items()) {
            if (key == "name") spec.name = value.get<std::string>();
            else if (key == "mode") {
                const std::string m = value.get<std::string>();
                if (m == "patch_merge") spec.mode = EncoderTokenSpec::Mode::patch_merge;
                else if (m == "stride") spec.mode = EncoderTokenSpec::Mode::stride;
                else throw ConfigError("encoder zoo: unknown mode '" + m + "'");
            } else if (key == "patch") spec.patch = value.get<int>();
            else if (key == "merge") spec.merge = value.get<int>();
            else if (key == "stride") spec.stride = value.get<int>();
            else if (key == "shared") spec.shared = value.get<bool>();
            else if (key == "encoder_tflops") spec.encoder_tflops = value.get<double>();
            else throw ConfigError("encoder zoo: unknown key '" + key + "'");
        }
        spec.validate();
        zoo.push_back(std::move(spec));
    }
    if (zoo.empty()) throw ConfigError("encoder zoo " + path + ": no encoders defined");
    return zoo;
}

ComputeReport scenario_report(const ScenarioSpec& scenario, const std::vector<EncoderTokenSpec>& zoo,
                              const LlmSpec& llm) {
    scenario.validate();
    llm.validate();
    const EncoderTokenSpec* shared = nullptr;
    for (const EncoderTokenSpec& e : zoo) {
        if (e.shared) {
            if (shared) throw ConfigError("encoder zoo: more than one shared encoder");
            shared = &e;
        }
    }
    if (!shared) throw ConfigError("encoder zoo: no shared encoder marked");

    ComputeReport report;
    for (const EncoderTokenSpec& e : zoo) {
        EncoderTokenRow row;
        row.name = e.name;
        row.tokens = vision_token_count(e, scenario.width, scenario.height);
        row.single_s0 = row.tokens + scenario.prompt_tokens;
        report.token_table.push_back(std::move(row));
    }

    std::vector<const EncoderTokenSpec*> active = {shared};
    for (const std::string& name : scenario.active_routed) {
        const EncoderTokenSpec* e = find_encoder(zoo, name);
        if (!e) {
            std::string known;
            for (const EncoderTokenSpec& z : zoo) {
                if (!known.empty()) known += ", ";
                known += z.name;
            }
            throw ConfigError("scenario: unknown encoder '" + name + "' (known: " + known + ")");
        }
        if (e->shared) continue;  // already counted
        active.push_back(e);
    }

    std::vector<const EncoderTokenSpec*> all = {shared};
    for (const EncoderTokenSpec& e : zoo) {
        if (!e.shared) all.push_back(&e);
    }

    report.active = cost_for("active", active, scenario, llm);
    report.all_encoders = cost_for("all-encoders", all, scenario, llm);
    report.saving = 1.0 - report.active.total_tflops / report.all_encoders.total_tflops;

    for (const EncoderTokenSpec& e : zoo) {
        if (e.shared) continue;
        std::vector<const EncoderTokenSpec*> pair = {shared, &e};
        report.single_encoder_configs.push_back(cost_for("+" + e.name, pair, scenario, llm));
        report.single_savings.push_back(1.0 - report.single_encoder_configs.back().total_tflops /
                                                  report.all_encoders.total_tflops);
    }
    return report;
}

double to_tflops(std::int64_t flops) {
    return static_cast<double>(flops) / 1e12;
}

}  // namespace moenc::flops
