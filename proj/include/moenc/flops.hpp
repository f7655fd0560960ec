#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "moenc/common.hpp"

namespace moenc::flops {

struct LlmSpec {
    std::int64_t layers = 28;
    std::int64_t hidden = 3584;
    std::int64_t ffn = 18944;

    void validate() const;
};

// Spatial token grid of one vision encoder: ceiling division of each image
// axis by patch*merge (ViT-style) or by the output stride (ConvNeXt-style).
struct EncoderTokenSpec {
    std::string name;
    enum class Mode { patch_merge, stride } mode = Mode::patch_merge;
    int patch = 14;
    int merge = 2;
    int stride = 0;
    bool shared = false;
    // Encoder-side TFLOPs are external constants supplied per encoder, not
    // quantities this analyzer derives.
    std::optional<double> encoder_tflops;

    std::int64_t divisor() const;
    void validate() const;
};

struct ScenarioSpec {
    int width = 1024;
    int height = 768;
    int prompt_tokens = 64;
    int generation_tokens = 256;
    std::vector<std::string> active_routed;  // routed encoders switched on; shared is always on

    void validate() const;
};

std::int64_t vision_token_count(const EncoderTokenSpec& spec, int width, int height);

// Closed forms counting one multiply-add as 2 FLOPs. Exact integer results;
// intermediates are evaluated in 128-bit arithmetic and range-checked.
std::int64_t prefill_flops(const LlmSpec& llm, std::int64_t s0);
std::int64_t decode_flops(const LlmSpec& llm, std::int64_t s0, std::int64_t t_gen);

struct EncoderTokenRow {
    std::string name;
    std::int64_t tokens = 0;
    std::int64_t single_s0 = 0;  // this encoder alone plus the prompt
};

struct ConfigCost {
    std::string label;
    std::vector<std::string> encoders;  // shared + active routed
    std::int64_t s0 = 0;
    std::int64_t prefill = 0;
    std::int64_t decode = 0;
    std::int64_t llm_total = 0;
    double encoder_tflops = 0.0;  // sum of external per-encoder constants
    bool encoder_tflops_known = false;
    double total_tflops = 0.0;  // llm_total converted + external encoder cost
};

struct ComputeReport {
    std::vector<EncoderTokenRow> token_table;  // zoo order
    ConfigCost active;
    ConfigCost all_encoders;
    double saving = 0.0;  // 1 - total(active)/total(all-encoders)
    std::vector<ConfigCost> single_encoder_configs;  // shared + one routed each
    std::vector<double> single_savings;
};

// The bundled five-encoder zoo (shared ViT plus four routed encoders).
std::vector<EncoderTokenSpec> default_encoder_zoo();
std::vector<EncoderTokenSpec> load_encoder_zoo(const std::string& path);

ComputeReport scenario_report(const ScenarioSpec& scenario, const std::vector<EncoderTokenSpec>& zoo,
                              const LlmSpec& llm);

double to_tflops(std::int64_t flops);

}  // namespace moenc::flops
