#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "moenc/autodiff.hpp"

namespace moenc {

// Sizes of the synthetic pipeline. The image feature width is carved into K
// per-expert signal blocks plus one tag block: routed encoder i reads only
// block i, the shared encoder reads only the tag block. Labels are therefore
// recoverable through the planted expert's transform and through nothing
// else, which gives routing a ground truth.
struct WorkloadConfig {
    int n_img = 64;
    int d_img = 32;
    int n_shared = 16;
    int n_routed = 16;
    int d_shared = 32;
    int d_routed = 32;
    int n_text = 8;
    int d_text = 32;
    int num_classes = 8;
    int num_experts = 4;
    double noise_level = 0.0;

    int signal_dim() const { return d_img / (num_experts + 1); }
    int tag_dim() const { return d_img - num_experts * signal_dim(); }
    void validate() const;
};

struct SyntheticInstance {
    ad::Var image_features;    // [n_img, d_img] leaf, no grad
    ad::Var prompt_embedding;  // [n_text, d_text] leaf, no grad
    int label = 0;
    int planted_expert = 0;
};

// Frozen projection standing in for a pretrained vision encoder: group-mean
// row pooling followed by a column map whose support is one feature block.
struct ToyEncoder {
    int kind = -1;  // -1 shared, otherwise routed expert index
    int n_out = 0;
    ad::Var col_map;  // [d_img, d_out] leaf, frozen

    ad::Var apply(ad::Tape& tape, const ad::Var& image) const;
};

// Linear surrogate head standing in for the language model: class logits from
// the mean-pooled fused representation.
struct TaskHead {
    ad::Var weight;  // [d_shared, num_classes]
    ad::Var bias;    // [num_classes]

    static TaskHead init(int d_shared, int num_classes, std::uint64_t seed);
};

ad::Var task_logits(ad::Tape& tape, const TaskHead& head, const ad::Var& v_final);
ad::Var surrogate_task_loss(ad::Tape& tape, const TaskHead& head, const ad::Var& v_final, int label);

class Workload {
public:
    Workload(const WorkloadConfig& config, std::uint64_t seed);

    const WorkloadConfig& config() const { return config_; }
    const ToyEncoder& shared_encoder() const { return shared_; }
    const ToyEncoder& routed_encoder(int i) const { return routed_.at(static_cast<std::size_t>(i)); }
    int num_experts() const { return config_.num_experts; }

    // Deterministic: one seed, one bitwise-identical batch.
    std::vector<SyntheticInstance> generate_batch(std::uint64_t seed, int batch_size) const;

    // Class codebook in signal space; exposed so tests can build probe oracles.
    const std::vector<std::vector<double>>& class_codebook() const { return codebook_; }

private:
    WorkloadConfig config_;
    std::vector<std::vector<double>> codebook_;         // C x signal_dim
    std::vector<std::vector<double>> expert_tags_;      // K x tag_dim
    std::vector<std::vector<double>> prompt_families_;  // K x d_text
    ToyEncoder shared_;
    std::vector<ToyEncoder> routed_;
};

// Splits the image feature rows into tile_count row blocks that share the
// original prompt and label, so batch-level losses stay defined at B = 1.
// The final tile is padded by repeating its last row when the row count does
// not divide evenly. tile_count = 1 returns the instance unchanged.
std::vector<SyntheticInstance> tile_pseudo_batch(const SyntheticInstance& instance, int tile_count);

// Line-delimited record export for reproducibility audits.
void write_batch_records(std::ostream& out, const std::vector<SyntheticInstance>& batch);

}  // namespace moenc
