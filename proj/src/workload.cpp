#include "moenc/workload.hpp"

#include <cmath>
#include <ostream>
#include <random>

#include "json.hpp"
#include "moenc/common.hpp"

namespace moenc {

namespace {

enum SeedStream : std::uint64_t {
    kCodebook = 1,
    kTags = 2,
    kPromptFamilies = 3,
    kSharedMap = 4,
    kRoutedMapBase = 100,
};

std::vector<double> unit_vector(int dim, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> v(static_cast<std::size_t>(dim));
    double norm2 = 0.0;
    for (double& x : v) {
        x = dist(rng);
        norm2 += x * x;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (double& x : v) x *= inv;
    return v;
}

// Column map supported on columns [block_start, block_start + block_dim).
ad::Var block_column_map(int d_img, int block_start, int block_dim, int d_out, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(block_dim)));
    std::vector<double> w(static_cast<std::size_t>(d_img) * d_out, 0.0);
    for (int r = block_start; r < block_start + block_dim; ++r)
        for (int c = 0; c < d_out; ++c) w[static_cast<std::size_t>(r) * d_out + c] = dist(rng);
    return ad::leaf({d_img, d_out}, std::move(w), /*requires_grad=*/false);
}

// Group-mean pooling matrix from n_in rows to n_out rows.
ad::Var pooling_matrix(int n_in, int n_out) {
    std::vector<double> p(static_cast<std::size_t>(n_out) * n_in, 0.0);
    for (int j = 0; j < n_out; ++j) {
        int lo = static_cast<int>((static_cast<std::int64_t>(j) * n_in) / n_out);
        int hi = static_cast<int>((static_cast<std::int64_t>(j + 1) * n_in) / n_out);
        if (hi <= lo) hi = lo + 1;
        const double w = 1.0 / static_cast<double>(hi - lo);
        for (int i = lo; i < hi; ++i) p[static_cast<std::size_t>(j) * n_in + i] = w;
    }
    return ad::leaf({n_out, n_in}, std::move(p), /*requires_grad=*/false);
}

}  // namespace

void WorkloadConfig::validate() const {
    if (num_experts < 2) throw ContractError("workload: num_experts must be >= 2");
    if (num_classes < 2) throw ContractError("workload: num_classes must be >= 2");
    if (n_img < 1 || n_shared < 1 || n_routed < 1 || n_text < 1) {
        throw ContractError("workload: token counts must be positive");
    }
    if (d_text < 1 || d_shared < 1 || d_routed < 1) {
        throw ContractError("workload: feature dimensions must be positive");
    }
    if (signal_dim() < 1) {
        throw ContractError("workload: d_img=" + std::to_string(d_img) + " too small for " +
                            std::to_string(num_experts) + " experts plus a tag block");
    }
    if (noise_level < 0) throw ContractError("workload: noise_level must be nonnegative");
}

ad::Var ToyEncoder::apply(ad::Tape& tape, const ad::Var& image) const {
    if (image.rank() != 2 || image.shape()[1] != col_map.shape()[0]) {
        throw ShapeError("toy encoder: image features " + ad::shape_str(image.shape()) +
                         " do not match column map " + ad::shape_str(col_map.shape()));
    }
    ad::Var pooled = tape.matmul(pooling_matrix(image.shape()[0], n_out), image);
    return tape.matmul(pooled, col_map);
}

TaskHead TaskHead::init(int d_shared, int num_classes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(d_shared)));
    std::vector<double> w(static_cast<std::size_t>(d_shared) * num_classes);
    for (double& x : w) x = dist(rng);
    TaskHead h;
    h.weight = ad::leaf({d_shared, num_classes}, std::move(w), /*requires_grad=*/true);
    h.bias = ad::zeros({num_classes}, /*requires_grad=*/true);
    return h;
}

ad::Var task_logits(ad::Tape& tape, const TaskHead& head, const ad::Var& v_final) {
    ad::Var pooled = tape.mean_axis(v_final, /*axis=*/0);
    return tape.add(tape.vecmat(pooled, head.weight), head.bias);
}

ad::Var surrogate_task_loss(ad::Tape& tape, const TaskHead& head, const ad::Var& v_final, int label) {
    const int num_classes = head.weight.shape()[1];
    if (label < 0 || label >= num_classes) {
        throw ContractError("surrogate_task_loss: label " + std::to_string(label) +
                            " out of range [0, " + std::to_string(num_classes) + ")");
    }
    ad::Var probs = tape.softmax(task_logits(tape, head, v_final));
    return tape.neg(tape.log_eps(tape.pick(probs, label)));
}

Workload::Workload(const WorkloadConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    const int sig = config_.signal_dim();
    const int tag = config_.tag_dim();

    std::mt19937_64 rng(split_seed(seed, kCodebook));
    for (int c = 0; c < config_.num_classes; ++c) codebook_.push_back(unit_vector(sig, rng));

    rng.seed(split_seed(seed, kTags));
    for (int e = 0; e < config_.num_experts; ++e) expert_tags_.push_back(unit_vector(tag, rng));

    rng.seed(split_seed(seed, kPromptFamilies));
    for (int e = 0; e < config_.num_experts; ++e) prompt_families_.push_back(unit_vector(config_.d_text, rng));

    rng.seed(split_seed(seed, kSharedMap));
    shared_.kind = -1;
    shared_.n_out = config_.n_shared;
    shared_.col_map = block_column_map(config_.d_img, config_.num_experts * sig, tag, config_.d_shared, rng);

    for (int e = 0; e < config_.num_experts; ++e) {
        // One shared mixing pattern, shifted to each expert's block: every
        // expert embeds its recovered signal into the same feature subspace,
        // so downstream gradients compare experts on equal footing. Which
        // block an encoder reads is what distinguishes it.
        rng.seed(split_seed(seed, kRoutedMapBase));
        ToyEncoder enc;
        enc.kind = e;
        enc.n_out = config_.n_routed;
        enc.col_map = block_column_map(config_.d_img, e * sig, sig, config_.d_routed, rng);
        routed_.push_back(std::move(enc));
    }
}

std::vector<SyntheticInstance> Workload::generate_batch(std::uint64_t seed, int batch_size) const {
    if (batch_size < 1) throw ContractError("generate_batch: batch_size must be >= 1");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> expert_dist(0, config_.num_experts - 1);
    std::uniform_int_distribution<int> label_dist(0, config_.num_classes - 1);
    std::normal_distribution<double> noise(0.0, 1.0);

    const int sig = config_.signal_dim();
    const int tag_start = config_.num_experts * sig;
    const double nl = config_.noise_level;
    // Planted directions sit well above the structural noise floor so the
    // label is learnable from few correctly routed examples.
    constexpr double kSignalGain = 3.0;

    std::vector<SyntheticInstance> batch;
    batch.reserve(static_cast<std::size_t>(batch_size));
    for (int b = 0; b < batch_size; ++b) {
        SyntheticInstance inst;
        inst.planted_expert = expert_dist(rng);
        inst.label = label_dist(rng);
        const auto& mu = codebook_[static_cast<std::size_t>(inst.label)];
        const auto& tau = expert_tags_[static_cast<std::size_t>(inst.planted_expert)];
        const auto& rho = prompt_families_[static_cast<std::size_t>(inst.planted_expert)];

        std::vector<double> img(static_cast<std::size_t>(config_.n_img) * config_.d_img);
        for (int r = 0; r < config_.n_img; ++r) {
            for (int c = 0; c < config_.d_img; ++c) {
                double v;
                if (c >= tag_start) {
                    v = kSignalGain * tau[static_cast<std::size_t>(c - tag_start)] + nl * noise(rng);
                } else if (c / sig == inst.planted_expert) {
                    v = kSignalGain * mu[static_cast<std::size_t>(c % sig)] + nl * noise(rng);
                } else {
                    v = noise(rng);  // structural noise: label-free in every other block
                }
                img[static_cast<std::size_t>(r) * config_.d_img + c] = v;
            }
        }
        inst.image_features = ad::leaf({config_.n_img, config_.d_img}, std::move(img));

        std::vector<double> prompt(static_cast<std::size_t>(config_.n_text) * config_.d_text);
        for (int r = 0; r < config_.n_text; ++r)
            for (int c = 0; c < config_.d_text; ++c)
                prompt[static_cast<std::size_t>(r) * config_.d_text + c] =
                    kSignalGain * rho[static_cast<std::size_t>(c)] + nl * noise(rng);
        inst.prompt_embedding = ad::leaf({config_.n_text, config_.d_text}, std::move(prompt));

        batch.push_back(std::move(inst));
    }
    return batch;
}

std::vector<SyntheticInstance> tile_pseudo_batch(const SyntheticInstance& instance, int tile_count) {
    if (tile_count < 1) throw ContractError("tile_pseudo_batch: tile_count must be >= 1");
    if (tile_count == 1) return {instance};
    const int n_rows = instance.image_features.shape()[0];
    const int d = instance.image_features.shape()[1];
    if (tile_count > n_rows) {
        throw ContractError("tile_pseudo_batch: tile_count " + std::to_string(tile_count) +
                            " exceeds image rows " + std::to_string(n_rows));
    }
    const int rows_per_tile = (n_rows + tile_count - 1) / tile_count;
    const auto& src = instance.image_features.value();

    std::vector<SyntheticInstance> tiles;
    tiles.reserve(static_cast<std::size_t>(tile_count));
    for (int t = 0; t < tile_count; ++t) {
        std::vector<double> rows(static_cast<std::size_t>(rows_per_tile) * d);
        const int base = t * rows_per_tile;
        for (int r = 0; r < rows_per_tile; ++r) {
            // Rows past the end repeat the final available row.
            const int src_row = std::min(base + r, n_rows - 1);
            for (int c = 0; c < d; ++c)
                rows[static_cast<std::size_t>(r) * d + c] = src[static_cast<std::size_t>(src_row) * d + c];
        }
        SyntheticInstance tile;
        tile.image_features = ad::leaf({rows_per_tile, d}, std::move(rows));
        tile.prompt_embedding = instance.prompt_embedding;
        tile.label = instance.label;
        tile.planted_expert = instance.planted_expert;
        tiles.push_back(std::move(tile));
    }
    return tiles;
}

void write_batch_records(std::ostream& out, const std::vector<SyntheticInstance>& batch) {
    for (const SyntheticInstance& inst : batch) {
        nlohmann::json rec;
        rec["label"] = inst.label;
        rec["planted_expert"] = inst.planted_expert;
        rec["image_features"] = {{"shape", inst.image_features.shape()},
                                 {"data", inst.image_features.value()}};
        rec["prompt_embedding"] = {{"shape", inst.prompt_embedding.shape()},
                                   {"data", inst.prompt_embedding.value()}};
        out << rec.dump() << "\n";
    }
}

}  // namespace moenc
