#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "moenc/trainer.hpp"

namespace moenc {

// Versioned container of every parameter tensor plus the config that built
// them. The binary layout is a self-describing JSON header followed by
// little-endian 64-bit float payloads; save/load round-trips are bitwise.
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    TrainConfig config;
    std::int64_t step = 0;
    std::vector<std::pair<std::string, ad::Var>> tensors;

    static Checkpoint from_model(const Model& model, std::int64_t step);
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Rebuilds a model from checkpointed tensors; every named tensor must exist
// with the exact recorded shape.
Model model_from_checkpoint(const Checkpoint& ckpt);

// Guards a checkpoint against an incompatible run configuration (e.g. a
// different expert pool size).
void check_checkpoint_compatible(const Checkpoint& ckpt, const TrainConfig& config);

}  // namespace moenc
