#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "moenc/autodiff.hpp"
#include "moenc/router.hpp"

namespace moenc {

// Per-expert linear map aligning routed features (D_r) to the shared feature
// width (D_S). Connectors are never shared between experts.
struct Connector {
    ad::Var weight;  // [d_routed, d_shared]
    ad::Var bias;    // [d_shared]

    static Connector init(int d_routed, int d_shared, std::uint64_t seed);
};

struct FusedRepresentation {
    ad::Var v_final;  // [(N_S + N_r), d_shared]
    int selected_index = 0;
};

// Index of the largest entry; ties break toward the lowest index.
int select_top1(std::span<const double> scores);
int select_top1(const ad::Var& scores);

// Straight-through top-1 mix: the forward value is exactly w[k] * outputs[k];
// the backward pass carries the gradients of the soft mixture sum_i w[i] *
// outputs[i] into both w and every outputs[i].
ad::Var ste_mix(ad::Tape& tape, const ad::Var& weights, const std::vector<ad::Var>& outputs, int k);

// Connector projection followed by row-wise concatenation with V_s.
FusedRepresentation fuse(ad::Tape& tape, const ad::Var& v_shared, const ad::Var& routed,
                         const Connector& connector, int selected_index);

// Whether the hard path is scaled by the instance-softmax probability q_k or
// by the raw logit z_k. Softmax keeps the routed stream's scale bounded.
enum class MixWeighting { softmax_probability, raw_logit };

MixWeighting mix_weighting_from_string(const std::string& s);
std::string to_string(MixWeighting w);

// Evaluates routed encoder `i` on the current instance.
using ExpertEval = std::function<ad::Var(ad::Tape&, int)>;

struct ForwardResult {
    FusedRepresentation fused;
    ad::Var z;  // routing logits
    ad::Var q;  // instance distribution
};

// Training mode: evaluates every expert and mixes with the straight-through
// estimator so the routing decision stays differentiable.
ForwardResult forward_training(ad::Tape& tape, const RouterParams& router, const RouterInput& input,
                               const ExpertEval& experts, std::span<const Connector> connectors,
                               MixWeighting weighting = MixWeighting::softmax_probability);

// Inference mode: evaluates only the selected expert. `expert_calls`, when
// given, counts routed-encoder evaluations (exactly one per instance).
ForwardResult forward_inference(ad::Tape& tape, const RouterParams& router, const RouterInput& input,
                                const ExpertEval& experts, std::span<const Connector> connectors,
                                MixWeighting weighting = MixWeighting::softmax_probability,
                                int* expert_calls = nullptr);

}  // namespace moenc
