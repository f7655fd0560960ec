#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "moenc/autodiff.hpp"

namespace moenc {

enum class RouterVariant { cross_attention, self_attention, mlp };

std::string to_string(RouterVariant v);
RouterVariant router_variant_from_string(const std::string& s);

struct RouterConfig {
    int num_experts = 4;  // K
    int d_router = 256;   // internal attention width
    int num_heads = 4;
    RouterVariant variant = RouterVariant::cross_attention;
    int d_text = 32;    // D_T of incoming text embeddings
    int d_shared = 32;  // D_S of incoming shared visual features

    int head_dim() const { return d_router / num_heads; }
    void validate() const;
};

struct RouterInput {
    std::optional<ad::Var> text_embedding;  // N_T x D_T, queries for cross-attention
    ad::Var shared_features;                // N_S x D_S
};

// Learned weights. Attention projections are stored per head; concatenating
// the per-head outputs reconstructs the full d_router-wide attention output.
// The final logit layer starts at zero so training begins at the uniform
// routing distribution.
struct RouterParams {
    RouterConfig config;
    std::vector<ad::Var> w_query;  // per head: [d_q_in, head_dim]
    std::vector<ad::Var> w_key;    // per head: [d_shared, head_dim]
    std::vector<ad::Var> w_value;  // per head: [d_shared, head_dim]
    ad::Var w_hidden;              // mlp: [d_shared, d_router]
    ad::Var b_hidden;              // mlp: [d_router]
    ad::Var w_out;                 // [d_router, K], zero-initialized
    ad::Var b_out;                 // [K], zero-initialized

    static RouterParams init(const RouterConfig& config, std::uint64_t seed);
    std::vector<std::pair<std::string, ad::Var>> named_parameters() const;
    std::vector<ad::Var> parameters() const;
};

// Routing logits z in R^K, one of three variants.
ad::Var route_cross_attention(ad::Tape& tape, const RouterParams& params, const RouterInput& input);
ad::Var route_self_attention(ad::Tape& tape, const RouterParams& params, const RouterInput& input);
ad::Var route_mlp(ad::Tape& tape, const RouterParams& params, const RouterInput& input);
ad::Var route(ad::Tape& tape, const RouterParams& params, const RouterInput& input);

// Per-instance distribution over experts: softmax of z along the expert axis.
ad::Var instance_distribution(ad::Tape& tape, const ad::Var& z);

}  // namespace moenc
