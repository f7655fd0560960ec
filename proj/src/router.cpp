#include "moenc/router.hpp"

#include <cmath>
#include <random>

namespace moenc {

namespace {

constexpr double kOutputInitScale = 0.5;

ad::Var gaussian_leaf(std::vector<int> shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> data(static_cast<std::size_t>(ad::shape_size(shape)));
    for (double& x : data) x = dist(rng);
    return ad::leaf(std::move(shape), std::move(data), /*requires_grad=*/true);
}

// Scaled dot-product attention for one head; queries [n_q, d], keys/values
// projected from the same source. Softmax runs along the key axis.
ad::Var attention_head(ad::Tape& t, const ad::Var& queries, const ad::Var& source, const ad::Var& wq,
                       const ad::Var& wk, const ad::Var& wv) {
    ad::Var q = t.matmul(queries, wq);
    ad::Var k = t.matmul(source, wk);
    ad::Var v = t.matmul(source, wv);
    const int head_dim = wq.shape()[1];
    ad::Var scores = t.scale(t.matmul(q, t.transpose(k)), 1.0 / std::sqrt(static_cast<double>(head_dim)));
    ad::Var weights = t.softmax(scores, /*axis=*/1);
    return t.matmul(weights, v);
}

ad::Var attention_logits(ad::Tape& t, const RouterParams& p, const ad::Var& queries,
                         const ad::Var& source) {
    std::vector<ad::Var> heads;
    heads.reserve(p.w_query.size());
    for (std::size_t h = 0; h < p.w_query.size(); ++h) {
        heads.push_back(attention_head(t, queries, source, p.w_query[h], p.w_key[h], p.w_value[h]));
    }
    ad::Var out = t.concat(heads, /*axis=*/1);       // [n_q, d_router]
    ad::Var pooled = t.mean_axis(out, /*axis=*/0);   // [d_router]
    return t.add(t.vecmat(pooled, p.w_out), p.b_out);
}

}  // namespace

std::string to_string(RouterVariant v) {
    switch (v) {
        case RouterVariant::cross_attention: return "ca";
        case RouterVariant::self_attention: return "sa";
        case RouterVariant::mlp: return "mlp";
    }
    return "?";
}

RouterVariant router_variant_from_string(const std::string& s) {
    if (s == "ca" || s == "cross_attention") return RouterVariant::cross_attention;
    if (s == "sa" || s == "self_attention") return RouterVariant::self_attention;
    if (s == "mlp") return RouterVariant::mlp;
    throw ConfigError("unknown router variant '" + s + "' (expected ca, sa, or mlp)");
}

void RouterConfig::validate() const {
    if (num_experts < 2) throw ConfigError("router: num_experts must be >= 2");
    if (d_router <= 0 || num_heads <= 0 || d_router % num_heads != 0) {
        throw ConfigError("router: d_router must be positive and divisible by num_heads");
    }
    if (d_text <= 0 || d_shared <= 0) throw ConfigError("router: feature dimensions must be positive");
}

RouterParams RouterParams::init(const RouterConfig& config, std::uint64_t seed) {
    config.validate();
    RouterParams p;
    p.config = config;
    std::mt19937_64 rng(seed);
    const int hd = config.head_dim();
    if (config.variant == RouterVariant::mlp) {
        p.w_hidden = gaussian_leaf({config.d_shared, config.d_router},
                                   1.0 / std::sqrt(static_cast<double>(config.d_shared)), rng);
        p.b_hidden = ad::zeros({config.d_router}, /*requires_grad=*/true);
    } else {
        const int d_q_in =
            config.variant == RouterVariant::cross_attention ? config.d_text : config.d_shared;
        for (int h = 0; h < config.num_heads; ++h) {
            p.w_query.push_back(
                gaussian_leaf({d_q_in, hd}, 1.0 / std::sqrt(static_cast<double>(d_q_in)), rng));
            p.w_key.push_back(
                gaussian_leaf({config.d_shared, hd}, 1.0 / std::sqrt(static_cast<double>(config.d_shared)), rng));
            p.w_value.push_back(
                gaussian_leaf({config.d_shared, hd}, 1.0 / std::sqrt(static_cast<double>(config.d_shared)), rng));
        }
    }
    // Small random values rather than zeros: exact zero logits tie every
    // instance to expert 0 through the deterministic tie-break, and the
    // confidence losses then amplify that into collapse before the task loss
    // can differentiate the experts.
    p.w_out = gaussian_leaf({config.d_router, config.num_experts},
                            kOutputInitScale / std::sqrt(static_cast<double>(config.d_router)), rng);
    p.b_out = ad::zeros({config.num_experts}, /*requires_grad=*/true);
    return p;
}

std::vector<std::pair<std::string, ad::Var>> RouterParams::named_parameters() const {
    std::vector<std::pair<std::string, ad::Var>> out;
    for (std::size_t h = 0; h < w_query.size(); ++h) {
        const std::string idx = std::to_string(h);
        out.emplace_back("router.w_query." + idx, w_query[h]);
        out.emplace_back("router.w_key." + idx, w_key[h]);
        out.emplace_back("router.w_value." + idx, w_value[h]);
    }
    if (w_hidden.valid()) {
        out.emplace_back("router.w_hidden", w_hidden);
        out.emplace_back("router.b_hidden", b_hidden);
    }
    out.emplace_back("router.w_out", w_out);
    out.emplace_back("router.b_out", b_out);
    return out;
}

std::vector<ad::Var> RouterParams::parameters() const {
    std::vector<ad::Var> out;
    for (const auto& [name, v] : named_parameters()) out.push_back(v);
    return out;
}

ad::Var route_cross_attention(ad::Tape& tape, const RouterParams& params, const RouterInput& input) {
    if (!input.text_embedding.has_value()) {
        throw ConfigError("cross-attention router requires a text embedding; use the sa or mlp variant "
                          "for image-only routing");
    }
    return attention_logits(tape, params, *input.text_embedding, input.shared_features);
}

ad::Var route_self_attention(ad::Tape& tape, const RouterParams& params, const RouterInput& input) {
    return attention_logits(tape, params, input.shared_features, input.shared_features);
}

ad::Var route_mlp(ad::Tape& tape, const RouterParams& params, const RouterInput& input) {
    ad::Var pooled = tape.mean_axis(input.shared_features, /*axis=*/0);  // [d_shared]
    ad::Var hidden = tape.tanh(tape.add(tape.vecmat(pooled, params.w_hidden), params.b_hidden));
    return tape.add(tape.vecmat(hidden, params.w_out), params.b_out);
}

ad::Var route(ad::Tape& tape, const RouterParams& params, const RouterInput& input) {
    switch (params.config.variant) {
        case RouterVariant::cross_attention: return route_cross_attention(tape, params, input);
        case RouterVariant::self_attention: return route_self_attention(tape, params, input);
        case RouterVariant::mlp: return route_mlp(tape, params, input);
    }
    throw ConfigError("route: unhandled router variant");
}

ad::Var instance_distribution(ad::Tape& tape, const ad::Var& z) {
    return tape.softmax(z, /*axis=*/0);
}

}  // namespace moenc
