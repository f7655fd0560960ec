#include "moenc/fusion.hpp"

#include <cmath>
#include <random>

namespace moenc {

Connector Connector::init(int d_routed, int d_shared, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(d_routed)));
    std::vector<double> w(static_cast<std::size_t>(d_routed) * d_shared);
    for (double& x : w) x = dist(rng);
    Connector c;
    c.weight = ad::leaf({d_routed, d_shared}, std::move(w), /*requires_grad=*/true);
    c.bias = ad::zeros({d_shared}, /*requires_grad=*/true);
    return c;
}

int select_top1(std::span<const double> scores) {
    if (scores.empty()) throw ContractError("select_top1: empty score vector");
    int best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] > scores[best]) best = static_cast<int>(i);
    }
    return best;
}

int select_top1(const ad::Var& scores) {
    return select_top1(std::span<const double>(scores.value()));
}

ad::Var ste_mix(ad::Tape& tape, const ad::Var& weights, const std::vector<ad::Var>& outputs, int k) {
    if (outputs.empty()) throw ContractError("ste_mix: empty expert output list");
    if (weights.rank() != 1 || weights.shape()[0] != static_cast<int>(outputs.size())) {
        throw ShapeError("ste_mix: weight vector " + ad::shape_str(weights.shape()) + " does not match " +
                         std::to_string(outputs.size()) + " expert outputs");
    }
    if (k < 0 || k >= static_cast<int>(outputs.size())) {
        throw ContractError("ste_mix: selected index " + std::to_string(k) + " out of range");
    }
    const std::vector<int>& shape = outputs[0].shape();
    for (const ad::Var& o : outputs) {
        if (o.shape() != shape) {
            throw ConfigError("ste_mix: expert output shapes disagree (" + ad::shape_str(shape) + " vs " +
                              ad::shape_str(o.shape()) +
                              "); add per-expert shape adapters before mixing");
        }
    }

    // Hard forward path, bitwise: w_k * V_k.
    const double wk = weights.value()[static_cast<std::size_t>(k)];
    std::vector<double> value(outputs[k].value().size());
    for (std::size_t i = 0; i < value.size(); ++i) value[i] = wk * outputs[k].value()[i];

    std::vector<ad::Var> inputs;
    inputs.reserve(outputs.size() + 1);
    inputs.push_back(weights);
    for (const ad::Var& o : outputs) inputs.push_back(o);

    const int num_experts = static_cast<int>(outputs.size());
    return tape.custom(shape, std::move(value), std::move(inputs), [num_experts](ad::Node& node) {
        // Soft-mixture backward: d/dV_i = w_i * g, d/dw_i = <g, V_i>.
        ad::Node& w = *node.inputs[0];
        for (int i = 0; i < num_experts; ++i) {
            ad::Node& out = *node.inputs[static_cast<std::size_t>(i) + 1];
            if (out.requires_grad) {
                out.ensure_grad();
                const double wi = w.value[i];
                for (std::size_t t = 0; t < node.grad.size(); ++t) out.grad[t] += wi * node.grad[t];
            }
            if (w.requires_grad) {
                w.ensure_grad();
                double acc = 0.0;
                for (std::size_t t = 0; t < node.grad.size(); ++t) acc += node.grad[t] * out.value[t];
                w.grad[i] += acc;
            }
        }
    });
}

FusedRepresentation fuse(ad::Tape& tape, const ad::Var& v_shared, const ad::Var& routed,
                         const Connector& connector, int selected_index) {
    if (v_shared.rank() != 2) {
        throw ShapeError("fuse: shared features must be rank-2, got " + ad::shape_str(v_shared.shape()));
    }
    FusedRepresentation out;
    out.selected_index = selected_index;
    if (routed.valid() && routed.shape()[0] > 0) {
        ad::Var projected = tape.add_rowvec(tape.matmul(routed, connector.weight), connector.bias);
        if (projected.shape()[1] != v_shared.shape()[1]) {
            throw ContractError("fuse: connector output width " + std::to_string(projected.shape()[1]) +
                                " does not match shared feature width " +
                                std::to_string(v_shared.shape()[1]));
        }
        out.v_final = tape.concat(v_shared, projected, /*axis=*/0);
    } else {
        // Degenerate empty routed stream: V_final is just V_s.
        out.v_final = tape.reshape(v_shared, v_shared.shape());
    }
    return out;
}

MixWeighting mix_weighting_from_string(const std::string& s) {
    if (s == "softmax") return MixWeighting::softmax_probability;
    if (s == "logit") return MixWeighting::raw_logit;
    throw ConfigError("unknown mix weighting '" + s + "' (expected softmax or logit)");
}

std::string to_string(MixWeighting w) {
    return w == MixWeighting::softmax_probability ? "softmax" : "logit";
}

ForwardResult forward_training(ad::Tape& tape, const RouterParams& router, const RouterInput& input,
                               const ExpertEval& experts, std::span<const Connector> connectors,
                               MixWeighting weighting) {
    ForwardResult r;
    r.z = route(tape, router, input);
    r.q = instance_distribution(tape, r.z);
    const int k = select_top1(r.q);
    std::vector<ad::Var> outputs;
    outputs.reserve(connectors.size());
    for (int i = 0; i < static_cast<int>(connectors.size()); ++i) outputs.push_back(experts(tape, i));
    const ad::Var& w = weighting == MixWeighting::softmax_probability ? r.q : r.z;
    ad::Var mixed = ste_mix(tape, w, outputs, k);
    r.fused = fuse(tape, input.shared_features, mixed, connectors[k], k);
    return r;
}

ForwardResult forward_inference(ad::Tape& tape, const RouterParams& router, const RouterInput& input,
                                const ExpertEval& experts, std::span<const Connector> connectors,
                                MixWeighting weighting, int* expert_calls) {
    ForwardResult r;
    r.z = route(tape, router, input);
    r.q = instance_distribution(tape, r.z);
    const int k = select_top1(r.q);
    ad::Var selected = experts(tape, k);
    if (expert_calls) ++*expert_calls;
    const ad::Var& w = weighting == MixWeighting::softmax_probability ? r.q : r.z;
    // Same arithmetic as the straight-through forward: w_k * V_k.
    ad::Var scaled = tape.scale_var(selected, tape.pick(w, k));
    r.fused = fuse(tape, input.shared_features, scaled, connectors[k], k);
    return r;
}

}  // namespace moenc
