#include "moenc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace moenc {

namespace {

enum SeedStream : std::uint64_t {
    kWorkloadStructure = 11,
    kRouterInit = 12,
    kConnectorBase = 13,
    kHeadInit = 14,
    kBatchBase = 1000000,
    kEvalSet = 15,
};

// Decoupled-weight-decay Adam with bias correction.
class AdamW {
public:
    AdamW(std::size_t num_params, double beta1, double beta2, double weight_decay, double eps)
        : beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps), m_(num_params), v_(num_params) {}

    void step(std::span<const ad::Var> params, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t p = 0; p < params.size(); ++p) {
            auto& value = params[p].node()->value;
            auto& grad = params[p].node()->grad;
            auto& m = m_[p];
            auto& v = v_[p];
            if (m.size() != value.size()) {
                m.assign(value.size(), 0.0);
                v.assign(value.size(), 0.0);
            }
            if (grad.size() != value.size()) continue;  // no gradient this step
            for (std::size_t i = 0; i < value.size(); ++i) {
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * grad[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * grad[i] * grad[i];
                const double m_hat = m[i] / bc1;
                const double v_hat = v[i] / bc2;
                value[i] -= lr * (m_hat / (std::sqrt(v_hat) + eps_) + weight_decay_ * value[i]);
            }
        }
    }

private:
    double beta1_, beta2_, weight_decay_, eps_;
    std::int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

double learning_rate_at(const TrainConfig& cfg, int step) {
    if (cfg.schedule == LrSchedule::constant) return cfg.learning_rate;
    // Cosine decay from the peak to a 10% floor over the run.
    const double floor = 0.1 * cfg.learning_rate;
    const double progress =
        cfg.steps > 1 ? static_cast<double>(step) / static_cast<double>(cfg.steps - 1) : 0.0;
    return floor + (cfg.learning_rate - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

RouterInput make_router_input(ad::Tape& tape, const Model& model, const SyntheticInstance& inst) {
    RouterInput input;
    input.shared_features = model.workload.shared_encoder().apply(tape, inst.image_features);
    if (model.config.router == RouterVariant::cross_attention) {
        input.text_embedding = inst.prompt_embedding;
    }
    return input;
}

std::vector<SyntheticInstance> effective_batch(const Model& model,
                                               std::vector<SyntheticInstance> batch) {
    if (model.config.tile_count <= 1) return batch;
    std::vector<SyntheticInstance> tiled;
    for (const SyntheticInstance& inst : batch) {
        auto tiles = tile_pseudo_batch(inst, model.config.tile_count);
        tiled.insert(tiled.end(), tiles.begin(), tiles.end());
    }
    return tiled;
}

}  // namespace

std::string to_string(LrSchedule s) {
    return s == LrSchedule::cosine ? "cosine" : "constant";
}

LrSchedule schedule_from_string(const std::string& s) {
    if (s == "cosine") return LrSchedule::cosine;
    if (s == "constant") return LrSchedule::constant;
    throw ConfigError("unknown schedule '" + s + "' (expected cosine or constant)");
}

RouterConfig TrainConfig::router_config() const {
    RouterConfig rc;
    rc.num_experts = workload.num_experts;
    rc.d_router = d_router;
    rc.num_heads = num_heads;
    rc.variant = router;
    rc.d_text = workload.d_text;
    rc.d_shared = workload.d_shared;
    return rc;
}

void TrainConfig::validate() const {
    if (steps < 0) throw ConfigError("train: steps must be >= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (learning_rate <= 0) throw ConfigError("train: learning_rate must be > 0");
    if (tile_count < 1) throw ConfigError("train: tile_count must be >= 1");
    if (eval_size < 1) throw ConfigError("train: eval_size must be >= 1");
    if (batch_size * tile_count < 2) {
        throw ConfigError("train: batch_size 1 needs tile_count >= 2 so the batch losses are defined");
    }
    weights.validate();
    workload.validate();
    router_config().validate();
}

TrainingDiverged::TrainingDiverged(int step_, const LossValues& last)
    : Error("training diverged at step " + std::to_string(step_) + "; last finite breakdown: lm=" +
            std::to_string(last.lm) + " ba=" + std::to_string(last.ba) + " be=" + std::to_string(last.be) +
            " ie=" + std::to_string(last.ie) + " ia=" + std::to_string(last.ia) +
            " total=" + std::to_string(last.total)),
      step(step_),
      last_finite(last) {}

Model Model::init(const TrainConfig& config) {
    config.validate();
    Model m{config,
            Workload(config.workload, split_seed(config.seed, kWorkloadStructure)),
            RouterParams::init(config.router_config(), split_seed(config.seed, kRouterInit)),
            {},
            TaskHead::init(config.workload.d_shared, config.workload.num_classes,
                           split_seed(config.seed, kHeadInit))};
    for (int i = 0; i < config.workload.num_experts; ++i) {
        // Identical initial values across connectors (they remain independent
        // parameters): early routing gradients through the selected expert's
        // connector then mean the same thing for every candidate expert.
        m.connectors.push_back(Connector::init(config.workload.d_routed, config.workload.d_shared,
                                               split_seed(config.seed, kConnectorBase)));
    }
    return m;
}

std::vector<ad::Var> Model::trainable_parameters() const {
    std::vector<ad::Var> out = router.parameters();
    for (const Connector& c : connectors) {
        out.push_back(c.weight);
        out.push_back(c.bias);
    }
    out.push_back(head.weight);
    out.push_back(head.bias);
    return out;
}

std::vector<std::pair<std::string, ad::Var>> Model::named_tensors() const {
    std::vector<std::pair<std::string, ad::Var>> out = router.named_parameters();
    for (std::size_t i = 0; i < connectors.size(); ++i) {
        out.emplace_back("connector." + std::to_string(i) + ".weight", connectors[i].weight);
        out.emplace_back("connector." + std::to_string(i) + ".bias", connectors[i].bias);
    }
    out.emplace_back("head.weight", head.weight);
    out.emplace_back("head.bias", head.bias);
    out.emplace_back("encoder.shared.col_map", workload.shared_encoder().col_map);
    for (int i = 0; i < workload.num_experts(); ++i) {
        out.emplace_back("encoder.routed." + std::to_string(i) + ".col_map",
                         workload.routed_encoder(i).col_map);
    }
    return out;
}

std::vector<SyntheticInstance> make_eval_set(const Model& model) {
    return model.workload.generate_batch(split_seed(model.config.seed, kEvalSet), model.config.eval_size);
}

TrainResult train(const TrainConfig& config, const StepObserver& observer) {
    config.validate();
    Model model = Model::init(config);
    const std::vector<ad::Var> params = model.trainable_parameters();
    AdamW optimizer(params.size(), config.beta1, config.beta2, config.weight_decay, config.eps_opt);

    std::vector<LossValues> history;
    history.reserve(static_cast<std::size_t>(config.steps));
    LossValues last_finite{};

    const int experts = config.workload.num_experts;
    for (int step = 0; step < config.steps; ++step) {
        auto batch = effective_batch(
            model, model.workload.generate_batch(split_seed(config.seed, kBatchBase + step),
                                                 config.batch_size));
        ad::Tape tape;
        std::vector<ad::Var> logit_columns;
        std::vector<ad::Var> task_losses;
        logit_columns.reserve(batch.size());
        for (const SyntheticInstance& inst : batch) {
            RouterInput input = make_router_input(tape, model, inst);
            ExpertEval experts_fn = [&](ad::Tape& t, int i) {
                return model.workload.routed_encoder(i).apply(t, inst.image_features);
            };
            ForwardResult fwd = forward_training(tape, model.router, input, experts_fn,
                                                 model.connectors, config.mix_weighting);
            task_losses.push_back(surrogate_task_loss(tape, model.head, fwd.fused.v_final, inst.label));
            logit_columns.push_back(tape.reshape(fwd.z, {experts, 1}));
        }
        ad::Var z_matrix = tape.concat(logit_columns, /*axis=*/1);
        ad::Var lm = task_losses[0];
        for (std::size_t i = 1; i < task_losses.size(); ++i) lm = tape.add(lm, task_losses[i]);
        lm = tape.scale(lm, 1.0 / static_cast<double>(task_losses.size()));

        for (double v : z_matrix.value()) {
            if (!std::isfinite(v)) throw TrainingDiverged(step, last_finite);
        }
        LossBreakdown breakdown = total_loss(tape, lm, z_matrix, config.weights);
        const LossValues values = breakdown.values();
        if (!std::isfinite(values.total)) throw TrainingDiverged(step, last_finite);
        last_finite = values;
        history.push_back(values);

        ad::zero_grad(params);
        tape.backward(breakdown.total);
        const double lr = learning_rate_at(config, step);
        optimizer.step(params, lr);
        if (observer) observer(step, values, lr);
    }

    TrainResult result{std::move(model), {}};
    result.stats = evaluate_routing(result.model, make_eval_set(result.model));
    result.stats.history = std::move(history);
    return result;
}

RoutingStats evaluate_routing(const Model& model, const std::vector<SyntheticInstance>& eval_set) {
    if (eval_set.empty()) throw ContractError("evaluate_routing: empty eval set");
    const int experts = model.workload.num_experts();
    RoutingStats stats;
    stats.selection_counts.assign(static_cast<std::size_t>(experts), 0);

    auto tiled = effective_batch(model, eval_set);
    std::int64_t recovered = 0;
    std::int64_t correct_class = 0;
    for (const SyntheticInstance& inst : tiled) {
        ad::Tape tape;
        RouterInput input = make_router_input(tape, model, inst);
        int calls = 0;
        ExpertEval experts_fn = [&](ad::Tape& t, int i) {
            return model.workload.routed_encoder(i).apply(t, inst.image_features);
        };
        ForwardResult fwd = forward_inference(tape, model.router, input, experts_fn, model.connectors,
                                              model.config.mix_weighting, &calls);
        if (calls != 1) {
            throw ContractError("evaluate_routing: expected exactly 1 routed-encoder call, saw " +
                                std::to_string(calls));
        }
        ++stats.selection_counts[static_cast<std::size_t>(fwd.fused.selected_index)];
        if (fwd.fused.selected_index == inst.planted_expert) ++recovered;
        ad::Var logits = task_logits(tape, model.head, fwd.fused.v_final);
        if (select_top1(logits) == inst.label) ++correct_class;
    }

    const double n = static_cast<double>(tiled.size());
    stats.frequencies.resize(static_cast<std::size_t>(experts));
    for (int i = 0; i < experts; ++i)
        stats.frequencies[static_cast<std::size_t>(i)] =
            static_cast<double>(stats.selection_counts[static_cast<std::size_t>(i)]) / n;
    stats.range_gap = range_gap_from_counts(stats.selection_counts);
    stats.expert_recovery_accuracy = static_cast<double>(recovered) / n;
    stats.task_accuracy = static_cast<double>(correct_class) / n;
    return stats;
}

double range_gap_from_counts(std::span<const std::int64_t> counts) {
    if (counts.empty()) throw ContractError("range_gap_from_counts: no experts");
    std::int64_t total = 0;
    for (std::int64_t c : counts) total += c;
    if (total == 0) throw ContractError("range_gap_from_counts: no selections recorded");
    const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
    return 100.0 * (static_cast<double>(*hi) - static_cast<double>(*lo)) / static_cast<double>(total);
}

std::vector<SweepRow> sweep_lambdas(const TrainConfig& base, std::span<const LossWeights> grid) {
    if (grid.empty()) throw ContractError("sweep_lambdas: empty grid");
    std::vector<SweepRow> rows;
    rows.reserve(grid.size());
    for (const LossWeights& w : grid) {
        TrainConfig cfg = base;
        cfg.weights = w;
        TrainResult r = train(cfg);
        rows.push_back({w, r.stats.task_accuracy, r.stats.range_gap});
    }
    return rows;
}

}  // namespace moenc
