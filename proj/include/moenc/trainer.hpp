#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moenc/fusion.hpp"
#include "moenc/objective.hpp"
#include "moenc/router.hpp"
#include "moenc/workload.hpp"

namespace moenc {

enum class LrSchedule { cosine, constant };

std::string to_string(LrSchedule s);
LrSchedule schedule_from_string(const std::string& s);

struct TrainConfig {
    int steps = 400;
    int batch_size = 16;
    double learning_rate = 1e-3;  // desk-scale peak rate
    double beta1 = 0.95;
    double beta2 = 0.999;
    double weight_decay = 1e-6;
    double eps_opt = 1e-8;
    LrSchedule schedule = LrSchedule::cosine;
    LossWeights weights;
    RouterVariant router = RouterVariant::cross_attention;
    MixWeighting mix_weighting = MixWeighting::softmax_probability;
    std::uint64_t seed = 1;
    int tile_count = 1;
    int d_router = 256;
    int num_heads = 4;
    int eval_size = 512;
    WorkloadConfig workload;

    RouterConfig router_config() const;
    void validate() const;
};

// Liveness stats of the routing decision plus the per-step loss history.
struct RoutingStats {
    std::vector<std::int64_t> selection_counts;
    std::vector<double> frequencies;
    double range_gap = 0.0;  // percentage points between most- and least-used experts
    double expert_recovery_accuracy = 0.0;
    double task_accuracy = 0.0;
    std::vector<LossValues> history;  // filled by train(), empty for pure evaluation
};

// Everything with parameters: the router, per-expert connectors, the task
// head, and the frozen toy encoders living inside the workload.
struct Model {
    TrainConfig config;
    Workload workload;
    RouterParams router;
    std::vector<Connector> connectors;
    TaskHead head;

    static Model init(const TrainConfig& config);
    std::vector<ad::Var> trainable_parameters() const;
    std::vector<std::pair<std::string, ad::Var>> named_tensors() const;
};

// Thrown when the total loss stops being finite.
struct TrainingDiverged : Error {
    TrainingDiverged(int step, const LossValues& last_finite);
    int step;
    LossValues last_finite;
};

struct TrainResult {
    Model model;
    RoutingStats stats;  // final inference-mode evaluation + training history
};

// Step callback: (step index, loss values, learning rate).
using StepObserver = std::function<void(int, const LossValues&, double)>;

TrainResult train(const TrainConfig& config, const StepObserver& observer = nullptr);

RoutingStats evaluate_routing(const Model& model, const std::vector<SyntheticInstance>& eval_set);

// 100 * (max - min) of the selection frequencies implied by the counts.
double range_gap_from_counts(std::span<const std::int64_t> counts);

// The eval set train() scores at the end; regenerating it reproduces the
// training-time final RoutingStats for a saved checkpoint.
std::vector<SyntheticInstance> make_eval_set(const Model& model);

struct SweepRow {
    LossWeights weights;
    double mean_task_accuracy = 0.0;
    double range_gap = 0.0;
};

// One train+evaluate per grid point, all with the base config's seed.
std::vector<SweepRow> sweep_lambdas(const TrainConfig& base, std::span<const LossWeights> grid);

}  // namespace moenc
