#pragma once

#include "moenc/autodiff.hpp"

namespace moenc {

// Nonnegative coefficients for the four routing regularizers. Defaults are
// the best-average row of the weight sweep.
struct LossWeights {
    double lambda_ba = 0.2;
    double lambda_be = 0.2;
    double lambda_ie = 0.6;
    double lambda_ia = 0.6;

    void validate() const;
};

struct LossValues {
    double lm = 0.0;
    double ba = 0.0;
    double be = 0.0;
    double ie = 0.0;
    double ia = 0.0;
    double total = 0.0;
};

// The five terms of the combined objective, kept as graph nodes so the total
// stays differentiable through Z.
struct LossBreakdown {
    ad::Var lm, ba, be, ie, ia, total;
    LossValues values() const;
};

// All four losses consume the logit matrix Z of shape [K, B] (encoders by
// instances). K must be >= 2; batch entropy additionally needs B >= 2.

// L_be = -H_batch / log B, where H_batch averages per-encoder entropies of
// the across-batch softmax. In [-1, 0]; minimized at uniform batch usage.
ad::Var batch_entropy_loss(ad::Tape& tape, const ad::Var& z_matrix);

// L_ba = sum_i max_j p_i^(j): the largest across-batch probability of each
// encoder, argmax selector under stop-gradient. In [K/B, K].
ad::Var batch_aux_loss(ad::Tape& tape, const ad::Var& z_matrix);

// L_ie = H_instance / log K, averaging per-instance entropies of the
// across-encoder softmax. In [0, 1]; minimized by sharp decisions.
ad::Var instance_entropy_loss(ad::Tape& tape, const ad::Var& z_matrix);

// L_ia = -sum_j max_i q_i^(j): rewards instance-level top-1 confidence,
// selector under stop-gradient. In [-B, -B/K].
ad::Var instance_aux_loss(ad::Tape& tape, const ad::Var& z_matrix);

// total = lm + lambda_ba*ba + lambda_be*be + lambda_ie*ie + lambda_ia*ia,
// composed left to right in exactly that order.
LossBreakdown total_loss(ad::Tape& tape, const ad::Var& lm, const ad::Var& z_matrix,
                         const LossWeights& weights);

}  // namespace moenc
