#include "moenc/objective.hpp"

#include <cmath>

namespace moenc {

namespace {

void check_logits(const ad::Var& z, const char* op) {
    if (z.rank() != 2) {
        throw ShapeError(std::string(op) + ": logit matrix must be rank-2 [K, B], got " +
                         ad::shape_str(z.shape()));
    }
    if (z.shape()[0] < 2) {
        throw ContractError(std::string(op) + ": need at least 2 encoders, got K=" +
                            std::to_string(z.shape()[0]));
    }
    for (double v : z.value()) {
        if (!std::isfinite(v)) throw ContractError(std::string(op) + ": non-finite routing logit");
    }
}

}  // namespace

void LossWeights::validate() const {
    if (lambda_ba < 0 || lambda_be < 0 || lambda_ie < 0 || lambda_ia < 0) {
        throw ConfigError("loss weights must be nonnegative");
    }
}

LossValues LossBreakdown::values() const {
    return {lm.scalar(), ba.scalar(), be.scalar(), ie.scalar(), ia.scalar(), total.scalar()};
}

ad::Var batch_entropy_loss(ad::Tape& t, const ad::Var& z_matrix) {
    check_logits(z_matrix, "batch_entropy_loss");
    const int batch = z_matrix.shape()[1];
    if (batch < 2) {
        throw ContractError("batch_entropy_loss: undefined for B=1 (log B = 0); tile the instance into "
                            "a pseudo-batch first");
    }
    ad::Var p = t.softmax(z_matrix, /*axis=*/1);
    ad::Var plogp = t.mul(p, t.log_eps(p));
    ad::Var row_entropy = t.neg(t.sum_axis(plogp, /*axis=*/1));  // [K]
    ad::Var h_batch = t.mean(row_entropy);
    return t.scale(h_batch, -1.0 / std::log(static_cast<double>(batch)));
}

ad::Var batch_aux_loss(ad::Tape& t, const ad::Var& z_matrix) {
    check_logits(z_matrix, "batch_aux_loss");
    ad::Var p = t.softmax(z_matrix, /*axis=*/1);
    ad::AxisMax peak = t.max_axis(p, /*axis=*/1);  // per-encoder largest batch probability
    return t.sum(peak.values);
}

ad::Var instance_entropy_loss(ad::Tape& t, const ad::Var& z_matrix) {
    check_logits(z_matrix, "instance_entropy_loss");
    const int experts = z_matrix.shape()[0];
    ad::Var q = t.softmax(z_matrix, /*axis=*/0);
    ad::Var qlogq = t.mul(q, t.log_eps(q));
    ad::Var col_entropy = t.neg(t.sum_axis(qlogq, /*axis=*/0));  // [B]
    ad::Var h_instance = t.mean(col_entropy);
    return t.scale(h_instance, 1.0 / std::log(static_cast<double>(experts)));
}

ad::Var instance_aux_loss(ad::Tape& t, const ad::Var& z_matrix) {
    check_logits(z_matrix, "instance_aux_loss");
    ad::Var q = t.softmax(z_matrix, /*axis=*/0);
    ad::AxisMax peak = t.max_axis(q, /*axis=*/0);  // per-instance top-1 confidence
    return t.neg(t.sum(peak.values));
}

LossBreakdown total_loss(ad::Tape& t, const ad::Var& lm, const ad::Var& z_matrix,
                         const LossWeights& weights) {
    weights.validate();
    if (!lm.node()->is_scalar()) {
        throw ContractError("total_loss: task loss must be a scalar");
    }
    LossBreakdown b;
    b.lm = lm;
    b.ba = batch_aux_loss(t, z_matrix);
    b.be = batch_entropy_loss(t, z_matrix);
    b.ie = instance_entropy_loss(t, z_matrix);
    b.ia = instance_aux_loss(t, z_matrix);
    ad::Var total = t.add(lm, t.scale(b.ba, weights.lambda_ba));
    total = t.add(total, t.scale(b.be, weights.lambda_be));
    total = t.add(total, t.scale(b.ie, weights.lambda_ie));
    total = t.add(total, t.scale(b.ia, weights.lambda_ia));
    b.total = total;
    return b;
}

}  // namespace moenc
