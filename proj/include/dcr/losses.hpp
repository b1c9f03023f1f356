#pragma once

// Training objectives. Each loss returns the per-batch sum over labelled
// rows as a 1x1 tensor; the training loop divides by the row count.

#include "dcr/autograd.hpp"
#include "dcr/model.hpp"

namespace dcr::loss {

using ag::Tensor;
using ag::Vector;

// -sum [y ln s(x) + (1 - y) ln(1 - s(x))]
Tensor bce(const Tensor& scores, const Vector& labels);

Tensor loss_main(const model::BatchOutputs& out, const Vector& labels);
Tensor loss_item(const model::BatchOutputs& out, const Vector& labels);
Tensor loss_conformity(const model::BatchOutputs& out, const Vector& labels);
// -sum [ y / theta+ ln s(y_int) + (1 - y) / theta- ln(1 - s(y_int)) ].
// Propensities below `min_propensity` violate the precondition and throw.
Tensor loss_interest_ipw(const Tensor& interest_scores, const Vector& labels,
                         const Vector& theta_pos, const Vector& theta_neg,
                         double min_propensity = 1e-3);
Tensor loss_interest_ipw(const model::BatchOutputs& out, const Vector& labels,
                         const Vector& theta_pos, const Vector& theta_neg,
                         double min_propensity = 1e-3);

// Mean over rows of |cos(a_r, b_r)|; zero-norm rows contribute 0.
Tensor loss_orthogonality(const Tensor& a, const Tensor& b);

// sum_k w_k * -ln s(pos_k - neg_k)
Tensor bpr_pairwise(const Tensor& pos, const Tensor& neg, const Vector& weight);
Tensor bpr_pairwise(const Tensor& pos, const Tensor& neg);

// Labelled rows of one batch: the first `pairs` rows are positives and the
// next `pairs` rows their sampled negatives.
struct LabelledBatch {
  Vector labels;
  Vector theta_pos;  // propensity of the row's item
  Vector theta_neg;
  Eigen::Index pairs = 0;
  double min_propensity = 1e-3;
};

// Batch-mean loss components; undefined tensors mean "not used by this mode".
struct LossComponents {
  Tensor main, interest, conformity, item, user, ortho_user, ortho_item;
  Tensor total;
};

// Combines already-computed components:
//   main + alpha (interest + conformity) + beta item + gamma (ortho_user + ortho_item)
// with alpha forced to 0 for var1; MACR uses main + alpha user + beta item.
Tensor loss_total(const LossComponents& parts, const model::LossWeights& weights,
                  model::Mode mode);

LossComponents compute_losses(model::Mode mode, const model::BatchOutputs& out,
                              const LabelledBatch& batch, const model::LossWeights& weights);

}  // namespace dcr::loss
