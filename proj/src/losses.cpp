#include "dcr/losses.hpp"

#include <numeric>
#include <stdexcept>

namespace dcr::loss {

using model::Mode;

Tensor bce(const Tensor& scores, const Vector& labels) {
  return ag::bce_with_logits(scores, labels);
}

Tensor loss_main(const model::BatchOutputs& out, const Vector& labels) {
  return bce(out.y_train, labels);
}

Tensor loss_item(const model::BatchOutputs& out, const Vector& labels) {
  return bce(out.y_i, labels);
}

Tensor loss_conformity(const model::BatchOutputs& out, const Vector& labels) {
  return bce(out.y_m_con, labels);
}

Tensor loss_interest_ipw(const Tensor& interest_scores, const Vector& labels,
                         const Vector& theta_pos, const Vector& theta_neg,
                         double min_propensity) {
  if (theta_pos.size() != labels.size() || theta_neg.size() != labels.size()) {
    throw std::invalid_argument("loss_interest_ipw: propensity length mismatch");
  }
  for (Eigen::Index r = 0; r < labels.size(); ++r) {
    if (!(theta_pos(r) >= min_propensity) || !(theta_neg(r) >= min_propensity)) {
      throw std::invalid_argument("loss_interest_ipw: propensity below the clamp floor");
    }
  }
  return ag::bce_with_logits(interest_scores, labels, theta_pos.cwiseInverse(),
                             theta_neg.cwiseInverse());
}

Tensor loss_interest_ipw(const model::BatchOutputs& out, const Vector& labels,
                         const Vector& theta_pos, const Vector& theta_neg,
                         double min_propensity) {
  return loss_interest_ipw(out.y_m_int, labels, theta_pos, theta_neg, min_propensity);
}

Tensor loss_orthogonality(const Tensor& a, const Tensor& b) {
  return ag::mean(ag::abs_cosine_rows(a, b));
}

Tensor bpr_pairwise(const Tensor& pos, const Tensor& neg, const Vector& weight) {
  const Vector ones = Vector::Ones(weight.size());
  return ag::bce_with_logits(ag::sub(pos, neg), ones, weight, ones);
}

Tensor bpr_pairwise(const Tensor& pos, const Tensor& neg) {
  return bpr_pairwise(pos, neg, Vector::Ones(pos.rows()));
}

namespace {

Tensor weighted(const Tensor& t, double w) { return ag::scale(t, w); }

void accumulate(Tensor& acc, const Tensor& term) {
  acc = acc.defined() ? ag::add(acc, term) : term;
}

}  // namespace

Tensor loss_total(const LossComponents& parts, const model::LossWeights& weights, Mode mode) {
  if (!parts.main.defined()) throw std::invalid_argument("loss_total: main loss missing");
  Tensor total = parts.main;
  if (mode == Mode::macr) {
    if (parts.user.defined()) accumulate(total, weighted(parts.user, weights.alpha));
    if (parts.item.defined()) accumulate(total, weighted(parts.item, weights.beta));
    return total;
  }
  const double alpha = mode == Mode::var1 ? 0.0 : weights.alpha;
  if (parts.interest.defined()) accumulate(total, weighted(parts.interest, alpha));
  if (parts.conformity.defined()) accumulate(total, weighted(parts.conformity, alpha));
  if (parts.item.defined()) accumulate(total, weighted(parts.item, weights.beta));
  if (parts.ortho_user.defined()) accumulate(total, weighted(parts.ortho_user, weights.gamma));
  if (parts.ortho_item.defined()) accumulate(total, weighted(parts.ortho_item, weights.gamma));
  return total;
}

LossComponents compute_losses(Mode mode, const model::BatchOutputs& out,
                              const LabelledBatch& batch, const model::LossWeights& weights) {
  const Eigen::Index rows = batch.labels.size();
  if (rows == 0 || out.y_train.rows() != rows) {
    throw std::invalid_argument("compute_losses: label count does not match scored rows");
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  LossComponents c;
  if (model::is_pairwise(mode)) {
    const Eigen::Index p = batch.pairs;
    if (2 * p != rows) throw std::invalid_argument("pairwise batch must hold pos/neg halves");
    std::vector<std::int64_t> pos_rows(static_cast<std::size_t>(p));
    std::vector<std::int64_t> neg_rows(static_cast<std::size_t>(p));
    std::iota(pos_rows.begin(), pos_rows.end(), 0);
    std::iota(neg_rows.begin(), neg_rows.end(), p);
    const Tensor pos = ag::gather_rows(out.y_train, pos_rows);
    const Tensor neg = ag::gather_rows(out.y_train, neg_rows);
    Vector w = Vector::Ones(p);
    if (mode == Mode::ipw_bpr) w = batch.theta_pos.head(p).cwiseInverse();
    c.main = ag::scale(bpr_pairwise(pos, neg, w), 1.0 / static_cast<double>(p));
  } else if (mode == Mode::ipw_bce) {
    c.main = ag::scale(loss_interest_ipw(out.y_train, batch.labels, batch.theta_pos,
                                         batch.theta_neg, batch.min_propensity),
                       inv_rows);
  } else {
    c.main = ag::scale(loss_main(out, batch.labels), inv_rows);
  }
  if (model::is_dcr_family(mode)) {
    c.interest = ag::scale(loss_interest_ipw(out, batch.labels, batch.theta_pos, batch.theta_neg,
                                             batch.min_propensity),
                           inv_rows);
    c.conformity = ag::scale(loss_conformity(out, batch.labels), inv_rows);
    c.item = ag::scale(loss_item(out, batch.labels), inv_rows);
    c.ortho_user = loss_orthogonality(out.ortho_user_a, out.ortho_user_b);
    c.ortho_item = loss_orthogonality(out.e_pop_i, out.e_int_i);
  } else if (mode == Mode::macr) {
    c.item = ag::scale(loss_item(out, batch.labels), inv_rows);
    c.user = ag::scale(bce(out.y_u, batch.labels), inv_rows);
  }
  c.total = loss_total(c, weights, mode);
  return c;
}

}  // namespace dcr::loss
