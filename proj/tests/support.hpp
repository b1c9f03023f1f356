#pragma once

// Shared helpers for the unit and acceptance tests: central-difference
// gradient checks, random inputs and small model/dataset fixtures.

#include "dcr/autograd.hpp"
#include "dcr/dataset.hpp"
#include "dcr/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace dcr::test {

using ag::Matrix;
using ag::Tensor;
using ag::Vector;

inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng,
                            double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

struct GradCheck {
  double max_rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double max_abs_error = 0.0;
};

// f must rebuild its graph from the current parameter values and return a 1x1 tensor.
inline GradCheck gradcheck(const std::function<Tensor()>& f, std::vector<Tensor> params,
                           double h = 1e-6) {
  for (auto& p : params) p.zero_grad();
  f().backward();
  GradCheck out;
  for (auto& p : params) {
    const Matrix analytic = p.grad().size() ? p.grad() : Matrix::Zero(p.rows(), p.cols());
    Matrix numeric(p.rows(), p.cols());
    {
      ag::NoGradGuard no_grad;
      for (Eigen::Index i = 0; i < p.value().size(); ++i) {
        double& x = p.mutable_value().data()[i];
        const double x0 = x;
        x = x0 + h;
        const double fp = f().item();
        x = x0 - h;
        const double fm = f().item();
        x = x0;
        numeric.data()[i] = (fp - fm) / (2.0 * h);
      }
    }
    const double diff = (analytic - numeric).norm();
    const double scale = std::max(analytic.norm(), numeric.norm());
    // Parameters with an identically zero gradient (e.g. key biases under
    // softmax) only see round-off in the numeric estimate.
    if (scale > 1e-7) out.max_rel_error = std::max(out.max_rel_error, diff / scale);
    out.max_abs_error = std::max(out.max_abs_error, (analytic - numeric).cwiseAbs().maxCoeff());
  }
  return out;
}

// Projects an output onto fixed random weights so every entry matters.
inline Tensor probe(const Tensor& out, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return ag::sum(ag::mul(out, Tensor::constant(random_matrix(out.rows(), out.cols(), rng))));
}

inline model::ModelConfig small_config(model::Mode mode, model::EncoderKind kind,
                                       std::size_t items = 30, Eigen::Index dim = 8) {
  model::ModelConfig c;
  c.mode = mode;
  c.encoder.kind = kind;
  c.encoder.dim = dim;
  c.encoder.dropout = 0.0;
  c.encoder.max_length = 32;
  c.encoder.dilations = {1, 2, 4};
  c.num_items = items;
  c.num_users = 12;
  c.interest_head = {12, dim};
  c.popularity_head = {10, dim};
  c.atten_hidden = 6;
  c.seed = 5;
  return c;
}

// Two-tier synthetic set: items 0..k-1 are popular, the rest rare.
inline data::InteractionDataset tiny_dataset(std::uint64_t seed = 3) {
  data::SyntheticConfig cfg;
  cfg.num_users = 80;
  cfg.num_items = 40;
  cfg.min_length = 8;
  cfg.max_length = 16;
  cfg.clusters = 4;
  cfg.seed = seed;
  return data::preprocess(data::generate_synthetic(cfg), {});
}

inline std::vector<model::EncoderKind> all_kinds() {
  return {model::EncoderKind::recurrent, model::EncoderKind::dilated_conv,
          model::EncoderKind::self_attention};
}

}  // namespace dcr::test
