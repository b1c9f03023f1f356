#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// double matrices. Every value is a 2-D matrix; sequence batches are laid
// out as (batch * length) rows with row index b * length + t.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace dcr::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false);

  static Tensor constant(Matrix value) { return Tensor(std::move(value), false); }
  static Tensor parameter(Matrix value) { return Tensor(std::move(value), true); }
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  Matrix& mutable_grad() { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const;

  void zero_grad();
  // Seeds d(self)/d(self) = 1 (self must be 1x1) and propagates through the tape.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Disables tape recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---- elementwise / linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor add_bias(const Tensor& a, const Tensor& bias);  // bias is 1 x cols
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);

// ---- shape / indexing ----
// Row gather from a table. Negative indices yield zero rows and receive no gradient.
Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> index);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index count);
// Multiplies row r by mask[r] (mask is constant).
Tensor mask_rows(const Tensor& a, const Vector& mask);
// Within each block of `length` rows, out[t] = a[t - shift] (zero when t < shift).
Tensor time_shift(const Tensor& a, Eigen::Index length, Eigen::Index shift);

// ---- reductions ----
Tensor rows_dot(const Tensor& a, const Tensor& b);  // n x 1
Tensor sum(const Tensor& a);                         // 1 x 1
Tensor mean(const Tensor& a);                        // 1 x 1

// ---- layers with fused backward ----
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-8);
// Inverted dropout; identity when !training or p == 0.
Tensor dropout(const Tensor& a, double p, bool training, std::mt19937_64* rng);
// Causal multi-head scaled dot-product attention over blocks of `length`
// rows. Query t attends to keys s <= t with key_valid[s] != 0. Queries
// with no admissible key produce zero rows.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, Eigen::Index length,
                        int heads, const Vector& key_valid);

// ---- losses ----
// Sum over rows of  -[ w_pos * y * ln s(z) + w_neg * (1 - y) * ln(1 - s(z)) ]
// with s the logistic sigmoid, evaluated in a numerically stable form.
Tensor bce_with_logits(const Tensor& logits, const Vector& labels, const Vector& pos_weight,
                       const Vector& neg_weight);
Tensor bce_with_logits(const Tensor& logits, const Vector& labels);
// Per-row |cos(a_r, b_r)|; rows where either norm < 1e-12 contribute 0.
Tensor abs_cosine_rows(const Tensor& a, const Tensor& b);

// Scalar helpers shared by losses and tests.
double log_sigmoid(double z);
double sigmoid(double z);

}  // namespace dcr::ag
