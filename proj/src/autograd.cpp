#include "dcr/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace dcr::ag {

namespace {

thread_local bool g_grad_enabled = true;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) +
                                "x" + std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

// Builds the result node; records parents and the backward closure only when
// recording is on and some parent needs a gradient.
Tensor make_result(Matrix value, std::initializer_list<Tensor> parents,
                   std::function<void(Node&)> backward) {
  Tensor out(std::move(value), false);
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& p : parents) node.parents.push_back(p.node());
  node.backward = std::move(backward);
  return out;
}

Tensor make_result(Matrix value, const std::vector<Tensor>& parents,
                   std::function<void(Node&)> backward) {
  Tensor out(std::move(value), false);
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& p : parents) node.parents.push_back(p.node());
  node.backward = std::move(backward);
  return out;
}

// Returns the parent's grad buffer, or nullptr when it takes no gradient.
Matrix* grad_of(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return &p.grad;
}

}  // namespace

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return Tensor(std::move(m), false);
}

double Tensor::item() const {
  if (rows() != 1 || cols() != 1) throw std::invalid_argument("item(): tensor is not 1x1");
  return node_->value(0, 0);
}

void Tensor::zero_grad() {
  if (node_->grad.size() != 0) node_->grad.setZero();
}

void Tensor::backward() const {
  if (rows() != 1 || cols() != 1) throw std::invalid_argument("backward(): root must be 1x1");
  if (!node_->requires_grad) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad();
  node_->grad(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double log_sigmoid(double z) {
  // ln s(z) = -softplus(-z)
  if (z >= 0) return -std::log1p(std::exp(-z));
  return z - std::log1p(std::exp(z));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Matrix out = a.value() * b.value();
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Matrix& av = self.parents[0]->value;
    const Matrix& bv = self.parents[1]->value;
    if (Matrix* ga = grad_of(self, 0)) ga->noalias() += self.grad * bv.transpose();
    if (Matrix* gb = grad_of(self, 1)) gb->noalias() += av.transpose() * self.grad;
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  return make_result(a.value() + b.value(), {a, b}, [](Node& self) {
    if (Matrix* ga = grad_of(self, 0)) *ga += self.grad;
    if (Matrix* gb = grad_of(self, 1)) *gb += self.grad;
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  return make_result(a.value() - b.value(), {a, b}, [](Node& self) {
    if (Matrix* ga = grad_of(self, 0)) *ga += self.grad;
    if (Matrix* gb = grad_of(self, 1)) *gb -= self.grad;
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  return make_result(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
    const Matrix& av = self.parents[0]->value;
    const Matrix& bv = self.parents[1]->value;
    if (Matrix* ga = grad_of(self, 0)) *ga += self.grad.cwiseProduct(bv);
    if (Matrix* gb = grad_of(self, 1)) *gb += self.grad.cwiseProduct(av);
  });
}

Tensor scale(const Tensor& a, double s) {
  return make_result(a.value() * s, {a}, [s](Node& self) {
    if (Matrix* ga = grad_of(self, 0)) *ga += self.grad * s;
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  return make_result(a.value().array() + s, {a}, [](Node& self) {
    if (Matrix* ga = grad_of(self, 0)) *ga += self.grad;
  });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw std::invalid_argument("add_bias: bias must be 1 x cols");
  }
  Matrix out = a.value().rowwise() + bias.value().row(0);
  return make_result(std::move(out), {a, bias}, [](Node& self) {
    if (Matrix* ga = grad_of(self, 0)) *ga += self.grad;
    if (Matrix* gb = grad_of(self, 1)) *gb += self.grad.colwise().sum();
  });
}

Tensor relu(const Tensor& a) {
  return make_result(a.value().cwiseMax(0.0), {a}, [](Node& self) {
    const Matrix& av = self.parents[0]->value;
    if (Matrix* ga = grad_of(self, 0)) {
      *ga += (av.array() > 0.0).select(self.grad, 0.0);
    }
  });
}

Tensor sigmoid(const Tensor& a) {
  Matrix out = a.value().unaryExpr([](double z) { return sigmoid(z); });
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Matrix* ga = grad_of(self, 0)) {
      *ga += self.grad.cwiseProduct(
          self.value.unaryExpr([](double s) { return s * (1.0 - s); }));
    }
  });
}

Tensor tanh(const Tensor& a) {
  Matrix out = a.value().array().tanh().matrix();
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Matrix* ga = grad_of(self, 0)) {
      *ga += self.grad.cwiseProduct(
          self.value.unaryExpr([](double t) { return 1.0 - t * t; }));
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> index) {
  const Eigen::Index n = static_cast<Eigen::Index>(index.size());
  Matrix out = Matrix::Zero(n, table.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto i = index[static_cast<std::size_t>(r)];
    if (i < 0) continue;
    if (i >= table.rows()) throw std::out_of_range("gather_rows: index " + std::to_string(i));
    out.row(r) = table.value().row(i);
  }
  std::vector<std::int64_t> idx(index.begin(), index.end());
  return make_result(std::move(out), {table}, [idx = std::move(idx)](Node& self) {
    if (Matrix* gt = grad_of(self, 0)) {
      for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= 0) gt->row(idx[r]) += self.grad.row(static_cast<Eigen::Index>(r));
      }
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    offsets.push_back(off);
    off += p.cols();
  }
  return make_result(std::move(out), parts, [offsets = std::move(offsets)](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      if (Matrix* g = grad_of(self, i)) {
        *g += self.grad.middleCols(offsets[i], self.parents[i]->value.cols());
      }
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    offsets.push_back(off);
    off += p.rows();
  }
  return make_result(std::move(out), parts, [offsets = std::move(offsets)](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      if (Matrix* g = grad_of(self, i)) {
        *g += self.grad.middleRows(offsets[i], self.parents[i]->value.rows());
      }
    }
  });
}

Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw std::out_of_range("slice_cols: range out of bounds");
  }
  Matrix out = a.value().middleCols(start, count);
  return make_result(std::move(out), {a}, [start, count](Node& self) {
    if (Matrix* g = grad_of(self, 0)) g->middleCols(start, count) += self.grad;
  });
}

Tensor mask_rows(const Tensor& a, const Vector& mask) {
  if (mask.size() != a.rows()) throw std::invalid_argument("mask_rows: mask length mismatch");
  Matrix out = mask.asDiagonal() * a.value();
  return make_result(std::move(out), {a}, [mask](Node& self) {
    if (Matrix* g = grad_of(self, 0)) *g += mask.asDiagonal() * self.grad;
  });
}

Tensor time_shift(const Tensor& a, Eigen::Index length, Eigen::Index shift) {
  if (length <= 0 || a.rows() % length != 0) {
    throw std::invalid_argument("time_shift: rows not a multiple of length");
  }
  const Eigen::Index blocks = a.rows() / length;
  Matrix out = Matrix::Zero(a.rows(), a.cols());
  if (shift < length) {
    for (Eigen::Index b = 0; b < blocks; ++b) {
      out.middleRows(b * length + shift, length - shift) =
          a.value().middleRows(b * length, length - shift);
    }
  }
  return make_result(std::move(out), {a}, [length, shift, blocks](Node& self) {
    if (shift >= length) return;
    if (Matrix* g = grad_of(self, 0)) {
      for (Eigen::Index b = 0; b < blocks; ++b) {
        g->middleRows(b * length, length - shift) +=
            self.grad.middleRows(b * length + shift, length - shift);
      }
    }
  });
}

Tensor rows_dot(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "rows_dot");
  Matrix out = a.value().cwiseProduct(b.value()).rowwise().sum();
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Matrix& av = self.parents[0]->value;
    const Matrix& bv = self.parents[1]->value;
    const Vector g = self.grad.col(0);
    if (Matrix* ga = grad_of(self, 0)) *ga += g.asDiagonal() * bv;
    if (Matrix* gb = grad_of(self, 1)) *gb += g.asDiagonal() * av;
  });
}

Tensor sum(const Tensor& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Matrix* g = grad_of(self, 0)) g->array() += self.grad(0, 0);
  });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(a), 1.0 / n);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
    throw std::invalid_argument("layer_norm: gamma/beta must be 1 x cols");
  }
  Matrix xhat(n, d);
  Vector inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mu = x.value().row(r).mean();
    const double var = (x.value().row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.value().row(r).array() - mu) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
               beta.value().row(0).array();
  return make_result(std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       const Matrix& gv = self.parents[1]->value;
                       const double dd = static_cast<double>(xhat.cols());
                       if (Matrix* gx = grad_of(self, 0)) {
                         const Matrix gxhat = self.grad.array().rowwise() * gv.row(0).array();
                         for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
                           const double m1 = gxhat.row(r).sum();
                           const double m2 = gxhat.row(r).dot(xhat.row(r));
                           gx->row(r).array() += inv_std(r) / dd *
                                                 (dd * gxhat.row(r).array() - m1 -
                                                  xhat.row(r).array() * m2);
                         }
                       }
                       if (Matrix* gg = grad_of(self, 1)) {
                         *gg += self.grad.cwiseProduct(xhat).colwise().sum();
                       }
                       if (Matrix* gb = grad_of(self, 2)) *gb += self.grad.colwise().sum();
                     });
}

Tensor dropout(const Tensor& a, double p, bool training, std::mt19937_64* rng) {
  if (!training || p <= 0.0) return a;
  if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
  if (rng == nullptr) throw std::invalid_argument("dropout: training mode needs an rng");
  std::bernoulli_distribution keep(1.0 - p);
  Matrix mask(a.rows(), a.cols());
  const double s = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*rng) ? s : 0.0;
  Matrix out = a.value().cwiseProduct(mask);
  return make_result(std::move(out), {a}, [mask = std::move(mask)](Node& self) {
    if (Matrix* g = grad_of(self, 0)) *g += self.grad.cwiseProduct(mask);
  });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, Eigen::Index length,
                        int heads, const Vector& key_valid) {
  check_same_shape(q, k, "causal_attention(q,k)");
  check_same_shape(q, v, "causal_attention(q,v)");
  const Eigen::Index n = q.rows();
  const Eigen::Index d = q.cols();
  if (length <= 0 || n % length != 0) {
    throw std::invalid_argument("causal_attention: rows not a multiple of length");
  }
  if (heads <= 0 || d % heads != 0) {
    throw std::invalid_argument("causal_attention: width not divisible by heads");
  }
  if (key_valid.size() != n) throw std::invalid_argument("causal_attention: mask length");
  const Eigen::Index blocks = n / length;
  const Eigen::Index dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs[b * heads + h] is the length x length attention matrix.
  std::vector<Matrix> probs(static_cast<std::size_t>(blocks * heads));
  Matrix out = Matrix::Zero(n, d);
  for (Eigen::Index b = 0; b < blocks; ++b) {
    const Eigen::Index r0 = b * length;
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index c0 = h * dh;
      Matrix scores = q.value().block(r0, c0, length, dh) *
                      k.value().block(r0, c0, length, dh).transpose() * inv_sqrt;
      Matrix p = Matrix::Zero(length, length);
      for (Eigen::Index t = 0; t < length; ++t) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index s = 0; s <= t; ++s) {
          if (key_valid(r0 + s) != 0.0) mx = std::max(mx, scores(t, s));
        }
        if (!std::isfinite(mx)) continue;
        double z = 0.0;
        for (Eigen::Index s = 0; s <= t; ++s) {
          if (key_valid(r0 + s) != 0.0) {
            p(t, s) = std::exp(scores(t, s) - mx);
            z += p(t, s);
          }
        }
        p.row(t) /= z;
      }
      out.block(r0, c0, length, dh).noalias() = p * v.value().block(r0, c0, length, dh);
      probs[static_cast<std::size_t>(b * heads + h)] = std::move(p);
    }
  }
  return make_result(
      std::move(out), {q, k, v},
      [probs = std::move(probs), length, heads, dh, blocks, inv_sqrt](Node& self) {
        const Matrix& qv = self.parents[0]->value;
        const Matrix& kv = self.parents[1]->value;
        const Matrix& vv = self.parents[2]->value;
        Matrix* gq = grad_of(self, 0);
        Matrix* gk = grad_of(self, 1);
        Matrix* gvv = grad_of(self, 2);
        for (Eigen::Index b = 0; b < blocks; ++b) {
          const Eigen::Index r0 = b * length;
          for (int h = 0; h < heads; ++h) {
            const Eigen::Index c0 = h * dh;
            const Matrix& p = probs[static_cast<std::size_t>(b * heads + h)];
            const auto go = self.grad.block(r0, c0, length, dh);
            if (gvv) gvv->block(r0, c0, length, dh).noalias() += p.transpose() * go;
            if (!gq && !gk) continue;
            const Matrix dp = go * vv.block(r0, c0, length, dh).transpose();
            const Vector rowdot = dp.cwiseProduct(p).rowwise().sum();
            const Matrix ds = (p.array() * (dp.colwise() - rowdot).array()).matrix() * inv_sqrt;
            if (gq) gq->block(r0, c0, length, dh).noalias() += ds * kv.block(r0, c0, length, dh);
            if (gk) {
              gk->block(r0, c0, length, dh).noalias() +=
                  ds.transpose() * qv.block(r0, c0, length, dh);
            }
          }
        }
      });
}

Tensor bce_with_logits(const Tensor& logits, const Vector& labels, const Vector& pos_weight,
                       const Vector& neg_weight) {
  if (logits.cols() != 1) throw std::invalid_argument("bce_with_logits: logits must be n x 1");
  const Eigen::Index n = logits.rows();
  if (labels.size() != n || pos_weight.size() != n || neg_weight.size() != n) {
    throw std::invalid_argument("bce_with_logits: length mismatch");
  }
  double total = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    const double z = logits.value()(r, 0);
    const double y = labels(r);
    total -= pos_weight(r) * y * log_sigmoid(z) + neg_weight(r) * (1.0 - y) * log_sigmoid(-z);
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  return make_result(std::move(out), {logits}, [labels, pos_weight, neg_weight](Node& self) {
    if (Matrix* g = grad_of(self, 0)) {
      const Matrix& z = self.parents[0]->value;
      const double up = self.grad(0, 0);
      for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const double s = sigmoid(z(r, 0));
        const double y = labels(r);
        // d/dz of -[a y ln s + b (1-y) ln(1-s)] = -a y (1-s) + b (1-y) s
        (*g)(r, 0) += up * (-pos_weight(r) * y * (1.0 - s) + neg_weight(r) * (1.0 - y) * s);
      }
    }
  });
}

Tensor bce_with_logits(const Tensor& logits, const Vector& labels) {
  const Vector ones = Vector::Ones(labels.size());
  return bce_with_logits(logits, labels, ones, ones);
}

Tensor abs_cosine_rows(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "abs_cosine_rows");
  constexpr double kMinNorm = 1e-12;
  const Eigen::Index n = a.rows();
  Matrix out = Matrix::Zero(n, 1);
  Vector na(n), nb(n), cs(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    na(r) = a.value().row(r).norm();
    nb(r) = b.value().row(r).norm();
    if (na(r) < kMinNorm || nb(r) < kMinNorm) {
      cs(r) = 0.0;
      continue;
    }
    cs(r) = a.value().row(r).dot(b.value().row(r)) / (na(r) * nb(r));
    out(r, 0) = std::abs(cs(r));
  }
  return make_result(std::move(out), {a, b}, [na, nb, cs](Node& self) {
    const Matrix& av = self.parents[0]->value;
    const Matrix& bv = self.parents[1]->value;
    Matrix* ga = grad_of(self, 0);
    Matrix* gb = grad_of(self, 1);
    for (Eigen::Index r = 0; r < av.rows(); ++r) {
      if (na(r) < kMinNorm || nb(r) < kMinNorm) continue;
      const double sign = cs(r) > 0 ? 1.0 : (cs(r) < 0 ? -1.0 : 0.0);
      const double up = self.grad(r, 0) * sign;
      if (up == 0.0) continue;
      // d cos / d a = b / (|a||b|) - cos * a / |a|^2
      if (ga) {
        ga->row(r) += up * (bv.row(r) / (na(r) * nb(r)) - cs(r) * av.row(r) / (na(r) * na(r)));
      }
      if (gb) {
        gb->row(r) += up * (av.row(r) / (na(r) * nb(r)) - cs(r) * bv.row(r) / (nb(r) * nb(r)));
      }
    }
  });
}

}  // namespace dcr::ag
