#include "dcr/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace dcr::nn {

Tensor& ParameterStore::add(const std::string& name, Matrix init) {
  auto [it, inserted] = params_.emplace(name, Tensor::parameter(std::move(init)));
  if (!inserted) throw std::logic_error("duplicate parameter name: " + name);
  return it->second;
}

Tensor& ParameterStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

const Tensor& ParameterStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

void ParameterStore::zero_grad() {
  for (auto& [_, t] : params_) t.zero_grad();
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += static_cast<std::size_t>(t.value().size());
  return n;
}

std::map<std::string, Matrix> ParameterStore::snapshot() const {
  std::map<std::string, Matrix> out;
  for (const auto& [name, t] : params_) out.emplace(name, t.value());
  return out;
}

void ParameterStore::restore(const std::map<std::string, Matrix>& values) {
  for (auto& [name, t] : params_) {
    auto it = values.find(name);
    if (it == values.end()) throw std::runtime_error("restore: missing parameter " + name);
    if (it->second.rows() != t.rows() || it->second.cols() != t.cols()) {
      throw std::runtime_error("restore: shape mismatch for " + name);
    }
    t.mutable_value() = it->second;
  }
}

Matrix xavier_uniform(Eigen::Index fan_in, Eigen::Index fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(fan_in, fan_out);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Linear::Linear(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index out,
               std::mt19937_64& rng)
    : weight_(store.add(name + ".weight", xavier_uniform(in, out, rng))),
      bias_(store.add(name + ".bias", Matrix::Zero(1, out))) {}

Tensor Linear::operator()(const Tensor& x) const {
  return ag::add_bias(ag::matmul(x, weight_), bias_);
}

Mlp::Mlp(ParameterStore& store, const std::string& name, Eigen::Index in,
         const std::vector<Eigen::Index>& widths, std::mt19937_64& rng) {
  if (widths.empty()) throw std::invalid_argument("Mlp: no layers");
  Eigen::Index prev = in;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    layers_.emplace_back(store, name + ".fc" + std::to_string(i), prev, widths[i], rng);
    prev = widths[i];
  }
}

Tensor Mlp::operator()(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i](h);
    if (i + 1 < layers_.size()) h = ag::relu(h);
  }
  return h;
}

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, Eigen::Index width)
    : gamma_(store.add(name + ".gamma", Matrix::Ones(1, width))),
      beta_(store.add(name + ".beta", Matrix::Zero(1, width))) {}

Tensor LayerNorm::operator()(const Tensor& x) const { return ag::layer_norm(x, gamma_, beta_); }

Adam::Adam(ParameterStore& store, AdamOptions options) : store_(&store), options_(options) {
  if (!(options_.learning_rate >= 0.0)) throw std::invalid_argument("Adam: negative learning rate");
  for (const auto& [name, t] : store.all()) {
    m_.emplace(name, Matrix::Zero(t.rows(), t.cols()));
    v_.emplace(name, Matrix::Zero(t.rows(), t.cols()));
  }
}

void Adam::step() {
  ++steps_;
  double clip = 1.0;
  if (options_.clip_global_norm > 0.0) {
    double sq = 0.0;
    for (const auto& [_, t] : store_->all()) {
      if (t.grad().size() != 0) sq += t.grad().squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (norm > options_.clip_global_norm) clip = options_.clip_global_norm / norm;
  }
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
  for (auto& [name, t] : store_->all()) {
    if (t.grad().size() == 0) continue;
    Matrix& m = m_.at(name);
    Matrix& v = v_.at(name);
    const Matrix g = t.grad() * clip;
    m = options_.beta1 * m + (1.0 - options_.beta1) * g;
    v = options_.beta2 * v + (1.0 - options_.beta2) * g.cwiseAbs2();
    t.mutable_value().array() -= options_.learning_rate * (m.array() / bc1) /
                                 ((v.array() / bc2).sqrt() + options_.eps);
  }
}

}  // namespace dcr::nn
