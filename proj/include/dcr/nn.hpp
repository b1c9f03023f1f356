#pragma once

// Parameter bookkeeping, small layers and the Adam optimizer.

#include "dcr/autograd.hpp"

#include <map>
#include <random>
#include <string>
#include <vector>

namespace dcr::nn {

using ag::Matrix;
using ag::Tensor;

// Ordered name -> parameter registry. Names are dotted paths
// ("int_encoder.block0.attn.wq") and are the checkpoint keys.
class ParameterStore {
 public:
  Tensor& add(const std::string& name, Matrix init);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const std::map<std::string, Tensor>& all() const { return params_; }
  std::map<std::string, Tensor>& all() { return params_; }
  void zero_grad();
  std::size_t scalar_count() const;

  // Copies values (not graph state) between stores with identical layout.
  std::map<std::string, Matrix> snapshot() const;
  void restore(const std::map<std::string, Matrix>& values);

 private:
  std::map<std::string, Tensor> params_;
};

Matrix xavier_uniform(Eigen::Index fan_in, Eigen::Index fan_out, std::mt19937_64& rng);
Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng);

class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index out,
         std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const;
  Eigen::Index in_features() const { return weight_.rows(); }
  Eigen::Index out_features() const { return weight_.cols(); }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

 private:
  Tensor weight_;  // in x out
  Tensor bias_;    // 1 x out
};

// Stack of Linear layers with ReLU between them and no activation on the output.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterStore& store, const std::string& name, Eigen::Index in,
      const std::vector<Eigen::Index>& widths, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const;
  std::vector<Linear>& layers() { return layers_; }
  Eigen::Index out_features() const { return layers_.back().out_features(); }

 private:
  std::vector<Linear> layers_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, Eigen::Index width);
  Tensor operator()(const Tensor& x) const;

 private:
  Tensor gamma_;
  Tensor beta_;
};

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_global_norm = 0.0;  // 0 disables clipping
};

class Adam {
 public:
  Adam(ParameterStore& store, AdamOptions options);
  // Applies one update from the gradients currently held by the store.
  void step();
  long steps() const { return steps_; }
  const AdamOptions& options() const { return options_; }

 private:
  ParameterStore* store_;
  AdamOptions options_;
  std::map<std::string, Matrix> m_;
  std::map<std::string, Matrix> v_;
  long steps_ = 0;
};

}  // namespace dcr::nn
