#pragma once

// Item embedding tables and the three causal sequence backbones
// (stacked GRU, dilated residual CNN, causal self-attention).

#include "dcr/autograd.hpp"
#include "dcr/nn.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dcr::model {

using ag::Matrix;
using ag::Tensor;
using ag::Vector;

// Item index used for left padding; maps to a frozen zero vector.
inline constexpr std::int64_t kPadding = -1;

enum class EncoderKind { recurrent, dilated_conv, self_attention };

EncoderKind parse_encoder_kind(std::string_view name);
std::string_view encoder_kind_name(EncoderKind kind);

struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // required when training with dropout
};

// Shape of a left-padded batch: rows are b * length + t; valid[r] is 1 for
// real items and 0 for padding. Padding only ever precedes real items.
struct SequenceLayout {
  Eigen::Index batch = 0;
  Eigen::Index length = 0;
  Vector valid;

  static SequenceLayout from_items(std::span<const std::int64_t> items, Eigen::Index batch,
                                   Eigen::Index length);
  // Rows of the last position of every sequence.
  std::vector<std::int64_t> last_rows() const;
};

class EmbeddingTables {
 public:
  EmbeddingTables() = default;
  EmbeddingTables(nn::ParameterStore& store, std::size_t num_items, Eigen::Index dim,
                  std::size_t num_users, Eigen::Index user_dim, std::mt19937_64& rng);

  // Row lookups into the single item table; used for both target items and
  // sequence items. kPadding yields zeros; other out-of-range indices throw.
  Tensor embed_items(std::span<const std::int64_t> items) const;
  Tensor embed_users(std::span<const std::int64_t> users) const;
  bool has_users() const { return user_table_.defined(); }
  std::size_t num_items() const { return static_cast<std::size_t>(item_table_.rows()); }
  Eigen::Index dim() const { return item_table_.cols(); }
  const Tensor& item_table() const { return item_table_; }

 private:
  Tensor item_table_;
  Tensor user_table_;
};

struct EncoderConfig {
  EncoderKind kind = EncoderKind::self_attention;
  Eigen::Index dim = 50;
  int layers = 2;  // recurrent and self-attention depth
  int heads = 1;
  double dropout = 0.2;
  Eigen::Index max_length = 200;
  std::vector<int> dilations{1, 2, 4, 8, 1, 2, 4, 8};
  int kernel = 3;
};

class SequenceEncoder {
 public:
  virtual ~SequenceEncoder() = default;
  // x: (batch * length) x dim embedded sequence. Returns the per-position
  // states; the state at row b * length + t summarises items <= t and is the
  // preference used to predict the item after t.
  virtual Tensor forward(const Tensor& x, const SequenceLayout& layout,
                         const ForwardContext& ctx) const = 0;
  virtual EncoderKind kind() const = 0;
};

std::unique_ptr<SequenceEncoder> make_encoder(nn::ParameterStore& store, const std::string& name,
                                              const EncoderConfig& config, std::mt19937_64& rng);

// State at the last position of each sequence (batch x dim). Throws when a
// sequence has no valid item.
Tensor encode_last(const SequenceEncoder& encoder, const Tensor& x, const SequenceLayout& layout,
                   const ForwardContext& ctx);

// Combines the dynamic preference with an optional static user vector:
// identity, or a (50, 50) perceptron over their concatenation.
class PreferenceMerge {
 public:
  PreferenceMerge() = default;  // identity
  PreferenceMerge(nn::ParameterStore& store, const std::string& name, Eigen::Index dyn_dim,
                  Eigen::Index user_dim, Eigen::Index out_dim, std::mt19937_64& rng);
  bool is_identity() const { return !mlp_.has_value(); }
  Tensor operator()(const Tensor& dynamic, const Tensor* user_static) const;

 private:
  std::optional<nn::Mlp> mlp_;
};

}  // namespace dcr::model
