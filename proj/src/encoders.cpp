#include "dcr/encoders.hpp"

#include "dcr/error.hpp"

#include <cmath>
#include <stdexcept>

namespace dcr::model {

EncoderKind parse_encoder_kind(std::string_view name) {
  if (name == "recurrent" || name == "gru4rec") return EncoderKind::recurrent;
  if (name == "dilated_conv" || name == "nextitnet") return EncoderKind::dilated_conv;
  if (name == "self_attention" || name == "sasrec") return EncoderKind::self_attention;
  throw ConfigError("unknown encoder kind '" + std::string(name) + "'");
}

std::string_view encoder_kind_name(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::recurrent: return "recurrent";
    case EncoderKind::dilated_conv: return "dilated_conv";
    case EncoderKind::self_attention: return "self_attention";
  }
  return "?";
}

SequenceLayout SequenceLayout::from_items(std::span<const std::int64_t> items, Eigen::Index batch,
                                          Eigen::Index length) {
  if (static_cast<Eigen::Index>(items.size()) != batch * length) {
    throw std::invalid_argument("SequenceLayout: item count != batch * length");
  }
  SequenceLayout layout;
  layout.batch = batch;
  layout.length = length;
  layout.valid = Vector::Zero(batch * length);
  for (std::size_t r = 0; r < items.size(); ++r) {
    layout.valid(static_cast<Eigen::Index>(r)) = items[r] == kPadding ? 0.0 : 1.0;
  }
  return layout;
}

std::vector<std::int64_t> SequenceLayout::last_rows() const {
  std::vector<std::int64_t> rows(static_cast<std::size_t>(batch));
  for (Eigen::Index b = 0; b < batch; ++b) rows[static_cast<std::size_t>(b)] = b * length + length - 1;
  return rows;
}

EmbeddingTables::EmbeddingTables(nn::ParameterStore& store, std::size_t num_items,
                                 Eigen::Index dim, std::size_t num_users, Eigen::Index user_dim,
                                 std::mt19937_64& rng) {
  const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
  item_table_ = store.add("item_embedding",
                          nn::normal_matrix(static_cast<Eigen::Index>(num_items), dim, sd, rng));
  if (num_users > 0 && user_dim > 0) {
    user_table_ = store.add("user_embedding",
                            nn::normal_matrix(static_cast<Eigen::Index>(num_users), user_dim,
                                              1.0 / std::sqrt(static_cast<double>(user_dim)), rng));
  }
}

Tensor EmbeddingTables::embed_items(std::span<const std::int64_t> items) const {
  for (auto i : items) {
    if (i != kPadding && (i < 0 || i >= item_table_.rows())) {
      throw std::out_of_range("item index " + std::to_string(i) + " out of range");
    }
  }
  return ag::gather_rows(item_table_, items);
}

Tensor EmbeddingTables::embed_users(std::span<const std::int64_t> users) const {
  if (!user_table_.defined()) throw ConfigError("model has no user embedding table");
  for (auto u : users) {
    if (u < 0 || u >= user_table_.rows()) {
      throw std::out_of_range("user index " + std::to_string(u) + " out of range");
    }
  }
  return ag::gather_rows(user_table_, users);
}

namespace {

Tensor one_minus(const Tensor& a) { return ag::add_scalar(ag::scale(a, -1.0), 1.0); }

// Two stacked GRU layers. Hidden state is held (not updated) across padded
// steps, so left padding leaves the state at zero until the first item.
class RecurrentEncoder final : public SequenceEncoder {
 public:
  RecurrentEncoder(nn::ParameterStore& store, const std::string& name, const EncoderConfig& c,
                   std::mt19937_64& rng)
      : dim_(c.dim), dropout_(c.dropout) {
    for (int l = 0; l < c.layers; ++l) {
      const std::string p = name + ".gru" + std::to_string(l);
      input_.emplace_back(store, p + ".input", c.dim, 3 * c.dim, rng);
      hidden_.emplace_back(store, p + ".hidden", c.dim, 3 * c.dim, rng);
    }
  }

  EncoderKind kind() const override { return EncoderKind::recurrent; }

  Tensor forward(const Tensor& x, const SequenceLayout& layout,
                 const ForwardContext& ctx) const override {
    const Eigen::Index B = layout.batch;
    const Eigen::Index L = layout.length;
    const Eigen::Index h = dim_;
    // Row permutations between (b, t) order and (t, b) order.
    std::vector<std::vector<std::int64_t>> step_rows(static_cast<std::size_t>(L));
    std::vector<Vector> step_mask(static_cast<std::size_t>(L), Vector(B));
    for (Eigen::Index t = 0; t < L; ++t) {
      auto& rows = step_rows[static_cast<std::size_t>(t)];
      rows.resize(static_cast<std::size_t>(B));
      for (Eigen::Index b = 0; b < B; ++b) {
        rows[static_cast<std::size_t>(b)] = b * L + t;
        step_mask[static_cast<std::size_t>(t)](b) = layout.valid(b * L + t);
      }
    }
    std::vector<std::int64_t> to_batch_major(static_cast<std::size_t>(B * L));
    for (Eigen::Index b = 0; b < B; ++b) {
      for (Eigen::Index t = 0; t < L; ++t) {
        to_batch_major[static_cast<std::size_t>(b * L + t)] = t * B + b;
      }
    }

    Tensor seq = ag::mask_rows(x, layout.valid);
    for (std::size_t l = 0; l < input_.size(); ++l) {
      if (l > 0) seq = ag::dropout(seq, dropout_, ctx.training, ctx.rng);
      const Tensor gi_all = input_[l](seq);
      Tensor state = Tensor::constant(Matrix::Zero(B, h));
      std::vector<Tensor> outputs;
      outputs.reserve(static_cast<std::size_t>(L));
      for (Eigen::Index t = 0; t < L; ++t) {
        const Tensor gi = ag::gather_rows(gi_all, step_rows[static_cast<std::size_t>(t)]);
        const Tensor gh = hidden_[l](state);
        const Tensor r = ag::sigmoid(ag::add(ag::slice_cols(gi, 0, h), ag::slice_cols(gh, 0, h)));
        const Tensor z = ag::sigmoid(ag::add(ag::slice_cols(gi, h, h), ag::slice_cols(gh, h, h)));
        const Tensor n = ag::tanh(
            ag::add(ag::slice_cols(gi, 2 * h, h), ag::mul(r, ag::slice_cols(gh, 2 * h, h))));
        const Tensor candidate = ag::add(ag::mul(one_minus(z), n), ag::mul(z, state));
        const Vector& m = step_mask[static_cast<std::size_t>(t)];
        state = ag::add(ag::mask_rows(candidate, m),
                        ag::mask_rows(state, Vector::Ones(B) - m));
        outputs.push_back(state);
      }
      seq = ag::gather_rows(ag::concat_rows(outputs), to_batch_major);
    }
    return ag::mask_rows(seq, layout.valid);
  }

 private:
  Eigen::Index dim_;
  double dropout_;
  std::vector<nn::Linear> input_;
  std::vector<nn::Linear> hidden_;
};

// Causal 1-D convolution of width `kernel`: out[t] = sum_k W_k x[t - k * dilation] + b.
class CausalConv {
 public:
  CausalConv(nn::ParameterStore& store, const std::string& name, Eigen::Index dim, int kernel,
             int dilation, std::mt19937_64& rng)
      : kernel_(kernel), dilation_(dilation),
        linear_(store, name, dim * kernel, dim, rng) {}

  Tensor operator()(const Tensor& x, Eigen::Index length) const {
    std::vector<Tensor> taps;
    for (int k = kernel_ - 1; k >= 0; --k) {
      taps.push_back(k == 0 ? x : ag::time_shift(x, length, static_cast<Eigen::Index>(k) * dilation_));
    }
    return linear_(ag::concat_cols(taps));
  }

 private:
  int kernel_;
  int dilation_;
  nn::Linear linear_;
};

// Residual blocks in the NextItNet layout: for dilation d,
//   y = ReLU(LN(conv_{d}(x))); y = ReLU(LN(conv_{2d}(y))); out = x + y
// Padded rows are zeroed after every activation so padding acts as the
// implicit causal zero-padding of the convolution.
class DilatedConvEncoder final : public SequenceEncoder {
 public:
  DilatedConvEncoder(nn::ParameterStore& store, const std::string& name, const EncoderConfig& c,
                     std::mt19937_64& rng) {
    for (std::size_t i = 0; i < c.dilations.size(); ++i) {
      const std::string p = name + ".block" + std::to_string(i);
      Block b{CausalConv(store, p + ".conv1", c.dim, c.kernel, c.dilations[i], rng),
              nn::LayerNorm(store, p + ".ln1", c.dim),
              CausalConv(store, p + ".conv2", c.dim, c.kernel, 2 * c.dilations[i], rng),
              nn::LayerNorm(store, p + ".ln2", c.dim)};
      blocks_.push_back(std::move(b));
    }
  }

  EncoderKind kind() const override { return EncoderKind::dilated_conv; }

  Tensor forward(const Tensor& x, const SequenceLayout& layout,
                 const ForwardContext& /*ctx*/) const override {
    Tensor h = ag::mask_rows(x, layout.valid);
    for (const auto& b : blocks_) {
      Tensor y = ag::mask_rows(ag::relu(b.ln1(b.conv1(h, layout.length))), layout.valid);
      y = ag::mask_rows(ag::relu(b.ln2(b.conv2(y, layout.length))), layout.valid);
      h = ag::add(h, y);
    }
    return h;
  }

 private:
  struct Block {
    CausalConv conv1;
    nn::LayerNorm ln1;
    CausalConv conv2;
    nn::LayerNorm ln2;
  };
  std::vector<Block> blocks_;
};

// Transformer blocks in the SASRec layout:
//   x = dropout(sqrt(d) * e + P[pos]);  per block:
//   q = LN(x); x = q + Attn(q, x, x); x = LN(x); x = x + FFN(x); x *= mask
//   out = LN(x)
// Positions count from the first real item, so appending items or changing
// the amount of left padding does not move earlier positions.
class SelfAttentionEncoder final : public SequenceEncoder {
 public:
  SelfAttentionEncoder(nn::ParameterStore& store, const std::string& name, const EncoderConfig& c,
                       std::mt19937_64& rng)
      : dim_(c.dim), heads_(c.heads), dropout_(c.dropout), max_length_(c.max_length) {
    positions_ = store.add(name + ".position",
                           nn::normal_matrix(c.max_length, c.dim,
                                             1.0 / std::sqrt(static_cast<double>(c.dim)), rng));
    for (int l = 0; l < c.layers; ++l) {
      const std::string p = name + ".block" + std::to_string(l);
      blocks_.push_back(Block{nn::LayerNorm(store, p + ".attn_ln", c.dim),
                              nn::Linear(store, p + ".wq", c.dim, c.dim, rng),
                              nn::Linear(store, p + ".wk", c.dim, c.dim, rng),
                              nn::Linear(store, p + ".wv", c.dim, c.dim, rng),
                              nn::Linear(store, p + ".wo", c.dim, c.dim, rng),
                              nn::LayerNorm(store, p + ".ffn_ln", c.dim),
                              nn::Linear(store, p + ".ffn1", c.dim, c.dim, rng),
                              nn::Linear(store, p + ".ffn2", c.dim, c.dim, rng)});
    }
    final_ln_ = nn::LayerNorm(store, name + ".final_ln", c.dim);
  }

  EncoderKind kind() const override { return EncoderKind::self_attention; }

  Tensor forward(const Tensor& x, const SequenceLayout& layout,
                 const ForwardContext& ctx) const override {
    const Eigen::Index L = layout.length;
    std::vector<std::int64_t> pos(static_cast<std::size_t>(layout.batch * L), kPadding);
    for (Eigen::Index b = 0; b < layout.batch; ++b) {
      std::int64_t p = 0;
      for (Eigen::Index t = 0; t < L; ++t) {
        if (layout.valid(b * L + t) == 0.0) continue;
        if (p >= max_length_) {
          throw std::invalid_argument("sequence longer than the encoder's maximum length");
        }
        pos[static_cast<std::size_t>(b * L + t)] = p++;
      }
    }
    Tensor h = ag::add(ag::scale(x, std::sqrt(static_cast<double>(dim_))),
                       ag::gather_rows(positions_, pos));
    h = ag::mask_rows(ag::dropout(h, dropout_, ctx.training, ctx.rng), layout.valid);
    for (const auto& b : blocks_) {
      const Tensor q = b.attn_ln(h);
      Tensor a = ag::causal_attention(b.wq(q), b.wk(h), b.wv(h), L, heads_, layout.valid);
      a = ag::dropout(b.wo(a), dropout_, ctx.training, ctx.rng);
      h = b.ffn_ln(ag::add(q, a));
      Tensor f = ag::dropout(ag::relu(b.ffn1(h)), dropout_, ctx.training, ctx.rng);
      f = ag::dropout(b.ffn2(f), dropout_, ctx.training, ctx.rng);
      h = ag::mask_rows(ag::add(h, f), layout.valid);
    }
    return ag::mask_rows(final_ln_(h), layout.valid);
  }

 private:
  struct Block {
    nn::LayerNorm attn_ln;
    nn::Linear wq, wk, wv, wo;
    nn::LayerNorm ffn_ln;
    nn::Linear ffn1, ffn2;
  };
  Eigen::Index dim_;
  int heads_;
  double dropout_;
  Eigen::Index max_length_;
  Tensor positions_;
  std::vector<Block> blocks_;
  nn::LayerNorm final_ln_;
};

}  // namespace

std::unique_ptr<SequenceEncoder> make_encoder(nn::ParameterStore& store, const std::string& name,
                                              const EncoderConfig& config, std::mt19937_64& rng) {
  if (config.dim <= 0) throw ConfigError("encoder dimension must be positive");
  switch (config.kind) {
    case EncoderKind::recurrent:
      return std::make_unique<RecurrentEncoder>(store, name, config, rng);
    case EncoderKind::dilated_conv:
      return std::make_unique<DilatedConvEncoder>(store, name, config, rng);
    case EncoderKind::self_attention:
      if (config.heads <= 0 || config.dim % config.heads != 0) {
        throw ConfigError("attention heads must divide the hidden size");
      }
      return std::make_unique<SelfAttentionEncoder>(store, name, config, rng);
  }
  throw ConfigError("unknown encoder kind");
}

Tensor encode_last(const SequenceEncoder& encoder, const Tensor& x, const SequenceLayout& layout,
                   const ForwardContext& ctx) {
  const auto rows = layout.last_rows();
  for (auto r : rows) {
    if (layout.valid(r) == 0.0) {
      throw std::invalid_argument("encode: empty sequence (need at least one history item)");
    }
  }
  return ag::gather_rows(encoder.forward(x, layout, ctx), rows);
}

PreferenceMerge::PreferenceMerge(nn::ParameterStore& store, const std::string& name,
                                 Eigen::Index dyn_dim, Eigen::Index user_dim,
                                 Eigen::Index out_dim, std::mt19937_64& rng)
    : mlp_(nn::Mlp(store, name, dyn_dim + user_dim, {out_dim, out_dim}, rng)) {}

Tensor PreferenceMerge::operator()(const Tensor& dynamic, const Tensor* user_static) const {
  if (!mlp_) return dynamic;
  if (user_static == nullptr || !user_static->defined()) {
    throw ConfigError("merge mode requires a user embedding");
  }
  return (*mlp_)(ag::concat_cols({dynamic, *user_static}));
}

}  // namespace dcr::model
