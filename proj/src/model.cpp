#include "dcr/model.hpp"

#include "dcr/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace dcr::model {

namespace {

constexpr std::pair<Mode, std::string_view> kModeNames[] = {
    {Mode::dcr, "dcr"},           {Mode::var0, "var0"},         {Mode::var1, "var1"},
    {Mode::var2, "var2"},         {Mode::base_bce, "base_bce"}, {Mode::base_bpr, "base_bpr"},
    {Mode::bias_tower, "bias_tower"}, {Mode::ipw_bce, "ipw_bce"}, {Mode::ipw_bpr, "ipw_bpr"},
    {Mode::macr, "macr"},
};

std::vector<double> row_vector(const Tensor& t, Eigen::Index r) {
  if (!t.defined()) return {};
  std::vector<double> v(static_cast<std::size_t>(t.cols()));
  for (Eigen::Index c = 0; c < t.cols(); ++c) v[static_cast<std::size_t>(c)] = t.value()(r, c);
  return v;
}

double cell(const Tensor& t, Eigen::Index r) {
  return t.defined() ? t.value()(r, 0) : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

Mode parse_mode(std::string_view name) {
  for (const auto& [m, n] : kModeNames) {
    if (n == name) return m;
  }
  throw ConfigError("unknown model mode '" + std::string(name) + "'");
}

std::string_view mode_name(Mode mode) {
  for (const auto& [m, n] : kModeNames) {
    if (m == mode) return n;
  }
  return "?";
}

bool is_dcr_family(Mode mode) {
  return mode == Mode::dcr || mode == Mode::var0 || mode == Mode::var1 || mode == Mode::var2;
}

bool uses_counterfactual(Mode mode) { return is_dcr_family(mode) || mode == Mode::macr; }

bool is_pairwise(Mode mode) { return mode == Mode::base_bpr || mode == Mode::ipw_bpr; }

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{
      {"mode", std::string(mode_name(c.mode))},
      {"encoder",
       {{"kind", std::string(encoder_kind_name(c.encoder.kind))},
        {"dim", c.encoder.dim},
        {"layers", c.encoder.layers},
        {"heads", c.encoder.heads},
        {"dropout", c.encoder.dropout},
        {"max_length", c.encoder.max_length},
        {"dilations", c.encoder.dilations},
        {"kernel", c.encoder.kernel}}},
      {"num_items", c.num_items},
      {"num_users", c.num_users},
      {"user_dim", c.user_dim},
      {"interest_head", c.interest_head},
      {"popularity_head", c.popularity_head},
      {"atten_hidden", c.atten_hidden},
      {"alpha", c.weights.alpha},
      {"beta", c.weights.beta},
      {"gamma", c.weights.gamma},
      {"c", c.c},
      {"seed", c.seed},
  };
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.mode = parse_mode(j.at("mode").get<std::string>());
  const auto& e = j.at("encoder");
  c.encoder.kind = parse_encoder_kind(e.at("kind").get<std::string>());
  c.encoder.dim = e.at("dim").get<Eigen::Index>();
  c.encoder.layers = e.at("layers").get<int>();
  c.encoder.heads = e.at("heads").get<int>();
  c.encoder.dropout = e.at("dropout").get<double>();
  c.encoder.max_length = e.at("max_length").get<Eigen::Index>();
  c.encoder.dilations = e.at("dilations").get<std::vector<int>>();
  c.encoder.kernel = e.at("kernel").get<int>();
  c.num_items = j.at("num_items").get<std::size_t>();
  c.num_users = j.at("num_users").get<std::size_t>();
  c.user_dim = j.at("user_dim").get<Eigen::Index>();
  c.interest_head = j.at("interest_head").get<std::vector<Eigen::Index>>();
  c.popularity_head = j.at("popularity_head").get<std::vector<Eigen::Index>>();
  c.atten_hidden = j.at("atten_hidden").get<Eigen::Index>();
  c.weights.alpha = j.at("alpha").get<double>();
  c.weights.beta = j.at("beta").get<double>();
  c.weights.gamma = j.at("gamma").get<double>();
  c.c = j.at("c").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
}

RecModel::RecModel(const ModelConfig& config) : config_(config) {
  if (config_.num_items == 0) throw ConfigError("model needs at least one item");
  const Eigen::Index d = config_.encoder.dim;
  if (config_.interest_head.empty() || config_.popularity_head.empty() ||
      config_.interest_head.back() != d || config_.popularity_head.back() != d) {
    throw ConfigError("disentanglement heads must end in the encoder dimension");
  }
  if (config_.user_dim > 0 && config_.num_users == 0) {
    throw ConfigError("explicit user embeddings need num_users");
  }
  std::mt19937_64 rng(config_.seed);
  const bool with_users = config_.user_dim > 0;
  embeddings_ = EmbeddingTables(store_, config_.num_items, d, with_users ? config_.num_users : 0,
                                config_.user_dim, rng);
  if (is_dcr_family(config_.mode)) {
    item_popularity_ = nn::Mlp(store_, "item_popularity", d, config_.popularity_head, rng);
    item_interest_ = nn::Mlp(store_, "item_interest", d, config_.interest_head, rng);
    if (with_users) {
      user_conformity_ =
          nn::Mlp(store_, "user_conformity", config_.user_dim, config_.popularity_head, rng);
      user_interest_ =
          nn::Mlp(store_, "user_interest", config_.user_dim, config_.interest_head, rng);
      merge_con_ = PreferenceMerge(store_, "merge_con", d, d, d, rng);
      merge_int_ = PreferenceMerge(store_, "merge_int", d, d, d, rng);
    }
    con_encoder_ = make_encoder(store_, "con_encoder", config_.encoder, rng);
    int_encoder_ = make_encoder(store_, "int_encoder", config_.encoder, rng);
    if (config_.mode == Mode::dcr) {
      atten_ = nn::Mlp(store_, "atten_net", 4 * d, {config_.atten_hidden, 1}, rng);
    }
    item_pop_ = nn::Linear(store_, "item_popularity_score", d, 1, rng);
    user_conf_ = nn::Linear(store_, "user_conformity_score", d, 1, rng);
  } else {
    int_encoder_ = make_encoder(store_, "encoder", config_.encoder, rng);
    if (with_users) merge_int_ = PreferenceMerge(store_, "merge", d, config_.user_dim, d, rng);
    if (config_.mode == Mode::bias_tower) {
      bias_tower_ = nn::Linear(store_, "bias_tower", d, 1, rng);
    }
    if (config_.mode == Mode::macr) {
      item_pop_ = nn::Linear(store_, "item_popularity_score", d, 1, rng);
      user_conf_ = nn::Linear(store_, "user_conformity_score", d, 1, rng);
    }
  }
}

std::pair<Tensor, Tensor> RecModel::disentangle_user(const Tensor& e_u) const {
  if (config_.user_dim <= 0 || !is_dcr_family(config_.mode)) {
    throw ConfigError("disentangle_user needs explicit user embeddings in a DCR mode");
  }
  return {user_conformity_(e_u), user_interest_(e_u)};
}

std::pair<Tensor, Tensor> RecModel::disentangle_item(const Tensor& e_i) const {
  if (!is_dcr_family(config_.mode)) throw ConfigError("disentangle_item needs a DCR mode");
  return {item_popularity_(e_i), item_interest_(e_i)};
}

Tensor RecModel::embed_history(const UserBatch& batch) const {
  if (static_cast<Eigen::Index>(batch.history.size()) != batch.batch * batch.length) {
    throw std::invalid_argument("UserBatch: history size != batch * length");
  }
  return embeddings_.embed_items(batch.history);
}

UserStates RecModel::user_states(const UserBatch& batch, bool all_positions,
                                 const ForwardContext& ctx) const {
  if (batch.batch < 1 || batch.length < 1 ||
      static_cast<Eigen::Index>(batch.history.size()) != batch.batch * batch.length) {
    throw std::invalid_argument("UserBatch: history must be a non-empty batch x length grid");
  }
  const SequenceLayout layout = SequenceLayout::from_items(batch.history, batch.batch, batch.length);
  const Tensor x = embed_history(batch);
  const bool with_users = config_.user_dim > 0;
  if (with_users && static_cast<Eigen::Index>(batch.users.size()) != batch.batch) {
    throw std::invalid_argument("UserBatch: model needs one user index per sequence");
  }
  // Row r of the per-position (or per-user) output belongs to user r / L (or r).
  std::vector<std::int64_t> owner;
  std::vector<std::int64_t> last;
  if (all_positions) {
    owner.resize(static_cast<std::size_t>(batch.batch * batch.length));
    for (std::size_t r = 0; r < owner.size(); ++r) {
      owner[r] = static_cast<std::int64_t>(r) / batch.length;
    }
  } else {
    last = layout.last_rows();
    for (auto r : last) {
      if (layout.valid(r) == 0.0) {
        throw std::invalid_argument("encode: empty sequence (need at least one history item)");
      }
    }
    owner.resize(static_cast<std::size_t>(batch.batch));
    std::iota(owner.begin(), owner.end(), 0);
  }
  const auto pick = [&](const Tensor& per_pos) {
    return all_positions ? per_pos : ag::gather_rows(per_pos, last);
  };

  UserStates s;
  if (is_dcr_family(config_.mode)) {
    auto [pop_seq, int_seq] = disentangle_item(x);
    Tensor h_con = pick(con_encoder_->forward(pop_seq, layout, ctx));
    Tensor h_int = pick(int_encoder_->forward(int_seq, layout, ctx));
    if (with_users) {
      auto [e_con, e_int] = disentangle_user(embeddings_.embed_users(batch.users));
      s.e_con_u = e_con;
      s.e_int_u = e_int;
      const Tensor con_rows = ag::gather_rows(e_con, owner);
      const Tensor int_rows = ag::gather_rows(e_int, owner);
      s.pref_con = merge_con_(h_con, &con_rows);
      s.pref_int = merge_int_(h_int, &int_rows);
    } else {
      s.pref_con = h_con;
      s.pref_int = h_int;
    }
  } else {
    Tensor h = pick(int_encoder_->forward(x, layout, ctx));
    if (with_users) {
      const Tensor e_u = ag::gather_rows(embeddings_.embed_users(batch.users), owner);
      s.pref_int = merge_int_(h, &e_u);
    } else {
      s.pref_int = h;
    }
  }
  return s;
}

ItemStates RecModel::item_states(std::span<const std::int64_t> items) const {
  for (auto i : items) {
    if (i < 0 || static_cast<std::size_t>(i) >= config_.num_items) {
      throw std::out_of_range("unknown item index " + std::to_string(i));
    }
  }
  ItemStates s;
  s.e_i = embeddings_.embed_items(items);
  if (is_dcr_family(config_.mode)) {
    auto [pop, in] = disentangle_item(s.e_i);
    s.e_pop_i = pop;
    s.e_int_i = in;
  }
  return s;
}

UserStates RecModel::select_rows(const UserStates& states,
                                 std::span<const std::int64_t> rows) const {
  UserStates out = states;
  if (states.pref_con.defined()) out.pref_con = ag::gather_rows(states.pref_con, rows);
  if (states.pref_int.defined()) out.pref_int = ag::gather_rows(states.pref_int, rows);
  return out;
}

BatchOutputs RecModel::score(const UserStates& users, const ItemStates& items) const {
  BatchOutputs o;
  const Mode mode = config_.mode;
  if (is_dcr_family(mode)) {
    o.pref_con = users.pref_con;
    o.pref_int = users.pref_int;
    o.e_pop_i = items.e_pop_i;
    o.e_int_i = items.e_int_i;
    o.y_m_con = ag::rows_dot(items.e_pop_i, users.pref_con);
    o.y_m_int = ag::rows_dot(items.e_int_i, users.pref_int);
    const Eigen::Index n = o.y_m_int.rows();
    if (mode == Mode::dcr || mode == Mode::var0) {
      if (mode == Mode::dcr) {
        o.w_int = ag::sigmoid(atten_(ag::concat_cols(
            {items.e_int_i, users.pref_int, items.e_pop_i, users.pref_con})));
      } else {
        o.w_int = Tensor::constant(Matrix::Ones(n, 1));
      }
      o.y_m = ag::add(ag::mul(o.w_int, o.y_m_int),
                      ag::mul(ag::add_scalar(ag::scale(o.w_int, -1.0), 1.0), o.y_m_con));
    } else {
      o.y_m = ag::add(o.y_m_con, o.y_m_int);
    }
    o.y_i = item_pop_(items.e_pop_i);
    o.y_u = user_conf_(users.pref_con);
    o.y_hat = ag::mul(ag::mul(o.y_m, ag::sigmoid(o.y_u)), ag::sigmoid(o.y_i));
    o.y_train = o.y_hat;
    if (users.e_con_u.defined()) {
      o.ortho_user_a = users.e_con_u;
      o.ortho_user_b = users.e_int_u;
    } else {
      o.ortho_user_a = users.pref_con;
      o.ortho_user_b = users.pref_int;
    }
    return o;
  }
  o.pref_int = users.pref_int;
  const Tensor match = ag::rows_dot(items.e_i, users.pref_int);
  o.y_m = match;
  if (mode == Mode::macr) {
    o.y_i = item_pop_(items.e_i);
    o.y_u = user_conf_(users.pref_int);
    o.y_hat = ag::mul(ag::mul(match, ag::sigmoid(o.y_u)), ag::sigmoid(o.y_i));
    o.y_train = o.y_hat;
  } else if (mode == Mode::bias_tower) {
    o.y_hat = match;
    o.y_train = ag::add(match, bias_tower_(items.e_i));
  } else {
    o.y_hat = match;
    o.y_train = match;
  }
  return o;
}

double counterfactual_score(double y_hat, double y_u, double y_i, double c) {
  return y_hat - c * ag::sigmoid(y_u) * ag::sigmoid(y_i);
}

Vector RecModel::ranking_scores(const BatchOutputs& out) const {
  const Eigen::Index n = out.y_hat.rows();
  Vector s(n);
  const bool cf = uses_counterfactual(config_.mode);
  for (Eigen::Index r = 0; r < n; ++r) {
    s(r) = cf ? counterfactual_score(out.y_hat.value()(r, 0), out.y_u.value()(r, 0),
                                     out.y_i.value()(r, 0), config_.c)
              : out.y_hat.value()(r, 0);
  }
  return s;
}

ForwardOutputs RecModel::forward_one(std::span<const std::int64_t> history, std::int64_t item,
                                     std::int64_t user) const {
  ag::NoGradGuard no_grad;
  UserBatch batch;
  batch.history.assign(history.begin(), history.end());
  batch.batch = 1;
  batch.length = static_cast<Eigen::Index>(history.size());
  if (user >= 0) batch.users = {user};
  const UserStates us = user_states(batch, false, ForwardContext{});
  const std::int64_t items[] = {item};
  const BatchOutputs o = score(us, item_states(items));
  ForwardOutputs f;
  f.y_hat = cell(o.y_hat, 0);
  f.y_m = cell(o.y_m, 0);
  f.y_m_int = cell(o.y_m_int, 0);
  f.y_m_con = cell(o.y_m_con, 0);
  f.y_i = cell(o.y_i, 0);
  f.y_u = cell(o.y_u, 0);
  f.w_int = cell(o.w_int, 0);
  f.e_con_u = row_vector(us.e_con_u, 0);
  f.e_int_u = row_vector(us.e_int_u, 0);
  f.e_pop_i = row_vector(o.e_pop_i, 0);
  f.e_int_i = row_vector(o.e_int_i, 0);
  f.pref_con = row_vector(o.pref_con, 0);
  f.pref_int = row_vector(o.pref_int, 0);
  return f;
}

std::vector<RankedItem> rank_by_score(std::span<const std::int64_t> items,
                                      std::span<const double> scores) {
  if (items.size() != scores.size()) throw std::invalid_argument("rank: size mismatch");
  std::vector<RankedItem> out(items.size());
  for (std::size_t k = 0; k < items.size(); ++k) out[k] = {items[k], scores[k]};
  std::stable_sort(out.begin(), out.end(), [](const RankedItem& a, const RankedItem& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.item < b.item;
  });
  return out;
}

std::vector<RankedItem> score_candidates(const RecModel& model,
                                         std::span<const std::int64_t> history,
                                         std::span<const std::int64_t> candidates, double c,
                                         std::int64_t user) {
  if (candidates.empty()) throw std::invalid_argument("score_candidates: no candidates");
  ag::NoGradGuard no_grad;
  UserBatch batch;
  batch.history.assign(history.begin(), history.end());
  batch.batch = 1;
  batch.length = static_cast<Eigen::Index>(history.size());
  if (user >= 0) batch.users = {user};
  const UserStates us = model.user_states(batch, false, ForwardContext{});
  const std::vector<std::int64_t> rows(candidates.size(), 0);
  const BatchOutputs o = model.score(model.select_rows(us, rows), model.item_states(candidates));
  std::vector<double> scores(candidates.size());
  const bool cf = uses_counterfactual(model.config().mode);
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    scores[k] = cf ? counterfactual_score(o.y_hat.value()(r, 0), o.y_u.value()(r, 0),
                                          o.y_i.value()(r, 0), c)
                   : o.y_hat.value()(r, 0);
  }
  return rank_by_score(candidates, scores);
}

}  // namespace dcr::model
