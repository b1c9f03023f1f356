#pragma once

// The DCR architecture (disentangled conformity/interest towers, dual
// sequence encoders, attention-blended matching, direct-effect heads and
// counterfactual inference) together with the baseline and ablation modes
// that share its plumbing.

#include "dcr/autograd.hpp"
#include "dcr/encoders.hpp"
#include "dcr/nn.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dcr::model {

enum class Mode { dcr, var0, var1, var2, base_bce, base_bpr, bias_tower, ipw_bce, ipw_bpr, macr };

Mode parse_mode(std::string_view name);
std::string_view mode_name(Mode mode);
bool is_dcr_family(Mode mode);       // dcr, var0, var1, var2
bool uses_counterfactual(Mode mode);  // DCR family and MACR
bool is_pairwise(Mode mode);          // base_bpr, ipw_bpr

struct LossWeights {
  double alpha = 2e-2;
  double beta = 2e-2;
  double gamma = 5e-1;
};

struct ModelConfig {
  Mode mode = Mode::dcr;
  EncoderConfig encoder;
  std::size_t num_items = 0;
  std::size_t num_users = 0;
  // > 0 enables explicit user embeddings and perceptron merging.
  Eigen::Index user_dim = 0;
  std::vector<Eigen::Index> interest_head{150, 50};
  std::vector<Eigen::Index> popularity_head{100, 50};
  Eigen::Index atten_hidden = 50;
  LossWeights weights;
  double c = 0.0;  // counterfactual reference constant
  std::uint64_t seed = 42;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Per-pair scores of one scoring pass. For baselines, only y_hat (and for
// MACR, y_m / y_i / y_u) carry meaning.
struct ForwardOutputs {
  double y_hat = 0.0;
  double y_m = 0.0;
  double y_m_int = 0.0;
  double y_m_con = 0.0;
  double y_i = 0.0;
  double y_u = 0.0;
  double w_int = 0.0;
  std::vector<double> e_con_u, e_int_u, e_pop_i, e_int_i, pref_con, pref_int;
};

// Column tensors (rows = scored pairs) of a batched pass.
struct BatchOutputs {
  Tensor y_hat;    // fused prediction (DCR) or match score (baselines)
  Tensor y_train;  // score fed to the main loss (differs from y_hat for bias_tower)
  Tensor y_m, y_m_int, y_m_con, w_int, y_i, y_u;
  Tensor e_pop_i, e_int_i;
  Tensor pref_con, pref_int;
  // Disentangled pairs for the orthogonality losses.
  Tensor ortho_user_a, ortho_user_b;
};

// Sequence contexts for a batch of users: history items (left padded,
// batch x length) and, when the model has user embeddings, user indices.
struct UserBatch {
  std::vector<std::int64_t> history;
  Eigen::Index batch = 0;
  Eigen::Index length = 0;
  std::vector<std::int64_t> users;
};

// User-side states; rows align with whatever the caller asked for (every
// position, or the last position per user).
struct UserStates {
  Tensor pref_con;  // DCR family
  Tensor pref_int;  // DCR family; baselines store pref here
  Tensor e_con_u, e_int_u;  // explicit-user mode only, one row per user
};

struct ItemStates {
  Tensor e_i, e_pop_i, e_int_i;
};

class RecModel {
 public:
  explicit RecModel(const ModelConfig& config);
  RecModel(const RecModel&) = delete;
  RecModel& operator=(const RecModel&) = delete;

  const ModelConfig& config() const { return config_; }
  nn::ParameterStore& parameters() { return store_; }
  const nn::ParameterStore& parameters() const { return store_; }
  const EmbeddingTables& embeddings() const { return embeddings_; }
  void set_c(double c) { config_.c = c; }

  // Per-position user states (rows = batch * length) or the last position
  // of each sequence (rows = batch).
  UserStates user_states(const UserBatch& batch, bool all_positions,
                         const ForwardContext& ctx) const;
  ItemStates item_states(std::span<const std::int64_t> items) const;
  // Selects rows of user states (pair expansion) and scores against items.
  UserStates select_rows(const UserStates& states, std::span<const std::int64_t> rows) const;
  BatchOutputs score(const UserStates& users, const ItemStates& items) const;

  // Score used for ranking: counterfactual adjustment for DCR/MACR modes.
  Vector ranking_scores(const BatchOutputs& out) const;

  // Single (history, item) pass, mainly for inspection and tests.
  ForwardOutputs forward_one(std::span<const std::int64_t> history, std::int64_t item,
                             std::int64_t user = -1) const;

  // --- individual blocks, exposed for tests ---
  std::pair<Tensor, Tensor> disentangle_user(const Tensor& e_u) const;
  std::pair<Tensor, Tensor> disentangle_item(const Tensor& e_i) const;
  const SequenceEncoder& conformity_encoder() const { return *con_encoder_; }
  const SequenceEncoder& interest_encoder() const { return *int_encoder_; }
  nn::Mlp& atten_net() { return atten_; }
  nn::Linear& item_popularity_head() { return item_pop_; }
  nn::Linear& user_conformity_head() { return user_conf_; }

 private:
  Tensor embed_history(const UserBatch& batch) const;

  ModelConfig config_;
  nn::ParameterStore store_;
  EmbeddingTables embeddings_;
  // DCR family: con/int encoders; baselines use int_encoder_ only.
  std::unique_ptr<SequenceEncoder> con_encoder_;
  std::unique_ptr<SequenceEncoder> int_encoder_;
  nn::Mlp user_conformity_, user_interest_, item_popularity_, item_interest_;
  PreferenceMerge merge_con_, merge_int_;
  nn::Mlp atten_;
  nn::Linear item_pop_;   // ItemPopularity: 50 -> 1
  nn::Linear user_conf_;  // UserConformity: 50 -> 1
  nn::Linear bias_tower_; // bias_tower: item tower 50 -> 1
};

// y_hat - c * sigmoid(y_u) * sigmoid(y_i)
double counterfactual_score(double y_hat, double y_u, double y_i, double c);

struct RankedItem {
  std::int64_t item = 0;
  double score = 0.0;
};

// Descending by score; ties go to the lower item index.
std::vector<RankedItem> rank_by_score(std::span<const std::int64_t> items,
                                      std::span<const double> scores);

// One forward pass per candidate (batched), counterfactual adjustment with
// `c`, then deterministic descending ranking.
std::vector<RankedItem> score_candidates(const RecModel& model,
                                         std::span<const std::int64_t> history,
                                         std::span<const std::int64_t> candidates, double c,
                                         std::int64_t user = -1);

}  // namespace dcr::model
