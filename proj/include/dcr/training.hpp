#pragma once

// Next-step example batching, the multi-task training loop, early stopping
// on validation NDCG and checkpoint files.

#include "dcr/dataset.hpp"
#include "dcr/evaluation.hpp"
#include "dcr/losses.hpp"
#include "dcr/model.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace dcr::train {

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 128;  // user sequences per batch
  int max_epochs = 200;
  int patience = 40;
  std::uint64_t seed = 2023;
  double clip_global_norm = 0.0;
  // Propensity exponents and floor used by the IPW losses.
  double omega = 0.5;
  double rho = 0.5;
  double eps = 1e-3;
  eval::EvalProtocol validation;
  std::filesystem::path metrics_log;  // empty: no log file
  bool verbose = false;
};

void validate(const TrainConfig& config);

// One optimizer step's worth of next-step examples. `inputs` holds the
// left-padded input sequences; example k reads the encoder state at flat row
// rows[k] and scores positives[k] against negatives[k].
struct Batch {
  std::size_t id = 0;
  model::UserBatch inputs;
  std::vector<std::int64_t> rows;
  std::vector<std::int64_t> positives;
  std::vector<std::int64_t> negatives;
};

// Users are shuffled by `epoch_seed`; each user of training length n
// contributes the n - 1 steps (truncated to the last `max_length`).
std::vector<Batch> make_batches(const data::TrainingSplit& split, int batch_size,
                                Eigen::Index max_length, std::uint64_t epoch_seed);

struct EpochRecord {
  int epoch = 0;
  double main = 0.0, interest = 0.0, conformity = 0.0, item = 0.0, user = 0.0;
  double ortho_user = 0.0, ortho_item = 0.0, total = 0.0;
  double val_ndcg = 0.0, val_hit = 0.0;
  double seconds = 0.0;
};

struct TrainState {
  int epoch = 0;
  double best_metric = -1.0;
  int best_epoch = 0;
  int since_improvement = 0;
  std::vector<EpochRecord> log;
  std::vector<std::string> warnings;
};

// Labels/propensities for a batch laid out as positives then negatives.
loss::LabelledBatch label_batch(const Batch& batch, const data::PropensityTable& props);

// Forward + loss for one batch (no optimizer step).
loss::LossComponents batch_losses(const model::RecModel& model, const Batch& batch,
                                  const data::PropensityTable& props,
                                  const model::ForwardContext& ctx);

// One optimizer step per batch; returns epoch means of each loss component.
// Throws NumericError naming the batch and component values on a non-finite loss.
EpochRecord train_epoch(model::RecModel& model, std::span<const Batch> batches,
                        const data::PropensityTable& props, nn::Adam& optimizer,
                        std::mt19937_64& dropout_rng);

// Early-stopping bookkeeping for one finished epoch; true when training should stop.
bool record_epoch(TrainState& state, const EpochRecord& rec, int patience);

// Trains on the split with early stopping on validation NDCG@K and restores
// the best parameters before returning.
TrainState fit(model::RecModel& model, const data::TrainingSplit& split,
               const TrainConfig& config);

void write_metrics_header(std::ostream& out);
void write_metrics_row(std::ostream& out, const EpochRecord& r);

// ---- checkpoints ----
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const model::RecModel& model, const std::filesystem::path& path);
std::unique_ptr<model::RecModel> load_checkpoint(const std::filesystem::path& path);

}  // namespace dcr::train
