#pragma once

// Interaction-log ingestion, k-core preprocessing, leave-one-out splits,
// item propensities and popularity statistics.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dcr::data {

enum class RawFormat { movielens_dat, amazon_csv, steam_json };

RawFormat parse_format(std::string_view tag);
std::string_view format_name(RawFormat format);

struct RawInteraction {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;
  // A rating or review is present; every record is positive implicit feedback.
  bool has_feedback = true;
};

std::vector<RawInteraction> parse_raw(std::istream& in, RawFormat format);
std::vector<RawInteraction> load_raw(const std::filesystem::path& path, RawFormat format);

struct PreprocessOptions {
  int min_count = 5;
  // Repeat the user/item filter until nothing changes; false = a single pass.
  bool iterative = true;
};

// Dense-indexed per-user chronological sequences. The last item of each
// sequence is the test item, the one before it the validation item, and
// everything earlier the training prefix.
class InteractionDataset {
 public:
  InteractionDataset() = default;
  InteractionDataset(std::vector<std::string> user_ids, std::vector<std::string> item_ids,
                     std::vector<std::vector<std::int32_t>> sequences);

  std::size_t num_users() const { return sequences_.size(); }
  std::size_t num_items() const { return item_ids_.size(); }
  std::size_t num_interactions() const;

  const std::vector<std::string>& user_ids() const { return user_ids_; }
  const std::vector<std::string>& item_ids() const { return item_ids_; }
  std::span<const std::int32_t> sequence(std::size_t user) const { return sequences_[user]; }
  std::span<const std::int32_t> train(std::size_t user) const;
  std::int32_t validation(std::size_t user) const;
  std::int32_t test(std::size_t user) const;

  // Per-item interaction counts over training prefixes only, or over everything.
  std::vector<std::int64_t> train_counts() const;
  std::vector<std::int64_t> all_counts() const;

 private:
  std::vector<std::string> user_ids_;
  std::vector<std::string> item_ids_;
  std::vector<std::vector<std::int32_t>> sequences_;
};

// What model fitting may see: training prefixes and validation items, no test items.
struct TrainingSplit {
  std::size_t num_items = 0;
  std::vector<std::vector<std::int32_t>> train;
  std::vector<std::int32_t> validation;

  std::size_t num_users() const { return train.size(); }
  std::vector<std::int64_t> train_counts() const;
};

TrainingSplit training_split(const InteractionDataset& dataset);

// k-core filter, dense re-indexing (first-appearance order), stable
// chronological sort and leave-one-out split. Throws DataError when nothing survives.
InteractionDataset preprocess(std::span<const RawInteraction> raw, PreprocessOptions options = {});

// Reconstructs raw records (timestamps = sequence positions) so a dataset can
// be fed back through preprocess.
std::vector<RawInteraction> to_raw(const InteractionDataset& dataset);

struct PropensityTable {
  std::vector<std::int64_t> counts;
  std::vector<double> theta_pos;
  std::vector<double> theta_neg;
  double omega = 0.5;
  double rho = 0.5;
  double eps = 1e-3;
};

// theta+ = (n / max n)^omega, theta- = (1 - n / max n)^rho, both clamped below at eps.
PropensityTable compute_propensities(std::span<const std::int64_t> counts, double omega,
                                     double rho, double eps);
PropensityTable compute_propensities(const InteractionDataset& dataset, double omega, double rho,
                                     double eps);
PropensityTable compute_propensities(const TrainingSplit& split, double omega, double rho,
                                     double eps);

// Gini coefficient of a count distribution:
//   G = sum_{i=1..n} (2i - n - 1) x_(i) / (n * sum x),  x_(i) sorted ascending.
double gini_index(std::span<const std::int64_t> counts);

struct BucketAssignment {
  std::vector<int> bucket;          // per item
  std::vector<double> item_ratio;   // per bucket, fraction of items
  std::vector<std::string> labels;  // "<100", "100-1000", ">=1000"
};

// Bucket b holds counts in [boundaries[b-1], boundaries[b]) with open ends.
BucketAssignment popularity_buckets(std::span<const std::int64_t> counts,
                                    std::span<const std::int64_t> boundaries);

// ---- canonical on-disk forms ----
inline constexpr int kDatasetSchemaVersion = 1;
inline constexpr int kPropensitySchemaVersion = 1;

void save_dataset(const InteractionDataset& dataset, const std::filesystem::path& path);
InteractionDataset load_dataset(const std::filesystem::path& path);
void save_propensities(const PropensityTable& table, const std::filesystem::path& path);
PropensityTable load_propensities(const std::filesystem::path& path);

// ---- synthetic logs with controllable popularity bias ----
struct SyntheticConfig {
  int num_users = 400;
  int num_items = 200;
  int min_length = 12;
  int max_length = 40;
  int clusters = 8;
  double zipf_exponent = 1.1;
  // Probability that the next item follows the user's interest chain rather
  // than popularity-driven exposure.
  double interest_prob = 0.6;
  std::uint64_t seed = 7;
};

std::vector<RawInteraction> generate_synthetic(const SyntheticConfig& config);

}  // namespace dcr::data
