#pragma once

// Sampled-negative ranking evaluation with inverse-propensity reweighting,
// popularity-exposure analysis and Welch significance testing.

#include "dcr/dataset.hpp"
#include "dcr/model.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace dcr::eval {

enum class Reweighting { ipw, raw_count, none };

Reweighting parse_reweighting(std::string_view name);
std::string_view reweighting_name(Reweighting r);

struct EvalProtocol {
  int k = 10;
  int num_negatives = 100;
  Reweighting reweighting = Reweighting::ipw;
  std::uint64_t seed = 2023;
  Eigen::Index max_length = 200;  // history truncation
  int batch_users = 128;
  int threads = 1;
};

// One user's ranking problem: history -> held-out positive. `excluded`
// (sorted) lists items that may not be drawn as negatives.
struct EvalCase {
  std::int64_t user = 0;
  std::vector<std::int64_t> history;
  std::int64_t positive = 0;
  std::vector<std::int64_t> excluded;
};

// Validation: history = train prefix, excluded = train prefix + validation item.
std::vector<EvalCase> validation_cases(const data::TrainingSplit& split);
// Test: history = train prefix + validation item, excluded = full sequence.
std::vector<EvalCase> test_cases(const data::InteractionDataset& dataset);

// `n` distinct items drawn uniformly from [0, num_items) \ (excluded U {positive}).
// Deterministic in (seed, user).
std::vector<std::int64_t> sample_negatives(std::int64_t user, std::int64_t positive,
                                           std::size_t num_items, int n, std::uint64_t seed,
                                           std::span<const std::int64_t> excluded = {});

struct RankMetrics {
  double ndcg = 0.0;
  double hit = 0.0;
};

// Single relevant item at 1-based `rank`: hit = [rank <= k], ndcg = 1/log2(rank + 1).
RankMetrics rank_metrics(std::size_t rank, int k);

// 1-based rank of `positive` among `items` under descending score with
// lower-index tie-break.
std::size_t positive_rank(std::span<const std::int64_t> items, std::span<const double> scores,
                          std::int64_t positive);

// sum w_u m_u / sum w_u
double weighted_mean(std::span<const double> values, std::span<const double> weights);

double instance_weight(std::int64_t positive, const data::PropensityTable& props,
                       Reweighting reweighting);

struct EvalReport {
  int k = 10;
  double ndcg = 0.0;
  double hit_rate = 0.0;
  std::size_t num_cases = 0;
  std::vector<std::string> bucket_labels;
  std::vector<double> bucket_item_ratio;
  std::vector<double> exposure_share;
  double gini = 0.0;
  std::uint64_t seed = 0;
  Reweighting reweighting = Reweighting::ipw;
  std::string config_hash;
  std::string version;
  std::vector<double> per_case_ndcg;
  std::vector<double> per_case_hit;
  std::vector<double> per_case_weight;
};

// Scores every case against its positive and sampled negatives.
EvalReport evaluate_unbiased(const model::RecModel& model, std::span<const EvalCase> cases,
                             const EvalProtocol& protocol, const data::PropensityTable& props);

// Share of top-k recommendation slots falling in each popularity bucket.
// Candidates are all items outside the case's history.
std::vector<double> exposure_analysis(const model::RecModel& model,
                                      std::span<const EvalCase> cases, int k,
                                      const data::BucketAssignment& buckets,
                                      Eigen::Index max_length, int threads = 1);

// One-tailed Welch t-test for mean(a) > mean(b); returns the p-value.
double significance_test(std::span<const double> a, std::span<const double> b);

void save_report(const EvalReport& report, const std::filesystem::path& path);
EvalReport load_report(const std::filesystem::path& path);

}  // namespace dcr::eval
