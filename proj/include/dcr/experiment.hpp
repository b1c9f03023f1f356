#pragma once

// Experiment specs, grid sweeps with seed repetition, result tables and
// SVG plots. Shared by the `dcr` command-line tool and the Python module.

#include "dcr/dataset.hpp"
#include "dcr/evaluation.hpp"
#include "dcr/model.hpp"
#include "dcr/training.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dcr::exp {

using nlohmann::json;

struct DatasetSpec {
  // "synthetic", "ml-1m", "amazon-beauty", "steam", or "file" (explicit path + format).
  std::string id = "synthetic";
  std::string path;    // relative to the data root unless absolute
  std::string format;  // movielens_dat | amazon_csv | steam_json | dataset (prepared file)
  int min_count = 5;
  data::SyntheticConfig synthetic;
};

struct SweepAxis {
  std::string name;  // dotted path, e.g. "model.alpha"
  std::vector<json> values;
};

struct ExperimentSpec {
  std::string name = "experiment";
  DatasetSpec dataset;
  model::ModelConfig model;
  train::TrainConfig train;
  eval::EvalProtocol eval;
  std::vector<std::int64_t> bucket_boundaries{100, 1000};
  bool exposure = true;
  std::vector<SweepAxis> sweep;
  int repeat = 10;
  std::string reference_mode;  // empty: no significance column
  std::string output_dir = "runs";
  int jobs = 1;
};

// Strict parsing: unknown keys and sweep axes that name no config field are
// ConfigErrors.
ExperimentSpec parse_spec(const json& j);
ExperimentSpec load_spec(const std::filesystem::path& path);
// Fully defaulted canonical form.
json spec_to_json(const ExperimentSpec& spec);

// FNV-1a over the canonical JSON text, as 16 hex digits.
std::string config_hash(const json& j);

std::filesystem::path data_root();
data::InteractionDataset load_dataset(const DatasetSpec& spec);

// One (sweep point, seed) cell, or its failure.
struct CellResult {
  std::map<std::string, std::string> point;
  int seed_index = 0;
  bool ok = false;
  std::string error;
  int best_epoch = 0;
  int epochs = 0;
  double val_ndcg = 0.0, val_hit = 0.0;
  double test_ndcg = 0.0, test_hit = 0.0;
  std::vector<double> exposure_share;
  double seconds = 0.0;
};

struct PointSummary {
  std::map<std::string, std::string> point;
  int runs = 0;
  int failures = 0;
  double val_ndcg = 0.0, test_ndcg = 0.0, test_hit = 0.0;
  double test_ndcg_std = 0.0;
  std::optional<double> p_value;  // vs the reference mode at the same other settings
  std::vector<double> exposure_share;
};

struct ResultTable {
  std::string name;
  std::string spec_hash;
  std::vector<std::string> axes;
  std::vector<std::string> bucket_labels;
  std::vector<double> bucket_item_ratio;
  double gini_train = 0.0;
  std::vector<CellResult> cells;
  std::vector<PointSummary> summary;
};

json to_json(const ResultTable& table);
ResultTable table_from_json(const json& j);

// preprocess -> fit -> evaluate for every sweep point and seed. The "model.c"
// axis is applied at inference time to a single trained model per cell.
ResultTable run(const ExperimentSpec& spec);
ResultTable run(const ExperimentSpec& spec, const data::InteractionDataset& dataset);

void summarize(ResultTable& table, const std::string& reference_mode);

void write_table(const ResultTable& table, const std::filesystem::path& dir);
ResultTable read_table(const std::filesystem::path& dir);
std::string format_table(const ResultTable& table);

enum class PlotKind { sweep_curve, exposure_bars };
PlotKind parse_plot_kind(std::string_view name);
// Writes an SVG; throws on an empty table.
void plot(const ResultTable& table, PlotKind kind, const std::filesystem::path& out);

}  // namespace dcr::exp
