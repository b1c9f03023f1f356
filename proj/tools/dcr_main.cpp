// dcr: experiment runner for the DCR toolkit.
//
//   dcr prepare <dataset>        preprocess a raw log into DCR_DATA_ROOT/prepared/<dataset>
//   dcr train <spec.json>        one run per sweep point, single seed
//   dcr evaluate <checkpoint>    unbiased test metrics of a saved model
//   dcr sweep <spec.json>        full grid x seeds with significance vs a reference mode
//   dcr report <dir>             print a result table
//   dcr plot <dir>               SVG sweep curve / exposure bars

#include "dcr/dataset.hpp"
#include "dcr/error.hpp"
#include "dcr/evaluation.hpp"
#include "dcr/experiment.hpp"
#include "dcr/training.hpp"
#include "dcr/version.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int fail(std::string_view kind, std::string_view message, int code) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << '\n';
  return code;
}

int cmd_prepare(const std::string& id, const std::string& path, const std::string& format,
                int min_count, const std::string& out_dir) {
  dcr::exp::DatasetSpec spec;
  spec.id = id;
  spec.path = path;
  spec.format = format;
  spec.min_count = min_count;
  const auto ds = dcr::exp::load_dataset(spec);
  const fs::path dir = out_dir.empty() ? dcr::exp::data_root() / "prepared" / id : fs::path(out_dir);
  fs::create_directories(dir);
  dcr::data::save_dataset(ds, dir / "dataset.tsv");
  const auto props = dcr::data::compute_propensities(ds, 0.5, 0.5, 1e-3);
  dcr::data::save_propensities(props, dir / "propensities.tsv");
  const json stats{{"dataset", id},
                   {"users", ds.num_users()},
                   {"items", ds.num_items()},
                   {"interactions", ds.num_interactions()},
                   {"gini_train", dcr::data::gini_index(ds.train_counts())},
                   {"gini_all", dcr::data::gini_index(ds.all_counts())}};
  std::ofstream(dir / "stats.json") << stats.dump(2) << '\n';
  std::cout << stats.dump(2) << '\n';
  return 0;
}

int cmd_run(const std::string& spec_path, bool single, int repeat) {
  auto spec = dcr::exp::load_spec(spec_path);
  if (single) spec.repeat = 1;
  if (repeat > 0) spec.repeat = repeat;
  const auto table = dcr::exp::run(spec);
  std::cout << dcr::exp::format_table(table);
  std::size_t failed = 0;
  for (const auto& c : table.cells) failed += c.ok ? 0 : 1;
  return failed == table.cells.size() ? 3 : 0;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& spec_path,
                 const std::string& dataset_id, const std::string& split, double c, bool set_c,
                 const std::string& reweighting, int k, const std::string& out) {
  auto m = dcr::train::load_checkpoint(checkpoint);
  dcr::exp::ExperimentSpec spec;
  if (!spec_path.empty()) spec = dcr::exp::load_spec(spec_path);
  if (!dataset_id.empty()) spec.dataset.id = dataset_id;
  const auto ds = dcr::exp::load_dataset(spec.dataset);
  if (ds.num_items() != m->config().num_items) {
    throw dcr::DataError("checkpoint was trained on a catalogue of a different size");
  }
  if (set_c) m->set_c(c);
  dcr::eval::EvalProtocol protocol = spec.eval;
  if (!reweighting.empty()) protocol.reweighting = dcr::eval::parse_reweighting(reweighting);
  if (k > 0) protocol.k = k;
  protocol.max_length = m->config().encoder.max_length;
  const auto tsplit = dcr::data::training_split(ds);
  const auto props =
      dcr::data::compute_propensities(tsplit, spec.train.omega, spec.train.rho, spec.train.eps);
  const auto cases =
      split == "validation" ? dcr::eval::validation_cases(tsplit) : dcr::eval::test_cases(ds);
  auto report = dcr::eval::evaluate_unbiased(*m, cases, protocol, props);
  const auto counts = tsplit.train_counts();
  const auto buckets = dcr::data::popularity_buckets(counts, spec.bucket_boundaries);
  report.bucket_labels = buckets.labels;
  report.bucket_item_ratio = buckets.item_ratio;
  report.gini = dcr::data::gini_index(counts);
  if (spec.exposure) {
    report.exposure_share = dcr::eval::exposure_analysis(*m, cases, protocol.k, buckets,
                                                         protocol.max_length, protocol.threads);
  }
  report.config_hash = dcr::exp::config_hash(json(m->config()));
  if (!out.empty()) dcr::eval::save_report(report, out);
  std::cout << json{{"split", split},
                    {"ndcg_at_k", report.ndcg},
                    {"hit_rate_at_k", report.hit_rate},
                    {"k", report.k},
                    {"c", m->config().c},
                    {"exposure_share", report.exposure_share}}
                   .dump(2)
            << '\n';
  return 0;
}

int cmd_plot(const std::string& dir, const std::string& kind, const std::string& out) {
  const auto table = dcr::exp::read_table(dir);
  const fs::path base = fs::is_directory(dir) ? fs::path(dir) : fs::path(dir).parent_path();
  const auto draw = [&](const std::string& k) {
    const fs::path target = out.empty() || kind == "all" ? base / (k + ".svg") : fs::path(out);
    dcr::exp::plot(table, dcr::exp::parse_plot_kind(k), target);
    std::cout << target.string() << '\n';
  };
  if (kind == "all") {
    draw("sweep_curve");
    bool has_exposure = false;
    for (const auto& s : table.summary) has_exposure |= !s.exposure_share.empty();
    if (has_exposure) draw("exposure_bars");
  } else {
    draw(kind);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DCR debiased sequential recommendation toolkit"};
  app.set_version_flag("--version", std::string(dcr::kVersion) + " (" +
                                        std::string(dcr::kGitVersion) + ")");
  app.require_subcommand(1);

  std::string dataset, path, format, out, spec_path, checkpoint, split = "test", reweighting,
                                                                  dir, kind = "all";
  int min_count = 5, repeat = 0, k = 0;
  double c = 0.0;

  auto* prepare = app.add_subcommand("prepare", "preprocess a dataset and write its statistics");
  prepare->add_option("dataset", dataset, "synthetic | ml-1m | amazon-beauty | steam | file")
      ->required();
  prepare->add_option("--path", path, "raw file (relative to DCR_DATA_ROOT)");
  prepare->add_option("--format", format, "movielens_dat | amazon_csv | steam_json");
  prepare->add_option("--min-count", min_count, "k-core threshold");
  prepare->add_option("--out", out, "output directory");

  auto* train = app.add_subcommand("train", "train and evaluate each sweep point once");
  train->add_option("spec", spec_path, "experiment spec (JSON)")->required()->check(CLI::ExistingFile);

  auto* sweep = app.add_subcommand("sweep", "run every sweep point for every seed");
  sweep->add_option("spec", spec_path, "experiment spec (JSON)")->required()->check(CLI::ExistingFile);
  sweep->add_option("--repeat", repeat, "override the spec's repeat count");

  auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint");
  evaluate->add_option("checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  evaluate->add_option("--spec", spec_path, "spec providing dataset/eval settings");
  evaluate->add_option("--dataset", dataset, "dataset id (overrides the spec)");
  evaluate->add_option("--split", split, "test | validation")
      ->check(CLI::IsMember({"test", "validation"}));
  auto* c_opt = evaluate->add_option("--c", c, "counterfactual reference constant");
  evaluate->add_option("--reweighting", reweighting, "ipw | raw_count | none");
  evaluate->add_option("--k", k, "cutoff");
  evaluate->add_option("--out", out, "write the report JSON here");

  auto* report = app.add_subcommand("report", "print the result table of a run directory");
  report->add_option("dir", dir)->required()->check(CLI::ExistingPath);

  auto* plot = app.add_subcommand("plot", "write SVG plots for a run directory");
  plot->add_option("dir", dir)->required()->check(CLI::ExistingPath);
  plot->add_option("--kind", kind)->check(CLI::IsMember({"all", "sweep_curve", "exposure_bars"}));
  plot->add_option("--out", out, "output file (single kind only)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*prepare) return cmd_prepare(dataset, path, format, min_count, out);
    if (*train) return cmd_run(spec_path, true, 0);
    if (*sweep) return cmd_run(spec_path, false, repeat);
    if (*evaluate) {
      return cmd_evaluate(checkpoint, spec_path, dataset, split, c, c_opt->count() > 0,
                          reweighting, k, out);
    }
    if (*report) {
      std::cout << dcr::exp::format_table(dcr::exp::read_table(dir));
      return 0;
    }
    if (*plot) return cmd_plot(dir, kind, out);
  } catch (const dcr::Error& e) {
    return fail(e.kind(), e.what(), 2);
  } catch (const nlohmann::json::exception& e) {
    return fail("format", e.what(), 2);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return 0;
}
