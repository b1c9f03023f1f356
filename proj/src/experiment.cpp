#include "dcr/experiment.hpp"

#include "dcr/error.hpp"
#include "dcr/version.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace dcr::exp {

namespace {

void check_keys(const json& j, std::initializer_list<std::string_view> allowed,
                std::string_view where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError("unknown key '" + key + "' in " + std::string(where));
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, std::string_view where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(where) + "." + key + ": " + e.what());
  }
}

std::string value_text(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_float()) {
    std::ostringstream s;
    s << std::setprecision(12) << v.get<double>();
    return s.str();
  }
  return v.dump();
}

std::string axis_pointer(const std::string& name) {
  std::string p = "/" + name;
  std::replace(p.begin(), p.end(), '.', '/');
  return p;
}

bool is_number(const std::string& s, double* out = nullptr) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) return false;
  if (out) *out = v;
  return true;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace

// ---- spec parsing ----

ExperimentSpec parse_spec(const json& j) {
  check_keys(j, {"name", "dataset", "model", "train", "eval", "sweep", "repeat", "reference_mode",
                 "output_dir", "jobs"},
             "spec");
  ExperimentSpec s;
  read(j, "name", s.name, "spec");
  read(j, "repeat", s.repeat, "spec");
  read(j, "reference_mode", s.reference_mode, "spec");
  read(j, "output_dir", s.output_dir, "spec");
  read(j, "jobs", s.jobs, "spec");

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    check_keys(d, {"id", "path", "format", "min_count", "synthetic"}, "dataset");
    read(d, "id", s.dataset.id, "dataset");
    read(d, "path", s.dataset.path, "dataset");
    read(d, "format", s.dataset.format, "dataset");
    read(d, "min_count", s.dataset.min_count, "dataset");
    if (d.contains("synthetic")) {
      const auto& y = d.at("synthetic");
      check_keys(y, {"num_users", "num_items", "min_length", "max_length", "clusters",
                     "zipf_exponent", "interest_prob", "seed"},
                 "dataset.synthetic");
      auto& c = s.dataset.synthetic;
      read(y, "num_users", c.num_users, "dataset.synthetic");
      read(y, "num_items", c.num_items, "dataset.synthetic");
      read(y, "min_length", c.min_length, "dataset.synthetic");
      read(y, "max_length", c.max_length, "dataset.synthetic");
      read(y, "clusters", c.clusters, "dataset.synthetic");
      read(y, "zipf_exponent", c.zipf_exponent, "dataset.synthetic");
      read(y, "interest_prob", c.interest_prob, "dataset.synthetic");
      read(y, "seed", c.seed, "dataset.synthetic");
    }
  }

  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, {"mode", "encoder", "user_dim", "interest_head", "popularity_head",
                   "atten_hidden", "alpha", "beta", "gamma", "c", "seed"},
               "model");
    if (m.contains("mode")) s.model.mode = model::parse_mode(m.at("mode").get<std::string>());
    if (m.contains("encoder")) {
      const auto& e = m.at("encoder");
      check_keys(e, {"kind", "dim", "layers", "heads", "dropout", "max_length", "dilations",
                     "kernel"},
                 "model.encoder");
      if (e.contains("kind")) {
        s.model.encoder.kind = model::parse_encoder_kind(e.at("kind").get<std::string>());
      }
      read(e, "dim", s.model.encoder.dim, "model.encoder");
      read(e, "layers", s.model.encoder.layers, "model.encoder");
      read(e, "heads", s.model.encoder.heads, "model.encoder");
      read(e, "dropout", s.model.encoder.dropout, "model.encoder");
      read(e, "max_length", s.model.encoder.max_length, "model.encoder");
      read(e, "dilations", s.model.encoder.dilations, "model.encoder");
      read(e, "kernel", s.model.encoder.kernel, "model.encoder");
    }
    read(m, "user_dim", s.model.user_dim, "model");
    read(m, "interest_head", s.model.interest_head, "model");
    read(m, "popularity_head", s.model.popularity_head, "model");
    read(m, "atten_hidden", s.model.atten_hidden, "model");
    read(m, "alpha", s.model.weights.alpha, "model");
    read(m, "beta", s.model.weights.beta, "model");
    read(m, "gamma", s.model.weights.gamma, "model");
    read(m, "c", s.model.c, "model");
    read(m, "seed", s.model.seed, "model");
  }
  // Heads must end in the encoder width; follow a changed dim unless set explicitly.
  const bool heads_given = j.contains("model") && (j.at("model").contains("interest_head") ||
                                                   j.at("model").contains("popularity_head"));
  if (!heads_given) {
    s.model.interest_head.back() = s.model.encoder.dim;
    s.model.popularity_head.back() = s.model.encoder.dim;
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t, {"learning_rate", "batch_size", "max_epochs", "patience", "seed",
                   "clip_global_norm", "omega", "rho", "eps", "verbose"},
               "train");
    read(t, "learning_rate", s.train.learning_rate, "train");
    read(t, "batch_size", s.train.batch_size, "train");
    read(t, "max_epochs", s.train.max_epochs, "train");
    read(t, "patience", s.train.patience, "train");
    read(t, "seed", s.train.seed, "train");
    read(t, "clip_global_norm", s.train.clip_global_norm, "train");
    read(t, "omega", s.train.omega, "train");
    read(t, "rho", s.train.rho, "train");
    read(t, "eps", s.train.eps, "train");
    read(t, "verbose", s.train.verbose, "train");
  }

  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    check_keys(e, {"k", "num_negatives", "reweighting", "seed", "batch_users", "threads",
                   "bucket_boundaries", "exposure"},
               "eval");
    read(e, "k", s.eval.k, "eval");
    read(e, "num_negatives", s.eval.num_negatives, "eval");
    if (e.contains("reweighting")) {
      s.eval.reweighting = eval::parse_reweighting(e.at("reweighting").get<std::string>());
    }
    read(e, "seed", s.eval.seed, "eval");
    read(e, "batch_users", s.eval.batch_users, "eval");
    read(e, "threads", s.eval.threads, "eval");
    read(e, "bucket_boundaries", s.bucket_boundaries, "eval");
    read(e, "exposure", s.exposure, "eval");
  }
  s.train.validation = s.eval;

  if (s.repeat < 1) throw ConfigError("repeat must be >= 1");
  if (s.jobs < 1) throw ConfigError("jobs must be >= 1");
  if (s.eval.k < 1) throw ConfigError("eval.k must be >= 1");
  if (s.eval.num_negatives < 1) throw ConfigError("eval.num_negatives must be >= 1");
  train::validate(s.train);
  if (!s.reference_mode.empty()) model::parse_mode(s.reference_mode);

  if (j.contains("sweep")) {
    const auto& sw = j.at("sweep");
    if (!sw.is_object()) throw ConfigError("sweep must map axis names to value lists");
    const json base = spec_to_json(s);
    for (const auto& [name, values] : sw.items()) {
      const json::json_pointer ptr(axis_pointer(name));
      if (!base.contains(ptr) || base.at(ptr).is_object()) {
        throw ConfigError("sweep axis '" + name + "' does not name a config field");
      }
      if (!values.is_array() || values.empty()) {
        throw ConfigError("sweep axis '" + name + "' needs a non-empty value list");
      }
      s.sweep.push_back({name, values.get<std::vector<json>>()});
    }
  }
  return s;
}

ExperimentSpec load_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read spec " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_spec(j);
}

json spec_to_json(const ExperimentSpec& s) {
  json j;
  j["name"] = s.name;
  const auto& y = s.dataset.synthetic;
  j["dataset"] = {{"id", s.dataset.id},
                  {"path", s.dataset.path},
                  {"format", s.dataset.format},
                  {"min_count", s.dataset.min_count},
                  {"synthetic",
                   {{"num_users", y.num_users},
                    {"num_items", y.num_items},
                    {"min_length", y.min_length},
                    {"max_length", y.max_length},
                    {"clusters", y.clusters},
                    {"zipf_exponent", y.zipf_exponent},
                    {"interest_prob", y.interest_prob},
                    {"seed", y.seed}}}};
  json m = s.model;
  m.erase("num_items");
  m.erase("num_users");
  j["model"] = m;
  const auto& t = s.train;
  j["train"] = {{"learning_rate", t.learning_rate}, {"batch_size", t.batch_size},
                {"max_epochs", t.max_epochs},       {"patience", t.patience},
                {"seed", t.seed},                   {"clip_global_norm", t.clip_global_norm},
                {"omega", t.omega},                 {"rho", t.rho},
                {"eps", t.eps},                     {"verbose", t.verbose}};
  j["eval"] = {{"k", s.eval.k},
               {"num_negatives", s.eval.num_negatives},
               {"reweighting", std::string(eval::reweighting_name(s.eval.reweighting))},
               {"seed", s.eval.seed},
               {"batch_users", s.eval.batch_users},
               {"threads", s.eval.threads},
               {"bucket_boundaries", s.bucket_boundaries},
               {"exposure", s.exposure}};
  json sw = json::object();
  for (const auto& a : s.sweep) sw[a.name] = a.values;
  j["sweep"] = sw;
  j["repeat"] = s.repeat;
  j["reference_mode"] = s.reference_mode;
  j["output_dir"] = s.output_dir;
  j["jobs"] = s.jobs;
  return j;
}

std::string config_hash(const json& j) {
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

// ---- datasets ----

std::filesystem::path data_root() {
  const char* env = std::getenv("DCR_DATA_ROOT");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path("data");
}

data::InteractionDataset load_dataset(const DatasetSpec& spec) {
  data::PreprocessOptions opts;
  opts.min_count = spec.min_count;
  if (spec.id == "synthetic") {
    const auto raw = data::generate_synthetic(spec.synthetic);
    return data::preprocess(raw, opts);
  }
  std::string rel = spec.path;
  std::string format = spec.format;
  if (spec.id == "ml-1m") {
    if (rel.empty()) rel = "ml-1m/ratings.dat";
    if (format.empty()) format = "movielens_dat";
  } else if (spec.id == "amazon-beauty") {
    if (rel.empty()) rel = "amazon-beauty/ratings_Beauty.csv";
    if (format.empty()) format = "amazon_csv";
  } else if (spec.id == "steam") {
    if (rel.empty()) rel = "steam/steam_reviews.json";
    if (format.empty()) format = "steam_json";
  } else if (spec.id != "file") {
    throw ConfigError("unknown dataset id '" + spec.id + "'");
  }
  if (rel.empty() || format.empty()) throw ConfigError("dataset 'file' needs path and format");
  std::filesystem::path path = rel;
  if (path.is_relative() && !std::filesystem::exists(path)) path = data_root() / path;
  if (!std::filesystem::exists(path)) {
    throw DataError("dataset file not found: " + path.string() + " (set DCR_DATA_ROOT)");
  }
  if (format == "dataset") return data::load_dataset(path);
  const auto raw = data::load_raw(path, data::parse_format(format));
  return data::preprocess(raw, opts);
}

// ---- result tables ----

namespace {

json cell_json(const CellResult& c) {
  return {{"point", c.point},          {"seed_index", c.seed_index}, {"ok", c.ok},
          {"error", c.error},          {"best_epoch", c.best_epoch}, {"epochs", c.epochs},
          {"val_ndcg", c.val_ndcg},    {"val_hit", c.val_hit},       {"test_ndcg", c.test_ndcg},
          {"test_hit", c.test_hit},    {"exposure_share", c.exposure_share},
          {"seconds", c.seconds}};
}

CellResult cell_from(const json& j) {
  CellResult c;
  c.point = j.at("point").get<std::map<std::string, std::string>>();
  c.seed_index = j.at("seed_index").get<int>();
  c.ok = j.at("ok").get<bool>();
  c.error = j.at("error").get<std::string>();
  c.best_epoch = j.at("best_epoch").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.val_ndcg = j.at("val_ndcg").get<double>();
  c.val_hit = j.at("val_hit").get<double>();
  c.test_ndcg = j.at("test_ndcg").get<double>();
  c.test_hit = j.at("test_hit").get<double>();
  c.exposure_share = j.at("exposure_share").get<std::vector<double>>();
  c.seconds = j.at("seconds").get<double>();
  return c;
}

}  // namespace

json to_json(const ResultTable& t) {
  json cells = json::array();
  for (const auto& c : t.cells) cells.push_back(cell_json(c));
  json summary = json::array();
  for (const auto& s : t.summary) {
    summary.push_back({{"point", s.point},
                       {"runs", s.runs},
                       {"failures", s.failures},
                       {"val_ndcg", s.val_ndcg},
                       {"test_ndcg", s.test_ndcg},
                       {"test_ndcg_std", s.test_ndcg_std},
                       {"test_hit", s.test_hit},
                       {"p_value", s.p_value ? json(*s.p_value) : json(nullptr)},
                       {"exposure_share", s.exposure_share}});
  }
  return {{"name", t.name},
          {"spec_hash", t.spec_hash},
          {"version", std::string(kGitVersion)},
          {"axes", t.axes},
          {"bucket_labels", t.bucket_labels},
          {"bucket_item_ratio", t.bucket_item_ratio},
          {"gini_train", t.gini_train},
          {"cells", cells},
          {"summary", summary}};
}

ResultTable table_from_json(const json& j) {
  ResultTable t;
  t.name = j.at("name").get<std::string>();
  t.spec_hash = j.at("spec_hash").get<std::string>();
  t.axes = j.at("axes").get<std::vector<std::string>>();
  t.bucket_labels = j.at("bucket_labels").get<std::vector<std::string>>();
  t.bucket_item_ratio = j.at("bucket_item_ratio").get<std::vector<double>>();
  t.gini_train = j.at("gini_train").get<double>();
  for (const auto& c : j.at("cells")) t.cells.push_back(cell_from(c));
  for (const auto& s : j.at("summary")) {
    PointSummary p;
    p.point = s.at("point").get<std::map<std::string, std::string>>();
    p.runs = s.at("runs").get<int>();
    p.failures = s.at("failures").get<int>();
    p.val_ndcg = s.at("val_ndcg").get<double>();
    p.test_ndcg = s.at("test_ndcg").get<double>();
    p.test_ndcg_std = s.at("test_ndcg_std").get<double>();
    p.test_hit = s.at("test_hit").get<double>();
    if (!s.at("p_value").is_null()) p.p_value = s.at("p_value").get<double>();
    p.exposure_share = s.at("exposure_share").get<std::vector<double>>();
    t.summary.push_back(std::move(p));
  }
  return t;
}

void summarize(ResultTable& table, const std::string& reference_mode) {
  table.summary.clear();
  std::vector<std::map<std::string, std::string>> order;
  for (const auto& c : table.cells) {
    if (std::find(order.begin(), order.end(), c.point) == order.end()) order.push_back(c.point);
  }
  std::map<std::map<std::string, std::string>, std::vector<double>> test_by_point;
  for (const auto& point : order) {
    PointSummary s;
    s.point = point;
    std::vector<double> val, test, hit;
    for (const auto& c : table.cells) {
      if (c.point != point) continue;
      if (!c.ok) {
        ++s.failures;
        continue;
      }
      ++s.runs;
      val.push_back(c.val_ndcg);
      test.push_back(c.test_ndcg);
      hit.push_back(c.test_hit);
      if (s.exposure_share.empty()) s.exposure_share.assign(c.exposure_share.size(), 0.0);
      for (std::size_t b = 0; b < c.exposure_share.size() && b < s.exposure_share.size(); ++b) {
        s.exposure_share[b] += c.exposure_share[b];
      }
    }
    for (auto& v : s.exposure_share) v /= std::max(1, s.runs);
    s.val_ndcg = mean_of(val);
    s.test_ndcg = mean_of(test);
    s.test_ndcg_std = std_of(test);
    s.test_hit = mean_of(hit);
    test_by_point[point] = test;
    table.summary.push_back(std::move(s));
  }
  if (reference_mode.empty()) return;
  for (auto& s : table.summary) {
    auto it = s.point.find("model.mode");
    if (it == s.point.end() || it->second == reference_mode) continue;
    auto ref = s.point;
    ref["model.mode"] = reference_mode;
    // The reference is usually trained without a c axis; match it at any c.
    for (const auto& [p, values] : test_by_point) {
      auto a = p;
      auto b = ref;
      if (a.at("model.mode") != reference_mode) continue;
      if (a.count("model.c") && b.count("model.c")) {
        a.erase("model.c");
        b.erase("model.c");
      }
      if (a != b) continue;
      const auto& mine = test_by_point[s.point];
      if (mine.size() >= 2 && values.size() >= 2) {
        s.p_value = eval::significance_test(mine, values);
      }
      break;
    }
  }
}

void write_table(const ResultTable& table, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "results.json");
    out << to_json(table).dump(2) << '\n';
  }
  std::ofstream tsv(dir / "results.tsv");
  for (const auto& a : table.axes) tsv << a << '\t';
  tsv << "seed_index\tstatus\tbest_epoch\tval_ndcg\tval_hit\ttest_ndcg\ttest_hit\tseconds\terror\n";
  tsv << std::setprecision(8);
  for (const auto& c : table.cells) {
    for (const auto& a : table.axes) {
      auto it = c.point.find(a);
      tsv << (it == c.point.end() ? "" : it->second) << '\t';
    }
    tsv << c.seed_index << '\t' << (c.ok ? "ok" : "FAILED") << '\t' << c.best_epoch << '\t'
        << c.val_ndcg << '\t' << c.val_hit << '\t' << c.test_ndcg << '\t' << c.test_hit << '\t'
        << c.seconds << '\t' << c.error << '\n';
  }
}

ResultTable read_table(const std::filesystem::path& dir) {
  const auto path = std::filesystem::is_directory(dir) ? dir / "results.json" : dir;
  std::ifstream in(path);
  if (!in) throw DataError("no results table at " + path.string());
  return table_from_json(json::parse(in));
}

std::string format_table(const ResultTable& t) {
  std::ostringstream s;
  s << "# " << t.name << " (" << t.spec_hash << ")\n\n|";
  for (const auto& a : t.axes) s << ' ' << a << " |";
  s << " runs | val NDCG | test NDCG | std | test HR | p |\n|";
  for (std::size_t k = 0; k < t.axes.size() + 6; ++k) s << "---|";
  s << '\n' << std::fixed << std::setprecision(4);
  const PointSummary* best = nullptr;
  for (const auto& p : t.summary) {
    s << '|';
    for (const auto& a : t.axes) {
      auto it = p.point.find(a);
      s << ' ' << (it == p.point.end() ? "" : it->second) << " |";
    }
    s << ' ' << p.runs;
    if (p.failures) s << " (+" << p.failures << " failed)";
    s << " | " << p.val_ndcg << " | " << p.test_ndcg << " | " << p.test_ndcg_std << " | "
      << p.test_hit << " | ";
    if (p.p_value) s << std::setprecision(3) << *p.p_value << std::setprecision(4);
    s << " |\n";
    if (p.runs > 0 && (!best || p.val_ndcg > best->val_ndcg)) best = &p;
  }
  if (best) {
    s << "\nbest by validation NDCG:";
    for (const auto& [k, v] : best->point) s << ' ' << k << '=' << v;
    s << " -> test NDCG " << best->test_ndcg << '\n';
  }
  return s.str();
}

// ---- runs ----

namespace {

struct Job {
  std::size_t point = 0;
  int seed = 0;
};

ExperimentSpec apply_point(const ExperimentSpec& spec, const std::vector<SweepAxis>& axes,
                           const std::vector<std::size_t>& choice) {
  json j = spec_to_json(spec);
  j.erase("sweep");
  for (std::size_t a = 0; a < axes.size(); ++a) {
    j[json::json_pointer(axis_pointer(axes[a].name))] = axes[a].values[choice[a]];
  }
  return parse_spec(j);
}

std::vector<std::vector<std::size_t>> cartesian(const std::vector<SweepAxis>& axes) {
  std::vector<std::vector<std::size_t>> out{{}};
  for (const auto& a : axes) {
    std::vector<std::vector<std::size_t>> next;
    for (const auto& prefix : out) {
      for (std::size_t v = 0; v < a.values.size(); ++v) {
        auto p = prefix;
        p.push_back(v);
        next.push_back(std::move(p));
      }
    }
    out = std::move(next);
  }
  return out;
}

}  // namespace

ResultTable run(const ExperimentSpec& spec) { return run(spec, load_dataset(spec.dataset)); }

ResultTable run(const ExperimentSpec& spec, const data::InteractionDataset& dataset) {
  std::vector<SweepAxis> train_axes;
  std::vector<double> c_values{spec.model.c};
  bool c_axis = false;
  for (const auto& a : spec.sweep) {
    if (a.name == "model.c") {
      c_axis = true;
      c_values.clear();
      for (const auto& v : a.values) {
        if (!v.is_number()) throw ConfigError("model.c values must be numbers");
        c_values.push_back(v.get<double>());
      }
    } else {
      train_axes.push_back(a);
    }
  }
  const auto choices = cartesian(train_axes);
  std::vector<ExperimentSpec> points;
  for (const auto& ch : choices) points.push_back(apply_point(spec, train_axes, ch));

  const json canonical = spec_to_json(spec);
  ResultTable table;
  table.name = spec.name;
  table.spec_hash = config_hash(canonical);
  for (const auto& a : train_axes) table.axes.push_back(a.name);
  if (c_axis) table.axes.push_back("model.c");

  const data::TrainingSplit split = data::training_split(dataset);
  const auto train_counts = split.train_counts();
  const auto buckets = data::popularity_buckets(train_counts, spec.bucket_boundaries);
  table.bucket_labels = buckets.labels;
  table.bucket_item_ratio = buckets.item_ratio;
  table.gini_train = data::gini_index(train_counts);
  const auto val_cases = eval::validation_cases(split);
  const auto tst_cases = eval::test_cases(dataset);

  const std::filesystem::path dir =
      std::filesystem::path(spec.output_dir) / (spec.name + "-" + table.spec_hash);
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "spec.json");
    out << canonical.dump(2) << '\n';
  }

  std::vector<Job> jobs;
  for (std::size_t p = 0; p < points.size(); ++p) {
    for (int r = 0; r < spec.repeat; ++r) jobs.push_back({p, r});
  }
  std::vector<std::vector<CellResult>> results(jobs.size());
  std::mutex log_mutex;

  const auto run_job = [&](std::size_t idx) {
    const Job& job = jobs[idx];
    ExperimentSpec s = points[job.point];
    s.model.num_items = dataset.num_items();
    s.model.num_users = dataset.num_users();
    s.model.seed += static_cast<std::uint64_t>(job.seed);
    s.train.seed += static_cast<std::uint64_t>(job.seed);
    std::map<std::string, std::string> point;
    for (std::size_t a = 0; a < train_axes.size(); ++a) {
      point[train_axes[a].name] = value_text(train_axes[a].values[choices[job.point][a]]);
    }
    json key = spec_to_json(s);
    for (const char* k : {"name", "output_dir", "jobs", "repeat", "reference_mode", "sweep"}) {
      key.erase(k);
    }
    key["model"].erase("c");
    key["eval"].erase("threads");
    key["train"].erase("verbose");
    key["seed_index"] = job.seed;
    key["c_values"] = c_values;
    const auto cell_dir = dir / "cells" / config_hash(key);
    const auto cell_file = cell_dir / "cell.json";

    std::vector<CellResult> out;
    if (std::filesystem::exists(cell_file)) {
      std::ifstream in(cell_file);
      const json cached = json::parse(in);
      for (const auto& c : cached.at("results")) out.push_back(cell_from(c));
      results[idx] = std::move(out);
      return;
    }
    const auto t0 = std::chrono::steady_clock::now();
    try {
      std::filesystem::create_directories(cell_dir);
      {
        std::ofstream cfg(cell_dir / "config.json");
        cfg << key.dump(2) << '\n';
      }
      model::RecModel m(s.model);
      train::TrainConfig tc = s.train;
      tc.metrics_log = cell_dir / "metrics.tsv";
      const train::TrainState state = train::fit(m, split, tc);
      train::save_checkpoint(m, cell_dir / "checkpoint.bin");
      const auto props = data::compute_propensities(split, s.train.omega, s.train.rho, s.train.eps);
      eval::EvalProtocol protocol = s.eval;
      protocol.max_length = s.model.encoder.max_length;
      for (double c : c_values) {
        m.set_c(c);
        CellResult r;
        r.point = point;
        if (c_axis) r.point["model.c"] = value_text(json(c));
        r.seed_index = job.seed;
        r.best_epoch = state.best_epoch;
        r.epochs = state.epoch;
        const auto val = eval::evaluate_unbiased(m, val_cases, protocol, props);
        const auto tst = eval::evaluate_unbiased(m, tst_cases, protocol, props);
        r.val_ndcg = val.ndcg;
        r.val_hit = val.hit_rate;
        r.test_ndcg = tst.ndcg;
        r.test_hit = tst.hit_rate;
        if (s.exposure) {
          r.exposure_share = eval::exposure_analysis(m, tst_cases, protocol.k, buckets,
                                                     protocol.max_length, protocol.threads);
        }
        r.ok = true;
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out.push_back(std::move(r));
      }
      json cached = json::array();
      for (const auto& r : out) cached.push_back(cell_json(r));
      std::ofstream f(cell_file);
      f << json{{"results", cached}}.dump(2) << '\n';
    } catch (const std::exception& e) {
      out.clear();
      for (double c : c_values) {
        CellResult r;
        r.point = point;
        if (c_axis) r.point["model.c"] = value_text(json(c));
        r.seed_index = job.seed;
        r.error = e.what();
        out.push_back(std::move(r));
      }
    }
    {
      std::lock_guard lock(log_mutex);
      std::cerr << "[" << spec.name << "] cell " << idx + 1 << "/" << jobs.size();
      for (const auto& [k, v] : point) std::cerr << ' ' << k << '=' << v;
      std::cerr << " seed=" << job.seed;
      if (!out.empty() && out.front().ok) {
        std::cerr << " test_ndcg=" << out.front().test_ndcg;
      } else if (!out.empty()) {
        std::cerr << " FAILED: " << out.front().error;
      }
      std::cerr << '\n';
    }
    results[idx] = std::move(out);
  };

  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) run_job(i);
  };
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(spec.jobs), jobs.size());
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (auto& r : results) {
    for (auto& c : r) table.cells.push_back(std::move(c));
  }
  summarize(table, spec.reference_mode);
  write_table(table, dir);
  return table;
}

// ---- plots ----

PlotKind parse_plot_kind(std::string_view name) {
  if (name == "sweep_curve") return PlotKind::sweep_curve;
  if (name == "exposure_bars") return PlotKind::exposure_bars;
  throw ConfigError("unknown plot kind '" + std::string(name) + "'");
}

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};

std::string esc(const std::string& s) {
  std::string o;
  for (char ch : s) {
    if (ch == '<') o += "&lt;";
    else if (ch == '>') o += "&gt;";
    else if (ch == '&') o += "&amp;";
    else o += ch;
  }
  return o;
}

void sweep_curve(const ResultTable& t, std::ostream& svg) {
  // x axis: the axis with the most distinct values; one series per setting of the others.
  std::string xaxis;
  std::size_t most = 0;
  for (const auto& a : t.axes) {
    std::set<std::string> vals;
    for (const auto& p : t.summary) vals.insert(p.point.at(a));
    if (vals.size() > most) {
      most = vals.size();
      xaxis = a;
    }
  }
  struct Pt { double x; double y; std::string label; };
  std::map<std::string, std::vector<Pt>> series;
  std::vector<std::string> categories;
  bool numeric = true;
  for (const auto& p : t.summary) {
    if (!xaxis.empty() && !is_number(p.point.at(xaxis))) numeric = false;
  }
  for (const auto& p : t.summary) {
    if (p.runs == 0) continue;
    std::string key;
    for (const auto& [k, v] : p.point) {
      if (k != xaxis) key += (key.empty() ? "" : ", ") + k + "=" + v;
    }
    const std::string xs = xaxis.empty() ? "run" : p.point.at(xaxis);
    double x = 0.0;
    if (numeric && !xaxis.empty()) {
      is_number(xs, &x);
    } else {
      auto it = std::find(categories.begin(), categories.end(), xs);
      if (it == categories.end()) {
        categories.push_back(xs);
        it = categories.end() - 1;
      }
      x = static_cast<double>(it - categories.begin());
    }
    series[key.empty() ? "test NDCG" : key].push_back({x, p.test_ndcg, xs});
  }
  if (series.empty()) throw DataError("plot: no successful runs in the table");
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  bool all_pos = true;
  for (const auto& [_, pts] : series) {
    for (const auto& p : pts) {
      x0 = std::min(x0, p.x);
      x1 = std::max(x1, p.x);
      y0 = std::min(y0, p.y);
      y1 = std::max(y1, p.y);
      if (p.x <= 0.0) all_pos = false;
    }
  }
  const bool logx = numeric && all_pos && x1 / x0 >= 100.0;
  const auto fx = [&](double x) { return logx ? std::log10(x) : x; };
  double a0 = fx(x0), a1 = fx(x1);
  if (a1 - a0 < 1e-12) { a0 -= 1.0; a1 += 1.0; }
  if (y1 - y0 < 1e-9) { y0 -= 0.01; y1 += 0.01; }
  const double pad = 0.08 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  const double W = 640, H = 420, L = 70, R = 20, T = 40, B = 60;
  const auto px = [&](double x) { return L + (fx(x) - a0) / (a1 - a0) * (W - L - R); };
  const auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
      << esc(t.name) << ": test NDCG vs " << esc(xaxis.empty() ? "run" : xaxis) << "</text>\n"
      << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L
      << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double y = y0 + (y1 - y0) * k / 4.0;
    svg << "<text x=\"" << L - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">"
        << std::fixed << std::setprecision(4) << y << "</text>\n";
  }
  std::set<std::string> ticks;
  std::size_t color = 0;
  for (const auto& [name, pts0] : series) {
    auto pts = pts0;
    std::sort(pts.begin(), pts.end(), [](const Pt& a, const Pt& b) { return a.x < b.x; });
    const char* col = kPalette[color % 8];
    if (pts.size() > 1) {
      svg << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
      for (const auto& p : pts) svg << px(p.x) << ',' << py(p.y) << ' ';
      svg << "\"/>\n";
    }
    for (const auto& p : pts) {
      svg << "<circle cx=\"" << px(p.x) << "\" cy=\"" << py(p.y) << "\" r=\"4\" fill=\"" << col
          << "\"/>\n";
      if (ticks.insert(p.label).second) {
        svg << "<text x=\"" << px(p.x) << "\" y=\"" << H - B + 16
            << "\" text-anchor=\"middle\">" << esc(p.label) << "</text>\n";
      }
    }
    svg << "<text x=\"" << W - R - 4 << "\" y=\"" << T + 14 + 16 * static_cast<double>(color)
        << "\" text-anchor=\"end\" fill=\"" << col << "\">" << esc(name) << "</text>\n";
    ++color;
  }
  svg << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 16 << "\" text-anchor=\"middle\">"
      << esc(xaxis.empty() ? "run" : xaxis) << (logx ? " (log scale)" : "") << "</text>\n"
      << "</svg>\n";
}

void exposure_bars(const ResultTable& t, std::ostream& svg) {
  std::vector<const PointSummary*> rows;
  for (const auto& p : t.summary) {
    if (p.runs > 0 && !p.exposure_share.empty()) rows.push_back(&p);
  }
  if (rows.empty()) throw DataError("plot: table has no exposure shares");
  const std::size_t nb = t.bucket_labels.size();
  const double W = 200.0 + 160.0 * static_cast<double>(nb), H = 420, L = 60, B = 70, T = 50;
  const double group = (W - L - 20) / static_cast<double>(nb);
  const double bar = group / static_cast<double>(rows.size() + 2);
  const auto py = [&](double v) { return H - B - v * (H - T - B); };
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
      << esc(t.name) << ": item ratio vs top-K exposure share by popularity bucket</text>\n"
      << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - 20 << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    svg << "<text x=\"" << L - 6 << "\" y=\"" << py(k / 4.0) + 4 << "\" text-anchor=\"end\">"
        << k * 25 << "%</text>\n";
  }
  for (std::size_t b = 0; b < nb; ++b) {
    const double gx = L + group * static_cast<double>(b) + bar / 2;
    const double ratio = t.bucket_item_ratio[b];
    svg << "<rect x=\"" << gx << "\" y=\"" << py(ratio) << "\" width=\"" << bar * 0.9
        << "\" height=\"" << ratio * (H - T - B) << "\" fill=\"#bbbbbb\"/>\n";
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const double v = rows[r]->exposure_share[b];
      svg << "<rect x=\"" << gx + bar * static_cast<double>(r + 1) << "\" y=\"" << py(v)
          << "\" width=\"" << bar * 0.9 << "\" height=\"" << v * (H - T - B) << "\" fill=\""
          << kPalette[r % 8] << "\"/>\n";
    }
    svg << "<text x=\"" << L + group * (static_cast<double>(b) + 0.5) << "\" y=\"" << H - B + 16
        << "\" text-anchor=\"middle\">" << esc(t.bucket_labels[b]) << "</text>\n";
  }
  double y = T;
  svg << "<text x=\"" << W - 24 << "\" y=\"" << y << "\" text-anchor=\"end\" fill=\"#888888\">"
      << "item ratio</text>\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    y += 15;
    std::string name;
    for (const auto& [k, v] : rows[r]->point) name += (name.empty() ? "" : ", ") + k + "=" + v;
    if (name.empty()) name = "exposure";
    const double total =
        std::accumulate(rows[r]->exposure_share.begin(), rows[r]->exposure_share.end(), 0.0);
    svg << "<text x=\"" << W - 24 << "\" y=\"" << y << "\" text-anchor=\"end\" fill=\""
        << kPalette[r % 8] << "\">" << esc(name) << " (sum = " << std::fixed
        << std::setprecision(3) << total << ")</text>\n";
  }
  svg << "</svg>\n";
}

}  // namespace

void plot(const ResultTable& table, PlotKind kind, const std::filesystem::path& out) {
  if (table.summary.empty()) throw DataError("plot: empty result table");
  std::ostringstream svg;
  if (kind == PlotKind::sweep_curve) {
    sweep_curve(table, svg);
  } else {
    exposure_bars(table, svg);
  }
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  std::ofstream f(out);
  if (!f) throw DataError("cannot write " + out.string());
  f << svg.str();
}

}  // namespace dcr::exp
