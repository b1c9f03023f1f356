#include "dcr/dataset.hpp"

#include "dcr/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

namespace dcr::data {

namespace {

std::int64_t parse_int(std::string_view s, std::size_t line_no, std::string_view what) {
  std::int64_t v = 0;
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw DataError("line " + std::to_string(line_no) + ": bad " + std::string(what) + " '" +
                    std::string(s) + "'");
  }
  return v;
}

std::vector<std::string_view> split(std::string_view line, std::string_view sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + sep.size();
  }
}

std::int64_t parse_date(const std::string& s, std::size_t line_no) {
  int y = 0;
  unsigned m = 0;
  unsigned d = 0;
  char dash1 = 0;
  char dash2 = 0;
  std::istringstream in(s);
  in >> y >> dash1 >> m >> dash2 >> d;
  if (!in || dash1 != '-' || dash2 != '-') {
    throw DataError("line " + std::to_string(line_no) + ": bad date '" + s + "'");
  }
  const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m},
                                        std::chrono::day{d}};
  if (!ymd.ok()) throw DataError("line " + std::to_string(line_no) + ": bad date '" + s + "'");
  const auto days = std::chrono::sys_days{ymd}.time_since_epoch().count();
  return static_cast<std::int64_t>(days) * 86400;
}

std::string json_id(const nlohmann::json& j, std::initializer_list<const char*> keys,
                    std::size_t line_no) {
  for (const char* k : keys) {
    auto it = j.find(k);
    if (it == j.end()) continue;
    if (it->is_string()) return it->get<std::string>();
    if (it->is_number_integer()) return std::to_string(it->get<std::int64_t>());
  }
  throw DataError("line " + std::to_string(line_no) + ": missing field " + *keys.begin());
}

RawInteraction parse_line(const std::string& line, RawFormat format, std::size_t line_no) {
  RawInteraction r;
  switch (format) {
    case RawFormat::movielens_dat: {
      const auto f = split(line, "::");
      if (f.size() != 4) {
        throw DataError("line " + std::to_string(line_no) + ": expected user::item::rating::ts");
      }
      r.user_id = std::string(f[0]);
      r.item_id = std::string(f[1]);
      r.timestamp = parse_int(f[3], line_no, "timestamp");
      break;
    }
    case RawFormat::amazon_csv: {
      const auto f = split(line, ",");
      if (f.size() != 4) {
        throw DataError("line " + std::to_string(line_no) + ": expected user,item,rating,ts");
      }
      r.user_id = std::string(f[0]);
      r.item_id = std::string(f[1]);
      r.timestamp = parse_int(f[3], line_no, "timestamp");
      break;
    }
    case RawFormat::steam_json: {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw DataError("line " + std::to_string(line_no) + ": invalid JSON (" + e.what() + ")");
      }
      r.user_id = json_id(j, {"username", "user_id"}, line_no);
      r.item_id = json_id(j, {"product_id", "item_id"}, line_no);
      if (auto it = j.find("timestamp"); it != j.end() && it->is_number_integer()) {
        r.timestamp = it->get<std::int64_t>();
      } else if (auto dt = j.find("date"); dt != j.end() && dt->is_string()) {
        r.timestamp = parse_date(dt->get<std::string>(), line_no);
      } else {
        throw DataError("line " + std::to_string(line_no) + ": missing date/timestamp");
      }
      break;
    }
  }
  if (r.user_id.empty() || r.item_id.empty()) {
    throw DataError("line " + std::to_string(line_no) + ": empty user or item id");
  }
  if (r.timestamp < 0) throw DataError("line " + std::to_string(line_no) + ": negative timestamp");
  return r;
}

}  // namespace

RawFormat parse_format(std::string_view tag) {
  if (tag == "movielens_dat") return RawFormat::movielens_dat;
  if (tag == "amazon_csv") return RawFormat::amazon_csv;
  if (tag == "steam_json") return RawFormat::steam_json;
  throw ConfigError("unknown raw format '" + std::string(tag) + "'");
}

std::string_view format_name(RawFormat format) {
  switch (format) {
    case RawFormat::movielens_dat: return "movielens_dat";
    case RawFormat::amazon_csv: return "amazon_csv";
    case RawFormat::steam_json: return "steam_json";
  }
  return "?";
}

std::vector<RawInteraction> parse_raw(std::istream& in, RawFormat format) {
  std::vector<RawInteraction> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    out.push_back(parse_line(line, format, line_no));
  }
  return out;
}

std::vector<RawInteraction> load_raw(const std::filesystem::path& path, RawFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return parse_raw(in, format);
}

InteractionDataset::InteractionDataset(std::vector<std::string> user_ids,
                                       std::vector<std::string> item_ids,
                                       std::vector<std::vector<std::int32_t>> sequences)
    : user_ids_(std::move(user_ids)), item_ids_(std::move(item_ids)),
      sequences_(std::move(sequences)) {
  if (user_ids_.size() != sequences_.size()) {
    throw DataError("dataset: user id count does not match sequence count");
  }
  for (const auto& s : sequences_) {
    if (s.size() < 3) throw DataError("dataset: every user needs at least 3 interactions");
    for (auto i : s) {
      if (i < 0 || static_cast<std::size_t>(i) >= item_ids_.size()) {
        throw DataError("dataset: item index out of range");
      }
    }
  }
}

std::size_t InteractionDataset::num_interactions() const {
  std::size_t n = 0;
  for (const auto& s : sequences_) n += s.size();
  return n;
}

std::span<const std::int32_t> InteractionDataset::train(std::size_t user) const {
  const auto& s = sequences_[user];
  return std::span<const std::int32_t>(s.data(), s.size() - 2);
}

std::int32_t InteractionDataset::validation(std::size_t user) const {
  const auto& s = sequences_[user];
  return s[s.size() - 2];
}

std::int32_t InteractionDataset::test(std::size_t user) const { return sequences_[user].back(); }

std::vector<std::int64_t> InteractionDataset::train_counts() const {
  std::vector<std::int64_t> c(num_items(), 0);
  for (std::size_t u = 0; u < num_users(); ++u) {
    for (auto i : train(u)) ++c[static_cast<std::size_t>(i)];
  }
  return c;
}

std::vector<std::int64_t> InteractionDataset::all_counts() const {
  std::vector<std::int64_t> c(num_items(), 0);
  for (const auto& s : sequences_) {
    for (auto i : s) ++c[static_cast<std::size_t>(i)];
  }
  return c;
}

InteractionDataset preprocess(std::span<const RawInteraction> raw, PreprocessOptions options) {
  if (raw.empty()) throw DataError("preprocess: no interactions");
  // Intern raw ids in first-appearance order.
  std::unordered_map<std::string, std::int32_t> user_index;
  std::unordered_map<std::string, std::int32_t> item_index;
  std::vector<std::string> user_names;
  std::vector<std::string> item_names;
  std::vector<std::int32_t> ru(raw.size());
  std::vector<std::int32_t> ri(raw.size());
  for (std::size_t k = 0; k < raw.size(); ++k) {
    auto [uit, unew] =
        user_index.emplace(raw[k].user_id, static_cast<std::int32_t>(user_names.size()));
    if (unew) user_names.push_back(raw[k].user_id);
    auto [iit, inew] =
        item_index.emplace(raw[k].item_id, static_cast<std::int32_t>(item_names.size()));
    if (inew) item_names.push_back(raw[k].item_id);
    ru[k] = uit->second;
    ri[k] = iit->second;
  }

  std::vector<char> alive(raw.size(), 1);
  const auto filter_round = [&]() {
    std::vector<std::int64_t> uc(user_names.size(), 0);
    std::vector<std::int64_t> ic(item_names.size(), 0);
    for (std::size_t k = 0; k < raw.size(); ++k) {
      if (alive[k]) {
        ++uc[static_cast<std::size_t>(ru[k])];
        ++ic[static_cast<std::size_t>(ri[k])];
      }
    }
    bool changed = false;
    for (std::size_t k = 0; k < raw.size(); ++k) {
      if (alive[k] && (uc[static_cast<std::size_t>(ru[k])] < options.min_count ||
                       ic[static_cast<std::size_t>(ri[k])] < options.min_count)) {
        alive[k] = 0;
        changed = true;
      }
    }
    return changed;
  };
  if (options.iterative) {
    while (filter_round()) {
    }
  } else {
    filter_round();
  }

  // Group by user, then stable-sort each user's records by timestamp.
  std::vector<std::vector<std::size_t>> per_user(user_names.size());
  for (std::size_t k = 0; k < raw.size(); ++k) {
    if (alive[k]) per_user[static_cast<std::size_t>(ru[k])].push_back(k);
  }
  for (auto& recs : per_user) {
    std::stable_sort(recs.begin(), recs.end(), [&](std::size_t a, std::size_t b) {
      return raw[a].timestamp < raw[b].timestamp;
    });
  }

  // Users need one train, one validation and one test item.
  std::vector<std::int32_t> dense_item(item_names.size(), -1);
  std::vector<std::string> out_users;
  std::vector<std::string> out_items;
  std::vector<std::vector<std::int32_t>> sequences;
  for (std::size_t u = 0; u < per_user.size(); ++u) {
    if (per_user[u].size() < 3) continue;
    std::vector<std::int32_t> seq;
    seq.reserve(per_user[u].size());
    for (std::size_t k : per_user[u]) {
      auto& d = dense_item[static_cast<std::size_t>(ri[k])];
      if (d < 0) {
        d = static_cast<std::int32_t>(out_items.size());
        out_items.push_back(item_names[static_cast<std::size_t>(ri[k])]);
      }
      seq.push_back(d);
    }
    out_users.push_back(user_names[u]);
    sequences.push_back(std::move(seq));
  }
  if (sequences.empty()) {
    throw DataError("dataset empty after " + std::to_string(options.min_count) + "-core");
  }
  return InteractionDataset(std::move(out_users), std::move(out_items), std::move(sequences));
}

std::vector<RawInteraction> to_raw(const InteractionDataset& dataset) {
  std::vector<RawInteraction> out;
  out.reserve(dataset.num_interactions());
  for (std::size_t u = 0; u < dataset.num_users(); ++u) {
    const auto seq = dataset.sequence(u);
    for (std::size_t t = 0; t < seq.size(); ++t) {
      out.push_back({dataset.user_ids()[u],
                     dataset.item_ids()[static_cast<std::size_t>(seq[t])],
                     static_cast<std::int64_t>(t), true});
    }
  }
  return out;
}

PropensityTable compute_propensities(std::span<const std::int64_t> counts, double omega,
                                     double rho, double eps) {
  if (!(omega >= 0.0 && omega <= 1.0) || !(rho >= 0.0 && rho <= 1.0)) {
    throw ConfigError("propensity exponents must lie in [0, 1]");
  }
  if (!(eps > 0.0)) throw ConfigError("propensity clamp eps must be positive");
  std::int64_t max_count = 0;
  for (auto c : counts) {
    if (c < 0) throw DataError("negative item count");
    max_count = std::max(max_count, c);
  }
  if (max_count == 0) throw DataError("propensities: zero training interactions");
  PropensityTable t;
  t.omega = omega;
  t.rho = rho;
  t.eps = eps;
  t.counts.assign(counts.begin(), counts.end());
  t.theta_pos.resize(counts.size());
  t.theta_neg.resize(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double r = static_cast<double>(counts[i]) / static_cast<double>(max_count);
    t.theta_pos[i] = std::max(std::pow(r, omega), eps);
    t.theta_neg[i] = std::max(std::pow(1.0 - r, rho), eps);
  }
  return t;
}

PropensityTable compute_propensities(const InteractionDataset& dataset, double omega, double rho,
                                     double eps) {
  const auto counts = dataset.train_counts();
  return compute_propensities(counts, omega, rho, eps);
}

PropensityTable compute_propensities(const TrainingSplit& split, double omega, double rho,
                                     double eps) {
  const auto counts = split.train_counts();
  return compute_propensities(counts, omega, rho, eps);
}

std::vector<std::int64_t> TrainingSplit::train_counts() const {
  std::vector<std::int64_t> c(num_items, 0);
  for (const auto& s : train) {
    for (auto i : s) ++c[static_cast<std::size_t>(i)];
  }
  return c;
}

TrainingSplit training_split(const InteractionDataset& dataset) {
  TrainingSplit s;
  s.num_items = dataset.num_items();
  s.train.reserve(dataset.num_users());
  s.validation.reserve(dataset.num_users());
  for (std::size_t u = 0; u < dataset.num_users(); ++u) {
    const auto t = dataset.train(u);
    s.train.emplace_back(t.begin(), t.end());
    s.validation.push_back(dataset.validation(u));
  }
  return s;
}

double gini_index(std::span<const std::int64_t> counts) {
  if (counts.empty()) throw DataError("gini: no items");
  std::vector<std::int64_t> x(counts.begin(), counts.end());
  std::sort(x.begin(), x.end());
  if (x.front() < 0) throw DataError("gini: negative count");
  const double total = std::accumulate(x.begin(), x.end(), 0.0);
  if (total <= 0.0) throw DataError("gini: all counts are zero");
  const double n = static_cast<double>(x.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    acc += (2.0 * static_cast<double>(i + 1) - n - 1.0) * static_cast<double>(x[i]);
  }
  return acc / (n * total);
}

BucketAssignment popularity_buckets(std::span<const std::int64_t> counts,
                                    std::span<const std::int64_t> boundaries) {
  for (std::size_t b = 1; b < boundaries.size(); ++b) {
    if (boundaries[b] <= boundaries[b - 1]) {
      throw ConfigError("bucket boundaries must be strictly ascending");
    }
  }
  BucketAssignment out;
  const std::size_t nb = boundaries.size() + 1;
  out.bucket.resize(counts.size());
  out.item_ratio.assign(nb, 0.0);
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const auto it = std::upper_bound(boundaries.begin(), boundaries.end(), counts[i]);
    out.bucket[i] = static_cast<int>(it - boundaries.begin());
    out.item_ratio[static_cast<std::size_t>(out.bucket[i])] += 1.0;
  }
  if (!counts.empty()) {
    for (auto& r : out.item_ratio) r /= static_cast<double>(counts.size());
  }
  for (std::size_t b = 0; b < nb; ++b) {
    if (boundaries.empty()) {
      out.labels.push_back("all");
    } else if (b == 0) {
      out.labels.push_back("<" + std::to_string(boundaries[0]));
    } else if (b + 1 == nb) {
      out.labels.push_back(">=" + std::to_string(boundaries[b - 1]));
    } else {
      out.labels.push_back(std::to_string(boundaries[b - 1]) + "-" +
                           std::to_string(boundaries[b]));
    }
  }
  return out;
}

// Dataset file layout (text, tab separated):
//   dcr-dataset <version>
//   users <N>
//   items <M>
//   item <dense> <raw id>              (M lines)
//   user <raw id> <i1> <i2> ...        (N lines, chronological dense indices)
void save_dataset(const InteractionDataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "dcr-dataset\t" << kDatasetSchemaVersion << "\n";
  out << "users\t" << dataset.num_users() << "\n";
  out << "items\t" << dataset.num_items() << "\n";
  for (std::size_t i = 0; i < dataset.num_items(); ++i) {
    out << "item\t" << i << "\t" << dataset.item_ids()[i] << "\n";
  }
  for (std::size_t u = 0; u < dataset.num_users(); ++u) {
    out << "user\t" << dataset.user_ids()[u];
    for (auto i : dataset.sequence(u)) out << "\t" << i;
    out << "\n";
  }
  if (!out) throw DataError("write failed for " + path.string());
}

InteractionDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  const auto next = [&]() -> std::vector<std::string_view> {
    if (!std::getline(in, line)) throw DataError(path.string() + ": unexpected end of file");
    ++line_no;
    return split(line, "\t");
  };
  auto f = next();
  if (f.size() != 2 || f[0] != "dcr-dataset") throw DataError(path.string() + ": not a dataset");
  if (parse_int(f[1], line_no, "version") != kDatasetSchemaVersion) {
    throw DataError(path.string() + ": unsupported dataset schema version");
  }
  f = next();
  if (f.size() != 2 || f[0] != "users") throw DataError("line 2: expected users");
  const auto n_users = static_cast<std::size_t>(parse_int(f[1], line_no, "user count"));
  f = next();
  if (f.size() != 2 || f[0] != "items") throw DataError("line 3: expected items");
  const auto n_items = static_cast<std::size_t>(parse_int(f[1], line_no, "item count"));
  std::vector<std::string> items(n_items);
  for (std::size_t i = 0; i < n_items; ++i) {
    f = next();
    if (f.size() != 3 || f[0] != "item" ||
        parse_int(f[1], line_no, "item index") != static_cast<std::int64_t>(i)) {
      throw DataError("line " + std::to_string(line_no) + ": malformed item record");
    }
    items[i] = std::string(f[2]);
  }
  std::vector<std::string> users(n_users);
  std::vector<std::vector<std::int32_t>> seqs(n_users);
  for (std::size_t u = 0; u < n_users; ++u) {
    f = next();
    if (f.size() < 2 || f[0] != "user") {
      throw DataError("line " + std::to_string(line_no) + ": malformed user record");
    }
    users[u] = std::string(f[1]);
    for (std::size_t k = 2; k < f.size(); ++k) {
      seqs[u].push_back(static_cast<std::int32_t>(parse_int(f[k], line_no, "item index")));
    }
  }
  return InteractionDataset(std::move(users), std::move(items), std::move(seqs));
}

// Propensity file layout:
//   dcr-propensity <version> <omega> <rho> <eps>
//   <item> <count> <theta_pos> <theta_neg>     (one line per item)
void save_propensities(const PropensityTable& table, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << std::setprecision(17);
  out << "dcr-propensity\t" << kPropensitySchemaVersion << "\t" << table.omega << "\t"
      << table.rho << "\t" << table.eps << "\n";
  for (std::size_t i = 0; i < table.counts.size(); ++i) {
    out << i << "\t" << table.counts[i] << "\t" << table.theta_pos[i] << "\t"
        << table.theta_neg[i] << "\n";
  }
}

PropensityTable load_propensities(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  PropensityTable t;
  std::string magic;
  int version = 0;
  in >> magic >> version >> t.omega >> t.rho >> t.eps;
  if (!in || magic != "dcr-propensity" || version != kPropensitySchemaVersion) {
    throw DataError(path.string() + ": not a propensity table");
  }
  std::size_t idx = 0;
  std::int64_t count = 0;
  double tp = 0.0;
  double tn = 0.0;
  while (in >> idx >> count >> tp >> tn) {
    if (idx != t.counts.size()) throw DataError(path.string() + ": items out of order");
    t.counts.push_back(count);
    t.theta_pos.push_back(tp);
    t.theta_neg.push_back(tn);
  }
  return t;
}

std::vector<RawInteraction> generate_synthetic(const SyntheticConfig& config) {
  if (config.num_items < config.clusters || config.clusters < 1 || config.min_length < 3 ||
      config.max_length < config.min_length) {
    throw ConfigError("synthetic: inconsistent configuration");
  }
  std::mt19937_64 rng(config.seed);
  const auto n_items = static_cast<std::size_t>(config.num_items);
  const auto n_clusters = static_cast<std::size_t>(config.clusters);

  // Zipf popularity over a random permutation of items.
  std::vector<std::size_t> perm(n_items);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> pop(n_items);
  for (std::size_t r = 0; r < n_items; ++r) {
    pop[perm[r]] = std::pow(static_cast<double>(r + 1), -config.zipf_exponent);
  }
  // Items of a cluster form a ring; the interest chain walks the ring.
  std::vector<std::vector<std::size_t>> members(n_clusters);
  std::vector<std::size_t> cluster_of(n_items);
  std::vector<std::size_t> ring_pos(n_items);
  for (std::size_t i = 0; i < n_items; ++i) {
    cluster_of[i] = i % n_clusters;
    ring_pos[i] = members[cluster_of[i]].size();
    members[cluster_of[i]].push_back(i);
  }
  std::discrete_distribution<std::size_t> exposure(pop.begin(), pop.end());
  std::uniform_int_distribution<int> length(config.min_length, config.max_length);
  std::uniform_int_distribution<std::size_t> any_cluster(0, n_clusters - 1);
  std::uniform_int_distribution<int> stride(1, 2);
  std::bernoulli_distribution by_interest(config.interest_prob);

  std::vector<RawInteraction> out;
  for (int u = 0; u < config.num_users; ++u) {
    const std::size_t home = any_cluster(rng);
    const auto& ring = members[home];
    std::uniform_int_distribution<std::size_t> start(0, ring.size() - 1);
    std::size_t cur = ring[start(rng)];
    const int len = length(rng);
    for (int t = 0; t < len; ++t) {
      out.push_back({"u" + std::to_string(u), "i" + std::to_string(cur),
                     static_cast<std::int64_t>(t), true});
      if (by_interest(rng)) {
        const auto& r = members[cluster_of[cur]];
        cur = r[(ring_pos[cur] + static_cast<std::size_t>(stride(rng))) % r.size()];
      } else {
        cur = exposure(rng);
      }
    }
  }
  return out;
}

}  // namespace dcr::data
