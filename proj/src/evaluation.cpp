#include "dcr/evaluation.hpp"

#include "dcr/error.hpp"
#include "dcr/version.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <thread>
#include <unordered_set>

namespace dcr::eval {

using ag::Vector;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::vector<std::int64_t> sorted_unique(std::vector<std::int64_t> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

// Runs fn(chunk) for chunk in [0, chunks) over `threads` workers.
template <typename Fn>
void parallel_chunks(std::size_t chunks, int threads, Fn fn) {
  const std::size_t workers =
      std::min<std::size_t>(chunks, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) fn(c);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t c = w; c < chunks; c += workers) fn(c);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

model::UserBatch make_user_batch(std::span<const EvalCase> cases, Eigen::Index max_length) {
  model::UserBatch b;
  b.batch = static_cast<Eigen::Index>(cases.size());
  Eigen::Index longest = 0;
  for (const auto& c : cases) {
    if (c.history.empty()) throw DataError("evaluation case has an empty history");
    longest = std::max<Eigen::Index>(longest, static_cast<Eigen::Index>(c.history.size()));
  }
  b.length = std::min(longest, max_length);
  b.history.assign(static_cast<std::size_t>(b.batch * b.length), model::kPadding);
  for (std::size_t u = 0; u < cases.size(); ++u) {
    const auto& h = cases[u].history;
    const auto take = std::min<std::size_t>(h.size(), static_cast<std::size_t>(b.length));
    const auto row = u * static_cast<std::size_t>(b.length);
    std::copy(h.end() - static_cast<std::ptrdiff_t>(take), h.end(),
              b.history.begin() + static_cast<std::ptrdiff_t>(row + b.length - take));
    b.users.push_back(cases[u].user);
  }
  return b;
}

model::ItemStates gather_items(const model::ItemStates& all, std::span<const std::int64_t> idx) {
  model::ItemStates s;
  s.e_i = ag::gather_rows(all.e_i, idx);
  if (all.e_pop_i.defined()) s.e_pop_i = ag::gather_rows(all.e_pop_i, idx);
  if (all.e_int_i.defined()) s.e_int_i = ag::gather_rows(all.e_int_i, idx);
  return s;
}

model::ItemStates all_item_states(const model::RecModel& m) {
  std::vector<std::int64_t> items(m.config().num_items);
  std::iota(items.begin(), items.end(), 0);
  return m.item_states(items);
}

// Scores cases[k] against cand[k] (one candidate list per case).
std::vector<std::vector<double>> score_lists(const model::RecModel& m,
                                             const model::ItemStates& items,
                                             std::span<const EvalCase> cases,
                                             const std::vector<std::vector<std::int64_t>>& cand,
                                             Eigen::Index max_length) {
  const model::UserBatch batch = make_user_batch(cases, max_length);
  model::UserBatch scored = batch;
  if (m.config().user_dim <= 0) scored.users.clear();
  const model::UserStates us = m.user_states(scored, false, model::ForwardContext{});
  std::vector<std::int64_t> rows;
  std::vector<std::int64_t> flat;
  for (std::size_t u = 0; u < cand.size(); ++u) {
    for (auto i : cand[u]) {
      rows.push_back(static_cast<std::int64_t>(u));
      flat.push_back(i);
    }
  }
  const model::BatchOutputs o = m.score(m.select_rows(us, rows), gather_items(items, flat));
  const Vector s = m.ranking_scores(o);
  std::vector<std::vector<double>> out(cand.size());
  Eigen::Index r = 0;
  for (std::size_t u = 0; u < cand.size(); ++u) {
    out[u].resize(cand[u].size());
    for (auto& v : out[u]) v = s(r++);
  }
  return out;
}

}  // namespace

Reweighting parse_reweighting(std::string_view name) {
  if (name == "ipw") return Reweighting::ipw;
  if (name == "raw_count") return Reweighting::raw_count;
  if (name == "none") return Reweighting::none;
  throw ConfigError("unknown reweighting '" + std::string(name) + "'");
}

std::string_view reweighting_name(Reweighting r) {
  switch (r) {
    case Reweighting::ipw: return "ipw";
    case Reweighting::raw_count: return "raw_count";
    case Reweighting::none: return "none";
  }
  return "?";
}

std::vector<EvalCase> validation_cases(const data::TrainingSplit& split) {
  std::vector<EvalCase> cases(split.num_users());
  for (std::size_t u = 0; u < cases.size(); ++u) {
    auto& c = cases[u];
    c.user = static_cast<std::int64_t>(u);
    c.history.assign(split.train[u].begin(), split.train[u].end());
    c.positive = split.validation[u];
    c.excluded = c.history;
    c.excluded.push_back(c.positive);
    c.excluded = sorted_unique(std::move(c.excluded));
  }
  return cases;
}

std::vector<EvalCase> test_cases(const data::InteractionDataset& dataset) {
  std::vector<EvalCase> cases(dataset.num_users());
  for (std::size_t u = 0; u < cases.size(); ++u) {
    auto& c = cases[u];
    const auto seq = dataset.sequence(u);
    c.user = static_cast<std::int64_t>(u);
    c.history.assign(seq.begin(), seq.end() - 1);
    c.positive = seq.back();
    c.excluded = sorted_unique(std::vector<std::int64_t>(seq.begin(), seq.end()));
  }
  return cases;
}

std::vector<std::int64_t> sample_negatives(std::int64_t user, std::int64_t positive,
                                           std::size_t num_items, int n, std::uint64_t seed,
                                           std::span<const std::int64_t> excluded) {
  if (n < 1) throw ConfigError("num_negatives must be >= 1");
  const auto banned = [&](std::int64_t i) {
    return i == positive || std::binary_search(excluded.begin(), excluded.end(), i);
  };
  std::size_t blocked = 0;
  for (std::size_t k = 0; k < excluded.size(); ++k) {
    const auto i = excluded[k];
    if (k > 0 && excluded[k - 1] == i) continue;
    if (i >= 0 && static_cast<std::size_t>(i) < num_items) ++blocked;
  }
  if (positive >= 0 && static_cast<std::size_t>(positive) < num_items &&
      !std::binary_search(excluded.begin(), excluded.end(), positive)) {
    ++blocked;
  }
  const std::size_t pool = num_items - std::min(blocked, num_items);
  const auto want = static_cast<std::size_t>(n);
  if (pool < want) {
    throw DataError("negative pool of " + std::to_string(pool) + " items is smaller than " +
                    std::to_string(n) + " for user " + std::to_string(user));
  }
  std::mt19937_64 rng(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(user))));
  std::vector<std::int64_t> out;
  out.reserve(want);
  if (pool <= 4 * want) {
    std::vector<std::int64_t> cand;
    cand.reserve(pool);
    for (std::size_t i = 0; i < num_items; ++i) {
      if (!banned(static_cast<std::int64_t>(i))) cand.push_back(static_cast<std::int64_t>(i));
    }
    for (std::size_t k = 0; k < want; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, cand.size() - 1);
      std::swap(cand[k], cand[pick(rng)]);
      out.push_back(cand[k]);
    }
    return out;
  }
  std::unordered_set<std::int64_t> drawn;
  std::uniform_int_distribution<std::int64_t> pick(0, static_cast<std::int64_t>(num_items) - 1);
  while (out.size() < want) {
    const auto i = pick(rng);
    if (banned(i) || !drawn.insert(i).second) continue;
    out.push_back(i);
  }
  return out;
}

RankMetrics rank_metrics(std::size_t rank, int k) {
  if (rank < 1) throw std::invalid_argument("rank is 1-based");
  if (rank > static_cast<std::size_t>(k)) return {};
  return {1.0 / std::log2(static_cast<double>(rank) + 1.0), 1.0};
}

std::size_t positive_rank(std::span<const std::int64_t> items, std::span<const double> scores,
                          std::int64_t positive) {
  const auto ranked = model::rank_by_score(items, scores);
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    if (ranked[r].item == positive) return r + 1;
  }
  throw std::invalid_argument("positive item is not among the candidates");
}

double weighted_mean(std::span<const double> values, std::span<const double> weights) {
  if (values.size() != weights.size() || values.empty()) {
    throw std::invalid_argument("weighted_mean: bad sizes");
  }
  double num = 0.0;
  double den = 0.0;
  for (std::size_t k = 0; k < values.size(); ++k) {
    num += weights[k] * values[k];
    den += weights[k];
  }
  if (!(den > 0.0)) throw NumericError("weighted_mean: non-positive total weight");
  return num / den;
}

double instance_weight(std::int64_t positive, const data::PropensityTable& props,
                       Reweighting reweighting) {
  const auto i = static_cast<std::size_t>(positive);
  switch (reweighting) {
    case Reweighting::ipw:
      return 1.0 / props.theta_pos.at(i);
    case Reweighting::raw_count:
      return 1.0 / static_cast<double>(std::max<std::int64_t>(props.counts.at(i), 1));
    case Reweighting::none:
      return 1.0;
  }
  return 1.0;
}

EvalReport evaluate_unbiased(const model::RecModel& model, std::span<const EvalCase> cases,
                             const EvalProtocol& protocol, const data::PropensityTable& props) {
  if (cases.empty()) throw DataError("evaluation split is empty");
  if (protocol.k < 1) throw ConfigError("K must be >= 1");
  if (protocol.batch_users < 1) throw ConfigError("batch_users must be >= 1");
  ag::NoGradGuard no_grad;
  const std::size_t m = model.config().num_items;
  const model::ItemStates items = all_item_states(model);

  EvalReport rep;
  rep.k = protocol.k;
  rep.num_cases = cases.size();
  rep.seed = protocol.seed;
  rep.reweighting = protocol.reweighting;
  rep.version = std::string(kGitVersion);
  rep.per_case_ndcg.assign(cases.size(), 0.0);
  rep.per_case_hit.assign(cases.size(), 0.0);
  rep.per_case_weight.assign(cases.size(), 0.0);

  const auto bs = static_cast<std::size_t>(protocol.batch_users);
  const std::size_t chunks = (cases.size() + bs - 1) / bs;
  parallel_chunks(chunks, protocol.threads, [&](std::size_t chunk) {
    ag::NoGradGuard guard;
    const std::size_t lo = chunk * bs;
    const std::size_t hi = std::min(cases.size(), lo + bs);
    const auto part = cases.subspan(lo, hi - lo);
    std::vector<std::vector<std::int64_t>> cand(part.size());
    for (std::size_t u = 0; u < part.size(); ++u) {
      cand[u].push_back(part[u].positive);
      const auto neg = sample_negatives(part[u].user, part[u].positive, m,
                                        protocol.num_negatives, protocol.seed, part[u].excluded);
      cand[u].insert(cand[u].end(), neg.begin(), neg.end());
    }
    const auto scores = score_lists(model, items, part, cand, protocol.max_length);
    for (std::size_t u = 0; u < part.size(); ++u) {
      const auto rank = positive_rank(cand[u], scores[u], part[u].positive);
      const auto met = rank_metrics(rank, protocol.k);
      rep.per_case_ndcg[lo + u] = met.ndcg;
      rep.per_case_hit[lo + u] = met.hit;
      rep.per_case_weight[lo + u] = instance_weight(part[u].positive, props, protocol.reweighting);
    }
  });
  rep.ndcg = weighted_mean(rep.per_case_ndcg, rep.per_case_weight);
  rep.hit_rate = weighted_mean(rep.per_case_hit, rep.per_case_weight);
  return rep;
}

std::vector<double> exposure_analysis(const model::RecModel& model,
                                      std::span<const EvalCase> cases, int k,
                                      const data::BucketAssignment& buckets,
                                      Eigen::Index max_length, int threads) {
  if (k < 1) throw ConfigError("K must be >= 1");
  const std::size_t m = model.config().num_items;
  if (buckets.bucket.size() != m) throw DataError("bucket assignment does not match the catalogue");
  const std::size_t nb = buckets.item_ratio.size();
  if (cases.empty()) return std::vector<double>(nb, 0.0);
  ag::NoGradGuard no_grad;
  const model::ItemStates items = all_item_states(model);
  const std::size_t bs = std::max<std::size_t>(1, 65536 / std::max<std::size_t>(m, 1));
  const std::size_t chunks = (cases.size() + bs - 1) / bs;
  // Per-case slot counts, summed in case order afterwards.
  std::vector<std::vector<std::int64_t>> slots(cases.size(), std::vector<std::int64_t>(nb, 0));
  parallel_chunks(chunks, threads, [&](std::size_t chunk) {
    ag::NoGradGuard guard;
    const std::size_t lo = chunk * bs;
    const std::size_t hi = std::min(cases.size(), lo + bs);
    const auto part = cases.subspan(lo, hi - lo);
    std::vector<std::vector<std::int64_t>> cand(part.size());
    for (std::size_t u = 0; u < part.size(); ++u) {
      const auto seen = sorted_unique(part[u].history);
      for (std::size_t i = 0; i < m; ++i) {
        if (!std::binary_search(seen.begin(), seen.end(), static_cast<std::int64_t>(i))) {
          cand[u].push_back(static_cast<std::int64_t>(i));
        }
      }
      if (cand[u].empty()) throw DataError("exposure: user has seen the whole catalogue");
    }
    const auto scores = score_lists(model, items, part, cand, max_length);
    for (std::size_t u = 0; u < part.size(); ++u) {
      const auto ranked = model::rank_by_score(cand[u], scores[u]);
      const std::size_t top = std::min<std::size_t>(ranked.size(), static_cast<std::size_t>(k));
      for (std::size_t r = 0; r < top; ++r) {
        ++slots[lo + u][static_cast<std::size_t>(
            buckets.bucket[static_cast<std::size_t>(ranked[r].item)])];
      }
    }
  });
  std::vector<double> share(nb, 0.0);
  double total = 0.0;
  for (const auto& s : slots) {
    for (std::size_t b = 0; b < nb; ++b) {
      share[b] += static_cast<double>(s[b]);
      total += static_cast<double>(s[b]);
    }
  }
  for (auto& v : share) v /= total;
  return share;
}

double significance_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) {
    throw std::invalid_argument("significance_test needs at least 2 runs per side");
  }
  const auto moments = [](std::span<const double> x) {
    const double n = static_cast<double>(x.size());
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    return std::pair{mean, ss / (n - 1.0)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double sa = va / na;
  const double sb = vb / nb;
  const double se2 = sa + sb;
  const double diff = ma - mb;
  if (se2 == 0.0) return diff > 0.0 ? 0.0 : (diff < 0.0 ? 1.0 : 0.5);
  const double t = diff / std::sqrt(se2);
  const double df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
  const boost::math::students_t dist(df);
  return boost::math::cdf(boost::math::complement(dist, t));
}

void save_report(const EvalReport& r, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["k"] = r.k;
  j["ndcg_at_k"] = r.ndcg;
  j["hit_rate_at_k"] = r.hit_rate;
  j["num_cases"] = r.num_cases;
  j["reweighting"] = std::string(reweighting_name(r.reweighting));
  j["gini"] = r.gini;
  j["bucket_labels"] = r.bucket_labels;
  j["bucket_item_ratio"] = r.bucket_item_ratio;
  j["exposure_share"] = r.exposure_share;
  j["seed"] = r.seed;
  j["config_hash"] = r.config_hash;
  j["version"] = r.version;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write report " + path.string());
  out << j.dump(2) << '\n';
}

EvalReport load_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read report " + path.string());
  const auto j = nlohmann::json::parse(in);
  EvalReport r;
  r.k = j.at("k").get<int>();
  r.ndcg = j.at("ndcg_at_k").get<double>();
  r.hit_rate = j.at("hit_rate_at_k").get<double>();
  r.num_cases = j.at("num_cases").get<std::size_t>();
  r.reweighting = parse_reweighting(j.at("reweighting").get<std::string>());
  r.gini = j.at("gini").get<double>();
  r.bucket_labels = j.at("bucket_labels").get<std::vector<std::string>>();
  r.bucket_item_ratio = j.at("bucket_item_ratio").get<std::vector<double>>();
  r.exposure_share = j.at("exposure_share").get<std::vector<double>>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.version = j.at("version").get<std::string>();
  return r;
}

}  // namespace dcr::eval
