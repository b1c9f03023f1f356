#include "doctest.h"
#include "support.hpp"

#include "dcr/error.hpp"
#include "dcr/evaluation.hpp"

#include <filesystem>
#include <set>

using namespace dcr;
using namespace dcr::test;

namespace {

// Exhaustive rank: 1 + number of candidates strictly ahead of the positive.
std::size_t brute_rank(const std::vector<std::int64_t>& items, const std::vector<double>& scores,
                       std::size_t pos) {
  std::size_t ahead = 0;
  for (std::size_t j = 0; j < items.size(); ++j) {
    if (j == pos) continue;
    if (scores[j] > scores[pos] || (scores[j] == scores[pos] && items[j] < items[pos])) ++ahead;
  }
  return ahead + 1;
}

data::PropensityTable flat_props(std::size_t m, double theta) {
  data::PropensityTable p;
  p.counts.assign(m, 3);
  p.theta_pos.assign(m, theta);
  p.theta_neg.assign(m, theta);
  return p;
}

}  // namespace

TEST_CASE("rank_metrics examples") {
  CHECK(eval::rank_metrics(1, 10).ndcg == 1.0);
  CHECK(eval::rank_metrics(1, 10).hit == 1.0);
  CHECK(eval::rank_metrics(3, 10).ndcg == 0.5);
  CHECK(eval::rank_metrics(3, 10).hit == 1.0);
  CHECK(eval::rank_metrics(11, 10).ndcg == 0.0);
  CHECK(eval::rank_metrics(11, 10).hit == 0.0);
  CHECK_THROWS(eval::rank_metrics(0, 10));
}

TEST_CASE("ranking matches a brute-force oracle on small candidate sets") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> size(1, 8);
  std::uniform_int_distribution<int> level(0, 3);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = static_cast<std::size_t>(size(rng));
    std::vector<std::int64_t> items(20);
    std::iota(items.begin(), items.end(), 0);
    std::shuffle(items.begin(), items.end(), rng);
    items.resize(n);
    std::vector<double> scores(n);
    // coarse levels force ties
    for (auto& s : scores) s = trial % 2 ? level(rng) * 0.5 : std::normal_distribution<>(0, 1)(rng);
    const std::size_t pos = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    const auto rank = eval::positive_rank(items, scores, items[pos]);
    REQUIRE(rank == brute_rank(items, scores, pos));
    for (int k : {1, 3, 5}) {
      const auto m = eval::rank_metrics(rank, k);
      const double ndcg = rank <= static_cast<std::size_t>(k) ? 1.0 / std::log2(rank + 1.0) : 0.0;
      CHECK(m.ndcg == ndcg);
      CHECK(m.hit == (rank <= static_cast<std::size_t>(k) ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("sample_negatives") {
  const auto all = eval::sample_negatives(3, 17, 101, 100, 7);
  std::set<std::int64_t> s(all.begin(), all.end());
  CHECK(s.size() == 100);
  CHECK_FALSE(s.contains(17));
  CHECK(*s.begin() == 0);
  CHECK(*s.rbegin() == 100);
  CHECK(eval::sample_negatives(3, 17, 5000, 100, 7) == eval::sample_negatives(3, 17, 5000, 100, 7));
  CHECK(eval::sample_negatives(3, 17, 5000, 100, 7) != eval::sample_negatives(4, 17, 5000, 100, 7));
  const std::vector<std::int64_t> excluded{1, 2, 3, 17, 40};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    for (std::size_t m : {std::size_t{60}, std::size_t{2000}}) {
      const auto neg = eval::sample_negatives(9, 17, m, 20, seed, excluded);
      std::set<std::int64_t> u(neg.begin(), neg.end());
      CHECK(u.size() == 20);
      for (auto i : neg) {
        CHECK(i >= 0);
        CHECK(i < static_cast<std::int64_t>(m));
        CHECK_FALSE(std::binary_search(excluded.begin(), excluded.end(), i));
      }
    }
  }
  CHECK_THROWS_AS(eval::sample_negatives(0, 1, 100, 100, 1), DataError);
  CHECK_THROWS_AS(eval::sample_negatives(0, 1, 30, 27, 1, excluded), DataError);
}

TEST_CASE("weighted mean examples") {
  CHECK(eval::weighted_mean(std::vector<double>{1, 0}, std::vector<double>{1, 3}) == 0.25);
  const std::vector<double> v{0.3, 0.9, 0.0, 0.5};
  CHECK(eval::weighted_mean(v, std::vector<double>(4, 2.5)) == doctest::Approx(1.7 / 4).epsilon(1e-15));
  CHECK_THROWS(eval::weighted_mean(std::vector<double>{}, std::vector<double>{}));
}

TEST_CASE("instance weights") {
  const std::vector<std::int64_t> counts{4, 2, 1, 0};
  const auto p = data::compute_propensities(counts, 0.5, 0.5, 1e-3);
  CHECK(eval::instance_weight(0, p, eval::Reweighting::ipw) == doctest::Approx(1.0));
  CHECK(eval::instance_weight(2, p, eval::Reweighting::ipw) == doctest::Approx(2.0));
  CHECK(eval::instance_weight(1, p, eval::Reweighting::raw_count) == 0.5);
  CHECK(eval::instance_weight(3, p, eval::Reweighting::raw_count) == 1.0);
  CHECK(eval::instance_weight(2, p, eval::Reweighting::none) == 1.0);
  CHECK(eval::parse_reweighting("raw_count") == eval::Reweighting::raw_count);
  CHECK_THROWS_AS(eval::parse_reweighting("snips"), ConfigError);
}

TEST_CASE("evaluate_unbiased matches per-pair scoring") {
  auto cfg = small_config(model::Mode::dcr, model::EncoderKind::self_attention);
  cfg.c = 2.0;
  const auto ds = tiny_dataset();
  cfg.num_items = ds.num_items();
  model::RecModel mm(cfg);
  const auto cases = eval::test_cases(ds);
  const auto props = data::compute_propensities(ds, 0.5, 0.5, 1e-3);
  eval::EvalProtocol proto;
  proto.num_negatives = 7;
  proto.batch_users = 9;
  const auto rep = eval::evaluate_unbiased(mm, cases, proto, props);
  CHECK(rep.num_cases == cases.size());
  double num_n = 0, num_h = 0, den = 0;
  for (const auto& c : cases) {
    std::vector<std::int64_t> cand{c.positive};
    const auto neg = eval::sample_negatives(c.user, c.positive, ds.num_items(), 7, proto.seed,
                                            c.excluded);
    cand.insert(cand.end(), neg.begin(), neg.end());
    std::vector<double> s;
    for (auto i : cand) {
      const auto f = mm.forward_one(c.history, i);
      s.push_back(model::counterfactual_score(f.y_hat, f.y_u, f.y_i, cfg.c));
    }
    const auto rank = brute_rank(cand, s, 0);
    const auto met = eval::rank_metrics(rank, proto.k);
    const double w = 1.0 / props.theta_pos[static_cast<std::size_t>(c.positive)];
    num_n += w * met.ndcg;
    num_h += w * met.hit;
    den += w;
  }
  CHECK(rep.ndcg == doctest::Approx(num_n / den).epsilon(1e-12));
  CHECK(rep.hit_rate == doctest::Approx(num_h / den).epsilon(1e-12));
  CHECK(rep.ndcg <= rep.hit_rate);
  for (std::size_t u = 0; u < cases.size(); ++u) CHECK(rep.per_case_ndcg[u] <= rep.per_case_hit[u]);
  CHECK_THROWS_AS(eval::evaluate_unbiased(mm, std::span<const eval::EvalCase>{}, proto, props),
                  DataError);
}

TEST_CASE("constant propensities reproduce the unweighted metric") {
  auto cfg = small_config(model::Mode::base_bce, model::EncoderKind::recurrent);
  const auto ds = tiny_dataset();
  cfg.num_items = ds.num_items();
  model::RecModel m(cfg);
  const auto cases = eval::test_cases(ds);
  eval::EvalProtocol proto;
  proto.num_negatives = 10;
  const auto weighted = eval::evaluate_unbiased(m, cases, proto, flat_props(ds.num_items(), 0.37));
  proto.reweighting = eval::Reweighting::none;
  const auto plain = eval::evaluate_unbiased(m, cases, proto, flat_props(ds.num_items(), 0.37));
  CHECK(weighted.ndcg == doctest::Approx(plain.ndcg).epsilon(1e-14));
  CHECK(weighted.hit_rate == doctest::Approx(plain.hit_rate).epsilon(1e-14));
}

TEST_CASE("evaluation does not depend on thread or batch count") {
  auto cfg = small_config(model::Mode::dcr, model::EncoderKind::dilated_conv);
  const auto ds = tiny_dataset();
  cfg.num_items = ds.num_items();
  model::RecModel m(cfg);
  const auto cases = eval::test_cases(ds);
  const auto props = data::compute_propensities(ds, 0.5, 0.5, 1e-3);
  eval::EvalProtocol proto;
  proto.num_negatives = 10;
  const auto a = eval::evaluate_unbiased(m, cases, proto, props);
  proto.threads = 4;
  proto.batch_users = 7;
  const auto b = eval::evaluate_unbiased(m, cases, proto, props);
  CHECK(std::abs(a.ndcg - b.ndcg) < 1e-9);
  CHECK(a.per_case_ndcg == b.per_case_ndcg);
}

TEST_CASE("exposure shares") {
  auto cfg = small_config(model::Mode::dcr, model::EncoderKind::self_attention);
  const auto ds = tiny_dataset();
  cfg.num_items = ds.num_items();
  model::RecModel m(cfg);
  const auto cases = eval::test_cases(ds);
  const auto counts = ds.train_counts();
  const std::vector<std::int64_t> bounds{5, 20};
  const auto buckets = data::popularity_buckets(counts, bounds);
  const auto share = eval::exposure_analysis(m, cases, 10, buckets, 32);
  REQUIRE(share.size() == 3);
  double sum = 0.0;
  for (double s : share) {
    CHECK(s >= 0.0);
    sum += s;
  }
  CHECK(std::abs(sum - 1.0) < 1e-9);
  const std::vector<std::int64_t> none{};
  const auto one = data::popularity_buckets(counts, none);
  const auto single = eval::exposure_analysis(m, cases, 10, one, 32);
  REQUIRE(single.size() == 1);
  CHECK(single[0] == 1.0);
  CHECK(eval::exposure_analysis(m, cases, 10, buckets, 32, 3) == share);
}

TEST_CASE("welch significance test") {
  const std::vector<double> a{0.3, 0.4, 0.5};
  CHECK(eval::significance_test(a, a) == doctest::Approx(0.5));
  const std::vector<double> hi{1.0, 1.0 + 1e-6, 1.0 - 1e-6};
  const std::vector<double> lo{0.0, 1e-6, -1e-6};
  CHECK(eval::significance_test(hi, lo) < 1e-9);
  CHECK(eval::significance_test(lo, hi) > 1.0 - 1e-9);
  CHECK(eval::significance_test(std::vector<double>{1, 1}, std::vector<double>{0, 0}) == 0.0);
  CHECK_THROWS(eval::significance_test(std::vector<double>{1}, a));
  // scipy.stats.ttest_ind(x, y, equal_var=False, alternative="greater")
  const std::vector<double> x{5.1, 4.9, 5.6, 5.8, 6.0};
  const std::vector<double> y{4.0, 4.5, 4.2, 3.9};
  const double p = eval::significance_test(x, y);
  CHECK(p == doctest::Approx(0.0006584822679587088).epsilon(1e-9));
}

TEST_CASE("welch p-values are uniform under the null") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n(0.0, 1.0);
  const int trials = 4000;
  std::vector<int> bins(10, 0);
  int below5 = 0;
  for (int t = 0; t < trials; ++t) {
    std::vector<double> a(10), b(10);
    for (auto& v : a) v = n(rng);
    for (auto& v : b) v = n(rng);
    const double p = eval::significance_test(a, b);
    ++bins[std::min(9, static_cast<int>(p * 10))];
    if (p < 0.05) ++below5;
  }
  // chi-square with 9 dof; 99.9% quantile is 27.88
  double chi2 = 0.0;
  for (int c : bins) chi2 += (c - trials / 10.0) * (c - trials / 10.0) / (trials / 10.0);
  CHECK(chi2 < 27.88);
  CHECK(std::abs(below5 / static_cast<double>(trials) - 0.05) < 0.015);
}

TEST_CASE("case builders and report round-trip") {
  const auto ds = tiny_dataset();
  const auto split = data::training_split(ds);
  const auto val = eval::validation_cases(split);
  const auto test = eval::test_cases(ds);
  REQUIRE(val.size() == ds.num_users());
  for (std::size_t u = 0; u < val.size(); ++u) {
    const auto seq = ds.sequence(u);
    CHECK(val[u].positive == seq[seq.size() - 2]);
    CHECK(test[u].positive == seq.back());
    CHECK(test[u].history.size() == seq.size() - 1);
    CHECK(val[u].history.size() == seq.size() - 2);
  }
  eval::EvalReport r;
  r.ndcg = 0.25;
  r.hit_rate = 0.5;
  r.num_cases = 3;
  r.bucket_labels = {"<5", ">=5"};
  r.exposure_share = {0.75, 0.25};
  r.bucket_item_ratio = {0.5, 0.5};
  r.seed = 9;
  r.config_hash = "abc";
  r.reweighting = eval::Reweighting::raw_count;
  const auto path = std::filesystem::temp_directory_path() / "dcr_report_test.json";
  eval::save_report(r, path);
  const auto back = eval::load_report(path);
  CHECK(back.ndcg == 0.25);
  CHECK(back.exposure_share == r.exposure_share);
  CHECK(back.reweighting == eval::Reweighting::raw_count);
  CHECK(back.config_hash == "abc");
  std::filesystem::remove(path);
}
