#include "doctest.h"
#include "support.hpp"

#include "dcr/error.hpp"

#include <nlohmann/json.hpp>

using namespace dcr;
using namespace dcr::test;
using model::Mode;

namespace {

double sig(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

}  // namespace

TEST_CASE("fused score and attention blend are recomputable from the outputs") {
  for (auto kind : all_kinds()) {
    CAPTURE(model::encoder_kind_name(kind));
    model::RecModel m(small_config(Mode::dcr, kind));
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<std::int64_t> item(0, 29);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<std::int64_t> hist(static_cast<std::size_t>(1 + trial % 6));
      for (auto& h : hist) h = item(rng);
      const auto f = m.forward_one(hist, item(rng));
      CHECK(std::abs(f.y_m_int - dot(f.e_int_i, f.pref_int)) < 1e-12);
      CHECK(std::abs(f.y_m_con - dot(f.e_pop_i, f.pref_con)) < 1e-12);
      CHECK(std::abs(f.y_m - (f.w_int * f.y_m_int + (1.0 - f.w_int) * f.y_m_con)) < 1e-12);
      CHECK(std::abs(f.y_hat - f.y_m * sig(f.y_u) * sig(f.y_i)) < 1e-12);
      CHECK(f.w_int > 0.0);
      CHECK(f.w_int < 1.0);
    }
  }
}

TEST_CASE("ablation variants change only the matching blend") {
  const std::vector<std::int64_t> hist{3, 4, 5};
  {
    model::RecModel m(small_config(Mode::var0, model::EncoderKind::self_attention));
    const auto f = m.forward_one(hist, 7);
    CHECK(f.w_int == 1.0);
    CHECK(f.y_m == f.y_m_int);
    CHECK_FALSE(m.parameters().contains("atten_net.fc0.weight"));
  }
  for (Mode mode : {Mode::var1, Mode::var2}) {
    model::RecModel m(small_config(mode, model::EncoderKind::self_attention));
    const auto f = m.forward_one(hist, 7);
    CHECK(std::abs(f.y_m - (f.y_m_int + f.y_m_con)) < 1e-12);
    CHECK(std::abs(f.y_hat - f.y_m * sig(f.y_u) * sig(f.y_i)) < 1e-12);
  }
}

TEST_CASE("dual encoders are separate instances") {
  model::RecModel m(small_config(Mode::dcr, model::EncoderKind::recurrent));
  const auto& p = m.parameters();
  CHECK(p.contains("con_encoder.gru0.input.weight"));
  CHECK(p.contains("int_encoder.gru0.input.weight"));
  CHECK(p.at("con_encoder.gru0.input.weight").value() !=
        p.at("int_encoder.gru0.input.weight").value());
}

TEST_CASE("baselines score by the dot product at inference") {
  const std::vector<std::int64_t> hist{1, 2, 3, 4};
  for (Mode mode : {Mode::base_bce, Mode::base_bpr, Mode::ipw_bce, Mode::ipw_bpr, Mode::bias_tower}) {
    CAPTURE(model::mode_name(mode));
    model::RecModel m(small_config(mode, model::EncoderKind::dilated_conv));
    ag::NoGradGuard g;
    model::UserBatch b{hist, 1, 4, {}};
    const auto us = m.user_states(b, false, {});
    const std::vector<std::int64_t> items{5};
    const auto is = m.item_states(items);
    const auto out = m.score(us, is);
    const double expect = us.pref_int.value().row(0).dot(is.e_i.value().row(0));
    CHECK(std::abs(out.y_hat.value()(0, 0) - expect) < 1e-12);
    CHECK(m.ranking_scores(out)(0) == out.y_hat.value()(0, 0));
    if (mode == Mode::bias_tower) {
      CHECK(out.y_train.value()(0, 0) != out.y_hat.value()(0, 0));
    } else {
      CHECK(out.y_train.value()(0, 0) == out.y_hat.value()(0, 0));
    }
  }
}

TEST_CASE("macr fuses three branches without disentanglement") {
  model::RecModel m(small_config(Mode::macr, model::EncoderKind::self_attention));
  CHECK_FALSE(m.parameters().contains("item_interest.fc0.weight"));
  const auto f = m.forward_one(std::vector<std::int64_t>{1, 2}, 3);
  CHECK(std::abs(f.y_hat - f.y_m * sig(f.y_u) * sig(f.y_i)) < 1e-12);
}

TEST_CASE("counterfactual scoring") {
  CHECK(model::counterfactual_score(2.0, 0.0, 0.0, 4.0) == doctest::Approx(1.0));
  model::RecModel m(small_config(Mode::dcr, model::EncoderKind::self_attention));
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::int64_t> item(0, 29);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::int64_t> hist{item(rng), item(rng), item(rng)};
    std::vector<std::int64_t> cand(10);
    for (auto& c : cand) c = item(rng);
    const auto ranked = model::score_candidates(m, hist, cand, 0.0);
    std::vector<double> biased;
    for (auto c : cand) biased.push_back(m.forward_one(hist, c).y_hat);
    const auto expect = model::rank_by_score(cand, biased);
    REQUIRE(ranked.size() == expect.size());
    for (std::size_t k = 0; k < ranked.size(); ++k) CHECK(ranked[k].item == expect[k].item);
  }
}

TEST_CASE("rank_by_score breaks ties toward the lower item index") {
  const std::vector<std::int64_t> items{9, 2, 5, 1};
  const std::vector<double> scores{1.0, 1.0, 3.0, 1.0};
  const auto r = model::rank_by_score(items, scores);
  CHECK(r[0].item == 5);
  CHECK(r[1].item == 1);
  CHECK(r[2].item == 2);
  CHECK(r[3].item == 9);
}

TEST_CASE("batched scoring agrees with single passes") {
  model::RecModel m(small_config(Mode::dcr, model::EncoderKind::recurrent));
  ag::NoGradGuard g;
  model::UserBatch b{{-1, 1, 2, 3, 4, 5}, 2, 3, {}};
  const auto us = m.user_states(b, false, {});
  const std::vector<std::int64_t> rows{0, 1};
  const std::vector<std::int64_t> items{7, 8};
  const auto out = m.score(m.select_rows(us, rows), m.item_states(items));
  CHECK(std::abs(out.y_hat.value()(0, 0) - m.forward_one(std::vector<std::int64_t>{1, 2}, 7).y_hat) <
        1e-12);
  CHECK(std::abs(out.y_hat.value()(1, 0) -
                 m.forward_one(std::vector<std::int64_t>{3, 4, 5}, 8).y_hat) < 1e-12);
}

TEST_CASE("explicit user embeddings") {
  auto cfg = small_config(Mode::dcr, model::EncoderKind::self_attention);
  cfg.user_dim = 5;
  model::RecModel m(cfg);
  CHECK(m.parameters().contains("user_embedding"));
  CHECK(m.parameters().contains("merge_con.fc0.weight"));
  const auto f = m.forward_one(std::vector<std::int64_t>{1, 2, 3}, 4, 2);
  CHECK(f.e_con_u.size() == 8);
  CHECK(f.e_int_u.size() == 8);
  CHECK_THROWS(m.forward_one(std::vector<std::int64_t>{1, 2, 3}, 4));
  auto bad = cfg;
  bad.num_users = 0;
  CHECK_THROWS_AS(model::RecModel{bad}, ConfigError);
}

TEST_CASE("invalid inputs are rejected") {
  model::RecModel m(small_config(Mode::dcr, model::EncoderKind::self_attention));
  CHECK_THROWS_AS(m.forward_one(std::vector<std::int64_t>{1}, 30), std::out_of_range);
  CHECK_THROWS(m.forward_one(std::vector<std::int64_t>{}, 3));
  CHECK_THROWS_AS(model::parse_mode("lightgcn"), ConfigError);
  auto cfg = small_config(Mode::dcr, model::EncoderKind::self_attention);
  cfg.interest_head = {12, 7};
  CHECK_THROWS_AS(model::RecModel{cfg}, ConfigError);
}

TEST_CASE("disentanglement heads and the full forward pass pass finite-difference checks") {
  for (Mode mode : {Mode::dcr, Mode::var1, Mode::macr, Mode::bias_tower}) {
    CAPTURE(model::mode_name(mode));
    auto cfg = small_config(mode, model::EncoderKind::self_attention, 10, 4);
    cfg.user_dim = mode == Mode::dcr ? 3 : 0;
    model::RecModel m(cfg);
    model::UserBatch b{{-1, 1, 2, 3, 4, 5}, 2, 3, {}};
    if (cfg.user_dim > 0) b.users = {0, 1};
    const std::vector<std::int64_t> rows{0, 1, 1};
    const std::vector<std::int64_t> items{6, 7, 2};
    std::vector<Tensor> ps;
    for (auto& [_, t] : m.parameters().all()) ps.push_back(t);
    const auto f = [&] {
      const auto out = m.score(m.select_rows(m.user_states(b, false, {}), rows), m.item_states(items));
      const Tensor main = probe(out.y_train);
      return out.y_m_int.defined() ? ag::add(main, probe(out.y_m_int, 7)) : main;
    };
    CHECK(gradcheck(f, ps).max_rel_error < 1e-4);
  }
}

TEST_CASE("model config round-trips through JSON") {
  auto cfg = small_config(Mode::var2, model::EncoderKind::dilated_conv);
  cfg.weights.gamma = 0.125;
  cfg.c = 30.0;
  const nlohmann::json j = cfg;
  const auto back = j.get<model::ModelConfig>();
  CHECK(back.mode == Mode::var2);
  CHECK(back.encoder.kind == model::EncoderKind::dilated_conv);
  CHECK(back.encoder.dilations == cfg.encoder.dilations);
  CHECK(back.weights.gamma == 0.125);
  CHECK(back.c == 30.0);
  CHECK(back.interest_head == cfg.interest_head);
}
