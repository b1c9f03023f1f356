#include "doctest.h"
#include "support.hpp"

#include "dcr/error.hpp"
#include "dcr/training.hpp"

#include <filesystem>
#include <fstream>
#include <limits>

using namespace dcr;
using namespace dcr::test;

namespace {

data::TrainingSplit toy_split() {
  data::TrainingSplit s;
  s.num_items = 3;
  s.train = {{0, 1, 2}, {1, 2, 0}};
  s.validation = {1, 2};
  return s;
}

model::ModelConfig toy_config(model::Mode mode = model::Mode::dcr) {
  auto c = small_config(mode, model::EncoderKind::self_attention, 3, 4);
  c.num_users = 2;
  return c;
}

Matrix probe_scores(const model::RecModel& m) {
  ag::NoGradGuard g;
  model::UserBatch b{{-1, 1, 2, 0, 2, 1}, 2, 3, {}};
  const std::vector<std::int64_t> rows{0, 0, 1, 1};
  const std::vector<std::int64_t> items{0, 1, 2, 0};
  const auto out = m.score(m.select_rows(m.user_states(b, false, {}), rows), m.item_states(items));
  Matrix s(4, 2);
  s.col(0) = out.y_hat.value().col(0);
  s.col(1) = m.ranking_scores(out);
  return s;
}

train::TrainConfig quick_config(int epochs) {
  train::TrainConfig c;
  c.max_epochs = epochs;
  c.batch_size = 16;
  c.patience = 100;
  c.validation.num_negatives = 10;
  return c;
}

}  // namespace

TEST_CASE("make_batches") {
  const auto split = toy_split();
  data::TrainingSplit one;
  one.num_items = 5;
  one.train = {{4, 2, 3}, {1}};
  one.validation = {0, 2};
  const auto b = train::make_batches(one, 8, 10, 1);
  REQUIRE(b.size() == 1);
  CHECK(b[0].positives == std::vector<std::int64_t>{2, 3});
  CHECK(b[0].rows.size() == 2);
  CHECK(b[0].inputs.history == std::vector<std::int64_t>{4, 2});

  const auto ds = tiny_dataset();
  const auto tiny = data::training_split(ds);
  const auto a1 = train::make_batches(tiny, 7, 32, 99);
  const auto a2 = train::make_batches(tiny, 7, 32, 99);
  const auto a3 = train::make_batches(tiny, 7, 32, 100);
  REQUIRE(a1.size() == a2.size());
  bool differs = false;
  for (std::size_t k = 0; k < a1.size(); ++k) {
    CHECK(a1[k].inputs.users == a2[k].inputs.users);
    CHECK(a1[k].negatives == a2[k].negatives);
    differs |= a1[k].inputs.users != a3[k].inputs.users;
  }
  CHECK(differs);
  std::size_t examples = 0;
  for (const auto& batch : a1) {
    for (std::size_t k = 0; k < batch.positives.size(); ++k) {
      CHECK(batch.negatives[k] != batch.positives[k]);
      CHECK(batch.negatives[k] >= 0);
      CHECK(batch.negatives[k] < static_cast<std::int64_t>(tiny.num_items));
      // the encoder row holds the item just before the positive
      const auto row = static_cast<std::size_t>(batch.rows[k]);
      CHECK(batch.inputs.history[row] != model::kPadding);
    }
    examples += batch.positives.size();
  }
  std::size_t expect = 0;
  for (const auto& s : tiny.train) expect += std::min<std::size_t>(s.size() - 1, 32);
  CHECK(examples == expect);

  const auto cut = train::make_batches(tiny, 7, 3, 99);
  for (const auto& batch : cut) CHECK(batch.inputs.length <= 3);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  model::RecModel m(toy_config());
  const auto before = m.parameters().snapshot();
  nn::AdamOptions opts;
  opts.learning_rate = 0.0;
  nn::Adam adam(m.parameters(), opts);
  const auto split = toy_split();
  const auto props = data::compute_propensities(split, 0.5, 0.5, 1e-3);
  const auto batches = train::make_batches(split, 2, 32, 1);
  std::mt19937_64 rng(1);
  train::train_epoch(m, batches, props, adam, rng);
  const auto after = m.parameters().snapshot();
  CHECK(before == after);
}

TEST_CASE("toy batch: total loss is non-increasing over 50 steps") {
  for (model::Mode mode : {model::Mode::dcr, model::Mode::base_bce, model::Mode::base_bpr}) {
    CAPTURE(model::mode_name(mode));
    model::RecModel m(toy_config(mode));
    nn::Adam adam(m.parameters(), {});
    const auto split = toy_split();
    const auto props = data::compute_propensities(split, 0.5, 0.5, 1e-3);
    const auto batches = train::make_batches(split, 2, 32, 3);
    REQUIRE(batches.size() == 1);
    std::mt19937_64 rng(1);
    double prev = std::numeric_limits<double>::infinity();
    double first = 0.0;
    for (int step = 0; step < 50; ++step) {
      const double total = train::train_epoch(m, batches, props, adam, rng).total;
      if (step == 0) first = total;
      CHECK(total <= prev + 1e-12);
      prev = total;
    }
    CHECK(prev < first);
  }
}

TEST_CASE("early stopping bookkeeping") {
  train::TrainState s;
  train::EpochRecord r;
  r.epoch = 1;
  r.val_ndcg = 0.5;
  CHECK_FALSE(train::record_epoch(s, r, 1));
  r.epoch = 2;
  r.val_ndcg = 0.4;
  CHECK(train::record_epoch(s, r, 1));
  CHECK(s.epoch == 2);
  CHECK(s.best_epoch == 1);

  train::TrainState t;
  const double series[] = {0.1, 0.3, 0.3, 0.2, 0.35, 0.1};
  int e = 0;
  for (double v : series) {
    r.epoch = ++e;
    r.val_ndcg = v;
    train::record_epoch(t, r, 10);
    CHECK(t.since_improvement == (t.best_epoch == e ? 0 : e - t.best_epoch));
  }
  CHECK(t.best_epoch == 5);
  CHECK(t.best_metric == 0.35);
}

TEST_CASE("fit is deterministic, restores the best epoch and logs metrics") {
  const auto ds = tiny_dataset();
  const auto split = data::training_split(ds);
  auto cfg = small_config(model::Mode::dcr, model::EncoderKind::recurrent);
  cfg.num_items = ds.num_items();
  cfg.num_users = ds.num_users();
  auto tc = quick_config(4);
  const auto log = std::filesystem::temp_directory_path() / "dcr_fit_metrics.tsv";
  tc.metrics_log = log;
  model::RecModel a(cfg), b(cfg);
  const auto sa = train::fit(a, split, tc);
  tc.metrics_log.clear();
  const auto sb = train::fit(b, split, tc);
  CHECK(sa.best_epoch == sb.best_epoch);
  REQUIRE(sa.log.size() == 4);
  double best = -1.0;
  for (std::size_t k = 0; k < sa.log.size(); ++k) {
    CHECK(sa.log[k].val_ndcg == sb.log[k].val_ndcg);
    CHECK(sa.log[k].total == sb.log[k].total);
    best = std::max(best, sa.log[k].val_ndcg);
  }
  CHECK(sa.best_metric == best);
  CHECK(sa.log[static_cast<std::size_t>(sa.best_epoch - 1)].val_ndcg == best);
  CHECK(probe_scores(a) == probe_scores(b));

  // the restored parameters reproduce the best validation score
  const auto props = data::compute_propensities(split, tc.omega, tc.rho, tc.eps);
  auto proto = tc.validation;
  proto.max_length = cfg.encoder.max_length;
  const auto rep = eval::evaluate_unbiased(a, eval::validation_cases(split), proto, props);
  CHECK(rep.ndcg == best);

  std::ifstream in(log);
  std::string header;
  std::getline(in, header);
  CHECK(header.rfind("epoch\t", 0) == 0);
  int rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  CHECK(rows == 4);
  std::filesystem::remove(log);
}

TEST_CASE("patience 1 stops as soon as validation fails to improve") {
  const auto ds = tiny_dataset();
  const auto split = data::training_split(ds);
  auto cfg = small_config(model::Mode::base_bce, model::EncoderKind::recurrent);
  cfg.num_items = ds.num_items();
  model::RecModel m(cfg);
  auto tc = quick_config(30);
  tc.patience = 1;
  tc.learning_rate = 0.05;
  const auto s = train::fit(m, split, tc);
  CHECK(s.epoch < 30);
  CHECK(s.epoch == s.best_epoch + 1);
}

TEST_CASE("max_epochs 0 returns the initial model with a warning") {
  const auto split = toy_split();
  model::RecModel m(toy_config());
  const Matrix before = probe_scores(m);
  const auto s = train::fit(m, split, quick_config(0));
  CHECK(s.warnings.size() == 1);
  CHECK(s.log.empty());
  CHECK(probe_scores(m) == before);
}

TEST_CASE("invalid training configs are rejected") {
  auto tc = quick_config(3);
  tc.learning_rate = 0.0;
  CHECK_THROWS_AS(train::validate(tc), ConfigError);
  tc = quick_config(3);
  tc.patience = 0;
  CHECK_THROWS_AS(train::validate(tc), ConfigError);
  tc = quick_config(3);
  tc.batch_size = 0;
  CHECK_THROWS_AS(train::validate(tc), ConfigError);
}

TEST_CASE("non-finite losses abort with the batch id and components") {
  model::RecModel m(toy_config());
  m.parameters().all().begin()->second.mutable_value()(0, 0) =
      std::numeric_limits<double>::quiet_NaN();
  nn::Adam adam(m.parameters(), {});
  const auto split = toy_split();
  const auto props = data::compute_propensities(split, 0.5, 0.5, 1e-3);
  const auto batches = train::make_batches(split, 2, 32, 1);
  std::mt19937_64 rng(1);
  try {
    train::train_epoch(m, batches, props, adam, rng);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string what = e.what();
    CHECK(what.find("batch 0") != std::string::npos);
    CHECK(what.find("ortho_item=") != std::string::npos);
  }
}

TEST_CASE("checkpoint round-trip is bit-identical") {
  for (model::Mode mode : {model::Mode::dcr, model::Mode::macr, model::Mode::bias_tower}) {
    auto cfg = toy_config(mode);
    cfg.encoder.kind = model::EncoderKind::dilated_conv;
    cfg.c = 1.5;
    cfg.user_dim = mode == model::Mode::dcr ? 3 : 0;
    model::RecModel m(cfg);
    nn::Adam adam(m.parameters(), {});
    const auto split = toy_split();
    const auto props = data::compute_propensities(split, 0.5, 0.5, 1e-3);
    std::mt19937_64 rng(1);
    train::train_epoch(m, train::make_batches(split, 2, 32, 1), props, adam, rng);
    const auto path = std::filesystem::temp_directory_path() / "dcr_ckpt_test.bin";
    train::save_checkpoint(m, path);
    const auto back = train::load_checkpoint(path);
    CHECK(back->config().mode == mode);
    CHECK(back->config().c == 1.5);
    if (cfg.user_dim == 0) CHECK(probe_scores(*back) == probe_scores(m));
    for (const auto& [name, t] : m.parameters().all()) {
      CHECK(back->parameters().at(name).value() == t.value());
    }
    std::filesystem::remove(path);
  }
  const auto junk = std::filesystem::temp_directory_path() / "dcr_ckpt_junk.bin";
  std::ofstream(junk) << "not a checkpoint";
  CHECK_THROWS_AS(train::load_checkpoint(junk), DataError);
  std::filesystem::remove(junk);
}
