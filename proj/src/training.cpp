#include "dcr/training.hpp"

#include "dcr/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

namespace dcr::train {

using ag::Tensor;
using ag::Vector;

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double value_or_zero(const Tensor& t) { return t.defined() ? t.item() : 0.0; }

}  // namespace

void validate(const TrainConfig& c) {
  if (!(c.learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (c.max_epochs < 0) throw ConfigError("max_epochs must be >= 0");
  if (c.patience < 1) throw ConfigError("patience must be >= 1");
  if (c.clip_global_norm < 0.0) throw ConfigError("clip_global_norm must be >= 0");
  if (c.validation.k < 1) throw ConfigError("K must be >= 1");
  if (c.validation.num_negatives < 1) throw ConfigError("num_negatives must be >= 1");
}

std::vector<Batch> make_batches(const data::TrainingSplit& split, int batch_size,
                                Eigen::Index max_length, std::uint64_t epoch_seed) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (split.num_items < 2) throw DataError("need at least two items to sample negatives");
  std::vector<std::size_t> users;
  for (std::size_t u = 0; u < split.num_users(); ++u) {
    if (split.train[u].size() >= 2) users.push_back(u);
  }
  std::mt19937_64 rng(epoch_seed);
  std::shuffle(users.begin(), users.end(), rng);
  std::uniform_int_distribution<std::int64_t> pick(0, static_cast<std::int64_t>(split.num_items) - 2);

  std::vector<Batch> batches;
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t lo = 0; lo < users.size(); lo += bs) {
    const std::size_t hi = std::min(users.size(), lo + bs);
    Batch b;
    b.id = batches.size();
    Eigen::Index length = 0;
    for (std::size_t k = lo; k < hi; ++k) {
      const auto n = static_cast<Eigen::Index>(split.train[users[k]].size()) - 1;
      length = std::max(length, std::min(n, max_length));
    }
    b.inputs.batch = static_cast<Eigen::Index>(hi - lo);
    b.inputs.length = length;
    b.inputs.history.assign(static_cast<std::size_t>(b.inputs.batch * length), model::kPadding);
    for (std::size_t k = lo; k < hi; ++k) {
      const auto& s = split.train[users[k]];
      const auto steps = std::min<std::size_t>(s.size() - 1, static_cast<std::size_t>(length));
      const std::size_t start = s.size() - 1 - steps;
      const auto row0 = static_cast<std::int64_t>((k - lo) * static_cast<std::size_t>(length));
      const auto pad = static_cast<std::int64_t>(length) - static_cast<std::int64_t>(steps);
      for (std::size_t j = 0; j < steps; ++j) {
        const auto row = row0 + pad + static_cast<std::int64_t>(j);
        b.inputs.history[static_cast<std::size_t>(row)] = s[start + j];
        const std::int64_t pos = s[start + j + 1];
        std::int64_t neg = pick(rng);
        if (neg >= pos) ++neg;
        b.rows.push_back(row);
        b.positives.push_back(pos);
        b.negatives.push_back(neg);
      }
      b.inputs.users.push_back(static_cast<std::int64_t>(users[k]));
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

loss::LabelledBatch label_batch(const Batch& batch, const data::PropensityTable& props) {
  const auto p = static_cast<Eigen::Index>(batch.positives.size());
  loss::LabelledBatch lb;
  lb.pairs = p;
  lb.min_propensity = props.eps;
  lb.labels = Vector::Zero(2 * p);
  lb.labels.head(p).setOnes();
  lb.theta_pos.resize(2 * p);
  lb.theta_neg.resize(2 * p);
  for (Eigen::Index k = 0; k < 2 * p; ++k) {
    const auto item = static_cast<std::size_t>(
        k < p ? batch.positives[static_cast<std::size_t>(k)]
              : batch.negatives[static_cast<std::size_t>(k - p)]);
    lb.theta_pos(k) = props.theta_pos.at(item);
    lb.theta_neg(k) = props.theta_neg.at(item);
  }
  return lb;
}

loss::LossComponents batch_losses(const model::RecModel& m, const Batch& batch,
                                  const data::PropensityTable& props,
                                  const model::ForwardContext& ctx) {
  model::UserBatch inputs = batch.inputs;
  if (m.config().user_dim <= 0) inputs.users.clear();
  const model::UserStates us = m.user_states(inputs, true, ctx);
  std::vector<std::int64_t> rows = batch.rows;
  rows.insert(rows.end(), batch.rows.begin(), batch.rows.end());
  std::vector<std::int64_t> items = batch.positives;
  items.insert(items.end(), batch.negatives.begin(), batch.negatives.end());
  const model::BatchOutputs out = m.score(m.select_rows(us, rows), m.item_states(items));
  return loss::compute_losses(m.config().mode, out, label_batch(batch, props), m.config().weights);
}

EpochRecord train_epoch(model::RecModel& m, std::span<const Batch> batches,
                        const data::PropensityTable& props, nn::Adam& optimizer,
                        std::mt19937_64& dropout_rng) {
  EpochRecord rec;
  const model::ForwardContext ctx{true, &dropout_rng};
  for (const auto& batch : batches) {
    m.parameters().zero_grad();
    const loss::LossComponents c = batch_losses(m, batch, props, ctx);
    const double parts[] = {value_or_zero(c.main),       value_or_zero(c.interest),
                            value_or_zero(c.conformity), value_or_zero(c.item),
                            value_or_zero(c.user),       value_or_zero(c.ortho_user),
                            value_or_zero(c.ortho_item), c.total.item()};
    if (!std::all_of(std::begin(parts), std::end(parts), [](double v) { return std::isfinite(v); })) {
      std::ostringstream msg;
      msg << "non-finite loss in batch " << batch.id << ": main=" << parts[0]
          << " interest=" << parts[1] << " conformity=" << parts[2] << " item=" << parts[3]
          << " user=" << parts[4] << " ortho_user=" << parts[5] << " ortho_item=" << parts[6]
          << " total=" << parts[7];
      throw NumericError(msg.str());
    }
    c.total.backward();
    optimizer.step();
    rec.main += parts[0];
    rec.interest += parts[1];
    rec.conformity += parts[2];
    rec.item += parts[3];
    rec.user += parts[4];
    rec.ortho_user += parts[5];
    rec.ortho_item += parts[6];
    rec.total += parts[7];
  }
  m.parameters().zero_grad();
  if (!batches.empty()) {
    const double n = static_cast<double>(batches.size());
    for (double* v : {&rec.main, &rec.interest, &rec.conformity, &rec.item, &rec.user,
                      &rec.ortho_user, &rec.ortho_item, &rec.total}) {
      *v /= n;
    }
  }
  return rec;
}

void write_metrics_header(std::ostream& out) {
  out << "epoch\tmain\tinterest\tconformity\titem\tuser\tortho_user\tortho_item\ttotal\t"
         "val_ndcg\tval_hit\tseconds\n";
}

void write_metrics_row(std::ostream& out, const EpochRecord& r) {
  out << r.epoch << std::setprecision(10);
  for (double v : {r.main, r.interest, r.conformity, r.item, r.user, r.ortho_user, r.ortho_item,
                   r.total, r.val_ndcg, r.val_hit, r.seconds}) {
    out << '\t' << v;
  }
  out << '\n';
}

bool record_epoch(TrainState& state, const EpochRecord& rec, int patience) {
  state.epoch = rec.epoch;
  if (rec.val_ndcg > state.best_metric) {
    state.best_metric = rec.val_ndcg;
    state.best_epoch = rec.epoch;
    state.since_improvement = 0;
  } else {
    ++state.since_improvement;
  }
  state.log.push_back(rec);
  return state.since_improvement >= patience;
}

TrainState fit(model::RecModel& m, const data::TrainingSplit& split, const TrainConfig& config) {
  validate(config);
  TrainState state;
  if (config.max_epochs == 0) {
    state.warnings.push_back("max_epochs is 0; returning the initialised model");
    std::cerr << "warning: " << state.warnings.back() << '\n';
    return state;
  }
  const data::PropensityTable props =
      data::compute_propensities(split, config.omega, config.rho, config.eps);
  const std::vector<eval::EvalCase> cases = eval::validation_cases(split);
  eval::EvalProtocol protocol = config.validation;
  protocol.max_length = m.config().encoder.max_length;

  nn::AdamOptions opts;
  opts.learning_rate = config.learning_rate;
  opts.clip_global_norm = config.clip_global_norm;
  nn::Adam optimizer(m.parameters(), opts);
  auto best = m.parameters().snapshot();

  std::ofstream log;
  if (!config.metrics_log.empty()) {
    if (config.metrics_log.has_parent_path()) {
      std::filesystem::create_directories(config.metrics_log.parent_path());
    }
    log.open(config.metrics_log);
    if (!log) throw DataError("cannot write metrics log " + config.metrics_log.string());
    write_metrics_header(log);
  }

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto batches = make_batches(split, config.batch_size, m.config().encoder.max_length,
                                      mix(config.seed, static_cast<std::uint64_t>(epoch)));
    std::mt19937_64 dropout_rng(mix(config.seed ^ 0x5bd1e995ULL, static_cast<std::uint64_t>(epoch)));
    EpochRecord rec = train_epoch(m, batches, props, optimizer, dropout_rng);
    const eval::EvalReport val = eval::evaluate_unbiased(m, cases, protocol, props);
    rec.epoch = epoch;
    rec.val_ndcg = val.ndcg;
    rec.val_hit = val.hit_rate;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool stop = record_epoch(state, rec, config.patience);
    if (state.best_epoch == epoch) best = m.parameters().snapshot();
    if (log) {
      write_metrics_row(log, rec);
      log.flush();
    }
    if (config.verbose) {
      std::cerr << "epoch " << epoch << " loss " << rec.total << " val_ndcg " << rec.val_ndcg
                << " val_hit " << rec.val_hit << " (" << rec.seconds << "s)\n";
    }
    if (stop) break;
  }
  m.parameters().restore(best);
  return state;
}

// ---- checkpoints ----

namespace {

constexpr char kMagic[8] = {'D', 'C', 'R', 'C', 'K', 'P', 'T', '\0'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little endian");

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("checkpoint truncated");
  return v;
}

}  // namespace

void save_checkpoint(const model::RecModel& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  nlohmann::json cfg = m.config();
  const std::string text = cfg.dump();
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto& params = m.parameters().all();
  put<std::uint64_t>(out, params.size());
  for (const auto& [name, t] : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(out, 8);  // f64
    put<std::uint64_t>(out, static_cast<std::uint64_t>(t.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(t.cols()));
    out.write(reinterpret_cast<const char*>(t.value().data()),
              static_cast<std::streamsize>(t.value().size() * sizeof(double)));
  }
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

std::unique_ptr<model::RecModel> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError(path.string() + " is not a checkpoint");
  }
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  std::string text(get<std::uint64_t>(in), '\0');
  in.read(text.data(), static_cast<std::streamsize>(text.size()));
  if (!in) throw DataError("checkpoint truncated");
  const auto cfg = nlohmann::json::parse(text).get<model::ModelConfig>();
  auto m = std::make_unique<model::RecModel>(cfg);
  auto& params = m->parameters();
  const auto count = get<std::uint64_t>(in);
  if (count != params.all().size()) throw DataError("checkpoint parameter count mismatch");
  for (std::uint64_t k = 0; k < count; ++k) {
    std::string name(get<std::uint32_t>(in), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    if (get<std::uint8_t>(in) != 8) throw DataError("checkpoint dtype must be f64");
    const auto rows = static_cast<Eigen::Index>(get<std::uint64_t>(in));
    const auto cols = static_cast<Eigen::Index>(get<std::uint64_t>(in));
    if (!params.contains(name)) throw DataError("checkpoint has unknown parameter " + name);
    Tensor& t = params.at(name);
    if (t.rows() != rows || t.cols() != cols) throw DataError("shape mismatch for " + name);
    in.read(reinterpret_cast<char*>(t.mutable_value().data()),
            static_cast<std::streamsize>(rows * cols * static_cast<Eigen::Index>(sizeof(double))));
    if (!in) throw DataError("checkpoint truncated");
  }
  return m;
}

}  // namespace dcr::train
