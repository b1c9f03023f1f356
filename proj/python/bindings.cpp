#include "dcr/error.hpp"
#include "dcr/evaluation.hpp"
#include "dcr/experiment.hpp"
#include "dcr/training.hpp"
#include "dcr/version.hpp"

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <memory>

namespace py = pybind11;
using namespace dcr;
using nlohmann::json;

namespace {

// Specs cross the boundary as JSON text; the Python wrapper does the dict conversion.
exp::ExperimentSpec spec_from(const std::string& text) {
  return exp::parse_spec(text.empty() ? json::object() : json::parse(text));
}

struct Model {
  std::unique_ptr<model::RecModel> impl;
};

Model make_model(const std::string& spec_json, std::size_t num_items, std::size_t num_users) {
  auto cfg = spec_from(spec_json).model;
  cfg.num_items = num_items;
  cfg.num_users = num_users;
  return {std::make_unique<model::RecModel>(cfg)};
}

py::dict forward_dict(const model::ForwardOutputs& f) {
  py::dict d;
  d["y_hat"] = f.y_hat;
  d["y_m"] = f.y_m;
  d["y_m_int"] = f.y_m_int;
  d["y_m_con"] = f.y_m_con;
  d["y_i"] = f.y_i;
  d["y_u"] = f.y_u;
  d["w_int"] = f.w_int;
  d["e_pop_i"] = f.e_pop_i;
  d["e_int_i"] = f.e_int_i;
  d["pref_con"] = f.pref_con;
  d["pref_int"] = f.pref_int;
  return d;
}

py::list fit(Model& m, const data::InteractionDataset& ds, const std::string& spec_json) {
  const auto spec = spec_from(spec_json);
  train::TrainState state;
  {
    py::gil_scoped_release release;
    state = train::fit(*m.impl, data::training_split(ds), spec.train);
  }
  py::list log;
  for (const auto& r : state.log) {
    py::dict d;
    d["epoch"] = r.epoch;
    d["main"] = r.main;
    d["interest"] = r.interest;
    d["conformity"] = r.conformity;
    d["item"] = r.item;
    d["ortho_user"] = r.ortho_user;
    d["ortho_item"] = r.ortho_item;
    d["total"] = r.total;
    d["val_ndcg"] = r.val_ndcg;
    d["val_hit"] = r.val_hit;
    d["best"] = r.epoch == state.best_epoch;
    log.append(d);
  }
  return log;
}

py::dict evaluate(const Model& m, const data::InteractionDataset& ds, const std::string& split,
                  const std::string& spec_json) {
  const auto spec = spec_from(spec_json);
  if (ds.num_items() != m.impl->config().num_items) {
    throw DataError("model and dataset disagree on the catalogue size");
  }
  auto protocol = spec.eval;
  protocol.max_length = m.impl->config().encoder.max_length;
  const auto tsplit = data::training_split(ds);
  const auto props = data::compute_propensities(tsplit, spec.train.omega, spec.train.rho, spec.train.eps);
  std::vector<eval::EvalCase> cases;
  if (split == "validation") {
    cases = eval::validation_cases(tsplit);
  } else if (split == "test") {
    cases = eval::test_cases(ds);
  } else {
    throw ConfigError("split must be 'test' or 'validation'");
  }
  eval::EvalReport rep;
  std::vector<double> exposure;
  {
    py::gil_scoped_release release;
    rep = eval::evaluate_unbiased(*m.impl, cases, protocol, props);
    if (spec.exposure) {
      const auto counts = tsplit.train_counts();
      exposure = eval::exposure_analysis(*m.impl, cases, protocol.k,
                                         data::popularity_buckets(counts, spec.bucket_boundaries),
                                         protocol.max_length, protocol.threads);
    }
  }
  py::dict d;
  d["k"] = rep.k;
  d["ndcg"] = rep.ndcg;
  d["hit_rate"] = rep.hit_rate;
  d["num_cases"] = rep.num_cases;
  d["exposure_share"] = exposure;
  d["per_case_ndcg"] = rep.per_case_ndcg;
  d["per_case_weight"] = rep.per_case_weight;
  return d;
}

}  // namespace

PYBIND11_MODULE(_dcr, m) {
  m.doc() = "Debiased sequential recommendation (DCR) core";
  m.attr("__version__") = std::string(kVersion);

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  py::class_<data::InteractionDataset>(m, "Dataset")
      .def_property_readonly("num_users", &data::InteractionDataset::num_users)
      .def_property_readonly("num_items", &data::InteractionDataset::num_items)
      .def_property_readonly("num_interactions", &data::InteractionDataset::num_interactions)
      .def("sequence",
           [](const data::InteractionDataset& d, std::size_t u) {
             if (u >= d.num_users()) throw py::index_error("user out of range");
             const auto s = d.sequence(u);
             return std::vector<std::int64_t>(s.begin(), s.end());
           })
      .def("train_counts", &data::InteractionDataset::train_counts)
      .def("all_counts", &data::InteractionDataset::all_counts)
      .def("save", [](const data::InteractionDataset& d, const std::filesystem::path& p) {
        data::save_dataset(d, p);
      });

  m.def("load_dataset",
        [](const std::string& spec_json) { return exp::load_dataset(spec_from(spec_json).dataset); },
        py::arg("spec_json") = "");
  m.def("read_dataset", &data::load_dataset, py::arg("path"));
  m.def("preprocess_file",
        [](const std::filesystem::path& path, const std::string& format, int min_count) {
          return data::preprocess(data::load_raw(path, data::parse_format(format)), {min_count, true});
        },
        py::arg("path"), py::arg("format"), py::arg("min_count") = 5);

  m.def("gini_index", [](const std::vector<std::int64_t>& c) { return data::gini_index(c); });
  m.def("compute_propensities",
        [](const std::vector<std::int64_t>& counts, double omega, double rho, double eps) {
          const auto p = data::compute_propensities(counts, omega, rho, eps);
          return py::make_tuple(p.theta_pos, p.theta_neg);
        },
        py::arg("counts"), py::arg("omega") = 0.5, py::arg("rho") = 0.5, py::arg("eps") = 1e-3);

  py::class_<Model>(m, "Model")
      .def(py::init(&make_model), py::arg("spec_json"), py::arg("num_items"), py::arg("num_users") = 0)
      .def_property_readonly("config_json",
                             [](const Model& x) { return json(x.impl->config()).dump(); })
      .def_property_readonly("num_parameters",
                             [](const Model& x) {
                               std::size_t n = 0;
                               for (const auto& [_, t] : x.impl->parameters().all()) {
                                 n += static_cast<std::size_t>(t.value().size());
                               }
                               return n;
                             })
      .def("set_c", [](Model& x, double c) { x.impl->set_c(c); })
      .def("forward",
           [](const Model& x, const std::vector<std::int64_t>& history, std::int64_t item,
              std::int64_t user) { return forward_dict(x.impl->forward_one(history, item, user)); },
           py::arg("history"), py::arg("item"), py::arg("user") = -1)
      .def("rank",
           [](const Model& x, const std::vector<std::int64_t>& history,
              const std::vector<std::int64_t>& candidates, std::optional<double> c,
              std::int64_t user) {
             const auto r = model::score_candidates(*x.impl, history, candidates,
                                                    c.value_or(x.impl->config().c), user);
             std::vector<std::pair<std::int64_t, double>> out;
             for (const auto& e : r) out.emplace_back(e.item, e.score);
             return out;
           },
           py::arg("history"), py::arg("candidates"), py::arg("c") = py::none(),
           py::arg("user") = -1)
      .def("save", [](const Model& x, const std::filesystem::path& p) {
        train::save_checkpoint(*x.impl, p);
      });
  m.def("load_checkpoint",
        [](const std::filesystem::path& p) { return Model{train::load_checkpoint(p)}; });

  m.def("fit", &fit, py::arg("model"), py::arg("dataset"), py::arg("spec_json") = "");
  m.def("evaluate", &evaluate, py::arg("model"), py::arg("dataset"), py::arg("split") = "test",
        py::arg("spec_json") = "");

  m.def("rank_metrics",
        [](std::size_t rank, int k) {
          const auto r = eval::rank_metrics(rank, k);
          return py::make_tuple(r.ndcg, r.hit);
        });
  m.def("sample_negatives",
        [](std::int64_t user, std::int64_t positive, std::size_t num_items, int n,
           std::uint64_t seed, std::vector<std::int64_t> excluded) {
          std::sort(excluded.begin(), excluded.end());
          return eval::sample_negatives(user, positive, num_items, n, seed, excluded);
        },
        py::arg("user"), py::arg("positive"), py::arg("num_items"), py::arg("n"),
        py::arg("seed"), py::arg("excluded") = std::vector<std::int64_t>{});
  m.def("significance_test", [](const std::vector<double>& a, const std::vector<double>& b) {
    return eval::significance_test(a, b);
  });

  m.def("canonical_spec",
        [](const std::string& spec_json) { return exp::spec_to_json(spec_from(spec_json)).dump(); },
        py::arg("spec_json") = "");
  m.def("run_experiment",
        [](const std::string& spec_json) {
          const auto spec = spec_from(spec_json);
          exp::ResultTable t;
          {
            py::gil_scoped_release release;
            t = exp::run(spec);
          }
          return exp::to_json(t).dump();
        });
  m.def("format_table", [](const std::string& table_json) {
    return exp::format_table(exp::table_from_json(json::parse(table_json)));
  });
  m.def("plot",
        [](const std::string& table_json, const std::string& kind, const std::filesystem::path& out) {
          exp::plot(exp::table_from_json(json::parse(table_json)), exp::parse_plot_kind(kind), out);
        });
}
