#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "latentjudge/cli.hpp"
#include "latentjudge/evalharness.hpp"
#include "latentjudge/tensor.hpp"
#include "latentjudge/theory.hpp"
#include "latentjudge/trajgen.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace {

// nlohmann -> python objects, so reports come back as plain dicts/lists
py::object json_to_py(const json& j) {
  switch (j.type()) {
    case json::value_t::null: return py::none();
    case json::value_t::boolean: return py::bool_(j.get<bool>());
    case json::value_t::number_integer: return py::int_(j.get<std::int64_t>());
    case json::value_t::number_unsigned: return py::int_(j.get<std::uint64_t>());
    case json::value_t::number_float: return py::float_(j.get<double>());
    case json::value_t::string: return py::str(j.get<std::string>());
    case json::value_t::array: {
      py::list out;
      for (const auto& v : j) out.append(json_to_py(v));
      return out;
    }
    case json::value_t::object: {
      py::dict out;
      for (auto it = j.begin(); it != j.end(); ++it) out[py::str(it.key())] = json_to_py(it.value());
      return out;
    }
    default: return py::none();
  }
}

lj::GeneratorConfig config_from_kwargs(std::int64_t vocab_size, std::int64_t seq_len,
                                       std::int64_t n_risk_patterns, std::int64_t risk_pattern_len,
                                       double risk_density, const std::string& noise_model,
                                       double distractor_rate, double unsafe_ratio, std::uint64_t seed) {
  lj::GeneratorConfig cfg;
  cfg.vocab_size = vocab_size;
  cfg.seq_len = seq_len;
  cfg.n_risk_patterns = n_risk_patterns;
  cfg.risk_pattern_len = risk_pattern_len;
  cfg.risk_density = risk_density;
  cfg.noise_model = noise_model;
  cfg.distractor_rate = distractor_rate;
  cfg.unsafe_ratio = unsafe_ratio;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "latent-draft trajectory safety judge: C++ core bindings";

  py::register_exception<lj::Error>(m, "LatentJudgeError");

  m.def("run_cli", &lj::cli::run, py::arg("args"),
        "Dispatch a CLI invocation (same subcommands as the latentjudge binary); returns the exit code.");

  m.def(
      "softmax_rows",
      [](const std::vector<std::vector<double>>& rows) {
        if (rows.empty()) return std::vector<std::vector<double>>{};
        auto n = static_cast<std::int64_t>(rows.size());
        auto d = static_cast<std::int64_t>(rows[0].size());
        std::vector<double> flat;
        for (const auto& r : rows) {
          if (static_cast<std::int64_t>(r.size()) != d) throw lj::ShapeError("softmax_rows: ragged rows");
          flat.insert(flat.end(), r.begin(), r.end());
        }
        lj::Tensor t = lj::Tensor::matrix(n, d, std::move(flat));
        lj::Tensor p = lj::softmax_rows(t);
        std::vector<std::vector<double>> out;
        for (std::int64_t i = 0; i < n; ++i) {
          out.emplace_back(p.values().begin() + i * d, p.values().begin() + (i + 1) * d);
        }
        return out;
      },
      py::arg("rows"), "Row-stabilized softmax over a list of rows.");

  m.def(
      "generate_corpus",
      [](std::int64_t n, std::int64_t vocab_size, std::int64_t seq_len, std::int64_t n_risk_patterns,
         std::int64_t risk_pattern_len, double risk_density, const std::string& noise_model,
         double distractor_rate, double unsafe_ratio, std::uint64_t seed) {
        auto cfg = config_from_kwargs(vocab_size, seq_len, n_risk_patterns, risk_pattern_len, risk_density,
                                      noise_model, distractor_rate, unsafe_ratio, seed);
        py::list out;
        for (const auto& ex : lj::generate_corpus(cfg, n)) {
          out.append(json_to_py(lj::example_to_json(ex)));
        }
        return out;
      },
      py::arg("n"), py::arg("vocab_size") = 64, py::arg("seq_len") = 256, py::arg("n_risk_patterns") = 4,
      py::arg("risk_pattern_len") = 4, py::arg("risk_density") = 0.03, py::arg("noise_model") = "markov",
      py::arg("distractor_rate") = 0.3, py::arg("unsafe_ratio") = 0.5, py::arg("seed") = 1,
      "Generate a synthetic trajectory corpus with planted ordered risk patterns.");

  m.def(
      "bayes_posterior",
      [](const std::vector<double>& p_x, const std::vector<std::vector<double>>& p_r_given_x,
         const std::vector<double>& p_y_given_r, std::int64_t x) {
        lj::theory::DiscreteWorld w;
        w.n_x = static_cast<std::int64_t>(p_x.size());
        w.n_r = static_cast<std::int64_t>(p_y_given_r.size());
        w.p_x = p_x;
        for (const auto& row : p_r_given_x) {
          w.p_r_given_x.insert(w.p_r_given_x.end(), row.begin(), row.end());
        }
        w.g = p_y_given_r;
        w.validate();
        return w.bayes_posterior(x);
      },
      py::arg("p_x"), py::arg("p_r_given_x"), py::arg("p_y_given_r"), py::arg("x"),
      "Exact p(y=1 | X=x) for an enumerable world.");

  m.def(
      "verify_theory",
      [](std::uint64_t seed, std::int64_t prop1_worlds, std::int64_t prop2_triples) {
        return json_to_py(lj::theory::verify_all(seed, prop1_worlds, prop2_triples).to_json());
      },
      py::arg("seed") = 2026, py::arg("prop1_worlds") = 120, py::arg("prop2_triples") = 10000,
      "Run the exact discrete-world verification suites; returns the summary as a dict.");

  m.def(
      "metrics_from_confusion",
      [](std::int64_t tp, std::int64_t fp, std::int64_t tn, std::int64_t fn) {
        return json_to_py(lj::metrics_from_confusion(tp, fp, tn, fn).to_json());
      },
      py::arg("tp"), py::arg("fp"), py::arg("tn"), py::arg("fn"));
}
