#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "qfilter/densitymat.hpp"
#include "qfilter/diffusion_limit.hpp"
#include "qfilter/errors.hpp"
#include "qfilter/model.hpp"
#include "qfilter/stats.hpp"

namespace qfilter {

// Experiment configuration documents: JSON with comments allowed.
//
// Matrices are written as a list of rows, each entry a [re, im] pair:
//   [[[0.5, 0], [0.25, 0]], [[0.25, 0], [0.5, 0]]]
// Operators may also be named ("pauli_x", "pauli_y", "pauli_z", "zero",
// "identity") and states may be named ("maximally_mixed", "basis:K",
// "qubit-rho0", "qubit-rho-hat0").

struct SubmartingaleSettings {
  double z_crit = 3.0;
  double final_threshold = 0.99;  // diagnostic only
};

struct ChainCheckSettings {
  std::vector<double> alphas{2.0};
  std::vector<double> eps{1e-3};
  std::size_t pairs = 1000;  // per (alpha, eps) combination
  bool normalize = true;
  bool identical_pairs = false;
  double tolerance = 1e-9;
};

struct OutputSettings {
  std::string dir = "out";
  std::string format = "csv";  // csv | json
  bool gnuplot = false;
  std::size_t trajectories = 0;  // per-step dumps of the first N trajectories
  std::size_t trajectory_stride = 1;
};

struct ExperimentConfig {
  std::optional<std::string> preset;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  SystemModel model;
  DensityMatrix rho0;
  DensityMatrix rho_hat0;
  EnsembleConfig ensemble;
  std::size_t checkpoint_count = 61;  // used when no explicit list is given
  SubmartingaleSettings submartingale;
  ChainCheckSettings chain_check;
  DiffusionLimitConfig sweep;
  OutputSettings output;
};

inline const std::vector<std::string>& known_presets() {
  static const std::vector<std::string> names{"paper-qubit"};
  return names;
}

namespace detail {

using Json = nlohmann::json;

// Nested messages keep the inner kind unless it is another validation error.
inline std::string describe(const Error& e) {
  return e.kind() == ErrorKind::ValidationError ? e.message() : std::string(e.what());
}

// Walks one JSON object, remembering which keys were read so that leftovers
// can be reported as unknown.
class Section {
 public:
  Section(const Json* j, std::string path) : j_(j), path_(std::move(path)) {
    if (j_ && !j_->is_object()) fail("expected an object");
  }

  bool has(const std::string& key) {
    if (!j_ || !j_->contains(key)) return false;
    seen_.insert(key);
    return true;
  }

  const Json& at(const std::string& key) {
    seen_.insert(key);
    return j_->at(key);
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  Section section(const std::string& key) {
    if (!has(key)) return Section(nullptr, child(key));
    return Section(&at(key), child(key));
  }

  double number(const std::string& key, double fallback) {
    if (!has(key)) return fallback;
    const Json& v = at(key);
    if (!v.is_number()) fail_at(key, "expected a number");
    return v.get<double>();
  }

  double positive(const std::string& key, double fallback) {
    const double v = number(key, fallback);
    if (!(v > 0.0)) fail_at(key, "must be positive");
    return v;
  }

  std::size_t count(const std::string& key, std::size_t fallback, std::size_t min = 0) {
    if (!has(key)) return fallback;
    const Json& v = at(key);
    if (!v.is_number_unsigned()) fail_at(key, "expected a non-negative integer");
    const auto n = v.get<std::uint64_t>();
    if (n < min) fail_at(key, "must be at least " + std::to_string(min));
    return static_cast<std::size_t>(n);
  }

  bool flag(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const Json& v = at(key);
    if (!v.is_boolean()) fail_at(key, "expected true or false");
    return v.get<bool>();
  }

  std::string text(const std::string& key, std::string fallback) {
    if (!has(key)) return fallback;
    const Json& v = at(key);
    if (!v.is_string()) fail_at(key, "expected a string");
    return v.get<std::string>();
  }

  std::vector<double> numbers(const std::string& key, std::vector<double> fallback) {
    if (!has(key)) return fallback;
    const Json& v = at(key);
    if (v.is_number()) return {v.get<double>()};
    if (!v.is_array()) fail_at(key, "expected a number or a list of numbers");
    std::vector<double> out;
    for (const auto& x : v) {
      if (!x.is_number()) fail_at(key, "expected a list of numbers");
      out.push_back(x.get<double>());
    }
    return out;
  }

  void finish() const {
    if (!j_) return;
    for (const auto& [key, value] : j_->items()) {
      if (!seen_.count(key)) throw Error(ErrorKind::ValidationError, child(key) + ": unknown key");
    }
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw Error(ErrorKind::ValidationError, (path_.empty() ? "<root>" : path_) + ": " + msg);
  }
  [[noreturn]] void fail_at(const std::string& key, const std::string& msg) const {
    throw Error(ErrorKind::ValidationError, child(key) + ": " + msg);
  }

 private:
  const Json* j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline ComplexMatrix parse_matrix_literal(const Json& v, const std::string& path) {
  auto fail = [&](const std::string& msg) -> ComplexMatrix {
    throw Error(ErrorKind::ValidationError, path + ": " + msg);
  };
  if (!v.is_array() || v.empty()) return fail("expected a non-empty list of rows");
  const auto n = static_cast<Index>(v.size());
  ComplexMatrix m(n, n);
  for (Index i = 0; i < n; ++i) {
    const Json& row = v[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Index>(row.size()) != n) {
      return fail("row " + std::to_string(i) + " must have " + std::to_string(n) + " entries (square matrix)");
    }
    for (Index j = 0; j < n; ++j) {
      const Json& e = row[static_cast<std::size_t>(j)];
      if (!e.is_array() || e.size() != 2 || !e[0].is_number() || !e[1].is_number()) {
        return fail("entry (" + std::to_string(i) + ", " + std::to_string(j) + ") must be a [re, im] pair");
      }
      m(i, j) = Complex(e[0].get<double>(), e[1].get<double>());
    }
  }
  if (n < 2) return fail("dimension must be at least 2");
  return m;
}

inline ComplexMatrix parse_operator(const Json& v, const std::string& path, std::optional<Index> dim) {
  if (v.is_string()) {
    const auto name = v.get<std::string>();
    const Index n = dim.value_or(2);
    if (name == "zero") return ComplexMatrix::Zero(n, n);
    if (name == "identity") return identity(n);
    if (name == "pauli_x" || name == "pauli_y" || name == "pauli_z") {
      if (n != 2) throw Error(ErrorKind::ValidationError, path + ": " + name + " requires dimension 2");
      return name == "pauli_x" ? pauli_x() : name == "pauli_y" ? pauli_y() : pauli_z();
    }
    throw Error(ErrorKind::ValidationError, path + ": unknown operator name '" + name + "'");
  }
  ComplexMatrix m = parse_matrix_literal(v, path);
  if (dim && m.rows() != *dim) {
    throw Error(ErrorKind::ValidationError, path + ": dimension " + std::to_string(m.rows()) + " does not match " +
                                                std::to_string(*dim));
  }
  return m;
}

inline ComplexMatrix qubit_rho0_matrix() {
  ComplexMatrix m(2, 2);
  m << 0.5, 0.25, 0.25, 0.5;
  return m;
}

inline ComplexMatrix qubit_rho_hat0_matrix() {
  ComplexMatrix m(2, 2);
  m << 1.0 / 3.0, 0.0, 0.0, 2.0 / 3.0;
  return m;
}

inline DensityMatrix parse_state(const Json& v, const std::string& path, Index dim) {
  try {
    if (v.is_string()) {
      const auto name = v.get<std::string>();
      if (name == "maximally_mixed") return DensityMatrix::maximally_mixed(dim);
      if (name.rfind("basis:", 0) == 0) {
        std::size_t used = 0;
        long long k = -1;
        try {
          k = std::stoll(name.substr(6), &used);
        } catch (const std::exception&) {
          used = 0;
        }
        if (used == 0 || used != name.size() - 6) {
          throw Error(ErrorKind::ValidationError, "malformed basis index in '" + name + "'");
        }
        return DensityMatrix::basis_state(dim, static_cast<Index>(k));
      }
      if (name == "qubit-rho0" || name == "qubit-rho-hat0") {
        if (dim != 2) throw Error(ErrorKind::ValidationError, name + " requires dimension 2");
        return DensityMatrix(name == "qubit-rho0" ? qubit_rho0_matrix() : qubit_rho_hat0_matrix());
      }
      throw Error(ErrorKind::ValidationError, "unknown state name '" + name + "'");
    }
    ComplexMatrix m = parse_matrix_literal(v, path);
    if (m.rows() != dim) {
      throw Error(ErrorKind::ValidationError, "dimension " + std::to_string(m.rows()) + " does not match the model (" +
                                                  std::to_string(dim) + ")");
    }
    return DensityMatrix(std::move(m));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::ValidationError && e.message().rfind(path, 0) == 0) throw;
    throw Error(ErrorKind::ValidationError, path + ": " + describe(e));
  }
}

inline Driver parse_driver(const std::string& name, const std::string& path) {
  if (name == "diffusive_kraus") return Driver::diffusive_kraus;
  if (name == "diffusive_em") return Driver::diffusive_em;
  if (name == "jump") return Driver::jump;
  if (name == "chain") return Driver::chain;
  throw Error(ErrorKind::ValidationError,
              path + ": unknown driver '" + name + "' (diffusive_kraus, diffusive_em, jump, chain)");
}

inline std::string driver_name(Driver d) {
  switch (d) {
    case Driver::diffusive_kraus: return "diffusive_kraus";
    case Driver::diffusive_em: return "diffusive_em";
    case Driver::jump: return "jump";
    case Driver::chain: return "chain";
  }
  return "?";
}

inline Json matrix_to_json(const ComplexMatrix& m) {
  Json rows = Json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back({m(i, j).real(), m(i, j).imag()});
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

/// Builds a fully validated experiment. `preset_override` takes the place of
/// the document's "preset" key when given.
inline ExperimentConfig parse_config(const std::string& text, std::optional<std::string> preset_override = {}) {
  using detail::Json;
  Json doc;
  try {
    doc = text.empty() ? Json::object() : Json::parse(text, nullptr, true, true);
  } catch (const Json::parse_error& e) {
    throw Error(ErrorKind::ParseError, e.what());
  }
  detail::Section root(&doc, "");

  std::optional<std::string> preset = preset_override;
  if (root.has("preset")) {
    const std::string named = root.text("preset", "");
    if (!preset) preset = named;
  }
  const bool defaults = preset.has_value();
  if (defaults && *preset != "paper-qubit") {
    throw Error(ErrorKind::ValidationError, "preset: unknown preset '" + *preset + "' (paper-qubit)");
  }

  // model
  detail::Section model = root.section("model");
  std::optional<ComplexMatrix> h;
  if (model.has("hamiltonian")) {
    h = detail::parse_operator(model.at("hamiltonian"), model.child("hamiltonian"), std::nullopt);
  } else if (defaults) {
    h = pauli_y();
  } else {
    throw Error(ErrorKind::ValidationError, "model.hamiltonian: required (or set a preset)");
  }
  const Index dim = h->rows();
  auto operator_list = [&](const std::string& key, std::vector<ComplexMatrix> fallback) {
    if (!model.has(key)) return fallback;
    const Json& v = model.at(key);
    if (!v.is_array()) throw Error(ErrorKind::ValidationError, model.child(key) + ": expected a list of operators");
    std::vector<ComplexMatrix> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      out.push_back(detail::parse_operator(v[i], model.child(key) + "[" + std::to_string(i) + "]", dim));
    }
    return out;
  };
  std::vector<ComplexMatrix> measured = operator_list("measured", defaults ? std::vector{pauli_z()} : std::vector<ComplexMatrix>{});
  std::vector<ComplexMatrix> unmeasured = operator_list("unmeasured", {});
  model.finish();

  ExperimentConfig cfg{.model = [&] {
                         try {
                           return SystemModel(*h, measured, unmeasured);
                         } catch (const Error& e) {
                           throw Error(ErrorKind::ValidationError, "model: " + detail::describe(e));
                         }
                       }(),
                       .rho0 = DensityMatrix::maximally_mixed(dim),
                       .rho_hat0 = DensityMatrix::maximally_mixed(dim)};
  cfg.preset = preset;

  // initial states
  detail::Section states = root.section("initial_states");
  auto state = [&](const std::string& key, const char* preset_name) {
    if (states.has(key)) return detail::parse_state(states.at(key), states.child(key), dim);
    if (defaults) return detail::parse_state(Json(preset_name), states.child(key), dim);
    throw Error(ErrorKind::ValidationError, states.child(key) + ": required (or set a preset)");
  };
  cfg.rho0 = state("rho0", "qubit-rho0");
  cfg.rho_hat0 = state("rho_hat0", "qubit-rho-hat0");
  states.finish();

  const Json seed_default = 20240601;
  if (root.has("seed")) {
    const Json& s = root.at("seed");
    if (!s.is_number_unsigned()) throw Error(ErrorKind::ValidationError, "seed: expected a non-negative integer");
    cfg.seed = s.get<std::uint64_t>();
  } else {
    cfg.seed = seed_default.get<std::uint64_t>();
  }
  cfg.workers = root.count("workers", 1, 1);

  // ensemble
  detail::Section ens = root.section("ensemble");
  EnsembleConfig& e = cfg.ensemble;
  e.n_traj = ens.count("n_traj", 500, 1);
  e.dt = ens.positive("dt", 1e-4);
  e.horizon = ens.positive("horizon", 3.0);
  e.driver = detail::parse_driver(ens.text("driver", "diffusive_kraus"), ens.child("driver"));
  e.alpha = ens.positive("alpha", 2.0);
  e.max_jump_prob = ens.positive("max_jump_prob", 0.1);
  if (e.max_jump_prob >= 1.0) ens.fail_at("max_jump_prob", "must be below 1");
  e.domain_tol = ens.positive("domain_tol", 1e-8);
  e.project_every = static_cast<int>(ens.count("project_every", 1, 1));
  e.max_abort_fraction = ens.number("max_abort_fraction", 0.01);
  if (e.max_abort_fraction < 0.0 || e.max_abort_fraction > 1.0) ens.fail_at("max_abort_fraction", "must lie in [0, 1]");
  if (ens.has("checkpoints")) {
    const Json& c = ens.at("checkpoints");
    if (c.is_number_unsigned()) {
      cfg.checkpoint_count = c.get<std::size_t>();
      if (cfg.checkpoint_count < 2) ens.fail_at("checkpoints", "need at least 2 checkpoints");
    } else {
      e.checkpoints = ens.numbers("checkpoints", {});
      cfg.checkpoint_count = e.checkpoints.size();
    }
  }
  if (e.checkpoints.empty()) e.checkpoints = equally_spaced_checkpoints(e.horizon, cfg.checkpoint_count);
  if (ens.has("observable")) e.observable = detail::parse_operator(ens.at("observable"), ens.child("observable"), dim);
  ens.finish();
  // Checked before the checkpoint grid so that an oversized dt is reported as such.
  if (e.driver != Driver::chain) check_step_size(cfg.model, e.dt, IntegratorConfig{}.max_generator_step);
  if (e.driver == Driver::jump) check_jump_rate_bound(cfg.model, {e.alpha, e.dt, e.max_jump_prob, e.domain_tol});
  try {
    checkpoint_steps(e);
  } catch (const Error& err) {
    throw Error(ErrorKind::ValidationError, "ensemble.checkpoints: " + detail::describe(err));
  }

  // submartingale
  detail::Section sub = root.section("submartingale");
  cfg.submartingale.z_crit = sub.positive("z_crit", 3.0);
  cfg.submartingale.final_threshold = sub.number("final_threshold", 0.99);
  sub.finish();

  // chain_check
  detail::Section chain = root.section("chain_check");
  ChainCheckSettings& cc = cfg.chain_check;
  cc.alphas = chain.numbers("alpha", cc.alphas);
  cc.eps = chain.numbers("eps", cc.eps);
  if (cc.alphas.empty() || cc.eps.empty()) chain.fail("alpha and eps lists must be non-empty");
  for (double a : cc.alphas) {
    if (!(a >= 0.0)) chain.fail_at("alpha", "must be non-negative");
  }
  for (double x : cc.eps) {
    if (!(x > 0.0)) chain.fail_at("eps", "must be positive");
  }
  cc.pairs = chain.count("pairs", cc.pairs, 1);
  cc.normalize = chain.flag("normalize", true);
  cc.identical_pairs = chain.flag("identical_pairs", false);
  cc.tolerance = chain.number("tolerance", 1e-9);
  chain.finish();

  // sweep
  detail::Section sweep = root.section("sweep");
  DiffusionLimitConfig& dl = cfg.sweep;
  dl.alphas = sweep.numbers("alpha", dl.alphas);
  if (sweep.has("dt")) dl.dt = sweep.positive("dt", 0.0);
  dl.dt_cap = sweep.positive("dt_cap", dl.dt_cap);
  dl.horizon = sweep.positive("horizon", dl.horizon);
  dl.intervals = sweep.count("intervals", dl.intervals, 1);
  dl.n_traj = sweep.count("n_traj", dl.n_traj, 1);
  dl.max_jump_prob = sweep.positive("max_jump_prob", dl.max_jump_prob);
  dl.z_trend = sweep.positive("z_trend", dl.z_trend);
  if (sweep.has("observable")) {
    dl.observable = detail::parse_operator(sweep.at("observable"), sweep.child("observable"), dim);
  }
  sweep.finish();
  if (dl.alphas.empty()) throw Error(ErrorKind::ValidationError, "sweep.alpha: must be non-empty");
  for (std::size_t i = 0; i < dl.alphas.size(); ++i) {
    if (!(dl.alphas[i] > 0.0)) throw Error(ErrorKind::ValidationError, "sweep.alpha: must be positive");
    if (i > 0 && !(dl.alphas[i] > dl.alphas[i - 1])) {
      throw Error(ErrorKind::ValidationError, "sweep.alpha: must be strictly increasing");
    }
  }

  // output
  detail::Section out = root.section("output");
  cfg.output.dir = out.text("dir", cfg.output.dir);
  cfg.output.format = out.text("format", cfg.output.format);
  if (cfg.output.format != "csv" && cfg.output.format != "json") out.fail_at("format", "must be csv or json");
  cfg.output.gnuplot = out.flag("gnuplot", false);
  cfg.output.trajectories = out.count("trajectories", 0);
  cfg.output.trajectory_stride = out.count("trajectory_stride", 1, 1);
  out.finish();

  root.finish();
  return cfg;
}

/// Applies seed and worker settings to every sub-configuration.
inline void apply_run_settings(ExperimentConfig& cfg, std::uint64_t seed, std::size_t workers) {
  if (workers == 0) throw Error(ErrorKind::ValidationError, "workers: must be at least 1");
  cfg.seed = seed;
  cfg.workers = workers;
  cfg.ensemble.seed = seed;
  cfg.ensemble.workers = workers;
  cfg.sweep.seed = seed;
  cfg.sweep.workers = workers;
}

/// Canonical form of a parsed configuration, suitable for re-parsing.
inline nlohmann::ordered_json config_to_json(const ExperimentConfig& cfg) {
  using OJ = nlohmann::ordered_json;
  auto mat = [](const ComplexMatrix& m) { return OJ(detail::matrix_to_json(m)); };
  auto mats = [&](const std::vector<ComplexMatrix>& ms) {
    OJ a = OJ::array();
    for (const auto& m : ms) a.push_back(mat(m));
    return a;
  };
  OJ j;
  if (cfg.preset) j["preset"] = *cfg.preset;
  j["seed"] = cfg.seed;
  j["workers"] = cfg.workers;
  j["model"] = {{"hamiltonian", mat(cfg.model.hamiltonian())},
                {"measured", mats(cfg.model.measured_channels())},
                {"unmeasured", mats(cfg.model.unmeasured_channels())}};
  j["initial_states"] = {{"rho0", mat(cfg.rho0.matrix())}, {"rho_hat0", mat(cfg.rho_hat0.matrix())}};
  const EnsembleConfig& e = cfg.ensemble;
  j["ensemble"] = {{"n_traj", e.n_traj},
                   {"dt", e.dt},
                   {"horizon", e.horizon},
                   {"checkpoints", e.checkpoints},
                   {"driver", detail::driver_name(e.driver)},
                   {"alpha", e.alpha},
                   {"max_jump_prob", e.max_jump_prob},
                   {"domain_tol", e.domain_tol},
                   {"project_every", e.project_every},
                   {"max_abort_fraction", e.max_abort_fraction}};
  if (e.observable) j["ensemble"]["observable"] = mat(*e.observable);
  j["submartingale"] = {{"z_crit", cfg.submartingale.z_crit},
                        {"final_threshold", cfg.submartingale.final_threshold}};
  const ChainCheckSettings& cc = cfg.chain_check;
  j["chain_check"] = {{"alpha", cc.alphas},           {"eps", cc.eps},
                      {"pairs", cc.pairs},            {"normalize", cc.normalize},
                      {"identical_pairs", cc.identical_pairs}, {"tolerance", cc.tolerance}};
  const DiffusionLimitConfig& dl = cfg.sweep;
  j["sweep"] = {{"alpha", dl.alphas},       {"dt_cap", dl.dt_cap},   {"horizon", dl.horizon},
                {"intervals", dl.intervals}, {"n_traj", dl.n_traj},   {"max_jump_prob", dl.max_jump_prob},
                {"z_trend", dl.z_trend}};
  if (dl.dt) j["sweep"]["dt"] = *dl.dt;
  if (dl.observable) j["sweep"]["observable"] = mat(*dl.observable);
  j["output"] = {{"dir", cfg.output.dir},
                 {"format", cfg.output.format},
                 {"gnuplot", cfg.output.gnuplot},
                 {"trajectories", cfg.output.trajectories},
                 {"trajectory_stride", cfg.output.trajectory_stride}};
  return j;
}

}  // namespace qfilter
