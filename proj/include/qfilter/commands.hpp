#pragma once

#include <charconv>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <system_error>
#include <vector>

#include <nlohmann/json.hpp>

#include "qfilter/config.hpp"
#include "qfilter/diffusion_limit.hpp"
#include "qfilter/jump.hpp"
#include "qfilter/stats.hpp"

namespace qfilter {

enum ExitCode : int { kSuccess = 0, kAssertionFailed = 1, kConfigError = 2, kRuntimeError = 3 };

/// Command-line settings that take precedence over the configuration document.
struct RunOptions {
  std::optional<std::string> preset;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::optional<std::string> out_dir;
  std::optional<std::string> format;
  bool gnuplot = false;
};

namespace detail {

using OJson = nlohmann::ordered_json;

/// Shortest round-trip decimal form, independent of the C locale.
inline std::string format_number(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

inline std::string format_number(std::size_t x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

class CsvWriter {
 public:
  explicit CsvWriter(const std::vector<std::string>& header) { row(header); }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) text_ += ',';
      text_ += cells[i];
    }
    text_ += '\n';
  }

  template <class... Ts>
  void values(const Ts&... xs) {
    row({format_number(xs)...});
  }

  const std::string& str() const noexcept { return text_; }

 private:
  std::string text_;
};

/// Writes to a sibling temporary file and renames it into place.
inline void atomic_write(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorKind::ValidationError, "cannot write " + tmp.string());
    f << content;
    f.flush();
    if (!f) throw Error(ErrorKind::ValidationError, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw Error(ErrorKind::ValidationError, "cannot rename into " + path.string() + ": " + ec.message());
  }
}

inline std::filesystem::path prepare_out_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::ValidationError, "output.dir: cannot create " + dir + ": " + ec.message());
  return dir;
}

inline OJson error_json(const std::string& command, int code, const std::string& kind, const std::string& message) {
  return OJson{{"command", command}, {"status", "error"}, {"exit_code", code}, {"error", kind}, {"message", message}};
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Errors raised while checking the configuration are config errors; anything
// raised once the simulation has started is a runtime error.
struct ConfigStage : Error {
  explicit ConfigStage(const Error& e) : Error(e) {}
};

template <class Fn>
auto config_stage(Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ConfigStage&) {
    throw;
  } catch (const Error& e) {
    throw ConfigStage(e);
  }
}

/// Random mixed state B B^dag / tr(B B^dag) with complex Gaussian B.
inline DensityMatrix random_mixed_state(Index n, RandomStream& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  ComplexMatrix b(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) b(i, j) = Complex(g(rng), g(rng));
  ComplexMatrix m = b * b.adjoint();
  hermitize_in_place(m);
  m /= real_trace(m);
  return DensityMatrix(std::move(m));
}

inline std::string gnuplot_script(const std::string& csv, double threshold) {
  return "set datafile separator ','\n"
         "set key autotitle columnhead bottom right\n"
         "set xlabel 't'\n"
         "set ylabel 'mean fidelity'\n"
         "set yrange [*:1.005]\n"
         "plot '" + csv + "' using 1:2:3 with yerrorlines title 'E[F(rho_t, rho_hat_t)]', \\\n"
         "     " + format_number(threshold) + " with lines dashtype 2 title 'threshold'\n";
}

}  // namespace detail

inline ExperimentConfig resolve_config(const std::string& text, const RunOptions& opts) {
  ExperimentConfig cfg = parse_config(text, opts.preset);
  std::uint64_t seed = cfg.seed;
  if (const char* env = std::getenv("QFILTER_SEED"); env && *env) {
    std::uint64_t v = 0;
    const char* end = env + std::char_traits<char>::length(env);
    const auto r = std::from_chars(env, end, v);
    if (r.ec != std::errc() || r.ptr != end) {
      throw Error(ErrorKind::ValidationError, std::string("QFILTER_SEED: not a non-negative integer: ") + env);
    }
    seed = v;
  }
  if (opts.seed) seed = *opts.seed;
  apply_run_settings(cfg, seed, opts.workers.value_or(cfg.workers));
  if (opts.out_dir) cfg.output.dir = *opts.out_dir;
  if (opts.format) {
    if (*opts.format != "csv" && *opts.format != "json") {
      throw Error(ErrorKind::ValidationError, "--format: must be csv or json");
    }
    cfg.output.format = *opts.format;
  }
  if (opts.gnuplot) cfg.output.gnuplot = true;
  return cfg;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

inline int cmd_simulate(const ExperimentConfig& cfg, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  detail::config_stage([&] {
    TrajectorySimulator probe(cfg.model, cfg.ensemble);
    if (probe.steps().size() < 2) throw Error(ErrorKind::ValidationError, "ensemble.checkpoints: need at least 2");
    if (cfg.ensemble.n_traj < 50) {
      throw Error(ErrorKind::ValidationError, "ensemble.n_traj: the submartingale test needs at least 50 trajectories");
    }
    if (cfg.output.gnuplot && cfg.output.format != "csv") {
      throw Error(ErrorKind::ValidationError, "output.gnuplot: requires csv format");
    }
    return 0;
  });
  const auto dir = detail::config_stage([&] { return detail::prepare_out_dir(cfg.output.dir); });

  const EnsembleResult result = run_ensemble(cfg.model, cfg.rho0, cfg.rho_hat0, cfg.ensemble);
  const SubmartingaleReport report = submartingale_test(result, cfg.submartingale.z_crit);
  const bool converged = final_convergence(result, cfg.submartingale.final_threshold);

  // Per-step dumps of the first few trajectories (re-run from their own streams).
  const TrajectorySimulator sim(cfg.model, cfg.ensemble);
  const std::size_t dumps = std::min(cfg.output.trajectories, cfg.ensemble.n_traj);
  const std::size_t channels = cfg.model.measured_channels().size();
  const bool diffusive =
      cfg.ensemble.driver == Driver::diffusive_kraus || cfg.ensemble.driver == Driver::diffusive_em;
  for (std::size_t i = 0; i < dumps; ++i) {
    std::vector<std::string> header{"t", "fidelity", "tr_rho", "lambda_min_rho", "purity_rho", "purity_rhohat"};
    if (diffusive) {
      for (std::size_t mu = 0; mu < channels; ++mu) header.push_back("dy_" + detail::format_number(mu));
    } else {
      header.push_back("outcome");
    }
    detail::CsvWriter csv(header);
    auto emit = [&](const TrajectoryPair& p, const StepInfo* info) {
      std::vector<std::string> row{detail::format_number(p.t), detail::format_number(fidelity(p.rho, p.rho_hat)),
                                   detail::format_number(p.rho.trace()), detail::format_number(p.rho.min_eigenvalue()),
                                   detail::format_number(p.rho.purity()), detail::format_number(p.rho_hat.purity())};
      if (diffusive) {
        for (std::size_t mu = 0; mu < channels; ++mu) {
          row.push_back(info ? detail::format_number(info->dy[mu]) : "");
        }
      } else {
        row.push_back(info && info->outcome ? std::to_string(*info->outcome) : "");
      }
      csv.row(row);
    };
    emit(TrajectoryPair{0.0, cfg.rho0, cfg.rho_hat0}, nullptr);
    sim.run(
        i, cfg.rho0, cfg.rho_hat0, [](std::size_t, const TrajectoryPair&) {},
        [&](const TrajectoryPair& p, const StepInfo& info) {
          if (info.step % cfg.output.trajectory_stride == 0) emit(p, &info);
        });
    detail::atomic_write(dir / ("trajectory_" + detail::format_number(i) + ".csv"), csv.str());
  }

  const std::size_t n_cp = result.checkpoints.size();
  if (cfg.output.format == "csv") {
    detail::CsvWriter fid({"t", "mean_fidelity", "stderr", "n"});
    for (std::size_t c = 0; c < n_cp; ++c) {
      fid.values(result.checkpoints[c], result.mean_fidelity[c], result.standard_error[c], result.n_traj);
    }
    detail::atomic_write(dir / "fidelity.csv", fid.str());
    detail::CsvWriter sub({"t_start", "t_end", "mean_increment", "stderr", "z"});
    for (std::size_t c = 0; c + 1 < n_cp; ++c) {
      sub.values(result.checkpoints[c], result.checkpoints[c + 1], report.mean_increments[c],
                 report.stderr_increments[c], report.z_scores[c]);
    }
    detail::atomic_write(dir / "submartingale.csv", sub.str());
    if (cfg.output.gnuplot) {
      detail::atomic_write(dir / "fidelity.gp",
                           detail::gnuplot_script("fidelity.csv", cfg.submartingale.final_threshold));
    }
  } else {
    detail::OJson rows = detail::OJson::array();
    for (std::size_t c = 0; c < n_cp; ++c) {
      rows.push_back({{"t", result.checkpoints[c]},
                      {"mean_fidelity", result.mean_fidelity[c]},
                      {"stderr", result.standard_error[c]},
                      {"n", result.n_traj}});
    }
    detail::OJson inc = detail::OJson::array();
    for (std::size_t c = 0; c + 1 < n_cp; ++c) {
      inc.push_back({{"t_start", result.checkpoints[c]},
                     {"t_end", result.checkpoints[c + 1]},
                     {"mean_increment", report.mean_increments[c]},
                     {"stderr", report.stderr_increments[c]},
                     {"z", report.z_scores[c]}});
    }
    detail::atomic_write(dir / "results.json",
                         detail::OJson{{"fidelity", rows}, {"submartingale", inc}}.dump(2) + "\n");
  }

  const int code = report.pass ? kSuccess : kAssertionFailed;
  detail::OJson summary{{"command", "simulate"},
                        {"status", report.pass ? "pass" : "fail"},
                        {"exit_code", code},
                        {"driver", detail::driver_name(cfg.ensemble.driver)},
                        {"n_traj", result.n_traj},
                        {"aborted", result.aborted},
                        {"initial_fidelity", result.mean_fidelity.front()},
                        {"final_mean_fidelity", result.mean_fidelity.back()},
                        {"final_stderr", result.standard_error.back()},
                        {"final_convergence",
                         {{"threshold", cfg.submartingale.final_threshold}, {"reached", converged}}},
                        {"submartingale",
                         {{"pass", report.pass},
                          {"z_crit", cfg.submartingale.z_crit},
                          {"worst_violation", report.worst_violation},
                          {"intervals", n_cp - 1}}},
                        {"wall_time_seconds", detail::seconds_since(t0)},
                        {"config", config_to_json(cfg)}};
  detail::atomic_write(dir / "summary.json", summary.dump(2) + "\n");
  out << summary.dump(2) << "\n";
  return code;
}

// ---------------------------------------------------------------------------
// chain-check
// ---------------------------------------------------------------------------

inline int cmd_chain_check(const ExperimentConfig& cfg, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const ChainCheckSettings& cc = cfg.chain_check;
  struct Combo {
    double alpha, eps;
    KrausSet set;
  };
  const std::vector<Combo> combos = detail::config_stage([&] {
    std::vector<Combo> v;
    for (double a : cc.alphas) {
      for (double e : cc.eps) {
        KrausSet set = build_kraus_set(cfg.model, a, e);
        if (cc.normalize) set = normalize_kraus_set(set);
        require_normalized(set);
        v.push_back({a, e, std::move(set)});
      }
    }
    return v;
  });
  const auto dir = detail::config_stage([&] { return detail::prepare_out_dir(cfg.output.dir); });

  struct Row {
    ExpectedFidelity f;
  };
  const std::size_t total = combos.size() * cc.pairs;
  std::vector<Row> rows(total);
  const Index n = cfg.model.dim();
  parallel_for(total, cfg.workers, [&](std::size_t k) {
    const std::size_t c = k / cc.pairs;
    RandomStream rng = make_stream(cfg.seed, k % cc.pairs, 1 + c);
    const DensityMatrix chi = detail::random_mixed_state(n, rng);
    const DensityMatrix chi_hat = cc.identical_pairs ? chi : detail::random_mixed_state(n, rng);
    rows[k].f = one_step_expected_fidelity(chi, chi_hat, combos[c].set);
  });

  std::size_t violations = 0;
  double min_gap = std::numeric_limits<double>::infinity();
  double max_abs_gap = 0.0;
  detail::OJson violating = detail::OJson::array();
  detail::CsvWriter csv({"alpha", "eps", "pair", "fid_before", "fid_expected_after", "gap"});
  detail::OJson json_rows = detail::OJson::array();
  for (std::size_t k = 0; k < total; ++k) {
    const Combo& combo = combos[k / cc.pairs];
    const std::size_t pair = k % cc.pairs;
    const double gap = rows[k].f.expected - rows[k].f.current;
    min_gap = std::min(min_gap, gap);
    max_abs_gap = std::max(max_abs_gap, std::abs(gap));
    if (gap < -cc.tolerance) {
      ++violations;
      if (violating.size() < 50) {
        violating.push_back({{"alpha", combo.alpha}, {"eps", combo.eps}, {"pair", pair}, {"gap", gap}});
      }
    }
    if (cfg.output.format == "csv") {
      csv.values(combo.alpha, combo.eps, pair, rows[k].f.current, rows[k].f.expected, gap);
    } else {
      json_rows.push_back({{"alpha", combo.alpha},
                           {"eps", combo.eps},
                           {"pair", pair},
                           {"fid_before", rows[k].f.current},
                           {"fid_expected_after", rows[k].f.expected},
                           {"gap", gap}});
    }
  }
  if (cfg.output.format == "csv") {
    detail::atomic_write(dir / "chain_check.csv", csv.str());
  } else {
    detail::atomic_write(dir / "chain_check.json", json_rows.dump(2) + "\n");
  }

  detail::OJson completeness = detail::OJson::array();
  for (const Combo& c : combos) {
    completeness.push_back({{"alpha", c.alpha}, {"eps", c.eps}, {"defect", c.set.completeness_defect()}});
  }
  const int code = violations == 0 ? kSuccess : kAssertionFailed;
  detail::OJson summary{{"command", "chain-check"},
                        {"status", violations == 0 ? "pass" : "fail"},
                        {"exit_code", code},
                        {"pairs", total},
                        {"violations", violations},
                        {"tolerance", cc.tolerance},
                        {"min_gap", min_gap},
                        {"max_abs_gap", max_abs_gap},
                        {"completeness", completeness},
                        {"violating_pairs", violating},
                        {"wall_time_seconds", detail::seconds_since(t0)},
                        {"config", config_to_json(cfg)}};
  detail::atomic_write(dir / "summary.json", summary.dump(2) + "\n");
  out << summary.dump(2) << "\n";
  return code;
}

// ---------------------------------------------------------------------------
// sweep-alpha
// ---------------------------------------------------------------------------

inline int cmd_sweep_alpha(const ExperimentConfig& cfg, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  detail::config_stage([&] {
    for (double a : cfg.sweep.alphas) diffusion_limit_dt(cfg.model, a, cfg.sweep);
    return 0;
  });
  const auto dir = detail::config_stage([&] { return detail::prepare_out_dir(cfg.output.dir); });

  const DiffusionLimitReport report = diffusion_limit_check(cfg.model, cfg.rho0, cfg.rho_hat0, cfg.sweep);

  if (cfg.output.format == "csv") {
    detail::CsvWriter csv({"alpha", "dt", "t", "obs_gap", "fid_gap", "stderr_obs", "stderr_fid"});
    for (const auto& r : report.rows) csv.values(r.alpha, r.dt, r.t, r.obs_gap, r.fid_gap, r.stderr_obs, r.stderr_fid);
    detail::atomic_write(dir / "sweep.csv", csv.str());
  } else {
    detail::OJson rows = detail::OJson::array();
    for (const auto& r : report.rows) {
      rows.push_back({{"alpha", r.alpha},
                      {"dt", r.dt},
                      {"t", r.t},
                      {"obs_gap", r.obs_gap},
                      {"fid_gap", r.fid_gap},
                      {"stderr_obs", r.stderr_obs},
                      {"stderr_fid", r.stderr_fid}});
    }
    detail::atomic_write(dir / "sweep.json", rows.dump(2) + "\n");
  }

  detail::OJson finals = detail::OJson::array();
  const std::size_t per_alpha = cfg.sweep.intervals + 1;
  for (std::size_t i = 0; i < cfg.sweep.alphas.size(); ++i) {
    const auto& r = report.rows[(i + 1) * per_alpha - 1];
    finals.push_back({{"alpha", r.alpha},
                      {"dt", r.dt},
                      {"obs_gap", r.obs_gap},
                      {"fid_gap", r.fid_gap},
                      {"stderr_obs", r.stderr_obs},
                      {"stderr_fid", r.stderr_fid}});
  }
  const int code = report.pass ? kSuccess : kAssertionFailed;
  detail::OJson summary{{"command", "sweep-alpha"},
                        {"status", report.pass ? "pass" : "fail"},
                        {"exit_code", code},
                        {"trend_checked", report.trend_checked},
                        {"detail", report.detail},
                        {"final_gaps", finals},
                        {"wall_time_seconds", detail::seconds_since(t0)},
                        {"config", config_to_json(cfg)}};
  detail::atomic_write(dir / "summary.json", summary.dump(2) + "\n");
  out << summary.dump(2) << "\n";
  return code;
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

/// Parse-only: echoes the canonical configuration and reports, per command,
/// whether its pre-run checks would pass. Never writes files.
inline int cmd_validate(const ExperimentConfig& cfg, std::ostream& out) {
  auto check = [](auto&& fn) -> detail::OJson {
    try {
      fn();
      return "ok";
    } catch (const Error& e) {
      return e.what();
    }
  };
  detail::OJson checks{
      {"simulate", check([&] { TrajectorySimulator(cfg.model, cfg.ensemble); })},
      {"chain-check", check([&] {
         for (double a : cfg.chain_check.alphas)
           for (double e : cfg.chain_check.eps) {
             KrausSet set = build_kraus_set(cfg.model, a, e);
             if (cfg.chain_check.normalize) set = normalize_kraus_set(set);
             require_normalized(set);
           }
       })},
      {"sweep-alpha", check([&] {
         for (double a : cfg.sweep.alphas) diffusion_limit_dt(cfg.model, a, cfg.sweep);
       })}};
  detail::OJson summary{{"command", "validate"},
                        {"status", "ok"},
                        {"exit_code", kSuccess},
                        {"initial_fidelity", fidelity(cfg.rho0, cfg.rho_hat0)},
                        {"checks", checks},
                        {"config", config_to_json(cfg)}};
  out << summary.dump(2) << "\n";
  return kSuccess;
}

using Command = std::function<int(const ExperimentConfig&, std::ostream&)>;

inline std::optional<Command> find_command(const std::string& name) {
  if (name == "simulate") return Command(cmd_simulate);
  if (name == "chain-check") return Command(cmd_chain_check);
  if (name == "sweep-alpha") return Command(cmd_sweep_alpha);
  if (name == "validate") return Command(cmd_validate);
  return std::nullopt;
}

/// Full command pipeline with the exit-code contract: resolves the config,
/// runs the command and turns any error into a JSON report on `err`.
inline int run_command(const std::string& name, const std::string& config_text, const RunOptions& opts,
                       std::ostream& out, std::ostream& err) {
  const auto cmd = find_command(name);
  if (!cmd) {
    err << detail::error_json(name, kConfigError, "UnknownCommand", "unknown command '" + name + "'").dump(2) << "\n";
    return kConfigError;
  }
  try {
    const ExperimentConfig cfg = detail::config_stage([&] { return resolve_config(config_text, opts); });
    return (*cmd)(cfg, out);
  } catch (const detail::ConfigStage& e) {
    err << detail::error_json(name, kConfigError, std::string(to_string(e.kind())), e.message()).dump(2) << "\n";
    return kConfigError;
  } catch (const Error& e) {
    const bool config = e.kind() == ErrorKind::ParseError || e.kind() == ErrorKind::ValidationError;
    const int code = config ? kConfigError : kRuntimeError;
    err << detail::error_json(name, code, std::string(to_string(e.kind())), e.message()).dump(2) << "\n";
    return code;
  } catch (const std::exception& e) {
    err << detail::error_json(name, kRuntimeError, "InternalError", e.what()).dump(2) << "\n";
    return kRuntimeError;
  }
}

}  // namespace qfilter
