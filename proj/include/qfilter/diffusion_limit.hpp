#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "qfilter/errors.hpp"
#include "qfilter/jump.hpp"
#include "qfilter/model.hpp"
#include "qfilter/stats.hpp"

namespace qfilter {

struct DiffusionLimitConfig {
  std::vector<double> alphas{1.0, 2.0, 5.0, 10.0};
  std::optional<double> dt;  // unset: per-alpha min(dt_cap, max_jump_prob / rate bound)
  double dt_cap = 1e-3;
  double horizon = 0.5;
  std::size_t intervals = 5;  // checkpoints at horizon * k / intervals
  std::size_t n_traj = 2000;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  double max_jump_prob = 0.1;
  double z_trend = 2.0;
  std::optional<ComplexMatrix> observable;  // unset: see default_observable
};

struct DiffusionLimitRow {
  double alpha;
  double dt;
  double t;
  double obs_gap;     // |<tr(O rho_t)>_jump - <tr(O rho_t)>_diffusive|
  double fid_gap;     // |<F>_jump - <F>_diffusive|
  double stderr_obs;
  double stderr_fid;
};

struct DiffusionLimitReport {
  std::vector<DiffusionLimitRow> rows;
  bool trend_checked = false;
  bool pass = true;
  std::string detail;
};

/// Hermitian part of the first measured channel, or the projector on the first
/// basis state when there is no (nonzero) measured channel.
inline ComplexMatrix default_observable(const SystemModel& model) {
  if (!model.measured_channels().empty()) {
    ComplexMatrix o = hermitian_part(model.measured_channels().front());
    if (o.norm() > 0.0) return o;
  }
  ComplexMatrix p = ComplexMatrix::Zero(model.dim(), model.dim());
  p(0, 0) = 1.0;
  return p;
}

/// The step used for a given alpha: an integer fraction of horizon / intervals,
/// no larger than the rate bound and the cap.
inline double diffusion_limit_dt(const SystemModel& model, double alpha, const DiffusionLimitConfig& cfg) {
  if (cfg.dt) {
    check_jump_rate_bound(model, JumpConfig{alpha, *cfg.dt, cfg.max_jump_prob});
    return *cfg.dt;
  }
  const double bound = std::min(cfg.dt_cap, suggested_jump_dt(model, alpha, cfg.max_jump_prob));
  const double interval = cfg.horizon / static_cast<double>(cfg.intervals);
  const double per_interval = std::ceil(interval / bound - 1e-9);
  return interval / per_interval;
}

/// Compares jump ensembles (for each alpha) against diffusive ensembles with the
/// same dt and size. The gaps at the final checkpoint must not increase along
/// the (increasing) alpha sweep by more than z_trend combined standard errors.
inline DiffusionLimitReport diffusion_limit_check(const SystemModel& model, const DensityMatrix& rho0,
                                                  const DensityMatrix& rho_hat0, const DiffusionLimitConfig& cfg) {
  if (cfg.alphas.empty()) throw Error(ErrorKind::ValidationError, "alpha list is empty");
  for (std::size_t i = 1; i < cfg.alphas.size(); ++i) {
    if (!(cfg.alphas[i] > cfg.alphas[i - 1])) {
      throw Error(ErrorKind::ValidationError, "alphas must be strictly increasing");
    }
  }
  if (cfg.intervals == 0) throw Error(ErrorKind::ValidationError, "intervals must be positive");

  // Validate every alpha before running anything.
  std::vector<double> dts;
  for (double alpha : cfg.alphas) dts.push_back(diffusion_limit_dt(model, alpha, cfg));

  const ComplexMatrix observable = cfg.observable ? *cfg.observable : default_observable(model);
  DiffusionLimitReport report;
  std::vector<const DiffusionLimitRow*> finals;
  for (std::size_t i = 0; i < cfg.alphas.size(); ++i) {
    EnsembleConfig ec;
    ec.n_traj = cfg.n_traj;
    ec.dt = dts[i];
    ec.horizon = cfg.horizon;
    ec.checkpoints = equally_spaced_checkpoints(cfg.horizon, cfg.intervals + 1);
    ec.workers = cfg.workers;
    ec.alpha = cfg.alphas[i];
    ec.max_jump_prob = cfg.max_jump_prob;
    ec.observable = observable;

    ec.driver = Driver::jump;
    ec.seed = mix_seed(cfg.seed + 2 * i);
    const EnsembleResult jump = run_ensemble(model, rho0, rho_hat0, ec);
    ec.driver = Driver::diffusive_kraus;
    ec.seed = mix_seed(cfg.seed + 2 * i + 1);
    const EnsembleResult diffusive = run_ensemble(model, rho0, rho_hat0, ec);

    for (std::size_t c = 0; c < jump.checkpoints.size(); ++c) {
      report.rows.push_back(DiffusionLimitRow{
          cfg.alphas[i], dts[i], jump.checkpoints[c],
          std::abs(jump.mean_observable[c] - diffusive.mean_observable[c]),
          std::abs(jump.mean_fidelity[c] - diffusive.mean_fidelity[c]),
          std::hypot(jump.stderr_observable[c], diffusive.stderr_observable[c]),
          std::hypot(jump.standard_error[c], diffusive.standard_error[c])});
    }
  }
  for (std::size_t i = 0; i < cfg.alphas.size(); ++i) {
    finals.push_back(&report.rows[(i + 1) * (cfg.intervals + 1) - 1]);
  }

  report.trend_checked = cfg.alphas.size() > 1;
  for (std::size_t i = 1; i < finals.size(); ++i) {
    const auto& a = *finals[i - 1];
    const auto& b = *finals[i];
    const double obs_allow = cfg.z_trend * std::hypot(a.stderr_obs, b.stderr_obs) + 1e-12;
    const double fid_allow = cfg.z_trend * std::hypot(a.stderr_fid, b.stderr_fid) + 1e-12;
    if (b.obs_gap > a.obs_gap + obs_allow) {
      report.pass = false;
      report.detail += "observable gap grows from alpha " + format_real(a.alpha) + " to " +
                       format_real(b.alpha) + "; ";
    }
    if (b.fid_gap > a.fid_gap + fid_allow) {
      report.pass = false;
      report.detail += "fidelity gap grows from alpha " + format_real(a.alpha) + " to " +
                       format_real(b.alpha) + "; ";
    }
  }
  return report;
}

}  // namespace qfilter
