#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "qfilter/densitymat.hpp"
#include "qfilter/errors.hpp"
#include "qfilter/jump.hpp"
#include "qfilter/model.hpp"
#include "qfilter/random.hpp"
#include "qfilter/sde.hpp"

namespace qfilter {

enum class Driver { diffusive_kraus, diffusive_em, jump, chain };

struct EnsembleConfig {
  std::size_t n_traj = 500;
  std::uint64_t seed = 0;
  double dt = 1e-4;
  double horizon = 3.0;
  std::vector<double> checkpoints;  // empty: {0, horizon}
  Driver driver = Driver::diffusive_kraus;
  std::size_t workers = 1;

  // jump / chain drivers
  double alpha = 2.0;
  double max_jump_prob = 0.1;

  double domain_tol = 1e-8;
  int project_every = 1;
  double max_abort_fraction = 0.01;

  // When set, tr(observable rho_t) is averaged alongside the fidelity.
  std::optional<ComplexMatrix> observable;
};

/// `count` equally spaced times from 0 to horizon inclusive.
inline std::vector<double> equally_spaced_checkpoints(double horizon, std::size_t count) {
  if (count < 2) return {horizon};
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = horizon * static_cast<double>(i) / static_cast<double>(count - 1);
  }
  return out;
}

/// Converts checkpoint times into step indices, checking that each one is an
/// integer multiple of dt inside [0, horizon] and that they increase.
inline std::vector<std::size_t> checkpoint_steps(const EnsembleConfig& cfg) {
  if (!(cfg.dt > 0.0)) throw Error(ErrorKind::ValidationError, "dt must be positive");
  if (!(cfg.horizon > 0.0)) throw Error(ErrorKind::ValidationError, "horizon must be positive");
  const std::vector<double> times = cfg.checkpoints.empty() ? std::vector<double>{0.0, cfg.horizon} : cfg.checkpoints;
  std::vector<std::size_t> steps;
  steps.reserve(times.size());
  for (double t : times) {
    if (t < 0.0 || t > cfg.horizon * (1.0 + 1e-12)) {
      throw Error(ErrorKind::ValidationError, "checkpoint " + format_real(t) + " outside [0, horizon]");
    }
    const double k = std::round(t / cfg.dt);
    if (std::abs(k * cfg.dt - t) > 1e-9 * std::max(1.0, t)) {
      throw Error(ErrorKind::ValidationError, "checkpoint " + format_real(t) + " is not a multiple of dt");
    }
    const auto step = static_cast<std::size_t>(k);
    if (!steps.empty() && step <= steps.back()) {
      throw Error(ErrorKind::ValidationError, "checkpoints must be strictly increasing");
    }
    steps.push_back(step);
  }
  return steps;
}

/// What happened during one step, for per-step observers (trajectory dumps).
struct StepInfo {
  std::size_t step;
  std::span<const double> dy;    // diffusive drivers
  std::optional<int> outcome;    // jump: 0 none, 1 + 2*channel for (L+a), 2 + 2*channel for (L-a); chain: Kraus index
};

struct NoStepObserver {
  void operator()(const TrajectoryPair&, const StepInfo&) const noexcept {}
};

/// Everything about a driver that can be prepared once and shared read-only
/// by all trajectories.
class TrajectorySimulator {
 public:
  TrajectorySimulator(const SystemModel& model, EnsembleConfig cfg) : model_(&model), cfg_(std::move(cfg)) {
    steps_ = checkpoint_steps(cfg_);
    switch (cfg_.driver) {
      case Driver::diffusive_kraus:
      case Driver::diffusive_em:
        check_step_size(model, cfg_.dt, IntegratorConfig{}.max_generator_step);
        break;
      case Driver::jump:
        check_step_size(model, cfg_.dt, IntegratorConfig{}.max_generator_step);
        check_jump_rate_bound(model, jump_config());
        break;
      case Driver::chain:
        kraus_ = normalize_kraus_set(build_kraus_set(model, cfg_.alpha, cfg_.dt));
        break;
    }
  }

  const EnsembleConfig& config() const noexcept { return cfg_; }
  const std::vector<std::size_t>& steps() const noexcept { return steps_; }
  const SystemModel& model() const noexcept { return *model_; }

  JumpConfig jump_config() const { return {cfg_.alpha, cfg_.dt, cfg_.max_jump_prob, cfg_.domain_tol}; }

  IntegratorConfig integrator_config() const {
    IntegratorConfig ic;
    ic.dt = cfg_.dt;
    ic.scheme = cfg_.driver == Driver::diffusive_em ? Scheme::euler_maruyama : Scheme::kraus;
    ic.domain_tol = cfg_.domain_tol;
    ic.project_every = cfg_.project_every;
    return ic;
  }

  /// Runs trajectory `index`, calling on_checkpoint(checkpoint_index, pair) at
  /// every checkpoint and on_step(pair, info) after every step.
  template <class OnCheckpoint, class OnStep = NoStepObserver>
  void run(std::size_t index, const DensityMatrix& rho0, const DensityMatrix& rho_hat0, OnCheckpoint&& on_checkpoint,
           OnStep&& on_step = {}) const {
    RandomStream rng = make_stream(cfg_.seed, index);
    TrajectoryPair pair{0.0, rho0, rho_hat0};
    const std::size_t last = steps_.back();
    std::size_t next_cp = 0;
    auto visit = [&](std::size_t k) {
      while (next_cp < steps_.size() && steps_[next_cp] == k) on_checkpoint(next_cp++, pair);
    };
    visit(0);

    const double dt = cfg_.dt;
    switch (cfg_.driver) {
      case Driver::diffusive_kraus:
      case Driver::diffusive_em: {
        CoupledStepper stepper(*model_, integrator_config());
        for (std::size_t k = 1; k <= last; ++k) {
          pair = stepper.step(pair, rng);
          pair.t = static_cast<double>(k) * dt;
          on_step(pair, StepInfo{k, stepper.last_dy(), std::nullopt});
          visit(k);
        }
        break;
      }
      case Driver::jump: {
        const JumpConfig jc = jump_config();
        for (std::size_t k = 1; k <= last; ++k) {
          JumpStepResult r = jump_step(pair, rng, jc, *model_);
          pair = std::move(r.pair);
          pair.t = static_cast<double>(k) * dt;
          int code = 0;
          if (r.event) code = static_cast<int>(2 * r.event->channel) + (r.event->sign > 0 ? 1 : 2);
          on_step(pair, StepInfo{k, {}, code});
          visit(k);
        }
        break;
      }
      case Driver::chain: {
        for (std::size_t k = 1; k <= last; ++k) {
          ChainStepResult r = chain_step(pair.rho, pair.rho_hat, rng, *kraus_);
          pair = TrajectoryPair{static_cast<double>(k) * dt, std::move(r.chi), std::move(r.chi_hat)};
          on_step(pair, StepInfo{k, {}, static_cast<int>(r.outcome)});
          visit(k);
        }
        break;
      }
    }
  }

 private:
  const SystemModel* model_;
  EnsembleConfig cfg_;
  std::vector<std::size_t> steps_;
  std::optional<KrausSet> kraus_;
};

/// Calls fn(i) for i in [0, n) on up to `workers` threads. Work items must be
/// independent; the first exception (lowest index) is rethrown after joining.
template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

/// Running mean and variance (Welford). The mean of a constant sequence is
/// exactly that constant.
class RunningStats {
 public:
  void push(double x) {
    ++n_;
    const double delta = x - mean_;
    mean_ += delta / static_cast<double>(n_);
    m2_ += delta * (x - mean_);
  }
  std::size_t count() const noexcept { return n_; }
  double mean() const noexcept { return mean_; }
  double variance() const noexcept { return n_ > 1 ? m2_ / static_cast<double>(n_ - 1) : 0.0; }
  double standard_error() const noexcept { return n_ > 1 ? std::sqrt(variance() / static_cast<double>(n_)) : 0.0; }

 private:
  std::size_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

struct EnsembleResult {
  std::vector<double> checkpoints;
  std::vector<double> mean_fidelity;
  std::vector<double> standard_error;
  std::size_t n_traj = 0;   // completed trajectories
  std::size_t aborted = 0;
  // fidelity_samples[i][c]: completed trajectory i (in index order) at checkpoint c.
  std::vector<std::vector<double>> fidelity_samples;
  std::vector<double> mean_observable;
  std::vector<double> stderr_observable;
};

/// Runs cfg.n_traj coupled trajectories and reduces them in trajectory-index
/// order, so the result does not depend on cfg.workers.
inline EnsembleResult run_ensemble(const SystemModel& model, const DensityMatrix& rho0, const DensityMatrix& rho_hat0,
                                   const EnsembleConfig& cfg) {
  require_same_shape(model.hamiltonian(), rho0.matrix(), "initial state");
  require_same_shape(model.hamiltonian(), rho_hat0.matrix(), "initial filter state");
  if (cfg.n_traj == 0) throw Error(ErrorKind::ValidationError, "n_traj must be positive");
  if (cfg.observable) require_same_shape(model.hamiltonian(), *cfg.observable, "observable");

  const TrajectorySimulator sim(model, cfg);
  const std::size_t n_cp = sim.steps().size();

  struct Slot {
    std::vector<double> fid;
    std::vector<double> obs;
    std::optional<std::string> error;
  };
  std::vector<Slot> slots(cfg.n_traj);

  parallel_for(cfg.n_traj, cfg.workers, [&](std::size_t i) {
    Slot& slot = slots[i];
    slot.fid.assign(n_cp, 0.0);
    if (cfg.observable) slot.obs.assign(n_cp, 0.0);
    try {
      sim.run(i, rho0, rho_hat0, [&](std::size_t c, const TrajectoryPair& pair) {
        slot.fid[c] = fidelity(pair.rho, pair.rho_hat);
        if (cfg.observable) slot.obs[c] = trace_of_product(*cfg.observable, pair.rho.matrix()).real();
      });
    } catch (const Error& e) {
      slot.error = "trajectory " + std::to_string(i) + ": " + e.what();
    }
  });

  EnsembleResult result;
  result.checkpoints.reserve(n_cp);
  for (std::size_t s : sim.steps()) result.checkpoints.push_back(static_cast<double>(s) * cfg.dt);
  std::vector<RunningStats> fid_stats(n_cp), obs_stats(n_cp);
  std::optional<std::string> first_error;
  for (auto& slot : slots) {
    if (slot.error) {
      ++result.aborted;
      if (!first_error) first_error = slot.error;
      continue;
    }
    for (std::size_t c = 0; c < n_cp; ++c) {
      fid_stats[c].push(slot.fid[c]);
      if (cfg.observable) obs_stats[c].push(slot.obs[c]);
    }
    result.fidelity_samples.push_back(std::move(slot.fid));
  }
  result.n_traj = cfg.n_traj - result.aborted;
  if (result.n_traj == 0 ||
      static_cast<double>(result.aborted) > cfg.max_abort_fraction * static_cast<double>(cfg.n_traj)) {
    throw Error(ErrorKind::TooManyAborted, std::to_string(result.aborted) + " of " + std::to_string(cfg.n_traj) +
                                               " trajectories aborted; first: " + first_error.value_or("?"));
  }
  for (std::size_t c = 0; c < n_cp; ++c) {
    result.mean_fidelity.push_back(fid_stats[c].mean());
    result.standard_error.push_back(fid_stats[c].standard_error());
    if (cfg.observable) {
      result.mean_observable.push_back(obs_stats[c].mean());
      result.stderr_observable.push_back(obs_stats[c].standard_error());
    }
  }
  return result;
}

struct SubmartingaleReport {
  bool pass = true;
  double worst_violation = 0.0;  // most negative z-score, 0 if none is negative
  std::vector<double> z_scores;
  std::vector<double> mean_increments;
  std::vector<double> stderr_increments;
};

/// One-sided paired test on every consecutive checkpoint interval: passes iff
/// each mean per-trajectory increment is >= -z_crit * its standard error.
inline SubmartingaleReport submartingale_test(const EnsembleResult& result, double z_crit = 3.0) {
  const std::size_t n_cp = result.checkpoints.size();
  const std::size_t n = result.fidelity_samples.size();
  if (n_cp < 2) throw Error(ErrorKind::InsufficientData, "need at least 2 checkpoints");
  if (n < 50) throw Error(ErrorKind::InsufficientData, "need at least 50 trajectories, have " + std::to_string(n));
  SubmartingaleReport report;
  for (std::size_t c = 0; c + 1 < n_cp; ++c) {
    RunningStats inc;
    for (const auto& row : result.fidelity_samples) inc.push(row[c + 1] - row[c]);
    const double mean = inc.mean();
    const double se = inc.standard_error();
    double z = 0.0;
    if (se > 0.0) {
      z = mean / se;
    } else if (mean < -1e-12) {
      z = -std::numeric_limits<double>::infinity();
    }
    report.mean_increments.push_back(mean);
    report.stderr_increments.push_back(se);
    report.z_scores.push_back(z);
    if (mean < -(z_crit * se + 1e-12)) report.pass = false;
    report.worst_violation = std::min(report.worst_violation, z);
  }
  return report;
}

/// Diagnostic only: whether the last mean fidelity reaches `threshold`.
inline bool final_convergence(const EnsembleResult& result, double threshold) {
  if (result.mean_fidelity.empty()) throw Error(ErrorKind::InsufficientData, "empty ensemble result");
  return result.mean_fidelity.back() >= threshold;
}

}  // namespace qfilter
