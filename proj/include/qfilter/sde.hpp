#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "qfilter/densitymat.hpp"
#include "qfilter/errors.hpp"
#include "qfilter/linalg.hpp"
#include "qfilter/model.hpp"
#include "qfilter/random.hpp"

namespace qfilter {

enum class Scheme { kraus, euler_maruyama };

struct IntegratorConfig {
  double dt = 1e-4;
  Scheme scheme = Scheme::kraus;
  double domain_tol = 1e-8;
  int project_every = 1;
  // Upper bound on dt * (|H| + |sum L^dag L| / 2); beyond it the one-step
  // Kraus operator can become singular.
  double max_generator_step = 0.5;
};

/// Joint (t, true state, filter state).
struct TrajectoryPair {
  double t = 0.0;
  DensityMatrix rho;
  DensityMatrix rho_hat;
};

/// Observation record y_t: dy[mu][k] is the increment of channel mu over
/// [times[k], times[k+1]].
struct MeasurementRecord {
  std::vector<double> times;
  std::vector<std::vector<double>> dy;

  explicit MeasurementRecord(std::size_t channels = 0, double t0 = 0.0) : times{t0}, dy(channels) {}

  void append(double t_next, std::span<const double> increments) {
    if (increments.size() != dy.size()) throw Error(ErrorKind::ShapeMismatch, "record channel count");
    times.push_back(t_next);
    for (std::size_t mu = 0; mu < dy.size(); ++mu) dy[mu].push_back(increments[mu]);
  }
};

/// dy = tr((L + L^dag) rho) dt + dW
inline double measurement_increment(const DensityMatrix& rho, const ComplexMatrix& l, double dw, double dt) {
  require_same_shape(l, rho.matrix(), "measurement_increment");
  return 2.0 * trace_of_product(l, rho.matrix()).real() * dt + dw;
}

/// dt * (|H| + |sum_mu L_mu^dag L_mu + sum_nu L'_nu^dag L'_nu| / 2), the size of
/// the deterministic part of one step.
inline double generator_step_size(const SystemModel& model, double dt) {
  ComplexMatrix decay = ComplexMatrix::Zero(model.dim(), model.dim());
  for (const auto& l : model.measured_channels()) decay += l.adjoint() * l;
  for (const auto& l : model.unmeasured_channels()) decay += l.adjoint() * l;
  return dt * (spectral_norm(model.hamiltonian()) + 0.5 * spectral_norm(decay));
}

inline void check_step_size(const SystemModel& model, double dt, double limit) {
  if (!(dt > 0.0)) throw Error(ErrorKind::ValidationError, "dt must be positive");
  const double size = generator_step_size(model, dt);
  if (size > limit) {
    throw Error(ErrorKind::DegenerateNormalization,
                "dt = " + format_real(dt) + " is too large for this model (step generator size " +
                    format_real(size) + " > " + format_real(limit) + "); use dt <= " +
                    format_real(dt * limit / size));
  }
}

/// One-step normalized Kraus update rho -> (M rho M^dag + sum_nu L'_nu rho L'_nu^dag dt) / tr(...)
/// with M = I - i H dt - 1/2 sum L'^dag L' dt - 1/2 sum L^dag L dt + sum L_mu dy_mu.
/// The deterministic part of M is computed once per (model, dt).
class KrausPropagator {
 public:
  KrausPropagator(const SystemModel& model, double dt) : model_(&model), dt_(dt) {
    const Index n = model.dim();
    ComplexMatrix generator = kI * model.hamiltonian();
    for (const auto& l : model.unmeasured_channels()) generator += 0.5 * (l.adjoint() * l);
    for (const auto& l : model.measured_channels()) generator += 0.5 * (l.adjoint() * l);
    base_ = identity(n) - dt * generator;
  }

  ComplexMatrix kraus_operator(std::span<const double> dy) const {
    const auto& channels = model_->measured_channels();
    if (dy.size() != channels.size()) {
      throw Error(ErrorKind::ShapeMismatch, "expected " + std::to_string(channels.size()) + " record increments, got " +
                                                std::to_string(dy.size()));
    }
    ComplexMatrix m = base_;
    for (std::size_t mu = 0; mu < channels.size(); ++mu) m += dy[mu] * channels[mu];
    return m;
  }

  DensityMatrix apply(const DensityMatrix& state, const ComplexMatrix& m) const {
    ComplexMatrix next = m * state.matrix() * m.adjoint();
    for (const auto& l : model_->unmeasured_channels()) next += dt_ * (l * state.matrix() * l.adjoint());
    hermitize_in_place(next);
    const double norm = real_trace(next);
    if (!(norm > 1e-15)) {
      throw Error(ErrorKind::DegenerateNormalization, "Kraus normalizer " + format_real(norm));
    }
    next /= norm;
    return DensityMatrix::trusted(std::move(next), state.tolerances());
  }

  DensityMatrix step(const DensityMatrix& state, std::span<const double> dy) const {
    return apply(state, kraus_operator(dy));
  }

 private:
  const SystemModel* model_;
  double dt_;
  ComplexMatrix base_;
};

inline DensityMatrix kraus_step(const DensityMatrix& state, std::span<const double> dy, double dt,
                                const SystemModel& model) {
  require_same_shape(state.matrix(), model.hamiltonian(), "kraus_step");
  return KrausPropagator(model, dt).step(state, dy);
}

inline DensityMatrix kraus_step(const DensityMatrix& state, double dy, double dt, const SystemModel& model) {
  return kraus_step(state, std::span<const double>(&dy, 1), dt, model);
}

/// How the stochastic term of an Euler-Maruyama step is driven.
enum class DrivingForm {
  innovation,  // true state: Lambda(rho) dW
  record,      // filter: Lambda(rho_hat) (dy - tr((L + L^dag) rho_hat) dt)
};

/// state + (-i[H,state] + sum Lindblad) dt + sum_mu Lambda_mu(state) * increment_mu.
/// The result is not projected back onto the density matrices.
inline ComplexMatrix em_step(const ComplexMatrix& state, std::span<const double> increments, double dt,
                             const SystemModel& model, DrivingForm form) {
  require_same_shape(state, model.hamiltonian(), "em_step");
  const auto& channels = model.measured_channels();
  if (increments.size() != channels.size()) throw Error(ErrorKind::ShapeMismatch, "em_step increment count");
  ComplexMatrix next = state + dt * lindblad_generator(model, state);
  for (std::size_t mu = 0; mu < channels.size(); ++mu) {
    double drive = increments[mu];
    if (form == DrivingForm::record) drive -= 2.0 * trace_of_product(channels[mu], state).real() * dt;
    next += drive * lambda_superop(channels[mu], state);
  }
  return next;
}

inline ComplexMatrix em_step(const DensityMatrix& state, double increment, double dt, const SystemModel& model,
                             DrivingForm form) {
  return em_step(state.matrix(), std::span<const double>(&increment, 1), dt, model, form);
}

/// Advances a (true state, filter) pair by one step sharing one measurement
/// record: dW is drawn per measured channel, dy is formed from the TRUE state
/// and both states consume the same dy.
class CoupledStepper {
 public:
  CoupledStepper(const SystemModel& model, IntegratorConfig cfg)
      : model_(&model), cfg_(cfg), kraus_(model, cfg.dt), dw_(model.measured_channels().size()),
        dy_(model.measured_channels().size()) {
    if (cfg_.project_every < 1) throw Error(ErrorKind::ValidationError, "project_every must be >= 1");
    check_step_size(model, cfg_.dt, cfg_.max_generator_step);
    // Euler-Maruyama leaves the domain by O(|L|^2 dt) per step (second-order
    // terms of the noise); the projection tolerance must absorb that.
    double noise = 0.0;
    for (const auto& l : model.measured_channels()) noise += std::pow(spectral_norm(l), 2);
    const double g = generator_step_size(model, cfg_.dt);
    em_tol_ = std::max(cfg_.domain_tol, 50.0 * (noise * cfg_.dt * static_cast<double>(cfg_.project_every) + g * g));
  }

  TrajectoryPair step(const TrajectoryPair& pair, RandomStream& rng) {
    const auto& channels = model_->measured_channels();
    const double dt = cfg_.dt;
    for (std::size_t mu = 0; mu < channels.size(); ++mu) {
      dw_[mu] = sample_wiener(rng, dt);
      dy_[mu] = measurement_increment(pair.rho, channels[mu], dw_[mu], dt);
    }
    ++steps_;
    if (cfg_.scheme == Scheme::kraus) {
      const ComplexMatrix m = kraus_.kraus_operator(dy_);
      return {pair.t + dt, kraus_.apply(pair.rho, m), kraus_.apply(pair.rho_hat, m)};
    }
    ComplexMatrix rho = em_step(pair.rho.matrix(), dw_, dt, *model_, DrivingForm::innovation);
    ComplexMatrix rho_hat = em_step(pair.rho_hat.matrix(), dy_, dt, *model_, DrivingForm::record);
    return {pair.t + dt, finish_em(std::move(rho), pair.rho.tolerances()),
            finish_em(std::move(rho_hat), pair.rho_hat.tolerances())};
  }

  std::span<const double> last_dw() const noexcept { return dw_; }
  std::span<const double> last_dy() const noexcept { return dy_; }
  const IntegratorConfig& config() const noexcept { return cfg_; }

 private:
  DensityMatrix finish_em(ComplexMatrix m, const DomainTolerances& tol) const {
    if (steps_ % static_cast<std::size_t>(cfg_.project_every) == 0) {
      return project_to_density(m, em_tol_).state;
    }
    // Between projections the state is only Hermitized and renormalized.
    hermitize_in_place(m);
    m /= real_trace(m);
    return DensityMatrix::trusted(std::move(m), tol);
  }

  const SystemModel* model_;
  IntegratorConfig cfg_;
  KrausPropagator kraus_;
  std::vector<double> dw_;
  std::vector<double> dy_;
  std::size_t steps_ = 0;
  double em_tol_ = 0.0;
};

inline TrajectoryPair coupled_step(const TrajectoryPair& pair, RandomStream& rng, const IntegratorConfig& cfg,
                                   const SystemModel& model) {
  CoupledStepper stepper(model, cfg);
  return stepper.step(pair, rng);
}

}  // namespace qfilter
