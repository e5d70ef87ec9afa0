#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "qfilter/densitymat.hpp"
#include "qfilter/errors.hpp"
#include "qfilter/linalg.hpp"
#include "qfilter/model.hpp"
#include "qfilter/random.hpp"
#include "qfilter/sde.hpp"

namespace qfilter {

// ---------------------------------------------------------------------------
// Homodyne photon-counting model: two Poisson channels per measured operator,
// with jump operators L + alpha and L - alpha.
// ---------------------------------------------------------------------------

struct JumpConfig {
  double alpha = 2.0;          // local-oscillator amplitude
  double dt = 1e-3;
  double max_jump_prob = 0.1;  // bound on the total jump probability per step
  double domain_tol = 1e-8;
};

struct JumpRates {
  double r1;  // rate of the (L + alpha) counter
  double r2;  // rate of the (L - alpha) counter
};

/// r1 = tr((L^dag + a)(L + a) rho) / 2, r2 = tr((L^dag - a)(L - a) rho) / 2.
inline JumpRates jump_rates(const DensityMatrix& rho, const ComplexMatrix& l, double alpha) {
  require_same_shape(l, rho.matrix(), "jump_rates");
  const ComplexMatrix id = identity(l.rows());
  const ComplexMatrix plus = l + alpha * id;
  const ComplexMatrix minus = l - alpha * id;
  const double r1 = 0.5 * trace_of_product(plus.adjoint() * plus, rho.matrix()).real();
  const double r2 = 0.5 * trace_of_product(minus.adjoint() * minus, rho.matrix()).real();
  return {std::max(0.0, r1), std::max(0.0, r2)};
}

/// State-independent bound on the summed rates: sum_mu (|L_mu|^2 + alpha^2).
inline double max_total_jump_rate(const SystemModel& model, double alpha) {
  double bound = 0.0;
  for (const auto& l : model.measured_channels()) bound += std::pow(spectral_norm(l), 2) + alpha * alpha;
  return bound;
}

/// Largest dt for which every state respects the max_jump_prob bound.
inline double suggested_jump_dt(const SystemModel& model, double alpha, double max_jump_prob) {
  const double bound = max_total_jump_rate(model, alpha);
  return bound > 0.0 ? max_jump_prob / bound : std::numeric_limits<double>::infinity();
}

inline void check_jump_rate_bound(const SystemModel& model, const JumpConfig& cfg) {
  const double worst = max_total_jump_rate(model, cfg.alpha) * cfg.dt;
  if (worst > cfg.max_jump_prob * (1.0 + 1e-12)) {
    throw Error(ErrorKind::RateOverflow, "alpha = " + format_real(cfg.alpha) + ", dt = " + format_real(cfg.dt) +
                                             " allows a per-step jump probability of " + format_real(worst) +
                                             " > " + format_real(cfg.max_jump_prob) + "; suggested dt <= " +
                                             format_real(suggested_jump_dt(model, cfg.alpha, cfg.max_jump_prob)));
  }
}

/// Drift of the counting SME between jumps (the first-order expansion of the
/// no-click Kraus operator):
///   -i[H,rho] + sum_mu sum_{s=+-} ( -1/4 {K_s, rho} + 1/2 tr(K_s rho) rho ) + sum_nu L'_nu(rho),
/// with K_s = (L^dag + s alpha)(L + s alpha).
inline ComplexMatrix no_jump_drift(const SystemModel& model, double alpha, const ComplexMatrix& rho) {
  ComplexMatrix out = commutator_drift(model.hamiltonian(), rho);
  const ComplexMatrix id = identity(rho.rows());
  for (const auto& l : model.measured_channels()) {
    for (const double s : {alpha, -alpha}) {
      const ComplexMatrix shifted = l + s * id;
      const ComplexMatrix k = shifted.adjoint() * shifted;
      const ComplexMatrix kr = k * rho;
      out += -0.25 * (kr + kr.adjoint()) + 0.5 * kr.trace().real() * rho;
    }
  }
  for (const auto& l : model.unmeasured_channels()) out += lindblad(l, rho);
  hermitize_in_place(out);
  return out;
}

/// One click on measured channel `channel`: sign +1 is the (L + alpha)
/// counter, sign -1 the (L - alpha) counter.
struct JumpEvent {
  std::size_t channel;
  int sign;
};

struct JumpStepResult {
  TrajectoryPair pair;
  std::optional<JumpEvent> event;
  std::vector<JumpRates> rates;  // evaluated on the true state before the step
};

namespace detail {

inline DensityMatrix jump_then_drift(const DensityMatrix& state, const std::optional<JumpEvent>& event,
                                     const JumpConfig& cfg, const SystemModel& model, double tol) {
  ComplexMatrix m = state.matrix();
  if (event) {
    const auto& l = model.measured_channels().at(event->channel);
    m += upsilon_alpha(l, event->sign * cfg.alpha, m);
  }
  m += cfg.dt * no_jump_drift(model, cfg.alpha, m);
  return project_to_density(m, tol).state;
}

// Euler drift on a pure post-jump state dips below the domain by O((dt |G|)^2).
inline double jump_projection_tol(const SystemModel& model, const JumpConfig& cfg) {
  const double g = generator_step_size(model, cfg.dt);
  return std::max(cfg.domain_tol, 40.0 * g * g);
}

}  // namespace detail

/// Deterministic part of jump_step: applies the given event (if any) to both
/// states, then the Euler no-jump drift, then projects onto the density matrices.
inline JumpStepResult advance_jump(const TrajectoryPair& pair, const std::optional<JumpEvent>& event,
                                   const JumpConfig& cfg, const SystemModel& model) {
  const double tol = detail::jump_projection_tol(model, cfg);
  JumpStepResult out{{pair.t + cfg.dt, detail::jump_then_drift(pair.rho, event, cfg, model, tol),
                      detail::jump_then_drift(pair.rho_hat, event, cfg, model, tol)},
                     event,
                     {}};
  return out;
}

/// Samples at most one click per step from the TRUE state's rates and drives
/// both the state and the filter with it.
inline JumpStepResult jump_step(const TrajectoryPair& pair, RandomStream& rng, const JumpConfig& cfg,
                                const SystemModel& model) {
  const auto& channels = model.measured_channels();
  std::vector<JumpRates> rates;
  rates.reserve(channels.size());
  double total = 0.0;
  for (const auto& l : channels) {
    rates.push_back(jump_rates(pair.rho, l, cfg.alpha));
    total += (rates.back().r1 + rates.back().r2) * cfg.dt;
  }
  if (total > cfg.max_jump_prob * (1.0 + 1e-12)) {
    throw Error(ErrorKind::RateOverflow, "per-step jump probability " + format_real(total) + " exceeds " +
                                             format_real(cfg.max_jump_prob) + "; suggested dt <= " +
                                             format_real(suggested_jump_dt(model, cfg.alpha, cfg.max_jump_prob)));
  }
  // A single uniform selects "no click" or exactly one counter, so simultaneous
  // clicks never occur and each counter keeps its exact marginal probability.
  std::optional<JumpEvent> event;
  double u = sample_uniform(rng);
  for (std::size_t mu = 0; mu < channels.size() && !event; ++mu) {
    const double p1 = rates[mu].r1 * cfg.dt;
    const double p2 = rates[mu].r2 * cfg.dt;
    if (u < p1) {
      event = JumpEvent{mu, +1};
    } else if (u < p1 + p2) {
      event = JumpEvent{mu, -1};
    }
    u -= p1 + p2;
  }
  JumpStepResult out = advance_jump(pair, event, cfg, model);
  out.rates = std::move(rates);
  return out;
}

// ---------------------------------------------------------------------------
// Discrete-time Kraus chain
// ---------------------------------------------------------------------------

struct KrausSet {
  std::vector<ComplexMatrix> operators;
  bool normalized = false;

  /// Frobenius norm of sum_r M_r^dag M_r - I.
  double completeness_defect() const {
    if (operators.empty()) return std::numeric_limits<double>::infinity();
    return (gram() - identity(operators.front().rows())).norm();
  }

  ComplexMatrix gram() const {
    ComplexMatrix a = ComplexMatrix::Zero(operators.front().rows(), operators.front().cols());
    for (const auto& m : operators) a += m.adjoint() * m;
    return a;
  }
};

/// Unnormalized three-outcome family per measured channel:
///   M_0 = I - i H eps - 1/4 sum_mu [(L^dag + a)(L + a) + (L^dag - a)(L - a)] eps - 1/2 sum_nu L'^dag L' eps
///   M_{mu,+} = (L_mu + a) sqrt(eps / 2),  M_{mu,-} = (L_mu - a) sqrt(eps / 2)
/// followed by M'_nu = L'_nu sqrt(eps) for unmeasured channels. Ordering:
/// M_0, then (+, -) for each measured channel, then the unmeasured ones.
inline KrausSet build_kraus_set(const SystemModel& model, double alpha, double eps) {
  if (!(eps > 0.0)) throw Error(ErrorKind::ValidationError, "eps must be positive");
  const Index n = model.dim();
  const ComplexMatrix id = identity(n);
  ComplexMatrix m0 = id - kI * eps * model.hamiltonian();
  KrausSet set;
  set.operators.push_back(ComplexMatrix());  // M_0 filled below
  const double half_root = std::sqrt(0.5 * eps);
  for (const auto& l : model.measured_channels()) {
    const ComplexMatrix plus = l + alpha * id;
    const ComplexMatrix minus = l - alpha * id;
    m0 -= 0.25 * eps * (plus.adjoint() * plus + minus.adjoint() * minus);
    set.operators.push_back(half_root * plus);
    set.operators.push_back(half_root * minus);
  }
  for (const auto& l : model.unmeasured_channels()) {
    m0 -= 0.5 * eps * (l.adjoint() * l);
    set.operators.push_back(std::sqrt(eps) * l);
  }
  set.operators.front() = std::move(m0);
  return set;
}

/// Inverse square root of the Hermitian positive normalizer A = sum M^dag M.
inline ComplexMatrix inverse_sqrt_normalizer(const KrausSet& set) {
  Eigen::SelfAdjointEigenSolver<ComplexMatrix> solver(hermitian_part(set.gram()));
  const RealVector& lambda = solver.eigenvalues();
  if (!(lambda(0) > 1e-12)) {
    throw Error(ErrorKind::SingularNormalizer, "normalizer eigenvalue " + format_real(lambda(0)));
  }
  const ComplexMatrix& v = solver.eigenvectors();
  return v * lambda.cwiseSqrt().cwiseInverse().cast<Complex>().asDiagonal() * v.adjoint();
}

/// M~_r = M_r A^{-1/2}, so that sum_r M~_r^dag M~_r = A^{-1/2} A A^{-1/2} = I.
inline KrausSet normalize_kraus_set(const KrausSet& set) {
  if (set.operators.empty()) throw Error(ErrorKind::ShapeMismatch, "empty Kraus set");
  const ComplexMatrix inv_root = inverse_sqrt_normalizer(set);
  KrausSet out;
  out.normalized = true;
  out.operators.reserve(set.operators.size());
  for (const auto& m : set.operators) out.operators.push_back(m * inv_root);
  return out;
}

inline void require_normalized(const KrausSet& set) {
  if (!set.normalized) throw Error(ErrorKind::NotNormalized, "Kraus set has not been normalized");
  const double defect = set.completeness_defect();
  if (!(defect <= 1e-10)) {
    throw Error(ErrorKind::NotNormalized, "completeness defect " + format_real(defect));
  }
}

/// P_r = tr(M_r chi M_r^dag).
inline std::vector<double> outcome_probabilities(const DensityMatrix& chi, const KrausSet& set) {
  std::vector<double> p;
  p.reserve(set.operators.size());
  for (const auto& m : set.operators) {
    p.push_back(std::max(0.0, trace_of_product(m.adjoint() * m, chi.matrix()).real()));
  }
  return p;
}

/// M chi M^dag / tr(...), or nullopt when the normalizer is <= 1e-15.
inline std::optional<DensityMatrix> apply_outcome(const DensityMatrix& chi, const ComplexMatrix& m) {
  ComplexMatrix post = m * chi.matrix() * m.adjoint();
  hermitize_in_place(post);
  const double norm = real_trace(post);
  if (!(norm > 1e-15)) return std::nullopt;
  post /= norm;
  return DensityMatrix::trusted(std::move(post), chi.tolerances());
}

struct ChainStepResult {
  DensityMatrix chi;
  DensityMatrix chi_hat;
  std::size_t outcome;
};

inline ChainStepResult chain_step(const DensityMatrix& chi, const DensityMatrix& chi_hat, RandomStream& rng,
                                  const KrausSet& set) {
  const auto p = outcome_probabilities(chi, set);
  double total = 0.0;
  for (double x : p) total += x;
  if (!(std::abs(total - 1.0) <= 1e-10)) {
    throw Error(ErrorKind::NotNormalized, "outcome probabilities sum to " + format_real(total));
  }
  const double u = sample_uniform(rng) * total;
  std::size_t outcome = p.size() - 1;
  double acc = 0.0;
  for (std::size_t r = 0; r < p.size(); ++r) {
    acc += p[r];
    if (u < acc) {
      outcome = r;
      break;
    }
  }
  // Guard against landing on a zero-probability tail through rounding.
  while (p[outcome] == 0.0 && outcome > 0) --outcome;
  auto next = apply_outcome(chi, set.operators[outcome]);
  auto next_hat = apply_outcome(chi_hat, set.operators[outcome]);
  if (!next || !next_hat) {
    throw Error(ErrorKind::DegenerateOutcome, "outcome " + std::to_string(outcome) + " annihilates the filter state");
  }
  return {std::move(*next), std::move(*next_hat), outcome};
}

struct ExpectedFidelity {
  double expected;  // E[F(chi_{k+1}, chi_hat_{k+1}) | chi_k, chi_hat_k]
  double current;   // F(chi_k, chi_hat_k)
};

/// Exact conditional expectation of the next-step fidelity, by enumeration of
/// every outcome of the chain.
inline ExpectedFidelity one_step_expected_fidelity(const DensityMatrix& chi, const DensityMatrix& chi_hat,
                                                   const KrausSet& set) {
  require_normalized(set);
  const auto p = outcome_probabilities(chi, set);
  double expected = 0.0;
  for (std::size_t r = 0; r < p.size(); ++r) {
    if (p[r] == 0.0) continue;
    auto post = apply_outcome(chi, set.operators[r]);
    auto post_hat = apply_outcome(chi_hat, set.operators[r]);
    if (!post) continue;  // probability below the normalizer floor
    if (!post_hat) {
      throw Error(ErrorKind::DegenerateOutcome,
                  "outcome " + std::to_string(r) + " has probability " + std::to_string(p[r]) +
                      " under the true state but annihilates the filter state");
    }
    expected += p[r] * fidelity(*post, *post_hat);
  }
  return {expected, fidelity(chi, chi_hat)};
}

}  // namespace qfilter
