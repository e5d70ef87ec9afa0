#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "qfilter/diffusion_limit.hpp"
#include "qfilter/jump.hpp"
#include "support/oracles.hpp"

namespace qfilter {
namespace {

using testing::mat2;

ComplexMatrix zero2() { return ComplexMatrix::Zero(2, 2); }

TEST(JumpRates, Examples) {
  const DensityMatrix rho = testing::qubit_rho0();
  const JumpRates a = jump_rates(rho, zero2(), 2.0);
  EXPECT_NEAR(a.r1, 2.0, 1e-15);
  EXPECT_NEAR(a.r2, 2.0, 1e-15);
  const JumpRates b = jump_rates(rho, pauli_z(), 0.0);
  EXPECT_NEAR(b.r1, 0.5, 1e-15);
  EXPECT_NEAR(b.r2, 0.5, 1e-15);
  const JumpRates c = jump_rates(DensityMatrix::basis_state(2, 0), pauli_z(), 3.0);
  EXPECT_NEAR(c.r1, 8.0, 1e-14);
  EXPECT_NEAR(c.r2, 2.0, 1e-14);
}

TEST(JumpRates, BoundRejectsLargeAlphaAndSuggestsStep) {
  const SystemModel model = SystemModel::paper_qubit();
  try {
    check_jump_rate_bound(model, JumpConfig{.alpha = 100.0, .dt = 1e-3});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::RateOverflow);
  }
  const double dt = suggested_jump_dt(model, 100.0, 0.1);
  EXPECT_LE(dt, 1e-5);
  EXPECT_GT(dt, 9.9e-6);
  EXPECT_NO_THROW(check_jump_rate_bound(model, JumpConfig{.alpha = 100.0, .dt = dt}));
}

TEST(JumpStep, NoJumpWithTrivialModelLeavesStateUnchanged) {
  const SystemModel trivial(zero2(), {zero2()});
  const TrajectoryPair pair{0.0, testing::qubit_rho0(), testing::qubit_rho_hat0()};
  const JumpStepResult r = advance_jump(pair, std::nullopt, JumpConfig{.dt = 1e-3}, trivial);
  EXPECT_LE((r.pair.rho.matrix() - pair.rho.matrix()).norm(), 1e-15);
  EXPECT_LE((r.pair.rho_hat.matrix() - pair.rho_hat.matrix()).norm(), 1e-15);
  EXPECT_DOUBLE_EQ(r.pair.t, 1e-3);
}

TEST(JumpStep, ForcedJumpMatchesDirectEvaluation) {
  const SystemModel model(zero2(), {pauli_z()});
  const double alpha = 2.0, dt = 1e-3;
  const TrajectoryPair pair{0.0, testing::qubit_rho0(), testing::qubit_rho_hat0()};
  for (int sign : {+1, -1}) {
    const JumpStepResult r = advance_jump(pair, JumpEvent{0, sign}, JumpConfig{.alpha = alpha, .dt = dt}, model);
    for (const auto& [before, after] : {std::pair{&pair.rho, &r.pair.rho}, std::pair{&pair.rho_hat, &r.pair.rho_hat}}) {
      // Jump: (L + s a) rho (L + s a)^dag / tr, then one Euler step of the no-click drift.
      const ComplexMatrix shift = mat2(1.0 + sign * alpha, 0.0, 0.0, -1.0 + sign * alpha);
      ComplexMatrix post = shift * before->matrix() * shift.adjoint();
      post /= post.trace();
      ComplexMatrix drift = ComplexMatrix::Zero(2, 2);
      for (double s : {alpha, -alpha}) {
        const ComplexMatrix k = mat2((1.0 + s) * (1.0 + s), 0.0, 0.0, (1.0 - s) * (1.0 - s));
        drift += -0.25 * (k * post + post * k) + 0.5 * (k * post).trace() * post;
      }
      const ComplexMatrix expected = post + dt * drift;
      EXPECT_LE((after->matrix() - expected).norm(), 1e-13);
    }
  }
}

TEST(JumpStep, EqualInitialStatesStayEqual) {
  const SystemModel model = SystemModel::paper_qubit();
  TrajectoryPair pair{0.0, testing::qubit_rho0(), testing::qubit_rho0()};
  RandomStream rng = make_stream(3, 0);
  const JumpConfig cfg{.alpha = 2.0, .dt = 1e-3};
  int clicks = 0;
  for (int k = 0; k < 5000; ++k) {
    const JumpStepResult r = jump_step(pair, rng, cfg, model);
    clicks += r.event.has_value();
    pair = r.pair;
    ASSERT_EQ(pair.rho.matrix(), pair.rho_hat.matrix());
  }
  EXPECT_GT(clicks, 0);
}

TEST(JumpStep, StaysInDomain) {
  std::mt19937_64 gen(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 2 + trial % 3;
    const SystemModel model(testing::random_hermitian(n, gen), {0.5 * testing::random_matrix(n, gen)});
    const JumpConfig cfg{.alpha = 1.5, .dt = 0.5 * suggested_jump_dt(model, 1.5, 0.1)};
    TrajectoryPair pair{0.0, testing::random_density(n, gen), testing::random_density(n, gen)};
    RandomStream rng = make_stream(4, trial);
    for (int k = 0; k < 2000; ++k) {
      pair = jump_step(pair, rng, cfg, model).pair;
      for (const DensityMatrix* s : {&pair.rho, &pair.rho_hat}) {
        ASSERT_NO_THROW(DensityMatrix(s->matrix()));
      }
    }
  }
}

// Sum over steps of (dN - r dt) / sqrt(r dt): zero mean, unit variance per step.
TEST(JumpStep, CompensatedIncrementsAverageToZero) {
  const SystemModel model = SystemModel::paper_qubit();
  const JumpConfig cfg{.alpha = 2.0, .dt = 1e-3};
  TrajectoryPair pair{0.0, testing::qubit_rho0(), testing::qubit_rho_hat0()};
  RandomStream rng = make_stream(5, 0);
  RunningStats plus, minus;
  for (int k = 0; k < 200000; ++k) {
    const JumpStepResult r = jump_step(pair, rng, cfg, model);
    const double p1 = r.rates[0].r1 * cfg.dt, p2 = r.rates[0].r2 * cfg.dt;
    const bool n1 = r.event && r.event->sign > 0;
    const bool n2 = r.event && r.event->sign < 0;
    plus.push((n1 - p1) / std::sqrt(p1));
    minus.push((n2 - p2) / std::sqrt(p2));
    pair = r.pair;
  }
  EXPECT_LE(std::abs(plus.mean()), 4.0 * plus.standard_error());
  EXPECT_LE(std::abs(minus.mean()), 4.0 * minus.standard_error());
}

TEST(JumpStep, NeverEmitsTwoEventsAndRejectsOverflow) {
  const SystemModel model = SystemModel::paper_qubit();
  const TrajectoryPair pair{0.0, testing::qubit_rho0(), testing::qubit_rho_hat0()};
  RandomStream rng = make_stream(6, 0);
  try {
    jump_step(pair, rng, JumpConfig{.alpha = 100.0, .dt = 1e-3}, model);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::RateOverflow);
  }
}

TEST(KrausSet, TrivialModel) {
  const SystemModel trivial(zero2(), {zero2()});
  const KrausSet set = build_kraus_set(trivial, 0.0, 1e-3);
  ASSERT_EQ(set.operators.size(), 3u);
  EXPECT_EQ(set.operators[0], identity(2));
  EXPECT_EQ(set.operators[1], zero2());
  EXPECT_EQ(set.operators[2], zero2());
  EXPECT_FALSE(set.normalized);
}

TEST(KrausSet, QubitEntriesMatchFormula) {
  const double eps = 1e-3, alpha = 2.0;
  const KrausSet set = build_kraus_set(SystemModel::paper_qubit(), alpha, eps);
  ASSERT_EQ(set.operators.size(), 3u);
  // M0 = I - i sigma_y eps - (eps / 4) [(sigma_z + 2)^2 + (sigma_z - 2)^2] = (1 - 5 eps / 2) I - i sigma_y eps.
  const ComplexMatrix m0 = mat2(1.0 - 2.5 * eps, -eps, eps, 1.0 - 2.5 * eps);
  const double r = std::sqrt(eps / 2.0);
  EXPECT_LE((set.operators[0] - m0).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LE((set.operators[1] - mat2(3.0 * r, 0.0, 0.0, r)).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LE((set.operators[2] - mat2(-r, 0.0, 0.0, -3.0 * r)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(KrausSet, CompletenessDefectIsSecondOrder) {
  const SystemModel model = SystemModel::paper_qubit();
  std::vector<double> eps{1e-2, 1e-3, 1e-4}, defects, inv_root_gap;
  for (double e : eps) {
    const KrausSet set = build_kraus_set(model, 2.0, e);
    defects.push_back(set.completeness_defect());
    inv_root_gap.push_back((inverse_sqrt_normalizer(set) - identity(2)).norm());
  }
  EXPECT_NEAR(testing::loglog_slope(eps, defects), 2.0, 0.1);
  EXPECT_NEAR(testing::loglog_slope(eps, inv_root_gap), 2.0, 0.1);
  // sigma_y / sigma_z qubit: sum M^dag M = (1 + 29 eps^2 / 4) I exactly.
  EXPECT_NEAR(defects[1], 7.25e-6 * std::sqrt(2.0), 1e-15);
}

TEST(KrausSet, NormalizationRestoresCompleteness) {
  std::mt19937_64 gen(7);
  for (int trial = 0; trial < 100; ++trial) {
    const Index n = 2 + trial % 3;
    const SystemModel model(testing::random_hermitian(n, gen), {testing::random_matrix(n, gen)},
                            {0.5 * testing::random_matrix(n, gen)});
    const KrausSet set = normalize_kraus_set(build_kraus_set(model, 0.5 + trial % 4, 1e-2));
    EXPECT_TRUE(set.normalized);
    EXPECT_LE(set.completeness_defect(), 1e-12);
    EXPECT_NO_THROW(require_normalized(set));
    // Normalizing again changes nothing.
    const KrausSet again = normalize_kraus_set(set);
    for (std::size_t r = 0; r < set.operators.size(); ++r) {
      EXPECT_LE((again.operators[r] - set.operators[r]).norm(), 1e-12);
    }
  }
}

TEST(KrausSet, UnnormalizedSetIsRejected) {
  const KrausSet set = build_kraus_set(SystemModel::paper_qubit(), 2.0, 1e-3);
  try {
    require_normalized(set);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NotNormalized);
  }
  EXPECT_THROW(one_step_expected_fidelity(testing::qubit_rho0(), testing::qubit_rho_hat0(), set), Error);
}

TEST(ChainStep, ProbabilitiesSumToOneAndUseTrueState) {
  std::mt19937_64 gen(8);
  const KrausSet set = normalize_kraus_set(build_kraus_set(SystemModel::paper_qubit(), 2.0, 1e-3));
  for (int trial = 0; trial < 200; ++trial) {
    const DensityMatrix chi = testing::random_density(2, gen);
    const auto p = outcome_probabilities(chi, set);
    double total = 0.0;
    for (double x : p) total += x;
    EXPECT_NEAR(total, 1.0, 1e-10);
  }
  // The outcome law depends only on chi: swapping the filter leaves the draw unchanged.
  RandomStream a = make_stream(1, 0), b = make_stream(1, 0);
  for (int k = 0; k < 1000; ++k) {
    const auto ra = chain_step(testing::qubit_rho0(), testing::qubit_rho_hat0(), a, set);
    const auto rb = chain_step(testing::qubit_rho0(), DensityMatrix::basis_state(2, 1), b, set);
    ASSERT_EQ(ra.outcome, rb.outcome);
  }
}

TEST(ChainStep, EqualStatesStayEqual) {
  const KrausSet set = normalize_kraus_set(build_kraus_set(SystemModel::paper_qubit(), 2.0, 1e-3));
  DensityMatrix chi = testing::qubit_rho0(), chi_hat = testing::qubit_rho0();
  RandomStream rng = make_stream(2, 0);
  for (int k = 0; k < 2000; ++k) {
    auto r = chain_step(chi, chi_hat, rng, set);
    chi = r.chi;
    chi_hat = r.chi_hat;
    ASSERT_EQ(chi.matrix(), chi_hat.matrix());
  }
}

TEST(ChainStep, OutcomeFrequenciesMatchProbabilities) {
  const KrausSet set = normalize_kraus_set(build_kraus_set(SystemModel::paper_qubit(), 2.0, 1e-3));
  const DensityMatrix chi = testing::qubit_rho0();
  const auto p = outcome_probabilities(chi, set);
  std::vector<double> counts(p.size(), 0.0);
  RandomStream rng = make_stream(3, 0);
  const int n = 100000;
  for (int k = 0; k < n; ++k) counts[chain_step(chi, testing::qubit_rho_hat0(), rng, set).outcome] += 1.0;
  for (std::size_t r = 0; r < p.size(); ++r) {
    const double se = std::sqrt(n * p[r] * (1.0 - p[r]));
    EXPECT_LE(std::abs(counts[r] - n * p[r]), 3.0 * se) << "outcome " << r;
  }
}

TEST(ChainStep, RejectsUnnormalizedProbabilities) {
  KrausSet set = build_kraus_set(SystemModel::paper_qubit(), 2.0, 1e-2);
  RandomStream rng = make_stream(4, 0);
  EXPECT_THROW(chain_step(testing::qubit_rho0(), testing::qubit_rho_hat0(), rng, set), Error);
}

TEST(ExpectedFidelity, EqualAndOrthogonalStates) {
  const KrausSet set = normalize_kraus_set(build_kraus_set(SystemModel::paper_qubit(), 2.0, 1e-3));
  const ExpectedFidelity same = one_step_expected_fidelity(testing::qubit_rho0(), testing::qubit_rho0(), set);
  EXPECT_NEAR(same.expected, 1.0, 1e-12);
  EXPECT_NEAR(same.current, 1.0, 1e-12);

  const KrausSet diagonal = normalize_kraus_set(build_kraus_set(SystemModel(zero2(), {pauli_z()}), 2.0, 1e-3));
  const ExpectedFidelity orth =
      one_step_expected_fidelity(DensityMatrix::basis_state(2, 0), DensityMatrix::basis_state(2, 1), diagonal);
  EXPECT_NEAR(orth.expected, 0.0, 1e-12);
  EXPECT_NEAR(orth.current, 0.0, 1e-12);
}

// The discrete one-step submartingale inequality, checked exactly.
TEST(ExpectedFidelity, NeverDecreasesOnRandomPairs) {
  std::mt19937_64 gen(9);
  const KrausSet qubit = normalize_kraus_set(build_kraus_set(SystemModel::paper_qubit(), 2.0, 1e-3));
  for (int trial = 0; trial < 1000; ++trial) {
    const DensityMatrix chi = testing::random_density(2, gen);
    const DensityMatrix chi_hat = testing::random_density(2, gen);
    const ExpectedFidelity f = one_step_expected_fidelity(chi, chi_hat, qubit);
    EXPECT_GE(f.expected - f.current, -1e-9);
  }
  for (int trial = 0; trial < 300; ++trial) {
    const Index n = 2 + trial % 3;
    const SystemModel model(testing::random_hermitian(n, gen), {testing::random_matrix(n, gen)},
                            {0.5 * testing::random_matrix(n, gen)});
    const KrausSet set = normalize_kraus_set(build_kraus_set(model, 0.3 + trial % 5, 1e-2));
    const ExpectedFidelity f =
        one_step_expected_fidelity(testing::random_density(n, gen), testing::random_density(n, gen), set);
    EXPECT_GE(f.expected - f.current, -1e-9);
  }
}

TEST(ChainVersusJump, ClickOutcomesAgreeToFirstOrder) {
  const SystemModel model = SystemModel::paper_qubit();
  const DensityMatrix chi = testing::qubit_rho0();
  const TrajectoryPair pair{0.0, chi, testing::qubit_rho_hat0()};
  std::vector<double> eps{1e-2, 1e-3, 1e-4}, gaps;
  for (double e : eps) {
    const KrausSet set = normalize_kraus_set(build_kraus_set(model, 2.0, e));
    const DensityMatrix via_chain = *apply_outcome(chi, set.operators[1]);
    const JumpStepResult via_jump = advance_jump(pair, JumpEvent{0, +1}, JumpConfig{.alpha = 2.0, .dt = e}, model);
    gaps.push_back((via_chain.matrix() - via_jump.pair.rho.matrix()).norm());
  }
  EXPECT_NEAR(testing::loglog_slope(eps, gaps), 1.0, 0.1);
  for (std::size_t k = 0; k < eps.size(); ++k) EXPECT_LE(gaps[k], 10.0 * eps[k]);
}

TEST(DiffusionLimit, StepRespectsRateBound) {
  const SystemModel model = SystemModel::paper_qubit();
  DiffusionLimitConfig cfg;
  for (double alpha : cfg.alphas) {
    const double dt = diffusion_limit_dt(model, alpha, cfg);
    EXPECT_LE(dt, cfg.dt_cap);
    EXPECT_LE(max_total_jump_rate(model, alpha) * dt, cfg.max_jump_prob * (1.0 + 1e-12));
    const double per_interval = cfg.horizon / cfg.intervals / dt;
    EXPECT_NEAR(per_interval, std::round(per_interval), 1e-9);
  }
  cfg.dt = 1e-3;
  cfg.alphas = {1.0, 100.0};
  try {
    diffusion_limit_check(model, testing::qubit_rho0(), testing::qubit_rho_hat0(), cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::RateOverflow);
  }
}

TEST(DiffusionLimit, WithoutChannelsBothReduceToHamiltonianFlow) {
  const SystemModel model(pauli_y(), {zero2()});
  DiffusionLimitConfig cfg;
  cfg.n_traj = 50;
  cfg.seed = 17;
  const DiffusionLimitReport report =
      diffusion_limit_check(model, testing::qubit_rho0(), testing::qubit_rho_hat0(), cfg);
  ASSERT_EQ(report.rows.size(), cfg.alphas.size() * (cfg.intervals + 1));
  for (const auto& row : report.rows) {
    // No randomness survives; only the O(dt) difference of the two integrators.
    EXPECT_LE(row.stderr_obs, 1e-12);
    EXPECT_LE(row.obs_gap, 10.0 * row.dt);
    EXPECT_LE(row.fid_gap, 10.0 * row.dt);
  }
  EXPECT_TRUE(report.pass) << report.detail;
}

TEST(DiffusionLimit, GapShrinksAlongAlphaSweep) {
  const SystemModel model = SystemModel::paper_qubit();
  DiffusionLimitConfig cfg;
  cfg.n_traj = 1000;
  cfg.seed = 5;
  const DiffusionLimitReport report =
      diffusion_limit_check(model, testing::qubit_rho0(), testing::qubit_rho_hat0(), cfg);
  EXPECT_TRUE(report.trend_checked);
  EXPECT_TRUE(report.pass) << report.detail;
}

}  // namespace
}  // namespace qfilter
