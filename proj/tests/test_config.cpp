#include <gtest/gtest.h>

#include <optional>
#include <string>

#include "qfilter/config.hpp"
#include "support/oracles.hpp"

namespace qfilter {
namespace {

std::optional<ErrorKind> kind_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error for: " << text;
  return std::nullopt;
}

std::string message_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const Error& e) {
    return e.message();
  }
  return {};
}

TEST(Config, PresetFillsQubitDefaults) {
  const ExperimentConfig cfg = parse_config(R"({"preset": "paper-qubit"})");
  EXPECT_TRUE(cfg.model.hamiltonian().isApprox(pauli_y()));
  ASSERT_EQ(cfg.model.measured_channels().size(), 1u);
  EXPECT_TRUE(cfg.model.measured_channels()[0].isApprox(pauli_z()));
  EXPECT_TRUE(cfg.model.unmeasured_channels().empty());
  EXPECT_EQ(cfg.rho0.matrix(), testing::qubit_rho0().matrix());
  EXPECT_EQ(cfg.rho_hat0.matrix(), testing::qubit_rho_hat0().matrix());
  EXPECT_EQ(cfg.ensemble.n_traj, 500u);
  EXPECT_EQ(cfg.ensemble.dt, 1e-4);
  EXPECT_EQ(cfg.ensemble.horizon, 3.0);
  EXPECT_EQ(cfg.ensemble.checkpoints.size(), 61u);
  EXPECT_EQ(cfg.ensemble.checkpoints.back(), 3.0);
  EXPECT_EQ(cfg.submartingale.z_crit, 3.0);
  EXPECT_EQ(cfg.seed, 20240601u);
}

TEST(Config, PresetOverrideAndExplicitKeys) {
  const ExperimentConfig cfg =
      parse_config(R"({"ensemble": {"n_traj": 64, "horizon": 1.0, "checkpoints": [0, 0.5, 1.0]}})", "paper-qubit");
  EXPECT_EQ(cfg.ensemble.n_traj, 64u);
  EXPECT_EQ(cfg.ensemble.checkpoints, (std::vector<double>{0.0, 0.5, 1.0}));
  EXPECT_EQ(kind_of(R"({"preset": "nope"})"), ErrorKind::ValidationError);
}

TEST(Config, CommentsAllowed) {
  const ExperimentConfig cfg = parse_config("// header\n{\"preset\": \"paper-qubit\", /* inline */ \"seed\": 9}");
  EXPECT_EQ(cfg.seed, 9u);
}

TEST(Config, ParseErrorCarriesPosition) {
  EXPECT_EQ(kind_of("{\"preset\": \"paper-qubit\",\n  \"seed\": }"), ErrorKind::ParseError);
  EXPECT_NE(message_of("{\"preset\": \"paper-qubit\",\n  \"seed\": }").find("line 2"), std::string::npos);
}

TEST(Config, UnknownKeysRejectedWithPath) {
  EXPECT_EQ(kind_of(R"({"preset": "paper-qubit", "ensembel": {}})"), ErrorKind::ValidationError);
  EXPECT_NE(message_of(R"({"preset": "paper-qubit", "ensemble": {"ntraj": 5}})").find("ensemble.ntraj"),
            std::string::npos);
}

TEST(Config, NonHermitianHamiltonianRejected) {
  const std::string text = R"({"model": {"hamiltonian": [[[0,0],[1,0]],[[0,0],[0,0]]], "measured": ["pauli_z"]},
                               "initial_states": {"rho0": "basis:0", "rho_hat0": "maximally_mixed"}})";
  EXPECT_EQ(kind_of(text), ErrorKind::ValidationError);
  EXPECT_EQ(message_of(text).rfind("model", 0), 0u);
}

TEST(Config, BadTraceRejected) {
  const std::string text = R"({"preset": "paper-qubit",
                               "initial_states": {"rho0": [[[0.45,0],[0,0]],[[0,0],[0.45,0]]]}})";
  EXPECT_EQ(kind_of(text), ErrorKind::ValidationError);
  EXPECT_NE(message_of(text).find("initial_states.rho0"), std::string::npos);
}

TEST(Config, NamedStatesAndOperators) {
  const ExperimentConfig cfg = parse_config(R"({"model": {"hamiltonian": "zero", "measured": ["pauli_x"]},
      "initial_states": {"rho0": "basis:1", "rho_hat0": "maximally_mixed"}})");
  EXPECT_EQ(cfg.rho0.matrix()(1, 1), Complex(1.0));
  EXPECT_EQ(cfg.rho_hat0.matrix()(0, 0), Complex(0.5));
  EXPECT_TRUE(cfg.model.measured_channels()[0].isApprox(pauli_x()));
  EXPECT_EQ(kind_of(R"({"preset": "paper-qubit", "initial_states": {"rho0": "basis:2"}})"), ErrorKind::ValidationError);
  EXPECT_EQ(kind_of(R"({"preset": "paper-qubit", "initial_states": {"rho0": "basis:x"}})"), ErrorKind::ValidationError);
  EXPECT_EQ(kind_of(R"({"preset": "paper-qubit", "model": {"measured": ["sigma_z"]}})"), ErrorKind::ValidationError);
  EXPECT_EQ(kind_of(R"({"model": {"hamiltonian": "pauli_y"}})"), ErrorKind::ValidationError);
}

TEST(Config, EnsembleChecks) {
  EXPECT_EQ(kind_of(R"({"preset": "paper-qubit", "ensemble": {"dt": -1}})"), ErrorKind::ValidationError);
  EXPECT_EQ(kind_of(R"({"preset": "paper-qubit", "ensemble": {"driver": "rk4"}})"), ErrorKind::ValidationError);
  EXPECT_EQ(kind_of(R"({"preset": "paper-qubit", "ensemble": {"checkpoints": [0, 0.00015]}})"),
            ErrorKind::ValidationError);
  EXPECT_EQ(kind_of(R"({"preset": "paper-qubit", "ensemble": {"checkpoints": 1}})"), ErrorKind::ValidationError);
  EXPECT_EQ(kind_of(R"({"preset": "paper-qubit", "ensemble": {"dt": 0.5, "horizon": 1.0}})"),
            ErrorKind::DegenerateNormalization);
  EXPECT_EQ(kind_of(R"({"preset": "paper-qubit", "ensemble": {"driver": "jump", "alpha": 100, "dt": 1e-3}})"),
            ErrorKind::RateOverflow);
  EXPECT_EQ(kind_of(R"({"preset": "paper-qubit", "sweep": {"alpha": [2, 1]}})"), ErrorKind::ValidationError);
  EXPECT_EQ(kind_of(R"({"preset": "paper-qubit", "output": {"format": "xml"}})"), ErrorKind::ValidationError);
  EXPECT_EQ(kind_of(R"({"preset": "paper-qubit", "seed": -3})"), ErrorKind::ValidationError);
}

TEST(Config, CanonicalFormRoundTrips) {
  for (const char* text : {R"({"preset": "paper-qubit"})",
                           R"({"model": {"hamiltonian": [[[0,0],[1,0],[0,0]],[[1,0],[0.5,0],[0,-0.3]],[[0,0],[0,0.3],[-0.5,0]]],
                                         "unmeasured": ["identity"]},
                               "initial_states": {"rho0": "basis:0", "rho_hat0": "maximally_mixed"},
                               "ensemble": {"driver": "chain", "dt": 1e-2, "horizon": 1.0, "checkpoints": 3,
                                            "observable": "identity"}})"}) {
    const auto once = config_to_json(parse_config(text));
    const auto twice = config_to_json(parse_config(once.dump()));
    EXPECT_EQ(once.dump(), twice.dump());
  }
}

TEST(Config, RunSettingsReachEverySection) {
  ExperimentConfig cfg = parse_config(R"({"preset": "paper-qubit"})");
  apply_run_settings(cfg, 42, 3);
  EXPECT_EQ(cfg.ensemble.seed, 42u);
  EXPECT_EQ(cfg.sweep.seed, 42u);
  EXPECT_EQ(cfg.ensemble.workers, 3u);
  EXPECT_EQ(cfg.sweep.workers, 3u);
  EXPECT_THROW(apply_run_settings(cfg, 1, 0), Error);
}

}  // namespace
}  // namespace qfilter
