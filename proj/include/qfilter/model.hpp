#pragma once

#include <string>
#include <utility>
#include <vector>

#include "qfilter/densitymat.hpp"
#include "qfilter/errors.hpp"
#include "qfilter/linalg.hpp"

namespace qfilter {

/// Hamiltonian plus measured channels L_mu and unmeasured dissipation
/// channels L'_nu. Units with hbar = 1. Immutable after construction.
class SystemModel {
 public:
  SystemModel(ComplexMatrix hamiltonian, std::vector<ComplexMatrix> measured,
              std::vector<ComplexMatrix> unmeasured = {})
      : h_(std::move(hamiltonian)), measured_(std::move(measured)), unmeasured_(std::move(unmeasured)) {
    require_square(h_, "hamiltonian");
    const double herm = hermiticity_defect(h_);
    if (!(herm <= 1e-12 * std::max(1.0, h_.cwiseAbs().maxCoeff()))) {
      throw Error(ErrorKind::NotHermitian, "hamiltonian is not Hermitian (defect " + format_real(herm) + ")");
    }
    for (const auto& l : measured_) require_same_shape(h_, l, "measured channel");
    for (const auto& l : unmeasured_) require_same_shape(h_, l, "unmeasured channel");
  }

  /// H = sigma_y, single measured channel L = sigma_z.
  static SystemModel paper_qubit() { return SystemModel(pauli_y(), {pauli_z()}); }

  Index dim() const noexcept { return h_.rows(); }
  const ComplexMatrix& hamiltonian() const noexcept { return h_; }
  const std::vector<ComplexMatrix>& measured_channels() const noexcept { return measured_; }
  const std::vector<ComplexMatrix>& unmeasured_channels() const noexcept { return unmeasured_; }

 private:
  ComplexMatrix h_;
  std::vector<ComplexMatrix> measured_;
  std::vector<ComplexMatrix> unmeasured_;
};

// The superoperators below accept raw matrices so that integrators can apply
// them to intermediate (not yet projected) states; the DensityMatrix overloads
// are the public contract. Outputs are Hermitized.

/// -i[H, rho]
inline ComplexMatrix commutator_drift(const ComplexMatrix& h, const ComplexMatrix& rho) {
  require_same_shape(h, rho, "commutator_drift");
  ComplexMatrix hr = h * rho;
  ComplexMatrix out = -kI * (hr - hr.adjoint());
  hermitize_in_place(out);
  return out;
}

/// -1/2 {L^dag L, rho} + L rho L^dag
inline ComplexMatrix lindblad(const ComplexMatrix& l, const ComplexMatrix& rho) {
  require_same_shape(l, rho, "lindblad");
  const ComplexMatrix ldl = l.adjoint() * l;
  const ComplexMatrix ldl_rho = ldl * rho;
  ComplexMatrix out = l * rho * l.adjoint() - 0.5 * (ldl_rho + ldl_rho.adjoint());
  hermitize_in_place(out);
  return out;
}

/// L rho + rho L^dag - tr((L + L^dag) rho) rho
inline ComplexMatrix lambda_superop(const ComplexMatrix& l, const ComplexMatrix& rho) {
  require_same_shape(l, rho, "lambda_superop");
  const ComplexMatrix lr = l * rho;
  const double c = 2.0 * lr.trace().real();
  ComplexMatrix out = lr + lr.adjoint() - c * rho;
  hermitize_in_place(out);
  return out;
}

/// (L + a) rho + rho (L^dag + a) - tr((L + L^dag + 2a) rho) rho
inline ComplexMatrix lambda_alpha(const ComplexMatrix& l, double alpha, const ComplexMatrix& rho) {
  require_same_shape(l, rho, "lambda_alpha");
  const ComplexMatrix shifted = l + alpha * identity(l.rows());
  const ComplexMatrix lr = shifted * rho;
  const double c = 2.0 * lr.trace().real();
  ComplexMatrix out = lr + lr.adjoint() - c * rho;
  hermitize_in_place(out);
  return out;
}

/// (L + a) rho (L^dag + a) / tr(...) - rho. Throws ZeroProbabilityJump when the
/// normalizing trace is <= 1e-15.
inline ComplexMatrix upsilon_alpha(const ComplexMatrix& l, double alpha, const ComplexMatrix& rho) {
  require_same_shape(l, rho, "upsilon_alpha");
  const ComplexMatrix shifted = l + alpha * identity(l.rows());
  ComplexMatrix post = shifted * rho * shifted.adjoint();
  const double norm = real_trace(post);
  if (!(norm > 1e-15)) {
    throw Error(ErrorKind::ZeroProbabilityJump, "jump normalizer " + format_real(norm));
  }
  ComplexMatrix out = post / norm - rho;
  hermitize_in_place(out);
  return out;
}

/// Deterministic part of the diffusive SME: -i[H,rho] + sum_mu L_mu(rho) + sum_nu L'_nu(rho).
/// This is also the right-hand side of the unconditioned Lindblad master equation.
inline ComplexMatrix lindblad_generator(const SystemModel& model, const ComplexMatrix& rho) {
  ComplexMatrix out = commutator_drift(model.hamiltonian(), rho);
  for (const auto& l : model.unmeasured_channels()) out += lindblad(l, rho);
  for (const auto& l : model.measured_channels()) out += lindblad(l, rho);
  return out;
}

inline ComplexMatrix lindblad(const ComplexMatrix& l, const DensityMatrix& rho) { return lindblad(l, rho.matrix()); }
inline ComplexMatrix lambda_superop(const ComplexMatrix& l, const DensityMatrix& rho) {
  return lambda_superop(l, rho.matrix());
}
inline ComplexMatrix lambda_alpha(const ComplexMatrix& l, double alpha, const DensityMatrix& rho) {
  return lambda_alpha(l, alpha, rho.matrix());
}
inline ComplexMatrix upsilon_alpha(const ComplexMatrix& l, double alpha, const DensityMatrix& rho) {
  return upsilon_alpha(l, alpha, rho.matrix());
}
inline ComplexMatrix lindblad_generator(const SystemModel& model, const DensityMatrix& rho) {
  return lindblad_generator(model, rho.matrix());
}

}  // namespace qfilter
