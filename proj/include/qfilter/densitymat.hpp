#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <utility>

#include "qfilter/errors.hpp"
#include "qfilter/linalg.hpp"

namespace qfilter {

struct DomainTolerances {
  double hermiticity = 1e-10;
  double trace = 1e-9;
  double psd = 1e-8;
};

/// A validated quantum state: Hermitian, unit trace and positive semidefinite,
/// each up to the tolerances it was built with.
class DensityMatrix {
 public:
  explicit DensityMatrix(ComplexMatrix m, DomainTolerances tol = {}) : m_(std::move(m)), tol_(tol) { validate(); }

  /// Wraps a matrix the caller already knows to be in the domain (e.g. the
  /// normalized output of a Kraus map). No spectral check is performed.
  static DensityMatrix trusted(ComplexMatrix m, DomainTolerances tol = {}) {
    return DensityMatrix(std::move(m), tol, TrustedTag{});
  }

  static DensityMatrix maximally_mixed(Index n) {
    return DensityMatrix(ComplexMatrix::Identity(n, n) / static_cast<double>(n));
  }

  static DensityMatrix basis_state(Index n, Index k) {
    if (k < 0 || k >= n) throw Error(ErrorKind::ShapeMismatch, "basis index out of range");
    ComplexMatrix m = ComplexMatrix::Zero(n, n);
    m(k, k) = 1.0;
    return DensityMatrix(std::move(m));
  }

  static DensityMatrix pure(const Eigen::VectorXcd& psi) {
    const double norm = psi.norm();
    if (norm == 0.0) throw Error(ErrorKind::TooFarFromDomain, "zero state vector");
    const Eigen::VectorXcd v = psi / norm;
    ComplexMatrix m = v * v.adjoint();
    hermitize_in_place(m);
    return DensityMatrix(std::move(m));
  }

  const ComplexMatrix& matrix() const noexcept { return m_; }
  Index dim() const noexcept { return m_.rows(); }
  const DomainTolerances& tolerances() const noexcept { return tol_; }

  double trace() const { return real_trace(m_); }
  double purity() const { return trace_of_product(m_, m_).real(); }
  double min_eigenvalue() const { return qfilter::min_eigenvalue(m_); }
  RealVector eigenvalues() const { return hermitian_eigenvalues(m_); }

 private:
  struct TrustedTag {};
  DensityMatrix(ComplexMatrix m, DomainTolerances tol, TrustedTag) : m_(std::move(m)), tol_(tol) {}

  void validate() const {
    require_square(m_, "density matrix");
    const double herm = hermiticity_defect(m_);
    if (!(herm <= tol_.hermiticity)) {
      throw Error(ErrorKind::NotHermitian, "hermiticity defect " + fmt(herm) + " exceeds " + fmt(tol_.hermiticity));
    }
    const double tr = real_trace(m_);
    if (!(std::abs(tr - 1.0) <= tol_.trace)) {
      throw Error(ErrorKind::TooFarFromDomain, "trace " + fmt(tr) + " differs from 1 by more than " + fmt(tol_.trace));
    }
    const double lmin = qfilter::min_eigenvalue(m_);
    if (!(lmin >= -tol_.psd)) {
      throw Error(ErrorKind::NotPSD, "smallest eigenvalue " + fmt(lmin) + " below -" + fmt(tol_.psd));
    }
  }

  static std::string fmt(double x) {
    std::ostringstream os;
    os.precision(6);
    os << x;
    return os.str();
  }

  ComplexMatrix m_;
  DomainTolerances tol_;
};

/// Principal square root of a Hermitian PSD matrix. Eigenvalues in
/// [-clamp_tol, 0) are treated as zero.
inline ComplexMatrix hermitian_sqrt(const ComplexMatrix& m, double clamp_tol = 1e-10) {
  require_square(m, "hermitian_sqrt argument");
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  const double herm = hermiticity_defect(m);
  if (!(herm <= 1e-10 * scale)) {
    throw Error(ErrorKind::NotHermitian, "hermitian_sqrt: hermiticity defect " + format_real(herm));
  }
  Eigen::SelfAdjointEigenSolver<ComplexMatrix> solver(hermitian_part(m));
  const RealVector& lambda = solver.eigenvalues();
  if (lambda(0) < -clamp_tol) {
    throw Error(ErrorKind::NotPSD, "hermitian_sqrt: eigenvalue " + format_real(lambda(0)) + " below -" +
                                       format_real(clamp_tol));
  }
  const RealVector roots = lambda.cwiseMax(0.0).cwiseSqrt();
  const ComplexMatrix& v = solver.eigenvectors();
  ComplexMatrix s = v * roots.cast<Complex>().asDiagonal() * v.adjoint();
  hermitize_in_place(s);
  return s;
}

namespace detail {

// Eigenvalues below 10 N eps * lambda_max are indistinguishable from zero in
// double precision; keeping them would inject O(sqrt(eps)) noise through the
// square roots.
inline double rank_cutoff(const RealVector& lambda) {
  const double n = static_cast<double>(lambda.size());
  return 10.0 * n * std::numeric_limits<double>::epsilon() * std::max(0.0, lambda.maxCoeff());
}

}  // namespace detail

/// Uhlmann fidelity in its squared form, F = [tr sqrt(sqrt(rho) sigma sqrt(rho))]^2,
/// so that F = tr(rho sigma) whenever either argument is pure.
inline double fidelity(const DensityMatrix& rho, const DensityMatrix& sigma) {
  require_same_shape(rho.matrix(), sigma.matrix(), "fidelity");
  const double clamp = std::max({1e-10, rho.tolerances().psd, sigma.tolerances().psd});

  Eigen::SelfAdjointEigenSolver<ComplexMatrix> rho_eig(hermitian_part(rho.matrix()));
  RealVector lambda = rho_eig.eigenvalues();
  if (lambda(0) < -clamp) {
    throw Error(ErrorKind::NotPSD, "fidelity: eigenvalue " + format_real(lambda(0)) + " below -" +
                                       format_real(clamp));
  }
  const double cutoff = detail::rank_cutoff(lambda);
  for (Index i = 0; i < lambda.size(); ++i) lambda(i) = lambda(i) > cutoff ? std::sqrt(lambda(i)) : 0.0;
  const ComplexMatrix& v = rho_eig.eigenvectors();
  // In the eigenbasis of rho: sqrt(L) V^dag sigma V sqrt(L), same spectrum as sqrt(rho) sigma sqrt(rho).
  const ComplexMatrix roots = lambda.cast<Complex>().asDiagonal();
  ComplexMatrix inner = roots * (v.adjoint() * sigma.matrix() * v) * roots;
  hermitize_in_place(inner);

  Eigen::SelfAdjointEigenSolver<ComplexMatrix> inner_eig(inner, Eigen::EigenvaluesOnly);
  const RealVector& mu = inner_eig.eigenvalues();
  const double inner_cutoff = detail::rank_cutoff(mu);
  double sum = 0.0;
  for (Index i = 0; i < mu.size(); ++i) {
    if (mu(i) > inner_cutoff) sum += std::sqrt(mu(i));
  }
  return std::clamp(sum * sum, 0.0, 1.0);
}

/// tr(rho sigma).
inline double frobenius_inner(const DensityMatrix& rho, const DensityMatrix& sigma) {
  require_same_shape(rho.matrix(), sigma.matrix(), "frobenius_inner");
  return trace_of_product(rho.matrix(), sigma.matrix()).real();
}

struct Projection {
  DensityMatrix state;
  double correction;  // Frobenius norm of (state - input)
};

/// Repairs numerical drift: Hermitizes, clamps eigenvalues in [-tol, 0) to zero
/// and renormalizes the trace. Anything further from the domain is an error.
inline Projection project_to_density(const ComplexMatrix& m, double tol = 1e-8) {
  require_square(m, "project_to_density argument");
  const double tr = real_trace(m);
  if (!(std::abs(tr - 1.0) <= tol)) {
    throw Error(ErrorKind::TooFarFromDomain, "trace " + format_real(tr) + " is more than " + format_real(tol) +
                                                 " away from 1");
  }
  ComplexMatrix h = hermitian_part(m);
  Eigen::SelfAdjointEigenSolver<ComplexMatrix> solver(h);
  const RealVector& lambda = solver.eigenvalues();
  if (lambda(0) < -tol) {
    throw Error(ErrorKind::TooFarFromDomain, "eigenvalue " + format_real(lambda(0)) + " below -" +
                                                 format_real(tol));
  }
  if (lambda(0) < 0.0) {
    const ComplexMatrix& v = solver.eigenvectors();
    h = v * lambda.cwiseMax(0.0).cast<Complex>().asDiagonal() * v.adjoint();
    hermitize_in_place(h);
  }
  const double htr = real_trace(h);
  if (htr != 1.0) h /= htr;
  const double correction = (h - m).norm();
  return {DensityMatrix::trusted(std::move(h)), correction};
}

}  // namespace qfilter
