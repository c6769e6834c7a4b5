// hilbert.hpp — finite-dimensional observables, spectral data, and the
// Lüders projection machinery used everywhere else in the toolkit.
#pragma once

#include <optional>
#include <vector>

#include "qsr/types.hpp"

namespace qsr {

/// One eigenlevel after degeneracy merging: representative eigenvalue,
/// multiplicity, and the orthogonal projector onto the eigenspace.
struct SpectralLevel {
  double eigenvalue = 0.0;
  int multiplicity = 0;
  Cmat projector;
};

/// Spectral resolution of a Hermitian observable: strictly increasing
/// eigenvalues, orthogonal projectors summing to the identity.
struct SpectralDecomposition {
  std::vector<SpectralLevel> levels;
  int dimension = 0;
  double spectral_range = 0.0;  ///< E_max - E_min of the raw spectrum
  Cmat observable;              ///< reconstruction sum_n E_n P_n

  int level_count() const { return static_cast<int>(levels.size()); }
  double e_min() const { return levels.front().eigenvalue; }
  double e_max() const { return levels.back().eigenvalue; }
  Rvec eigenvalues() const {
    Rvec e(level_count());
    for (int n = 0; n < level_count(); ++n) e[n] = levels[n].eigenvalue;
    return e;
  }
};

/// Low moments of the observable in a given state.
struct MomentSet {
  double energy = 0.0;              ///< <psi|F|psi>
  double variance = 0.0;            ///< V = <F^2> - <F>^2
  double skewness = 0.0;            ///< beta = <F^3> - 3<F><F^2> + 2<F>^3
  std::vector<double> raw_moments;  ///< <F^k> for k = 0..n_max
};

using StateVector = Cvec;
using DensityMatrix = Cmat;

// ---- validation ----------------------------------------------------------

/// Throws validation_error unless psi is unit-norm within tol.norm.
void validate_state(const StateVector& psi, const Tolerances& tol = {});

/// Throws validation_error unless rho is Hermitian (tol.herm), unit-trace
/// (tol.norm) and PSD down to -tol.psd.
void validate_density(const DensityMatrix& rho, const Tolerances& tol = {});

// ---- spectral analysis ---------------------------------------------------

/// Eigendecompose a Hermitian matrix and merge near-degenerate eigenvalues
/// (gap <= tol_degeneracy; default 1e-9 * spectral range) into shared levels.
/// Throws validation_error for non-Hermitian input (message names the largest
/// asymmetry), numeric_error if the eigensolver fails to converge.
SpectralDecomposition spectral_decompose(const Cmat& observable,
                                         double tol_degeneracy = -1.0,
                                         const Tolerances& tol = {});

/// Build a decomposition from explicit spectral data. The projectors must be
/// Hermitian idempotents, mutually orthogonal, and complete; eigenvalues must
/// be strictly increasing.
SpectralDecomposition spectral_from_data(const std::vector<double>& eigenvalues,
                                         const std::vector<Cmat>& projectors,
                                         const Tolerances& tol = {});

/// Moments <F^k>, k = 0..n_max (n_max >= 3), plus energy/variance/skewness.
MomentSet moments(const StateVector& psi, const SpectralDecomposition& dec,
                  int n_max = 3, const Tolerances& tol = {});

/// Level weights pi_n = <psi|P_n|psi>, clamped at 0. Sum == 1 within
/// tol.prob for a valid state (asserted by tests, not renormalised here).
Rvec level_probabilities(const StateVector& psi,
                         const SpectralDecomposition& dec,
                         const Tolerances& tol = {});

// ---- Lüders machinery ----------------------------------------------------

/// Normalised projection P_n|psi> / sqrt(pi_n). The result keeps the phase
/// inherited from psi. Throws degenerate_projection_error if pi_n <= tol.prob.
StateVector luders_state(const StateVector& psi,
                         const SpectralDecomposition& dec, int level,
                         const Tolerances& tol = {});

/// The part of the level-n eigenspace orthogonal to the projected state:
/// P_n - |l_n><l_n| with |l_n> = luders_state(psi, n). A rank (d_n - 1)
/// projector annihilating psi.
Cmat orthogonal_luders_complement(const StateVector& psi,
                                  const SpectralDecomposition& dec, int level,
                                  const Tolerances& tol = {});

/// Projective update of a density matrix. With a level: conditional outcome
/// P_n rho P_n / tr(P_n rho) (degenerate_projection_error if the trace is
/// <= tol.prob). Without: the non-selective update sum_n P_n rho P_n.
DensityMatrix luders_map(const DensityMatrix& rho,
                         const SpectralDecomposition& dec,
                         std::optional<int> level = std::nullopt,
                         const Tolerances& tol = {});

// ---- small helpers -------------------------------------------------------

/// max |A_ij| — the matrix norm used by validation messages.
double max_abs(const Cmat& a);

/// Squared overlap |<a|b>|^2 of two unit vectors (global phase irrelevant).
double fidelity(const StateVector& a, const StateVector& b);

/// Density matrix of a normalised pure state.
DensityMatrix pure_density(const StateVector& psi);

}  // namespace qsr
