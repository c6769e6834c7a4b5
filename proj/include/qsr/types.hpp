// types.hpp — shared aliases, tolerance bundle, and the error taxonomy.
#pragma once

#include <complex>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace qsr {

using cplx = std::complex<double>;
using Cvec = Eigen::VectorXcd;
using Cmat = Eigen::MatrixXcd;
using Rvec = Eigen::VectorXd;

/// Validation tolerances. Defaults are deliberate; every entry is overridable.
struct Tolerances {
  double norm = 1e-10;  ///< state normalisation
  double herm = 1e-10;  ///< hermiticity (max-abs asymmetry)
  double psd = 1e-10;   ///< positive semidefiniteness (eigenvalue floor)
  double prob = 1e-12;  ///< probability-vector sums / level weights
  double num = 1e-9;    ///< generic numeric agreement
};

// ---- error taxonomy ------------------------------------------------------
// Process mapping (see the CLI): validation/config -> exit 2, numeric -> 3.

struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad input data: non-normalised states, non-hermitian observables,
/// dimension mismatches, invalid probability vectors.
struct validation_error : error {
  using error::error;
};

/// Bad run configuration: unknown fields, out-of-range parameters,
/// unsupported mode combinations.
struct config_error : error {
  using error::error;
};

/// Numeric failure: eigensolver non-convergence, overflow, NaN poisoning.
struct numeric_error : error {
  using error::error;
};

/// Integration-quality failure (e.g. positivity lost beyond tolerance
/// because the step size was too coarse).
struct integration_error : numeric_error {
  using numeric_error::numeric_error;
};

/// Projection onto a level carrying (numerically) zero weight.
struct degenerate_projection_error : validation_error {
  using validation_error::validation_error;
};

}  // namespace qsr
