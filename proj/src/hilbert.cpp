#include "qsr/hilbert.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace qsr {

double max_abs(const Cmat& a) {
  return a.size() == 0 ? 0.0 : a.cwiseAbs().maxCoeff();
}

double fidelity(const StateVector& a, const StateVector& b) {
  const cplx ov = a.dot(b);  // conjugate-linear in a
  return std::norm(ov);
}

DensityMatrix pure_density(const StateVector& psi) {
  return psi * psi.adjoint();
}

void validate_state(const StateVector& psi, const Tolerances& tol) {
  if (psi.size() == 0) throw validation_error("state vector is empty");
  const double n = psi.norm();
  if (std::abs(n - 1.0) > tol.norm) {
    std::ostringstream msg;
    msg << "state norm " << n << " deviates from 1 by " << std::abs(n - 1.0)
        << " (tol " << tol.norm << ")";
    throw validation_error(msg.str());
  }
}

void validate_density(const DensityMatrix& rho, const Tolerances& tol) {
  if (rho.rows() == 0 || rho.rows() != rho.cols())
    throw validation_error("density matrix must be square and non-empty");
  const double asym = max_abs(Cmat(rho - rho.adjoint()));
  if (asym > tol.herm) {
    std::ostringstream msg;
    msg << "density matrix asymmetry " << asym << " exceeds tol " << tol.herm;
    throw validation_error(msg.str());
  }
  const double tr_dev = std::abs(rho.trace().real() - 1.0) +
                        std::abs(rho.trace().imag());
  if (tr_dev > tol.norm) {
    std::ostringstream msg;
    msg << "density matrix trace deviates from 1 by " << tr_dev;
    throw validation_error(msg.str());
  }
  Eigen::SelfAdjointEigenSolver<Cmat> es(rho, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success)
    throw numeric_error("eigensolver failed on density matrix");
  const double min_eig = es.eigenvalues().minCoeff();
  if (min_eig < -tol.psd) {
    std::ostringstream msg;
    msg << "density matrix has eigenvalue " << min_eig
        << " below the PSD floor -" << tol.psd;
    throw validation_error(msg.str());
  }
}

SpectralDecomposition spectral_decompose(const Cmat& observable,
                                         double tol_degeneracy,
                                         const Tolerances& tol) {
  if (observable.rows() == 0 || observable.rows() != observable.cols())
    throw validation_error("observable must be square and non-empty");
  const double asym = max_abs(Cmat(observable - observable.adjoint()));
  if (asym > tol.herm) {
    std::ostringstream msg;
    msg << "observable is not Hermitian: max |A - A^dagger| = " << asym
        << " (tol " << tol.herm << ")";
    throw validation_error(msg.str());
  }

  // Work on the Hermitian average so rounding-level asymmetry cannot leak in.
  const Cmat herm = 0.5 * (observable + observable.adjoint());
  Eigen::SelfAdjointEigenSolver<Cmat> es(herm);
  if (es.info() != Eigen::Success)
    throw numeric_error("eigensolver did not converge on observable");

  const int dim = static_cast<int>(observable.rows());
  const Rvec& evals = es.eigenvalues();  // ascending
  const double range = evals[dim - 1] - evals[0];
  if (tol_degeneracy < 0.0) tol_degeneracy = 1e-9 * range;

  SpectralDecomposition dec;
  dec.dimension = dim;
  dec.spectral_range = range;

  // Group eigenvalues whose consecutive gap is within the merge tolerance.
  int start = 0;
  while (start < dim) {
    int stop = start + 1;
    while (stop < dim && evals[stop] - evals[stop - 1] <= tol_degeneracy)
      ++stop;
    SpectralLevel lvl;
    lvl.multiplicity = stop - start;
    lvl.eigenvalue = evals.segment(start, lvl.multiplicity).mean();
    const Cmat vecs = es.eigenvectors().middleCols(start, lvl.multiplicity);
    lvl.projector = vecs * vecs.adjoint();
    dec.levels.push_back(std::move(lvl));
    start = stop;
  }

  dec.observable = Cmat::Zero(dim, dim);
  for (const auto& lvl : dec.levels)
    dec.observable += lvl.eigenvalue * lvl.projector;
  return dec;
}

SpectralDecomposition spectral_from_data(const std::vector<double>& eigenvalues,
                                         const std::vector<Cmat>& projectors,
                                         const Tolerances& tol) {
  if (eigenvalues.empty() || eigenvalues.size() != projectors.size())
    throw validation_error(
        "spectral data needs matching, non-empty eigenvalue/projector lists");
  const int levels = static_cast<int>(eigenvalues.size());
  const int dim = static_cast<int>(projectors.front().rows());

  SpectralDecomposition dec;
  dec.dimension = dim;
  Cmat sum = Cmat::Zero(dim, dim);
  for (int n = 0; n < levels; ++n) {
    if (n > 0 && eigenvalues[n] <= eigenvalues[n - 1])
      throw validation_error("spectral eigenvalues must be strictly increasing");
    const Cmat& p = projectors[n];
    if (p.rows() != dim || p.cols() != dim)
      throw validation_error("projector dimensions disagree");
    if (max_abs(Cmat(p - p.adjoint())) > tol.herm)
      throw validation_error("projector is not Hermitian");
    if (max_abs(Cmat(p * p - p)) > tol.num)
      throw validation_error("projector is not idempotent");
    const double trace = p.trace().real();
    if (std::abs(trace - std::round(trace)) > tol.num || trace < 0.5)
      throw validation_error("projector trace is not a positive integer");
    for (int m = 0; m < n; ++m)
      if (max_abs(Cmat(p * projectors[m])) > tol.num) {
        std::ostringstream msg;
        msg << "projectors " << m << " and " << n << " are not orthogonal";
        throw validation_error(msg.str());
      }
    SpectralLevel lvl;
    lvl.eigenvalue = eigenvalues[n];
    lvl.multiplicity = static_cast<int>(std::lround(trace));
    lvl.projector = p;
    dec.levels.push_back(std::move(lvl));
    sum += p;
  }
  if (max_abs(Cmat(sum - Cmat::Identity(dim, dim))) > tol.num)
    throw validation_error("projectors do not resolve the identity");

  dec.spectral_range = eigenvalues.back() - eigenvalues.front();
  dec.observable = Cmat::Zero(dim, dim);
  for (const auto& lvl : dec.levels)
    dec.observable += lvl.eigenvalue * lvl.projector;
  return dec;
}

Rvec level_probabilities(const StateVector& psi,
                         const SpectralDecomposition& dec,
                         const Tolerances& tol) {
  validate_state(psi, tol);
  if (psi.size() != dec.dimension)
    throw validation_error("state dimension does not match decomposition");
  Rvec pi(dec.level_count());
  for (int n = 0; n < dec.level_count(); ++n) {
    const double w = (psi.adjoint() * dec.levels[n].projector * psi)(0).real();
    pi[n] = std::max(w, 0.0);
  }
  return pi;
}

MomentSet moments(const StateVector& psi, const SpectralDecomposition& dec,
                  int n_max, const Tolerances& tol) {
  if (n_max < 3)
    throw validation_error("moments requires n_max >= 3");
  const Rvec pi = level_probabilities(psi, dec, tol);
  MomentSet m;
  m.raw_moments.resize(n_max + 1);
  for (int k = 0; k <= n_max; ++k) {
    double acc = 0.0;
    for (int n = 0; n < dec.level_count(); ++n)
      acc += std::pow(dec.levels[n].eigenvalue, k) * pi[n];
    m.raw_moments[k] = acc;
  }
  m.energy = m.raw_moments[1];
  m.variance = std::max(m.raw_moments[2] - m.energy * m.energy, 0.0);
  m.skewness = m.raw_moments[3] - 3.0 * m.energy * m.raw_moments[2] +
               2.0 * m.energy * m.energy * m.energy;
  return m;
}

StateVector luders_state(const StateVector& psi,
                         const SpectralDecomposition& dec, int level,
                         const Tolerances& tol) {
  validate_state(psi, tol);
  if (level < 0 || level >= dec.level_count())
    throw validation_error("level index out of range");
  const Cvec projected = dec.levels[level].projector * psi;
  const double weight = projected.squaredNorm();
  if (weight <= tol.prob) {
    std::ostringstream msg;
    msg << "level " << level << " carries weight " << weight
        << " <= " << tol.prob << "; projection is degenerate";
    throw degenerate_projection_error(msg.str());
  }
  return projected / std::sqrt(weight);
}

Cmat orthogonal_luders_complement(const StateVector& psi,
                                  const SpectralDecomposition& dec, int level,
                                  const Tolerances& tol) {
  const StateVector l = luders_state(psi, dec, level, tol);
  return dec.levels[level].projector - l * l.adjoint();
}

DensityMatrix luders_map(const DensityMatrix& rho,
                         const SpectralDecomposition& dec,
                         std::optional<int> level, const Tolerances& tol) {
  validate_density(rho, tol);
  if (rho.rows() != dec.dimension)
    throw validation_error("density dimension does not match decomposition");
  if (level) {
    if (*level < 0 || *level >= dec.level_count())
      throw validation_error("level index out of range");
    const Cmat& p = dec.levels[*level].projector;
    const double weight = (p * rho).trace().real();
    if (weight <= tol.prob) {
      std::ostringstream msg;
      msg << "outcome " << *level << " has probability " << weight
          << " <= " << tol.prob << "; conditional update is degenerate";
      throw degenerate_projection_error(msg.str());
    }
    return (p * rho * p) / weight;
  }
  DensityMatrix out = Cmat::Zero(rho.rows(), rho.cols());
  for (const auto& lvl : dec.levels) out += lvl.projector * rho * lvl.projector;
  return out;
}

}  // namespace qsr
