#include "qsr/lindblad.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace qsr {

BlockDecomposedDensity BlockDecomposedDensity::from_density(
    const DensityMatrix& rho, const SpectralDecomposition& dec) {
  if (rho.rows() != dec.dimension)
    throw validation_error("density dimension does not match decomposition");
  BlockDecomposedDensity b;
  b.dimension = dec.dimension;
  b.eigenvalues = dec.eigenvalues();
  const int d = dec.level_count();
  b.blocks.reserve(d * d);
  for (int n = 0; n < d; ++n)
    for (int m = 0; m < d; ++m)
      b.blocks.push_back(dec.levels[n].projector * rho *
                         dec.levels[m].projector);
  return b;
}

DensityMatrix BlockDecomposedDensity::to_density() const {
  DensityMatrix rho = Cmat::Zero(dimension, dimension);
  for (const auto& blk : blocks) rho += blk;
  return rho;
}

void BlockDecomposedDensity::evolve(double sigma, double t) {
  const int d = level_count();
  for (int n = 0; n < d; ++n) {
    for (int m = 0; m < d; ++m) {
      if (n == m) continue;  // diagonal blocks are conserved
      const double gap = eigenvalues[n] - eigenvalues[m];
      const cplx factor = std::exp(
          cplx(-0.125 * sigma * sigma * gap * gap * t, -gap * t));
      block(n, m) *= factor;
    }
  }
}

DensityMatrix rho_closed_form(const DensityMatrix& rho0,
                              const SpectralDecomposition& dec, double sigma,
                              double t, const Tolerances& tol) {
  validate_density(rho0, tol);
  if (t < 0.0) throw validation_error("time must be non-negative");
  BlockDecomposedDensity b = BlockDecomposedDensity::from_density(rho0, dec);
  b.evolve(sigma, t);
  return b.to_density();
}

Cmat dephasing_rhs(const Cmat& rho, const Cmat& h, double sigma) {
  const Cmat h2 = h * h;
  const cplx i{0.0, 1.0};
  return -i * (h * rho - rho * h) +
         0.25 * sigma * sigma *
             (h * rho * h - 0.5 * h2 * rho - 0.5 * rho * h2);
}

DensityMatrix rho_integrate(const DensityMatrix& rho0,
                            const SpectralDecomposition& dec, double sigma,
                            double t_end, double dt, const Tolerances& tol) {
  validate_density(rho0, tol);
  if (t_end < 0.0) throw validation_error("t_end must be non-negative");
  const double range = dec.spectral_range;
  if (dt <= 0.0) {
    const double scale =
        range > 0.0 ? std::min(1.0, 8.0 / (sigma * sigma * range * range))
                    : 1.0;
    dt = 1e-3 * scale;
  }

  const Cmat& h = dec.observable;
  Cmat rho = rho0;
  double t = 0.0;
  while (t < t_end - 1e-15 * std::max(1.0, t_end)) {
    const double step = std::min(dt, t_end - t);
    const Cmat k1 = dephasing_rhs(rho, h, sigma);
    const Cmat k2 = dephasing_rhs(rho + 0.5 * step * k1, h, sigma);
    const Cmat k3 = dephasing_rhs(rho + 0.5 * step * k2, h, sigma);
    const Cmat k4 = dephasing_rhs(rho + step * k3, h, sigma);
    rho += (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    rho = 0.5 * (rho + rho.adjoint()).eval();  // enforce hermiticity
    t += step;
  }

  const double trace = rho.trace().real();
  if (!(trace > 0.0) || !std::isfinite(trace))
    throw numeric_error("density trace vanished during integration");
  rho /= trace;

  Eigen::SelfAdjointEigenSolver<Cmat> es(rho, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success)
    throw numeric_error("eigensolver failed on integrated density");
  const double min_eig = es.eigenvalues().minCoeff();
  if (min_eig < -tol.psd) {
    std::ostringstream msg;
    msg << "integrated density lost positivity (min eigenvalue " << min_eig
        << "); dt = " << dt << " is too coarse for this generator";
    throw integration_error(msg.str());
  }
  return rho;
}

DensityMatrix unitary_time_average(const DensityMatrix& rho0,
                                   const SpectralDecomposition& dec, double T,
                                   const Tolerances& tol) {
  validate_density(rho0, tol);
  if (!(T > 0.0)) throw validation_error("averaging window must be positive");
  const int d = dec.level_count();
  DensityMatrix avg = Cmat::Zero(dec.dimension, dec.dimension);
  for (int n = 0; n < d; ++n) {
    for (int m = 0; m < d; ++m) {
      const Cmat block = dec.levels[n].projector * rho0 *
                         dec.levels[m].projector;
      if (n == m) {
        avg += block;
        continue;
      }
      const double w = dec.levels[n].eigenvalue - dec.levels[m].eigenvalue;
      // (1/T) int_0^T e^{-i w t} dt = sin(wT)/(wT) + i (cos(wT) - 1)/(wT)
      const cplx window(std::sin(w * T) / (w * T),
                        (std::cos(w * T) - 1.0) / (w * T));
      avg += window * block;
    }
  }
  return avg;
}

std::vector<DensityMatrix> ensemble_density_from_trajectories(
    const EnsembleSeries& series) {
  if (series.traj.empty())
    throw validation_error("ensemble is empty");
  if (series.traj.front().states.empty())
    throw validation_error(
        "ensemble density needs an ensemble recorded with states");
  const std::size_t k = series.k();
  const int dim = series.dimension;
  std::vector<DensityMatrix> out(k, Cmat::Zero(dim, dim));
  for (const auto& t : series.traj) {  // index order: deterministic reduction
    if (t.states.size() != k)
      throw validation_error("trajectory state series length mismatch");
    for (std::size_t r = 0; r < k; ++r)
      out[r] += t.states[r] * t.states[r].adjoint();
  }
  for (auto& rho : out) rho /= static_cast<double>(series.n());
  return out;
}

}  // namespace qsr
