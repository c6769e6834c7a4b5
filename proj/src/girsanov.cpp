#include "qsr/girsanov.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace qsr {

namespace {

void validate_pi_evals(const Rvec& pi, const Rvec& eigenvalues,
                       const Tolerances& tol) {
  if (pi.size() == 0 || pi.size() != eigenvalues.size())
    throw validation_error("weights and eigenvalues must match and be non-empty");
  double total = 0.0;
  for (int n = 0; n < pi.size(); ++n) {
    if (pi[n] < -tol.prob)
      throw validation_error("level weights must be non-negative");
    total += pi[n];
    if (n > 0 && eigenvalues[n] <= eigenvalues[n - 1])
      throw validation_error("eigenvalues must be strictly increasing");
  }
  if (std::abs(total - 1.0) > std::max(tol.prob, 1e-9))
    throw validation_error("level weights must sum to 1");
}

/// Exponents a_n = sigma E_n w - sigma^2 E_n^2 t / 2 and their maximum over
/// populated levels.
struct Exponents {
  Rvec a;
  double a_max;
};

Exponents exponents(const Rvec& pi, const Rvec& eigenvalues, double sigma,
                    double wstar, double t) {
  Exponents e;
  e.a.resize(eigenvalues.size());
  e.a_max = -std::numeric_limits<double>::infinity();
  for (int n = 0; n < eigenvalues.size(); ++n) {
    const double en = eigenvalues[n];
    e.a[n] = sigma * en * wstar - 0.5 * sigma * sigma * en * en * t;
    if (pi[n] > 0.0) e.a_max = std::max(e.a_max, e.a[n]);
  }
  if (!std::isfinite(e.a_max)) e.a_max = 0.0;
  return e;
}

}  // namespace

Rvec implied_probabilities(const Rvec& pi, const Rvec& eigenvalues,
                           double sigma, double wstar, double t,
                           const Tolerances& tol) {
  validate_pi_evals(pi, eigenvalues, tol);
  if (t < 0.0) throw validation_error("time must be non-negative");
  const Exponents e = exponents(pi, eigenvalues, sigma, wstar, t);
  Rvec p(pi.size());
  double s = 0.0;
  for (int n = 0; n < pi.size(); ++n) {
    p[n] = std::max(pi[n], 0.0) * std::exp(e.a[n] - e.a_max);
    s += p[n];
  }
  if (!(s > 0.0)) throw numeric_error("implied distribution lost all weight");
  return p / s;
}

double h_of_wstar(const Rvec& pi, const Rvec& eigenvalues, double sigma,
                  double wstar, double t, const Tolerances& tol) {
  const Rvec p = implied_probabilities(pi, eigenvalues, sigma, wstar, t, tol);
  return p.dot(eigenvalues);
}

double lambda_star_of_wstar(const Rvec& pi, const Rvec& eigenvalues,
                            double sigma, double wstar, double t,
                            const Tolerances& tol) {
  validate_pi_evals(pi, eigenvalues, tol);
  if (t < 0.0) throw validation_error("time must be non-negative");
  const Exponents e = exponents(pi, eigenvalues, sigma, wstar, t);
  double s = 0.0;
  for (int n = 0; n < pi.size(); ++n)
    s += std::max(pi[n], 0.0) * std::exp(e.a[n] - e.a_max);
  return std::exp(e.a_max) * s;
}

StateVector state_closed_form(const StateVector& psi0,
                              const SpectralDecomposition& dec, double sigma,
                              double wstar, double t, const Tolerances& tol) {
  validate_state(psi0, tol);
  if (psi0.size() != dec.dimension)
    throw validation_error("state dimension does not match decomposition");
  if (t < 0.0) throw validation_error("time must be non-negative");

  const Rvec evals = dec.eigenvalues();
  const Rvec pi = level_probabilities(psi0, dec, tol);
  const Exponents e = exponents(pi, evals, sigma, wstar, t);

  double s = 0.0;
  for (int n = 0; n < pi.size(); ++n)
    s += pi[n] * std::exp(e.a[n] - e.a_max);
  if (!(s > 0.0)) throw numeric_error("closed-form weights vanished");

  StateVector psi = Cvec::Zero(dec.dimension);
  const double inv_sqrt_s = 1.0 / std::sqrt(s);
  for (int n = 0; n < dec.level_count(); ++n) {
    const double en = dec.levels[n].eigenvalue;
    // e^{a_n/2} / sqrt(Lambda*) == e^{(a_n - a_max)/2} / sqrt(S)
    const double mag = std::exp(0.5 * (e.a[n] - e.a_max)) * inv_sqrt_s;
    const cplx phase = std::exp(cplx(0.0, -en * t));
    psi += (phase * mag) * (dec.levels[n].projector * psi0);
  }
  const double norm = psi.norm();
  if (std::abs(norm - 1.0) > tol.num) {
    std::ostringstream msg;
    msg << "closed-form state norm " << norm << " deviates beyond " << tol.num;
    throw numeric_error(msg.str());
  }
  return psi / norm;
}

GirsanovPath simulate_wstar_physical(const Rvec& pi, const Rvec& eigenvalues,
                                     const SimConfig& cfg, philox4x64& stream,
                                     const Tolerances& tol) {
  validate_pi_evals(pi, eigenvalues, tol);
  const double h0 = pi.dot(eigenvalues);
  const double m2 = pi.dot(Rvec(eigenvalues.array().square()));
  const double v0 = std::max(m2 - h0 * h0, 0.0);
  const double range = eigenvalues[eigenvalues.size() - 1] - eigenvalues[0];
  const TimeGrid grid = resolve_grid(cfg, v0, range);
  const double thr = cfg.collapse_threshold > 0.0
                         ? cfg.collapse_threshold * range * range
                         : -1.0;

  GirsanovPath path;
  const long n_rec = grid.n_records();
  path.times.reserve(n_rec);
  path.wstar.reserve(n_rec);
  path.lambda_star.reserve(n_rec);
  path.H.reserve(n_rec);

  double w = 0.0;
  bool frozen = false;
  double h = h0;
  double lam = 1.0;

  for (long k = 0; k <= grid.n_steps; ++k) {
    const double t = k * grid.dt;
    if (!frozen) {
      const Rvec p = implied_probabilities(pi, eigenvalues, cfg.sigma, w, t,
                                           tol);
      h = p.dot(eigenvalues);
      const double v =
          std::max(p.dot(Rvec(eigenvalues.array().square())) - h * h, 0.0);
      lam = lambda_star_of_wstar(pi, eigenvalues, cfg.sigma, w, t, tol);
      if (thr >= 0.0 && v < thr) {
        frozen = true;
        path.terminal_time = t;
        int argmax = 0;
        p.maxCoeff(&argmax);
        path.terminal_level = argmax;
      }
    }
    if (k % grid.stride == 0) {
      path.times.push_back(t);
      path.wstar.push_back(w);
      path.lambda_star.push_back(lam);
      path.H.push_back(h);
    }
    if (k == grid.n_steps) break;
    if (!frozen) {
      // dW* = sigma h(W*, t) dt + dW under the physical measure
      w += cfg.sigma * h * grid.dt + stream.wiener_increment(grid.dt);
    }
  }
  path.weight = path.lambda_star.back();
  return path;
}

cplx ensemble_average_observable(const Cmat& g, const DensityMatrix& rho0,
                                 const SpectralDecomposition& dec, double sigma,
                                 double t, const Tolerances& tol) {
  if (g.rows() != dec.dimension || g.cols() != dec.dimension)
    throw validation_error("observable dimension mismatch");
  if (max_abs(Cmat(g - g.adjoint())) > tol.herm)
    throw validation_error("ensemble-average observable must be Hermitian");
  validate_density(rho0, tol);
  if (t < 0.0) throw validation_error("time must be non-negative");

  cplx acc = 0.0;
  for (int n = 0; n < dec.level_count(); ++n) {
    for (int m = 0; m < dec.level_count(); ++m) {
      const double en = dec.levels[n].eigenvalue;
      const double em = dec.levels[m].eigenvalue;
      const Cmat block = dec.levels[n].projector * rho0 *
                         dec.levels[m].projector;
      const cplx gbar = (g * block).trace();
      const double gap = em - en;
      const cplx factor = std::exp(cplx(-0.125 * sigma * sigma * gap * gap * t,
                                        gap * t));
      acc += gbar * factor;
    }
  }
  const double scale = std::max(1.0, max_abs(g));
  if (std::abs(acc.imag()) > tol.num * scale) {
    std::ostringstream msg;
    msg << "ensemble average has imaginary part " << acc.imag()
        << " beyond tolerance for a Hermitian observable";
    throw numeric_error(msg.str());
  }
  return acc;
}

WeightedMean weighted_expectation(const std::vector<double>& values,
                                  const std::vector<double>& weights) {
  if (values.empty() || values.size() != weights.size())
    throw validation_error("values and weights must match and be non-empty");
  double sw = 0.0, sw2 = 0.0;
  for (const double w : weights) {
    if (w < 0.0) throw validation_error("weights must be non-negative");
    sw += w;
    sw2 += w * w;
  }
  if (!(sw > 0.0)) throw validation_error("weights must not all vanish");

  WeightedMean out;
  double acc = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i)
    acc += weights[i] * values[i];
  out.mean = acc / sw;
  double var_acc = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double d = values[i] - out.mean;
    var_acc += weights[i] * weights[i] * d * d;
  }
  out.std_error = std::sqrt(var_acc) / sw;
  out.ess = sw * sw / sw2;
  out.degenerate = out.ess < 10.0;
  return out;
}

}  // namespace qsr
