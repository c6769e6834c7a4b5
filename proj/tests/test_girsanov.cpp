#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>
#include <vector>

#include <qsr/girsanov.hpp>
#include <qsr/hilbert.hpp>
#include <qsr/rng.hpp>
#include <qsr/sde.hpp>

using namespace qsr;

namespace {

SpectralDecomposition qubit() {
  Cmat f = Cmat::Zero(2, 2);
  f(1, 1) = 1.0;
  return spectral_decompose(f);
}

StateVector qubit_state() {
  Cvec psi(2);
  psi << 0.5, std::sqrt(0.75);
  return psi;
}

Rvec qubit_pi() {
  Rvec pi(2);
  pi << 0.25, 0.75;
  return pi;
}

Rvec qubit_e() {
  Rvec e(2);
  e << 0.0, 1.0;
  return e;
}

}  // namespace

TEST_CASE("at t = 0 with w* = 0 everything reduces to the initial data") {
  const Rvec pi = qubit_pi(), e = qubit_e();
  CHECK(h_of_wstar(pi, e, 1.0, 0.0, 0.0) == doctest::Approx(0.75));
  CHECK(lambda_star_of_wstar(pi, e, 1.0, 0.0, 0.0) == doctest::Approx(1.0));
  const Rvec p = implied_probabilities(pi, e, 1.0, 0.0, 0.0);
  CHECK(p[0] == doctest::Approx(0.25));
  CHECK(p[1] == doctest::Approx(0.75));
  const auto psi = state_closed_form(qubit_state(), qubit(), 1.0, 0.0, 0.0);
  CHECK((psi - qubit_state()).norm() < 1e-12);
}

TEST_CASE("a single populated level gives the exponential martingale") {
  // With all weight on eigenvalue E, Lambda* = exp(sigma E w* - sigma^2 E^2
  // t / 2): the classic Brownian exponential martingale in w*.
  Rvec pi(1), e(1);
  pi << 1.0;
  e << 0.8;
  const double sigma = 1.3;
  for (double w : {-1.0, 0.0, 2.0})
    for (double t : {0.5, 3.0}) {
      const double expect =
          std::exp(sigma * 0.8 * w - sigma * sigma * 0.64 * t / 2.0);
      CHECK(lambda_star_of_wstar(pi, e, sigma, w, t) ==
            doctest::Approx(expect).epsilon(1e-12));
      CHECK(h_of_wstar(pi, e, sigma, w, t) == doctest::Approx(0.8));
    }
}

TEST_CASE("h is nondecreasing in w* and spans the spectrum") {
  const Rvec pi = qubit_pi(), e = qubit_e();
  double prev = -1e300;
  for (double w = -30.0; w <= 30.0; w += 0.25) {
    const double h = h_of_wstar(pi, e, 1.0, w, 2.0);
    CHECK(h >= prev - 1e-12);
    CHECK(h >= 0.0);
    CHECK(h <= 1.0);
    prev = h;
  }
  // saturation at the spectral endpoints
  CHECK(h_of_wstar(pi, e, 1.0, 60.0, 2.0) == doctest::Approx(1.0));
  CHECK(h_of_wstar(pi, e, 1.0, -60.0, 2.0) == doctest::Approx(0.0));
}

TEST_CASE("extreme arguments stay finite through exponent shifts") {
  Rvec pi(3), e(3);
  pi << 0.2, 0.5, 0.3;
  e << -50.0, 0.0, 50.0;
  const double h = h_of_wstar(pi, e, 2.0, 500.0, 10.0);
  CHECK(std::isfinite(h));
  const Rvec p = implied_probabilities(pi, e, 2.0, 500.0, 10.0);
  CHECK(std::isfinite(p.sum()));
  CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("closed-form state is unit norm and matches the implied weights") {
  const auto dec = qubit();
  const auto psi0 = qubit_state();
  for (double w : {-2.0, 0.3, 4.0}) {
    const auto psi = state_closed_form(psi0, dec, 1.0, w, 1.7);
    CHECK(std::abs(psi.norm() - 1.0) < 1e-12);
    const Rvec p = level_probabilities(psi, dec);
    const Rvec q = implied_probabilities(qubit_pi(), qubit_e(), 1.0, w, 1.7);
    CHECK((p - q).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("forward and inverse likelihood ratios multiply to one") {
  // Lambda_t as seen under the physical measure is 1 / Lambda*_t evaluated on
  // the same path point, so their product is identically 1.
  const Rvec pi = qubit_pi(), e = qubit_e();
  for (double w : {-1.0, 0.5, 3.0}) {
    const double ls = lambda_star_of_wstar(pi, e, 1.0, w, 2.5);
    CHECK(ls > 0.0);
    CHECK(ls * (1.0 / ls) == doctest::Approx(1.0));
  }
}

TEST_CASE("transformed-measure mean of Lambda* is 1 at several horizons") {
  // Under Q the driver is plain Brownian motion, so E_Q[Lambda*_t] = 1 and
  // the closed-form second moment sum_{nm} pi_n pi_m exp(sigma^2 E_n E_m t)
  // gives the exact Monte Carlo band.
  const Rvec pi = qubit_pi(), e = qubit_e();
  const double sigma = 1.0;
  const double v0 = 0.1875;
  const double tau = 1.0 / (sigma * sigma * v0);
  philox4x64 gen(child_seed(2024, 0));
  for (double mult : {0.1, 1.0}) {
    const double t = mult * tau;
    double second = 0.0;
    for (int n = 0; n < 2; ++n)
      for (int m = 0; m < 2; ++m)
        second += pi[n] * pi[m] * std::exp(sigma * sigma * e[n] * e[m] * t);
    const int nsamp = 20000;
    double sum = 0.0;
    for (int i = 0; i < nsamp; ++i) {
      const double w = gen.gaussian() * std::sqrt(t);  // Q-law of w*
      sum += lambda_star_of_wstar(pi, e, sigma, w, t);
    }
    const double mean = sum / nsamp;
    const double se = std::sqrt(std::max(0.0, second - 1.0) / nsamp);
    CAPTURE(mult);
    CHECK(std::abs(mean - 1.0) <= 4.0 * se);
  }
}

TEST_CASE("scalar path matches the full SDE driven by the same increments") {
  // Integrate the full state SDE, reconstruct w* from the energy record, and
  // compare the closed-form state with the integrated one at several times.
  const auto dec = qubit();
  const auto psi0 = qubit_state();
  const double sigma = 1.0, dt = 1e-4;
  philox4x64 gen(child_seed(606, 3));
  StateVector psi = psi0;
  double w = 0.0, drift = 0.0;  // w* = W_t + sigma int_0^t <H> ds
  for (long k = 1; k <= 20000; ++k) {
    const double h = moments(psi, dec).energy;
    const double dw = gen.wiener_increment(dt);
    psi = em_step(psi, dec, sigma, dt, dw).first;
    w += dw;
    drift += sigma * h * dt;
    if (k % 5000 == 0) {
      const double t = double(k) * dt;
      const auto closed = state_closed_form(psi0, dec, sigma, w + drift, t);
      CHECK(fidelity(psi, closed) > 1.0 - 1e-4);
    }
  }
}

TEST_CASE("scalar ensemble reproduces the outcome weights") {
  const Rvec pi = qubit_pi(), e = qubit_e();
  SimConfig cfg;
  cfg.sigma = 1.0;
  cfg.horizon_tau = 40.0;
  long hits = 0, total = 0;
  for (std::uint64_t i = 0; i < 600; ++i) {
    philox4x64 gen(child_seed(515, i));
    const auto path = simulate_wstar_physical(pi, e, cfg, gen);
    if (!path.terminal_level) continue;
    ++total;
    if (*path.terminal_level == 1) ++hits;
  }
  REQUIRE(total > 550);
  const double freq = double(hits) / double(total);
  CHECK(std::abs(freq - 0.75) < 4.0 * std::sqrt(0.25 * 0.75 / double(total)));
}

TEST_CASE("scalar path weight equals the closed form at its endpoint") {
  const Rvec pi = qubit_pi(), e = qubit_e();
  SimConfig cfg;
  cfg.sigma = 1.0;
  cfg.horizon_tau = 5.0;
  cfg.collapse_threshold = 0.0;
  philox4x64 gen(child_seed(81, 4));
  const auto path = simulate_wstar_physical(pi, e, cfg, gen);
  REQUIRE(!path.times.empty());
  const double w_end = path.wstar.back();
  const double t_end = path.times.back();
  CHECK(path.weight ==
        doctest::Approx(lambda_star_of_wstar(pi, e, 1.0, w_end, t_end))
            .epsilon(1e-10));
  CHECK(path.lambda_star.back() == doctest::Approx(path.weight));
  // H record matches h(w*, t) pointwise
  for (std::size_t k = 0; k < path.times.size(); k += 100)
    CHECK(path.H[k] ==
          doctest::Approx(h_of_wstar(pi, e, 1.0, path.wstar[k], path.times[k]))
              .epsilon(1e-10));
}

TEST_CASE("deterministic ensemble average matches the two-point formula") {
  const auto dec = qubit();
  const DensityMatrix rho0 = pure_density(qubit_state());
  const double sigma = 1.0, t = 2.0;
  // For G = F (diagonal), only diagonal terms survive: value is <F>_0.
  const cplx mean_f =
      ensemble_average_observable(dec.observable, rho0, dec, sigma, t);
  CHECK(mean_f.real() == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(std::abs(mean_f.imag()) < 1e-12);
  // For G = |0><1| + |1><0| the off-diagonal damps by the dephasing factor.
  Cmat g = Cmat::Zero(2, 2);
  g(0, 1) = g(1, 0) = 1.0;
  const cplx mean_g = ensemble_average_observable(g, rho0, dec, sigma, t);
  const double coherence = 2.0 * 0.5 * std::sqrt(0.75);  // 2 Re rho_01
  const double damp = std::exp(-sigma * sigma * t / 8.0);
  CHECK(mean_g.real() ==
        doctest::Approx(coherence * std::cos(t) * damp).epsilon(1e-9));
}

TEST_CASE("weighted expectation handles plain and degenerate weights") {
  std::vector<double> v(16), w(16, 1.0);
  for (int i = 0; i < 16; ++i) v[i] = i + 1.0;
  const auto flat = weighted_expectation(v, w);
  CHECK(flat.mean == doctest::Approx(8.5));
  CHECK(flat.ess == doctest::Approx(16.0));
  CHECK(!flat.degenerate);
  // the unreliability flag trips strictly below 10 effective samples
  const std::vector<double> ten(v.begin(), v.begin() + 10);
  CHECK(!weighted_expectation(ten, std::vector<double>(10, 2.0)).degenerate);
  const std::vector<double> nine(v.begin(), v.begin() + 9);
  CHECK(weighted_expectation(nine, std::vector<double>(9, 2.0)).degenerate);
  std::vector<double> spike(16, 1e-12);
  spike[3] = 5.0;
  const auto spiked = weighted_expectation(v, spike);
  CHECK(spiked.mean == doctest::Approx(4.0).epsilon(1e-6));
  CHECK(spiked.degenerate);  // ess collapses to ~1
  CHECK_THROWS_AS(weighted_expectation({1.0, 2.0}, {1.0, -0.5}),
                  validation_error);
  CHECK_THROWS_AS(weighted_expectation({1.0, 2.0}, {0.0, 0.0}),
                  validation_error);
}
