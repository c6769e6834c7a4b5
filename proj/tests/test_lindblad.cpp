#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>
#include <vector>

#include <qsr/hilbert.hpp>
#include <qsr/lindblad.hpp>
#include <qsr/rng.hpp>

using namespace qsr;
using std::complex;

namespace {

SpectralDecomposition qubit() {
  Cmat f = Cmat::Zero(2, 2);
  f(1, 1) = 1.0;
  return spectral_decompose(f);
}

DensityMatrix qubit_rho() {
  Cvec psi(2);
  psi << 0.5, std::sqrt(0.75);
  return pure_density(psi);
}

Cmat random_hermitian(int d, std::uint64_t seed) {
  philox4x64 gen(seed);
  Cmat a(d, d);
  for (int r = 0; r < d; ++r)
    for (int c = 0; c < d; ++c)
      a(r, c) = complex<double>(gen.gaussian(), gen.gaussian());
  return Cmat(0.5 * (a + a.adjoint()));
}

DensityMatrix random_density(int d, std::uint64_t seed) {
  philox4x64 gen(seed);
  Cmat a(d, d);
  for (int r = 0; r < d; ++r)
    for (int c = 0; c < d; ++c)
      a(r, c) = complex<double>(gen.gaussian(), gen.gaussian());
  DensityMatrix rho = a * a.adjoint();
  return rho / rho.trace();
}

}  // namespace

TEST_CASE("t = 0 returns the initial density exactly") {
  const auto dec = qubit();
  const auto rho0 = qubit_rho();
  CHECK(max_abs(Cmat(rho_closed_form(rho0, dec, 1.0, 0.0) - rho0)) < 1e-14);
}

TEST_CASE("qubit coherence damps by e^{-1} at t = 8 (sigma = 1)") {
  // Off-diagonal factor is exp(-sigma^2 (E1 - E0)^2 t / 8); with unit gap and
  // sigma = 1 the coherence magnitude falls to 1/e exactly at t = 8.
  const auto dec = qubit();
  const auto rho0 = qubit_rho();
  const auto rho = rho_closed_form(rho0, dec, 1.0, 8.0);
  const double mag0 = std::abs(rho0(0, 1));
  CHECK(std::abs(rho(0, 1)) ==
        doctest::Approx(mag0 * std::exp(-1.0)).epsilon(1e-12));
  // diagonal is untouched
  CHECK(rho(0, 0).real() == doctest::Approx(rho0(0, 0).real()).epsilon(1e-14));
  CHECK(rho(1, 1).real() == doctest::Approx(rho0(1, 1).real()).epsilon(1e-14));
}

TEST_CASE("sigma = 0 reduces to unitary conjugation") {
  const auto dec = qubit();
  const auto rho0 = qubit_rho();
  const double t = 2.7;
  const auto rho = rho_closed_form(rho0, dec, 0.0, t);
  // e^{-iFt} rho0 e^{iFt} with F = diag(0,1): phase e^{it} on rho_01
  CHECK(std::abs(rho(0, 1) -
                 rho0(0, 1) * std::exp(complex<double>(0.0, t))) < 1e-12);
  CHECK(std::abs(rho(0, 0) - rho0(0, 0)) < 1e-14);
}

TEST_CASE("closed form and RK4 agree on a random 4x4 problem") {
  const Cmat f = random_hermitian(4, 321);
  const auto dec = spectral_decompose(f);
  const DensityMatrix rho0 = random_density(4, 322);
  const double sigma = 0.9, t = 1.5;
  const auto exact = rho_closed_form(rho0, dec, sigma, t);
  const auto rk4 = rho_integrate(rho0, dec, sigma, t);
  CHECK(max_abs(Cmat(exact - rk4)) < 1e-8);
}

TEST_CASE("RK4 global error falls by ~16x per dt halving (4th order)") {
  const Cmat f = random_hermitian(3, 99);
  const auto dec = spectral_decompose(f);
  const DensityMatrix rho0 = random_density(3, 98);
  const double sigma = 1.0, t = 1.0;
  const auto exact = rho_closed_form(rho0, dec, sigma, t);
  const double e1 = max_abs(Cmat(rho_integrate(rho0, dec, sigma, t, 0.02) -
                                 exact));
  const double e2 = max_abs(Cmat(rho_integrate(rho0, dec, sigma, t, 0.005) -
                                 exact));
  // quartering dt should shrink the error ~256x; accept [128, 512]
  const double ratio = e1 / e2;
  CHECK(ratio > 128.0);
  CHECK(ratio < 512.0);
}

TEST_CASE("flow preserves trace, hermiticity, and positivity") {
  const Cmat f = random_hermitian(5, 11);
  const auto dec = spectral_decompose(f);
  const DensityMatrix rho0 = random_density(5, 12);
  for (double t : {0.3, 2.0, 10.0}) {
    const auto rho = rho_closed_form(rho0, dec, 1.2, t);
    CHECK(std::abs(rho.trace().real() - 1.0) < 1e-12);
    CHECK(max_abs(Cmat(rho - rho.adjoint())) < 1e-12);
    Eigen::SelfAdjointEigenSolver<Cmat> es(rho);
    CHECK(es.eigenvalues().minCoeff() > -1e-12);
  }
}

TEST_CASE("the closed-form flow is a semigroup") {
  const Cmat f = random_hermitian(4, 47);
  const auto dec = spectral_decompose(f);
  const DensityMatrix rho0 = random_density(4, 48);
  const auto one_shot = rho_closed_form(rho0, dec, 1.1, 3.0);
  const auto two_step =
      rho_closed_form(rho_closed_form(rho0, dec, 1.1, 1.2), dec, 1.1, 1.8);
  CHECK(max_abs(Cmat(one_shot - two_step)) < 1e-12);
}

TEST_CASE("long-time limit keeps only the block diagonal") {
  const auto dec = qubit();
  const auto rho0 = qubit_rho();
  const auto rho = rho_closed_form(rho0, dec, 1.0, 1e6);
  CHECK(std::abs(rho(0, 1)) < 1e-12);
  CHECK(rho(0, 0).real() == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(rho(1, 1).real() == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("block decomposition round-trips and evolves coherences only") {
  const Cmat f = random_hermitian(4, 400);
  const auto dec = spectral_decompose(f);
  const DensityMatrix rho0 = random_density(4, 401);
  auto bd = BlockDecomposedDensity::from_density(rho0, dec);
  CHECK(max_abs(Cmat(bd.to_density() - rho0)) < 1e-12);
  bd.evolve(1.0, 5.0);
  const auto direct = rho_closed_form(rho0, dec, 1.0, 5.0);
  CHECK(max_abs(Cmat(bd.to_density() - direct)) < 1e-12);
}

TEST_CASE("unitary time average converges to the diagonal part") {
  const auto dec = qubit();
  const auto rho0 = qubit_rho();
  const auto avg_short = unitary_time_average(rho0, dec, 1.0);
  const auto avg_long = unitary_time_average(rho0, dec, 1e6);
  DensityMatrix diag = DensityMatrix::Zero(2, 2);
  diag(0, 0) = rho0(0, 0);
  diag(1, 1) = rho0(1, 1);
  CHECK(max_abs(Cmat(avg_long - diag)) < 1e-5);
  // finite-T correction carries the sinc factor on the coherence
  const double w = -1.0;  // E_0 - E_1
  const complex<double> factor(std::sin(w * 1.0) / w,
                               (std::cos(w * 1.0) - 1.0) / w);
  CHECK(std::abs(avg_short(0, 1) - rho0(0, 1) * factor) < 1e-12);
}

TEST_CASE("rhs vanishes on stationary states") {
  const auto dec = qubit();
  DensityMatrix diag = DensityMatrix::Zero(2, 2);
  diag(0, 0) = 0.25;
  diag(1, 1) = 0.75;
  CHECK(max_abs(dephasing_rhs(diag, dec.observable, 1.3)) < 1e-14);
  // and reproduces the damping rate on a coherence
  DensityMatrix rho = qubit_rho();
  const Cmat r = dephasing_rhs(rho, dec.observable, 1.0);
  // d rho01/dt = (i - 1/8) rho01 for unit gap: real part from dephasing
  const complex<double> expect =
      rho(0, 1) * complex<double>(-1.0 / 8.0, 1.0);
  CHECK(std::abs(r(0, 1) - expect) < 1e-12);
}

TEST_CASE("too-coarse RK4 steps raise integration_error") {
  // sigma^2 dt / 8 ~ 3 sits just outside the stability region for the unit
  // gap, so the coherence grows steadily: positivity fails long before any
  // overflow, and the step size is reported as too coarse.
  CHECK_THROWS_AS(rho_integrate(qubit_rho(), qubit(), 5.0, 10.0, 1.0),
                  integration_error);
}
