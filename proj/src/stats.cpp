#include "qsr/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include <boost/math/distributions/chi_squared.hpp>

namespace qsr {

namespace {

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return std::string(buf);
}

double mean_of(const std::vector<double>& x) {
  if (x.empty()) return 0.0;
  return std::accumulate(x.begin(), x.end(), 0.0) / double(x.size());
}

// Unbiased sample variance (n - 1 denominator); 0 for n < 2.
double sample_variance(const std::vector<double>& x) {
  const std::size_t n = x.size();
  if (n < 2) return 0.0;
  const double m = mean_of(x);
  double acc = 0.0;
  for (double v : x) acc += (v - m) * (v - m);
  return acc / double(n - 1);
}

double sample_sd(const std::vector<double>& x) {
  return std::sqrt(sample_variance(x));
}

double standard_error(const std::vector<double>& x) {
  if (x.size() < 2) return 0.0;
  return sample_sd(x) / std::sqrt(double(x.size()));
}

// Jackknife standard error of the sample variance: leave-one-out variances
// from running sums, SE^2 = (n-1)/n * sum (v_(i) - vbar)^2.
double jackknife_se_of_variance(const std::vector<double>& x) {
  const std::size_t n = x.size();
  if (n < 3) return 0.0;
  const double s1 = std::accumulate(x.begin(), x.end(), 0.0);
  double s2 = 0.0;
  for (double v : x) s2 += v * v;
  std::vector<double> loo(n);
  const double nm1 = double(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    const double m = (s1 - x[i]) / nm1;
    // sum of squared deviations without sample i
    const double ss = (s2 - x[i] * x[i]) - nm1 * m * m;
    loo[i] = ss / (nm1 - 1.0);
  }
  const double lm = mean_of(loo);
  double acc = 0.0;
  for (double v : loo) acc += (v - lm) * (v - lm);
  return std::sqrt(nm1 / double(n) * acc);
}

double pearson_correlation(const std::vector<double>& x,
                           const std::vector<double>& y) {
  const std::size_t n = x.size();
  const double mx = mean_of(x), my = mean_of(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

// Per-trajectory terminal energy: the eigenvalue of the terminal level when
// the trajectory collapsed, otherwise the last recorded energy.
double terminal_energy(const EnsembleSeries& series, const TrajSummary& tr) {
  if (tr.terminal_level)
    return series.level_eigenvalues[std::size_t(*tr.terminal_level)];
  return tr.H.back();
}

double eigenvalue_span(const EnsembleSeries& series) {
  const auto& ev = series.level_eigenvalues;
  if (ev.size() < 2) return 1.0;
  return std::max(1.0, ev[ev.size() - 1] - ev[0]);
}

void require_min_size(const EnsembleSeries& series, const char* what,
                      std::size_t floor = 2) {
  if (series.n() < floor)
    throw validation_error(std::string(what) + ": need at least " +
                           std::to_string(floor) + " trajectories, got " +
                           std::to_string(series.n()));
}

std::string list_unterminated(const EnsembleSeries& series) {
  std::ostringstream os;
  long shown = 0, total = 0;
  for (std::size_t i = 0; i < series.traj.size(); ++i) {
    if (series.traj[i].terminal_level) continue;
    ++total;
    if (shown < 20) {
      os << (shown ? ", " : "") << i;
      ++shown;
    }
  }
  std::ostringstream msg;
  msg << total << " of " << series.n()
      << " trajectories did not reach the collapse threshold within the "
         "horizon (indices "
      << os.str() << (total > shown ? ", ..." : "") << ")";
  return msg.str();
}

}  // namespace

CheckResult leaf_equals(std::string name, double statistic, double target,
                        double tolerance, long n, std::string detail,
                        std::optional<double> p) {
  CheckResult c;
  c.name = std::move(name);
  c.kind = CheckKind::equals;
  c.statistic = statistic;
  c.target = target;
  c.tolerance = tolerance;
  c.n_samples = n;
  c.passed = std::abs(statistic - target) <= tolerance;
  c.detail = std::move(detail);
  c.p_value = p;
  return c;
}

CheckResult leaf_bound(std::string name, double statistic, double bound,
                       long n, std::string detail, std::optional<double> p) {
  CheckResult c;
  c.name = std::move(name);
  c.kind = CheckKind::upper_bound;
  c.statistic = statistic;
  c.target = bound;
  c.tolerance = 0.0;
  c.n_samples = n;
  c.passed = statistic <= bound;
  c.detail = std::move(detail);
  c.p_value = p;
  return c;
}

CheckResult aggregate(std::string name, std::vector<CheckResult> subs, long n,
                      std::string detail) {
  CheckResult c;
  c.name = std::move(name);
  c.kind = CheckKind::upper_bound;
  long failed = 0;
  for (const auto& s : subs)
    if (!s.passed) ++failed;
  c.statistic = double(failed);
  c.target = 0.0;
  c.tolerance = 0.0;
  c.n_samples = n;
  c.passed = failed == 0;
  c.detail = std::move(detail);
  c.subchecks = std::move(subs);
  return c;
}

nlohmann::ordered_json check_to_json(const CheckResult& c) {
  nlohmann::ordered_json j;
  j["name"] = c.name;
  j["kind"] = c.kind == CheckKind::equals ? "equals" : "upper_bound";
  j["statistic"] = c.statistic;
  j["target"] = c.target;
  j["tolerance"] = c.tolerance;
  j["n_samples"] = c.n_samples;
  j["passed"] = c.passed;
  j["detail"] = c.detail;
  if (c.p_value)
    j["p_value"] = *c.p_value;
  else
    j["p_value"] = nullptr;
  auto subs = nlohmann::ordered_json::array();
  for (const auto& s : c.subchecks) subs.push_back(check_to_json(s));
  j["subchecks"] = std::move(subs);
  return j;
}

double normal_p_value(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

double chi_square_p_value(double statistic, int dof) {
  if (dof <= 0) return 1.0;
  boost::math::chi_squared dist{double(dof)};
  if (!(statistic > 0.0)) return 1.0;
  return boost::math::cdf(boost::math::complement(dist, statistic));
}

double ks_statistic(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty())
    throw validation_error("ks_statistic: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(double(i) / double(a.size()) -
                             double(j) / double(b.size())));
  }
  return d;
}

double ks_p_value(double d, std::size_t n, std::size_t m) {
  const double ne = double(n) * double(m) / double(n + m);
  const double lambda =
      (std::sqrt(ne) + 0.12 + 0.11 / std::sqrt(ne)) * d;
  // Kolmogorov tail Q(lambda) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 lambda^2)
  double sum = 0.0, sign = 1.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += sign * term;
    if (term < 1e-16) break;
    sign = -sign;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

double ks_critical_value(double alpha, std::size_t n, std::size_t m) {
  const double c = std::sqrt(-0.5 * std::log(alpha / 2.0));
  return c * std::sqrt(double(n + m) / (double(n) * double(m)));
}

// ---- born frequencies ----------------------------------------------------

CheckResult check_born_frequencies(const EnsembleSeries& series,
                                   const Rvec& expected_pi) {
  require_min_size(series, "check_born_frequencies", 100);
  const auto K = std::size_t(expected_pi.size());
  if (Eigen::Index(K) != series.level_eigenvalues.size())
    throw validation_error(
        "check_born_frequencies: expected_pi has " + std::to_string(K) +
        " entries but the ensemble has " +
        std::to_string(series.level_eigenvalues.size()) + " levels");
  long unterminated = 0;
  std::vector<long> counts(K, 0);
  for (const auto& tr : series.traj) {
    if (tr.terminal_level)
      ++counts[std::size_t(*tr.terminal_level)];
    else
      ++unterminated;
  }
  const long n_term = series.n() - unterminated;
  if (n_term < 100)
    throw validation_error("check_born_frequencies: " +
                           list_unterminated(series));
  const double n = double(n_term);

  std::vector<CheckResult> subs;
  for (std::size_t k = 0; k < K; ++k) {
    const double pi = expected_pi[Eigen::Index(k)];
    const double freq = double(counts[k]) / n;
    const double band = 3.0 * std::sqrt(std::max(0.0, pi * (1.0 - pi)) / n);
    const double se = std::sqrt(std::max(0.0, pi * (1.0 - pi)) / n);
    const double z = se > 0.0 ? (freq - pi) / se : 0.0;
    subs.push_back(leaf_equals(
        "level_" + std::to_string(k) + "_frequency", freq, pi, band,
        n_term,
        "count " + std::to_string(counts[k]) + ", z = " + fmt(z),
        se > 0.0 ? std::optional<double>(normal_p_value(z)) : std::nullopt));
  }

  // chi-square over the supported levels
  int dof = -1;
  double chi2 = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    const double e = expected_pi[Eigen::Index(k)] * n;
    if (e <= 0.0) continue;
    ++dof;
    chi2 += (double(counts[k]) - e) * (double(counts[k]) - e) / e;
  }
  if (dof >= 1) {
    boost::math::chi_squared dist{double(dof)};
    const double crit = boost::math::quantile(dist, 0.999);
    subs.push_back(leaf_bound(
        "chi_square", chi2, crit, n_term,
        "dof " + std::to_string(dof) + ", p = " +
            fmt(chi_square_p_value(chi2, dof)),
        chi_square_p_value(chi2, dof)));
  }
  std::string note;
  if (unterminated > 0)
    note = std::to_string(unterminated) +
           " unterminated trajectories excluded from the frequency table";
  return aggregate("born_frequencies", std::move(subs), n_term, note);
}

// ---- energy martingale ---------------------------------------------------

CheckResult check_energy_martingale(const EnsembleSeries& series) {
  require_min_size(series, "check_energy_martingale", 100);
  const std::size_t K = series.k();
  const std::size_t N = std::size_t(series.n());
  const double span = eigenvalue_span(series);

  // (a) mean flatness at every grid point
  double worst = -std::numeric_limits<double>::infinity();
  double worst_t = 0.0, worst_z = 0.0;
  std::vector<double> d(N);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < N; ++i)
      d[i] = series.traj[i].H[k] - series.traj[i].H0;
    const double m = mean_of(d);
    const double se = standard_error(d);
    const double v = std::abs(m) - 3.0 * se;
    if (v > worst) {
      worst = v;
      worst_t = series.times[k];
      worst_z = se > 0.0 ? m / se : 0.0;
    }
  }
  std::vector<CheckResult> subs;
  subs.push_back(leaf_bound(
      "mean_flatness", worst, 0.0, long(N),
      "worst at t = " + fmt(worst_t) + ", z = " + fmt(worst_z) +
          " (|mean drift| minus 3 SE, max over grid)",
      normal_p_value(worst_z)));

  // (b) terminal mean
  long unterminated = 0;
  for (std::size_t i = 0; i < N; ++i) {
    d[i] = terminal_energy(series, series.traj[i]) - series.traj[i].H0;
    if (!series.traj[i].terminal_level) ++unterminated;
  }
  {
    const double m = mean_of(d);
    const double se = standard_error(d);
    std::string note = "terminal minus initial energy";
    if (unterminated)
      note += "; " + std::to_string(unterminated) +
              " unterminated trajectories use their last recorded energy";
    subs.push_back(leaf_equals("terminal_mean", m, 0.0, 3.0 * se, long(N),
                               note,
                               se > 0.0
                                   ? std::optional<double>(normal_p_value(m / se))
                                   : std::nullopt));
  }

  // (c) increments uncorrelated with the present value
  double worst_r = 0.0;
  double worst_rt = 0.0;
  long tested = 0;
  std::vector<double> x(N), y(N);
  for (std::size_t k = 0; k + 1 < K; ++k) {
    for (std::size_t i = 0; i < N; ++i) {
      x[i] = series.traj[i].H[k];
      y[i] = series.traj[i].H[k + 1] - series.traj[i].H[k];
    }
    // Skip grid pairs where either leg is numerically degenerate (all
    // trajectories frozen, or a deterministic start).
    if (sample_sd(x) < 1e-12 * span || sample_sd(y) < 1e-12 * span) continue;
    ++tested;
    const double r = pearson_correlation(x, y);
    if (std::abs(r) > std::abs(worst_r)) {
      worst_r = r;
      worst_rt = series.times[k];
    }
  }
  subs.push_back(leaf_bound(
      "increment_correlation", std::abs(worst_r), 3.0 / std::sqrt(double(N)),
      long(N),
      std::to_string(tested) + " grid pairs tested, worst r = " + fmt(worst_r) +
          " at t = " + fmt(worst_rt)));

  return aggregate("energy_martingale", std::move(subs), long(N));
}

// ---- variance laws -------------------------------------------------------

CheckResult check_variance_laws(const EnsembleSeries& series) {
  require_min_size(series, "check_variance_laws", 100);
  const std::size_t K = series.k();
  const std::size_t N = std::size_t(series.n());
  const double sigma = series.config.sigma;
  const double v0 = series.v0_ensemble;

  std::vector<double> col(N), prev(N);

  // (a) monotone mean decay: each mean increment <= 3 SE of the paired
  // differences.
  double worst_inc = -std::numeric_limits<double>::infinity();
  double worst_inc_t = 0.0;
  for (std::size_t k = 0; k + 1 < K; ++k) {
    for (std::size_t i = 0; i < N; ++i)
      col[i] = series.traj[i].V[k + 1] - series.traj[i].V[k];
    const double m = mean_of(col);
    const double se = standard_error(col);
    const double v = m - 3.0 * se;
    if (v > worst_inc) {
      worst_inc = v;
      worst_inc_t = series.times[k + 1];
    }
  }
  std::vector<CheckResult> subs;
  subs.push_back(leaf_bound(
      "mean_decay_monotone", worst_inc, 0.0, long(N),
      "largest mean V increment minus 3 SE, worst at t = " + fmt(worst_inc_t)));

  // (b) mean bounded by the deterministic decay envelope
  double worst_env = -std::numeric_limits<double>::infinity();
  double worst_env_t = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < N; ++i) col[i] = series.traj[i].V[k];
    const double m = mean_of(col);
    const double se = standard_error(col);
    const double envelope =
        v0 / (1.0 + sigma * sigma * v0 * series.times[k]);
    const double v = m - envelope - 3.0 * se;
    if (v > worst_env) {
      worst_env = v;
      worst_env_t = series.times[k];
    }
  }
  subs.push_back(leaf_bound(
      "mean_decay_envelope", worst_env, 0.0, long(N),
      "mean V minus V0/(1 + sigma^2 V0 t) minus 3 SE, worst at t = " +
          fmt(worst_env_t)));

  // (c) dispersion balance: (H_t - H_0)^2 + V_t - V_0 centres on zero at
  // every grid point (V_0 per trajectory, so mixtures balance member-wise).
  double worst_bal = -std::numeric_limits<double>::infinity();
  double worst_bal_t = 0.0, worst_bal_z = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < N; ++i) {
      const auto& tr = series.traj[i];
      const double dh = tr.H[k] - tr.H0;
      col[i] = dh * dh + tr.V[k] - tr.V0;
    }
    const double m = mean_of(col);
    const double se = standard_error(col);
    const double v = std::abs(m) - 3.0 * se;
    if (v > worst_bal) {
      worst_bal = v;
      worst_bal_t = series.times[k];
      worst_bal_z = se > 0.0 ? m / se : 0.0;
    }
  }
  subs.push_back(leaf_bound(
      "dispersion_balance", worst_bal, 0.0, long(N),
      "worst at t = " + fmt(worst_bal_t) + ", z = " + fmt(worst_bal_z),
      normal_p_value(worst_bal_z)));

  // (d) terminal-energy sample variance reproduces the ensemble variance
  long unterminated = 0;
  for (std::size_t i = 0; i < N; ++i) {
    col[i] = terminal_energy(series, series.traj[i]);
    if (!series.traj[i].terminal_level) ++unterminated;
  }
  {
    const double var = sample_variance(col);
    const double se = jackknife_se_of_variance(col);
    std::string note = "sample variance of terminal energies, jackknife SE " +
                       fmt(se);
    if (unterminated)
      note += "; " + std::to_string(unterminated) +
              " unterminated trajectories use their last recorded energy";
    subs.push_back(
        leaf_equals("terminal_variance", var, v0, 3.0 * se, long(N), note));
  }

  return aggregate("variance_laws", std::move(subs), long(N));
}

// ---- pathwise supremum bounds --------------------------------------------

CheckResult check_doob_bounds(const EnsembleSeries& series,
                              const std::vector<double>& lambdas) {
  require_min_size(series, "check_doob_bounds");
  const std::size_t N = std::size_t(series.n());

  // Scale: mean per-trajectory initial variance. For a pure start this is
  // V_0 exactly; for mixtures it is the inequality's natural L^2 scale
  // (the ensemble variance also counts initial-energy dispersion, which the
  // centred suprema never see).
  std::vector<double> v0s(N), sup2(N), supv(N);
  for (std::size_t i = 0; i < N; ++i) {
    v0s[i] = series.traj[i].V0;
    sup2[i] = series.traj[i].sup_abs_dH * series.traj[i].sup_abs_dH;
    supv[i] = series.traj[i].sup_V;
  }
  const double scale = mean_of(v0s);

  std::vector<CheckResult> subs;
  {
    const double m = mean_of(sup2);
    const double se = standard_error(sup2);
    const double bound = 4.0 * scale + 3.0 * se;
    subs.push_back(leaf_bound(
        "sup_square_mean", m, bound, long(N),
        "mean of sup_t (H_t - H_0)^2 against 4 V0 (+3 SE), V0 scale " +
            fmt(scale)));
  }
  for (double lam : lambdas) {
    const double thr = lam * lam * scale;
    double hits = 0.0;
    for (double s : sup2)
      if (s > thr) hits += 1.0;
    const double freq = hits / double(N);
    const double target = 1.0 / (lam * lam);
    const double band = 3.0 * std::sqrt(freq * (1.0 - freq) / double(N));
    subs.push_back(leaf_bound(
        "sup_energy_exceedance_lambda_" + fmt(lam), freq, target + band,
        long(N),
        "freq of sup (H - H_0)^2 > lambda^2 V0 vs 1/lambda^2 (+3 binom SE)"));
  }
  for (double lam : lambdas) {
    const double thr = lam * lam * scale;
    double hits = 0.0;
    for (double s : supv)
      if (s > thr) hits += 1.0;
    const double freq = hits / double(N);
    const double target = 1.0 / (lam * lam);
    const double band = 3.0 * std::sqrt(freq * (1.0 - freq) / double(N));
    subs.push_back(leaf_bound(
        "sup_variance_exceedance_lambda_" + fmt(lam), freq, target + band,
        long(N),
        "freq of sup V > lambda^2 V0 vs 1/lambda^2 (+3 binom SE)"));
  }
  return aggregate("doob_bounds", std::move(subs), long(N));
}

// ---- conditional variance ------------------------------------------------

CheckResult check_conditional_variance(const EnsembleSeries& series) {
  require_min_size(series, "check_conditional_variance");
  const std::size_t K = series.k();
  const std::size_t N = std::size_t(series.n());
  const double tau = series.grid.tau_r;

  // Evaluate the binned form at the grid points nearest tau_R/2, tau_R and
  // 2 tau_R.
  std::vector<std::size_t> ks;
  for (double target : {0.5 * tau, tau, 2.0 * tau}) {
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      const double d = std::abs(series.times[k] - target);
      if (d < bd) {
        bd = d;
        best = k;
      }
    }
    if (best > 0 && (ks.empty() || ks.back() != best)) ks.push_back(best);
  }
  if (ks.empty()) ks.push_back(K > 1 ? K / 2 : 0);

  std::vector<double> hinf(N);
  long unterminated = 0;
  for (std::size_t i = 0; i < N; ++i) {
    hinf[i] = terminal_energy(series, series.traj[i]);
    if (!series.traj[i].terminal_level) ++unterminated;
  }

  // The discrepancy d_i = (H_inf - H_t)^2 - V_t has conditional mean zero
  // given the state at t, and the same law fixes its full conditional
  // distribution: H_inf = E_n with the recorded level weight p_n, so
  // d_i takes the value (E_n - H)^2 - V with probability p_n. From those
  // weights we get the exact null variance, third moment and support bound
  // of every tested average. Where the implied skewness is small the usual
  // 3-sigma normal band applies; where it is large (H near an eigenvalue,
  // or only a handful of unfrozen paths left) the normal quantile is
  // meaningless at any sample size, and a Bernstein tail band at the same
  // confidence level replaces it -- wider, but valid.
  const Rvec& evals = series.level_eigenvalues;
  const std::size_t D = std::size_t(evals.size());
  struct NullMoments {
    double var = 0.0;
    double mu3 = 0.0;
    double dev = 0.0;  // support bound max_n |a_n - sum_m p_m a_m|
  };
  auto null_moments = [&](std::size_t i, std::size_t k) {
    const auto& tr = series.traj[i];
    const double h = tr.H[k];
    double mean_a = 0.0;
    for (std::size_t n = 0; n < D; ++n) {
      const double e = evals[Eigen::Index(n)] - h;
      mean_a += tr.P[k * D + n] * e * e;
    }
    NullMoments m;
    for (std::size_t n = 0; n < D; ++n) {
      const double p = tr.P[k * D + n];
      if (p <= 0.0) continue;
      const double e = evals[Eigen::Index(n)] - h;
      const double c = e * e - mean_a;
      m.var += p * c * c;
      m.mu3 += p * c * c * c;
      m.dev = std::max(m.dev, std::abs(c));
    }
    return m;
  };
  // 3-sigma two-sided equivalent confidence: delta = 0.0027, L = ln(2/delta)
  constexpr double kLogTail = 6.6077;
  constexpr double kMaxSkew = 0.25;
  struct Band {
    double tol = 0.0;
    bool normal = true;
    double skew = 0.0;
  };
  auto null_band = [&](const NullMoments& sum, std::size_t n) {
    Band b;
    b.skew = sum.var > 0.0
                 ? std::abs(sum.mu3) / std::pow(sum.var, 1.5)
                 : (sum.dev > 0.0 ? std::numeric_limits<double>::infinity()
                                  : 0.0);
    if (b.skew <= kMaxSkew) {
      b.tol = 3.0 * std::sqrt(sum.var) / double(n);
      return b;
    }
    b.normal = false;
    const double a = sum.dev * kLogTail / 3.0;
    b.tol = (a + std::sqrt(a * a + 2.0 * kLogTail * sum.var)) / double(n);
    return b;
  };

  std::vector<CheckResult> subs;
  // unconditional form: E[(H_inf - H_t)^2] = E[V_t] at every grid point
  {
    double worst = -std::numeric_limits<double>::infinity();
    double worst_t = 0.0;
    Band worst_band;
    for (std::size_t k = 0; k < K; ++k) {
      double m = 0.0;
      NullMoments sum;
      for (std::size_t i = 0; i < N; ++i) {
        const double dh = hinf[i] - series.traj[i].H[k];
        m += dh * dh - series.traj[i].V[k];
        const NullMoments nm = null_moments(i, k);
        sum.var += nm.var;
        sum.mu3 += nm.mu3;
        sum.dev = std::max(sum.dev, nm.dev);
      }
      m /= double(N);
      const Band band = null_band(sum, N);
      const double v = std::abs(m) - band.tol;
      if (v > worst) {
        worst = v;
        worst_t = series.times[k];
        worst_band = band;
      }
    }
    std::string note =
        "|mean (H_inf - H_t)^2 - V_t| minus the null band, worst at t = " +
        fmt(worst_t) +
        (worst_band.normal
             ? " (normal regime)"
             : " (tail regime, null skewness " + fmt(worst_band.skew) + ")");
    if (unterminated)
      note += "; " + std::to_string(unterminated) +
              " unterminated trajectories use their last recorded energy";
    subs.push_back(leaf_bound("unconditional_identity", worst, 0.0, long(N),
                              std::move(note)));
  }
  for (std::size_t k : ks) {
    std::vector<double> h(N);
    for (std::size_t i = 0; i < N; ++i) h[i] = series.traj[i].H[k];
    // decile edges of H_t, deduplicated (collapse makes H discrete)
    std::vector<double> sorted = h;
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> edges;
    for (int q = 1; q < 10; ++q) {
      const double e = sorted[std::min(N - 1, std::size_t(q) * N / 10)];
      if (edges.empty() || e > edges.back()) edges.push_back(e);
    }
    const std::size_t nbins = edges.size() + 1;
    std::vector<std::vector<double>> bin_d(nbins);
    std::vector<NullMoments> bin_sum(nbins);
    for (std::size_t i = 0; i < N; ++i) {
      const std::size_t b = std::size_t(
          std::upper_bound(edges.begin(), edges.end(), h[i]) - edges.begin());
      bin_d[b].push_back((hinf[i] - h[i]) * (hinf[i] - h[i]) -
                         series.traj[i].V[k]);
      const NullMoments nm = null_moments(i, k);
      bin_sum[b].var += nm.var;
      bin_sum[b].mu3 += nm.mu3;
      bin_sum[b].dev = std::max(bin_sum[b].dev, nm.dev);
    }
    double worst = -std::numeric_limits<double>::infinity();
    long used = 0, skipped = 0, tail_bins = 0;
    for (std::size_t b = 0; b < nbins; ++b) {
      if (bin_d[b].size() < 30) {
        if (!bin_d[b].empty()) ++skipped;
        continue;
      }
      ++used;
      const Band band = null_band(bin_sum[b], bin_d[b].size());
      if (!band.normal) ++tail_bins;
      worst = std::max(worst, std::abs(mean_of(bin_d[b])) - band.tol);
    }
    std::string note = std::to_string(used) + " bins of >= 30 used (" +
                       std::to_string(tail_bins) + " in the tail regime), " +
                       std::to_string(skipped) + " skipped";
    if (unterminated)
      note += "; " + std::to_string(unterminated) +
              " unterminated trajectories use their last recorded energy";
    if (used == 0) {
      subs.push_back(leaf_bound("bins_at_t_" + fmt(series.times[k]), 0.0, 0.0,
                                long(N), note + " (vacuous)"));
    } else {
      subs.push_back(leaf_bound(
          "bins_at_t_" + fmt(series.times[k]), worst, 0.0, long(N),
          "max over bins of |mean (H_inf - H_t)^2 - V_t| minus the null "
          "band; " +
              note));
    }
  }
  return aggregate("conditional_variance", std::move(subs), long(N));
}

// ---- projection confinement ----------------------------------------------

CheckResult check_luders_confinement(const EnsembleSeries& series,
                                     const SpectralDecomposition& dec,
                                     const StateVector& psi0,
                                     double fid_tol) {
  require_min_size(series, "check_luders_confinement");
  const std::size_t K = series.k();
  const std::size_t N = std::size_t(series.n());
  const auto& mon = series.monitored_levels;
  const std::size_t M = mon.size();

  std::vector<CheckResult> subs;
  // (a) every monitored complement expectation stays at numerical zero in
  // ensemble mean; 1e-12 absolute floor below which noise bands are moot.
  if (M == 0) {
    subs.push_back(leaf_bound("complement_mean", 0.0, 0.0, long(N),
                              "not applicable: no populated degenerate levels"));
  } else {
    double worst = -std::numeric_limits<double>::infinity();
    double worst_t = 0.0;
    int worst_m = 0;
    double max_path = 0.0;
    std::vector<double> col(N);
    for (std::size_t m = 0; m < M; ++m) {
      for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t i = 0; i < N; ++i) {
          const double v = series.traj[i].Pi[k * M + m];
          col[i] = v;
          max_path = std::max(max_path, std::abs(v));
        }
        const double mu = mean_of(col);
        const double se = standard_error(col);
        const double v = std::abs(mu) - std::max(3.0 * se, 1e-12);
        if (v > worst) {
          worst = v;
          worst_t = series.times[k];
          worst_m = mon[m];
        }
      }
    }
    subs.push_back(leaf_bound(
        "complement_mean", worst, 0.0, long(N),
        "|mean| minus max(3 SE, 1e-12), worst for level " +
            std::to_string(worst_m) + " at t = " + fmt(worst_t) +
            "; max pathwise |value| " + fmt(max_path)));
  }

  // (b) terminal states match the projected initial state
  std::map<int, StateVector> targets;
  double max_deficit = 0.0;
  long terminated = 0;
  for (const auto& tr : series.traj) {
    if (!tr.terminal_level) continue;
    ++terminated;
    if (tr.terminal_state.size() == 0)
      throw validation_error(
          "check_luders_confinement: terminal states were not retained "
          "(enable keep_terminal_states)");
    const int lvl = *tr.terminal_level;
    auto it = targets.find(lvl);
    if (it == targets.end())
      it = targets.emplace(lvl, luders_state(psi0, dec, lvl)).first;
    const double f = fidelity(tr.terminal_state, it->second);
    max_deficit = std::max(max_deficit, 1.0 - f);
  }
  if (terminated == 0) {
    subs.push_back(leaf_bound("terminal_fidelity_deficit", 0.0, fid_tol, 0,
                              "not applicable: no terminated trajectories"));
  } else {
    subs.push_back(leaf_bound(
        "terminal_fidelity_deficit", max_deficit, fid_tol, terminated,
        "max over terminated trajectories of 1 - fidelity to the projected "
        "initial state"));
  }

  // (c) compensated variance: V_t + Z_t with Z_t = sigma^2 int V^2 du has no
  // ensemble drift (runs regardless of degeneracy).
  {
    double worst = -std::numeric_limits<double>::infinity();
    double worst_t = 0.0;
    std::vector<double> d(N);
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t i = 0; i < N; ++i) {
        const auto& tr = series.traj[i];
        d[i] = tr.V[k] + tr.Z[k] - tr.V0;
      }
      const double m = mean_of(d);
      const double se = standard_error(d);
      const double v = std::abs(m) - 3.0 * se;
      if (v > worst) {
        worst = v;
        worst_t = series.times[k];
      }
    }
    subs.push_back(leaf_bound(
        "compensated_variance_drift", worst, 0.0, long(N),
        "|mean (V_t + Z_t - V_0)| minus 3 SE, worst at t = " + fmt(worst_t)));
  }
  return aggregate("luders_confinement", std::move(subs), long(N));
}

// ---- mixed-state reduction -----------------------------------------------

CheckResult check_mixed_state_luders(const EnsembleSeries& series,
                                     const SpectralDecomposition& dec,
                                     const DensityMatrix& rho0) {
  require_min_size(series, "check_mixed_state_luders");
  const auto K = dec.level_count();
  const std::size_t N = std::size_t(series.n());

  // One pass: per-outcome counts and summed terminal outer products.  A
  // trajectory that never crossed the collapse threshold has no outcome; it
  // still contributes its horizon-end state to the ensemble density but is
  // excluded (and reported) from the per-outcome tallies.
  long unterminated = 0;
  std::vector<long> counts(std::size_t(K), 0);
  std::vector<DensityMatrix> sums(std::size_t(K),
                                  DensityMatrix::Zero(rho0.rows(), rho0.cols()));
  DensityMatrix ens_sum = DensityMatrix::Zero(rho0.rows(), rho0.cols());
  for (const auto& tr : series.traj) {
    if (tr.terminal_state.size() == 0)
      throw validation_error(
          "check_mixed_state_luders: terminal states were not retained "
          "(enable keep_terminal_states)");
    const DensityMatrix outer = tr.terminal_state * tr.terminal_state.adjoint();
    ens_sum += outer;
    if (!tr.terminal_level) {
      ++unterminated;
      continue;
    }
    const auto n = std::size_t(*tr.terminal_level);
    ++counts[n];
    sums[n] += outer;
  }
  const long n_term = long(N) - unterminated;
  if (n_term < 30)
    throw validation_error("check_mixed_state_luders: " +
                           list_unterminated(series));

  std::vector<CheckResult> subs;
  // (a) ensemble terminal density against the sum of projected blocks
  {
    DensityMatrix target = DensityMatrix::Zero(rho0.rows(), rho0.cols());
    for (Eigen::Index n = 0; n < K; ++n)
      target += dec.levels[std::size_t(n)].projector * rho0 *
                dec.levels[std::size_t(n)].projector;
    DensityMatrix emp = ens_sum / double(N);
    subs.push_back(leaf_bound(
        "ensemble_terminal_density", max_abs(Cmat(emp - target)),
        4.0 / std::sqrt(double(N)), long(N),
        "max element difference to the sum of projected blocks"));
  }
  // (b) per-outcome conditional densities (outcomes under 30 samples are
  // reported but not judged), (c) outcome frequencies
  for (Eigen::Index n = 0; n < K; ++n) {
    const auto ns = std::size_t(n);
    const Cmat block =
        dec.levels[ns].projector * rho0 * dec.levels[ns].projector;
    const double pi = block.trace().real();
    const double freq = double(counts[ns]) / double(n_term);
    const double band =
        3.0 * std::sqrt(std::max(0.0, pi * (1.0 - pi)) / double(n_term));
    subs.push_back(leaf_equals("outcome_" + std::to_string(n) + "_frequency",
                               freq, pi, band, n_term,
                               "count " + std::to_string(counts[ns])));
    if (counts[ns] < 30) {
      if (counts[ns] > 0)
        subs.push_back(leaf_bound(
            "outcome_" + std::to_string(n) + "_conditional_density", 0.0, 0.0,
            counts[ns],
            "skipped: fewer than 30 samples for this outcome"));
      continue;
    }
    const DensityMatrix emp = sums[ns] / double(counts[ns]);
    const DensityMatrix target = block / pi;
    subs.push_back(leaf_bound(
        "outcome_" + std::to_string(n) + "_conditional_density",
        max_abs(Cmat(emp - target)), 4.0 / std::sqrt(double(counts[ns])),
        counts[ns],
        "max element difference to the projected renormalised block"));
  }
  std::string note;
  if (unterminated > 0)
    note = std::to_string(unterminated) +
           " unterminated trajectories contribute to the ensemble density "
           "but are excluded from outcome tallies";
  return aggregate("mixed_state_luders", std::move(subs), long(N), note);
}

CheckResult run_mixed_state_pipeline(const InitialCondition& init,
                                     const SpectralDecomposition& dec,
                                     const SimConfig& cfg, long n_traj,
                                     const EnsembleOptions& opts) {
  EnsembleOptions o = opts;
  o.keep_terminal_states = true;
  const auto series = run_ensemble(cfg, init, dec, n_traj, o);
  return check_mixed_state_luders(series, dec, init.density());
}

// ---- diagnostics ---------------------------------------------------------

nlohmann::ordered_json variance_diagnostics(const EnsembleSeries& series) {
  const std::size_t K = series.k();
  const std::size_t N = std::size_t(series.n());
  const double sigma = series.config.sigma;
  const double v0 = series.v0_ensemble;

  std::vector<double> eta(K, 0.0), xi(K, 0.0), product(K, 0.0);
  std::vector<double> col(N);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < N; ++i) col[i] = series.traj[i].V[k];
    const double m = mean_of(col);
    const double var = sample_variance(col);
    eta[k] = m * m > 1e-300 ? var / (m * m) : 0.0;
    if (k > 0) {
      const double dt = series.times[k] - series.times[k - 1];
      xi[k] = xi[k - 1] + 0.5 * (eta[k] + eta[k - 1]) * dt;
    }
    if (v0 > 0.0)
      product[k] = m *
                   (1.0 + sigma * sigma * v0 * (series.times[k] + xi[k])) /
                   v0;
  }
  nlohmann::ordered_json j;
  j["times"] = series.times;
  j["eta"] = eta;
  j["xi"] = xi;
  j["decay_product"] = product;
  return j;
}

// ---- rendering -----------------------------------------------------------

namespace {
void render_one(std::ostringstream& os, const CheckResult& c, int depth) {
  for (int i = 0; i < depth; ++i) os << "  ";
  os << (c.passed ? "[PASS] " : "[FAIL] ") << c.name;
  os << "  " << (c.kind == CheckKind::equals ? "=" : "<=") << " "
     << fmt(c.target);
  if (c.kind == CheckKind::equals) os << " (tol " << fmt(c.tolerance) << ")";
  os << ", got " << fmt(c.statistic) << ", n = " << c.n_samples;
  if (c.p_value) os << ", p = " << fmt(*c.p_value);
  os << "\n";
  if (!c.detail.empty()) {
    for (int i = 0; i < depth + 1; ++i) os << "  ";
    os << "- " << c.detail << "\n";
  }
  for (const auto& s : c.subchecks) render_one(os, s, depth + 1);
}
}  // namespace

std::string render_table(const std::vector<CheckResult>& checks) {
  std::ostringstream os;
  for (const auto& c : checks) render_one(os, c, 0);
  return os.str();
}

bool all_passed(const std::vector<CheckResult>& checks) {
  for (const auto& c : checks) {
    if (!c.passed) return false;
    if (!all_passed(c.subchecks)) return false;
  }
  return true;
}

}  // namespace qsr
