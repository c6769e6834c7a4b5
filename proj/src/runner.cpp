#include "qsr/runner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>

#include <Eigen/Dense>

#include "qsr/girsanov.hpp"
#include "qsr/lindblad.hpp"

namespace qsr {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

constexpr const char* kToolVersion = "0.1.0";

std::string g17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return std::string(buf);
}

std::string gshort(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", x);
  return std::string(buf);
}

std::string fixture_source(const std::string& name_or_path) {
  const auto names = builtin_names();
  return std::find(names.begin(), names.end(), name_or_path) != names.end()
             ? std::string("builtin")
             : name_or_path;
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw config_error("cannot write " + path.string());
  out << content;
  if (!out) throw config_error("failed writing " + path.string());
}

fs::path prepare_out_dir(const RunConfig& rc) {
  fs::path dir(rc.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec)
    throw config_error("cannot create output directory " + dir.string() +
                       ": " + ec.message());
  return dir;
}

ordered_json matrix_pairs(const Cmat& m) {
  auto a = ordered_json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      a.push_back(ordered_json::array({m(r, c).real(), m(r, c).imag()}));
  return a;
}

/// Reduction timescale with the same zero-variance fallback resolve_grid
/// uses, so every mode agrees on what "t in units of tau_R" means.
double tau_scale(double sigma, double v0, double range) {
  double v = v0;
  if (v <= 0.0) v = range > 0.0 ? 0.25 * range * range : 1.0;
  return 1.0 / (sigma * sigma * v);
}

ordered_json make_manifest(const RunConfig& rc, const Fixture& fx,
                           RunMode mode, const SimConfig& sim,
                           const TimeGrid* grid) {
  ordered_json m;
  ordered_json tool;
  tool["name"] = "qsr";
  tool["version"] = kToolVersion;
  tool["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." +
                  std::to_string(EIGEN_MAJOR_VERSION) + "." +
                  std::to_string(EIGEN_MINOR_VERSION);
  m["tool"] = std::move(tool);
  m["mode"] = mode_name(mode);
  ordered_json f;
  f["name"] = fx.name;
  f["source"] = fixture_source(rc.fixture);
  f["hash"] = hash_hex(fx.hash);
  m["fixture"] = std::move(f);
  m["seed"] = rc.seed;
  m["n_trajectories"] = rc.n_trajectories;
  ordered_json s;
  s["sigma"] = sim.sigma;
  s["dt"] = grid ? grid->dt : sim.dt;
  s["horizon_tau"] = sim.horizon_tau;
  s["collapse_threshold"] = sim.collapse_threshold;
  s["record_stride"] = grid ? grid->stride : sim.record_stride;
  if (grid) {
    s["tau_r"] = grid->tau_r;
    s["n_steps"] = grid->n_steps;
  }
  m["sim"] = std::move(s);
  m["lambdas"] = rc.lambdas;
  m["checks"] = rc.checks;
  m["eval_times_tau"] = rc.eval_times_tau;
  m["csv_max_traj"] = rc.csv_max_traj;
  // The hash covers everything above (worker count and output path are
  // execution details and never enter artifacts).
  m["config_hash"] = hash_hex(fnv1a64(m.dump()));
  return m;
}

ordered_json report_envelope(const ordered_json& manifest) {
  ordered_json r;
  r["config_hash"] = manifest.at("config_hash");
  r["seed"] = manifest.at("seed");
  r["fixture_hash"] = manifest.at("fixture").at("hash");
  r["mode"] = manifest.at("mode");
  return r;
}

void write_manifest(const fs::path& dir, const ordered_json& manifest) {
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

void write_report(const fs::path& dir, const ordered_json& report) {
  write_text(dir / "report.json", report.dump(2) + "\n");
}

ordered_json terminal_summary(const EnsembleSeries& series) {
  ordered_json s;
  s["n_trajectories"] = series.n();
  const auto open = series.unterminated();
  s["unterminated"] = open.size();
  std::vector<long> counts(series.level_eigenvalues.size(), 0);
  double t_sum = 0.0, t_max = 0.0;
  long terminated = 0;
  double max_norm = 0.0;
  for (const auto& tr : series.traj) {
    max_norm = std::max(max_norm, tr.max_norm_err);
    if (!tr.terminal_level) continue;
    ++terminated;
    ++counts[std::size_t(*tr.terminal_level)];
    t_sum += *tr.terminal_time;
    t_max = std::max(t_max, *tr.terminal_time);
  }
  auto levels = ordered_json::array();
  for (std::size_t k = 0; k < counts.size(); ++k) {
    ordered_json l;
    l["level"] = k;
    l["eigenvalue"] = series.level_eigenvalues[Eigen::Index(k)];
    l["count"] = counts[k];
    levels.push_back(std::move(l));
  }
  s["terminal_counts"] = std::move(levels);
  if (terminated) {
    s["mean_terminal_time"] = t_sum / double(terminated);
    s["max_terminal_time"] = t_max;
  }
  s["max_norm_err"] = max_norm;
  return s;
}

// ---- CSV writers ---------------------------------------------------------

std::string csv_header(int dimension, const std::vector<int>& monitored,
                       bool girsanov_columns) {
  std::string h = "traj_id,t,H,V,beta,norm_err";
  for (int d = 1; d <= dimension; ++d) h += ",P_" + std::to_string(d);
  for (int lvl : monitored) h += ",Pi_" + std::to_string(lvl + 1);
  if (girsanov_columns) h += ",wstar,lambda_star";
  return h + "\n";
}

void write_trajectories_csv(const fs::path& dir, const EnsembleSeries& series,
                            long cap) {
  // P columns are indexed by eigenlevel (D levels), not raw dimension.
  const int D = int(series.level_eigenvalues.size());
  const std::size_t M = series.monitored_levels.size();
  std::string out = csv_header(D, series.monitored_levels, false);
  const std::size_t n_csv = std::min<std::size_t>(series.n(), std::size_t(cap));
  for (std::size_t i = 0; i < n_csv; ++i) {
    const auto& tr = series.traj[i];
    for (std::size_t k = 0; k < series.k(); ++k) {
      out += std::to_string(i);
      out += ',' + g17(series.times[k]);
      out += ',' + g17(tr.H[k]);
      out += ',' + g17(tr.V[k]);
      out += ',' + g17(tr.beta[k]);
      out += ',' + g17(tr.norm_err[k]);
      for (int d = 0; d < D; ++d) out += ',' + g17(tr.P[k * std::size_t(D) + std::size_t(d)]);
      for (std::size_t m = 0; m < M; ++m) out += ',' + g17(tr.Pi[k * M + m]);
      out += '\n';
    }
  }
  write_text(dir / "trajectories.csv", out);
}

// ---- mode: sde -----------------------------------------------------------

int run_sde(const RunConfig& rc, const Fixture& fx) {
  const SimConfig sim = resolve_sim(rc, fx);
  EnsembleOptions opts;
  opts.workers = rc.workers;
  const EnsembleSeries series =
      run_ensemble(sim, fx.init, fx.dec, rc.n_trajectories, opts);

  const fs::path dir = prepare_out_dir(rc);
  const ordered_json manifest =
      make_manifest(rc, fx, RunMode::sde, sim, &series.grid);
  write_manifest(dir, manifest);
  write_trajectories_csv(dir, series, rc.csv_max_traj);

  ordered_json report = report_envelope(manifest);
  report["summary"] = terminal_summary(series);
  write_report(dir, report);

  const auto open = series.unterminated();
  std::cout << "sde: " << series.n() << " trajectories, " << open.size()
            << " unterminated, artifacts in " << dir.string() << "\n";
  return 0;
}

// ---- modes: girsanov -----------------------------------------------------

struct ScalarEnsemble {
  std::vector<GirsanovPath> paths;  // index-ordered
  std::vector<Rvec> pis;            // per-path implied initial weights
};

/// Scalar paths i = index_offset .. index_offset + n - 1 under the same
/// substream discipline as the full integrator (member draw first).
ScalarEnsemble run_scalar_ensemble(const SimConfig& sim,
                                   const InitialCondition& init,
                                   const SpectralDecomposition& dec, long n,
                                   std::uint64_t index_offset) {
  const Rvec evals = dec.eigenvalues();
  ScalarEnsemble out;
  out.paths.reserve(std::size_t(n));
  out.pis.reserve(std::size_t(n));
  for (long i = 0; i < n; ++i) {
    philox4x64 stream(child_seed(sim.seed, index_offset + std::uint64_t(i)));
    const int member = sample_member(init, stream);
    const Rvec pi = level_probabilities(
        init.components[std::size_t(member)].second, dec);
    out.paths.push_back(simulate_wstar_physical(pi, evals, sim, stream));
    out.pis.push_back(pi);
  }
  return out;
}

int run_girsanov_scalar(const RunConfig& rc, const Fixture& fx) {
  const SimConfig sim = resolve_sim(rc, fx);
  const auto [h0, v0] = fx.init.ensemble_moments(fx.dec);
  const TimeGrid grid = resolve_grid(sim, v0, fx.dec.spectral_range);
  const ScalarEnsemble ens = run_scalar_ensemble(sim, fx.init, fx.dec,
                                                 rc.n_trajectories, 0);

  const fs::path dir = prepare_out_dir(rc);
  const ordered_json manifest =
      make_manifest(rc, fx, RunMode::girsanov_scalar, sim, &grid);
  write_manifest(dir, manifest);

  // CSV: implied-distribution instrumentation plus the wstar/lambda_star pair
  const Rvec evals = fx.dec.eigenvalues();
  const int D = int(evals.size());
  std::string csv = csv_header(D, {}, true);
  const auto n_csv =
      std::min<std::size_t>(ens.paths.size(), std::size_t(rc.csv_max_traj));
  for (std::size_t i = 0; i < n_csv; ++i) {
    const auto& p = ens.paths[i];
    for (std::size_t k = 0; k < p.times.size(); ++k) {
      const Rvec probs = implied_probabilities(ens.pis[i], evals, sim.sigma,
                                               p.wstar[k], p.times[k]);
      const double h = p.H[k];
      double m2 = 0.0, m3 = 0.0;
      for (int d = 0; d < D; ++d) {
        const double e = evals[d] - h;
        m2 += probs[d] * e * e;
        m3 += probs[d] * e * e * e;
      }
      csv += std::to_string(i);
      csv += ',' + g17(p.times[k]);
      csv += ',' + g17(h);
      csv += ',' + g17(m2);
      csv += ',' + g17(m3);
      csv += ",0";  // the scalar representation carries no norm defect
      for (int d = 0; d < D; ++d) csv += ',' + g17(probs[d]);
      csv += ',' + g17(p.wstar[k]);
      csv += ',' + g17(p.lambda_star[k]);
      csv += '\n';
    }
  }
  write_text(dir / "trajectories.csv", csv);

  ordered_json report = report_envelope(manifest);
  ordered_json summary;
  summary["n_trajectories"] = ens.paths.size();
  std::vector<long> counts(std::size_t(D), 0);
  long open = 0;
  std::vector<double> weights;
  weights.reserve(ens.paths.size());
  for (const auto& p : ens.paths) {
    if (p.terminal_level)
      ++counts[std::size_t(*p.terminal_level)];
    else
      ++open;
    weights.push_back(p.weight);
  }
  summary["unterminated"] = open;
  auto levels = ordered_json::array();
  for (int d = 0; d < D; ++d) {
    ordered_json l;
    l["level"] = d;
    l["eigenvalue"] = evals[d];
    l["count"] = counts[std::size_t(d)];
    levels.push_back(std::move(l));
  }
  summary["terminal_counts"] = std::move(levels);
  double wsum = 0.0, w2sum = 0.0;
  for (double w : weights) {
    wsum += w;
    w2sum += w * w;
  }
  summary["mean_weight"] = wsum / double(weights.size());
  summary["ess"] = w2sum > 0.0 ? wsum * wsum / w2sum : 0.0;
  report["summary"] = std::move(summary);
  report["grid"] = {{"dt", grid.dt}, {"tau_r", grid.tau_r}};
  write_report(dir, report);

  std::cout << "girsanov-scalar: " << ens.paths.size() << " paths, " << open
            << " unterminated, artifacts in " << dir.string() << "\n";
  return 0;
}

/// E^Q[Lambda*^2] - 1 over the member mixture: Sigma_m w_m Sigma_{n,p}
/// pi^m_n pi^m_p e^{sigma^2 E_n E_p t}. Exponents are capped so pathological
/// horizons degrade to an unbounded (truth-preserving) tolerance instead of
/// overflowing.
double analytic_weight_variance(const std::vector<Rvec>& pis,
                                const std::vector<double>& member_weights,
                                const Rvec& evals, double sigma, double t) {
  double second = 0.0;
  for (std::size_t m = 0; m < pis.size(); ++m) {
    double s = 0.0;
    for (Eigen::Index n = 0; n < evals.size(); ++n)
      for (Eigen::Index p = 0; p < evals.size(); ++p)
        s += pis[m][n] * pis[m][p] *
             std::exp(std::min(sigma * sigma * evals[n] * evals[p] * t, 700.0));
    second += member_weights[m] * s;
  }
  return std::max(second - 1.0, 0.0);
}

/// Delta-method variance of the self-normalised energy estimator:
/// E^Q[(Lambda* (h - H0))^2] = Sigma_m w_m Sigma_{n,p} pi^m_n pi^m_p
/// (E_n - H0)(E_p - H0) e^{sigma^2 E_n E_p t}.
double analytic_energy_variance(const std::vector<Rvec>& pis,
                                const std::vector<double>& member_weights,
                                const Rvec& evals, double sigma, double t,
                                double h0) {
  double acc = 0.0;
  for (std::size_t m = 0; m < pis.size(); ++m) {
    double s = 0.0;
    for (Eigen::Index n = 0; n < evals.size(); ++n)
      for (Eigen::Index p = 0; p < evals.size(); ++p)
        s += pis[m][n] * pis[m][p] * (evals[n] - h0) * (evals[p] - h0) *
             std::exp(std::min(sigma * sigma * evals[n] * evals[p] * t, 700.0));
    acc += member_weights[m] * s;
  }
  return std::max(acc, 0.0);
}

int run_girsanov_weighted(const RunConfig& rc, const Fixture& fx) {
  const SimConfig sim = resolve_sim(rc, fx);
  const auto [h0, v0] = fx.init.ensemble_moments(fx.dec);
  const double tau = tau_scale(sim.sigma, v0, fx.dec.spectral_range);
  const Rvec evals = fx.dec.eigenvalues();
  const int D = int(evals.size());
  const DensityMatrix rho0 = fx.init.density();
  std::vector<Rvec> member_pis;
  std::vector<double> member_weights;
  for (const auto& [w, psi] : fx.init.components) {
    member_weights.push_back(w);
    member_pis.push_back(level_probabilities(psi, fx.dec));
  }

  const fs::path dir = prepare_out_dir(rc);
  const ordered_json manifest =
      make_manifest(rc, fx, RunMode::girsanov_weighted, sim, nullptr);
  write_manifest(dir, manifest);

  // One substream, consumed serially over (eval time, draw): reproducible
  // and worker-free by construction.
  philox4x64 stream(child_seed(sim.seed, 0));
  std::vector<CheckResult> checks;
  auto estimates = ordered_json::array();
  std::string csv = csv_header(D, {}, true);

  for (std::size_t ti = 0; ti < rc.eval_times_tau.size(); ++ti) {
    const double t = rc.eval_times_tau[ti] * tau;
    std::vector<double> values, weights;
    values.reserve(std::size_t(rc.n_trajectories));
    weights.reserve(std::size_t(rc.n_trajectories));
    long written = 0;
    for (long i = 0; i < rc.n_trajectories; ++i) {
      const int member = sample_member(fx.init, stream);
      const Rvec& pi = member_pis[std::size_t(member)];
      const double wstar = stream.gaussian() * std::sqrt(std::max(t, 0.0));
      const double lam = lambda_star_of_wstar(pi, evals, sim.sigma, wstar, t);
      const double h = h_of_wstar(pi, evals, sim.sigma, wstar, t);
      values.push_back(h);
      weights.push_back(lam);
      if (written < rc.csv_max_traj) {
        const Rvec probs =
            implied_probabilities(pi, evals, sim.sigma, wstar, t);
        double m2 = 0.0, m3 = 0.0;
        for (int d = 0; d < D; ++d) {
          const double e = evals[d] - h;
          m2 += probs[d] * e * e;
          m3 += probs[d] * e * e * e;
        }
        csv += std::to_string(i);
        csv += ',' + g17(t);
        csv += ',' + g17(h);
        csv += ',' + g17(m2);
        csv += ',' + g17(m3);
        csv += ",0";
        for (int d = 0; d < D; ++d) csv += ',' + g17(probs[d]);
        csv += ',' + g17(wstar);
        csv += ',' + g17(lam);
        csv += '\n';
        ++written;
      }
    }
    // E under the transformed measure of the density Lambda* is one.
    // The weight has closed-form Q-variance, so the band uses the exact
    // standard error; the empirical (tail-truncated) one is reported
    // alongside for diagnosis.
    const std::size_t nw = weights.size();
    double lmean = 0.0, wmax = 0.0;
    for (double w : weights) {
      lmean += w;
      wmax = std::max(wmax, w);
    }
    lmean /= double(nw);
    double lvar = 0.0;
    for (double w : weights) lvar += (w - lmean) * (w - lmean);
    const double lse_sample =
        nw > 1 ? std::sqrt(lvar / double(nw - 1) / double(nw)) : 0.0;
    const double lse_exact = std::sqrt(
        analytic_weight_variance(member_pis, member_weights, evals, sim.sigma,
                                 t) /
        double(nw));
    const std::string suffix = "_tau_" + gshort(rc.eval_times_tau[ti]);
    checks.push_back(leaf_equals(
        "density_mean" + suffix, lmean, 1.0, 3.0 * lse_exact,
        rc.n_trajectories,
        "exact se = " + gshort(lse_exact) + ", sample se = " +
            gshort(lse_sample) + ", max weight = " + gshort(wmax) +
            ", t = " + g17(t)));
    // importance-weighted physical mean of H_t returns the initial mean;
    // same treatment: exact delta-method standard error for the band.
    const WeightedMean wm = weighted_expectation(values, weights);
    const double ese = std::sqrt(
        analytic_energy_variance(member_pis, member_weights, evals, sim.sigma,
                                 t, h0) /
        double(nw));
    checks.push_back(leaf_equals(
        "weighted_energy_mean" + suffix, wm.mean, h0, 3.0 * ese,
        rc.n_trajectories,
        "self-normalised estimate, exact se = " + gshort(ese) +
            ", sample se = " + gshort(wm.std_error) + ", ess = " +
            gshort(wm.ess) +
            (wm.degenerate ? " (degenerate: unreliable at this horizon)"
                           : "")));
    // deterministic cross-check of the same expectation
    const cplx exact =
        ensemble_average_observable(fx.observable, rho0, fx.dec, sim.sigma, t);
    const DensityMatrix rho_t = rho_closed_form(rho0, fx.dec, sim.sigma, t);
    const double lind = (fx.observable * rho_t).trace().real();
    checks.push_back(leaf_equals("exact_mean_consistency" + suffix,
                                 exact.real(), lind, 1e-12, 0,
                                 "spectral-sum average vs trace against the "
                                 "dephasing solution"));

    ordered_json e;
    e["t_tau"] = rc.eval_times_tau[ti];
    e["t"] = t;
    e["density_mean"] = lmean;
    e["density_se_exact"] = lse_exact;
    e["density_se_sample"] = lse_sample;
    e["max_weight"] = wmax;
    e["weighted_energy"] = wm.mean;
    e["weighted_energy_se_exact"] = ese;
    e["weighted_energy_se_sample"] = wm.std_error;
    e["ess"] = wm.ess;
    e["degenerate"] = wm.degenerate;
    e["target_energy"] = h0;
    e["exact_mean"] = exact.real();
    e["dephasing_mean"] = lind;
    estimates.push_back(std::move(e));
  }
  write_text(dir / "trajectories.csv", csv);

  ordered_json report = report_envelope(manifest);
  report["tau_r"] = tau;
  report["estimates"] = std::move(estimates);
  auto jchecks = ordered_json::array();
  for (const auto& c : checks) jchecks.push_back(check_to_json(c));
  report["checks"] = std::move(jchecks);
  write_report(dir, report);

  std::cout << render_table(checks);
  const bool ok = all_passed(checks);
  std::cout << "girsanov-weighted: " << (ok ? "PASS" : "FAIL")
            << ", artifacts in " << dir.string() << "\n";
  return ok ? 0 : 1;
}

// ---- modes: lindblad -----------------------------------------------------

int run_lindblad(const RunConfig& rc, const Fixture& fx, bool closed) {
  const SimConfig sim = resolve_sim(rc, fx);
  const auto [h0, v0] = fx.init.ensemble_moments(fx.dec);
  const TimeGrid grid = resolve_grid(sim, v0, fx.dec.spectral_range);
  const DensityMatrix rho0 = fx.init.density();

  std::vector<double> times;
  std::vector<DensityMatrix> rhos;
  times.reserve(std::size_t(grid.n_records()));
  rhos.reserve(std::size_t(grid.n_records()));
  DensityMatrix current = rho0;
  for (long k = 0; k <= grid.n_steps; k += grid.stride) {
    const double t = double(k) * grid.dt;
    if (closed) {
      rhos.push_back(rho_closed_form(rho0, fx.dec, sim.sigma, t));
    } else {
      if (!times.empty())
        current = rho_integrate(current, fx.dec, sim.sigma, t - times.back());
      rhos.push_back(current);
    }
    times.push_back(t);
  }

  const fs::path dir = prepare_out_dir(rc);
  const RunMode mode = closed ? RunMode::lindblad_closed : RunMode::lindblad_ode;
  const ordered_json manifest = make_manifest(rc, fx, mode, sim, &grid);
  write_manifest(dir, manifest);

  // Plot-ready scalar series plus the upper-triangle elements.
  const int N = fx.dimension;
  std::string csv = "t,trace,purity,offdiag_max";
  for (int r = 0; r < N; ++r)
    for (int c = r; c < N; ++c)
      csv += ",rho_" + std::to_string(r) + "_" + std::to_string(c) + "_re" +
             ",rho_" + std::to_string(r) + "_" + std::to_string(c) + "_im";
  csv += "\n";
  double max_herm_defect = 0.0;
  for (std::size_t k = 0; k < times.size(); ++k) {
    const DensityMatrix& rho = rhos[k];
    const double trace = rho.trace().real();
    const double purity = (rho * rho).trace().real();
    double offdiag = 0.0;
    for (int r = 0; r < N; ++r)
      for (int c = 0; c < N; ++c)
        if (r != c) offdiag = std::max(offdiag, std::abs(rho(r, c)));
    max_herm_defect =
        std::max(max_herm_defect, max_abs(Cmat(rho - rho.adjoint())));
    csv += g17(times[k]);
    csv += ',' + g17(trace);
    csv += ',' + g17(purity);
    csv += ',' + g17(offdiag);
    for (int r = 0; r < N; ++r)
      for (int c = r; c < N; ++c) {
        csv += ',' + g17(rho(r, c).real());
        csv += ',' + g17(rho(r, c).imag());
      }
    csv += '\n';
  }
  write_text(dir / "trajectories.csv", csv);

  ordered_json report = report_envelope(manifest);
  report["times"] = times;
  auto dens = ordered_json::array();
  for (const auto& rho : rhos) dens.push_back(matrix_pairs(rho));
  report["densities"] = std::move(dens);
  ordered_json summary;
  const DensityMatrix& last = rhos.back();
  Eigen::SelfAdjointEigenSolver<Cmat> es(0.5 * (last + last.adjoint()));
  summary["final_trace_error"] = std::abs(last.trace().real() - 1.0);
  summary["final_purity"] = (last * last).trace().real();
  summary["final_min_eigenvalue"] = es.eigenvalues().minCoeff();
  summary["max_hermiticity_defect"] = max_herm_defect;
  report["summary"] = std::move(summary);
  write_report(dir, report);

  std::cout << mode_name(mode) << ": " << times.size()
            << " grid points, artifacts in " << dir.string() << "\n";
  return 0;
}

// ---- mode: verify-all ----------------------------------------------------

CheckResult guarded(const std::string& name,
                    const std::function<CheckResult()>& body) {
  try {
    return body();
  } catch (const validation_error& e) {
    CheckResult c;
    c.name = name;
    c.kind = CheckKind::upper_bound;
    c.statistic = 1.0;
    c.target = 0.0;
    c.n_samples = 0;
    c.passed = false;
    c.detail = std::string("error: ") + e.what();
    return c;
  }
}

int run_verify_all(const RunConfig& rc, const Fixture& fx) {
  const SimConfig sim = resolve_sim(rc, fx);
  EnsembleOptions opts;
  opts.workers = rc.workers;
  opts.keep_terminal_states = true;
  const EnsembleSeries series =
      run_ensemble(sim, fx.init, fx.dec, rc.n_trajectories, opts);

  const bool pure = fx.init.is_pure();
  std::vector<std::string> applicable = {"energy_martingale", "variance_laws",
                                         "doob_bounds",
                                         "conditional_variance"};
  if (pure) {
    applicable.insert(applicable.begin(), "born_frequencies");
    applicable.push_back("luders_confinement");
  } else {
    applicable.push_back("mixed_state_luders");
  }
  std::vector<std::string> selected = rc.checks.empty() ? applicable
                                                        : rc.checks;
  for (const auto& name : selected) {
    if (std::find(applicable.begin(), applicable.end(), name) ==
        applicable.end()) {
      std::string list;
      for (const auto& a : applicable) list += (list.empty() ? "" : ", ") + a;
      throw config_error("check '" + name +
                         "' is not applicable to this fixture (available: " +
                         list + ")");
    }
  }

  std::vector<CheckResult> checks;
  for (const auto& name : selected) {
    if (name == "born_frequencies") {
      checks.push_back(guarded(name, [&] {
        const Rvec pi =
            level_probabilities(fx.init.components.front().second, fx.dec);
        return check_born_frequencies(series, pi);
      }));
    } else if (name == "energy_martingale") {
      checks.push_back(guarded(name, [&] {
        return check_energy_martingale(series);
      }));
    } else if (name == "variance_laws") {
      checks.push_back(guarded(name, [&] { return check_variance_laws(series); }));
    } else if (name == "doob_bounds") {
      checks.push_back(guarded(name, [&] {
        return check_doob_bounds(series, rc.lambdas);
      }));
    } else if (name == "conditional_variance") {
      checks.push_back(guarded(name, [&] {
        return check_conditional_variance(series);
      }));
    } else if (name == "luders_confinement") {
      checks.push_back(guarded(name, [&] {
        return check_luders_confinement(series, fx.dec,
                                        fx.init.components.front().second);
      }));
    } else if (name == "mixed_state_luders") {
      checks.push_back(guarded(name, [&] {
        return check_mixed_state_luders(series, fx.dec, fx.init.density());
      }));
    }
  }

  const fs::path dir = prepare_out_dir(rc);
  const ordered_json manifest =
      make_manifest(rc, fx, RunMode::verify_all, sim, &series.grid);
  write_manifest(dir, manifest);
  write_trajectories_csv(dir, series, rc.csv_max_traj);

  ordered_json report = report_envelope(manifest);
  auto jchecks = ordered_json::array();
  for (const auto& c : checks) jchecks.push_back(check_to_json(c));
  report["checks"] = std::move(jchecks);
  report["diagnostics"] = variance_diagnostics(series);
  ordered_json summary = terminal_summary(series);
  std::size_t leaves = 0;
  std::function<void(const CheckResult&)> count = [&](const CheckResult& c) {
    if (c.subchecks.empty()) ++leaves;
    for (const auto& s : c.subchecks) count(s);
  };
  for (const auto& c : checks) count(c);
  summary["leaf_checks"] = leaves;
  summary["calibration_note"] =
      "every leaf is calibrated at >= 99.73% confidence per comparison "
      "(3-sigma or an equivalent tail bound); leaves that scan a time grid "
      "or bins take the worst case over many comparisons, so a fresh seed "
      "can produce an occasional marginal failure at the few-percent level "
      "per run even when every law holds. Rerun with another seed to "
      "separate calibration noise from a genuine violation.";
  report["summary"] = std::move(summary);
  write_report(dir, report);

  std::cout << render_table(checks);
  const bool ok = all_passed(checks);
  std::cout << "verify-all: " << (ok ? "PASS" : "FAIL") << " ("
            << checks.size() << " checks), artifacts in " << dir.string()
            << "\n";
  return ok ? 0 : 1;
}

// ---- compare -------------------------------------------------------------

CheckResult compare_sde_scalar(const RunConfig& rc, const Fixture& fx) {
  const SimConfig sim = resolve_sim(rc, fx);
  EnsembleOptions opts;
  opts.workers = rc.workers;
  const long n = rc.n_trajectories;
  if (n < 3)
    throw validation_error("law comparison needs at least 3 trajectories");
  const EnsembleSeries series = run_ensemble(sim, fx.init, fx.dec, n, opts);

  // full-SDE energies at the grid point nearest tau_R
  const double t_star = series.grid.tau_r;
  std::size_t kstar = 0;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < series.k(); ++k) {
    const double d = std::abs(series.times[k] - t_star);
    if (d < best) {
      best = d;
      kstar = k;
    }
  }
  std::vector<double> a(std::size_t(n), 0.0);
  for (std::size_t i = 0; i < std::size_t(n); ++i)
    a[i] = series.traj[i].H[kstar];

  // scalar paths on disjoint substreams, sampled at the same physical time
  const ScalarEnsemble scalar =
      run_scalar_ensemble(sim, fx.init, fx.dec, n, std::uint64_t(n));
  std::vector<double> b;
  b.reserve(std::size_t(n));
  for (const auto& p : scalar.paths) {
    std::size_t kb = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < p.times.size(); ++k) {
      const double d = std::abs(p.times[k] - t_star);
      if (d < bd) {
        bd = d;
        kb = k;
      }
    }
    b.push_back(p.H[kb]);
  }

  std::vector<CheckResult> subs;
  const double d = ks_statistic(a, b);
  const double crit = ks_critical_value(0.01, a.size(), b.size());
  subs.push_back(leaf_bound(
      "ks_distance_at_tau", d, crit, long(a.size() + b.size()),
      "two-sample KS at t = " + g17(series.times[kstar]),
      ks_p_value(d, a.size(), b.size())));

  double ma = 0.0, mb = 0.0;
  for (double x : a) ma += x;
  for (double x : b) mb += x;
  ma /= double(a.size());
  mb /= double(b.size());
  double va = 0.0, vb = 0.0;
  for (double x : a) va += (x - ma) * (x - ma);
  for (double x : b) vb += (x - mb) * (x - mb);
  va /= double(a.size() - 1);
  vb /= double(b.size() - 1);
  const double se_mean =
      std::sqrt(va / double(a.size()) + vb / double(b.size()));
  subs.push_back(leaf_equals("mean_difference_at_tau", ma - mb, 0.0,
                             3.0 * se_mean, long(a.size() + b.size()),
                             "difference of sample means"));
  // variance agreement with jackknife errors on both sides
  auto jack = [](const std::vector<double>& x) {
    const std::size_t m = x.size();
    if (m < 3) return 0.0;
    double s1 = 0.0, s2 = 0.0;
    for (double v : x) {
      s1 += v;
      s2 += v * v;
    }
    std::vector<double> loo(m);
    for (std::size_t i = 0; i < m; ++i) {
      const double mu = (s1 - x[i]) / double(m - 1);
      const double ss = (s2 - x[i] * x[i]) - double(m - 1) * mu * mu;
      loo[i] = ss / double(m - 2);
    }
    double lm = 0.0;
    for (double v : loo) lm += v;
    lm /= double(m);
    double acc = 0.0;
    for (double v : loo) acc += (v - lm) * (v - lm);
    return std::sqrt(double(m - 1) / double(m) * acc);
  };
  const double se_var = std::sqrt(jack(a) * jack(a) + jack(b) * jack(b));
  subs.push_back(leaf_equals("variance_difference_at_tau", va - vb, 0.0,
                             3.0 * se_var, long(a.size() + b.size()),
                             "difference of sample variances"));
  return aggregate("sde_vs_girsanov_scalar", std::move(subs), n);
}

CheckResult compare_lindblad_pair(const RunConfig& rc, const Fixture& fx) {
  const SimConfig sim = resolve_sim(rc, fx);
  const auto [h0, v0] = fx.init.ensemble_moments(fx.dec);
  const TimeGrid grid = resolve_grid(sim, v0, fx.dec.spectral_range);
  const DensityMatrix rho0 = fx.init.density();

  double worst = 0.0, worst_t = 0.0;
  DensityMatrix current = rho0;
  double prev_t = 0.0;
  for (long k = 0; k <= grid.n_steps; k += grid.stride) {
    const double t = double(k) * grid.dt;
    if (k > 0) current = rho_integrate(current, fx.dec, sim.sigma, t - prev_t);
    prev_t = t;
    const DensityMatrix closed = rho_closed_form(rho0, fx.dec, sim.sigma, t);
    const double diff = max_abs(Cmat(current - closed));
    if (diff > worst) {
      worst = diff;
      worst_t = t;
    }
  }
  std::vector<CheckResult> subs;
  subs.push_back(leaf_bound("max_element_difference", worst, 1e-8,
                            long(grid.n_records()),
                            "worst grid point t = " + g17(worst_t)));
  return aggregate("lindblad_closed_vs_ode", std::move(subs),
                   long(grid.n_records()));
}

CheckResult compare_sde_lindblad(const RunConfig& rc, const Fixture& fx) {
  const SimConfig sim = resolve_sim(rc, fx);
  EnsembleOptions opts;
  opts.workers = rc.workers;
  opts.record_states = true;
  const EnsembleSeries series =
      run_ensemble(sim, fx.init, fx.dec, rc.n_trajectories, opts);
  const std::vector<DensityMatrix> emp =
      ensemble_density_from_trajectories(series);
  const DensityMatrix rho0 = fx.init.density();

  double worst = 0.0, worst_t = 0.0;
  for (std::size_t k = 0; k < series.k(); ++k) {
    const DensityMatrix closed =
        rho_closed_form(rho0, fx.dec, sim.sigma, series.times[k]);
    const double diff = max_abs(Cmat(emp[k] - closed));
    if (diff > worst) {
      worst = diff;
      worst_t = series.times[k];
    }
  }
  const double bound = 4.0 / std::sqrt(double(series.n()));
  std::vector<CheckResult> subs;
  subs.push_back(leaf_bound(
      "max_element_difference", worst, bound, long(series.n()),
      "ensemble density vs dephasing solution, worst at t = " + g17(worst_t)));
  return aggregate("sde_vs_lindblad_closed", std::move(subs),
                   long(series.n()));
}

}  // namespace

// ---- public API ----------------------------------------------------------

RunMode parse_mode(const std::string& name) {
  if (name == "sde") return RunMode::sde;
  if (name == "girsanov-scalar") return RunMode::girsanov_scalar;
  if (name == "girsanov-weighted") return RunMode::girsanov_weighted;
  if (name == "lindblad-closed") return RunMode::lindblad_closed;
  if (name == "lindblad-ode") return RunMode::lindblad_ode;
  if (name == "verify-all") return RunMode::verify_all;
  throw config_error(
      "unknown mode '" + name +
      "' (expected sde, girsanov-scalar, girsanov-weighted, lindblad-closed, "
      "lindblad-ode or verify-all)");
}

std::string mode_name(RunMode mode) {
  switch (mode) {
    case RunMode::sde: return "sde";
    case RunMode::girsanov_scalar: return "girsanov-scalar";
    case RunMode::girsanov_weighted: return "girsanov-weighted";
    case RunMode::lindblad_closed: return "lindblad-closed";
    case RunMode::lindblad_ode: return "lindblad-ode";
    case RunMode::verify_all: return "verify-all";
  }
  return "unknown";
}

void apply_config_json(RunConfig& rc, const nlohmann::json& j,
                       const std::string& origin) {
  if (!j.is_object())
    throw config_error("config " + origin + ": top level must be an object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "fixture") {
        rc.fixture = value.get<std::string>();
      } else if (key == "mode") {
        rc.mode = parse_mode(value.get<std::string>());
      } else if (key == "n_trajectories") {
        rc.n_trajectories = value.get<long>();
      } else if (key == "out") {
        rc.out_dir = value.get<std::string>();
      } else if (key == "seed") {
        rc.seed = value.get<std::uint64_t>();
      } else if (key == "workers") {
        rc.workers = value.get<int>();
      } else if (key == "sigma") {
        rc.sigma = value.get<double>();
      } else if (key == "dt") {
        rc.dt = value.get<double>();
      } else if (key == "horizon_tau") {
        rc.horizon_tau = value.get<double>();
      } else if (key == "collapse_threshold") {
        rc.collapse_threshold = value.get<double>();
      } else if (key == "record_stride") {
        rc.record_stride = value.get<int>();
      } else if (key == "lambdas") {
        rc.lambdas = value.get<std::vector<double>>();
      } else if (key == "checks") {
        rc.checks = value.get<std::vector<std::string>>();
      } else if (key == "eval_times_tau") {
        rc.eval_times_tau = value.get<std::vector<double>>();
      } else if (key == "csv_max_traj") {
        rc.csv_max_traj = value.get<long>();
      } else {
        throw config_error("config " + origin + ": unknown field '" + key +
                           "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw config_error("config " + origin + ": field '" + key +
                         "' has the wrong type: " + e.what());
    }
  }
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw config_error("config file " + path +
                       " is not valid JSON: " + e.what());
  }
  RunConfig rc;
  apply_config_json(rc, j, path);
  return rc;
}

Fixture resolve_fixture(const std::string& name_or_path) {
  const auto names = builtin_names();
  if (std::find(names.begin(), names.end(), name_or_path) != names.end())
    return builtin_fixture(name_or_path);
  return load_fixture(name_or_path);
}

SimConfig resolve_sim(const RunConfig& rc, const Fixture& fx) {
  SimConfig s;
  s.sigma = rc.sigma.value_or(1.0);
  s.dt = rc.dt.value_or(0.0);
  if (rc.horizon_tau) {
    s.horizon_tau = *rc.horizon_tau;
  } else {
    // Default horizons are expressed in units of the ensemble reduction time
    // 1/(sigma^2 V0).  Mixture members with smaller energy variance collapse
    // on a slower clock, so stretch the default to give the slowest member
    // the same budget on its own timescale.
    double h = rc.mode == RunMode::verify_all ? 80.0 : 20.0;
    const auto [h0, v0] = fx.init.ensemble_moments(fx.dec);
    (void)h0;
    if (!fx.init.is_pure() && v0 > 0.0) {
      double vmin = v0;
      for (const auto& [w, psi] : fx.init.components) {
        if (w <= 0.0) continue;
        double hm = 0.0, sq = 0.0;
        for (const auto& lvl : fx.dec.levels) {
          const double p =
              std::max((psi.adjoint() * lvl.projector * psi)(0).real(), 0.0);
          hm += p * lvl.eigenvalue;
          sq += p * lvl.eigenvalue * lvl.eigenvalue;
        }
        const double vm = std::max(sq - hm * hm, 0.0);
        if (vm > 0.0) vmin = std::min(vmin, vm);
      }
      if (vmin > 0.0 && vmin < v0) h *= v0 / vmin;
    }
    s.horizon_tau = h;
  }
  s.collapse_threshold = rc.collapse_threshold.value_or(1e-12);
  s.record_stride = rc.record_stride.value_or(0);
  s.seed = rc.seed;
  return s;
}

int run(const RunConfig& rc) {
  const Fixture fx = resolve_fixture(rc.fixture);
  switch (rc.mode) {
    case RunMode::sde: return run_sde(rc, fx);
    case RunMode::girsanov_scalar: return run_girsanov_scalar(rc, fx);
    case RunMode::girsanov_weighted: return run_girsanov_weighted(rc, fx);
    case RunMode::lindblad_closed: return run_lindblad(rc, fx, true);
    case RunMode::lindblad_ode: return run_lindblad(rc, fx, false);
    case RunMode::verify_all: return run_verify_all(rc, fx);
  }
  throw config_error("unhandled mode");
}

CheckResult compare_modes(RunMode a, RunMode b, const RunConfig& rc) {
  const Fixture fx = resolve_fixture(rc.fixture);
  auto is = [&](RunMode x, RunMode y) {
    return (a == x && b == y) || (a == y && b == x);
  };
  if (is(RunMode::sde, RunMode::girsanov_scalar))
    return compare_sde_scalar(rc, fx);
  if (is(RunMode::lindblad_closed, RunMode::lindblad_ode))
    return compare_lindblad_pair(rc, fx);
  if (is(RunMode::sde, RunMode::lindblad_closed))
    return compare_sde_lindblad(rc, fx);
  throw config_error(
      "unsupported comparison " + mode_name(a) + " vs " + mode_name(b) +
      " (supported: sde/girsanov-scalar, lindblad-closed/lindblad-ode, "
      "sde/lindblad-closed)");
}

int run_compare(RunMode a, RunMode b, const RunConfig& rc) {
  const Fixture fx = resolve_fixture(rc.fixture);
  const CheckResult result = compare_modes(a, b, rc);

  const fs::path dir = prepare_out_dir(rc);
  const SimConfig sim = resolve_sim(rc, fx);
  ordered_json manifest = make_manifest(rc, fx, a, sim, nullptr);
  // the comparison pair is part of the experiment identity, so rehash
  manifest.erase("config_hash");
  manifest["compare"] = {{"a", mode_name(a)}, {"b", mode_name(b)}};
  manifest["config_hash"] = hash_hex(fnv1a64(manifest.dump()));
  write_manifest(dir, manifest);

  ordered_json report = report_envelope(manifest);
  report["comparison"] = check_to_json(result);
  write_report(dir, report);

  std::cout << render_table({result});
  std::cout << "compare " << mode_name(a) << " vs " << mode_name(b) << ": "
            << (result.passed ? "PASS" : "FAIL") << ", artifacts in "
            << dir.string() << "\n";
  return result.passed ? 0 : 1;
}

}  // namespace qsr
