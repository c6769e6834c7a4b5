#include "qsr/sde.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace qsr {

namespace {

constexpr cplx kImag{0.0, 1.0};

double commutator_scale(const Cmat& a, const Cmat& b) {
  return std::max(1.0, max_abs(a) * max_abs(b));
}

}  // namespace

DensityMatrix InitialCondition::density() const {
  if (components.empty())
    throw validation_error("initial condition has no components");
  const auto dim = components.front().second.size();
  DensityMatrix rho = Cmat::Zero(dim, dim);
  double total = 0.0;
  for (const auto& [w, psi] : components) {
    rho += w * (psi * psi.adjoint());
    total += w;
  }
  return rho / total;
}

std::pair<double, double> InitialCondition::ensemble_moments(
    const SpectralDecomposition& dec) const {
  const DensityMatrix rho = density();
  const Cmat hr = dec.observable * rho;
  const double e1 = hr.trace().real();
  const double e2 = (dec.observable * hr).trace().real();
  return {e1, std::max(e2 - e1 * e1, 0.0)};
}

void InitialCondition::validate(int dimension, const Tolerances& tol) const {
  if (components.empty())
    throw validation_error("initial condition has no components");
  double total = 0.0;
  for (const auto& [w, psi] : components) {
    if (!(w > 0.0))
      throw validation_error("mixture weights must be positive");
    if (psi.size() != dimension)
      throw validation_error("initial state dimension mismatch");
    validate_state(psi, tol);
    total += w;
  }
  if (std::abs(total - 1.0) > std::max(tol.prob, 1e-9))
    throw validation_error("mixture weights must sum to 1");
}

TimeGrid resolve_grid(const SimConfig& cfg, double v0_ensemble, double range) {
  if (!(cfg.sigma > 0.0)) throw config_error("sigma must be positive");
  if (cfg.horizon_tau < 1.0)
    throw config_error("horizon_tau must be at least 1");
  double v_scale = v0_ensemble;
  if (!(v_scale > 0.0)) v_scale = range > 0.0 ? 0.25 * range * range : 1.0;

  TimeGrid grid;
  grid.tau_r = 1.0 / (cfg.sigma * cfg.sigma * v_scale);
  grid.dt = cfg.dt > 0.0 ? cfg.dt : grid.tau_r / 1000.0;
  if (grid.dt > 0.01 * grid.tau_r)
    std::fprintf(stderr,
                 "warning: dt = %g exceeds 0.01 tau_R = %g; "
                 "discretisation error may dominate\n",
                 grid.dt, 0.01 * grid.tau_r);
  grid.n_steps = static_cast<long>(
      std::ceil(cfg.horizon_tau * grid.tau_r / grid.dt - 1e-9));
  grid.n_steps = std::max(grid.n_steps, 1L);
  grid.stride = cfg.record_stride > 0
                    ? cfg.record_stride
                    : static_cast<int>(std::max(1L, grid.n_steps / 200));
  // Land the final step on the recording grid.
  const long rem = grid.n_steps % grid.stride;
  if (rem != 0) grid.n_steps += grid.stride - rem;
  return grid;
}

// ---- single-step kernels -------------------------------------------------

namespace {

/// Shared EM update. `obs` lists the channel observables; `ham` generates the
/// unitary part. Returns the renormalised state and the norm defect.
std::pair<StateVector, double> em_kernel(const StateVector& psi,
                                         const Cmat& ham,
                                         const std::vector<const Cmat*>& obs,
                                         const std::vector<double>& sigmas,
                                         double dt,
                                         const std::vector<double>& dw) {
  StateVector next = psi - kImag * dt * (ham * psi);
  for (std::size_t a = 0; a < obs.size(); ++a) {
    const Cvec opsi = (*obs[a]) * psi;
    const double f = (psi.dot(opsi)).real();
    const Cvec apsi = opsi - f * psi;
    const Cvec a2psi = (*obs[a]) * apsi - f * apsi;
    next += (-0.125 * sigmas[a] * sigmas[a] * dt) * a2psi +
            (0.5 * sigmas[a] * dw[a]) * apsi;
  }
  const double n = next.norm();
  if (!(n > 0.0) || !std::isfinite(n))
    throw numeric_error("state norm vanished or became non-finite");
  return {next / n, std::abs(n - 1.0)};
}

}  // namespace

std::pair<StateVector, double> em_step(const StateVector& psi,
                                       const SpectralDecomposition& dec,
                                       double sigma, double dt, double dw) {
  if (psi.size() != dec.dimension)
    throw validation_error("state dimension does not match decomposition");
  return em_kernel(psi, dec.observable, {&dec.observable}, {sigma}, dt, {dw});
}

MultiChannel::MultiChannel(std::vector<Channel> ch, Cmat h,
                           const Tolerances& tol)
    : channels(std::move(ch)), hamiltonian(std::move(h)) {
  if (channels.empty()) throw validation_error("no reduction channels given");
  const int dim = channels.front().dec.dimension;
  if (hamiltonian.rows() != dim || hamiltonian.cols() != dim)
    throw validation_error("hamiltonian dimension mismatch");
  if (max_abs(Cmat(hamiltonian - hamiltonian.adjoint())) > tol.herm)
    throw validation_error("hamiltonian is not Hermitian");
  for (std::size_t a = 0; a < channels.size(); ++a) {
    const Cmat& fa = channels[a].dec.observable;
    if (channels[a].dec.dimension != dim)
      throw validation_error("channel dimension mismatch");
    for (std::size_t b = 0; b < a; ++b) {
      const Cmat& fb = channels[b].dec.observable;
      const double c = max_abs(Cmat(fa * fb - fb * fa));
      if (c > tol.herm * commutator_scale(fa, fb)) {
        std::ostringstream msg;
        msg << "channels " << b << " and " << a
            << " do not commute (max |[F_b, F_a]| = " << c << ")";
        throw validation_error(msg.str());
      }
    }
    const double ch_comm = max_abs(Cmat(fa * hamiltonian - hamiltonian * fa));
    if (ch_comm > tol.herm * commutator_scale(fa, hamiltonian)) {
      std::ostringstream msg;
      msg << "channel " << a
          << " does not commute with the hamiltonian (max |[F, H]| = "
          << ch_comm << ")";
      throw validation_error(msg.str());
    }
  }
}

std::pair<StateVector, double> em_step_multi(const StateVector& psi,
                                             const MultiChannel& mc, double dt,
                                             const std::vector<double>& dw) {
  if (dw.size() != mc.channels.size())
    throw validation_error("one Wiener increment per channel required");
  if (psi.size() != mc.hamiltonian.rows())
    throw validation_error("state dimension does not match channels");
  std::vector<const Cmat*> obs;
  std::vector<double> sigmas;
  obs.reserve(mc.channels.size());
  sigmas.reserve(mc.channels.size());
  for (const auto& ch : mc.channels) {
    obs.push_back(&ch.dec.observable);
    sigmas.push_back(ch.sigma);
  }
  return em_kernel(psi, mc.hamiltonian, obs, sigmas, dt, dw);
}

// ---- full trajectories ---------------------------------------------------

int sample_member(const InitialCondition& init, philox4x64& stream) {
  if (init.is_pure()) return 0;
  double total = 0.0;
  for (const auto& [w, psi] : init.components) total += w;
  const double u = stream.uniform() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < init.components.size(); ++i) {
    acc += init.components[i].first;
    if (u <= acc) return static_cast<int>(i);
  }
  return static_cast<int>(init.components.size()) - 1;
}

RecordPlan make_record_plan(const StateVector& psi0,
                            const SpectralDecomposition& dec,
                            const Tolerances& tol) {
  RecordPlan plan;
  const Rvec pi = level_probabilities(psi0, dec, tol);
  for (int n = 0; n < dec.level_count(); ++n) {
    if (dec.levels[n].multiplicity > 1 && pi[n] > tol.prob) {
      plan.monitored_levels.push_back(n);
      plan.complement_projectors.push_back(
          orthogonal_luders_complement(psi0, dec, n, tol));
    }
  }
  return plan;
}

Trajectory integrate_trajectory(const StateVector& psi0,
                                const SpectralDecomposition& dec,
                                const SimConfig& cfg, const TimeGrid& grid,
                                philox4x64& stream, const RecordPlan& plan) {
  const int dim = dec.dimension;
  const int levels = dec.level_count();
  const Cmat& ham = dec.observable;
  const double sigma = cfg.sigma;
  const double dt = grid.dt;
  const double thr = cfg.collapse_threshold > 0.0
                         ? cfg.collapse_threshold * dec.spectral_range *
                               dec.spectral_range
                         : -1.0;
  const long n_rec = grid.n_records();

  Trajectory traj;
  traj.times.reserve(n_rec);
  traj.H.reserve(n_rec);
  traj.V.reserve(n_rec);
  traj.beta.reserve(n_rec);
  traj.norm_err.reserve(n_rec);
  traj.compensator.reserve(n_rec);
  traj.level_probs.reserve(n_rec);
  traj.monitored_levels = plan.monitored_levels;
  traj.complement.resize(plan.monitored_levels.size());
  for (auto& series : traj.complement) series.reserve(n_rec);
  if (cfg.record_states) traj.states.reserve(n_rec);
  if (cfg.record_noise) traj.noise.reserve(grid.n_steps);

  StateVector psi = psi0;
  Cvec hpsi = ham * psi;
  Cvec apsi(dim), a2psi(dim), next(dim);
  double h = psi.dot(hpsi).real();
  double v = std::max(hpsi.squaredNorm() - h * h, 0.0);
  double last_defect = 0.0;
  double z = 0.0;  // sigma^2 int V^2, trapezoid on the step grid

  traj.H0 = h;
  traj.V0 = v;
  traj.sup_V = v;
  traj.sup_abs_dH = 0.0;

  bool frozen = false;
  const auto record = [&](long k) {
    traj.times.push_back(k * dt);
    traj.H.push_back(h);
    traj.V.push_back(v);
    // beta = <(H - <H>)^3> = Re <A psi | A^2 psi>, A = H - <H>
    apsi = hpsi - h * psi;
    a2psi.noalias() = ham * apsi;
    a2psi -= h * apsi;
    traj.beta.push_back(apsi.dot(a2psi).real());
    traj.norm_err.push_back(last_defect);
    traj.compensator.push_back(z);
    Rvec pi(levels);
    for (int n = 0; n < levels; ++n)
      pi[n] = std::max(
          (psi.adjoint() * dec.levels[n].projector * psi)(0).real(), 0.0);
    traj.level_probs.push_back(std::move(pi));
    for (std::size_t m = 0; m < plan.monitored_levels.size(); ++m)
      traj.complement[m].push_back(
          (psi.adjoint() * plan.complement_projectors[m] * psi)(0).real());
    if (cfg.record_states) traj.states.push_back(psi);
  };

  for (long k = 0; k <= grid.n_steps; ++k) {
    if (k % grid.stride == 0) record(k);
    if (k == grid.n_steps) break;

    if (!frozen && thr >= 0.0 && v < thr) {
      frozen = true;
      traj.terminal_time = k * dt;
      traj.final_state = psi;
      // Classify from the live state (the last record may predate crossing).
      Rvec pi(levels);
      for (int n = 0; n < levels; ++n)
        pi[n] = (psi.adjoint() * dec.levels[n].projector * psi)(0).real();
      int argmax = 0;
      pi.maxCoeff(&argmax);
      traj.terminal_level = argmax;
    }
    if (frozen) continue;  // fixed point: remaining records repeat the values

    const double dw = stream.wiener_increment(dt);
    if (cfg.record_noise) traj.noise.push_back(dw);

    // dpsi = [-i H - sigma^2/8 (H - <H>)^2] psi dt + sigma/2 (H - <H>) psi dW
    apsi = hpsi - h * psi;
    a2psi.noalias() = ham * apsi;
    a2psi -= h * apsi;
    next = psi - kImag * dt * hpsi;
    next += (-0.125 * sigma * sigma * dt) * a2psi + (0.5 * sigma * dw) * apsi;

    const double norm = next.norm();
    if (!(norm > 0.0) || !std::isfinite(norm))
      throw numeric_error("state norm vanished or became non-finite");
    last_defect = std::abs(norm - 1.0);
    traj.max_norm_err = std::max(traj.max_norm_err, last_defect);
    psi = next / norm;

    hpsi.noalias() = ham * psi;
    const double h_new = psi.dot(hpsi).real();
    const double v_new = std::max(hpsi.squaredNorm() - h_new * h_new, 0.0);
    z += 0.5 * sigma * sigma * (v * v + v_new * v_new) * dt;
    h = h_new;
    v = v_new;
    traj.sup_abs_dH = std::max(traj.sup_abs_dH, std::abs(h - traj.H0));
    traj.sup_V = std::max(traj.sup_V, v);
  }

  if (!frozen) traj.final_state = psi;
  return traj;
}

Trajectory simulate(const SimConfig& cfg, const InitialCondition& init,
                    const SpectralDecomposition& dec) {
  init.validate(dec.dimension);
  const auto [h0, v0] = init.ensemble_moments(dec);
  const TimeGrid grid = resolve_grid(cfg, v0, dec.spectral_range);
  philox4x64 stream(child_seed(cfg.seed, 0));
  const int member = sample_member(init, stream);
  const StateVector& psi0 = init.components[member].second;
  const RecordPlan plan =
      init.is_pure() ? make_record_plan(psi0, dec) : RecordPlan{};
  Trajectory traj = integrate_trajectory(psi0, dec, cfg, grid, stream, plan);
  traj.member = member;
  return traj;
}

}  // namespace qsr
