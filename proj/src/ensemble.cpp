#include "qsr/ensemble.hpp"

#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

namespace qsr {

namespace {

TrajSummary summarise(Trajectory&& t, int levels, int n_monitored,
                      const EnsembleOptions& opts) {
  TrajSummary s;
  const std::size_t k = t.times.size();
  s.H = std::move(t.H);
  s.V = std::move(t.V);
  s.beta = std::move(t.beta);
  s.norm_err = std::move(t.norm_err);
  s.Z = std::move(t.compensator);
  s.P.resize(k * levels);
  for (std::size_t r = 0; r < k; ++r)
    for (int n = 0; n < levels; ++n) s.P[r * levels + n] = t.level_probs[r][n];
  s.Pi.resize(k * n_monitored);
  for (std::size_t r = 0; r < k; ++r)
    for (int m = 0; m < n_monitored; ++m)
      s.Pi[r * n_monitored + m] = t.complement[m][r];
  s.H0 = t.H0;
  s.V0 = t.V0;
  s.sup_abs_dH = t.sup_abs_dH;
  s.sup_V = t.sup_V;
  s.max_norm_err = t.max_norm_err;
  s.terminal_level = t.terminal_level;
  s.terminal_time = t.terminal_time;
  s.member = t.member;
  if (opts.keep_terminal_states) s.terminal_state = std::move(t.final_state);
  if (opts.record_states) s.states = std::move(t.states);
  return s;
}

}  // namespace

std::vector<std::size_t> EnsembleSeries::unterminated() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < traj.size(); ++i)
    if (!traj[i].terminal_level) out.push_back(i);
  return out;
}

EnsembleSeries run_ensemble(const SimConfig& cfg, const InitialCondition& init,
                            const SpectralDecomposition& dec, long n_traj,
                            const EnsembleOptions& opts) {
  if (n_traj <= 0) throw config_error("n_traj must be positive");
  init.validate(dec.dimension);

  EnsembleSeries out;
  out.dimension = dec.dimension;
  out.config = cfg;
  out.level_eigenvalues = dec.eigenvalues();
  const auto [h0, v0] = init.ensemble_moments(dec);
  out.h0_ensemble = h0;
  out.v0_ensemble = v0;
  out.grid = resolve_grid(cfg, v0, dec.spectral_range);

  const long k = out.grid.n_records();
  out.times.resize(k);
  for (long r = 0; r < k; ++r)
    out.times[r] = static_cast<double>(r) * out.grid.stride * out.grid.dt;

  // Monitored complement projectors are defined against a pure initial state.
  const RecordPlan plan = init.is_pure()
                              ? make_record_plan(init.components[0].second, dec)
                              : RecordPlan{};
  out.monitored_levels = plan.monitored_levels;

  SimConfig traj_cfg = cfg;
  traj_cfg.record_states = opts.record_states;
  traj_cfg.record_noise = false;

  out.traj.resize(n_traj);
  const int levels = dec.level_count();
  const int n_mon = static_cast<int>(plan.monitored_levels.size());

  int workers = opts.workers > 0
                    ? opts.workers
                    : static_cast<int>(std::thread::hardware_concurrency());
  if (workers < 1) workers = 1;
  workers = static_cast<int>(std::min<long>(workers, n_traj));

  std::atomic<long> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;

  const auto work = [&]() {
    for (;;) {
      const long i = next.fetch_add(1);
      if (i >= n_traj) return;
      try {
        philox4x64 stream(child_seed(cfg.seed, static_cast<std::uint64_t>(i)));
        const int member = sample_member(init, stream);
        Trajectory t = integrate_trajectory(init.components[member].second,
                                            dec, traj_cfg, out.grid, stream,
                                            plan);
        t.member = member;
        out.traj[i] = summarise(std::move(t), levels, n_mon, opts);
      } catch (...) {
        std::scoped_lock lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        next.store(n_traj);  // drain remaining work
        return;
      }
    }
  };

  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  return out;
}

}  // namespace qsr
