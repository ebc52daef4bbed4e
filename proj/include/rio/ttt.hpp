#pragma once

// Test-time training controller: per-batch update / skip / restore driven by
// ensemble variance, and the streaming inference loop.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "rio/diffcore.hpp"
#include "rio/ensemble.hpp"
#include "rio/equivariance.hpp"
#include "rio/error.hpp"
#include "rio/imu.hpp"
#include "rio/parallel.hpp"
#include "rio/sequence_io.hpp"

namespace rio {

enum class TttMode { Adaptive, Naive, Off };
enum class TttAction { Updated, Skipped, Restored };
enum class TttUpdateScope { All, Member0 };
enum class PredictorKind { Mean, Member0 };

inline std::string to_string(TttMode m) {
  switch (m) {
    case TttMode::Adaptive: return "adaptive";
    case TttMode::Naive: return "naive";
    case TttMode::Off: return "off";
  }
  return "adaptive";
}

inline TttMode ttt_mode_from_string(const std::string& s) {
  if (s == "adaptive") return TttMode::Adaptive;
  if (s == "naive") return TttMode::Naive;
  if (s == "off") return TttMode::Off;
  throw Error(ErrorCode::InvalidConfig, "mode must be adaptive|naive|off, got '" + s + "'");
}

inline std::string to_string(TttAction a) {
  switch (a) {
    case TttAction::Updated: return "updated";
    case TttAction::Skipped: return "skipped";
    case TttAction::Restored: return "restored";
  }
  return "skipped";
}

inline std::string to_string(TttUpdateScope s) { return s == TttUpdateScope::All ? "all" : "member0"; }

inline TttUpdateScope ttt_update_from_string(const std::string& s) {
  if (s == "all") return TttUpdateScope::All;
  if (s == "member0") return TttUpdateScope::Member0;
  throw Error(ErrorCode::InvalidConfig, "ttt_update must be all|member0, got '" + s + "'");
}

inline std::string to_string(PredictorKind p) { return p == PredictorKind::Mean ? "mean" : "member0"; }

inline PredictorKind predictor_from_string(const std::string& s) {
  if (s == "mean") return PredictorKind::Mean;
  if (s == "member0") return PredictorKind::Member0;
  throw Error(ErrorCode::InvalidConfig, "predictor must be mean|member0, got '" + s + "'");
}

struct TttConfig {
  std::size_t batch_size = 128;
  std::size_t sample_stride = 10;  // frames between windows (20 Hz)
  std::vector<double> angles_deg = {72.0, 144.0, 216.0, 288.0};
  std::size_t max_updates_per_batch = 5;
  double stop_threshold = 0.04;      // (m/s)^2
  double restore_threshold = 1e-4;   // (m/s)^2
  double ttt_lr = 1e-4;
  TttMode mode = TttMode::Adaptive;
  VarianceReduction variance_reduction = VarianceReduction::Sum;
  TttUpdateScope ttt_update = TttUpdateScope::All;
  PredictorKind predictor = PredictorKind::Mean;
  double speed_gate = 0.5;
  bool stop_gradient_on_rotated = false;

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidConfig, m); };
    if (batch_size == 0) fail("batch_size must be >= 1");
    if (sample_stride == 0) fail("sample_stride must be >= 1");
    if (max_updates_per_batch == 0) fail("max_updates_per_batch must be >= 1");
    if (!(restore_threshold < stop_threshold)) fail("restore_threshold must be < stop_threshold");
    if (!(ttt_lr >= 0.0)) fail("ttt_lr must be >= 0");
    equivariance().validate();
  }

  EquivarianceConfig equivariance() const {
    EquivarianceConfig e;
    e.speed_gate = speed_gate;
    e.ttt_angles_deg = angles_deg;
    e.stop_gradient_on_rotated = stop_gradient_on_rotated;
    return e;
  }
};

/// Restore if any window is near-certain, else skip if the batch is
/// confident on average, else update. Strict inequalities.
inline TttAction decide(double mean_var, double min_var, const TttConfig& cfg) {
  if (min_var < cfg.restore_threshold) return TttAction::Restored;
  if (mean_var < cfg.stop_threshold) return TttAction::Skipped;
  return TttAction::Updated;
}

struct TttEvent {
  std::size_t batch_index = 0;
  TttAction action = TttAction::Skipped;
  std::size_t steps = 0;
  double mean_var = 0.0;
  double min_var = 0.0;
  double aux_before = std::numeric_limits<double>::quiet_NaN();
  double aux_after = std::numeric_limits<double>::quiet_NaN();
  bool non_finite = false;
  std::size_t windows = 0;
};

struct TttHooks {
  /// Replaces the per-window scalar variances used by decide().
  std::function<std::vector<double>(std::size_t batch_index, std::span<const EnsembleEstimate>)>
      variance_override;
};

struct TttBatchResult {
  std::vector<Vec3> velocities;
  std::vector<double> variances;  // per-window scalar variance seen by decide()
  TttEvent event;
};

namespace ttt_detail {

inline std::vector<Vec3> emit(const EnsembleState& state, std::span<const ImuWindow> windows,
                              const TttConfig& cfg, const std::vector<EnsembleEstimate>* est) {
  if (cfg.predictor == PredictorKind::Member0) return predict_velocity(state.members.at(0), windows);
  std::vector<EnsembleEstimate> fresh;
  if (!est) {
    fresh = ensemble_predict(state, windows, cfg.variance_reduction);
    est = &fresh;
  }
  std::vector<Vec3> v;
  v.reserve(est->size());
  for (const auto& e : *est) v.push_back(e.mean);
  return v;
}

inline bool all_finite(const ModelParams& p) {
  for (const auto& t : p.tensors)
    for (float v : t.values)
      if (!std::isfinite(v)) return false;
  return true;
}

struct MemberUpdate {
  std::size_t steps = 0;
  double before = 0.0;
  double after = 0.0;
  bool non_finite = false;
};

/// Up to `max_updates` Adam steps of member `params` on its own aux loss,
/// with fresh optimizer moments.
inline MemberUpdate update_member(ModelParams& params, diff::AdamState& adam,
                                  std::span<const ImuWindow> windows, const AngleLists& angles,
                                  const TttConfig& cfg) {
  const auto eq = cfg.equivariance();
  adam.reset();
  adam.config = diff::AdamConfig{};
  adam.config.lr = cfg.ttt_lr;
  MemberUpdate u;
  for (std::size_t k = 0; k < cfg.max_updates_per_batch; ++k) {
    auto r = batch_aux_loss(params, windows, angles, eq, true);
    if (k == 0) u.before = r.loss;
    if (!std::isfinite(r.loss)) {
      u.non_finite = true;
      return u;
    }
    diff::adam_step(params.tensors, r.grads, adam);
    ++u.steps;
    if (!all_finite(params)) {
      u.non_finite = true;
      return u;
    }
  }
  u.after = batch_aux_loss(params, windows, angles, eq, false).loss;
  if (!std::isfinite(u.after)) u.non_finite = true;
  return u;
}

}  // namespace ttt_detail

/// One controller step on a batch of windows.
inline TttBatchResult ttt_batch(EnsembleState& state, std::span<const ImuWindow> windows,
                                const TttConfig& cfg, std::size_t batch_index = 0,
                                const TttHooks& hooks = {}) {
  cfg.validate();
  if (state.size() == 0) throw Error(ErrorCode::InvalidConfig, "empty ensemble");
  TttBatchResult out;
  auto& ev = out.event;
  ev.batch_index = batch_index;
  ev.windows = windows.size();
  if (windows.empty()) return out;

  auto est = ensemble_predict(state, windows, cfg.variance_reduction);
  if (hooks.variance_override) {
    out.variances = hooks.variance_override(batch_index, est);
    if (out.variances.size() != windows.size())
      throw Error(ErrorCode::ShapeMismatch, "variance override returned wrong count");
  } else {
    for (const auto& e : est) out.variances.push_back(e.scalar_variance);
  }
  ev.min_var = *std::min_element(out.variances.begin(), out.variances.end());
  ev.mean_var = std::accumulate(out.variances.begin(), out.variances.end(), 0.0) /
                double(out.variances.size());

  switch (cfg.mode) {
    case TttMode::Off: ev.action = TttAction::Skipped; break;
    case TttMode::Naive: ev.action = TttAction::Updated; break;
    case TttMode::Adaptive: ev.action = decide(ev.mean_var, ev.min_var, cfg); break;
  }

  if (ev.action == TttAction::Skipped) {
    out.velocities = ttt_detail::emit(state, windows, cfg, &est);
    return out;
  }
  if (ev.action == TttAction::Restored) {
    state.restore();
    out.velocities = ttt_detail::emit(state, windows, cfg, nullptr);
    return out;
  }

  const auto angles = shared_angles(windows.size(), degrees_to_radians(cfg.angles_deg));
  const std::size_t n_upd = cfg.ttt_update == TttUpdateScope::All ? state.size() : 1;
  std::vector<ttt_detail::MemberUpdate> upd(n_upd);
  parallel_for(n_upd, [&](std::size_t m) {
    upd[m] = ttt_detail::update_member(state.members[m], state.member_adam[m], windows, angles, cfg);
  });
  double before = 0.0, after = 0.0;
  for (const auto& u : upd) {
    ev.steps = std::max(ev.steps, u.steps);
    ev.non_finite = ev.non_finite || u.non_finite;
    before += u.before;
    after += u.after;
  }
  ev.aux_before = before / double(n_upd);
  if (!ev.non_finite) {
    // NaN predictions fail the speed gate and would read as a zero loss.
    out.velocities = ttt_detail::emit(state, windows, cfg, nullptr);
    for (const auto& v : out.velocities) ev.non_finite = ev.non_finite || !v.allFinite();
  }
  if (ev.non_finite) {
    state.restore();
    ev.action = TttAction::Restored;
    out.velocities = ttt_detail::emit(state, windows, cfg, nullptr);
  } else {
    ev.aux_after = after / double(n_upd);
  }
  return out;
}

struct StreamResult {
  std::vector<double> times;      // window centers (s)
  std::vector<Vec3> velocities;   // one per window, 20 Hz by default
  std::vector<double> variances;  // scalar variance per window
  std::vector<TttEvent> events;
};

/// Causal streaming: windows every sample_stride frames, buffered into
/// batches; the last partial batch follows the same rules.
inline StreamResult run_stream(EnsembleState& state, const ImuSequence& seq, const TttConfig& cfg,
                               const TttHooks& hooks = {}) {
  cfg.validate();
  if (seq.size() < kWindowFrames) {
    throw Error(ErrorCode::TooShort, seq.name + " has " + std::to_string(seq.size()) +
                                         " frames, need " + std::to_string(kWindowFrames));
  }
  StreamResult out;
  const std::size_t n = window_count(seq.size(), cfg.sample_stride);
  std::vector<ImuWindow> buffer;
  buffer.reserve(cfg.batch_size);
  std::size_t batch_index = 0;
  for (std::size_t k = 0; k < n; ++k) {
    buffer.push_back(extract_window(seq, k * cfg.sample_stride));
    out.times.push_back(0.5 * (buffer.back().samples.front().t + buffer.back().samples.back().t));
    if (buffer.size() == cfg.batch_size || k + 1 == n) {
      auto r = ttt_batch(state, buffer, cfg, batch_index++, hooks);
      out.velocities.insert(out.velocities.end(), r.velocities.begin(), r.velocities.end());
      out.variances.insert(out.variances.end(), r.variances.begin(), r.variances.end());
      out.events.push_back(r.event);
      buffer.clear();
    }
  }
  return out;
}

inline void write_events_csv(std::ostream& out, const std::vector<TttEvent>& events) {
  out << "batch,action,steps,mean_var,min_var,aux_before,aux_after\n";
  using io_detail::fmt;
  for (const auto& e : events) {
    out << e.batch_index << ',' << to_string(e.action) << (e.non_finite ? ":nonfinite" : "") << ','
        << e.steps << ',' << fmt(e.mean_var) << ',' << fmt(e.min_var) << ','
        << (std::isfinite(e.aux_before) ? fmt(e.aux_before) : "nan") << ','
        << (std::isfinite(e.aux_after) ? fmt(e.aux_after) : "nan") << '\n';
  }
}

inline void write_events_csv(const std::filesystem::path& path, const std::vector<TttEvent>& events) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  write_events_csv(out, events);
}

}  // namespace rio
