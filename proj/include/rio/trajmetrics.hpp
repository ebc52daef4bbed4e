#pragma once

// Velocity integration and trajectory error metrics (ATE, RTE, D-drift).

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "rio/error.hpp"
#include "rio/geometry.hpp"
#include "rio/imu.hpp"

namespace rio {

struct TrajMetrics {
  double ate = 0.0;      // m
  double rte = 0.0;      // m
  double d_drift = 0.0;  // ratio
};

/// Euler integration: P[0] = origin, P[k+1] = P[k] + v[k] / rate.
inline Trajectory integrate(std::span<const Vec3> velocities, double rate_hz, const Vec3& origin,
                            double origin_time = 0.0) {
  if (!(rate_hz > 0.0)) throw Error(ErrorCode::InvalidConfig, "integration rate must be positive");
  Trajectory traj;
  traj.rate_hz = rate_hz;
  traj.origin_time = origin_time;
  traj.positions.reserve(velocities.size() + 1);
  traj.positions.push_back(origin);
  const double dt = 1.0 / rate_hz;
  for (const auto& v : velocities) traj.positions.push_back(traj.positions.back() + v * dt);
  return traj;
}

inline double ate(const Trajectory& est, const Trajectory& gt) {
  if (est.size() != gt.size() || est.size() == 0) {
    throw Error(ErrorCode::LengthMismatch, "ate: " + std::to_string(est.size()) + " vs " +
                                               std::to_string(gt.size()) + " points");
  }
  double acc = 0.0;
  for (std::size_t k = 0; k < est.size(); ++k)
    acc += (est.positions[k] - gt.positions[k]).squaredNorm();
  return std::sqrt(acc / static_cast<double>(est.size()));
}

enum class RteStyle {
  RelativeDisplacement,  // ||(dP_est) - (dP_gt)|| over each interval
  WindowRealigned,       // ATE after translating each window to a common start
};

/// RMSE of relative-displacement errors over fixed time intervals, with
/// window starts hopping by `hop_seconds`.
inline double rte(const Trajectory& est, const Trajectory& gt, double interval_seconds = 60.0,
                  double hop_seconds = 1.0, RteStyle style = RteStyle::RelativeDisplacement) {
  if (est.size() != gt.size()) {
    throw Error(ErrorCode::LengthMismatch, "rte: " + std::to_string(est.size()) + " vs " +
                                               std::to_string(gt.size()) + " points");
  }
  const double rate = gt.rate_hz;
  const auto delta = static_cast<std::size_t>(std::llround(interval_seconds * rate));
  const auto hop = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(hop_seconds * rate)));
  if (delta == 0 || gt.size() <= delta) {
    throw Error(ErrorCode::TooShort, "rte: trajectory spans " + std::to_string(gt.span()) +
                                         " s, interval is " + std::to_string(interval_seconds) + " s");
  }
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t s = 0; s + delta < gt.size(); s += hop) {
    if (style == RteStyle::RelativeDisplacement) {
      const Vec3 de = est.positions[s + delta] - est.positions[s];
      const Vec3 dg = gt.positions[s + delta] - gt.positions[s];
      acc += (de - dg).squaredNorm();
    } else {
      double w = 0.0;
      for (std::size_t k = s; k <= s + delta; ++k) {
        const Vec3 e = (est.positions[k] - est.positions[s]) - (gt.positions[k] - gt.positions[s]);
        w += e.squaredNorm();
      }
      acc += w / static_cast<double>(delta + 1);
    }
    ++count;
  }
  return std::sqrt(acc / static_cast<double>(count));
}

inline double path_length(const Trajectory& traj) {
  double len = 0.0;
  for (std::size_t k = 1; k < traj.size(); ++k)
    len += (traj.positions[k] - traj.positions[k - 1]).norm();
  return len;
}

inline double d_drift(const Trajectory& est, const Trajectory& gt) {
  const double lg = path_length(gt);
  if (!(lg > 0.0)) throw Error(ErrorCode::ZeroLengthGroundTruth, "ground-truth path has zero length");
  return std::abs(path_length(est) - lg) / lg;
}

enum class AlignPolicy { Aligned, Umeyama };

struct EvalOptions {
  AlignPolicy policy = AlignPolicy::Aligned;
  double rte_interval = 60.0;
  RteStyle rte_style = RteStyle::RelativeDisplacement;
  bool umeyama_scale = false;
  std::size_t window_stride = 10;  // frames between consecutive velocity estimates
};

/// Frame of the ground truth paired with estimated point k: the estimate
/// for window k is the mean velocity over frames [s*k, s*k + 199], so point k
/// sits half a stride before that window's center.
inline std::size_t gt_frame_for_point(std::size_t k, std::size_t stride) {
  return stride * k + kWindowFrames / 2 - stride / 2;
}

/// Ground truth decimated to the estimate grid (one point per velocity plus
/// the origin).
inline Trajectory ground_truth_track(const ImuSequence& seq, std::size_t velocity_count,
                                     std::size_t stride) {
  if (!seq.has_ground_truth()) throw Error(ErrorCode::MissingGroundTruth, seq.name + " has no positions");
  Trajectory gt;
  gt.rate_hz = kImuRateHz / static_cast<double>(stride);
  const std::size_t first = gt_frame_for_point(0, stride);
  gt.origin_time = seq.samples.at(first).t;
  for (std::size_t k = 0; k <= velocity_count; ++k) {
    const std::size_t f = gt_frame_for_point(k, stride);
    if (f >= seq.size()) {
      throw Error(ErrorCode::LengthMismatch, "more velocities than the sequence supports");
    }
    gt.positions.push_back(seq.positions[f]);
  }
  return gt;
}

struct EvaluatedTracks {
  Trajectory estimate;      // after alignment, if any
  Trajectory ground_truth;  // decimated
  TrajMetrics metrics;
};

inline EvaluatedTracks evaluate_tracks(std::span<const Vec3> velocities, const ImuSequence& seq,
                                       const EvalOptions& opt = {}) {
  EvaluatedTracks out;
  out.ground_truth = ground_truth_track(seq, velocities.size(), opt.window_stride);
  out.estimate = integrate(velocities, out.ground_truth.rate_hz, out.ground_truth.positions.front(),
                           out.ground_truth.origin_time);
  if (opt.policy == AlignPolicy::Umeyama)
    out.estimate = umeyama_align(out.estimate, out.ground_truth, opt.umeyama_scale).second;
  out.metrics.ate = ate(out.estimate, out.ground_truth);
  out.metrics.rte = rte(out.estimate, out.ground_truth, opt.rte_interval, 1.0, opt.rte_style);
  out.metrics.d_drift = d_drift(out.estimate, out.ground_truth);
  return out;
}

inline TrajMetrics evaluate_sequence(std::span<const Vec3> velocities, const ImuSequence& seq,
                                     const EvalOptions& opt = {}) {
  return evaluate_tracks(velocities, seq, opt).metrics;
}

}  // namespace rio
