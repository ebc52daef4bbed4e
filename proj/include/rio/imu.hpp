#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "rio/error.hpp"

namespace rio {

using Vec3 = Eigen::Vector3d;

inline constexpr double kImuRateHz = 200.0;
inline constexpr double kImuPeriod = 1.0 / kImuRateHz;
inline constexpr std::size_t kWindowFrames = 200;
inline constexpr std::size_t kInputChannels = 6;

/// One 200 Hz frame in the heading-agnostic frame (z vertical).
struct ImuSample {
  double t = 0.0;
  Vec3 accel = Vec3::Zero();  // m/s^2
  Vec3 gyro = Vec3::Zero();   // rad/s
};

struct ImuSequence {
  std::string name;
  std::vector<ImuSample> samples;
  std::vector<Vec3> positions;  // empty when no ground truth

  std::size_t size() const { return samples.size(); }
  bool has_ground_truth() const { return !positions.empty(); }
  double duration() const {
    return samples.size() < 2 ? 0.0 : samples.back().t - samples.front().t;
  }
};

/// 200 consecutive frames; the model sees it as 6 channels x 200 frames
/// (accel x,y,z then gyro x,y,z).
struct ImuWindow {
  std::vector<ImuSample> samples;

  double t0() const { return samples.front().t; }
  double span() const { return samples.back().t - samples.front().t; }
};

inline bool is_contiguous(std::span<const ImuSample> samples, double tol = 1e-4) {
  for (std::size_t i = 1; i < samples.size(); ++i) {
    if (std::abs(samples[i].t - samples[i - 1].t - kImuPeriod) >= tol) return false;
  }
  return true;
}

inline void validate_window(const ImuWindow& w) {
  if (w.samples.size() != kWindowFrames) {
    throw Error(ErrorCode::ShapeMismatch, "window has " + std::to_string(w.samples.size()) +
                                              " frames, expected " +
                                              std::to_string(kWindowFrames));
  }
}

inline ImuWindow extract_window(const ImuSequence& seq, std::size_t start) {
  if (start + kWindowFrames > seq.size()) {
    throw Error(ErrorCode::TooShort, "window starting at frame " + std::to_string(start) +
                                         " exceeds sequence of " + std::to_string(seq.size()));
  }
  ImuWindow w;
  w.samples.assign(seq.samples.begin() + static_cast<std::ptrdiff_t>(start),
                   seq.samples.begin() + static_cast<std::ptrdiff_t>(start + kWindowFrames));
  return w;
}

/// Writes the channel-major network layout of `w` into `out` (6*200 values).
template <typename Scalar>
void pack_window(const ImuWindow& w, std::span<Scalar> out) {
  validate_window(w);
  for (std::size_t f = 0; f < kWindowFrames; ++f) {
    const auto& s = w.samples[f];
    for (int c = 0; c < 3; ++c) {
      out[static_cast<std::size_t>(c) * kWindowFrames + f] = static_cast<Scalar>(s.accel[c]);
      out[static_cast<std::size_t>(c + 3) * kWindowFrames + f] = static_cast<Scalar>(s.gyro[c]);
    }
  }
}

}  // namespace rio
