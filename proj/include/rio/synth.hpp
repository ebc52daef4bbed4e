#pragma once

// Synthetic pedestrian-like IMU scenarios with exact ground truth.
//
// The base path is driven by a speed profile v(t) and a heading rate r(t),
// both blended between segments with a quintic smoothstep so position is C2.
// A periodic gait signature rides on top: a skewed surge oscillation along the
// heading whose amplitude scales with speed, plus an optional vertical bob.
// Accelerations are the analytic second derivative of the stored positions.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "rio/error.hpp"
#include "rio/geometry.hpp"
#include "rio/imu.hpp"
#include "rio/rng.hpp"

namespace rio {

enum class SegmentKind { Rest, Line, Arc, Sinusoid };

inline std::string to_string(SegmentKind k) {
  switch (k) {
    case SegmentKind::Rest: return "rest";
    case SegmentKind::Line: return "line";
    case SegmentKind::Arc: return "arc";
    case SegmentKind::Sinusoid: return "sinusoid";
  }
  return "?";
}

inline SegmentKind segment_kind_from_string(const std::string& s) {
  if (s == "rest") return SegmentKind::Rest;
  if (s == "line") return SegmentKind::Line;
  if (s == "arc") return SegmentKind::Arc;
  if (s == "sinusoid") return SegmentKind::Sinusoid;
  throw Error(ErrorCode::InvalidSpec, "unknown segment kind '" + s + "'");
}

struct MotionSegment {
  SegmentKind kind = SegmentKind::Line;
  double duration = 1.0;       // s
  double speed = 0.0;          // m/s (must be 0 for rest)
  double turn_deg = 0.0;       // arc: total heading change
  double amplitude_deg = 0.0;  // sinusoid: heading wiggle amplitude
  double period = 4.0;         // sinusoid: wiggle period, s
};

struct ScenarioSpec {
  std::vector<MotionSegment> motion;
  double accel_noise_std = 0.05;  // m/s^2
  double gyro_noise_std = 0.005;  // rad/s
  double initial_heading_deg = 0.0;
  Vec3 start_position = Vec3::Zero();
  double ramp = 0.5;         // s, blend time at the start of each segment
  double cadence_hz = 2.0;   // gait frequency
  double gait_gain = 1.5;    // surge acceleration amplitude per m/s of speed
  double z_bob = 0.0;        // vertical acceleration amplitude per m/s of speed
  std::uint64_t seed = 0;

  double duration() const {
    double d = 0.0;
    for (const auto& s : motion) d += s.duration;
    return d;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidSpec, m); };
    if (motion.empty()) fail("scenario has no motion segments");
    for (std::size_t i = 0; i < motion.size(); ++i) {
      const auto& s = motion[i];
      const std::string where = "segment " + std::to_string(i) + ": ";
      if (!(s.duration > 0.0)) fail(where + "duration must be positive");
      if (s.duration < ramp) fail(where + "duration shorter than the blend ramp");
      if (s.speed < 0.0) fail(where + "negative speed");
      if (s.kind == SegmentKind::Rest && s.speed != 0.0) fail(where + "rest segment with nonzero speed");
      if (s.kind == SegmentKind::Sinusoid && !(s.period > 0.0)) fail(where + "sinusoid period must be positive");
    }
    if (accel_noise_std < 0.0 || gyro_noise_std < 0.0) fail("noise std must be >= 0");
    if (!(ramp > 0.0)) fail("ramp must be positive");
    if (!(cadence_hz > 0.0)) fail("cadence must be positive");
    if (gait_gain < 0.0 || z_bob < 0.0) fail("gait amplitudes must be >= 0");
  }
};

namespace synth_detail {

struct Smooth {
  double s, ds, dds;  // value and derivatives w.r.t. x
};

inline Smooth smoothstep(double x) {
  if (x <= 0.0) return {0.0, 0.0, 0.0};
  if (x >= 1.0) return {1.0, 0.0, 0.0};
  const double x2 = x * x, x3 = x2 * x;
  return {x3 * (10.0 - 15.0 * x + 6.0 * x2), 30.0 * x2 * (1.0 - x) * (1.0 - x),
          60.0 * x - 180.0 * x2 + 120.0 * x3};
}

struct Kinematics {
  double v = 0, dv = 0, ddv = 0;  // speed and its derivatives
  double r = 0, dr = 0;           // heading rate and its derivative
};

/// Speed and heading-rate profile of a scenario as a function of time.
class Profile {
 public:
  explicit Profile(const ScenarioSpec& spec) : spec_(spec) {
    double t = 0.0, v_prev = 0.0, r_prev = 0.0;
    for (const auto& s : spec.motion) {
      starts_.push_back(t);
      v_start_.push_back(v_prev);
      r_start_.push_back(r_prev);
      t += s.duration;
      v_prev = s.speed;
      r_prev = nominal_rate(s, s.duration).first;
    }
    end_ = t;
  }

  Kinematics at(double t) const {
    std::size_t i = 0;
    while (i + 1 < starts_.size() && t >= starts_[i + 1]) ++i;
    const auto& seg = spec_.motion[i];
    const double tau = std::min(t - starts_[i], seg.duration);
    const double ramp = spec_.ramp;
    const Smooth sm = smoothstep(tau / ramp);
    Kinematics k;
    const double dv = seg.speed - v_start_[i];
    k.v = v_start_[i] + dv * sm.s;
    k.dv = dv * sm.ds / ramp;
    k.ddv = dv * sm.dds / (ramp * ramp);
    const auto [rs, drs] = nominal_rate(seg, tau);
    const double r0 = r_start_[i];
    k.r = r0 + (rs - r0) * sm.s;
    k.dr = drs * sm.s + (rs - r0) * sm.ds / ramp;
    return k;
  }

  double end() const { return end_; }

 private:
  static std::pair<double, double> nominal_rate(const MotionSegment& s, double tau) {
    switch (s.kind) {
      case SegmentKind::Arc: return {deg_to_rad(s.turn_deg) / s.duration, 0.0};
      case SegmentKind::Sinusoid: {
        const double w = kTwoPi / s.period, a = deg_to_rad(s.amplitude_deg);
        return {a * w * std::cos(w * tau), -a * w * w * std::sin(w * tau)};
      }
      default: return {0.0, 0.0};
    }
  }

  const ScenarioSpec& spec_;
  std::vector<double> starts_, v_start_, r_start_;
  double end_ = 0.0;
};

}  // namespace synth_detail

/// Generates a 200 Hz sequence with ground-truth positions. Deterministic in
/// (spec, seed).
inline ImuSequence gen_scenario(const ScenarioSpec& spec, std::uint64_t seed) {
  spec.validate();
  using synth_detail::Kinematics;
  const synth_detail::Profile profile(spec);
  const auto frames = static_cast<std::size_t>(std::floor(spec.duration() * kImuRateHz + 1e-9)) + 1;
  const double w = kTwoPi * spec.cadence_hz;
  const double c_surge = spec.gait_gain / (w * w);
  const double c_bob = spec.z_bob / (4.0 * w * w);

  ImuSequence seq;
  seq.samples.resize(frames);
  seq.positions.resize(frames);

  // Heading and base position integrated with RK4 on sub-steps of a frame.
  constexpr int kSub = 4;
  const double h = kImuPeriod / kSub;
  double psi = deg_to_rad(spec.initial_heading_deg), px = 0.0, py = 0.0;
  auto deriv = [&](double t, double heading) {
    const Kinematics k = profile.at(t);
    return std::array<double, 3>{k.r, k.v * std::cos(heading), k.v * std::sin(heading)};
  };

  Rng noise = make_rng(seed, "noise");
  for (std::size_t i = 0; i < frames; ++i) {
    const double t = static_cast<double>(i) * kImuPeriod;
    if (i > 0) {
      double tt = t - kImuPeriod;
      for (int s = 0; s < kSub; ++s, tt += h) {
        const auto k1 = deriv(tt, psi);
        const auto k2 = deriv(tt + 0.5 * h, psi + 0.5 * h * k1[0]);
        const auto k3 = deriv(tt + 0.5 * h, psi + 0.5 * h * k2[0]);
        const auto k4 = deriv(tt + h, psi + h * k3[0]);
        psi += h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]);
        px += h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]);
        py += h / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]);
      }
    }
    const Kinematics k = profile.at(t);
    const Vec3 head(std::cos(psi), std::sin(psi), 0.0);
    const Vec3 normal(-std::sin(psi), std::cos(psi), 0.0);

    // Surge offset s(t) = -c v(t) H(wt), H(x) = cos x + cos(2x)/8.
    const double th = w * t;
    const double H = std::cos(th) + 0.125 * std::cos(2 * th);
    const double dH = -std::sin(th) - 0.25 * std::sin(2 * th);
    const double ddH = -std::cos(th) - 0.5 * std::cos(2 * th);
    const double s0 = -c_surge * k.v * H;
    const double s1 = -c_surge * (k.dv * H + k.v * w * dH);
    const double s2 = -c_surge * (k.ddv * H + 2 * k.dv * w * dH + k.v * w * w * ddH);

    // Vertical bob z(t) = -c v(t) cos(2wt).
    const double w2 = 2 * w;
    const double z0 = -c_bob * k.v * std::cos(w2 * t);
    const double z2 = -c_bob * (k.ddv * std::cos(w2 * t) - 2 * k.dv * w2 * std::sin(w2 * t) -
                                k.v * w2 * w2 * std::cos(w2 * t));

    Vec3 accel = k.dv * head + k.v * k.r * normal;
    accel += s2 * head + 2 * s1 * k.r * normal + s0 * (k.dr * normal - k.r * k.r * head);
    accel.z() += z2;

    auto& sample = seq.samples[i];
    sample.t = t;
    sample.accel = accel;
    sample.gyro = Vec3(0.0, 0.0, k.r);
    seq.positions[i] = spec.start_position + Vec3(px, py, 0.0) + s0 * head + Vec3(0.0, 0.0, z0);
  }
  if (spec.accel_noise_std > 0.0 || spec.gyro_noise_std > 0.0) {
    for (auto& s : seq.samples) {
      for (int c = 0; c < 3; ++c) s.accel[c] += spec.accel_noise_std * standard_normal(noise);
      for (int c = 0; c < 3; ++c) s.gyro[c] += spec.gyro_noise_std * standard_normal(noise);
    }
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Sensor distribution shifts

enum class ShiftKind { SensorYawOffset, AccelBias, GyroBias, Gain };

struct ShiftSpec {
  ShiftKind kind = ShiftKind::Gain;
  double yaw_deg = 0.0;        // SensorYawOffset
  Vec3 bias = Vec3::Zero();    // AccelBias / GyroBias
  double gain = 1.0;           // Gain (both sensors)
  double onset = 0.0;          // s from the first sample
};

/// Corrupts sensor channels from `onset` on; ground truth is untouched.
inline ImuSequence inject_shift(const ImuSequence& seq, const ShiftSpec& shift) {
  if (seq.samples.empty() || shift.onset < 0.0 || shift.onset >= seq.duration()) {
    throw Error(ErrorCode::InvalidOnset, "onset " + std::to_string(shift.onset) +
                                             " s outside sequence of " +
                                             std::to_string(seq.duration()) + " s");
  }
  ImuSequence out = seq;
  const double t_on = seq.samples.front().t + shift.onset;
  const RotationZ yaw = RotationZ::from_degrees(shift.yaw_deg);
  for (auto& s : out.samples) {
    if (s.t < t_on - 1e-9) continue;
    switch (shift.kind) {
      case ShiftKind::SensorYawOffset:
        s.accel = rotate_z(yaw, s.accel);
        s.gyro = rotate_z(yaw, s.gyro);
        break;
      case ShiftKind::AccelBias: s.accel += shift.bias; break;
      case ShiftKind::GyroBias: s.gyro += shift.bias; break;
      case ShiftKind::Gain:
        s.accel *= shift.gain;
        s.gyro *= shift.gain;
        break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Named presets

struct PresetOptions {
  double duration = 60.0;
  double heading_min_deg = 0.0;  // initial heading drawn from [min, max)
  double heading_max_deg = 360.0;
};

struct Scenario {
  std::string preset;
  ScenarioSpec spec;
  std::vector<ShiftSpec> shifts;
};

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"walk_straight", "walk_turns", "stop_and_go",
                                                 "mode_switch_with_rest", "shifted_yaw30"};
  return names;
}

namespace synth_detail {

/// Appends segments from `next` until the motion covers `duration`, then
/// trims the final segment so the total is exact.
template <typename Next>
void fill_motion(ScenarioSpec& spec, double duration, Next next) {
  double total = spec.duration();
  while (total < duration) {
    MotionSegment s = next();
    total += s.duration;
    spec.motion.push_back(s);
  }
  const double excess = total - duration;
  auto& last = spec.motion.back();
  if (last.duration - excess >= spec.ramp) {
    if (last.kind == SegmentKind::Arc) last.turn_deg *= (last.duration - excess) / last.duration;
    last.duration -= excess;
  } else {
    spec.motion.pop_back();
    spec.motion.back().duration += duration - spec.duration();
  }
}

}  // namespace synth_detail

inline Scenario make_preset(const std::string& name, std::uint64_t seed,
                            const PresetOptions& opt = {}) {
  Scenario sc;
  sc.preset = name;
  auto& spec = sc.spec;
  spec.seed = seed;
  Rng rng = make_rng(seed, "preset");
  spec.initial_heading_deg = uniform(rng, opt.heading_min_deg, opt.heading_max_deg);
  spec.gait_gain = uniform(rng, 1.2, 1.8);
  spec.cadence_hz = uniform(rng, 1.8, 2.2);
  spec.motion.push_back({SegmentKind::Rest, 1.0, 0.0});

  auto line = [&](double lo, double hi) {
    return MotionSegment{SegmentKind::Line, uniform(rng, lo, hi), uniform(rng, 0.8, 1.6)};
  };
  auto arc = [&]() {
    const double sign = uniform01(rng) < 0.5 ? -1.0 : 1.0;
    return MotionSegment{SegmentKind::Arc, uniform(rng, 2.0, 4.0), uniform(rng, 0.8, 1.4),
                         sign * uniform(rng, 45.0, 120.0)};
  };
  auto rest = [&]() { return MotionSegment{SegmentKind::Rest, uniform(rng, 2.0, 4.0), 0.0}; };

  if (name == "walk_straight") {
    synth_detail::fill_motion(spec, opt.duration, [&] { return line(5.0, 15.0); });
  } else if (name == "walk_turns" || name == "shifted_yaw30") {
    bool turn = false;
    synth_detail::fill_motion(spec, opt.duration, [&] {
      turn = !turn;
      return turn ? line(3.0, 6.0) : arc();
    });
    if (name == "shifted_yaw30") {
      sc.shifts.push_back({ShiftKind::SensorYawOffset, 30.0, Vec3::Zero(), 1.0, 0.0});
    }
  } else if (name == "stop_and_go") {
    bool go = false;
    synth_detail::fill_motion(spec, opt.duration, [&] {
      go = !go;
      return go ? line(4.0, 8.0) : rest();
    });
  } else if (name == "mode_switch_with_rest") {
    int phase = 0;
    synth_detail::fill_motion(spec, opt.duration, [&] {
      const int p = phase++ % 4;
      if (p == 1 || p == 3) return rest();
      if (p == 0) {
        MotionSegment s = line(6.0, 10.0);
        s.speed = uniform(rng, 0.7, 1.0);
        return s;
      }
      MotionSegment s{SegmentKind::Sinusoid, uniform(rng, 6.0, 10.0), uniform(rng, 1.2, 1.6)};
      s.amplitude_deg = uniform(rng, 20.0, 45.0);
      s.period = uniform(rng, 3.0, 5.0);
      return s;
    });
  } else {
    throw Error(ErrorCode::InvalidSpec, "unknown preset '" + name + "'");
  }
  return sc;
}

inline ImuSequence generate(const Scenario& sc, std::uint64_t seed) {
  ImuSequence seq = gen_scenario(sc.spec, seed);
  for (const auto& sh : sc.shifts) seq = inject_shift(seq, sh);
  seq.name = sc.preset + "_" + std::to_string(seed);
  return seq;
}

inline ImuSequence generate_preset(const std::string& name, std::uint64_t seed,
                                   const PresetOptions& opt = {}) {
  return generate(make_preset(name, seed, opt), seed);
}

// ---------------------------------------------------------------------------
// JSON (sidecar provenance and `rio gen` input)

inline void to_json(nlohmann::json& j, const MotionSegment& s) {
  j = {{"kind", to_string(s.kind)}, {"duration", s.duration}, {"speed", s.speed}};
  if (s.kind == SegmentKind::Arc) j["turn_deg"] = s.turn_deg;
  if (s.kind == SegmentKind::Sinusoid) {
    j["amplitude_deg"] = s.amplitude_deg;
    j["period"] = s.period;
  }
}

inline void from_json(const nlohmann::json& j, MotionSegment& s) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    static const std::vector<std::string> keys = {"kind", "duration", "speed", "turn_deg",
                                                  "amplitude_deg", "period"};
    if (std::find(keys.begin(), keys.end(), it.key()) == keys.end())
      throw Error(ErrorCode::InvalidSpec, "unknown segment key '" + it.key() + "'");
  }
  s.kind = segment_kind_from_string(j.at("kind").get<std::string>());
  s.duration = j.at("duration").get<double>();
  s.speed = j.value("speed", 0.0);
  s.turn_deg = j.value("turn_deg", 0.0);
  s.amplitude_deg = j.value("amplitude_deg", 0.0);
  s.period = j.value("period", 4.0);
}

inline std::string to_string(ShiftKind k) {
  switch (k) {
    case ShiftKind::SensorYawOffset: return "sensor_yaw_offset";
    case ShiftKind::AccelBias: return "accel_bias";
    case ShiftKind::GyroBias: return "gyro_bias";
    case ShiftKind::Gain: return "gain";
  }
  return "?";
}

inline void to_json(nlohmann::json& j, const ShiftSpec& s) {
  j = {{"kind", to_string(s.kind)}, {"onset", s.onset}};
  switch (s.kind) {
    case ShiftKind::SensorYawOffset: j["yaw_deg"] = s.yaw_deg; break;
    case ShiftKind::AccelBias:
    case ShiftKind::GyroBias: j["bias"] = {s.bias.x(), s.bias.y(), s.bias.z()}; break;
    case ShiftKind::Gain: j["gain"] = s.gain; break;
  }
}

inline void from_json(const nlohmann::json& j, ShiftSpec& s) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "sensor_yaw_offset") s.kind = ShiftKind::SensorYawOffset;
  else if (kind == "accel_bias") s.kind = ShiftKind::AccelBias;
  else if (kind == "gyro_bias") s.kind = ShiftKind::GyroBias;
  else if (kind == "gain") s.kind = ShiftKind::Gain;
  else throw Error(ErrorCode::InvalidSpec, "unknown shift kind '" + kind + "'");
  s.onset = j.value("onset", 0.0);
  s.yaw_deg = j.value("yaw_deg", 0.0);
  s.gain = j.value("gain", 1.0);
  if (j.contains("bias")) {
    const auto b = j.at("bias").get<std::vector<double>>();
    if (b.size() != 3) throw Error(ErrorCode::InvalidSpec, "bias must have 3 components");
    s.bias = Vec3(b[0], b[1], b[2]);
  }
}

inline void to_json(nlohmann::json& j, const ScenarioSpec& s) {
  j = {{"motion", s.motion},
       {"accel_noise_std", s.accel_noise_std},
       {"gyro_noise_std", s.gyro_noise_std},
       {"initial_heading_deg", s.initial_heading_deg},
       {"start_position", {s.start_position.x(), s.start_position.y(), s.start_position.z()}},
       {"ramp", s.ramp},
       {"cadence_hz", s.cadence_hz},
       {"gait_gain", s.gait_gain},
       {"z_bob", s.z_bob},
       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, ScenarioSpec& s) {
  static const std::vector<std::string> keys = {
      "motion", "accel_noise_std", "gyro_noise_std", "initial_heading_deg", "start_position",
      "ramp",   "cadence_hz",      "gait_gain",      "z_bob",               "seed"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(keys.begin(), keys.end(), it.key()) == keys.end())
      throw Error(ErrorCode::InvalidSpec, "unknown scenario key '" + it.key() + "'");
  s.motion = j.at("motion").get<std::vector<MotionSegment>>();
  s.accel_noise_std = j.value("accel_noise_std", s.accel_noise_std);
  s.gyro_noise_std = j.value("gyro_noise_std", s.gyro_noise_std);
  s.initial_heading_deg = j.value("initial_heading_deg", s.initial_heading_deg);
  if (j.contains("start_position")) {
    const auto p = j.at("start_position").get<std::vector<double>>();
    if (p.size() != 3) throw Error(ErrorCode::InvalidSpec, "start_position must have 3 components");
    s.start_position = Vec3(p[0], p[1], p[2]);
  }
  s.ramp = j.value("ramp", s.ramp);
  s.cadence_hz = j.value("cadence_hz", s.cadence_hz);
  s.gait_gain = j.value("gait_gain", s.gait_gain);
  s.z_bob = j.value("z_bob", s.z_bob);
  s.seed = j.value("seed", s.seed);
}

inline void to_json(nlohmann::json& j, const Scenario& sc) {
  j = {{"preset", sc.preset}, {"spec", sc.spec}, {"shifts", sc.shifts}};
}

inline void from_json(const nlohmann::json& j, Scenario& sc) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() != "preset" && it.key() != "spec" && it.key() != "shifts")
      throw Error(ErrorCode::InvalidSpec, "unknown scenario file key '" + it.key() + "'");
  }
  sc.preset = j.value("preset", std::string("custom"));
  sc.spec = j.at("spec").get<ScenarioSpec>();
  sc.shifts = j.value("shifts", std::vector<ShiftSpec>{});
}

}  // namespace rio
