#include <gtest/gtest.h>

#include <cmath>

#include "rio/synth.hpp"
#include "rio/training.hpp"
#include "rio/trajmetrics.hpp"
#include "test_util.hpp"

namespace rio {
namespace {

using testing::throws_code;

ScenarioSpec quiet(std::vector<MotionSegment> motion) {
  ScenarioSpec s;
  s.motion = std::move(motion);
  s.accel_noise_std = 0.0;
  s.gyro_noise_std = 0.0;
  return s;
}

bool same_sequence(const ImuSequence& a, const ImuSequence& b) {
  if (a.size() != b.size() || a.positions != b.positions) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.samples[i].t != b.samples[i].t || a.samples[i].accel != b.samples[i].accel ||
        a.samples[i].gyro != b.samples[i].gyro)
      return false;
  }
  return true;
}

TEST(GenScenario, AllRestIsStill) {
  const ImuSequence seq = gen_scenario(quiet({{SegmentKind::Rest, 5.0, 0.0}}), 1);
  EXPECT_EQ(seq.size(), 1001u);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    EXPECT_EQ(seq.positions[i], seq.positions[0]);
    EXPECT_EQ(seq.samples[i].accel, Vec3::Zero());
    EXPECT_EQ(seq.samples[i].gyro, Vec3::Zero());
  }
}

TEST(GenScenario, SamplesAt200Hz) {
  const ImuSequence seq = gen_scenario(quiet({{SegmentKind::Line, 3.0, 1.0}}), 1);
  for (std::size_t i = 0; i < seq.size(); ++i) EXPECT_NEAR(seq.samples[i].t, i * 0.005, 1e-12);
  EXPECT_TRUE(is_contiguous(seq.samples));
}

/// Worst gap between the accel channel and a fourth-order second difference
/// of positions, skipping frames within two of any entry in `joints` (where
/// jerk jumps and the stencil degrades to first order).
double max_accel_residual(const ImuSequence& seq, const std::vector<std::size_t>& joints) {
  const auto& p = seq.positions;
  const double h2 = kImuPeriod * kImuPeriod;
  double worst = 0.0;
  for (std::size_t i = 2; i + 2 < seq.size(); ++i) {
    bool near_joint = false;
    for (std::size_t j : joints) near_joint |= (i + 2 >= j && i <= j + 2);
    if (near_joint) continue;
    const Vec3 fd =
        (-p[i + 2] + 16.0 * p[i + 1] - 30.0 * p[i] + 16.0 * p[i - 1] - p[i - 2]) / (12.0 * h2);
    worst = std::max(worst, (fd - seq.samples[i].accel).cwiseAbs().maxCoeff());
  }
  return worst;
}

TEST(GenScenario, LineAccelMatchesSecondDifference) {
  ScenarioSpec spec = quiet({{SegmentKind::Line, 6.0, 1.0}});
  spec.gait_gain = 0.0;
  const ImuSequence seq = gen_scenario(spec, 3);
  // Cruising at 1 m/s after the start ramp: the plain stencil is exact up
  // to rounding. Inside the ramp its h^2 error is visible, the five-point
  // one is not.
  const double h2 = kImuPeriod * kImuPeriod;
  for (std::size_t i = 103; i + 1 < seq.size(); ++i) {
    const Vec3 fd = (seq.positions[i + 1] - 2.0 * seq.positions[i] + seq.positions[i - 1]) / h2;
    ASSERT_LT((fd - seq.samples[i].accel).cwiseAbs().maxCoeff(), 1e-6) << i;
  }
  EXPECT_LT(max_accel_residual(seq, {0, 100}), 1e-6);
}

TEST(GenScenario, GaitSignatureAccelMatchesSecondDifference) {
  ScenarioSpec spec = quiet({{SegmentKind::Line, 4.0, 1.2},
                             {SegmentKind::Arc, 4.0, 1.0, 90.0},
                             {SegmentKind::Sinusoid, 6.0, 1.4, 0.0, 30.0, 3.0},
                             {SegmentKind::Rest, 2.0, 0.0}});
  spec.z_bob = 0.5;
  // Segments start at frames 0, 800, 1600, 2800; ramps last 100 frames.
  EXPECT_LT(max_accel_residual(gen_scenario(spec, 3),
                               {0, 100, 800, 900, 1600, 1700, 2800, 2900}),
            1e-5);
}

TEST(GenScenario, GyroIsHeadingRate) {
  ScenarioSpec spec = quiet({{SegmentKind::Arc, 8.0, 1.0, 180.0}, {SegmentKind::Line, 2.0, 1.0}});
  spec.gait_gain = 0.0;
  const ImuSequence seq = gen_scenario(spec, 1);
  double heading = 0.0;
  for (std::size_t i = 1; i < seq.size(); ++i)
    heading += 0.5 * (seq.samples[i - 1].gyro.z() + seq.samples[i].gyro.z()) * kImuPeriod;
  EXPECT_NEAR(rad_to_deg(heading), 180.0, 0.1);
  const Vec3 d = seq.positions.back() - seq.positions[seq.size() - 11];
  EXPECT_NEAR(std::atan2(d.y(), d.x()), std::numbers::pi, 1e-3);
}

TEST(GenScenario, DeterministicPerSeed) {
  const ScenarioSpec spec = make_preset("walk_turns", 5, {.duration = 20.0}).spec;
  EXPECT_TRUE(same_sequence(gen_scenario(spec, 9), gen_scenario(spec, 9)));
  EXPECT_FALSE(same_sequence(gen_scenario(spec, 9), gen_scenario(spec, 10)));
}

TEST(GenScenario, RestSegmentsHaveZeroSpeed) {
  const ScenarioSpec spec = quiet({{SegmentKind::Line, 3.0, 1.2},
                                   {SegmentKind::Rest, 3.0, 0.0},
                                   {SegmentKind::Line, 3.0, 1.2}});
  const ImuSequence seq = gen_scenario(spec, 1);
  // After the blend ramp of the rest segment the body is still.
  for (std::size_t i = 720; i < 1200; ++i) EXPECT_EQ(seq.positions[i], seq.positions[719]) << i;
  const auto ws = make_windows(seq, 10);
  std::size_t still = 0;
  for (std::size_t k = 0; k < ws.targets.size(); ++k) {
    const std::size_t s = 10 * k;
    if (s >= 700 && s + 199 < 1200) {
      EXPECT_EQ(ws.targets[k].norm(), 0.0);
      ++still;
    }
  }
  EXPECT_GT(still, 20u);
}

TEST(GenScenario, InvalidSpecs) {
  auto bad = [](ScenarioSpec s) {
    return throws_code([&] { gen_scenario(s, 0); }, ErrorCode::InvalidSpec);
  };
  EXPECT_TRUE(bad(quiet({})));
  EXPECT_TRUE(bad(quiet({{SegmentKind::Line, -1.0, 1.0}})));
  EXPECT_TRUE(bad(quiet({{SegmentKind::Rest, 2.0, 1.0}})));
  EXPECT_TRUE(bad(quiet({{SegmentKind::Line, 2.0, -1.0}})));
  ScenarioSpec noisy = quiet({{SegmentKind::Line, 2.0, 1.0}});
  noisy.accel_noise_std = -0.1;
  EXPECT_TRUE(bad(noisy));
}

TEST(GenScenario, NoiseMatchesConfiguredStd) {
  ScenarioSpec spec = quiet({{SegmentKind::Rest, 50.0, 0.0}});
  spec.accel_noise_std = 0.05;
  spec.gyro_noise_std = 0.005;
  const ImuSequence seq = gen_scenario(spec, 2);
  double sa = 0, sg = 0;
  for (const auto& s : seq.samples) {
    sa += s.accel.squaredNorm();
    sg += s.gyro.squaredNorm();
  }
  const double n = 3.0 * double(seq.size());
  EXPECT_NEAR(std::sqrt(sa / n), 0.05, 0.002);
  EXPECT_NEAR(std::sqrt(sg / n), 0.005, 0.0002);
}

/// Double integration of the accel channel from the known initial velocity,
/// trapezoidal in both steps.
Trajectory dead_reckon(const ImuSequence& seq, const Vec3& v0) {
  Trajectory t;
  t.rate_hz = kImuRateHz;
  Vec3 p = seq.positions.front(), v = v0;
  t.positions.push_back(p);
  for (std::size_t i = 1; i < seq.size(); ++i) {
    const Vec3 v_next = v + 0.5 * (seq.samples[i - 1].accel + seq.samples[i].accel) * kImuPeriod;
    p += 0.5 * (v + v_next) * kImuPeriod;
    v = v_next;
    t.positions.push_back(p);
  }
  return t;
}

TEST(GenScenario, PerfectSensorDoubleIntegrationRecoversPath) {
  for (const char* preset : {"walk_straight", "walk_turns", "stop_and_go", "mode_switch_with_rest"}) {
    Scenario sc = make_preset(preset, 11, {.duration = 60.0});
    sc.spec.accel_noise_std = 0.0;
    sc.spec.gyro_noise_std = 0.0;
    const ImuSequence seq = generate(sc, 11);
    // Every preset begins at rest.
    const Vec3 v0 = (seq.positions[1] - seq.positions[0]) / kImuPeriod;
    EXPECT_LT(v0.norm(), 1e-9);
    Trajectory gt;
    gt.rate_hz = kImuRateHz;
    gt.positions = seq.positions;
    const Trajectory est = dead_reckon(seq, Vec3::Zero());
    EXPECT_LT(d_drift(est, gt), 0.01) << preset;
  }
}

TEST(InjectShift, IdentityShiftsLeaveSequenceUnchanged) {
  const ImuSequence seq = generate_preset("walk_turns", 3, {.duration = 10.0});
  EXPECT_TRUE(same_sequence(inject_shift(seq, {ShiftKind::Gain, 0.0, Vec3::Zero(), 1.0, 0.0}), seq));
  EXPECT_TRUE(same_sequence(inject_shift(seq, {ShiftKind::AccelBias, 0.0, Vec3::Zero(), 1.0, 0.0}), seq));
  EXPECT_TRUE(same_sequence(inject_shift(seq, {ShiftKind::GyroBias, 0.0, Vec3::Zero(), 1.0, 0.0}), seq));
}

TEST(InjectShift, YawOffsetEqualsWindowRotation) {
  const ImuSequence seq = generate_preset("walk_turns", 4, {.duration = 10.0});
  const ImuSequence shifted = inject_shift(seq, {ShiftKind::SensorYawOffset, 30.0, Vec3::Zero(), 1.0, 0.0});
  const RotationZ r = RotationZ::from_degrees(30.0);
  for (std::size_t start : {0u, 400u, 1600u}) {
    const ImuWindow a = extract_window(shifted, start);
    const ImuWindow b = rotate_window(r, extract_window(seq, start));
    for (std::size_t i = 0; i < kWindowFrames; ++i) {
      EXPECT_EQ(a.samples[i].accel, b.samples[i].accel);
      EXPECT_EQ(a.samples[i].gyro, b.samples[i].gyro);
    }
  }
  EXPECT_EQ(shifted.positions, seq.positions);
}

TEST(InjectShift, AccelBiasAfterOnsetOnly) {
  const ImuSequence seq = generate_preset("walk_straight", 5, {.duration = 10.0});
  const Vec3 b(0.3, -0.2, 0.1);
  const ImuSequence shifted = inject_shift(seq, {ShiftKind::AccelBias, 0.0, b, 1.0, 4.0});
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const Vec3 d = shifted.samples[i].accel - seq.samples[i].accel;
    if (seq.samples[i].t < 4.0 - 1e-9) {
      EXPECT_EQ(d, Vec3::Zero());
    } else {
      EXPECT_LT((d - b).norm(), 1e-12);
    }
    EXPECT_EQ(shifted.samples[i].gyro, seq.samples[i].gyro);
  }
  EXPECT_EQ(shifted.positions, seq.positions);
}

TEST(InjectShift, BiasShiftsCompose) {
  const ImuSequence seq = generate_preset("walk_turns", 6, {.duration = 8.0});
  const Vec3 b1(0.1, 0.2, -0.3), b2(-0.05, 0.4, 0.2);
  for (ShiftKind kind : {ShiftKind::AccelBias, ShiftKind::GyroBias}) {
    const ImuSequence twice =
        inject_shift(inject_shift(seq, {kind, 0.0, b1, 1.0, 2.0}), {kind, 0.0, b2, 1.0, 2.0});
    const ImuSequence once = inject_shift(seq, {kind, 0.0, b1 + b2, 1.0, 2.0});
    for (std::size_t i = 0; i < seq.size(); ++i) {
      EXPECT_LT((twice.samples[i].accel - once.samples[i].accel).norm(), 1e-12);
      EXPECT_LT((twice.samples[i].gyro - once.samples[i].gyro).norm(), 1e-12);
    }
  }
}

TEST(InjectShift, GainScalesBothSensors) {
  const ImuSequence seq = generate_preset("walk_turns", 7, {.duration = 5.0});
  const ImuSequence g = inject_shift(seq, {ShiftKind::Gain, 0.0, Vec3::Zero(), 1.5, 0.0});
  for (std::size_t i = 0; i < seq.size(); ++i) {
    EXPECT_EQ(g.samples[i].accel, 1.5 * seq.samples[i].accel);
    EXPECT_EQ(g.samples[i].gyro, 1.5 * seq.samples[i].gyro);
  }
}

TEST(InjectShift, OnsetOutsideSequence) {
  const ImuSequence seq = generate_preset("walk_turns", 8, {.duration = 5.0});
  const ShiftSpec late{ShiftKind::Gain, 0.0, Vec3::Zero(), 2.0, 5.0};
  const ShiftSpec early{ShiftKind::Gain, 0.0, Vec3::Zero(), 2.0, -1.0};
  EXPECT_TRUE(throws_code([&] { inject_shift(seq, late); }, ErrorCode::InvalidOnset));
  EXPECT_TRUE(throws_code([&] { inject_shift(seq, early); }, ErrorCode::InvalidOnset));
}

TEST(Presets, AllNamesGenerateRequestedDuration) {
  for (const auto& name : preset_names()) {
    const ImuSequence seq = generate_preset(name, 2, {.duration = 45.0});
    EXPECT_EQ(seq.size(), 9001u) << name;
    EXPECT_TRUE(seq.has_ground_truth());
    EXPECT_EQ(seq.name, name + "_2");
  }
  EXPECT_TRUE(throws_code([] { make_preset("jog", 1); }, ErrorCode::InvalidSpec));
}

TEST(Presets, ShiftedYaw30CarriesShiftAndSharesPath) {
  const Scenario a = make_preset("walk_turns", 3), b = make_preset("shifted_yaw30", 3);
  ASSERT_EQ(b.shifts.size(), 1u);
  EXPECT_EQ(b.shifts[0].kind, ShiftKind::SensorYawOffset);
  EXPECT_EQ(b.shifts[0].yaw_deg, 30.0);
  EXPECT_EQ(generate(a, 3).positions, generate(b, 3).positions);
}

TEST(Presets, ModeSwitchHasRestGapsBetweenModes) {
  const Scenario sc = make_preset("mode_switch_with_rest", 4, {.duration = 120.0});
  int rests = 0;
  for (std::size_t i = 1; i < sc.spec.motion.size(); ++i) {
    if (sc.spec.motion[i].kind == SegmentKind::Rest) {
      ++rests;
      ASSERT_GE(sc.spec.motion[i].duration, 2.0);
    }
  }
  EXPECT_GE(rests, 3);
}

TEST(Presets, HeadingSector) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Scenario sc = make_preset("walk_turns", s, {.duration = 30.0, .heading_min_deg = 10.0, .heading_max_deg = 20.0});
    EXPECT_GE(sc.spec.initial_heading_deg, 10.0);
    EXPECT_LT(sc.spec.initial_heading_deg, 20.0);
  }
}

TEST(Presets, SpecJsonRoundTrip) {
  const Scenario sc = make_preset("mode_switch_with_rest", 9, {.duration = 40.0});
  nlohmann::json j = sc;
  const Scenario back = j.get<Scenario>();
  EXPECT_TRUE(same_sequence(generate(back, 9), generate(sc, 9)));
}

}  // namespace
}  // namespace rio
