#include <gtest/gtest.h>

#include <sstream>

#include "rio/synth.hpp"
#include "rio/ttt.hpp"
#include "test_util.hpp"

namespace rio {
namespace {

using testing::throws_code;

/// Untrained members with a head scaled so predicted speeds clear the gate.
EnsembleState random_ensemble(std::size_t M = 3, std::uint64_t seed = 1) {
  ModelConfig cfg = compact_model_config();
  cfg.head_init_scale = 0.1;
  std::vector<ModelParams> members;
  for (std::size_t m = 0; m < M; ++m) members.push_back(init_model(cfg, seed + m));
  return EnsembleState(std::move(members));
}

std::vector<ImuWindow> test_windows(std::size_t n, std::uint64_t seed = 3) {
  auto rng = make_rng(seed, "test");
  return testing::random_windows(rng, n, 2.0);
}

/// Random windows on which every member predicts a speed well above the gate.
std::vector<ImuWindow> moving_windows(const EnsembleState& s, std::size_t n) {
  auto rng = make_rng(4, "test");
  std::vector<ImuWindow> out;
  while (out.size() < n) {
    ImuWindow w = testing::random_window(rng, 0.0, 2.0);
    bool moving = true;
    for (const auto& m : s.members)
      moving = moving && predict_velocity(m, std::vector<ImuWindow>{w})[0].norm() > 1.0;
    if (moving) out.push_back(std::move(w));
  }
  return out;
}

TttHooks constant_variance(double v) {
  return {[v](std::size_t, std::span<const EnsembleEstimate> est) {
    return std::vector<double>(est.size(), v);
  }};
}

TttConfig small_config() {
  TttConfig c;
  c.batch_size = 16;
  c.ttt_lr = 1e-3;
  return c;
}

TEST(Decide, PaperExamples) {
  const TttConfig c;
  EXPECT_EQ(decide(0.03, 0.01, c), TttAction::Skipped);
  EXPECT_EQ(decide(0.5, 5e-5, c), TttAction::Restored);
  EXPECT_EQ(decide(0.5, 0.01, c), TttAction::Updated);
}

TEST(Decide, BoundaryGrid) {
  const TttConfig c;
  const double r = c.restore_threshold, s = c.stop_threshold;
  for (double mn : {r * 0.5, std::nextafter(r, 0.0), r, std::nextafter(r, 1.0), r * 2, s, s * 2}) {
    for (double mean : {r * 0.5, r, r * 2, std::nextafter(s, 0.0), s, std::nextafter(s, 1.0), s * 2}) {
      const TttAction expected = mn < r ? TttAction::Restored
                                 : mean < s ? TttAction::Skipped
                                            : TttAction::Updated;
      EXPECT_EQ(decide(mean, mn, c), expected) << mean << " " << mn;
    }
  }
}

TEST(TttConfig, Validation) {
  auto bad = [](TttConfig c) { return throws_code([&] { c.validate(); }, ErrorCode::InvalidConfig); };
  TttConfig c;
  EXPECT_NO_THROW(c.validate());
  c.restore_threshold = 0.05;
  EXPECT_TRUE(bad(c));
  c = {};
  c.max_updates_per_batch = 0;
  EXPECT_TRUE(bad(c));
  c = {};
  c.batch_size = 0;
  EXPECT_TRUE(bad(c));
  c = {};
  c.angles_deg = {};
  EXPECT_TRUE(bad(c));
}

TEST(TttBatch, SkipIsOutputIdentity) {
  EnsembleState s = random_ensemble();
  const auto windows = test_windows(16);
  const auto before = s.members;
  const auto expected = ensemble_predict(s, windows);
  const auto r = ttt_batch(s, windows, small_config(), 0, constant_variance(0.01));
  EXPECT_EQ(r.event.action, TttAction::Skipped);
  EXPECT_EQ(r.event.steps, 0u);
  EXPECT_EQ(s.members, before);
  ASSERT_EQ(r.velocities.size(), windows.size());
  for (std::size_t i = 0; i < windows.size(); ++i) EXPECT_EQ(r.velocities[i], expected[i].mean);
}

TEST(TttBatch, RestoreRecoversPristineBitwise) {
  EnsembleState s = random_ensemble();
  const auto windows = test_windows(16);
  const auto pristine_out = ensemble_predict(s, windows);
  // Adapt twice, then restore.
  for (std::size_t b = 0; b < 2; ++b) {
    const auto r = ttt_batch(s, windows, small_config(), b, constant_variance(1.0));
    ASSERT_EQ(r.event.action, TttAction::Updated);
  }
  EXPECT_FALSE(s.members == s.pristine());
  const auto r = ttt_batch(s, windows, small_config(), 2, constant_variance(9e-5));
  EXPECT_EQ(r.event.action, TttAction::Restored);
  EXPECT_EQ(s.members, s.pristine());
  for (std::size_t i = 0; i < windows.size(); ++i) EXPECT_EQ(r.velocities[i], pristine_out[i].mean);
  for (const auto& a : s.member_adam) EXPECT_EQ(a.step, 0u);
  // Idempotent.
  ttt_batch(s, windows, small_config(), 3, constant_variance(9e-5));
  EXPECT_EQ(s.members, s.pristine());
}

TEST(TttBatch, UpdateRespectsStepCap) {
  EnsembleState s = random_ensemble();
  const auto windows = test_windows(16);
  for (std::size_t cap : {1u, 3u, 5u}) {
    TttConfig c = small_config();
    c.max_updates_per_batch = cap;
    const auto r = ttt_batch(s, windows, c, 0, constant_variance(1.0));
    EXPECT_EQ(r.event.action, TttAction::Updated);
    EXPECT_EQ(r.event.steps, cap);
    EXPECT_LE(r.event.steps, c.max_updates_per_batch);
    EXPECT_TRUE(std::isfinite(r.event.aux_before));
    EXPECT_TRUE(std::isfinite(r.event.aux_after));
    for (std::size_t m = 0; m < s.size(); ++m) EXPECT_EQ(s.member_adam[m].step, cap);
  }
}

TEST(TttBatch, UpdatesLowerAuxLoss) {
  EnsembleState s = random_ensemble();
  const auto windows = test_windows(32);
  TttConfig c = small_config();
  c.batch_size = 32;
  const auto r = ttt_batch(s, windows, c, 0, constant_variance(1.0));
  EXPECT_LT(r.event.aux_after, r.event.aux_before);
}

TEST(TttBatch, OracleEnsembleIsAlreadyOptimal) {
  EnsembleState s({testing::equivariant_oracle(1.5, 0.4, 0.8), testing::equivariant_oracle(1.2, -0.3, 0.6)});
  const auto windows = moving_windows(s, 16);
  TttConfig c = small_config();
  c.mode = TttMode::Naive;
  c.ttt_lr = 1e-4;
  const auto r = ttt_batch(s, windows, c);
  EXPECT_EQ(r.event.action, TttAction::Updated);
  EXPECT_EQ(r.event.steps, 5u);
  EXPECT_NEAR(r.event.aux_before, -1.0, 1e-6);
  EXPECT_LT(std::abs(r.event.aux_after - r.event.aux_before), 1e-6);
}

TEST(TttBatch, Member0ScopeLeavesOthersUntouched) {
  EnsembleState s = random_ensemble();
  TttConfig c = small_config();
  c.ttt_update = TttUpdateScope::Member0;
  c.predictor = PredictorKind::Member0;
  const auto windows = test_windows(16);
  const auto r = ttt_batch(s, windows, c, 0, constant_variance(1.0));
  EXPECT_FALSE(s.members[0] == s.pristine()[0]);
  EXPECT_EQ(s.members[1], s.pristine()[1]);
  EXPECT_EQ(s.members[2], s.pristine()[2]);
  const auto direct = predict_velocity(s.members[0], windows);
  EXPECT_EQ(r.velocities, direct);
}

TEST(TttBatch, NonFiniteLossRestores) {
  EnsembleState s = random_ensemble();
  TttConfig c = small_config();
  c.ttt_lr = 1e38;
  const auto r = ttt_batch(s, test_windows(16), c, 4, constant_variance(1.0));
  EXPECT_EQ(r.event.action, TttAction::Restored);
  EXPECT_TRUE(r.event.non_finite);
  EXPECT_EQ(s.members, s.pristine());
  for (const auto& v : r.velocities) EXPECT_TRUE(v.allFinite());
}

TEST(TttBatch, NaiveNeverRestoresAndOffNeverChanges) {
  EnsembleState s = random_ensemble();
  const auto windows = test_windows(16);
  TttConfig c = small_config();
  c.mode = TttMode::Naive;
  EXPECT_EQ(ttt_batch(s, windows, c, 0, constant_variance(0.0)).event.action, TttAction::Updated);
  EnsembleState t = random_ensemble();
  c.mode = TttMode::Off;
  const auto r = ttt_batch(t, windows, c, 0, constant_variance(1.0));
  EXPECT_EQ(r.event.action, TttAction::Skipped);
  EXPECT_EQ(t.members, t.pristine());
}

TEST(RunStream, BatchCounting) {
  ImuSequence seq = generate_preset("walk_turns", 5, {.duration = 20.0});
  seq.samples.resize(200 + 10 * (128 * 2 - 1));
  seq.positions.resize(seq.samples.size());
  EnsembleState s = random_ensemble(2);
  TttConfig c;
  c.mode = TttMode::Off;
  const auto r = run_stream(s, seq, c);
  EXPECT_EQ(r.events.size(), 2u);
  EXPECT_EQ(r.velocities.size(), 256u);
  EXPECT_EQ(r.variances.size(), 256u);
  EXPECT_DOUBLE_EQ(r.times[0], 0.5 * 199 * kImuPeriod);
  EXPECT_DOUBLE_EQ(r.times[1] - r.times[0], 0.05);
  ImuSequence tiny = seq;
  tiny.samples.resize(150);
  EXPECT_TRUE(throws_code([&] { run_stream(s, tiny, c); }, ErrorCode::TooShort));
}

TEST(RunStream, OffModeIsEnsembleMeanAndBatchIndependent) {
  const ImuSequence seq = generate_preset("walk_turns", 6, {.duration = 12.0});
  EnsembleState s = random_ensemble(3, 7);
  TttConfig c;
  c.mode = TttMode::Off;
  c.batch_size = 128;
  const auto a = run_stream(s, seq, c);
  c.batch_size = 37;
  const auto b = run_stream(s, seq, c);
  c.batch_size = 1;
  const auto one = run_stream(s, seq, c);
  EXPECT_EQ(a.velocities, b.velocities);
  EXPECT_EQ(a.velocities, one.velocities);
  EXPECT_EQ(a.variances, b.variances);
  std::vector<ImuWindow> windows;
  for (std::size_t k = 0; k < window_count(seq.size(), 10); ++k) windows.push_back(extract_window(seq, 10 * k));
  const auto est = ensemble_predict(s, windows);
  for (std::size_t i = 0; i < est.size(); ++i) EXPECT_EQ(a.velocities[i], est[i].mean);
}

TEST(RunStream, HighMockedVarianceOnlyUpdates) {
  const ImuSequence seq = generate_preset("walk_turns", 7, {.duration = 10.0});
  EnsembleState s = random_ensemble(2);
  TttConfig c = small_config();
  c.batch_size = 32;
  c.max_updates_per_batch = 1;
  const auto r = run_stream(s, seq, c, constant_variance(0.5));
  EXPECT_GT(r.events.size(), 1u);
  for (const auto& e : r.events) {
    EXPECT_EQ(e.action, TttAction::Updated);
    EXPECT_EQ(e.steps, 1u);
  }
  // Arbitrary history, then restore recovers the snapshots.
  s.restore();
  EXPECT_EQ(s.members, s.pristine());
}

TEST(RunStream, EventActionsConsistentWithLoggedVariances) {
  const ImuSequence seq = generate_preset("stop_and_go", 8, {.duration = 30.0});
  EnsembleState s = random_ensemble(3, 11);
  TttConfig c = small_config();
  c.batch_size = 24;
  c.max_updates_per_batch = 1;
  const auto r = run_stream(s, seq, c);
  for (const auto& e : r.events) EXPECT_EQ(e.action, decide(e.mean_var, e.min_var, c));
}

TEST(RunStream, Deterministic) {
  const ImuSequence seq = generate_preset("walk_turns", 9, {.duration = 10.0});
  TttConfig c = small_config();
  c.batch_size = 32;
  c.max_updates_per_batch = 2;
  EnsembleState s1 = random_ensemble(2), s2 = random_ensemble(2);
  const auto a = run_stream(s1, seq, c, constant_variance(1.0));
  const auto b = run_stream(s2, seq, c, constant_variance(1.0));
  EXPECT_EQ(a.velocities, b.velocities);
  EXPECT_EQ(s1.members, s2.members);
}

TEST(EventsCsv, Format) {
  TttEvent up{0, TttAction::Updated, 5, 0.5, 0.01, -0.5, -0.75, false, 128};
  TttEvent sk{1, TttAction::Skipped, 0, 0.25, 0.125};
  TttEvent bad{2, TttAction::Restored, 1, 0.5, 0.5, -0.5};
  bad.non_finite = true;
  std::ostringstream out;
  write_events_csv(out, {up, sk, bad});
  EXPECT_EQ(out.str(),
            "batch,action,steps,mean_var,min_var,aux_before,aux_after\n"
            "0,updated,5,0.5,0.01,-0.5,-0.75\n"
            "1,skipped,0,0.25,0.125,nan,nan\n"
            "2,restored:nonfinite,1,0.5,0.5,-0.5,nan\n");
}

TEST(Enums, StringRoundTrip) {
  for (auto m : {TttMode::Adaptive, TttMode::Naive, TttMode::Off}) EXPECT_EQ(ttt_mode_from_string(to_string(m)), m);
  for (auto u : {TttUpdateScope::All, TttUpdateScope::Member0}) EXPECT_EQ(ttt_update_from_string(to_string(u)), u);
  for (auto p : {PredictorKind::Mean, PredictorKind::Member0}) EXPECT_EQ(predictor_from_string(to_string(p)), p);
  EXPECT_TRUE(throws_code([] { ttt_mode_from_string("eager"); }, ErrorCode::InvalidConfig));
}

}  // namespace
}  // namespace rio
