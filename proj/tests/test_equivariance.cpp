#include <gtest/gtest.h>

#include "rio/equivariance.hpp"
#include "test_util.hpp"

namespace rio {
namespace {

using testing::random_vec;

TEST(CosineDissimilarity, ReferenceValues) {
  EXPECT_NEAR(cosine_dissimilarity(Vec3(1, 2, 3), Vec3(1, 2, 3)), -1.0, 1e-15);
  EXPECT_EQ(cosine_dissimilarity(Vec3(1, 0, 0), Vec3(0, 1, 0)), 0.0);
  EXPECT_NEAR(cosine_dissimilarity(Vec3(1, 2, 3), Vec3(-1, -2, -3)), 1.0, 1e-15);
}

TEST(CosineDissimilarity, ZeroVectorRejected) {
  try {
    cosine_dissimilarity(Vec3(1, 0, 0), Vec3(1e-10, 0, 0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ZeroVector);
  }
}

TEST(AuxLoss, ReferenceValues) {
  const RotationZ phi(0.7);
  const Vec3 v = Vec3(1.2, 0, 0);
  EXPECT_NEAR(aux_loss(v, rotate_z(phi, v), phi), -1.0, 1e-15);
  EXPECT_EQ(aux_loss(Vec3(0.3, 0, 0), Vec3(-5, 1, 2), phi), 0.0);
  EXPECT_NEAR(aux_loss(Vec3(1, 0, 0), Vec3(1, 0, 0), RotationZ::from_degrees(90)), 0.0, 1e-15);
}

TEST(AuxLoss, GateIsStrict) {
  EquivarianceConfig cfg;
  EXPECT_EQ(aux_loss(Vec3(0.5, 0, 0), Vec3(0, 1, 0), RotationZ(0.1), cfg), 0.0);
  EXPECT_NE(aux_loss(Vec3(0.5000001, 0, 0), Vec3(0, 1, 0), RotationZ(0.1), cfg), 0.0);
}

TEST(AuxLoss, MinimumAtEquivarianceAndScaleFree) {
  auto rng = make_rng(1, "aux");
  for (int i = 0; i < 500; ++i) {
    const RotationZ phi(uniform_angle(rng));
    Vec3 v = random_vec(rng, 2.0);
    if (v.norm() <= 0.6) v = v.normalized() * 0.6;
    EXPECT_NEAR(aux_loss(v, rotate_z(phi, v), phi), -1.0, 1e-12);
    const Vec3 vc = random_vec(rng);
    const double a = 0.5 + 3.0 * uniform01(rng);
    if ((a * v).norm() > 0.5) {
      EXPECT_NEAR(aux_loss(a * v, a * vc, phi), aux_loss(v, vc, phi), 1e-12);
    }
    EXPECT_GE(aux_loss(v, vc, phi), -1.0 - 1e-12);
    EXPECT_LE(aux_loss(v, vc, phi), 1.0 + 1e-12);
  }
}

TEST(ConjugatePair, ConjugateIsRotatedOriginal) {
  auto rng = make_rng(2, "w");
  const auto w = testing::random_window(rng);
  const auto pair = make_conjugate(w, RotationZ(1.1));
  const auto ref = rotate_window(RotationZ(1.1), w);
  for (std::size_t i = 0; i < kWindowFrames; ++i) {
    EXPECT_EQ(pair.conjugate.samples[i].accel, ref.samples[i].accel);
    EXPECT_EQ(pair.conjugate.samples[i].gyro, ref.samples[i].gyro);
  }
}

TEST(BatchAuxLoss, ZeroHeadGatesEverything) {
  ModelConfig cfg = compact_model_config();
  cfg.head_init_scale = 0.0;
  const auto p = init_model(cfg, 1);
  auto rng = make_rng(3, "w");
  const auto windows = testing::random_windows(rng, 6);
  const auto angles = shared_angles(6, degrees_to_radians({72, 144, 216, 288}));
  const auto r = batch_aux_loss(p, windows, angles, {}, true);
  EXPECT_EQ(r.loss, 0.0);
  EXPECT_EQ(r.gated_count, 24u);
  EXPECT_EQ(r.pair_count, 24u);
  for (const auto& g : r.grads)
    for (float v : g) EXPECT_EQ(v, 0.0f);
}

TEST(BatchAuxLoss, EquivariantOracleAttainsMinusOne) {
  const auto oracle = testing::equivariant_oracle();
  auto rng = make_rng(4, "w");
  const auto windows = testing::random_windows(rng, 32, 2.0);
  for (const auto& v : predict_velocity(oracle, windows)) ASSERT_GT(v.norm(), 0.5);
  const auto angles = shared_angles(32, degrees_to_radians({72, 144, 216, 288}));
  const auto r = batch_aux_loss(oracle, windows, angles, {}, true);
  EXPECT_NEAR(r.loss, -1.0, 1e-6);
  EXPECT_EQ(r.gated_count, 0u);
  for (const auto& g : r.grads)
    for (float v : g) EXPECT_NEAR(v, 0.0f, 1e-5);
}

TEST(BatchAuxLoss, GatedWindowsContributeZero) {
  const auto oracle = testing::equivariant_oracle();
  auto rng = make_rng(5, "w");
  auto moving = testing::random_windows(rng, 8, 2.0);
  const auto still = extract_window(testing::constant_velocity_sequence(kWindowFrames, Vec3::Zero()), 0);
  std::vector<ImuWindow> all = moving;
  all.insert(all.end(), 4, still);
  const auto angles = shared_angles(all.size(), degrees_to_radians({72, 144, 216, 288}));
  const auto r = batch_aux_loss(oracle, all, angles);
  EXPECT_EQ(r.gated_count, 16u);
  // Mean over all K*B pairs: gated pairs add exactly 0 to the numerator.
  EXPECT_NEAR(r.loss, -8.0 / 12.0, 1e-6);
}

TEST(BatchAuxLoss, SingleAngleListEqualsScalarPerWindow) {
  ModelConfig cfg = compact_model_config();
  cfg.head_init_scale = 2.0;
  const auto p = init_model(cfg, 3);
  auto rng = make_rng(6, "w");
  const auto windows = testing::random_windows(rng, 5, 2.0);
  AngleLists one(5);
  for (auto& a : one) a = {uniform_angle(rng)};
  const auto r = batch_aux_loss(p, windows, one);
  const auto v = predict_velocity(p, windows);
  double acc = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto vc = predict_velocity(p, std::vector<ImuWindow>{rotate_window(RotationZ(one[i][0]), windows[i])});
    acc += aux_loss(v[i], vc[0], RotationZ(one[i][0]));
  }
  EXPECT_NEAR(r.loss, acc / 5.0, 1e-5);
}

TEST(BatchAuxLoss, StopGradientChangesOnlyGradients) {
  ModelConfig cfg = compact_model_config();
  cfg.head_init_scale = 2.0;
  const auto p = init_model(cfg, 3);
  auto rng = make_rng(7, "w");
  const auto windows = testing::random_windows(rng, 4, 2.0);
  const auto angles = shared_angles(4, {1.0, 2.0});
  EquivarianceConfig sg;
  sg.stop_gradient_on_rotated = true;
  sg.speed_gate = 0.0;
  EquivarianceConfig both = sg;
  both.stop_gradient_on_rotated = false;
  const auto a = batch_aux_loss(p, windows, angles, both, true);
  const auto b = batch_aux_loss(p, windows, angles, sg, true);
  EXPECT_EQ(a.loss, b.loss);
  bool differs = false;
  for (std::size_t i = 0; i < a.grads.size(); ++i) differs = differs || a.grads[i] != b.grads[i];
  EXPECT_TRUE(differs);
}

TEST(BatchAuxLoss, RaggedAnglesRejected) {
  const auto p = testing::equivariant_oracle();
  auto rng = make_rng(8, "w");
  const auto windows = testing::random_windows(rng, 2, 2.0);
  AngleLists ragged = {{1.0, 2.0}, {1.0}};
  EXPECT_THROW(batch_aux_loss(p, windows, ragged), Error);
  AngleLists short_list = {{1.0}};
  EXPECT_THROW(batch_aux_loss(p, windows, short_list), Error);
}

TEST(EquivarianceConfig, Validation) {
  EquivarianceConfig c;
  EXPECT_NO_THROW(c.validate());
  c.speed_gate = -1;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.ttt_angles_deg = {0.0};
  EXPECT_THROW(c.validate(), Error);
  c.ttt_angles_deg = {360.0};
  EXPECT_NO_THROW(c.validate());
}

}  // namespace
}  // namespace rio
