#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "rio/diffcore.hpp"

namespace rio {
namespace {

using diff::Shape;
using diff::Tape;

TEST(GradCheck, EveryPrimitiveAndComposedLoss) {
  for (const auto& [name, make] : gradcheck::factories()) {
    const auto s = gradcheck::run_suite(name, make, 100, 7);
    EXPECT_EQ(s.cases, 100u);
    EXPECT_LT(s.max_rel_error, 1e-3) << name;
    EXPECT_GT(s.coords, 4 * s.skipped) << name << ": too many kink-straddling coordinates";
  }
}

TEST(EvaluateGraph, EmptyGraphIsIdentity) {
  Tape<float> t;
  std::vector<float> in = {1, 2, 3, 4};
  auto y = diff::evaluate_graph<float>(t, {}, {2, 2}, in, {});
  EXPECT_EQ(y.value(), in);
}

diff::Graph<float> small_net() {
  return [](Tape<float>&, const std::vector<diff::Var<float>>& p, diff::Var<float> x) {
    return diff::affine(diff::relu(diff::affine(x, p[0], p[1])), p[2], p[3]);
  };
}

std::vector<diff::ParamTensor> small_params() {
  auto rng = make_rng(3, "net");
  std::vector<diff::ParamTensor> ps;
  for (auto [n, s] : std::vector<std::pair<std::string, Shape>>{
           {"w1", {5, 4}}, {"b1", {5}}, {"w2", {2, 5}}, {"b2", {2}}}) {
    diff::ParamTensor p{n, s, std::vector<float>(diff::numel(s))};
    for (auto& v : p.values) v = static_cast<float>(standard_normal(rng));
    ps.push_back(p);
  }
  return ps;
}

TEST(EvaluateGraph, DeterministicAndOrderPreserving) {
  const auto params = small_params();
  auto rng = make_rng(4, "in");
  std::vector<float> in(3 * 4);
  for (auto& v : in) v = static_cast<float>(standard_normal(rng));
  Tape<float> t1, t2;
  auto a = diff::evaluate_graph(t1, params, {3, 4}, in, small_net());
  auto b = diff::evaluate_graph(t2, params, {3, 4}, in, small_net());
  EXPECT_EQ(a.value(), b.value());
  ASSERT_EQ(a.shape(), (Shape{3, 2}));
  for (std::size_t r = 0; r < 3; ++r) {
    Tape<float> t;
    std::vector<float> row(in.begin() + r * 4, in.begin() + r * 4 + 4);
    auto y = diff::evaluate_graph(t, params, {1, 4}, row, small_net());
    EXPECT_FLOAT_EQ(y.value()[0], a.value()[2 * r]);
    EXPECT_FLOAT_EQ(y.value()[1], a.value()[2 * r + 1]);
  }
}

TEST(EvaluateGraph, ShapeMismatchNamesNode) {
  const auto params = small_params();
  Tape<float> t;
  try {
    diff::evaluate_graph<float>(t, params, {2, 3}, std::vector<float>(6, 1.0f), small_net());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
    EXPECT_NE(std::string(e.what()).find("affine"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("node #"), std::string::npos);
  }
}

TEST(Backward, SumOfParametersGivesOnes) {
  Tape<float> t;
  auto p = t.parameter(0, {"p", {2, 3}, {1, 2, 3, 4, 5, 6}});
  auto g = t.backward(diff::sum(p));
  EXPECT_EQ(g[0], std::vector<float>(6, 1.0f));
}

TEST(Backward, ConstantLossGivesZeros) {
  Tape<float> t;
  auto p = t.parameter(0, {"p", {3}, {1, 2, 3}});
  (void)p;
  auto c = t.constant({1}, {5.0f});
  auto g = t.backward(diff::sum(c));
  EXPECT_EQ(g[0], std::vector<float>(3, 0.0f));
}

TEST(Backward, NonScalarLossRejected) {
  Tape<float> t;
  auto p = t.parameter(0, {"p", {3}, {1, 2, 3}});
  try {
    t.backward(p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonScalarLoss);
  }
}

TEST(Backward, SharedInputAccumulates) {
  Tape<double> t;
  auto p = t.parameter(0, {"p", {1, 2}, {3, 4}});
  auto g = t.backward(diff::sum(diff::add(p, p)));
  EXPECT_EQ(g[0], (std::vector<double>{2, 2}));
}

TEST(Adam, ZeroGradientFromFreshStateIsNoOp) {
  std::vector<diff::ParamTensor> p = {{"p", {3}, {1, -2, 3}}};
  const auto before = p;
  diff::AdamState st;
  diff::adam_step(p, {{0, 0, 0}}, st);
  EXPECT_EQ(p[0].values, before[0].values);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, ZeroLearningRateIsIdentity) {
  std::vector<diff::ParamTensor> p = {{"p", {2}, {0.5f, 1.5f}}};
  const auto before = p;
  diff::AdamState st;
  st.config.lr = 0.0;
  for (int i = 0; i < 5; ++i) diff::adam_step(p, {{1.0f, -3.0f}}, st);
  EXPECT_EQ(p[0].values, before[0].values);
}

TEST(Adam, SingleStepMatchesHandFormula) {
  const double p0 = 0.7, g = 0.3, lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  // m = (1-b1) g, v = (1-b2) g^2; mhat = g, vhat = g^2.
  const double m = (1 - b1) * g, v = (1 - b2) * g * g;
  const double expected = p0 - lr * (m / (1 - b1)) / (std::sqrt(v / (1 - b2)) + eps);
  std::vector<diff::ParamTensorT<double>> p = {{"p", {1}, {p0}}};
  diff::AdamState st;
  st.config.lr = lr;
  diff::adam_step(p, {{g}}, st);
  EXPECT_NEAR(p[0].values[0], expected, 1e-7);
}

TEST(Adam, ConstantSignStepApproachesLearningRate) {
  std::vector<diff::ParamTensorT<double>> p = {{"p", {1}, {0.0}}};
  diff::AdamState st;
  st.config.lr = 1e-3;
  double prev = 0.0, last = 0.0;
  for (int i = 0; i < 2000; ++i) {
    diff::adam_step(p, {{2.5}}, st);
    last = prev - p[0].values[0];
    prev = p[0].values[0];
  }
  EXPECT_NEAR(last, 1e-3, 1e-6);
}

TEST(Adam, ShapeMismatchRejected) {
  std::vector<diff::ParamTensor> p = {{"p", {2}, {0, 0}}};
  diff::AdamState st;
  EXPECT_THROW(diff::adam_step(p, {{1.0f}}, st), Error);
  EXPECT_THROW(diff::adam_step(p, {}, st), Error);
}

TEST(GroupNorm, NormalizedStatistics) {
  auto rng = make_rng(9, "gn");
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t B = 2, C = 8, T = 50, G = 2;
    std::vector<float> x(B * C * T);
    for (auto& v : x) v = static_cast<float>(3.0 + 4.0 * standard_normal(rng));
    Tape<float> t;
    auto xv = t.constant({B, C, T}, x);
    auto y = diff::group_norm(xv, t.constant({C}, std::vector<float>(C, 1.0f)),
                              t.constant({C}, std::vector<float>(C, 0.0f)), G);
    const std::size_t per = C / G * T;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t g = 0; g < G; ++g) {
        double s = 0, s2 = 0;
        for (std::size_t i = 0; i < per; ++i) {
          const double v = y.value()[(b * G + g) * per + i];
          s += v;
          s2 += v * v;
        }
        const double mu = s / per;
        EXPECT_LT(std::abs(mu), 1e-5);
        EXPECT_NEAR(s2 / per - mu * mu, 1.0, 1e-4);
      }
    }
  }
}

TEST(Reshape, PreservesValuesAndRejectsBadCount) {
  Tape<float> t;
  auto x = t.constant({2, 3}, {1, 2, 3, 4, 5, 6});
  auto r = diff::reshape(x, {3, 2});
  EXPECT_EQ(r.value(), x.value());
  EXPECT_THROW(diff::reshape(x, {4}), Error);
}

}  // namespace
}  // namespace rio
