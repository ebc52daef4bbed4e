#pragma once

// Rotation-equivariance self-supervision: conjugate windows, cosine
// dissimilarity and the speed-gated auxiliary loss.

#include <functional>
#include <span>
#include <vector>

#include "rio/diffcore.hpp"
#include "rio/error.hpp"
#include "rio/geometry.hpp"
#include "rio/imu.hpp"
#include "rio/model.hpp"

namespace rio {

struct EquivarianceConfig {
  double speed_gate = 0.5;  // m/s; pairs with |v| <= gate contribute 0
  std::vector<double> ttt_angles_deg = {72.0, 144.0, 216.0, 288.0};
  bool stop_gradient_on_rotated = false;

  void validate() const {
    if (!(speed_gate >= 0.0)) throw Error(ErrorCode::InvalidConfig, "speed_gate must be >= 0");
    if (ttt_angles_deg.empty()) throw Error(ErrorCode::InvalidConfig, "ttt_angles must be nonempty");
    for (double a : ttt_angles_deg) {
      if (!(a > 0.0 && a <= 360.0))
        throw Error(ErrorCode::InvalidConfig, "angle " + std::to_string(a) + " outside (0, 360]");
    }
  }
  bool operator==(const EquivarianceConfig&) const = default;
};

struct ConjugatePair {
  ImuWindow original;
  ImuWindow conjugate;
  RotationZ angle;
};

inline ConjugatePair make_conjugate(const ImuWindow& w, RotationZ angle) {
  return {w, rotate_window(angle, w), angle};
}

/// -<v1,v2> / (|v1||v2|).
inline double cosine_dissimilarity(const Vec3& v1, const Vec3& v2) {
  const double n1 = v1.norm(), n2 = v2.norm();
  if (n1 < 1e-9 || n2 < 1e-9) throw Error(ErrorCode::ZeroVector, "cosine_dissimilarity: zero vector");
  return -v1.dot(v2) / (n1 * n2);
}

inline double aux_loss(const Vec3& v, const Vec3& v_conj, RotationZ angle,
                       const EquivarianceConfig& cfg = {}) {
  if (!(v.norm() > cfg.speed_gate)) return 0.0;
  return cosine_dissimilarity(rotate_z(angle, v), v_conj);
}

/// Per-window rotation angles (radians); every window carries the same
/// number K of angles.
using AngleLists = std::vector<std::vector<double>>;

inline AngleLists shared_angles(std::size_t windows, const std::vector<double>& angles_rad) {
  return AngleLists(windows, angles_rad);
}

inline std::vector<double> degrees_to_radians(const std::vector<double>& deg) {
  std::vector<double> out;
  out.reserve(deg.size());
  for (double d : deg) out.push_back(deg_to_rad(d));
  return out;
}

template <typename S>
using Predictor = std::function<diff::Var<S>(diff::Var<S>)>;

template <typename S>
Predictor<S> model_predictor(const ModelConfig& cfg, const std::vector<diff::Var<S>>& params) {
  return [cfg, params](diff::Var<S> x) { return forward(cfg, params, x); };
}

template <typename S>
struct AuxTerm {
  diff::Var<S> loss;           // scalar, mean over all K*B pairs
  std::size_t pair_count = 0;  // K*B
  std::size_t gated_count = 0;
};

/// Auxiliary loss given the predictions `v` ([B,3]) on `windows`. Conjugate
/// windows are only evaluated for ungated rows. `gate_speeds`, when
/// nonempty, replaces |v| as the gating speed (ground truth in training).
template <typename S>
AuxTerm<S> aux_from_outputs(const Predictor<S>& predict, std::span<const ImuWindow> windows,
                            diff::Var<S> v, const AngleLists& angles,
                            const EquivarianceConfig& cfg,
                            std::span<const double> gate_speeds = {}) {
  diff::Tape<S>& tape = *v.tape;
  const std::size_t B = windows.size();
  if (angles.size() != B || v.shape() != diff::Shape{B, 3}) {
    tape.shape_error("aux_loss", std::to_string(angles.size()) + " angle lists, predictions " +
                                     diff::shape_str(v.shape()) + " for " + std::to_string(B) +
                                     " windows");
  }
  if (!gate_speeds.empty() && gate_speeds.size() != B)
    tape.shape_error("aux_loss", "gate speed count " + std::to_string(gate_speeds.size()));
  const std::size_t K = B ? angles.front().size() : 0;
  if (B && K == 0) throw Error(ErrorCode::InvalidConfig, "aux_loss: empty angle list");
  for (const auto& a : angles) {
    if (a.size() != K) tape.shape_error("aux_loss", "ragged angle lists");
  }

  const auto& vv = v.value();
  std::vector<std::size_t> live;
  for (std::size_t i = 0; i < B; ++i) {
    const double speed =
        gate_speeds.empty()
            ? std::sqrt(double(vv[3 * i]) * vv[3 * i] + double(vv[3 * i + 1]) * vv[3 * i + 1] +
                        double(vv[3 * i + 2]) * vv[3 * i + 2])
            : gate_speeds[i];
    if (speed > cfg.speed_gate) live.push_back(i);
  }

  AuxTerm<S> term;
  term.pair_count = K * B;
  term.gated_count = K * (B - live.size());
  if (live.empty()) {
    term.loss = tape.scalar(S(0));
    return term;
  }

  // Conjugates ordered angle-major: row j*L + l is window live[l] rotated by
  // its j-th angle.
  const std::size_t L = live.size();
  std::vector<ImuWindow> conj;
  conj.reserve(K * L);
  std::vector<double> flat_angles;
  flat_angles.reserve(K * L);
  for (std::size_t j = 0; j < K; ++j) {
    for (std::size_t i : live) {
      conj.push_back(rotate_window(RotationZ(angles[i][j]), windows[i]));
      flat_angles.push_back(angles[i][j]);
    }
  }
  auto v_conj = predict(pack_batch(tape, std::span<const ImuWindow>(conj)));

  std::vector<std::size_t> repeat;
  repeat.reserve(K * L);
  for (std::size_t j = 0; j < K; ++j) repeat.insert(repeat.end(), live.begin(), live.end());
  auto base = cfg.stop_gradient_on_rotated ? diff::stop_gradient(v) : v;
  auto rotated = diff::rotate_z(diff::gather_rows(base, std::move(repeat)), std::move(flat_angles));

  // A conjugate prediction with no direction has no defined cosine; such
  // pairs count as gated.
  std::vector<std::size_t> defined;
  const auto& cv = v_conj.value();
  for (std::size_t r = 0; r < K * L; ++r) {
    const double n2 = double(cv[3 * r]) * cv[3 * r] + double(cv[3 * r + 1]) * cv[3 * r + 1] +
                      double(cv[3 * r + 2]) * cv[3 * r + 2];
    if (n2 >= 1e-18) defined.push_back(r);
  }
  term.gated_count += K * L - defined.size();
  if (defined.empty()) {
    term.loss = tape.scalar(S(0));
    return term;
  }
  if (defined.size() < K * L) {
    rotated = diff::gather_rows(rotated, defined);
    v_conj = diff::gather_rows(v_conj, std::move(defined));
  }
  auto cos = diff::cosine_similarity(rotated, v_conj);
  term.loss = diff::scale(diff::sum(cos), -1.0 / static_cast<double>(K * B));
  return term;
}

struct AuxLossResult {
  double loss = 0.0;
  std::size_t pair_count = 0;
  std::size_t gated_count = 0;
  diff::GradientSet grads;  // empty unless requested
};

/// Mean gated aux loss of `params` over all (window, angle) pairs, gated on
/// the model's own predicted speed.
inline AuxLossResult batch_aux_loss(const ModelParams& params, std::span<const ImuWindow> windows,
                                    const AngleLists& angles, const EquivarianceConfig& cfg = {},
                                    bool with_grad = false) {
  diff::Tape<float> tape;
  auto vars = with_grad ? tape.bind(params.tensors) : bind_constants(tape, params.tensors);
  auto predict = model_predictor(params.config, vars);
  auto v = predict(pack_batch(tape, windows));
  auto term = aux_from_outputs<float>(predict, windows, v, angles, cfg);
  AuxLossResult r;
  r.loss = term.loss.value()[0];
  r.pair_count = term.pair_count;
  r.gated_count = term.gated_count;
  if (with_grad) r.grads = tape.backward(term.loss);
  return r;
}

}  // namespace rio
