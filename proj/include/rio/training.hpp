#pragma once

// Supervised windows and the joint (supervised + equivariance) training loop.

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <vector>

#include "rio/diffcore.hpp"
#include "rio/equivariance.hpp"
#include "rio/error.hpp"
#include "rio/imu.hpp"
#include "rio/model.hpp"
#include "rio/rng.hpp"

namespace rio {

/// Mean velocity over frames [start, start + 199]: displacement divided by
/// the elapsed time.
inline Vec3 window_target(const ImuSequence& seq, std::size_t start) {
  const std::size_t end = start + kWindowFrames - 1;
  const double dt = seq.samples[end].t - seq.samples[start].t;
  if (!(dt > 0.0)) throw Error(ErrorCode::DegenerateInput, seq.name + ": non-increasing timestamps");
  return (seq.positions[end] - seq.positions[start]) / dt;
}

inline std::size_t window_count(std::size_t frames, std::size_t stride) {
  if (frames < kWindowFrames) return 0;
  return (frames - kWindowFrames) / stride + 1;
}

namespace train_detail {
inline void check_trainable(const ImuSequence& seq, std::size_t stride) {
  if (stride == 0) throw Error(ErrorCode::InvalidConfig, "window stride must be positive");
  if (!seq.has_ground_truth()) throw Error(ErrorCode::MissingGroundTruth, seq.name + " has no positions");
  if (seq.positions.size() != seq.size())
    throw Error(ErrorCode::LengthMismatch, seq.name + ": positions and samples differ in length");
  if (seq.size() < kWindowFrames) {
    throw Error(ErrorCode::TooShort, seq.name + " has " + std::to_string(seq.size()) +
                                         " frames, need " + std::to_string(kWindowFrames));
  }
}
}  // namespace train_detail

struct WindowSet {
  std::vector<ImuWindow> windows;
  std::vector<Vec3> targets;
};

inline WindowSet make_windows(const ImuSequence& seq, std::size_t stride) {
  train_detail::check_trainable(seq, stride);
  WindowSet out;
  const std::size_t n = window_count(seq.size(), stride);
  out.windows.reserve(n);
  out.targets.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.windows.push_back(extract_window(seq, i * stride));
    out.targets.push_back(window_target(seq, i * stride));
  }
  return out;
}

/// Windows referenced by (sequence, start frame) and materialized on
/// demand, so long corpora stay compact in memory.
class WindowDataset {
 public:
  struct Ref {
    std::size_t sequence = 0;
    std::size_t start = 0;
    Vec3 target = Vec3::Zero();
  };

  WindowDataset() = default;

  WindowDataset(std::vector<ImuSequence> sequences, std::size_t stride)
      : seqs_(std::make_shared<const std::vector<ImuSequence>>(std::move(sequences))) {
    for (std::size_t s = 0; s < seqs_->size(); ++s) {
      const auto& seq = (*seqs_)[s];
      train_detail::check_trainable(seq, stride);
      for (std::size_t i = 0; i < window_count(seq.size(), stride); ++i)
        refs_.push_back({s, i * stride, window_target(seq, i * stride)});
    }
  }

  /// Wraps explicit windows and labels.
  static WindowDataset from_windows(std::vector<ImuWindow> windows, std::vector<Vec3> targets) {
    if (windows.size() != targets.size())
      throw Error(ErrorCode::LengthMismatch, "windows and targets differ in count");
    std::vector<ImuSequence> seqs(windows.size());
    WindowDataset ds;
    for (std::size_t i = 0; i < windows.size(); ++i) {
      validate_window(windows[i]);
      seqs[i].samples = std::move(windows[i].samples);
      ds.refs_.push_back({i, 0, targets[i]});
    }
    ds.seqs_ = std::make_shared<const std::vector<ImuSequence>>(std::move(seqs));
    return ds;
  }

  std::size_t size() const { return refs_.size(); }
  bool empty() const { return refs_.empty(); }
  const Ref& ref(std::size_t i) const { return refs_.at(i); }
  const Vec3& target(std::size_t i) const { return refs_.at(i).target; }
  ImuWindow window(std::size_t i) const {
    const auto& r = refs_.at(i);
    return extract_window((*seqs_)[r.sequence], r.start);
  }
  const std::vector<ImuSequence>& sequences() const { return *seqs_; }

  /// Windows of the sequences for which keep(sequence index) holds.
  template <typename Pred>
  WindowDataset subset_by_sequence(Pred keep) const {
    WindowDataset ds;
    ds.seqs_ = seqs_;
    for (const auto& r : refs_)
      if (keep(r.sequence)) ds.refs_.push_back(r);
    return ds;
  }

 private:
  std::shared_ptr<const std::vector<ImuSequence>> seqs_ =
      std::make_shared<const std::vector<ImuSequence>>();
  std::vector<Ref> refs_;
};

/// Per-sample sum of squared component errors, averaged over the batch.
inline double supervised_velocity_loss(std::span<const Vec3> pred, std::span<const Vec3> gt) {
  if (pred.size() != gt.size()) {
    throw Error(ErrorCode::ShapeMismatch, "supervised loss: " + std::to_string(pred.size()) +
                                              " predictions for " + std::to_string(gt.size()) +
                                              " targets");
  }
  if (pred.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - gt[i]).squaredNorm();
  return acc / static_cast<double>(pred.size());
}

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  diff::AdamConfig adam;
  double aux_weight = 1.0;
  std::size_t window_stride = 10;
  std::uint64_t seed = 0;
  EquivarianceConfig equivariance;
  bool gate_on_prediction = false;

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidConfig, m); };
    if (epochs == 0) fail("epochs must be positive");
    if (batch_size == 0) fail("batch_size must be positive");
    if (window_stride == 0) fail("window_stride must be positive");
    if (!(aux_weight >= 0.0)) fail("aux_weight must be >= 0");
    if (!(adam.lr >= 0.0) || !(adam.eps > 0.0) || !(adam.beta1 >= 0.0 && adam.beta1 < 1.0) ||
        !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
      fail("invalid Adam hyperparameters");
    equivariance.validate();
  }
};

struct BatchStats {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  std::size_t size = 0;
  double supervised_loss = 0.0;
  double aux_loss = 0.0;
  std::size_t pairs = 0;
  std::size_t gated = 0;
};

struct EpochStats {
  std::size_t epoch = 0;
  double supervised_loss = 0.0;  // mean over samples
  double aux_loss = 0.0;         // mean over samples; 0 when aux_weight is 0
  double gated_fraction = 0.0;
  double val_mse = 0.0;
  std::size_t batches = 0;
};

struct TrainResult {
  ModelParams params;
  double initial_val_mse = 0.0;  // before the first update
  std::vector<EpochStats> epochs;
};

struct TrainHooks {
  std::function<void(const BatchStats&)> on_batch;
  std::function<void(const EpochStats&)> on_epoch;
};

/// Seeded Fisher-Yates permutation of [0, n) for one epoch.
inline std::vector<std::size_t> shuffle_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto rng = make_rng(seed, "shuffle", epoch);
  for (std::size_t i = n; i > 1; --i) {
    auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    if (j >= i) j = i - 1;
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

/// Mean squared velocity error of `params` over a dataset (NaN if empty).
inline double validation_mse(const ModelParams& params, const WindowDataset& data) {
  if (data.empty()) return std::numeric_limits<double>::quiet_NaN();
  double acc = 0.0;
  for (std::size_t start = 0; start < data.size(); start += kPredictChunk) {
    const std::size_t end = std::min(data.size(), start + kPredictChunk);
    std::vector<ImuWindow> windows;
    windows.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) windows.push_back(data.window(i));
    const auto pred = predict_velocity(params, windows);
    for (std::size_t i = start; i < end; ++i) acc += (pred[i - start] - data.target(i)).squaredNorm();
  }
  return acc / static_cast<double>(data.size());
}

/// Joint training: mean supervised loss + aux_weight * mean gated aux loss,
/// one fresh random conjugate angle per window, one Adam step per batch.
inline TrainResult joint_train(const ModelParams& init, const WindowDataset& train,
                               const WindowDataset& val, const TrainConfig& cfg,
                               const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train.empty()) throw Error(ErrorCode::InvalidConfig, "training set is empty");
  TrainResult result;
  result.params = init;
  auto& params = result.params;
  diff::AdamState adam;
  adam.config = cfg.adam;
  result.initial_val_mse = validation_mse(params, val);

  std::size_t global_batch = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = shuffle_order(train.size(), cfg.seed, epoch);
    auto angle_rng = make_rng(cfg.seed, "angles", epoch);
    EpochStats es;
    es.epoch = epoch;
    double sup_acc = 0.0, aux_acc = 0.0;
    std::size_t pairs = 0, gated = 0;

    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size, ++global_batch) {
      const std::size_t B = std::min(cfg.batch_size, order.size() - b0);
      std::vector<ImuWindow> windows;
      std::vector<float> targets;
      std::vector<double> speeds;
      windows.reserve(B);
      targets.reserve(3 * B);
      speeds.reserve(B);
      for (std::size_t i = 0; i < B; ++i) {
        const std::size_t idx = order[b0 + i];
        windows.push_back(train.window(idx));
        const Vec3& t = train.target(idx);
        targets.insert(targets.end(), {float(t.x()), float(t.y()), float(t.z())});
        speeds.push_back(t.norm());
      }

      diff::Tape<float> tape;
      auto vars = tape.bind(params.tensors);
      auto predict = model_predictor(params.config, vars);
      auto v = predict(pack_batch(tape, std::span<const ImuWindow>(windows)));
      auto sup = diff::mse_loss(v, tape.constant({B, 3}, std::move(targets), "target"));
      auto total = sup;
      BatchStats bs{epoch, global_batch, B, double(sup.value()[0]), 0.0, 0, 0};
      if (cfg.aux_weight > 0.0) {
        AngleLists angles(B);
        for (auto& a : angles) a = {uniform_angle(angle_rng)};
        auto term = aux_from_outputs<float>(
            predict, windows, v, angles, cfg.equivariance,
            cfg.gate_on_prediction ? std::span<const double>{} : std::span<const double>(speeds));
        total = diff::add(sup, diff::scale(term.loss, cfg.aux_weight));
        bs.aux_loss = term.loss.value()[0];
        bs.pairs = term.pair_count;
        bs.gated = term.gated_count;
      }
      if (!std::isfinite(total.value()[0])) {
        throw Error(ErrorCode::NonFiniteLoss, "non-finite loss at epoch " + std::to_string(epoch) +
                                                  ", batch " + std::to_string(global_batch));
      }
      diff::adam_step(params.tensors, tape.backward(total), adam);

      sup_acc += bs.supervised_loss * double(B);
      aux_acc += bs.aux_loss * double(B);
      pairs += bs.pairs;
      gated += bs.gated;
      ++es.batches;
      if (hooks.on_batch) hooks.on_batch(bs);
    }
    es.supervised_loss = sup_acc / double(train.size());
    es.aux_loss = aux_acc / double(train.size());
    es.gated_fraction = pairs ? double(gated) / double(pairs) : 0.0;
    es.val_mse = validation_mse(params, val);
    result.epochs.push_back(es);
    if (hooks.on_epoch) hooks.on_epoch(es);
  }
  return result;
}

}  // namespace rio
