#pragma once

// Evaluation harnesses over synthetic sequences: TTT mode comparison,
// update-iteration and training-set-size ablations, uncertainty/error rank
// correlation, and stationary-gap bookkeeping for restore coverage.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rio/ensemble.hpp"
#include "rio/error.hpp"
#include "rio/training.hpp"
#include "rio/trajmetrics.hpp"
#include "rio/ttt.hpp"

namespace rio {

namespace exp_detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// 0-based ranks; tied values share the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = 0.5 * double(i + j);
    i = j + 1;
  }
  return r;
}

}  // namespace exp_detail

/// Spearman rank correlation (Pearson on average ranks). NaN when either
/// side is constant.
inline double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::LengthMismatch, "spearman inputs differ in length");
  if (a.size() < 2) throw Error(ErrorCode::TooShort, "spearman needs at least 2 pairs");
  const auto ra = exp_detail::average_ranks(a), rb = exp_detail::average_ranks(b);
  const double mean = 0.5 * double(a.size() - 1);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - mean) * (rb[i] - mean);
    saa += (ra[i] - mean) * (ra[i] - mean);
    sbb += (rb[i] - mean) * (rb[i] - mean);
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

// ---------------------------------------------------------------------------
// TTT runs

struct TttOutcome {
  StreamResult stream;
  TrajMetrics metrics;
  double seconds = 0.0;  // run_stream only
};

/// Restores the ensemble, streams `seq` and scores the velocities.
inline TttOutcome run_and_evaluate(EnsembleState& state, const ImuSequence& seq, const TttConfig& cfg,
                                   EvalOptions eval, const TttHooks& hooks = {}) {
  state.restore();
  TttOutcome out;
  const auto t0 = std::chrono::steady_clock::now();
  out.stream = run_stream(state, seq, cfg, hooks);
  out.seconds = exp_detail::seconds_since(t0);
  eval.window_stride = cfg.sample_stride;
  out.metrics = evaluate_sequence(out.stream.velocities, seq, eval);
  return out;
}

struct TttVariant {
  std::string label;
  TttConfig config;
};

struct TttComparison {
  std::vector<std::string> labels;
  std::vector<std::vector<double>> ate;  // [variant][sequence]
  std::vector<double> seconds;           // total per variant
  std::vector<std::vector<TttEvent>> events;  // [variant], all sequences concatenated
  std::vector<std::vector<std::vector<Vec3>>> velocities;  // [variant][sequence]

  double mean_ate(std::size_t v) const {
    return std::accumulate(ate.at(v).begin(), ate.at(v).end(), 0.0) / double(ate.at(v).size());
  }
  /// Sequences where variant a scores ATE <= variant b.
  std::size_t wins(std::size_t a, std::size_t b) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < ate.at(a).size(); ++i) n += ate[a][i] <= ate.at(b)[i];
    return n;
  }
  std::size_t count(std::size_t v, TttAction action) const {
    return static_cast<std::size_t>(std::count_if(events.at(v).begin(), events.at(v).end(),
                                                  [&](const TttEvent& e) { return e.action == action; }));
  }
};

/// Every variant on every sequence, each run from the pristine ensemble.
inline TttComparison compare_ttt(EnsembleState& state, const std::vector<ImuSequence>& sequences,
                                 const std::vector<TttVariant>& variants, const EvalOptions& eval) {
  if (sequences.empty()) throw Error(ErrorCode::InvalidConfig, "no sequences to compare on");
  TttComparison c;
  for (const auto& v : variants) {
    c.labels.push_back(v.label);
    c.ate.emplace_back();
    c.seconds.push_back(0.0);
    c.events.emplace_back();
    c.velocities.emplace_back();
    for (const auto& s : sequences) {
      auto r = run_and_evaluate(state, s, v.config, eval);
      c.ate.back().push_back(r.metrics.ate);
      c.seconds.back() += r.seconds;
      c.events.back().insert(c.events.back().end(), r.stream.events.begin(), r.stream.events.end());
      c.velocities.back().push_back(std::move(r.stream.velocities));
    }
  }
  state.restore();
  return c;
}

/// One variant per update count in `counts`, otherwise `base`.
inline std::vector<TttVariant> iteration_variants(const TttConfig& base, const std::vector<std::size_t>& counts) {
  std::vector<TttVariant> v;
  for (auto k : counts) {
    TttConfig c = base;
    c.max_updates_per_batch = k;
    v.push_back({"updates=" + std::to_string(k), c});
  }
  return v;
}

/// Wall time of streaming `sequences` with every batch forced to update,
/// for each update count.
inline std::vector<double> update_timing(EnsembleState& state, const std::vector<ImuSequence>& sequences,
                                         const TttConfig& base, const std::vector<std::size_t>& counts) {
  TttHooks force;
  force.variance_override = [](std::size_t, std::span<const EnsembleEstimate> est) {
    return std::vector<double>(est.size(), 1e6);
  };
  std::vector<double> out;
  for (const auto& v : iteration_variants(base, counts)) {
    TttConfig c = v.config;
    c.mode = TttMode::Adaptive;
    double t = 0.0;
    for (const auto& s : sequences) {
      state.restore();
      const auto t0 = std::chrono::steady_clock::now();
      run_stream(state, s, c, force);
      t += exp_detail::seconds_since(t0);
    }
    out.push_back(t);
  }
  state.restore();
  return out;
}

/// Largest relative deviation of y from its least-squares line in x.
inline double max_linear_deviation(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw Error(ErrorCode::LengthMismatch, "need matching x, y");
  const double n = double(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  const double slope = sxy / sxx, icpt = my - slope * mx;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double fit = icpt + slope * x[i];
    worst = std::max(worst, std::abs(y[i] - fit) / std::abs(fit));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Uncertainty vs error

struct VarianceErrorPairs {
  std::vector<double> variance;      // ensemble scalar variance per window
  std::vector<double> squared_error; // |mean - target|^2 per window
};

/// Pristine-ensemble variance and squared velocity error for every window.
inline VarianceErrorPairs variance_error_pairs(const EnsembleState& state,
                                               const std::vector<ImuSequence>& sequences,
                                               std::size_t stride = 10,
                                               VarianceReduction reduction = VarianceReduction::Sum) {
  VarianceErrorPairs out;
  for (const auto& s : sequences) {
    const auto ws = make_windows(s, stride);
    const auto est = ensemble_predict(state, ws.windows, reduction);
    for (std::size_t k = 0; k < est.size(); ++k) {
      out.variance.push_back(est[k].scalar_variance);
      out.squared_error.push_back((est[k].mean - ws.targets[k]).squaredNorm());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training-set size

struct SizeAblationRow {
  std::size_t sequences = 0;
  double initial_val_mse = 0.0;
  double final_val_mse = 0.0;
  double mean_ate = 0.0;  // single model, no TTT
  double seconds = 0.0;   // training
};

/// Trains one model on the first n pool sequences for each n in `sizes` and
/// scores it on `test`.
inline std::vector<SizeAblationRow> training_size_ablation(
    const ModelConfig& model_cfg, const std::vector<ImuSequence>& pool, const std::vector<std::size_t>& sizes,
    const WindowDataset& val, const std::vector<ImuSequence>& test, const TrainConfig& cfg,
    const EvalOptions& eval) {
  std::vector<SizeAblationRow> rows;
  for (auto n : sizes) {
    if (n == 0 || n > pool.size())
      throw Error(ErrorCode::InvalidConfig, "training size " + std::to_string(n) + " outside the pool");
    WindowDataset train(std::vector<ImuSequence>(pool.begin(), pool.begin() + std::ptrdiff_t(n)),
                        cfg.window_stride);
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = joint_train(init_model(model_cfg, cfg.seed), train, val, cfg);
    SizeAblationRow row;
    row.sequences = n;
    row.seconds = exp_detail::seconds_since(t0);
    row.initial_val_mse = r.initial_val_mse;
    row.final_val_mse = r.epochs.empty() ? r.initial_val_mse : r.epochs.back().val_mse;
    for (const auto& s : test) {
      const auto ws = make_windows(s, eval.window_stride);
      row.mean_ate += evaluate_sequence(predict_velocity(r.params, ws.windows), s, eval).ate;
    }
    row.mean_ate /= double(test.size());
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Stationary gaps

/// Ground-truth position identical over every frame of the window.
inline bool window_stationary(const ImuSequence& seq, std::size_t start) {
  if (!seq.has_ground_truth()) throw Error(ErrorCode::InvalidConfig, seq.name + " has no ground truth");
  if (start + kWindowFrames > seq.positions.size()) throw Error(ErrorCode::TooShort, "window past the end");
  for (std::size_t f = start + 1; f < start + kWindowFrames; ++f)
    if (seq.positions[f] != seq.positions[start]) return false;
  return true;
}

/// Inclusive range of fully stationary window indices.
struct StationaryGap {
  std::size_t first_window = 0;
  std::size_t last_window = 0;
};

/// Maximal runs of stationary windows that come after motion. A leading
/// rest is not a gap between motions.
inline std::vector<StationaryGap> stationary_gaps(const ImuSequence& seq, std::size_t stride) {
  std::vector<StationaryGap> gaps;
  bool moved = false, open = false;
  const std::size_t n = window_count(seq.size(), stride);
  for (std::size_t k = 0; k < n; ++k) {
    const bool still = window_stationary(seq, k * stride);
    if (!still) {
      moved = true;
      open = false;
    } else if (moved) {
      if (!open) gaps.push_back({k, k});
      gaps.back().last_window = k;
      open = true;
    }
  }
  return gaps;
}

/// Variance override: `low` for stationary windows, the ensemble's own
/// variance elsewhere.
inline TttHooks stationary_variance_hook(const ImuSequence& seq, const TttConfig& cfg, double low = 5e-5) {
  const std::size_t n = window_count(seq.size(), cfg.sample_stride);
  auto still = std::make_shared<std::vector<bool>>(n);
  for (std::size_t k = 0; k < n; ++k) (*still)[k] = window_stationary(seq, k * cfg.sample_stride);
  TttHooks h;
  h.variance_override = [still, low, bs = cfg.batch_size](std::size_t b, std::span<const EnsembleEstimate> est) {
    std::vector<double> v;
    for (std::size_t i = 0; i < est.size(); ++i)
      v.push_back((*still).at(b * bs + i) ? low : est[i].scalar_variance);
    return v;
  };
  return h;
}

/// Fraction of gaps overlapped by at least one Restored batch.
inline double restore_coverage(const std::vector<TttEvent>& events, const std::vector<StationaryGap>& gaps,
                               std::size_t batch_size) {
  if (gaps.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t covered = 0;
  for (const auto& g : gaps) {
    for (const auto& e : events) {
      const std::size_t lo = e.batch_index * batch_size, hi = lo + e.windows;
      if (e.action == TttAction::Restored && lo <= g.last_window && g.first_window < hi) {
        ++covered;
        break;
      }
    }
  }
  return double(covered) / double(gaps.size());
}

}  // namespace rio
