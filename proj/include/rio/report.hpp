#pragma once

// Metrics reports, trajectory files and SVG plots.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rio/error.hpp"
#include "rio/sequence_io.hpp"
#include "rio/trajmetrics.hpp"

namespace rio {

struct SequenceReport {
  std::string sequence;
  std::string scenario;
  TrajMetrics metrics;
};

/// Scenario label for a sequence named "<scenario>_<index>".
inline std::string scenario_of(const std::string& name) {
  const auto pos = name.rfind('_');
  if (pos == std::string::npos || pos + 1 == name.size()) return name;
  for (std::size_t i = pos + 1; i < name.size(); ++i)
    if (name[i] < '0' || name[i] > '9') return name;
  return name.substr(0, pos);
}

inline void write_metrics_csv(std::ostream& out, const std::vector<SequenceReport>& rows) {
  using io_detail::fmt;
  out << "sequence,ate_m,rte_m,d_drift\n";
  for (const auto& r : rows)
    out << r.sequence << ',' << fmt(r.metrics.ate) << ',' << fmt(r.metrics.rte) << ','
        << fmt(r.metrics.d_drift) << '\n';
}

/// Means per scenario and overall.
inline nlohmann::json metrics_summary(const std::vector<SequenceReport>& rows) {
  auto block = [](const std::vector<const SequenceReport*>& rs) {
    double a = 0, r = 0, d = 0;
    for (const auto* x : rs) {
      a += x->metrics.ate;
      r += x->metrics.rte;
      d += x->metrics.d_drift;
    }
    const double n = static_cast<double>(rs.size());
    return nlohmann::json{{"count", rs.size()},
                          {"ate_m", rs.empty() ? 0.0 : a / n},
                          {"rte_m", rs.empty() ? 0.0 : r / n},
                          {"d_drift", rs.empty() ? 0.0 : d / n}};
  };
  std::map<std::string, std::vector<const SequenceReport*>> groups;
  std::vector<const SequenceReport*> all;
  for (const auto& r : rows) {
    groups[r.scenario].push_back(&r);
    all.push_back(&r);
  }
  nlohmann::json j;
  j["overall"] = block(all);
  j["scenarios"] = nlohmann::json::object();
  for (const auto& [name, rs] : groups) j["scenarios"][name] = block(rs);
  return j;
}

// ---------------------------------------------------------------------------
// Trajectory pair file: t,x,y,z,gt_x,gt_y,gt_z

struct TrajectoryPair {
  std::string name;
  Trajectory estimate;
  Trajectory ground_truth;
};

inline void write_trajectory_csv(const std::filesystem::path& path, const Trajectory& est,
                                 const Trajectory& gt) {
  if (est.size() != gt.size()) throw Error(ErrorCode::LengthMismatch, "trajectory lengths differ");
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  using io_detail::fmt;
  out << "t,x,y,z,gt_x,gt_y,gt_z\n";
  for (std::size_t k = 0; k < est.size(); ++k) {
    const Vec3 &e = est.positions[k], &g = gt.positions[k];
    out << fmt(gt.origin_time + double(k) / gt.rate_hz) << ',' << fmt(e.x()) << ',' << fmt(e.y())
        << ',' << fmt(e.z()) << ',' << fmt(g.x()) << ',' << fmt(g.y()) << ',' << fmt(g.z()) << '\n';
  }
}

inline TrajectoryPair read_trajectory_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "t,x,y,z,gt_x,gt_y,gt_z")
    throw Error(ErrorCode::ParseError, path.string() + ": unexpected header '" + line + "'");
  TrajectoryPair p;
  p.name = path.stem().string();
  std::vector<double> times;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const std::string where = path.string() + ":" + std::to_string(row);
    const auto f = io_detail::split(line, ',');
    if (f.size() != 7) throw Error(ErrorCode::ParseError, where + ": expected 7 fields");
    double v[7];
    for (int i = 0; i < 7; ++i) v[i] = io_detail::parse_double(f[i], where);
    times.push_back(v[0]);
    p.estimate.positions.emplace_back(v[1], v[2], v[3]);
    p.ground_truth.positions.emplace_back(v[4], v[5], v[6]);
  }
  if (times.size() < 2) throw Error(ErrorCode::TooShort, path.string() + ": fewer than 2 points");
  const double rate = 1.0 / (times[1] - times[0]);
  for (auto* t : {&p.estimate, &p.ground_truth}) {
    t->rate_hz = rate;
    t->origin_time = times[0];
  }
  return p;
}

// ---------------------------------------------------------------------------
// SVG: top-down trajectory overlay and per-step velocity error curve.

namespace svg_detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

struct Box {
  double x0, y0, w, h;  // screen rectangle
  double lo_x, hi_x, lo_y, hi_y;  // data range
  double sx(double x) const { return x0 + (x - lo_x) / (hi_x - lo_x) * w; }
  double sy(double y) const { return y0 + h - (y - lo_y) / (hi_y - lo_y) * h; }
};

inline std::string polyline(const std::vector<std::pair<double, double>>& pts, const Box& b,
                            const std::string& color, const std::string& cls, double width) {
  std::string d;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    d += (i ? " L" : "M") + num(b.sx(pts[i].first)) + ',' + num(b.sy(pts[i].second));
  }
  return "<path class=\"" + cls + "\" d=\"" + d + "\" fill=\"none\" stroke=\"" + color +
         "\" stroke-width=\"" + num(width) + "\"/>\n";
}

/// Equal-aspect range around all points with a small margin.
inline void fit_equal(Box& b, const std::vector<std::pair<double, double>>& pts) {
  double lx = 1e300, hx = -1e300, ly = 1e300, hy = -1e300;
  for (const auto& [x, y] : pts) {
    lx = std::min(lx, x);
    hx = std::max(hx, x);
    ly = std::min(ly, y);
    hy = std::max(hy, y);
  }
  const double span = std::max({hx - lx, hy - ly, 1e-6}) * 1.05;
  const double cx = 0.5 * (lx + hx), cy = 0.5 * (ly + hy);
  const double ax = span * std::max(1.0, b.w / b.h), ay = span * std::max(1.0, b.h / b.w);
  b.lo_x = cx - ax / 2;
  b.hi_x = cx + ax / 2;
  b.lo_y = cy - ay / 2;
  b.hi_y = cy + ay / 2;
}

}  // namespace svg_detail

inline const char* kPlotColors[] = {"#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

/// Overlay of every estimate with its ground truth (upper panel) and the
/// per-step velocity error |dP_est - dP_gt| * rate over time (lower panel).
inline std::string render_svg(const std::vector<TrajectoryPair>& pairs) {
  using namespace svg_detail;
  if (pairs.empty()) throw Error(ErrorCode::InvalidConfig, "plot needs at least one trajectory");
  const double W = 800, H_traj = 600, H_err = 250, pad = 50;
  Box top{pad, pad, W - 2 * pad, H_traj - 2 * pad, 0, 1, 0, 1};
  std::vector<std::pair<double, double>> all;
  for (const auto& p : pairs) {
    for (const auto* t : {&p.estimate, &p.ground_truth})
      for (const auto& q : t->positions) all.emplace_back(q.x(), q.y());
  }
  fit_equal(top, all);

  std::vector<std::vector<std::pair<double, double>>> errors;
  double t_lo = 1e300, t_hi = -1e300, e_hi = 1e-9;
  for (const auto& p : pairs) {
    std::vector<std::pair<double, double>> curve;
    const auto& e = p.estimate.positions;
    const auto& g = p.ground_truth.positions;
    const double rate = p.ground_truth.rate_hz;
    for (std::size_t k = 0; k + 1 < e.size(); ++k) {
      const double t = p.ground_truth.origin_time + double(k) / rate;
      const double err = ((e[k + 1] - e[k]) - (g[k + 1] - g[k])).norm() * rate;
      curve.emplace_back(t, err);
      t_lo = std::min(t_lo, t);
      t_hi = std::max(t_hi, t);
      e_hi = std::max(e_hi, err);
    }
    errors.push_back(std::move(curve));
  }
  if (!(t_hi > t_lo)) t_hi = t_lo + 1.0;
  const Box bottom{pad, H_traj + 10, W - 2 * pad, H_err - 2 * pad, t_lo, t_hi, 0.0, e_hi * 1.05};

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H_traj + H_err
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << pad << "\" y=\"30\">trajectories (x/y, m): dashed = ground truth</text>\n";
  s << "<rect x=\"" << top.x0 << "\" y=\"" << top.y0 << "\" width=\"" << top.w << "\" height=\""
    << top.h << "\" fill=\"none\" stroke=\"#999\"/>\n";
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const std::string color = kPlotColors[i % std::size(kPlotColors)];
    std::vector<std::pair<double, double>> gt, est;
    for (const auto& q : pairs[i].ground_truth.positions) gt.emplace_back(q.x(), q.y());
    for (const auto& q : pairs[i].estimate.positions) est.emplace_back(q.x(), q.y());
    std::string g = polyline(gt, top, "#444", "gt", 1.5);
    g.insert(g.size() - 3, " stroke-dasharray=\"6,4\"");
    s << "<g id=\"" << pairs[i].name << "\">\n" << g << polyline(est, top, color, "est", 1.5);
    s << "<text x=\"" << W - pad - 150 << "\" y=\"" << pad + 15 * (i + 1) << "\" fill=\"" << color
      << "\">" << pairs[i].name << "</text>\n</g>\n";
  }
  s << "<text x=\"" << pad << "\" y=\"" << H_traj << "\">velocity error (m/s) vs time (s), max "
    << num(e_hi) << "</text>\n";
  s << "<rect x=\"" << bottom.x0 << "\" y=\"" << bottom.y0 << "\" width=\"" << bottom.w
    << "\" height=\"" << bottom.h << "\" fill=\"none\" stroke=\"#999\"/>\n";
  for (std::size_t i = 0; i < errors.size(); ++i)
    s << polyline(errors[i], bottom, kPlotColors[i % std::size(kPlotColors)], "err", 1.0);
  s << "</svg>\n";
  return s.str();
}

}  // namespace rio
