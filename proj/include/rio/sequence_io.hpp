#pragma once

// Sequence CSV: header t,ax,ay,az,wx,wy,wz[,px,py,pz], one row per frame.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rio/error.hpp"
#include "rio/imu.hpp"

namespace rio {

namespace io_detail {

inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline double parse_double(std::string_view s, const std::string& where) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v))
    throw Error(ErrorCode::ParseError, where + ": bad number '" + std::string(s) + "'");
  return v;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace io_detail

inline constexpr const char* kSequenceHeader = "t,ax,ay,az,wx,wy,wz";
inline constexpr const char* kSequenceHeaderGt = "t,ax,ay,az,wx,wy,wz,px,py,pz";

/// Parses sequence CSV text. Timestamps must advance at the nominal 200 Hz.
inline ImuSequence parse_sequence_csv(std::istream& in, const std::string& name = "") {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::ParseError, name + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  bool with_gt = false;
  if (line == kSequenceHeaderGt) {
    with_gt = true;
  } else if (line != kSequenceHeader) {
    throw Error(ErrorCode::ParseError, name + ": unexpected header '" + line + "'");
  }
  const std::size_t cols = with_gt ? 10 : 7;
  ImuSequence seq;
  seq.name = name;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const std::string where = name + ":" + std::to_string(row);
    const auto f = io_detail::split(line, ',');
    if (f.size() != cols) {
      throw Error(ErrorCode::ParseError, where + ": expected " + std::to_string(cols) +
                                             " fields, got " + std::to_string(f.size()));
    }
    double v[10];
    for (std::size_t i = 0; i < cols; ++i) v[i] = io_detail::parse_double(f[i], where);
    ImuSample s{v[0], Vec3(v[1], v[2], v[3]), Vec3(v[4], v[5], v[6])};
    if (!seq.samples.empty() && std::abs(s.t - seq.samples.back().t - kImuPeriod) >= 1e-4)
      throw Error(ErrorCode::ParseError, where + ": timestamps not at 200 Hz");
    seq.samples.push_back(s);
    if (with_gt) seq.positions.emplace_back(v[7], v[8], v[9]);
  }
  return seq;
}

inline ImuSequence read_sequence_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return parse_sequence_csv(in, path.stem().string());
}

inline void write_sequence_csv(std::ostream& out, const ImuSequence& seq) {
  const bool gt = seq.has_ground_truth();
  if (gt && seq.positions.size() != seq.samples.size())
    throw Error(ErrorCode::LengthMismatch, seq.name + ": positions and samples differ in length");
  out << (gt ? kSequenceHeaderGt : kSequenceHeader) << '\n';
  using io_detail::fmt;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const auto& s = seq.samples[i];
    out << fmt(s.t) << ',' << fmt(s.accel.x()) << ',' << fmt(s.accel.y()) << ','
        << fmt(s.accel.z()) << ',' << fmt(s.gyro.x()) << ',' << fmt(s.gyro.y()) << ','
        << fmt(s.gyro.z());
    if (gt) {
      const auto& p = seq.positions[i];
      out << ',' << fmt(p.x()) << ',' << fmt(p.y()) << ',' << fmt(p.z());
    }
    out << '\n';
  }
}

inline void write_sequence_csv(const std::filesystem::path& path, const ImuSequence& seq) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  write_sequence_csv(out, seq);
  if (!out) throw Error(ErrorCode::IoError, "write failed: " + path.string());
}

/// Velocity series file: header t,vx,vy,vz.
inline void write_velocity_csv(const std::filesystem::path& path, const std::vector<double>& times,
                               const std::vector<Vec3>& v) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << "t,vx,vy,vz\n";
  using io_detail::fmt;
  for (std::size_t i = 0; i < v.size(); ++i)
    out << fmt(times.at(i)) << ',' << fmt(v[i].x()) << ',' << fmt(v[i].y()) << ',' << fmt(v[i].z())
        << '\n';
}

struct VelocitySeries {
  std::vector<double> times;
  std::vector<Vec3> velocities;
};

inline VelocitySeries read_velocity_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "t,vx,vy,vz")
    throw Error(ErrorCode::ParseError, path.string() + ": unexpected header '" + line + "'");
  VelocitySeries vs;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const std::string where = path.string() + ":" + std::to_string(row);
    const auto f = io_detail::split(line, ',');
    if (f.size() != 4) throw Error(ErrorCode::ParseError, where + ": expected 4 fields");
    vs.times.push_back(io_detail::parse_double(f[0], where));
    vs.velocities.emplace_back(io_detail::parse_double(f[1], where),
                               io_detail::parse_double(f[2], where),
                               io_detail::parse_double(f[3], where));
  }
  return vs;
}

}  // namespace rio
