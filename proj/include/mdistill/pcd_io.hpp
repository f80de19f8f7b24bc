#pragma once

// Point-cloud text format:
//
//   pcd/1
//   n <N> d <D> label <-1|class>
//   <N lines of D whitespace-separated values, %.9g>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "mdistill/error.hpp"
#include "mdistill/geomcore.hpp"

namespace mdistill {

inline std::string format_g(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
  return buf;
}

inline void write_cloud(std::ostream& os, const PointCloud& cloud) {
  os << "pcd/1\n";
  os << "n " << cloud.size() << " d 3 label " << cloud.label.value_or(-1) << "\n";
  for (const auto& p : cloud.points) {
    os << format_g(p(0), 9) << ' ' << format_g(p(1), 9) << ' ' << format_g(p(2), 9) << '\n';
  }
}

inline PointCloud read_cloud(std::istream& is) {
  auto fail = [](std::size_t line, const std::string& msg) {
    throw Error(ErrorCode::ParseError, "line " + std::to_string(line) + ": " + msg);
  };
  std::string line;
  if (!std::getline(is, line) || line != "pcd/1") fail(1, "expected magic 'pcd/1'");

  if (!std::getline(is, line)) fail(2, "missing size header");
  std::istringstream hs(line);
  std::string kn, kd, kl, extra;
  long long n = -1, d = -1, label = -2;
  if (!(hs >> kn >> n >> kd >> d >> kl >> label) || kn != "n" || kd != "d" || kl != "label" ||
      (hs >> extra)) {
    fail(2, "malformed header, expected 'n <N> d <D> label <L>'");
  }
  if (n < 1) fail(2, "point count must be >= 1");
  if (d != 3) fail(2, "only d = 3 clouds are supported");
  if (label < -1) fail(2, "label must be -1 or a class index");

  PointCloud cloud;
  if (label >= 0) cloud.label = static_cast<int>(label);
  cloud.points.reserve(static_cast<std::size_t>(n));
  std::size_t lineno = 2;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (static_cast<long long>(cloud.points.size()) == n) fail(lineno, "more rows than header count");
    std::istringstream rs(line);
    Vec3 p;
    if (!(rs >> p(0) >> p(1) >> p(2)) || (rs >> extra)) fail(lineno, "expected 3 values");
    if (!p.allFinite()) fail(lineno, "non-finite coordinate");
    cloud.points.push_back(p);
  }
  if (static_cast<long long>(cloud.points.size()) != n) {
    fail(lineno, "header declares " + std::to_string(n) + " points, found " +
                     std::to_string(cloud.points.size()));
  }
  return cloud;
}

inline void save_cloud(const PointCloud& cloud, const std::string& path) {
  std::ofstream os(path);
  require(static_cast<bool>(os), ErrorCode::IoError, "cannot open for writing: " + path);
  write_cloud(os, cloud);
  require(static_cast<bool>(os), ErrorCode::IoError, "write failed: " + path);
}

inline PointCloud load_cloud(const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorCode::IoError, "cannot open: " + path);
  return read_cloud(is);
}

}  // namespace mdistill
