#pragma once

// Rotation-invariant patch coordinates for the teacher branch: one distance
// and seven angles per ordered neighbor, built from local reference axes.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <tuple>
#include <vector>

#include "mdistill/geomcore.hpp"

namespace mdistill {

inline constexpr std::size_t kInvariantColumns = 8;

struct InvariantPatchCoords {
  RowMatrix values;  // k x 8
  bool degenerate = false;
};

/// Unsigned angle in [0, pi] between two vectors; 0 if either is zero.
inline double vector_angle(const Vec3& a, const Vec3& b) {
  if (a.squaredNorm() == 0.0 || b.squaredNorm() == 0.0) return 0.0;
  return std::atan2(a.cross(b).norm(), a.dot(b));
}

namespace detail {

// Sign of a triple product of two unit axes and a displacement of length
// `len`. Parallel or antiparallel axes (identical neighborhoods give
// identical covariances) leave only rounding noise, which counts as zero.
inline double orientation_sign(double triple, double len) {
  return triple >= -1e-9 * len ? 1.0 : -1.0;
}

}  // namespace detail

/// LRA of every point, from its k nearest neighbors (itself included).
inline std::vector<Lra> compute_all_lras(const std::vector<Vec3>& points, std::size_t k) {
  const RowMatrix m = to_matrix(points);
  const auto nbrs = knn(m, m, std::min(k, points.size()));
  std::vector<Lra> out(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) out[i] = compute_lra(points, nbrs[i], i);
  return out;
}

/// Sorts neighbors by azimuth around `axis`. Zero azimuth is the projection
/// of the nearest neighbor with a non-vanishing projection; neighbors that
/// project onto the center (the center itself, for instance) get azimuth 0.
/// Equal azimuths are ordered by distance, then index.
inline Patch order_neighbors(const std::vector<Vec3>& points, const Patch& patch, const Vec3& axis) {
  const auto& nb = patch.neighbor_indices;
  require(!nb.empty(), ErrorCode::DegeneratePatch, "patch has no neighbors");
  const Vec3& c = points[patch.center_index];
  const Vec3 n = axis.normalized();

  const std::size_t k = nb.size();
  std::vector<Vec3> proj(k);
  std::vector<double> dist(k);
  double scale = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const Vec3 v = points[nb[i]] - c;
    proj[i] = v - n * n.dot(v);
    dist[i] = v.norm();
    scale = std::max(scale, dist[i]);
  }
  const double eps = 1e-9 * scale;

  std::size_t ref = k;
  for (std::size_t i = 0; i < k; ++i) {
    if (!(proj[i].norm() > eps)) continue;
    if (ref == k || std::tie(dist[i], nb[i]) < std::tie(dist[ref], nb[ref])) ref = i;
  }
  require(ref != k, ErrorCode::DegeneratePatch, "all neighbors project onto the patch center");
  const Vec3 r = proj[ref].normalized();

  std::vector<std::tuple<double, double, std::size_t>> keyed(k);
  for (std::size_t i = 0; i < k; ++i) {
    double az = 0.0;
    if (i != ref && proj[i].norm() > eps) {
      az = std::atan2(r.cross(proj[i]).dot(n), r.dot(proj[i]));
      if (az < 0.0) az += 2.0 * std::numbers::pi;
    }
    keyed[i] = {az, dist[i], nb[i]};
  }
  std::sort(keyed.begin(), keyed.end());

  Patch out = patch;
  for (std::size_t i = 0; i < k; ++i) out.neighbor_indices[i] = std::get<2>(keyed[i]);
  return out;
}

/// Per-row coordinates for an ordered patch (neighbor i+1 wraps to the first).
/// `lras` is indexed by point index and must cover the center and neighbors.
inline InvariantPatchCoords invariant_coords(const std::vector<Vec3>& points,
                                             const std::vector<Lra>& lras, const Patch& patch) {
  const auto& nb = patch.neighbor_indices;
  const std::size_t k = nb.size();
  InvariantPatchCoords out;
  out.values.resize(static_cast<Eigen::Index>(k), kInvariantColumns);

  const std::size_t a = patch.center_index;
  const Vec3& pa = points[a];
  const Lra& la = lras[a];
  out.degenerate = la.degenerate || la.sign_ambiguous;

  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t p = nb[i];
    const std::size_t q = nb[(i + 1) % k];
    const Lra& lp = lras[p];
    const Lra& lq = lras[q];
    out.degenerate = out.degenerate || lp.degenerate || lp.sign_ambiguous;

    const Vec3 to_center = pa - points[p];   // alpha_i -> alpha
    const Vec3 to_next = points[q] - points[p];  // alpha_i -> alpha_{i+1}
    const Vec3 next_to_center = pa - points[q];  // alpha_{i+1} -> alpha

    const double s = detail::orientation_sign(la.axis.cross(to_center).dot(lp.axis), to_center.norm());
    const double s_pair = detail::orientation_sign(lp.axis.cross(to_next).dot(lq.axis), to_next.norm());

    auto row = out.values.row(static_cast<Eigen::Index>(i));
    row(0) = to_center.norm();
    row(1) = vector_angle(lp.axis, to_center);
    row(2) = vector_angle(la.axis, to_center);
    row(3) = s * row(1);
    row(4) = vector_angle(next_to_center, to_next);
    row(5) = vector_angle(lp.axis, to_next);
    row(6) = vector_angle(lq.axis, to_next);
    row(7) = s_pair * vector_angle(lp.axis, lq.axis);
  }
  return out;
}

/// order_neighbors followed by invariant_coords, using the center's LRA.
inline InvariantPatchCoords teacher_patch_coords(const std::vector<Vec3>& points,
                                                 const std::vector<Lra>& lras, const Patch& patch,
                                                 Patch* ordered_out = nullptr) {
  const Lra& center = lras[patch.center_index];
  Patch ordered;
  bool degenerate = false;
  try {
    ordered = order_neighbors(points, patch, center.axis);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::DegeneratePatch) throw;
    ordered = patch;
    degenerate = true;
  }
  auto coords = invariant_coords(points, lras, ordered);
  coords.degenerate = coords.degenerate || degenerate || center.degenerate;
  if (ordered_out) *ordered_out = ordered;
  return coords;
}

}  // namespace mdistill
