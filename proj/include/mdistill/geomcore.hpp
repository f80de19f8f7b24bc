#pragma once

// Point clouds, sampling, neighborhood queries, local reference axes,
// rigid transforms and perturbation injection. Everything here is brute
// force; clouds at this scale stay well under 10^4 points.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <numeric>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>

#include "mdistill/error.hpp"
#include "mdistill/rng.hpp"

namespace mdistill {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using IndexList = std::vector<std::size_t>;

struct PointCloud {
  std::vector<Vec3> points;
  std::optional<int> label;
  std::vector<int> per_point_labels;  // reserved for part labels

  std::size_t size() const noexcept { return points.size(); }

  bool is_valid() const {
    if (points.empty()) return false;
    if (!per_point_labels.empty() && per_point_labels.size() != points.size()) return false;
    return std::all_of(points.begin(), points.end(), [](const Vec3& p) { return p.allFinite(); });
  }
};

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  bool is_valid(double tol = 1e-9) const {
    const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
    return ortho <= tol && std::abs(rotation.determinant() - 1.0) <= tol;
  }

  RigidTransform inverse() const {
    RigidTransform inv;
    inv.rotation = rotation.transpose();
    inv.translation = -(inv.rotation * translation);
    return inv;
  }

  /// Rotation angle in degrees recovered from the trace.
  double angle_deg() const {
    const double c = std::clamp((rotation.trace() - 1.0) / 2.0, -1.0, 1.0);
    return std::acos(c) * 180.0 / std::numbers::pi;
  }
};

struct Patch {
  std::size_t center_index = 0;
  IndexList neighbor_indices;
  int level = 0;
};

/// Local reference axis plus metadata describing how trustworthy it is.
struct Lra {
  Vec3 axis = Vec3::UnitZ();
  bool degenerate = false;      // collinear/coincident neighborhood, axis is +z fallback
  bool sign_ambiguous = false;  // orientation dot product was (near) zero
};

inline RowMatrix to_matrix(const std::vector<Vec3>& pts) {
  RowMatrix m(static_cast<Eigen::Index>(pts.size()), 3);
  for (std::size_t i = 0; i < pts.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = pts[i].transpose();
  return m;
}

inline std::vector<Vec3> from_matrix(const RowMatrix& m) {
  require(m.cols() == 3, ErrorCode::ShapeMismatch, "expected n x 3 matrix");
  std::vector<Vec3> pts(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) pts[static_cast<std::size_t>(i)] = m.row(i).transpose();
  return pts;
}

inline PointCloud normalize_to_unit_sphere(const PointCloud& cloud) {
  require(cloud.size() >= 1, ErrorCode::DegenerateCloud, "empty cloud");
  Vec3 centroid = Vec3::Zero();
  for (const auto& p : cloud.points) centroid += p;
  centroid /= static_cast<double>(cloud.size());
  double max_norm = 0.0;
  for (const auto& p : cloud.points) max_norm = std::max(max_norm, (p - centroid).norm());
  require(max_norm > 0.0 && std::isfinite(max_norm), ErrorCode::DegenerateCloud,
          "all points coincide");
  PointCloud out = cloud;
  for (auto& p : out.points) p = (p - centroid) / max_norm;
  return out;
}

/// Greedy farthest point sampling from a fixed start index. Ties go to the
/// smallest index.
inline IndexList farthest_point_sample_from(const std::vector<Vec3>& points, std::size_t m,
                                            std::size_t start) {
  const std::size_t n = points.size();
  require(m >= 1 && m <= n, ErrorCode::BadCount, "fps: need 1 <= m <= n");
  require(start < n, ErrorCode::BadCount, "fps: start index out of range");
  IndexList picked;
  picked.reserve(m);
  std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
  std::size_t current = start;
  for (std::size_t step = 0; step < m; ++step) {
    picked.push_back(current);
    if (step + 1 == m) break;
    const Vec3& c = points[current];
    std::size_t best = 0;
    double best_d2 = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d2 = (points[i] - c).squaredNorm();
      if (d2 < min_d2[i]) min_d2[i] = d2;
      if (min_d2[i] > best_d2) {
        best_d2 = min_d2[i];
        best = i;
      }
    }
    current = best;
  }
  return picked;
}

inline IndexList farthest_point_sample(const std::vector<Vec3>& points, std::size_t m, Rng& rng) {
  require(m >= 1 && m <= points.size(), ErrorCode::BadCount, "fps: need 1 <= m <= n");
  const auto start = static_cast<std::size_t>(rng.uniform_index(points.size()));
  return farthest_point_sample_from(points, m, start);
}

inline IndexList farthest_point_sample(const PointCloud& cloud, std::size_t m, Rng& rng) {
  return farthest_point_sample(cloud.points, m, rng);
}

namespace detail {

inline IndexList k_smallest(std::vector<std::pair<double, std::size_t>>& dist, std::size_t k) {
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
  IndexList out(k);
  for (std::size_t j = 0; j < k; ++j) out[j] = dist[j].second;
  return out;
}

}  // namespace detail

/// k nearest rows of `points` for every row of `queries`, ascending distance,
/// equal distances ordered by index.
inline std::vector<IndexList> knn(const RowMatrix& points, const RowMatrix& queries, std::size_t k) {
  const auto n = static_cast<std::size_t>(points.rows());
  require(k >= 1 && k <= n, ErrorCode::BadCount, "knn: need 1 <= k <= n");
  require(points.cols() == queries.cols(), ErrorCode::ShapeMismatch, "knn: dimension mismatch");
  const Eigen::Index d = points.cols();
  std::vector<IndexList> result(static_cast<std::size_t>(queries.rows()));
  std::vector<std::pair<double, std::size_t>> dist(n);
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    const double* qp = queries.row(q).data();
    for (std::size_t i = 0; i < n; ++i) {
      const double* pp = points.row(static_cast<Eigen::Index>(i)).data();
      double s = 0.0;
      for (Eigen::Index c = 0; c < d; ++c) {
        const double diff = pp[c] - qp[c];
        s += diff * diff;
      }
      dist[i] = {s, i};
    }
    result[static_cast<std::size_t>(q)] = detail::k_smallest(dist, k);
  }
  return result;
}

inline std::vector<IndexList> knn(const std::vector<Vec3>& points, const std::vector<Vec3>& queries,
                                  std::size_t k) {
  return knn(to_matrix(points), to_matrix(queries), k);
}

/// Points within `radius` of `center` (ascending distance, at most max_k),
/// padded to exactly max_k by repeating the nearest hit. An empty ball falls
/// back to the globally nearest point.
inline IndexList ball_query(const std::vector<Vec3>& points, const Vec3& center, double radius,
                            std::size_t max_k) {
  require(radius > 0.0, ErrorCode::BadCount, "ball_query: radius must be positive");
  require(max_k >= 1 && !points.empty(), ErrorCode::BadCount, "ball_query: need max_k >= 1");
  const double r2 = radius * radius;
  std::vector<std::pair<double, std::size_t>> inside;
  std::pair<double, std::size_t> nearest{std::numeric_limits<double>::infinity(), 0};
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double d2 = (points[i] - center).squaredNorm();
    if (d2 <= r2) inside.emplace_back(d2, i);
    if (d2 < nearest.first) nearest = {d2, i};
  }
  if (inside.empty()) return IndexList(max_k, nearest.second);
  const std::size_t take = std::min(max_k, inside.size());
  IndexList out = detail::k_smallest(inside, take);
  out.resize(max_k, out.front());
  return out;
}

/// Normal-like axis of a neighborhood: eigenvector of the covariance with the
/// smallest eigenvalue, oriented toward the center point relative to the
/// neighbor barycenter.
inline Lra compute_lra(const std::vector<Vec3>& points, const IndexList& neighbor_indices,
                       std::size_t center_index) {
  Lra out;
  if (neighbor_indices.empty()) {
    out.degenerate = true;
    return out;
  }
  Vec3 bary = Vec3::Zero();
  for (auto i : neighbor_indices) bary += points[i];
  bary /= static_cast<double>(neighbor_indices.size());
  Mat3 cov = Mat3::Zero();
  for (auto i : neighbor_indices) {
    const Vec3 d = points[i] - bary;
    cov += d * d.transpose();
  }
  cov /= static_cast<double>(neighbor_indices.size());

  Eigen::SelfAdjointEigenSolver<Mat3> solver(cov);
  const Vec3 evals = solver.eigenvalues();  // ascending
  const double scale = evals(2);
  // Collinear or coincident neighborhoods (two vanishing eigenvalues), or a
  // smallest eigenvalue that is not separated from the next one.
  if (!(scale > 0.0) || evals(1) <= 1e-10 * scale || evals(1) - evals(0) <= 1e-9 * scale) {
    out.degenerate = true;
    return out;
  }
  Vec3 axis = solver.eigenvectors().col(0).normalized();
  const Vec3 offset = points[center_index] - bary;
  const double dot = axis.dot(offset);
  if (std::abs(dot) <= 1e-9 * std::sqrt(scale)) out.sign_ambiguous = true;
  if (dot < 0.0) {
    axis = -axis;
  } else if (dot == 0.0) {
    for (int c = 0; c < 3; ++c) {
      if (axis(c) != 0.0) {
        if (axis(c) < 0.0) axis = -axis;
        break;
      }
    }
  }
  out.axis = axis;
  return out;
}

inline PointCloud apply_transform(const PointCloud& cloud, const RigidTransform& t) {
  require(t.is_valid(), ErrorCode::NonOrthonormal, "rotation is not orthonormal with det 1");
  PointCloud out = cloud;
  for (auto& p : out.points) p = t.rotation * p + t.translation;
  return out;
}

/// Uniformly random axis on the sphere, angle uniform in [0, max_angle_deg].
inline RigidTransform random_rotation(double max_angle_deg, Rng& rng) {
  require(max_angle_deg >= 0.0 && max_angle_deg <= 180.0, ErrorCode::BadAngle,
          "max angle must lie in [0, 180] degrees");
  const double z = rng.uniform(-1.0, 1.0);
  const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double rxy = std::sqrt(std::max(0.0, 1.0 - z * z));
  const Vec3 axis(rxy * std::cos(phi), rxy * std::sin(phi), z);
  const double angle = rng.uniform() * max_angle_deg * std::numbers::pi / 180.0;
  RigidTransform t;
  t.rotation = Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
  return t;
}

inline PointCloud add_gaussian_noise(const PointCloud& cloud, double sigma, Rng& rng) {
  require(sigma >= 0.0, ErrorCode::NegativeSigma, "noise sigma must be non-negative");
  PointCloud out = cloud;
  if (sigma == 0.0) return out;
  for (auto& p : out.points) {
    for (int c = 0; c < 3; ++c) p(c) += rng.normal(0.0, sigma);
  }
  return out;
}

/// Displaces round(fraction * n) distinct, uniformly chosen points by
/// Gaussian noise of the given sigma.
inline PointCloud inject_outliers(const PointCloud& cloud, double fraction, double sigma, Rng& rng) {
  require(fraction >= 0.0 && fraction <= 1.0, ErrorCode::BadFraction, "fraction must lie in [0, 1]");
  require(sigma >= 0.0, ErrorCode::NegativeSigma, "outlier sigma must be non-negative");
  PointCloud out = cloud;
  const std::size_t n = cloud.size();
  const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  IndexList order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.uniform_index(n - i));
    std::swap(order[i], order[j]);
    Vec3& p = out.points[order[i]];
    for (int c = 0; c < 3; ++c) p(c) += rng.normal(0.0, sigma);
  }
  return out;
}

}  // namespace mdistill
