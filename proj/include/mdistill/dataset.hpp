#pragma once

// Synthetic labeled primitives, dataset manifests and seeded corruption views.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "mdistill/geomcore.hpp"
#include "mdistill/pcd_io.hpp"

namespace mdistill {

inline const std::vector<std::string>& known_shape_classes() {
  static const std::vector<std::string> names{"sphere", "cube", "cylinder", "torus", "cone"};
  return names;
}

struct SyntheticSpec {
  std::vector<std::string> classes{"sphere", "cube", "cylinder", "torus", "cone"};
  std::size_t points_per_cloud = 256;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  double jitter = 0.01;  // per-coordinate Gaussian sigma, clipped at 3 sigma
  double scale_min = 0.8;
  double scale_max = 1.2;
  std::uint64_t seed = 0;

  void validate() const {
    require(points_per_cloud >= 32, ErrorCode::BadSpec, "points_per_cloud must be >= 32");
    require(classes.size() >= 2, ErrorCode::BadSpec, "need at least 2 classes");
    for (std::size_t i = 0; i < classes.size(); ++i) {
      const auto& known = known_shape_classes();
      require(std::find(known.begin(), known.end(), classes[i]) != known.end(), ErrorCode::BadSpec,
              "unknown shape class '" + classes[i] + "'");
      for (std::size_t j = 0; j < i; ++j) {
        require(classes[i] != classes[j], ErrorCode::BadSpec, "duplicate class '" + classes[i] + "'");
      }
    }
    require(train_per_class >= 1 && test_per_class >= 1, ErrorCode::BadSpec, "need >= 1 cloud per class and split");
    require(jitter >= 0.0, ErrorCode::BadSpec, "jitter must be non-negative");
    require(scale_min > 0.0 && scale_max >= scale_min, ErrorCode::BadSpec, "need 0 < scale_min <= scale_max");
  }
};

struct Dataset {
  std::vector<PointCloud> clouds;
  std::vector<std::string> class_names;

  std::size_t size() const noexcept { return clouds.size(); }
  std::size_t num_classes() const noexcept { return class_names.size(); }
};

struct SplitDataset {
  Dataset train;
  Dataset test;
};

// ---------------------------------------------------------------------------
// Surface samplers. Each shape sits in canonical pose with its symmetry axis
// along z; per-cloud shape parameters are drawn from the cloud's rng so the
// classes vary in proportion, not only in scale.
// ---------------------------------------------------------------------------

namespace sampler {

inline std::vector<Vec3> sphere(std::size_t n, Rng& rng) {
  std::vector<Vec3> pts(n);
  for (auto& p : pts) {
    Vec3 v;
    do {
      v = Vec3(rng.normal(), rng.normal(), rng.normal());
    } while (v.squaredNorm() == 0.0);
    p = v.normalized();
  }
  return pts;
}

/// Box surface with half extents (a, b, c): face picked with probability
/// proportional to its area, then a uniform point on it.
inline std::vector<Vec3> box(std::size_t n, const Vec3& half, Rng& rng) {
  const double axy = half.x() * half.y(), axz = half.x() * half.z(), ayz = half.y() * half.z();
  const double total = axy + axz + ayz;
  std::vector<Vec3> pts(n);
  for (auto& p : pts) {
    const double pick = rng.uniform() * total;
    const double s = rng.uniform() < 0.5 ? -1.0 : 1.0;
    const double u = rng.uniform(-1.0, 1.0), v = rng.uniform(-1.0, 1.0);
    if (pick < axy) {
      p = Vec3(u * half.x(), v * half.y(), s * half.z());
    } else if (pick < axy + axz) {
      p = Vec3(u * half.x(), s * half.y(), v * half.z());
    } else {
      p = Vec3(s * half.x(), u * half.y(), v * half.z());
    }
  }
  return pts;
}

/// Closed cylinder (side plus both caps), area weighted.
inline std::vector<Vec3> cylinder(std::size_t n, double radius, double half_height, Rng& rng) {
  const double side = 2.0 * std::numbers::pi * radius * 2.0 * half_height;
  const double caps = 2.0 * std::numbers::pi * radius * radius;
  std::vector<Vec3> pts(n);
  for (auto& p : pts) {
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    if (rng.uniform() * (side + caps) < side) {
      p = Vec3(radius * std::cos(phi), radius * std::sin(phi), rng.uniform(-half_height, half_height));
    } else {
      const double r = radius * std::sqrt(rng.uniform());
      const double z = rng.uniform() < 0.5 ? -half_height : half_height;
      p = Vec3(r * std::cos(phi), r * std::sin(phi), z);
    }
  }
  return pts;
}

/// Torus around z with major radius R and tube radius r. Angles are drawn
/// uniformly and accepted with probability (R + r cos v) / (R + r), the
/// relative area element, so the inner rim is not oversampled.
inline std::vector<Vec3> torus(std::size_t n, double major, double minor, Rng& rng) {
  std::vector<Vec3> pts;
  pts.reserve(n);
  while (pts.size() < n) {
    const double u = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double v = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double w = major + minor * std::cos(v);
    if (rng.uniform() * (major + minor) > w) continue;
    pts.emplace_back(w * std::cos(u), w * std::sin(u), minor * std::sin(v));
  }
  return pts;
}

/// Cone with base radius r at z = -h/2 and apex at z = +h/2: lateral surface
/// plus base disk, area weighted. On the lateral surface the distance from
/// the apex is sqrt-distributed.
inline std::vector<Vec3> cone(std::size_t n, double radius, double height, Rng& rng) {
  const double slant = std::hypot(radius, height);
  const double lateral = std::numbers::pi * radius * slant;
  const double base = std::numbers::pi * radius * radius;
  std::vector<Vec3> pts(n);
  for (auto& p : pts) {
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    if (rng.uniform() * (lateral + base) < lateral) {
      const double t = std::sqrt(rng.uniform());
      p = Vec3(t * radius * std::cos(phi), t * radius * std::sin(phi), height / 2.0 - t * height);
    } else {
      const double r = radius * std::sqrt(rng.uniform());
      p = Vec3(r * std::cos(phi), r * std::sin(phi), -height / 2.0);
    }
  }
  return pts;
}

}  // namespace sampler

/// Raw (unscaled, unjittered) surface sample of a named primitive.
inline std::vector<Vec3> sample_shape(const std::string& name, std::size_t n, Rng& rng) {
  if (name == "sphere") return sampler::sphere(n, rng);
  if (name == "cube") {
    // Box with mildly unequal sides, one half extent fixed at 1.
    return sampler::box(n, Vec3(rng.uniform(0.7, 1.0), rng.uniform(0.7, 1.0), 1.0), rng);
  }
  if (name == "cylinder") return sampler::cylinder(n, rng.uniform(0.35, 0.55), rng.uniform(0.8, 1.0), rng);
  if (name == "torus") return sampler::torus(n, 1.0, rng.uniform(0.2, 0.4), rng);
  if (name == "cone") return sampler::cone(n, rng.uniform(0.5, 0.8), rng.uniform(1.4, 2.0), rng);
  throw Error(ErrorCode::BadSpec, "unknown shape class '" + name + "'");
}

/// One labeled cloud: surface sample, uniform random scale, clipped jitter,
/// then normalization to the unit sphere.
inline PointCloud make_cloud(const SyntheticSpec& spec, std::size_t class_index, Rng& rng) {
  auto pts = sample_shape(spec.classes[class_index], spec.points_per_cloud, rng);
  const double scale = rng.uniform(spec.scale_min, spec.scale_max);
  const double clip = 3.0 * spec.jitter;
  for (auto& p : pts) {
    p *= scale;
    if (spec.jitter > 0.0) {
      for (int c = 0; c < 3; ++c) p(c) += std::clamp(rng.normal(0.0, spec.jitter), -clip, clip);
    }
  }
  PointCloud cloud;
  cloud.points = std::move(pts);
  cloud.label = static_cast<int>(class_index);
  return normalize_to_unit_sphere(cloud);
}

/// Train and test splits. Cloud i of a split uses its own rng stream keyed by
/// (seed, split, i), so the splits never share a draw.
inline SplitDataset generate(const SyntheticSpec& spec) {
  spec.validate();
  SplitDataset out;
  out.train.class_names = spec.classes;
  out.test.class_names = spec.classes;
  auto fill = [&](Dataset& ds, std::uint64_t split, std::size_t per_class) {
    const std::uint64_t split_seed = derive_seed(spec.seed, split);
    std::size_t idx = 0;
    for (std::size_t c = 0; c < spec.classes.size(); ++c) {
      for (std::size_t i = 0; i < per_class; ++i, ++idx) {
        Rng rng(derive_seed(split_seed, idx));
        ds.clouds.push_back(make_cloud(spec, c, rng));
      }
    }
  };
  fill(out.train, 0, spec.train_per_class);
  fill(out.test, 1, spec.test_per_class);
  return out;
}

// ---------------------------------------------------------------------------
// Files: <dir>/classes.txt, <dir>/<split>.manifest ("path label" per line,
// paths relative to <dir>), <dir>/<split>/<index>.pcd
// ---------------------------------------------------------------------------

inline void write_split(const Dataset& ds, const std::filesystem::path& dir, const std::string& split) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / split, ec);
  require(!ec, ErrorCode::IoError, "cannot create directory " + (dir / split).string());
  std::ofstream manifest(dir / (split + ".manifest"));
  require(static_cast<bool>(manifest), ErrorCode::IoError, "cannot write " + (dir / (split + ".manifest")).string());
  char name[32];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::snprintf(name, sizeof(name), "%06zu.pcd", i);
    const std::string rel = split + "/" + name;
    save_cloud(ds.clouds[i], (dir / rel).string());
    manifest << rel << ' ' << ds.clouds[i].label.value_or(-1) << '\n';
  }
  require(static_cast<bool>(manifest), ErrorCode::IoError, "write failed for manifest");
}

inline void save_dataset(const SplitDataset& data, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorCode::IoError, "cannot create directory " + dir.string());
  std::ofstream classes(dir / "classes.txt");
  require(static_cast<bool>(classes), ErrorCode::IoError, "cannot write " + (dir / "classes.txt").string());
  for (const auto& c : data.train.class_names) classes << c << '\n';
  write_split(data.train, dir, "train");
  write_split(data.test, dir, "test");
}

inline std::vector<std::string> read_class_names(const std::filesystem::path& dir) {
  std::ifstream is(dir / "classes.txt");
  require(static_cast<bool>(is), ErrorCode::IoError, "cannot open " + (dir / "classes.txt").string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) names.push_back(line);
  }
  return names;
}

/// Loads one split through its manifest. Labels in the manifest must match
/// the label stored in each cloud file.
inline Dataset load_split(const std::filesystem::path& dir, const std::string& split) {
  Dataset ds;
  ds.class_names = read_class_names(dir);
  const auto mpath = dir / (split + ".manifest");
  std::ifstream is(mpath);
  require(static_cast<bool>(is), ErrorCode::IoError, "cannot open " + mpath.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string rel;
    long long label = -2;
    std::string extra;
    if (!(ls >> rel >> label) || (ls >> extra) || label < -1) {
      throw Error(ErrorCode::ParseError, mpath.string() + " line " + std::to_string(lineno) + ": expected 'path label'");
    }
    auto cloud = load_cloud((dir / rel).string());
    require(cloud.label.value_or(-1) == label, ErrorCode::ParseError,
            mpath.string() + " line " + std::to_string(lineno) + ": label disagrees with " + rel);
    require(label < static_cast<long long>(ds.num_classes()), ErrorCode::LabelOutOfRange,
            "label " + std::to_string(label) + " outside classes.txt");
    ds.clouds.push_back(std::move(cloud));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Corruptions
// ---------------------------------------------------------------------------

enum class Protocol { Rotation, Noise, Outlier };

inline Protocol parse_protocol(const std::string& s) {
  if (s == "rotation") return Protocol::Rotation;
  if (s == "noise") return Protocol::Noise;
  if (s == "outlier") return Protocol::Outlier;
  throw Error(ErrorCode::BadProtocol, "unknown protocol '" + s + "' (expected rotation, noise or outlier)");
}

inline std::string to_string(Protocol p) {
  switch (p) {
    case Protocol::Rotation: return "rotation";
    case Protocol::Noise: return "noise";
    case Protocol::Outlier: return "outlier";
  }
  return "?";
}

/// Sigma used to displace outlier points.
inline constexpr double kOutlierSigma = 0.1;

/// Lazily corrupted view of a dataset. `level` is the maximum rotation angle
/// in degrees, the noise sigma, or the outlier fraction. Cloud i is corrupted
/// with an rng seeded from (seed, i); level 0 returns the cloud unchanged.
class CorruptedView {
 public:
  CorruptedView(const Dataset& base, Protocol protocol, double level, std::uint64_t seed)
      : base_(&base), protocol_(protocol), level_(level), seed_(seed) {
    switch (protocol) {
      case Protocol::Rotation:
        require(level >= 0.0 && level <= 180.0, ErrorCode::BadAngle, "rotation level must be in [0, 180]");
        break;
      case Protocol::Noise:
        require(level >= 0.0, ErrorCode::NegativeSigma, "noise level must be >= 0");
        break;
      case Protocol::Outlier:
        require(level >= 0.0 && level <= 1.0, ErrorCode::BadFraction, "outlier fraction must be in [0, 1]");
        break;
    }
  }

  /// Identity view.
  explicit CorruptedView(const Dataset& base) : CorruptedView(base, Protocol::Rotation, 0.0, 0) {}

  std::size_t size() const noexcept { return base_->size(); }
  std::size_t num_classes() const noexcept { return base_->num_classes(); }
  const Dataset& base() const noexcept { return *base_; }
  Protocol protocol() const noexcept { return protocol_; }
  double level() const noexcept { return level_; }

  PointCloud at(std::size_t i) const {
    const PointCloud& c = base_->clouds.at(i);
    if (level_ == 0.0) return c;
    Rng rng(derive_seed(seed_, i));
    switch (protocol_) {
      case Protocol::Rotation: return apply_transform(c, random_rotation(level_, rng));
      case Protocol::Noise: return add_gaussian_noise(c, level_, rng);
      case Protocol::Outlier: return inject_outliers(c, level_, kOutlierSigma, rng);
    }
    return c;
  }

  /// Transform applied to cloud i under the rotation protocol.
  RigidTransform rotation_of(std::size_t i) const {
    require(protocol_ == Protocol::Rotation, ErrorCode::BadProtocol, "not a rotation view");
    if (level_ == 0.0) return {};
    Rng rng(derive_seed(seed_, i));
    return random_rotation(level_, rng);
  }

 private:
  const Dataset* base_;
  Protocol protocol_;
  double level_;
  std::uint64_t seed_;
};

/// Default grids: rotation max angle 0..30 degrees, noise sigma 0..0.1,
/// outlier fraction 0..10%.
inline std::vector<double> default_grid(Protocol p) {
  switch (p) {
    case Protocol::Rotation: return {0, 5, 10, 15, 20, 25, 30};
    case Protocol::Noise: return {0, 0.02, 0.04, 0.06, 0.08, 0.1};
    case Protocol::Outlier: return {0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.1};
  }
  return {};
}

}  // namespace mdistill
