#pragma once

// Manifold-mapping building blocks shared by the teacher and student
// encoders. Per-cloud geometry (sampled centers, neighbor sets, invariant
// coordinates) is computed once from background coordinates and consumed by
// both branches, so patch (level, center) pairs correspond one to one.

#include <cmath>
#include <string>
#include <vector>

#include "mdistill/diffcore.hpp"
#include "mdistill/geomcore.hpp"
#include "mdistill/teacherfeat.hpp"

namespace mdistill {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct LevelConfig {
  std::size_t centers = 128;         // m
  std::size_t neighbors = 16;        // k (teacher kNN, ball-query width, alignment patch size)
  std::size_t feature_neighbors = 0; // k for feature-space patches, 0 = same as neighbors
  std::vector<double> radii{0.2, 0.4};
  std::vector<std::size_t> channels{64, 64};  // MLP widths; back() is the level's output width

  std::size_t out_channels() const { return channels.back(); }
  std::size_t feature_k() const { return feature_neighbors == 0 ? neighbors : feature_neighbors; }
};

struct EncoderConfig {
  std::vector<LevelConfig> levels{
      {128, 16, 0, {0.2, 0.4}, {64, 64}},
      {64, 16, 0, {0.4, 0.8}, {128, 128}},
      {16, 16, 0, {0.8, 1.6}, {256, 256}},
  };
  double rank_fraction = 0.25;
  std::size_t head_hidden = 64;
  bool layer_norm = true;

  std::size_t rank_for(std::size_t channels) const {
    return static_cast<std::size_t>(std::floor(rank_fraction * static_cast<double>(channels)));
  }

  void validate(std::size_t points_per_cloud) const {
    require(!levels.empty(), ErrorCode::BadConfig, "encoder needs at least one level");
    std::size_t prev = points_per_cloud;
    for (std::size_t i = 0; i < levels.size(); ++i) {
      const auto& l = levels[i];
      const std::string at = "level " + std::to_string(i) + ": ";
      require(l.centers >= 1 && l.centers <= prev, ErrorCode::BadConfig, at + "centers must be in [1, previous count]");
      require(l.neighbors >= 1 && l.neighbors <= prev, ErrorCode::BadConfig, at + "neighbors must be in [1, previous count]");
      require(l.feature_k() <= prev, ErrorCode::BadConfig, at + "feature neighbors exceed previous count");
      require(!l.radii.empty(), ErrorCode::BadConfig, at + "need at least one radius");
      for (std::size_t r = 0; r < l.radii.size(); ++r) {
        require(l.radii[r] > 0.0 && (r == 0 || l.radii[r] > l.radii[r - 1]), ErrorCode::BadConfig,
                at + "radii must be positive and strictly increasing");
      }
      require(!l.channels.empty(), ErrorCode::BadConfig, at + "need at least one channel width");
      require(l.out_channels() % l.radii.size() == 0, ErrorCode::BadConfig,
              at + "output channels must divide evenly across radii");
      const std::size_t r = rank_for(l.out_channels());
      require(r >= 1 && 2 * r < l.out_channels(), ErrorCode::BadConfig,
              at + "rank floor(r_fraction*C) must satisfy 1 <= r < C/2");
      prev = l.centers;
    }
  }
};

// ---------------------------------------------------------------------------
// Shared per-cloud geometry
// ---------------------------------------------------------------------------

struct LevelGeometry {
  std::vector<Vec3> input_points;   // points this level samples from
  IndexList centers;                // m indices into input_points
  std::vector<Vec3> center_coords;  // m
  std::size_t k = 0;
  IndexList teacher_neighbors;      // m*k, canonical order per patch
  RowMatrix teacher_coords;         // (m*k) x 8
  std::vector<char> degenerate;     // per center
  std::vector<IndexList> ball_neighbors;  // per radius, m*k
  std::size_t align_k = 0;
  IndexList align_neighbors;        // m*align_k, indices into the m centers
};

struct CloudGeometry {
  std::vector<LevelGeometry> levels;
};

inline IndexList flatten(const std::vector<IndexList>& lists) {
  IndexList out;
  for (const auto& l : lists) out.insert(out.end(), l.begin(), l.end());
  return out;
}

/// Samples centers with FPS (start drawn from `rng`) and builds every
/// neighbor set both branches need. Without the teacher, LRAs and invariant
/// coordinates are skipped (teacher fields stay empty).
inline CloudGeometry build_geometry(const std::vector<Vec3>& points, const EncoderConfig& cfg, Rng& rng,
                                    bool with_teacher = true) {
  cfg.validate(points.size());
  CloudGeometry g;
  std::vector<Vec3> prev = points;
  for (std::size_t li = 0; li < cfg.levels.size(); ++li) {
    const auto& lc = cfg.levels[li];
    LevelGeometry lg;
    lg.input_points = prev;
    lg.k = lc.neighbors;
    lg.centers = farthest_point_sample(prev, lc.centers, rng);
    for (auto c : lg.centers) lg.center_coords.push_back(prev[c]);

    const auto lras = with_teacher ? compute_all_lras(prev, lc.neighbors) : std::vector<Lra>{};
    const auto patches = with_teacher ? knn(prev, lg.center_coords, lc.neighbors) : std::vector<IndexList>{};
    if (with_teacher) lg.teacher_coords.resize(static_cast<Eigen::Index>(lc.centers * lc.neighbors), kInvariantColumns);
    for (std::size_t j = 0; with_teacher && j < lc.centers; ++j) {
      Patch p{lg.centers[j], patches[j], static_cast<int>(li)};
      Patch ordered;
      auto coords = teacher_patch_coords(prev, lras, p, &ordered);
      lg.teacher_coords.middleRows(static_cast<Eigen::Index>(j * lc.neighbors),
                                   static_cast<Eigen::Index>(lc.neighbors)) = coords.values;
      lg.teacher_neighbors.insert(lg.teacher_neighbors.end(), ordered.neighbor_indices.begin(),
                                  ordered.neighbor_indices.end());
      lg.degenerate.push_back(coords.degenerate ? 1 : 0);
    }

    for (double r : lc.radii) {
      IndexList flat;
      for (const auto& c : lg.center_coords) {
        auto b = ball_query(prev, c, r, lc.neighbors);
        flat.insert(flat.end(), b.begin(), b.end());
      }
      lg.ball_neighbors.push_back(std::move(flat));
    }

    lg.align_k = std::min(lc.neighbors, lc.centers);
    lg.align_neighbors = flatten(knn(lg.center_coords, lg.center_coords, lg.align_k));

    prev = lg.center_coords;
    g.levels.push_back(std::move(lg));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Shared MLP
// ---------------------------------------------------------------------------

struct LinearLayer {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out
  Tensor gamma;   // 1 x out, empty without normalization
  Tensor beta;
};

/// Shared-weight MLP applied to every row. Hidden layers are
/// linear -> (layer norm) -> relu; the last layer is activated only when
/// `activate_last` is set.
struct Mlp {
  std::vector<LinearLayer> layers;
  bool activate_last = true;

  static Mlp create(ParamStore& store, const std::string& prefix, std::size_t in,
                    const std::vector<std::size_t>& widths, bool norm, bool activate_last, Rng& rng) {
    Mlp m;
    m.activate_last = activate_last;
    std::size_t fan_in = in;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const std::string p = prefix + "." + std::to_string(i);
      LinearLayer l;
      l.weight = store.add(p + ".w", he_uniform(fan_in, widths[i], rng));
      l.bias = store.add(p + ".b", Tensor::zeros(1, widths[i]));
      const bool activated = i + 1 < widths.size() || activate_last;
      if (norm && activated) {
        Tensor g = Tensor::zeros(1, widths[i]);
        for (auto& v : g.values()) v = 1.0;
        l.gamma = store.add(p + ".gamma", g);
        l.beta = store.add(p + ".beta", Tensor::zeros(1, widths[i]));
      }
      m.layers.push_back(l);
      fan_in = widths[i];
    }
    return m;
  }

  std::size_t in_width() const { return layers.front().weight.rows(); }
  std::size_t out_width() const { return layers.back().weight.cols(); }

  Tensor forward(Tape& tape, const Tensor& x) const {
    require(x.cols() == in_width(), ErrorCode::ShapeMismatch,
            "mlp: expected " + std::to_string(in_width()) + " input columns, got " + std::to_string(x.cols()));
    Tensor h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      h = add_row(tape, matmul(tape, h, l.weight), l.bias);
      const bool activated = i + 1 < layers.size() || activate_last;
      if (!activated) continue;
      if (l.gamma.size() != 0) h = layer_norm_rows(tape, h, l.gamma, l.beta);
      h = relu(tape, h);
    }
    return h;
  }
};

// ---------------------------------------------------------------------------
// Graph representation and PointNet mapping
// ---------------------------------------------------------------------------

/// Rows center ⊕ (neighbor_i - center) for one patch: k x 2d.
inline Tensor graph_rep(Tape& tape, const Tensor& center, const Tensor& neighbors) {
  require(center.rows() == 1 && center.cols() == neighbors.cols(), ErrorCode::ShapeMismatch,
          "graph_rep: center must be 1 x d with d matching the neighbors");
  const IndexList rep(neighbors.rows(), 0);
  Tensor c = gather_rows(tape, center, rep);
  return concat(tape, {c, sub(tape, neighbors, c)}, 1);
}

/// Graph representation of stacked patches: row (p*k + i) is
/// features[center_p] ⊕ (features[nbr_{p,i}] - features[center_p]).
inline Tensor graph_rep_stacked(Tape& tape, const Tensor& features, const IndexList& center_rows,
                                const IndexList& neighbor_rows, std::size_t k) {
  require(neighbor_rows.size() == center_rows.size() * k, ErrorCode::ShapeMismatch,
          "graph_rep_stacked: neighbor count must be centers * k");
  IndexList rep;
  rep.reserve(neighbor_rows.size());
  for (auto c : center_rows) rep.insert(rep.end(), k, c);
  Tensor c = gather_rows(tape, features, rep);
  Tensor n = gather_rows(tape, features, neighbor_rows);
  return concat(tape, {c, sub(tape, n, c)}, 1);
}

/// Constant graph representation in background space, (m*k) x 6.
inline Tensor background_graph_rep(const std::vector<Vec3>& points, const std::vector<Vec3>& centers,
                                   const IndexList& neighbor_rows, std::size_t k) {
  Tensor out = Tensor::zeros(neighbor_rows.size(), 6);
  for (std::size_t j = 0; j < centers.size(); ++j) {
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t r = j * k + i;
      const Vec3 e = points[neighbor_rows[r]] - centers[j];
      for (int c = 0; c < 3; ++c) {
        out.at(r, static_cast<std::size_t>(c)) = centers[j](c);
        out.at(r, 3 + static_cast<std::size_t>(c)) = e(c);
      }
    }
  }
  return out;
}

/// Shared MLP over the rows of each k-row patch, then max over the patch.
inline Tensor pointnet_map(Tape& tape, const Tensor& patch_rows, const Mlp& mlp, std::size_t k) {
  return max_pool_rows(tape, mlp.forward(tape, patch_rows), k);
}

inline Tensor pointnet_map(Tape& tape, const Tensor& patch_rows, const Mlp& mlp) {
  return pointnet_map(tape, patch_rows, mlp, patch_rows.rows());
}

/// Every point is a patch center; neighbors are its k nearest points in
/// feature space. Returns (rows of x^SF, neighbor lists).
inline std::pair<Tensor, std::vector<IndexList>> feature_space_patch(Tape& tape, const Tensor& features,
                                                                     std::size_t k, const Mlp& mlp) {
  require(k >= 1 && k <= features.rows(), ErrorCode::BadCount, "feature_space_patch: k exceeds point count");
  const RowMatrix f = features.mat();
  auto nbrs = knn(f, f, k);
  IndexList centers(features.rows());
  for (std::size_t i = 0; i < centers.size(); ++i) centers[i] = i;
  Tensor rows = graph_rep_stacked(tape, features, centers, flatten(nbrs), k);
  return {pointnet_map(tape, rows, mlp, k), std::move(nbrs)};
}

/// Graphwise separable mapping: one ball-query sub-region and one PointNet
/// per radius, outputs concatenated over channels.
inline Tensor gsm_block(Tape& tape, const std::vector<Vec3>& points, const std::vector<Vec3>& centers,
                        const Tensor& sf_features, const std::vector<IndexList>& ball_neighbors, std::size_t k,
                        const std::vector<Mlp>& per_radius) {
  require(ball_neighbors.size() == per_radius.size() && !per_radius.empty(), ErrorCode::ShapeMismatch,
          "gsm_block: one MLP per radius required");
  require(sf_features.rows() == points.size(), ErrorCode::ShapeMismatch,
          "gsm_block: feature rows must match points");
  std::vector<Tensor> outs;
  for (std::size_t r = 0; r < per_radius.size(); ++r) {
    Tensor geo = background_graph_rep(points, centers, ball_neighbors[r], k);
    Tensor feat = gather_rows(tape, sf_features, ball_neighbors[r]);
    Tensor rows = concat(tape, {geo, feat}, 1);
    outs.push_back(pointnet_map(tape, rows, per_radius[r], k));
  }
  return outs.size() == 1 ? outs.front() : concat(tape, outs, 1);
}

// ---------------------------------------------------------------------------
// Levels
// ---------------------------------------------------------------------------

struct FeatureMap {
  int level = -1;
  std::vector<Vec3> centers;
  Tensor features;  // m x C

  std::size_t channels() const { return features.cols(); }
};

struct StudentLevelParams {
  Mlp feature_space;
  std::vector<Mlp> per_radius;
};

struct TeacherLevelParams {
  Mlp map;
};

/// Student level: feature-space patches over all input points, then GSM at
/// the shared centers. The coordinate map is the identity.
inline FeatureMap student_level(Tape& tape, const FeatureMap& prev, const LevelGeometry& geo,
                                const LevelConfig& cfg, const StudentLevelParams& params, int level) {
  auto [sf, nbrs] = feature_space_patch(tape, prev.features, cfg.feature_k(), params.feature_space);
  (void)nbrs;
  FeatureMap out;
  out.level = level;
  out.centers = geo.center_coords;
  out.features = gsm_block(tape, geo.input_points, geo.center_coords, sf, geo.ball_neighbors, geo.k, params.per_radius);
  return out;
}

/// Teacher level: canonical kNN patches mapped to invariant coordinates,
/// joined with the previous level's teacher features when present, then a
/// PointNet mapping.
inline FeatureMap teacher_level(Tape& tape, const FeatureMap* prev, const LevelGeometry& geo,
                                const TeacherLevelParams& params, int level) {
  const std::size_t rows = geo.teacher_neighbors.size();
  Tensor coords = Tensor::zeros(rows, kInvariantColumns);
  std::copy(geo.teacher_coords.data(), geo.teacher_coords.data() + rows * kInvariantColumns, coords.values().begin());
  Tensor input = coords;
  if (prev != nullptr) {
    require(prev->features.rows() == geo.input_points.size(), ErrorCode::ShapeMismatch,
            "teacher_level: previous features do not match input points");
    input = concat(tape, {coords, gather_rows(tape, prev->features, geo.teacher_neighbors)}, 1);
  }
  FeatureMap out;
  out.level = level;
  out.centers = geo.center_coords;
  out.features = pointnet_map(tape, input, params.map, geo.k);
  return out;
}

// ---------------------------------------------------------------------------
// Upsampling and classification
// ---------------------------------------------------------------------------

struct IdwOptions {
  double power = 2.0;
  std::size_t k = 3;
  double eps = 1e-8;
};

/// Constant interpolation matrix (m' x m) of inverse-distance weights.
inline Tensor idw_weights(const std::vector<Vec3>& coarse, const std::vector<Vec3>& fine, const IdwOptions& opt) {
  require(opt.k >= 1 && opt.k <= coarse.size(), ErrorCode::BadCount, "idw: k must be in [1, coarse count]");
  require(opt.power > 0.0, ErrorCode::BadCount, "idw: power must be positive");
  const auto nbrs = knn(coarse, fine, opt.k);
  Tensor w = Tensor::zeros(fine.size(), coarse.size());
  for (std::size_t i = 0; i < fine.size(); ++i) {
    const double d0 = (coarse[nbrs[i][0]] - fine[i]).norm();
    if (d0 == 0.0) {
      w.at(i, nbrs[i][0]) = 1.0;
      continue;
    }
    double total = 0.0;
    std::vector<double> raw(opt.k);
    for (std::size_t j = 0; j < opt.k; ++j) {
      raw[j] = 1.0 / (std::pow((coarse[nbrs[i][j]] - fine[i]).norm(), opt.power) + opt.eps);
      total += raw[j];
    }
    for (std::size_t j = 0; j < opt.k; ++j) w.at(i, nbrs[i][j]) += raw[j] / total;
  }
  return w;
}

inline Tensor idw_upsample(Tape& tape, const FeatureMap& coarse, const std::vector<Vec3>& fine_centers,
                           const IdwOptions& opt = {}) {
  return matmul(tape, idw_weights(coarse.centers, fine_centers, opt), coarse.features);
}

/// Channel-wise max over the final level's rows, then a two-layer MLP.
inline Tensor classify_head(Tape& tape, const Tensor& last_level_features, const Mlp& head) {
  return head.forward(tape, max_reduce(tape, last_level_features, 0));
}

}  // namespace mdistill
