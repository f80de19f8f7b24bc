#pragma once

// Teacher/student model, loss assembly, the online-distillation training
// loop, voting evaluation and perturbation sweeps.

#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "mdistill/align.hpp"
#include "mdistill/dataset.hpp"
#include "mdistill/diffcore.hpp"
#include "mdistill/netblocks.hpp"

namespace mdistill {

/// Training arms. Full: teacher + student with attention KL and NMI.
/// NoDistill: student alone. NaiveAlign: teacher + student with a plain
/// feature L2 term per level. Augment: student alone on randomly rotated
/// training clouds.
enum class Arm { Full, NoDistill, NaiveAlign, Augment };

inline std::string to_string(Arm a) {
  switch (a) {
    case Arm::Full: return "full";
    case Arm::NoDistill: return "no-distill";
    case Arm::NaiveAlign: return "naive-align";
    case Arm::Augment: return "augment";
  }
  return "?";
}

inline bool uses_teacher(Arm a) { return a == Arm::Full || a == Arm::NaiveAlign; }

struct TrainConfig {
  std::size_t epochs = 120;
  std::size_t batch_size = 32;
  AdamOptions adam;
  std::uint64_t seed = 0;
  KlOptions kl;    // sample_rows is capped by the alignment patch size per level
  NmiOptions nmi{16, 1.0 / 16};  // kernel one bin wide: smooth enough to train through
  EncoderConfig encoder;
  std::size_t vote_count = 3;
  double rotation_max_deg = 30.0;
  Arm arm = Arm::Full;
  bool stop_teacher_kl = false;   // detach the teacher side of the KL term
  bool record_wall_time = false;  // metrics CSV wall_seconds column; 0 keeps the file reproducible
  bool verbose = false;           // per-epoch progress on stderr

  void validate() const {
    require(batch_size >= 1, ErrorCode::BadConfig, "batch_size must be >= 1");
    require(vote_count >= 1, ErrorCode::BadConfig, "vote_count must be >= 1");
    require(adam.learning_rate >= 0.0, ErrorCode::BadConfig, "learning_rate must be >= 0");
    require(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0, ErrorCode::BadConfig,
            "adam betas must lie in [0, 1)");
    require(adam.eps > 0.0, ErrorCode::BadConfig, "adam eps must be positive");
    require(kl.temperature > 0.0, ErrorCode::BadTemperature, "temperature must be positive");
    require(kl.lambda_teacher_student >= 0.0 && kl.lambda_student_teacher >= 0.0, ErrorCode::BadConfig,
            "KL weights must be non-negative");
    require(kl.sample_rows >= 1, ErrorCode::BadConfig, "sample_m must be >= 1");
    require(nmi.bins >= 2, ErrorCode::BadBins, "nmi bins must be >= 2");
    require(nmi.bandwidth >= 0.0, ErrorCode::BadConfig, "nmi bandwidth must be >= 0");
    require(rotation_max_deg >= 0.0 && rotation_max_deg <= 180.0, ErrorCode::BadAngle,
            "rotation_max_deg must be in [0, 180]");
  }
};

struct MetricsRecord {
  std::size_t epoch = 0;
  double loss_total = 0.0;
  double loss_kl = 0.0;
  double loss_nmi_t = 0.0;
  double loss_nmi_s = 0.0;
  double ce_t = 0.0;
  double ce_s = 0.0;
  double acc_student = 0.0;
  double acc_teacher = std::numeric_limits<double>::quiet_NaN();
  double wall_seconds = 0.0;
};

/// Loss components of one optimizer step (batch means).
struct StepRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double total = 0.0;
  double kl = 0.0;
  double nmi_t = 0.0;
  double nmi_s = 0.0;
  double ce_t = 0.0;
  double ce_s = 0.0;
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Both branches, per-level alignment heads and classifiers. Every arm
/// carries the same parameter set so checkpoints share one schema; arms
/// that do not use a part simply never update it.
struct Model {
  EncoderConfig encoder;
  std::size_t num_classes = 0;
  ParamStore store;
  std::vector<StudentLevelParams> student;
  std::vector<TeacherLevelParams> teacher;
  std::vector<LowRankHead> student_heads;
  std::vector<LowRankHead> teacher_heads;
  Mlp student_classifier;
  Mlp teacher_classifier;

  static Model create(const EncoderConfig& enc, std::size_t num_classes, std::uint64_t seed) {
    require(num_classes >= 2, ErrorCode::BadConfig, "need at least 2 classes");
    Model m;
    m.encoder = enc;
    m.num_classes = num_classes;
    Rng rng(derive_seed(seed, 0x1417));
    std::size_t s_in = 3;
    std::size_t t_prev = 0;
    for (std::size_t l = 0; l < enc.levels.size(); ++l) {
      const auto& lc = enc.levels[l];
      const std::string sl = "student." + std::to_string(l);
      const std::string tl = "teacher." + std::to_string(l);
      const std::size_t c = lc.out_channels();

      StudentLevelParams sp;
      sp.feature_space = Mlp::create(m.store, sl + ".feature", 2 * s_in, {lc.channels.front()}, enc.layer_norm, true, rng);
      std::vector<std::size_t> widths = lc.channels;
      for (auto& w : widths) w = std::max<std::size_t>(1, w / lc.radii.size());
      widths.back() = c / lc.radii.size();
      for (std::size_t r = 0; r < lc.radii.size(); ++r) {
        sp.per_radius.push_back(Mlp::create(m.store, sl + ".radius" + std::to_string(r), 6 + lc.channels.front(),
                                            widths, enc.layer_norm, true, rng));
      }
      m.student.push_back(std::move(sp));

      m.teacher.push_back({Mlp::create(m.store, tl + ".map", kInvariantColumns + t_prev, lc.channels, enc.layer_norm,
                                       true, rng)});

      auto sh = LowRankHead::init(c, enc.rank_for(c), rng);
      sh.register_in(m.store, sl + ".head");
      m.student_heads.push_back(sh);
      auto th = LowRankHead::init(c, enc.rank_for(c), rng);
      th.register_in(m.store, tl + ".head");
      m.teacher_heads.push_back(th);

      s_in = c;
      t_prev = c;
    }
    m.student_classifier = Mlp::create(m.store, "student.classifier", s_in, {enc.head_hidden, num_classes}, false, false, rng);
    m.teacher_classifier = Mlp::create(m.store, "teacher.classifier", t_prev, {enc.head_hidden, num_classes}, false, false, rng);
    return m;
  }
};

inline Tensor points_tensor(const std::vector<Vec3>& pts) {
  Tensor t = Tensor::zeros(pts.size(), 3);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) t.at(i, c) = pts[i](static_cast<Eigen::Index>(c));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

enum class Branches { StudentOnly, TeacherOnly, Both };

struct ForwardOptions {
  Branches branches = Branches::Both;
  bool heads = true;              // apply the per-level alignment heads
  AlignMode mode = AlignMode::Train;
  bool attention_kl = true;       // per-level attention KL (needs both branches and heads)
  bool feature_l2 = false;        // per-level plain feature L2 (needs both branches)
  bool nmi = true;                // per-level NMI terms (needs heads in train mode)
  bool stop_teacher_kl = false;
};

struct CloudForward {
  Tensor logits_s;  // 1 x classes, empty if the student did not run
  Tensor logits_t;
  std::vector<Tensor> align;  // per-level KL or feature L2
  std::vector<Tensor> nmi_t;
  std::vector<Tensor> nmi_s;
  // Patch (level, center) keys actually consumed by each branch.
  std::vector<IndexList> student_centers;
  std::vector<IndexList> teacher_centers;
};

inline ForwardOptions forward_options_for(Arm arm, const TrainConfig& cfg) {
  ForwardOptions o;
  o.stop_teacher_kl = cfg.stop_teacher_kl;
  switch (arm) {
    case Arm::Full:
      break;
    case Arm::NaiveAlign:
      o.heads = false;
      o.attention_kl = false;
      o.feature_l2 = true;
      o.nmi = false;
      break;
    case Arm::NoDistill:
    case Arm::Augment:
      o.branches = Branches::StudentOnly;
      o.heads = false;
      o.attention_kl = false;
      o.nmi = false;
      break;
  }
  return o;
}

/// Runs the selected branches over one cloud whose geometry was computed
/// once; both branches read the same centers and neighbor sets per level.
inline CloudForward shared_center_forward(Tape& tape, const Model& model, const std::vector<Vec3>& points,
                                          const CloudGeometry& geo, const ForwardOptions& opt,
                                          const TrainConfig& cfg, Rng& kl_rng) {
  const bool run_s = opt.branches != Branches::TeacherOnly;
  const bool run_t = opt.branches != Branches::StudentOnly;
  const bool pair = run_s && run_t;
  require(geo.levels.size() == model.encoder.levels.size(), ErrorCode::ShapeMismatch, "geometry/model level mismatch");

  CloudForward out;
  FeatureMap s{-1, points, points_tensor(points)};
  FeatureMap t;
  for (std::size_t l = 0; l < geo.levels.size(); ++l) {
    const auto& lg = geo.levels[l];
    const auto& lc = model.encoder.levels[l];
    const int li = static_cast<int>(l);
    AlignedOutput as, at;
    if (run_s) {
      s = student_level(tape, s, lg, lc, model.student[l], li);
      out.student_centers.push_back(lg.centers);
      if (opt.heads) {
        as = aligned_forward(tape, s.features, model.student_heads[l], opt.mode);
        s.features = as.out;
      }
    }
    if (run_t) {
      require(lg.teacher_coords.rows() > 0, ErrorCode::ShapeMismatch, "geometry was built without teacher patches");
      t = teacher_level(tape, l == 0 ? nullptr : &t, lg, model.teacher[l], li);
      out.teacher_centers.push_back(lg.centers);
      if (opt.heads) {
        at = aligned_forward(tape, t.features, model.teacher_heads[l], opt.mode);
        t.features = at.out;
      }
    }

    const bool train_heads = opt.heads && opt.mode == AlignMode::Train;
    const std::size_t ak = lg.align_k;
    if (pair && train_heads && opt.attention_kl) {
      const std::size_t c = lc.out_channels();
      Tensor low_s = gather_rows(tape, as.low, lg.align_neighbors);
      Tensor low_t = gather_rows(tape, at.low, lg.align_neighbors);
      Tensor map_s = attention_maps(tape, low_s, model.student_heads[l].Q, ak);
      Tensor map_t = attention_maps(tape, low_t, model.teacher_heads[l].Q, ak);
      if (opt.stop_teacher_kl) map_t = map_t.clone();
      KlOptions ko = cfg.kl;
      ko.sample_rows = std::min(ko.sample_rows, ak);
      out.align.push_back(kl_alignment_loss_stacked(tape, map_t, map_s, ak, ko, c, kl_rng));
    }
    if (pair && opt.feature_l2) {
      out.align.push_back(mean_reduce(tape, square(tape, sub(tape, t.features, s.features)), -1));
    }
    if (train_heads && opt.nmi) {
      if (run_s) {
        // s.features is the aligned output; NMI compares the residual with the
        // level's pre-alignment features, recovered as low + high.
        Tensor x = add(tape, as.low, as.high);
        out.nmi_s.push_back(nmi_loss_stacked(tape, gather_rows(tape, as.high, lg.align_neighbors),
                                             gather_rows(tape, x, lg.align_neighbors), ak, cfg.nmi));
      }
      if (run_t) {
        Tensor x = add(tape, at.low, at.high);
        out.nmi_t.push_back(nmi_loss_stacked(tape, gather_rows(tape, at.high, lg.align_neighbors),
                                             gather_rows(tape, x, lg.align_neighbors), ak, cfg.nmi));
      }
    }
  }
  if (run_s) out.logits_s = classify_head(tape, s.features, model.student_classifier);
  if (run_t) out.logits_t = classify_head(tape, t.features, model.teacher_classifier);
  return out;
}

/// Softmax cross-entropy of a 1 x classes logit row against `label`.
inline Tensor cross_entropy(Tape& tape, const Tensor& logits, int label) {
  require(label >= 0 && static_cast<std::size_t>(label) < logits.cols(), ErrorCode::LabelOutOfRange,
          "label " + std::to_string(label) + " outside [0, " + std::to_string(logits.cols()) + ")");
  Tensor lp = log_softmax_rows(tape, logits);
  Tensor picked = slice_cols(tape, lp, static_cast<std::size_t>(label), 1);
  return scalar_mul(tape, picked, -1.0);
}

struct LossTerms {
  Tensor total;
  Tensor kl;
  Tensor nmi_t;
  Tensor nmi_s;
  Tensor ce_t;
  Tensor ce_s;
};

namespace detail {

inline Tensor mean_of(Tape& tape, const std::vector<Tensor>& xs) {
  if (xs.empty()) return Tensor::scalar(0.0);
  Tensor acc = xs.front();
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(tape, acc, xs[i]);
  return scalar_mul(tape, acc, 1.0 / static_cast<double>(xs.size()));
}

}  // namespace detail

/// L = mean_levels(align) + mean_levels(NMI_T) + mean_levels(NMI_S) + CE_T + CE_S
/// for one cloud. Missing parts contribute a constant 0.
inline LossTerms total_loss(Tape& tape, const CloudForward& f, int label) {
  LossTerms t;
  t.kl = detail::mean_of(tape, f.align);
  t.nmi_t = detail::mean_of(tape, f.nmi_t);
  t.nmi_s = detail::mean_of(tape, f.nmi_s);
  t.ce_t = f.logits_t.size() ? cross_entropy(tape, f.logits_t, label) : Tensor::scalar(0.0);
  t.ce_s = f.logits_s.size() ? cross_entropy(tape, f.logits_s, label) : Tensor::scalar(0.0);
  t.total = add(tape, add(tape, add(tape, add(tape, t.kl, t.nmi_t), t.nmi_s), t.ce_t), t.ce_s);
  return t;
}

/// Batch mean of per-cloud loss terms; the total is rebuilt from the
/// averaged components so the bookkeeping identity holds by construction
/// up to rounding.
inline LossTerms batch_mean(Tape& tape, const std::vector<LossTerms>& per_cloud) {
  auto avg = [&](auto member) {
    std::vector<Tensor> xs;
    for (const auto& t : per_cloud) xs.push_back(t.*member);
    return detail::mean_of(tape, xs);
  };
  LossTerms b;
  b.kl = avg(&LossTerms::kl);
  b.nmi_t = avg(&LossTerms::nmi_t);
  b.nmi_s = avg(&LossTerms::nmi_s);
  b.ce_t = avg(&LossTerms::ce_t);
  b.ce_s = avg(&LossTerms::ce_s);
  b.total = add(tape, add(tape, add(tape, add(tape, b.kl, b.nmi_t), b.nmi_s), b.ce_t), b.ce_s);
  return b;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  double accuracy = 0.0;
  std::vector<double> per_class_accuracy;  // NaN for classes absent from the set
  std::vector<std::size_t> per_class_count;
  std::vector<int> predictions;
};

/// Geometry seed of cloud i in evaluation pass p with base seed s.
inline std::uint64_t eval_geometry_seed(std::uint64_t base_seed, std::size_t pass, std::size_t i) {
  return derive_seed(base_seed + pass, i);
}

/// Logits of one branch for one cloud with fused alignment heads and no
/// gradient recording.
inline std::vector<double> cloud_logits(const Model& model, const std::vector<Vec3>& points, const CloudGeometry& geo,
                                        Branches branch) {
  require(branch != Branches::Both, ErrorCode::BadConfig, "evaluate one branch at a time");
  NoGradGuard no_grad;
  ForwardOptions opt;
  opt.branches = branch;
  opt.mode = AlignMode::Infer;
  opt.attention_kl = false;
  opt.nmi = false;
  static const TrainConfig unused_cfg;
  Rng unused_rng(0);
  Tape tape;
  const auto f = shared_center_forward(tape, model, points, geo, opt, unused_cfg, unused_rng);
  const Tensor& logits = branch == Branches::StudentOnly ? f.logits_s : f.logits_t;
  return logits.values();
}

namespace detail {

inline EvalResult tally(const Model& model, const std::vector<int>& labels, const std::vector<std::vector<double>>& logits) {
  EvalResult res;
  const std::size_t nc = model.num_classes;
  res.per_class_count.assign(nc, 0);
  std::vector<std::size_t> correct(nc, 0);
  std::size_t total_correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    // Ties go to the smallest class index.
    const int pred = static_cast<int>(std::max_element(logits[i].begin(), logits[i].end()) - logits[i].begin());
    const auto label = static_cast<std::size_t>(labels[i]);
    res.predictions.push_back(pred);
    ++res.per_class_count[label];
    if (pred == labels[i]) {
      ++correct[label];
      ++total_correct;
    }
  }
  res.accuracy = static_cast<double>(total_correct) / static_cast<double>(labels.size());
  for (std::size_t c = 0; c < nc; ++c) {
    res.per_class_accuracy.push_back(res.per_class_count[c] == 0
                                         ? std::numeric_limits<double>::quiet_NaN()
                                         : static_cast<double>(correct[c]) / static_cast<double>(res.per_class_count[c]));
  }
  return res;
}

inline int checked_label(const PointCloud& cloud, std::size_t i, std::size_t num_classes) {
  const int label = cloud.label.value_or(-1);
  require(label >= 0 && static_cast<std::size_t>(label) < num_classes, ErrorCode::LabelOutOfRange,
          "evaluation cloud " + std::to_string(i) + " has no valid label");
  return label;
}

}  // namespace detail

/// Averaged logits over `votes` passes with FPS seeds base_seed + pass.
/// The student runs with fused (reparameterized) alignment heads; the
/// teacher branch can be evaluated the same way for monitoring.
inline EvalResult evaluate_voting(const Model& model, const CorruptedView& data, std::size_t votes,
                                  std::uint64_t base_seed, Branches branch = Branches::StudentOnly) {
  require(data.size() > 0, ErrorCode::EmptyTestSet, "evaluation set is empty");
  require(votes >= 1, ErrorCode::BadConfig, "vote_count must be >= 1");
  const std::size_t nc = model.num_classes;
  std::vector<int> labels;
  std::vector<std::vector<double>> logits;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const PointCloud cloud = data.at(i);
    labels.push_back(detail::checked_label(cloud, i, nc));
    std::vector<double> avg(nc, 0.0);
    for (std::size_t p = 0; p < votes; ++p) {
      Rng rng(eval_geometry_seed(base_seed, p, i));
      const auto geo = build_geometry(cloud.points, model.encoder, rng, branch == Branches::TeacherOnly);
      const auto l = cloud_logits(model, cloud.points, geo, branch);
      for (std::size_t c = 0; c < nc; ++c) avg[c] += l[c] / static_cast<double>(votes);
    }
    logits.push_back(std::move(avg));
  }
  return detail::tally(model, labels, logits);
}

/// Single-pass accuracy over clouds whose geometry was built once with
/// eval_geometry_seed(seed, 0, i); equal to evaluate_voting with one vote.
inline EvalResult evaluate_cached(const Model& model, const Dataset& data, const std::vector<CloudGeometry>& geos,
                                  Branches branch) {
  require(data.size() > 0, ErrorCode::EmptyTestSet, "evaluation set is empty");
  std::vector<int> labels;
  std::vector<std::vector<double>> logits;
  for (std::size_t i = 0; i < data.size(); ++i) {
    labels.push_back(detail::checked_label(data.clouds[i], i, model.num_classes));
    logits.push_back(cloud_logits(model, data.clouds[i].points, geos[i], branch));
  }
  return detail::tally(model, labels, logits);
}

struct SweepRow {
  Protocol protocol = Protocol::Rotation;
  double level = 0.0;
  double accuracy = 0.0;
  std::uint64_t seed = 0;
};

inline void validate_grid(Protocol p, const std::vector<double>& grid) {
  require(!grid.empty(), ErrorCode::BadGrid, "sweep grid is empty");
  for (double v : grid) {
    require(std::isfinite(v) && v >= 0.0, ErrorCode::BadGrid, "grid levels must be finite and >= 0");
    if (p == Protocol::Rotation) require(v <= 180.0, ErrorCode::BadGrid, "rotation levels must be <= 180 degrees");
    if (p == Protocol::Outlier) require(v <= 1.0, ErrorCode::BadGrid, "outlier fractions must be <= 1");
  }
}

/// One voting evaluation per grid level. Every level corrupts cloud i from
/// the same rng stream (seed, i), and every level evaluates with base seed
/// `seed`, so level 0 reproduces the clean accuracy exactly.
inline std::vector<SweepRow> perturbation_sweep(const Model& model, const Dataset& test, Protocol protocol,
                                                const std::vector<double>& grid, std::size_t votes,
                                                std::uint64_t seed) {
  validate_grid(protocol, grid);
  std::vector<SweepRow> rows;
  for (double level : grid) {
    CorruptedView view(test, protocol, level, derive_seed(seed, 0xC022));
    rows.push_back({protocol, level, evaluate_voting(model, view, votes, seed).accuracy, seed});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct FitResult {
  std::vector<MetricsRecord> epochs;
  std::vector<StepRecord> steps;
};

/// Seeded epochs of shuffled minibatches. Geometry of every training cloud
/// is built once (seeded by cloud index); the augment arm rebuilds it per
/// epoch on a freshly rotated copy. Per-epoch accuracies are single-pass
/// evaluations of `val` (or of the training set when `val` is null).
inline FitResult fit(Model& model, const Dataset& train, const Dataset* val, const TrainConfig& cfg,
                     const std::function<void(const MetricsRecord&)>& on_epoch = {}) {
  cfg.validate();
  require(train.size() > 0, ErrorCode::EmptyTestSet, "training set is empty");
  for (const auto& c : train.clouds) model.encoder.validate(c.points.size());
  const bool teacher = uses_teacher(cfg.arm);
  const ForwardOptions fopt = forward_options_for(cfg.arm, cfg);

  std::vector<CloudGeometry> geo_cache;
  if (cfg.arm != Arm::Augment) {
    geo_cache.reserve(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) {
      Rng rng(derive_seed(derive_seed(cfg.seed, 0x6E0), i));
      geo_cache.push_back(build_geometry(train.clouds[i].points, model.encoder, rng, teacher));
    }
  }

  Adam opt(model.store.tensors(), cfg.adam);
  Rng shuffle_rng(derive_seed(cfg.seed, 0x5AF));
  Rng kl_rng(derive_seed(cfg.seed, 0x4B1));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const Dataset& monitor = val ? *val : train;
  std::vector<CloudGeometry> monitor_geo;
  for (std::size_t i = 0; i < monitor.size(); ++i) {
    Rng rng(eval_geometry_seed(cfg.seed, 0, i));
    monitor_geo.push_back(build_geometry(monitor.clouds[i].points, model.encoder, rng, teacher));
  }

  FitResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    shuffle(order, shuffle_rng);
    MetricsRecord rec;
    rec.epoch = epoch;
    std::size_t steps_this_epoch = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      Tape tape;
      std::vector<LossTerms> terms;
      for (std::size_t j = b; j < end; ++j) {
        const std::size_t i = order[j];
        const PointCloud& cloud = train.clouds[i];
        if (cfg.arm == Arm::Augment) {
          Rng rot_rng(derive_seed(derive_seed(cfg.seed, 0xA06), epoch * train.size() + i));
          const auto rotated = apply_transform(cloud, random_rotation(cfg.rotation_max_deg, rot_rng));
          Rng rng(derive_seed(derive_seed(cfg.seed, 0x6E0), i));
          const auto geo = build_geometry(rotated.points, model.encoder, rng, false);
          const auto f = shared_center_forward(tape, model, rotated.points, geo, fopt, cfg, kl_rng);
          terms.push_back(total_loss(tape, f, cloud.label.value_or(-1)));
        } else {
          const auto f = shared_center_forward(tape, model, cloud.points, geo_cache[i], fopt, cfg, kl_rng);
          terms.push_back(total_loss(tape, f, cloud.label.value_or(-1)));
        }
      }
      LossTerms bt = batch_mean(tape, terms);
      require(std::isfinite(bt.total.item()), ErrorCode::NonFinite,
              "loss became non-finite at epoch " + std::to_string(epoch));
      opt.zero_grad();
      tape.backward(bt.total);
      opt.step();
      for (const auto& p : model.store.entries()) {
        for (double v : p.second.values()) {
          if (!std::isfinite(v)) throw Error(ErrorCode::NonFinite, "parameter " + p.first + " became non-finite");
        }
      }

      StepRecord sr{epoch, ++step, bt.total.item(), bt.kl.item(), bt.nmi_t.item(), bt.nmi_s.item(), bt.ce_t.item(),
                    bt.ce_s.item()};
      result.steps.push_back(sr);
      rec.loss_total += sr.total;
      rec.loss_kl += sr.kl;
      rec.loss_nmi_t += sr.nmi_t;
      rec.loss_nmi_s += sr.nmi_s;
      rec.ce_t += sr.ce_t;
      rec.ce_s += sr.ce_s;
      ++steps_this_epoch;
    }
    const double inv = 1.0 / static_cast<double>(steps_this_epoch);
    rec.loss_total *= inv;
    rec.loss_kl *= inv;
    rec.loss_nmi_t *= inv;
    rec.loss_nmi_s *= inv;
    rec.ce_t *= inv;
    rec.ce_s *= inv;

    rec.acc_student = evaluate_cached(model, monitor, monitor_geo, Branches::StudentOnly).accuracy;
    if (teacher) rec.acc_teacher = evaluate_cached(model, monitor, monitor_geo, Branches::TeacherOnly).accuracy;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    rec.wall_seconds = cfg.record_wall_time ? secs : 0.0;
    if (cfg.verbose) {
      std::cerr << to_string(cfg.arm) << " epoch " << epoch << "/" << cfg.epochs << " loss " << rec.loss_total
                << " acc_s " << rec.acc_student << " acc_t " << rec.acc_teacher << " (" << secs << " s)\n";
    }
    result.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

inline constexpr const char* kMetricsHeader =
    "epoch,loss_total,loss_kl,loss_nmi_t,loss_nmi_s,ce_t,ce_s,acc_student,acc_teacher,wall_seconds";

inline void write_metrics_row(std::ostream& os, const MetricsRecord& r) {
  os << r.epoch;
  for (double v : {r.loss_total, r.loss_kl, r.loss_nmi_t, r.loss_nmi_s, r.ce_t, r.ce_s, r.acc_student, r.acc_teacher,
                   r.wall_seconds}) {
    os << ',' << format_g(v, 9);
  }
  os << '\n';
}

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsRecord>& rows) {
  os << kMetricsHeader << '\n';
  for (const auto& r : rows) write_metrics_row(os, r);
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "protocol,level,accuracy,seed\n";
  for (const auto& r : rows) {
    os << to_string(r.protocol) << ',' << format_g(r.level, 9) << ',' << format_g(r.accuracy, 9) << ',' << r.seed
       << '\n';
  }
}

}  // namespace mdistill
