#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "mdistill/dataset.hpp"
#include "mdistill/trainer.hpp"

using namespace mdistill;

namespace {

EncoderConfig small_encoder() {
  EncoderConfig e;
  e.levels = {{24, 8, 0, {0.3, 0.6}, {8, 8}}, {8, 6, 0, {0.6, 1.2}, {16, 16}}};
  e.head_hidden = 16;
  return e;
}

SplitDataset small_data(std::size_t train_per_class = 3, std::size_t test_per_class = 2) {
  SyntheticSpec s;
  s.classes = {"sphere", "cube", "cylinder", "torus"};
  s.points_per_cloud = 64;
  s.train_per_class = train_per_class;
  s.test_per_class = test_per_class;
  s.seed = 5;
  return generate(s);
}

TrainConfig small_train(Arm arm, std::size_t epochs = 2) {
  TrainConfig c;
  c.encoder = small_encoder();
  c.epochs = epochs;
  c.batch_size = 4;
  c.seed = 3;
  c.arm = arm;
  c.adam.learning_rate = 3e-3;
  return c;
}

std::string metrics_text(const FitResult& r) {
  std::ostringstream os;
  write_metrics_csv(os, r.epochs);
  return os.str();
}

double max_abs_param(const Model& m) {
  double v = 0.0;
  for (const auto& e : m.store.entries()) {
    for (double x : e.second.values()) v = std::max(v, std::abs(x));
  }
  return v;
}

}  // namespace

TEST(Loss, ComponentsAddUpToTotalEveryStep) {
  const auto data = small_data();
  for (Arm arm : {Arm::Full, Arm::NaiveAlign, Arm::NoDistill}) {
    Model m = Model::create(small_encoder(), 4, 1);
    const auto r = fit(m, data.train, nullptr, small_train(arm));
    ASSERT_FALSE(r.steps.empty());
    for (const auto& s : r.steps) {
      EXPECT_NEAR(s.total, s.kl + s.nmi_t + s.nmi_s + s.ce_t + s.ce_s, 1e-9) << to_string(arm);
    }
    for (const auto& e : r.epochs) {
      EXPECT_NEAR(e.loss_total, e.loss_kl + e.loss_nmi_t + e.loss_nmi_s + e.ce_t + e.ce_s, 1e-9);
    }
  }
}

TEST(Loss, StudentOnlyArmsHaveNoTeacherTerms) {
  const auto data = small_data();
  Model m = Model::create(small_encoder(), 4, 1);
  const auto r = fit(m, data.train, nullptr, small_train(Arm::NoDistill, 1));
  for (const auto& s : r.steps) {
    EXPECT_EQ(s.kl, 0.0);
    EXPECT_EQ(s.nmi_t, 0.0);
    EXPECT_EQ(s.ce_t, 0.0);
    EXPECT_GT(s.ce_s, 0.0);
  }
  EXPECT_TRUE(std::isnan(r.epochs.back().acc_teacher));
}

TEST(Loss, CrossEntropyMatchesClosedFormAndIsShiftInvariant) {
  Tape tape;
  const Tensor logits = Tensor::from(1, 3, {0.2, -1.0, 2.5});
  const double lse = std::log(std::exp(0.2) + std::exp(-1.0) + std::exp(2.5));
  EXPECT_NEAR(cross_entropy(tape, logits, 1).item(), lse + 1.0, 1e-12);
  const Tensor shifted = Tensor::from(1, 3, {100.2, 99.0, 102.5});
  EXPECT_NEAR(cross_entropy(tape, shifted, 1).item(), lse + 1.0, 1e-9);
  try {
    cross_entropy(tape, logits, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::LabelOutOfRange);
  }
}

TEST(Forward, BothBranchesConsumeTheSamePatches) {
  const auto data = small_data();
  TrainConfig cfg = small_train(Arm::Full);
  Model m = Model::create(cfg.encoder, 4, 2);
  const auto& pts = data.train.clouds[0].points;
  Rng g(7);
  const auto geo = build_geometry(pts, cfg.encoder, g);
  Tape tape;
  Rng kl(1);
  const auto f = shared_center_forward(tape, m, pts, geo, forward_options_for(Arm::Full, cfg), cfg, kl);
  ASSERT_EQ(f.student_centers.size(), cfg.encoder.levels.size());
  EXPECT_EQ(f.student_centers, f.teacher_centers);
  for (std::size_t l = 0; l < geo.levels.size(); ++l) EXPECT_EQ(f.student_centers[l], geo.levels[l].centers);
  EXPECT_EQ(f.align.size(), 2u);
  EXPECT_EQ(f.nmi_t.size(), 2u);
  EXPECT_EQ(f.logits_s.cols(), 4u);
  EXPECT_EQ(f.logits_t.cols(), 4u);
}

TEST(Forward, TeacherLogitsIgnoreRotation) {
  const auto data = small_data();
  const EncoderConfig enc = small_encoder();
  Model m = Model::create(enc, 4, 2);
  Rng rot(17);
  for (std::size_t i = 0; i < 4; ++i) {
    const PointCloud& c = data.test.clouds[i];
    const PointCloud r = apply_transform(c, random_rotation(180.0, rot));
    Rng g1(eval_geometry_seed(9, 0, i)), g2(eval_geometry_seed(9, 0, i));
    const auto a = cloud_logits(m, c.points, build_geometry(c.points, enc, g1), Branches::TeacherOnly);
    const auto b = cloud_logits(m, r.points, build_geometry(r.points, enc, g2), Branches::TeacherOnly);
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      num += (a[k] - b[k]) * (a[k] - b[k]);
      den += a[k] * a[k];
    }
    EXPECT_LT(std::sqrt(num / den), 1e-3) << "cloud " << i;
  }
}

TEST(Fit, TwoRunsAreIdentical) {
  const auto data = small_data();
  for (Arm arm : {Arm::Full, Arm::Augment}) {
    Model a = Model::create(small_encoder(), 4, 1);
    Model b = Model::create(small_encoder(), 4, 1);
    const auto ra = fit(a, data.train, &data.test, small_train(arm));
    const auto rb = fit(b, data.train, &data.test, small_train(arm));
    EXPECT_EQ(metrics_text(ra), metrics_text(rb));
    std::ostringstream ca, cb;
    write_checkpoint(ca, a.store);
    write_checkpoint(cb, b.store);
    EXPECT_EQ(ca.str(), cb.str()) << to_string(arm);
  }
}

TEST(Fit, ZeroLearningRateLeavesParametersAlone) {
  const auto data = small_data();
  Model m = Model::create(small_encoder(), 4, 1);
  std::ostringstream before, after;
  write_checkpoint(before, m.store);
  TrainConfig cfg = small_train(Arm::Full, 1);
  cfg.adam.learning_rate = 0.0;
  fit(m, data.train, nullptr, cfg);
  write_checkpoint(after, m.store);
  EXPECT_EQ(before.str(), after.str());
}

TEST(Fit, MemorizesATinySet) {
  SyntheticSpec s;
  s.classes = {"sphere", "cube"};
  s.points_per_cloud = 64;
  s.train_per_class = 2;
  s.test_per_class = 1;
  const auto data = generate(s);
  Model m = Model::create(small_encoder(), 2, 4);
  TrainConfig cfg = small_train(Arm::NoDistill, 150);
  cfg.adam.learning_rate = 1e-2;
  const auto r = fit(m, data.train, nullptr, cfg);
  EXPECT_LT(r.steps.back().ce_s, 0.01);
  EXPECT_EQ(r.epochs.back().acc_student, 1.0);
}

TEST(Fit, ExplodingLearningRateIsReportedAsNonFinite) {
  const auto data = small_data();
  Model m = Model::create(small_encoder(), 4, 1);
  TrainConfig cfg = small_train(Arm::NoDistill, 3);
  cfg.adam.learning_rate = 1e300;
  try {
    fit(m, data.train, nullptr, cfg);
    FAIL() << "expected NonFinite";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonFinite);
  }
}

TEST(Fit, RejectsBadConfig) {
  const auto data = small_data();
  Model m = Model::create(small_encoder(), 4, 1);
  TrainConfig cfg = small_train(Arm::Full);
  cfg.kl.temperature = 0.0;
  EXPECT_THROW(fit(m, data.train, nullptr, cfg), Error);
  cfg = small_train(Arm::Full);
  cfg.nmi.bins = 1;
  EXPECT_THROW(fit(m, data.train, nullptr, cfg), Error);
}

TEST(Model, SameSchemaForEveryArm) {
  const auto data = small_data();
  std::vector<std::string> names;
  for (Arm arm : {Arm::Full, Arm::NoDistill, Arm::NaiveAlign, Arm::Augment}) {
    Model m = Model::create(small_encoder(), 4, 1);
    fit(m, data.train, nullptr, small_train(arm, 1));
    std::vector<std::string> n;
    for (const auto& e : m.store.entries()) n.push_back(e.first + ":" + std::to_string(e.second.size()));
    if (names.empty()) names = n;
    EXPECT_EQ(n, names) << to_string(arm);
  }
  EXPECT_GT(max_abs_param(Model::create(small_encoder(), 4, 1)), 0.0);
}

TEST(Eval, CachedMatchesSingleVote) {
  const auto data = small_data();
  Model m = Model::create(small_encoder(), 4, 1);
  fit(m, data.train, nullptr, small_train(Arm::Full, 1));
  std::vector<CloudGeometry> geos;
  for (std::size_t i = 0; i < data.test.size(); ++i) {
    Rng g(eval_geometry_seed(21, 0, i));
    geos.push_back(build_geometry(data.test.clouds[i].points, m.encoder, g));
  }
  for (Branches b : {Branches::StudentOnly, Branches::TeacherOnly}) {
    const auto cached = evaluate_cached(m, data.test, geos, b);
    const auto voted = evaluate_voting(m, CorruptedView(data.test), 1, 21, b);
    EXPECT_EQ(cached.predictions, voted.predictions);
    EXPECT_EQ(cached.accuracy, voted.accuracy);
  }
}

TEST(Eval, VotingIsDeterministicAndCountsPerClass) {
  const auto data = small_data();
  Model m = Model::create(small_encoder(), 4, 1);
  CorruptedView view(data.test, Protocol::Rotation, 30.0, 4);
  const auto a = evaluate_voting(m, view, 3, 8);
  const auto b = evaluate_voting(m, view, 3, 8);
  EXPECT_EQ(a.predictions, b.predictions);
  EXPECT_EQ(a.accuracy, b.accuracy);
  ASSERT_EQ(a.per_class_count.size(), 4u);
  for (auto n : a.per_class_count) EXPECT_EQ(n, 2u);
  double mean = 0.0;
  for (double p : a.per_class_accuracy) mean += p / 4.0;
  EXPECT_NEAR(mean, a.accuracy, 1e-12);  // balanced classes
  EXPECT_THROW(evaluate_voting(m, view, 0, 8), Error);
}

TEST(Eval, RejectsUnlabeledClouds) {
  auto data = small_data();
  data.test.clouds[1].label.reset();
  Model m = Model::create(small_encoder(), 4, 1);
  try {
    evaluate_voting(m, CorruptedView(data.test), 1, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::LabelOutOfRange);
  }
}

TEST(Sweep, LevelZeroEqualsCleanAndRowsFollowGrid) {
  const auto data = small_data();
  Model m = Model::create(small_encoder(), 4, 1);
  fit(m, data.train, nullptr, small_train(Arm::NoDistill, 2));
  const double clean = evaluate_voting(m, CorruptedView(data.test), 2, 6).accuracy;
  for (Protocol p : {Protocol::Rotation, Protocol::Noise, Protocol::Outlier}) {
    const auto grid = default_grid(p);
    const auto rows = perturbation_sweep(m, data.test, p, grid, 2, 6);
    ASSERT_EQ(rows.size(), grid.size());
    EXPECT_EQ(rows.front().level, 0.0);
    EXPECT_EQ(rows.front().accuracy, clean) << to_string(p);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      EXPECT_EQ(rows[i].level, grid[i]);
      EXPECT_EQ(rows[i].seed, 6u);
    }
    const auto again = perturbation_sweep(m, data.test, p, grid, 2, 6);
    for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(rows[i].accuracy, again[i].accuracy);
  }
}

TEST(Sweep, BadGridsRejected) {
  const auto data = small_data();
  Model m = Model::create(small_encoder(), 4, 1);
  auto code = [&](Protocol p, std::vector<double> g) {
    try {
      perturbation_sweep(m, data.test, p, g, 1, 0);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::IoError;
  };
  EXPECT_EQ(code(Protocol::Noise, {}), ErrorCode::BadGrid);
  EXPECT_EQ(code(Protocol::Noise, {0.0, -0.1}), ErrorCode::BadGrid);
  EXPECT_EQ(code(Protocol::Rotation, {0.0, 200.0}), ErrorCode::BadGrid);
  EXPECT_EQ(code(Protocol::Outlier, {1.5}), ErrorCode::BadGrid);
}

TEST(Csv, MetricsAndSweepLayout) {
  MetricsRecord r;
  r.epoch = 3;
  r.loss_total = 1.5;
  std::ostringstream os;
  write_metrics_csv(os, {r});
  const std::string s = os.str();
  EXPECT_EQ(s.substr(0, s.find('\n')), kMetricsHeader);
  EXPECT_NE(s.find("\n3,1.5,"), std::string::npos);
  EXPECT_NE(s.find("nan"), std::string::npos);

  std::ostringstream sw;
  write_sweep_csv(sw, {{Protocol::Noise, 0.02, 0.75, 4}});
  EXPECT_EQ(sw.str(), "protocol,level,accuracy,seed\nnoise,0.02,0.75,4\n");
}
