#include <gtest/gtest.h>

#include <cmath>

#include "mdistill/align.hpp"

using namespace mdistill;

namespace {

Tensor randn(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(r, c);
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

LowRankHead random_head(std::size_t c, std::size_t r, Rng& rng) {
  LowRankHead h = LowRankHead::init(c, r, rng);
  h.U = randn(c, r, rng, 0.3);
  h.Q = randn(c, c, rng, 0.3);
  for (std::size_t i = 0; i < c; ++i) h.Q.at(i, i) += 1.0;
  return h;
}

// Reference KL between two discrete distributions given as logits / T.
double kl_ref(const std::vector<double>& zp, const std::vector<double>& zq, double t) {
  auto probs = [t](const std::vector<double>& z) {
    double mx = *std::max_element(z.begin(), z.end());
    std::vector<double> p(z.size());
    double s = 0;
    for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp((z[i] - mx) / t);
    for (auto& v : p) v /= s;
    return p;
  };
  auto p = probs(zp), q = probs(zq);
  double kl = 0;
  for (std::size_t i = 0; i < p.size(); ++i) kl += p[i] * std::log(p[i] / q[i]);
  return kl;
}

}  // namespace

TEST(LowRank, ValidRank) {
  EXPECT_TRUE(LowRankHead::valid_rank(2, 8));
  EXPECT_FALSE(LowRankHead::valid_rank(4, 8));
  EXPECT_FALSE(LowRankHead::valid_rank(0, 8));
  Rng rng(1);
  EXPECT_THROW(LowRankHead::init(8, 4, rng), Error);
}

TEST(LowRank, InitialSplitIsAllHigh) {
  Rng rng(2);
  auto h = LowRankHead::init(8, 2, rng);
  auto x = randn(5, 8, rng);
  Tape tape;
  auto s = lowrank_split(tape, x, h);
  for (double v : s.low.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(s.high.values(), x.values());
}

TEST(LowRank, SplitSumsAndRankBound) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t c = 8 + 4 * static_cast<std::size_t>(trial % 3), r = c / 4;
    auto h = random_head(c, r, rng);
    auto x = randn(12, c, rng);
    Tape tape;
    auto s = lowrank_split(tape, x, h);
    EXPECT_LT((s.low.mat() + s.high.mat() - x.mat()).cwiseAbs().maxCoeff(), 1e-12);
    Eigen::JacobiSVD<RowMatrix> svd(RowMatrix(s.low.mat()));
    const auto sv = svd.singularValues();
    for (Eigen::Index i = static_cast<Eigen::Index>(r); i < sv.size(); ++i) EXPECT_LT(sv(i), 1e-10 * sv(0));
  }
}

TEST(Attention, SymmetricPsdKnownValue) {
  Tape tape;
  auto xl = Tensor::from(2, 2, {1, 0, 0, 2});
  auto q = Tensor::from(2, 2, {1, 0, 0, 1});
  auto a = attention_map(tape, xl, q);
  EXPECT_EQ(a.values(), (std::vector<double>{1, 0, 0, 4}));
  Rng rng(4);
  auto x = randn(6, 5, rng);
  auto qq = randn(5, 5, rng);
  auto m = attention_map(tape, x, qq);
  RowMatrix proj = x.mat() * qq.mat().transpose();
  RowMatrix ref = proj * proj.transpose();
  EXPECT_LT((m.mat() - ref).cwiseAbs().maxCoeff(), 1e-12);
  Eigen::SelfAdjointEigenSolver<RowMatrix> es(RowMatrix(m.mat()));
  EXPECT_GT(es.eigenvalues().minCoeff(), -1e-10);
}

TEST(SymmetricKl, MatchesReferenceFormula) {
  Rng rng(5);
  auto zt = randn(3, 6, rng, 3.0);
  auto zs = randn(3, 6, rng, 3.0);
  Tape tape;
  const double t = 4.0;
  const double v = symmetric_kl_rows(tape, zt, zs, t, 0.3, 0.7).item();
  double ref = 0;
  for (std::size_t r = 0; r < 3; ++r) {
    std::vector<double> a(6), b(6);
    for (std::size_t j = 0; j < 6; ++j) {
      a[j] = zt(r, j);
      b[j] = zs(r, j);
    }
    ref += 0.3 * kl_ref(a, b, t) + 0.7 * kl_ref(b, a, t);
  }
  EXPECT_NEAR(v, ref, 1e-12);
}

TEST(SymmetricKl, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  auto zt = randn(4, 5, rng, 2.0);
  auto zs = randn(4, 5, rng, 2.0);
  auto r1 = grad_check([&](Tape& t, const Tensor& v) { return symmetric_kl_rows(t, v, zs, 4.0, 0.5, 0.5); }, zt, 1e-6);
  auto r2 = grad_check([&](Tape& t, const Tensor& v) { return symmetric_kl_rows(t, zt, v, 2.0, 0.2, 0.8); }, zs, 1e-6);
  EXPECT_TRUE(r1.passed) << r1.max_rel_error;
  EXPECT_TRUE(r2.passed) << r2.max_rel_error;
}

TEST(SymmetricKl, IdenticalInputsGiveExactZero) {
  Rng rng(7);
  auto z = randn(5, 7, rng, 10.0);
  auto zt = z.clone();
  auto zs = z.clone();
  zt.set_requires_grad(true);
  zs.set_requires_grad(true);
  Tape tape;
  auto l = symmetric_kl_rows(tape, zt, zs, 4.0, 0.5, 0.5);
  EXPECT_EQ(l.item(), 0.0);
  tape.backward(l);
  for (double g : zt.grad()) EXPECT_EQ(g, 0.0);
  for (double g : zs.grad()) EXPECT_EQ(g, 0.0);
}

TEST(SymmetricKl, NonNegativeOnRandomPairs) {
  Rng rng(8);
  for (int i = 0; i < 2000; ++i) {
    auto a = randn(2, 4, rng, 5.0);
    auto b = randn(2, 4, rng, 5.0);
    Tape tape;
    EXPECT_GE(symmetric_kl_rows(tape, a, b, 4.0, 0.5, 0.5).item(), 0.0);
  }
}

TEST(KlAlignment, ScaleAndSharedRows) {
  // With sample_m = k every row is used, so the loss equals T^2/C times the
  // mean symmetric KL per row.
  Rng rng(9);
  auto at = randn(4, 4, rng);
  auto as = randn(4, 4, rng);
  KlOptions opt;
  opt.sample_rows = 4;
  Tape tape;
  const double v = kl_alignment_loss(tape, at, as, opt, 16, rng).item();
  const double full = symmetric_kl_rows(tape, at, as, 4.0, 0.5, 0.5).item();
  EXPECT_NEAR(v, full * 16.0 / 16.0 / 4.0, 1e-14);

  auto st = concat(tape, {at, at}, 0);
  auto ss = concat(tape, {as, as}, 0);
  EXPECT_NEAR(kl_alignment_loss_stacked(tape, st, ss, 4, opt, 16, rng).item(), v, 1e-14);
}

TEST(KlAlignment, SampledRowsAreDistinct) {
  Rng rng(10);
  for (int i = 0; i < 100; ++i) {
    auto rows = sample_attention_rows(16, 8, rng);
    std::sort(rows.begin(), rows.end());
    EXPECT_EQ(std::adjacent_find(rows.begin(), rows.end()), rows.end());
    EXPECT_LT(rows.back(), 16u);
  }
  EXPECT_THROW(sample_attention_rows(4, 5, rng), Error);
}

TEST(Nmi, SelfAndIndependent) {
  Rng rng(11);
  const std::size_t n = 4096;
  auto x = Tensor::zeros(n, 1);
  auto y = Tensor::zeros(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    x.at(i, 0) = rng.uniform();
    y.at(i, 0) = rng.uniform();
  }
  Tape tape;
  const double self = nmi_loss(tape, x, x).item();
  const double indep = nmi_loss(tape, x, y).item();
  EXPECT_GE(self, 0.98);
  EXPECT_LE(self, 1.02);
  EXPECT_LT(indep, 0.1);
}

TEST(Nmi, AgreesWithHardQuantizedOracle) {
  Rng rng(12);
  const std::size_t n = 4096;
  for (double coupling : {0.0, 0.3, 0.7, 1.0}) {
    std::vector<double> a(n), b(n);
    auto x = Tensor::zeros(n, 1), y = Tensor::zeros(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = rng.normal();
      b[i] = coupling * a[i] + (1.0 - coupling) * rng.normal();
      x.at(i, 0) = a[i];
      y.at(i, 0) = b[i];
    }
    Tape tape;
    EXPECT_NEAR(nmi_loss(tape, x, y).item(), hard_nmi(a, b, 16), 0.05) << "coupling " << coupling;
  }
}

TEST(Nmi, ConstantChannelContributesZero) {
  Tape tape;
  auto x = Tensor::from(4, 1, {1, 2, 3, 4});
  auto c = Tensor::from(4, 1, {5, 5, 5, 5});
  EXPECT_EQ(nmi_loss(tape, c, x).item(), 0.0);
}

TEST(Nmi, GradientMatchesFiniteDifferences) {
  // Wider kernel here so the soft histogram is smooth at the FD step.
  Rng rng(13);
  auto xh = randn(12, 3, rng);
  auto x = randn(12, 3, rng);
  NmiOptions opt{8, 0.08};
  auto r1 = grad_check([&](Tape& t, const Tensor& v) { return nmi_loss_stacked(t, v, x, 6, opt); }, xh, 1e-5);
  auto r2 = grad_check([&](Tape& t, const Tensor& v) { return nmi_loss_stacked(t, xh, v, 6, opt); }, x, 1e-5);
  EXPECT_TRUE(r1.passed) << r1.max_rel_error;
  EXPECT_TRUE(r2.passed) << r2.max_rel_error;
}

TEST(Nmi, DefaultBandwidthGradient) {
  Rng rng(14);
  auto xh = randn(16, 2, rng);
  auto x = randn(16, 2, rng);
  auto r = grad_check([&](Tape& t, const Tensor& v) { return nmi_loss_stacked(t, v, x, 16); }, xh, 1e-4);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(Reparam, FusedEqualsUnfused) {
  Rng rng(15);
  for (std::size_t c : {8, 32, 64}) {
    for (int trial = 0; trial < 20; ++trial) {
      auto h = random_head(c, c / 4, rng);
      auto x = randn(10, c, rng);
      Tape tape;
      auto train = aligned_forward(tape, x, h, AlignMode::Train).out;
      auto infer = aligned_forward(tape, x, h, AlignMode::Infer).out;
      const double scale = train.mat().cwiseAbs().maxCoeff();
      EXPECT_LE((train.mat() - infer.mat()).cwiseAbs().maxCoeff(), 1e-12 * scale);
    }
  }
}

TEST(Reparam, InitialHeadIsIdentity) {
  Rng rng(16);
  auto h = LowRankHead::init(12, 3, rng);
  EXPECT_EQ(reparameterize(h), RowMatrix::Identity(12, 12));
}

TEST(AlignedForward, TrainModeGradient) {
  Rng rng(17);
  auto h = random_head(8, 2, rng);
  auto x = randn(5, 8, rng);
  auto w = randn(5, 8, rng);
  for (auto* t : {&h.D, &h.U, &h.Q}) t->set_requires_grad(true);
  auto loss = [&](Tape& t) { return sum_all(t, mul(t, aligned_forward(t, x, h, AlignMode::Train).out, w)); };
  auto rep = grad_check_params(loss, {h.D, h.U, h.Q}, 1e-6);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}
