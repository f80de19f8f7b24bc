#pragma once

// Alignment model: low-rank split of patch features, Q-projected attention
// maps, temperature-scaled symmetric KL distillation, soft-histogram NMI
// regularization and the fused inference-time linear map.

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mdistill/diffcore.hpp"
#include "mdistill/geomcore.hpp"

namespace mdistill {

/// Trainable split of C-channel features into a rank-r part and a residual.
/// D (r x C) projects down, U (C x r) projects back up, Q (C x C) is the
/// query matrix applied to the low-rank part.
struct LowRankHead {
  Tensor D;
  Tensor U;
  Tensor Q;

  std::size_t rank() const noexcept { return D.rows(); }
  std::size_t channels() const noexcept { return D.cols(); }

  static bool valid_rank(std::size_t r, std::size_t c) noexcept { return r >= 1 && 2 * r < c; }

  /// Q = I, U = 0, D He-uniform: the initial split is X_l = 0, X_h = X.
  static LowRankHead init(std::size_t channels, std::size_t rank, Rng& rng) {
    require(valid_rank(rank, channels), ErrorCode::ShapeMismatch,
            "low-rank head needs 1 <= r < C/2 (r=" + std::to_string(rank) + ", C=" + std::to_string(channels) + ")");
    LowRankHead h;
    h.D = he_uniform(rank, channels, rng);
    h.U = Tensor::zeros(channels, rank);
    h.Q = Tensor::zeros(channels, channels);
    for (std::size_t i = 0; i < channels; ++i) h.Q.at(i, i) = 1.0;
    return h;
  }

  void register_in(ParamStore& store, const std::string& prefix) {
    D = store.add(prefix + ".D", D);
    U = store.add(prefix + ".U", U);
    Q = store.add(prefix + ".Q", Q);
  }
};

struct SplitResult {
  Tensor low;   // X_l = X D^T U^T
  Tensor high;  // X_h = X - X_l
};

inline SplitResult lowrank_split(Tape& tape, const Tensor& x, const LowRankHead& head) {
  require(x.cols() == head.channels(), ErrorCode::ShapeMismatch, "lowrank_split: channel mismatch");
  Tensor down = matmul(tape, x, transpose(tape, head.D));
  Tensor low = matmul(tape, down, transpose(tape, head.U));
  return {low, sub(tape, x, low)};
}

/// (X_l Q^T)(X_l Q^T)^T for a single k x C patch.
inline Tensor attention_map(Tape& tape, const Tensor& x_low, const Tensor& q) {
  require(x_low.cols() == q.cols() && q.rows() == q.cols(), ErrorCode::ShapeMismatch,
          "attention_map: Q must be C x C");
  Tensor proj = matmul(tape, x_low, transpose(tape, q));
  return block_gram(tape, proj, x_low.rows());
}

/// Attention maps of stacked patches: (P*k) x C in, (P*k) x k out.
inline Tensor attention_maps(Tape& tape, const Tensor& stacked_low, const Tensor& q, std::size_t k) {
  Tensor proj = matmul(tape, stacked_low, transpose(tape, q));
  return block_gram(tape, proj, k);
}

struct KlOptions {
  double temperature = 4.0;
  double lambda_teacher_student = 0.5;  // weight of KL(P_T || P_S)
  double lambda_student_teacher = 0.5;  // weight of KL(P_S || P_T)
  std::size_t sample_rows = 8;
};

/// Sum over rows of  l1*KL(softmax(zt/T) || softmax(zs/T)) + l2*KL(softmax(zs/T) || softmax(zt/T)).
/// Fused primitive: identical inputs give exactly zero loss and gradient.
inline Tensor symmetric_kl_rows(Tape& tape, const Tensor& zt, const Tensor& zs, double temperature, double l1,
                                double l2) {
  require(temperature > 0.0, ErrorCode::BadTemperature, "temperature must be positive");
  require(zt.rows() == zs.rows() && zt.cols() == zs.cols(), ErrorCode::ShapeMismatch,
          "symmetric_kl_rows: shapes differ");
  const std::size_t r = zt.rows(), c = zt.cols();
  std::vector<double> lpt(r * c), lps(r * c), kl1(r), kl2(r);
  auto log_softmax = [&](const Tensor& z, std::size_t row, std::vector<double>& out) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, z(row, j) / temperature);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z(row, j) / temperature - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[row * c + j] = z(row, j) / temperature - lse;
  };
  double total = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    log_softmax(zt, i, lpt);
    log_softmax(zs, i, lps);
    double a = 0.0, b = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t o = i * c + j;
      const double d = lpt[o] - lps[o];
      a += std::exp(lpt[o]) * d;
      b -= std::exp(lps[o]) * d;
    }
    kl1[i] = a;
    kl2[i] = b;
    total += l1 * a + l2 * b;
  }
  Tensor out = detail::make_output(1, 1, {&zt, &zs});
  out.values()[0] = total;
  detail::check_finite(out, "symmetric_kl_rows");
  if (out.requires_grad()) {
    tape.record([ZT = zt.data(), ZS = zs.data(), O = out.data(), lpt = std::move(lpt), lps = std::move(lps),
                 kl1 = std::move(kl1), kl2 = std::move(kl2), temperature, l1, l2, c] {
      if (O->grad.empty()) return;
      const double g = O->grad[0] / temperature;
      auto* gt = detail::grad_sink(ZT);
      auto* gs = detail::grad_sink(ZS);
      for (std::size_t i = 0; i < kl1.size(); ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          const std::size_t o = i * c + j;
          const double pt = std::exp(lpt[o]);
          const double ps = std::exp(lps[o]);
          const double d = lpt[o] - lps[o];
          if (gt) (*gt)[o] += g * (l1 * pt * (d - kl1[i]) + l2 * (pt - ps));
          if (gs) (*gs)[o] += g * (l1 * (ps - pt) + l2 * ps * (-d - kl2[i]));
        }
      }
    });
  }
  return out;
}

/// Rows to compare for each patch: sample_m distinct rows of a k-row map.
inline IndexList sample_attention_rows(std::size_t k, std::size_t sample_m, Rng& rng) {
  require(sample_m >= 1 && sample_m <= k, ErrorCode::BadCount, "need 1 <= sample_m <= k");
  IndexList rows(k);
  for (std::size_t i = 0; i < k; ++i) rows[i] = i;
  for (std::size_t i = 0; i < sample_m; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.uniform_index(k - i));
    std::swap(rows[i], rows[j]);
  }
  rows.resize(sample_m);
  return rows;
}

/// Distillation loss between a teacher and a student attention map of one
/// patch: (T^2 / C) * [l1 KL(P_T||P_S) + l2 KL(P_S||P_T)] over sample_m rows
/// (shared by both maps), divided by sample_m.
inline Tensor kl_alignment_loss(Tape& tape, const Tensor& attn_t, const Tensor& attn_s, const KlOptions& opt,
                                std::size_t channels, Rng& rng) {
  require(opt.temperature > 0.0, ErrorCode::BadTemperature, "temperature must be positive");
  require(attn_t.rows() == attn_t.cols(), ErrorCode::ShapeMismatch, "attention map must be square");
  const std::size_t k = attn_t.rows();
  const IndexList rows = sample_attention_rows(k, opt.sample_rows, rng);
  Tensor t = gather_rows(tape, attn_t, rows);
  Tensor s = gather_rows(tape, attn_s, rows);
  Tensor sum = symmetric_kl_rows(tape, t, s, opt.temperature, opt.lambda_teacher_student, opt.lambda_student_teacher);
  const double scale = opt.temperature * opt.temperature / static_cast<double>(channels) /
                       static_cast<double>(opt.sample_rows);
  return scalar_mul(tape, sum, scale);
}

/// Same as kl_alignment_loss for P stacked k x k maps, averaged over patches.
/// One row sample per patch, shared by teacher and student.
inline Tensor kl_alignment_loss_stacked(Tape& tape, const Tensor& attn_t, const Tensor& attn_s, std::size_t k,
                                        const KlOptions& opt, std::size_t channels, Rng& rng) {
  require(opt.temperature > 0.0, ErrorCode::BadTemperature, "temperature must be positive");
  require(attn_t.cols() == k && attn_t.rows() % k == 0, ErrorCode::ShapeMismatch, "stacked maps must be (P*k) x k");
  const std::size_t patches = attn_t.rows() / k;
  IndexList rows;
  rows.reserve(patches * opt.sample_rows);
  for (std::size_t p = 0; p < patches; ++p) {
    for (auto r : sample_attention_rows(k, opt.sample_rows, rng)) rows.push_back(p * k + r);
  }
  Tensor t = gather_rows(tape, attn_t, rows);
  Tensor s = gather_rows(tape, attn_s, rows);
  Tensor sum = symmetric_kl_rows(tape, t, s, opt.temperature, opt.lambda_teacher_student, opt.lambda_student_teacher);
  const double scale = opt.temperature * opt.temperature / static_cast<double>(channels) /
                       static_cast<double>(opt.sample_rows * patches);
  return scalar_mul(tape, sum, scale);
}

// ---------------------------------------------------------------------------
// Normalized mutual information
// ---------------------------------------------------------------------------

struct NmiOptions {
  std::size_t bins = 16;
  /// Gaussian kernel width in normalized [0, 1] units; 0 selects 0.05 / bins.
  double bandwidth = 0.0;

  double effective_bandwidth() const { return bandwidth > 0.0 ? bandwidth : 0.05 / static_cast<double>(bins); }
};

namespace detail {

/// Active bin range [lo, lo + n) of one normalized sample: bins whose
/// Gaussian weight is at least exp(-46) ~ 1e-20 of the nearest bin's.
struct BinRange {
  std::size_t lo = 0;
  std::size_t n = 0;
};

/// Writes the normalized Gaussian weights of sample u over its active bins
/// into w[0..bins) (zeros elsewhere). Bin centers are equally spaced, so
/// neighbouring weight ratios follow a geometric recurrence and only two
/// exponentials are needed per sample.
inline BinRange soft_assign(double u, std::size_t bins, double h, double* w) {
  const double nb = static_cast<double>(bins);
  const double delta = 1.0 / nb;
  const double inv_h2 = 1.0 / (h * h);
  auto center = [nb](std::size_t i) { return (static_cast<double>(i) + 0.5) / nb; };
  const auto nearest = static_cast<std::size_t>(std::clamp(std::floor(u * nb), 0.0, nb - 1.0));
  // excess(i) <= 46  <=>  |u - c_i| <= sqrt(92 h^2 + (u - c_nearest)^2).
  const double d0 = u - center(nearest);
  const double reach = std::sqrt(92.0 * h * h + d0 * d0);
  const auto lo = static_cast<std::size_t>(
      std::clamp(std::ceil((u - reach) * nb - 0.5), 0.0, static_cast<double>(nearest)));
  const auto hi = static_cast<std::size_t>(
      std::clamp(std::floor((u + reach) * nb - 0.5), static_cast<double>(nearest), nb - 1.0));
  std::fill(w, w + bins, 0.0);
  w[nearest] = 1.0;
  // Ratio w[i+1]/w[i] = exp(((u - c_i) delta - delta^2 / 2) / h^2), and it
  // shrinks by exp(-delta^2 / h^2) per step.
  const double shrink = std::exp(-delta * delta * inv_h2);
  if (hi > nearest) {
    double ratio = std::exp(((u - center(nearest)) * delta - 0.5 * delta * delta) * inv_h2);
    for (std::size_t i = nearest; i < hi; ++i) {
      w[i + 1] = w[i] * ratio;
      ratio *= shrink;
    }
  }
  if (lo < nearest) {
    // Going down: w[i-1]/w[i] = exp((-(u - c_i) delta - delta^2 / 2) / h^2).
    double ratio = std::exp((-(u - center(nearest)) * delta - 0.5 * delta * delta) * inv_h2);
    for (std::size_t i = nearest; i > lo; --i) {
      w[i - 1] = w[i] * ratio;
      ratio *= shrink;
    }
  }
  double total = 0.0;
  for (std::size_t i = lo; i <= hi; ++i) total += w[i];
  for (std::size_t i = lo; i <= hi; ++i) w[i] /= total;
  return {lo, hi - lo + 1};
}

inline double entropy_term(double p) { return p > 0.0 ? -p * std::log(p) : 0.0; }

/// NMI of one pair of columns plus (optionally) its gradient with respect to
/// both input columns, scaled by `g`.
inline double nmi_column(const double* a, const double* b, std::size_t n, std::size_t stride, std::size_t bins,
                         double h, double g, double* grad_a, double* grad_b) {
  using Mat = Eigen::MatrixXd;
  using Vec = Eigen::VectorXd;
  auto minmax = [&](const double* x, std::size_t& imin, std::size_t& imax) {
    imin = imax = 0;
    for (std::size_t s = 1; s < n; ++s) {
      if (x[s * stride] < x[imin * stride]) imin = s;
      if (x[s * stride] > x[imax * stride]) imax = s;
    }
  };
  std::size_t amin, amax, bmin, bmax;
  minmax(a, amin, amax);
  minmax(b, bmin, bmax);
  const double ra = a[amax * stride] - a[amin * stride];
  const double rb = b[bmax * stride] - b[bmin * stride];
  if (!(ra > 0.0) || !(rb > 0.0)) return 0.0;

  // Scratch reused across calls; this runs once per (patch, channel).
  // Wa, Wb are bins x n (one column of weights per sample).
  thread_local Mat Wa, Wb, J, GJ, GA, GB;
  thread_local Vec ua, ub;
  const auto N = static_cast<Eigen::Index>(n), B = static_cast<Eigen::Index>(bins);
  Wa.resize(B, N);
  Wb.resize(B, N);
  ua.resize(N);
  ub.resize(N);
  bool hard = true;
  for (Eigen::Index s = 0; s < N; ++s) {
    ua(s) = (a[static_cast<std::size_t>(s) * stride] - a[amin * stride]) / ra;
    ub(s) = (b[static_cast<std::size_t>(s) * stride] - b[bmin * stride]) / rb;
    hard = soft_assign(ua(s), bins, h, Wa.col(s).data()).n == 1 && hard;
    hard = soft_assign(ub(s), bins, h, Wb.col(s).data()).n == 1 && hard;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  const Vec pa = Wa.rowwise().sum() * inv_n;
  const Vec pb = Wb.rowwise().sum() * inv_n;
  J.noalias() = Wa * Wb.transpose();
  J *= inv_n;
  double ha = 0.0, hb = 0.0, hj = 0.0;
  for (Eigen::Index i = 0; i < B; ++i) {
    ha += entropy_term(pa(i));
    hb += entropy_term(pb(i));
  }
  // Vectorized log over the joint; empty cells contribute 0.
  thread_local Mat logJ;
  logJ = (J.array() > 0.0).select(J.array().max(1e-300).log(), 0.0);
  hj = -(J.array() * logJ.array()).sum();
  if (ha < 1e-9 || hb < 1e-9) return 0.0;
  const double denom = std::sqrt(ha * hb);
  const double mi = ha + hb - hj;
  const double nmi = mi / denom;
  // With one active bin per sample every weight is exactly 1 and the
  // gradient vanishes identically.
  if ((grad_a == nullptr && grad_b == nullptr) || hard) return nmi;

  // dNMI/dH for each entropy, then dH/dp = -(log p + 1).
  const double g_ha = g * (1.0 / denom - nmi / (2.0 * ha));
  const double g_hb = g * (1.0 / denom - nmi / (2.0 * hb));
  const double g_hj = -g / denom;
  auto dent = [](double p) { return p > 0.0 ? -(std::log(p) + 1.0) : 0.0; };
  Vec gpa(B), gpb(B);
  for (Eigen::Index i = 0; i < B; ++i) {
    gpa(i) = g_ha * dent(pa(i));
    gpb(i) = g_hb * dent(pb(i));
  }
  GJ = (J.array() > 0.0).select(-g_hj * (logJ.array() + 1.0), 0.0);

  // dL/dW (bins x n): marginal part plus the joint part.
  const double inv_h2 = 1.0 / (h * h);
  const double nb = static_cast<double>(bins);
  auto to_u = [&](const Mat& W, const Mat& G, const Vec& u, std::vector<double>& gu) {
    gu.assign(n, 0.0);
    for (Eigen::Index s = 0; s < N; ++s) {
      const double dot = W.col(s).dot(G.col(s));
      double acc = 0.0;
      for (Eigen::Index i = 0; i < B; ++i) {
        const double w = W(i, s);
        if (w == 0.0) continue;
        const double c = (static_cast<double>(i) + 0.5) / nb;
        acc += w * (G(i, s) - dot) * (c - u(s)) * inv_h2;
      }
      gu[static_cast<std::size_t>(s)] = acc;
    }
  };
  auto through_minmax = [&](const std::vector<double>& gu, const Vec& u, double range, std::size_t imin,
                            std::size_t imax, double* out) {
    double to_min = 0.0, to_max = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const double us = u(static_cast<Eigen::Index>(s));
      out[s * stride] += gu[s] / range;
      to_min += gu[s] * (us - 1.0) / range;
      to_max += gu[s] * (-us) / range;
    }
    out[imin * stride] += to_min;
    out[imax * stride] += to_max;
  };
  thread_local std::vector<double> gu;
  if (grad_a) {
    GA.noalias() = GJ * Wb;
    GA.colwise() += gpa;
    GA *= inv_n;
    to_u(Wa, GA, ua, gu);
    through_minmax(gu, ua, ra, amin, amax, grad_a);
  }
  if (grad_b) {
    GB.noalias() = GJ.transpose() * Wa;
    GB.colwise() += gpb;
    GB *= inv_n;
    to_u(Wb, GB, ub, gu);
    through_minmax(gu, ub, rb, bmin, bmax, grad_b);
  }
  return nmi;
}

}  // namespace detail

/// Mean over channels and over stacked patches of k rows of
/// NMI(x_high[:, c], x[:, c]) estimated with Gaussian soft histograms on
/// min-max normalized samples. Channels with a vanishing entropy contribute 0.
inline Tensor nmi_loss_stacked(Tape& tape, const Tensor& x_high, const Tensor& x, std::size_t k,
                               const NmiOptions& opt = {}) {
  require(opt.bins >= 2, ErrorCode::BadBins, "need at least 2 bins");
  require(x_high.rows() == x.rows() && x_high.cols() == x.cols(), ErrorCode::ShapeMismatch,
          "nmi_loss: shapes differ");
  require(k >= 1 && x.rows() % k == 0, ErrorCode::ShapeMismatch, "nmi_loss: rows must be a multiple of k");
  const std::size_t c = x.cols(), patches = x.rows() / k;
  const double h = opt.effective_bandwidth();
  const double weight = 1.0 / static_cast<double>(c * patches);
  Tensor out = detail::make_output(1, 1, {&x_high, &x});
  // The gradient is linear in the upstream value, so it is computed once at
  // unit scale alongside the forward pass and only rescaled on backward.
  const bool want_grad = out.requires_grad();
  const bool grad_h = want_grad && x_high.requires_grad(), grad_x = want_grad && x.requires_grad();
  auto unit_h = std::make_shared<std::vector<double>>(grad_h ? x.size() : 0, 0.0);
  auto unit_x = std::make_shared<std::vector<double>>(grad_x ? x.size() : 0, 0.0);
  double total = 0.0;
  for (std::size_t p = 0; p < patches; ++p) {
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t off = p * k * c + j;
      total += detail::nmi_column(&x_high.values()[off], &x.values()[off], k, c, opt.bins, h, 1.0,
                                  grad_h ? unit_h->data() + off : nullptr, grad_x ? unit_x->data() + off : nullptr);
    }
  }
  out.values()[0] = total * weight;
  if (want_grad) {
    tape.record([XH = x_high.data(), X = x.data(), O = out.data(), unit_h, unit_x, weight] {
      if (O->grad.empty()) return;
      const double g = O->grad[0] * weight;
      auto* gh = unit_h->empty() ? nullptr : detail::grad_sink(XH);
      if (gh) {
        for (std::size_t i = 0; i < gh->size(); ++i) (*gh)[i] += g * (*unit_h)[i];
      }
      auto* gx = unit_x->empty() ? nullptr : detail::grad_sink(X);
      if (gx) {
        for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += g * (*unit_x)[i];
      }
    });
  }
  return out;
}

/// NMI of a single k x C patch, averaged over channels.
inline Tensor nmi_loss(Tape& tape, const Tensor& x_high, const Tensor& x, const NmiOptions& opt = {}) {
  return nmi_loss_stacked(tape, x_high, x, x.rows(), opt);
}

/// Discrete NMI of two sample vectors after hard quantization into `bins`
/// equal-width bins of their min-max range.
inline double hard_nmi(const std::vector<double>& a, const std::vector<double>& b, std::size_t bins) {
  require(a.size() == b.size() && !a.empty(), ErrorCode::ShapeMismatch, "hard_nmi: size mismatch");
  auto quantize = [bins](const std::vector<double>& v) {
    const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
    std::vector<std::size_t> q(v.size(), 0);
    const double range = *mx - *mn;
    if (range <= 0.0) return q;
    for (std::size_t i = 0; i < v.size(); ++i) {
      q[i] = std::min(bins - 1, static_cast<std::size_t>((v[i] - *mn) / range * static_cast<double>(bins)));
    }
    return q;
  };
  const auto qa = quantize(a), qb = quantize(b);
  std::vector<double> pa(bins, 0.0), pb(bins, 0.0), pj(bins * bins, 0.0);
  const double inv = 1.0 / static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    pa[qa[i]] += inv;
    pb[qb[i]] += inv;
    pj[qa[i] * bins + qb[i]] += inv;
  }
  double ha = 0.0, hb = 0.0, hj = 0.0;
  for (double p : pa) ha += detail::entropy_term(p);
  for (double p : pb) hb += detail::entropy_term(p);
  for (double p : pj) hj += detail::entropy_term(p);
  if (ha < 1e-9 || hb < 1e-9) return 0.0;
  return (ha + hb - hj) / std::sqrt(ha * hb);
}

// ---------------------------------------------------------------------------
// Fused inference map
// ---------------------------------------------------------------------------

/// W = I - U D + Q U D, so that the aligned output is X W^T.
inline RowMatrix reparameterize(const LowRankHead& head) {
  const auto c = static_cast<Eigen::Index>(head.channels());
  const RowMatrix ud = head.U.mat() * head.D.mat();
  return RowMatrix::Identity(c, c) - ud + head.Q.mat() * ud;
}

enum class AlignMode { Train, Infer };

struct AlignedOutput {
  Tensor out;
  Tensor low;   // empty tensors in infer mode
  Tensor high;
};

/// Train mode: split, transform the low part by Q, recombine (X_h + X_l Q^T).
/// Infer mode: one matmul with the fused map. Both give the same output.
inline AlignedOutput aligned_forward(Tape& tape, const Tensor& x, const LowRankHead& head, AlignMode mode) {
  require(x.cols() == head.channels(), ErrorCode::ShapeMismatch, "aligned_forward: channel mismatch");
  AlignedOutput res;
  if (mode == AlignMode::Train) {
    auto split = lowrank_split(tape, x, head);
    res.low = split.low;
    res.high = split.high;
    res.out = add(tape, split.high, matmul(tape, split.low, transpose(tape, head.Q)));
    return res;
  }
  const RowMatrix w = reparameterize(head);
  res.out = Tensor::zeros(x.rows(), x.cols());
  detail::map(res.out.values(), x.rows(), x.cols()).noalias() = x.mat() * w.transpose();
  return res;
}

}  // namespace mdistill
