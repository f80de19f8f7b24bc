#pragma once

// Finite-difference suite over every differentiable primitive, and an
// end-to-end check of the full two-branch training loss on a tiny encoder.

#include <string>
#include <vector>

#include "mdistill/align.hpp"
#include "mdistill/diffcore.hpp"
#include "mdistill/trainer.hpp"

namespace mdistill {

struct NamedCheck {
  std::string name;
  GradCheckReport report;
};

namespace gradsuite_detail {

inline Tensor randn(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(r, c);
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

// Fixed random weights so every output entry gets its own upstream gradient.
inline Tensor weighted_sum(Tape& tape, const Tensor& y) {
  Rng rng(99);
  return sum_all(tape, mul(tape, y, randn(y.rows(), y.cols(), rng)));
}

}  // namespace gradsuite_detail

/// Central differences (step `step`) against the tape for every primitive.
inline std::vector<NamedCheck> primitive_grad_checks(double tol = 1e-4, double step = 1e-5) {
  using gradsuite_detail::randn;
  using gradsuite_detail::weighted_sum;
  using Fn = std::function<Tensor(Tape&, const Tensor&)>;
  Rng rng(2024);
  const Tensor x = randn(4, 3, rng);
  const Tensor y = randn(4, 3, rng);
  const Tensor sq = randn(3, 3, rng);
  const Tensor row = randn(1, 3, rng);
  const Tensor gamma = randn(1, 3, rng);
  // relu / max inputs kept away from kinks and ties.
  const Tensor away = Tensor::from(2, 3, {0.5, -0.7, 1.2, -0.3, 0.9, 2.0});
  const Tensor pos = Tensor::from(2, 2, {0.5, 1.5, 2.0, 0.8});
  const Tensor zt = randn(5, 6, rng), zs = randn(5, 6, rng);
  const Tensor xh = randn(12, 3, rng), xn = randn(12, 3, rng);
  const NmiOptions smooth{8, 0.08};

  std::vector<std::pair<std::string, std::pair<Fn, Tensor>>> cases = {
      {"matmul", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, matmul(t, v, sq)); }, x}},
      {"matmul_rhs", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, matmul(t, x, v)); }, sq}},
      {"transpose", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, transpose(t, v)); }, x}},
      {"add", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, add(t, v, y)); }, x}},
      {"sub", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, sub(t, y, v)); }, x}},
      {"mul", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, mul(t, v, v)); }, x}},
      {"scalar_mul", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, scalar_mul(t, v, -2.5)); }, x}},
      {"add_scalar", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, add_scalar(t, v, 0.7)); }, x}},
      {"add_row", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, add_row(t, x, v)); }, row}},
      {"concat_rows", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, concat(t, {v, y}, 0)); }, x}},
      {"concat_cols", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, concat(t, {y, v}, 1)); }, x}},
      {"slice_cols", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, slice_cols(t, v, 1, 2)); }, x}},
      {"relu", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, relu(t, v)); }, away}},
      {"max_pool_rows", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, max_pool_rows(t, v, 2)); }, away}},
      {"max_reduce", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, max_reduce(t, v, 0)); }, away}},
      {"mean_reduce", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, mean_reduce(t, v, 1)); }, x}},
      {"sum_all", {[&](Tape& t, const Tensor& v) { return sum_all(t, v); }, x}},
      {"softmax_rows", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, softmax_rows(t, v, 1.7)); }, x}},
      {"log_softmax_rows", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, log_softmax_rows(t, v, 4.0)); }, x}},
      {"log", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, log(t, v)); }, pos}},
      {"exp", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, exp(t, v)); }, x}},
      {"square", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, square(t, v)); }, x}},
      {"sqrt", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, sqrt(t, v)); }, pos}},
      {"gather_rows", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, gather_rows(t, v, {3, 0, 3, 1})); }, x}},
      {"layer_norm_rows", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, layer_norm_rows(t, v, gamma, row)); }, x}},
      {"layer_norm_gain", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, layer_norm_rows(t, x, v, row)); }, gamma}},
      {"block_gram", {[&](Tape& t, const Tensor& v) { return weighted_sum(t, block_gram(t, v, 2)); }, x}},
      {"symmetric_kl_rows", {[&](Tape& t, const Tensor& v) { return symmetric_kl_rows(t, v, zs, 4.0, 0.5, 0.5); }, zt}},
      {"symmetric_kl_rows_student", {[&](Tape& t, const Tensor& v) { return symmetric_kl_rows(t, zt, v, 2.0, 0.2, 0.8); }, zs}},
      {"nmi_loss", {[&](Tape& t, const Tensor& v) { return nmi_loss_stacked(t, v, xn, 6, smooth); }, xh}},
      {"nmi_loss_reference", {[&](Tape& t, const Tensor& v) { return nmi_loss_stacked(t, xh, v, 6, smooth); }, xn}},
  };
  std::vector<NamedCheck> out;
  for (const auto& [name, c] : cases) out.push_back({name, grad_check(c.first, c.second, tol, step)});
  return out;
}

/// Tiny encoder used by the end-to-end check: k=4, m=(16,8), C=(8,16).
inline EncoderConfig tiny_encoder() {
  EncoderConfig e;
  e.levels = {{16, 4, 0, {0.4, 0.8}, {8}}, {8, 4, 0, {0.8, 1.6}, {16}}};
  e.head_hidden = 8;
  return e;
}

/// Full-pipeline batch loss (attention KL, both NMI terms, both CEs) on a
/// 2-cloud batch, checked over every parameter tensor. The alignment heads
/// are randomized so the KL path carries gradient.
inline NamedCheck end_to_end_grad_check(double tol = 1e-4, double step = 1e-5, std::size_t max_per_tensor = 0) {
  TrainConfig cfg;
  cfg.encoder = tiny_encoder();
  Model model = Model::create(cfg.encoder, 3, 11);
  Rng rng(12);
  for (auto* heads : {&model.student_heads, &model.teacher_heads}) {
    for (auto& h : *heads) {
      for (auto& v : h.U.values()) v = 0.3 * rng.normal();
      for (auto& v : h.Q.values()) v += 0.2 * rng.normal();
    }
  }
  std::vector<std::vector<Vec3>> clouds;
  std::vector<CloudGeometry> geos;
  for (int b = 0; b < 2; ++b) {
    std::vector<Vec3> pts(48);
    for (auto& p : pts) p = Vec3(rng.normal(), 0.7 * rng.normal(), 0.4 * rng.normal());
    PointCloud c;
    c.points = pts;
    c.points = normalize_to_unit_sphere(c).points;
    Rng g(100 + static_cast<std::uint64_t>(b));
    geos.push_back(build_geometry(c.points, cfg.encoder, g));
    clouds.push_back(c.points);
  }
  const ForwardOptions fopt = forward_options_for(Arm::Full, cfg);
  auto loss = [&](Tape& tape) {
    Rng kl_rng(5);  // same sampled attention rows on every evaluation
    std::vector<LossTerms> terms;
    for (std::size_t b = 0; b < 2; ++b) {
      auto f = shared_center_forward(tape, model, clouds[b], geos[b], fopt, cfg, kl_rng);
      terms.push_back(total_loss(tape, f, static_cast<int>(b)));
    }
    return batch_mean(tape, terms).total;
  };
  return {"end_to_end", grad_check_params(loss, model.store.tensors(), tol, step, max_per_tensor)};
}

}  // namespace mdistill
