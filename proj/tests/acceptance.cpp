// Acceptance gate: one PASS/FAIL line per criterion.
//
//   acceptance            all criteria
//   acceptance 1 4 9      a subset
//
// Criteria 5, 6, 7 and 10 share the benchmark runs (no-distill, full,
// naive-align), which are trained once.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mdistill/config.hpp"
#include "mdistill/gradsuite.hpp"
#include "mdistill/trainer.hpp"

namespace fs = std::filesystem;
using namespace mdistill;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

Tensor randn(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(r, c);
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

// Curved random surface patch cloud: a quadric height field with random
// coefficients, so each LRA has a clear smallest-variance direction.
std::vector<Vec3> random_surface(std::size_t n, Rng& rng) {
  const double a = rng.uniform(-0.6, 0.6), b = rng.uniform(-0.6, 0.6), c = rng.uniform(-0.4, 0.4);
  std::vector<Vec3> pts(n);
  for (auto& p : pts) {
    const double x = rng.uniform(-1, 1), y = rng.uniform(-1, 1);
    p = Vec3(x, y, a * x * x + b * y * y + c * x * y + 0.02 * rng.normal());
  }
  return pts;
}

std::vector<Vec3> rotated(const std::vector<Vec3>& pts, const RigidTransform& t) {
  std::vector<Vec3> out(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) out[i] = t.rotation * pts[i] + t.translation;
  return out;
}

Patch knn_patch(const std::vector<Vec3>& pts, std::size_t center, std::size_t k) {
  Patch p;
  p.center_index = center;
  p.neighbor_indices = knn(pts, std::vector<Vec3>{pts[center]}, k)[0];
  return p;
}

// ---------------------------------------------------------------------------
// 1. teacher rotation invariance

// Max-pooled last-level teacher features with fused heads.
std::vector<double> teacher_global_feature(const Model& m, const CloudGeometry& geo) {
  NoGradGuard no_grad;
  Tape tape;
  FeatureMap t;
  for (std::size_t l = 0; l < geo.levels.size(); ++l) {
    t = teacher_level(tape, l == 0 ? nullptr : &t, geo.levels[l], m.teacher[l], static_cast<int>(l));
    t.features = aligned_forward(tape, t.features, m.teacher_heads[l], AlignMode::Infer).out;
  }
  return max_reduce(tape, t.features, 0).values();
}

Outcome criterion_teacher_invariance() {
  Rng rng(101);
  double worst = 0.0;
  std::size_t compared = 0, skipped = 0;
  for (int p = 0; p < 100; ++p) {
    const auto pts = random_surface(160, rng);
    const auto lras = compute_all_lras(pts, 12);
    const auto patch = knn_patch(pts, rng.uniform_index(pts.size()), 16);
    const auto base = teacher_patch_coords(pts, lras, patch);
    for (int r = 0; r < 20; ++r) {
      RigidTransform t = random_rotation(180.0, rng);
      t.translation = Vec3(rng.normal(), rng.normal(), rng.normal());
      const auto moved = rotated(pts, t);
      const auto c = teacher_patch_coords(moved, compute_all_lras(moved, 12), patch);
      if (base.degenerate || c.degenerate) {
        ++skipped;
        continue;
      }
      worst = std::max(worst, (base.values - c.values).cwiseAbs().maxCoeff());
      ++compared;
    }
  }

  // End to end through an untrained teacher with randomized heads.
  EncoderConfig enc;
  enc.levels = {{64, 16, 0, {0.25, 0.5}, {32, 32}}, {16, 8, 0, {0.5, 1.0}, {64, 64}}};
  Model m = Model::create(enc, 4, 7);
  for (auto& h : m.teacher_heads) {
    for (auto& v : h.U.values()) v = 0.3 * rng.normal();
    for (auto& v : h.Q.values()) v += 0.2 * rng.normal();
  }
  SyntheticSpec spec;
  spec.classes = {"sphere", "cube", "cylinder", "torus"};
  spec.train_per_class = 3;
  spec.test_per_class = 1;
  spec.seed = 77;
  const auto clouds = generate(spec).train.clouds;
  double worst_rel = 0.0;
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    const auto& pts = clouds[i].points;
    for (int r = 0; r < 5; ++r) {
      const auto moved = rotated(pts, random_rotation(180.0, rng));
      Rng g1(i), g2(i);
      const auto a = teacher_global_feature(m, build_geometry(pts, enc, g1));
      const auto b = teacher_global_feature(m, build_geometry(moved, enc, g2));
      double num = 0.0, den = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) {
        num += (a[k] - b[k]) * (a[k] - b[k]);
        den += a[k] * a[k];
      }
      worst_rel = std::max(worst_rel, std::sqrt(num / den));
    }
  }
  const bool enough = compared >= 1000;
  return {worst < 1e-4 && worst_rel < 1e-3 && enough,
          fmt("max coord change %.2e", worst) + " over " + std::to_string(compared) + " patch-rotations (" +
              std::to_string(skipped) + " degenerate skipped), max global rel change " + fmt("%.2e", worst_rel)};
}

// ---------------------------------------------------------------------------
// 2. fused vs unfused alignment head

Outcome criterion_reparam() {
  Rng rng(202);
  double worst = 0.0;
  for (std::size_t c : {8, 32, 64}) {
    const std::size_t r = c / 4;
    for (int i = 0; i < 1000; ++i) {
      LowRankHead h = LowRankHead::init(c, r, rng);
      h.D = randn(r, c, rng, 0.5);
      h.U = randn(c, r, rng, 0.5);
      h.Q = randn(c, c, rng, 0.5);
      const Tensor x = randn(16, c, rng);
      Tape tape;
      // Unfused: explicit split, Q on the low part, recombine.
      const Tensor low = matmul(tape, matmul(tape, x, transpose(tape, h.D)), transpose(tape, h.U));
      const Tensor high = sub(tape, x, low);
      const Tensor unfused = add(tape, high, matmul(tape, low, transpose(tape, h.Q)));
      const Tensor fused = aligned_forward(tape, x, h, AlignMode::Infer).out;
      const Tensor train = aligned_forward(tape, x, h, AlignMode::Train).out;
      const double scale = std::max(1.0, unfused.mat().cwiseAbs().maxCoeff());
      worst = std::max(worst, (fused.mat() - unfused.mat()).cwiseAbs().maxCoeff() / scale);
      worst = std::max(worst, (train.mat() - unfused.mat()).cwiseAbs().maxCoeff() / scale);
    }
  }
  return {worst <= 1e-12, fmt("max relative difference %.2e over 3000 heads", worst)};
}

// ---------------------------------------------------------------------------
// 3. gradient oracle

Outcome criterion_gradients() {
  auto checks = primitive_grad_checks(1e-4, 1e-5);
  checks.push_back(end_to_end_grad_check(1e-4, 1e-5));
  double worst = 0.0;
  std::string failed;
  for (const auto& c : checks) {
    worst = std::max(worst, c.report.max_rel_error);
    if (!c.report.passed) failed += " " + c.name;
  }
  return {failed.empty(), std::to_string(checks.size()) + " checks, max relative error " + fmt("%.2e", worst) +
                              (failed.empty() ? "" : ", failing:" + failed)};
}

// ---------------------------------------------------------------------------
// 4. permutation invariance

Outcome criterion_permutation() {
  Rng rng(404);
  ParamStore store;
  const Mlp mlp = Mlp::create(store, "pn", 6, {16, 32}, true, true, rng);
  EncoderConfig enc;
  enc.levels = {{32, 12, 0, {0.3, 0.6}, {16, 16}}};
  std::vector<Mlp> per_radius;
  for (int r = 0; r < 2; ++r) per_radius.push_back(Mlp::create(store, "gsm" + std::to_string(r), 6 + 5, {8, 8}, true, true, rng));

  std::size_t pn_diff = 0, gsm_diff = 0, teacher_diff = 0, teacher_checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    // pointnet_map: shuffle rows within one patch.
    const std::size_t k = 4 + rng.uniform_index(17);
    const Tensor rows = randn(k, 6, rng);
    IndexList perm(k);
    for (std::size_t i = 0; i < k; ++i) perm[i] = i;
    shuffle(perm, rng);
    Tape tape;
    const auto a = pointnet_map(tape, rows, mlp, k);
    const auto b = pointnet_map(tape, gather_rows(tape, rows, perm), mlp, k);
    if (a.values() != b.values()) ++pn_diff;

    // gsm_block: shuffle each patch's neighbor list in every radius shell.
    const auto pts = random_surface(96, rng);
    Rng g(static_cast<std::uint64_t>(trial));
    const auto geo = build_geometry(pts, enc, g);
    const auto& lg = geo.levels[0];
    const Tensor sf = randn(pts.size(), 5, rng);
    auto nbrs = lg.ball_neighbors;
    for (auto& flat : nbrs) {
      for (std::size_t p = 0; p < lg.centers.size(); ++p) {
        auto first = flat.begin() + static_cast<std::ptrdiff_t>(p * lg.k);
        IndexList local(first, first + static_cast<std::ptrdiff_t>(lg.k));
        shuffle(local, rng);
        std::copy(local.begin(), local.end(), first);
      }
    }
    const auto ga = gsm_block(tape, lg.input_points, lg.center_coords, sf, lg.ball_neighbors, lg.k, per_radius);
    const auto gb = gsm_block(tape, lg.input_points, lg.center_coords, sf, nbrs, lg.k, per_radius);
    if (ga.values() != gb.values()) ++gsm_diff;

    // Teacher coordinates: permute the neighbor input list.
    const auto lras = compute_all_lras(pts, 12);
    auto patch = knn_patch(pts, rng.uniform_index(pts.size()), 12);
    const auto ta = teacher_patch_coords(pts, lras, patch);
    shuffle(patch.neighbor_indices, rng);
    const auto tb = teacher_patch_coords(pts, lras, patch);
    ++teacher_checked;
    if (!(ta.values == tb.values)) ++teacher_diff;
  }
  return {pn_diff == 0 && gsm_diff == 0 && teacher_diff == 0,
          "differing outputs over 100 patches: pointnet_map " + std::to_string(pn_diff) + ", gsm_block " +
              std::to_string(gsm_diff) + ", teacher coords " + std::to_string(teacher_diff)};
}

// ---------------------------------------------------------------------------
// 8. KL contract

Outcome criterion_kl() {
  Rng rng(808);
  const KlOptions opt;
  const std::size_t k = 16, c = 32, patches = 4;
  // Identical maps from identical features and Q.
  Tensor low = randn(patches * k, c, rng);
  Tensor q = randn(c, c, rng, 0.3);
  Tensor low_t = low.clone(), low_s = low.clone();
  low_t.set_requires_grad(true);
  low_s.set_requires_grad(true);
  Tape tape;
  Rng rows(1);
  const Tensor loss = kl_alignment_loss_stacked(tape, attention_maps(tape, low_t, q, k), attention_maps(tape, low_s, q, k),
                                                k, opt, c, rows);
  tape.backward(loss);
  bool zero_grad = true;
  for (double g : low_t.grad()) zero_grad = zero_grad && g == 0.0;
  for (double g : low_s.grad()) zero_grad = zero_grad && g == 0.0;
  const bool exact_zero = loss.item() == 0.0;

  double min_loss = INFINITY;
  for (int i = 0; i < 10000; ++i) {
    const std::size_t kk = 2 + rng.uniform_index(15);
    const Tensor a = randn(kk, kk, rng, rng.uniform(0.1, 20.0));
    const Tensor b = randn(kk, kk, rng, rng.uniform(0.1, 20.0));
    KlOptions o;
    o.temperature = rng.uniform(0.5, 8.0);
    o.lambda_teacher_student = rng.uniform();
    o.lambda_student_teacher = rng.uniform();
    o.sample_rows = 1 + rng.uniform_index(kk);
    Tape t;
    min_loss = std::min(min_loss, kl_alignment_loss(t, a, b, o, 16, rng).item());
  }
  return {exact_zero && zero_grad && min_loss >= 0.0,
          std::string("identical maps: loss ") + (exact_zero ? "0" : "nonzero") + ", gradients " +
              (zero_grad ? "all 0" : "nonzero") + "; min over 10^4 random pairs " + fmt("%.3e", min_loss)};
}

// ---------------------------------------------------------------------------
// 9. NMI estimator

// Hard-quantized NMI from integer counts; written independently of the
// library's estimator.
double oracle_nmi(const std::vector<double>& a, const std::vector<double>& b, int bins) {
  auto bin_of = [bins](const std::vector<double>& v) {
    const double lo = *std::min_element(v.begin(), v.end()), hi = *std::max_element(v.begin(), v.end());
    std::vector<int> q(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) q[i] = std::min(bins - 1, static_cast<int>((v[i] - lo) / (hi - lo) * bins));
    return q;
  };
  const auto qa = bin_of(a), qb = bin_of(b);
  std::map<int, long> ca, cb;
  std::map<std::pair<int, int>, long> cj;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++ca[qa[i]];
    ++cb[qb[i]];
    ++cj[{qa[i], qb[i]}];
  }
  const double n = static_cast<double>(a.size());
  auto h = [n](const auto& counts) {
    double s = 0.0;
    for (const auto& kv : counts) s -= kv.second / n * std::log(kv.second / n);
    return s;
  };
  const double ha = h(ca), hb = h(cb), hj = h(cj);
  return (ha + hb - hj) / std::sqrt(ha * hb);
}

Outcome criterion_nmi() {
  Rng rng(909);
  const std::size_t n = 4096;
  auto column = [n](const std::vector<double>& v) {
    Tensor t = Tensor::zeros(n, 1);
    for (std::size_t i = 0; i < n; ++i) t.at(i, 0) = v[i];
    return t;
  };
  auto estimate = [&](const std::vector<double>& a, const std::vector<double>& b) {
    Tape tape;
    return nmi_loss(tape, column(a), column(b), NmiOptions{16, 0.0}).item();
  };
  std::vector<double> x(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = rng.uniform();
    y[i] = rng.uniform();
  }
  const double self = estimate(x, x);
  const double indep = estimate(x, y);
  double worst = std::abs(self - oracle_nmi(x, x, 16));
  worst = std::max(worst, std::abs(indep - oracle_nmi(x, y, 16)));
  for (double coupling : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = rng.normal();
      b[i] = coupling * a[i] + (1.0 - coupling) * rng.normal();
    }
    worst = std::max(worst, std::abs(estimate(a, b) - oracle_nmi(a, b, 16)));
  }
  return {self >= 0.98 && self <= 1.02 && indep < 0.1 && worst <= 0.05,
          fmt("NMI(x,x) %.4f", self) + fmt(", NMI(x,indep) %.4f", indep) + fmt(", max |estimate - oracle| %.4f", worst)};
}

// ---------------------------------------------------------------------------
// Benchmark runs shared by 5, 6, 7, 10

struct BenchRun {
  Arm arm;
  Model model;
  FitResult fit;
  double clean = 0.0;
  double rotated = 0.0;
  double seconds = 0.0;
};

Settings bench_settings() {
  Settings s;
  s.data.classes = {"sphere", "cube", "cylinder", "torus"};
  s.data.points_per_cloud = 256;
  s.data.train_per_class = 200;
  s.data.test_per_class = 100;
  s.data.seed = 1;
  s.train.epochs = 12;
  s.train.batch_size = 32;
  s.train.seed = 1;
  s.encoder.centers = {64, 16};
  s.encoder.neighbors = {16, 8};
  s.encoder.feature_neighbors = {0, 0};
  s.encoder.radii = {{0.25, 0.5}, {0.5, 1.0}};
  s.encoder.channels = {{32, 32}, {64, 64}};
  s.encoder.head_hidden = 32;
  return s;
}

constexpr std::uint64_t kEvalSeed = 2024;

struct Bench {
  Settings settings = bench_settings();
  SplitDataset data;
  std::map<Arm, BenchRun> runs;

  const BenchRun& get(Arm arm) {
    auto it = runs.find(arm);
    if (it != runs.end()) return it->second;
    if (data.train.size() == 0) data = generate(settings.data);
    const auto t0 = Clock::now();
    TrainConfig cfg = settings.resolved_train();
    cfg.arm = arm;
    BenchRun r{arm, Model::create(cfg.encoder, data.train.num_classes(), cfg.seed), {}, 0, 0, 0};
    r.fit = fit(r.model, data.train, nullptr, cfg);
    const std::size_t votes = cfg.vote_count;
    r.clean = evaluate_voting(r.model, CorruptedView(data.test), votes, kEvalSeed).accuracy;
    CorruptedView rot(data.test, Protocol::Rotation, 30.0, derive_seed(kEvalSeed, 0xC022));
    r.rotated = evaluate_voting(r.model, rot, votes, kEvalSeed).accuracy;
    r.seconds = seconds_since(t0);
    std::cout << "  [" << to_string(arm) << "] clean " << fmt("%.4f", r.clean) << " rotated " << fmt("%.4f", r.rotated)
              << " (" << fmt("%.0f s", r.seconds) << ")" << std::endl;
    return runs.emplace(arm, std::move(r)).first->second;
  }
};

Outcome criterion_distillation(Bench& b) {
  const auto& nd = b.get(Arm::NoDistill);
  const auto& full = b.get(Arm::Full);
  const double drop_nd = nd.clean - nd.rotated, drop_full = full.clean - full.rotated;
  const double secs = nd.seconds + full.seconds;
  const bool pass = drop_full <= 0.5 * drop_nd && full.rotated > nd.rotated && secs < 1800.0;
  return {pass, fmt("no-distill drop %.4f", drop_nd) + fmt(", full drop %.4f", drop_full) +
                    fmt(", rotated %.4f", full.rotated) + fmt(" vs %.4f", nd.rotated) + fmt(", %.0f s of 1800", secs)};
}

Outcome criterion_ablation(Bench& b) {
  const auto& nd = b.get(Arm::NoDistill);
  const auto& full = b.get(Arm::Full);
  const auto& naive = b.get(Arm::NaiveAlign);
  const double band = 0.01;
  const double secs = nd.seconds + full.seconds + naive.seconds;
  const bool pass = naive.rotated <= nd.rotated + band && nd.rotated <= full.rotated + band &&
                    full.rotated - naive.rotated >= 0.03 && secs < 2700.0;
  return {pass, fmt("rotated: naive %.4f", naive.rotated) + fmt(", no-distill %.4f", nd.rotated) +
                    fmt(", full %.4f", full.rotated) + fmt(", %.0f s of 2700", secs)};
}

Outcome criterion_bookkeeping(Bench& b) {
  std::size_t steps = 0;
  double worst = 0.0;
  for (Arm arm : {Arm::NoDistill, Arm::Full, Arm::NaiveAlign}) {
    for (const auto& s : b.get(arm).fit.steps) {
      worst = std::max(worst, std::abs(s.total - (s.kl + s.nmi_t + s.nmi_s + s.ce_t + s.ce_s)));
      ++steps;
    }
  }
  return {steps > 0 && worst <= 1e-9, std::to_string(steps) + " steps, max |total - sum| " + fmt("%.2e", worst)};
}

Outcome criterion_sweeps(Bench& b) {
  const auto& full = b.get(Arm::Full);
  const std::size_t votes = b.settings.train.vote_count;
  auto csv = [&](Protocol p) {
    std::ostringstream os;
    write_sweep_csv(os, perturbation_sweep(full.model, b.data.test, p, default_grid(p), votes, kEvalSeed));
    return os.str();
  };
  const std::string noise = csv(Protocol::Noise), outlier = csv(Protocol::Outlier);
  const bool deterministic = noise == csv(Protocol::Noise) && outlier == csv(Protocol::Outlier);
  const auto noise_rows = perturbation_sweep(full.model, b.data.test, Protocol::Noise, {0.0, 0.1}, votes, kEvalSeed);
  const auto outlier_rows = perturbation_sweep(full.model, b.data.test, Protocol::Outlier, {0.0}, votes, kEvalSeed);
  const bool zero_rows = noise_rows[0].accuracy == full.clean && outlier_rows[0].accuracy == full.clean;
  const bool drops = noise_rows[1].accuracy < noise_rows[0].accuracy;
  return {deterministic && zero_rows && drops,
          std::string(deterministic ? "deterministic" : "NOT deterministic") + fmt(", clean %.4f", full.clean) +
              fmt(", sigma=0 %.4f", noise_rows[0].accuracy) + fmt(", fraction=0 %.4f", outlier_rows[0].accuracy) +
              fmt(", sigma=0.1 %.4f", noise_rows[1].accuracy)};
}

// ---------------------------------------------------------------------------
// 11. determinism of the train command

int run_cli(const std::string& args) {
  const std::string cmd = std::string(MDISTILL_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

Outcome criterion_determinism() {
  const fs::path dir = fs::temp_directory_path() / ("mdistill_accept_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  Settings s = bench_settings();
  s.data.train_per_class = 20;
  s.data.test_per_class = 10;
  s.train.epochs = 3;
  {
    std::ofstream os(dir / "run.cfg");
    write_config(os, s);
  }
  const std::string cfg = (dir / "run.cfg").string(), data = (dir / "data").string();
  bool ok = run_cli("gen-data --config " + cfg + " --out " + data) == 0;
  ok = ok && run_cli("train --config " + cfg + " --data " + data + " --out " + (dir / "a").string()) == 0;
  ok = ok && run_cli("train --config " + cfg + " --data " + data + " --out " + (dir / "b").string()) == 0;
  const std::string ma = slurp(dir / "a" / "metrics.csv"), mb = slurp(dir / "b" / "metrics.csv");
  const std::string ca = slurp(dir / "a" / "checkpoint.ckpt"), cb = slurp(dir / "b" / "checkpoint.ckpt");
  fs::remove_all(dir);
  const bool same = ok && !ma.empty() && !ca.empty() && ma == mb && ca == cb;
  return {same, ok ? "metrics " + std::to_string(ma.size()) + " B " + (ma == mb ? "identical" : "DIFFER") +
                         ", checkpoint " + std::to_string(ca.size()) + " B " + (ca == cb ? "identical" : "DIFFER")
                   : "train command failed"};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  Bench bench;

  struct Criterion {
    int id;
    const char* name;
    double budget_s;  // 0: no runtime bound, or checked inside
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "teacher rotation invariance", 30, criterion_teacher_invariance},
      {2, "reparameterization exactness", 10, criterion_reparam},
      {3, "gradient oracle", 120, criterion_gradients},
      {4, "permutation invariance", 30, criterion_permutation},
      {8, "KL loss contract", 0, criterion_kl},
      {9, "NMI estimator", 20, criterion_nmi},
      {11, "train determinism", 0, criterion_determinism},
      {5, "distillation benefit", 0, [&] { return criterion_distillation(bench); }},
      {6, "ablation direction", 0, [&] { return criterion_ablation(bench); }},
      {7, "loss bookkeeping", 0, [&] { return criterion_bookkeeping(bench); }},
      {10, "perturbation sweeps", 0, [&] { return criterion_sweeps(bench); }},
  };

  std::map<int, std::string> lines;
  bool all = true;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    if (c.budget_s > 0 && secs >= c.budget_s) {
      o.pass = false;
      o.detail += fmt("; over the %.0f s budget", c.budget_s);
    }
    all = all && o.pass;
    std::ostringstream line;
    line << "criterion " << c.id << " " << (o.pass ? "PASS" : "FAIL") << "  " << c.name << ": " << o.detail
         << fmt(" [%.1f s]", secs);
    std::cout << line.str() << std::endl;
    lines[c.id] = line.str();
  }
  std::cout << "\nsummary\n";
  for (const auto& [id, l] : lines) std::cout << l << '\n';
  return all ? 0 : 1;
}
