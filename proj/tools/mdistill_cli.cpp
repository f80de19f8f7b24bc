// mdistill command-line tool: data generation, training, evaluation,
// perturbation sweeps and gradient checks.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "mdistill/config.hpp"
#include "mdistill/dataset.hpp"
#include "mdistill/gradsuite.hpp"
#include "mdistill/run_io.hpp"
#include "mdistill/trainer.hpp"

namespace fs = std::filesystem;
using namespace mdistill;

namespace {

enum Exit : int {
  kOk = 0,
  kOther = 1,
  kConfig = 2,
  kIo = 3,
  kNonFinite = 4,
  kSchema = 5,
  kGradFail = 6,
};

int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::BadConfig:
    case ErrorCode::BadSpec:
    case ErrorCode::BadProtocol:
    case ErrorCode::BadGrid:
    case ErrorCode::BadAngle:
    case ErrorCode::BadTemperature:
    case ErrorCode::BadBins:
    case ErrorCode::NegativeSigma:
    case ErrorCode::BadFraction:
      return kConfig;
    case ErrorCode::IoError:
    case ErrorCode::ParseError:
      return kIo;
    case ErrorCode::NonFinite:
      return kNonFinite;
    case ErrorCode::SchemaMismatch:
      return kSchema;
    default:
      return kOther;
  }
}

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> out;
  std::istringstream is(s);
  std::string part;
  while (std::getline(is, part, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(part, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    require(used == part.size() && !part.empty(), ErrorCode::BadGrid, "cannot parse grid value '" + part + "'");
    out.push_back(v);
  }
  return out;
}

int cmd_gen_data(const std::string& config, const std::string& out) {
  const Settings s = load_config(config);
  s.data.validate();
  const auto data = generate(s.data);
  save_dataset(data, out);
  std::cout << "classes " << s.data.classes.size() << " train " << data.train.size() << " test " << data.test.size()
            << '\n';
  return kOk;
}

int cmd_train(const std::string& config, const std::string& data_dir, const std::string& out, Arm arm) {
  Settings s = load_config(config);
  TrainConfig cfg = s.resolved_train();
  cfg.arm = arm;
  cfg.verbose = true;
  cfg.validate();
  const Dataset train = load_split(data_dir, "train");
  const Dataset test = load_split(data_dir, "test");
  s.data.classes = train.class_names;
  Model model = Model::create(cfg.encoder, train.num_classes(), cfg.seed);

  std::error_code ec;
  fs::create_directories(out, ec);
  require(!ec, ErrorCode::IoError, "cannot create directory " + out);
  auto metrics = open_for_write(fs::path(out) / kMetricsFile);
  metrics << kMetricsHeader << '\n';
  const auto result = fit(model, train, &test, cfg, [&](const MetricsRecord& r) {
    write_metrics_row(metrics, r);
    metrics.flush();
  });
  require(static_cast<bool>(metrics), ErrorCode::IoError, "write failed for metrics.csv");
  write_checkpoint_files(out, s, model);
  const auto& last = result.epochs.back();
  std::cout << "arm " << to_string(arm) << " epochs " << result.epochs.size() << " acc_student "
            << format_g(last.acc_student, 9) << " acc_teacher " << format_g(last.acc_teacher, 9) << '\n';
  return kOk;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, double max_deg, std::uint64_t seed,
             const std::optional<std::string>& out) {
  const TrainedModel t = load_trained(ckpt);
  const Dataset test = load_eval_split(data_dir, t.settings);
  // Same corruption stream as the rotation sweep at this level.
  CorruptedView view(test, Protocol::Rotation, max_deg, derive_seed(seed, 0xC022));
  const EvalResult r = evaluate_voting(t.model, view, t.settings.train.vote_count, seed);
  const fs::path csv = out ? fs::path(*out) : fs::path(ckpt).parent_path() / "eval_per_class.csv";
  auto os = open_for_write(csv);
  write_per_class_csv(os, r, test.class_names);
  require(static_cast<bool>(os), ErrorCode::IoError, "write failed for " + csv.string());
  std::cout << "accuracy " << format_g(r.accuracy, 9) << '\n';
  return kOk;
}

int cmd_sweep(const std::string& ckpt, const std::string& data_dir, const std::string& protocol,
              const std::string& out, std::uint64_t seed, const std::optional<std::string>& grid) {
  const Protocol p = parse_protocol(protocol);
  const std::vector<double> levels = grid ? parse_grid(*grid) : default_grid(p);
  validate_grid(p, levels);
  const TrainedModel t = load_trained(ckpt);
  const Dataset test = load_eval_split(data_dir, t.settings);
  const auto rows = perturbation_sweep(t.model, test, p, levels, t.settings.train.vote_count, seed);
  auto os = open_for_write(out);
  write_sweep_csv(os, rows);
  require(static_cast<bool>(os), ErrorCode::IoError, "write failed for " + out);
  for (const auto& r : rows) std::cout << to_string(p) << ' ' << format_g(r.level, 9) << ' ' << format_g(r.accuracy, 9) << '\n';
  return kOk;
}

int cmd_gradcheck(bool full) {
  constexpr double kTol = 1e-4;
  auto checks = primitive_grad_checks(kTol, 1e-5);
  if (full) checks.push_back(end_to_end_grad_check(kTol, 1e-5));
  std::vector<std::string> failed;
  for (const auto& c : checks) {
    char line[128];
    std::snprintf(line, sizeof(line), "%-28s max_rel_error %.3e  %s", c.name.c_str(), c.report.max_rel_error,
                  c.report.passed ? "ok" : "FAIL");
    std::cout << line << '\n';
    if (!c.report.passed) failed.push_back(c.name);
  }
  if (!failed.empty()) {
    std::cerr << "gradient check failed for:";
    for (const auto& f : failed) std::cerr << ' ' << f;
    std::cerr << '\n';
    return kGradFail;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rotation-robust point cloud classification by teacher/student distillation"};
  app.footer(config_help());
  app.require_subcommand(1);

  std::string config, out, data, ckpt, protocol, csv_out;
  double rotate = 0.0;
  std::uint64_t seed = 0;
  std::optional<std::string> eval_out, grid;
  bool no_distill = false, augment = false, naive = false, full = false;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic shape dataset");
  gen->add_option("--config", config, "config file")->required();
  gen->add_option("--out", out, "output directory")->required();

  auto* train = app.add_subcommand("train", "Train a model; writes checkpoint.ckpt, model.cfg, metrics.csv");
  train->add_option("--config", config, "config file")->required();
  train->add_option("--data", data, "dataset directory")->required();
  train->add_option("--out", out, "output directory")->required();
  auto* f_nd = train->add_flag("--no-distill", no_distill, "student alone");
  auto* f_aug = train->add_flag("--augment", augment, "student alone on randomly rotated training clouds");
  auto* f_naive = train->add_flag("--naive-align", naive, "teacher + student with plain feature L2 alignment");
  f_nd->excludes(f_aug)->excludes(f_naive);
  f_aug->excludes(f_naive);

  auto* eval = app.add_subcommand("eval", "Voting accuracy on the test split under random rotation");
  eval->add_option("--ckpt", ckpt, "checkpoint file")->required();
  eval->add_option("--data", data, "dataset directory")->required();
  eval->add_option("--rotate", rotate, "max rotation angle in degrees")->required();
  eval->add_option("--seed", seed, "evaluation seed")->required();
  eval->add_option("--out", eval_out, "per-class CSV (default: eval_per_class.csv beside the checkpoint)");

  auto* sweep = app.add_subcommand("sweep", "Accuracy over a grid of corruption levels");
  sweep->add_option("--ckpt", ckpt, "checkpoint file")->required();
  sweep->add_option("--data", data, "dataset directory")->required();
  sweep->add_option("--protocol", protocol, "rotation, noise or outlier")->required();
  sweep->add_option("--out", csv_out, "output CSV")->required();
  sweep->add_option("--seed", seed, "corruption and evaluation seed")->default_val(0);
  sweep->add_option("--grid", grid, "comma-separated levels (default: protocol grid)");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable primitive");
  grad->add_flag("--full", full, "also check the end-to-end training loss on a tiny model");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) return cmd_gen_data(config, out);
    if (*train) {
      const Arm arm = no_distill ? Arm::NoDistill : augment ? Arm::Augment : naive ? Arm::NaiveAlign : Arm::Full;
      return cmd_train(config, data, out, arm);
    }
    if (*eval) return cmd_eval(ckpt, data, rotate, seed, eval_out);
    if (*sweep) return cmd_sweep(ckpt, data, protocol, csv_out, seed, grid);
    if (*grad) return cmd_gradcheck(full);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
  return kOther;
}
