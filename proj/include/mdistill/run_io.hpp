#pragma once

// Files of a training run: checkpoint.ckpt, the resolved model.cfg next to
// it, and metrics.csv. Evaluation rebuilds the model from model.cfg and
// then loads the checkpoint into it.

#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "mdistill/config.hpp"
#include "mdistill/trainer.hpp"

namespace mdistill {

inline constexpr const char* kCheckpointFile = "checkpoint.ckpt";
inline constexpr const char* kModelConfigFile = "model.cfg";
inline constexpr const char* kMetricsFile = "metrics.csv";

inline Model build_model(const Settings& s) {
  return Model::create(s.encoder.build(), s.data.classes.size(), s.train.seed);
}

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorCode::IoError, "cannot write " + path.string());
  return os;
}

inline void write_checkpoint_files(const std::filesystem::path& dir, const Settings& s, const Model& m) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorCode::IoError, "cannot create directory " + dir.string());
  {
    auto os = open_for_write(dir / kModelConfigFile);
    write_config(os, s);
    require(static_cast<bool>(os), ErrorCode::IoError, "write failed for model.cfg");
  }
  auto os = open_for_write(dir / kCheckpointFile);
  write_checkpoint(os, m.store);
  require(static_cast<bool>(os), ErrorCode::IoError, "write failed for checkpoint");
}

struct TrainedModel {
  Settings settings;
  Model model;
};

/// Loads a checkpoint and the model.cfg beside it. A missing or mismatched
/// model description is a schema error; an unreadable checkpoint is I/O.
inline TrainedModel load_trained(const std::filesystem::path& ckpt) {
  std::ifstream is(ckpt, std::ios::binary);
  require(static_cast<bool>(is), ErrorCode::IoError, "cannot open checkpoint " + ckpt.string());
  const auto cfg_path = ckpt.parent_path() / kModelConfigFile;
  require(std::filesystem::exists(cfg_path), ErrorCode::SchemaMismatch,
          "no " + std::string(kModelConfigFile) + " next to " + ckpt.string());
  TrainedModel t;
  try {
    t.settings = load_config(cfg_path);
    t.model = build_model(t.settings);
  } catch (const Error& e) {
    throw Error(ErrorCode::SchemaMismatch, cfg_path.string() + " does not describe a model: " + e.what());
  }
  read_checkpoint(is, t.model.store);
  return t;
}

/// Test split of `data_dir`, checked against the model's class list.
inline Dataset load_eval_split(const std::filesystem::path& data_dir, const Settings& s) {
  Dataset test = load_split(data_dir, "test");
  require(test.class_names == s.data.classes, ErrorCode::SchemaMismatch,
          "dataset classes do not match the checkpoint's classes");
  return test;
}

inline void write_per_class_csv(std::ostream& os, const EvalResult& r, const std::vector<std::string>& names) {
  os << "class,label,count,accuracy\n";
  for (std::size_t c = 0; c < names.size(); ++c) {
    os << names[c] << ',' << c << ',' << r.per_class_count[c] << ',' << format_g(r.per_class_accuracy[c], 9) << '\n';
  }
}

}  // namespace mdistill
