#pragma once

// Flat key=value configuration covering the synthetic data spec, training
// options and encoder shape. One schema table drives parsing, --help and
// the resolved copy written next to each checkpoint.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mdistill/dataset.hpp"
#include "mdistill/trainer.hpp"

namespace mdistill {

/// Encoder as flat lists; one entry per level.
struct EncoderSpec {
  std::vector<std::size_t> centers{128, 64, 16};
  std::vector<std::size_t> neighbors{16, 16, 16};
  std::vector<std::size_t> feature_neighbors{0, 0, 0};
  std::vector<std::vector<double>> radii{{0.2, 0.4}, {0.4, 0.8}, {0.8, 1.6}};
  std::vector<std::vector<std::size_t>> channels{{64, 64}, {128, 128}, {256, 256}};
  double rank_fraction = 0.25;
  std::size_t head_hidden = 64;
  bool layer_norm = true;

  EncoderConfig build() const {
    const std::size_t n = centers.size();
    require(n >= 1, ErrorCode::BadConfig, "centers must list at least one level");
    require(neighbors.size() == n && feature_neighbors.size() == n && radii.size() == n && channels.size() == n,
            ErrorCode::BadConfig,
            "centers, neighbors, feature_neighbors, radii and channels must list the same number of levels");
    EncoderConfig e;
    e.levels.clear();
    for (std::size_t i = 0; i < n; ++i) {
      e.levels.push_back({centers[i], neighbors[i], feature_neighbors[i], radii[i], channels[i]});
    }
    e.rank_fraction = rank_fraction;
    e.head_hidden = head_hidden;
    e.layer_norm = layer_norm;
    require(rank_fraction > 0.0 && rank_fraction < 0.5, ErrorCode::BadConfig, "rank_fraction must be in (0, 0.5)");
    require(head_hidden >= 1, ErrorCode::BadConfig, "head_hidden must be >= 1");
    return e;
  }
};

struct Settings {
  SyntheticSpec data;
  TrainConfig train;
  EncoderSpec encoder;

  /// TrainConfig with the encoder filled in from the flat lists.
  TrainConfig resolved_train() const {
    TrainConfig t = train;
    t.encoder = encoder.build();
    return t;
  }
};

namespace config_detail {

inline std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

inline std::string fmt(std::size_t v) { return std::to_string(v); }
inline std::string fmt(bool v) { return v ? "true" : "false"; }

template <class T>
std::string join(const std::vector<T>& xs, char sep) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += sep;
    out += fmt(xs[i]);
  }
  return out;
}

template <class T>
std::string join2(const std::vector<std::vector<T>>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += join(xs[i], ':');
  }
  return out;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) {
    const auto b = cur.find_first_not_of(" \t");
    out.push_back(b == std::string::npos ? "" : cur.substr(b, cur.find_last_not_of(" \t") - b + 1));
  }
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

[[noreturn]] inline void bad(const std::string& key, const std::string& value, const std::string& what) {
  throw Error(ErrorCode::BadConfig, "key '" + key + "': cannot parse '" + value + "' as " + what);
}

inline double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(out)) bad(key, v, "a finite number");
  return out;
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) bad(key, v, "a non-negative integer");
  return out;
}

inline std::size_t to_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(to_u64(key, v));
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad(key, v, "a boolean (true/false)");
}

template <class F>
auto to_list(const std::string& key, const std::string& v, char sep, F conv) {
  std::vector<decltype(conv(key, v))> out;
  for (const auto& part : split(v, sep)) out.push_back(conv(key, part));
  if (out.empty()) bad(key, v, "a non-empty list");
  return out;
}

template <class F>
auto to_list2(const std::string& key, const std::string& v, F conv) {
  std::vector<std::vector<decltype(conv(key, v))>> out;
  for (const auto& level : split(v, ',')) out.push_back(to_list(key, level, ':', conv));
  if (out.empty()) bad(key, v, "a non-empty list");
  return out;
}

}  // namespace config_detail

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(Settings&, const std::string&)> set;
  std::function<std::string(const Settings&)> get;
};

inline const std::vector<ConfigKey>& config_schema() {
  using namespace config_detail;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;

    // data
    k.push_back({"classes", "comma-separated shape classes (sphere, cube, cylinder, torus, cone)",
                 [](Settings& s, const std::string& v) {
                   s.data.classes = split(v, ',');
                   for (const auto& c : s.data.classes) {
                     if (c.empty()) bad("classes", v, "a list of class names");
                   }
                 },
                 [](const Settings& s) {
                   std::string out;
                   for (std::size_t i = 0; i < s.data.classes.size(); ++i) out += (i ? "," : "") + s.data.classes[i];
                   return out;
                 }});
    k.push_back({"points_per_cloud", "points per generated cloud",
                 [](Settings& s, const std::string& v) { s.data.points_per_cloud = to_size("points_per_cloud", v); },
                 [](const Settings& s) { return fmt(s.data.points_per_cloud); }});
    k.push_back({"train_per_class", "training clouds per class",
                 [](Settings& s, const std::string& v) { s.data.train_per_class = to_size("train_per_class", v); },
                 [](const Settings& s) { return fmt(s.data.train_per_class); }});
    k.push_back({"test_per_class", "test clouds per class",
                 [](Settings& s, const std::string& v) { s.data.test_per_class = to_size("test_per_class", v); },
                 [](const Settings& s) { return fmt(s.data.test_per_class); }});
    k.push_back({"jitter", "per-coordinate Gaussian jitter sigma (clipped at 3 sigma)",
                 [](Settings& s, const std::string& v) { s.data.jitter = to_double("jitter", v); },
                 [](const Settings& s) { return fmt(s.data.jitter); }});
    k.push_back({"scale_min", "lower bound of the random per-cloud scale",
                 [](Settings& s, const std::string& v) { s.data.scale_min = to_double("scale_min", v); },
                 [](const Settings& s) { return fmt(s.data.scale_min); }});
    k.push_back({"scale_max", "upper bound of the random per-cloud scale",
                 [](Settings& s, const std::string& v) { s.data.scale_max = to_double("scale_max", v); },
                 [](const Settings& s) { return fmt(s.data.scale_max); }});
    k.push_back({"data_seed", "seed of the synthetic generator",
                 [](Settings& s, const std::string& v) { s.data.seed = to_u64("data_seed", v); },
                 [](const Settings& s) { return std::to_string(s.data.seed); }});

    // training
    k.push_back({"epochs", "training epochs",
                 [](Settings& s, const std::string& v) { s.train.epochs = to_size("epochs", v); },
                 [](const Settings& s) { return fmt(s.train.epochs); }});
    k.push_back({"batch_size", "clouds per optimizer step",
                 [](Settings& s, const std::string& v) { s.train.batch_size = to_size("batch_size", v); },
                 [](const Settings& s) { return fmt(s.train.batch_size); }});
    k.push_back({"learning_rate", "Adam step size",
                 [](Settings& s, const std::string& v) { s.train.adam.learning_rate = to_double("learning_rate", v); },
                 [](const Settings& s) { return fmt(s.train.adam.learning_rate); }});
    k.push_back({"adam_beta1", "Adam first-moment decay",
                 [](Settings& s, const std::string& v) { s.train.adam.beta1 = to_double("adam_beta1", v); },
                 [](const Settings& s) { return fmt(s.train.adam.beta1); }});
    k.push_back({"adam_beta2", "Adam second-moment decay",
                 [](Settings& s, const std::string& v) { s.train.adam.beta2 = to_double("adam_beta2", v); },
                 [](const Settings& s) { return fmt(s.train.adam.beta2); }});
    k.push_back({"adam_eps", "Adam denominator epsilon",
                 [](Settings& s, const std::string& v) { s.train.adam.eps = to_double("adam_eps", v); },
                 [](const Settings& s) { return fmt(s.train.adam.eps); }});
    k.push_back({"seed", "training seed (init, shuffling, FPS, KL row sampling)",
                 [](Settings& s, const std::string& v) { s.train.seed = to_u64("seed", v); },
                 [](const Settings& s) { return std::to_string(s.train.seed); }});
    k.push_back({"temperature", "attention KL temperature T",
                 [](Settings& s, const std::string& v) { s.train.kl.temperature = to_double("temperature", v); },
                 [](const Settings& s) { return fmt(s.train.kl.temperature); }});
    k.push_back({"lambda1", "weight of KL(teacher || student)",
                 [](Settings& s, const std::string& v) { s.train.kl.lambda_teacher_student = to_double("lambda1", v); },
                 [](const Settings& s) { return fmt(s.train.kl.lambda_teacher_student); }});
    k.push_back({"lambda2", "weight of KL(student || teacher)",
                 [](Settings& s, const std::string& v) { s.train.kl.lambda_student_teacher = to_double("lambda2", v); },
                 [](const Settings& s) { return fmt(s.train.kl.lambda_student_teacher); }});
    k.push_back({"sample_m", "attention rows sampled per patch (capped at the patch size)",
                 [](Settings& s, const std::string& v) { s.train.kl.sample_rows = to_size("sample_m", v); },
                 [](const Settings& s) { return fmt(s.train.kl.sample_rows); }});
    k.push_back({"nmi_bins", "histogram bins of the NMI estimator",
                 [](Settings& s, const std::string& v) { s.train.nmi.bins = to_size("nmi_bins", v); },
                 [](const Settings& s) { return fmt(s.train.nmi.bins); }});
    k.push_back({"nmi_bandwidth", "NMI soft-binning kernel width in normalized units (0 = 0.05/bins)",
                 [](Settings& s, const std::string& v) { s.train.nmi.bandwidth = to_double("nmi_bandwidth", v); },
                 [](const Settings& s) { return fmt(s.train.nmi.bandwidth); }});
    k.push_back({"vote_count", "evaluation passes averaged per cloud",
                 [](Settings& s, const std::string& v) { s.train.vote_count = to_size("vote_count", v); },
                 [](const Settings& s) { return fmt(s.train.vote_count); }});
    k.push_back({"rotation_max_deg", "max rotation angle of the augmentation baseline",
                 [](Settings& s, const std::string& v) { s.train.rotation_max_deg = to_double("rotation_max_deg", v); },
                 [](const Settings& s) { return fmt(s.train.rotation_max_deg); }});
    k.push_back({"stop_teacher_kl", "block KL gradients into the teacher branch",
                 [](Settings& s, const std::string& v) { s.train.stop_teacher_kl = to_bool("stop_teacher_kl", v); },
                 [](const Settings& s) { return fmt(s.train.stop_teacher_kl); }});
    k.push_back({"record_wall_time", "write real epoch times to the metrics CSV (otherwise 0)",
                 [](Settings& s, const std::string& v) { s.train.record_wall_time = to_bool("record_wall_time", v); },
                 [](const Settings& s) { return fmt(s.train.record_wall_time); }});

    // encoder
    k.push_back({"centers", "sampled centers per level",
                 [](Settings& s, const std::string& v) { s.encoder.centers = to_list("centers", v, ',', to_size); },
                 [](const Settings& s) { return join(s.encoder.centers, ','); }});
    k.push_back({"neighbors", "neighbors per patch per level",
                 [](Settings& s, const std::string& v) { s.encoder.neighbors = to_list("neighbors", v, ',', to_size); },
                 [](const Settings& s) { return join(s.encoder.neighbors, ','); }});
    k.push_back({"feature_neighbors", "feature-space neighbors per level (0 = same as neighbors)",
                 [](Settings& s, const std::string& v) {
                   s.encoder.feature_neighbors = to_list("feature_neighbors", v, ',', to_size);
                 },
                 [](const Settings& s) { return join(s.encoder.feature_neighbors, ','); }});
    k.push_back({"radii", "ball-query radii per level, ':' within a level",
                 [](Settings& s, const std::string& v) { s.encoder.radii = to_list2("radii", v, to_double); },
                 [](const Settings& s) { return join2(s.encoder.radii); }});
    k.push_back({"channels", "MLP widths per level, ':' within a level; the last is the level output",
                 [](Settings& s, const std::string& v) { s.encoder.channels = to_list2("channels", v, to_size); },
                 [](const Settings& s) { return join2(s.encoder.channels); }});
    k.push_back({"rank_fraction", "alignment head rank as a fraction of channels (floored)",
                 [](Settings& s, const std::string& v) { s.encoder.rank_fraction = to_double("rank_fraction", v); },
                 [](const Settings& s) { return fmt(s.encoder.rank_fraction); }});
    k.push_back({"head_hidden", "hidden width of the classifier",
                 [](Settings& s, const std::string& v) { s.encoder.head_hidden = to_size("head_hidden", v); },
                 [](const Settings& s) { return fmt(s.encoder.head_hidden); }});
    k.push_back({"layer_norm", "layer normalization inside MLPs",
                 [](Settings& s, const std::string& v) { s.encoder.layer_norm = to_bool("layer_norm", v); },
                 [](const Settings& s) { return fmt(s.encoder.layer_norm); }});
    return k;
  }();
  return keys;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Parses key=value lines; '#' starts a comment. Unknown or repeated keys
/// and malformed lines are BadConfig errors.
inline Settings parse_config(std::istream& is, const std::string& source = "config") {
  Settings s;
  std::map<std::string, const ConfigKey*> index;
  for (const auto& k : config_schema()) index[k.name] = &k;
  std::map<std::string, std::size_t> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string at = source + " line " + std::to_string(lineno) + ": ";
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::BadConfig, at + "expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto it = index.find(key);
    require(it != index.end(), ErrorCode::BadConfig, at + "unknown key '" + key + "'");
    require(seen.emplace(key, lineno).second, ErrorCode::BadConfig, at + "duplicate key '" + key + "'");
    try {
      it->second->set(s, value);
    } catch (const Error& e) {
      const std::string msg = e.what();
      const auto colon = msg.find(": ");
      throw Error(ErrorCode::BadConfig, at + (colon == std::string::npos ? msg : msg.substr(colon + 2)));
    }
  }
  return s;
}

inline Settings load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorCode::BadConfig, "cannot open config file " + path.string());
  return parse_config(is, path.string());
}

/// Every key with its current value, one per line, in schema order.
inline void write_config(std::ostream& os, const Settings& s) {
  for (const auto& k : config_schema()) os << k.name << '=' << k.get(s) << '\n';
}

/// Key reference with defaults, for --help.
inline std::string config_help() {
  const Settings defaults;
  std::ostringstream os;
  os << "Config keys (key=value, '#' comments; unknown keys are errors):\n";
  for (const auto& k : config_schema()) {
    os << "  " << k.name << " = " << k.get(defaults) << "\n      " << k.help << '\n';
  }
  return os.str();
}

}  // namespace mdistill
