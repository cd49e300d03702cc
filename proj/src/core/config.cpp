#include "config.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "error.hpp"

namespace catf {

const std::vector<std::pair<std::string, std::string>>& RunConfig::defaults() {
  static const std::vector<std::pair<std::string, std::string>> kDefaults = {
      {"run.seed", "0"},
      {"run.out_dir", "runs/default"},
      {"data.source", "synth"},
      {"data.train_images", ""},
      {"data.train_labels", ""},
      {"data.test_images", ""},
      {"data.test_labels", ""},
      {"data.seed", "7"},
      {"data.samples_per_class", "100"},
      {"data.test_per_class", "50"},
      {"data.margin", "0.8"},
      {"data.noise_sigma", "0.1"},
      {"data.mean_spread", "0.5"},
      {"data.rate_on", "0.8"},
      {"data.rate_off", "0.05"},
      {"split.total_classes", "10"},
      {"split.num_tasks", "5"},
      {"split.order", "identity"},
      {"split.seed", "0"},
      {"model.timesteps", "4"},
      {"model.embed_dim", "64"},
      {"model.num_blocks", "2"},
      {"model.num_heads", "4"},
      {"model.patch_size", "4"},
      {"model.in_channels", "1"},
      {"model.image_size", "16"},
      {"model.ffn_ratio", "2"},
      {"model.mixer_mode", "spiking_attention"},
      {"model.ffn_trainable", "true"},
      {"model.attn_scale", "0.125"},
      {"model.tau", "2.0"},
      {"model.phi_init", "0.5"},
      {"model.surrogate", "rectangular"},
      {"model.surrogate_width", "0.5"},
      {"model.bptt", "false"},
      {"train.lr_backbone", "0.05"},
      {"train.lr_threshold", "0.1"},
      {"train.lr_head", "0.05"},
      {"train.lr_gate", "0.05"},
      {"train.epochs_task0", "30"},
      {"train.epochs_taskk", "15"},
      {"train.epochs_gate", "20"},
      {"train.batch_size", "32"},
      {"train.per_task_cap", "256"},
      {"train.threshold_min", "0.01"},
      {"train.threshold_max", "10.0"},
      {"train.fixed_threshold", "false"},
      {"train.warm_start", "false"},
      {"test.corrupt_frozen_at_task", "-1"},
  };
  return kDefaults;
}

bool RunConfig::known(const std::string& key) {
  for (const auto& [k, _] : defaults()) {
    if (k == key) return true;
  }
  return false;
}

RunConfig::RunConfig() {
  for (const auto& [k, v] : defaults()) values_[k] = v;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
  values_[key] = value;
  explicit_[key] = true;
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::merge_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (!known(key)) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown config key '" + key + "'");
    }
    set(key, trim(line.substr(eq + 1)));
  }
}

void RunConfig::merge_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  merge_text(ss.str(), path);
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [k, _] : defaults()) out += k + " = " + values_.at(k) + "\n";
  return out;
}

long long RunConfig::get_int(const std::string& key) const {
  const std::string& s = get(key);
  long long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("config key '" + key + "' expects an integer, got '" + s + "'");
  }
  return v;
}

std::size_t RunConfig::get_size(const std::string& key) const {
  const long long v = get_int(key);
  if (v < 0) throw ConfigError("config key '" + key + "' must be >= 0");
  return static_cast<std::size_t>(v);
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& s = get(key);
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) {
    throw ConfigError("config key '" + key + "' expects a finite number, got '" + s + "'");
  }
  return v;
}

float RunConfig::get_float(const std::string& key) const {
  return static_cast<float>(get_double(key));
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& s = get(key);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config key '" + key + "' expects true/false, got '" + s + "'");
}

std::uint64_t RunConfig::seed() const {
  const long long v = get_int("run.seed");
  if (v < 0) throw ConfigError("run.seed must be >= 0");
  return static_cast<std::uint64_t>(v);
}

std::string RunConfig::out_dir() const {
  const std::string& d = get("run.out_dir");
  if (d.empty()) throw ConfigError("run.out_dir is empty");
  return d;
}

std::string RunConfig::data_source() const {
  const std::string& s = get("data.source");
  if (s != "synth" && s != "idx" && s != "events") {
    throw ConfigError("data.source must be synth, idx or events, got '" + s + "'");
  }
  return s;
}

int RunConfig::corrupt_frozen_at_task() const {
  return static_cast<int>(get_int("test.corrupt_frozen_at_task"));
}

ModelConfig RunConfig::model() const {
  ModelConfig m;
  m.timesteps = get_size("model.timesteps");
  m.embed_dim = get_size("model.embed_dim");
  m.num_blocks = get_size("model.num_blocks");
  m.num_heads = get_size("model.num_heads");
  m.patch_size = get_size("model.patch_size");
  m.in_channels = get_size("model.in_channels");
  m.image_size = get_size("model.image_size");
  m.ffn_ratio = get_size("model.ffn_ratio");
  m.mixer_mode = parse_mixer_mode(get("model.mixer_mode"));
  m.ffn_trainable = get_bool("model.ffn_trainable");
  m.attn_scale = get_float("model.attn_scale");
  m.mixer_seed = mix_seed(seed(), 0x313e);
  m.neuron.tau = get_float("model.tau");
  m.neuron.phi_init = get_float("model.phi_init");
  const std::string& sg = get("model.surrogate");
  if (sg == "rectangular") {
    m.neuron.surrogate.kind = SurrogateKind::kRectangular;
  } else if (sg == "triangular") {
    m.neuron.surrogate.kind = SurrogateKind::kTriangular;
  } else if (sg == "sigmoid_derivative") {
    m.neuron.surrogate.kind = SurrogateKind::kSigmoidDerivative;
  } else {
    throw ConfigError("unknown surrogate '" + sg + "'");
  }
  m.neuron.surrogate.width = get_float("model.surrogate_width");
  m.neuron.bptt = get_bool("model.bptt");
  m.validate();
  return m;
}

TrainConfig RunConfig::train() const {
  TrainConfig t;
  t.lr_backbone = get_float("train.lr_backbone");
  t.lr_threshold = get_float("train.lr_threshold");
  t.lr_head = get_float("train.lr_head");
  t.lr_gate = get_float("train.lr_gate");
  t.epochs_task0 = get_size("train.epochs_task0");
  t.epochs_taskk = get_size("train.epochs_taskk");
  t.epochs_gate = get_size("train.epochs_gate");
  t.batch_size = get_size("train.batch_size");
  t.per_task_cap = get_size("train.per_task_cap");
  t.threshold_min = get_float("train.threshold_min");
  t.threshold_max = get_float("train.threshold_max");
  t.fixed_threshold = get_bool("train.fixed_threshold");
  t.warm_start = get_bool("train.warm_start");
  t.seed = seed();
  t.validate();
  return t;
}

SplitSpec RunConfig::split() const {
  const std::size_t classes = get_size("split.total_classes");
  const std::size_t tasks = get_size("split.num_tasks");
  const long long sseed = get_int("split.seed");
  if (sseed < 0) throw ConfigError("split.seed must be >= 0");
  const std::string& order = get("split.order");
  SplitSpec s;
  if (order == "identity") {
    s = SplitSpec::identity(classes, tasks);
  } else if (order == "shuffled") {
    s = SplitSpec::shuffled(classes, tasks, static_cast<std::uint64_t>(sseed));
  } else {
    throw ConfigError("split.order must be identity or shuffled, got '" + order + "'");
  }
  s.seed = static_cast<std::uint64_t>(sseed);
  s.validate();
  return s;
}

void RunConfig::validate() const {
  model();
  train();
  split();
  data_source();
  out_dir();
  corrupt_frozen_at_task();
  for (const char* k : {"data.seed", "data.samples_per_class", "data.test_per_class"}) get_size(k);
  for (const char* k : {"data.margin", "data.noise_sigma", "data.mean_spread", "data.rate_on",
                        "data.rate_off"}) {
    get_double(k);
  }
}

RunConfig resolve_config(const std::string& file,
                         const std::vector<std::pair<std::string, std::string>>& flags) {
  RunConfig cfg;
  if (!file.empty()) cfg.merge_file(file);
  for (const auto& [k, v] : flags) cfg.set(k, v);
  if (const char* env = std::getenv("CATF_OUT"); env && *env) cfg.set("run.out_dir", env);
  return cfg;
}

}  // namespace catf
