#include "runner.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "error.hpp"
#include "metrics.hpp"

namespace catf {

namespace fs = std::filesystem;

RunData load_data(const RunConfig& cfg) {
  const ModelConfig mc = cfg.model();
  RunData d;
  d.split = cfg.split();
  const std::string source = cfg.data_source();
  const auto seed = static_cast<std::uint64_t>(cfg.get_size("data.seed"));
  if (source == "synth") {
    SyntheticSpec s;
    s.classes = d.split.total_classes;
    s.channels = mc.in_channels;
    s.image_size = mc.image_size;
    s.margin = cfg.get_float("data.margin");
    s.noise_sigma = cfg.get_float("data.noise_sigma");
    s.mean_spread = cfg.get_float("data.mean_spread");
    s.samples_per_class = cfg.get_size("data.samples_per_class");
    s.seed = seed;
    d.train = synth_clusters(s, 0);
    s.samples_per_class = cfg.get_size("data.test_per_class");
    d.test = synth_clusters(s, 1);
  } else if (source == "events") {
    EventSpec e;
    e.classes = d.split.total_classes;
    e.timesteps = mc.timesteps;
    e.channels = mc.in_channels * mc.image_size * mc.image_size;
    e.samples_per_class = cfg.get_size("data.samples_per_class");
    e.rate_on = cfg.get_float("data.rate_on");
    e.rate_off = cfg.get_float("data.rate_off");
    e.seed = seed;
    d.train = synth_events(e, 0);
    e.samples_per_class = cfg.get_size("data.test_per_class");
    d.test = synth_events(e, 1);
  } else {
    for (const char* k : {"data.train_images", "data.train_labels", "data.test_images",
                          "data.test_labels"}) {
      if (cfg.get(k).empty()) throw ConfigError(std::string(k) + " is required for idx data");
    }
    d.train = idx_load(cfg.get("data.train_images"), cfg.get("data.train_labels"));
    d.test = idx_load(cfg.get("data.test_images"), cfg.get("data.test_labels"));
    const Shape want{mc.in_channels, mc.image_size, mc.image_size};
    if (d.train.sample_shape != want || d.test.sample_shape != want) {
      throw DataError("idx images are " + shape_str(d.train.sample_shape) + " but the model expects " +
                      shape_str(want));
    }
  }
  d.train_seq = make_splits(d.train, d.split);
  d.test_seq = make_splits(d.test, d.split);
  for (const TaskData& t : d.train_seq.tasks) {
    if (t.indices.empty()) throw DataError("task " + std::to_string(t.task) + " has no training data");
  }
  return d;
}

Model make_model(const RunConfig& cfg) {
  return Model(cfg.model(), cfg.split().classes_per_task(), cfg.seed());
}

std::string checkpoint_path(const std::string& out_dir, int task) {
  return (fs::path(out_dir) / ("ckpt_task" + std::to_string(task) + ".catf")).string();
}

OutDirLock::OutDirLock(const std::string& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw ConfigError("cannot create out_dir '" + out_dir + "': " + ec.message());
  path_ = (fs::path(out_dir) / ".lock").string();
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    throw ConfigError("out_dir '" + out_dir + "' is locked by another run (" + path_ + ")");
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

OutDirLock::~OutDirLock() { ::unlink(path_.c_str()); }

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << text;
}

}  // namespace

TrainSummary cmd_train(const RunConfig& cfg) {
  cfg.validate();
  const std::string out_dir = cfg.out_dir();
  OutDirLock lock(out_dir);
  write_text((fs::path(out_dir) / "config.resolved").string(), cfg.to_text());

  RunData data = load_data(cfg);
  Model model = make_model(cfg);
  const TrainConfig tc = cfg.train();
  const std::string config_text = cfg.to_text();
  MetricsWriter metrics((fs::path(out_dir) / "metrics.jsonl").string(), cfg.seed(), true);
  const int corrupt_at = cfg.corrupt_frozen_at_task();

  TrainSummary summary;
  summary.out_dir = out_dir;
  ProtocolHooks hooks;
  hooks.on_epoch = [&](const EpochStats& e) {
    Record r = metrics.make("epoch");
    r["task"] = e.task;
    r["epoch"] = e.epoch;
    r["loss"] = e.loss;
    r["acc"] = e.acc;
    r["trainable_params"] = e.trainable;
    r["bank_bytes"] = model.bank.bytes_per_task();
    metrics.write(std::move(r));
  };
  hooks.on_task_done = [&](int task, std::size_t trainable, std::size_t bank_bytes) {
    Record r = metrics.make("task_done");
    r["task"] = task;
    r["trainable_params"] = trainable;
    r["bank_bytes"] = bank_bytes;
    metrics.write(std::move(r));
  };
  hooks.on_gate_done = [&](int task, const GateStats& g) {
    Record r = metrics.make("gate_done");
    r["task"] = task;
    r["loss"] = g.loss;
    r["acc"] = g.acc;
    r["trainable_params"] = model.gate.param_count();
    metrics.write(std::move(r));
  };
  hooks.before_freeze_check = [&](int task, Model& m) {
    if (task != corrupt_at) return;
    // Test hook: nudge one frozen backbone weight by a single ulp.
    float& w = m.backbone.params().entries().front().tensor->data[0];
    w = std::nextafter(w, INFINITY);
  };
  hooks.after_task = [&](int task, Model& m) {
    const std::string path = checkpoint_path(out_dir, task);
    write_file(path, encode_container(model_to_container(m, config_text, data.split.class_order)));
    summary.checkpoints.push_back(path);
  };
  run_protocol(model, data.train, data.train_seq, tc, hooks);
  return summary;
}

EvalSummary cmd_eval(const std::string& checkpoint, const RunConfig& user) {
  const Container c = decode_container(read_file(checkpoint));
  RunConfig cfg;
  LoadedCheckpoint ck = container_to_model(c, [&](const std::string& text) {
    cfg.merge_text(text, checkpoint + ":config");
    return make_model(cfg);
  });
  for (const auto& [key, _] : RunConfig::defaults()) {
    if (!user.explicitly_set(key)) continue;
    const bool structural = key.rfind("model.", 0) == 0 || key.rfind("split.", 0) == 0 ||
                            key == "run.seed";
    if (structural && user.get(key) != cfg.get(key)) {
      throw ConfigError("'" + key + "' = " + user.get(key) + " conflicts with the checkpoint value " +
                        cfg.get(key));
    }
    cfg.set(key, user.get(key));
  }
  cfg.validate();
  Model& model = ck.model;
  if (model.finalized_tasks() == 0) throw CheckpointError("checkpoint holds no finalized task");

  const std::string out_dir = cfg.out_dir();
  OutDirLock lock(out_dir);
  RunData data = load_data(cfg);
  if (data.split.class_order != ck.class_order) {
    throw CheckpointError("checkpoint class order does not match the configured split");
  }

  EvalSummary s;
  s.metrics = evaluate_cil(model, data.test_seq, data.test);
  s.profile = forgetting_profile(model, data.test_seq, data.test);
  s.bank_bytes = model.bank.bytes_per_task();

  MetricsWriter metrics((fs::path(out_dir) / "metrics.jsonl").string(), cfg.seed(), false);
  const std::size_t total_tasks = data.split.num_tasks;
  {
    Record r = metrics.make("eval");
    r["kind"] = "summary";
    r["task"] = -1;
    r["num_tasks"] = s.metrics.num_tasks;
    r["total_tasks"] = total_tasks;
    r["acc"] = s.metrics.overall_acc();
    r["routing_acc"] = s.metrics.routing_acc();
    r["oracle_acc"] = s.metrics.oracle_acc();
    r["samples"] = s.metrics.samples;
    r["bank_bytes"] = s.bank_bytes;
    metrics.write(std::move(r));
  }
  for (std::size_t k = 0; k < s.metrics.num_tasks; ++k) {
    Record r = metrics.make("eval");
    r["kind"] = "per_task";
    r["task"] = k;
    r["acc"] = s.metrics.per_task_acc[k];
    r["oracle_acc"] = s.metrics.per_task_oracle_acc[k];
    metrics.write(std::move(r));
  }
  for (std::size_t j = 0; j < s.profile.routed.size(); ++j) {
    for (std::size_t i = 0; i < s.profile.routed[j].size(); ++i) {
      Record r = metrics.make("eval");
      r["kind"] = "profile";
      r["after_task"] = j;
      r["task"] = i;
      r["acc"] = s.profile.routed[j][i];
      r["oracle_acc"] = s.profile.oracle[j][i];
      metrics.write(std::move(r));
    }
  }
  return s;
}

RunConfig apply_variant(RunConfig cfg, const std::string& variant) {
  if (variant == "full") return cfg;
  if (variant == "fixed_threshold") {
    cfg.set("train.fixed_threshold", "true");
  } else if (variant == "identity") {
    cfg.set("model.mixer_mode", "identity");
  } else if (variant == "random") {
    cfg.set("model.mixer_mode", "random");
  } else if (variant == "ffn_frozen") {
    cfg.set("model.ffn_trainable", "false");
  } else {
    throw ConfigError("unknown ablation variant '" + variant +
                      "' (expected fixed_threshold, identity, random, ffn_frozen or full)");
  }
  return cfg;
}

EvalSummary cmd_ablate(const RunConfig& cfg, const std::string& variant) {
  const RunConfig v = apply_variant(cfg, variant);
  const TrainSummary t = cmd_train(v);
  RunConfig eval_cfg;
  eval_cfg.set("run.out_dir", t.out_dir);
  return cmd_eval(t.checkpoints.back(), eval_cfg);
}

std::vector<ReportRow> cmd_report(const std::vector<std::string>& paths, const std::string& out_csv) {
  const auto rows = build_report(paths);
  const std::string csv = write_report_csv(rows);
  if (out_csv.empty() || out_csv == "-") return rows;
  std::ofstream out(out_csv, std::ios::trunc);
  if (!out) throw MetricsError("cannot write report '" + out_csv + "'");
  out << csv;
  return rows;
}

}  // namespace catf
