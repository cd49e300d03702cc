#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "backbone.hpp"
#include "data.hpp"
#include "dtlif.hpp"
#include "rng.hpp"

namespace catf {

struct TrainConfig {
  float lr_backbone = 0.05f;
  float lr_threshold = 0.1f;
  float lr_head = 0.05f;
  float lr_gate = 0.05f;
  std::size_t epochs_task0 = 30;
  std::size_t epochs_taskk = 15;
  std::size_t epochs_gate = 20;
  std::size_t batch_size = 32;
  std::size_t per_task_cap = 256;
  std::uint64_t seed = 0;
  float threshold_min = 0.01f;
  float threshold_max = 10.0f;
  // Ablation: every task keeps phi_init and thresholds are never optimized.
  bool fixed_threshold = false;
  // New task thresholds start from the previous task instead of phi_init.
  bool warm_start = false;

  void validate() const;
};

struct Head {
  Tensor weight;  // [D x c]
  Tensor bias;    // [c]
};

class HeadBank {
 public:
  // Xavier-uniform weight, U(-a, a) with a = sqrt(6 / (D + c)); zero bias.
  Head& add(int task, std::size_t dim, std::size_t classes, Rng& rng);
  void finalize(int task);
  bool is_finalized(int task) const;
  bool has(int task) const { return heads_.count(task) != 0; }
  Head& get(int task);
  const Head& get(int task) const;
  std::vector<int> tasks() const;
  std::size_t size() const { return heads_.size(); }
  void restore(int task, Head head, bool finalized);

 private:
  std::map<int, Head> heads_;
  std::map<int, bool> finalized_;
};

// Task router: Linear(D -> D/4), ReLU, Linear(D/4 -> tasks seen).
class GatingMLP {
 public:
  GatingMLP() = default;
  GatingMLP(std::size_t dim, Rng& rng);

  std::size_t input_dim() const { return w1.shape.empty() ? 0 : w1.dim(0); }
  std::size_t hidden() const { return w1.shape.empty() ? 0 : w1.dim(1); }
  std::size_t width() const { return b2.numel(); }

  // Appends output units up to `tasks`; existing columns are kept and new
  // ones Xavier-initialized.
  void grow_to(std::size_t tasks, Rng& rng);

  Var forward(Tape& tape, Var features);
  std::vector<Tensor*> tensors() { return {&w1, &b1, &w2, &b2}; }
  std::vector<const Tensor*> tensors() const { return {&w1, &b1, &w2, &b2}; }
  std::size_t param_count() const { return w1.numel() + b1.numel() + w2.numel() + b2.numel(); }

  Tensor w1, b1, w2, b2;
};

// Features harvested at BASE thresholds for gate training. Holds only
// D-dimensional embeddings and task ids, never raw inputs.
class FeatureBuffer {
 public:
  struct Entry {
    std::vector<float> feature;
    int task = 0;
    bool base_thresholds = false;
  };

  explicit FeatureBuffer(std::size_t per_task_cap = 256) : cap_(per_task_cap) {}

  // Returns false (and drops the entry) when the task is at capacity.
  bool add(std::vector<float> feature, int task, bool base_thresholds);
  std::size_t count(int task) const;
  std::size_t per_task_cap() const { return cap_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::size_t cap_;
  std::vector<Entry> entries_;
};

struct Model {
  Model() = default;
  Model(const ModelConfig& cfg, std::size_t classes_per_task, std::uint64_t seed);

  ModelConfig config;
  std::size_t classes_per_task = 0;
  Backbone backbone;
  ThresholdBank bank;
  HeadBank heads;
  GatingMLP gate;
  // Gate as it stood right after each task finalized.
  std::vector<GatingMLP> gate_history;
  // Protocol RNG state after the last finished task.
  std::uint64_t rng_state = 0;

  std::size_t tasks_seen() const { return heads.tasks().size(); }
  std::size_t finalized_tasks() const;
};

// Time-major frames [T x B x ...] for dataset samples. Static images are
// replicated over T; temporal samples are used frame by frame.
Tensor make_frames(const Dataset& data, std::span<const std::size_t> indices,
                   const ModelConfig& cfg);
// Random-mixer keys derived from sample contents, so inference is a pure
// function of the input.
std::vector<std::uint64_t> content_keys(const Dataset& data, std::span<const std::size_t> indices);

enum class Phase { kTask0, kTaskK, kGate };

struct ParamGroup {
  std::string name;
  std::vector<Tensor*> tensors;
  float lr = 0.0f;
};

// Exactly the tensors the optimizer updates in a phase.
std::vector<ParamGroup> optimizer_groups(Model& model, Phase phase, int task,
                                         const TrainConfig& cfg);

struct ParamCount {
  std::size_t total = 0;
  std::size_t trainable = 0;
  std::size_t bank_bytes = 0;
};

ParamCount count_parameters(Model& model, Phase phase, int task, const TrainConfig& cfg);

struct EpochStats {
  int task = 0;
  std::size_t epoch = 0;
  float loss = 0.0f;
  float acc = 0.0f;
  std::size_t trainable = 0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

// Joint training of backbone, phi^(0) and W_0.
void train_task0(Model& model, const Dataset& data, const TaskData& task, const TrainConfig& cfg,
                 Rng& rng, const EpochCallback& on_epoch = {});
// Frozen backbone; only W_k, b_k and phi^(k) are optimized.
void train_task_k(Model& model, const Dataset& data, const TaskData& task, const TrainConfig& cfg,
                  Rng& rng, const EpochCallback& on_epoch = {});

// Appends up to per_task_cap BASE-threshold features of the task's samples.
void harvest_features(Model& model, const Dataset& data, const TaskData& task,
                      FeatureBuffer& buffer, std::size_t batch_size = 64);

struct GateStats {
  float loss = 0.0f;
  float acc = 0.0f;
};

GateStats train_gating(GatingMLP& gate, const FeatureBuffer& buffer, const TrainConfig& cfg,
                       Rng& rng);

// SHA-256 reference of every tensor group frozen so far.
class FreezeReferences {
 public:
  void record(const std::string& group, std::string digest) { refs_[group] = std::move(digest); }
  const std::map<std::string, std::string>& groups() const { return refs_; }

 private:
  std::map<std::string, std::string> refs_;
};

std::string group_digest(const Model& model, const std::string& group);
void record_finalization(const Model& model, int task, FreezeReferences& refs);

struct FreezeReport {
  struct Group {
    std::string name;
    bool pass = false;
  };
  std::vector<Group> groups;
  bool all_pass() const;
};

FreezeReport freeze_check(const Model& model, const FreezeReferences& refs);

struct ProtocolHooks {
  EpochCallback on_epoch;
  std::function<void(int task, std::size_t trainable, std::size_t bank_bytes)> on_task_done;
  std::function<void(int task, const GateStats&)> on_gate_done;
  // Runs after each task finishes (gate trained, freeze check passed).
  std::function<void(int task, Model&)> after_task;
  // Test hook: runs after training task k, before its freeze check.
  std::function<void(int task, Model&)> before_freeze_check;
};

// Runs the full incremental protocol over every task in `seq`.
void run_protocol(Model& model, const Dataset& train, const TaskSequence& seq,
                  const TrainConfig& cfg, const ProtocolHooks& hooks = {});

}  // namespace catf
