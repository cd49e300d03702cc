#include "cil.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "checksum.hpp"
#include "error.hpp"

namespace catf {

void TrainConfig::validate() const {
  for (float lr : {lr_backbone, lr_threshold, lr_head, lr_gate}) {
    if (!(lr >= 0.0f) || !std::isfinite(lr)) throw ConfigError("learning rates must be >= 0");
  }
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (per_task_cap == 0) throw ConfigError("per_task_cap must be positive");
  if (!(threshold_min > 0.0f) || !(threshold_max >= threshold_min)) {
    throw ConfigError("threshold clamp range must satisfy 0 < min <= max");
  }
}

namespace {

Tensor xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const float a = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
  Tensor w({fan_in, fan_out});
  for (float& v : w.data) v = rng.uniform(-a, a);
  return w;
}

}  // namespace

Head& HeadBank::add(int task, std::size_t dim, std::size_t classes, Rng& rng) {
  if (is_finalized(task)) {
    throw ImmutabilityError("head of task " + std::to_string(task) + " is finalized");
  }
  Head h{xavier(dim, classes, rng), Tensor({classes}, 0.0f)};
  heads_[task] = std::move(h);
  finalized_[task] = false;
  return heads_[task];
}

void HeadBank::finalize(int task) {
  Head& h = get(task);
  h.weight.requires_grad = h.bias.requires_grad = false;
  h.weight.clear_grad();
  h.bias.clear_grad();
  finalized_[task] = true;
}

bool HeadBank::is_finalized(int task) const {
  auto it = finalized_.find(task);
  return it != finalized_.end() && it->second;
}

Head& HeadBank::get(int task) {
  auto it = heads_.find(task);
  if (it == heads_.end()) throw LookupError("no head for task " + std::to_string(task));
  return it->second;
}

const Head& HeadBank::get(int task) const {
  auto it = heads_.find(task);
  if (it == heads_.end()) throw LookupError("no head for task " + std::to_string(task));
  return it->second;
}

std::vector<int> HeadBank::tasks() const {
  std::vector<int> out;
  for (const auto& [k, _] : heads_) out.push_back(k);
  return out;
}

void HeadBank::restore(int task, Head head, bool finalized) {
  heads_[task] = std::move(head);
  finalized_[task] = finalized;
}

GatingMLP::GatingMLP(std::size_t dim, Rng& rng) {
  if (dim == 0 || dim % 4 != 0) throw ConfigError("gating input dim must be a positive multiple of 4");
  const std::size_t h = dim / 4;
  w1 = xavier(dim, h, rng);
  b1 = Tensor({h}, 0.0f);
  w2 = Tensor({h, 0});
  b2 = Tensor({0});
}

void GatingMLP::grow_to(std::size_t tasks, Rng& rng) {
  const std::size_t old = width();
  if (tasks < old) throw ConfigError("gate cannot shrink");
  if (tasks == old) return;
  const std::size_t h = hidden();
  const float a = std::sqrt(6.0f / static_cast<float>(h + tasks));
  Tensor nw({h, tasks});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < tasks; ++j)
      nw.data[i * tasks + j] = j < old ? w2.data[i * old + j] : 0.0f;
  // Fill new columns in column order so growth is independent of h.
  for (std::size_t j = old; j < tasks; ++j)
    for (std::size_t i = 0; i < h; ++i) nw.data[i * tasks + j] = rng.uniform(-a, a);
  Tensor nb({tasks}, 0.0f);
  std::copy(b2.data.begin(), b2.data.end(), nb.data.begin());
  w2 = std::move(nw);
  b2 = std::move(nb);
}

Var GatingMLP::forward(Tape& tape, Var features) {
  Var h = relu(tape, add_bias(tape, matmul(tape, features, tape.param(w1)), tape.param(b1)));
  return add_bias(tape, matmul(tape, h, tape.param(w2)), tape.param(b2));
}

bool FeatureBuffer::add(std::vector<float> feature, int task, bool base_thresholds) {
  if (count(task) >= cap_) return false;
  entries_.push_back({std::move(feature), task, base_thresholds});
  return true;
}

std::size_t FeatureBuffer::count(int task) const {
  return static_cast<std::size_t>(std::count_if(
      entries_.begin(), entries_.end(), [task](const Entry& e) { return e.task == task; }));
}

Model::Model(const ModelConfig& cfg, std::size_t cpt, std::uint64_t seed)
    : config(cfg), classes_per_task(cpt), bank(cfg.neuron.phi_init) {
  if (cpt == 0) throw ConfigError("classes_per_task must be positive");
  Rng init(mix_seed(seed, 1));
  backbone = Backbone(cfg, init);
  backbone.declare_layers(bank);
  Rng gate_rng(mix_seed(seed, 2));
  gate = GatingMLP(cfg.embed_dim, gate_rng);
}

std::size_t Model::finalized_tasks() const {
  std::size_t n = 0;
  for (int k : heads.tasks()) n += heads.is_finalized(k) ? 1 : 0;
  return n;
}

Tensor make_frames(const Dataset& data, std::span<const std::size_t> indices,
                   const ModelConfig& cfg) {
  const std::size_t T = cfg.timesteps, B = indices.size();
  const std::size_t frame = cfg.in_channels * cfg.image_size * cfg.image_size;
  Tensor out({T, B, cfg.in_channels, cfg.image_size, cfg.image_size});
  if (data.temporal) {
    if (data.sample_numel() != T * frame) {
      throw DataError("event samples of " + std::to_string(data.sample_numel()) +
                      " values do not match T x C x H x W = " + std::to_string(T * frame));
    }
    for (std::size_t b = 0; b < B; ++b) {
      auto s = data.sample(indices[b]);
      for (std::size_t t = 0; t < T; ++t)
        std::copy_n(s.begin() + static_cast<std::ptrdiff_t>(t * frame), frame,
                    out.data.begin() + static_cast<std::ptrdiff_t>((t * B + b) * frame));
    }
    return out;
  }
  if (data.sample_numel() != frame) {
    throw DataError("samples of shape " + shape_str(data.sample_shape) +
                    " do not match the model input " + std::to_string(cfg.in_channels) + "x" +
                    std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
  }
  for (std::size_t b = 0; b < B; ++b) {
    auto s = data.sample(indices[b]);
    for (float v : s) {
      if (!(v >= 0.0f && v <= 1.0f)) throw DataError("pixel value outside [0, 1]");
    }
    for (std::size_t t = 0; t < T; ++t)
      std::copy(s.begin(), s.end(), out.data.begin() + static_cast<std::ptrdiff_t>((t * B + b) * frame));
  }
  return out;
}

std::vector<std::uint64_t> content_keys(const Dataset& data, std::span<const std::size_t> indices) {
  std::vector<std::uint64_t> keys;
  keys.reserve(indices.size());
  for (std::size_t i : indices) keys.push_back(hash_floats(data.sample(i)));
  return keys;
}

std::vector<ParamGroup> optimizer_groups(Model& model, Phase phase, int task,
                                         const TrainConfig& cfg) {
  std::vector<ParamGroup> groups;
  switch (phase) {
    case Phase::kTask0: {
      groups.push_back({"backbone", model.backbone.trainable_tensors(), cfg.lr_backbone});
      if (!cfg.fixed_threshold) {
        groups.push_back({"thresholds/0", {&model.bank.thresholds(0)}, cfg.lr_threshold});
      }
      Head& h = model.heads.get(0);
      groups.push_back({"heads/0", {&h.weight, &h.bias}, cfg.lr_head});
      break;
    }
    case Phase::kTaskK: {
      const std::string k = std::to_string(task);
      if (!cfg.fixed_threshold) {
        groups.push_back({"thresholds/" + k, {&model.bank.thresholds(task)}, cfg.lr_threshold});
      }
      Head& h = model.heads.get(task);
      groups.push_back({"heads/" + k, {&h.weight, &h.bias}, cfg.lr_head});
      break;
    }
    case Phase::kGate:
      groups.push_back({"gate", model.gate.tensors(), cfg.lr_gate});
      break;
  }
  return groups;
}

ParamCount count_parameters(Model& model, Phase phase, int task, const TrainConfig& cfg) {
  ParamCount pc;
  for (const auto& e : model.backbone.params().entries()) {
    if (e.kind == ParamKind::kWeight) pc.total += e.tensor->numel();
  }
  for (int k : model.bank.tasks()) pc.total += model.bank.thresholds(k).numel();
  for (int k : model.heads.tasks()) {
    pc.total += model.heads.get(k).weight.numel() + model.heads.get(k).bias.numel();
  }
  pc.total += model.gate.param_count();
  for (const ParamGroup& g : optimizer_groups(model, phase, task, cfg)) {
    for (const Tensor* t : g.tensors) pc.trainable += t->numel();
  }
  pc.bank_bytes = model.bank.bytes_per_task();
  return pc;
}

namespace {

std::vector<Tensor*> all_tensors(Model& m) {
  std::vector<Tensor*> out;
  for (auto& e : m.backbone.params().entries()) out.push_back(e.tensor.get());
  for (int k : m.bank.tasks()) out.push_back(&m.bank.thresholds(k));
  for (int k : m.heads.tasks()) {
    out.push_back(&m.heads.get(k).weight);
    out.push_back(&m.heads.get(k).bias);
  }
  for (Tensor* t : m.gate.tensors()) out.push_back(t);
  return out;
}

bool in_groups(const Tensor* t, const std::vector<ParamGroup>& groups) {
  for (const ParamGroup& g : groups) {
    if (std::find(g.tensors.begin(), g.tensors.end(), t) != g.tensors.end()) return true;
  }
  return false;
}

void set_trainable(Model& m, const std::vector<ParamGroup>& groups) {
  for (Tensor* t : all_tensors(m)) {
    t->requires_grad = false;
    t->clear_grad();
  }
  for (const ParamGroup& g : groups) {
    for (Tensor* t : g.tensors) {
      t->requires_grad = true;
      t->zero_grad();
    }
  }
}

void clear_trainable(Model& m) {
  for (Tensor* t : all_tensors(m)) {
    t->requires_grad = false;
    t->clear_grad();
  }
}

// Any gradient on a tensor outside the optimizer list is a protocol bug.
void assert_frozen_untouched(Model& m, const std::vector<ParamGroup>& groups) {
  for (Tensor* t : all_tensors(m)) {
    if (!in_groups(t, groups) && t->has_grad()) {
      throw InvariantError("gradient reached a frozen tensor");
    }
  }
}

void train_task_impl(Model& model, const Dataset& data, const TaskData& task,
                     const TrainConfig& cfg, Rng& rng, Phase phase, std::size_t epochs,
                     NormMode norm, const EpochCallback& on_epoch) {
  if (task.indices.empty()) {
    throw DataError("task " + std::to_string(task.task) + " has no training samples");
  }
  const int k = task.task;
  const std::vector<ParamGroup> groups = optimizer_groups(model, phase, k, cfg);
  std::size_t trainable = 0;
  for (const ParamGroup& g : groups)
    for (const Tensor* t : g.tensors) trainable += t->numel();
  const bool train_thresholds =
      std::any_of(groups.begin(), groups.end(),
                  [](const ParamGroup& g) { return g.name.rfind("thresholds/", 0) == 0; });

  set_trainable(model, groups);
  model.bank.set_active(TaskRef::task(k));
  Head& head = model.heads.get(k);

  std::vector<std::size_t> order(task.indices.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      std::vector<std::size_t> idx(n);
      std::vector<int> labels(n);
      std::vector<std::uint64_t> keys(n);
      for (std::size_t i = 0; i < n; ++i) {
        idx[i] = task.indices[order[start + i]];
        labels[i] = task.local_labels[order[start + i]];
        keys[i] = rng.next_u64();
      }
      const Tensor frames = make_frames(data, idx, model.config);
      ForwardOptions opts;
      opts.norm = norm;
      opts.noise_keys = keys;

      Tape tape;
      Var f = backbone_forward(tape, model.backbone, model.bank, frames, opts);
      Var logits = head_forward(tape, f, tape.param(head.weight), tape.param(head.bias));
      Var loss = cross_entropy(tape, logits, labels);
      tape.backward(loss);
      assert_frozen_untouched(model, groups);
      for (const ParamGroup& g : groups) sgd_step(g.tensors, g.lr);
      if (train_thresholds) model.bank.clamp(k, cfg.threshold_min, cfg.threshold_max);

      loss_sum += static_cast<double>(tape.value(loss).data[0]) * static_cast<double>(n);
      const Tensor& lv = tape.value(logits);
      const std::size_t c = lv.dim(1);
      for (std::size_t i = 0; i < n; ++i) {
        const std::span<const float> row(&lv.data[i * c], c);
        if (static_cast<int>(argmax(row)) == labels[i]) ++correct;
      }
    }
    if (on_epoch) {
      EpochStats st;
      st.task = k;
      st.epoch = epoch;
      st.loss = static_cast<float>(loss_sum / static_cast<double>(order.size()));
      st.acc = static_cast<float>(correct) / static_cast<float>(order.size());
      st.trainable = trainable;
      on_epoch(st);
    }
  }
  clear_trainable(model);
}

}  // namespace

void train_task0(Model& model, const Dataset& data, const TaskData& task, const TrainConfig& cfg,
                 Rng& rng, const EpochCallback& on_epoch) {
  if (task.task != 0) throw ProtocolError("train_task0 called for task " + std::to_string(task.task));
  train_task_impl(model, data, task, cfg, rng, Phase::kTask0, cfg.epochs_task0, NormMode::kTrain,
                  on_epoch);
}

void train_task_k(Model& model, const Dataset& data, const TaskData& task, const TrainConfig& cfg,
                  Rng& rng, const EpochCallback& on_epoch) {
  const int k = task.task;
  if (k <= 0) throw ProtocolError("train_task_k requires k > 0");
  for (int j = 0; j < k; ++j) {
    if (!model.heads.is_finalized(j) || !model.bank.is_finalized(j)) {
      throw ProtocolError("task " + std::to_string(j) + " is not finalized before task " +
                          std::to_string(k));
    }
  }
  train_task_impl(model, data, task, cfg, rng, Phase::kTaskK, cfg.epochs_taskk, NormMode::kEval,
                  on_epoch);
}

void harvest_features(Model& model, const Dataset& data, const TaskData& task,
                      FeatureBuffer& buffer, std::size_t batch_size) {
  const std::size_t room = buffer.per_task_cap() - std::min(buffer.per_task_cap(), buffer.count(task.task));
  const std::size_t n = std::min(room, task.indices.size());
  const TaskRef prev = model.bank.active();
  model.bank.set_active(TaskRef::base());
  const std::size_t D = model.config.embed_dim;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t m = std::min(batch_size, n - start);
    std::span<const std::size_t> idx(task.indices.data() + start, m);
    const Tensor frames = make_frames(data, idx, model.config);
    const auto keys = content_keys(data, idx);
    ForwardOptions opts;
    opts.noise_keys = keys;
    Tape tape;
    const Tensor& f = tape.value(backbone_forward(tape, model.backbone, model.bank, frames, opts));
    for (std::size_t i = 0; i < m; ++i) {
      buffer.add(std::vector<float>(f.data.begin() + static_cast<std::ptrdiff_t>(i * D),
                                    f.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * D)),
                 task.task, true);
    }
  }
  model.bank.set_active(prev);
}

GateStats train_gating(GatingMLP& gate, const FeatureBuffer& buffer, const TrainConfig& cfg,
                       Rng& rng) {
  if (buffer.size() == 0) throw ProtocolError("train_gating: empty feature buffer");
  std::set<int> seen;
  for (const auto& e : buffer.entries()) seen.insert(e.task);
  if (gate.width() != seen.size() || *seen.rbegin() >= static_cast<int>(gate.width())) {
    throw ConfigError("gate width " + std::to_string(gate.width()) + " does not match " +
                      std::to_string(seen.size()) + " tasks in the buffer");
  }
  const std::size_t D = gate.input_dim();
  for (const auto& e : buffer.entries()) {
    if (e.feature.size() != D) throw DimensionError("buffer feature size does not match the gate");
  }
  for (Tensor* t : gate.tensors()) {
    t->requires_grad = true;
    t->zero_grad();
  }
  std::vector<std::size_t> order(buffer.size());
  std::iota(order.begin(), order.end(), 0);
  GateStats stats;
  for (std::size_t epoch = 0; epoch < cfg.epochs_gate; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      Tensor x({n, D});
      std::vector<int> labels(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& e = buffer.entries()[order[start + i]];
        std::copy(e.feature.begin(), e.feature.end(), x.data.begin() + static_cast<std::ptrdiff_t>(i * D));
        labels[i] = e.task;
      }
      Tape tape;
      Var logits = gate.forward(tape, tape.constant(std::move(x)));
      Var loss = cross_entropy(tape, logits, labels);
      tape.backward(loss);
      sgd_step(gate.tensors(), cfg.lr_gate);
      loss_sum += static_cast<double>(tape.value(loss).data[0]) * static_cast<double>(n);
      const Tensor& lv = tape.value(logits);
      const std::size_t c = lv.dim(1);
      for (std::size_t i = 0; i < n; ++i) {
        if (static_cast<int>(argmax(std::span<const float>(&lv.data[i * c], c))) == labels[i]) ++correct;
      }
    }
    stats.loss = static_cast<float>(loss_sum / static_cast<double>(order.size()));
    stats.acc = static_cast<float>(correct) / static_cast<float>(order.size());
  }
  for (Tensor* t : gate.tensors()) {
    t->requires_grad = false;
    t->clear_grad();
  }
  return stats;
}

std::string group_digest(const Model& model, const std::string& group) {
  std::vector<const Tensor*> ts;
  if (group == "backbone") {
    for (const auto& e : model.backbone.params().entries()) ts.push_back(e.tensor.get());
  } else if (group.rfind("thresholds/", 0) == 0) {
    ts.push_back(&model.bank.thresholds(std::stoi(group.substr(11))));
  } else if (group.rfind("heads/", 0) == 0) {
    const Head& h = model.heads.get(std::stoi(group.substr(6)));
    ts = {&h.weight, &h.bias};
  } else {
    throw LookupError("unknown tensor group '" + group + "'");
  }
  return sha256_hex(ts);
}

void record_finalization(const Model& model, int task, FreezeReferences& refs) {
  if (task == 0) refs.record("backbone", group_digest(model, "backbone"));
  const std::string k = std::to_string(task);
  refs.record("thresholds/" + k, group_digest(model, "thresholds/" + k));
  refs.record("heads/" + k, group_digest(model, "heads/" + k));
}

bool FreezeReport::all_pass() const {
  return std::all_of(groups.begin(), groups.end(), [](const Group& g) { return g.pass; });
}

FreezeReport freeze_check(const Model& model, const FreezeReferences& refs) {
  FreezeReport r;
  for (const auto& [name, digest] : refs.groups()) {
    bool pass = false;
    try {
      pass = group_digest(model, name) == digest;
    } catch (const LookupError&) {
      pass = false;
    }
    r.groups.push_back({name, pass});
  }
  return r;
}

void run_protocol(Model& model, const Dataset& train, const TaskSequence& seq,
                  const TrainConfig& cfg, const ProtocolHooks& hooks) {
  cfg.validate();
  if (seq.classes_per_task != model.classes_per_task) {
    throw ConfigError("task sequence and model disagree on classes per task");
  }
  Rng rng(mix_seed(cfg.seed, 0x7a1));
  FeatureBuffer buffer(cfg.per_task_cap);
  FreezeReferences refs;
  const std::size_t D = model.config.embed_dim;
  for (const TaskData& task : seq.tasks) {
    const int k = task.task;
    if (task.indices.empty()) throw DataError("task " + std::to_string(k) + " has no samples");
    const TaskRef init = (cfg.warm_start && k > 0) ? TaskRef::task(k - 1) : TaskRef::base();
    model.bank.clone_thresholds(init, k);
    model.heads.add(k, D, seq.classes_per_task, rng);
    const Phase phase = k == 0 ? Phase::kTask0 : Phase::kTaskK;
    const ParamCount pc = count_parameters(model, phase, k, cfg);
    if (k == 0) {
      train_task0(model, train, task, cfg, rng, hooks.on_epoch);
    } else {
      train_task_k(model, train, task, cfg, rng, hooks.on_epoch);
    }
    model.bank.finalize(k);
    model.heads.finalize(k);
    record_finalization(model, k, refs);
    if (hooks.on_task_done) hooks.on_task_done(k, pc.trainable, pc.bank_bytes);

    harvest_features(model, train, task, buffer);
    model.gate.grow_to(static_cast<std::size_t>(k) + 1, rng);
    const GateStats gs = train_gating(model.gate, buffer, cfg, rng);
    model.gate_history.push_back(model.gate);
    if (hooks.on_gate_done) hooks.on_gate_done(k, gs);

    if (hooks.before_freeze_check) hooks.before_freeze_check(k, model);
    const FreezeReport report = freeze_check(model, refs);
    if (!report.all_pass()) {
      std::string failed;
      for (const auto& g : report.groups) {
        if (!g.pass) failed += (failed.empty() ? "" : ", ") + g.name;
      }
      throw InvariantError("freeze check failed after task " + std::to_string(k) + ": " + failed);
    }
    model.rng_state = rng.state();
    if (hooks.after_task) hooks.after_task(k, model);
  }
}

}  // namespace catf
