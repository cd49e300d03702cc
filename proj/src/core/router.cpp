#include "router.hpp"

#include <algorithm>
#include <map>

#include "error.hpp"

namespace catf {

RouteScope current_scope(Model& model) {
  return {&model.gate, model.finalized_tasks()};
}

RouteScope history_scope(Model& model, int after_task) {
  if (after_task < 0 || static_cast<std::size_t>(after_task) >= model.gate_history.size()) {
    throw LookupError("no gate snapshot after task " + std::to_string(after_task));
  }
  return {&model.gate_history[static_cast<std::size_t>(after_task)],
          static_cast<std::size_t>(after_task) + 1};
}

namespace {

std::vector<float> row_of(const Tensor& t, std::size_t i) {
  const std::size_t c = t.dim(1);
  return {t.data.begin() + static_cast<std::ptrdiff_t>(i * c),
          t.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * c)};
}

Tensor features_at(Model& model, TaskRef ref, const Dataset& data,
                   std::span<const std::size_t> idx) {
  const TaskRef prev = model.bank.active();
  model.bank.set_active(ref);
  const Tensor frames = make_frames(data, idx, model.config);
  const auto keys = content_keys(data, idx);
  ForwardOptions opts;
  opts.noise_keys = keys;
  Tape tape;
  Tensor f = tape.value(backbone_forward(tape, model.backbone, model.bank, frames, opts));
  model.bank.set_active(prev);
  return f;
}

Tensor gate_logits(GatingMLP& gate, const Tensor& features) {
  Tape tape;
  return tape.value(gate.forward(tape, tape.constant(features)));
}

Tensor head_logits(Head& head, const Tensor& features) {
  Tape tape;
  return tape.value(head_forward(tape, tape.constant(features), tape.constant(head.weight),
                                 tape.constant(head.bias)));
}

void check_scope(Model& model, const RouteScope& scope) {
  if (scope.num_tasks == 0 || model.finalized_tasks() == 0) {
    throw ProtocolError("routing needs at least one finalized task");
  }
  if (scope.num_tasks > model.finalized_tasks()) {
    throw ProtocolError("routing scope exceeds the finalized tasks");
  }
  if (scope.num_tasks > 1 && (!scope.gate || scope.gate->width() < scope.num_tasks)) {
    throw ProtocolError("gate does not cover the routing scope");
  }
}

}  // namespace

std::vector<RoutedPrediction> classify_batch(Model& model, const TaskSequence& seq,
                                             const Dataset& data,
                                             std::span<const std::size_t> indices,
                                             const RouteScope& scope,
                                             std::span<const int> forced_tasks,
                                             std::size_t batch_size) {
  check_scope(model, scope);
  if (!forced_tasks.empty() && forced_tasks.size() != indices.size()) {
    throw DimensionError("forced task list does not match the sample count");
  }
  std::vector<RoutedPrediction> out(indices.size());
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, indices.size() - start);
    const auto idx = indices.subspan(start, n);

    // Pass 1: BASE thresholds, gate. A single-task model routes to task 0.
    if (scope.num_tasks > 1) {
      const Tensor f_base = features_at(model, TaskRef::base(), data, idx);
      const Tensor g = gate_logits(*scope.gate, f_base);
      for (std::size_t i = 0; i < n; ++i) {
        auto row = row_of(g, i);
        row.resize(scope.num_tasks);
        out[start + i].predicted_task = static_cast<int>(argmax(row));
        out[start + i].gate_logits = std::move(row);
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        out[start + i].predicted_task = 0;
        out[start + i].gate_logits = {0.0f};
      }
    }
    if (!forced_tasks.empty()) {
      for (std::size_t i = 0; i < n; ++i) out[start + i].predicted_task = forced_tasks[start + i];
    }

    // Pass 2: group by selected task, rerun with that task's thresholds.
    std::map<int, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < n; ++i) groups[out[start + i].predicted_task].push_back(i);
    for (const auto& [k, members] : groups) {
      if (k < 0 || static_cast<std::size_t>(k) >= scope.num_tasks) {
        throw ProtocolError("task " + std::to_string(k) + " is outside the routing scope");
      }
      std::vector<std::size_t> sub;
      for (std::size_t i : members) sub.push_back(idx[i]);
      const Tensor f = features_at(model, TaskRef::task(k), data, sub);
      const Tensor logits = head_logits(model.heads.get(k), f);
      for (std::size_t j = 0; j < members.size(); ++j) {
        RoutedPrediction& p = out[start + members[j]];
        p.task_logits = row_of(logits, j);
        p.predicted_class = seq.global_class(k, static_cast<int>(argmax(p.task_logits)));
      }
    }
  }
  return out;
}

int predict_task(Model& model, const Dataset& data, std::size_t index,
                 std::vector<float>* gate_logits_out) {
  const std::size_t idx[1] = {index};
  const RouteScope scope = current_scope(model);
  check_scope(model, scope);
  if (scope.num_tasks == 1) {
    if (gate_logits_out) *gate_logits_out = {0.0f};
    return 0;
  }
  const Tensor f = features_at(model, TaskRef::base(), data, idx);
  auto row = row_of(gate_logits(*scope.gate, f), 0);
  row.resize(scope.num_tasks);
  const int k = static_cast<int>(argmax(row));
  if (gate_logits_out) *gate_logits_out = std::move(row);
  return k;
}

RoutedPrediction classify(Model& model, const TaskSequence& seq, const Dataset& data,
                          std::size_t index) {
  const std::size_t idx[1] = {index};
  return classify_batch(model, seq, data, idx, current_scope(model)).front();
}

double CilMetrics::routing_acc() const {
  return samples ? static_cast<double>(route_correct) / static_cast<double>(samples) : 0.0;
}
double CilMetrics::overall_acc() const {
  return samples ? static_cast<double>(routed_correct) / static_cast<double>(samples) : 0.0;
}
double CilMetrics::oracle_acc() const {
  return samples ? static_cast<double>(oracle_correct) / static_cast<double>(samples) : 0.0;
}

void check_decomposition(const CilMetrics& m) {
  const std::size_t misrouted = m.samples - m.route_correct;
  if (m.routed_correct > m.route_correct) {
    throw InvariantError("overall accuracy exceeds routing accuracy");
  }
  if (m.routed_correct > m.oracle_correct) {
    throw InvariantError("routed accuracy exceeds oracle accuracy");
  }
  if (m.routed_correct + misrouted < m.oracle_correct) {
    throw InvariantError("routed accuracy below oracle minus misrouted fraction");
  }
  if (!(m.overall_acc() <= m.routing_acc()) || !(m.overall_acc() <= m.oracle_acc())) {
    throw InvariantError("decomposition identity violated after normalization");
  }
}

CilMetrics evaluate_cil(Model& model, const TaskSequence& test_seq, const Dataset& test,
                        const RouteScope& scope) {
  check_scope(model, scope);
  std::vector<std::size_t> idx;
  std::vector<int> truth_task, truth_local;
  for (const TaskData& t : test_seq.tasks) {
    if (static_cast<std::size_t>(t.task) >= scope.num_tasks) continue;
    for (std::size_t i = 0; i < t.indices.size(); ++i) {
      idx.push_back(t.indices[i]);
      truth_task.push_back(t.task);
      truth_local.push_back(t.local_labels[i]);
    }
  }
  const auto routed = classify_batch(model, test_seq, test, idx, scope);
  const auto oracle = classify_batch(model, test_seq, test, idx, scope, truth_task);

  CilMetrics m;
  m.num_tasks = scope.num_tasks;
  m.samples = idx.size();
  std::vector<std::size_t> per_n(scope.num_tasks), per_r(scope.num_tasks), per_o(scope.num_tasks);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const int k = truth_task[i];
    const int global = test_seq.global_class(k, truth_local[i]);
    const bool route_ok = routed[i].predicted_task == k;
    const bool routed_ok = route_ok && routed[i].predicted_class == global;
    const bool oracle_ok = oracle[i].predicted_class == global;
    m.route_correct += route_ok;
    m.routed_correct += routed_ok;
    m.oracle_correct += oracle_ok;
    const auto ku = static_cast<std::size_t>(k);
    per_n[ku] += 1;
    per_r[ku] += routed_ok;
    per_o[ku] += oracle_ok;
  }
  for (std::size_t k = 0; k < scope.num_tasks; ++k) {
    const double n = per_n[k] ? static_cast<double>(per_n[k]) : 1.0;
    m.per_task_acc.push_back(static_cast<double>(per_r[k]) / n);
    m.per_task_oracle_acc.push_back(static_cast<double>(per_o[k]) / n);
  }
  check_decomposition(m);
  return m;
}

CilMetrics evaluate_cil(Model& model, const TaskSequence& test_seq, const Dataset& test) {
  return evaluate_cil(model, test_seq, test, current_scope(model));
}

ForgettingProfile forgetting_profile(Model& model, const TaskSequence& test_seq,
                                     const Dataset& test) {
  ForgettingProfile p;
  for (std::size_t j = 0; j < model.gate_history.size(); ++j) {
    const CilMetrics m = evaluate_cil(model, test_seq, test, history_scope(model, static_cast<int>(j)));
    p.routed.push_back(m.per_task_acc);
    p.oracle.push_back(m.per_task_oracle_acc);
  }
  return p;
}

}  // namespace catf
