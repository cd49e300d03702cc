#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cil.hpp"

namespace catf {

struct RoutedPrediction {
  int predicted_task = 0;
  int predicted_class = 0;  // global class id
  std::vector<float> gate_logits;
  std::vector<float> task_logits;
};

// Which gate and how many tasks an evaluation sees. Defaults to the current
// gate over every finalized task.
struct RouteScope {
  GatingMLP* gate = nullptr;
  std::size_t num_tasks = 0;
};

RouteScope current_scope(Model& model);
// The gate as it stood right after task `after_task` finalized.
RouteScope history_scope(Model& model, int after_task);

// Task prediction from BASE-threshold features.
int predict_task(Model& model, const Dataset& data, std::size_t index,
                 std::vector<float>* gate_logits = nullptr);

// Two passes: BASE features -> gate -> k*, then k*'s thresholds and head.
RoutedPrediction classify(Model& model, const TaskSequence& seq, const Dataset& data,
                          std::size_t index);

// Batched form. Samples are independent; with `forced_tasks` the gate is
// bypassed and the given task ids are used (oracle routing).
std::vector<RoutedPrediction> classify_batch(Model& model, const TaskSequence& seq,
                                             const Dataset& data,
                                             std::span<const std::size_t> indices,
                                             const RouteScope& scope,
                                             std::span<const int> forced_tasks = {},
                                             std::size_t batch_size = 128);

struct CilMetrics {
  std::size_t num_tasks = 0;
  std::size_t samples = 0;
  std::size_t route_correct = 0;
  std::size_t routed_correct = 0;  // route correct AND class correct
  std::size_t oracle_correct = 0;
  std::vector<double> per_task_acc;         // routed, per true task
  std::vector<double> per_task_oracle_acc;  // oracle-routed, per true task

  double routing_acc() const;
  double overall_acc() const;
  double oracle_acc() const;
};

// Routed and oracle evaluation of every test sample whose task is in scope.
// Asserts the decomposition identities on the counts.
CilMetrics evaluate_cil(Model& model, const TaskSequence& test_seq, const Dataset& test,
                        const RouteScope& scope);
CilMetrics evaluate_cil(Model& model, const TaskSequence& test_seq, const Dataset& test);

// Routed per-task accuracy after each task: profile[j][i] for i <= j, using
// the gate saved after task j.
struct ForgettingProfile {
  std::vector<std::vector<double>> routed;
  std::vector<std::vector<double>> oracle;
};

ForgettingProfile forgetting_profile(Model& model, const TaskSequence& test_seq,
                                     const Dataset& test);

void check_decomposition(const CilMetrics& m);

}  // namespace catf
