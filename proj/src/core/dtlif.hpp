#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ops.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace catf {

struct DTLIFConfig {
  float tau = 2.0f;       // membrane time constant, >= 1
  float phi_init = 0.5f;  // base threshold
  SurrogateSpec surrogate;
  // Carry gradients through the membrane potential across timesteps. When
  // false, V is detached between steps and only the current step's
  // membrane update is differentiated.
  bool bptt = false;

  void validate() const;
  float leak() const { return 1.0f - 1.0f / tau; }
  float gain() const { return 1.0f / tau; }
};

// Membrane potentials of one DTLIF layer for the current forward pass.
struct DTLIFState {
  Tensor V;
  // Tape handle for V when the previous step ran with bptt; V.data mirrors
  // its value.
  std::optional<Var> tracked;

  void reset(const Shape& shape);
};

void reset_state(DTLIFState& state);

// Selects which threshold set the network uses: BASE (phi_init everywhere)
// or a task's learned thresholds.
class TaskRef {
 public:
  static TaskRef base() { return TaskRef(-1); }
  static TaskRef task(int id) { return TaskRef(id); }

  bool is_base() const { return id_ < 0; }
  int id() const { return id_; }
  bool operator==(const TaskRef&) const = default;

 private:
  explicit TaskRef(int id) : id_(id) {}
  int id_;
};

struct ThresholdLayer {
  std::string name;
  std::size_t channels = 0;
  std::size_t offset = 0;
};

// Per-task, per-channel firing thresholds. Each task owns one flat tensor
// holding every DTLIF layer's channels back to back.
class ThresholdBank {
 public:
  ThresholdBank() = default;
  explicit ThresholdBank(float phi_init) : phi_init_(phi_init) {}

  std::size_t add_layer(const std::string& name, std::size_t channels);
  std::size_t layer_count() const { return layers_.size(); }
  const ThresholdLayer& layer(std::size_t layer_id) const;
  const std::vector<ThresholdLayer>& layers() const { return layers_; }
  std::size_t find_layer(const std::string& name) const;

  std::size_t entries_per_task() const { return entries_; }
  std::size_t bytes_per_task() const { return 4 * entries_; }
  float phi_init() const { return phi_init_; }

  // Initializes thresholds of `to_task`: constant phi_init when `from` is
  // BASE, an exact copy of `from` otherwise.
  void clone_thresholds(TaskRef from, int to_task);
  void finalize(int task);
  bool is_finalized(int task) const { return finalized_.count(task) != 0; }
  bool has_task(int task) const { return per_task_.count(task) != 0; }
  std::vector<int> tasks() const;
  std::size_t num_tasks() const { return per_task_.size(); }

  Tensor& thresholds(int task);
  const Tensor& thresholds(int task) const;
  // Constant BASE tensor (phi_init in every entry).
  const Tensor& base_thresholds() const { return base_; }
  const Tensor& thresholds(TaskRef ref) const;

  void set_active(TaskRef ref);
  TaskRef active() const { return active_; }

  // Clamps a task's thresholds into [lo, hi]; refuses finalized tasks.
  void clamp(int task, float lo, float hi);

  // Direct restore used by checkpoint loading.
  void restore(int task, Tensor values, bool finalized);

 private:
  float phi_init_ = 0.5f;
  std::vector<ThresholdLayer> layers_;
  std::size_t entries_ = 0;
  std::map<int, Tensor> per_task_;
  std::set<int> finalized_;
  Tensor base_;
  TaskRef active_ = TaskRef::base();
};

// V~ = (1 - 1/tau) V + (1/tau) I
Var membrane_update(Tape& tape, const DTLIFState& state, Var input_current,
                    const DTLIFConfig& cfg);

struct SpikeResult {
  Var spikes;
  Var v_next;
};

// S = H(V~ - phi), V_next = V~ - S * phi, phi broadcast over the last dim.
SpikeResult spike_and_reset(Tape& tape, Var vtilde, Var phi, const DTLIFConfig& cfg);

// One timestep: membrane update, spike, soft reset. Mutates state.V.
Var dtlif_step(Tape& tape, DTLIFState& state, Var input_current, Var phi, const DTLIFConfig& cfg);
Var dtlif_step(Tape& tape, DTLIFState& state, Var input_current, const ThresholdBank& bank,
               std::size_t layer_id, const DTLIFConfig& cfg);

// Runs a DTLIF layer over a time-major current [T*M x C] (M rows per
// timestep) from a zero membrane, returning spikes of the same shape.
Var dtlif_sequence(Tape& tape, Var currents, std::size_t timesteps, Var phi,
                   const DTLIFConfig& cfg);

}  // namespace catf
