#include "dtlif.hpp"

#include <algorithm>
#include <cmath>

#include "error.hpp"

namespace catf {

void DTLIFConfig::validate() const {
  if (!(tau >= 1.0f) || !std::isfinite(tau)) {
    throw ConfigError("DTLIF tau must be >= 1, got " + std::to_string(tau));
  }
  if (!(phi_init > 0.0f)) {
    throw ConfigError("DTLIF phi_init must be > 0, got " + std::to_string(phi_init));
  }
  if (!(surrogate.width > 0.0f)) throw ConfigError("surrogate width must be > 0");
}

void DTLIFState::reset(const Shape& shape) {
  V = Tensor(shape, 0.0f);
  tracked.reset();
}

void reset_state(DTLIFState& state) {
  std::fill(state.V.data.begin(), state.V.data.end(), 0.0f);
  state.V.clear_grad();
  state.tracked.reset();
}

std::size_t ThresholdBank::add_layer(const std::string& name, std::size_t channels) {
  if (!per_task_.empty()) throw ContractError("threshold layers must be declared before tasks");
  layers_.push_back({name, channels, entries_});
  entries_ += channels;
  base_ = Tensor({entries_}, phi_init_);
  return layers_.size() - 1;
}

const ThresholdLayer& ThresholdBank::layer(std::size_t layer_id) const {
  if (layer_id >= layers_.size()) {
    throw LookupError("unknown DTLIF layer id " + std::to_string(layer_id));
  }
  return layers_[layer_id];
}

std::size_t ThresholdBank::find_layer(const std::string& name) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].name == name) return i;
  }
  throw LookupError("unknown DTLIF layer '" + name + "'");
}

void ThresholdBank::clone_thresholds(TaskRef from, int to_task) {
  if (to_task < 0) throw LookupError("invalid threshold task id " + std::to_string(to_task));
  if (is_finalized(to_task)) {
    throw ImmutabilityError("thresholds of task " + std::to_string(to_task) +
                            " are finalized and cannot be overwritten");
  }
  Tensor fresh = from.is_base() ? Tensor({entries_}, phi_init_) : thresholds(from.id());
  fresh.requires_grad = false;
  fresh.clear_grad();
  per_task_[to_task] = std::move(fresh);
}

void ThresholdBank::finalize(int task) {
  if (!has_task(task)) throw LookupError("no thresholds for task " + std::to_string(task));
  Tensor& t = per_task_.at(task);
  t.requires_grad = false;
  t.clear_grad();
  finalized_.insert(task);
}

std::vector<int> ThresholdBank::tasks() const {
  std::vector<int> out;
  for (const auto& [k, _] : per_task_) out.push_back(k);
  return out;
}

Tensor& ThresholdBank::thresholds(int task) {
  auto it = per_task_.find(task);
  if (it == per_task_.end()) throw LookupError("no thresholds for task " + std::to_string(task));
  return it->second;
}

const Tensor& ThresholdBank::thresholds(int task) const {
  auto it = per_task_.find(task);
  if (it == per_task_.end()) throw LookupError("no thresholds for task " + std::to_string(task));
  return it->second;
}

const Tensor& ThresholdBank::thresholds(TaskRef ref) const {
  return ref.is_base() ? base_ : thresholds(ref.id());
}

void ThresholdBank::set_active(TaskRef ref) {
  if (!ref.is_base() && !has_task(ref.id())) {
    throw LookupError("no thresholds for task " + std::to_string(ref.id()));
  }
  active_ = ref;
}

void ThresholdBank::clamp(int task, float lo, float hi) {
  if (is_finalized(task)) {
    throw ImmutabilityError("cannot modify finalized thresholds of task " + std::to_string(task));
  }
  for (float& v : thresholds(task).data) v = std::clamp(v, lo, hi);
}

void ThresholdBank::restore(int task, Tensor values, bool finalized) {
  if (values.numel() != entries_) {
    throw CheckpointError("threshold record for task " + std::to_string(task) + " has " +
                          std::to_string(values.numel()) + " entries, expected " +
                          std::to_string(entries_));
  }
  values.shape = {entries_};
  values.requires_grad = false;
  per_task_[task] = std::move(values);
  if (finalized) finalized_.insert(task);
}

Var membrane_update(Tape& tape, const DTLIFState& state, Var input_current,
                    const DTLIFConfig& cfg) {
  const Tensor& I = tape.value(input_current);
  if (state.V.shape != I.shape) {
    throw DimensionError("membrane_update: state " + shape_str(state.V.shape) + " vs input " +
                         shape_str(I.shape));
  }
  Var v = state.tracked ? *state.tracked : tape.constant(state.V);
  return axpby(tape, cfg.leak(), v, cfg.gain(), input_current);
}

SpikeResult spike_and_reset(Tape& tape, Var vtilde, Var phi, const DTLIFConfig& cfg) {
  for (float p : tape.value(phi).data) {
    if (!(p > 0.0f)) throw DomainError("spike_and_reset: threshold must be > 0");
  }
  Var s = heaviside_surrogate(tape, sub_channel(tape, vtilde, phi), cfg.surrogate);
  Var v_next = sub(tape, vtilde, mul_channel(tape, s, phi));
  return {s, v_next};
}

Var dtlif_step(Tape& tape, DTLIFState& state, Var input_current, Var phi, const DTLIFConfig& cfg) {
  Var vt = membrane_update(tape, state, input_current, cfg);
  if (cfg.bptt) {
    SpikeResult r = spike_and_reset(tape, vt, phi, cfg);
    state.V.data = tape.value(r.v_next).data;
    state.tracked = r.v_next;
    return r.spikes;
  }
  // Truncated: V_next is computed off-tape. Same arithmetic as the tracked
  // path, so forward values agree bitwise between the two modes.
  for (float p : tape.value(phi).data) {
    if (!(p > 0.0f)) throw DomainError("spike_and_reset: threshold must be > 0");
  }
  Var s = heaviside_surrogate(tape, sub_channel(tape, vt, phi), cfg.surrogate);
  const Tensor& vtv = tape.value(vt);
  const Tensor& sv = tape.value(s);
  const Tensor& pv = tape.value(phi);
  const std::size_t c = pv.numel();
  for (std::size_t i = 0; i < vtv.numel(); ++i) {
    const float reset = sv.data[i] * pv.data[i % c];
    state.V.data[i] = vtv.data[i] - reset;
  }
  state.tracked.reset();
  return s;
}

Var dtlif_step(Tape& tape, DTLIFState& state, Var input_current, const ThresholdBank& bank,
               std::size_t layer_id, const DTLIFConfig& cfg) {
  const ThresholdLayer& layer = bank.layer(layer_id);
  const Tensor& all = bank.thresholds(bank.active());
  Tensor phi({layer.channels});
  std::copy_n(all.data.begin() + static_cast<std::ptrdiff_t>(layer.offset), layer.channels,
              phi.data.begin());
  return dtlif_step(tape, state, input_current, tape.constant(std::move(phi)), cfg);
}

Var dtlif_sequence(Tape& tape, Var currents, std::size_t timesteps, Var phi,
                   const DTLIFConfig& cfg) {
  const Tensor& I = tape.value(currents);
  if (timesteps == 0 || I.ndim() == 0 || I.dim(0) % timesteps != 0) {
    throw DimensionError("dtlif_sequence: " + shape_str(I.shape) + " not divisible into " +
                         std::to_string(timesteps) + " timesteps");
  }
  const std::size_t rows = I.dim(0) / timesteps;
  Shape step_shape = I.shape;
  step_shape[0] = rows;
  DTLIFState state;
  state.reset(step_shape);
  std::vector<Var> spikes;
  spikes.reserve(timesteps);
  for (std::size_t t = 0; t < timesteps; ++t) {
    Var it = slice_rows(tape, currents, t * rows, rows);
    spikes.push_back(dtlif_step(tape, state, it, phi, cfg));
  }
  return concat_rows(tape, spikes);
}

}  // namespace catf
