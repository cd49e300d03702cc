#include "tape.hpp"

#include <atomic>
#include <utility>

#include "error.hpp"

namespace catf {

namespace {
std::atomic<std::uint64_t> g_next_tag{1};
}

Tape::Tape(SpikeMode mode) : tag_(g_next_tag.fetch_add(1)), mode_(mode) {}

std::size_t Tape::check(Var v) const {
  if (v.tape_tag != tag_ || v.id >= nodes_.size()) {
    throw MissingNodeError("value was not recorded on this tape (node " + std::to_string(v.id) +
                           ")");
  }
  return v.id;
}

Var Tape::param(Tensor& t) {
  Node n;
  n.op = "param";
  n.external = &t;
  n.needs_grad = t.requires_grad;
  nodes_.push_back(std::move(n));
  return {tag_, nodes_.size() - 1};
}

Var Tape::constant(Tensor t) {
  Node n;
  n.op = "constant";
  n.owned = std::move(t);
  nodes_.push_back(std::move(n));
  return {tag_, nodes_.size() - 1};
}

Var Tape::record(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn fn) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + op);
  }
  Node n;
  n.op = op;
  n.owned = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    std::size_t id = check(in);
    n.inputs.push_back(id);
    n.needs_grad = n.needs_grad || nodes_[id].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {tag_, nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const { return value(check(v)); }

const Tensor& Tape::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.owned;
}

std::vector<float>& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(value(id).numel(), 0.0f);
  return n.grad;
}

void Tape::backward(Var loss) {
  const std::size_t root = check(loss);
  if (value(root).numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_str(value(root).shape));
  }
  grad(root)[0] = 1.0f;
  for (std::size_t i = root + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, i);
  }
  for (Node& n : nodes_) {
    if (!n.external || !n.external->requires_grad || n.grad.empty()) continue;
    Tensor& t = *n.external;
    if (t.grad.empty()) t.grad.assign(t.numel(), 0.0f);
    for (std::size_t j = 0; j < n.grad.size(); ++j) t.grad[j] += n.grad[j];
  }
}

}  // namespace catf
