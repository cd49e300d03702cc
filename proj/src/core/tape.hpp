#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace catf {

// Handle to a value recorded on a Tape. Only meaningful for the tape that
// issued it; using it elsewhere raises MissingNodeError.
struct Var {
  std::uint64_t tape_tag = 0;
  std::size_t id = 0;
};

// How heaviside_surrogate evaluates its forward pass. Relaxed replaces the
// step with sigmoid(x / width) and uses the true derivative, so finite
// differences can check the whole graph. Training and inference never use it.
enum class SpikeMode { kExact, kRelaxed };

class Tape;
using BackwardFn = std::function<void(Tape&, std::size_t out_id)>;

// Reverse-mode recorder. Nodes are appended in creation order, which is a
// topological order; backward replays them in reverse exactly once.
class Tape {
 public:
  explicit Tape(SpikeMode mode = SpikeMode::kExact);

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf bound to an external tensor. When the tensor has requires_grad,
  // backward() accumulates into tensor.grad. The tensor must outlive the tape.
  Var param(Tensor& t);
  // Owned leaf that never receives a gradient.
  Var constant(Tensor t);

  Var record(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn fn);

  const Tensor& value(Var v) const;
  const Tensor& value(std::size_t id) const;
  bool needs_grad(Var v) const { return node(v).needs_grad; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  // Gradient slot of a node, allocated (zeroed) on first access.
  std::vector<float>& grad(std::size_t id);
  std::vector<float>& grad(Var v) { return grad(check(v)); }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }

  void backward(Var loss);

  SpikeMode mode() const { return mode_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    const char* op = "";
    Tensor owned;
    Tensor* external = nullptr;
    std::vector<float> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool needs_grad = false;
  };

  std::size_t check(Var v) const;
  const Node& node(Var v) const { return nodes_[check(v)]; }

  std::uint64_t tag_;
  SpikeMode mode_;
  std::vector<Node> nodes_;
};

}  // namespace catf
