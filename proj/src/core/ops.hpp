#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "tape.hpp"
#include "tensor.hpp"

namespace catf {

enum class SurrogateKind { kRectangular, kSigmoidDerivative, kTriangular };

// Backward-pass stand-in for the derivative of the Heaviside step.
//   rectangular:        g(x) = 1                      for |x| <= width, else 0
//   triangular:         g(x) = max(0, 1 - |x|/width)
//   sigmoid_derivative: g(x) = s(x/width)(1 - s(x/width)) / width
// All three are symmetric and non-negative.
struct SurrogateSpec {
  SurrogateKind kind = SurrogateKind::kRectangular;
  float width = 0.5f;

  float derivative(float x) const;
};

// Matrix-shaped ops treat any tensor as [rows x cols] with cols = last dim.

Var matmul(Tape& tape, Var a, Var b);
Var add(Tape& tape, Var a, Var b);
Var sub(Tape& tape, Var a, Var b);
Var mul(Tape& tape, Var a, Var b);
Var scale(Tape& tape, Var a, float s);
// alpha * a + beta * b, evaluated as (alpha * a) + (beta * b) per element.
Var axpby(Tape& tape, float alpha, Var a, float beta, Var b);
Var add_bias(Tape& tape, Var x, Var bias);
// x - v and x * v with v broadcast along the last dimension of x.
Var sub_channel(Tape& tape, Var x, Var v);
Var mul_channel(Tape& tape, Var x, Var v);
Var relu(Tape& tape, Var x);
Var sum(Tape& tape, Var x);

// Exact step forward (x >= 0 fires), surrogate derivative backward. In a
// relaxed tape the forward is sigmoid(x / width) with its true derivative.
Var heaviside_surrogate(Tape& tape, Var x, const SurrogateSpec& spec);

// Mean over the batch of -log softmax(logits)[label].
Var cross_entropy(Tape& tape, Var logits, std::span<const int> labels);

Var slice_rows(Tape& tape, Var x, std::size_t begin, std::size_t count);
Var concat_rows(Tape& tape, std::span<const Var> parts);
Var slice_flat(Tape& tape, Var x, std::size_t offset, std::size_t count);
Var reshape(Tape& tape, Var x, Shape shape);

struct BatchNormBuffers {
  Tensor* running_mean = nullptr;
  Tensor* running_var = nullptr;
  float momentum = 0.1f;
  float eps = 1e-5f;
};

enum class NormMode {
  kEval,           // normalize with stored running statistics
  kTrain,          // batch statistics, running statistics updated
  kTrainNoUpdate,  // batch statistics, running statistics left untouched
};

// Per-channel affine normalization over all rows of x.
Var batch_norm(Tape& tape, Var x, Var gamma, Var beta, const BatchNormBuffers& buffers,
               NormMode mode);

// Spike-driven attention without softmax: for each group and head,
// out = (Q K^T V) * scale. Inputs are [groups*tokens x dim] with heads
// splitting dim into equal contiguous slices.
Var attention_core(Tape& tape, Var q, Var k, Var v, std::size_t groups, std::size_t tokens,
                   std::size_t heads, float scale);

// x rows ordered [outer][batch][tokens]; returns [batch x dim], the mean over
// outer and tokens.
Var mean_pool(Tape& tape, Var x, std::size_t outer, std::size_t batch, std::size_t tokens);

// p.data -= lr * p.grad, then grads are zeroed.
void sgd_step(std::span<Tensor* const> params, float lr);

// Index of the largest value; the lowest index wins ties.
std::size_t argmax(std::span<const float> values);

}  // namespace catf
