#include "ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "error.hpp"

namespace catf {

namespace {

std::size_t last_dim(const Tensor& t) { return t.shape.empty() ? 1 : t.shape.back(); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
  }
}

void require_channel(const Tensor& x, const Tensor& v, const char* op) {
  if (v.numel() != last_dim(x)) {
    throw DimensionError(std::string(op) + ": channel vector " + shape_str(v.shape) +
                         " does not broadcast over " + shape_str(x.shape));
  }
}

float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace

float SurrogateSpec::derivative(float x) const {
  const float ax = std::fabs(x);
  switch (kind) {
    case SurrogateKind::kRectangular:
      return ax <= width ? 1.0f : 0.0f;
    case SurrogateKind::kTriangular:
      return ax <= width ? 1.0f - ax / width : 0.0f;
    case SurrogateKind::kSigmoidDerivative: {
      // Evaluated on |x| so g(x) == g(-x) holds bitwise.
      const float s = sigmoid(ax / width);
      return s * (1.0f - s) / width;
    }
  }
  return 0.0f;
}

Var matmul(Tape& tape, Var a, Var b) {
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  if (A.ndim() != 2 || B.ndim() != 2 || A.dim(1) != B.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(A.shape) + " and " +
                         shape_str(B.shape));
  }
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    float* c = &out.data[i * n];
    const float* arow = &A.data[i * k];
    for (std::size_t p = 0; p < k; ++p) {
      const float av = arow[p];
      if (av == 0.0f) continue;
      const float* brow = &B.data[p * n];
      for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
    }
  }
  return tape.record("matmul", std::move(out), {a, b}, [m, k, n](Tape& t, std::size_t id) {
    const std::size_t ia = t.inputs(id)[0], ib = t.inputs(id)[1];
    const std::vector<float>& dc = t.grad(id);
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    if (t.needs_grad(ia)) {
      std::vector<float>& da = t.grad(ia);
      for (std::size_t i = 0; i < m; ++i) {
        const float* dcrow = &dc[i * n];
        for (std::size_t p = 0; p < k; ++p) {
          const float* brow = &B.data[p * n];
          float acc = 0.0f;
          for (std::size_t j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
          da[i * k + p] += acc;
        }
      }
    }
    if (t.needs_grad(ib)) {
      std::vector<float>& db = t.grad(ib);
      for (std::size_t i = 0; i < m; ++i) {
        const float* dcrow = &dc[i * n];
        for (std::size_t p = 0; p < k; ++p) {
          const float av = A.data[i * k + p];
          if (av == 0.0f) continue;
          float* dbrow = &db[p * n];
          for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
        }
      }
    }
  });
}

Var axpby(Tape& tape, float alpha, Var a, float beta, Var b) {
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  require_same_shape(A, B, "axpby");
  Tensor out(A.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const float x = alpha * A.data[i];
    const float y = beta * B.data[i];
    out.data[i] = x + y;
  }
  return tape.record("axpby", std::move(out), {a, b}, [alpha, beta](Tape& t, std::size_t id) {
    const std::size_t ia = t.inputs(id)[0], ib = t.inputs(id)[1];
    const std::vector<float>& g = t.grad(id);
    if (t.needs_grad(ia)) {
      auto& ga = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += alpha * g[i];
    }
    if (t.needs_grad(ib)) {
      auto& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += beta * g[i];
    }
  });
}

Var add(Tape& tape, Var a, Var b) {
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  require_same_shape(A, B, "add");
  Tensor out(A.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = A.data[i] + B.data[i];
  return tape.record("add", std::move(out), {a, b}, [](Tape& t, std::size_t id) {
    const std::vector<float>& g = t.grad(id);
    for (std::size_t in : t.inputs(id)) {
      if (!t.needs_grad(in)) continue;
      auto& gi = t.grad(in);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Var sub(Tape& tape, Var a, Var b) {
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  require_same_shape(A, B, "sub");
  Tensor out(A.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = A.data[i] - B.data[i];
  return tape.record("sub", std::move(out), {a, b}, [](Tape& t, std::size_t id) {
    const std::size_t ia = t.inputs(id)[0], ib = t.inputs(id)[1];
    const std::vector<float>& g = t.grad(id);
    if (t.needs_grad(ia)) {
      auto& ga = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(ib)) {
      auto& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Tape& tape, Var a, Var b) {
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  require_same_shape(A, B, "mul");
  Tensor out(A.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = A.data[i] * B.data[i];
  return tape.record("mul", std::move(out), {a, b}, [](Tape& t, std::size_t id) {
    const std::size_t ia = t.inputs(id)[0], ib = t.inputs(id)[1];
    const std::vector<float>& g = t.grad(id);
    if (t.needs_grad(ia)) {
      const Tensor& B = t.value(ib);
      auto& ga = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B.data[i];
    }
    if (t.needs_grad(ib)) {
      const Tensor& A = t.value(ia);
      auto& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A.data[i];
    }
  });
}

Var scale(Tape& tape, Var a, float s) {
  const Tensor& A = tape.value(a);
  Tensor out(A.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = s * A.data[i];
  return tape.record("scale", std::move(out), {a}, [s](Tape& t, std::size_t id) {
    const std::size_t ia = t.inputs(id)[0];
    const std::vector<float>& g = t.grad(id);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var add_bias(Tape& tape, Var x, Var bias) {
  const Tensor& X = tape.value(x);
  const Tensor& b = tape.value(bias);
  require_channel(X, b, "add_bias");
  const std::size_t c = b.numel();
  Tensor out(X.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = X.data[i] + b.data[i % c];
  return tape.record("add_bias", std::move(out), {x, bias}, [c](Tape& t, std::size_t id) {
    const std::size_t ix = t.inputs(id)[0], ib = t.inputs(id)[1];
    const std::vector<float>& g = t.grad(id);
    if (t.needs_grad(ix)) {
      auto& gx = t.grad(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.needs_grad(ib)) {
      auto& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
    }
  });
}

Var sub_channel(Tape& tape, Var x, Var v) {
  const Tensor& X = tape.value(x);
  const Tensor& V = tape.value(v);
  require_channel(X, V, "sub_channel");
  const std::size_t c = V.numel();
  Tensor out(X.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = X.data[i] - V.data[i % c];
  return tape.record("sub_channel", std::move(out), {x, v}, [c](Tape& t, std::size_t id) {
    const std::size_t ix = t.inputs(id)[0], iv = t.inputs(id)[1];
    const std::vector<float>& g = t.grad(id);
    if (t.needs_grad(ix)) {
      auto& gx = t.grad(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.needs_grad(iv)) {
      auto& gv = t.grad(iv);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i % c] -= g[i];
    }
  });
}

Var mul_channel(Tape& tape, Var x, Var v) {
  const Tensor& X = tape.value(x);
  const Tensor& V = tape.value(v);
  require_channel(X, V, "mul_channel");
  const std::size_t c = V.numel();
  Tensor out(X.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = X.data[i] * V.data[i % c];
  return tape.record("mul_channel", std::move(out), {x, v}, [c](Tape& t, std::size_t id) {
    const std::size_t ix = t.inputs(id)[0], iv = t.inputs(id)[1];
    const std::vector<float>& g = t.grad(id);
    if (t.needs_grad(ix)) {
      const Tensor& V = t.value(iv);
      auto& gx = t.grad(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * V.data[i % c];
    }
    if (t.needs_grad(iv)) {
      const Tensor& X = t.value(ix);
      auto& gv = t.grad(iv);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i % c] += g[i] * X.data[i];
    }
  });
}

Var relu(Tape& tape, Var x) {
  const Tensor& X = tape.value(x);
  Tensor out(X.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = X.data[i] > 0.0f ? X.data[i] : 0.0f;
  return tape.record("relu", std::move(out), {x}, [](Tape& t, std::size_t id) {
    const std::size_t ix = t.inputs(id)[0];
    const Tensor& X = t.value(ix);
    const std::vector<float>& g = t.grad(id);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (X.data[i] > 0.0f) gx[i] += g[i];
    }
  });
}

Var sum(Tape& tape, Var x) {
  const Tensor& X = tape.value(x);
  float s = 0.0f;
  for (float v : X.data) s += v;
  return tape.record("sum", Tensor({1}, {s}), {x}, [](Tape& t, std::size_t id) {
    const std::size_t ix = t.inputs(id)[0];
    const float g = t.grad(id)[0];
    auto& gx = t.grad(ix);
    for (auto& v : gx) v += g;
  });
}

Var heaviside_surrogate(Tape& tape, Var x, const SurrogateSpec& spec) {
  const Tensor& X = tape.value(x);
  if (!X.all_finite()) throw NumericError("heaviside_surrogate: non-finite input");
  const bool relaxed = tape.mode() == SpikeMode::kRelaxed;
  Tensor out(X.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const float v = X.data[i];
    out.data[i] = relaxed ? sigmoid(v / spec.width) : (v >= 0.0f ? 1.0f : 0.0f);
  }
  return tape.record("heaviside", std::move(out), {x}, [spec, relaxed](Tape& t, std::size_t id) {
    const std::size_t ix = t.inputs(id)[0];
    const Tensor& X = t.value(ix);
    const std::vector<float>& g = t.grad(id);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (g[i] == 0.0f) continue;
      float d;
      if (relaxed) {
        const float s = sigmoid(X.data[i] / spec.width);
        d = s * (1.0f - s) / spec.width;
      } else {
        d = spec.derivative(X.data[i]);
      }
      gx[i] += d * g[i];
    }
  });
}

Var cross_entropy(Tape& tape, Var logits, std::span<const int> labels) {
  const Tensor& L = tape.value(logits);
  if (L.ndim() != 2) throw DimensionError("cross_entropy: logits must be [B x C], got " +
                                          shape_str(L.shape));
  const std::size_t B = L.dim(0), C = L.dim(1);
  if (B == 0) throw ContractError("cross_entropy: empty batch");
  if (labels.size() != B) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(B));
  }
  std::vector<float> probs(B * C);
  double total = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= C) {
      throw IndexError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                       std::to_string(C) + ")");
    }
    const float* row = &L.data[i * C];
    const float mx = *std::max_element(row, row + C);
    double z = 0.0;
    for (std::size_t j = 0; j < C; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    for (std::size_t j = 0; j < C; ++j) {
      probs[i * C + j] = static_cast<float>(std::exp(static_cast<double>(row[j] - mx)) / z);
    }
    total += std::log(z) - static_cast<double>(row[y] - mx);
  }
  const float loss = static_cast<float>(total / static_cast<double>(B));
  std::vector<int> ys(labels.begin(), labels.end());
  return tape.record("cross_entropy", Tensor({1}, {loss}), {logits},
                     [probs = std::move(probs), ys = std::move(ys), B, C](Tape& t, std::size_t id) {
                       const std::size_t il = t.inputs(id)[0];
                       const float g = t.grad(id)[0] / static_cast<float>(B);
                       auto& gl = t.grad(il);
                       for (std::size_t i = 0; i < B; ++i) {
                         for (std::size_t j = 0; j < C; ++j) {
                           float p = probs[i * C + j];
                           if (static_cast<int>(j) == ys[i]) p -= 1.0f;
                           gl[i * C + j] += g * p;
                         }
                       }
                     });
}

Var slice_rows(Tape& tape, Var x, std::size_t begin, std::size_t count) {
  const Tensor& X = tape.value(x);
  if (X.ndim() == 0 || begin + count > X.dim(0)) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") outside " + shape_str(X.shape));
  }
  const std::size_t row = X.numel() / X.dim(0);
  Shape s = X.shape;
  s[0] = count;
  Tensor out(s);
  std::copy_n(X.data.begin() + static_cast<std::ptrdiff_t>(begin * row), count * row,
              out.data.begin());
  return tape.record("slice_rows", std::move(out), {x}, [begin, row](Tape& t, std::size_t id) {
    const std::size_t ix = t.inputs(id)[0];
    const std::vector<float>& g = t.grad(id);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[begin * row + i] += g[i];
  });
}

Var concat_rows(Tape& tape, std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const Tensor& first = tape.value(parts[0]);
  Shape s = first.shape;
  std::size_t rows = 0;
  for (const Var& p : parts) {
    const Tensor& P = tape.value(p);
    if (P.ndim() != first.ndim() ||
        !std::equal(P.shape.begin() + 1, P.shape.end(), first.shape.begin() + 1)) {
      throw DimensionError("concat_rows: " + shape_str(P.shape) + " vs " + shape_str(first.shape));
    }
    rows += P.dim(0);
  }
  s[0] = rows;
  Tensor out(s);
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& P = tape.value(p);
    std::copy(P.data.begin(), P.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += P.numel();
  }
  return tape.record("concat_rows", std::move(out), {parts.begin(), parts.end()},
                     [](Tape& t, std::size_t id) {
                       const std::vector<float>& g = t.grad(id);
                       std::size_t off = 0;
                       for (std::size_t in : t.inputs(id)) {
                         const std::size_t n = t.value(in).numel();
                         if (t.needs_grad(in)) {
                           auto& gi = t.grad(in);
                           for (std::size_t i = 0; i < n; ++i) gi[i] += g[off + i];
                         }
                         off += n;
                       }
                     });
}

Var slice_flat(Tape& tape, Var x, std::size_t offset, std::size_t count) {
  const Tensor& X = tape.value(x);
  if (offset + count > X.numel()) {
    throw DimensionError("slice_flat: range exceeds " + shape_str(X.shape));
  }
  Tensor out({count});
  std::copy_n(X.data.begin() + static_cast<std::ptrdiff_t>(offset), count, out.data.begin());
  return tape.record("slice_flat", std::move(out), {x}, [offset](Tape& t, std::size_t id) {
    const std::size_t ix = t.inputs(id)[0];
    const std::vector<float>& g = t.grad(id);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[offset + i] += g[i];
  });
}

Var reshape(Tape& tape, Var x, Shape shape) {
  const Tensor& X = tape.value(x);
  if (shape_numel(shape) != X.numel()) {
    throw DimensionError("reshape: " + shape_str(X.shape) + " to " + shape_str(shape));
  }
  Tensor out(std::move(shape), X.data);
  return tape.record("reshape", std::move(out), {x}, [](Tape& t, std::size_t id) {
    const std::size_t ix = t.inputs(id)[0];
    const std::vector<float>& g = t.grad(id);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var batch_norm(Tape& tape, Var x, Var gamma, Var beta, const BatchNormBuffers& buffers,
               NormMode mode) {
  const Tensor& X = tape.value(x);
  const Tensor& G = tape.value(gamma);
  const Tensor& Bt = tape.value(beta);
  require_channel(X, G, "batch_norm");
  require_channel(X, Bt, "batch_norm");
  const std::size_t C = G.numel();
  const std::size_t R = X.numel() / C;
  if (!buffers.running_mean || !buffers.running_var) {
    throw ContractError("batch_norm: running statistics not bound");
  }
  const bool batch_stats = mode != NormMode::kEval;
  if (batch_stats && R < 2) throw ContractError("batch_norm: batch statistics need >= 2 rows");

  std::vector<float> mean(C), invstd(C);
  if (batch_stats) {
    std::vector<double> m(C, 0.0), v(C, 0.0);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) m[c] += X.data[r * C + c];
    for (std::size_t c = 0; c < C; ++c) m[c] /= static_cast<double>(R);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) {
        const double d = X.data[r * C + c] - m[c];
        v[c] += d * d;
      }
    for (std::size_t c = 0; c < C; ++c) {
      const double var = v[c] / static_cast<double>(R);
      mean[c] = static_cast<float>(m[c]);
      invstd[c] = static_cast<float>(1.0 / std::sqrt(var + buffers.eps));
      if (mode == NormMode::kTrain) {
        const float mom = buffers.momentum;
        const double unbiased = v[c] / static_cast<double>(R - 1);
        buffers.running_mean->data[c] =
            (1.0f - mom) * buffers.running_mean->data[c] + mom * mean[c];
        buffers.running_var->data[c] =
            (1.0f - mom) * buffers.running_var->data[c] + mom * static_cast<float>(unbiased);
      }
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = buffers.running_mean->data[c];
      invstd[c] = 1.0f / std::sqrt(buffers.running_var->data[c] + buffers.eps);
    }
  }

  Tensor out(X.shape);
  std::vector<float> xhat(X.numel());
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t i = r * C + c;
      xhat[i] = (X.data[i] - mean[c]) * invstd[c];
      out.data[i] = G.data[c] * xhat[i] + Bt.data[c];
    }
  }
  return tape.record(
      "batch_norm", std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), invstd = std::move(invstd), C, R, batch_stats](Tape& t,
                                                                              std::size_t id) {
        const std::size_t ix = t.inputs(id)[0], ig = t.inputs(id)[1], ib = t.inputs(id)[2];
        const std::vector<float>& dy = t.grad(id);
        const Tensor& G = t.value(ig);
        std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t i = r * C + c;
            sum_dy[c] += dy[i];
            sum_dy_xhat[c] += static_cast<double>(dy[i]) * xhat[i];
          }
        if (t.needs_grad(ig)) {
          auto& gg = t.grad(ig);
          for (std::size_t c = 0; c < C; ++c) gg[c] += static_cast<float>(sum_dy_xhat[c]);
        }
        if (t.needs_grad(ib)) {
          auto& gb = t.grad(ib);
          for (std::size_t c = 0; c < C; ++c) gb[c] += static_cast<float>(sum_dy[c]);
        }
        if (t.needs_grad(ix)) {
          auto& gx = t.grad(ix);
          const double n = static_cast<double>(R);
          for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t i = r * C + c;
              if (batch_stats) {
                const double dxhat = static_cast<double>(dy[i]) * G.data[c];
                const double term = n * dxhat - sum_dy[c] * G.data[c] -
                                    static_cast<double>(xhat[i]) * sum_dy_xhat[c] * G.data[c];
                gx[i] += static_cast<float>(invstd[c] / n * term);
              } else {
                gx[i] += dy[i] * G.data[c] * invstd[c];
              }
            }
        }
      });
}

Var attention_core(Tape& tape, Var q, Var k, Var v, std::size_t groups, std::size_t tokens,
                   std::size_t heads, float scale_factor) {
  const Tensor& Q = tape.value(q);
  const Tensor& K = tape.value(k);
  const Tensor& V = tape.value(v);
  require_same_shape(Q, K, "attention_core");
  require_same_shape(Q, V, "attention_core");
  const std::size_t D = last_dim(Q);
  if (Q.numel() != groups * tokens * D || heads == 0 || D % heads != 0) {
    throw DimensionError("attention_core: " + shape_str(Q.shape) + " is not groups*tokens x dim " +
                         "with dim divisible by heads");
  }
  const std::size_t dh = D / heads;
  const std::size_t N = tokens;
  Tensor out(Q.shape);
  std::vector<float> A(N * N);
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t base = g * N * D;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t ho = h * dh;
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) {
          float acc = 0.0f;
          for (std::size_t d = 0; d < dh; ++d)
            acc += Q.data[base + i * D + ho + d] * K.data[base + j * D + ho + d];
          A[i * N + j] = acc;
        }
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t d = 0; d < dh; ++d) {
          float acc = 0.0f;
          for (std::size_t j = 0; j < N; ++j) acc += A[i * N + j] * V.data[base + j * D + ho + d];
          out.data[base + i * D + ho + d] = acc * scale_factor;
        }
    }
  }
  return tape.record(
      "attention_core", std::move(out), {q, k, v},
      [groups, N, D, dh, heads, scale_factor](Tape& t, std::size_t id) {
        const std::size_t iq = t.inputs(id)[0], ik = t.inputs(id)[1], iv = t.inputs(id)[2];
        const Tensor& Q = t.value(iq);
        const Tensor& K = t.value(ik);
        const Tensor& V = t.value(iv);
        const std::vector<float>& dO = t.grad(id);
        const bool gq = t.needs_grad(iq), gk = t.needs_grad(ik), gv = t.needs_grad(iv);
        std::vector<float>* dQ = gq ? &t.grad(iq) : nullptr;
        std::vector<float>* dK = gk ? &t.grad(ik) : nullptr;
        std::vector<float>* dV = gv ? &t.grad(iv) : nullptr;
        std::vector<float> A(N * N), dA(N * N);
        for (std::size_t g = 0; g < groups; ++g) {
          const std::size_t base = g * N * D;
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t ho = h * dh;
            // dA = scale * dO V^T
            for (std::size_t i = 0; i < N; ++i)
              for (std::size_t j = 0; j < N; ++j) {
                float acc = 0.0f;
                for (std::size_t d = 0; d < dh; ++d)
                  acc += dO[base + i * D + ho + d] * V.data[base + j * D + ho + d];
                dA[i * N + j] = acc * scale_factor;
              }
            if (dV) {
              for (std::size_t i = 0; i < N; ++i)
                for (std::size_t j = 0; j < N; ++j) {
                  float acc = 0.0f;
                  for (std::size_t d = 0; d < dh; ++d)
                    acc += Q.data[base + i * D + ho + d] * K.data[base + j * D + ho + d];
                  A[i * N + j] = acc;
                }
              // dV[j] += scale * sum_i A[i,j] dO[i]
              for (std::size_t j = 0; j < N; ++j)
                for (std::size_t d = 0; d < dh; ++d) {
                  float acc = 0.0f;
                  for (std::size_t i = 0; i < N; ++i)
                    acc += A[i * N + j] * dO[base + i * D + ho + d];
                  (*dV)[base + j * D + ho + d] += acc * scale_factor;
                }
            }
            if (dQ) {
              for (std::size_t i = 0; i < N; ++i)
                for (std::size_t d = 0; d < dh; ++d) {
                  float acc = 0.0f;
                  for (std::size_t j = 0; j < N; ++j)
                    acc += dA[i * N + j] * K.data[base + j * D + ho + d];
                  (*dQ)[base + i * D + ho + d] += acc;
                }
            }
            if (dK) {
              for (std::size_t j = 0; j < N; ++j)
                for (std::size_t d = 0; d < dh; ++d) {
                  float acc = 0.0f;
                  for (std::size_t i = 0; i < N; ++i)
                    acc += dA[i * N + j] * Q.data[base + i * D + ho + d];
                  (*dK)[base + j * D + ho + d] += acc;
                }
            }
          }
        }
      });
}

Var mean_pool(Tape& tape, Var x, std::size_t outer, std::size_t batch, std::size_t tokens) {
  const Tensor& X = tape.value(x);
  const std::size_t D = last_dim(X);
  if (X.numel() != outer * batch * tokens * D) {
    throw DimensionError("mean_pool: " + shape_str(X.shape) + " is not outer*batch*tokens x dim");
  }
  const float inv = 1.0f / static_cast<float>(outer * tokens);
  Tensor out({batch, D});
  for (std::size_t b = 0; b < batch; ++b) {
    float* o = &out.data[b * D];
    for (std::size_t t = 0; t < outer; ++t)
      for (std::size_t n = 0; n < tokens; ++n) {
        const float* row = &X.data[((t * batch + b) * tokens + n) * D];
        for (std::size_t d = 0; d < D; ++d) o[d] += row[d];
      }
    for (std::size_t d = 0; d < D; ++d) o[d] *= inv;
  }
  return tape.record("mean_pool", std::move(out), {x},
                     [outer, batch, tokens, D, inv](Tape& t, std::size_t id) {
                       const std::size_t ix = t.inputs(id)[0];
                       const std::vector<float>& g = t.grad(id);
                       auto& gx = t.grad(ix);
                       for (std::size_t tt = 0; tt < outer; ++tt)
                         for (std::size_t b = 0; b < batch; ++b)
                           for (std::size_t n = 0; n < tokens; ++n) {
                             float* row = &gx[((tt * batch + b) * tokens + n) * D];
                             for (std::size_t d = 0; d < D; ++d) row[d] += g[b * D + d] * inv;
                           }
                     });
}

void sgd_step(std::span<Tensor* const> params, float lr) {
  for (Tensor* p : params) {
    if (!p->has_grad()) throw ContractError("sgd_step: parameter has no gradient");
  }
  for (Tensor* p : params) {
    for (std::size_t i = 0; i < p->numel(); ++i) p->data[i] -= lr * p->grad[i];
    p->zero_grad();
  }
}

std::size_t argmax(std::span<const float> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

}  // namespace catf
