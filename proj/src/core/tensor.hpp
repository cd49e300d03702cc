#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace catf {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major f32 array. `grad` is empty until a backward pass or an
// optimizer touches it; when present it has the same length as `data`.
struct Tensor {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s, float fill = 0.0f);
  Tensor(Shape s, std::vector<float> values);

  std::size_t numel() const { return data.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  std::size_t ndim() const { return shape.size(); }
  bool has_grad() const { return !grad.empty(); }

  void zero_grad() { grad.assign(data.size(), 0.0f); }
  void clear_grad() { grad.clear(); }

  float& operator[](std::size_t i) { return data[i]; }
  float operator[](std::size_t i) const { return data[i]; }

  bool all_finite() const;
};

}  // namespace catf
