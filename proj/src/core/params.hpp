#pragma once

#include <memory>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace catf {

enum class ParamKind { kWeight, kBuffer };

// Insertion-ordered named tensors with stable addresses.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    ParamKind kind;
    std::unique_ptr<Tensor> tensor;
  };

  ParamStore() = default;
  ParamStore(const ParamStore& other);
  ParamStore& operator=(const ParamStore& other);
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Tensor& add(const std::string& name, Tensor t, ParamKind kind = ParamKind::kWeight);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<Entry> entries_;
};

}  // namespace catf
