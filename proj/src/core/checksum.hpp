#pragma once

#include <span>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace catf {

// Incremental SHA-256 over tensor bytes (shape then little-endian f32 data).
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::span<const unsigned char> bytes);
  void update(const Tensor& t);
  std::string hex_digest();

 private:
  void* ctx_;
};

std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(const std::vector<const Tensor*>& tensors);

}  // namespace catf
