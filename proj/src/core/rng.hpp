#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace catf {

// SplitMix64 (Steele, Lea & Flood). Pinned so generated datasets and
// initializations are identical on every platform; std:: distributions are
// implementation-defined and are not used anywhere in the core.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 24 random mantissa bits.
  float uniform() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  // Uniform in [0, 1) as double with 53 random bits.
  double uniform_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; one draw per call, no cached spare.
  float normal();

  std::uint64_t below(std::uint64_t n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  std::uint64_t state_;
};

// Order-sensitive 64-bit mixing of a key sequence; used to derive
// independent substreams (per sample, per block) from a run seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t key);
std::uint64_t hash_floats(std::span<const float> values);

}  // namespace catf
