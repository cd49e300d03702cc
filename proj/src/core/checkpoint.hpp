#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cil.hpp"

namespace catf {

enum class SectionType : std::uint8_t { kF32 = 0, kU8 = 1, kU32 = 2, kU64 = 3 };

struct Section {
  std::string name;
  SectionType dtype = SectionType::kF32;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;  // little-endian element bytes
};

// Container layout, all little-endian:
//   "CATF" | version u32 | section count u32 | sections...
//   section = name_len u16 | name | dtype u8 | ndim u8 | dims u32[ndim] | payload
struct Container {
  static constexpr std::uint32_t kVersion = 1;

  std::vector<Section> sections;

  const Section* find(const std::string& name) const;
  const Section& at(const std::string& name) const;
};

std::vector<std::uint8_t> encode_container(const Container& c);
Container decode_container(std::span<const std::uint8_t> bytes);

Section tensor_section(const std::string& name, const Tensor& t);
Tensor section_tensor(const Section& s);

// Everything needed to evaluate or resume: config echo, class order,
// backbone tensors and running stats, thresholds, heads, gate and gate
// history, RNG state.
Container model_to_container(const Model& model, const std::string& config_text,
                             std::span<const int> class_order);

struct LoadedCheckpoint {
  Model model;
  std::string config_text;
  std::vector<int> class_order;
};

// `make_model` builds an empty model of the right architecture from the
// echoed config text; tensors are then restored into it.
LoadedCheckpoint container_to_model(const Container& c,
                                    const std::function<Model(const std::string&)>& make_model);

void write_file(const std::string& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file(const std::string& path);

}  // namespace catf
