#include "data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include "error.hpp"
#include "rng.hpp"

namespace catf {

std::span<const float> Dataset::sample(std::size_t i) const {
  const std::size_t n = sample_numel();
  return {values.data() + i * n, n};
}

void Dataset::append(std::span<const float> s, int label) {
  if (s.size() != sample_numel()) throw DimensionError("dataset sample size mismatch");
  values.insert(values.end(), s.begin(), s.end());
  labels.push_back(label);
}

SplitSpec SplitSpec::identity(std::size_t total_classes, std::size_t num_tasks) {
  SplitSpec s;
  s.total_classes = total_classes;
  s.num_tasks = num_tasks;
  s.class_order.resize(total_classes);
  std::iota(s.class_order.begin(), s.class_order.end(), 0);
  return s;
}

SplitSpec SplitSpec::shuffled(std::size_t total_classes, std::size_t num_tasks,
                              std::uint64_t seed) {
  SplitSpec s = identity(total_classes, num_tasks);
  s.seed = seed;
  Rng rng(mix_seed(seed, 0x5011));
  rng.shuffle(s.class_order);
  return s;
}

void SplitSpec::validate() const {
  if (num_tasks == 0 || total_classes == 0) throw ConfigError("split needs classes and tasks");
  if (total_classes % num_tasks != 0) {
    throw ConfigError(std::to_string(total_classes) + " classes do not split evenly into " +
                      std::to_string(num_tasks) + " tasks");
  }
  if (class_order.size() != total_classes) throw ConfigError("class order has wrong length");
  std::vector<int> sorted = class_order;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i] != static_cast<int>(i)) throw ConfigError("class order is not a permutation");
  }
}

int TaskSequence::global_class(int task, int local) const {
  return tasks.at(static_cast<std::size_t>(task)).classes.at(static_cast<std::size_t>(local));
}

std::pair<int, int> TaskSequence::locate(int global) const {
  for (const TaskData& t : tasks) {
    for (std::size_t j = 0; j < t.classes.size(); ++j) {
      if (t.classes[j] == global) return {t.task, static_cast<int>(j)};
    }
  }
  throw LookupError("class " + std::to_string(global) + " belongs to no task");
}

TaskSequence make_splits(const Dataset& data, const SplitSpec& spec) {
  spec.validate();
  const std::size_t c = spec.classes_per_task();
  TaskSequence seq;
  seq.classes_per_task = c;
  std::vector<std::pair<int, int>> owner(spec.total_classes);
  for (std::size_t k = 0; k < spec.num_tasks; ++k) {
    TaskData t;
    t.task = static_cast<int>(k);
    for (std::size_t j = 0; j < c; ++j) {
      const int g = spec.class_order[k * c + j];
      t.classes.push_back(g);
      owner[static_cast<std::size_t>(g)] = {static_cast<int>(k), static_cast<int>(j)};
    }
    seq.tasks.push_back(std::move(t));
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int y = data.labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= spec.total_classes) {
      throw DataError("label " + std::to_string(y) + " outside the " +
                      std::to_string(spec.total_classes) + "-class split");
    }
    auto [k, local] = owner[static_cast<std::size_t>(y)];
    seq.tasks[static_cast<std::size_t>(k)].indices.push_back(i);
    seq.tasks[static_cast<std::size_t>(k)].local_labels.push_back(local);
  }
  return seq;
}

std::vector<std::vector<float>> synth_means(const SyntheticSpec& spec) {
  if (spec.classes == 0 || spec.feature_dim() == 0) throw ConfigError("empty synthetic spec");
  if (!(spec.margin >= 0.0f) || !(spec.noise_sigma >= 0.0f)) {
    throw ConfigError("synthetic margin and noise must be non-negative");
  }
  const std::size_t P = spec.feature_dim();
  float lo = 0.5f - spec.mean_spread, hi = 0.5f + spec.mean_spread;
  if (spec.image_mode() && !(spec.mean_spread > 0.0f && spec.mean_spread <= 0.5f)) {
    throw ConfigError("mean_spread must lie in (0, 0.5]");
  }
  if (!spec.image_mode()) {
    // Box wide enough that `classes` points fit at the requested spacing.
    const double per_axis = std::ceil(std::pow(static_cast<double>(spec.classes), 1.0 / P));
    hi = static_cast<float>(spec.margin * std::max(1.0, per_axis));
    lo = -hi;
  }
  Rng rng(mix_seed(spec.seed, 0x3ea5));
  std::vector<std::vector<float>> means;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      std::vector<float> m(P);
      for (float& v : m) v = rng.uniform(lo, hi);
      placed = std::all_of(means.begin(), means.end(), [&](const std::vector<float>& o) {
        double d2 = 0.0;
        for (std::size_t i = 0; i < P; ++i) d2 += (m[i] - o[i]) * static_cast<double>(m[i] - o[i]);
        return std::sqrt(d2) >= spec.margin;
      });
      if (placed) means.push_back(std::move(m));
    }
    if (!placed) {
      throw DataError("cannot place class mean " + std::to_string(c) + " at margin " +
                      std::to_string(spec.margin) + " after 1000 attempts");
    }
  }
  return means;
}

Dataset synth_clusters(const SyntheticSpec& spec, std::uint64_t stream) {
  const auto means = synth_means(spec);
  Dataset ds;
  if (spec.image_mode()) {
    ds.sample_shape = {spec.channels, spec.image_size, spec.image_size};
  } else {
    ds.sample_shape = {spec.dim};
  }
  Rng rng(mix_seed(mix_seed(spec.seed, 0x5a3e), stream));
  std::vector<float> s(spec.feature_dim());
  // Interleave classes so any prefix is class-balanced.
  for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
    for (std::size_t c = 0; c < spec.classes; ++c) {
      for (std::size_t j = 0; j < s.size(); ++j) {
        float v = means[c][j] + spec.noise_sigma * rng.normal();
        if (spec.image_mode()) v = std::clamp(v, 0.0f, 1.0f);
        s[j] = v;
      }
      ds.append(s, static_cast<int>(c));
    }
  }
  return ds;
}

namespace {

std::uint32_t read_be32(const std::vector<std::uint8_t>& buf, std::size_t off) {
  return (std::uint32_t{buf[off]} << 24) | (std::uint32_t{buf[off + 1]} << 16) |
         (std::uint32_t{buf[off + 2]} << 8) | std::uint32_t{buf[off + 3]};
}

std::size_t idx_elem_size(std::uint8_t dtype) {
  switch (dtype) {
    case 0x08: case 0x09: return 1;
    case 0x0B: return 2;
    case 0x0C: case 0x0D: return 4;
    case 0x0E: return 8;
    default: return 0;
  }
}

}  // namespace

IdxArray read_idx(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open IDX file '" + path + "'");
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  auto fail = [&](std::size_t off, const std::string& msg) {
    return FormatError(path + ": " + msg + " at byte offset " + std::to_string(off));
  };
  if (buf.size() < 4) throw fail(buf.size(), "truncated header");
  if (buf[0] != 0 || buf[1] != 0) throw fail(0, "bad magic");
  IdxArray arr;
  arr.dtype = buf[2];
  const std::size_t esize = idx_elem_size(arr.dtype);
  if (esize == 0) throw fail(2, "unknown dtype byte");
  const std::size_t ndim = buf[3];
  if (ndim == 0) throw fail(3, "zero dimensions");
  if (buf.size() < 4 + 4 * ndim) throw fail(buf.size(), "truncated dimension table");
  std::size_t count = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    arr.dims.push_back(read_be32(buf, 4 + 4 * i));
    count *= arr.dims.back();
  }
  const std::size_t start = 4 + 4 * ndim;
  const std::size_t need = count * esize;
  if (buf.size() - start < need) {
    throw fail(buf.size(), "truncated payload (expected " + std::to_string(need) + " bytes)");
  }
  if (buf.size() - start > need) throw fail(start + need, "trailing bytes after payload");
  arr.payload.assign(buf.begin() + static_cast<std::ptrdiff_t>(start), buf.end());
  return arr;
}

Dataset idx_load(const std::string& images_path, const std::string& labels_path) {
  IdxArray images = read_idx(images_path);
  IdxArray labels = read_idx(labels_path);
  if (images.dtype != 0x08) throw FormatError(images_path + ": images must be u8 (dtype 0x08) at byte offset 2");
  if (labels.dtype != 0x08) throw FormatError(labels_path + ": labels must be u8 (dtype 0x08) at byte offset 2");
  if (labels.dims.size() != 1) throw FormatError(labels_path + ": labels must be 1-D at byte offset 3");
  if (images.dims.size() != 3 && images.dims.size() != 4) {
    throw FormatError(images_path + ": images must be 3-D or 4-D at byte offset 3");
  }
  const std::size_t n = images.dims[0];
  if (labels.dims[0] != n) {
    throw FormatError(labels_path + ": " + std::to_string(labels.dims[0]) + " labels for " +
                      std::to_string(n) + " images at byte offset 4");
  }
  Dataset ds;
  if (images.dims.size() == 3) {
    ds.sample_shape = {1, images.dims[1], images.dims[2]};
  } else {
    ds.sample_shape = {images.dims[1], images.dims[2], images.dims[3]};
  }
  ds.values.resize(images.payload.size());
  for (std::size_t i = 0; i < images.payload.size(); ++i) {
    ds.values[i] = static_cast<float>(images.payload[i]) / 255.0f;
  }
  ds.labels.assign(labels.payload.begin(), labels.payload.end());
  return ds;
}

std::vector<std::vector<float>> event_templates(const EventSpec& spec) {
  if (spec.classes == 0 || spec.channels < spec.classes) {
    throw ConfigError("event data needs at least one channel per class");
  }
  const std::size_t group = spec.channels / spec.classes;
  std::vector<std::vector<float>> t(spec.classes, std::vector<float>(spec.channels, spec.rate_off));
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t j = c * group; j < (c + 1) * group; ++j) t[c][j] = spec.rate_on;
  }
  return t;
}

Dataset synth_events(const EventSpec& spec, std::uint64_t stream) {
  if (spec.timesteps < 2) throw ConfigError("event data needs T >= 2");
  const auto templates = event_templates(spec);
  Dataset ds;
  ds.temporal = true;
  ds.sample_shape = {spec.timesteps, spec.channels};
  Rng rng(mix_seed(mix_seed(spec.seed, 0xe7e7), stream));
  std::vector<float> s(spec.timesteps * spec.channels);
  for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
    for (std::size_t c = 0; c < spec.classes; ++c) {
      for (std::size_t t = 0; t < spec.timesteps; ++t)
        for (std::size_t j = 0; j < spec.channels; ++j)
          s[t * spec.channels + j] = rng.uniform() < templates[c][j] ? 1.0f : 0.0f;
      ds.append(s, static_cast<int>(c));
    }
  }
  return ds;
}

}  // namespace catf
