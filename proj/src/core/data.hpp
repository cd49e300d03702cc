#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace catf {

// Labeled samples stored back to back. Image samples are [C x H x W] in
// [0, 1]; temporal samples (event frames) are [T x C x H x W] in {0, 1}.
struct Dataset {
  Shape sample_shape;
  std::vector<float> values;
  std::vector<int> labels;
  bool temporal = false;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_numel() const { return shape_numel(sample_shape); }
  std::span<const float> sample(std::size_t i) const;
  void append(std::span<const float> sample, int label);
};

struct SplitSpec {
  std::size_t total_classes = 10;
  std::size_t num_tasks = 5;
  std::vector<int> class_order;  // permutation of 0..total_classes-1
  std::uint64_t seed = 0;

  static SplitSpec identity(std::size_t total_classes, std::size_t num_tasks);
  static SplitSpec shuffled(std::size_t total_classes, std::size_t num_tasks, std::uint64_t seed);
  void validate() const;
  std::size_t classes_per_task() const { return total_classes / num_tasks; }
};

struct TaskData {
  int task = 0;
  std::vector<int> classes;         // global class id of each local label
  std::vector<std::size_t> indices; // samples of this task in the source dataset
  std::vector<int> local_labels;    // parallel to indices
};

struct TaskSequence {
  std::vector<TaskData> tasks;
  std::size_t classes_per_task = 0;

  std::size_t size() const { return tasks.size(); }
  int global_class(int task, int local) const;
  // Task owning a global class and its local label; throws for unknown classes.
  std::pair<int, int> locate(int global_class) const;
};

TaskSequence make_splits(const Dataset& data, const SplitSpec& spec);

struct SyntheticSpec {
  std::size_t classes = 10;
  // Vector mode when image_size == 0: samples are [dim]. Image mode renders
  // samples as [channels x image_size x image_size] clipped to [0, 1].
  std::size_t dim = 16;
  std::size_t channels = 1;
  std::size_t image_size = 0;
  float margin = 8.0f;
  float noise_sigma = 1.0f;
  // Image mode: class means are drawn from [0.5 - spread, 0.5 + spread].
  float mean_spread = 0.5f;
  std::size_t samples_per_class = 100;
  std::uint64_t seed = 0;

  bool image_mode() const { return image_size > 0; }
  std::size_t feature_dim() const {
    return image_mode() ? channels * image_size * image_size : dim;
  }
};

// Class means with pairwise distance >= margin (depend only on spec.seed).
std::vector<std::vector<float>> synth_means(const SyntheticSpec& spec);
// Gaussian clusters around synth_means; `stream` selects independent draws
// (e.g. 0 for train, 1 for test) around the same means.
Dataset synth_clusters(const SyntheticSpec& spec, std::uint64_t stream = 0);

struct IdxArray {
  std::uint8_t dtype = 0;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;
};

IdxArray read_idx(const std::string& path);
// Images scaled by 1/255 into [0, 1]; labels paired from the companion file.
Dataset idx_load(const std::string& images_path, const std::string& labels_path);

struct EventSpec {
  std::size_t classes = 10;
  std::size_t timesteps = 8;
  std::size_t channels = 64;
  std::size_t samples_per_class = 50;
  float rate_on = 0.8f;
  float rate_off = 0.05f;
  std::uint64_t seed = 0;
};

// Per-class channel-rate template: rate_on on the class's own contiguous
// channel group, rate_off elsewhere. Groups do not overlap.
std::vector<std::vector<float>> event_templates(const EventSpec& spec);
// Bernoulli spike trains [T x channels] per sample.
Dataset synth_events(const EventSpec& spec, std::uint64_t stream = 0);

}  // namespace catf
