#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "data.hpp"
#include "error.hpp"

using namespace catf;

namespace {

std::vector<int> nearest_centroid(const Dataset& train, const Dataset& test, std::size_t classes) {
  const std::size_t d = train.sample_numel();
  std::vector<std::vector<double>> mu(classes, std::vector<double>(d, 0.0));
  std::vector<double> n(classes, 0.0);
  for (std::size_t i = 0; i < train.size(); ++i) {
    auto s = train.sample(i);
    for (std::size_t j = 0; j < d; ++j) mu[train.labels[i]][j] += s[j];
    n[train.labels[i]] += 1;
  }
  for (std::size_t c = 0; c < classes; ++c)
    for (double& v : mu[c]) v /= n[c];
  std::vector<int> pred;
  for (std::size_t i = 0; i < test.size(); ++i) {
    auto s = test.sample(i);
    double best = 1e300;
    int arg = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      double dist = 0;
      for (std::size_t j = 0; j < d; ++j) dist += (s[j] - mu[c][j]) * (s[j] - mu[c][j]);
      if (dist < best) best = dist, arg = static_cast<int>(c);
    }
    pred.push_back(arg);
  }
  return pred;
}

double accuracy(const std::vector<int>& pred, const std::vector<int>& labels) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == labels[i];
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

std::string write_bytes(const std::string& name, const std::vector<std::uint8_t>& bytes) {
  const std::string path = ::testing::TempDir() + "/" + name;
  std::ofstream(path, std::ios::binary)
      .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  return path;
}

std::vector<std::uint8_t> idx_images(std::uint32_t n, std::uint32_t h, std::uint32_t w) {
  std::vector<std::uint8_t> b = {0, 0, 8, 3};
  for (std::uint32_t d : {n, h, w})
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(d >> s));
  for (std::uint32_t i = 0; i < n * h * w; ++i) b.push_back(static_cast<std::uint8_t>(i * 37));
  return b;
}

std::vector<std::uint8_t> idx_labels(const std::vector<std::uint8_t>& ys) {
  std::vector<std::uint8_t> b = {0, 0, 8, 1, 0, 0, 0, static_cast<std::uint8_t>(ys.size())};
  b.insert(b.end(), ys.begin(), ys.end());
  return b;
}

Dataset labels_only(std::size_t classes, std::size_t per) {
  Dataset d;
  d.sample_shape = {1};
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per; ++i) {
      const float v = 0.0f;
      d.append({&v, 1}, static_cast<int>(c));
    }
  return d;
}

}  // namespace

TEST(Splits, TenClassesFiveTasks) {
  TaskSequence seq = make_splits(labels_only(10, 3), SplitSpec::identity(10, 5));
  ASSERT_EQ(seq.size(), 5u);
  for (int k = 0; k < 5; ++k) {
    EXPECT_EQ(seq.tasks[k].classes, (std::vector<int>{2 * k, 2 * k + 1}));
    EXPECT_EQ(seq.tasks[k].indices.size(), 6u);
  }
  TaskSequence one = make_splits(labels_only(10, 1), SplitSpec::identity(10, 10));
  for (int k = 0; k < 10; ++k) EXPECT_EQ(one.tasks[k].classes, std::vector<int>{k});
  EXPECT_THROW(make_splits(labels_only(10, 1), SplitSpec::identity(10, 3)), ConfigError);
}

TEST(Splits, PartitionProperty) {
  for (std::size_t classes : {4, 6, 12, 20})
    for (std::size_t tasks = 1; tasks <= classes; ++tasks) {
      if (classes % tasks) continue;
      const Dataset d = labels_only(classes, 2);
      TaskSequence seq = make_splits(d, SplitSpec::shuffled(classes, tasks, classes * 31 + tasks));
      std::set<int> seen;
      std::size_t total = 0;
      for (const auto& t : seq.tasks) {
        for (int c : t.classes) EXPECT_TRUE(seen.insert(c).second);
        for (std::size_t j = 0; j < t.indices.size(); ++j) {
          EXPECT_EQ(t.classes[t.local_labels[j]], d.labels[t.indices[j]]);
          EXPECT_EQ(seq.locate(d.labels[t.indices[j]]),
                    (std::pair<int, int>{t.task, t.local_labels[j]}));
        }
        total += t.indices.size();
      }
      EXPECT_EQ(seen.size(), classes);
      EXPECT_EQ(total, d.size());
    }
}

TEST(Splits, OrderValidation) {
  SplitSpec s = SplitSpec::identity(4, 2);
  s.class_order = {0, 1, 1, 3};
  EXPECT_THROW(s.validate(), ConfigError);
  s.class_order = {0, 1, 2};
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Synthetic, SeparablePresetNearestCentroid) {
  SyntheticSpec s;
  s.classes = 10;
  s.dim = 16;
  s.margin = 8.0f;
  s.noise_sigma = 1.0f;
  s.seed = 5;
  const Dataset train = synth_clusters(s, 0), test = synth_clusters(s, 1);
  EXPECT_GE(accuracy(nearest_centroid(train, test, 10), test.labels), 0.99);
  const auto means = synth_means(s);
  for (std::size_t a = 0; a < means.size(); ++a)
    for (std::size_t b = a + 1; b < means.size(); ++b) {
      double d = 0;
      for (std::size_t j = 0; j < s.dim; ++j) d += (means[a][j] - means[b][j]) * (means[a][j] - means[b][j]);
      EXPECT_GE(std::sqrt(d), 8.0 - 1e-4);
    }
}

TEST(Synthetic, ImagePresetSeparableAndInRange) {
  SyntheticSpec s;
  s.classes = 10;
  s.image_size = 16;
  s.margin = 0.8f;
  s.noise_sigma = 0.1f;
  s.seed = 7;
  const Dataset train = synth_clusters(s, 0), test = synth_clusters(s, 1);
  EXPECT_EQ(train.sample_shape, (Shape{1, 16, 16}));
  for (float v : train.values) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_GE(accuracy(nearest_centroid(train, test, 10), test.labels), 0.99);
}

TEST(Synthetic, ZeroNoiseAndDeterminism) {
  SyntheticSpec s;
  s.classes = 3;
  s.noise_sigma = 0.0f;
  s.samples_per_class = 4;
  const Dataset d = synth_clusters(s);
  const auto means = synth_means(s);
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto x = d.sample(i);
    EXPECT_EQ(std::vector<float>(x.begin(), x.end()), means[d.labels[i]]);
  }
  s.noise_sigma = 1.0f;
  EXPECT_EQ(synth_clusters(s).values, synth_clusters(s).values);
  EXPECT_NE(synth_clusters(s, 0).values, synth_clusters(s, 1).values);
}

TEST(Synthetic, ImpossibleMarginFails) {
  SyntheticSpec s;
  s.classes = 10;
  s.image_size = 2;
  s.margin = 50.0f;
  EXPECT_THROW(synth_clusters(s), DataError);
  s.margin = 0.5f;
  s.mean_spread = 0.7f;
  EXPECT_THROW(synth_clusters(s), ConfigError);
}

TEST(Idx, HeaderArithmeticAndScaling) {
  auto img = idx_images(2, 3, 3);
  img[4 + 12] = 255;
  img[4 + 12 + 1] = 0;
  const std::string ip = write_bytes("imgs.idx", img);
  const std::string lp = write_bytes("labs.idx", idx_labels({1, 0}));
  IdxArray a = read_idx(ip);
  EXPECT_EQ(a.dtype, 0x08);
  EXPECT_EQ(a.dims, (std::vector<std::uint32_t>{2, 3, 3}));
  Dataset d = idx_load(ip, lp);
  EXPECT_EQ(d.size(), 2u);
  EXPECT_EQ(d.sample_shape, (Shape{1, 3, 3}));
  EXPECT_EQ(d.values[0], 1.0f);
  EXPECT_EQ(d.values[1], 0.0f);
  EXPECT_FLOAT_EQ(d.values[2], 74.0f / 255.0f);
  EXPECT_EQ(d.labels, (std::vector<int>{1, 0}));
}

TEST(Idx, MalformedFilesReportOffsets) {
  auto img = idx_images(2, 3, 3);
  auto cut = img;
  cut.resize(cut.size() - 5);
  try {
    read_idx(write_bytes("cut.idx", cut));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
  }
  auto bad = img;
  bad[0] = 1;
  EXPECT_THROW(read_idx(write_bytes("bad.idx", bad)), FormatError);
  EXPECT_THROW(read_idx(write_bytes("tiny.idx", {0, 0})), FormatError);
  EXPECT_THROW(idx_load(write_bytes("i.idx", img), write_bytes("l.idx", idx_labels({1, 0, 1}))),
               FormatError);
  EXPECT_THROW(read_idx(::testing::TempDir() + "/missing.idx"), DataError);
}

TEST(Events, BinaryReproducibleAndSeparable) {
  EventSpec s;
  s.classes = 5;
  s.timesteps = 8;
  s.channels = 40;
  s.samples_per_class = 40;
  s.seed = 3;
  const Dataset d = synth_events(s);
  EXPECT_TRUE(d.temporal);
  EXPECT_EQ(d.sample_shape, (Shape{8, 40}));
  for (float v : d.values) EXPECT_TRUE(v == 0.0f || v == 1.0f);
  EXPECT_EQ(synth_events(s).values, d.values);
  const auto templates = event_templates(s);
  for (std::size_t a = 0; a < templates.size(); ++a)
    for (std::size_t b = a + 1; b < templates.size(); ++b)
      for (std::size_t c = 0; c < s.channels; ++c)
        EXPECT_FALSE(templates[a][c] == s.rate_on && templates[b][c] == s.rate_on);
  // Nearest template on the per-channel mean profile.
  std::size_t ok = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto x = d.sample(i);
    std::vector<double> prof(s.channels, 0.0);
    for (std::size_t t = 0; t < s.timesteps; ++t)
      for (std::size_t c = 0; c < s.channels; ++c) prof[c] += x[t * s.channels + c] / 8.0;
    double best = 1e300;
    int arg = 0;
    for (std::size_t k = 0; k < templates.size(); ++k) {
      double dist = 0;
      for (std::size_t c = 0; c < s.channels; ++c)
        dist += (prof[c] - templates[k][c]) * (prof[c] - templates[k][c]);
      if (dist < best) best = dist, arg = static_cast<int>(k);
    }
    ok += arg == d.labels[i];
  }
  EXPECT_GE(static_cast<double>(ok) / d.size(), 0.99);
  s.timesteps = 1;
  EXPECT_THROW(synth_events(s), ConfigError);
}
