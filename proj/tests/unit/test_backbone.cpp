#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "backbone.hpp"
#include "error.hpp"
#include "test_util.hpp"

using namespace catf;
using catf::testing::finite_diff;
using catf::testing::random_tensor;
using catf::testing::rel_error;
using catf::testing::tiny_model;

namespace {

struct Net {
  Backbone bb;
  ThresholdBank bank{0.5f};
  explicit Net(const ModelConfig& cfg, std::uint64_t seed = 1) {
    Rng rng(seed);
    bb = Backbone(cfg, rng);
    bb.declare_layers(bank);
  }
};

Tensor random_image(const ModelConfig& cfg, Rng& rng) {
  return random_tensor({cfg.in_channels, cfg.image_size, cfg.image_size}, rng, 0.0f, 1.0f);
}

}  // namespace

TEST(EncodeInput, Replicates) {
  Tensor x({1, 2, 2}, 0.5f);
  Tensor e = encode_input(x, 4);
  EXPECT_EQ(e.shape, (Shape{4, 1, 2, 2}));
  for (float v : e.data) EXPECT_EQ(v, 0.5f);
  Tensor y({1, 2, 2}, {0.1f, 0.2f, 0.3f, 0.9f});
  EXPECT_EQ(encode_input(y, 1).data, y.data);
  const Tensor e3 = encode_input(y, 3);
  EXPECT_FLOAT_EQ(std::accumulate(e3.data.begin(), e3.data.end(), 0.0f),
                  3 * std::accumulate(y.data.begin(), y.data.end(), 0.0f));
  EXPECT_THROW(encode_input(Tensor({1, 1, 1}, 1.5f), 2), DomainError);
}

TEST(PatchEmbed, TokenCountAndBadSizes) {
  ModelConfig c = tiny_model();
  EXPECT_EQ(c.tokens(), 4u);
  c.image_size = 10;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_model();
  c.num_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_model();
  c.embed_dim = 18;
  c.num_heads = 2;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(PatchEmbed, ZeroImageGivesNoSpikes) {
  for (auto mode : {MixerMode::kSpikingAttention, MixerMode::kIdentity}) {
    Net n(tiny_model(mode));
    Tensor f = backbone_forward(n.bb, n.bank, Tensor({1, 8, 8}, 0.0f));
    for (float v : f.data) EXPECT_EQ(v, 0.0f);
  }
}

TEST(PatchEmbed, BinaryOutput) {
  Net n(tiny_model());
  Rng rng(2);
  Tensor frames = encode_input(random_image(n.bb.config(), rng), 2);
  frames.shape.insert(frames.shape.begin() + 1, 1);
  Tape tape;
  Var phi = bind_thresholds(tape, n.bank);
  BackboneRun run(tape, n.bb, n.bank, phi, 1, {});
  const Tensor& s = tape.value(run.patch_embed(frames));
  EXPECT_EQ(s.shape, (Shape{2 * 4, 16}));
  for (float v : s.data) EXPECT_TRUE(v == 0.0f || v == 1.0f);
}

TEST(Attention, ZeroQueryAnnihilates) {
  Rng rng(3);
  Tape tape;
  Var q = tape.constant(Tensor({2 * 3, 4}, 0.0f));
  Var k = tape.constant(random_tensor({6, 4}, rng));
  Var v = tape.constant(random_tensor({6, 4}, rng));
  for (float x : tape.value(attention_core(tape, q, k, v, 2, 3, 2, 0.125f)).data) EXPECT_EQ(x, 0.0f);
}

TEST(Attention, SingleTokenClosedForm) {
  Tape tape;
  Tensor q({1, 4}, {1, 0, 1, 1}), k({1, 4}, {1, 1, 0, 1}), v({1, 4}, {0.5f, 2, 3, -1});
  const auto& out = tape.value(attention_core(tape, tape.constant(q), tape.constant(k),
                                              tape.constant(v), 1, 1, 2, 0.125f))
                        .data;
  // head 0: q.k = 1, head 1: q.k = 1
  const std::vector<float> want = {0.0625f, 0.25f, 0.375f, -0.125f};
  for (int i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(out[i], want[i]);
}

TEST(Attention, PermutationEquivariant) {
  Rng rng(6);
  const std::size_t N = 5, D = 4;
  Tensor q = random_tensor({N, D}, rng), k = random_tensor({N, D}, rng), v = random_tensor({N, D}, rng);
  const std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
  auto permute = [&](const Tensor& t) {
    Tensor p(t.shape);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t d = 0; d < D; ++d) p.data[i * D + d] = t.data[perm[i] * D + d];
    return p;
  };
  Tape tape;
  const Tensor out = tape.value(attention_core(tape, tape.constant(q), tape.constant(k),
                                               tape.constant(v), 1, N, 2, 0.125f));
  const Tensor pout = tape.value(attention_core(tape, tape.constant(permute(q)),
                                                tape.constant(permute(k)),
                                                tape.constant(permute(v)), 1, N, 2, 0.125f));
  const Tensor want = permute(out);
  for (std::size_t i = 0; i < want.numel(); ++i) EXPECT_NEAR(pout.data[i], want.data[i], 1e-5f);
}

TEST(Mixer, IdentityPassesThrough) {
  Net n(tiny_model(MixerMode::kIdentity));
  Rng rng(4);
  Tensor s({2 * 4, 16});
  for (float& v : s.data) v = rng.uniform() < 0.3f ? 1.0f : 0.0f;
  Tape tape;
  Var phi = bind_thresholds(tape, n.bank);
  BackboneRun run(tape, n.bb, n.bank, phi, 1, {});
  Var in = tape.constant(s);
  EXPECT_EQ(tape.value(run.mixer_dispatch(in, 0)).data, s.data);
}

TEST(Mixer, RandomIsSeededAndUniform) {
  ModelConfig c = tiny_model(MixerMode::kRandom);
  c.mixer_seed = 99;
  Net n(c);
  const std::size_t B = 80;
  std::vector<std::uint64_t> keys(B);
  std::iota(keys.begin(), keys.end(), 1000);
  auto draw = [&] {
    Tape tape;
    Var phi = bind_thresholds(tape, n.bank);
    ForwardOptions o;
    o.noise_keys = keys;
    BackboneRun run(tape, n.bb, n.bank, phi, B, o);
    return tape.value(run.mixer_dispatch(tape.constant(Tensor({2 * B * 4, 16})), 0)).data;
  };
  const auto a = draw(), b = draw();
  EXPECT_EQ(a, b);
  ASSERT_GE(a.size(), 10000u);
  double mean = 0;
  for (float v : a) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LT(v, 1.0f);
    mean += v;
  }
  mean /= static_cast<double>(a.size());
  EXPECT_GE(mean, 0.45);
  EXPECT_LE(mean, 0.55);
}

TEST(Mixer, RandomNeedsKeys) {
  Net n(tiny_model(MixerMode::kRandom));
  Tape tape;
  Var phi = bind_thresholds(tape, n.bank);
  BackboneRun run(tape, n.bb, n.bank, phi, 1, {});
  EXPECT_THROW(run.mixer_dispatch(tape.constant(Tensor({8, 16})), 0), ContractError);
}

TEST(BackboneForward, FeaturesInUnitRangeAndDeterministic) {
  Net n(tiny_model());
  Rng rng(7);
  for (int i = 0; i < 5; ++i) {
    Tensor x = random_image(n.bb.config(), rng);
    Tensor f = backbone_forward(n.bb, n.bank, x);
    EXPECT_EQ(f.numel(), 16u);
    for (float v : f.data) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
    EXPECT_EQ(backbone_forward(n.bb, n.bank, x).data, f.data);
  }
}

TEST(BackboneForward, ThresholdChoiceChangesFeatures) {
  Net n(tiny_model());
  n.bank.clone_thresholds(TaskRef::base(), 0);
  for (float& v : n.bank.thresholds(0).data) v = 0.2f;
  Rng rng(8);
  bool differs = false;
  for (int i = 0; i < 10 && !differs; ++i) {
    Tensor x = random_image(n.bb.config(), rng);
    n.bank.set_active(TaskRef::base());
    Tensor fb = backbone_forward(n.bb, n.bank, x);
    n.bank.set_active(TaskRef::task(0));
    differs = backbone_forward(n.bb, n.bank, x).data != fb.data;
  }
  EXPECT_TRUE(differs);
}

TEST(BackboneForward, PureUnderInterleaving) {
  Net n(tiny_model());
  Rng rng(9);
  std::vector<Tensor> xs;
  for (int i = 0; i < 4; ++i) xs.push_back(random_image(n.bb.config(), rng));
  std::vector<std::vector<float>> isolated;
  for (const auto& x : xs) {
    Net fresh(tiny_model());
    isolated.push_back(backbone_forward(fresh.bb, fresh.bank, x).data);
  }
  for (int round = 0; round < 3; ++round)
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const std::size_t j = (i * 3 + round) % xs.size();
      EXPECT_EQ(backbone_forward(n.bb, n.bank, xs[j]).data, isolated[j]);
    }
}

TEST(BackboneForward, BatchedMatchesSingle) {
  Net n(tiny_model());
  Rng rng(10);
  const Tensor a = random_image(n.bb.config(), rng), b = random_image(n.bb.config(), rng);
  Tensor batch({2, 1, 8, 8});
  std::copy(a.data.begin(), a.data.end(), batch.data.begin());
  std::copy(b.data.begin(), b.data.end(), batch.data.begin() + 64);
  Tensor frames = encode_input(batch, 2);
  Tape tape;
  const Tensor f = tape.value(backbone_forward(tape, n.bb, n.bank, frames));
  const auto fa = backbone_forward(n.bb, n.bank, a).data;
  const auto fb = backbone_forward(n.bb, n.bank, b).data;
  EXPECT_EQ(std::vector<float>(f.data.begin(), f.data.begin() + 16), fa);
  EXPECT_EQ(std::vector<float>(f.data.begin() + 16, f.data.end()), fb);
}

TEST(Backbone, ParamCountFormula) {
  std::vector<ModelConfig> cfgs;
  ModelConfig c = tiny_model();
  cfgs.push_back(c);
  c.num_blocks = 3;
  c.embed_dim = 24;
  c.num_heads = 3;
  cfgs.push_back(c);
  c = ModelConfig{};
  cfgs.push_back(c);
  c.mixer_mode = MixerMode::kIdentity;
  c.in_channels = 3;
  c.patch_size = 2;
  cfgs.push_back(c);
  c = tiny_model(MixerMode::kRandom);
  c.ffn_ratio = 3;
  c.image_size = 12;
  cfgs.push_back(c);
  for (const auto& cfg : cfgs) {
    Net n(cfg);
    std::size_t weights = 0, buffers = 0;
    for (const auto& e : n.bb.params().entries())
      (e.kind == ParamKind::kWeight ? weights : buffers) += e.tensor->numel();
    EXPECT_EQ(weights, analytic_backbone_params(cfg));
    EXPECT_EQ(buffers, analytic_backbone_buffers(cfg));
    std::size_t channels = 0;
    for (const auto& l : n.bank.layers()) channels += l.channels;
    EXPECT_EQ(n.bank.entries_per_task(), analytic_threshold_entries(cfg));
    EXPECT_EQ(channels, analytic_threshold_entries(cfg));
  }
  // Default desk model: 64 + 2 * (128 + 64 + 5 * 64) entries, 4 bytes each.
  EXPECT_EQ(analytic_threshold_entries(ModelConfig{}), 1088u);
}

TEST(Backbone, FfnFrozenExcludesFfnWeights) {
  ModelConfig c = tiny_model();
  c.ffn_trainable = false;
  Net n(c);
  for (Tensor* t : n.bb.trainable_tensors()) {
    for (const auto& e : n.bb.params().entries()) {
      if (e.tensor.get() == t) EXPECT_FALSE(n.bb.is_ffn_param(e.name)) << e.name;
    }
  }
}

TEST(HeadForward, Examples) {
  Tape tape;
  Tensor W({3, 2}, {1, 2, 3, 4, 5, 6}), b({2}, {0.5f, -1});
  EXPECT_EQ(tape.value(head_forward(tape, tape.constant(Tensor({1, 3}, 0.0f)), tape.constant(W),
                                    tape.constant(b)))
                .data,
            b.data);
  Tensor I({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor f({1, 3}, {0.25f, 0.5f, 0.75f});
  EXPECT_EQ(tape.value(head_forward(tape, tape.constant(f), tape.constant(I),
                                    tape.constant(Tensor({3}, 0.0f))))
                .data,
            f.data);
  EXPECT_THROW(head_forward(tape, tape.constant(f), tape.constant(W),
                            tape.constant(Tensor({3}, 0.0f))),
               DimensionError);
}

TEST(HeadForward, RelaxedGradientMatchesFiniteDifferences) {
  Net n(tiny_model());
  Rng rng(12);
  Tensor batch = random_tensor({3, 1, 8, 8}, rng, 0, 1);
  Tensor frames = encode_input(batch, 2);
  Tensor W = random_tensor({16, 3}, rng), b({3}, 0.0f);
  W.requires_grad = b.requires_grad = true;
  const std::vector<int> y = {0, 2, 1};
  auto loss = [&](bool grad) {
    Tape tape(SpikeMode::kRelaxed);
    Var f = backbone_forward(tape, n.bb, n.bank, frames);
    Var l = cross_entropy(tape, head_forward(tape, f, tape.param(W), tape.param(b)), y);
    if (grad) tape.backward(l);
    return static_cast<double>(tape.value(l).data[0]);
  };
  loss(true);
  const auto gw = W.grad;
  EXPECT_LT(rel_error(gw, finite_diff(W, [&] { return loss(false); }, 1e-3)), 1e-2);
}
