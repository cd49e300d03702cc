#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

#include "checksum.hpp"
#include "cil.hpp"
#include "error.hpp"
#include "test_util.hpp"

using namespace catf;
using catf::testing::easy_images;
using catf::testing::quick_train;
using catf::testing::tiny_model;

namespace {

// Sets up thresholds and head for task k the way the protocol does.
void prepare(Model& m, int k, Rng& rng) {
  m.bank.clone_thresholds(TaskRef::base(), k);
  m.heads.add(k, m.config.embed_dim, m.classes_per_task, rng);
}

void finalize(Model& m, int k) {
  m.bank.finalize(k);
  m.heads.finalize(k);
}

struct Bench {
  Dataset train = easy_images(4, 60, 8, 0);
  TaskSequence seq = make_splits(train, SplitSpec::identity(4, 2));
  Model model{tiny_model(), 2, 1};
  Rng rng{5};
};

}  // namespace

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.lr_head = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.threshold_min = 2;
  c.threshold_max = 1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(HeadBank, XavierInitAndFinalize) {
  HeadBank hb;
  Rng rng(3);
  Head& h = hb.add(0, 64, 2, rng);
  const float a = std::sqrt(6.0f / 66.0f);
  EXPECT_EQ(h.weight.shape, (Shape{64, 2}));
  float lo = 1, hi = -1;
  for (float w : h.weight.data) {
    EXPECT_LE(std::abs(w), a);
    lo = std::min(lo, w), hi = std::max(hi, w);
  }
  EXPECT_LT(lo, -0.5f * a);
  EXPECT_GT(hi, 0.5f * a);
  for (float b : h.bias.data) EXPECT_EQ(b, 0.0f);
  hb.finalize(0);
  EXPECT_TRUE(hb.is_finalized(0));
  EXPECT_THROW(hb.get(3), LookupError);
}

TEST(GatingMLP, WidthGrowthKeepsOldColumns) {
  Rng rng(4);
  GatingMLP g(64, rng);
  EXPECT_EQ(g.hidden(), 16u);
  EXPECT_EQ(g.width(), 0u);
  g.grow_to(1, rng);
  EXPECT_EQ(g.width(), 1u);
  const GatingMLP before = g;
  g.grow_to(3, rng);
  EXPECT_EQ(g.width(), 3u);
  EXPECT_EQ(g.w2.shape, (Shape{16, 3}));
  EXPECT_EQ(g.w1.data, before.w1.data);
  for (std::size_t r = 0; r < 16; ++r) EXPECT_EQ(g.w2.data[r * 3], before.w2.data[r]);
  EXPECT_EQ(g.b2.data[0], before.b2.data[0]);
  EXPECT_THROW(g.grow_to(2, rng), ConfigError);
  EXPECT_THROW(GatingMLP(30, rng), ConfigError);
}

TEST(FeatureBuffer, CapAndFlags) {
  FeatureBuffer buf(100);
  std::size_t accepted = 0;
  for (int i = 0; i < 500; ++i) accepted += buf.add({float(i)}, 0, true);
  EXPECT_EQ(accepted, 100u);
  EXPECT_EQ(buf.count(0), 100u);
  for (int i = 0; i < 5; ++i) buf.add({-1.0f}, 1, true);
  EXPECT_EQ(buf.count(1), 5u);
  EXPECT_EQ(buf.entries()[0].feature[0], 0.0f);
}

TEST(Harvest, CappedBaseFeaturesAppendOnly) {
  Bench s;
  s.model.bank.clone_thresholds(TaskRef::base(), 0);
  s.model.bank.set_active(TaskRef::task(0));
  FeatureBuffer buf(50);
  harvest_features(s.model, s.train, s.seq.tasks[0], buf);
  EXPECT_EQ(buf.count(0), 50u);
  const auto snapshot = buf.entries();
  harvest_features(s.model, s.train, s.seq.tasks[1], buf);
  EXPECT_EQ(buf.count(1), 50u);
  for (std::size_t i = 0; i < snapshot.size(); ++i) {
    EXPECT_EQ(buf.entries()[i].feature, snapshot[i].feature);
    EXPECT_EQ(buf.entries()[i].task, 0);
  }
  for (const auto& e : buf.entries()) {
    EXPECT_TRUE(e.base_thresholds);
    EXPECT_EQ(e.feature.size(), 16u);
  }
  // Harvesting restores the previously active thresholds.
  EXPECT_EQ(s.model.bank.active(), TaskRef::task(0));
}

TEST(TrainTask0, LearnsSeparableTask) {
  Bench s;
  prepare(s.model, 0, s.rng);
  float last_acc = 0;
  train_task0(s.model, s.train, s.seq.tasks[0], quick_train(20), s.rng,
              [&](const EpochStats& st) { last_acc = st.acc; });
  EXPECT_GE(last_acc, 0.95f);
}

TEST(TrainTask0, ZeroLearningRateLeavesParams) {
  Bench s;
  prepare(s.model, 0, s.rng);
  const std::string before = group_digest(s.model, "backbone");
  const std::string th = group_digest(s.model, "thresholds/0");
  TrainConfig c = quick_train(2);
  c.lr_backbone = c.lr_head = c.lr_threshold = 0.0f;
  // Train-mode norm statistics still move; weights must not.
  train_task0(s.model, s.train, s.seq.tasks[0], c, s.rng);
  std::vector<const Tensor*> weights;
  Model fresh(tiny_model(), 2, 1);
  for (std::size_t i = 0; i < fresh.backbone.params().size(); ++i) {
    const auto& a = fresh.backbone.params().entries()[i];
    if (a.kind == ParamKind::kWeight) {
      EXPECT_EQ(a.tensor->data, s.model.backbone.params().entries()[i].tensor->data) << a.name;
    }
  }
  EXPECT_EQ(group_digest(s.model, "thresholds/0"), th);
  (void)before;
}

TEST(TrainTask0, DeterministicGivenSeed) {
  auto run = [] {
    Bench s;
    prepare(s.model, 0, s.rng);
    train_task0(s.model, s.train, s.seq.tasks[0], quick_train(2), s.rng);
    return group_digest(s.model, "backbone") + group_digest(s.model, "heads/0") +
           group_digest(s.model, "thresholds/0");
  };
  EXPECT_EQ(run(), run());
}

TEST(TrainTaskK, FreezesBackboneAndCountsParams) {
  Bench s;
  prepare(s.model, 0, s.rng);
  const TrainConfig c = quick_train(3, 15);
  EXPECT_THROW(train_task_k(s.model, s.train, s.seq.tasks[1], c, s.rng), ProtocolError);
  train_task0(s.model, s.train, s.seq.tasks[0], c, s.rng);
  prepare(s.model, 1, s.rng);
  EXPECT_THROW(train_task_k(s.model, s.train, s.seq.tasks[1], c, s.rng), ProtocolError);
  finalize(s.model, 0);
  FreezeReferences refs;
  record_finalization(s.model, 0, refs);

  const ParamCount pc = count_parameters(s.model, Phase::kTaskK, 1, c);
  const std::size_t entries = analytic_threshold_entries(s.model.config);
  EXPECT_EQ(pc.trainable, 16u * 2 + 2 + entries);
  EXPECT_EQ(pc.bank_bytes, 4 * entries);
  std::size_t enumerated = 0;
  for (const auto& g : optimizer_groups(s.model, Phase::kTaskK, 1, c))
    for (const Tensor* t : g.tensors) enumerated += t->numel();
  EXPECT_EQ(enumerated, pc.trainable);

  const std::vector<float> phi_before = s.model.bank.thresholds(1).data;
  float acc = 0;
  train_task_k(s.model, s.train, s.seq.tasks[1], c, s.rng,
               [&](const EpochStats& st) {
                 acc = st.acc;
                 EXPECT_EQ(st.trainable, pc.trainable);
               });
  EXPECT_GE(acc, 0.9f);
  EXPECT_TRUE(freeze_check(s.model, refs).all_pass());
  EXPECT_NE(s.model.bank.thresholds(1).data, phi_before);
  for (float v : s.model.bank.thresholds(1).data) {
    EXPECT_GE(v, c.threshold_min);
    EXPECT_LE(v, c.threshold_max);
  }
}

TEST(TrainTaskK, FixedThresholdVariantTrainsHeadOnly) {
  Bench s;
  TrainConfig c = quick_train(2, 2);
  c.fixed_threshold = true;
  prepare(s.model, 0, s.rng);
  train_task0(s.model, s.train, s.seq.tasks[0], c, s.rng);
  finalize(s.model, 0);
  prepare(s.model, 1, s.rng);
  train_task_k(s.model, s.train, s.seq.tasks[1], c, s.rng);
  for (float v : s.model.bank.thresholds(1).data) EXPECT_EQ(v, 0.5f);
  for (float v : s.model.bank.thresholds(0).data) EXPECT_EQ(v, 0.5f);
  EXPECT_EQ(count_parameters(s.model, Phase::kTaskK, 1, c).trainable, 16u * 2 + 2);
}

TEST(FreezeCheck, DetectsOneUlpPerturbation) {
  Bench s;
  prepare(s.model, 0, s.rng);
  finalize(s.model, 0);
  FreezeReferences refs;
  record_finalization(s.model, 0, refs);
  EXPECT_TRUE(freeze_check(s.model, refs).all_pass());
  float& w = s.model.backbone.params().entries()[0].tensor->data[3];
  const float keep = w;
  w += 1e-7f * std::max(1.0f, std::abs(w)) + std::nextafter(w, 1e9f) - w;
  const FreezeReport r = freeze_check(s.model, refs);
  EXPECT_FALSE(r.all_pass());
  for (const auto& g : r.groups) EXPECT_EQ(g.pass, g.name != "backbone") << g.name;
  w = keep;
  s.model.bank.thresholds(0).data[0] = std::nextafter(0.5f, 1.0f);
  EXPECT_FALSE(freeze_check(s.model, refs).all_pass());
}

TEST(CountParameters, PaperScaleBank) {
  // A 16,032-entry bank at 4 bytes per entry.
  ThresholdBank bank(0.5f);
  bank.add_layer("all", 16032);
  EXPECT_EQ(bank.bytes_per_task(), 64128u);
  EXPECT_LE(bank.bytes_per_task(), 64200u);
  ThresholdBank desk(0.5f);
  for (int i = 0; i < 3; ++i) desk.add_layer("l" + std::to_string(i), 64);
  EXPECT_EQ(desk.bytes_per_task(), 768u);
}

TEST(CountParameters, GatePhase) {
  Bench s;
  s.model.gate.grow_to(2, s.rng);
  const ParamCount pc = count_parameters(s.model, Phase::kGate, 1, TrainConfig{});
  EXPECT_EQ(pc.trainable, 16u * 4 + 4 + 4 * 2 + 2);
  EXPECT_EQ(pc.trainable, s.model.gate.param_count());
}

TEST(Gating, SingleTaskIsTrivial) {
  Rng rng(2);
  GatingMLP g(16, rng);
  g.grow_to(1, rng);
  FeatureBuffer buf;
  for (int i = 0; i < 20; ++i) buf.add(std::vector<float>(16, 0.1f * i), 0, true);
  EXPECT_EQ(train_gating(g, buf, quick_train(), rng).acc, 1.0f);
  GatingMLP narrow(16, rng);
  EXPECT_THROW(train_gating(narrow, buf, quick_train(), rng), ConfigError);
}

TEST(Gating, SeparatesTwoTasksAndIsOrderRobust) {
  Bench s;
  // Gate features come from the task-0 backbone, as in the protocol.
  prepare(s.model, 0, s.rng);
  train_task0(s.model, s.train, s.seq.tasks[0], quick_train(10), s.rng);
  finalize(s.model, 0);
  const Dataset test = easy_images(4, 40, 8, 1);
  const TaskSequence tseq = make_splits(test, SplitSpec::identity(4, 2));
  FeatureBuffer train_buf(200), test_buf(200);
  for (int k = 0; k < 2; ++k) {
    harvest_features(s.model, s.train, s.seq.tasks[k], train_buf);
    harvest_features(s.model, test, tseq.tasks[k], test_buf);
  }
  auto held_out = [&](GatingMLP& g) {
    std::size_t ok = 0;
    for (const auto& e : test_buf.entries()) {
      Tape tape;
      const auto& z = tape.value(g.forward(tape, tape.constant(Tensor({1, 16}, e.feature)))).data;
      ok += static_cast<int>(argmax(z)) == e.task;
    }
    return static_cast<double>(ok) / test_buf.size();
  };
  std::vector<double> accs;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    GatingMLP g(16, rng);
    g.grow_to(2, rng);
    TrainConfig c = quick_train(1, 1, 60);
    c.lr_gate = 0.2f;
    train_gating(g, train_buf, c, rng);
    accs.push_back(held_out(g));
    EXPECT_GE(accs.back(), 0.9);
  }
  const auto [lo, hi] = std::minmax_element(accs.begin(), accs.end());
  EXPECT_LE(*hi - *lo, 0.02);
}

TEST(Protocol, TinyRunInvariants) {
  Bench s;
  std::vector<int> done;
  ProtocolHooks hooks;
  hooks.after_task = [&](int k, Model& m) {
    done.push_back(k);
    EXPECT_EQ(m.gate.width(), static_cast<std::size_t>(k) + 1);
    EXPECT_EQ(m.gate_history.size(), static_cast<std::size_t>(k) + 1);
    EXPECT_TRUE(m.bank.is_finalized(k));
  };
  hooks.on_task_done = [&](int k, std::size_t trainable, std::size_t bank_bytes) {
    const std::size_t e = analytic_threshold_entries(s.model.config);
    if (k > 0) {
      EXPECT_EQ(trainable, 16u * 2 + 2 + e);
    }
    EXPECT_EQ(bank_bytes, 4 * e);
  };
  run_protocol(s.model, s.train, s.seq, quick_train(2, 2, 5), hooks);
  EXPECT_EQ(done, (std::vector<int>{0, 1}));
  EXPECT_EQ(s.model.finalized_tasks(), 2u);
}

TEST(Protocol, CorruptionBeforeFreezeCheckThrows) {
  Bench s;
  ProtocolHooks hooks;
  hooks.before_freeze_check = [](int k, Model& m) {
    if (k == 1) {
      float& w = m.backbone.params().entries()[0].tensor->data[0];
      w = std::nextafter(w, 1e9f);
    }
  };
  EXPECT_THROW(run_protocol(s.model, s.train, s.seq, quick_train(1, 1, 2), hooks), InvariantError);
}

TEST(Protocol, MismatchedSplitRejected) {
  Bench s;
  const TaskSequence wrong = make_splits(s.train, SplitSpec::identity(4, 4));
  EXPECT_THROW(run_protocol(s.model, s.train, wrong, quick_train(1, 1, 1)), ConfigError);
}
