#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "catformer/catformer.h"

namespace fs = std::filesystem;

namespace {

const char* kTiny =
    "model.timesteps = 2\nmodel.embed_dim = 16\nmodel.num_blocks = 1\nmodel.num_heads = 2\n"
    "model.image_size = 8\ndata.samples_per_class = 20\ndata.test_per_class = 10\n"
    "split.total_classes = 4\nsplit.num_tasks = 2\ntrain.epochs_task0 = 2\n"
    "train.epochs_taskk = 1\ntrain.epochs_gate = 3\n";

std::string scratch(const std::string& name) {
  const fs::path p = fs::path(::testing::TempDir()) / ("catf_capi_" + name);
  fs::remove_all(p);
  return p.string();
}

std::string tiny_file() {
  const std::string path = scratch("tiny.cfg");
  std::ofstream(path) << kTiny;
  return path;
}

int cli(const std::string& args) {
  const std::string cmd = std::string(CATF_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

struct Cfg {
  catf_config* c = nullptr;
  Cfg() { EXPECT_EQ(catf_config_new(&c), CATF_OK); }
  ~Cfg() { catf_config_free(c); }
};

}  // namespace

TEST(CApi, ConfigRoundTripAndErrors) {
  Cfg cfg;
  char buf[64];
  size_t len = 0;
  ASSERT_EQ(catf_config_get(cfg.c, "model.embed_dim", buf, sizeof buf, &len), CATF_OK);
  EXPECT_STREQ(buf, "64");
  EXPECT_EQ(len, 2u);
  EXPECT_EQ(catf_config_set(cfg.c, "model.embed_dim", "16"), CATF_OK);
  EXPECT_EQ(catf_config_set(cfg.c, "nope", "1"), CATF_ERR_CONFIG);
  EXPECT_NE(std::string(catf_last_error()).find("nope"), std::string::npos);
  EXPECT_EQ(catf_config_load(cfg.c, "/nonexistent/x.cfg"), CATF_ERR_CONFIG);
  EXPECT_EQ(catf_config_get(cfg.c, nullptr, nullptr, 0, &len), CATF_OK);
  EXPECT_GT(len, 100u);
  EXPECT_EQ(catf_config_set(nullptr, "a", "b"), CATF_ERR_INTERNAL);
  EXPECT_STRNE(catf_version(), "");
}

TEST(CApi, TrainEvalClassify) {
  Cfg cfg;
  ASSERT_EQ(catf_config_load(cfg.c, tiny_file().c_str()), CATF_OK);
  const std::string out = scratch("run");
  ASSERT_EQ(catf_config_set(cfg.c, "run.out_dir", out.c_str()), CATF_OK);
  ASSERT_EQ(catf_train(cfg.c), CATF_OK) << catf_last_error();
  const std::string ck = out + "/ckpt_task1.catf";
  catf_eval_result r{};
  ASSERT_EQ(catf_eval(cfg.c, ck.c_str(), &r), CATF_OK) << catf_last_error();
  EXPECT_EQ(r.num_tasks, 2u);
  EXPECT_EQ(r.samples, 40u);
  EXPECT_LE(r.overall_acc, r.routing_acc);
  EXPECT_LE(r.overall_acc, r.oracle_acc);

  catf_model* m = nullptr;
  ASSERT_EQ(catf_model_load(ck.c_str(), &m), CATF_OK) << catf_last_error();
  size_t tasks = 0, cpt = 0, n = 0;
  ASSERT_EQ(catf_model_info(m, &tasks, &cpt, &n), CATF_OK);
  EXPECT_EQ(tasks, 2u);
  EXPECT_EQ(cpt, 2u);
  EXPECT_EQ(n, 64u);
  std::vector<float> x(n, 0.5f);
  int task = -1, cls = -1;
  EXPECT_EQ(catf_model_classify(m, x.data(), n, &task, &cls), CATF_OK);
  EXPECT_GE(task, 0);
  EXPECT_LT(task, 2);
  EXPECT_EQ(cls / 2, task);
  EXPECT_EQ(catf_model_classify(m, x.data(), n - 1, &task, &cls), CATF_ERR_DATA);
  catf_model_free(m);
  EXPECT_EQ(catf_model_load((out + "/config.resolved").c_str(), &m), CATF_ERR_CHECKPOINT);

  const std::string metrics = out + "/metrics.jsonl";
  const char* paths[] = {metrics.c_str()};
  const std::string csv = scratch("report.csv");
  EXPECT_EQ(catf_report(paths, 1, csv.c_str()), CATF_OK);
  std::ifstream in(csv);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "num_tasks,overall_acc,routing_acc,oracle_acc,bank_bytes,runs");
  EXPECT_EQ(row.substr(0, 2), "2,");
}

TEST(Cli, ExitCodes) {
  const std::string cfg = tiny_file();
  const std::string out = scratch("cli");
  EXPECT_EQ(cli("train --config " + cfg + " --run.out_dir " + out), 0);
  const std::string ck = out + "/ckpt_task1.catf";
  EXPECT_TRUE(fs::exists(ck));
  EXPECT_TRUE(fs::exists(out + "/ckpt_task0.catf"));
  EXPECT_EQ(cli("eval --checkpoint " + ck + " --run.out_dir=" + out), 0);
  EXPECT_EQ(cli("report " + out + "/metrics.jsonl --out " + scratch("r.csv")), 0);

  EXPECT_EQ(cli("train --config " + cfg + " --model.nonsense 3"), 2);
  EXPECT_EQ(cli("train --config " + cfg + " --run.out_dir"), 2);
  EXPECT_EQ(cli("frobnicate"), 2);
  EXPECT_EQ(cli("ablate --config " + cfg + " --variant bogus --run.out_dir " + scratch("ab")), 2);
  EXPECT_EQ(cli("train --config " + cfg + " --data.source idx --data.train_images /nonexistent "
                "--data.train_labels /nonexistent --data.test_images /nonexistent "
                "--data.test_labels /nonexistent --run.out_dir " + scratch("idx")),
            3);
  EXPECT_EQ(cli("train --config " + cfg + " --test.corrupt_frozen_at_task 1 --run.out_dir " +
                scratch("corrupt")),
            4);
  const std::string junk = scratch("junk.catf");
  std::ofstream(junk) << "not a checkpoint";
  EXPECT_EQ(cli("eval --checkpoint " + junk), 5);
  const std::string bad_metrics = scratch("bad.jsonl");
  std::ofstream(bad_metrics) << "{\"event\":\"epoch\",\"wall_ms\":1,\"seed\":0}\n{oops\n";
  EXPECT_EQ(cli("report " + bad_metrics), 6);
}

TEST(Cli, EnvOverridesOutputDir) {
  const std::string cfg = tiny_file();
  const std::string out = scratch("env");
  const std::string cmd = "CATF_OUT=" + out + " " + CATF_CLI_PATH + " train --config " + cfg +
                          " --run.out_dir " + scratch("ignored") + " >/dev/null 2>&1";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_TRUE(fs::exists(out + "/ckpt_task1.catf"));
  EXPECT_FALSE(fs::exists(scratch("ignored") + "/ckpt_task1.catf"));
}
