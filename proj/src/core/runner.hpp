#pragma once

#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "config.hpp"
#include "metrics.hpp"
#include "router.hpp"

namespace catf {

struct RunData {
  Dataset train;
  Dataset test;
  SplitSpec split;
  TaskSequence train_seq;
  TaskSequence test_seq;
};

RunData load_data(const RunConfig& cfg);
Model make_model(const RunConfig& cfg);

std::string checkpoint_path(const std::string& out_dir, int task);

// Exclusive ownership of an output directory for the lifetime of the object.
class OutDirLock {
 public:
  explicit OutDirLock(const std::string& out_dir);
  ~OutDirLock();
  OutDirLock(const OutDirLock&) = delete;
  OutDirLock& operator=(const OutDirLock&) = delete;

 private:
  std::string path_;
};

struct TrainSummary {
  std::string out_dir;
  std::vector<std::string> checkpoints;
};

struct EvalSummary {
  CilMetrics metrics;
  ForgettingProfile profile;
  std::size_t bank_bytes = 0;
};

TrainSummary cmd_train(const RunConfig& cfg);
// Model architecture and split come from the checkpoint's config echo;
// keys explicitly set in `cfg` override the rest (data paths, out_dir).
EvalSummary cmd_eval(const std::string& checkpoint, const RunConfig& cfg);
// Applies the variant to the config, trains, then evaluates the last checkpoint.
EvalSummary cmd_ablate(const RunConfig& cfg, const std::string& variant);
std::vector<ReportRow> cmd_report(const std::vector<std::string>& metrics_paths,
                                  const std::string& out_csv);

RunConfig apply_variant(RunConfig cfg, const std::string& variant);

}  // namespace catf
