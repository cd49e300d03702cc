#include <CLI11.hpp>

#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "catformer/catformer.h"

namespace {

struct ConfigHandle {
  catf_config* cfg = nullptr;
  ~ConfigHandle() { catf_config_free(cfg); }
};

int fail(catf_status st) {
  std::fprintf(stderr, "catformer: %s\n", catf_last_error());
  return static_cast<int>(st);
}

// Leftover `--dotted.key value` / `--dotted.key=value` arguments.
bool parse_overrides(const std::vector<std::string>& extras,
                     std::vector<std::pair<std::string, std::string>>& out, std::string& err) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0 || a.size() < 3) {
      err = "unexpected argument '" + a + "'";
      return false;
    }
    const std::string body = a.substr(2);
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
    } else if (i + 1 < extras.size()) {
      out.emplace_back(body, extras[++i]);
    } else {
      err = "missing value for '" + a + "'";
      return false;
    }
  }
  return true;
}

catf_status build_config(ConfigHandle& h, const std::string& file,
                         const std::vector<std::pair<std::string, std::string>>& overrides) {
  catf_status st = catf_config_new(&h.cfg);
  if (st != CATF_OK) return st;
  if (!file.empty() && (st = catf_config_load(h.cfg, file.c_str())) != CATF_OK) return st;
  for (const auto& [k, v] : overrides) {
    if ((st = catf_config_set(h.cfg, k.c_str(), v.c_str())) != CATF_OK) return st;
  }
  return catf_config_apply_env(h.cfg);
}

void print_eval(const catf_eval_result& r) {
  std::printf("tasks %zu  samples %zu  overall %.4f  routing %.4f  oracle %.4f  bank_bytes %zu\n",
              r.num_tasks, r.samples, r.overall_acc, r.routing_acc, r.oracle_acc, r.bank_bytes);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-incremental spiking transformer with per-task firing thresholds"};
  app.require_subcommand(1);
  std::string config_file, checkpoint, variant, out_csv = "-";
  std::vector<std::string> metrics_files;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "key = value config file");
    sub->allow_extras();
  };
  CLI::App* train = app.add_subcommand("train", "run the incremental training protocol");
  add_config(train);
  CLI::App* eval = app.add_subcommand("eval", "routed and oracle evaluation of a checkpoint");
  add_config(eval);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  CLI::App* ablate = app.add_subcommand("ablate", "train and evaluate an ablation variant");
  add_config(ablate);
  ablate->add_option("--variant", variant, "fixed_threshold|identity|random|ffn_frozen|full")
      ->required();
  CLI::App* report = app.add_subcommand("report", "merge eval summaries into a CSV table");
  report->add_option("metrics", metrics_files, "metrics.jsonl files")->required();
  report->add_option("--out", out_csv, "output CSV path ('-' for stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(CATF_ERR_CONFIG);
  }

  if (report->parsed()) {
    std::vector<const char*> paths;
    for (const auto& p : metrics_files) paths.push_back(p.c_str());
    const catf_status st = catf_report(paths.data(), paths.size(), out_csv.c_str());
    return st == CATF_OK ? 0 : fail(st);
  }

  CLI::App* sub = train->parsed() ? train : eval->parsed() ? eval : ablate;
  std::vector<std::pair<std::string, std::string>> overrides;
  std::string err;
  if (!parse_overrides(sub->remaining(), overrides, err)) {
    std::fprintf(stderr, "catformer: %s\n", err.c_str());
    return static_cast<int>(CATF_ERR_CONFIG);
  }
  ConfigHandle h;
  catf_status st = build_config(h, config_file, overrides);
  if (st != CATF_OK) return fail(st);

  catf_eval_result r{};
  if (sub == train) {
    st = catf_train(h.cfg);
  } else if (sub == eval) {
    st = catf_eval(h.cfg, checkpoint.c_str(), &r);
  } else {
    st = catf_ablate(h.cfg, variant.c_str(), &r);
  }
  if (st != CATF_OK) return fail(st);
  if (sub != train) print_eval(r);
  return 0;
}
