#include "catformer/catformer.h"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <new>
#include <string>
#include <vector>

#include "error.hpp"
#include "runner.hpp"

struct catf_config {
  catf::RunConfig cfg;
};

struct catf_model {
  catf::Model model;
  catf::TaskSequence seq;
  catf::Shape sample_shape;
  bool temporal = false;
};

namespace {

thread_local std::string g_last_error;

template <typename F>
catf_status guard(F&& f) {
  try {
    g_last_error.clear();
    f();
    return CATF_OK;
  } catch (const catf::Error& e) {
    g_last_error = e.what();
    return static_cast<catf_status>(e.code());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
  } catch (const std::exception& e) {
    g_last_error = e.what();
  } catch (...) {
    g_last_error = "unknown error";
  }
  return CATF_ERR_INTERNAL;
}

void need(const void* p, const char* what) {
  if (!p) throw catf::ContractError(std::string(what) + " must not be NULL");
}

catf_eval_result to_result(const catf::EvalSummary& s) {
  catf_eval_result r;
  r.num_tasks = s.metrics.num_tasks;
  r.samples = s.metrics.samples;
  r.overall_acc = s.metrics.overall_acc();
  r.routing_acc = s.metrics.routing_acc();
  r.oracle_acc = s.metrics.oracle_acc();
  r.bank_bytes = s.bank_bytes;
  return r;
}

}  // namespace

extern "C" {

const char* catf_version(void) { return "0.1.0"; }

const char* catf_last_error(void) { return g_last_error.c_str(); }

catf_status catf_config_new(catf_config** out) {
  return guard([&] {
    need(out, "out");
    *out = new catf_config();
  });
}

void catf_config_free(catf_config* cfg) { delete cfg; }

catf_status catf_config_load(catf_config* cfg, const char* path) {
  return guard([&] {
    need(cfg, "cfg");
    need(path, "path");
    cfg->cfg.merge_file(path);
  });
}

catf_status catf_config_set(catf_config* cfg, const char* key, const char* value) {
  return guard([&] {
    need(cfg, "cfg");
    need(key, "key");
    need(value, "value");
    cfg->cfg.set(key, value);
  });
}

catf_status catf_config_apply_env(catf_config* cfg) {
  return guard([&] {
    need(cfg, "cfg");
    if (const char* env = std::getenv("CATF_OUT"); env && *env) cfg->cfg.set("run.out_dir", env);
  });
}

catf_status catf_config_get(const catf_config* cfg, const char* key, char* buf, size_t cap,
                            size_t* len) {
  return guard([&] {
    need(cfg, "cfg");
    const std::string v = key ? cfg->cfg.get(key) : cfg->cfg.to_text();
    if (len) *len = v.size();
    if (buf && cap > 0) {
      const std::size_t n = std::min(cap - 1, v.size());
      std::memcpy(buf, v.data(), n);
      buf[n] = '\0';
    }
  });
}

catf_status catf_train(const catf_config* cfg) {
  return guard([&] {
    need(cfg, "cfg");
    catf::cmd_train(cfg->cfg);
  });
}

catf_status catf_eval(const catf_config* cfg, const char* checkpoint, catf_eval_result* out) {
  return guard([&] {
    need(cfg, "cfg");
    need(checkpoint, "checkpoint");
    const auto s = catf::cmd_eval(checkpoint, cfg->cfg);
    if (out) *out = to_result(s);
  });
}

catf_status catf_ablate(const catf_config* cfg, const char* variant, catf_eval_result* out) {
  return guard([&] {
    need(cfg, "cfg");
    need(variant, "variant");
    const auto s = catf::cmd_ablate(cfg->cfg, variant);
    if (out) *out = to_result(s);
  });
}

catf_status catf_report(const char* const* metrics_paths, size_t count, const char* out_csv) {
  return guard([&] {
    if (count > 0) need(metrics_paths, "metrics_paths");
    std::vector<std::string> paths;
    for (std::size_t i = 0; i < count; ++i) {
      need(metrics_paths[i], "metrics path");
      paths.emplace_back(metrics_paths[i]);
    }
    const bool to_stdout = !out_csv || std::strcmp(out_csv, "-") == 0;
    const auto rows = catf::cmd_report(paths, to_stdout ? "" : out_csv);
    if (to_stdout) std::fputs(catf::write_report_csv(rows).c_str(), stdout);
  });
}

catf_status catf_model_load(const char* checkpoint, catf_model** out) {
  return guard([&] {
    need(checkpoint, "checkpoint");
    need(out, "out");
    const auto c = catf::decode_container(catf::read_file(checkpoint));
    catf::RunConfig cfg;
    auto ck = catf::container_to_model(c, [&](const std::string& text) {
      cfg.merge_text(text, std::string(checkpoint) + ":config");
      return catf::make_model(cfg);
    });
    auto m = std::make_unique<catf_model>();
    m->model = std::move(ck.model);
    catf::SplitSpec spec = cfg.split();
    spec.class_order = ck.class_order;
    m->seq = catf::make_splits(catf::Dataset{}, spec);
    const auto& mc = m->model.config;
    m->temporal = cfg.data_source() == "events";
    m->sample_shape = m->temporal
                          ? catf::Shape{mc.timesteps, mc.in_channels * mc.image_size * mc.image_size}
                          : catf::Shape{mc.in_channels, mc.image_size, mc.image_size};
    *out = m.release();
  });
}

void catf_model_free(catf_model* model) { delete model; }

catf_status catf_model_info(const catf_model* model, size_t* num_tasks, size_t* classes_per_task,
                            size_t* sample_len) {
  return guard([&] {
    need(model, "model");
    if (num_tasks) *num_tasks = model->model.finalized_tasks();
    if (classes_per_task) *classes_per_task = model->model.classes_per_task;
    if (sample_len) *sample_len = catf::shape_numel(model->sample_shape);
  });
}

catf_status catf_model_classify(catf_model* model, const float* sample, size_t sample_len,
                                int* task, int* global_class) {
  return guard([&] {
    need(model, "model");
    need(sample, "sample");
    catf::Dataset d;
    d.sample_shape = model->sample_shape;
    d.temporal = model->temporal;
    if (sample_len != d.sample_numel()) {
      throw catf::DataError("sample has " + std::to_string(sample_len) + " values, expected " +
                            std::to_string(d.sample_numel()));
    }
    d.append({sample, sample_len}, 0);
    const auto p = catf::classify(model->model, model->seq, d, 0);
    if (task) *task = p.predicted_task;
    if (global_class) *global_class = p.predicted_class;
  });
}

}  // extern "C"
