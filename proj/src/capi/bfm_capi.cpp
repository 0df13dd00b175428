#include "bfm/bfm.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <new>
#include <string>

#include <json.hpp>

#include "config.hpp"
#include "corpus.hpp"
#include "error.hpp"
#include "evaluation.hpp"
#include "report.hpp"
#include "training.hpp"

struct bfm_manifest {
  bfm::corpus::CaseManifest m;
};

struct bfm_volume {
  bfm::corpus::RawVolume v;
};

struct bfm_checkpoint {
  bfm::training::Checkpoint c;
};

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using bfm::ErrorCode;

thread_local std::string g_last_error;

bfm_status record(ErrorCode code, const std::string& msg) {
  g_last_error = msg;
  return static_cast<bfm_status>(code);
}

template <typename Fn>
bfm_status guard(Fn&& fn) {
  g_last_error.clear();
  try {
    fn();
    return BFM_OK;
  } catch (const bfm::Error& e) {
    return record(e.code(), e.what());
  } catch (const json::parse_error& e) {
    return record(ErrorCode::ConfigError, std::string("ConfigError: ") + e.what());
  } catch (const json::exception& e) {
    return record(ErrorCode::FormatError, std::string("FormatError: ") + e.what());
  } catch (const fs::filesystem_error& e) {
    return record(ErrorCode::IoError, std::string("IoError: ") + e.what());
  } catch (const std::bad_alloc&) {
    return record(ErrorCode::Internal, "Internal: out of memory");
  } catch (const std::exception& e) {
    return record(ErrorCode::Internal, std::string("Internal: ") + e.what());
  } catch (...) {
    return record(ErrorCode::Internal, "Internal: unknown exception");
  }
}

void require(const void* p, const char* what) {
  if (!p) bfm::fail(ErrorCode::InvalidArgument, std::string(what) + " must not be null");
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

json parse_config_text(const char* text) {
  if (!text || !*text) return json::object();
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    bfm::fail(ErrorCode::ConfigError, std::string("config is not valid JSON: ") + e.what());
  }
}

bfm::RunConfig config_from(const char* text) {
  auto cfg = bfm::run_config_from_json(parse_config_text(text));
  cfg.validate();
  return cfg;
}

std::unique_ptr<bfm::training::CaseProvider> provider_for(const bfm::RunConfig& cfg,
                                                          const char* manifest_path) {
  if (manifest_path && *manifest_path)
    return bfm::training::manifest_provider(bfm::corpus::load_manifest(manifest_path));
  return bfm::training::synthetic_provider(cfg);
}

std::vector<bfm::evaluation::AvailabilityConfig> matrix_from(const char* matrix) {
  const std::string m = matrix ? matrix : "default";
  if (m.empty() || m == "default") return bfm::evaluation::default_availability();
  std::ifstream f(m);
  if (!f) bfm::fail(ErrorCode::IoError, "cannot open availability matrix " + m);
  json doc;
  try {
    doc = json::parse(f);
  } catch (const json::parse_error& e) {
    bfm::fail(ErrorCode::ConfigError, std::string("availability matrix: ") + e.what());
  }
  if (!doc.is_array()) bfm::fail(ErrorCode::ConfigError, "availability matrix must be a list");
  std::vector<bfm::evaluation::AvailabilityConfig> out;
  for (const auto& row : doc) {
    bfm::evaluation::AvailabilityConfig c;
    try {
      c.name = row.at("name").get<std::string>();
      for (const auto& name : row.at("available")) c.available.insert(name.get<std::string>());
    } catch (const json::exception& e) {
      bfm::fail(ErrorCode::ConfigError, std::string("availability matrix row: ") + e.what());
    }
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace

extern "C" {

const char* bfm_last_error(void) { return g_last_error.c_str(); }

const char* bfm_status_name(int status) {
  return bfm::error_code_name(static_cast<ErrorCode>(status));
}

const char* bfm_version(void) { return "0.1.0"; }

void bfm_string_free(char* s) { std::free(s); }

bfm_status bfm_config_resolve(const char* base_json, const char* overrides_json, char** out_json) {
  return guard([&] {
    require(out_json, "out_json");
    auto cfg = bfm::run_config_from_json(parse_config_text(base_json));
    cfg = bfm::merge_config(cfg, parse_config_text(overrides_json));
    cfg.validate();
    *out_json = dup(bfm::to_json(cfg).dump(2));
  });
}

bfm_status bfm_config_tiny(char** out_json) {
  return guard([&] {
    require(out_json, "out_json");
    *out_json = dup(bfm::to_json(bfm::tiny_config()).dump(2));
  });
}

bfm_status bfm_scan_corpus(const char* root, bfm_manifest** out) {
  return guard([&] {
    require(root, "root");
    require(out, "out");
    *out = new bfm_manifest{bfm::corpus::scan_corpus(root)};
  });
}

bfm_status bfm_manifest_load(const char* path, bfm_manifest** out) {
  return guard([&] {
    require(path, "path");
    require(out, "out");
    *out = new bfm_manifest{bfm::corpus::load_manifest(path)};
  });
}

bfm_status bfm_manifest_save(const bfm_manifest* m, const char* path) {
  return guard([&] {
    require(m, "manifest");
    require(path, "path");
    bfm::corpus::save_manifest(m->m, path);
  });
}

size_t bfm_manifest_case_count(const bfm_manifest* m) { return m ? m->m.entries.size() : 0; }

bfm_status bfm_manifest_to_json(const bfm_manifest* m, char** out_json) {
  return guard([&] {
    require(m, "manifest");
    require(out_json, "out_json");
    json j = json::object();
    for (const auto& [id, mods] : m->m.entries) j[id] = mods;
    *out_json = dup(j.dump(2));
  });
}

void bfm_manifest_free(bfm_manifest* m) { delete m; }

bfm_status bfm_volume_read(const char* path, bfm_volume** out) {
  return guard([&] {
    require(path, "path");
    require(out, "out");
    *out = new bfm_volume{bfm::corpus::read_volume(path)};
  });
}

bfm_status bfm_volume_create(const int dims[3], const double spacing[3], const float* voxels,
                             bfm_volume** out) {
  return guard([&] {
    require(dims, "dims");
    require(out, "out");
    auto v = std::make_unique<bfm_volume>();
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 1) bfm::fail(ErrorCode::ShapeError, "volume dims must be positive");
      v->v.dims[a] = dims[a];
      v->v.spacing[a] = spacing ? spacing[a] : 1.0;
    }
    const std::size_t n = bfm::corpus::voxel_count(v->v.dims);
    v->v.voxels.assign(n, 0.0f);
    if (voxels) std::memcpy(v->v.voxels.data(), voxels, n * sizeof(float));
    *out = v.release();
  });
}

bfm_status bfm_volume_write(const bfm_volume* v, const char* path) {
  return guard([&] {
    require(v, "volume");
    require(path, "path");
    bfm::corpus::write_volume(v->v, path);
  });
}

void bfm_volume_dims(const bfm_volume* v, int dims[3]) {
  if (!v || !dims) return;
  for (int a = 0; a < 3; ++a) dims[a] = v->v.dims[a];
}

void bfm_volume_spacing(const bfm_volume* v, double spacing[3]) {
  if (!v || !spacing) return;
  for (int a = 0; a < 3; ++a) spacing[a] = v->v.spacing[a];
}

const float* bfm_volume_data(const bfm_volume* v) { return v ? v->v.voxels.data() : nullptr; }

void bfm_volume_free(bfm_volume* v) { delete v; }

bfm_status bfm_checkpoint_load(const char* path, bfm_checkpoint** out) {
  return guard([&] {
    require(path, "path");
    require(out, "out");
    *out = new bfm_checkpoint{bfm::training::load_checkpoint(path)};
  });
}

bfm_status bfm_checkpoint_save(const bfm_checkpoint* c, const char* path) {
  return guard([&] {
    require(c, "checkpoint");
    require(path, "path");
    bfm::training::save_checkpoint(c->c, path);
  });
}

bfm_status bfm_checkpoint_info(const bfm_checkpoint* c, char** out_json) {
  return guard([&] {
    require(c, "checkpoint");
    require(out_json, "out_json");
    const json j = {{"task", c->c.task},
                    {"step", c->c.step},
                    {"epoch", c->c.epoch},
                    {"config", bfm::to_json(c->c.config)},
                    {"extra", c->c.extra},
                    {"tensors", c->c.params.tensor_count()},
                    {"parameters", c->c.params.total_size()}};
    *out_json = dup(j.dump(2));
  });
}

void bfm_checkpoint_free(bfm_checkpoint* c) { delete c; }

bfm_status bfm_synth_corpus(const char* config_json, const char* out_dir, bfm_manifest** out) {
  return guard([&] {
    require(out_dir, "out_dir");
    const auto cfg = config_from(config_json);
    auto m = bfm::training::write_synthetic_corpus(cfg, out_dir);
    bfm::corpus::save_manifest(m, fs::path(out_dir) / "manifest.json");
    if (out) *out = new bfm_manifest{std::move(m)};
  });
}

bfm_status bfm_pretrain(const char* config_json, const char* manifest_path,
                        const char* resume_checkpoint, const char* out_dir, bfm_checkpoint** out) {
  return guard([&] {
    const auto cfg = config_from(config_json);
    const auto data = provider_for(cfg, manifest_path);
    std::optional<bfm::training::Checkpoint> init;
    if (resume_checkpoint && *resume_checkpoint)
      init = bfm::training::load_checkpoint(resume_checkpoint);
    bfm::training::RunOutputs outputs;
    if (out_dir) outputs.dir = out_dir;
    auto res = bfm::training::pretrain_loop(cfg, *data, init, outputs);
    if (out) *out = new bfm_checkpoint{std::move(res.checkpoint)};
  });
}

bfm_status bfm_gradcheck(const char* config_json, char** report_json) {
  return guard([&] {
    const auto cfg = config_from(config_json);
    const auto r = bfm::training::run_gradcheck(cfg);
    if (report_json) {
      const json j = {{"max_rel_error", r.max_rel_error},
                      {"checked", r.checked},
                      {"passed", r.passed},
                      {"tol", cfg.gradcheck_tol},
                      {"per_tensor", r.per_tensor}};
      *report_json = dup(j.dump(2));
    }
  });
}

bfm_status bfm_finetune(const char* config_json, const char* manifest_path,
                        const char* init_checkpoint, const char* out_dir, bfm_checkpoint** out) {
  return guard([&] {
    require(init_checkpoint, "init_checkpoint");
    const auto cfg = config_from(config_json);
    const auto init = bfm::training::load_checkpoint(init_checkpoint);
    const auto data = provider_for(cfg, manifest_path);
    const std::size_t n = data->size();
    const auto n_val = static_cast<std::size_t>(std::max(cfg.val_cases, 0));
    const std::size_t split = n > n_val ? n - n_val : n;
    const auto train = bfm::training::slice_provider(*data, 0, split);
    const auto val = bfm::training::slice_provider(*data, split, n);
    bfm::training::RunOutputs outputs;
    if (out_dir) outputs.dir = out_dir;
    auto res = bfm::training::finetune(cfg, bfm::training::parse_task(cfg.task), init, *train,
                                       *val, outputs);
    if (out) *out = new bfm_checkpoint{std::move(res.checkpoint)};
  });
}

bfm_status bfm_evaluate(const char* checkpoint_path, const char* manifest_path, const char* matrix,
                        const char* task, int threads, char** csv_out, char** log_json) {
  return guard([&] {
    require(checkpoint_path, "checkpoint_path");
    const auto ck = bfm::training::load_checkpoint(checkpoint_path);
    const auto t = bfm::training::parse_task(task && *task ? task : ck.task);
    const auto configs = matrix_from(matrix);
    const auto data = provider_for(ck.config, manifest_path);
    const auto report =
        bfm::evaluation::availability_matrix_eval(ck, *data, configs, t, std::max(threads, 1));
    if (csv_out) *csv_out = dup(bfm::evaluation::metric_rows_csv(report.rows));
    if (log_json) *log_json = dup(json{{"skipped", report.skipped}}.dump(2));
  });
}

bfm_status bfm_impute(const char* checkpoint_path, const char* manifest_path, const char* case_id,
                      const char* target_modality, const char* out_path, char** report_json) {
  return guard([&] {
    require(checkpoint_path, "checkpoint_path");
    require(case_id, "case_id");
    require(target_modality, "target_modality");
    const auto ck = bfm::training::load_checkpoint(checkpoint_path);
    bfm::corpus::Session session;
    if (manifest_path && *manifest_path) {
      session = bfm::corpus::load_session(bfm::corpus::load_manifest(manifest_path), case_id);
    } else {
      const auto data = bfm::training::synthetic_provider(ck.config);
      bool found = false;
      for (std::size_t i = 0; i < data->size() && !found; ++i)
        if (data->case_id(i) == case_id) {
          session = data->load(i).session;
          found = true;
        }
      if (!found) bfm::fail(ErrorCode::NotFound, std::string("unknown case '") + case_id + "'");
    }
    const auto r = bfm::evaluation::impute_modality(ck, session, target_modality);
    if (out_path && *out_path) {
      bfm::corpus::RawVolume v;
      v.dims = r.volume.dims;
      v.spacing = r.volume.spacing;
      v.voxels = r.volume.voxels;
      v.modality = r.volume.modality;
      bfm::corpus::write_volume(v, out_path);
    }
    if (report_json) {
      json j = {{"case", case_id},
                {"target", r.volume.modality},
                {"dims", r.volume.dims},
                {"hidden_patches", r.hidden_patches}};
      j["mse"] = r.mse ? json(*r.mse) : json(nullptr);
      *report_json = dup(j.dump(2));
    }
  });
}

bfm_status bfm_report(const char* metrics_path, const char* out_dir, char** report_json) {
  return guard([&] {
    require(metrics_path, "metrics_path");
    require(out_dir, "out_dir");
    const auto files = bfm::report::write_report(metrics_path, out_dir);
    if (report_json) {
      json j = json::array();
      for (const auto& f : files) j.push_back(f.string());
      *report_json = dup(json{{"files", j}}.dump(2));
    }
  });
}

}  // extern "C"
