#include "config.hpp"

#include <set>

#include "error.hpp"

namespace bfm {

namespace {

class Reader {
 public:
  explicit Reader(const nlohmann::json& doc) : doc_(doc) {
    if (!doc.is_object()) fail(ErrorCode::ConfigError, "config must be a JSON object");
  }

  template <typename T>
  void get(const char* key, T& field) {
    seen_.insert(key);
    auto it = doc_.find(key);
    if (it == doc_.end()) return;
    try {
      field = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::ConfigError, std::string("config key '") + key + "': " + e.what());
    }
  }

  void reject_unknown() const {
    for (const auto& [key, value] : doc_.items()) {
      if (!seen_.count(key)) fail(ErrorCode::ConfigError, "unknown config key '" + key + "'");
    }
  }

 private:
  const nlohmann::json& doc_;
  std::set<std::string> seen_;
};

}  // namespace

nlohmann::json to_json(const RunConfig& c) {
  return {
      {"seed", c.seed},
      {"threads", c.threads},
      {"batch_size", c.batch_size},
      {"epochs", c.epochs},
      {"max_steps", c.max_steps},
      {"lr_max", c.lr_max},
      {"lr_min", c.lr_min},
      {"warmup_fraction", c.warmup_fraction},
      {"weight_decay", c.weight_decay},
      {"beta1", c.beta1},
      {"beta2", c.beta2},
      {"eps_opt", c.eps_opt},
      {"grad_clip", c.grad_clip},
      {"mask_ratio", c.mask_ratio},
      {"drop_prob", c.drop_prob},
      {"min_nonzero_fraction", c.min_nonzero_fraction},
      {"lambda_var_max", c.lambda_var_max},
      {"lambda_cov_max", c.lambda_cov_max},
      {"warm_epochs", c.warm_epochs},
      {"embed_dim", c.net.embed_dim},
      {"decoder_dim", c.net.decoder_dim},
      {"encoder_layers", c.net.encoder_layers},
      {"decoder_layers", c.net.decoder_layers},
      {"heads", c.net.heads},
      {"mlp_ratio", c.net.mlp_ratio},
      {"patch_size", c.net.patch},
      {"max_grid", c.net.max_grid},
      {"modality_dim", c.net.modality_dim},
      {"n_classes", c.net.n_classes},
      {"n_labels", c.net.n_labels},
      {"target_shape", c.prep.target_shape},
      {"bias_field_prob", c.prep.bias_field_prob},
      {"bias_coeff_range", c.prep.bias_coeff_range},
      {"noise_prob", c.prep.noise_prob},
      {"noise_mean", c.prep.noise_mean},
      {"noise_std", c.prep.noise_std},
      {"contrast_prob", c.prep.contrast_prob},
      {"gamma_range", c.prep.gamma_range},
      {"flip_prob", c.prep.flip_prob},
      {"rotation_bound", c.prep.rotation_bound},
      {"augment", c.augment},
      {"embedding_mode", c.embedding_mode},
      {"embedding_table", c.embedding_table},
      {"embedding_fallback", c.embedding_fallback},
      {"synth_cases", c.synth_cases},
      {"synth_modalities", c.synth_modalities},
      {"synth_dims", c.synth_dims},
      {"synth_lesion_fraction", c.synth_lesion_fraction},
      {"synth_lesion_radius", c.synth_lesion_radius},
      {"task", c.task},
      {"freeze_encoder", c.freeze_encoder},
      {"patience", c.patience},
      {"val_cases", c.val_cases},
      {"gradcheck_samples", c.gradcheck_samples},
      {"gradcheck_step", c.gradcheck_step},
      {"gradcheck_tol", c.gradcheck_tol},
      {"gradcheck_stencil", c.gradcheck_stencil},
      {"debug_ops", c.debug_ops},
  };
}

RunConfig merge_config(const RunConfig& base, const nlohmann::json& overrides) {
  RunConfig c = base;
  Reader r(overrides);
  r.get("seed", c.seed);
  r.get("threads", c.threads);
  r.get("batch_size", c.batch_size);
  r.get("epochs", c.epochs);
  r.get("max_steps", c.max_steps);
  r.get("lr_max", c.lr_max);
  r.get("lr_min", c.lr_min);
  r.get("warmup_fraction", c.warmup_fraction);
  r.get("weight_decay", c.weight_decay);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("eps_opt", c.eps_opt);
  r.get("grad_clip", c.grad_clip);
  r.get("mask_ratio", c.mask_ratio);
  r.get("drop_prob", c.drop_prob);
  r.get("min_nonzero_fraction", c.min_nonzero_fraction);
  r.get("lambda_var_max", c.lambda_var_max);
  r.get("lambda_cov_max", c.lambda_cov_max);
  r.get("warm_epochs", c.warm_epochs);
  r.get("embed_dim", c.net.embed_dim);
  r.get("decoder_dim", c.net.decoder_dim);
  r.get("encoder_layers", c.net.encoder_layers);
  r.get("decoder_layers", c.net.decoder_layers);
  r.get("heads", c.net.heads);
  r.get("mlp_ratio", c.net.mlp_ratio);
  r.get("patch_size", c.net.patch);
  r.get("max_grid", c.net.max_grid);
  r.get("modality_dim", c.net.modality_dim);
  r.get("n_classes", c.net.n_classes);
  r.get("n_labels", c.net.n_labels);
  r.get("target_shape", c.prep.target_shape);
  r.get("bias_field_prob", c.prep.bias_field_prob);
  r.get("bias_coeff_range", c.prep.bias_coeff_range);
  r.get("noise_prob", c.prep.noise_prob);
  r.get("noise_mean", c.prep.noise_mean);
  r.get("noise_std", c.prep.noise_std);
  r.get("contrast_prob", c.prep.contrast_prob);
  r.get("gamma_range", c.prep.gamma_range);
  r.get("flip_prob", c.prep.flip_prob);
  r.get("rotation_bound", c.prep.rotation_bound);
  r.get("augment", c.augment);
  r.get("embedding_mode", c.embedding_mode);
  r.get("embedding_table", c.embedding_table);
  r.get("embedding_fallback", c.embedding_fallback);
  r.get("synth_cases", c.synth_cases);
  r.get("synth_modalities", c.synth_modalities);
  r.get("synth_dims", c.synth_dims);
  r.get("synth_lesion_fraction", c.synth_lesion_fraction);
  r.get("synth_lesion_radius", c.synth_lesion_radius);
  r.get("task", c.task);
  r.get("freeze_encoder", c.freeze_encoder);
  r.get("patience", c.patience);
  r.get("val_cases", c.val_cases);
  r.get("gradcheck_samples", c.gradcheck_samples);
  r.get("gradcheck_step", c.gradcheck_step);
  r.get("gradcheck_tol", c.gradcheck_tol);
  r.get("gradcheck_stencil", c.gradcheck_stencil);
  r.get("debug_ops", c.debug_ops);
  r.reject_unknown();
  c.prep.patch_size = c.net.patch;
  c.prep.seed = c.seed;
  return c;
}

RunConfig run_config_from_json(const nlohmann::json& doc) { return merge_config(RunConfig{}, doc); }

void RunConfig::validate() const {
  if (threads < 1) fail(ErrorCode::ConfigError, "threads must be >= 1");
  if (batch_size < 1) fail(ErrorCode::ConfigError, "batch_size must be >= 1");
  if (epochs < 0 || max_steps < 0) fail(ErrorCode::ConfigError, "epochs and max_steps must be >= 0");
  if (!(lr_min > 0.0 && lr_min <= lr_max))
    fail(ErrorCode::ConfigError, "learning rates must satisfy 0 < lr_min <= lr_max");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0))
    fail(ErrorCode::ConfigError, "warmup_fraction must lie in [0, 1)");
  if (patience < 1) fail(ErrorCode::ConfigError, "patience must be >= 1");
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0) || !(drop_prob >= 0.0 && drop_prob <= 1.0))
    fail(ErrorCode::ConfigError, "mask_ratio and drop_prob must lie in [0, 1]");
  if (gradcheck_stencil != 2 && gradcheck_stencil != 4)
    fail(ErrorCode::ConfigError, "gradcheck_stencil must be 2 or 4");
  if (warm_epochs < 0) fail(ErrorCode::ConfigError, "warm_epochs must be >= 0");
  if (task != "segmentation" && task != "classification")
    fail(ErrorCode::ConfigError, "task must be segmentation or classification");
  if (embedding_mode != "hash" && embedding_mode != "table")
    fail(ErrorCode::ConfigError, "embedding_mode must be hash or table");
  if (synth_cases < 0 || synth_modalities.empty())
    fail(ErrorCode::ConfigError, "synthetic corpus needs >= 0 cases and >= 1 modality");
  net.validate();
  prep.validate();
  if (prep.patch_size != net.patch) fail(ErrorCode::ConfigError, "patch size mismatch");
  for (int a = 0; a < 3; ++a) {
    const int padded = (prep.target_shape[a] + net.patch[a] - 1) / net.patch[a];
    if (padded > net.max_grid)
      fail(ErrorCode::ConfigError, "target_shape / patch_size exceeds max_grid");
  }
}

tokenizer::TokenizerConfig RunConfig::tokenizer_config() const {
  tokenizer::TokenizerConfig t;
  t.patch = net.patch;
  t.mask_ratio = mask_ratio;
  t.drop_prob = drop_prob;
  t.min_nonzero_fraction = min_nonzero_fraction;
  t.seed = seed;
  return t;
}

embed::EmbeddingSource RunConfig::embedding_source() const {
  if (embedding_mode == "table")
    return embed::make_source(embed::SourceMode::Table, net.modality_dim, embedding_table,
                              embedding_fallback);
  return embed::make_source(embed::SourceMode::HashSeeded, net.modality_dim);
}

preprocess::PreprocessConfig RunConfig::effective_prep() const {
  preprocess::PreprocessConfig p = prep;
  p.patch_size = net.patch;
  p.seed = seed;
  if (!augment) {
    p.bias_field_prob = 0.0;
    p.noise_prob = 0.0;
    p.contrast_prob = 0.0;
    p.flip_prob = 0.0;
    p.rotation_bound = 0.0;
  }
  return p;
}

RunConfig tiny_config() {
  RunConfig c;
  c.net.embed_dim = 16;
  c.net.decoder_dim = 8;
  c.net.encoder_layers = 2;
  c.net.decoder_layers = 1;
  c.net.heads = 2;
  c.net.mlp_ratio = 2;
  c.net.patch = {4, 4, 4};
  c.net.max_grid = 2;
  c.net.modality_dim = 8;
  c.prep.target_shape = {8, 8, 8};
  c.prep.patch_size = c.net.patch;
  c.synth_dims = {16, 16, 16};
  c.synth_modalities = {"t1", "flair"};
  c.synth_cases = 2;
  c.batch_size = 2;
  c.mask_ratio = 0.5;
  c.drop_prob = 0.0;
  c.augment = false;
  return c;
}

}  // namespace bfm
