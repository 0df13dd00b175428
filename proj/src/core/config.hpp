#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "modality_embed.hpp"
#include "network.hpp"
#include "preprocess.hpp"
#include "tokenizer.hpp"

namespace bfm {

// One flat key set for every workflow. JSON keys and CLI flags are the
// field names below.
struct RunConfig {
  std::uint64_t seed = 0;
  int threads = 1;

  // optimisation
  int batch_size = 2;
  int epochs = 10;
  std::int64_t max_steps = 0;  // 0: run the full schedule
  double lr_max = 1e-3;
  double lr_min = 1e-5;
  double warmup_fraction = 0.05;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_opt = 1e-8;
  double grad_clip = 1.0;  // global-norm clip; <= 0 disables

  // masking / objective
  double mask_ratio = 0.75;
  double drop_prob = 0.2;
  double min_nonzero_fraction = 0.0;
  double lambda_var_max = 0.1;
  double lambda_cov_max = 0.005;
  int warm_epochs = 5;

  // network
  network::NetConfig net;

  // preprocessing
  preprocess::PreprocessConfig prep;
  bool augment = true;

  // modality embeddings
  std::string embedding_mode = "hash";  // hash | table
  std::string embedding_table;
  bool embedding_fallback = false;

  // synthetic corpus
  int synth_cases = 4;
  std::vector<std::string> synth_modalities{"t1", "t1c", "t2", "flair"};
  std::array<int, 3> synth_dims{32, 32, 32};
  double synth_lesion_fraction = 0.5;
  int synth_lesion_radius = 4;

  // finetuning / evaluation
  std::string task = "segmentation";  // segmentation | classification
  bool freeze_encoder = false;
  int patience = 3;
  int val_cases = 1;

  // gradcheck
  int gradcheck_samples = 200;
  double gradcheck_step = 1e-3;
  double gradcheck_tol = 1e-4;
  int gradcheck_stencil = 2;  // 2 or 4 point central differences

  bool debug_ops = false;

  void validate() const;

  tokenizer::TokenizerConfig tokenizer_config() const;
  embed::EmbeddingSource embedding_source() const;
  // prep with every stochastic op disabled when augment is false.
  preprocess::PreprocessConfig effective_prep() const;
};

nlohmann::json to_json(const RunConfig& cfg);
// Strict: unknown keys and type mismatches throw ConfigError. Missing keys
// keep their defaults.
RunConfig run_config_from_json(const nlohmann::json& doc);
// Applies `overrides` (same key set) on top of `base`.
RunConfig merge_config(const RunConfig& base, const nlohmann::json& overrides);

// Small configuration used by the gradient check: d_e 16, d_d 8, two encoder
// layers, one decoder layer, 8^3 volumes with 4^3 patches, two modalities, B 2.
RunConfig tiny_config();

}  // namespace bfm
