#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "config.hpp"
#include "corpus.hpp"
#include "objectives.hpp"
#include "preprocess.hpp"
#include "tensor.hpp"

namespace bfm::training {

struct OptimState {
  ParamSet m;
  ParamSet v;
  std::int64_t t = 0;

  static OptimState zeros_like(const ParamSet& params);
};

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled weight decay first, then the bias-corrected Adam update.
// `trainable` (if set) restricts which tensors are touched at all. All
// gradients are checked before anything is modified; a non-finite one
// throws NonFiniteGradient and leaves params and state unchanged.
void adamw_step(ParamSet& params, const ParamSet& grads, OptimState& st, const AdamWConfig& cfg,
                const std::function<bool(const std::string&)>& trainable = {});

double lr_schedule(std::int64_t step, std::int64_t total_steps, double warmup_fraction,
                   double lr_max, double lr_min);

// Global L2 norm in canonical tensor order.
double global_norm(const ParamSet& grads);

// ---- synthetic phantoms ----

struct SynthSpec {
  std::vector<std::string> modalities{"t1", "flair"};
  corpus::Dims dims{32, 32, 32};
  bool lesion = false;
  int lesion_radius = 4;
  std::optional<std::array<int, 3>> lesion_center;  // random interior point if unset
};

struct SynthCase {
  corpus::Session session;
  std::optional<corpus::RawVolume> label;
};

SynthCase synth_session(std::uint64_t seed, const std::string& case_id, const SynthSpec& spec);

// Writes <out>/<case_id>/<modality>.nii (+ label.nii) for cfg.synth_cases
// cases and returns the manifest.
corpus::CaseManifest write_synthetic_corpus(const RunConfig& cfg, const std::filesystem::path& out);

// ---- data access ----

struct LabeledCase {
  corpus::Session session;
  std::optional<corpus::RawVolume> label;
  std::optional<int> class_label;
};

class CaseProvider {
 public:
  virtual ~CaseProvider() = default;
  virtual std::size_t size() const = 0;
  virtual std::string case_id(std::size_t i) const = 0;
  virtual LabeledCase load(std::size_t i) const = 0;
};

// class_label = 1 when the label volume has any foreground voxel.
std::unique_ptr<CaseProvider> manifest_provider(corpus::CaseManifest m);
std::unique_ptr<CaseProvider> synthetic_provider(const RunConfig& cfg);
// Subset view [begin, end) of another provider (which must outlive it).
std::unique_ptr<CaseProvider> slice_provider(const CaseProvider& base, std::size_t begin,
                                             std::size_t end);
std::unique_ptr<CaseProvider> in_memory_provider(std::vector<LabeledCase> cases);

// ---- checkpoints ----

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  std::int64_t step = 0;
  int epoch = 0;
  std::string task = "pretrain";
  nlohmann::json extra = nlohmann::json::object();
  ParamSet params;
  OptimState optim;
};

// Layout: "BFMC", u32 version, u64 metadata length, metadata JSON, then per
// tensor: u32 name length, name, u8 dtype tag, u32 rank, i64 dims[rank],
// little-endian data.
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---- loops ----

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<nlohmann::json> metrics;
};

struct RunOutputs {
  std::filesystem::path dir;  // empty: keep everything in memory
};

std::int64_t steps_per_epoch(std::size_t n_cases, int batch_size);

// Initializes from cfg.seed unless `init` is given, in which case training
// resumes at init->step with its optimizer state.
PretrainResult pretrain_loop(const RunConfig& cfg, const CaseProvider& data,
                             const std::optional<Checkpoint>& init = std::nullopt,
                             const RunOutputs& out = {});

enum class Task { Segmentation, Classification };
Task parse_task(const std::string& name);
std::string task_name(Task t);

struct FinetuneResult {
  Checkpoint checkpoint;
  std::vector<nlohmann::json> history;  // one entry per epoch
  int epochs_run = 0;
  double best_metric = 0.0;
};

// Decoder excluded; every valid patch visible. Early stopping on validation
// Dice (segmentation) or accuracy (classification).
FinetuneResult finetune(const RunConfig& cfg, Task task, const Checkpoint& init,
                        const CaseProvider& train, const CaseProvider& val,
                        const RunOutputs& out = {});

// Supervised loss pieces, exposed for tests.
double segmentation_loss(std::span<const double> logits, std::span<const float> target,
                         std::vector<double>* d_logits);
double classification_loss(std::span<const double> logits, int label,
                           std::vector<double>* d_logits);

// Tokens with an empty mask plan: every valid patch is visible.
tokenizer::SessionTokens tokenize_unmasked(const preprocess::PreparedSession& s,
                                           const RunConfig& cfg,
                                           const embed::EmbeddingSource& src,
                                           embed::EmbeddingCache* cache);

struct SegmentationForward {
  network::EncoderPass enc;
  Matrix grid;
  std::vector<int> counts;
  std::vector<double> logits;  // channel-major voxel logits
};

SegmentationForward segment_forward(const ParamSet& p, const network::NetConfig& net,
                                    const tokenizer::SessionTokens& s);

struct ClassificationForward {
  network::EncoderPass enc;
  std::vector<double> logits;
};

ClassificationForward classify_forward(const ParamSet& p, const network::NetConfig& net,
                                       const tokenizer::SessionTokens& s);

// Gradient check of l_total on a batch of cfg.batch_size synthetic sessions
// (mask step 0), with the regularizers at their full weights.
objectives::GradcheckReport run_gradcheck(const RunConfig& cfg);

}  // namespace bfm::training
