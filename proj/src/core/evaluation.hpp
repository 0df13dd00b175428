#pragma once

#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "corpus.hpp"
#include "preprocess.hpp"
#include "training.hpp"

namespace bfm::evaluation {

struct BinaryMask {
  corpus::Dims dims{0, 0, 0};
  std::vector<std::uint8_t> bits;
  corpus::Spacing spacing{1.0, 1.0, 1.0};

  std::size_t count() const;
};

// Voxels strictly above `threshold`.
BinaryMask mask_from_volume(const preprocess::Volume& v, float threshold = 0.5f);

double dice(const BinaryMask& a, const BinaryMask& b);

// Set voxels with at least one face neighbour that is unset or outside the
// volume.
std::vector<std::size_t> surface_voxels(const BinaryMask& m);

// Distances (physical units) from every surface voxel of `from` to the
// nearest surface voxel of `to`. Both masks must be non-empty.
std::vector<double> surface_distances(const BinaryMask& from, const BinaryMask& to);

// 95th percentile of both directed distance sets pooled together, linear
// interpolation at 0.95 * (n - 1). nullopt when either mask is empty.
std::optional<double> hd95(const BinaryMask& a, const BinaryMask& b);

// (sensitivity, specificity) of `pred` against `ref`; 1.0 when a
// denominator is zero.
std::pair<double, double> sensitivity_specificity(const BinaryMask& pred, const BinaryMask& ref);

struct AvailabilityConfig {
  std::string name;
  std::set<std::string> available;  // canonical modality names
};

std::vector<AvailabilityConfig> default_availability();

struct CaseMetrics {
  std::string case_id;
  double dice = 0.0;
  std::optional<double> hd95;
  double sensitivity = 0.0;
  double specificity = 0.0;
  int predicted_class = -1;
  int true_class = -1;
};

struct MetricRow {
  std::string config;
  std::optional<double> dice;  // unset for classification
  std::optional<double> hd95;  // mean over cases where it is defined
  double sensitivity = 0.0;
  double specificity = 0.0;
  int n_cases = 0;
  int n_skipped = 0;
};

struct MatrixReport {
  std::vector<MetricRow> rows;
  std::vector<std::string> skipped;  // "<config>: <case_id>"
};

// Inference with every valid patch visible, on the evaluation-time
// (augmentation-free) preprocessing of the checkpoint's config.
CaseMetrics evaluate_case(const training::Checkpoint& ck, const training::LabeledCase& c,
                          training::Task task, embed::EmbeddingCache* cache = nullptr);

// Mean over cases, in order. Classification rows derive sensitivity and
// specificity from per-case predictions and leave dice unset.
MetricRow aggregate(const std::string& name, const std::vector<CaseMetrics>& cases,
                    training::Task task, int n_skipped = 0);

MetricRow evaluate_direct(const training::Checkpoint& ck, const training::CaseProvider& data,
                          training::Task task, int threads = 1);

// Throws ConfigError when the checkpoint was not finetuned for `task` or
// `configs` is empty.
MatrixReport availability_matrix_eval(const training::Checkpoint& ck,
                                      const training::CaseProvider& data,
                                      const std::vector<AvailabilityConfig>& configs,
                                      training::Task task, int threads = 1);

std::string metric_rows_csv(const std::vector<MetricRow>& rows);

struct Imputation {
  preprocess::Volume volume;  // on the preprocessed session grid
  // Masked squared error against the held-out target, when the session has it.
  std::optional<double> mse;
  int hidden_patches = 0;
};

Imputation impute_modality(const training::Checkpoint& ck, const corpus::Session& session,
                           const std::string& target);

}  // namespace bfm::evaluation
