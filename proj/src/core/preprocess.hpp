#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "corpus.hpp"
#include "rng.hpp"

namespace bfm::preprocess {

using corpus::Dims;

// Half-open [lo, hi) per axis.
struct Extent {
  std::array<int, 3> lo{0, 0, 0};
  std::array<int, 3> hi{0, 0, 0};

  bool contains(int x, int y, int z) const {
    return x >= lo[0] && x < hi[0] && y >= lo[1] && y < hi[1] && z >= lo[2] && z < hi[2];
  }
  friend bool operator==(const Extent&, const Extent&) = default;
};

struct Volume {
  Dims dims{1, 1, 1};
  corpus::Spacing spacing{1.0, 1.0, 1.0};
  std::vector<float> voxels;
  std::string modality;
  Extent valid_extent;

  float at(int x, int y, int z) const { return voxels[corpus::voxel_index(dims, x, y, z)]; }
};

struct PreprocessConfig {
  Dims target_shape{128, 128, 128};
  Dims patch_size{16, 16, 16};

  double bias_field_prob = 0.3;
  std::array<double, 2> bias_coeff_range{0.3, 0.6};
  double noise_prob = 0.3;
  double noise_mean = 0.0;
  double noise_std = 0.05;
  double contrast_prob = 0.3;
  std::array<double, 2> gamma_range{0.7, 1.5};
  double flip_prob = 0.5;
  double rotation_bound = 0.26179938779914941;  // pi / 12
  std::uint64_t seed = 0;

  // Throws ConfigError on out-of-range values.
  void validate() const;
};

struct AppliedOp {
  std::string op;
  std::string modality;  // empty for ops shared by the whole session
  nlohmann::json params;
};

struct PreparedSession {
  std::string case_id;
  std::map<std::string, Volume> volumes;
  std::optional<Volume> label;  // binary annotation, carried through geometry ops only
  std::vector<AppliedOp> applied_ops;
};

// Stage indices used to address RNG streams.
enum class Stage : std::uint64_t {
  BiasField = 2,
  Noise = 3,
  Contrast = 4,
  Flip = 5,
  Affine = 6,
};

CounterRng stage_rng(std::uint64_t seed, const std::string& case_id, std::uint64_t draw,
                     Stage stage, const std::string& modality = {});

Volume crop_or_pad(const corpus::RawVolume& v, const Dims& target);
Volume divisible_pad(const Volume& v, const Dims& patch);

// Polynomial term exponents (i, j, k) with i + j + k <= 3, in sampling order.
std::vector<std::array<int, 3>> bias_field_terms();
Volume apply_bias_field(const Volume& v, const std::vector<double>& coeffs);
Volume rand_bias_field(const Volume& v, CounterRng& rng, double p,
                       std::array<double, 2> coeff_range,
                       std::vector<double>* sampled = nullptr);

Volume rand_gaussian_noise(const Volume& v, CounterRng& rng, double p, double mean, double stddev,
                           bool* applied = nullptr);

Volume adjust_contrast(const Volume& v, double gamma);
Volume rand_adjust_contrast(const Volume& v, CounterRng& rng, double p,
                            std::array<double, 2> gamma_range,
                            std::optional<double>* sampled_gamma = nullptr);

std::array<bool, 3> sample_flip(CounterRng& rng, double p);
Volume flip(const Volume& v, const std::array<bool, 3>& axes);
Volume rand_flip(const Volume& v, CounterRng& rng, double p);

std::array<double, 3> sample_angles(CounterRng& rng, double bound);
// Rotation R = Rz * Ry * Rx about the volume centre; out(p) = in(R^T (p - c) + c),
// trilinear with border replication. Voxels outside valid_extent are re-zeroed.
Volume rotate(const Volume& v, const std::array<double, 3>& angles);
Volume rand_affine(const Volume& v, CounterRng& rng, double angle_bound);

Volume normalize_intensity(const Volume& v);
Volume sanitize(const Volume& v);

// `draw` distinguishes repeated augmentations of the same case (e.g. one per
// training step); draw 0 is the canonical evaluation-time draw.
PreparedSession preprocess_session(const corpus::Session& s, const PreprocessConfig& cfg,
                                   std::uint64_t draw = 0,
                                   const corpus::RawVolume* label = nullptr);

nlohmann::json applied_ops_json(const PreparedSession& s);

}  // namespace bfm::preprocess
