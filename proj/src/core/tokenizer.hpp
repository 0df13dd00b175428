#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "modality_embed.hpp"
#include "preprocess.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace bfm::tokenizer {

using GridCoord = std::array<int, 3>;

struct PatchInfo {
  int modality = 0;  // index into the session's modality list
  GridCoord grid{0, 0, 0};
  bool valid = false;
  int in_extent_count = 0;
};

// All patches of one session: modalities concatenated in session order, each
// modality's lattice enumerated x-fastest (gx + Gx * (gy + Gy * gz)).
struct PatchSet {
  std::array<int, 3> grid_dims{0, 0, 0};
  std::array<int, 3> patch{0, 0, 0};
  int n_modalities = 0;
  std::vector<PatchInfo> patches;
  // [n_patches, patch_voxels]; voxels outside valid_extent are zeroed.
  Matrix voxels;
  // [n_patches * patch_voxels]; 1 where the voxel lies inside valid_extent.
  std::vector<std::uint8_t> voxel_valid;

  int patch_voxels() const { return patch[0] * patch[1] * patch[2]; }
  int patches_per_modality() const { return grid_dims[0] * grid_dims[1] * grid_dims[2]; }
  std::size_t size() const { return patches.size(); }
};

struct MaskPlan {
  std::vector<int> hidden;  // ascending patch indices
  std::vector<int> dropped_modalities;
  double ratio = 0.0;
  bool guard_triggered = false;
};

struct TokenizerConfig {
  std::array<int, 3> patch{16, 16, 16};
  double mask_ratio = 0.75;
  double drop_prob = 0.2;
  // A patch is "empty" unless at least max(1, ceil(frac * p^3)) in-extent
  // voxels are nonzero.
  double min_nonzero_fraction = 0.0;
  std::uint64_t seed = 0;
};

struct SessionTokens {
  std::string case_id;
  std::vector<std::string> modalities;
  Matrix modality_embeddings;  // [n_modalities, D_m]
  std::array<int, 3> dims{0, 0, 0};
  PatchSet patches;
  MaskPlan plan;

  // valid and not hidden, ascending.
  std::vector<int> visible() const;
};

struct TokenBatch {
  std::vector<SessionTokens> sessions;
};

PatchSet patchify(const preprocess::PreparedSession& s, const std::array<int, 3>& patch,
                  double min_nonzero_fraction = 0.0);

MaskPlan sample_mask(const PatchSet& ps, double ratio, double drop_prob, CounterRng& rng);

// `stream` selects the per-session mask RNG stream (e.g. step and batch slot).
SessionTokens tokenize_session(const preprocess::PreparedSession& s, const TokenizerConfig& cfg,
                               const embed::EmbeddingSource& src, embed::EmbeddingCache* cache,
                               CounterRng& mask_rng);

TokenBatch assemble_batch(const std::vector<preprocess::PreparedSession>& sessions,
                          const TokenizerConfig& cfg, const embed::EmbeddingSource& src,
                          embed::EmbeddingCache* cache, std::uint64_t step = 0);

// Row `coords` of the factorized table: sum of three per-axis rows.
// `tables` are [max_grid, dim] row-major for axes x, y, z.
std::vector<double> positional_code(const GridCoord& coords,
                                    const std::array<const Tensor*, 3>& tables);

}  // namespace bfm::tokenizer
