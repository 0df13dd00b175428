#include "tokenizer.hpp"

#include <algorithm>
#include <cmath>

#include "error.hpp"

namespace bfm::tokenizer {

std::vector<int> SessionTokens::visible() const {
  std::vector<int> out;
  std::size_t h = 0;
  for (int i = 0; i < static_cast<int>(patches.size()); ++i) {
    while (h < plan.hidden.size() && plan.hidden[h] < i) ++h;
    const bool hidden = h < plan.hidden.size() && plan.hidden[h] == i;
    if (patches.patches[i].valid && !hidden) out.push_back(i);
  }
  return out;
}

PatchSet patchify(const preprocess::PreparedSession& s, const std::array<int, 3>& patch,
                  double min_nonzero_fraction) {
  if (s.volumes.empty()) fail(ErrorCode::EmptySession, "session '" + s.case_id + "' is empty");
  const auto& dims = s.volumes.begin()->second.dims;
  PatchSet ps;
  ps.patch = patch;
  for (int a = 0; a < 3; ++a) {
    if (patch[a] <= 0 || dims[a] % patch[a] != 0)
      fail(ErrorCode::ShapeError, "dims not divisible by patch size");
    ps.grid_dims[a] = dims[a] / patch[a];
  }
  for (const auto& [name, v] : s.volumes) {
    if (v.dims != dims) fail(ErrorCode::ShapeError, "modalities of one session differ in dims");
  }

  const int pv = ps.patch_voxels();
  const int per_mod = ps.patches_per_modality();
  const int n = per_mod * static_cast<int>(s.volumes.size());
  const int min_nonzero =
      std::max(1, static_cast<int>(std::ceil(min_nonzero_fraction * static_cast<double>(pv))));
  ps.n_modalities = static_cast<int>(s.volumes.size());
  ps.patches.resize(n);
  ps.voxels = Matrix(n, pv);
  ps.voxel_valid.assign(static_cast<std::size_t>(n) * pv, 0);

  int m = 0;
  for (const auto& [name, v] : s.volumes) {
    for (int gz = 0; gz < ps.grid_dims[2]; ++gz)
      for (int gy = 0; gy < ps.grid_dims[1]; ++gy)
        for (int gx = 0; gx < ps.grid_dims[0]; ++gx) {
          const int idx = m * per_mod + gx + ps.grid_dims[0] * (gy + ps.grid_dims[1] * gz);
          PatchInfo& info = ps.patches[idx];
          info.modality = m;
          info.grid = {gx, gy, gz};
          auto row = ps.voxels.row(idx);
          std::uint8_t* vmask = ps.voxel_valid.data() + static_cast<std::size_t>(idx) * pv;
          int nonzero = 0;
          int k = 0;
          for (int z = 0; z < patch[2]; ++z)
            for (int y = 0; y < patch[1]; ++y)
              for (int x = 0; x < patch[0]; ++x, ++k) {
                const int vx = gx * patch[0] + x, vy = gy * patch[1] + y, vz = gz * patch[2] + z;
                if (!v.valid_extent.contains(vx, vy, vz)) continue;
                vmask[k] = 1;
                ++info.in_extent_count;
                const float value = v.at(vx, vy, vz);
                row[k] = value;
                if (value != 0.0f) ++nonzero;
              }
          info.valid = info.in_extent_count >= 1 && nonzero >= min_nonzero;
        }
    ++m;
  }
  return ps;
}

MaskPlan sample_mask(const PatchSet& ps, double ratio, double drop_prob, CounterRng& rng) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) fail(ErrorCode::RangeError, "mask ratio outside [0, 1]");
  if (!(drop_prob >= 0.0 && drop_prob <= 1.0))
    fail(ErrorCode::RangeError, "drop probability outside [0, 1]");

  MaskPlan plan;
  plan.ratio = ratio;
  std::vector<int> valid;
  for (int i = 0; i < static_cast<int>(ps.size()); ++i)
    if (ps.patches[i].valid) valid.push_back(i);

  constexpr int kDropAttempts = 8;
  int dropped = -1;
  std::vector<int> remaining;
  long k = 0;
  for (int attempt = 0;; ++attempt) {
    dropped = -1;
    if (ps.n_modalities >= 2 && rng.bernoulli(drop_prob))
      dropped = static_cast<int>(rng.below(static_cast<std::uint64_t>(ps.n_modalities)));
    remaining.clear();
    for (int i : valid)
      if (ps.patches[i].modality != dropped) remaining.push_back(i);
    k = std::lround(ratio * static_cast<double>(remaining.size()));
    if (dropped < 0 || k < static_cast<long>(remaining.size())) break;
    // The drop would leave nothing visible.
    plan.guard_triggered = true;
    if (attempt + 1 >= kDropAttempts) {
      dropped = -1;
      remaining = valid;
      k = std::lround(ratio * static_cast<double>(remaining.size()));
      break;
    }
  }
  if (dropped < 0 && !remaining.empty() && k >= static_cast<long>(remaining.size())) {
    k = static_cast<long>(remaining.size()) - 1;
    plan.guard_triggered = true;
  }

  if (dropped >= 0) {
    plan.dropped_modalities.push_back(dropped);
    for (int i : valid)
      if (ps.patches[i].modality == dropped) plan.hidden.push_back(i);
  }
  const std::size_t n = remaining.size();
  for (std::size_t i = 0; i < static_cast<std::size_t>(k); ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(remaining[i], remaining[j]);
    plan.hidden.push_back(remaining[i]);
  }
  std::sort(plan.hidden.begin(), plan.hidden.end());
  return plan;
}

SessionTokens tokenize_session(const preprocess::PreparedSession& s, const TokenizerConfig& cfg,
                               const embed::EmbeddingSource& src, embed::EmbeddingCache* cache,
                               CounterRng& mask_rng) {
  SessionTokens t;
  t.case_id = s.case_id;
  t.patches = patchify(s, cfg.patch, cfg.min_nonzero_fraction);
  t.dims = s.volumes.begin()->second.dims;
  t.modality_embeddings = Matrix(static_cast<int>(s.volumes.size()), src.dim);
  int m = 0;
  for (const auto& [name, v] : s.volumes) {
    const auto e = embed::embed_modality(name, src, cache);
    t.modalities.push_back(e.name);
    std::copy(e.vector.begin(), e.vector.end(), t.modality_embeddings.row(m).begin());
    ++m;
  }
  t.plan = sample_mask(t.patches, cfg.mask_ratio, cfg.drop_prob, mask_rng);
  return t;
}

TokenBatch assemble_batch(const std::vector<preprocess::PreparedSession>& sessions,
                          const TokenizerConfig& cfg, const embed::EmbeddingSource& src,
                          embed::EmbeddingCache* cache, std::uint64_t step) {
  if (sessions.empty()) fail(ErrorCode::EmptyBatch, "assemble_batch needs at least one session");
  TokenBatch batch;
  for (std::size_t slot = 0; slot < sessions.size(); ++slot) {
    CounterRng rng = CounterRng::stream(cfg.seed, {stable_hash("mask"), step, slot});
    batch.sessions.push_back(tokenize_session(sessions[slot], cfg, src, cache, rng));
  }
  return batch;
}

std::vector<double> positional_code(const GridCoord& coords,
                                    const std::array<const Tensor*, 3>& tables) {
  const auto dim = static_cast<std::size_t>(tables[0]->dim(1));
  std::vector<double> out(dim, 0.0);
  for (int a = 0; a < 3; ++a) {
    const Tensor& t = *tables[a];
    if (coords[a] < 0 || coords[a] >= t.dim(0))
      fail(ErrorCode::RangeError, "grid coordinate " + std::to_string(coords[a]) +
                                      " outside positional table of " + std::to_string(t.dim(0)));
    const double* row = t.data.data() + static_cast<std::size_t>(coords[a]) * dim;
    for (std::size_t j = 0; j < dim; ++j) out[j] += row[j];
  }
  return out;
}

}  // namespace bfm::tokenizer
