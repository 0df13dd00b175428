#include "preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "error.hpp"

namespace bfm::preprocess {

namespace {

bool in_unit(double p) { return p >= 0.0 && p <= 1.0; }

// Visit the valid extent in storage order (x fastest).
template <typename Fn>
void for_each_valid(const Volume& v, Fn&& fn) {
  const Extent& e = v.valid_extent;
  for (int z = e.lo[2]; z < e.hi[2]; ++z)
    for (int y = e.lo[1]; y < e.hi[1]; ++y)
      for (int x = e.lo[0]; x < e.hi[0]; ++x) fn(corpus::voxel_index(v.dims, x, y, z), x, y, z);
}

void zero_outside_extent(Volume& v) {
  for (int z = 0; z < v.dims[2]; ++z)
    for (int y = 0; y < v.dims[1]; ++y)
      for (int x = 0; x < v.dims[0]; ++x)
        if (!v.valid_extent.contains(x, y, z)) v.voxels[corpus::voxel_index(v.dims, x, y, z)] = 0.0f;
}

double normalized_coord(int i, int n) { return n == 1 ? 0.0 : -1.0 + 2.0 * i / (n - 1); }

}  // namespace

void PreprocessConfig::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (target_shape[a] <= 0 || patch_size[a] <= 0)
      fail(ErrorCode::ConfigError, "target_shape and patch_size must be positive");
  }
  if (!in_unit(bias_field_prob) || !in_unit(noise_prob) || !in_unit(contrast_prob) ||
      !in_unit(flip_prob))
    fail(ErrorCode::ConfigError, "augmentation probabilities must lie in [0, 1]");
  if (bias_coeff_range[0] < 0.0 || bias_coeff_range[0] > bias_coeff_range[1])
    fail(ErrorCode::ConfigError, "bias coefficient range must satisfy 0 <= low <= high");
  if (gamma_range[0] <= 0.0 || gamma_range[0] > gamma_range[1])
    fail(ErrorCode::ConfigError, "gamma range must be positive and ordered");
  if (!(noise_std >= 0.0)) fail(ErrorCode::ConfigError, "noise std must be >= 0");
  if (!(rotation_bound >= 0.0)) fail(ErrorCode::ConfigError, "rotation bound must be >= 0");
}

CounterRng stage_rng(std::uint64_t seed, const std::string& case_id, std::uint64_t draw,
                     Stage stage, const std::string& modality) {
  return CounterRng::stream(seed, {stable_hash(case_id), draw, static_cast<std::uint64_t>(stage),
                                   modality.empty() ? 0 : stable_hash(modality)});
}

Volume crop_or_pad(const corpus::RawVolume& v, const Dims& target) {
  for (int a = 0; a < 3; ++a) {
    if (target[a] <= 0) fail(ErrorCode::RangeError, "crop_or_pad target must be positive");
  }
  Volume out;
  out.dims = target;
  out.spacing = v.spacing;
  out.modality = v.modality;
  out.voxels.assign(corpus::voxel_count(target), 0.0f);

  std::array<int, 3> src0{}, dst0{}, len{};
  for (int a = 0; a < 3; ++a) {
    if (v.dims[a] > target[a]) {
      src0[a] = (v.dims[a] - target[a]) / 2;
      dst0[a] = 0;
      len[a] = target[a];
    } else {
      src0[a] = 0;
      dst0[a] = (target[a] - v.dims[a]) / 2;
      len[a] = v.dims[a];
    }
    out.valid_extent.lo[a] = dst0[a];
    out.valid_extent.hi[a] = dst0[a] + len[a];
  }
  for (int z = 0; z < len[2]; ++z)
    for (int y = 0; y < len[1]; ++y)
      for (int x = 0; x < len[0]; ++x)
        out.voxels[corpus::voxel_index(target, dst0[0] + x, dst0[1] + y, dst0[2] + z)] =
            v.voxels[corpus::voxel_index(v.dims, src0[0] + x, src0[1] + y, src0[2] + z)];
  return out;
}

Volume divisible_pad(const Volume& v, const Dims& patch) {
  Dims dims{};
  std::array<int, 3> low{};
  for (int a = 0; a < 3; ++a) {
    if (patch[a] <= 0) fail(ErrorCode::RangeError, "patch size must be positive");
    dims[a] = (v.dims[a] + patch[a] - 1) / patch[a] * patch[a];
    low[a] = (dims[a] - v.dims[a]) / 2;
  }
  if (dims == v.dims) return v;

  Volume out;
  out.dims = dims;
  out.spacing = v.spacing;
  out.modality = v.modality;
  out.voxels.assign(corpus::voxel_count(dims), 0.0f);
  for (int a = 0; a < 3; ++a) {
    out.valid_extent.lo[a] = v.valid_extent.lo[a] + low[a];
    out.valid_extent.hi[a] = v.valid_extent.hi[a] + low[a];
  }
  for (int z = 0; z < v.dims[2]; ++z)
    for (int y = 0; y < v.dims[1]; ++y)
      for (int x = 0; x < v.dims[0]; ++x)
        out.voxels[corpus::voxel_index(dims, x + low[0], y + low[1], z + low[2])] = v.at(x, y, z);
  return out;
}

std::vector<std::array<int, 3>> bias_field_terms() {
  std::vector<std::array<int, 3>> terms;
  for (int i = 0; i <= 3; ++i)
    for (int j = 0; j <= 3 - i; ++j)
      for (int k = 0; k <= 3 - i - j; ++k) terms.push_back({i, j, k});
  return terms;
}

Volume apply_bias_field(const Volume& v, const std::vector<double>& coeffs) {
  const auto terms = bias_field_terms();
  if (coeffs.size() != terms.size()) fail(ErrorCode::ShapeError, "bias field needs 20 coefficients");
  Volume out = v;
  for_each_valid(v, [&](std::size_t idx, int x, int y, int z) {
    const double c[3] = {normalized_coord(x, v.dims[0]), normalized_coord(y, v.dims[1]),
                         normalized_coord(z, v.dims[2])};
    double poly = 0.0;
    for (std::size_t t = 0; t < terms.size(); ++t) {
      poly += coeffs[t] * std::pow(c[0], terms[t][0]) * std::pow(c[1], terms[t][1]) *
              std::pow(c[2], terms[t][2]);
    }
    out.voxels[idx] = static_cast<float>(static_cast<double>(v.voxels[idx]) * std::exp(poly));
  });
  return out;
}

Volume rand_bias_field(const Volume& v, CounterRng& rng, double p,
                       std::array<double, 2> coeff_range, std::vector<double>* sampled) {
  if (coeff_range[0] < 0.0 || coeff_range[0] > coeff_range[1])
    fail(ErrorCode::RangeError, "bias coefficient range must satisfy 0 <= low <= high");
  if (!rng.bernoulli(p)) return v;
  std::vector<double> coeffs(bias_field_terms().size());
  for (auto& c : coeffs) {
    const double magnitude = rng.uniform(coeff_range[0], coeff_range[1]);
    c = rng.bernoulli(0.5) ? -magnitude : magnitude;
  }
  if (sampled) *sampled = coeffs;
  return apply_bias_field(v, coeffs);
}

Volume rand_gaussian_noise(const Volume& v, CounterRng& rng, double p, double mean, double stddev,
                           bool* applied) {
  if (!(stddev >= 0.0)) fail(ErrorCode::RangeError, "noise std must be >= 0");
  if (applied) *applied = false;
  if (!rng.bernoulli(p)) return v;
  if (applied) *applied = true;
  Volume out = v;
  for_each_valid(v, [&](std::size_t idx, int, int, int) {
    out.voxels[idx] = static_cast<float>(static_cast<double>(v.voxels[idx]) + rng.normal(mean, stddev));
  });
  return out;
}

Volume adjust_contrast(const Volume& v, double gamma) {
  double mn = std::numeric_limits<double>::infinity();
  double mx = -mn;
  for_each_valid(v, [&](std::size_t idx, int, int, int) {
    const double x = v.voxels[idx];
    if (!std::isfinite(x)) return;
    mn = std::min(mn, x);
    mx = std::max(mx, x);
  });
  if (!(mx > mn)) return v;
  const double range = mx - mn;
  Volume out = v;
  for_each_valid(v, [&](std::size_t idx, int, int, int) {
    const double x = v.voxels[idx];
    out.voxels[idx] = static_cast<float>(std::pow((x - mn) / range, gamma) * range + mn);
  });
  return out;
}

Volume rand_adjust_contrast(const Volume& v, CounterRng& rng, double p,
                            std::array<double, 2> gamma_range,
                            std::optional<double>* sampled_gamma) {
  if (gamma_range[0] <= 0.0 || gamma_range[0] > gamma_range[1])
    fail(ErrorCode::RangeError, "gamma range must be positive and ordered");
  if (sampled_gamma) sampled_gamma->reset();
  if (!rng.bernoulli(p)) return v;
  const double gamma = rng.uniform(gamma_range[0], gamma_range[1]);
  if (sampled_gamma) *sampled_gamma = gamma;
  return adjust_contrast(v, gamma);
}

std::array<bool, 3> sample_flip(CounterRng& rng, double p) {
  std::array<bool, 3> axes{};
  for (auto& a : axes) a = rng.bernoulli(p);
  return axes;
}

Volume flip(const Volume& v, const std::array<bool, 3>& axes) {
  if (!axes[0] && !axes[1] && !axes[2]) return v;
  Volume out = v;
  const Dims& d = v.dims;
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        const int sx = axes[0] ? d[0] - 1 - x : x;
        const int sy = axes[1] ? d[1] - 1 - y : y;
        const int sz = axes[2] ? d[2] - 1 - z : z;
        out.voxels[corpus::voxel_index(d, x, y, z)] = v.at(sx, sy, sz);
      }
  for (int a = 0; a < 3; ++a) {
    if (!axes[a]) continue;
    out.valid_extent.lo[a] = d[a] - v.valid_extent.hi[a];
    out.valid_extent.hi[a] = d[a] - v.valid_extent.lo[a];
  }
  return out;
}

Volume rand_flip(const Volume& v, CounterRng& rng, double p) { return flip(v, sample_flip(rng, p)); }

std::array<double, 3> sample_angles(CounterRng& rng, double bound) {
  if (!(bound >= 0.0)) fail(ErrorCode::RangeError, "rotation bound must be >= 0");
  std::array<double, 3> angles{};
  for (auto& a : angles) a = rng.uniform(-bound, bound);
  return angles;
}

Volume rotate(const Volume& v, const std::array<double, 3>& angles) {
  if (angles[0] == 0.0 && angles[1] == 0.0 && angles[2] == 0.0) return v;
  const double cx = std::cos(angles[0]), sx = std::sin(angles[0]);
  const double cy = std::cos(angles[1]), sy = std::sin(angles[1]);
  const double cz = std::cos(angles[2]), sz = std::sin(angles[2]);
  const double rx[3][3] = {{1, 0, 0}, {0, cx, -sx}, {0, sx, cx}};
  const double ry[3][3] = {{cy, 0, sy}, {0, 1, 0}, {-sy, 0, cy}};
  const double rz[3][3] = {{cz, -sz, 0}, {sz, cz, 0}, {0, 0, 1}};
  double ryx[3][3] = {}, r[3][3] = {};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) ryx[i][j] += ry[i][k] * rx[k][j];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) r[i][j] += rz[i][k] * ryx[k][j];

  const Dims& d = v.dims;
  const double centre[3] = {(d[0] - 1) / 2.0, (d[1] - 1) / 2.0, (d[2] - 1) / 2.0};
  Volume out = v;
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        const double off[3] = {x - centre[0], y - centre[1], z - centre[2]};
        int i0[3], i1[3];
        double f[3];
        for (int a = 0; a < 3; ++a) {
          // R^T maps output offsets back into the source frame.
          double s = r[0][a] * off[0] + r[1][a] * off[1] + r[2][a] * off[2] + centre[a];
          s = std::clamp(s, 0.0, static_cast<double>(d[a] - 1));
          i0[a] = static_cast<int>(std::floor(s));
          i1[a] = std::min(i0[a] + 1, d[a] - 1);
          f[a] = s - i0[a];
        }
        double acc = 0.0;
        for (int corner = 0; corner < 8; ++corner) {
          double w = 1.0;
          int idx[3];
          for (int a = 0; a < 3; ++a) {
            const bool hi = (corner >> a) & 1;
            w *= hi ? f[a] : 1.0 - f[a];
            idx[a] = hi ? i1[a] : i0[a];
          }
          if (w != 0.0) acc += w * v.at(idx[0], idx[1], idx[2]);
        }
        out.voxels[corpus::voxel_index(d, x, y, z)] = static_cast<float>(acc);
      }
  zero_outside_extent(out);
  return out;
}

Volume rand_affine(const Volume& v, CounterRng& rng, double angle_bound) {
  return rotate(v, sample_angles(rng, angle_bound));
}

Volume normalize_intensity(const Volume& v) {
  double sum = 0.0;
  std::size_t count = 0;
  for (float x : v.voxels) {
    if (x != 0.0f && std::isfinite(x)) {
      sum += x;
      ++count;
    }
  }
  if (count < 2) return v;
  const double mean = sum / static_cast<double>(count);
  double ss = 0.0;
  for (float x : v.voxels) {
    if (x != 0.0f && std::isfinite(x)) ss += (x - mean) * (x - mean);
  }
  const double sigma = std::sqrt(ss / static_cast<double>(count));
  if (!(sigma > 0.0)) return v;
  Volume out = v;
  for (auto& x : out.voxels) {
    if (x != 0.0f && std::isfinite(x)) x = static_cast<float>((x - mean) / sigma);
  }
  return out;
}

Volume sanitize(const Volume& v) {
  Volume out = v;
  for (auto& x : out.voxels) x = std::isfinite(x) ? std::clamp(x, -4.0f, 4.0f) : 0.0f;
  return out;
}

PreparedSession preprocess_session(const corpus::Session& s, const PreprocessConfig& cfg,
                                   std::uint64_t draw, const corpus::RawVolume* label) {
  if (s.volumes.empty()) fail(ErrorCode::EmptySession, "session '" + s.case_id + "' has no volumes");
  cfg.validate();

  PreparedSession out;
  out.case_id = s.case_id;

  // Geometry is sampled once per session so modalities stay voxel-aligned.
  CounterRng flip_rng = stage_rng(cfg.seed, s.case_id, draw, Stage::Flip);
  const auto flips = sample_flip(flip_rng, cfg.flip_prob);
  CounterRng affine_rng = stage_rng(cfg.seed, s.case_id, draw, Stage::Affine);
  const auto angles = sample_angles(affine_rng, cfg.rotation_bound);

  for (const auto& [name, raw] : s.volumes) {
    Volume v = divisible_pad(crop_or_pad(raw, cfg.target_shape), cfg.patch_size);
    v.modality = name;

    CounterRng bias_rng = stage_rng(cfg.seed, s.case_id, draw, Stage::BiasField, name);
    std::vector<double> coeffs;
    v = rand_bias_field(v, bias_rng, cfg.bias_field_prob, cfg.bias_coeff_range, &coeffs);
    out.applied_ops.push_back({"rand_bias_field", name,
                               {{"applied", !coeffs.empty()}, {"coefficients", coeffs}}});

    CounterRng noise_rng = stage_rng(cfg.seed, s.case_id, draw, Stage::Noise, name);
    bool noisy = false;
    v = rand_gaussian_noise(v, noise_rng, cfg.noise_prob, cfg.noise_mean, cfg.noise_std, &noisy);
    out.applied_ops.push_back({"rand_gaussian_noise", name, {{"applied", noisy}}});

    CounterRng contrast_rng = stage_rng(cfg.seed, s.case_id, draw, Stage::Contrast, name);
    std::optional<double> gamma;
    v = rand_adjust_contrast(v, contrast_rng, cfg.contrast_prob, cfg.gamma_range, &gamma);
    out.applied_ops.push_back({"rand_adjust_contrast", name,
                               {{"applied", gamma.has_value()}, {"gamma", gamma.value_or(1.0)}}});

    v = flip(v, flips);
    out.applied_ops.push_back({"rand_flip", name, {{"axes", flips}}});
    v = rotate(v, angles);
    out.applied_ops.push_back({"rand_affine", name, {{"angles", angles}}});

    v = sanitize(normalize_intensity(v));
    out.applied_ops.push_back({"normalize_intensity", name, nlohmann::json::object()});
    out.applied_ops.push_back({"sanitize", name, nlohmann::json::object()});
    out.volumes.emplace(name, std::move(v));
  }

  if (label) {
    Volume l = divisible_pad(crop_or_pad(*label, cfg.target_shape), cfg.patch_size);
    l = rotate(flip(l, flips), angles);
    for (auto& x : l.voxels) x = x >= 0.5f ? 1.0f : 0.0f;
    l.modality = "label";
    out.label = std::move(l);
  }
  return out;
}

nlohmann::json applied_ops_json(const PreparedSession& s) {
  nlohmann::json lines = nlohmann::json::array();
  for (const auto& op : s.applied_ops) {
    lines.push_back({{"case_id", s.case_id}, {"op", op.op}, {"modality", op.modality},
                     {"params", op.params}});
  }
  return lines;
}

}  // namespace bfm::preprocess
