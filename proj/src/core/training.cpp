#include "training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "error.hpp"
#include "evaluation.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace bfm::training {

namespace fs = std::filesystem;
using nlohmann::json;

OptimState OptimState::zeros_like(const ParamSet& params) {
  OptimState s;
  s.m = params.zeros_like();
  s.v = params.zeros_like();
  return s;
}

void adamw_step(ParamSet& params, const ParamSet& grads, OptimState& st, const AdamWConfig& cfg,
                const std::function<bool(const std::string&)>& trainable) {
  params.check_compatible(grads);
  params.check_compatible(st.m);
  params.check_compatible(st.v);
  if (!(cfg.lr >= 0.0)) fail(ErrorCode::RangeError, "learning rate must be >= 0");
  for (const auto& [name, g] : grads) {
    if (trainable && !trainable(name)) continue;
    for (double x : g.data)
      if (!std::isfinite(x)) fail(ErrorCode::NonFiniteGradient, "non-finite gradient in " + name);
  }
  st.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (auto& [name, w] : params) {
    if (trainable && !trainable(name)) continue;
    const auto& g = grads.at(name).data;
    auto& m = st.m.at(name).data;
    auto& v = st.v.at(name).data;
    for (std::size_t i = 0; i < w.data.size(); ++i) {
      w.data[i] -= cfg.lr * cfg.weight_decay * w.data[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

double lr_schedule(std::int64_t step, std::int64_t total_steps, double warmup_fraction,
                   double lr_max, double lr_min) {
  if (total_steps < 0 || step < 0 || step > total_steps)
    fail(ErrorCode::RangeError, "step " + std::to_string(step) + " outside [0, " +
                                    std::to_string(total_steps) + "]");
  const auto warm = static_cast<std::int64_t>(std::floor(warmup_fraction * total_steps));
  if (step < warm) return lr_max * static_cast<double>(step) / static_cast<double>(warm);
  if (total_steps == warm) return lr_max;
  const double progress =
      static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

double global_norm(const ParamSet& grads) {
  double sum = 0.0;
  for (const auto& [name, g] : grads)
    for (double x : g.data) sum += x * x;
  return std::sqrt(sum);
}

// ---- synthetic phantoms ----

namespace {

struct Contrast {
  double sign;    // +1: brighter with tissue density, -1: inverted
  double curve;   // quadratic term
  double lesion;  // additive lesion intensity
};

Contrast contrast_for(const std::string& m) {
  if (m == "t1") return {1.0, 0.15, -0.5};
  if (m == "t1c") return {1.0, 0.25, 0.9};
  if (m == "t2") return {-1.0, 0.1, 1.0};
  if (m == "flair") return {-1.0, 0.3, 1.4};
  CounterRng rng = CounterRng::stream(stable_hash(m), {stable_hash("contrast")});
  const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
  const double curve = rng.uniform(0.0, 0.3);
  const double lesion = rng.uniform(-0.6, 1.4);
  return {sign, curve, lesion};
}

struct Blob {
  std::array<double, 3> c;
  double sigma;
  double amp;
};

}  // namespace

SynthCase synth_session(std::uint64_t seed, const std::string& case_id, const SynthSpec& spec) {
  const auto& d = spec.dims;
  if (d[0] < 16 || d[1] < 16 || d[2] < 16)
    fail(ErrorCode::RangeError, "synthetic volumes need dims >= 16 per axis");
  if (spec.modalities.empty()) fail(ErrorCode::InvalidArgument, "no synthetic modalities");
  CounterRng rng = CounterRng::stream(seed, {stable_hash("synth"), stable_hash(case_id)});

  const int min_dim = std::min({d[0], d[1], d[2]});
  std::vector<Blob> blobs(6);
  for (auto& b : blobs) {
    for (int a = 0; a < 3; ++a) b.c[a] = rng.uniform(0.3, 0.7) * d[a];
    b.sigma = rng.uniform(0.1, 0.22) * min_dim;
    b.amp = rng.uniform(0.4, 1.2);
  }
  std::array<double, 3> head_c, head_r;
  for (int a = 0; a < 3; ++a) {
    head_c[a] = 0.5 * (d[a] - 1) + rng.uniform(-1.0, 1.0);
    head_r[a] = 0.44 * d[a];
  }

  std::array<int, 3> lc{0, 0, 0};
  const int r = spec.lesion_radius;
  if (spec.lesion) {
    if (spec.lesion_center) {
      lc = *spec.lesion_center;
    } else {
      for (int a = 0; a < 3; ++a) {
        const int lo = d[a] / 2 - d[a] / 6;
        const int hi = d[a] / 2 + d[a] / 6;
        lc[a] = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
      }
    }
  }

  const std::size_t n = corpus::voxel_count(d);
  std::vector<double> tissue(n, 0.0);
  std::vector<std::uint8_t> lesion(n, 0);
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        const std::size_t i = corpus::voxel_index(d, x, y, z);
        const double p[3] = {double(x), double(y), double(z)};
        double e = 0.0;
        for (int a = 0; a < 3; ++a) e += std::pow((p[a] - head_c[a]) / head_r[a], 2);
        if (e <= 1.0) {
          double t = 0.3;
          for (const auto& b : blobs) {
            double q = 0.0;
            for (int a = 0; a < 3; ++a) q += (p[a] - b.c[a]) * (p[a] - b.c[a]);
            t += b.amp * std::exp(-q / (2.0 * b.sigma * b.sigma));
          }
          tissue[i] = t;
        }
        if (spec.lesion) {
          const int dx = x - lc[0], dy = y - lc[1], dz = z - lc[2];
          if (dx * dx + dy * dy + dz * dz <= r * r) lesion[i] = 1;
        }
      }

  SynthCase out;
  out.session.case_id = case_id;
  for (const auto& raw : spec.modalities) {
    const std::string m = embed::normalize_modality_name(raw);
    const Contrast c = contrast_for(m);
    corpus::RawVolume v;
    v.dims = d;
    v.modality = m;
    v.voxels.assign(n, 0.0f);
    for (std::size_t i = 0; i < n; ++i) {
      if (tissue[i] <= 0.0) continue;
      const double t = tissue[i];
      double value = c.sign > 0 ? 0.2 + t + c.curve * t * t : 2.5 - t + c.curve * t * t;
      if (lesion[i]) value += c.lesion;
      v.voxels[i] = static_cast<float>(std::max(0.05, value));
    }
    if (out.session.volumes.count(m))
      fail(ErrorCode::DuplicateModality, "synthetic modality '" + m + "' listed twice");
    out.session.volumes.emplace(m, std::move(v));
  }
  if (spec.lesion) {
    corpus::RawVolume label;
    label.dims = d;
    label.modality = "label";
    label.voxels.assign(n, 0.0f);
    for (std::size_t i = 0; i < n; ++i) label.voxels[i] = lesion[i] ? 1.0f : 0.0f;
    out.label = std::move(label);
  }
  return out;
}

namespace {

std::string synth_case_id(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%03d", i);
  return buf;
}

SynthSpec synth_spec_for(const RunConfig& cfg, int i) {
  SynthSpec spec;
  spec.modalities = cfg.synth_modalities;
  spec.dims = cfg.synth_dims;
  spec.lesion_radius = cfg.synth_lesion_radius;
  CounterRng rng = CounterRng::stream(cfg.seed, {stable_hash("synth-lesion"),
                                                 static_cast<std::uint64_t>(i)});
  spec.lesion = rng.uniform() < cfg.synth_lesion_fraction;
  return spec;
}

// Every synthetic case carries a label volume (all zero without a lesion).
LabeledCase synth_labeled(const RunConfig& cfg, int i) {
  const SynthSpec spec = synth_spec_for(cfg, i);
  SynthCase sc = synth_session(cfg.seed, synth_case_id(i), spec);
  LabeledCase lc;
  lc.session = std::move(sc.session);
  if (sc.label) {
    lc.label = std::move(sc.label);
  } else {
    corpus::RawVolume label;
    label.dims = spec.dims;
    label.modality = "label";
    label.voxels.assign(corpus::voxel_count(spec.dims), 0.0f);
    lc.label = std::move(label);
  }
  lc.class_label = spec.lesion ? 1 : 0;
  return lc;
}

int class_from_label(const corpus::RawVolume& label) {
  for (float v : label.voxels)
    if (v > 0.5f) return 1;
  return 0;
}

}  // namespace

corpus::CaseManifest write_synthetic_corpus(const RunConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  for (int i = 0; i < cfg.synth_cases; ++i) {
    const LabeledCase lc = synth_labeled(cfg, i);
    const fs::path dir = out / lc.session.case_id;
    fs::create_directories(dir);
    for (const auto& [m, v] : lc.session.volumes) corpus::write_volume(v, dir / (m + ".nii"));
    corpus::write_volume(*lc.label, dir / "label.nii");
  }
  return corpus::scan_corpus(out);
}

// ---- providers ----

namespace {

class ManifestProvider : public CaseProvider {
 public:
  explicit ManifestProvider(corpus::CaseManifest m) : m_(std::move(m)) {
    for (const auto& [id, mods] : m_.entries) ids_.push_back(id);
  }
  std::size_t size() const override { return ids_.size(); }
  std::string case_id(std::size_t i) const override { return ids_.at(i); }
  LabeledCase load(std::size_t i) const override {
    LabeledCase lc;
    lc.session = corpus::load_session(m_, ids_.at(i));
    const fs::path lp = corpus::label_path_for(m_, ids_.at(i));
    if (!lp.empty() && fs::exists(lp)) {
      lc.label = corpus::read_volume(lp);
      lc.class_label = class_from_label(*lc.label);
    }
    return lc;
  }

 private:
  corpus::CaseManifest m_;
  std::vector<std::string> ids_;
};

class SyntheticProvider : public CaseProvider {
 public:
  explicit SyntheticProvider(RunConfig cfg) : cfg_(std::move(cfg)) {}
  std::size_t size() const override { return static_cast<std::size_t>(cfg_.synth_cases); }
  std::string case_id(std::size_t i) const override { return synth_case_id(static_cast<int>(i)); }
  LabeledCase load(std::size_t i) const override {
    if (i >= size()) fail(ErrorCode::NotFound, "synthetic case index out of range");
    return synth_labeled(cfg_, static_cast<int>(i));
  }

 private:
  RunConfig cfg_;
};

class SliceProvider : public CaseProvider {
 public:
  SliceProvider(const CaseProvider& base, std::size_t begin, std::size_t end)
      : base_(base), begin_(begin), end_(end) {}
  std::size_t size() const override { return end_ - begin_; }
  std::string case_id(std::size_t i) const override { return base_.case_id(begin_ + i); }
  LabeledCase load(std::size_t i) const override { return base_.load(begin_ + i); }

 private:
  const CaseProvider& base_;
  std::size_t begin_, end_;
};

class MemoryProvider : public CaseProvider {
 public:
  explicit MemoryProvider(std::vector<LabeledCase> cases) : cases_(std::move(cases)) {}
  std::size_t size() const override { return cases_.size(); }
  std::string case_id(std::size_t i) const override { return cases_.at(i).session.case_id; }
  LabeledCase load(std::size_t i) const override { return cases_.at(i); }

 private:
  std::vector<LabeledCase> cases_;
};

}  // namespace

std::unique_ptr<CaseProvider> manifest_provider(corpus::CaseManifest m) {
  return std::make_unique<ManifestProvider>(std::move(m));
}

std::unique_ptr<CaseProvider> synthetic_provider(const RunConfig& cfg) {
  return std::make_unique<SyntheticProvider>(cfg);
}

std::unique_ptr<CaseProvider> slice_provider(const CaseProvider& base, std::size_t begin,
                                             std::size_t end) {
  if (begin > end || end > base.size()) fail(ErrorCode::RangeError, "bad provider slice");
  return std::make_unique<SliceProvider>(base, begin, end);
}

std::unique_ptr<CaseProvider> in_memory_provider(std::vector<LabeledCase> cases) {
  return std::make_unique<MemoryProvider>(std::move(cases));
}

// ---- checkpoints ----

namespace {

constexpr char kMagic[4] = {'B', 'F', 'M', 'C'};
constexpr std::uint8_t kDtypeF32 = 0;
constexpr std::uint8_t kDtypeF64 = 1;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.append(buf, sizeof(T));
}

class Cursor {
 public:
  explicit Cursor(const std::string& s) : s_(s) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    char buf[sizeof(T)];
    std::memcpy(buf, s_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool done() const { return pos_ == s_.size(); }

 private:
  void need(std::size_t n) const {
    if (s_.size() - pos_ < n) fail(ErrorCode::FormatError, "checkpoint is truncated");
  }
  const std::string& s_;
  std::size_t pos_ = 0;
};

void put_tensor(std::string& out, const std::string& name, const Tensor& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put<std::uint8_t>(out, kDtypeF64);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
  for (auto d : t.shape) put<std::int64_t>(out, d);
  for (double v : t.data) put<double>(out, v);
}

}  // namespace

void save_checkpoint(const Checkpoint& c, const fs::path& path) {
  json meta = {{"config", to_json(c.config)},
               {"step", c.step},
               {"epoch", c.epoch},
               {"task", c.task},
               {"optim_t", c.optim.t},
               {"extra", c.extra}};
  const std::string meta_s = meta.dump();
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, meta_s.size());
  out += meta_s;
  for (const auto& [name, t] : c.params) put_tensor(out, "params/" + name, t);
  for (const auto& [name, t] : c.optim.m) put_tensor(out, "optim.m/" + name, t);
  for (const auto& [name, t] : c.optim.v) put_tensor(out, "optim.v/" + name, t);

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorCode::IoError, "cannot write " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) fail(ErrorCode::IoError, "write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::IoError, "cannot open checkpoint " + path.string());
  const std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Cursor cur(data);
  if (cur.bytes(4) != std::string(kMagic, 4)) fail(ErrorCode::FormatError, "bad checkpoint magic");
  const auto version = cur.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    fail(ErrorCode::VersionError, "checkpoint version " + std::to_string(version) +
                                      " (expected " + std::to_string(kCheckpointVersion) + ")");
  const auto meta_len = cur.get<std::uint64_t>();
  if (meta_len > data.size()) fail(ErrorCode::FormatError, "checkpoint is truncated");
  json meta;
  try {
    meta = json::parse(cur.bytes(static_cast<std::size_t>(meta_len)));
  } catch (const json::exception& e) {
    fail(ErrorCode::FormatError, std::string("checkpoint metadata: ") + e.what());
  }

  Checkpoint c;
  try {
    c.config = run_config_from_json(meta.at("config"));
    c.step = meta.at("step").get<std::int64_t>();
    c.epoch = meta.at("epoch").get<int>();
    c.task = meta.at("task").get<std::string>();
    c.optim.t = meta.at("optim_t").get<std::int64_t>();
    c.extra = meta.value("extra", json::object());
  } catch (const json::exception& e) {
    fail(ErrorCode::FormatError, std::string("checkpoint metadata: ") + e.what());
  }

  while (!cur.done()) {
    const auto name_len = cur.get<std::uint32_t>();
    const std::string name = cur.bytes(name_len);
    const auto dtype = cur.get<std::uint8_t>();
    if (dtype != kDtypeF32 && dtype != kDtypeF64)
      fail(ErrorCode::FormatError, "unknown tensor dtype in " + name);
    const auto rank = cur.get<std::uint32_t>();
    if (rank > 8) fail(ErrorCode::FormatError, "implausible tensor rank in " + name);
    std::vector<std::int64_t> shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
      d = cur.get<std::int64_t>();
      if (d < 0 || d > (std::int64_t{1} << 32)) fail(ErrorCode::FormatError, "bad dim in " + name);
      count *= static_cast<std::size_t>(d);
    }
    const std::size_t width = dtype == kDtypeF64 ? 8 : 4;
    if (count > data.size() / width) fail(ErrorCode::FormatError, "checkpoint is truncated");
    ParamSet* target = nullptr;
    std::string key;
    for (auto [prefix, set] : {std::pair{"params/", &c.params}, std::pair{"optim.m/", &c.optim.m},
                               std::pair{"optim.v/", &c.optim.v}}) {
      const std::string p = prefix;
      if (name.rfind(p, 0) == 0) {
        target = set;
        key = name.substr(p.size());
      }
    }
    if (!target || key.empty()) fail(ErrorCode::FormatError, "unexpected tensor " + name);
    Tensor& t = target->add(key, shape);
    for (std::size_t i = 0; i < count; ++i)
      t.data[i] = dtype == kDtypeF64 ? cur.get<double>() : static_cast<double>(cur.get<float>());
  }
  if (c.optim.m.tensor_count() == 0) {
    const auto t = c.optim.t;
    c.optim = OptimState::zeros_like(c.params);
    c.optim.t = t;
  }
  c.params.check_compatible(c.optim.m);
  c.params.check_compatible(c.optim.v);
  return c;
}

// ---- loops ----

std::int64_t steps_per_epoch(std::size_t n_cases, int batch_size) {
  if (batch_size < 1) fail(ErrorCode::ConfigError, "batch_size must be >= 1");
  return static_cast<std::int64_t>((n_cases + batch_size - 1) / batch_size);
}

namespace {

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint64_t tag, std::int64_t epoch,
                                     std::size_t n) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  CounterRng rng = CounterRng::stream(seed, {tag, static_cast<std::uint64_t>(epoch)});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

class JsonLines {
 public:
  JsonLines(const fs::path& dir, const std::string& name, bool append) {
    if (dir.empty()) return;
    fs::create_directories(dir);
    f_.open(dir / name, append ? std::ios::app : std::ios::trunc);
    if (!f_) fail(ErrorCode::IoError, "cannot write " + (dir / name).string());
  }
  void write(const json& j) {
    if (!f_.is_open()) return;
    f_ << j.dump() << '\n';
    f_.flush();
  }

 private:
  std::ofstream f_;
};

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail(ErrorCode::IoError, "cannot write " + path.string());
  f << j.dump(2) << '\n';
}

void scale(ParamSet& grads, double s) {
  for (auto& [name, g] : grads)
    for (double& x : g.data) x *= s;
}

// Clips in place; returns the pre-clip norm.
std::pair<double, bool> clip(ParamSet& grads, double max_norm) {
  const double n = global_norm(grads);
  if (max_norm > 0.0 && n > max_norm) {
    scale(grads, max_norm / n);
    return {n, true};
  }
  return {n, false};
}

}  // namespace

PretrainResult pretrain_loop(const RunConfig& cfg, const CaseProvider& data,
                             const std::optional<Checkpoint>& init, const RunOutputs& out) {
  cfg.validate();
  PretrainResult res;
  Checkpoint& ck = res.checkpoint;
  if (init) {
    ck = *init;
    ck.params.check_compatible(network::init_params(cfg.net, cfg.seed));
    if (ck.optim.m.tensor_count() == 0) ck.optim = OptimState::zeros_like(ck.params);
  } else {
    ck.params = network::init_params(cfg.net, cfg.seed);
    ck.optim = OptimState::zeros_like(ck.params);
  }
  ck.config = cfg;
  ck.task = "pretrain";

  if (!out.dir.empty()) {
    fs::create_directories(out.dir);
    write_json_file(out.dir / "resolved_config.json", to_json(cfg));
  }
  if (cfg.epochs == 0) {
    if (!out.dir.empty()) save_checkpoint(ck, out.dir / "final.bfmc");
    return res;
  }
  const std::size_t n = data.size();
  if (n == 0) fail(ErrorCode::EmptyBatch, "pretraining needs at least one case");

  const std::int64_t spe = steps_per_epoch(n, cfg.batch_size);
  const std::int64_t total = spe * cfg.epochs;
  const std::int64_t stop = cfg.max_steps > 0 ? std::min(total, cfg.max_steps) : total;

  const auto prep = cfg.effective_prep();
  const auto tok = cfg.tokenizer_config();
  const auto src = cfg.embedding_source();
  embed::EmbeddingCache cache;
  std::map<std::size_t, corpus::Session> raw;
  std::map<std::size_t, preprocess::PreparedSession> prepared;
  auto session_at = [&](std::size_t idx, std::uint64_t draw) {
    auto it = raw.find(idx);
    if (it == raw.end()) it = raw.emplace(idx, data.load(idx).session).first;
    if (cfg.augment) return preprocess::preprocess_session(it->second, prep, draw);
    auto p = prepared.find(idx);
    if (p == prepared.end()) p = prepared.emplace(idx, preprocess::preprocess_session(it->second, prep)).first;
    return p->second;
  };

  JsonLines metrics(out.dir, "metrics.jsonl", init.has_value());
  JsonLines ops(cfg.debug_ops ? out.dir : fs::path{}, "ops.jsonl", init.has_value());
  const AdamWConfig base{cfg.lr_max, cfg.beta1, cfg.beta2, cfg.eps_opt, cfg.weight_decay};

  for (std::int64_t s = ck.step; s < stop; ++s) {
    const std::int64_t epoch = s / spe;
    const std::int64_t pos = s % spe;
    const auto order = epoch_order(cfg.seed, stable_hash("epoch"), epoch, n);
    std::vector<preprocess::PreparedSession> sessions;
    for (int k = 0; k < cfg.batch_size; ++k) {
      const std::size_t idx = order[static_cast<std::size_t>(pos * cfg.batch_size + k) % n];
      const auto draw = static_cast<std::uint64_t>(s * cfg.batch_size + k + 1);
      sessions.push_back(session_at(idx, draw));
      if (cfg.debug_ops)
        ops.write({{"step", s}, {"case", sessions.back().case_id},
                   {"ops", preprocess::applied_ops_json(sessions.back())}});
    }
    const auto batch = tokenizer::assemble_batch(sessions, tok, src, &cache,
                                                 static_cast<std::uint64_t>(s));
    const auto lambdas = objectives::warmup_lambdas(s, spe, cfg.lambda_var_max,
                                                    cfg.lambda_cov_max, cfg.warm_epochs);
    ParamSet grads = ck.params.zeros_like();
    const auto report =
        objectives::pretrain_objective(ck.params, cfg.net, batch, lambdas, &grads, cfg.threads);
    const auto [norm, clipped] = clip(grads, cfg.grad_clip);
    AdamWConfig step_cfg = base;
    step_cfg.lr = lr_schedule(s, total, cfg.warmup_fraction, cfg.lr_max, cfg.lr_min);
    adamw_step(ck.params, grads, ck.optim, step_cfg);
    ck.step = s + 1;
    ck.epoch = static_cast<int>(ck.step / spe);

    json line = {{"step", s},
                 {"epoch", epoch},
                 {"lr", step_cfg.lr},
                 {"l_mae", report.l_mae},
                 {"l_var", report.l_var},
                 {"l_cov", report.l_cov},
                 {"l_total", report.l_total},
                 {"lambda_var", lambdas.var},
                 {"lambda_cov", lambdas.cov},
                 {"grad_norm", norm},
                 {"clipped", clipped}};
    metrics.write(line);
    res.metrics.push_back(std::move(line));
    if (!out.dir.empty() && ck.step % spe == 0) save_checkpoint(ck, out.dir / "last.bfmc");
  }
  if (!out.dir.empty()) save_checkpoint(ck, out.dir / "final.bfmc");
  return res;
}

Task parse_task(const std::string& name) {
  if (name == "segmentation") return Task::Segmentation;
  if (name == "classification") return Task::Classification;
  fail(ErrorCode::ConfigError, "unknown task '" + name + "'");
}

std::string task_name(Task t) {
  return t == Task::Segmentation ? "segmentation" : "classification";
}

double segmentation_loss(std::span<const double> logits, std::span<const float> target,
                         std::vector<double>* d_logits) {
  if (logits.size() != target.size() || logits.empty())
    fail(ErrorCode::ShapeError, "segmentation logits and target differ in size");
  const auto n = static_cast<double>(logits.size());
  std::vector<double> p(logits.size());
  double bce = 0.0, inter = 0.0, psum = 0.0, ysum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double x = logits[i];
    const double y = target[i] > 0.5f ? 1.0 : 0.0;
    p[i] = 1.0 / (1.0 + std::exp(-x));
    bce += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
    inter += p[i] * y;
    psum += p[i];
    ysum += y;
  }
  bce /= n;
  const double denom = psum + ysum + 1.0;
  const double dice = (2.0 * inter + 1.0) / denom;
  if (d_logits) {
    d_logits->assign(logits.size(), 0.0);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double y = target[i] > 0.5f ? 1.0 : 0.0;
      const double d_dice_dp = (2.0 * y * denom - (2.0 * inter + 1.0)) / (denom * denom);
      const double dp_dx = p[i] * (1.0 - p[i]);
      (*d_logits)[i] = 0.5 * (-d_dice_dp * dp_dx) + 0.5 * (p[i] - y) / n;
    }
  }
  return 0.5 * (1.0 - dice) + 0.5 * bce;
}

double classification_loss(std::span<const double> logits, int label,
                           std::vector<double>* d_logits) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size())
    fail(ErrorCode::RangeError, "class label outside logits");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double x : logits) z += std::exp(x - mx);
  const double lse = mx + std::log(z);
  if (d_logits) {
    d_logits->resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i)
      (*d_logits)[i] = std::exp(logits[i] - lse) - (static_cast<int>(i) == label ? 1.0 : 0.0);
  }
  return lse - logits[static_cast<std::size_t>(label)];
}

tokenizer::SessionTokens tokenize_unmasked(const preprocess::PreparedSession& s,
                                           const RunConfig& cfg,
                                           const embed::EmbeddingSource& src,
                                           embed::EmbeddingCache* cache) {
  auto t = cfg.tokenizer_config();
  t.mask_ratio = 0.0;
  t.drop_prob = 0.0;
  CounterRng rng = CounterRng::stream(cfg.seed, {stable_hash("unmasked")});
  return tokenizer::tokenize_session(s, t, src, cache, rng);
}

SegmentationForward segment_forward(const ParamSet& p, const network::NetConfig& net,
                                    const tokenizer::SessionTokens& s) {
  SegmentationForward f;
  f.enc = network::encode_session(p, net, s);
  f.grid = network::fuse_grid_latents(s, f.enc, net.embed_dim, &f.counts);
  f.logits = network::head_segment(f.grid, s.patches.grid_dims, net, p);
  return f;
}

ClassificationForward classify_forward(const ParamSet& p, const network::NetConfig& net,
                                       const tokenizer::SessionTokens& s) {
  ClassificationForward f;
  f.enc = network::encode_session(p, net, s);
  f.logits = network::head_classify(f.enc.pooled, p);
  return f;
}

namespace {

bool is_task_head(const std::string& name, Task task) {
  return name.rfind(task == Task::Segmentation ? "head.seg." : "head.cls.", 0) == 0;
}

struct Supervised {
  tokenizer::SessionTokens tokens;
  std::vector<float> target;  // segmentation voxels (channel 0)
  int class_label = 0;
};

Supervised prepare_supervised(const LabeledCase& lc, Task task, const RunConfig& cfg,
                              std::uint64_t draw, const embed::EmbeddingSource& src,
                              embed::EmbeddingCache* cache) {
  Supervised sv;
  if (task == Task::Segmentation && !lc.label)
    fail(ErrorCode::NotFound, "case '" + lc.session.case_id + "' has no label volume");
  if (task == Task::Classification && !lc.class_label)
    fail(ErrorCode::NotFound, "case '" + lc.session.case_id + "' has no class label");
  const auto prepared = preprocess::preprocess_session(
      lc.session, cfg.effective_prep(), draw, lc.label ? &*lc.label : nullptr);
  sv.tokens = tokenize_unmasked(prepared, cfg, src, cache);
  if (task == Task::Segmentation) sv.target = prepared.label->voxels;
  if (lc.class_label) sv.class_label = *lc.class_label;
  return sv;
}

// Loss and (optionally) gradients for one case. Encoder gradients are only
// propagated when `encoder_grads` is set.
double supervised_step(const ParamSet& p, const network::NetConfig& net, Task task,
                       const Supervised& sv, ParamSet* grads, bool encoder_grads) {
  if (task == Task::Segmentation) {
    auto f = segment_forward(p, net, sv.tokens);
    const std::size_t vox = sv.target.size();
    if (f.logits.size() < vox) fail(ErrorCode::ShapeError, "segmentation head size mismatch");
    std::vector<double> d;
    const double loss = segmentation_loss(std::span(f.logits).subspan(0, vox), sv.target,
                                          grads ? &d : nullptr);
    if (grads) {
      d.resize(f.logits.size(), 0.0);
      const Matrix d_grid = network::head_segment_backward(f.grid, sv.tokens.patches.grid_dims,
                                                           net, p, d, *grads);
      if (encoder_grads) {
        const Matrix d_lat = network::fuse_grid_backward(sv.tokens, f.enc, d_grid, f.counts);
        network::encode_backward(p, net, sv.tokens, f.enc, d_lat, *grads, false);
      }
    }
    return loss;
  }
  auto f = classify_forward(p, net, sv.tokens);
  std::vector<double> d;
  const double loss = classification_loss(f.logits, sv.class_label, grads ? &d : nullptr);
  if (grads) {
    const auto& w = p.at("head.cls.weight").data;
    auto& gw = grads->at("head.cls.weight").data;
    auto& gb = grads->at("head.cls.bias").data;
    const std::size_t dim = f.enc.pooled.size();
    std::vector<double> d_pooled(dim, 0.0);
    for (std::size_t c = 0; c < d.size(); ++c) {
      gb[c] += d[c];
      for (std::size_t j = 0; j < dim; ++j) {
        gw[c * dim + j] += d[c] * f.enc.pooled[j];
        d_pooled[j] += d[c] * w[c * dim + j];
      }
    }
    if (encoder_grads) {
      Matrix d_lat(f.enc.latents.rows, f.enc.latents.cols);
      const double inv = 1.0 / f.enc.latents.rows;
      for (int r = 0; r < d_lat.rows; ++r)
        for (int j = 0; j < d_lat.cols; ++j) d_lat(r, j) = d_pooled[j] * inv;
      network::encode_backward(p, net, sv.tokens, f.enc, d_lat, *grads, false);
    }
  }
  return loss;
}

// Mean Dice (segmentation) or accuracy (classification) over `cases`.
double validation_metric(const ParamSet& p, const network::NetConfig& net, Task task,
                         const std::vector<Supervised>& cases) {
  double sum = 0.0;
  for (const auto& sv : cases) {
    if (task == Task::Segmentation) {
      const auto f = segment_forward(p, net, sv.tokens);
      const auto& d = sv.tokens.dims;
      evaluation::BinaryMask pred{d, std::vector<std::uint8_t>(sv.target.size()), {1, 1, 1}};
      evaluation::BinaryMask ref{d, std::vector<std::uint8_t>(sv.target.size()), {1, 1, 1}};
      for (std::size_t i = 0; i < sv.target.size(); ++i) {
        pred.bits[i] = f.logits[i] > 0.0;
        ref.bits[i] = sv.target[i] > 0.5f;
      }
      sum += evaluation::dice(pred, ref);
    } else {
      const auto f = classify_forward(p, net, sv.tokens);
      const auto best = std::max_element(f.logits.begin(), f.logits.end()) - f.logits.begin();
      sum += best == sv.class_label ? 1.0 : 0.0;
    }
  }
  return cases.empty() ? 0.0 : sum / static_cast<double>(cases.size());
}

}  // namespace

FinetuneResult finetune(const RunConfig& cfg_in, Task task, const Checkpoint& init,
                        const CaseProvider& train, const CaseProvider& val,
                        const RunOutputs& out) {
  RunConfig cfg = cfg_in;
  cfg.mask_ratio = 0.0;
  cfg.drop_prob = 0.0;
  cfg.task = task_name(task);
  cfg.validate();
  init.params.check_compatible(network::init_params(cfg.net, 0));
  if (train.size() == 0) fail(ErrorCode::EmptyBatch, "finetuning needs at least one case");

  FinetuneResult res;
  Checkpoint& ck = res.checkpoint;
  ck.config = cfg;
  ck.task = task_name(task);
  ck.params = init.params;
  ck.optim = OptimState::zeros_like(ck.params);
  ck.extra = {{"init_step", init.step}};

  const bool frozen = cfg.freeze_encoder;
  auto trainable = [&](const std::string& name) {
    if (is_task_head(name, task)) return true;
    return !frozen && !network::is_head_param(name) && !network::is_decoder_param(name);
  };

  const auto src = cfg.embedding_source();
  embed::EmbeddingCache cache;
  std::vector<Supervised> val_cases;
  const CaseProvider& vsrc = val.size() > 0 ? val : train;
  RunConfig eval_cfg = cfg;
  eval_cfg.augment = false;
  for (std::size_t i = 0; i < vsrc.size(); ++i)
    val_cases.push_back(prepare_supervised(vsrc.load(i), task, eval_cfg, 0, src, &cache));
  std::map<std::size_t, LabeledCase> raw;
  std::map<std::size_t, Supervised> fixed;
  auto case_at = [&](std::size_t idx, std::uint64_t draw) {
    auto it = raw.find(idx);
    if (it == raw.end()) it = raw.emplace(idx, train.load(idx)).first;
    if (cfg.augment) return prepare_supervised(it->second, task, cfg, draw, src, &cache);
    auto f = fixed.find(idx);
    if (f == fixed.end())
      f = fixed.emplace(idx, prepare_supervised(it->second, task, cfg, 0, src, &cache)).first;
    return f->second;
  };

  if (!out.dir.empty()) {
    fs::create_directories(out.dir);
    write_json_file(out.dir / "resolved_config.json", to_json(cfg));
  }
  JsonLines log(out.dir, "finetune.jsonl", false);

  const std::size_t n = train.size();
  const std::int64_t spe = steps_per_epoch(n, cfg.batch_size);
  const std::int64_t total = spe * cfg.epochs;
  const AdamWConfig base{cfg.lr_max, cfg.beta1, cfg.beta2, cfg.eps_opt, cfg.weight_decay};

  ParamSet best = ck.params;
  double best_metric = -1.0;
  int bad_epochs = 0;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(cfg.seed, stable_hash("finetune-epoch"), epoch, n);
    double loss_sum = 0.0;
    for (std::int64_t pos = 0; pos < spe; ++pos, ++step) {
      std::vector<Supervised> batch;
      for (int k = 0; k < cfg.batch_size; ++k) {
        const std::size_t idx = order[static_cast<std::size_t>(pos * cfg.batch_size + k) % n];
        batch.push_back(case_at(idx, static_cast<std::uint64_t>(step * cfg.batch_size + k + 1)));
      }
      const int b = static_cast<int>(batch.size());
      std::vector<ParamSet> per(b);
      std::vector<double> losses(b);
      parallel_for(b, cfg.threads, [&](int i) {
        per[i] = ck.params.zeros_like();
        losses[i] = supervised_step(ck.params, cfg.net, task, batch[i], &per[i], !frozen);
      });
      ParamSet grads = ck.params.zeros_like();
      double loss = 0.0;
      for (int i = 0; i < b; ++i) {
        loss += losses[i];
        for (auto& [name, g] : grads) {
          const auto& src_g = per[i].at(name).data;
          for (std::size_t j = 0; j < g.data.size(); ++j) g.data[j] += src_g[j];
        }
      }
      scale(grads, 1.0 / b);
      loss /= b;
      if (!std::isfinite(loss)) fail(ErrorCode::NonFiniteLoss, "non-finite finetune loss");
      for (auto& [name, g] : grads)
        if (!trainable(name)) std::fill(g.data.begin(), g.data.end(), 0.0);
      clip(grads, cfg.grad_clip);
      AdamWConfig step_cfg = base;
      step_cfg.lr = lr_schedule(step, total, cfg.warmup_fraction, cfg.lr_max, cfg.lr_min);
      adamw_step(ck.params, grads, ck.optim, step_cfg, trainable);
      loss_sum += loss;
    }
    const double metric = validation_metric(ck.params, cfg.net, task, val_cases);
    json entry = {{"epoch", epoch},
                  {"train_loss", loss_sum / static_cast<double>(spe)},
                  {task == Task::Segmentation ? "val_dice" : "val_accuracy", metric}};
    log.write(entry);
    res.history.push_back(std::move(entry));
    res.epochs_run = epoch + 1;
    if (metric > best_metric) {
      best_metric = metric;
      best = ck.params;
      bad_epochs = 0;
    } else if (++bad_epochs >= cfg.patience) {
      break;
    }
  }
  ck.step = step;
  ck.epoch = res.epochs_run;
  if (res.epochs_run > 0) ck.params = best;
  res.best_metric = std::max(best_metric, 0.0);
  ck.extra["best_metric"] = res.best_metric;
  if (!out.dir.empty()) save_checkpoint(ck, out.dir / "final.bfmc");
  return res;
}

}  // namespace bfm::training

namespace bfm::training {

objectives::GradcheckReport run_gradcheck(const RunConfig& cfg) {
  cfg.validate();
  RunConfig c = cfg;
  c.synth_cases = std::max(c.synth_cases, c.batch_size);
  const auto data = synthetic_provider(c);
  const auto prep = c.effective_prep();
  std::vector<preprocess::PreparedSession> sessions;
  for (int k = 0; k < c.batch_size; ++k)
    sessions.push_back(preprocess::preprocess_session(data->load(static_cast<std::size_t>(k)).session, prep));
  const auto src = c.embedding_source();
  embed::EmbeddingCache cache;
  const auto batch = tokenizer::assemble_batch(sessions, c.tokenizer_config(), src, &cache, 0);
  const auto params = network::init_params(c.net, c.seed);
  objectives::GradcheckConfig g;
  g.step = c.gradcheck_step;
  g.tol_rel = c.gradcheck_tol;
  g.samples = c.gradcheck_samples;
  g.seed = c.seed;
  g.stencil = c.gradcheck_stencil;
  const objectives::Lambdas lambdas{c.lambda_var_max, c.lambda_cov_max};
  return objectives::gradcheck_model(params, c.net, batch, lambdas, g);
}

}  // namespace bfm::training
