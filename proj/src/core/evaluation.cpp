#include "evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "error.hpp"
#include "objectives.hpp"
#include "parallel.hpp"

namespace bfm::evaluation {

namespace {

void require_same_dims(const BinaryMask& a, const BinaryMask& b) {
  if (a.dims != b.dims) fail(ErrorCode::ShapeError, "mask dims differ");
  if (a.bits.size() != corpus::voxel_count(a.dims) || b.bits.size() != a.bits.size())
    fail(ErrorCode::ShapeError, "mask bit count does not match dims");
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// Squared distance transform along one line: out[p] = min_q f[q] + w (p - q)^2
// (lower envelope of parabolas).
void edt_line(const std::vector<double>& f, double w, std::vector<double>& out,
              std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double s;
    for (;;) {
      const int r = v[k];
      s = ((f[q] + w * q * q) - (f[r] + w * r * r)) / (2.0 * w * (q - r));
      if (s > z[k]) break;
      --k;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  if (k < 0) {
    std::fill(out.begin(), out.end(), kInf);
    return;
  }
  int j = 0;
  for (int p = 0; p < n; ++p) {
    while (z[j + 1] < p) ++j;
    const int q = v[j];
    out[p] = f[q] + w * (p - q) * (p - q);
  }
}

// Exact squared Euclidean distance to the nearest seed, honouring spacing.
std::vector<double> squared_edt(const corpus::Dims& d, const std::vector<std::uint8_t>& seeds,
                                const corpus::Spacing& spacing) {
  std::vector<double> dist(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) dist[i] = seeds[i] ? 0.0 : kInf;
  for (int axis = 0; axis < 3; ++axis) {
    const int n = d[axis];
    const double w = spacing[axis] * spacing[axis];
    std::vector<double> f(n), out(n), z(n + 1);
    std::vector<int> v(n);
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    for (int j = 0; j < d[a2]; ++j)
      for (int i = 0; i < d[a1]; ++i) {
        std::array<int, 3> c{};
        c[a1] = i;
        c[a2] = j;
        for (int t = 0; t < n; ++t) {
          c[axis] = t;
          f[t] = dist[corpus::voxel_index(d, c[0], c[1], c[2])];
        }
        edt_line(f, w, out, v, z);
        for (int t = 0; t < n; ++t) {
          c[axis] = t;
          dist[corpus::voxel_index(d, c[0], c[1], c[2])] = out[t];
        }
      }
  }
  return dist;
}

}  // namespace

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](auto b) { return b != 0; }));
}

BinaryMask mask_from_volume(const preprocess::Volume& v, float threshold) {
  BinaryMask m{v.dims, std::vector<std::uint8_t>(v.voxels.size()), v.spacing};
  for (std::size_t i = 0; i < v.voxels.size(); ++i) m.bits[i] = v.voxels[i] > threshold;
  return m;
}

double dice(const BinaryMask& a, const BinaryMask& b) {
  require_same_dims(a, b);
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    const bool x = a.bits[i], y = b.bits[i];
    na += x;
    nb += y;
    both += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

std::vector<std::size_t> surface_voxels(const BinaryMask& m) {
  const auto& d = m.dims;
  std::vector<std::size_t> out;
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        const std::size_t i = corpus::voxel_index(d, x, y, z);
        if (!m.bits[i]) continue;
        const int c[3] = {x, y, z};
        bool surface = false;
        for (int a = 0; a < 3 && !surface; ++a)
          for (int s : {-1, 1}) {
            int n[3] = {c[0], c[1], c[2]};
            n[a] += s;
            if (n[a] < 0 || n[a] >= d[a] || !m.bits[corpus::voxel_index(d, n[0], n[1], n[2])]) {
              surface = true;
              break;
            }
          }
        if (surface) out.push_back(i);
      }
  return out;
}

std::vector<double> surface_distances(const BinaryMask& from, const BinaryMask& to) {
  require_same_dims(from, to);
  if (from.spacing != to.spacing) fail(ErrorCode::ShapeError, "mask spacings differ");
  const auto src = surface_voxels(from);
  const auto dst = surface_voxels(to);
  if (src.empty() || dst.empty()) fail(ErrorCode::InvalidArgument, "surface distance of empty mask");
  std::vector<std::uint8_t> seeds(to.bits.size(), 0);
  for (auto i : dst) seeds[i] = 1;
  const auto sq = squared_edt(to.dims, seeds, to.spacing);
  std::vector<double> out;
  out.reserve(src.size());
  for (auto i : src) out.push_back(std::sqrt(sq[i]));
  return out;
}

std::optional<double> hd95(const BinaryMask& a, const BinaryMask& b) {
  require_same_dims(a, b);
  if (a.count() == 0 || b.count() == 0) return std::nullopt;
  auto all = surface_distances(a, b);
  const auto back = surface_distances(b, a);
  all.insert(all.end(), back.begin(), back.end());
  std::sort(all.begin(), all.end());
  const double pos = 0.95 * static_cast<double>(all.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, all.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return all[lo] + frac * (all[hi] - all[lo]);
}

std::pair<double, double> sensitivity_specificity(const BinaryMask& pred, const BinaryMask& ref) {
  require_same_dims(pred, ref);
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    const bool p = pred.bits[i], r = ref.bits[i];
    if (p && r) ++tp;
    else if (p) ++fp;
    else if (r) ++fn;
    else ++tn;
  }
  const double sens = tp + fn == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  const double spec = tn + fp == 0 ? 1.0 : static_cast<double>(tn) / static_cast<double>(tn + fp);
  return {sens, spec};
}

std::vector<AvailabilityConfig> default_availability() {
  return {
      {"Complete", {"t1", "t1c", "t2", "flair"}},
      {"Dropped (T1c)", {"t1", "t2", "flair"}},
      {"Dropped (T2)", {"t1", "t1c", "flair"}},
      {"Dropped (FLAIR)", {"t1", "t1c", "t2"}},
      {"Unseen (T1+FLAIR only)", {"t1", "flair"}},
      {"Unseen (T2 only)", {"t2"}},
  };
}

namespace {

RunConfig eval_config(const training::Checkpoint& ck) {
  RunConfig cfg = ck.config;
  cfg.augment = false;
  cfg.mask_ratio = 0.0;
  cfg.drop_prob = 0.0;
  return cfg;
}

void check_task(const training::Checkpoint& ck, training::Task task) {
  if (ck.task != training::task_name(task))
    fail(ErrorCode::ConfigError, "checkpoint was trained for '" + ck.task + "', not '" +
                                     training::task_name(task) + "'");
}

}  // namespace

CaseMetrics evaluate_case(const training::Checkpoint& ck, const training::LabeledCase& c,
                          training::Task task, embed::EmbeddingCache* cache) {
  const RunConfig cfg = eval_config(ck);
  const auto src = cfg.embedding_source();
  CaseMetrics m;
  m.case_id = c.session.case_id;
  if (task == training::Task::Segmentation) {
    if (!c.label) fail(ErrorCode::NotFound, "case '" + m.case_id + "' has no label volume");
    const auto prepared = preprocess::preprocess_session(c.session, cfg.effective_prep(), 0, &*c.label);
    const auto tokens = training::tokenize_unmasked(prepared, cfg, src, cache);
    const auto f = training::segment_forward(ck.params, cfg.net, tokens);
    const BinaryMask ref = mask_from_volume(*prepared.label);
    BinaryMask pred{ref.dims, std::vector<std::uint8_t>(ref.bits.size()), ref.spacing};
    for (std::size_t i = 0; i < pred.bits.size(); ++i) pred.bits[i] = f.logits[i] > 0.0;
    m.dice = dice(pred, ref);
    m.hd95 = hd95(pred, ref);
    std::tie(m.sensitivity, m.specificity) = sensitivity_specificity(pred, ref);
  } else {
    if (!c.class_label) fail(ErrorCode::NotFound, "case '" + m.case_id + "' has no class label");
    const auto prepared = preprocess::preprocess_session(c.session, cfg.effective_prep(), 0);
    const auto tokens = training::tokenize_unmasked(prepared, cfg, src, cache);
    const auto f = training::classify_forward(ck.params, cfg.net, tokens);
    m.predicted_class =
        static_cast<int>(std::max_element(f.logits.begin(), f.logits.end()) - f.logits.begin());
    m.true_class = *c.class_label;
  }
  return m;
}

MetricRow aggregate(const std::string& name, const std::vector<CaseMetrics>& cases,
                    training::Task task, int n_skipped) {
  MetricRow row;
  row.config = name;
  row.n_cases = static_cast<int>(cases.size());
  row.n_skipped = n_skipped;
  if (cases.empty()) return row;
  const auto n = static_cast<double>(cases.size());
  if (task == training::Task::Segmentation) {
    double d = 0.0, se = 0.0, sp = 0.0, h = 0.0;
    int nh = 0;
    for (const auto& c : cases) {
      d += c.dice;
      se += c.sensitivity;
      sp += c.specificity;
      if (c.hd95) {
        h += *c.hd95;
        ++nh;
      }
    }
    row.dice = d / n;
    row.sensitivity = se / n;
    row.specificity = sp / n;
    if (nh > 0) row.hd95 = h / nh;
  } else {
    int tp = 0, fp = 0, tn = 0, fn = 0;
    for (const auto& c : cases) {
      const bool p = c.predicted_class == 1, r = c.true_class == 1;
      if (p && r) ++tp;
      else if (p) ++fp;
      else if (r) ++fn;
      else ++tn;
    }
    row.sensitivity = tp + fn == 0 ? 1.0 : double(tp) / double(tp + fn);
    row.specificity = tn + fp == 0 ? 1.0 : double(tn) / double(tn + fp);
  }
  return row;
}

namespace {

std::vector<CaseMetrics> run_cases(const training::Checkpoint& ck,
                                   const std::vector<training::LabeledCase>& cases,
                                   training::Task task, int threads, embed::EmbeddingCache* cache) {
  std::vector<CaseMetrics> out(cases.size());
  parallel_for(static_cast<int>(cases.size()), threads,
               [&](int i) { out[i] = evaluate_case(ck, cases[i], task, cache); });
  return out;
}

}  // namespace

MetricRow evaluate_direct(const training::Checkpoint& ck, const training::CaseProvider& data,
                          training::Task task, int threads) {
  check_task(ck, task);
  std::vector<training::LabeledCase> cases;
  for (std::size_t i = 0; i < data.size(); ++i) cases.push_back(data.load(i));
  embed::EmbeddingCache cache;
  return aggregate("direct", run_cases(ck, cases, task, threads, &cache), task);
}

MatrixReport availability_matrix_eval(const training::Checkpoint& ck,
                                      const training::CaseProvider& data,
                                      const std::vector<AvailabilityConfig>& configs,
                                      training::Task task, int threads) {
  check_task(ck, task);
  if (configs.empty()) fail(ErrorCode::ConfigError, "no availability configurations");
  std::vector<training::LabeledCase> all;
  for (std::size_t i = 0; i < data.size(); ++i) all.push_back(data.load(i));

  MatrixReport report;
  embed::EmbeddingCache cache;
  for (const auto& cfg : configs) {
    if (cfg.available.empty())
      fail(ErrorCode::ConfigError, "configuration '" + cfg.name + "' has no modalities");
    std::set<std::string> available;
    for (const auto& m : cfg.available) available.insert(embed::normalize_modality_name(m));
    std::vector<training::LabeledCase> kept;
    int skipped = 0;
    for (const auto& c : all) {
      training::LabeledCase r = c;
      for (auto it = r.session.volumes.begin(); it != r.session.volumes.end();) {
        if (available.count(it->first)) ++it;
        else it = r.session.volumes.erase(it);
      }
      if (r.session.volumes.empty()) {
        ++skipped;
        report.skipped.push_back(cfg.name + ": " + c.session.case_id);
        continue;
      }
      kept.push_back(std::move(r));
    }
    report.rows.push_back(aggregate(cfg.name, run_cases(ck, kept, task, threads, &cache), task, skipped));
  }
  return report;
}

std::string metric_rows_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream out;
  out.precision(17);
  out << "config,dice,hd95,sensitivity,specificity,n_cases,n_skipped\n";
  for (const auto& r : rows) {
    std::string name = r.config;
    if (name.find_first_of(",\"") != std::string::npos) {
      std::string quoted = "\"";
      for (char ch : name) quoted += ch == '"' ? std::string("\"\"") : std::string(1, ch);
      name = quoted + "\"";
    }
    out << name << ',';
    if (r.dice) out << *r.dice; else out << "NA";
    out << ',';
    if (r.hd95) out << *r.hd95; else out << "NA";
    // A row with no evaluated case has no rates either.
    if (r.n_cases > 0) out << ',' << r.sensitivity << ',' << r.specificity;
    else out << ",NA,NA";
    out << ',' << r.n_cases << ',' << r.n_skipped << '\n';
  }
  return out.str();
}

Imputation impute_modality(const training::Checkpoint& ck, const corpus::Session& session,
                           const std::string& target_raw) {
  const std::string target = embed::normalize_modality_name(target_raw);
  const RunConfig cfg = eval_config(ck);
  const auto src = cfg.embedding_source();

  corpus::Session sources = session;
  std::optional<corpus::RawVolume> truth;
  if (auto it = sources.volumes.find(target); it != sources.volumes.end()) {
    truth = it->second;
    sources.volumes.erase(it);
  }
  if (sources.volumes.empty())
    fail(ErrorCode::ConfigError, "imputing '" + target + "' needs at least one other modality");

  corpus::Session full = sources;
  if (truth) full.volumes.emplace(target, *truth);
  const auto prepared_full = preprocess::preprocess_session(full, cfg.effective_prep(), 0);
  preprocess::PreparedSession prepared = prepared_full;
  prepared.volumes.erase(target);

  auto tokens = training::tokenize_unmasked(prepared, cfg, src, nullptr);
  const int n_src = tokens.patches.n_modalities;
  const int per_mod = tokens.patches.patches_per_modality();
  const int pv = tokens.patches.patch_voxels();

  // Append the target modality as an all-hidden lattice over every cell that
  // holds a valid source patch.
  const auto e = embed::embed_modality(target, src, nullptr);
  tokens.modalities.push_back(e.name);
  Matrix emb(n_src + 1, src.dim);
  std::copy(tokens.modality_embeddings.data.begin(), tokens.modality_embeddings.data.end(),
            emb.data.begin());
  std::copy(e.vector.begin(), e.vector.end(), emb.row(n_src).begin());
  tokens.modality_embeddings = std::move(emb);

  tokenizer::PatchSet truth_patches;
  if (truth) {
    preprocess::PreparedSession only;
    only.case_id = prepared_full.case_id;
    only.volumes.emplace(target, prepared_full.volumes.at(target));
    truth_patches = tokenizer::patchify(only, cfg.net.patch, cfg.min_nonzero_fraction);
  }

  auto& ps = tokens.patches;
  Matrix voxels(ps.voxels.rows + per_mod, pv);
  std::copy(ps.voxels.data.begin(), ps.voxels.data.end(), voxels.data.begin());
  ps.voxel_valid.resize(static_cast<std::size_t>(ps.voxels.rows + per_mod) * pv, 0);
  std::vector<int> hidden;
  for (int c = 0; c < per_mod; ++c) {
    tokenizer::PatchInfo info;
    info.modality = n_src;
    info.grid = ps.patches[c].grid;
    const int idx = n_src * per_mod + c;
    std::uint8_t* vmask = ps.voxel_valid.data() + static_cast<std::size_t>(idx) * pv;
    for (int m = 0; m < n_src; ++m) {
      const auto& sp = ps.patches[m * per_mod + c];
      if (!sp.valid) continue;
      info.valid = true;
      const std::uint8_t* smask = ps.voxel_valid.data() + static_cast<std::size_t>(m * per_mod + c) * pv;
      for (int k = 0; k < pv; ++k) vmask[k] |= smask[k];
    }
    info.in_extent_count = static_cast<int>(std::count(vmask, vmask + pv, 1));
    if (truth) {
      auto row = voxels.row(idx);
      const auto trow = truth_patches.voxels.row(c);
      std::copy(trow.begin(), trow.end(), row.begin());
    }
    ps.patches.push_back(info);
    if (info.valid) hidden.push_back(idx);
  }
  ps.voxels = std::move(voxels);
  ps.n_modalities = n_src + 1;
  tokens.plan = {};
  tokens.plan.hidden = hidden;
  tokens.plan.ratio = 1.0;

  Imputation res;
  res.hidden_patches = static_cast<int>(hidden.size());
  const auto& ref = prepared.volumes.begin()->second;
  res.volume.dims = ref.dims;
  res.volume.spacing = ref.spacing;
  res.volume.modality = target;
  res.volume.valid_extent = ref.valid_extent;
  res.volume.voxels.assign(corpus::voxel_count(ref.dims), 0.0f);
  if (hidden.empty()) return res;

  const auto enc = network::encode_session(ck.params, cfg.net, tokens);
  const auto dec = network::decode_session(ck.params, cfg.net, tokens, enc);
  const auto& p = cfg.net.patch;
  for (std::size_t h = 0; h < dec.hidden.size(); ++h) {
    const auto& info = ps.patches[dec.hidden[h]];
    const std::uint8_t* vmask = ps.voxel_valid.data() + static_cast<std::size_t>(dec.hidden[h]) * pv;
    int k = 0;
    for (int z = 0; z < p[2]; ++z)
      for (int y = 0; y < p[1]; ++y)
        for (int x = 0; x < p[0]; ++x, ++k) {
          if (!vmask[k]) continue;
          const std::size_t v = corpus::voxel_index(ref.dims, info.grid[0] * p[0] + x,
                                                    info.grid[1] * p[1] + y, info.grid[2] * p[2] + z);
          res.volume.voxels[v] = static_cast<float>(dec.recon(static_cast<int>(h), k));
        }
  }
  if (truth) {
    const auto term = objectives::mae_sum(dec.recon, dec.hidden, ps);
    if (term.count > 0) res.mse = term.value / static_cast<double>(term.count);
  }
  return res;
}

}  // namespace bfm::evaluation
