#include "objectives.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "error.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace bfm::objectives {

namespace {

void require_batch(const Matrix& z) {
  if (z.rows < 2)
    fail(ErrorCode::InsufficientBatch, "variance/covariance terms need B >= 2, got " +
                                           std::to_string(z.rows));
}

std::vector<double> column_means(const Matrix& z) {
  std::vector<double> mean(z.cols, 0.0);
  for (int b = 0; b < z.rows; ++b)
    for (int j = 0; j < z.cols; ++j) mean[j] += z(b, j);
  for (auto& m : mean) m /= z.rows;
  return mean;
}

// C = (z - mean)^T (z - mean) / (B - 1), plus the centred matrix.
Matrix covariance(const Matrix& z, Matrix& centred) {
  const auto mean = column_means(z);
  centred = z;
  for (int b = 0; b < z.rows; ++b)
    for (int j = 0; j < z.cols; ++j) centred(b, j) -= mean[j];
  Matrix c(z.cols, z.cols);
  for (int i = 0; i < z.cols; ++i)
    for (int j = 0; j < z.cols; ++j) {
      double acc = 0.0;
      for (int b = 0; b < z.rows; ++b) acc += centred(b, i) * centred(b, j);
      c(i, j) = acc / (z.rows - 1);
    }
  return c;
}

}  // namespace

MaeTerm mae_sum(const Matrix& recon, const std::vector<int>& hidden,
                const tokenizer::PatchSet& patches) {
  MaeTerm term;
  const int pv = patches.patch_voxels();
  for (std::size_t h = 0; h < hidden.size(); ++h) {
    const int idx = hidden[h];
    const auto target = patches.voxels.row(idx);
    const auto pred = recon.row(static_cast<int>(h));
    const std::uint8_t* valid = patches.voxel_valid.data() + static_cast<std::size_t>(idx) * pv;
    for (int k = 0; k < pv; ++k) {
      if (!valid[k]) continue;
      const double diff = pred[k] - target[k];
      term.value += diff * diff;
      ++term.count;
    }
  }
  return term;
}

MaeTerm loss_mae(const std::vector<Matrix>& recon, const std::vector<std::vector<int>>& hidden,
                 const std::vector<const tokenizer::PatchSet*>& patches) {
  if (recon.size() != hidden.size() || recon.size() != patches.size())
    fail(ErrorCode::ShapeError, "loss_mae inputs differ in session count");
  MaeTerm total;
  for (std::size_t s = 0; s < recon.size(); ++s) {
    if (recon[s].rows != static_cast<int>(hidden[s].size()))
      fail(ErrorCode::ShapeError, "reconstruction rows do not match hidden patches");
    const MaeTerm t = mae_sum(recon[s], hidden[s], *patches[s]);
    total.value += t.value;
    total.count += t.count;
  }
  if (total.count == 0) fail(ErrorCode::DegenerateLoss, "no hidden valid voxels");
  total.value /= static_cast<double>(total.count);
  return total;
}

double loss_var(const Matrix& z, double eps) {
  require_batch(z);
  const auto mean = column_means(z);
  double total = 0.0;
  for (int j = 0; j < z.cols; ++j) {
    double ss = 0.0;
    for (int b = 0; b < z.rows; ++b) ss += (z(b, j) - mean[j]) * (z(b, j) - mean[j]);
    const double var = ss / (z.rows - 1);
    total += std::max(0.0, 1.0 - std::sqrt(var + eps));
  }
  return total / z.cols;
}

Matrix loss_var_grad(const Matrix& z, double eps) {
  require_batch(z);
  const auto mean = column_means(z);
  Matrix g(z.rows, z.cols);
  for (int j = 0; j < z.cols; ++j) {
    double ss = 0.0;
    for (int b = 0; b < z.rows; ++b) ss += (z(b, j) - mean[j]) * (z(b, j) - mean[j]);
    const double s = std::sqrt(ss / (z.rows - 1) + eps);
    if (!(1.0 - s > 0.0)) continue;
    // d/dz_bj of -(1/D) sqrt(var + eps), with dvar/dz_bj = 2 (z_bj - mean_j) / (B - 1).
    const double coef = -1.0 / (z.cols * 2.0 * s) * 2.0 / (z.rows - 1);
    for (int b = 0; b < z.rows; ++b) g(b, j) = coef * (z(b, j) - mean[j]);
  }
  return g;
}

double loss_cov(const Matrix& z) {
  require_batch(z);
  if (z.cols < 2) return 0.0;
  Matrix centred;
  const Matrix c = covariance(z, centred);
  double total = 0.0;
  for (int i = 0; i < z.cols; ++i)
    for (int j = 0; j < z.cols; ++j)
      if (i != j) total += c(i, j) * c(i, j);
  return total / (static_cast<double>(z.cols) * (z.cols - 1));
}

Matrix loss_cov_grad(const Matrix& z) {
  require_batch(z);
  Matrix g(z.rows, z.cols);
  if (z.cols < 2) return g;
  Matrix centred;
  const Matrix c = covariance(z, centred);
  const double norm = static_cast<double>(z.cols) * (z.cols - 1);
  // dL/dC_ij = 2 C_ij / norm off the diagonal; dZc = 2 Zc dC / (B - 1).
  for (int b = 0; b < z.rows; ++b)
    for (int j = 0; j < z.cols; ++j) {
      double acc = 0.0;
      for (int i = 0; i < z.cols; ++i)
        if (i != j) acc += centred(b, i) * 2.0 * c(i, j) / norm;
      g(b, j) = 2.0 * acc / (z.rows - 1);
    }
  // Centring: subtract column means of the gradient (zero up to rounding).
  const auto mean = column_means(g);
  for (int b = 0; b < z.rows; ++b)
    for (int j = 0; j < z.cols; ++j) g(b, j) -= mean[j];
  return g;
}

Lambdas warmup_lambdas(std::int64_t step, std::int64_t steps_per_epoch, double lambda_var_max,
                       double lambda_cov_max, int warm_epochs) {
  if (step < 0) fail(ErrorCode::RangeError, "warm-up step must be >= 0");
  if (steps_per_epoch < 1) fail(ErrorCode::RangeError, "steps_per_epoch must be >= 1");
  const double ramp = static_cast<double>(warm_epochs) * static_cast<double>(steps_per_epoch);
  const double f = ramp <= 0.0 ? 1.0 : std::min(1.0, static_cast<double>(step) / ramp);
  return {f * lambda_var_max, f * lambda_cov_max};
}

LossReport loss_total(double l_mae, double l_var, double l_cov, double lambda_var,
                      double lambda_cov) {
  for (double v : {l_mae, l_var, l_cov, lambda_var, lambda_cov})
    if (!std::isfinite(v)) fail(ErrorCode::NonFiniteLoss, "non-finite loss component");
  LossReport r;
  r.l_mae = l_mae;
  r.l_var = l_var;
  r.l_cov = l_cov;
  r.lambda_var = lambda_var;
  r.lambda_cov = lambda_cov;
  r.l_total = l_mae + lambda_var * l_var + lambda_cov * l_cov;
  return r;
}

LossReport pretrain_objective(const ParamSet& params, const network::NetConfig& cfg,
                              const tokenizer::TokenBatch& batch, const Lambdas& lambdas,
                              ParamSet* grads, int threads) {
  const int n_sessions = static_cast<int>(batch.sessions.size());
  if (n_sessions == 0) fail(ErrorCode::EmptyBatch, "empty batch");
  std::vector<network::EncoderPass> enc(n_sessions);
  std::vector<network::DecoderPass> dec(n_sessions);
  std::vector<MaeTerm> mae(n_sessions);
  parallel_for(n_sessions, threads, [&](int b) {
    const auto& s = batch.sessions[b];
    enc[b] = network::encode_session(params, cfg, s);
    dec[b] = network::decode_session(params, cfg, s, enc[b]);
    mae[b] = mae_sum(dec[b].recon, dec[b].hidden, s.patches);
  });

  double sum = 0.0;
  std::int64_t count = 0;
  for (const auto& m : mae) {
    sum += m.value;
    count += m.count;
  }
  if (count == 0) fail(ErrorCode::DegenerateLoss, "no hidden valid voxels in batch");
  const double l_mae = sum / static_cast<double>(count);

  Matrix z(n_sessions, cfg.embed_dim);
  for (int b = 0; b < n_sessions; ++b)
    std::copy(enc[b].pooled.begin(), enc[b].pooled.end(), z.row(b).begin());
  const bool regularize = lambdas.var != 0.0 || lambdas.cov != 0.0 || n_sessions >= 2;
  const double l_var = regularize ? loss_var(z) : 0.0;
  const double l_cov = regularize ? loss_cov(z) : 0.0;
  LossReport report = loss_total(l_mae, l_var, l_cov, lambdas.var, lambdas.cov);
  report.n_valid_elements = count;
  if (!grads) return report;

  Matrix dz(n_sessions, cfg.embed_dim);
  if (regularize) {
    const Matrix gv = loss_var_grad(z);
    const Matrix gc = loss_cov_grad(z);
    for (std::size_t i = 0; i < dz.data.size(); ++i)
      dz.data[i] = lambdas.var * gv.data[i] + lambdas.cov * gc.data[i];
  }

  std::vector<ParamSet> partial(n_sessions);
  parallel_for(n_sessions, threads, [&](int b) {
    const auto& s = batch.sessions[b];
    partial[b] = params.zeros_like();
    const int pv = cfg.patch_voxels();
    Matrix d_recon(dec[b].recon.rows, pv);
    for (int h = 0; h < d_recon.rows; ++h) {
      const int idx = dec[b].hidden[h];
      const auto target = s.patches.voxels.row(idx);
      const std::uint8_t* valid =
          s.patches.voxel_valid.data() + static_cast<std::size_t>(idx) * pv;
      for (int k = 0; k < pv; ++k)
        if (valid[k])
          d_recon(h, k) = 2.0 * (dec[b].recon(h, k) - target[k]) / static_cast<double>(count);
    }
    Matrix d_lat = network::decode_backward(params, cfg, s, dec[b], d_recon, partial[b]);
    const int t_len = d_lat.rows;
    for (int t = 0; t < t_len; ++t)
      for (int j = 0; j < cfg.embed_dim; ++j) d_lat(t, j) += dz(b, j) / t_len;
    network::encode_backward(params, cfg, s, enc[b], d_lat, partial[b]);
  });

  for (int b = 0; b < n_sessions; ++b) {
    auto src = partial[b].begin();
    for (auto dst = grads->begin(); dst != grads->end(); ++dst, ++src)
      for (std::size_t i = 0; i < dst->second.data.size(); ++i)
        dst->second.data[i] += src->second.data[i];
  }
  return report;
}

double relative_error(double analytic, double numeric) {
  return std::fabs(analytic - numeric) / std::max(1e-8, std::fabs(analytic) + std::fabs(numeric));
}

GradcheckReport gradcheck(ParamSet params, const std::function<double(const ParamSet&)>& loss_fn,
                          const std::function<ParamSet(const ParamSet&)>& grad_fn,
                          const GradcheckConfig& cfg,
                          const std::function<bool(const std::string&)>& filter) {
  const ParamSet analytic = grad_fn(params);
  std::vector<std::pair<std::string, std::size_t>> tensors;
  std::size_t total = 0;
  for (const auto& [name, t] : params) {
    if (filter && !filter(name)) continue;
    tensors.emplace_back(name, t.size());
    total += t.size();
  }
  GradcheckReport report;
  if (total == 0) {
    report.passed = true;
    return report;
  }

  CounterRng rng = CounterRng::stream(cfg.seed, {stable_hash("gradcheck")});
  std::set<std::size_t> picked;
  const auto want = std::min<std::size_t>(static_cast<std::size_t>(std::max(cfg.samples, 0)), total);
  while (picked.size() < want) picked.insert(static_cast<std::size_t>(rng.below(total)));

  for (std::size_t flat : picked) {
    std::size_t offset = flat;
    auto it = tensors.begin();
    while (offset >= it->second) {
      offset -= it->second;
      ++it;
    }
    double& theta = params.at(it->first).data[offset];
    const double saved = theta;
    auto at = [&](double offset_h) {
      theta = saved + offset_h * cfg.step;
      const double l = loss_fn(params);
      theta = saved;
      return l;
    };
    double numeric;
    if (cfg.stencil == 4) {
      numeric = (at(-2.0) - 8.0 * at(-1.0) + 8.0 * at(1.0) - at(2.0)) / (12.0 * cfg.step);
    } else {
      numeric = (at(1.0) - at(-1.0)) / (2.0 * cfg.step);
    }
    const double a = analytic.at(it->first).data[offset];
    const double err = relative_error(a, numeric);
    auto& slot = report.per_tensor[it->first];
    slot = std::max(slot, err);
    report.max_rel_error = std::max(report.max_rel_error, err);
    ++report.checked;
  }
  report.passed = report.max_rel_error < cfg.tol_rel;
  return report;
}

GradcheckReport gradcheck_model(const ParamSet& params, const network::NetConfig& net,
                                const tokenizer::TokenBatch& batch, const Lambdas& lambdas,
                                const GradcheckConfig& cfg) {
  auto loss_fn = [&](const ParamSet& p) {
    return pretrain_objective(p, net, batch, lambdas, nullptr).l_total;
  };
  auto grad_fn = [&](const ParamSet& p) {
    ParamSet g = p.zeros_like();
    pretrain_objective(p, net, batch, lambdas, &g);
    return g;
  };
  return gradcheck(params, loss_fn, grad_fn, cfg,
                   [](const std::string& name) { return !network::is_head_param(name); });
}

}  // namespace bfm::objectives
