#include "network.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "error.hpp"
#include "rng.hpp"

namespace bfm::network {

namespace {

using tokenizer::SessionTokens;

std::span<const double> view(const ParamSet& p, const std::string& name) {
  return p.at(name).data;
}
std::span<double> grad(ParamSet& g, const std::string& name) { return g.at(name).data; }

std::string layer_prefix(const char* stack, int layer) {
  return std::string(stack) + "." + std::to_string(layer);
}

void add_cln_params(ParamSet& p, const std::string& prefix, int d, int dm) {
  p.add(prefix + ".gamma_w", {d, dm});
  p.add(prefix + ".gamma_b", {d});
  p.add(prefix + ".beta_w", {d, dm});
  p.add(prefix + ".beta_b", {d});
}

void add_linear(ParamSet& p, const std::string& prefix, int out, int in) {
  p.add(prefix + ".weight", {out, in});
  p.add(prefix + ".bias", {out});
}

void add_block_params(ParamSet& p, const std::string& prefix, int d, int dm, int hidden) {
  add_cln_params(p, prefix + ".norm1", d, dm);
  add_cln_params(p, prefix + ".norm2", d, dm);
  for (const char* n : {".attn.q", ".attn.k", ".attn.v", ".attn.out"}) add_linear(p, prefix + n, d, d);
  add_linear(p, prefix + ".mlp.fc1", hidden, d);
  add_linear(p, prefix + ".mlp.fc2", d, hidden);
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_projection(const std::string& name) {
  if (is_head_param(name)) return false;
  if (name.find(".pos.") != std::string::npos) return true;
  return ends_with(name, ".weight");
}

// Per-modality affine terms of a CLN layer: rows of (b + W m).
Matrix cln_affine(const Matrix& modality_emb, std::span<const double> w, std::span<const double> b,
                  int d) {
  const int dm = modality_emb.cols;
  Matrix out(modality_emb.rows, d);
  for (int m = 0; m < modality_emb.rows; ++m) {
    const auto e = modality_emb.row(m);
    for (int o = 0; o < d; ++o) {
      double acc = b[o];
      const double* wo = w.data() + static_cast<std::size_t>(o) * dm;
      for (int i = 0; i < dm; ++i) acc += wo[i] * e[i];
      out(m, o) = acc;
    }
  }
  return out;
}

Matrix cln_forward(const Matrix& x, const std::vector<int>& mod, const Matrix& modality_emb,
                   const ParamSet& p, const std::string& prefix, ClnCache& c) {
  const int d = x.cols;
  c.gamma = cln_affine(modality_emb, view(p, prefix + ".gamma_w"), view(p, prefix + ".gamma_b"), d);
  for (auto& g : c.gamma.data) g += 1.0;
  const Matrix beta =
      cln_affine(modality_emb, view(p, prefix + ".beta_w"), view(p, prefix + ".beta_b"), d);

  c.xhat = Matrix(x.rows, d);
  c.rstd.assign(x.rows, 0.0);
  Matrix y(x.rows, d);
  for (int t = 0; t < x.rows; ++t) {
    const auto xr = x.row(t);
    double mean = 0.0;
    for (double v : xr) mean += v;
    mean /= d;
    double var = 0.0;
    for (double v : xr) var += (v - mean) * (v - mean);
    var /= d;
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    c.rstd[t] = rstd;
    const int m = mod[t];
    for (int o = 0; o < d; ++o) {
      const double xh = (xr[o] - mean) * rstd;
      c.xhat(t, o) = xh;
      y(t, o) = c.gamma(m, o) * xh + beta(m, o);
    }
  }
  return y;
}

Matrix cln_backward(const Matrix& dy, const std::vector<int>& mod, const Matrix& modality_emb,
                    const std::string& prefix, const ClnCache& c, ParamSet& g) {
  const int d = dy.cols;
  const int dm = modality_emb.cols;
  Matrix dgamma(modality_emb.rows, d), dbeta(modality_emb.rows, d);
  Matrix dx(dy.rows, d);
  std::vector<double> dxhat(d);
  for (int t = 0; t < dy.rows; ++t) {
    const int m = mod[t];
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (int o = 0; o < d; ++o) {
      const double gy = dy(t, o);
      dgamma(m, o) += gy * c.xhat(t, o);
      dbeta(m, o) += gy;
      dxhat[o] = gy * c.gamma(m, o);
      mean_dxhat += dxhat[o];
      mean_dxhat_xhat += dxhat[o] * c.xhat(t, o);
    }
    mean_dxhat /= d;
    mean_dxhat_xhat /= d;
    for (int o = 0; o < d; ++o)
      dx(t, o) = c.rstd[t] * (dxhat[o] - mean_dxhat - c.xhat(t, o) * mean_dxhat_xhat);
  }
  auto acc = [&](const Matrix& dpart, const std::string& w, const std::string& b) {
    auto gw = grad(g, prefix + w);
    auto gb = grad(g, prefix + b);
    for (int m = 0; m < modality_emb.rows; ++m) {
      const auto e = modality_emb.row(m);
      for (int o = 0; o < d; ++o) {
        const double v = dpart(m, o);
        if (v == 0.0) continue;
        gb[o] += v;
        double* gwo = gw.data() + static_cast<std::size_t>(o) * dm;
        for (int i = 0; i < dm; ++i) gwo[i] += v * e[i];
      }
    }
  };
  acc(dgamma, ".gamma_w", ".gamma_b");
  acc(dbeta, ".beta_w", ".beta_b");
  return dx;
}

Matrix linear(const Matrix& x, const ParamSet& p, const std::string& prefix, int out) {
  Matrix y;
  linear_forward(x, view(p, prefix + ".weight"), view(p, prefix + ".bias"), out, y);
  return y;
}

Matrix linear_back(const Matrix& x, const ParamSet& p, const std::string& prefix, const Matrix& dy,
                   ParamSet& g) {
  return linear_backward(x, view(p, prefix + ".weight"), dy, grad(g, prefix + ".weight"),
                         grad(g, prefix + ".bias"));
}

Matrix attn_forward(const Matrix& x, const ParamSet& p, const std::string& prefix, int heads,
                    AttnCache& c) {
  const int t_len = x.rows;
  const int d = x.cols;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  c.in = x;
  c.q = linear(x, p, prefix + ".q", d);
  c.k = linear(x, p, prefix + ".k", d);
  c.v = linear(x, p, prefix + ".v", d);
  c.ctx = Matrix(t_len, d);
  c.probs.assign(heads, Matrix(t_len, t_len));
  for (int h = 0; h < heads; ++h) {
    Matrix& pr = c.probs[h];
    const int off = h * dh;
    for (int i = 0; i < t_len; ++i) {
      double mx = -INFINITY;
      for (int j = 0; j < t_len; ++j) {
        double s = 0.0;
        for (int e = 0; e < dh; ++e) s += c.q(i, off + e) * c.k(j, off + e);
        s *= scale;
        pr(i, j) = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (int j = 0; j < t_len; ++j) {
        pr(i, j) = std::exp(pr(i, j) - mx);
        z += pr(i, j);
      }
      for (int j = 0; j < t_len; ++j) pr(i, j) /= z;
      for (int j = 0; j < t_len; ++j) {
        const double a = pr(i, j);
        for (int e = 0; e < dh; ++e) c.ctx(i, off + e) += a * c.v(j, off + e);
      }
    }
  }
  return linear(c.ctx, p, prefix + ".out", d);
}

Matrix attn_backward(const Matrix& dy, const ParamSet& p, const std::string& prefix, int heads,
                     const AttnCache& c, ParamSet& g) {
  const int t_len = dy.rows;
  const int d = dy.cols;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Matrix dctx = linear_back(c.ctx, p, prefix + ".out", dy, g);
  Matrix dq(t_len, d), dk(t_len, d), dv(t_len, d);
  std::vector<double> dp(t_len);
  for (int h = 0; h < heads; ++h) {
    const Matrix& pr = c.probs[h];
    const int off = h * dh;
    for (int i = 0; i < t_len; ++i) {
      double dot = 0.0;
      for (int j = 0; j < t_len; ++j) {
        double s = 0.0;
        for (int e = 0; e < dh; ++e) s += dctx(i, off + e) * c.v(j, off + e);
        dp[j] = s;
        dot += pr(i, j) * s;
        const double a = pr(i, j);
        for (int e = 0; e < dh; ++e) dv(j, off + e) += a * dctx(i, off + e);
      }
      for (int j = 0; j < t_len; ++j) {
        const double ds = pr(i, j) * (dp[j] - dot) * scale;
        if (ds == 0.0) continue;
        for (int e = 0; e < dh; ++e) {
          dq(i, off + e) += ds * c.k(j, off + e);
          dk(j, off + e) += ds * c.q(i, off + e);
        }
      }
    }
  }
  Matrix dx = linear_back(c.in, p, prefix + ".q", dq, g);
  const Matrix dxk = linear_back(c.in, p, prefix + ".k", dk, g);
  const Matrix dxv = linear_back(c.in, p, prefix + ".v", dv, g);
  for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dxk.data[i] + dxv.data[i];
  return dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }
double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Matrix mlp_forward(const Matrix& x, const ParamSet& p, const std::string& prefix, int hidden,
                   MlpCache& c) {
  c.in = x;
  c.pre = linear(x, p, prefix + ".fc1", hidden);
  c.act = c.pre;
  for (auto& v : c.act.data) v = gelu(v);
  return linear(c.act, p, prefix + ".fc2", x.cols);
}

Matrix mlp_backward(const Matrix& dy, const ParamSet& p, const std::string& prefix,
                    const MlpCache& c, ParamSet& g) {
  Matrix dact = linear_back(c.act, p, prefix + ".fc2", dy, g);
  for (std::size_t i = 0; i < dact.data.size(); ++i) dact.data[i] *= gelu_grad(c.pre.data[i]);
  return linear_back(c.in, p, prefix + ".fc1", dact, g);
}

Matrix block_forward(const Matrix& x, const std::vector<int>& mod, const Matrix& modality_emb,
                     const ParamSet& p, const std::string& prefix, int heads, int hidden,
                     BlockCache& c) {
  Matrix h = cln_forward(x, mod, modality_emb, p, prefix + ".norm1", c.norm1);
  Matrix a = attn_forward(h, p, prefix + ".attn", heads, c.attn);
  Matrix x1 = x;
  for (std::size_t i = 0; i < x1.data.size(); ++i) x1.data[i] += a.data[i];
  Matrix h2 = cln_forward(x1, mod, modality_emb, p, prefix + ".norm2", c.norm2);
  Matrix f = mlp_forward(h2, p, prefix + ".mlp", hidden, c.mlp);
  for (std::size_t i = 0; i < x1.data.size(); ++i) x1.data[i] += f.data[i];
  return x1;
}

Matrix block_backward(const Matrix& dy, const std::vector<int>& mod, const Matrix& modality_emb,
                      const ParamSet& p, const std::string& prefix, int heads,
                      const BlockCache& c, ParamSet& g) {
  Matrix dh2 = mlp_backward(dy, p, prefix + ".mlp", c.mlp, g);
  Matrix dx1 = cln_backward(dh2, mod, modality_emb, prefix + ".norm2", c.norm2, g);
  for (std::size_t i = 0; i < dx1.data.size(); ++i) dx1.data[i] += dy.data[i];
  Matrix dh = attn_backward(dx1, p, prefix + ".attn", heads, c.attn, g);
  Matrix dx = cln_backward(dh, mod, modality_emb, prefix + ".norm1", c.norm1, g);
  for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dx1.data[i];
  return dx;
}

void add_position(Matrix& x, int row, const tokenizer::GridCoord& gc, const ParamSet& p,
                  const char* table_prefix) {
  const int d = x.cols;
  static const char* axes[3] = {".pos.x", ".pos.y", ".pos.z"};
  for (int a = 0; a < 3; ++a) {
    const Tensor& t = p.at(std::string(table_prefix) + axes[a]);
    if (gc[a] < 0 || gc[a] >= t.dim(0))
      fail(ErrorCode::RangeError, "grid coordinate exceeds positional table");
    const double* r = t.data.data() + static_cast<std::size_t>(gc[a]) * d;
    for (int j = 0; j < d; ++j) x(row, j) += r[j];
  }
}

void add_position_grad(const Matrix& dx, int row, const tokenizer::GridCoord& gc, ParamSet& g,
                       const char* table_prefix) {
  const int d = dx.cols;
  static const char* axes[3] = {".pos.x", ".pos.y", ".pos.z"};
  for (int a = 0; a < 3; ++a) {
    double* r = g.at(std::string(table_prefix) + axes[a]).data.data() +
                static_cast<std::size_t>(gc[a]) * d;
    for (int j = 0; j < d; ++j) r[j] += dx(row, j);
  }
}

// Rows of W M^T: modality projection per modality.
Matrix project_modalities(const Matrix& modality_emb, std::span<const double> w, int d) {
  const std::vector<double> zero(static_cast<std::size_t>(d), 0.0);
  return cln_affine(modality_emb, w, zero, d);
}

void project_modalities_grad(const Matrix& dx, const std::vector<int>& mod,
                             const Matrix& modality_emb, std::span<double> gw) {
  const int d = dx.cols;
  const int dm = modality_emb.cols;
  for (int t = 0; t < dx.rows; ++t) {
    const auto e = modality_emb.row(mod[t]);
    for (int o = 0; o < d; ++o) {
      const double v = dx(t, o);
      if (v == 0.0) continue;
      double* wo = gw.data() + static_cast<std::size_t>(o) * dm;
      for (int i = 0; i < dm; ++i) wo[i] += v * e[i];
    }
  }
}

}  // namespace

void NetConfig::validate() const {
  if (embed_dim <= 0 || decoder_dim <= 0 || heads <= 0 || mlp_ratio <= 0)
    fail(ErrorCode::ConfigError, "network dimensions must be positive");
  if (embed_dim % heads != 0 || decoder_dim % heads != 0)
    fail(ErrorCode::ConfigError, "embed and decoder dims must be divisible by the head count");
  if (encoder_layers < 0 || decoder_layers < 0)
    fail(ErrorCode::ConfigError, "layer counts must be >= 0");
  if (max_grid <= 0 || modality_dim <= 0 || n_classes <= 0 || n_labels <= 0)
    fail(ErrorCode::ConfigError, "max_grid, modality_dim, n_classes, n_labels must be positive");
  for (int a : patch)
    if (a <= 0) fail(ErrorCode::ConfigError, "patch size must be positive");
}

bool is_head_param(const std::string& name) { return name.rfind("head.", 0) == 0; }
bool is_decoder_param(const std::string& name) { return name.rfind("dec.", 0) == 0; }

ParamSet init_params(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const int de = cfg.embed_dim, dd = cfg.decoder_dim, dm = cfg.modality_dim;
  const int pv = cfg.patch_voxels();
  ParamSet p;
  add_linear(p, "patch_embed", de, pv);
  for (const char* a : {"x", "y", "z"}) {
    p.add(std::string("enc.pos.") + a, {cfg.max_grid, de});
    p.add(std::string("dec.pos.") + a, {cfg.max_grid, dd});
  }
  p.add("enc.modality_proj.weight", {de, dm});
  p.add("dec.modality_proj.weight", {dd, dm});
  for (int l = 0; l < cfg.encoder_layers; ++l)
    add_block_params(p, layer_prefix("enc", l), de, dm, de * cfg.mlp_ratio);
  for (int l = 0; l < cfg.decoder_layers; ++l)
    add_block_params(p, layer_prefix("dec", l), dd, dm, dd * cfg.mlp_ratio);
  p.add("dec.mask_token", {dd});
  add_linear(p, "dec.embed", dd, de);
  add_linear(p, "dec.recon", pv, dd);
  add_linear(p, "head.cls", cfg.n_classes, de);
  add_linear(p, "head.seg", pv * cfg.n_labels, de);

  for (auto& [name, t] : p) {
    CounterRng rng = CounterRng::stream(seed, {stable_hash(name)});
    if (name == "dec.mask_token") {
      double n2 = 0.0;
      for (auto& v : t.data) {
        v = rng.normal();
        n2 += v * v;
      }
      for (auto& v : t.data) v /= std::sqrt(n2);
    } else if (is_projection(name)) {
      for (auto& v : t.data) {
        double z;
        do z = rng.normal(); while (std::fabs(z) > 2.0);
        v = 0.02 * z;
      }
    }
  }
  return p;
}

std::vector<double> cln(std::span<const double> x, std::span<const double> m,
                        std::span<const double> gamma_w, std::span<const double> gamma_b,
                        std::span<const double> beta_w, std::span<const double> beta_b) {
  const int d = static_cast<int>(x.size());
  Matrix emb(1, static_cast<int>(m.size()));
  std::copy(m.begin(), m.end(), emb.data.begin());
  ParamSet p;
  auto set = [&](const char* name, std::vector<std::int64_t> shape, std::span<const double> src) {
    Tensor& t = p.add(name, std::move(shape));
    if (src.size() != t.size()) fail(ErrorCode::DimensionMismatch, std::string("cln ") + name);
    std::copy(src.begin(), src.end(), t.data.begin());
  };
  set("n.gamma_w", {d, static_cast<std::int64_t>(m.size())}, gamma_w);
  set("n.gamma_b", {d}, gamma_b);
  set("n.beta_w", {d, static_cast<std::int64_t>(m.size())}, beta_w);
  set("n.beta_b", {d}, beta_b);
  Matrix xm(1, d);
  std::copy(x.begin(), x.end(), xm.data.begin());
  ClnCache c;
  return cln_forward(xm, {0}, emb, p, "n", c).data;
}

EncoderPass encode_session(const ParamSet& p, const NetConfig& cfg, const SessionTokens& s,
                           const std::vector<int>& tokens) {
  if (tokens.empty())
    fail(ErrorCode::EmptySession, "session '" + s.case_id + "' has no tokens to encode");
  const int de = cfg.embed_dim;
  const int pv = cfg.patch_voxels();
  if (s.patches.patch_voxels() != pv) fail(ErrorCode::ShapeError, "patch size differs from model");
  if (s.modality_embeddings.cols != cfg.modality_dim)
    fail(ErrorCode::DimensionMismatch, "modality embedding dimension differs from model");

  EncoderPass pass;
  pass.tokens = tokens;
  const int t_len = static_cast<int>(tokens.size());
  pass.voxels = Matrix(t_len, pv);
  for (int t = 0; t < t_len; ++t) {
    const auto src = s.patches.voxels.row(tokens[t]);
    std::copy(src.begin(), src.end(), pass.voxels.row(t).begin());
    pass.modality.push_back(s.patches.patches[tokens[t]].modality);
  }

  Matrix x;
  linear_forward(pass.voxels, view(p, "patch_embed.weight"), view(p, "patch_embed.bias"), de, x);
  const Matrix mod_proj =
      project_modalities(s.modality_embeddings, view(p, "enc.modality_proj.weight"), de);
  for (int t = 0; t < t_len; ++t) {
    add_position(x, t, s.patches.patches[tokens[t]].grid, p, "enc");
    for (int j = 0; j < de; ++j) x(t, j) += mod_proj(pass.modality[t], j);
  }

  pass.blocks.resize(cfg.encoder_layers);
  for (int l = 0; l < cfg.encoder_layers; ++l) {
    x = block_forward(x, pass.modality, s.modality_embeddings, p, layer_prefix("enc", l), cfg.heads,
                      de * cfg.mlp_ratio, pass.blocks[l]);
  }
  pass.latents = std::move(x);
  pass.pooled.assign(de, 0.0);
  for (int t = 0; t < t_len; ++t)
    for (int j = 0; j < de; ++j) pass.pooled[j] += pass.latents(t, j);
  for (auto& v : pass.pooled) v /= t_len;
  return pass;
}

EncoderPass encode_session(const ParamSet& p, const NetConfig& cfg, const SessionTokens& s) {
  return encode_session(p, cfg, s, s.visible());
}

void encode_backward(const ParamSet& p, const NetConfig& cfg, const SessionTokens& s,
                     const EncoderPass& pass, const Matrix& d_latents, ParamSet& grads,
                     bool need_input_grads) {
  Matrix dx = d_latents;
  for (int l = cfg.encoder_layers - 1; l >= 0; --l) {
    dx = block_backward(dx, pass.modality, s.modality_embeddings, p, layer_prefix("enc", l),
                        cfg.heads, pass.blocks[l], grads);
  }
  if (!need_input_grads) return;
  for (int t = 0; t < dx.rows; ++t) add_position_grad(dx, t, s.patches.patches[pass.tokens[t]].grid, grads, "enc");
  project_modalities_grad(dx, pass.modality, s.modality_embeddings,
                          grad(grads, "enc.modality_proj.weight"));
  // Input-side gradient is not needed: patch vectors are data.
  auto gw = grad(grads, "patch_embed.weight");
  auto gb = grad(grads, "patch_embed.bias");
  const int pv = pass.voxels.cols;
  for (int t = 0; t < dx.rows; ++t) {
    const auto xr = pass.voxels.row(t);
    for (int o = 0; o < dx.cols; ++o) {
      const double v = dx(t, o);
      if (v == 0.0) continue;
      gb[o] += v;
      double* wo = gw.data() + static_cast<std::size_t>(o) * pv;
      for (int i = 0; i < pv; ++i) wo[i] += v * xr[i];
    }
  }
}

DecoderPass decode_session(const ParamSet& p, const NetConfig& cfg, const SessionTokens& s,
                           const EncoderPass& enc) {
  const int dd = cfg.decoder_dim;
  const int pv = cfg.patch_voxels();
  DecoderPass pass;

  std::vector<int> enc_row_of(s.patches.size(), -1);
  for (int t = 0; t < static_cast<int>(enc.tokens.size()); ++t) enc_row_of[enc.tokens[t]] = t;
  std::vector<char> is_hidden(s.patches.size(), 0);
  for (int h : s.plan.hidden) {
    if (h < 0 || h >= static_cast<int>(s.patches.size()))
      fail(ErrorCode::RangeError, "hidden patch index out of range");
    is_hidden[h] = 1;
  }
  for (int i = 0; i < static_cast<int>(s.patches.size()); ++i) {
    if (enc_row_of[i] >= 0) {
      pass.tokens.push_back(i);
      pass.enc_row.push_back(enc_row_of[i]);
    } else if (is_hidden[i]) {
      pass.hidden_row.push_back(static_cast<int>(pass.tokens.size()));
      pass.hidden.push_back(i);
      pass.tokens.push_back(i);
      pass.enc_row.push_back(-1);
    }
  }
  if (pass.hidden.empty()) {
    pass.recon = Matrix(0, pv);
    return pass;
  }

  const int t_len = static_cast<int>(pass.tokens.size());
  int n_visible = 0;
  for (int r : pass.enc_row) n_visible += r >= 0;
  pass.mapped_in = Matrix(n_visible, enc.latents.cols);
  for (int t = 0, v = 0; t < t_len; ++t) {
    pass.modality.push_back(s.patches.patches[pass.tokens[t]].modality);
    if (pass.enc_row[t] < 0) continue;
    const auto src = enc.latents.row(pass.enc_row[t]);
    std::copy(src.begin(), src.end(), pass.mapped_in.row(v++).begin());
  }
  Matrix mapped;
  linear_forward(pass.mapped_in, view(p, "dec.embed.weight"), view(p, "dec.embed.bias"), dd, mapped);

  const auto mask_token = view(p, "dec.mask_token");
  const Matrix mod_proj =
      project_modalities(s.modality_embeddings, view(p, "dec.modality_proj.weight"), dd);
  Matrix x(t_len, dd);
  for (int t = 0, v = 0; t < t_len; ++t) {
    if (pass.enc_row[t] >= 0) {
      const auto src = mapped.row(v++);
      std::copy(src.begin(), src.end(), x.row(t).begin());
    } else {
      std::copy(mask_token.begin(), mask_token.end(), x.row(t).begin());
    }
    add_position(x, t, s.patches.patches[pass.tokens[t]].grid, p, "dec");
    for (int j = 0; j < dd; ++j) x(t, j) += mod_proj(pass.modality[t], j);
  }

  pass.blocks.resize(cfg.decoder_layers);
  for (int l = 0; l < cfg.decoder_layers; ++l) {
    x = block_forward(x, pass.modality, s.modality_embeddings, p, layer_prefix("dec", l), cfg.heads,
                      dd * cfg.mlp_ratio, pass.blocks[l]);
  }
  pass.hidden_out = Matrix(static_cast<int>(pass.hidden.size()), dd);
  for (int h = 0; h < pass.hidden_out.rows; ++h) {
    const auto src = x.row(pass.hidden_row[h]);
    std::copy(src.begin(), src.end(), pass.hidden_out.row(h).begin());
  }
  linear_forward(pass.hidden_out, view(p, "dec.recon.weight"), view(p, "dec.recon.bias"), pv,
                 pass.recon);
  return pass;
}

Matrix decode_backward(const ParamSet& p, const NetConfig& cfg, const SessionTokens& s,
                       const DecoderPass& pass, const Matrix& d_recon, ParamSet& grads) {
  const int dd = cfg.decoder_dim;
  int n_enc = 0;
  for (int r : pass.enc_row) n_enc = std::max(n_enc, r + 1);
  if (pass.hidden.empty()) return Matrix(n_enc, pass.mapped_in.cols);

  const Matrix d_hidden = linear_back(pass.hidden_out, p, "dec.recon", d_recon, grads);
  const int t_len = static_cast<int>(pass.tokens.size());
  Matrix dx(t_len, dd);
  for (int h = 0; h < d_hidden.rows; ++h) {
    const auto src = d_hidden.row(h);
    std::copy(src.begin(), src.end(), dx.row(pass.hidden_row[h]).begin());
  }
  for (int l = cfg.decoder_layers - 1; l >= 0; --l) {
    dx = block_backward(dx, pass.modality, s.modality_embeddings, p, layer_prefix("dec", l),
                        cfg.heads, pass.blocks[l], grads);
  }
  for (int t = 0; t < t_len; ++t)
    add_position_grad(dx, t, s.patches.patches[pass.tokens[t]].grid, grads, "dec");
  project_modalities_grad(dx, pass.modality, s.modality_embeddings,
                          grad(grads, "dec.modality_proj.weight"));

  auto g_mask = grad(grads, "dec.mask_token");
  Matrix d_mapped(pass.mapped_in.rows, dd);
  for (int t = 0, v = 0; t < t_len; ++t) {
    const auto src = dx.row(t);
    if (pass.enc_row[t] >= 0) {
      std::copy(src.begin(), src.end(), d_mapped.row(v++).begin());
    } else {
      for (int j = 0; j < dd; ++j) g_mask[j] += src[j];
    }
  }
  const Matrix d_in = linear_back(pass.mapped_in, p, "dec.embed", d_mapped, grads);
  Matrix d_latents(n_enc, pass.mapped_in.cols);
  for (int t = 0, v = 0; t < t_len; ++t) {
    if (pass.enc_row[t] < 0) continue;
    const auto src = d_in.row(v++);
    std::copy(src.begin(), src.end(), d_latents.row(pass.enc_row[t]).begin());
  }
  return d_latents;
}

EncodeResult encode(const tokenizer::TokenBatch& batch, const ParamSet& p, const NetConfig& cfg) {
  EncodeResult out;
  out.pooled = Matrix(static_cast<int>(batch.sessions.size()), cfg.embed_dim);
  for (std::size_t b = 0; b < batch.sessions.size(); ++b) {
    EncoderPass pass = encode_session(p, cfg, batch.sessions[b]);
    std::copy(pass.pooled.begin(), pass.pooled.end(), out.pooled.row(static_cast<int>(b)).begin());
    out.latents.push_back(std::move(pass.latents));
    out.tokens.push_back(std::move(pass.tokens));
  }
  return out;
}

std::vector<Matrix> decode(const EncodeResult& enc, const tokenizer::TokenBatch& batch,
                           const ParamSet& p, const NetConfig& cfg) {
  std::vector<Matrix> out;
  for (std::size_t b = 0; b < batch.sessions.size(); ++b) {
    const auto& s = batch.sessions[b];
    EncoderPass view_pass;
    view_pass.tokens = enc.tokens[b];
    view_pass.latents = enc.latents[b];
    const DecoderPass pass = decode_session(p, cfg, s, view_pass);
    Matrix recon(static_cast<int>(s.plan.hidden.size()), cfg.patch_voxels());
    for (int i = 0; i < recon.rows; ++i) {
      const auto it = std::lower_bound(pass.hidden.begin(), pass.hidden.end(), s.plan.hidden[i]);
      if (it == pass.hidden.end() || *it != s.plan.hidden[i]) continue;  // hidden but invalid
      const auto src = pass.recon.row(static_cast<int>(it - pass.hidden.begin()));
      std::copy(src.begin(), src.end(), recon.row(i).begin());
    }
    out.push_back(std::move(recon));
  }
  return out;
}

std::vector<double> head_classify(std::span<const double> pooled, const ParamSet& p) {
  const Tensor& w = p.at("head.cls.weight");
  const auto& b = p.at("head.cls.bias").data;
  if (static_cast<std::int64_t>(pooled.size()) != w.dim(1))
    fail(ErrorCode::DimensionMismatch, "pooled vector does not match classification head");
  std::vector<double> logits(b);
  const auto in = static_cast<std::size_t>(w.dim(1));
  for (std::size_t o = 0; o < logits.size(); ++o)
    for (std::size_t i = 0; i < in; ++i) logits[o] += w.data[o * in + i] * pooled[i];
  return logits;
}

std::vector<double> head_segment(const Matrix& grid_latents, const std::array<int, 3>& grid_dims,
                                 const NetConfig& cfg, const ParamSet& p) {
  const int cells = grid_dims[0] * grid_dims[1] * grid_dims[2];
  if (grid_latents.rows != cells)
    fail(ErrorCode::ShapeError, "segmentation head needs one latent per lattice cell (" +
                                    std::to_string(cells) + "), got " +
                                    std::to_string(grid_latents.rows));
  const int pv = cfg.patch_voxels();
  Matrix out;
  linear_forward(grid_latents, view(p, "head.seg.weight"), view(p, "head.seg.bias"),
                 pv * cfg.n_labels, out);
  const corpus::Dims dims{grid_dims[0] * cfg.patch[0], grid_dims[1] * cfg.patch[1],
                          grid_dims[2] * cfg.patch[2]};
  const std::size_t nvox = corpus::voxel_count(dims);
  std::vector<double> logits(nvox * cfg.n_labels, 0.0);
  for (int c = 0; c < cells; ++c) {
    const int gx = c % grid_dims[0];
    const int gy = (c / grid_dims[0]) % grid_dims[1];
    const int gz = c / (grid_dims[0] * grid_dims[1]);
    for (int label = 0; label < cfg.n_labels; ++label) {
      int k = 0;
      for (int z = 0; z < cfg.patch[2]; ++z)
        for (int y = 0; y < cfg.patch[1]; ++y)
          for (int x = 0; x < cfg.patch[0]; ++x, ++k) {
            const std::size_t v = corpus::voxel_index(dims, gx * cfg.patch[0] + x,
                                                      gy * cfg.patch[1] + y, gz * cfg.patch[2] + z);
            logits[label * nvox + v] = out(c, label * pv + k);
          }
    }
  }
  return logits;
}

Matrix head_segment_backward(const Matrix& grid_latents, const std::array<int, 3>& grid_dims,
                             const NetConfig& cfg, const ParamSet& p,
                             std::span<const double> d_logits, ParamSet& grads) {
  const int cells = grid_dims[0] * grid_dims[1] * grid_dims[2];
  const int pv = cfg.patch_voxels();
  const corpus::Dims dims{grid_dims[0] * cfg.patch[0], grid_dims[1] * cfg.patch[1],
                          grid_dims[2] * cfg.patch[2]};
  const std::size_t nvox = corpus::voxel_count(dims);
  Matrix d_out(cells, pv * cfg.n_labels);
  for (int c = 0; c < cells; ++c) {
    const int gx = c % grid_dims[0];
    const int gy = (c / grid_dims[0]) % grid_dims[1];
    const int gz = c / (grid_dims[0] * grid_dims[1]);
    for (int label = 0; label < cfg.n_labels; ++label) {
      int k = 0;
      for (int z = 0; z < cfg.patch[2]; ++z)
        for (int y = 0; y < cfg.patch[1]; ++y)
          for (int x = 0; x < cfg.patch[0]; ++x, ++k) {
            const std::size_t v = corpus::voxel_index(dims, gx * cfg.patch[0] + x,
                                                      gy * cfg.patch[1] + y, gz * cfg.patch[2] + z);
            d_out(c, label * pv + k) = d_logits[label * nvox + v];
          }
    }
  }
  return linear_backward(grid_latents, view(p, "head.seg.weight"), d_out,
                         grad(grads, "head.seg.weight"), grad(grads, "head.seg.bias"));
}

Matrix fuse_grid_latents(const SessionTokens& s, const EncoderPass& pass, int embed_dim,
                         std::vector<int>* counts) {
  const int cells = s.patches.patches_per_modality();
  Matrix grid(cells, embed_dim);
  std::vector<int> n(cells, 0);
  for (int t = 0; t < static_cast<int>(pass.tokens.size()); ++t) {
    const int cell = pass.tokens[t] % cells;
    ++n[cell];
    for (int j = 0; j < embed_dim; ++j) grid(cell, j) += pass.latents(t, j);
  }
  for (int c = 0; c < cells; ++c)
    if (n[c] > 1)
      for (int j = 0; j < embed_dim; ++j) grid(c, j) /= n[c];
  if (counts) *counts = std::move(n);
  return grid;
}

Matrix fuse_grid_backward(const SessionTokens& s, const EncoderPass& pass, const Matrix& d_grid,
                          const std::vector<int>& counts) {
  const int cells = s.patches.patches_per_modality();
  Matrix d_latents(static_cast<int>(pass.tokens.size()), d_grid.cols);
  for (int t = 0; t < d_latents.rows; ++t) {
    const int cell = pass.tokens[t] % cells;
    for (int j = 0; j < d_grid.cols; ++j) d_latents(t, j) = d_grid(cell, j) / counts[cell];
  }
  return d_latents;
}

}  // namespace bfm::network
