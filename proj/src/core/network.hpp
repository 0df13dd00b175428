#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tensor.hpp"
#include "tokenizer.hpp"

namespace bfm::network {

struct NetConfig {
  int embed_dim = 64;    // d_e
  int decoder_dim = 32;  // d_d
  int encoder_layers = 4;
  int decoder_layers = 2;
  int heads = 4;
  int mlp_ratio = 2;
  std::array<int, 3> patch{16, 16, 16};
  int max_grid = 8;  // rows per positional axis table
  int modality_dim = 64;
  int n_classes = 2;
  int n_labels = 1;

  int patch_voxels() const { return patch[0] * patch[1] * patch[2]; }
  void validate() const;
};

inline constexpr double kLayerNormEps = 1e-5;

// Truncated-normal(0.02) projections, zero CLN generators and heads, unit
// mask token. Every tensor draws from its own stream keyed by its name.
ParamSet init_params(const NetConfig& cfg, std::uint64_t seed);

bool is_head_param(const std::string& name);
bool is_decoder_param(const std::string& name);

// y = (1 + Wg m + bg) * (x - mean) / sqrt(var + eps) + (Wb m + bb).
// Weights are [d, D_m] row-major.
std::vector<double> cln(std::span<const double> x, std::span<const double> m,
                        std::span<const double> gamma_w, std::span<const double> gamma_b,
                        std::span<const double> beta_w, std::span<const double> beta_b);

// ---- layer caches (kept for the backward pass) ----

struct ClnCache {
  Matrix xhat;
  std::vector<double> rstd;
  Matrix gamma;  // per modality row
};

struct AttnCache {
  Matrix in, q, k, v, ctx;
  std::vector<Matrix> probs;  // one [T, T] per head
};

struct MlpCache {
  Matrix in, pre, act;
};

struct BlockCache {
  ClnCache norm1;
  AttnCache attn;
  ClnCache norm2;
  MlpCache mlp;
};

struct EncoderPass {
  std::vector<int> tokens;    // patch indices in sequence order
  std::vector<int> modality;  // per token
  Matrix voxels;              // gathered patch vectors [T, P]
  std::vector<BlockCache> blocks;
  Matrix latents;  // [T, d_e]
  std::vector<double> pooled;
};

struct DecoderPass {
  std::vector<int> tokens;   // all valid sequence members, ascending patch index
  std::vector<int> enc_row;  // row into EncoderPass::latents, or -1 for a mask token
  std::vector<int> modality;
  Matrix mapped_in;  // visible latents in decoder order
  std::vector<BlockCache> blocks;
  std::vector<int> hidden;     // ascending patch indices with a reconstruction
  std::vector<int> hidden_row; // sequence row of each hidden patch
  Matrix hidden_out;           // decoder features at hidden rows [H, d_d]
  Matrix recon;                // [H, P], row i <-> hidden[i]
};

// Encodes `tokens` (patch indices, normally the visible set). Throws
// EmptySession when `tokens` is empty.
EncoderPass encode_session(const ParamSet& p, const NetConfig& cfg,
                           const tokenizer::SessionTokens& s, const std::vector<int>& tokens);
EncoderPass encode_session(const ParamSet& p, const NetConfig& cfg,
                           const tokenizer::SessionTokens& s);

// d_latents is [T, d_e]; gradients accumulate into `grads`.
void encode_backward(const ParamSet& p, const NetConfig& cfg, const tokenizer::SessionTokens& s,
                     const EncoderPass& pass, const Matrix& d_latents, ParamSet& grads,
                     bool need_input_grads = true);

// Sequence = encoded tokens plus every hidden patch of the plan, ordered by
// patch index, so outputs are keyed by position rather than plan order.
DecoderPass decode_session(const ParamSet& p, const NetConfig& cfg,
                           const tokenizer::SessionTokens& s, const EncoderPass& enc);

// Returns d_latents for the encoder.
Matrix decode_backward(const ParamSet& p, const NetConfig& cfg, const tokenizer::SessionTokens& s,
                       const DecoderPass& pass, const Matrix& d_recon, ParamSet& grads);

struct EncodeResult {
  std::vector<Matrix> latents;               // per session, [V_s, d_e]
  std::vector<std::vector<int>> tokens;      // per session patch indices
  Matrix pooled;                             // [B, d_e]
};

EncodeResult encode(const tokenizer::TokenBatch& batch, const ParamSet& p, const NetConfig& cfg);

// One [H, P] matrix per session, rows in the order of that session's
// plan.hidden.
std::vector<Matrix> decode(const EncodeResult& enc, const tokenizer::TokenBatch& batch,
                           const ParamSet& p, const NetConfig& cfg);

std::vector<double> head_classify(std::span<const double> pooled, const ParamSet& p);

// grid_latents: one row per lattice cell (x-fastest), [Gx*Gy*Gz, d_e].
// Returns n_labels channel volumes, channel-major, each x-fastest.
std::vector<double> head_segment(const Matrix& grid_latents, const std::array<int, 3>& grid_dims,
                                 const NetConfig& cfg, const ParamSet& p);
// Returns d grid_latents; accumulates head gradients.
Matrix head_segment_backward(const Matrix& grid_latents, const std::array<int, 3>& grid_dims,
                             const NetConfig& cfg, const ParamSet& p,
                             std::span<const double> d_logits, ParamSet& grads);

// Mean of each lattice cell's encoded latents across modalities; cells with
// no encoded token get a zero row. `counts` receives tokens per cell.
Matrix fuse_grid_latents(const tokenizer::SessionTokens& s, const EncoderPass& pass, int embed_dim,
                         std::vector<int>* counts = nullptr);
Matrix fuse_grid_backward(const tokenizer::SessionTokens& s, const EncoderPass& pass,
                          const Matrix& d_grid, const std::vector<int>& counts);

}  // namespace bfm::network
