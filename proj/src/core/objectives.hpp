#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "network.hpp"
#include "tensor.hpp"
#include "tokenizer.hpp"

namespace bfm::objectives {

struct LossReport {
  double l_mae = 0.0;
  double l_var = 0.0;
  double l_cov = 0.0;
  double l_total = 0.0;
  double lambda_var = 0.0;
  double lambda_cov = 0.0;
  std::int64_t n_valid_elements = 0;
};

inline constexpr double kVarianceEps = 1e-4;

struct MaeTerm {
  double value = 0.0;
  std::int64_t count = 0;
};

// Masked reconstruction error for one session's reconstructions. `recon`
// row i holds the prediction for patch hidden[i]. Only voxels inside the
// valid extent contribute. Returns the unnormalized sum and its count.
MaeTerm mae_sum(const Matrix& recon, const std::vector<int>& hidden,
                const tokenizer::PatchSet& patches);

// Sum over sessions divided by the element count. Throws DegenerateLoss
// when no hidden valid voxel exists.
MaeTerm loss_mae(const std::vector<Matrix>& recon, const std::vector<std::vector<int>>& hidden,
                 const std::vector<const tokenizer::PatchSet*>& patches);

// z is [B, D]. Unbiased statistics; B < 2 throws InsufficientBatch.
double loss_var(const Matrix& z, double eps = kVarianceEps);
double loss_cov(const Matrix& z);
Matrix loss_var_grad(const Matrix& z, double eps = kVarianceEps);
Matrix loss_cov_grad(const Matrix& z);

struct Lambdas {
  double var = 0.0;
  double cov = 0.0;
};

inline constexpr double kLambdaVarMax = 0.1;
inline constexpr double kLambdaCovMax = 0.005;
inline constexpr int kWarmEpochs = 5;

Lambdas warmup_lambdas(std::int64_t step, std::int64_t steps_per_epoch,
                       double lambda_var_max = kLambdaVarMax,
                       double lambda_cov_max = kLambdaCovMax, int warm_epochs = kWarmEpochs);

LossReport loss_total(double l_mae, double l_var, double l_cov, double lambda_var,
                      double lambda_cov);

// Forward + backward of the full pretraining objective over a batch.
// `grads` (if non-null) must be zeros_like(params) and receives
// d l_total / d theta. Sessions are processed with up to `threads` workers;
// per-session gradients are reduced in session order, so the result is
// independent of the thread count.
LossReport pretrain_objective(const ParamSet& params, const network::NetConfig& cfg,
                              const tokenizer::TokenBatch& batch, const Lambdas& lambdas,
                              ParamSet* grads, int threads = 1);

struct GradcheckConfig {
  double step = 1e-3;
  double tol_rel = 1e-4;
  int samples = 200;
  std::uint64_t seed = 0;
  // 2: (L(t+h) - L(t-h)) / 2h. 4: fourth-order five-point central stencil.
  int stencil = 2;
};

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::map<std::string, double> per_tensor;  // max relative error per tensor
  int checked = 0;
  bool passed = false;
};

double relative_error(double analytic, double numeric);

// Generic central-difference check of `grad_fn` against `loss_fn` on
// sampled coordinates of `params` (skipping names rejected by `filter`).
GradcheckReport gradcheck(ParamSet params, const std::function<double(const ParamSet&)>& loss_fn,
                          const std::function<ParamSet(const ParamSet&)>& grad_fn,
                          const GradcheckConfig& cfg,
                          const std::function<bool(const std::string&)>& filter = {});

// Gradcheck of l_total for the encoder/decoder on a fixed batch.
GradcheckReport gradcheck_model(const ParamSet& params, const network::NetConfig& net,
                                const tokenizer::TokenBatch& batch, const Lambdas& lambdas,
                                const GradcheckConfig& cfg);

}  // namespace bfm::objectives
