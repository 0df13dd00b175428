#include <cmath>
#include <limits>

#include "config.hpp"
#include "helpers.hpp"
#include "objectives.hpp"
#include "training.hpp"

using namespace bfm;
using namespace bfm::objectives;

namespace {

Matrix mat(int r, int c, std::vector<double> v) {
  Matrix m(r, c);
  m.data = std::move(v);
  return m;
}

// One patch of two voxels, both valid.
tokenizer::PatchSet two_voxel_patch(double a, double b) {
  tokenizer::PatchSet ps;
  ps.patch = {2, 1, 1};
  ps.grid_dims = {1, 1, 1};
  ps.n_modalities = 1;
  ps.patches.push_back({0, {0, 0, 0}, true, 2});
  ps.voxels = mat(1, 2, {a, b});
  ps.voxel_valid = {1, 1};
  return ps;
}

// Central differences of a scalar function of a matrix, for the regularizer gradients.
Matrix numeric_grad(const Matrix& z, const std::function<double(const Matrix&)>& f) {
  Matrix g(z.rows, z.cols);
  const double h = 1e-6;
  for (std::size_t i = 0; i < z.data.size(); ++i) {
    Matrix p = z, m = z;
    p.data[i] += h;
    m.data[i] -= h;
    g.data[i] = (f(p) - f(m)) / (2 * h);
  }
  return g;
}

}  // namespace

TEST_SUITE("objectives") {

TEST_CASE("masked reconstruction error") {
  const auto ps = two_voxel_patch(1.0, 2.0);
  CHECK(mae_sum(mat(1, 2, {1.0, 2.0}), {0}, ps).value == 0.0);
  const auto t = loss_mae({mat(1, 2, {1.0, 0.0})}, {{0}}, {&ps});
  CHECK(t.count == 2);
  CHECK(t.value == doctest::Approx(2.0).epsilon(1e-12));

  // Invalid voxels never contribute.
  auto half = ps;
  half.voxel_valid = {1, 0};
  CHECK(loss_mae({mat(1, 2, {1.0, 0.0})}, {{0}}, {&half}).value == 0.0);
  CHECK_THROWS_CODE(loss_mae({Matrix(0, 2)}, {{}}, {&ps}), ErrorCode::DegenerateLoss);
}

TEST_CASE("variance term") {
  CHECK(loss_var(mat(2, 2, {0, 0, 2, 0})) == doctest::Approx(0.495).epsilon(1e-12));
  CHECK(loss_var(mat(3, 2, {1, 1, 1, 1, 1, 1})) == doctest::Approx(0.99).epsilon(1e-12));
  // Columns with unbiased variance 4 sit past the hinge.
  CHECK(loss_var(mat(2, 2, {0, 0, 2.0 * std::sqrt(2.0), 2.0 * std::sqrt(2.0)})) == 0.0);
  CHECK_THROWS_CODE(loss_var(Matrix(1, 3)), ErrorCode::InsufficientBatch);

  const Matrix z = mat(4, 3, {0.1, 0.2, -0.3, 0.05, 0.4, 0.2, -0.2, 0.1, 0.0, 0.3, -0.1, 0.15});
  const Matrix g = loss_var_grad(z);
  const Matrix n = numeric_grad(z, [](const Matrix& m) { return loss_var(m); });
  for (std::size_t i = 0; i < g.data.size(); ++i) CHECK(g.data[i] == doctest::Approx(n.data[i]).epsilon(1e-6));
}

TEST_CASE("covariance term") {
  CHECK(loss_cov(mat(2, 2, {1, 1, -1, -1})) == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(loss_cov(mat(3, 1, {1, 2, 3})) == 0.0);
  CHECK(loss_cov(mat(4, 2, {1, 1, 1, -1, -1, 1, -1, -1})) == 0.0);
  CHECK_THROWS_CODE(loss_cov(Matrix(1, 2)), ErrorCode::InsufficientBatch);

  const Matrix z = mat(4, 3, {0.1, 0.2, -0.3, 0.05, 0.4, 0.2, -0.2, 0.1, 0.0, 0.3, -0.1, 0.15});
  const Matrix g = loss_cov_grad(z);
  const Matrix n = numeric_grad(z, [](const Matrix& m) { return loss_cov(m); });
  for (std::size_t i = 0; i < g.data.size(); ++i)
    CHECK(g.data[i] == doctest::Approx(n.data[i]).epsilon(1e-6).scale(1e-3));
}

TEST_CASE("warm-up schedule and total") {
  const auto l0 = warmup_lambdas(0, 10);
  CHECK(l0.var == 0.0);
  CHECK(l0.cov == 0.0);
  const auto mid = warmup_lambdas(25, 10);
  CHECK(mid.var == doctest::Approx(0.05));
  CHECK(mid.cov == doctest::Approx(0.0025));
  for (std::int64_t s : {50, 51, 1000}) {
    const auto l = warmup_lambdas(s, 10);
    CHECK(l.var == 0.1);
    CHECK(l.cov == 0.005);
  }
  CHECK_THROWS_CODE(warmup_lambdas(-1, 10), ErrorCode::RangeError);

  CHECK(loss_total(2.0, 0.99, 4.0, 0.1, 0.005).l_total == doctest::Approx(2.119).epsilon(1e-12));
  CHECK(loss_total(2.0, 0.99, 4.0, 0.0, 0.0).l_total == 2.0);
  CHECK(loss_total(0, 0, 0, 0, 0).l_total == 0.0);
  CHECK_THROWS_CODE(loss_total(std::numeric_limits<double>::quiet_NaN(), 0, 0, 0, 0),
                    ErrorCode::NonFiniteLoss);
}

TEST_CASE("generic gradcheck") {
  ParamSet p;
  p.add("w", {1}).data[0] = 0.7;
  const double x = 1.3;
  auto loss = [&](const ParamSet& q) {
    const double y = q.at("w").data[0] * x;
    return y * y;
  };
  auto grad = [&](const ParamSet& q) {
    ParamSet g = q.zeros_like();
    g.at("w").data[0] = 2.0 * q.at("w").data[0] * x * x;
    return g;
  };
  GradcheckConfig cfg;
  cfg.samples = 1;
  const auto ok = gradcheck(p, loss, grad, cfg);
  CHECK(ok.passed);
  CHECK(ok.max_rel_error < 1e-12);

  auto scaled = [&](const ParamSet& q) {
    ParamSet g = grad(q);
    g.at("w").data[0] *= 1.01;
    return g;
  };
  const auto bad = gradcheck(p, loss, scaled, cfg);
  CHECK(!bad.passed);
  CHECK(bad.max_rel_error == doctest::Approx(0.01 / 2.01).epsilon(1e-6));
}

TEST_CASE("tiny model gradcheck, fourth-order stencil") {
  RunConfig cfg = tiny_config();
  cfg.gradcheck_samples = 40;
  cfg.gradcheck_stencil = 4;
  const auto r = training::run_gradcheck(cfg);
  CHECK(r.checked == 40);
  CHECK_MESSAGE(r.max_rel_error < 1e-4, r.max_rel_error);
}

TEST_CASE("objective is independent of the thread count") {
  const RunConfig cfg = tiny_config();
  const auto data = training::synthetic_provider(cfg);
  std::vector<preprocess::PreparedSession> s;
  for (std::size_t i = 0; i < 2; ++i)
    s.push_back(preprocess::preprocess_session(data->load(i).session, cfg.effective_prep()));
  embed::EmbeddingCache cache;
  const auto batch = tokenizer::assemble_batch(s, cfg.tokenizer_config(), cfg.embedding_source(), &cache);
  const ParamSet p = network::init_params(cfg.net, 0);
  ParamSet g1 = p.zeros_like(), g2 = p.zeros_like();
  const auto a = pretrain_objective(p, cfg.net, batch, {0.1, 0.005}, &g1, 1);
  const auto b = pretrain_objective(p, cfg.net, batch, {0.1, 0.005}, &g2, 2);
  CHECK(a.l_total == b.l_total);
  CHECK(g1 == g2);
}

}  // TEST_SUITE
