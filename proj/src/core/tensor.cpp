#include "tensor.hpp"

#include <functional>
#include <numeric>

#include "error.hpp"

namespace bfm {

Tensor::Tensor(std::vector<std::int64_t> s, double fill) : shape(std::move(s)) {
  const auto n = std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                                 std::multiplies<>());
  data.assign(static_cast<std::size_t>(n), fill);
}

Tensor& ParamSet::add(const std::string& name, std::vector<std::int64_t> shape) {
  auto [it, inserted] = tensors_.emplace(name, Tensor(std::move(shape)));
  if (!inserted) fail(ErrorCode::Internal, "duplicate parameter '" + name + "'");
  return it->second;
}

Tensor& ParamSet::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) fail(ErrorCode::NotFound, "no parameter '" + name + "'");
  return it->second;
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) fail(ErrorCode::NotFound, "no parameter '" + name + "'");
  return it->second;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (const auto& [name, t] : tensors_) out.add(name, t.shape);
  return out;
}

void ParamSet::fill(double value) {
  for (auto& [name, t] : tensors_) std::fill(t.data.begin(), t.data.end(), value);
}

void ParamSet::check_compatible(const ParamSet& other) const {
  if (tensors_.size() != other.tensors_.size())
    fail(ErrorCode::ShapeError, "parameter sets differ in tensor count");
  auto a = tensors_.begin();
  auto b = other.tensors_.begin();
  for (; a != tensors_.end(); ++a, ++b) {
    if (a->first != b->first)
      fail(ErrorCode::ShapeError, "parameter name mismatch: " + a->first + " vs " + b->first);
    if (a->second.shape != b->second.shape)
      fail(ErrorCode::ShapeError, "shape mismatch for " + a->first);
  }
}

std::size_t ParamSet::total_size() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors_) n += t.size();
  return n;
}

void linear_forward(const Matrix& x, std::span<const double> w, std::span<const double> b,
                    int out, Matrix& y) {
  const int in = x.cols;
  y = Matrix(x.rows, out);
  for (int r = 0; r < x.rows; ++r) {
    const double* xr = x.data.data() + static_cast<std::size_t>(r) * in;
    double* yr = y.data.data() + static_cast<std::size_t>(r) * out;
    for (int o = 0; o < out; ++o) {
      const double* wo = w.data() + static_cast<std::size_t>(o) * in;
      double acc = b.empty() ? 0.0 : b[o];
      for (int i = 0; i < in; ++i) acc += xr[i] * wo[i];
      yr[o] = acc;
    }
  }
}

Matrix linear_backward(const Matrix& x, std::span<const double> w, const Matrix& dy,
                       std::span<double> dw, std::span<double> db) {
  const int in = x.cols;
  const int out = dy.cols;
  Matrix dx(x.rows, in);
  for (int r = 0; r < x.rows; ++r) {
    const double* xr = x.data.data() + static_cast<std::size_t>(r) * in;
    const double* gr = dy.data.data() + static_cast<std::size_t>(r) * out;
    double* dxr = dx.data.data() + static_cast<std::size_t>(r) * in;
    for (int o = 0; o < out; ++o) {
      const double g = gr[o];
      if (g == 0.0) continue;
      const double* wo = w.data() + static_cast<std::size_t>(o) * in;
      for (int i = 0; i < in; ++i) dxr[i] += g * wo[i];
      if (!dw.empty()) {
        double* dwo = dw.data() + static_cast<std::size_t>(o) * in;
        for (int i = 0; i < in; ++i) dwo[i] += g * xr[i];
      }
      if (!db.empty()) db[o] += g;
    }
  }
  return dx;
}

}  // namespace bfm
