#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace bfm {

// Dense row-major matrix of doubles. Token sequences, activations and
// gradients all live in these.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

  std::span<double> row(int r) {
    return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
  }
  std::span<const double> row(int r) const {
    return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
  }
};

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> s, double fill = 0.0);

  std::size_t size() const noexcept { return data.size(); }
  std::int64_t dim(std::size_t i) const { return shape.at(i); }
};

// Ordered name -> tensor map. Iteration order (lexicographic) is the
// canonical order for serialization, reductions and gradient norms.
class ParamSet {
 public:
  Tensor& add(const std::string& name, std::vector<std::int64_t> shape);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  // Same names and shapes, zero-filled.
  ParamSet zeros_like() const;
  void fill(double value);
  // Throws ShapeError unless names and shapes agree exactly.
  void check_compatible(const ParamSet& other) const;

  std::size_t total_size() const;
  std::size_t tensor_count() const { return tensors_.size(); }

  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  std::map<std::string, Tensor> tensors_;
};

inline bool operator==(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.data == b.data;
}

// Y = X W^T + b, with W stored [out, in] row-major. b may be empty.
void linear_forward(const Matrix& x, std::span<const double> w, std::span<const double> b,
                    int out, Matrix& y);

// Accumulates dW (+= dY^T X) and db (+= column sums of dY); returns dX.
// Either gradient span may be empty to skip it.
Matrix linear_backward(const Matrix& x, std::span<const double> w, const Matrix& dy,
                       std::span<double> dw, std::span<double> db);

}  // namespace bfm
