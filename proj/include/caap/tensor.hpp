#pragma once

// Dense kernels used by the ViT engine. Every kernel is a free function
// template over Eigen expressions; reductions run in ascending index order so
// results are bit-stable regardless of how rows are batched or threaded.

#include <Eigen/Core>

#include <cmath>
#include <concepts>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "caap/error.hpp"

namespace caap {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixF = Matrix<float>;
using RowVectorF = RowVector<float>;
using VectorF = Vector<float>;

/// N-dimensional row-major f32 array. Used where the extent list matters
/// (weight containers); the kernels below work on 2-D views of it.
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<std::int64_t> shape_in, std::vector<float> data_in);
  explicit Tensor(std::vector<std::int64_t> shape_in);

  std::int64_t numel() const { return element_count(shape); }
  std::string shape_string() const { return shape_to_string(shape); }

  static std::int64_t element_count(const std::vector<std::int64_t>& shape);
  static std::string shape_to_string(const std::vector<std::int64_t>& shape);
};

inline std::string Tensor::shape_to_string(const std::vector<std::int64_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::int64_t Tensor::element_count(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto e : shape) {
    if (e <= 0) {
      throw Error(ErrorKind::kShape, "non-positive extent in shape " + shape_to_string(shape));
    }
    n *= e;
  }
  return n;
}

inline Tensor::Tensor(std::vector<std::int64_t> shape_in, std::vector<float> data_in)
    : shape(std::move(shape_in)), data(std::move(data_in)) {
  if (static_cast<std::int64_t>(data.size()) != element_count(shape)) {
    throw Error(ErrorKind::kShape, "tensor data length " + std::to_string(data.size()) +
                                       " does not match shape " + shape_to_string(shape));
  }
}

inline Tensor::Tensor(std::vector<std::int64_t> shape_in)
    : shape(std::move(shape_in)), data(static_cast<std::size_t>(element_count(shape)), 0.0f) {}

namespace detail {

inline std::string dims(Eigen::Index r, Eigen::Index c) {
  return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
}

}  // namespace detail

/// c = a * b with c(i,j) accumulated over t in ascending order.
template <typename DA, typename DB>
Matrix<typename DA::Scalar> matmul(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  using Scalar = typename DA::Scalar;
  if (a.cols() != b.rows()) {
    throw Error(ErrorKind::kShape, "matmul: inner extents differ: " + detail::dims(a.rows(), a.cols()) +
                                       " x " + detail::dims(b.rows(), b.cols()));
  }
  Matrix<Scalar> c = Matrix<Scalar>::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    auto row = c.row(i);
    for (Eigen::Index t = 0; t < a.cols(); ++t) {
      row.noalias() += a(i, t) * b.row(t);
    }
  }
  return c;
}

/// x * w + bias, bias broadcast over rows.
template <typename DX, typename DW, typename DB>
Matrix<typename DX::Scalar> linear(const Eigen::MatrixBase<DX>& x, const Eigen::MatrixBase<DW>& w,
                                   const Eigen::MatrixBase<DB>& bias) {
  if (bias.size() != w.cols()) {
    throw Error(ErrorKind::kShape, "linear: bias length " + std::to_string(bias.size()) +
                                       " does not match output width " + std::to_string(w.cols()));
  }
  Matrix<typename DX::Scalar> y = matmul(x, w);
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    for (Eigen::Index j = 0; j < y.cols(); ++j) y(i, j) += bias(j);
  }
  return y;
}

/// Sum in ascending index order.
template <typename D>
typename D::Scalar ordered_sum(const Eigen::DenseBase<D>& v) {
  typename D::Scalar s(0);
  for (Eigen::Index i = 0; i < v.size(); ++i) s += v(i);
  return s;
}

/// Softmax over one row with max subtraction, in place.
template <typename D>
void softmax_inplace(Eigen::MatrixBase<D>& row) {
  using Scalar = typename D::Scalar;
  Scalar m = row(0);
  for (Eigen::Index j = 1; j < row.size(); ++j) m = std::max(m, row(j));
  Scalar s(0);
  for (Eigen::Index j = 0; j < row.size(); ++j) {
    row(j) = std::exp(row(j) - m);
    s += row(j);
  }
  for (Eigen::Index j = 0; j < row.size(); ++j) row(j) /= s;
}

template <typename D>
Matrix<typename D::Scalar> softmax_rows(const Eigen::MatrixBase<D>& x) {
  Matrix<typename D::Scalar> y = x;
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    auto r = y.row(i);
    softmax_inplace(r);
  }
  return y;
}

/// Per-row layer normalization: two-pass mean/variance, then gamma * xhat + beta.
template <typename DX, typename DG, typename DB>
Matrix<typename DX::Scalar> layernorm(const Eigen::MatrixBase<DX>& x, const Eigen::MatrixBase<DG>& gamma,
                                      const Eigen::MatrixBase<DB>& beta, typename DX::Scalar eps) {
  using Scalar = typename DX::Scalar;
  const Eigen::Index d = x.cols();
  if (gamma.size() != d || beta.size() != d) {
    throw Error(ErrorKind::kShape, "layernorm: width " + std::to_string(d) + " vs gamma " +
                                       std::to_string(gamma.size()) + " / beta " +
                                       std::to_string(beta.size()));
  }
  if (!(eps > Scalar(0))) throw Error(ErrorKind::kConfig, "layernorm: eps must be positive");
  Matrix<Scalar> y(x.rows(), d);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Scalar mean(0);
    for (Eigen::Index j = 0; j < d; ++j) mean += x(i, j);
    mean /= Scalar(d);
    Scalar var(0);
    for (Eigen::Index j = 0; j < d; ++j) {
      const Scalar c = x(i, j) - mean;
      var += c * c;
    }
    var /= Scalar(d);
    const Scalar inv = Scalar(1) / std::sqrt(var + eps);
    for (Eigen::Index j = 0; j < d; ++j) y(i, j) = (x(i, j) - mean) * inv * gamma(j) + beta(j);
  }
  return y;
}

/// tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <std::floating_point Scalar>
Scalar gelu(Scalar x) {
  const Scalar k = Scalar(0.7978845608028654);  // sqrt(2/pi)
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(k * (x + Scalar(0.044715) * x * x * x)));
}

template <typename D>
Matrix<typename D::Scalar> gelu(const Eigen::MatrixBase<D>& x) {
  return x.unaryExpr([](typename D::Scalar v) { return gelu(v); });
}

template <typename D>
bool all_finite(const Eigen::DenseBase<D>& x) {
  return x.allFinite();
}

}  // namespace caap
