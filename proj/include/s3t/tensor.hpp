#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "s3t/common.hpp"

namespace s3t {

// Dense tensor with row-major contiguous storage. The canonical event-tensor
// axis order is [time, batch, channel, node]; a (t, b) slice is then a
// contiguous channel-by-node matrix, which is what the Eigen kernels map.
template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<Index> shape) : shape_(std::move(shape)) {
    for (Index d : shape_) {
      if (d < 0) fail<ShapeError>("negative dimension ", d, " in tensor shape");
    }
    data_.assign(static_cast<std::size_t>(count(shape_)), Scalar(0));
  }

  static Tensor zeros(std::vector<Index> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<Index> shape, Scalar v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor from_data(std::vector<Index> shape, std::vector<Scalar> data) {
    Tensor t;
    t.shape_ = std::move(shape);
    if (static_cast<Index>(data.size()) != count(t.shape_)) {
      fail<ShapeError>("data size ", data.size(), " does not match shape volume ",
                       count(t.shape_));
    }
    t.data_ = std::move(data);
    return t;
  }

  Index rank() const { return static_cast<Index>(shape_.size()); }

  Index dim(Index i) const {
    if (i < 0 || i >= rank()) fail<ShapeError>("axis ", i, " out of range for rank ", rank());
    return shape_[static_cast<std::size_t>(i)];
  }

  const std::vector<Index>& shape() const { return shape_; }

  Index size() const { return static_cast<Index>(data_.size()); }

  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  Scalar operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  Scalar& at4(Index t, Index b, Index c, Index n) {
    return data_[static_cast<std::size_t>(flat4(t, b, c, n))];
  }
  Scalar at4(Index t, Index b, Index c, Index n) const {
    return data_[static_cast<std::size_t>(flat4(t, b, c, n))];
  }

  Scalar& at3(Index i, Index j, Index k) {
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  Scalar at3(Index i, Index j, Index k) const {
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }

  Scalar& at2(Index i, Index j) {
    return data_[static_cast<std::size_t>(i * shape_[1] + j)];
  }
  Scalar at2(Index i, Index j) const {
    return data_[static_cast<std::size_t>(i * shape_[1] + j)];
  }

  Index flat4(Index t, Index b, Index c, Index n) const {
    return ((t * shape_[1] + b) * shape_[2] + c) * shape_[3] + n;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  static Index count(const std::vector<Index>& shape) {
    Index n = 1;
    for (Index d : shape) n *= d;
    return n;
  }

 private:
  std::vector<Index> shape_;
  std::vector<Scalar> data_;
};

using RealTensor = Tensor<float>;

template <typename Scalar>
std::string shape_str(const Tensor<Scalar>& t) {
  std::string s = "[";
  for (Index i = 0; i < t.rank(); ++i) {
    if (i) s += ", ";
    s += std::to_string(t.dim(i));
  }
  return s + "]";
}

template <typename Scalar>
void check_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b,
                      const char* what) {
  if (!a.same_shape(b)) {
    fail<ShapeError>(what, ": shape mismatch ", shape_str(a), " vs ", shape_str(b));
  }
}

template <typename Scalar>
void check_rank(const Tensor<Scalar>& t, Index rank, const char* what) {
  if (t.rank() != rank) {
    fail<ShapeError>(what, ": expected rank ", rank, " tensor, got ", shape_str(t));
  }
}

// Eigen views over the flat storage. `flat` is the workhorse for elementwise
// expressions; `as_matrix` reinterprets a contiguous region as a row-major
// matrix for the GEMM kernels.
template <typename Scalar>
using ArrayMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
template <typename Scalar>
using ConstArrayMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
template <typename Scalar>
using MatrixRM =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatrixMap = Eigen::Map<MatrixRM<Scalar>>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const MatrixRM<Scalar>>;

template <typename Scalar>
ArrayMap<Scalar> flat(Tensor<Scalar>& t) {
  return ArrayMap<Scalar>(t.data(), t.size());
}

template <typename Scalar>
ConstArrayMap<Scalar> flat(const Tensor<Scalar>& t) {
  return ConstArrayMap<Scalar>(t.data(), t.size());
}

template <typename Scalar>
MatrixMap<Scalar> as_matrix(Tensor<Scalar>& t, Index rows, Index cols,
                            Index offset = 0) {
  if (offset + rows * cols > t.size()) {
    fail<ShapeError>("matrix view ", rows, "x", cols, " at offset ", offset,
                     " exceeds tensor size ", t.size());
  }
  return MatrixMap<Scalar>(t.data() + offset, rows, cols);
}

template <typename Scalar>
ConstMatrixMap<Scalar> as_matrix(const Tensor<Scalar>& t, Index rows, Index cols,
                                 Index offset = 0) {
  if (offset + rows * cols > t.size()) {
    fail<ShapeError>("matrix view ", rows, "x", cols, " at offset ", offset,
                     " exceeds tensor size ", t.size());
  }
  return ConstMatrixMap<Scalar>(t.data() + offset, rows, cols);
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  Tensor<To> out(t.shape());
  for (Index i = 0; i < t.size(); ++i) out[i] = static_cast<To>(t[i]);
  return out;
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  check_same_shape(a, b, "add");
  Tensor<Scalar> out(a.shape());
  flat(out) = flat(a) + flat(b);
  return out;
}

template <typename Scalar>
void add_in_place(Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  check_same_shape(a, b, "add_in_place");
  flat(a) += flat(b);
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  check_same_shape(a, b, "sub");
  Tensor<Scalar> out(a.shape());
  flat(out) = flat(a) - flat(b);
  return out;
}

template <typename Scalar>
Tensor<Scalar> hadamard(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  check_same_shape(a, b, "hadamard");
  Tensor<Scalar> out(a.shape());
  flat(out) = flat(a) * flat(b);
  return out;
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar s) {
  Tensor<Scalar> out(a.shape());
  flat(out) = flat(a) * s;
  return out;
}

// Reductions accumulate in double regardless of storage precision.
template <typename Scalar>
double sum(const Tensor<Scalar>& t) {
  double acc = 0;
  for (Index i = 0; i < t.size(); ++i) acc += static_cast<double>(t[i]);
  return acc;
}

template <typename Scalar>
double mean(const Tensor<Scalar>& t) {
  if (t.size() == 0) fail<ShapeError>("mean of empty tensor");
  return sum(t) / static_cast<double>(t.size());
}

template <typename Scalar>
std::uint64_t count_nonzero(const Tensor<Scalar>& t) {
  std::uint64_t n = 0;
  for (Index i = 0; i < t.size(); ++i) n += (t[i] != Scalar(0)) ? 1 : 0;
  return n;
}

// Total integer charge of an event tensor: a value-k entry contributes k.
// Values must be non-negative integers.
template <typename Scalar>
std::uint64_t integer_units(const Tensor<Scalar>& t) {
  std::uint64_t units = 0;
  for (Index i = 0; i < t.size(); ++i) {
    double v = static_cast<double>(t[i]);
    double r = std::nearbyint(v);
    if (v < 0 || std::abs(v - r) > 1e-6) {
      fail<NumericError>("integer_units: value ", v, " at flat index ", i,
                         " is not a non-negative integer");
    }
    units += static_cast<std::uint64_t>(r);
  }
  return units;
}

template <typename Scalar>
bool all_finite(const Tensor<Scalar>& t) {
  for (Index i = 0; i < t.size(); ++i) {
    if (!std::isfinite(static_cast<double>(t[i]))) return false;
  }
  return true;
}

template <typename Scalar>
bool is_binary(const Tensor<Scalar>& t) {
  for (Index i = 0; i < t.size(); ++i) {
    if (t[i] != Scalar(0) && t[i] != Scalar(1)) return false;
  }
  return true;
}

// Binary event tensor. Construction through `checked` rejects anything that
// is not exactly 0 or 1, so holding a SpikeTensor is proof of binarity.
// `trusted` is for producers that are binary by construction (the spike
// emission kernels write literal zeros and ones).
template <typename Scalar>
class BasicSpikeTensor {
 public:
  BasicSpikeTensor() = default;

  static BasicSpikeTensor checked(Tensor<Scalar> values) {
    for (Index i = 0; i < values.size(); ++i) {
      if (values[i] != Scalar(0) && values[i] != Scalar(1)) {
        fail<NumericError>("spike tensor value ", static_cast<double>(values[i]),
                           " at flat index ", i, " is not 0 or 1");
      }
    }
    return BasicSpikeTensor(std::move(values));
  }

  static BasicSpikeTensor trusted(Tensor<Scalar> values) {
    return BasicSpikeTensor(std::move(values));
  }

  const Tensor<Scalar>& values() const { return values_; }

  Tensor<Scalar> to_real() const { return values_; }

  const std::vector<Index>& shape() const { return values_.shape(); }

 private:
  explicit BasicSpikeTensor(Tensor<Scalar> v) : values_(std::move(v)) {}
  Tensor<Scalar> values_;
};

using SpikeTensor = BasicSpikeTensor<float>;

// Concatenates along the channel axis of [T, B, C, N] tensors.
template <typename Scalar>
Tensor<Scalar> concat_channels(const std::vector<const Tensor<Scalar>*>& parts) {
  if (parts.empty()) fail<ShapeError>("concat_channels: no inputs");
  for (const auto* p : parts) check_rank(*p, 4, "concat_channels");
  Index T = parts[0]->dim(0), B = parts[0]->dim(1), N = parts[0]->dim(3);
  Index C = 0;
  for (const auto* p : parts) {
    if (p->dim(0) != T || p->dim(1) != B || p->dim(3) != N) {
      fail<ShapeError>("concat_channels: mismatched non-channel axes ",
                       shape_str(*parts[0]), " vs ", shape_str(*p));
    }
    C += p->dim(2);
  }
  Tensor<Scalar> out({T, B, C, N});
  for (Index t = 0; t < T; ++t) {
    for (Index b = 0; b < B; ++b) {
      Index c0 = 0;
      for (const auto* p : parts) {
        Index pc = p->dim(2);
        const Scalar* src = p->data() + p->flat4(t, b, 0, 0);
        Scalar* dst = out.data() + out.flat4(t, b, c0, 0);
        std::copy(src, src + pc * N, dst);
        c0 += pc;
      }
    }
  }
  return out;
}

// Extracts channels [c0, c0+len) of a [T, B, C, N] tensor.
template <typename Scalar>
Tensor<Scalar> slice_channels(const Tensor<Scalar>& x, Index c0, Index len) {
  check_rank(x, 4, "slice_channels");
  if (c0 < 0 || len < 0 || c0 + len > x.dim(2)) {
    fail<ShapeError>("slice_channels: range [", c0, ", ", c0 + len,
                     ") exceeds channel axis ", x.dim(2));
  }
  Index T = x.dim(0), B = x.dim(1), N = x.dim(3);
  Tensor<Scalar> out({T, B, len, N});
  for (Index t = 0; t < T; ++t) {
    for (Index b = 0; b < B; ++b) {
      const Scalar* src = x.data() + x.flat4(t, b, c0, 0);
      std::copy(src, src + len * N, out.data() + out.flat4(t, b, 0, 0));
    }
  }
  return out;
}

}  // namespace s3t
