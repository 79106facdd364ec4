#pragma once

#include <cmath>
#include <vector>

#include "s3t/energy.hpp"
#include "s3t/tensor.hpp"

namespace s3t {

// 1x1 channel projection: out[t,b,co,n] = sum_ci W[co,ci] * x[t,b,ci,n] + b[co].
// Equivalent to a kernel-1 conv over the node axis. When a tally is supplied
// the layer records its dense op count plus the executed MAC/SOP split implied
// by the operand kind of x.
template <typename Scalar>
Tensor<Scalar> channel_project(const Tensor<Scalar>& x, const Tensor<Scalar>& W,
                               const Tensor<Scalar>& b,
                               LayerTally* tally = nullptr,
                               OperandKind input_kind = OperandKind::real) {
  check_rank(x, 4, "channel_project input");
  check_rank(W, 2, "channel_project weight");
  check_rank(b, 1, "channel_project bias");
  const Index T = x.dim(0), B = x.dim(1), Cin = x.dim(2), N = x.dim(3);
  const Index Cout = W.dim(0);
  if (W.dim(1) != Cin) {
    fail<ShapeError>("channel_project: weight expects ", W.dim(1),
                     " input channels, input has ", Cin);
  }
  if (b.dim(0) != Cout) {
    fail<ShapeError>("channel_project: bias length ", b.dim(0),
                     " does not match ", Cout, " output channels");
  }

  Tensor<Scalar> out({T, B, Cout, N});
  auto Wm = as_matrix(W, Cout, Cin);
  Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> bv(b.data(), Cout);
  for (Index t = 0; t < T; ++t) {
    for (Index b_i = 0; b_i < B; ++b_i) {
      auto xm = as_matrix(x, Cin, N, x.flat4(t, b_i, 0, 0));
      auto om = as_matrix(out, Cout, N, out.flat4(t, b_i, 0, 0));
      om.noalias() = Wm * xm;
      om.colwise() += bv;
    }
  }

  if (tally) {
    const auto positions = static_cast<std::uint64_t>(T * B * Cin * N);
    std::uint64_t units = 0;
    switch (input_kind) {
      case OperandKind::binary: units = count_nonzero(x); break;
      case OperandKind::integer: units = integer_units(x); break;
      case OperandKind::real: units = positions; break;
    }
    record_linear(*tally, input_kind, positions * static_cast<std::uint64_t>(Cout),
                  units, positions, static_cast<std::uint64_t>(Cout));
  }
  return out;
}

template <typename Scalar>
void channel_project_backward(const Tensor<Scalar>& grad_out,
                              const Tensor<Scalar>& x, const Tensor<Scalar>& W,
                              Tensor<Scalar>* grad_x, Tensor<Scalar>& grad_W,
                              Tensor<Scalar>& grad_b) {
  const Index T = x.dim(0), B = x.dim(1), Cin = x.dim(2), N = x.dim(3);
  const Index Cout = W.dim(0);
  check_same_shape(grad_W, W, "channel_project_backward grad_W");
  auto Wm = as_matrix(W, Cout, Cin);
  auto gWm = as_matrix(grad_W, Cout, Cin);
  Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> gbv(grad_b.data(), Cout);
  for (Index t = 0; t < T; ++t) {
    for (Index b_i = 0; b_i < B; ++b_i) {
      auto gom = as_matrix(grad_out, Cout, N, grad_out.flat4(t, b_i, 0, 0));
      auto xm = as_matrix(x, Cin, N, x.flat4(t, b_i, 0, 0));
      gWm.noalias() += gom * xm.transpose();
      gbv += gom.rowwise().sum();
      if (grad_x) {
        auto gxm = as_matrix(*grad_x, Cin, N, grad_x->flat4(t, b_i, 0, 0));
        gxm.noalias() += Wm.transpose() * gom;
      }
    }
  }
}

template <typename Scalar>
struct BatchNormParams {
  Tensor<Scalar> gamma, beta;
  Tensor<Scalar> running_mean, running_var;
  Scalar eps = Scalar(1e-5);
  Scalar momentum = Scalar(0.1);

  static BatchNormParams identity(Index channels, Scalar eps = Scalar(1e-5)) {
    if (eps <= Scalar(0)) fail<ConfigError>("batch norm eps must be positive, got ", eps);
    BatchNormParams p;
    p.gamma = Tensor<Scalar>::full({channels}, Scalar(1));
    p.beta = Tensor<Scalar>::zeros({channels});
    p.running_mean = Tensor<Scalar>::zeros({channels});
    p.running_var = Tensor<Scalar>::full({channels}, Scalar(1));
    p.eps = eps;
    return p;
  }
};

enum class BnMode { train, infer };

template <typename Scalar>
struct BnCache {
  Tensor<Scalar> xhat;
  std::vector<double> inv_std;
  BnMode mode = BnMode::train;
};

// Channel-wise batch normalization of a [T, B, C, N] tensor; statistics pool
// over time, batch and node axes. Train mode normalizes with batch statistics
// and updates the running estimates (unbiased variance, standard momentum
// blend); infer mode uses the stored running statistics.
template <typename Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& x, BatchNormParams<Scalar>& p,
                          BnMode mode, BnCache<Scalar>* cache = nullptr) {
  check_rank(x, 4, "batch_norm input");
  const Index T = x.dim(0), B = x.dim(1), C = x.dim(2), N = x.dim(3);
  if (p.gamma.dim(0) != C) {
    fail<ShapeError>("batch_norm: ", p.gamma.dim(0), " channels in params, ", C,
                     " in input");
  }
  if (p.eps <= Scalar(0)) fail<ConfigError>("batch norm eps must be positive");

  const Index M = T * B * N;
  std::vector<double> mu(static_cast<std::size_t>(C), 0.0);
  std::vector<double> inv_std(static_cast<std::size_t>(C), 0.0);

  if (mode == BnMode::train) {
    if (M < 2) fail<ShapeError>("batch_norm train mode needs >= 2 samples per channel, got ", M);
    std::vector<double> var(static_cast<std::size_t>(C), 0.0);
    for (Index c = 0; c < C; ++c) {
      double acc = 0;
      for (Index t = 0; t < T; ++t)
        for (Index b = 0; b < B; ++b) {
          const Scalar* row = x.data() + x.flat4(t, b, c, 0);
          for (Index n = 0; n < N; ++n) acc += static_cast<double>(row[n]);
        }
      mu[c] = acc / static_cast<double>(M);
      double vacc = 0;
      for (Index t = 0; t < T; ++t)
        for (Index b = 0; b < B; ++b) {
          const Scalar* row = x.data() + x.flat4(t, b, c, 0);
          for (Index n = 0; n < N; ++n) {
            double d = static_cast<double>(row[n]) - mu[c];
            vacc += d * d;
          }
        }
      var[c] = vacc / static_cast<double>(M);
      inv_std[c] = 1.0 / std::sqrt(var[c] + static_cast<double>(p.eps));
      double unbiased = vacc / static_cast<double>(M - 1);
      p.running_mean[c] = static_cast<Scalar>(
          (1.0 - p.momentum) * p.running_mean[c] + p.momentum * mu[c]);
      p.running_var[c] = static_cast<Scalar>(
          (1.0 - p.momentum) * p.running_var[c] + p.momentum * unbiased);
    }
  } else {
    for (Index c = 0; c < C; ++c) {
      mu[c] = static_cast<double>(p.running_mean[c]);
      inv_std[c] =
          1.0 / std::sqrt(static_cast<double>(p.running_var[c]) + static_cast<double>(p.eps));
    }
  }

  Tensor<Scalar> out(x.shape());
  Tensor<Scalar> xhat(x.shape());
  for (Index c = 0; c < C; ++c) {
    const Scalar g = p.gamma[c], be = p.beta[c];
    for (Index t = 0; t < T; ++t)
      for (Index b = 0; b < B; ++b) {
        const Scalar* row = x.data() + x.flat4(t, b, c, 0);
        Scalar* hrow = xhat.data() + xhat.flat4(t, b, c, 0);
        Scalar* orow = out.data() + out.flat4(t, b, c, 0);
        for (Index n = 0; n < N; ++n) {
          double h = (static_cast<double>(row[n]) - mu[c]) * inv_std[c];
          hrow[n] = static_cast<Scalar>(h);
          orow[n] = static_cast<Scalar>(h) * g + be;
        }
      }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->mode = mode;
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> batch_norm_backward(const Tensor<Scalar>& grad_out,
                                   const BnCache<Scalar>& cache,
                                   const BatchNormParams<Scalar>& p,
                                   Tensor<Scalar>& grad_gamma,
                                   Tensor<Scalar>& grad_beta) {
  const Tensor<Scalar>& xhat = cache.xhat;
  check_same_shape(grad_out, xhat, "batch_norm_backward");
  const Index T = xhat.dim(0), B = xhat.dim(1), C = xhat.dim(2), N = xhat.dim(3);
  const double M = static_cast<double>(T * B * N);

  Tensor<Scalar> grad_in(xhat.shape());
  for (Index c = 0; c < C; ++c) {
    double sum_g = 0, sum_gh = 0;
    for (Index t = 0; t < T; ++t)
      for (Index b = 0; b < B; ++b) {
        const Scalar* grow = grad_out.data() + grad_out.flat4(t, b, c, 0);
        const Scalar* hrow = xhat.data() + xhat.flat4(t, b, c, 0);
        for (Index n = 0; n < N; ++n) {
          sum_g += static_cast<double>(grow[n]);
          sum_gh += static_cast<double>(grow[n]) * static_cast<double>(hrow[n]);
        }
      }
    grad_gamma[c] += static_cast<Scalar>(sum_gh);
    grad_beta[c] += static_cast<Scalar>(sum_g);

    const double g = static_cast<double>(p.gamma[c]);
    const double is = cache.inv_std[c];
    if (cache.mode == BnMode::train) {
      const double mean_g = sum_g / M, mean_gh = sum_gh / M;
      for (Index t = 0; t < T; ++t)
        for (Index b = 0; b < B; ++b) {
          const Scalar* grow = grad_out.data() + grad_out.flat4(t, b, c, 0);
          const Scalar* hrow = xhat.data() + xhat.flat4(t, b, c, 0);
          Scalar* irow = grad_in.data() + grad_in.flat4(t, b, c, 0);
          for (Index n = 0; n < N; ++n) {
            double gi = g * is *
                        (static_cast<double>(grow[n]) - mean_g -
                         static_cast<double>(hrow[n]) * mean_gh);
            irow[n] += static_cast<Scalar>(gi);
          }
        }
    } else {
      for (Index t = 0; t < T; ++t)
        for (Index b = 0; b < B; ++b) {
          const Scalar* grow = grad_out.data() + grad_out.flat4(t, b, c, 0);
          Scalar* irow = grad_in.data() + grad_in.flat4(t, b, c, 0);
          for (Index n = 0; n < N; ++n)
            irow[n] += static_cast<Scalar>(g * is * static_cast<double>(grow[n]));
        }
    }
  }
  return grad_in;
}

// Folds inference-mode batch norm into the preceding projection, so
// batch_norm(channel_project(x, W, b), p, infer) == channel_project(x, W', b').
template <typename Scalar>
void fold_batchnorm(const Tensor<Scalar>& W, const Tensor<Scalar>& b,
                    const BatchNormParams<Scalar>& p, Tensor<Scalar>& W_out,
                    Tensor<Scalar>& b_out, LayerTally* tally = nullptr) {
  const Index Cout = W.dim(0), Cin = W.dim(1);
  if (p.gamma.dim(0) != Cout) {
    fail<ShapeError>("fold_batchnorm: ", p.gamma.dim(0), " channels in norm, ",
                     Cout, " projection outputs");
  }
  W_out = Tensor<Scalar>(W.shape());
  b_out = Tensor<Scalar>(b.shape());
  for (Index c = 0; c < Cout; ++c) {
    double s = static_cast<double>(p.gamma[c]) /
               std::sqrt(static_cast<double>(p.running_var[c]) + static_cast<double>(p.eps));
    for (Index i = 0; i < Cin; ++i)
      W_out.at2(c, i) = static_cast<Scalar>(static_cast<double>(W.at2(c, i)) * s);
    b_out[c] = static_cast<Scalar>(
        (static_cast<double>(b[c]) - static_cast<double>(p.running_mean[c])) * s +
        static_cast<double>(p.beta[c]));
  }
  if (tally) {
    // One-off fold arithmetic, charged as dense real work.
    auto ops = static_cast<std::uint64_t>(Cout * Cin + 2 * Cout);
    tally->potential_ops += ops;
    tally->executed_macs += ops;
  }
}

// Row-wise softmax over the last axis. Accepts any rank >= 1; every leading
// axis indexes an independent row.
template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& z) {
  if (z.rank() < 1) fail<ShapeError>("softmax_rows: rank 0 input");
  const Index cols = z.dim(z.rank() - 1);
  if (cols == 0) fail<ShapeError>("softmax_rows: empty rows");
  const Index rows = z.size() / cols;
  Tensor<Scalar> out(z.shape());
  for (Index r = 0; r < rows; ++r) {
    const Scalar* zr = z.data() + r * cols;
    Scalar* po = out.data() + r * cols;
    double m = static_cast<double>(zr[0]);
    for (Index j = 1; j < cols; ++j) m = std::max(m, static_cast<double>(zr[j]));
    double denom = 0;
    for (Index j = 0; j < cols; ++j) {
      double e = std::exp(static_cast<double>(zr[j]) - m);
      po[j] = static_cast<Scalar>(e);
      denom += e;
    }
    for (Index j = 0; j < cols; ++j)
      po[j] = static_cast<Scalar>(static_cast<double>(po[j]) / denom);
  }
  return out;
}

// Given probabilities P = softmax_rows(Z) and dL/dP, returns dL/dZ.
template <typename Scalar>
Tensor<Scalar> softmax_rows_backward(const Tensor<Scalar>& probs,
                                     const Tensor<Scalar>& grad_probs) {
  check_same_shape(probs, grad_probs, "softmax_rows_backward");
  const Index cols = probs.dim(probs.rank() - 1);
  const Index rows = probs.size() / cols;
  Tensor<Scalar> grad_z(probs.shape());
  for (Index r = 0; r < rows; ++r) {
    const Scalar* p = probs.data() + r * cols;
    const Scalar* gp = grad_probs.data() + r * cols;
    Scalar* gz = grad_z.data() + r * cols;
    double dot = 0;
    for (Index j = 0; j < cols; ++j)
      dot += static_cast<double>(p[j]) * static_cast<double>(gp[j]);
    for (Index j = 0; j < cols; ++j)
      gz[j] = static_cast<Scalar>(static_cast<double>(p[j]) *
                                  (static_cast<double>(gp[j]) - dot));
  }
  return grad_z;
}

}  // namespace s3t
