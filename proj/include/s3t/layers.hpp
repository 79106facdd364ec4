#pragma once

#include <string>
#include <vector>

#include "s3t/neurons.hpp"
#include "s3t/ops.hpp"

namespace s3t {

// Learnable tensor with its gradient accumulator.
template <typename Scalar>
struct Param {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool weight_decay = true;

  void setup(Tensor<Scalar> v, bool wd) {
    grad = Tensor<Scalar>(v.shape());
    value = std::move(v);
    weight_decay = wd;
  }

  bool empty() const { return value.size() == 0; }
};

// Flat view used by the optimizer, checkpointing and gradient checks.
// Parameters enumerate in a fixed registration order, so iteration is
// deterministic.
template <typename Scalar>
struct ParamView {
  std::string name;
  Tensor<Scalar>* value = nullptr;
  Tensor<Scalar>* grad = nullptr;
  bool weight_decay = true;
};

// Persistent non-learnable state (batch norm running statistics).
template <typename Scalar>
struct BufferView {
  std::string name;
  Tensor<Scalar>* value = nullptr;
};

// Uniform fan-in initialization for projection weights and biases.
template <typename Scalar>
Tensor<Scalar> fanin_uniform(std::vector<Index> shape, Index fan_in, Rng& rng) {
  Tensor<Scalar> t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (Index i = 0; i < t.size(); ++i)
    t[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
  return t;
}

// Batch norm with learnable affine and gradient storage.
template <typename Scalar>
struct BnUnit {
  BatchNormParams<Scalar> p;
  Tensor<Scalar> grad_gamma, grad_beta;

  void init(Index channels) {
    p = BatchNormParams<Scalar>::identity(channels);
    grad_gamma = Tensor<Scalar>({channels});
    grad_beta = Tensor<Scalar>({channels});
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, BnMode mode,
                         BnCache<Scalar>* cache) {
    return batch_norm(x, p, mode, cache);
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out,
                          const BnCache<Scalar>& cache) {
    return batch_norm_backward(grad_out, cache, p, grad_gamma, grad_beta);
  }

  void collect(const std::string& prefix, std::vector<ParamView<Scalar>>& out) {
    out.push_back({prefix + ".gamma", &p.gamma, &grad_gamma, false});
    out.push_back({prefix + ".beta", &p.beta, &grad_beta, false});
  }

  void collect_buffers(const std::string& prefix,
                       std::vector<BufferView<Scalar>>& out) {
    out.push_back({prefix + ".running_mean", &p.running_mean});
    out.push_back({prefix + ".running_var", &p.running_var});
  }
};

// Projection followed by batch norm; the standard pre-neuron unit. Once the
// norm has been folded into the weights (inference) the norm step is skipped.
template <typename Scalar>
struct ProjNorm {
  Param<Scalar> W, b;
  BnUnit<Scalar> bn;
  bool folded = false;

  void init(Index c_out, Index c_in, Rng& rng) {
    W.setup(fanin_uniform<Scalar>({c_out, c_in}, c_in, rng), true);
    b.setup(fanin_uniform<Scalar>({c_out}, c_in, rng), true);
    bn.init(c_out);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, BnMode mode,
                         BnCache<Scalar>* cache) {
    Tensor<Scalar> z = channel_project(x, W.value, b.value);
    if (folded) return z;
    return bn.forward(z, mode, cache);
  }

  // Returns the gradient with respect to x (accumulated into grad_x when it
  // is non-null).
  void backward(const Tensor<Scalar>& grad_out, const Tensor<Scalar>& x,
                const BnCache<Scalar>& cache, Tensor<Scalar>* grad_x) {
    if (folded) fail<Error>("cannot backprop through a folded projection");
    Tensor<Scalar> gz = bn.backward(grad_out, cache);
    channel_project_backward(gz, x, W.value, grad_x, W.grad, b.grad);
  }

  void collect(const std::string& prefix, std::vector<ParamView<Scalar>>& out) {
    out.push_back({prefix + ".W", &W.value, &W.grad, true});
    out.push_back({prefix + ".b", &b.value, &b.grad, true});
    bn.collect(prefix + ".bn", out);
  }

  void collect_buffers(const std::string& prefix,
                       std::vector<BufferView<Scalar>>& out) {
    bn.collect_buffers(prefix + ".bn", out);
  }
};

// LIF layer wrapper; when the leak is learnable it is exposed as a
// one-element tau_logit parameter.
template <typename Scalar>
struct LifUnit {
  LIFParams<Scalar> base;
  Param<Scalar> tau_logit;

  void init(Scalar tau, Scalar u_th, Scalar alpha, bool learnable) {
    base.tau = tau;
    base.u_th = u_th;
    base.surrogate_alpha = alpha;
    base.tau_learnable = learnable;
    if (learnable) {
      tau_logit.setup(Tensor<Scalar>::full({1}, logit(tau)), false);
    }
  }

  LIFParams<Scalar> materialize() const {
    LIFParams<Scalar> p = base;
    if (p.tau_learnable) p.tau_logit = tau_logit.value[0];
    return p;
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& currents, SpikeMode mode,
                         LifTrace<Scalar>* trace, LayerTally* tally) {
    return lif_forward(currents, materialize(), mode, nullptr, trace, tally);
  }

  Tensor<Scalar> backward(const LifTrace<Scalar>& trace,
                          const Tensor<Scalar>& grad_spikes, SpikeMode mode) {
    auto g = lif_backward(trace, grad_spikes, materialize(), mode);
    if (base.tau_learnable) tau_logit.grad[0] += static_cast<Scalar>(g.tau_logit);
    return std::move(g.currents);
  }

  void collect(const std::string& prefix, std::vector<ParamView<Scalar>>& out) {
    if (base.tau_learnable) {
      out.push_back({prefix + ".tau_logit", &tau_logit.value, &tau_logit.grad, false});
    }
  }
};

}  // namespace s3t
