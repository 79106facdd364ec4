#pragma once

#include <cmath>
#include <numbers>
#include <type_traits>

#include "s3t/energy.hpp"
#include "s3t/tensor.hpp"

namespace s3t {

// Arctangent surrogate: derivative used in place of the Heaviside slope.
// At x = 0 with alpha = 2 the slope is exactly 1.
template <typename Scalar>
Scalar surrogate_grad(Scalar x, Scalar alpha) {
  const Scalar k = static_cast<Scalar>(std::numbers::pi / 2) * alpha * x;
  return alpha / (Scalar(2) * (Scalar(1) + k * k));
}

// Differentiable primal whose exact derivative is surrogate_grad. Used by the
// soft emission mode so finite differences can validate the backward passes.
template <typename Scalar>
Scalar soft_spike(Scalar x, Scalar alpha) {
  const Scalar k = static_cast<Scalar>(std::numbers::pi / 2) * alpha * x;
  return std::atan(k) / static_cast<Scalar>(std::numbers::pi) + Scalar(0.5);
}

enum class SpikeMode { hard, soft };

template <typename Scalar>
struct LIFParams {
  Scalar tau = Scalar(0.5);
  Scalar u_th = Scalar(0.5);
  Scalar surrogate_alpha = Scalar(2);
  bool tau_learnable = false;
  Scalar tau_logit = Scalar(0);

  Scalar leak() const { return tau_learnable ? sigmoid(tau_logit) : tau; }
};

// Membrane potentials for one layer, shaped like a single time step of its
// input. Freshly constructed (or reset) state is all zeros; every sequence
// must start from reset state.
template <typename Scalar>
struct MembraneState {
  Tensor<Scalar> u;

  void reset(const std::vector<Index>& step_shape) { u = Tensor<Scalar>(step_shape); }
  bool empty() const { return u.size() == 0; }
};

// Per-step pre-reset potentials and emitted spikes, saved for backward.
template <typename Scalar>
struct LifTrace {
  Tensor<Scalar> u_pre;
  Tensor<Scalar> spikes;
};

// Leaky integrate-and-fire over the leading time axis:
//   U[t] = leak * U[t-1] + I[t],  S[t] = H(U[t] - u_th),  U[t] *= (1 - S[t]).
// Hard mode emits exact {0,1} spikes with a hard reset; soft mode replaces the
// Heaviside with its differentiable primal (reset still multiplies by 1 - S).
template <typename Scalar>
Tensor<Scalar> lif_forward(const Tensor<Scalar>& currents,
                           const LIFParams<Scalar>& p, SpikeMode mode,
                           std::type_identity_t<MembraneState<Scalar>>* state = nullptr,
                           std::type_identity_t<LifTrace<Scalar>>* trace = nullptr,
                           LayerTally* tally = nullptr) {
  if (currents.rank() < 1) fail<ShapeError>("lif_forward: rank 0 input");
  const Index T = currents.dim(0);
  const Index S = T > 0 ? currents.size() / T : 0;
  const Scalar leak = p.leak();

  MembraneState<Scalar> local;
  MembraneState<Scalar>& st = state ? *state : local;
  std::vector<Index> step_shape(currents.shape().begin() + 1, currents.shape().end());
  if (st.empty() || st.u.size() != S) st.reset(step_shape);

  Tensor<Scalar> spikes(currents.shape());
  if (trace) {
    trace->u_pre = Tensor<Scalar>(currents.shape());
    trace->spikes = Tensor<Scalar>(currents.shape());
  }

  std::uint64_t events = 0;
  for (Index t = 0; t < T; ++t) {
    const Scalar* it = currents.data() + t * S;
    Scalar* sp = spikes.data() + t * S;
    Scalar* u = st.u.data();
    Scalar* up = trace ? trace->u_pre.data() + t * S : nullptr;
    for (Index i = 0; i < S; ++i) {
      if (!std::isfinite(static_cast<double>(it[i]))) {
        fail<NumericError>("lif_forward: non-finite input current at time step ", t);
      }
      Scalar u_pre = leak * u[i] + it[i];
      Scalar s;
      if (mode == SpikeMode::hard) {
        s = u_pre >= p.u_th ? Scalar(1) : Scalar(0);
        events += s != Scalar(0) ? 1 : 0;
      } else {
        s = soft_spike(u_pre - p.u_th, p.surrogate_alpha);
      }
      u[i] = u_pre * (Scalar(1) - s);
      sp[i] = s;
      if (up) up[i] = u_pre;
    }
  }
  if (trace) trace->spikes = spikes;
  if (tally && mode == SpikeMode::hard) {
    tally->neuron_steps += static_cast<std::uint64_t>(currents.size());
    tally->spike_events += events;
  }
  return spikes;
}

template <typename Scalar>
struct LifGrad {
  Tensor<Scalar> currents;
  double tau_logit = 0;
};

// Reverse pass of lif_forward. The emission path always uses the surrogate
// slope. Through the reset, hard mode treats the (1 - S[t]) factor as a
// constant gate; soft mode keeps the full product rule so the backward is the
// exact adjoint of the soft forward.
template <typename Scalar>
LifGrad<Scalar> lif_backward(const LifTrace<Scalar>& trace,
                             const Tensor<Scalar>& grad_spikes,
                             const LIFParams<Scalar>& p, SpikeMode mode) {
  check_same_shape(grad_spikes, trace.u_pre, "lif_backward");
  const Index T = trace.u_pre.dim(0);
  const Index S = T > 0 ? trace.u_pre.size() / T : 0;
  const Scalar leak = p.leak();

  LifGrad<Scalar> out;
  out.currents = Tensor<Scalar>(trace.u_pre.shape());
  std::vector<double> carry(static_cast<std::size_t>(S), 0.0);
  double d_leak = 0;

  for (Index t = T - 1; t >= 0; --t) {
    const Scalar* up = trace.u_pre.data() + t * S;
    const Scalar* sp = trace.spikes.data() + t * S;
    const Scalar* gs = grad_spikes.data() + t * S;
    Scalar* gi = out.currents.data() + t * S;
    for (Index i = 0; i < S; ++i) {
      const double u_pre = static_cast<double>(up[i]);
      const double s = static_cast<double>(sp[i]);
      const double gp = static_cast<double>(
          surrogate_grad(up[i] - p.u_th, p.surrogate_alpha));
      double gate = 1.0 - s;
      if (mode == SpikeMode::soft) gate -= u_pre * gp;
      const double du_pre = static_cast<double>(gs[i]) * gp + carry[i] * gate;
      gi[i] = static_cast<Scalar>(du_pre);
      // U_post[t-1] feeds U_pre[t] scaled by the leak.
      double u_post_prev = 0;
      if (t > 0) {
        const Scalar* up_prev = trace.u_pre.data() + (t - 1) * S;
        const Scalar* sp_prev = trace.spikes.data() + (t - 1) * S;
        u_post_prev = static_cast<double>(up_prev[i]) *
                      (1.0 - static_cast<double>(sp_prev[i]));
      }
      d_leak += du_pre * u_post_prev;
      carry[i] = du_pre * leak;
    }
  }

  if (p.tau_learnable) {
    const double lk = static_cast<double>(leak);
    out.tau_logit = d_leak * lk * (1.0 - lk);
  }
  return out;
}

// Non-leaking, non-firing integrator used by the potential readout: exact
// running prefix sum over the time axis, accumulated in double precision.
template <typename Scalar>
Tensor<double> if_accumulate(const Tensor<Scalar>& currents) {
  if (currents.rank() < 1) fail<ShapeError>("if_accumulate: rank 0 input");
  const Index T = currents.dim(0);
  const Index S = T > 0 ? currents.size() / T : 0;
  Tensor<double> out(currents.shape());
  std::vector<double> acc(static_cast<std::size_t>(S), 0.0);
  for (Index t = 0; t < T; ++t) {
    const Scalar* it = currents.data() + t * S;
    double* ot = out.data() + t * S;
    for (Index i = 0; i < S; ++i) {
      acc[static_cast<std::size_t>(i)] += static_cast<double>(it[i]);
      ot[i] = acc[static_cast<std::size_t>(i)];
    }
  }
  return out;
}

}  // namespace s3t
