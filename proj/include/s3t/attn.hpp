#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "s3t/energy.hpp"
#include "s3t/layers.hpp"

namespace s3t {

// Absolute frame-to-frame change of a spike train; step 0 is defined as zero.
template <typename Scalar>
Tensor<Scalar> time_abs_gradient(const Tensor<Scalar>& s) {
  check_rank(s, 4, "spike gradient input");
  Tensor<Scalar> out(s.shape());
  const Index step = s.size() / s.dim(0);
  for (Index t = 1; t < s.dim(0); ++t) {
    const Scalar* cur = s.data() + t * step;
    const Scalar* prev = cur - step;
    Scalar* o = out.data() + t * step;
    for (Index i = 0; i < step; ++i) o[i] = std::abs(cur[i] - prev[i]);
  }
  return out;
}

// Adjoint of time_abs_gradient; the sign is recomputed from the saved input
// and taken as 0 where the difference is exactly 0.
template <typename Scalar>
Tensor<Scalar> time_abs_gradient_backward(const Tensor<Scalar>& grad_out,
                                          const Tensor<Scalar>& s) {
  check_same_shape(grad_out, s, "spike gradient adjoint");
  Tensor<Scalar> grad_in(s.shape());
  const Index step = s.size() / s.dim(0);
  for (Index t = 1; t < s.dim(0); ++t) {
    const Scalar* cur = s.data() + t * step;
    const Scalar* prev = cur - step;
    const Scalar* g = grad_out.data() + t * step;
    Scalar* gi = grad_in.data() + t * step;
    Scalar* gp = gi - step;
    for (Index i = 0; i < step; ++i) {
      const Scalar d = cur[i] - prev[i];
      const Scalar sgn = (d > Scalar(0)) ? Scalar(1)
                        : (d < Scalar(0)) ? Scalar(-1)
                                          : Scalar(0);
      gi[i] += g[i] * sgn;
      gp[i] -= g[i] * sgn;
    }
  }
  return grad_in;
}

// Channel-wise blend of the change signal with the raw spikes:
// out[.,c,.] = alpha[c]*s_grad + (1-alpha[c])*s.
template <typename Scalar>
Tensor<Scalar> dynamic_mix(const Tensor<Scalar>& s_grad, const Tensor<Scalar>& s,
                           const std::vector<Scalar>& alpha) {
  check_same_shape(s_grad, s, "dynamic mix");
  if (static_cast<Index>(alpha.size()) != s.dim(2))
    fail<ShapeError>("dynamic mix has ", alpha.size(), " blend weights for ",
                     s.dim(2), " channels");
  Tensor<Scalar> out(s.shape());
  const Index n = s.dim(3);
  for (Index t = 0; t < s.dim(0); ++t)
    for (Index b = 0; b < s.dim(1); ++b)
      for (Index c = 0; c < s.dim(2); ++c) {
        const Scalar a = alpha[static_cast<std::size_t>(c)];
        const Index base = ((t * s.dim(1) + b) * s.dim(2) + c) * n;
        for (Index i = 0; i < n; ++i)
          out[base + i] = a * s_grad[base + i] + (Scalar(1) - a) * s[base + i];
      }
  return out;
}

// Elementwise conjunction of two spike tensors. For binary inputs this is a
// bitwise AND and carries no arithmetic cost.
template <typename Scalar>
Tensor<Scalar> local_bind(const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                          LayerTally* tally = nullptr) {
  check_same_shape(k, v, "local bind");
  Tensor<Scalar> out = hadamard(k, v);
  if (tally) {
    tally->potential_ops += k.size();
    tally->bitwise_ands += k.size();
  }
  return out;
}

// Per-head node mixing: channels are split into H contiguous head groups and
// each group's node axis is remapped through that head's routing matrix.
// out[t,b,c,i] = Σ_j a[h(c),i,j] * kv[t,b,c,j].
template <typename Scalar>
Tensor<Scalar> route_nodes(const Tensor<Scalar>& kv, const Tensor<Scalar>& a,
                           LayerTally* tally = nullptr) {
  check_rank(kv, 4, "routing input");
  check_rank(a, 3, "routing matrices");
  const Index heads = a.dim(0), n = kv.dim(3), d = kv.dim(2);
  if (a.dim(1) != n || a.dim(2) != n)
    fail<ShapeError>("routing matrices are ", a.dim(1), "x", a.dim(2),
                     " but the input has ", n, " nodes");
  if (heads <= 0 || d % heads != 0)
    fail<ConfigError>(d, " channels cannot split into ", heads, " heads");
  const Index dh = d / heads;
  Tensor<Scalar> out(kv.shape());
  for (Index t = 0; t < kv.dim(0); ++t)
    for (Index b = 0; b < kv.dim(1); ++b)
      for (Index h = 0; h < heads; ++h) {
        const Index off = ((t * kv.dim(1) + b) * d + h * dh) * n;
        ConstMatrixMap<Scalar> in(kv.data() + off, dh, n);
        ConstMatrixMap<Scalar> ah(a.data() + h * n * n, n, n);
        MatrixMap<Scalar> om(out.data() + off, dh, n);
        om.noalias() = in * ah.transpose();
      }
  if (tally) {
    record_linear(*tally, OperandKind::binary, kv.size() * n,
                  count_nonzero(kv), kv.size(), n);
  }
  return out;
}

template <typename Scalar>
void route_nodes_backward(const Tensor<Scalar>& grad_out,
                          const Tensor<Scalar>& kv, const Tensor<Scalar>& a,
                          Tensor<Scalar>& grad_kv, Tensor<Scalar>& grad_a) {
  check_same_shape(grad_out, kv, "routing backward");
  const Index heads = a.dim(0), n = kv.dim(3), d = kv.dim(2);
  const Index dh = d / heads;
  if (grad_kv.size() == 0) grad_kv = Tensor<Scalar>(kv.shape());
  if (grad_a.size() == 0) grad_a = Tensor<Scalar>(a.shape());
  for (Index t = 0; t < kv.dim(0); ++t)
    for (Index b = 0; b < kv.dim(1); ++b)
      for (Index h = 0; h < heads; ++h) {
        const Index off = ((t * kv.dim(1) + b) * d + h * dh) * n;
        ConstMatrixMap<Scalar> go(grad_out.data() + off, dh, n);
        ConstMatrixMap<Scalar> in(kv.data() + off, dh, n);
        ConstMatrixMap<Scalar> ah(a.data() + h * n * n, n, n);
        MatrixMap<Scalar> gkv(grad_kv.data() + off, dh, n);
        MatrixMap<Scalar> ga(grad_a.data() + h * n * n, n, n);
        gkv.noalias() += go * ah;
        ga.noalias() += go.transpose() * in;
      }
}

// Leaky per-channel state scan gated by the query spikes:
//   m[t] = lambda ⊙ m[t-1] + (1-lambda) ⊙ u[t],  m[-1] = 0
//   out[t] = q[t] ⊙ m[t]
// For u in [0,1] every state stays in [0,1] for lambda in [0,1].
template <typename Scalar>
struct ScanResult {
  Tensor<Scalar> out;
  Tensor<Scalar> m;
};

template <typename Scalar>
ScanResult<Scalar> s3_scan(const Tensor<Scalar>& q, const Tensor<Scalar>& u,
                           const std::vector<Scalar>& lambda) {
  check_same_shape(q, u, "scan");
  if (static_cast<Index>(lambda.size()) != q.dim(2))
    fail<ShapeError>("scan has ", lambda.size(), " decay rates for ", q.dim(2),
                     " channels");
  ScanResult<Scalar> r{Tensor<Scalar>(q.shape()), Tensor<Scalar>(q.shape())};
  const Index tb = q.dim(1), d = q.dim(2), n = q.dim(3);
  const Index step = tb * d * n;
  for (Index t = 0; t < q.dim(0); ++t) {
    const Scalar* mp = (t > 0) ? r.m.data() + (t - 1) * step : nullptr;
    Scalar* mt = r.m.data() + t * step;
    Scalar* ot = r.out.data() + t * step;
    const Scalar* ut = u.data() + t * step;
    const Scalar* qt = q.data() + t * step;
    for (Index b = 0; b < tb; ++b)
      for (Index c = 0; c < d; ++c) {
        const Scalar l = lambda[static_cast<std::size_t>(c)];
        const Index base = (b * d + c) * n;
        for (Index i = 0; i < n; ++i) {
          const Scalar prev = mp ? mp[base + i] : Scalar(0);
          mt[base + i] = l * prev + (Scalar(1) - l) * ut[base + i];
          ot[base + i] = qt[base + i] * mt[base + i];
        }
      }
  }
  return r;
}

template <typename Scalar>
struct ScanGrads {
  Tensor<Scalar> q, u;
  std::vector<double> lambda;
};

template <typename Scalar>
ScanGrads<Scalar> s3_scan_backward(const Tensor<Scalar>& grad_out,
                                   const Tensor<Scalar>& q,
                                   const Tensor<Scalar>& u,
                                   const Tensor<Scalar>& m,
                                   const std::vector<Scalar>& lambda) {
  ScanGrads<Scalar> g{Tensor<Scalar>(q.shape()), Tensor<Scalar>(q.shape()),
                      std::vector<double>(lambda.size(), 0.0)};
  const Index tb = q.dim(1), d = q.dim(2), n = q.dim(3);
  const Index step = tb * d * n;
  std::vector<double> carry(static_cast<std::size_t>(step), 0.0);
  for (Index t = q.dim(0) - 1; t >= 0; --t) {
    const Scalar* go = grad_out.data() + t * step;
    const Scalar* qt = q.data() + t * step;
    const Scalar* ut = u.data() + t * step;
    const Scalar* mt = m.data() + t * step;
    const Scalar* mp = (t > 0) ? m.data() + (t - 1) * step : nullptr;
    Scalar* gq = g.q.data() + t * step;
    Scalar* gu = g.u.data() + t * step;
    for (Index b = 0; b < tb; ++b)
      for (Index c = 0; c < d; ++c) {
        const double l = static_cast<double>(lambda[static_cast<std::size_t>(c)]);
        const Index base = (b * d + c) * n;
        double gl = 0.0;
        for (Index i = 0; i < n; ++i) {
          const Index j = base + i;
          gq[j] = go[j] * mt[j];
          const double gm = static_cast<double>(go[j]) * qt[j] + carry[j];
          gu[j] = static_cast<Scalar>(gm * (1.0 - l));
          const double prev = mp ? static_cast<double>(mp[j]) : 0.0;
          gl += gm * (prev - static_cast<double>(ut[j]));
          carry[j] = gm * l;
        }
        g.lambda[static_cast<std::size_t>(c)] += gl;
      }
  }
  return g;
}

enum class S3Input { post_buffer, pre_buffer };
enum class DecayMode { learnable, fixed, linear };

struct BlockSettings {
  Index d_model = 0;
  Index heads = 1;
  double gamma = 0.5;
  bool use_atg = true;
  bool use_lstr = true;
  bool use_s3 = true;
  S3Input s3_input = S3Input::post_buffer;
  DecayMode decay_mode = DecayMode::learnable;
  double decay_fixed = 0.5;
};

template <typename Scalar>
struct BlockCache {
  Tensor<Scalar> s;
  Tensor<Scalar> s_grad, s_dyn;
  BnCache<Scalar> q_bn, k_bn, v_bn, out_bn, m1_bn, m2_bn;
  LifTrace<Scalar> tq, tk, tv, tbuf, tout, tm1, tm2;
  Tensor<Scalar> kv_local;
  Tensor<Scalar> a_dyn;
  Tensor<Scalar> scan_in;
  Tensor<Scalar> m;
  Tensor<Scalar> o;
  Tensor<Scalar> x1;
};

// One spiking transformer block: dynamic Q/K inputs, key-value binding,
// learnable topology routing, the gated state scan, and a two-layer MLP.
// Inputs and outputs carry small non-negative integers (spikes plus residual
// sums); all internal spike paths are strictly binary.
template <typename Scalar>
struct BlockLayer {
  BlockSettings cfg;

  Param<Scalar> alpha_logit;
  ProjNorm<Scalar> q_proj, k_proj, v_proj;
  Param<Scalar> a_learned;
  Param<Scalar> decay_logit;
  ProjNorm<Scalar> out_proj;
  ProjNorm<Scalar> mlp1, mlp2;
  LifUnit<Scalar> lif_q, lif_k, lif_v, lif_buf, lif_out, lif_m1, lif_m2;

  static constexpr Scalar kLambdaLo = Scalar(0.01);
  static constexpr Scalar kLambdaHi = Scalar(0.99);

  void init(const BlockSettings& settings, Index n_nodes, Scalar tau,
            Scalar u_th, Scalar alpha, Rng& rng) {
    cfg = settings;
    const Index d = cfg.d_model;
    if (cfg.heads <= 0 || d % cfg.heads != 0)
      fail<ConfigError>("model width ", d, " is not divisible by ", cfg.heads,
                        " heads");
    if (cfg.use_atg) {
      alpha_logit.setup(
          Tensor<Scalar>::full({d}, logit(Scalar(0.8))), false);
    }
    q_proj.init(d, d, rng);
    k_proj.init(d, d, rng);
    v_proj.init(d, d, rng);
    if (cfg.use_lstr) {
      Tensor<Scalar> a({cfg.heads, n_nodes, n_nodes});
      for (Index i = 0; i < a.size(); ++i)
        a[i] = static_cast<Scalar>(rng.uniform(-0.01, 0.01));
      a_learned.setup(std::move(a), false);
    }
    if (cfg.use_s3 && cfg.decay_mode == DecayMode::learnable) {
      decay_logit.setup(Tensor<Scalar>::full({d}, logit(Scalar(0.5))), false);
    }
    out_proj.init(d, d, rng);
    mlp1.init(4 * d, d, rng);
    mlp2.init(d, 4 * d, rng);
    lif_q.init(tau, u_th, alpha, true);
    lif_k.init(tau, u_th, alpha, true);
    lif_v.init(tau, u_th, alpha, false);
    lif_buf.init(tau, u_th, alpha, false);
    lif_out.init(tau, u_th, alpha, false);
    lif_m1.init(tau, u_th, alpha, false);
    lif_m2.init(tau, u_th, alpha, false);
  }

  std::vector<Scalar> alpha_values() const {
    std::vector<Scalar> a(static_cast<std::size_t>(cfg.d_model));
    for (Index c = 0; c < cfg.d_model; ++c)
      a[static_cast<std::size_t>(c)] = sigmoid(alpha_logit.value[c]);
    return a;
  }

  std::vector<Scalar> lambda_values() const {
    const Index d = cfg.d_model;
    std::vector<Scalar> l(static_cast<std::size_t>(d));
    switch (cfg.decay_mode) {
      case DecayMode::learnable:
        for (Index c = 0; c < d; ++c)
          l[static_cast<std::size_t>(c)] =
              std::clamp(sigmoid(decay_logit.value[c]), kLambdaLo, kLambdaHi);
        break;
      case DecayMode::fixed:
        std::fill(l.begin(), l.end(), static_cast<Scalar>(cfg.decay_fixed));
        break;
      case DecayMode::linear:
        for (Index c = 0; c < d; ++c) {
          const double f = (d > 1) ? static_cast<double>(c) / (d - 1) : 0.5;
          l[static_cast<std::size_t>(c)] =
              static_cast<Scalar>(0.01 + 0.98 * f);
        }
        break;
    }
    return l;
  }

  // Routing matrices for the current parameters: row-softmax of the static
  // topology prior plus the scaled learned offsets, one matrix per head.
  Tensor<Scalar> routing_matrices(const Tensor<Scalar>& a_base) const {
    const Index n = a_base.dim(0);
    Tensor<Scalar> z({cfg.heads, n, n});
    for (Index h = 0; h < cfg.heads; ++h)
      for (Index i = 0; i < n * n; ++i)
        z[h * n * n + i] =
            a_base[i] + static_cast<Scalar>(cfg.gamma) * a_learned.value[h * n * n + i];
    return softmax_rows(z);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& s, const Tensor<Scalar>& a_base,
                         BnMode bn_mode, SpikeMode spike_mode,
                         BlockCache<Scalar>* cache, OpCounter* counter,
                         Index block_index) {
    check_rank(s, 4, "block input");
    const Index d = cfg.d_model;
    if (s.dim(2) != d)
      fail<ShapeError>("block expects ", d, " channels, got ", s.dim(2));

    BlockCache<Scalar> local;
    BlockCache<Scalar>& c = cache ? *cache : local;
    if (cache) c.s = s;

    const std::string pre = "block" + std::to_string(block_index) + "/";
    auto tly = [&](const char* name) -> LayerTally* {
      return counter ? &counter->layer(pre + name) : nullptr;
    };
    auto rate = [&](const char* col) -> LayerTally* {
      return counter ? &counter->layer(block_layer_key(block_index, col))
                     : nullptr;
    };

    // Q/K inputs: blend of the activity-change signal with the raw spikes.
    const Tensor<Scalar>* qk_in = &s;
    if (cfg.use_atg) {
      c.s_grad = time_abs_gradient(s);
      c.s_dyn = dynamic_mix(c.s_grad, s, alpha_values());
      qk_in = &c.s_dyn;
    }

    // The blend splits into two event streams (change signal and raw
    // spikes), so the dynamic path charges both streams' events and doubles
    // the potential op count relative to a single dense pass.
    if (counter) {
      const std::int64_t qk_units =
          cfg.use_atg ? integer_units(c.s_grad) + integer_units(s)
                      : integer_units(s);
      const std::int64_t qk_pos = (cfg.use_atg ? 2 : 1) * s.size();
      record_linear(*tly("q_proj"), OperandKind::integer, qk_pos * d, qk_units,
                    qk_pos, d);
      record_linear(*tly("k_proj"), OperandKind::integer, qk_pos * d, qk_units,
                    qk_pos, d);
      record_linear(*tly("v_proj"), OperandKind::integer, s.size() * d,
                    integer_units(s), s.size(), d);
    }

    Tensor<Scalar> q = lif_q.forward(
        q_proj.forward(*qk_in, bn_mode, cache ? &c.q_bn : nullptr), spike_mode,
        cache ? &c.tq : nullptr, rate("Q"));
    Tensor<Scalar> k = lif_k.forward(
        k_proj.forward(*qk_in, bn_mode, cache ? &c.k_bn : nullptr), spike_mode,
        cache ? &c.tk : nullptr, rate("K"));
    Tensor<Scalar> v = lif_v.forward(
        v_proj.forward(s, bn_mode, cache ? &c.v_bn : nullptr), spike_mode,
        cache ? &c.tv : nullptr, rate("V"));

    Tensor<Scalar> kv = local_bind(k, v, tly("bind"));
    if (cache) c.kv_local = kv;

    Tensor<Scalar> kv_spatial;
    if (cfg.use_lstr) {
      Tensor<Scalar> a_dyn = routing_matrices(a_base);
      if (counter) {
        // Softmax over the routing logits runs once per forward, independent
        // of the time dimension; exp/div and the additions are charged as
        // rough MAC-equivalents. Scaling by batch keeps shard counters
        // additive: a batched forward is tallied as that many logical runs.
        LayerTally& misc = counter->layer("misc");
        const std::uint64_t ops =
            static_cast<std::uint64_t>(4 * a_dyn.size() * s.dim(1));
        misc.potential_ops += ops;
        misc.executed_macs += ops;
      }
      kv_spatial = route_nodes(kv, a_dyn, tly("lstr"));
      if (cache) c.a_dyn = std::move(a_dyn);
    } else {
      kv_spatial = kv;
    }

    Tensor<Scalar> kv_spike =
        lif_buf.forward(kv_spatial, spike_mode, cache ? &c.tbuf : nullptr,
                        rate("Topo Buffer"));

    const Tensor<Scalar>& scan_in =
        (cfg.s3_input == S3Input::post_buffer) ? kv_spike : kv_spatial;
    if (cache) c.scan_in = scan_in;
    const bool scan_in_binary = cfg.s3_input == S3Input::post_buffer;

    Tensor<Scalar> o;
    if (cfg.use_s3) {
      ScanResult<Scalar> r = s3_scan(q, scan_in, lambda_values());
      if (counter) {
        LayerTally& st = *tly("s3");
        // Three ops per position: decay multiply, input blend, query gate.
        // The decay half is a dense real multiply; the input half and the
        // gate fire only on events when their operand is binary.
        st.potential_ops += 3 * q.size();
        st.executed_macs += q.size();
        if (scan_in_binary) {
          st.executed_sops += count_nonzero(scan_in);
        } else {
          st.executed_macs += q.size();
        }
        st.executed_sops += count_nonzero(q);
      }
      o = std::move(r.out);
      if (cache) c.m = std::move(r.m);
    } else {
      o = hadamard(q, scan_in);
      if (counter) {
        LayerTally& st = *tly("s3");
        st.potential_ops += q.size();
        if (scan_in_binary) {
          st.bitwise_ands += q.size();
        } else {
          st.executed_sops += count_nonzero(q);
        }
      }
    }
    if (cache) c.o = o;

    if (counter)
      record_linear(*tly("out_proj"), OperandKind::real, o.size() * d, 0,
                    o.size(), d);
    Tensor<Scalar> attn = lif_out.forward(
        out_proj.forward(o, bn_mode, cache ? &c.out_bn : nullptr), spike_mode,
        cache ? &c.tout : nullptr, rate("Attn Out"));

    Tensor<Scalar> x1 = add(attn, s);
    if (cache) c.x1 = x1;

    if (counter)
      record_linear(*tly("mlp1"), OperandKind::integer, x1.size() * 4 * d,
                    integer_units(x1), x1.size(), 4 * d);
    Tensor<Scalar> h1 = lif_m1.forward(
        mlp1.forward(x1, bn_mode, cache ? &c.m1_bn : nullptr), spike_mode,
        cache ? &c.tm1 : nullptr, rate("MLP 1"));

    if (counter)
      record_linear(*tly("mlp2"), OperandKind::binary, h1.size() * d,
                    count_nonzero(h1), h1.size(), d);
    Tensor<Scalar> h2 = lif_m2.forward(
        mlp2.forward(h1, bn_mode, cache ? &c.m2_bn : nullptr), spike_mode,
        cache ? &c.tm2 : nullptr, rate("MLP 2"));

    return add(h2, x1);
  }

  Tensor<Scalar> backward(const BlockCache<Scalar>& c,
                          const Tensor<Scalar>& grad_out, SpikeMode spike_mode) {
    const Index d = cfg.d_model;

    // out = h2 + x1
    Tensor<Scalar> g_x1 = grad_out;
    Tensor<Scalar> g_z2 = lif_m2.backward(c.tm2, grad_out, spike_mode);
    Tensor<Scalar> g_h1(c.tm1.spikes.shape());
    mlp2.backward(g_z2, c.tm1.spikes, c.m2_bn, &g_h1);
    Tensor<Scalar> g_z1 = lif_m1.backward(c.tm1, g_h1, spike_mode);
    mlp1.backward(g_z1, c.x1, c.m1_bn, &g_x1);

    // x1 = attn + s
    Tensor<Scalar> g_attn = g_x1;
    Tensor<Scalar> g_s = g_x1;

    Tensor<Scalar> g_zo = lif_out.backward(c.tout, g_attn, spike_mode);
    Tensor<Scalar> g_o(c.o.shape());
    out_proj.backward(g_zo, c.o, c.out_bn, &g_o);

    // Scan / gate
    Tensor<Scalar> g_q(c.tq.spikes.shape());
    Tensor<Scalar> g_scan_in(c.scan_in.shape());
    if (cfg.use_s3) {
      const std::vector<Scalar> lambda = lambda_values();
      ScanGrads<Scalar> sg =
          s3_scan_backward(g_o, c.tq.spikes, c.scan_in, c.m, lambda);
      g_q = std::move(sg.q);
      g_scan_in = std::move(sg.u);
      if (cfg.decay_mode == DecayMode::learnable) {
        for (Index ch = 0; ch < d; ++ch) {
          const Scalar raw = sigmoid(decay_logit.value[ch]);
          if (raw > kLambdaLo && raw < kLambdaHi) {
            decay_logit.grad[ch] += static_cast<Scalar>(
                sg.lambda[static_cast<std::size_t>(ch)] *
                static_cast<double>(raw) * (1.0 - static_cast<double>(raw)));
          }
        }
      }
    } else {
      g_q = hadamard(g_o, c.scan_in);
      g_scan_in = hadamard(g_o, c.tq.spikes);
    }

    // Buffer neuron sits on the path only in post_buffer mode; in pre_buffer
    // mode it is observed for rate statistics but the scan taps its input.
    Tensor<Scalar> g_kv_spatial;
    if (cfg.s3_input == S3Input::post_buffer) {
      g_kv_spatial = lif_buf.backward(c.tbuf, g_scan_in, spike_mode);
    } else {
      g_kv_spatial = std::move(g_scan_in);
    }

    Tensor<Scalar> g_kv(c.kv_local.shape());
    if (cfg.use_lstr) {
      Tensor<Scalar> g_a;
      route_nodes_backward(g_kv_spatial, c.kv_local, c.a_dyn, g_kv, g_a);
      Tensor<Scalar> g_z = softmax_rows_backward(c.a_dyn, g_a);
      for (Index i = 0; i < g_z.size(); ++i)
        a_learned.grad[i] += static_cast<Scalar>(cfg.gamma) * g_z[i];
    } else {
      g_kv = std::move(g_kv_spatial);
    }

    Tensor<Scalar> g_k = hadamard(g_kv, c.tv.spikes);
    Tensor<Scalar> g_v = hadamard(g_kv, c.tk.spikes);

    Tensor<Scalar> g_zv = lif_v.backward(c.tv, g_v, spike_mode);
    v_proj.backward(g_zv, c.s, c.v_bn, &g_s);

    const Tensor<Scalar>& qk_in = cfg.use_atg ? c.s_dyn : c.s;
    Tensor<Scalar> g_qk_in(qk_in.shape());
    Tensor<Scalar> g_zq = lif_q.backward(c.tq, g_q, spike_mode);
    q_proj.backward(g_zq, qk_in, c.q_bn, &g_qk_in);
    Tensor<Scalar> g_zk = lif_k.backward(c.tk, g_k, spike_mode);
    k_proj.backward(g_zk, qk_in, c.k_bn, &g_qk_in);

    if (cfg.use_atg) {
      const std::vector<Scalar> alpha = alpha_values();
      Tensor<Scalar> g_sgrad(c.s_grad.shape());
      const Index nn = c.s.dim(3);
      for (Index t = 0; t < c.s.dim(0); ++t)
        for (Index b = 0; b < c.s.dim(1); ++b)
          for (Index ch = 0; ch < d; ++ch) {
            const Scalar a = alpha[static_cast<std::size_t>(ch)];
            const Index base = ((t * c.s.dim(1) + b) * d + ch) * nn;
            double g_alpha = 0.0;
            for (Index i = 0; i < nn; ++i) {
              const Index j = base + i;
              g_alpha += static_cast<double>(g_qk_in[j]) *
                         (static_cast<double>(c.s_grad[j]) -
                          static_cast<double>(c.s[j]));
              g_sgrad[j] = g_qk_in[j] * a;
              g_s[j] += g_qk_in[j] * (Scalar(1) - a);
            }
            alpha_logit.grad[ch] += static_cast<Scalar>(
                g_alpha * static_cast<double>(a) *
                (1.0 - static_cast<double>(a)));
          }
      Tensor<Scalar> g_from_abs = time_abs_gradient_backward(g_sgrad, c.s);
      add_in_place(g_s, g_from_abs);
    } else {
      add_in_place(g_s, g_qk_in);
    }

    return g_s;
  }

  void collect(const std::string& prefix, std::vector<ParamView<Scalar>>& out) {
    if (cfg.use_atg)
      out.push_back({prefix + ".alpha_logit", &alpha_logit.value,
                     &alpha_logit.grad, false});
    q_proj.collect(prefix + ".q_proj", out);
    k_proj.collect(prefix + ".k_proj", out);
    v_proj.collect(prefix + ".v_proj", out);
    if (cfg.use_lstr)
      out.push_back({prefix + ".a_learned", &a_learned.value, &a_learned.grad,
                     false});
    if (cfg.use_s3 && cfg.decay_mode == DecayMode::learnable)
      out.push_back({prefix + ".decay_logit", &decay_logit.value,
                     &decay_logit.grad, false});
    out_proj.collect(prefix + ".out_proj", out);
    mlp1.collect(prefix + ".mlp1", out);
    mlp2.collect(prefix + ".mlp2", out);
    lif_q.collect(prefix + ".lif_q", out);
    lif_k.collect(prefix + ".lif_k", out);
  }

  void collect_buffers(const std::string& prefix,
                       std::vector<BufferView<Scalar>>& out) {
    q_proj.collect_buffers(prefix + ".q_proj", out);
    k_proj.collect_buffers(prefix + ".k_proj", out);
    v_proj.collect_buffers(prefix + ".v_proj", out);
    out_proj.collect_buffers(prefix + ".out_proj", out);
    mlp1.collect_buffers(prefix + ".mlp1", out);
    mlp2.collect_buffers(prefix + ".mlp2", out);
  }
};

}  // namespace s3t
