#pragma once

#include <string>
#include <vector>

#include "s3t/layers.hpp"
#include "s3t/topology.hpp"

namespace s3t {

// Frame-to-frame difference along the time axis; the first step has no
// predecessor and is defined as zero.
template <typename Scalar>
Tensor<Scalar> time_gradient(const Tensor<Scalar>& x) {
  check_rank(x, 4, "time_gradient input");
  Tensor<Scalar> out(x.shape());
  const Index step = x.size() / x.dim(0);
  for (Index t = 1; t < x.dim(0); ++t) {
    const Scalar* cur = x.data() + t * step;
    const Scalar* prev = cur - step;
    Scalar* o = out.data() + t * step;
    for (Index i = 0; i < step; ++i) o[i] = cur[i] - prev[i];
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> time_gradient_adjoint(const Tensor<Scalar>& grad_out) {
  check_rank(grad_out, 4, "time_gradient adjoint input");
  Tensor<Scalar> grad_in(grad_out.shape());
  const Index step = grad_out.size() / grad_out.dim(0);
  for (Index t = 1; t < grad_out.dim(0); ++t) {
    const Scalar* g = grad_out.data() + t * step;
    Scalar* gi = grad_in.data() + t * step;
    Scalar* gp = gi - step;
    for (Index i = 0; i < step; ++i) {
      gi[i] += g[i];
      gp[i] -= g[i];
    }
  }
  return grad_in;
}

// The three kinematic views of a coordinate sequence: the raw positions,
// their spatial differences along the skeleton edges, and their temporal
// differences.
template <typename Scalar>
struct KinematicStreams {
  Tensor<Scalar> x0, xS, xT;
};

template <typename Scalar>
KinematicStreams<Scalar> kinematic_streams(const Tensor<Scalar>& x,
                                           const SkeletonGraph& graph) {
  KinematicStreams<Scalar> s;
  s.x0 = x;
  s.xS = spatial_gradient(x, graph);
  s.xT = time_gradient(x);
  return s;
}

// Input modalities derived from raw joint positions.
enum class Modality { joint, bone, joint_motion, bone_motion };

inline Modality parse_modality(const std::string& name) {
  if (name == "joint") return Modality::joint;
  if (name == "bone") return Modality::bone;
  if (name == "joint_motion") return Modality::joint_motion;
  if (name == "bone_motion") return Modality::bone_motion;
  fail<ConfigError>("unknown modality '", name, "'");
}

template <typename Scalar>
Tensor<Scalar> derive_modality(const Tensor<Scalar>& joints,
                               const SkeletonGraph& graph, Modality m) {
  switch (m) {
    case Modality::joint:
      fail<ConfigError>("joint is the identity modality; use the input as-is");
    case Modality::bone:
      return spatial_gradient(joints, graph);
    case Modality::joint_motion:
      return time_gradient(joints);
    case Modality::bone_motion:
      return time_gradient(spatial_gradient(joints, graph));
  }
  fail<ConfigError>("invalid modality value");
}

template <typename Scalar>
struct MaseCache {
  Tensor<Scalar> x, xS, xT;
  BnCache<Scalar> bn0, bnS, bnT;
  LifTrace<Scalar> trace;
};

// Embeds raw coordinates into D spike channels. Each kinematic stream gets
// its own projection and batch norm; the concatenated result drives a LIF
// layer with a learnable leak. With the multi-stream path disabled only the
// identity stream is used, at full width.
template <typename Scalar>
struct MaseLayer {
  bool multi_stream = true;
  Index c_in = 0, d_model = 0;
  Index d0 = 0, dS = 0, dT = 0;
  ProjNorm<Scalar> p0, pS, pT;
  LifUnit<Scalar> lif;

  static void stream_widths(Index d_model, Index& d0, Index& dS, Index& dT) {
    d0 = (d_model + 2) / 3;
    dS = d0;
    dT = d_model - 2 * d0;
  }

  void init(Index c_in_, Index d_model_, bool multi_stream_, Scalar tau,
            Scalar u_th, Scalar alpha, Rng& rng) {
    multi_stream = multi_stream_;
    c_in = c_in_;
    d_model = d_model_;
    if (multi_stream) {
      stream_widths(d_model, d0, dS, dT);
      if (dT <= 0)
        fail<ConfigError>("model width ", d_model,
                          " too small for three embedding streams");
      p0.init(d0, c_in, rng);
      pS.init(dS, c_in, rng);
      pT.init(dT, c_in, rng);
    } else {
      d0 = d_model;
      dS = dT = 0;
      p0.init(d_model, c_in, rng);
    }
    lif.init(tau, u_th, alpha, /*learnable=*/true);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, const SkeletonGraph& graph,
                         BnMode bn_mode, SpikeMode spike_mode,
                         MaseCache<Scalar>* cache, OpCounter* counter) {
    check_rank(x, 4, "embedding input");
    if (x.dim(2) != c_in)
      fail<ShapeError>("embedding expects ", c_in, " input channels, got ",
                       x.dim(2));
    if (x.dim(3) != graph.n_nodes)
      fail<ShapeError>("embedding input has ", x.dim(3),
                       " nodes but the skeleton has ", graph.n_nodes);

    MaseCache<Scalar> local;
    MaseCache<Scalar>& c = cache ? *cache : local;
    if (cache) c.x = x;

    LayerTally* proj_tally = counter ? &counter->layer("mase/embed") : nullptr;
    Tensor<Scalar> z;
    if (multi_stream) {
      c.xS = spatial_gradient(x, graph);
      c.xT = time_gradient(x);
      if (proj_tally) {
        record_linear(*proj_tally, OperandKind::real, x.size() * d0, 0,
                      x.size(), d0);
        record_linear(*proj_tally, OperandKind::real, x.size() * dS, 0,
                      x.size(), dS);
        record_linear(*proj_tally, OperandKind::real, x.size() * dT, 0,
                      x.size(), dT);
      }
      Tensor<Scalar> z0 = p0.forward(x, bn_mode, cache ? &c.bn0 : nullptr);
      Tensor<Scalar> zS = pS.forward(c.xS, bn_mode, cache ? &c.bnS : nullptr);
      Tensor<Scalar> zT = pT.forward(c.xT, bn_mode, cache ? &c.bnT : nullptr);
      z = concat_channels<Scalar>({&z0, &zS, &zT});
    } else {
      if (proj_tally)
        record_linear(*proj_tally, OperandKind::real, x.size() * d0, 0,
                      x.size(), d0);
      z = p0.forward(x, bn_mode, cache ? &c.bn0 : nullptr);
    }

    LayerTally* lif_tally = counter ? &counter->layer("mase/LIF") : nullptr;
    return lif.forward(z, spike_mode, cache ? &c.trace : nullptr, lif_tally);
  }

  // Accumulates parameter gradients; the gradient with respect to the raw
  // input is discarded since nothing upstream is learnable.
  void backward(const MaseCache<Scalar>& cache, const Tensor<Scalar>& grad_s,
                const SkeletonGraph& graph, SpikeMode spike_mode) {
    (void)graph;
    Tensor<Scalar> gz = lif.backward(cache.trace, grad_s, spike_mode);
    if (multi_stream) {
      Tensor<Scalar> g0 = slice_channels(gz, 0, d0);
      Tensor<Scalar> gS = slice_channels(gz, d0, dS);
      Tensor<Scalar> gT = slice_channels(gz, d0 + dS, dT);
      p0.backward(g0, cache.x, cache.bn0, nullptr);
      pS.backward(gS, cache.xS, cache.bnS, nullptr);
      pT.backward(gT, cache.xT, cache.bnT, nullptr);
    } else {
      p0.backward(gz, cache.x, cache.bn0, nullptr);
    }
  }

  void collect(std::vector<ParamView<Scalar>>& out) {
    p0.collect("mase.proj0", out);
    if (multi_stream) {
      pS.collect("mase.projS", out);
      pT.collect("mase.projT", out);
    }
    lif.collect("mase.lif", out);
  }

  void collect_buffers(std::vector<BufferView<Scalar>>& out) {
    p0.collect_buffers("mase.proj0", out);
    if (multi_stream) {
      pS.collect_buffers("mase.projS", out);
      pT.collect_buffers("mase.projT", out);
    }
  }
};

}  // namespace s3t
