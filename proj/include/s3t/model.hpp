#pragma once

#include <map>
#include <string>
#include <vector>

#include "s3t/attn.hpp"
#include "s3t/mase.hpp"

namespace s3t {

enum class TetTarget { potential, current };

struct ModelConfig {
  Index time_steps = 16;
  Index d_model = 256;
  Index n_blocks = 6;
  Index heads = 8;
  Index persons = 1;
  Index n_classes = 60;
  Index c_in = 3;
  std::string graph = "ntu25";
  double gamma = 0.5;
  bool use_mase = true;
  bool use_atg = true;
  bool use_lstr = true;
  bool use_s3 = true;
  bool use_u_readout = true;
  S3Input s3_input = S3Input::post_buffer;
  DecayMode decay_mode = DecayMode::learnable;
  double decay_fixed = 0.5;
  TetTarget tet_target = TetTarget::potential;
  double tau = 0.5;
  double u_th = 0.5;
  double surrogate_alpha = 2.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (time_steps < 1) fail<ConfigError>("time_steps must be >= 1");
    if (n_blocks < 1) fail<ConfigError>("n_blocks must be >= 1");
    if (d_model < 3) fail<ConfigError>("d_model must be >= 3");
    if (heads < 1 || d_model % heads != 0)
      fail<ConfigError>("d_model ", d_model, " is not divisible by heads ",
                        heads);
    if (persons < 1 || persons > 2)
      fail<ConfigError>("persons must be 1 or 2, got ", persons);
    if (n_classes < 2) fail<ConfigError>("n_classes must be >= 2");
    if (c_in < 1) fail<ConfigError>("c_in must be >= 1");
    if (gamma < 0.0) fail<ConfigError>("gamma must be non-negative");
    if (tau <= 0.0 || tau >= 1.0)
      fail<ConfigError>("tau must lie in (0, 1), got ", tau);
    if (u_th <= 0.0) fail<ConfigError>("u_th must be positive");
    if (surrogate_alpha <= 0.0)
      fail<ConfigError>("surrogate_alpha must be positive");
    if (decay_mode == DecayMode::fixed &&
        (decay_fixed <= 0.0 || decay_fixed >= 1.0))
      fail<ConfigError>("decay_fixed must lie in (0, 1), got ", decay_fixed);
  }
};

template <typename Scalar>
struct ModelCache {
  MaseCache<Scalar> mase;
  std::vector<BlockCache<Scalar>> blocks;
  Tensor<Scalar> pooled;
  LifTrace<Scalar> head_trace;
  Index b_samples = 0;
};

template <typename Scalar>
struct ModelOutput {
  Tensor<Scalar> i_traj;
  Tensor<double> u_traj;
  std::vector<Index> predictions;
  std::map<std::string, double> spike_stats;
};

// The full classifier: kinematic embedding, a stack of spiking attention
// blocks, global average pooling over nodes and persons, and a per-step
// linear readout integrated over time.
template <typename Scalar>
class Model {
 public:
  ModelConfig cfg;
  SkeletonGraph graph;
  Tensor<Scalar> a_base;
  MaseLayer<Scalar> mase;
  std::vector<BlockLayer<Scalar>> blocks;
  Param<Scalar> fc_W, fc_b;
  LifUnit<Scalar> head_lif;

  void init(const ModelConfig& config) {
    config.validate();
    cfg = config;
    graph = parse_graph_spec(cfg.graph);
    a_base = build_base_topology<Scalar>(graph);

    Rng rng(cfg.seed);
    const Scalar tau = static_cast<Scalar>(cfg.tau);
    const Scalar u_th = static_cast<Scalar>(cfg.u_th);
    const Scalar sa = static_cast<Scalar>(cfg.surrogate_alpha);

    mase.init(cfg.c_in, cfg.d_model, cfg.use_mase, tau, u_th, sa, rng);

    BlockSettings bs;
    bs.d_model = cfg.d_model;
    bs.heads = cfg.heads;
    bs.gamma = cfg.gamma;
    bs.use_atg = cfg.use_atg;
    bs.use_lstr = cfg.use_lstr;
    bs.use_s3 = cfg.use_s3;
    bs.s3_input = cfg.s3_input;
    bs.decay_mode = cfg.decay_mode;
    bs.decay_fixed = cfg.decay_fixed;
    blocks.assign(static_cast<std::size_t>(cfg.n_blocks), BlockLayer<Scalar>{});
    for (auto& b : blocks) b.init(bs, graph.n_nodes, tau, u_th, sa, rng);

    fc_W.setup(fanin_uniform<Scalar>({cfg.n_classes, cfg.d_model}, cfg.d_model,
                                     rng),
               true);
    fc_b.setup(fanin_uniform<Scalar>({cfg.n_classes}, cfg.d_model, rng), true);
    head_lif.init(tau, u_th, sa, false);
  }

  Index n_nodes() const { return graph.n_nodes; }

  // x: [T, B*persons, c_in, N], person index fastest within each sample.
  ModelOutput<Scalar> forward(const Tensor<Scalar>& x, BnMode bn_mode,
                              SpikeMode spike_mode,
                              ModelCache<Scalar>* cache = nullptr,
                              OpCounter* counter = nullptr) {
    check_rank(x, 4, "model input");
    if (x.dim(0) != cfg.time_steps)
      fail<ShapeError>("model expects ", cfg.time_steps, " time steps, got ",
                       x.dim(0));
    if (x.dim(1) % cfg.persons != 0)
      fail<ShapeError>("batch axis ", x.dim(1), " is not a multiple of ",
                       cfg.persons, " persons");
    const Index T = x.dim(0), b_eff = x.dim(1);
    const Index B = b_eff / cfg.persons, D = cfg.d_model, N = graph.n_nodes;

    if (cache) {
      cache->blocks.resize(blocks.size());
      cache->b_samples = B;
    }

    Tensor<Scalar> s = mase.forward(x, graph, bn_mode, spike_mode,
                                    cache ? &cache->mase : nullptr, counter);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      s = blocks[l].forward(s, a_base, bn_mode, spike_mode,
                            cache ? &cache->blocks[l] : nullptr, counter,
                            static_cast<Index>(l) + 1);
    }

    // Average over nodes, then over the persons of each sample.
    Tensor<Scalar> pooled({T, B, D});
    for (Index t = 0; t < T; ++t)
      for (Index b = 0; b < B; ++b)
        for (Index d = 0; d < D; ++d) {
          double acc = 0.0;
          for (Index p = 0; p < cfg.persons; ++p) {
            const Index be = b * cfg.persons + p;
            const Index base = ((t * b_eff + be) * D + d) * N;
            for (Index n = 0; n < N; ++n) acc += static_cast<double>(s[base + n]);
          }
          pooled[(t * B + b) * D + d] =
              static_cast<Scalar>(acc / static_cast<double>(cfg.persons * N));
        }
    if (counter) {
      LayerTally& misc = counter->layer("misc");
      misc.potential_ops += s.size() + T * B * D * cfg.persons;
      misc.executed_macs += s.size() + T * B * D * cfg.persons;
    }
    if (cache) cache->pooled = pooled;

    ModelOutput<Scalar> out;
    out.i_traj = Tensor<Scalar>({T, B, cfg.n_classes});
    {
      ConstMatrixMap<Scalar> W(fc_W.value.data(), cfg.n_classes, D);
      for (Index t = 0; t < T; ++t) {
        ConstMatrixMap<Scalar> pm(pooled.data() + t * B * D, B, D);
        MatrixMap<Scalar> im(out.i_traj.data() + t * B * cfg.n_classes, B,
                             cfg.n_classes);
        im.noalias() = pm * W.transpose();
        for (Index b = 0; b < B; ++b)
          for (Index k = 0; k < cfg.n_classes; ++k)
            im(b, k) += fc_b.value[k];
      }
    }
    if (counter)
      record_linear(counter->layer("head/fc"), OperandKind::real,
                    pooled.size() * cfg.n_classes, 0, pooled.size(),
                    cfg.n_classes);

    if (cfg.use_u_readout) {
      out.u_traj = if_accumulate(out.i_traj);
    } else {
      // Spiking readout: per-step logits are the running spike counts.
      Tensor<Scalar> spikes =
          head_lif.forward(out.i_traj, spike_mode,
                           cache ? &cache->head_trace : nullptr,
                           counter ? &counter->layer("head/LIF") : nullptr);
      out.u_traj = if_accumulate(spikes);
    }

    out.predictions.resize(static_cast<std::size_t>(B));
    const Index last = (T - 1) * B * cfg.n_classes;
    for (Index b = 0; b < B; ++b) {
      Index best = 0;
      double best_v = out.u_traj[last + b * cfg.n_classes];
      for (Index k = 1; k < cfg.n_classes; ++k) {
        const double v = out.u_traj[last + b * cfg.n_classes + k];
        if (v > best_v) {
          best_v = v;
          best = k;
        }
      }
      out.predictions[static_cast<std::size_t>(b)] = best;
    }

    if (counter) {
      for (const auto& [name, tally] : counter->layers())
        if (tally.neuron_steps > 0)
          out.spike_stats[name] = static_cast<double>(tally.spike_events) /
                                  static_cast<double>(tally.neuron_steps);
    }
    return out;
  }

  // Mean cross entropy over every time step of the readout trajectory.
  double loss(const ModelOutput<Scalar>& out,
              const std::vector<Index>& labels) const {
    const Index T = out.i_traj.dim(0), B = out.i_traj.dim(1);
    const Index C = out.i_traj.dim(2);
    if (static_cast<Index>(labels.size()) != B)
      fail<ShapeError>("got ", labels.size(), " labels for batch of ", B);
    double total = 0.0;
    for (Index t = 0; t < T; ++t)
      for (Index b = 0; b < B; ++b) {
        const Index label = labels[static_cast<std::size_t>(b)];
        if (label < 0 || label >= C)
          fail<DataError>("label ", label, " outside [0, ", C, ")");
        double mx = -std::numeric_limits<double>::infinity();
        for (Index k = 0; k < C; ++k) mx = std::max(mx, logit_at(out, t, b, k));
        double lse = 0.0;
        for (Index k = 0; k < C; ++k)
          lse += std::exp(logit_at(out, t, b, k) - mx);
        total += mx + std::log(lse) - logit_at(out, t, b, label);
      }
    return total / static_cast<double>(T * B);
  }

  // Gradient of the loss with respect to the per-step readout currents.
  Tensor<Scalar> loss_backward(const ModelOutput<Scalar>& out,
                               const std::vector<Index>& labels,
                               ModelCache<Scalar>* cache = nullptr,
                               SpikeMode spike_mode = SpikeMode::hard) {
    const Index T = out.i_traj.dim(0), B = out.i_traj.dim(1);
    const Index C = out.i_traj.dim(2);
    if (static_cast<Index>(labels.size()) != B)
      fail<ShapeError>("got ", labels.size(), " labels for batch of ", B);
    for (Index label : labels)
      if (label < 0 || label >= C)
        fail<DataError>("label ", label, " outside [0, ", C, ")");
    const double inv = 1.0 / static_cast<double>(T * B);
    Tensor<double> g_logit({T, B, C});
    std::vector<double> p(static_cast<std::size_t>(C));
    for (Index t = 0; t < T; ++t)
      for (Index b = 0; b < B; ++b) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Index k = 0; k < C; ++k) mx = std::max(mx, logit_at(out, t, b, k));
        double z = 0.0;
        for (Index k = 0; k < C; ++k) {
          p[static_cast<std::size_t>(k)] = std::exp(logit_at(out, t, b, k) - mx);
          z += p[static_cast<std::size_t>(k)];
        }
        for (Index k = 0; k < C; ++k) {
          double gk = p[static_cast<std::size_t>(k)] / z;
          if (k == labels[static_cast<std::size_t>(b)]) gk -= 1.0;
          g_logit[(t * B + b) * C + k] = gk * inv;
        }
      }

    Tensor<Scalar> g_i({T, B, C});
    if (cfg.tet_target == TetTarget::current) {
      for (Index i = 0; i < g_i.size(); ++i)
        g_i[i] = static_cast<Scalar>(g_logit[i]);
      return g_i;
    }

    // The integrator makes each step's logit the prefix sum of the currents,
    // so the current gradient is the suffix sum of the logit gradients.
    const Index step = B * C;
    Tensor<double> g_acc({T, B, C});
    for (Index t = T - 1; t >= 0; --t)
      for (Index i = 0; i < step; ++i)
        g_acc[t * step + i] = g_logit[t * step + i] +
                              (t + 1 < T ? g_acc[(t + 1) * step + i] : 0.0);

    if (cfg.use_u_readout) {
      for (Index i = 0; i < g_i.size(); ++i)
        g_i[i] = static_cast<Scalar>(g_acc[i]);
      return g_i;
    }
    if (!cache)
      fail<Error>("spiking readout backward needs the forward cache");
    Tensor<Scalar> g_spikes({T, B, C});
    for (Index i = 0; i < g_spikes.size(); ++i)
      g_spikes[i] = static_cast<Scalar>(g_acc[i]);
    return head_lif.backward(cache->head_trace, g_spikes, spike_mode);
  }

  void backward(const ModelCache<Scalar>& cache, const Tensor<Scalar>& g_i,
                SpikeMode spike_mode) {
    const Index T = g_i.dim(0), B = g_i.dim(1), C = cfg.n_classes;
    const Index D = cfg.d_model, N = graph.n_nodes;
    const Index b_eff = B * cfg.persons;

    Tensor<Scalar> g_pooled({T, B, D});
    {
      ConstMatrixMap<Scalar> W(fc_W.value.data(), C, D);
      MatrixMap<Scalar> gW(fc_W.grad.data(), C, D);
      for (Index t = 0; t < T; ++t) {
        ConstMatrixMap<Scalar> gi(g_i.data() + t * B * C, B, C);
        ConstMatrixMap<Scalar> pm(cache.pooled.data() + t * B * D, B, D);
        MatrixMap<Scalar> gp(g_pooled.data() + t * B * D, B, D);
        gp.noalias() = gi * W;
        gW.noalias() += gi.transpose() * pm;
        for (Index b = 0; b < B; ++b)
          for (Index k = 0; k < C; ++k) fc_b.grad[k] += gi(b, k);
      }
    }

    const Scalar scale =
        Scalar(1) / static_cast<Scalar>(cfg.persons * N);
    Tensor<Scalar> g_s({T, b_eff, D, N});
    for (Index t = 0; t < T; ++t)
      for (Index be = 0; be < b_eff; ++be)
        for (Index d = 0; d < D; ++d) {
          const Scalar g = g_pooled[(t * B + be / cfg.persons) * D + d] * scale;
          const Index base = ((t * b_eff + be) * D + d) * N;
          for (Index n = 0; n < N; ++n) g_s[base + n] = g;
        }

    for (std::size_t l = blocks.size(); l-- > 0;)
      g_s = blocks[l].backward(cache.blocks[l], g_s, spike_mode);
    mase.backward(cache.mase, g_s, graph, spike_mode);
  }

  std::vector<ParamView<Scalar>> params() {
    std::vector<ParamView<Scalar>> out;
    mase.collect(out);
    for (std::size_t l = 0; l < blocks.size(); ++l)
      blocks[l].collect("block" + std::to_string(l + 1), out);
    out.push_back({"head.fc_W", &fc_W.value, &fc_W.grad, true});
    out.push_back({"head.fc_b", &fc_b.value, &fc_b.grad, true});
    return out;
  }

  std::vector<BufferView<Scalar>> buffers() {
    std::vector<BufferView<Scalar>> out;
    mase.collect_buffers(out);
    for (std::size_t l = 0; l < blocks.size(); ++l)
      blocks[l].collect_buffers("block" + std::to_string(l + 1), out);
    return out;
  }

  void zero_grad() {
    for (auto& p : params())
      std::fill(p.grad->data(), p.grad->data() + p.grad->size(), Scalar(0));
  }

  // Folds every batch norm into its preceding projection, for inference and
  // op profiling. The fold arithmetic is charged to the misc line.
  void fold_batch_norms(OpCounter* counter = nullptr) {
    LayerTally* misc = counter ? &counter->layer("misc") : nullptr;
    auto fold_one = [&](ProjNorm<Scalar>& p) {
      Tensor<Scalar> Wf, bf;
      fold_batchnorm(p.W.value, p.b.value, p.bn.p, Wf, bf, misc);
      p.W.value = std::move(Wf);
      p.b.value = std::move(bf);
      p.folded = true;
    };
    fold_one(mase.p0);
    if (mase.multi_stream) {
      fold_one(mase.pS);
      fold_one(mase.pT);
    }
    for (auto& b : blocks) {
      fold_one(b.q_proj);
      fold_one(b.k_proj);
      fold_one(b.v_proj);
      fold_one(b.out_proj);
      fold_one(b.mlp1);
      fold_one(b.mlp2);
    }
  }

 private:
  double logit_at(const ModelOutput<Scalar>& out, Index t, Index b,
                  Index k) const {
    const Index idx = (t * out.i_traj.dim(1) + b) * out.i_traj.dim(2) + k;
    if (cfg.tet_target == TetTarget::current)
      return static_cast<double>(out.i_traj[idx]);
    return out.u_traj[idx];
  }
};

}  // namespace s3t
