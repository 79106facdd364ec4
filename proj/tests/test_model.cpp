#include <doctest.h>

#include <cmath>

#include "s3t/model.hpp"
#include "test_util.hpp"

using namespace s3t;
using s3t::testing::central_diff;
using s3t::testing::random_tensor;
using s3t::testing::rel_err;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.time_steps = 4;
  cfg.d_model = 6;
  cfg.n_blocks = 1;
  cfg.heads = 2;
  cfg.persons = 1;
  cfg.n_classes = 3;
  cfg.c_in = 2;
  cfg.graph = "chain(3)";
  cfg.seed = 7;
  return cfg;
}

template <typename Scalar>
void zero_params(Model<Scalar>& m) {
  for (auto& p : m.params())
    std::fill(p.value->data(), p.value->data() + p.value->size(), Scalar(0));
}

template <typename Scalar>
Tensor<Scalar> model_input(const ModelConfig& cfg, Index batch, Rng& rng) {
  SkeletonGraph g = parse_graph_spec(cfg.graph);
  return random_tensor<Scalar>(
      {cfg.time_steps, batch * cfg.persons, cfg.c_in, g.n_nodes}, rng);
}

}  // namespace

TEST_CASE("config validation rejects out-of-range settings") {
  ModelConfig cfg = tiny_config();
  cfg.persons = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.d_model = 7;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.tau = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.decay_mode = DecayMode::fixed;
  cfg.decay_fixed = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.n_classes = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("forward rejects mismatched input shapes") {
  Model<float> m;
  m.init(tiny_config());
  Rng rng(1);
  Tensor<float> wrong_t = random_tensor<float>({3, 2, 2, 3}, rng);
  CHECK_THROWS_AS(m.forward(wrong_t, BnMode::infer, SpikeMode::hard),
                  ShapeError);
  Tensor<float> wrong_n = random_tensor<float>({4, 2, 2, 5}, rng);
  CHECK_THROWS_AS(m.forward(wrong_n, BnMode::infer, SpikeMode::hard),
                  ShapeError);
}

TEST_CASE("bias-only network integrates its bias at every step") {
  ModelConfig cfg = tiny_config();
  cfg.n_classes = 2;
  cfg.time_steps = 5;
  Model<float> m;
  m.init(cfg);
  zero_params(m);
  m.fc_b.value[0] = 1.0f;
  m.fc_b.value[1] = 0.0f;

  Rng rng(2);
  Tensor<float> x = model_input<float>(cfg, 2, rng);
  ModelOutput<float> out = m.forward(x, BnMode::infer, SpikeMode::hard);
  for (Index t = 0; t < 5; ++t)
    for (Index b = 0; b < 2; ++b) {
      CHECK(out.i_traj.at3(t, b, 0) == 1.0f);
      CHECK(out.i_traj.at3(t, b, 1) == 0.0f);
      CHECK(out.u_traj[(t * 2 + b) * 2 + 0] == static_cast<double>(t + 1));
      CHECK(out.u_traj[(t * 2 + b) * 2 + 1] == 0.0);
    }
  CHECK(out.predictions[0] == 0);
  CHECK(out.predictions[1] == 0);
}

TEST_CASE("prediction follows the final potential with lowest-index ties") {
  ModelConfig cfg = tiny_config();
  cfg.n_classes = 2;
  Model<float> m;
  m.init(cfg);
  zero_params(m);
  Rng rng(3);
  Tensor<float> x = model_input<float>(cfg, 1, rng);

  m.fc_b.value[0] = 0.1f;
  m.fc_b.value[1] = 0.9f;
  CHECK(m.forward(x, BnMode::infer, SpikeMode::hard).predictions[0] == 1);

  m.fc_b.value[0] = 0.5f;
  m.fc_b.value[1] = 0.5f;
  CHECK(m.forward(x, BnMode::infer, SpikeMode::hard).predictions[0] == 0);
}

TEST_CASE("uniform logits give the closed-form cross entropy") {
  ModelConfig cfg = tiny_config();
  cfg.n_classes = 10;
  Model<float> m;
  m.init(cfg);

  ModelOutput<float> out;
  out.i_traj = Tensor<float>::full({2, 1, 10}, 0.7f);
  out.u_traj = if_accumulate(out.i_traj);
  CHECK(m.loss(out, {3}) == doctest::Approx(std::log(10.0)).epsilon(1e-9));

  m.cfg.tet_target = TetTarget::current;
  CHECK(m.loss(out, {3}) == doctest::Approx(std::log(10.0)).epsilon(1e-9));
}

TEST_CASE("single-step loss equals plain cross entropy") {
  ModelConfig cfg = tiny_config();
  Model<float> m;
  m.init(cfg);
  ModelOutput<float> out;
  out.i_traj = Tensor<float>({1, 1, 3});
  out.i_traj[0] = 0.2f;
  out.i_traj[1] = -0.4f;
  out.i_traj[2] = 1.1f;
  out.u_traj = if_accumulate(out.i_traj);

  double z = 0;
  for (Index k = 0; k < 3; ++k) z += std::exp(static_cast<double>(out.i_traj[k]));
  const double expect = std::log(z) - static_cast<double>(out.i_traj[1]);
  CHECK(m.loss(out, {1}) == doctest::Approx(expect).epsilon(1e-9));

  CHECK_THROWS_AS(m.loss(out, {5}), DataError);
  CHECK_THROWS_AS(m.loss(out, {0, 1}), ShapeError);
}

TEST_CASE("loss is equivariant under class relabeling") {
  ModelConfig cfg = tiny_config();
  Model<float> m;
  m.init(cfg);
  Rng rng(5);
  ModelOutput<float> out;
  out.i_traj = random_tensor<float>({3, 2, 3}, rng);
  out.u_traj = if_accumulate(out.i_traj);
  const double base = m.loss(out, {1, 2});

  // Rotate classes by one: k -> (k+1) mod 3.
  ModelOutput<float> rot;
  rot.i_traj = Tensor<float>({3, 2, 3});
  for (Index t = 0; t < 3; ++t)
    for (Index b = 0; b < 2; ++b)
      for (Index k = 0; k < 3; ++k)
        rot.i_traj.at3(t, b, (k + 1) % 3) = out.i_traj.at3(t, b, k);
  rot.u_traj = if_accumulate(rot.i_traj);
  CHECK(m.loss(rot, {2, 0}) == doctest::Approx(base).epsilon(1e-9));
}

TEST_CASE("readout potential is the exact prefix sum of the currents") {
  ModelConfig cfg = tiny_config();
  Model<float> m;
  m.init(cfg);
  Rng rng(6);
  Tensor<float> x = model_input<float>(cfg, 2, rng);
  ModelOutput<float> out = m.forward(x, BnMode::train, SpikeMode::hard);

  const Index step = 2 * cfg.n_classes;
  std::vector<double> acc(static_cast<std::size_t>(step), 0.0);
  for (Index t = 0; t < cfg.time_steps; ++t)
    for (Index i = 0; i < step; ++i) {
      acc[static_cast<std::size_t>(i)] +=
          static_cast<double>(out.i_traj[t * step + i]);
      CHECK(out.u_traj[t * step + i] == acc[static_cast<std::size_t>(i)]);
    }
}

TEST_CASE("count decoding can disagree with potential decoding") {
  // Both classes drive their readout neuron over threshold at every step, so
  // the spike counts tie and the count decoder falls back to class 0, while
  // the integrated potential cleanly separates them.
  ModelConfig cfg = tiny_config();
  cfg.n_classes = 2;
  cfg.time_steps = 16;

  Rng rng(8);
  Tensor<float> x = model_input<float>(cfg, 1, rng);

  Model<float> potential;
  potential.init(cfg);
  zero_params(potential);
  potential.fc_b.value[0] = 0.5f;
  potential.fc_b.value[1] = 0.9f;
  ModelOutput<float> up = potential.forward(x, BnMode::infer, SpikeMode::hard);
  CHECK(up.predictions[0] == 1);

  cfg.use_u_readout = false;
  Model<float> counts;
  counts.init(cfg);
  zero_params(counts);
  counts.fc_b.value[0] = 0.5f;
  counts.fc_b.value[1] = 0.9f;
  ModelOutput<float> uc = counts.forward(x, BnMode::infer, SpikeMode::hard);
  CHECK(uc.u_traj[(15 * 1 + 0) * 2 + 0] == 16.0);
  CHECK(uc.u_traj[(15 * 1 + 0) * 2 + 1] == 16.0);
  CHECK(uc.predictions[0] == 0);
}

TEST_CASE("every ablation switch changes the output and stays trainable") {
  ModelConfig base = tiny_config();
  Rng rng(9);
  Tensor<float> x = model_input<float>(base, 2, rng);
  const std::vector<Index> labels{0, 2};

  Model<float> full;
  full.init(base);
  ModelOutput<float> ref = full.forward(x, BnMode::train, SpikeMode::hard);

  auto toggles = std::vector<std::function<void(ModelConfig&)>>{
      [](ModelConfig& c) { c.use_mase = false; },
      [](ModelConfig& c) { c.use_atg = false; },
      [](ModelConfig& c) { c.use_lstr = false; },
      [](ModelConfig& c) { c.use_s3 = false; },
      [](ModelConfig& c) { c.use_u_readout = false; },
  };
  for (std::size_t i = 0; i < toggles.size(); ++i) {
    CAPTURE(i);
    ModelConfig cfg = base;
    toggles[i](cfg);
    Model<float> m;
    m.init(cfg);
    ModelCache<float> cache;
    ModelOutput<float> out =
        m.forward(x, BnMode::train, SpikeMode::hard, &cache);

    double diff = 0;
    for (Index j = 0; j < out.u_traj.size(); ++j)
      diff = std::max(diff, std::abs(out.u_traj[j] - ref.u_traj[j]));
    CHECK(diff > 1e-9);

    m.zero_grad();
    Tensor<float> g = m.loss_backward(out, labels, &cache);
    CHECK_NOTHROW(m.backward(cache, g, SpikeMode::hard));
  }

  // All flags off is the plain spiking-transformer baseline; it must still
  // run forward and backward.
  ModelConfig vanilla = base;
  for (auto& t : toggles) t(vanilla);
  Model<float> m;
  m.init(vanilla);
  ModelCache<float> cache;
  ModelOutput<float> out = m.forward(x, BnMode::train, SpikeMode::hard, &cache);
  Tensor<float> g = m.loss_backward(out, labels, &cache);
  CHECK_NOTHROW(m.backward(cache, g, SpikeMode::hard));
}

TEST_CASE("outputs follow batch permutations sample for sample") {
  ModelConfig cfg = tiny_config();
  Model<float> m;
  m.init(cfg);
  Rng rng(10);
  Tensor<float> x = model_input<float>(cfg, 3, rng);
  ModelOutput<float> base = m.forward(x, BnMode::infer, SpikeMode::hard);

  const Index perm[3] = {2, 0, 1};
  Tensor<float> xp(x.shape());
  const Index row = cfg.c_in * 3;
  for (Index t = 0; t < cfg.time_steps; ++t)
    for (Index b = 0; b < 3; ++b)
      for (Index i = 0; i < row; ++i)
        xp[(t * 3 + b) * row + i] = x[(t * 3 + perm[b]) * row + i];
  ModelOutput<float> permuted = m.forward(xp, BnMode::infer, SpikeMode::hard);

  for (Index t = 0; t < cfg.time_steps; ++t)
    for (Index b = 0; b < 3; ++b)
      for (Index k = 0; k < cfg.n_classes; ++k)
        CHECK(permuted.u_traj[(t * 3 + b) * cfg.n_classes + k] ==
              base.u_traj[(t * 3 + perm[b]) * cfg.n_classes + k]);
  for (Index b = 0; b < 3; ++b)
    CHECK(permuted.predictions[static_cast<std::size_t>(b)] ==
          base.predictions[static_cast<std::size_t>(perm[b])]);
}

TEST_CASE("person aggregation is a slot-symmetric mean") {
  ModelConfig cfg = tiny_config();
  cfg.persons = 2;
  Model<float> m;
  m.init(cfg);
  Rng rng(11);
  Tensor<float> x = model_input<float>(cfg, 2, rng);
  ModelOutput<float> base = m.forward(x, BnMode::infer, SpikeMode::hard);
  CHECK(base.u_traj.dim(1) == 2);

  // Swap the two person slots inside each sample.
  Tensor<float> xs(x.shape());
  const Index row = cfg.c_in * 3;
  for (Index t = 0; t < cfg.time_steps; ++t)
    for (Index b = 0; b < 2; ++b)
      for (Index p = 0; p < 2; ++p)
        for (Index i = 0; i < row; ++i)
          xs[(t * 4 + b * 2 + p) * row + i] =
              x[(t * 4 + b * 2 + (1 - p)) * row + i];
  ModelOutput<float> swapped = m.forward(xs, BnMode::infer, SpikeMode::hard);
  for (Index i = 0; i < base.u_traj.size(); ++i)
    CHECK(swapped.u_traj[i] == base.u_traj[i]);

  Tensor<float> odd = random_tensor<float>({4, 3, 2, 3}, rng);
  CHECK_THROWS_AS(m.forward(odd, BnMode::infer, SpikeMode::hard), ShapeError);
}

TEST_CASE("spike statistics cover every spiking layer") {
  ModelConfig cfg = tiny_config();
  cfg.n_blocks = 2;
  Model<float> m;
  m.init(cfg);
  Rng rng(12);
  Tensor<float> x = model_input<float>(cfg, 2, rng);
  OpCounter counter;
  ModelOutput<float> out =
      m.forward(x, BnMode::train, SpikeMode::hard, nullptr, &counter);

  std::vector<std::string> expected{"mase/LIF"};
  for (Index l = 1; l <= 2; ++l)
    for (const std::string& col : kSpikingLayerColumns)
      expected.push_back(block_layer_key(l, col));
  for (const std::string& key : expected) {
    CAPTURE(key);
    REQUIRE(out.spike_stats.count(key) == 1);
    CHECK(out.spike_stats.at(key) >= 0.0);
    CHECK(out.spike_stats.at(key) <= 1.0);
  }

  cfg.use_u_readout = false;
  Model<float> rates;
  rates.init(cfg);
  OpCounter c2;
  ModelOutput<float> o2 =
      rates.forward(x, BnMode::train, SpikeMode::hard, nullptr, &c2);
  CHECK(o2.spike_stats.count("head/LIF") == 1);
}

TEST_CASE("executed work never exceeds the dense upper bound") {
  ModelConfig cfg = tiny_config();
  cfg.n_blocks = 2;
  Model<float> m;
  m.init(cfg);
  Rng rng(13);
  Tensor<float> x = model_input<float>(cfg, 3, rng);
  OpCounter counter;
  m.forward(x, BnMode::train, SpikeMode::hard, nullptr, &counter);
  for (const auto& [name, tally] : counter.layers()) {
    INFO(name);
    CHECK(tally.executed_sops <= tally.potential_ops);
    CHECK(tally.executed_macs <= tally.potential_ops);
    CHECK(tally.spike_events <= tally.neuron_steps);
  }
}

TEST_CASE("shard counters merge to the full-batch profile") {
  ModelConfig cfg = tiny_config();
  Model<float> m;
  m.init(cfg);
  Rng rng(14);
  Tensor<float> x = model_input<float>(cfg, 4, rng);

  OpCounter full;
  m.forward(x, BnMode::infer, SpikeMode::hard, nullptr, &full);

  OpCounter merged;
  const Index row = cfg.c_in * 3;
  for (Index half = 0; half < 2; ++half) {
    Tensor<float> part({cfg.time_steps, 2, cfg.c_in, 3});
    for (Index t = 0; t < cfg.time_steps; ++t)
      for (Index b = 0; b < 2; ++b)
        for (Index i = 0; i < row; ++i)
          part[(t * 2 + b) * row + i] = x[(t * 4 + half * 2 + b) * row + i];
    OpCounter shard;
    m.forward(part, BnMode::infer, SpikeMode::hard, nullptr, &shard);
    merged.merge(shard);
  }

  REQUIRE(merged.layers().size() == full.layers().size());
  for (const auto& [name, tally] : full.layers()) {
    INFO(name);
    const LayerTally& s = merged.at(name);
    CHECK(s.potential_ops == tally.potential_ops);
    CHECK(s.executed_macs == tally.executed_macs);
    CHECK(s.executed_sops == tally.executed_sops);
    CHECK(s.bitwise_ands == tally.bitwise_ands);
    CHECK(s.neuron_steps == tally.neuron_steps);
    CHECK(s.spike_events == tally.spike_events);
  }
}

TEST_CASE("folding batch norms preserves inference outputs") {
  ModelConfig cfg = tiny_config();
  Model<double> m;
  m.init(cfg);
  Rng rng(15);
  Tensor<double> x = model_input<double>(cfg, 2, rng);
  // A few training passes give the running statistics non-trivial values.
  for (int i = 0; i < 3; ++i) m.forward(x, BnMode::train, SpikeMode::hard);

  ModelOutput<double> before = m.forward(x, BnMode::infer, SpikeMode::hard);
  OpCounter counter;
  m.fold_batch_norms(&counter);
  CHECK(counter.at("misc").executed_macs > 0);
  ModelOutput<double> after = m.forward(x, BnMode::infer, SpikeMode::hard);

  for (Index i = 0; i < before.u_traj.size(); ++i)
    CHECK(rel_err(after.u_traj[i], before.u_traj[i], 1e-9) < 1e-9);

  ModelCache<double> cache;
  ModelOutput<double> out =
      m.forward(x, BnMode::infer, SpikeMode::hard, &cache);
  Tensor<double> g = m.loss_backward(out, {0, 1}, &cache);
  CHECK_THROWS_AS(m.backward(cache, g, SpikeMode::hard), Error);
}

TEST_CASE("model gradients match finite differences in soft mode") {
  struct Variant {
    bool u_readout;
    TetTarget target;
  };
  const Variant variants[] = {
      {true, TetTarget::potential},
      {true, TetTarget::current},
      {false, TetTarget::potential},
  };
  for (std::size_t vi = 0; vi < 3; ++vi) {
    CAPTURE(vi);
    ModelConfig cfg = tiny_config();
    cfg.use_u_readout = variants[vi].u_readout;
    cfg.tet_target = variants[vi].target;

    Model<double> m;
    m.init(cfg);
    Rng rng(16);
    Tensor<double> x = model_input<double>(cfg, 2, rng);
    const std::vector<Index> labels{1, 0};

    auto eval = [&](Model<double>& mm) {
      ModelOutput<double> out = mm.forward(x, BnMode::train, SpikeMode::soft);
      return mm.loss(out, labels);
    };

    m.zero_grad();
    ModelCache<double> cache;
    ModelOutput<double> out = m.forward(x, BnMode::train, SpikeMode::soft, &cache);
    Tensor<double> g_i = m.loss_backward(out, labels, &cache, SpikeMode::soft);
    m.backward(cache, g_i, SpikeMode::soft);

    Rng pick(17);
    for (auto& view : m.params()) {
      for (int probe = 0; probe < 2; ++probe) {
        const Index i = pick.uniform_index(view.value->size());
        const double got = (*view.grad)[i];
        const double want = central_diff((*view.value)[i], [&]() {
          Model<double> copy = m;
          return eval(copy);
        });
        CAPTURE(view.name);
        CHECK(rel_err(got, want, 1e-4) < 1e-3);
      }
    }
  }
}
