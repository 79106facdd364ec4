#include "s3t/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <sstream>

namespace s3t {

void AdamW::init(const std::vector<ParamView<float>>& params) {
  step_count_ = 0;
  m_.assign(params.size(), {});
  v_.assign(params.size(), {});
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i].assign(static_cast<std::size_t>(params[i].value->size()), 0.0);
    v_[i].assign(static_cast<std::size_t>(params[i].value->size()), 0.0);
  }
}

void AdamW::step(const std::vector<ParamView<float>>& params, double lr_now) {
  if (m_.size() != params.size())
    fail<Error>("optimizer was initialized for ", m_.size(),
                " parameters, got ", params.size());
  ++step_count_;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count_));
  for (std::size_t p = 0; p < params.size(); ++p) {
    const ParamView<float>& view = params[p];
    float* w = view.value->data();
    const float* g = view.grad->data();
    std::vector<double>& m = m_[p];
    std::vector<double>& v = v_[p];
    const double decay =
        view.weight_decay ? 1.0 - lr_now * weight_decay : 1.0;
    for (Index i = 0; i < view.value->size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      if (!std::isfinite(gi))
        fail<NumericError>("non-finite gradient in parameter \"", view.name,
                           "\" at index ", i);
      const std::size_t k = static_cast<std::size_t>(i);
      m[k] = beta1 * m[k] + (1.0 - beta1) * gi;
      v[k] = beta2 * v[k] + (1.0 - beta2) * gi * gi;
      const double m_hat = m[k] / bc1;
      const double v_hat = v[k] / bc2;
      double wi = static_cast<double>(w[i]) * decay;
      wi -= lr_now * m_hat / (std::sqrt(v_hat) + eps);
      w[i] = static_cast<float>(wi);
    }
  }
}

void AdamW::export_state(const std::vector<ParamView<float>>& params,
                         CheckpointData& ck) const {
  ck.opt_step = step_count_;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor<float> m(params[p].value->shape()), v(params[p].value->shape());
    for (Index i = 0; i < m.size(); ++i) {
      m[i] = static_cast<float>(m_[p][static_cast<std::size_t>(i)]);
      v[i] = static_cast<float>(v_[p][static_cast<std::size_t>(i)]);
    }
    ck.tensors.emplace_back("opt/m/" + params[p].name, std::move(m));
    ck.tensors.emplace_back("opt/v/" + params[p].name, std::move(v));
  }
}

void AdamW::import_state(const std::vector<ParamView<float>>& params,
                         const CheckpointData& ck) {
  init(params);
  step_count_ = ck.opt_step;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Tensor<float>* m = ck.find("opt/m/" + params[p].name);
    const Tensor<float>* v = ck.find("opt/v/" + params[p].name);
    if (!m || !v)
      fail<DataError>("checkpoint has no optimizer state for \"",
                      params[p].name, "\"");
    if (m->shape() != params[p].value->shape())
      fail<ShapeError>("optimizer state for \"", params[p].name,
                       "\" has the wrong shape");
    for (Index i = 0; i < m->size(); ++i) {
      m_[p][static_cast<std::size_t>(i)] = static_cast<double>((*m)[i]);
      v_[p][static_cast<std::size_t>(i)] = static_cast<double>((*v)[i]);
    }
  }
}

double clip_gradients(const std::vector<ParamView<float>>& params,
                      double max_norm) {
  double sq = 0.0;
  for (const auto& view : params)
    for (Index i = 0; i < view.grad->size(); ++i) {
      const double g = static_cast<double>((*view.grad)[i]);
      sq += g * g;
    }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const float scale = static_cast<float>(max_norm / norm);
    for (const auto& view : params)
      for (Index i = 0; i < view.grad->size(); ++i) (*view.grad)[i] *= scale;
  }
  return norm;
}

double lr_at(Index epoch, const Schedule& s) {
  if (epoch < 0 || epoch >= s.total_epochs)
    fail<ConfigError>("epoch ", epoch, " outside schedule of ",
                      s.total_epochs, " epochs");
  if (epoch < s.warmup_epochs)
    return s.base_lr * static_cast<double>(epoch + 1) /
           static_cast<double>(s.warmup_epochs);
  const Index span = s.total_epochs - 1 - s.warmup_epochs;
  const double progress =
      span > 0 ? static_cast<double>(epoch - s.warmup_epochs) /
                     static_cast<double>(span)
               : 1.0;
  return s.final_lr + 0.5 * (s.base_lr - s.final_lr) *
                          (1.0 + std::cos(std::numbers::pi * progress));
}

std::string epoch_metrics_json(const EpochMetrics& m) {
  nlohmann::json j;
  j["epoch"] = m.epoch;
  j["lr"] = m.lr;
  j["train_loss"] = m.train_loss;
  j["train_acc"] = m.train_acc;
  j["val_acc"] = m.val_acc;
  j["fr"] = m.fr;
  return j.dump();
}

namespace {

// Silent sample mispairing is the failure mode here: with persons=2 the
// model folds consecutive batch rows into one clip, so single-person data
// would quietly fuse unrelated samples.
void check_persons(const Dataset& data, const std::vector<Index>& indices,
                   Index persons) {
  for (Index i : indices)
    if (data[static_cast<std::size_t>(i)].frames.dim(3) != persons)
      fail<ShapeError>("sequence ", i, " has ",
                       data[static_cast<std::size_t>(i)].frames.dim(3),
                       " persons per clip, the model expects ", persons);
}

}  // namespace

double evaluate(Model<float>& model, const Dataset& data,
                const std::vector<Index>& indices, Index batch,
                OpCounter* counter) {
  if (indices.empty()) fail<DataError>("evaluation set is empty");
  check_persons(data, indices, model.cfg.persons);
  Index correct = 0;
  for (std::size_t start = 0; start < indices.size();
       start += static_cast<std::size_t>(batch)) {
    const std::size_t end =
        std::min(indices.size(), start + static_cast<std::size_t>(batch));
    std::vector<Index> chunk(indices.begin() + static_cast<std::ptrdiff_t>(start),
                             indices.begin() + static_cast<std::ptrdiff_t>(end));
    Batch b = make_batch(data, chunk, model.cfg.time_steps, model.graph.root);
    ModelOutput<float> out =
        model.forward(b.x, BnMode::infer, SpikeMode::hard, nullptr, counter);
    for (std::size_t i = 0; i < chunk.size(); ++i)
      if (out.predictions[i] == b.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

TrainResult train_loop(Model<float>& model, AdamW& opt, const Dataset& data,
                       const std::vector<Index>& train_idx,
                       const std::vector<Index>& val_idx,
                       const TrainOptions& opts) {
  opts.tc.validate();
  if (train_idx.empty()) fail<DataError>("training set is empty");
  if (val_idx.empty()) fail<DataError>("validation set is empty");
  check_persons(data, train_idx, model.cfg.persons);
  check_persons(data, val_idx, model.cfg.persons);
  std::filesystem::create_directories(opts.out_dir);

  const Schedule sched{opts.tc.lr, opts.tc.final_lr, opts.tc.warmup_epochs,
                       opts.tc.epochs};
  opt.lr = opts.tc.lr;
  opt.weight_decay = opts.tc.weight_decay;
  opt.beta1 = opts.tc.beta1;
  opt.beta2 = opts.tc.beta2;
  opt.eps = opts.tc.eps;

  std::vector<ParamView<float>> params = model.params();

  TrainResult result;
  std::ostringstream metrics_log;
  for (Index epoch = opts.start_epoch; epoch < opts.tc.epochs; ++epoch) {
    const double lr_now = lr_at(epoch, sched);

    std::vector<Index> order = train_idx;
    std::shuffle(order.begin(), order.end(),
                 Rng::derive(opts.tc.seed, static_cast<std::uint64_t>(epoch))
                     .engine());

    OpCounter epoch_counter;
    double loss_sum = 0.0;
    Index loss_batches = 0;
    Index correct = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(opts.tc.batch)) {
      const std::size_t end = std::min(
          order.size(), start + static_cast<std::size_t>(opts.tc.batch));
      std::vector<Index> chunk(
          order.begin() + static_cast<std::ptrdiff_t>(start),
          order.begin() + static_cast<std::ptrdiff_t>(end));
      Batch b = make_batch(data, chunk, model.cfg.time_steps, model.graph.root);

      model.zero_grad();
      ModelCache<float> cache;
      ModelOutput<float> out = model.forward(b.x, BnMode::train,
                                             SpikeMode::hard, &cache,
                                             &epoch_counter);
      loss_sum += model.loss(out, b.labels);
      ++loss_batches;
      for (std::size_t i = 0; i < chunk.size(); ++i)
        if (out.predictions[i] == b.labels[i]) ++correct;

      Tensor<float> g_i =
          model.loss_backward(out, b.labels, &cache, SpikeMode::hard);
      model.backward(cache, g_i, SpikeMode::hard);
      clip_gradients(params, opts.tc.clip_norm);
      opt.step(params, lr_now);
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr_now;
    m.train_loss = loss_sum / static_cast<double>(loss_batches);
    m.train_acc =
        static_cast<double>(correct) / static_cast<double>(order.size());
    m.val_acc = evaluate(model, data, val_idx, opts.tc.batch);
    for (const auto& [name, tally] : epoch_counter.layers())
      if (tally.neuron_steps > 0)
        m.fr[name] = static_cast<double>(tally.spike_events) /
                     static_cast<double>(tally.neuron_steps);
    result.history.push_back(m);

    metrics_log << epoch_metrics_json(m) << "\n";
    write_file_atomic(opts.out_dir + "/metrics.jsonl", metrics_log.str());
    if (opts.progress)
      (*opts.progress) << epoch_metrics_json(m) << "\n";

    CheckpointData ck = snapshot_model(model, epoch + 1);
    opt.export_state(params, ck);
    write_checkpoint(opts.out_dir + "/last.ckpt", ck);
    if (m.val_acc > result.best_val_acc) {
      result.best_val_acc = m.val_acc;
      result.best_epoch = epoch;
      write_checkpoint(opts.out_dir + "/best.ckpt", ck);
    }

    if (m.train_acc >= opts.stop_train_acc && m.val_acc >= opts.stop_val_acc)
      break;
  }
  return result;
}

}  // namespace s3t
