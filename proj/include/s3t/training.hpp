#pragma once

#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "s3t/checkpoint.hpp"
#include "s3t/data.hpp"
#include "s3t/model.hpp"

namespace s3t {

// Decoupled-weight-decay adaptive-moment optimizer. Moments are kept in
// double regardless of the parameter type; decay is applied multiplicatively
// before the moment update and only to views flagged for it.
class AdamW {
 public:
  double lr = 0.01;
  double weight_decay = 0.0005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void init(const std::vector<ParamView<float>>& params);
  void step(const std::vector<ParamView<float>>& params, double lr_now);

  std::uint64_t step_count() const { return step_count_; }

  // Moment access for checkpointing, keyed "opt/m/<param>" and "opt/v/<param>".
  void export_state(const std::vector<ParamView<float>>& params,
                    CheckpointData& ck) const;
  void import_state(const std::vector<ParamView<float>>& params,
                    const CheckpointData& ck);

 private:
  std::uint64_t step_count_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Returns the global gradient norm; scales every gradient down when the norm
// exceeds max_norm.
double clip_gradients(const std::vector<ParamView<float>>& params,
                      double max_norm);

struct Schedule {
  double base_lr = 0.01;
  double final_lr = 1e-5;
  Index warmup_epochs = 10;
  Index total_epochs = 250;
};

// Linear warmup to base_lr, then cosine decay landing on final_lr at the
// last epoch.
double lr_at(Index epoch, const Schedule& s);

struct EpochMetrics {
  Index epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_acc = 0;
  double val_acc = 0;
  std::map<std::string, double> fr;
};

std::string epoch_metrics_json(const EpochMetrics& m);

struct TrainResult {
  std::vector<EpochMetrics> history;
  Index best_epoch = -1;
  double best_val_acc = -1.0;
};

struct TrainOptions {
  TrainConfig tc;
  std::string out_dir;       // best.ckpt / last.ckpt / metrics.jsonl
  Index start_epoch = 0;     // resume point; epochs continue from here
  double stop_train_acc = 2.0;  // early stop once both thresholds are met
  double stop_val_acc = 2.0;
  std::ostream* progress = nullptr;
};

double evaluate(Model<float>& model, const Dataset& data,
                const std::vector<Index>& indices, Index batch,
                OpCounter* counter = nullptr);

TrainResult train_loop(Model<float>& model, AdamW& opt, const Dataset& data,
                       const std::vector<Index>& train_idx,
                       const std::vector<Index>& val_idx,
                       const TrainOptions& opts);

}  // namespace s3t
