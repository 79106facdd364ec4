#include "s3t/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>

#include "s3t/checkpoint.hpp"
#include "s3t/energy.hpp"
#include "s3t/training.hpp"

namespace s3t {

namespace {

using nlohmann::json;

Index thread_count() {
  const char* env = std::getenv("S3T_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (!end || *end != '\0' || v < 1 || v > 256)
    fail<ConfigError>("S3T_THREADS must be an integer in [1, 256], got \"",
                      env, "\"");
  return static_cast<Index>(v);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string arch_hash(const ModelConfig& cfg) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(
                    fnv1a(model_config_to_json(cfg).dump())));
  return buf;
}

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string data_path;
  std::string out_dir = "run";
};

RunConfig load_run_config(const std::string& path) {
  const json j = load_json_file(path);
  reject_unknown_keys(j, "config", {"model", "train", "data", "out_dir"});
  RunConfig rc;
  if (j.contains("model"))
    rc.model = model_config_from_json(j.at("model"), "config.model");
  if (j.contains("train"))
    rc.train = train_config_from_json(j.at("train"), "config.train");
  if (!j.contains("data"))
    fail<ConfigError>("config.data: missing section");
  reject_unknown_keys(j.at("data"), "config.data", {"path"});
  if (!j.at("data").contains("path") || !j.at("data").at("path").is_string())
    fail<ConfigError>("config.data.path: expected a string");
  rc.data_path = j.at("data").at("path").get<std::string>();
  if (j.contains("out_dir")) {
    if (!j.at("out_dir").is_string())
      fail<ConfigError>("config.out_dir: expected a string");
    rc.out_dir = j.at("out_dir").get<std::string>();
  }
  return rc;
}

void check_dataset_fits(const Dataset& data, const Model<float>& model,
                        const std::string& origin) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].label < 0 || data[i].label >= model.cfg.n_classes)
      fail<DataError>(origin, ": sequence ", i, " has label ", data[i].label,
                      ", model expects [0, ", model.cfg.n_classes, ")");
    if (data[i].frames.dim(3) != model.cfg.persons)
      fail<ShapeError>(origin, ": sequence ", i, " has ",
                       data[i].frames.dim(3),
                       " persons per clip, the model expects ",
                       model.cfg.persons);
  }
}

std::vector<Index> pick_split(const Dataset& data, const std::string& split) {
  std::vector<Index> train, test;
  split_by_subject(data, train, test);
  if (split == "train") return train;
  if (split == "test") return test;
  std::vector<Index> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<Index>(i);
  return all;
}

std::vector<std::vector<Index>> shard_indices(const std::vector<Index>& idx,
                                              Index shards) {
  std::vector<std::vector<Index>> out;
  const std::size_t per =
      (idx.size() + static_cast<std::size_t>(shards) - 1) /
      static_cast<std::size_t>(shards);
  for (std::size_t start = 0; start < idx.size(); start += per)
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(start),
                     idx.begin() + static_cast<std::ptrdiff_t>(
                                       std::min(idx.size(), start + per)));
  return out;
}

int cmd_synth(const std::string& spec_path, const std::string& out_path,
              std::ostream& out) {
  SynthSpec spec = synth_spec_from_json(load_json_file(spec_path), "spec");
  Dataset data = synth_generate(spec);
  write_skl(out_path, data);
  out << "wrote " << data.size() << " sequences to " << out_path << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_override,
              const std::string& resume_path, bool dry_run, std::ostream& out,
              std::ostream& err) {
  RunConfig rc = load_run_config(config_path);
  if (!out_override.empty()) rc.out_dir = out_override;

  Model<float> model;
  AdamW opt;
  Index start_epoch = 0;
  if (!resume_path.empty()) {
    CheckpointData ck = read_checkpoint(resume_path);
    restore_model(model, ck);
    opt.import_state(model.params(), ck);
    start_epoch = ck.epoch;
  } else {
    model.init(rc.model);
    opt.init(model.params());
  }

  Dataset data = read_skl(rc.data_path, model.graph.n_nodes);
  check_dataset_fits(data, model, rc.data_path);
  std::vector<Index> train_idx, val_idx;
  split_by_subject(data, train_idx, val_idx);

  if (dry_run) {
    json summary;
    summary["sequences"] = data.size();
    summary["train"] = train_idx.size();
    summary["val"] = val_idx.size();
    summary["start_epoch"] = start_epoch;
    summary["arch_hash"] = arch_hash(model.cfg);
    Index n_params = 0;
    for (const auto& p : model.params()) n_params += p.value->size();
    summary["parameters"] = n_params;
    out << summary.dump(2) << "\n";
    return 0;
  }

  TrainOptions opts;
  opts.tc = rc.train;
  opts.out_dir = rc.out_dir;
  opts.start_epoch = start_epoch;
  opts.progress = &err;  // keep stdout parseable: only the summary goes there
  TrainResult result =
      train_loop(model, opt, data, train_idx, val_idx, opts);
  json summary;
  summary["best_epoch"] = result.best_epoch;
  summary["best_val_acc"] = result.best_val_acc;
  summary["epochs_run"] = result.history.size();
  summary["arch_hash"] = arch_hash(model.cfg);
  out << summary.dump(2) << "\n";
  return 0;
}

// Shared by eval and profile: run the models over index shards on worker
// threads, averaging final-step logits across models for the prediction.
double sharded_ensemble_eval(std::vector<Model<float>>& models,
                             const Dataset& data,
                             const std::vector<Index>& indices, Index batch,
                             OpCounter* counter_out) {
  if (indices.empty()) fail<DataError>("evaluation set is empty");
  const Index threads =
      std::min<Index>(thread_count(), static_cast<Index>(indices.size()));
  const auto shards = shard_indices(indices, threads);

  std::vector<std::uint64_t> correct(shards.size(), 0);
  std::vector<OpCounter> counters(shards.size());
  std::vector<std::string> errors(shards.size());

  auto worker = [&](std::size_t shard) {
    try {
      std::vector<Model<float>> local = models;
      const ModelConfig& cfg = local[0].cfg;
      for (std::size_t start = 0; start < shards[shard].size();
           start += static_cast<std::size_t>(batch)) {
        const std::size_t end =
            std::min(shards[shard].size(),
                     start + static_cast<std::size_t>(batch));
        std::vector<Index> chunk(
            shards[shard].begin() + static_cast<std::ptrdiff_t>(start),
            shards[shard].begin() + static_cast<std::ptrdiff_t>(end));
        Batch b =
            make_batch(data, chunk, cfg.time_steps, local[0].graph.root);
        const Index B = static_cast<Index>(chunk.size());
        Tensor<double> mean_logits({B, cfg.n_classes});
        for (auto& m : local) {
          ModelOutput<float> o =
              m.forward(b.x, BnMode::infer, SpikeMode::hard, nullptr,
                        counter_out ? &counters[shard] : nullptr);
          const Index last = (cfg.time_steps - 1) * B * cfg.n_classes;
          for (Index i = 0; i < B * cfg.n_classes; ++i)
            mean_logits[i] += o.u_traj[last + i] /
                              static_cast<double>(local.size());
        }
        for (Index i = 0; i < B; ++i) {
          Index best = 0;
          for (Index k = 1; k < cfg.n_classes; ++k)
            if (mean_logits[i * cfg.n_classes + k] >
                mean_logits[i * cfg.n_classes + best])
              best = k;
          if (best == b.labels[static_cast<std::size_t>(i)])
            ++correct[shard];
        }
      }
    } catch (const std::exception& e) {
      errors[shard] = e.what();
    }
  };

  if (shards.size() == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t s = 0; s < shards.size(); ++s)
      pool.emplace_back(worker, s);
    for (auto& t : pool) t.join();
  }
  for (const std::string& e : errors)
    if (!e.empty()) fail<Error>("evaluation worker failed: ", e);

  std::uint64_t total_correct = 0;
  for (std::size_t s = 0; s < shards.size(); ++s) {
    total_correct += correct[s];
    if (counter_out) counter_out->merge(counters[s]);
  }
  return static_cast<double>(total_correct) /
         static_cast<double>(indices.size());
}

int cmd_eval(const std::vector<std::string>& ckpts,
             const std::string& data_path, const std::string& split,
             Index batch, const std::string& report_path, std::ostream& out) {
  std::vector<Model<float>> models(ckpts.size());
  for (std::size_t i = 0; i < ckpts.size(); ++i)
    restore_model(models[i], read_checkpoint(ckpts[i]));
  for (std::size_t i = 1; i < models.size(); ++i)
    if (models[i].cfg.n_classes != models[0].cfg.n_classes ||
        models[i].cfg.time_steps != models[0].cfg.time_steps ||
        models[i].cfg.persons != models[0].cfg.persons ||
        models[i].graph.n_nodes != models[0].graph.n_nodes)
      fail<ConfigError>("checkpoint ", ckpts[i],
                        " is not ensemble-compatible with ", ckpts[0]);

  Dataset data = read_skl(data_path, models[0].graph.n_nodes);
  check_dataset_fits(data, models[0], data_path);
  std::vector<Index> indices = pick_split(data, split);
  if (indices.empty())
    fail<DataError>(data_path, ": split \"", split, "\" selected no sequences");

  const double acc = sharded_ensemble_eval(models, data, indices, batch, nullptr);
  json report;
  report["accuracy"] = acc;
  report["sequences"] = indices.size();
  report["split"] = split;
  report["models"] = ckpts.size();
  out << report.dump(2) << "\n";
  if (!report_path.empty()) write_file_atomic(report_path, report.dump(2) + "\n");
  return 0;
}

int cmd_profile(const std::string& ckpt, const std::string& data_path,
                const std::string& split, Index batch,
                const std::string& out_dir, double pj_mac, double pj_ac,
                bool fold, std::ostream& out) {
  std::vector<Model<float>> models(1);
  restore_model(models[0], read_checkpoint(ckpt));
  OpCounter counter;
  if (fold) models[0].fold_batch_norms(&counter);

  Dataset data = read_skl(data_path, models[0].graph.n_nodes);
  check_dataset_fits(data, models[0], data_path);
  std::vector<Index> indices = pick_split(data, split);
  if (indices.empty())
    fail<DataError>(data_path, ": split \"", split, "\" selected no sequences");

  const double acc =
      sharded_ensemble_eval(models, data, indices, batch, &counter);

  EnergyConstants constants;
  constants.e_mac_pj = pj_mac;
  constants.e_ac_pj = pj_ac;
  const EnergyReport report = energy(counter, constants);
  std::filesystem::create_directories(out_dir);
  write_file_atomic(out_dir + "/energy.json", energy_report_json(report));
  write_file_atomic(
      out_dir + "/firing_rates.csv",
      firing_rates_csv(firing_rates(
          counter, static_cast<int>(models[0].cfg.n_blocks))));

  json summary;
  summary["accuracy"] = acc;
  summary["e_snn_joules"] = report.e_snn_joules;
  summary["e_ann_joules"] = report.e_ann_joules;
  summary["snn_to_ann_ratio"] = report.snn_to_ann_ratio;
  out << summary.dump(2) << "\n";
  return 0;
}

void apply_disable(ModelConfig& cfg, const std::string& flag) {
  if (flag == "ur") cfg.use_u_readout = false;
  else if (flag == "s3") cfg.use_s3 = false;
  else if (flag == "ls") cfg.use_lstr = false;
  else if (flag == "ma") cfg.use_mase = false;
  else if (flag == "aq") cfg.use_atg = false;
  else fail<ConfigError>("unknown ablation flag \"", flag,
                         "\", expected ur, s3, ls, ma or aq");
}

int cmd_ablate(const std::string& config_path, const std::string& disable,
               const std::string& out_override, std::ostream& out) {
  RunConfig rc = load_run_config(config_path);
  if (!out_override.empty()) rc.out_dir = out_override;

  struct Row {
    std::string name;
    ModelConfig cfg;
  };
  std::vector<Row> rows;
  if (!disable.empty()) {
    ModelConfig cfg = rc.model;
    std::stringstream ss(disable);
    std::string flag;
    while (std::getline(ss, flag, ',')) apply_disable(cfg, flag);
    rows.push_back({"custom(-" + disable + ")", cfg});
  } else {
    // Progressive build-up: start from the plain baseline and enable one
    // component per row until the full model.
    ModelConfig cfg = rc.model;
    cfg.use_u_readout = false;
    cfg.use_s3 = false;
    cfg.use_lstr = false;
    cfg.use_mase = false;
    cfg.use_atg = false;
    rows.push_back({"baseline", cfg});
    cfg.use_u_readout = true;
    rows.push_back({"+UR", cfg});
    cfg.use_s3 = true;
    rows.push_back({"+S3", cfg});
    cfg.use_lstr = true;
    rows.push_back({"+LS", cfg});
    cfg.use_mase = true;
    rows.push_back({"+MA", cfg});
    cfg.use_atg = true;
    rows.push_back({"+AQ", cfg});
  }

  Dataset data = read_skl(rc.data_path, -1);
  std::vector<Index> train_idx, val_idx;
  split_by_subject(data, train_idx, val_idx);

  json table = json::array();
  out << "row            val_acc  train_acc  arch_hash\n";
  for (const Row& row : rows) {
    Model<float> model;
    model.init(row.cfg);
    check_dataset_fits(data, model, rc.data_path);
    AdamW opt;
    opt.init(model.params());
    TrainOptions opts;
    opts.tc = rc.train;
    opts.out_dir = rc.out_dir + "/" + row.name;
    TrainResult r = train_loop(model, opt, data, train_idx, val_idx, opts);
    const EpochMetrics& last = r.history.back();
    json o;
    o["row"] = row.name;
    o["arch_hash"] = arch_hash(row.cfg);
    o["val_acc"] = last.val_acc;
    o["train_acc"] = last.train_acc;
    o["best_val_acc"] = r.best_val_acc;
    o["epochs"] = r.history.size();
    table.push_back(o);
    char line[128];
    std::snprintf(line, sizeof(line), "%-14s %7.4f   %7.4f   %s\n",
                  row.name.c_str(), last.val_acc, last.train_acc,
                  arch_hash(row.cfg).c_str());
    out << line;
  }
  std::filesystem::create_directories(rc.out_dir);
  write_file_atomic(rc.out_dir + "/ablation.json", table.dump(2) + "\n");
  return 0;
}

int cmd_inspect_topology(const std::string& ckpt, Index block, Index head,
                         const std::string& out_path, std::ostream& out) {
  Model<float> model;
  restore_model(model, read_checkpoint(ckpt));
  if (block < 1 || block > model.cfg.n_blocks)
    fail<ConfigError>("block ", block, " outside [1, ", model.cfg.n_blocks,
                      "]");
  if (head < 0 || head >= model.cfg.heads)
    fail<ConfigError>("head ", head, " outside [0, ", model.cfg.heads, ")");

  const Tensor<float> a_dyn =
      model.blocks[static_cast<std::size_t>(block - 1)].routing_matrices(
          model.a_base);
  const Index N = model.graph.n_nodes;
  std::ostringstream csv;
  for (Index i = 0; i < N; ++i) {
    for (Index j = 0; j < N; ++j) {
      if (j) csv << ",";
      csv << a_dyn[(head * N + i) * N + j];
    }
    csv << "\n";
  }
  if (out_path.empty())
    out << csv.str();
  else
    write_file_atomic(out_path, csv.str());
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err) {
  CLI::App app{"Spiking skeleton-action transformer toolkit"};
  app.name("s3t");
  app.require_subcommand(1);

  std::string spec_path, out_path;
  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--spec", spec_path, "Synthesis spec JSON")->required();
  synth->add_option("--out", out_path, "Output .skl path")->required();

  std::string config_path, train_out, resume_path;
  bool dry_run = false;
  CLI::App* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", config_path, "Run config JSON")->required();
  train->add_option("--out", train_out, "Override the output directory");
  train->add_option("--resume", resume_path, "Checkpoint to resume from");
  train->add_flag("--dry-run", dry_run, "Validate config and data, then exit");

  std::vector<std::string> eval_ckpts;
  std::string eval_data, eval_split = "test", eval_report;
  Index eval_batch = 64;
  CLI::App* eval = app.add_subcommand("eval", "Evaluate checkpoints");
  eval->add_option("--ckpt", eval_ckpts,
                   "Checkpoint path (repeat to ensemble logits)")
      ->required();
  eval->add_option("--data", eval_data, "Dataset .skl path")->required();
  eval->add_option("--split", eval_split, "Subset: train, test or all")
      ->check(CLI::IsMember({"train", "test", "all"}));
  eval->add_option("--batch", eval_batch, "Evaluation batch size")
      ->check(CLI::PositiveNumber);
  eval->add_option("--report", eval_report, "Write the report JSON here");

  std::string prof_ckpt, prof_data, prof_split = "test", prof_dir = ".";
  double pj_mac = 4.6, pj_ac = 0.9;
  Index prof_batch = 64;
  bool no_fold = false;
  CLI::App* profile =
      app.add_subcommand("profile", "Measure ops, firing rates and energy");
  profile->add_option("--ckpt", prof_ckpt, "Checkpoint path")->required();
  profile->add_option("--data", prof_data, "Dataset .skl path")->required();
  profile->add_option("--split", prof_split, "Subset: train, test or all")
      ->check(CLI::IsMember({"train", "test", "all"}));
  profile->add_option("--batch", prof_batch, "Profiling batch size")
      ->check(CLI::PositiveNumber);
  profile->add_option("--out-dir", prof_dir,
                      "Directory for energy.json and firing_rates.csv");
  profile->add_option("--pj-per-mac", pj_mac, "Energy per MAC, picojoules")
      ->check(CLI::PositiveNumber);
  profile->add_option("--pj-per-ac", pj_ac, "Energy per AC, picojoules")
      ->check(CLI::PositiveNumber);
  profile->add_flag("--no-fold", no_fold,
                    "Keep batch norms separate instead of folding them");

  std::string abl_config, abl_disable, abl_out;
  CLI::App* ablate =
      app.add_subcommand("ablate", "Train the component build-up table");
  ablate->add_option("--config", abl_config, "Run config JSON")->required();
  ablate->add_option("--disable", abl_disable,
                     "Comma list of flags to turn off: ur,s3,ls,ma,aq");
  ablate->add_option("--out", abl_out, "Override the output directory");

  std::string insp_ckpt, insp_out;
  Index insp_block = 1, insp_head = 0;
  CLI::App* inspect = app.add_subcommand(
      "inspect-topology", "Dump one head's routing matrix as CSV");
  inspect->add_option("--ckpt", insp_ckpt, "Checkpoint path")->required();
  inspect->add_option("--block", insp_block, "Block index, 1-based");
  inspect->add_option("--head", insp_head, "Head index, 0-based");
  inspect->add_option("--out", insp_out, "CSV path (default: stdout)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(std::move(reversed));
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(spec_path, out_path, out);
    if (train->parsed())
      return cmd_train(config_path, train_out, resume_path, dry_run, out, err);
    if (eval->parsed())
      return cmd_eval(eval_ckpts, eval_data, eval_split, eval_batch,
                      eval_report, out);
    if (profile->parsed())
      return cmd_profile(prof_ckpt, prof_data, prof_split, prof_batch,
                         prof_dir, pj_mac, pj_ac, !no_fold, out);
    if (ablate->parsed())
      return cmd_ablate(abl_config, abl_disable, abl_out, out);
    if (inspect->parsed())
      return cmd_inspect_topology(insp_ckpt, insp_block, insp_head, insp_out,
                                  out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace s3t
