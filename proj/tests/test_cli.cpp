#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "s3t/checkpoint.hpp"
#include "s3t/cli.hpp"
#include "s3t/data.hpp"
#include "test_util.hpp"

using namespace s3t;
using nlohmann::json;

namespace {

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

CliResult run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  CliResult r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const char* stem) {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           (std::string(stem) + std::to_string(counter++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }

  std::string file(const char* name) const { return (path / name).string(); }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
}

json tiny_spec_json() {
  return json{{"graph", "chain(5)"},
              {"n_classes", 2},
              {"samples_per_class", 12},
              {"t_raw_min", 10},
              {"t_raw_max", 12},
              {"noise_sigma", 0.0},
              {"seed", 4},
              {"classes",
               json::array({json::array({json{{"limb_root", 1},
                                              {"freq_hz", 0.6},
                                              {"amplitude", 0.3},
                                              {"axis", 0},
                                              {"phase_jitter", 0.2}}}),
                            json::array({json{{"limb_root", 1},
                                              {"freq_hz", 2.0},
                                              {"amplitude", 0.3},
                                              {"axis", 0},
                                              {"phase_jitter", 0.2}}})})}};
}

json tiny_run_config(const std::string& data_path, const std::string& out_dir,
                     Index epochs = 2) {
  json model{{"time_steps", 6}, {"d_model", 6},   {"n_blocks", 1},
             {"heads", 2},      {"n_classes", 2}, {"graph", "chain(5)"},
             {"seed", 5}};
  json train{{"lr", 0.02},   {"final_lr", 0.002}, {"warmup_epochs", 0},
             {"epochs", epochs}, {"batch", 8},    {"seed", 5}};
  return json{{"model", model},
              {"train", train},
              {"data", {{"path", data_path}}},
              {"out_dir", out_dir}};
}

// Generates a dataset, trains for two epochs, and hands back the directory
// holding data.skl, config.json and the run output. Reused by the read-only
// commands so the expensive part runs once.
const TempDir& trained_run() {
  static TempDir dir("cli_run");
  static bool ready = false;
  if (!ready) {
    write_text(dir.file("spec.json"), tiny_spec_json().dump());
    REQUIRE(run({"synth", "--spec", dir.file("spec.json"), "--out",
                 dir.file("data.skl")})
                .code == 0);
    write_text(dir.file("config.json"),
               tiny_run_config(dir.file("data.skl"), dir.file("run")).dump());
    CliResult r = run({"train", "--config", dir.file("config.json")});
    REQUIRE(r.code == 0);
    ready = true;
  }
  return dir;
}

}  // namespace

TEST_CASE("bare invocation and unknown commands are usage errors") {
  CHECK(run({}).code == 2);
  CHECK(run({"transmogrify"}).code == 2);
  CHECK(run({"eval"}).code == 2);  // missing required options
}

TEST_CASE("help exits cleanly and lists every subcommand") {
  CliResult r = run({"--help"});
  CHECK(r.code == 0);
  for (const char* name :
       {"synth", "train", "eval", "profile", "ablate", "inspect-topology"})
    CHECK(r.out.find(name) != std::string::npos);
}

TEST_CASE("synth writes a readable dataset") {
  TempDir dir("cli_synth");
  write_text(dir.file("spec.json"), tiny_spec_json().dump());
  CliResult r =
      run({"synth", "--spec", dir.file("spec.json"), "--out",
           dir.file("data.skl")});
  CHECK(r.code == 0);
  CHECK(r.out.find("24 sequences") != std::string::npos);
  Dataset data = read_skl(dir.file("data.skl"));
  CHECK(data.size() == 24);
}

TEST_CASE("config mistakes are reported with their json path") {
  TempDir dir("cli_badcfg");

  SUBCASE("unknown key") {
    write_text(dir.file("spec.json"),
               json{{"graph", "chain(5)"}, {"n_classs", 2}}.dump());
    CliResult r = run({"synth", "--spec", dir.file("spec.json"), "--out",
                       dir.file("data.skl")});
    CHECK(r.code == 2);
    CHECK(r.err.find("n_classs") != std::string::npos);
  }
  SUBCASE("malformed json") {
    write_text(dir.file("spec.json"), "{\"graph\": ");
    CliResult r = run({"synth", "--spec", dir.file("spec.json"), "--out",
                       dir.file("data.skl")});
    CHECK(r.code == 2);
  }
  SUBCASE("invalid value") {
    json spec = tiny_spec_json();
    spec["n_classes"] = 1;
    spec.erase("classes");
    write_text(dir.file("spec.json"), spec.dump());
    CliResult r = run({"synth", "--spec", dir.file("spec.json"), "--out",
                       dir.file("data.skl")});
    CHECK(r.code == 2);
  }
  SUBCASE("a missing spec file is a config error") {
    CliResult r = run({"synth", "--spec", dir.file("nope.json"), "--out",
                       dir.file("data.skl")});
    CHECK(r.code == 2);
  }
}

TEST_CASE("train dry run reports the plan without training") {
  const TempDir& base = trained_run();
  TempDir dir("cli_dry");
  write_text(dir.file("config.json"),
             tiny_run_config(base.file("data.skl"), dir.file("run")).dump());
  CliResult r =
      run({"train", "--config", dir.file("config.json"), "--dry-run"});
  REQUIRE(r.code == 0);
  const json j = json::parse(r.out);
  CHECK(j.at("sequences") == 24);
  CHECK(j.at("train") == 16);
  CHECK(j.at("val") == 8);
  CHECK(j.at("parameters").get<Index>() > 0);
  CHECK(!std::filesystem::exists(dir.path / "run" / "last.ckpt"));
}

TEST_CASE("training produces metrics and checkpoints") {
  const TempDir& dir = trained_run();
  CHECK(std::filesystem::exists(dir.path / "run" / "metrics.jsonl"));
  CHECK(std::filesystem::exists(dir.path / "run" / "last.ckpt"));
  CHECK(std::filesystem::exists(dir.path / "run" / "best.ckpt"));

  CheckpointData ck = read_checkpoint(dir.file("run/last.ckpt"));
  CHECK(ck.epoch == 2);
}

TEST_CASE("resuming from a checkpoint extends the run") {
  const TempDir& base = trained_run();
  TempDir dir("cli_resume");
  std::filesystem::copy(base.path / "run", dir.path / "run");
  write_text(dir.file("config.json"),
             tiny_run_config(base.file("data.skl"), dir.file("run"), 3).dump());
  CliResult r = run({"train", "--config", dir.file("config.json"), "--resume",
                     dir.file("run/last.ckpt")});
  REQUIRE(r.code == 0);
  const json j = json::parse(r.out);
  CHECK(j.at("epochs_run") == 1);
  CHECK(read_checkpoint(dir.file("run/last.ckpt")).epoch == 3);
}

TEST_CASE("eval reports accuracy for the chosen split") {
  const TempDir& dir = trained_run();
  CliResult r = run({"eval", "--ckpt", dir.file("run/best.ckpt"), "--data",
                     dir.file("data.skl"), "--split", "test", "--report",
                     dir.file("eval.json")});
  REQUIRE(r.code == 0);
  const json j = json::parse(r.out);
  CHECK(j.at("sequences") == 8);
  const double acc = j.at("accuracy").get<double>();
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
  const json file = load_json_file(dir.file("eval.json"));
  CHECK(file.at("accuracy").get<double>() == acc);

  SUBCASE("an ensemble of one model twice matches the single model") {
    CliResult r2 = run({"eval", "--ckpt", dir.file("run/best.ckpt"), "--ckpt",
                        dir.file("run/best.ckpt"), "--data",
                        dir.file("data.skl"), "--split", "test"});
    REQUIRE(r2.code == 0);
    CHECK(json::parse(r2.out).at("accuracy").get<double>() == acc);
  }
  SUBCASE("bad split values are usage errors") {
    CHECK(run({"eval", "--ckpt", dir.file("run/best.ckpt"), "--data",
               dir.file("data.skl"), "--split", "validation"})
              .code == 2);
  }
  SUBCASE("a missing dataset is a data error") {
    CHECK(run({"eval", "--ckpt", dir.file("run/best.ckpt"), "--data",
               dir.file("nope.skl")})
              .code == 3);
  }
  SUBCASE("an empty split is a data error") {
    Dataset single;
    SkeletonSequence seq;
    seq.frames = Tensor<float>({4, 3, 5, 1});
    seq.subject = 0;  // even: everything lands in the train split
    single.push_back(std::move(seq));
    write_skl(dir.file("train_only.skl"), single);
    CHECK(run({"eval", "--ckpt", dir.file("run/best.ckpt"), "--data",
               dir.file("train_only.skl"), "--split", "test"})
              .code == 3);
  }
}

TEST_CASE("profile emits the energy report and firing rate table") {
  const TempDir& dir = trained_run();
  CliResult r = run({"profile", "--ckpt", dir.file("run/best.ckpt"), "--data",
                     dir.file("data.skl"), "--split", "test", "--out-dir",
                     dir.file("prof")});
  REQUIRE(r.code == 0);

  const json energy = load_json_file(dir.file("prof/energy.json"));
  CHECK(energy.at("totals").at("e_snn_joules").get<double>() > 0.0);
  CHECK(energy.at("totals").at("e_ann_joules").get<double>() > 0.0);
  CHECK(energy.at("constants").at("e_mac_pj").get<double>() == 4.6);

  std::ifstream csv(dir.file("prof/firing_rates.csv"));
  std::string header;
  REQUIRE(std::getline(csv, header));
  CHECK(header == "Block,Q,K,V,Topo Buffer,Attn Out,MLP 1,MLP 2");

  SUBCASE("energy scales linearly with the picojoule constants") {
    CliResult r2 = run({"profile", "--ckpt", dir.file("run/best.ckpt"),
                        "--data", dir.file("data.skl"), "--split", "test",
                        "--out-dir", dir.file("prof2"), "--pj-per-mac", "9.2",
                        "--pj-per-ac", "1.8"});
    REQUIRE(r2.code == 0);
    const json doubled = load_json_file(dir.file("prof2/energy.json"));
    CHECK(doubled.at("totals").at("e_snn_joules").get<double>() ==
          doctest::Approx(2.0 *
                          energy.at("totals").at("e_snn_joules").get<double>())
              .epsilon(1e-12));
    CHECK(doubled.at("totals").at("e_ann_joules").get<double>() ==
          doctest::Approx(2.0 *
                          energy.at("totals").at("e_ann_joules").get<double>())
              .epsilon(1e-12));
  }
}

TEST_CASE("ablate trains the component build-up table") {
  const TempDir& base = trained_run();
  TempDir dir("cli_ablate");
  write_text(dir.file("config.json"),
             tiny_run_config(base.file("data.skl"), dir.file("runs"), 1).dump());
  CliResult r = run({"ablate", "--config", dir.file("config.json")});
  REQUIRE(r.code == 0);

  const json table = load_json_file(dir.file("runs/ablation.json"));
  REQUIRE(table.size() == 6);
  CHECK(table[0].at("row") == "baseline");
  CHECK(table[5].at("row") == "+AQ");
  std::set<std::string> hashes;
  for (const auto& row : table) {
    hashes.insert(row.at("arch_hash").get<std::string>());
    CHECK(row.at("val_acc").get<double>() >= 0.0);
  }
  CHECK(hashes.size() == 6);

  SUBCASE("a single custom ablation runs alone") {
    TempDir dir2("cli_ablate_one");
    write_text(
        dir2.file("config.json"),
        tiny_run_config(base.file("data.skl"), dir2.file("runs"), 1).dump());
    CliResult r2 = run({"ablate", "--config", dir2.file("config.json"),
                        "--disable", "ur,s3"});
    REQUIRE(r2.code == 0);
    const json t2 = load_json_file(dir2.file("runs/ablation.json"));
    CHECK(t2.size() == 1);
  }
  SUBCASE("unknown flags are usage errors") {
    CHECK(run({"ablate", "--config", dir.file("config.json"), "--disable",
               "warp"})
              .code == 2);
  }
}

TEST_CASE("inspect-topology prints row-stochastic routing") {
  const TempDir& dir = trained_run();
  CliResult r = run({"inspect-topology", "--ckpt", dir.file("run/best.ckpt"),
                     "--block", "1", "--head", "1"});
  REQUIRE(r.code == 0);

  std::istringstream csv(r.out);
  std::string line;
  Index rows = 0;
  while (std::getline(csv, line)) {
    double sum = 0.0;
    std::istringstream cells(line);
    std::string cell;
    Index cols = 0;
    while (std::getline(cells, cell, ',')) {
      sum += std::stod(cell);
      ++cols;
    }
    CHECK(cols == 5);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
    ++rows;
  }
  CHECK(rows == 5);

  SUBCASE("out-of-range indices are usage errors") {
    CHECK(run({"inspect-topology", "--ckpt", dir.file("run/best.ckpt"),
               "--block", "2"})
              .code == 2);
    CHECK(run({"inspect-topology", "--ckpt", dir.file("run/best.ckpt"),
               "--head", "7"})
              .code == 2);
  }
  SUBCASE("the matrix can be written to a file") {
    CliResult r2 = run({"inspect-topology", "--ckpt", dir.file("run/best.ckpt"),
                        "--out", dir.file("topo.csv")});
    CHECK(r2.code == 0);
    CHECK(std::filesystem::exists(dir.file("topo.csv")));
  }
}
