#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "s3t/checkpoint.hpp"
#include "s3t/training.hpp"
#include "test_util.hpp"

using namespace s3t;
using s3t::testing::random_tensor;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.time_steps = 4;
  cfg.d_model = 6;
  cfg.n_blocks = 2;
  cfg.heads = 2;
  cfg.n_classes = 3;
  cfg.c_in = 2;
  cfg.graph = "chain(4)";
  cfg.seed = 21;
  return cfg;
}

std::filesystem::path temp_ckpt(const char* stem) {
  static int counter = 0;
  return std::filesystem::temp_directory_path() /
         (std::string(stem) + std::to_string(counter++) + ".ckpt");
}

struct TempFile {
  std::filesystem::path path;
  explicit TempFile(const char* stem) : path(temp_ckpt(stem)) {}
  ~TempFile() { std::filesystem::remove(path); }
};

std::string slurp_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

void spit_bytes(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("checkpoint round trip restores a bitwise identical model") {
  Model<float> model;
  model.init(small_config());

  // Perturb parameters away from init so the payload carries real content.
  Rng rng(3);
  for (auto& p : model.params())
    for (Index i = 0; i < p.value->size(); ++i)
      (*p.value)[i] += static_cast<float>(rng.uniform(-0.05, 0.05));

  TempFile f("roundtrip");
  CheckpointData ck = snapshot_model(model, 7);
  write_checkpoint(f.path.string(), ck);
  CheckpointData back = read_checkpoint(f.path.string());

  CHECK(back.epoch == 7);
  CHECK(back.config.d_model == 6);
  CHECK(back.config.graph == "chain(4)");

  Model<float> twin;
  restore_model(twin, back);

  auto a = model.params();
  auto b = twin.params();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].value->size() == b[i].value->size());
    for (Index j = 0; j < a[i].value->size(); ++j)
      CHECK(std::bit_cast<std::uint32_t>((*a[i].value)[j]) ==
            std::bit_cast<std::uint32_t>((*b[i].value)[j]));
  }

  Rng in_rng(5);
  Tensor<float> x = random_tensor<float>({4, 2, 2, 4}, in_rng, -1.0, 1.0);
  ModelOutput<float> ya = model.forward(x, BnMode::infer, SpikeMode::hard);
  ModelOutput<float> yb = twin.forward(x, BnMode::infer, SpikeMode::hard);
  for (Index i = 0; i < ya.u_traj.size(); ++i)
    CHECK(ya.u_traj[i] == yb.u_traj[i]);
  CHECK(ya.predictions == yb.predictions);
}

TEST_CASE("corrupt checkpoint files fail with located data errors") {
  Model<float> model;
  model.init(small_config());
  TempFile f("corrupt");
  write_checkpoint(f.path.string(), snapshot_model(model));
  const std::string bytes = slurp_bytes(f.path);

  SUBCASE("bad magic") {
    std::string mutated = bytes;
    mutated[1] = 'Z';
    spit_bytes(f.path, mutated);
    CHECK_THROWS_WITH_AS(read_checkpoint(f.path.string()),
                         doctest::Contains("magic"), DataError);
  }
  SUBCASE("truncated header") {
    spit_bytes(f.path, bytes.substr(0, 8));
    CHECK_THROWS_AS(read_checkpoint(f.path.string()), DataError);
  }
  SUBCASE("truncated payload") {
    spit_bytes(f.path, bytes.substr(0, bytes.size() - 9));
    CHECK_THROWS_AS(read_checkpoint(f.path.string()), DataError);
  }
  SUBCASE("missing file") {
    std::filesystem::remove(f.path);
    CHECK_THROWS_AS(read_checkpoint(f.path.string()), DataError);
  }
}

TEST_CASE("restore rejects missing tensors and shape mismatches") {
  Model<float> model;
  model.init(small_config());
  CheckpointData ck = snapshot_model(model);

  SUBCASE("a dropped parameter is reported by name") {
    REQUIRE(!ck.tensors.empty());
    const std::string victim = ck.tensors.back().first;
    ck.tensors.pop_back();
    Model<float> twin;
    CHECK_THROWS_WITH_AS(restore_model(twin, ck),
                         doctest::Contains(victim.c_str()), DataError);
  }
  SUBCASE("a reshaped parameter is rejected") {
    ck.tensors.front().second = Tensor<float>({1});
    Model<float> twin;
    CHECK_THROWS_AS(restore_model(twin, ck), ShapeError);
  }
}

TEST_CASE("optimizer moments survive the file format") {
  Model<float> model;
  model.init(small_config());
  AdamW opt;
  opt.init(model.params());

  // Two steps with synthetic gradients populate both moment buffers.
  Rng rng(9);
  for (int step = 0; step < 2; ++step) {
    for (auto& p : model.params())
      for (Index i = 0; i < p.grad->size(); ++i)
        (*p.grad)[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
    opt.step(model.params(), 0.01);
  }

  TempFile f("moments");
  CheckpointData ck = snapshot_model(model, 2);
  opt.export_state(model.params(), ck);
  CHECK(ck.opt_step == 2);
  write_checkpoint(f.path.string(), ck);
  CheckpointData back = read_checkpoint(f.path.string());

  Model<float> twin;
  restore_model(twin, back);
  AdamW opt2;
  opt2.init(twin.params());
  opt2.import_state(twin.params(), back);
  CHECK(opt2.step_count() == 2);

  CheckpointData again = snapshot_model(twin, 2);
  opt2.export_state(twin.params(), again);
  REQUIRE(again.tensors.size() == back.tensors.size());
  for (const auto& [name, t] : back.tensors) {
    const Tensor<float>* other = again.find(name);
    REQUIRE(other != nullptr);
    REQUIRE(other->size() == t.size());
    for (Index i = 0; i < t.size(); ++i)
      CHECK(std::bit_cast<std::uint32_t>((*other)[i]) ==
            std::bit_cast<std::uint32_t>(t[i]));
  }

  // The twin now steps like the original up to the 32-bit rounding the file
  // format applies to the stored moments.
  Rng grad_rng(13);
  std::vector<float> grads;
  for (auto& p : model.params())
    for (Index i = 0; i < p.grad->size(); ++i)
      grads.push_back(static_cast<float>(grad_rng.uniform(-1.0, 1.0)));

  std::size_t cursor = 0;
  for (auto& p : model.params())
    for (Index i = 0; i < p.grad->size(); ++i) (*p.grad)[i] = grads[cursor++];
  cursor = 0;
  for (auto& p : twin.params())
    for (Index i = 0; i < p.grad->size(); ++i) (*p.grad)[i] = grads[cursor++];

  opt.step(model.params(), 0.005);
  opt2.step(twin.params(), 0.005);
  auto pa = model.params();
  auto pb = twin.params();
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (Index j = 0; j < pa[i].value->size(); ++j)
      CHECK((*pa[i].value)[j] ==
            doctest::Approx((*pb[i].value)[j]).epsilon(1e-5));
}
