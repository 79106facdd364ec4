#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "s3t/model.hpp"

namespace s3t {

// Optimizer and schedule settings, defaults matching the reference recipe.
struct TrainConfig {
  double lr = 0.01;
  double weight_decay = 0.0005;
  double final_lr = 1e-5;
  Index warmup_epochs = 10;
  Index epochs = 250;
  Index batch = 64;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;

  void validate() const;
};

// Synthetic motion dataset description. Each class is a set of oscillating
// limb archetypes; classes must stay separated by `margin` in frequency or
// amplitude (or use a different limb/axis outright).
struct SynthSpec {
  struct Archetype {
    Index limb_root = 1;
    double freq_hz = 1.0;
    double amplitude = 0.25;
    Index axis = 0;
    double phase_jitter = 0.5;
  };

  std::string graph = "chain(9)";
  Index n_classes = 5;
  Index samples_per_class = 60;
  Index persons = 1;
  Index t_raw_min = 48;
  Index t_raw_max = 72;
  double fps = 30.0;
  double noise_sigma = 0.01;
  double margin = 0.2;
  std::uint64_t seed = 1;
  std::vector<std::vector<Archetype>> classes;  // empty: auto-derived

  void validate() const;
  // Fills `classes` with margin-separated defaults when it is empty.
  void materialize_classes();
};

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j,
                                   const std::string& path);

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j,
                                   const std::string& path);

nlohmann::json synth_spec_to_json(const SynthSpec& spec);
SynthSpec synth_spec_from_json(const nlohmann::json& j,
                               const std::string& path);

// Parses text as JSON; syntax errors become ConfigError with position info.
nlohmann::json parse_json_text(const std::string& text,
                               const std::string& origin);
nlohmann::json load_json_file(const std::string& path);

// Rejects any key of j not in `allowed`; error names the full key path.
void reject_unknown_keys(const nlohmann::json& j, const std::string& path,
                         const std::vector<std::string>& allowed);

void write_file_atomic(const std::string& path, const std::string& contents);

}  // namespace s3t
