#include "s3t/config.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include "s3t/topology.hpp"

namespace s3t {

using nlohmann::json;

namespace {

[[noreturn]] void bad_key(const std::string& path, const std::string& what) {
  fail<ConfigError>(path, ": ", what);
}

void check_object(const json& j, const std::string& path) {
  if (!j.is_object()) bad_key(path, "expected a JSON object");
}

double get_num(const json& j, const std::string& path, const char* key,
               double fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_number()) bad_key(path + "." + key, "expected a number");
  return v.get<double>();
}

Index get_int(const json& j, const std::string& path, const char* key,
              Index fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_number_integer()) bad_key(path + "." + key, "expected an integer");
  return v.get<Index>();
}

std::uint64_t get_u64(const json& j, const std::string& path, const char* key,
                      std::uint64_t fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_number_unsigned() && !v.is_number_integer())
    bad_key(path + "." + key, "expected an integer");
  return v.get<std::uint64_t>();
}

bool get_bool(const json& j, const std::string& path, const char* key,
              bool fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_boolean()) bad_key(path + "." + key, "expected a boolean");
  return v.get<bool>();
}

std::string get_str(const json& j, const std::string& path, const char* key,
                    const std::string& fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_string()) bad_key(path + "." + key, "expected a string");
  return v.get<std::string>();
}

}  // namespace

void reject_unknown_keys(const json& j, const std::string& path,
                         const std::vector<std::string>& allowed) {
  check_object(j, path);
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items())
    if (!ok.count(key)) bad_key(path + "." + key, "unknown key");
}

json parse_json_text(const std::string& text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    fail<ConfigError>(origin, ": ", e.what());
  }
}

json load_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail<ConfigError>("cannot open ", path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return parse_json_text(text, path);
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail<Error>("cannot write ", tmp);
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) fail<Error>("short write to ", tmp);
  }
  std::filesystem::rename(tmp, path);
}

json model_config_to_json(const ModelConfig& cfg) {
  json j;
  j["time_steps"] = cfg.time_steps;
  j["d_model"] = cfg.d_model;
  j["n_blocks"] = cfg.n_blocks;
  j["heads"] = cfg.heads;
  j["persons"] = cfg.persons;
  j["n_classes"] = cfg.n_classes;
  j["c_in"] = cfg.c_in;
  j["graph"] = cfg.graph;
  j["gamma"] = cfg.gamma;
  j["use_mase"] = cfg.use_mase;
  j["use_atg"] = cfg.use_atg;
  j["use_lstr"] = cfg.use_lstr;
  j["use_s3"] = cfg.use_s3;
  j["use_u_readout"] = cfg.use_u_readout;
  j["s3_input"] = cfg.s3_input == S3Input::pre_buffer ? "pre_buffer" : "post_buffer";
  switch (cfg.decay_mode) {
    case DecayMode::learnable: j["decay_mode"] = "learnable"; break;
    case DecayMode::fixed: j["decay_mode"] = "fixed"; break;
    case DecayMode::linear: j["decay_mode"] = "linear"; break;
  }
  j["decay_fixed"] = cfg.decay_fixed;
  j["tet_target"] =
      cfg.tet_target == TetTarget::current ? "current" : "potential";
  j["tau"] = cfg.tau;
  j["u_th"] = cfg.u_th;
  j["surrogate_alpha"] = cfg.surrogate_alpha;
  j["seed"] = cfg.seed;
  return j;
}

ModelConfig model_config_from_json(const json& j, const std::string& path) {
  reject_unknown_keys(
      j, path,
      {"time_steps", "d_model", "n_blocks", "heads", "persons", "n_classes",
       "c_in", "graph", "gamma", "use_mase", "use_atg", "use_lstr", "use_s3",
       "use_u_readout", "s3_input", "decay_mode", "decay_fixed", "tet_target",
       "tau", "u_th", "surrogate_alpha", "seed"});
  ModelConfig cfg;
  cfg.time_steps = get_int(j, path, "time_steps", cfg.time_steps);
  cfg.d_model = get_int(j, path, "d_model", cfg.d_model);
  cfg.n_blocks = get_int(j, path, "n_blocks", cfg.n_blocks);
  cfg.heads = get_int(j, path, "heads", cfg.heads);
  cfg.persons = get_int(j, path, "persons", cfg.persons);
  cfg.n_classes = get_int(j, path, "n_classes", cfg.n_classes);
  cfg.c_in = get_int(j, path, "c_in", cfg.c_in);
  cfg.graph = get_str(j, path, "graph", cfg.graph);
  cfg.gamma = get_num(j, path, "gamma", cfg.gamma);
  cfg.use_mase = get_bool(j, path, "use_mase", cfg.use_mase);
  cfg.use_atg = get_bool(j, path, "use_atg", cfg.use_atg);
  cfg.use_lstr = get_bool(j, path, "use_lstr", cfg.use_lstr);
  cfg.use_s3 = get_bool(j, path, "use_s3", cfg.use_s3);
  cfg.use_u_readout = get_bool(j, path, "use_u_readout", cfg.use_u_readout);

  const std::string s3in = get_str(j, path, "s3_input", "post_buffer");
  if (s3in == "post_buffer") cfg.s3_input = S3Input::post_buffer;
  else if (s3in == "pre_buffer") cfg.s3_input = S3Input::pre_buffer;
  else bad_key(path + ".s3_input", "expected post_buffer or pre_buffer");

  const std::string decay = get_str(j, path, "decay_mode", "learnable");
  if (decay == "learnable") cfg.decay_mode = DecayMode::learnable;
  else if (decay == "fixed") cfg.decay_mode = DecayMode::fixed;
  else if (decay == "linear") cfg.decay_mode = DecayMode::linear;
  else bad_key(path + ".decay_mode", "expected learnable, fixed or linear");
  cfg.decay_fixed = get_num(j, path, "decay_fixed", cfg.decay_fixed);

  const std::string target = get_str(j, path, "tet_target", "potential");
  if (target == "potential") cfg.tet_target = TetTarget::potential;
  else if (target == "current") cfg.tet_target = TetTarget::current;
  else bad_key(path + ".tet_target", "expected potential or current");

  cfg.tau = get_num(j, path, "tau", cfg.tau);
  cfg.u_th = get_num(j, path, "u_th", cfg.u_th);
  cfg.surrogate_alpha = get_num(j, path, "surrogate_alpha", cfg.surrogate_alpha);
  cfg.seed = get_u64(j, path, "seed", cfg.seed);
  cfg.validate();
  return cfg;
}

void TrainConfig::validate() const {
  if (lr <= 0) fail<ConfigError>("train.lr must be positive");
  if (weight_decay < 0) fail<ConfigError>("train.weight_decay must be >= 0");
  if (final_lr < 0 || final_lr > lr)
    fail<ConfigError>("train.final_lr must lie in [0, lr]");
  if (warmup_epochs < 0) fail<ConfigError>("train.warmup_epochs must be >= 0");
  if (epochs < 1) fail<ConfigError>("train.epochs must be >= 1");
  if (warmup_epochs >= epochs)
    fail<ConfigError>("train.warmup_epochs must be below train.epochs");
  if (batch < 1) fail<ConfigError>("train.batch must be >= 1");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
    fail<ConfigError>("train betas must lie in [0, 1)");
  if (eps <= 0) fail<ConfigError>("train.eps must be positive");
  if (clip_norm <= 0) fail<ConfigError>("train.clip_norm must be positive");
}

json train_config_to_json(const TrainConfig& cfg) {
  json j;
  j["lr"] = cfg.lr;
  j["weight_decay"] = cfg.weight_decay;
  j["final_lr"] = cfg.final_lr;
  j["warmup_epochs"] = cfg.warmup_epochs;
  j["epochs"] = cfg.epochs;
  j["batch"] = cfg.batch;
  j["beta1"] = cfg.beta1;
  j["beta2"] = cfg.beta2;
  j["eps"] = cfg.eps;
  j["clip_norm"] = cfg.clip_norm;
  j["seed"] = cfg.seed;
  return j;
}

TrainConfig train_config_from_json(const json& j, const std::string& path) {
  reject_unknown_keys(j, path,
                      {"lr", "weight_decay", "final_lr", "warmup_epochs",
                       "epochs", "batch", "beta1", "beta2", "eps", "clip_norm",
                       "seed"});
  TrainConfig cfg;
  cfg.lr = get_num(j, path, "lr", cfg.lr);
  cfg.weight_decay = get_num(j, path, "weight_decay", cfg.weight_decay);
  cfg.final_lr = get_num(j, path, "final_lr", cfg.final_lr);
  cfg.warmup_epochs = get_int(j, path, "warmup_epochs", cfg.warmup_epochs);
  cfg.epochs = get_int(j, path, "epochs", cfg.epochs);
  cfg.batch = get_int(j, path, "batch", cfg.batch);
  cfg.beta1 = get_num(j, path, "beta1", cfg.beta1);
  cfg.beta2 = get_num(j, path, "beta2", cfg.beta2);
  cfg.eps = get_num(j, path, "eps", cfg.eps);
  cfg.clip_norm = get_num(j, path, "clip_norm", cfg.clip_norm);
  cfg.seed = get_u64(j, path, "seed", cfg.seed);
  cfg.validate();
  return cfg;
}

void SynthSpec::validate() const {
  if (n_classes < 2) fail<ConfigError>("synth.n_classes must be >= 2");
  if (samples_per_class < 1)
    fail<ConfigError>("synth.samples_per_class must be >= 1");
  if (persons < 1 || persons > 2)
    fail<ConfigError>("synth.persons must be 1 or 2");
  if (t_raw_min < 1 || t_raw_max < t_raw_min)
    fail<ConfigError>("synth frame range must satisfy 1 <= t_raw_min <= t_raw_max");
  if (fps <= 0) fail<ConfigError>("synth.fps must be positive");
  if (noise_sigma < 0) fail<ConfigError>("synth.noise_sigma must be >= 0");
  if (margin <= 0) fail<ConfigError>("synth.margin must be positive");

  if (classes.empty()) return;
  if (static_cast<Index>(classes.size()) != n_classes)
    fail<ConfigError>("synth.classes lists ", classes.size(),
                      " classes but n_classes is ", n_classes);
  const SkeletonGraph g = parse_graph_spec(graph);
  bool any_motion = false;
  for (std::size_t k = 0; k < classes.size(); ++k) {
    if (classes[k].empty())
      fail<ConfigError>("synth.classes[", k, "] has no archetypes");
    for (const Archetype& a : classes[k]) {
      if (a.limb_root < 0 || a.limb_root >= g.n_nodes)
        fail<ConfigError>("synth.classes[", k, "]: limb_root ", a.limb_root,
                          " outside graph of ", g.n_nodes, " nodes");
      if (a.axis < 0 || a.axis > 2)
        fail<ConfigError>("synth.classes[", k, "]: axis must be 0, 1 or 2");
      if (a.freq_hz < 0 || a.amplitude < 0 || a.phase_jitter < 0)
        fail<ConfigError>("synth.classes[", k,
                          "]: negative archetype parameter");
      if (a.amplitude > 0) any_motion = true;
    }
  }
  if (!any_motion)
    fail<ConfigError>("degenerate spec: every class has zero amplitude");

  // Classes must be distinguishable: a different limb or axis, or a margin
  // gap in frequency or amplitude on the first archetype.
  for (std::size_t a = 0; a < classes.size(); ++a)
    for (std::size_t b = a + 1; b < classes.size(); ++b) {
      const Archetype& x = classes[a][0];
      const Archetype& y = classes[b][0];
      const bool separated =
          x.limb_root != y.limb_root || x.axis != y.axis ||
          std::abs(x.freq_hz - y.freq_hz) >= margin ||
          std::abs(x.amplitude - y.amplitude) >= margin;
      if (!separated)
        fail<ConfigError>("classes ", a, " and ", b,
                          " are closer than the separability margin ", margin);
    }
}

void SynthSpec::materialize_classes() {
  if (!classes.empty()) return;
  const SkeletonGraph g = parse_graph_spec(graph);
  classes.resize(static_cast<std::size_t>(n_classes));
  for (Index k = 0; k < n_classes; ++k) {
    Archetype a;
    // Spread classes across limbs, axes and well-separated frequencies.
    a.limb_root = g.n_nodes > 1 ? 1 + (k % (g.n_nodes - 1)) : 0;
    a.axis = k % 3;
    a.freq_hz = 0.6 + 0.45 * static_cast<double>(k);
    a.amplitude = 0.25;
    a.phase_jitter = 0.5;
    classes[static_cast<std::size_t>(k)].push_back(a);
  }
}

json synth_spec_to_json(const SynthSpec& spec) {
  json j;
  j["graph"] = spec.graph;
  j["n_classes"] = spec.n_classes;
  j["samples_per_class"] = spec.samples_per_class;
  j["persons"] = spec.persons;
  j["t_raw_min"] = spec.t_raw_min;
  j["t_raw_max"] = spec.t_raw_max;
  j["fps"] = spec.fps;
  j["noise_sigma"] = spec.noise_sigma;
  j["margin"] = spec.margin;
  j["seed"] = spec.seed;
  if (!spec.classes.empty()) {
    json cls = json::array();
    for (const auto& archetypes : spec.classes) {
      json arr = json::array();
      for (const auto& a : archetypes) {
        json o;
        o["limb_root"] = a.limb_root;
        o["freq_hz"] = a.freq_hz;
        o["amplitude"] = a.amplitude;
        o["axis"] = a.axis;
        o["phase_jitter"] = a.phase_jitter;
        arr.push_back(o);
      }
      cls.push_back(arr);
    }
    j["classes"] = cls;
  }
  return j;
}

SynthSpec synth_spec_from_json(const json& j, const std::string& path) {
  reject_unknown_keys(j, path,
                      {"graph", "n_classes", "samples_per_class", "persons",
                       "t_raw_min", "t_raw_max", "fps", "noise_sigma", "margin",
                       "seed", "classes"});
  SynthSpec spec;
  spec.graph = get_str(j, path, "graph", spec.graph);
  spec.n_classes = get_int(j, path, "n_classes", spec.n_classes);
  spec.samples_per_class =
      get_int(j, path, "samples_per_class", spec.samples_per_class);
  spec.persons = get_int(j, path, "persons", spec.persons);
  spec.t_raw_min = get_int(j, path, "t_raw_min", spec.t_raw_min);
  spec.t_raw_max = get_int(j, path, "t_raw_max", spec.t_raw_max);
  spec.fps = get_num(j, path, "fps", spec.fps);
  spec.noise_sigma = get_num(j, path, "noise_sigma", spec.noise_sigma);
  spec.margin = get_num(j, path, "margin", spec.margin);
  spec.seed = get_u64(j, path, "seed", spec.seed);

  if (j.contains("classes")) {
    const json& cls = j.at("classes");
    if (!cls.is_array()) bad_key(path + ".classes", "expected an array");
    for (std::size_t k = 0; k < cls.size(); ++k) {
      const std::string cpath = path + ".classes[" + std::to_string(k) + "]";
      const json& arr = cls[k];
      if (!arr.is_array()) bad_key(cpath, "expected an array of archetypes");
      std::vector<SynthSpec::Archetype> archetypes;
      for (std::size_t i = 0; i < arr.size(); ++i) {
        const std::string apath = cpath + "[" + std::to_string(i) + "]";
        const json& o = arr[i];
        reject_unknown_keys(
            o, apath, {"limb_root", "freq_hz", "amplitude", "axis",
                       "phase_jitter"});
        SynthSpec::Archetype a;
        a.limb_root = get_int(o, apath, "limb_root", a.limb_root);
        a.freq_hz = get_num(o, apath, "freq_hz", a.freq_hz);
        a.amplitude = get_num(o, apath, "amplitude", a.amplitude);
        a.axis = get_int(o, apath, "axis", a.axis);
        a.phase_jitter = get_num(o, apath, "phase_jitter", a.phase_jitter);
        archetypes.push_back(a);
      }
      spec.classes.push_back(std::move(archetypes));
    }
  }
  spec.validate();
  return spec;
}

}  // namespace s3t
