#pragma once

// Run configuration: generator geometry, training schedule and data options,
// stored as an ordered "key = value" text file. Unknown and repeated keys are
// rejected; '#' starts a comment.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "modsynth/data_pipeline.hpp"
#include "modsynth/losses.hpp"
#include "modsynth/networks.hpp"
#include "modsynth/optim.hpp"

namespace modsynth {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int epochs = 200;
  int batch_size = 3;
  double base_lr = 2e-4;
  int decay_start_epoch = 100;
  LossWeights weights;  // lambda1 = lambda2 = 0.1
  AdamOptions adam;
  std::uint64_t seed = 0;
  /// Write epoch_<n>.ckpt every this many epochs (the final epoch always).
  int checkpoint_every = 10;
  /// Cap on optimizer steps per epoch; 0 uses every batch.
  int max_steps_per_epoch = 0;
  /// Cap on held-out slices scored at the end of each epoch; 0 scores all,
  /// negative disables validation.
  int validation_slices = 0;

  void validate() const {
    if (epochs < 1) throw ContractError("epochs must be positive");
    if (batch_size < 1) throw ContractError("batch_size must be positive");
    if (!(base_lr >= 0.0)) throw ContractError("lr must be nonnegative");
    if (decay_start_epoch < 0 || decay_start_epoch > epochs) {
      throw ContractError("decay_start_epoch must lie in 0..epochs, got " + std::to_string(decay_start_epoch));
    }
    if (checkpoint_every < 0 || max_steps_per_epoch < 0) throw ContractError("cadences must be nonnegative");
    weights.validate();
  }
};

struct DataConfig {
  std::vector<Modality> sources{Modality::T1, Modality::T2};
  Modality target = Modality::FLAIR;
  std::string manifest;
  int keep_slices = 80;
  int train_subjects = 126;
};

struct RunConfig {
  GeneratorConfig generator;
  TrainConfig train;
  DataConfig data;
  std::string output_dir = "runs/default";

  void validate() const {
    generator.validate();
    train.validate();
    if (static_cast<int>(data.sources.size()) != generator.modality_count) {
      throw ContractError("modality_count does not match the source list");
    }
    for (Modality m : data.sources) {
      if (m == data.target) throw ContractError("target " + to_string(m) + " is also listed as a source");
    }
    if (data.keep_slices < 1) throw ContractError("keep_slices must be positive");
    if (data.train_subjects < 1) throw ContractError("train_subjects must be positive");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string join_modalities(const std::vector<Modality>& ms) {
  std::string out;
  for (std::size_t i = 0; i < ms.size(); ++i) out += (i ? "," : "") + to_string(ms[i]);
  return out;
}

/// Shortest text that parses back to the same double, in plain decimal
/// notation for ordinary magnitudes.
inline std::string format_double(double v) {
  char buf[400];
  const double a = std::fabs(v);
  const bool plain = a == 0.0 || (a >= 1e-9 && a < 1e15);
  const auto r = plain ? std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed)
                       : std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename V>
V parse_number(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  V v{};
  if constexpr (std::is_unsigned_v<V>) {
    if (text.find('-') != std::string::npos) throw ConfigError("config key '" + key + "': expected a nonnegative value");
  }
  if (!(is >> v) || !(is >> std::ws).eof()) throw ConfigError("config key '" + key + "': invalid number '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + text + "'");
}

struct ConfigKey {
  const char* name;
  const char* help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline const std::vector<ConfigKey>& config_schema() {
  using K = ConfigKey;
  static const std::vector<K> keys = {
      {"modalities", "comma-separated source modalities (T1, T1c, T2, FLAIR)",
       [](const RunConfig& c) { return join_modalities(c.data.sources); },
       [](RunConfig& c, const std::string& v) {
         c.data.sources = parse_modality_list(v);
         c.generator.modality_count = static_cast<int>(c.data.sources.size());
       }},
      {"target", "target modality", [](const RunConfig& c) { return to_string(c.data.target); },
       [](RunConfig& c, const std::string& v) { c.data.target = parse_modality(v); }},
      {"image_size", "slice side length after resizing",
       [](const RunConfig& c) { return std::to_string(c.generator.image_size); },
       [](RunConfig& c, const std::string& v) { c.generator.image_size = parse_number<int>("image_size", v); }},
      {"laf_block_size", "side of the fusion blocks (image_size disables chunking)",
       [](const RunConfig& c) { return std::to_string(c.generator.laf_block_size); },
       [](RunConfig& c, const std::string& v) { c.generator.laf_block_size = parse_number<int>("laf_block_size", v); }},
      {"width_scale", "channel width multiplier",
       [](const RunConfig& c) { return format_double(c.generator.width_scale); },
       [](RunConfig& c, const std::string& v) { c.generator.width_scale = parse_number<double>("width_scale", v); }},
      {"residual_padding", "residual block padding (zero or reflect)",
       [](const RunConfig& c) { return std::string(c.generator.residual_padding == PadMode::Zero ? "zero" : "reflect"); },
       [](RunConfig& c, const std::string& v) {
         if (v == "zero") {
           c.generator.residual_padding = PadMode::Zero;
         } else if (v == "reflect") {
           c.generator.residual_padding = PadMode::Reflect;
         } else {
           throw ConfigError("config key 'residual_padding': expected zero or reflect, got '" + v + "'");
         }
       }},
      {"per_layer_style", "separate style statistics per decoder residual block",
       [](const RunConfig& c) { return std::string(c.generator.per_layer_style ? "true" : "false"); },
       [](RunConfig& c, const std::string& v) { c.generator.per_layer_style = parse_bool("per_layer_style", v); }},
      {"lambda1", "weight of the synthesized-image L1 term",
       [](const RunConfig& c) { return format_double(c.train.weights.lambda1); },
       [](RunConfig& c, const std::string& v) { c.train.weights.lambda1 = parse_number<double>("lambda1", v); }},
      {"lambda2", "weight of the pseudo-target L1 term",
       [](const RunConfig& c) { return format_double(c.train.weights.lambda2); },
       [](RunConfig& c, const std::string& v) { c.train.weights.lambda2 = parse_number<double>("lambda2", v); }},
      {"lr", "base learning rate", [](const RunConfig& c) { return format_double(c.train.base_lr); },
       [](RunConfig& c, const std::string& v) { c.train.base_lr = parse_number<double>("lr", v); }},
      {"decay_start_epoch", "last epoch at the base rate; linear decay to 0 follows",
       [](const RunConfig& c) { return std::to_string(c.train.decay_start_epoch); },
       [](RunConfig& c, const std::string& v) { c.train.decay_start_epoch = parse_number<int>("decay_start_epoch", v); }},
      {"epochs", "training epochs", [](const RunConfig& c) { return std::to_string(c.train.epochs); },
       [](RunConfig& c, const std::string& v) { c.train.epochs = parse_number<int>("epochs", v); }},
      {"batch_size", "slices per optimizer step", [](const RunConfig& c) { return std::to_string(c.train.batch_size); },
       [](RunConfig& c, const std::string& v) { c.train.batch_size = parse_number<int>("batch_size", v); }},
      {"adam_beta1", "Adam first-moment decay", [](const RunConfig& c) { return format_double(c.train.adam.beta1); },
       [](RunConfig& c, const std::string& v) { c.train.adam.beta1 = parse_number<double>("adam_beta1", v); }},
      {"adam_beta2", "Adam second-moment decay", [](const RunConfig& c) { return format_double(c.train.adam.beta2); },
       [](RunConfig& c, const std::string& v) { c.train.adam.beta2 = parse_number<double>("adam_beta2", v); }},
      {"seed", "random seed (falls back to MODSYNTH_SEED, then 0)",
       [](const RunConfig& c) { return std::to_string(c.train.seed); },
       [](RunConfig& c, const std::string& v) { c.train.seed = parse_number<std::uint64_t>("seed", v); }},
      {"checkpoint_every", "checkpoint cadence in epochs (0: final epoch only)",
       [](const RunConfig& c) { return std::to_string(c.train.checkpoint_every); },
       [](RunConfig& c, const std::string& v) { c.train.checkpoint_every = parse_number<int>("checkpoint_every", v); }},
      {"max_steps_per_epoch", "cap on optimizer steps per epoch (0: no cap)",
       [](const RunConfig& c) { return std::to_string(c.train.max_steps_per_epoch); },
       [](RunConfig& c, const std::string& v) {
         c.train.max_steps_per_epoch = parse_number<int>("max_steps_per_epoch", v);
       }},
      {"validation_slices", "held-out slices scored per epoch (0: all, -1: none)",
       [](const RunConfig& c) { return std::to_string(c.train.validation_slices); },
       [](RunConfig& c, const std::string& v) { c.train.validation_slices = parse_number<int>("validation_slices", v); }},
      {"manifest", "dataset manifest path", [](const RunConfig& c) { return c.data.manifest; },
       [](RunConfig& c, const std::string& v) { c.data.manifest = v; }},
      {"keep_slices", "middle nonempty slices kept per subject",
       [](const RunConfig& c) { return std::to_string(c.data.keep_slices); },
       [](RunConfig& c, const std::string& v) { c.data.keep_slices = parse_number<int>("keep_slices", v); }},
      {"train_subjects", "subjects in the training cohort; the rest are held out",
       [](const RunConfig& c) { return std::to_string(c.data.train_subjects); },
       [](RunConfig& c, const std::string& v) { c.data.train_subjects = parse_number<int>("train_subjects", v); }},
      {"output_dir", "run directory", [](const RunConfig& c) { return c.output_dir; },
       [](RunConfig& c, const std::string& v) { c.output_dir = v; }},
  };
  return keys;
}

}  // namespace detail

/// Seed from the MODSYNTH_SEED environment variable, or 0.
inline std::uint64_t environment_seed() {
  const char* s = std::getenv("MODSYNTH_SEED");
  if (!s || !*s) return 0;
  return detail::parse_number<std::uint64_t>("MODSYNTH_SEED", s);
}

/// Parses config text on top of the defaults. A missing `seed` key falls back
/// to the environment.
inline RunConfig parse_config(const std::string& text, const std::string& origin = "config") {
  RunConfig c;
  std::map<std::string, const detail::ConfigKey*> by_name;
  for (const auto& k : detail::config_schema()) by_name[k.name] = &k;
  std::map<std::string, int> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    auto it = by_name.find(key);
    if (it == by_name.end()) throw ConfigError(where + ": unknown key '" + key + "'");
    if (auto [prev, fresh] = seen.emplace(key, lineno); !fresh) {
      throw ConfigError(where + ": key '" + key + "' already set on line " + std::to_string(prev->second));
    }
    try {
      it->second->set(c, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    } catch (const ContractError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  if (!seen.count("seed")) c.train.seed = environment_seed();
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

/// Every key in schema order; parse_config(config_text(c)) reproduces c.
inline std::string config_text(const RunConfig& c) {
  std::string out;
  for (const auto& k : detail::config_schema()) out += std::string(k.name) + " = " + k.get(c) + "\n";
  return out;
}

/// Where a default comes from: the published training protocol and experiment
/// setup, or a choice of this implementation where no value is published.
inline std::string default_provenance(const std::string& key) {
  static const std::map<std::string, std::string> published = {
      {"modalities", "published block-size experiment"},
      {"target", "published block-size experiment"},
      {"image_size", "published preprocessing"},
      {"laf_block_size", "published best block size"},
      {"width_scale", "published architecture widths"},
      {"lambda1", "published loss weights"},
      {"lambda2", "published loss weights"},
      {"lr", "published training protocol"},
      {"decay_start_epoch", "published training protocol"},
      {"epochs", "published training protocol"},
      {"batch_size", "published training protocol"},
      {"keep_slices", "published preprocessing"},
      {"train_subjects", "published cohort split"},
  };
  auto it = published.find(key);
  return it == published.end() ? "implementation choice" : it->second;
}

/// Schema listing with defaults and their provenance, for help output.
inline std::string config_reference() {
  const RunConfig defaults;
  std::ostringstream os;
  for (const auto& k : detail::config_schema()) {
    os << "  " << std::left << std::setw(20) << k.name << " " << k.help << " [default: " << k.get(defaults) << "; "
       << default_provenance(k.name) << "]\n";
  }
  return os.str();
}

}  // namespace modsynth
