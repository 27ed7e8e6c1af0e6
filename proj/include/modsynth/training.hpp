#pragma once

// Alternating adversarial training: one discriminator update on a detached
// fake, then one generator update against the freshly updated discriminator.
// Runs log one JSON object per line to manifest.jsonl and finish with
// summary.json; checkpoints are epoch_<n>.ckpt.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "modsynth/config.hpp"
#include "modsynth/data_pipeline.hpp"
#include "modsynth/losses.hpp"
#include "modsynth/metrics.hpp"
#include "modsynth/networks.hpp"
#include "modsynth/optim.hpp"

namespace modsynth {

/// Base rate through decay_start_epoch, then linear decay reaching 0 at `epochs`.
inline double lr_schedule(int epoch, const TrainConfig& c) {
  if (epoch < 1 || epoch > c.epochs) {
    throw ContractError("lr_schedule: epoch " + std::to_string(epoch) + " outside 1.." + std::to_string(c.epochs));
  }
  if (epoch <= c.decay_start_epoch) return c.base_lr;
  const double span = c.epochs - c.decay_start_epoch;
  return c.base_lr * (c.epochs - epoch) / span;
}

struct Batch {
  Tensor<float> sources;  // (n, M, S, S)
  Tensor<float> target;   // (n, 1, S, S)
};

inline Batch make_batch(const std::vector<SliceSample>& samples, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ContractError("make_batch: empty batch");
  const SliceSample& first = samples.at(indices.front());
  const int m = static_cast<int>(first.sources.size());
  const Shape s = first.target.shape();
  Batch b{Tensor<float>(static_cast<int>(indices.size()), m, s.h, s.w),
          Tensor<float>(static_cast<int>(indices.size()), 1, s.h, s.w)};
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const SliceSample& x = samples.at(indices[k]);
    if (static_cast<int>(x.sources.size()) != m || !(x.target.shape() == s)) {
      throw ContractError("make_batch: inconsistent samples");
    }
    for (int c = 0; c < m; ++c) std::copy_n(x.sources[c].data(), x.sources[c].size(), b.sources.plane(k, c));
    std::copy_n(x.target.data(), x.target.size(), b.target.plane(k, 0));
  }
  return b;
}

struct StepResult {
  double loss_d = 0.0;
  double loss_g = 0.0;
  double adversarial = 0.0;
  double reconstruction = 0.0;
  double synth_l1 = 0.0;  // unweighted mean |synthesized - real|
  bool d_updated = false;
  bool g_updated = false;
  std::string skipped;  // reason when an update was skipped

  bool finite() const {
    return std::isfinite(loss_d) && std::isfinite(loss_g) && std::isfinite(synth_l1);
  }
};

struct ValidationSummary {
  MeanStd psnr, ssim, nrmse;
  std::size_t slices = 0;
};

/// Scores the generator on held-out slices, rescaled from [-1, 1] to [0, 1].
/// Slices whose real target is entirely background are skipped.
inline MetricReport evaluate_generator(const Generator<float>& g, const std::vector<SliceSample>& samples,
                                       int limit = 0, int batch_size = 4) {
  MetricReport report;
  std::vector<std::size_t> idx;
  const std::size_t n = limit > 0 ? std::min<std::size_t>(samples.size(), limit) : samples.size();
  NoGradGuard guard;
  for (std::size_t start = 0; start < n; start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(n, start + batch_size); ++i) idx.push_back(i);
    const Batch b = make_batch(samples, idx);
    const auto out = g.forward(Var<float>(b.sources));
    const Tensor<float>& synth = out.synthesized.value();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      Tensor<double> real(1, 1, b.target.h(), b.target.w()), fake(real.shape());
      bool any = false;
      for (std::size_t i = 0; i < real.size(); ++i) {
        real[i] = (static_cast<double>(b.target.plane(k, 0)[i]) + 1.0) * 0.5;
        fake[i] = (static_cast<double>(synth.plane(k, 0)[i]) + 1.0) * 0.5;
        any = any || real[i] != 0.0;
      }
      if (!any) continue;
      const SliceSample& s = samples[idx[k]];
      report.slices.push_back(evaluate_slice(s.subject_id, s.slice_index, real, fake));
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
  std::string config_text;
  std::uint64_t seed = 0;
  int epoch = 0;
  std::map<std::string, Tensor<double>> tensors;
};

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'M', 'S', 'Y', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename V>
void write_raw(std::ostream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_raw(std::istream& is, const std::string& path) {
  V v;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) throw IoError(path + ": truncated checkpoint");
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, const std::string& path) {
  const auto n = read_raw<std::uint32_t>(is, path);
  if (n > (1u << 24)) throw IoError(path + ": corrupt checkpoint string");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw IoError(path + ": truncated checkpoint");
  return s;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot create " + tmp);
    os.write(detail::kCheckpointMagic, sizeof detail::kCheckpointMagic);
    detail::write_raw(os, detail::kCheckpointVersion);
    detail::write_raw<std::uint64_t>(os, ck.seed);
    detail::write_raw<std::int32_t>(os, ck.epoch);
    detail::write_string(os, ck.config_text);
    detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& [name, t] : ck.tensors) {
      detail::write_string(os, name);
      for (int d : {t.n(), t.c(), t.h(), t.w()}) detail::write_raw<std::int32_t>(os, d);
      os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!os.flush()) throw IoError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0) {
    throw IoError(path + " is not a checkpoint");
  }
  const auto version = detail::read_raw<std::uint32_t>(is, path);
  if (version != detail::kCheckpointVersion) throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.seed = detail::read_raw<std::uint64_t>(is, path);
  ck.epoch = detail::read_raw<std::int32_t>(is, path);
  ck.config_text = detail::read_string(is, path);
  const auto count = detail::read_raw<std::uint32_t>(is, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = detail::read_string(is, path);
    int d[4];
    for (int& x : d) x = detail::read_raw<std::int32_t>(is, path);
    Tensor<double> t(d[0], d[1], d[2], d[3]);
    if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)))) {
      throw IoError(path + ": truncated tensor " + name);
    }
    ck.tensors.emplace(std::move(name), std::move(t));
  }
  return ck;
}

namespace detail {

template <typename T>
void store_tensor(Checkpoint& ck, const std::string& name, const Tensor<T>& t) {
  ck.tensors.insert_or_assign(name, t.template cast<double>());
}

template <typename T>
void restore_tensor(const Checkpoint& ck, const std::string& name, Tensor<T>& dst) {
  auto it = ck.tensors.find(name);
  if (it == ck.tensors.end()) throw ContractError("checkpoint has no tensor '" + name + "'");
  if (!(it->second.shape() == dst.shape())) {
    throw ContractError("checkpoint tensor '" + name + "' has shape " + it->second.shape().str() + ", expected " +
                        dst.shape().str());
  }
  dst = it->second.template cast<T>();
}

}  // namespace detail

/// Copies the generator weights stored in a checkpoint into `g`.
template <typename T>
void restore_generator(const Checkpoint& ck, Generator<T>& g) {
  for (auto& p : g.parameters()) detail::restore_tensor(ck, "G." + p.name, p.var.mutable_value());
}

/// Rebuilds the configuration and generator saved in a checkpoint.
inline std::pair<RunConfig, Generator<float>> load_generator(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  RunConfig cfg = parse_config(ck.config_text, path);
  Generator<float> g(cfg.generator, cfg.train.seed);
  restore_generator(ck, g);
  return {std::move(cfg), std::move(g)};
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

class Trainer {
 public:
  explicit Trainer(const RunConfig& cfg)
      : cfg_(cfg),
        g_(cfg.generator, cfg.train.seed),
        d_(cfg.generator, cfg.train.seed),
        g_opt_(g_.parameters(), cfg.train.adam),
        d_opt_(d_.parameters(), cfg.train.adam) {
    cfg_.validate();
  }

  const RunConfig& config() const { return cfg_; }
  Generator<float>& generator() { return g_; }
  const Generator<float>& generator() const { return g_; }
  Discriminator<float>& discriminator() { return d_; }

  /// Generator forward pass with the graph recorded for a later update.
  GeneratorOutput<float> generate(const Batch& b) const { return g_.forward(Var<float>(b.sources)); }

  /// Discriminator update on a detached fake. Running batch-norm statistics
  /// are updated here only. Returns the loss; a non-finite loss leaves D as is.
  double discriminator_step(const Batch& b, const Tensor<float>& fake, double lr, bool* applied = nullptr) {
    const Var<float> src(b.sources);
    const Var<float> d_real = d_.forward(src, Var<float>(b.target), true, true);
    const Var<float> d_fake = d_.forward(src, Var<float>(fake), true, true);
    const Var<float> loss = discriminator_loss(d_real, d_fake);
    const double value = loss.value()[0];
    if (applied) *applied = false;
    if (!std::isfinite(value)) return value;
    d_opt_.zero_grad();
    backward(loss);
    d_opt_.step(lr);
    d_opt_.zero_grad();
    if (applied) *applied = true;
    return value;
  }

  /// Generator update through the (fixed) discriminator in training mode,
  /// without touching its running statistics or weights.
  StepResult generator_step(const Batch& b, const GeneratorOutput<float>& out, double lr) {
    StepResult r;
    const Var<float> d_fake = d_.forward(Var<float>(b.sources), out.synthesized, true, false);
    const auto loss = total_generator_loss(d_fake, b.target, out.synthesized, out.pseudo_target, cfg_.train.weights);
    r.loss_g = loss.total.value()[0];
    r.adversarial = loss.adversarial.value()[0];
    r.reconstruction = loss.reconstruction.value()[0];
    r.synth_l1 = mean_abs_difference(out.synthesized.value(), b.target);
    if (!std::isfinite(r.loss_g)) {
      r.skipped = "non-finite generator loss";
      return r;
    }
    g_opt_.zero_grad();
    backward(loss.total);
    g_opt_.step(lr);
    g_opt_.zero_grad();
    d_opt_.zero_grad();
    r.g_updated = true;
    return r;
  }

  /// One D update followed by one G update.
  StepResult train_step(const Batch& b, double lr) {
    const GeneratorOutput<float> out = generate(b);
    bool applied = false;
    const double loss_d = discriminator_step(b, out.synthesized.value(), lr, &applied);
    if (!applied) {
      StepResult r;
      r.loss_d = loss_d;
      r.loss_g = std::numeric_limits<double>::quiet_NaN();
      r.synth_l1 = mean_abs_difference(out.synthesized.value(), b.target);
      r.skipped = "non-finite discriminator loss";
      return r;
    }
    StepResult r = generator_step(b, out, lr);
    r.loss_d = loss_d;
    r.d_updated = true;
    return r;
  }

  /// Weights, batch-norm buffers and optimizer state.
  Checkpoint snapshot(int epoch) {
    Checkpoint ck;
    ck.config_text = config_text(cfg_);
    ck.seed = cfg_.train.seed;
    ck.epoch = epoch;
    save_module(ck, "G.", g_opt_);
    save_module(ck, "D.", d_opt_);
    for (const auto& buf : d_.buffers()) detail::store_tensor(ck, "D." + buf.name, *buf.tensor);
    return ck;
  }

  /// Restores a snapshot taken from a run with the same model and data setup.
  void restore(const Checkpoint& ck) {
    const RunConfig other = parse_config(ck.config_text, "checkpoint");
    if (!(other.generator == cfg_.generator) || other.data.sources != cfg_.data.sources ||
        other.data.target != cfg_.data.target) {
      throw ContractError("checkpoint was written for a different model configuration");
    }
    load_module(ck, "G.", g_opt_);
    load_module(ck, "D.", d_opt_);
    for (const auto& buf : d_.buffers()) detail::restore_tensor(ck, "D." + buf.name, *buf.tensor);
  }

  static double mean_abs_difference(const Tensor<float>& a, const Tensor<float>& b) {
    a.require_same(b, "mean_abs_difference");
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(static_cast<double>(a[i]) - b[i]);
    return s / static_cast<double>(a.size());
  }

 private:
  static void save_module(Checkpoint& ck, const std::string& prefix, Adam<float>& opt) {
    const auto& params = opt.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
      detail::store_tensor(ck, prefix + params[k].name, params[k].var.value());
      detail::store_tensor(ck, prefix + "adam.m." + params[k].name, opt.first_moments()[k]);
      detail::store_tensor(ck, prefix + "adam.v." + params[k].name, opt.second_moments()[k]);
    }
    detail::store_tensor(ck, prefix + "adam.steps", Tensor<float>::scalar(static_cast<float>(opt.steps())));
  }

  static void load_module(const Checkpoint& ck, const std::string& prefix, Adam<float>& opt) {
    auto params = opt.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
      detail::restore_tensor(ck, prefix + params[k].name, params[k].var.mutable_value());
      detail::restore_tensor(ck, prefix + "adam.m." + params[k].name, opt.first_moments()[k]);
      detail::restore_tensor(ck, prefix + "adam.v." + params[k].name, opt.second_moments()[k]);
    }
    Tensor<float> steps = Tensor<float>::scalar(0);
    detail::restore_tensor(ck, prefix + "adam.steps", steps);
    opt.set_steps(static_cast<long>(steps[0]));
  }

  RunConfig cfg_;
  Generator<float> g_;
  Discriminator<float> d_;
  Adam<float> g_opt_, d_opt_;
};

// ---------------------------------------------------------------------------
// Full runs
// ---------------------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double loss_d = 0.0, loss_g = 0.0, adversarial = 0.0, reconstruction = 0.0, synth_l1 = 0.0;
  int steps = 0;
  int skipped = 0;
  double seconds = 0.0;
  std::optional<ValidationSummary> validation;
  std::string checkpoint;
};

struct RunManifest {
  std::string config_text;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  std::vector<std::string> checkpoints;
  std::vector<StepResult> first_steps;  // step results of epoch 1, in order
};

namespace detail {

inline nlohmann::ordered_json to_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}}; }

/// JSON has no NaN/Inf; those are written as null.
inline nlohmann::ordered_json number_or_null(double v) {
  return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr);
}

inline nlohmann::ordered_json to_json(const EpochRecord& e) {
  nlohmann::ordered_json j = {{"event", "epoch"},
                              {"epoch", e.epoch},
                              {"lr", e.lr},
                              {"loss_d", number_or_null(e.loss_d)},
                              {"loss_g", number_or_null(e.loss_g)},
                              {"loss_g_adversarial", number_or_null(e.adversarial)},
                              {"loss_g_reconstruction", number_or_null(e.reconstruction)},
                              {"synth_l1", number_or_null(e.synth_l1)},
                              {"steps", e.steps},
                              {"skipped_steps", e.skipped},
                              {"seconds", e.seconds}};
  if (e.validation) {
    j["validation"] = {{"slices", e.validation->slices},
                       {"psnr", to_json(e.validation->psnr)},
                       {"ssim", to_json(e.validation->ssim)},
                       {"nrmse", to_json(e.validation->nrmse)}};
  }
  if (!e.checkpoint.empty()) j["checkpoint"] = e.checkpoint;
  return j;
}

}  // namespace detail

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains on `train_set`, scoring `validation_set` after every epoch, and
/// writes manifest.jsonl, summary.json and checkpoints under cfg.output_dir.
inline RunManifest train(const RunConfig& cfg, const std::vector<SliceSample>& train_set,
                         const std::vector<SliceSample>& validation_set = {}, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw ContractError("train: empty training set");
  namespace fs = std::filesystem;
  using clock = std::chrono::steady_clock;
  fs::create_directories(cfg.output_dir);
  const fs::path dir(cfg.output_dir);
  std::ofstream log(dir / "manifest.jsonl", std::ios::trunc);
  if (!log) throw IoError("cannot create " + (dir / "manifest.jsonl").string());
  auto emit = [&](const nlohmann::ordered_json& j) {
    log << j.dump() << '\n';
    log.flush();
    if (!log) throw IoError("write failed for " + (dir / "manifest.jsonl").string());
  };

  RunManifest manifest;
  manifest.config_text = config_text(cfg);
  manifest.seed = cfg.train.seed;
  emit({{"event", "start"},
        {"seed", cfg.train.seed},
        {"config", manifest.config_text},
        {"train_slices", train_set.size()},
        {"validation_slices", validation_set.size()},
        {"optimizer", {{"name", "adam"}, {"beta1", cfg.train.adam.beta1}, {"beta2", cfg.train.adam.beta2},
                       {"eps", cfg.train.adam.eps}}}});

  Trainer trainer(cfg);
  const auto run_start = clock::now();
  std::vector<std::size_t> order(train_set.size());
  for (int epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
    const auto t0 = clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_schedule(epoch, cfg.train);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle(mix_seed(cfg.train.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    shuffle.shuffle(order.begin(), order.end());
    CompensatedSum sd, sg, sa, sr, sl;
    int finite = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.train.batch_size) {
      if (cfg.train.max_steps_per_epoch > 0 && rec.steps >= cfg.train.max_steps_per_epoch) break;
      const std::vector<std::size_t> idx(order.begin() + start,
                                         order.begin() + std::min(order.size(), start + cfg.train.batch_size));
      const StepResult r = trainer.train_step(make_batch(train_set, idx), rec.lr);
      ++rec.steps;
      if (epoch == 1) manifest.first_steps.push_back(r);
      if (!r.skipped.empty()) {
        ++rec.skipped;
        emit({{"event", "skipped_step"}, {"epoch", epoch}, {"step", rec.steps}, {"reason", r.skipped},
              {"loss_d", detail::number_or_null(r.loss_d)}, {"loss_g", detail::number_or_null(r.loss_g)}});
        continue;
      }
      ++finite;
      sd.add(r.loss_d);
      sg.add(r.loss_g);
      sa.add(r.adversarial);
      sr.add(r.reconstruction);
      sl.add(r.synth_l1);
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    rec.loss_d = finite ? sd.value() / finite : nan;
    rec.loss_g = finite ? sg.value() / finite : nan;
    rec.adversarial = finite ? sa.value() / finite : nan;
    rec.reconstruction = finite ? sr.value() / finite : nan;
    rec.synth_l1 = finite ? sl.value() / finite : nan;

    if (cfg.train.validation_slices >= 0 && !validation_set.empty()) {
      const MetricReport report =
          evaluate_generator(trainer.generator(), validation_set, cfg.train.validation_slices, cfg.train.batch_size);
      const auto agg = report.aggregate();
      rec.validation = ValidationSummary{agg.psnr, agg.ssim, agg.nrmse, agg.sample_count};
    }
    const bool last = epoch == cfg.train.epochs;
    if (last || (cfg.train.checkpoint_every > 0 && epoch % cfg.train.checkpoint_every == 0)) {
      const fs::path path = dir / ("epoch_" + std::to_string(epoch) + ".ckpt");
      save_checkpoint(path.string(), trainer.snapshot(epoch));
      rec.checkpoint = path.string();
      manifest.checkpoints.push_back(rec.checkpoint);
    }
    rec.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    emit(detail::to_json(rec));
    manifest.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }

  nlohmann::ordered_json summary = {
      {"seed", cfg.train.seed},
      {"config", manifest.config_text},
      {"epochs", manifest.epochs.size()},
      {"checkpoints", manifest.checkpoints},
      {"final_checkpoint", manifest.checkpoints.empty() ? "" : manifest.checkpoints.back()},
      {"seconds", std::chrono::duration<double>(clock::now() - run_start).count()}};
  nlohmann::ordered_json history = nlohmann::ordered_json::array();
  for (const auto& e : manifest.epochs) history.push_back(detail::to_json(e));
  summary["history"] = std::move(history);
  std::ofstream out(dir / "summary.json", std::ios::trunc);
  out << summary.dump(2) << '\n';
  if (!out) throw IoError("write failed for " + (dir / "summary.json").string());
  return manifest;
}

}  // namespace modsynth
