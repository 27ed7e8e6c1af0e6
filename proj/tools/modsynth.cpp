// modsynth: phantom generation, training, synthesis, evaluation and ablation
// sweeps from one command line.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "modsynth/ablation.hpp"
#include "modsynth/config.hpp"
#include "modsynth/phantom.hpp"
#include "modsynth/training.hpp"

namespace fs = std::filesystem;
using namespace modsynth;

namespace {

constexpr int kUsageError = 2;

/// Raised for bad user input discovered after flag parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

std::string epoch_line(const EpochRecord& e, int epochs) {
  std::string s = "epoch " + std::to_string(e.epoch) + "/" + std::to_string(epochs) + "  lr " + fixed(e.lr, 6) +
                  "  loss_d " + fixed(e.loss_d, 4) + "  loss_g " + fixed(e.loss_g, 4) + "  l1 " +
                  fixed(e.synth_l1, 4) + "  steps " + std::to_string(e.steps);
  if (e.skipped) s += "  skipped " + std::to_string(e.skipped);
  if (e.validation) {
    s += "  val psnr " + format_mean_std(e.validation->psnr, 2) + "  ssim " + format_mean_std(e.validation->ssim, 3);
  }
  s += "  (" + fixed(e.seconds, 1) + " s)";
  return s;
}

// ---------------------------------------------------------------------------
// phantom
// ---------------------------------------------------------------------------

struct PhantomArgs {
  std::string out;
  int subjects = 12;
  std::optional<std::uint64_t> seed;
  int depth = PhantomSpec{}.depth, height = PhantomSpec{}.height, width = PhantomSpec{}.width;
  std::string format = "nii.gz";
};

int run_phantom(const PhantomArgs& a) {
  PhantomSpec spec;
  spec.seed = a.seed ? *a.seed : environment_seed();
  spec.subject_count = a.subjects;
  spec.depth = a.depth;
  spec.height = a.height;
  spec.width = a.width;
  const std::string manifest = write_phantom_dataset(spec, a.out, parse_volume_format(a.format));
  std::cout << "wrote " << spec.subject_count << " phantom subjects (seed " << spec.seed << ")\n"
            << "manifest: " << manifest << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& a) {
  RunConfig cfg = load_config(a.config);
  if (!a.out.empty()) cfg.output_dir = a.out;
  if (a.seed) cfg.train.seed = *a.seed;
  if (cfg.data.manifest.empty()) throw UsageError(a.config + ": no manifest set");
  std::cout << "# resolved configuration\n" << config_text(cfg) << std::flush;
  const ManifestData data(cfg.data.manifest);
  const SplitData split = data(cfg);
  std::cout << "train slices " << split.train.size() << ", held-out slices " << split.test.size() << "\n";
  const RunManifest m = train(cfg, split.train, split.test, [&](const EpochRecord& e) {
    std::cout << epoch_line(e, cfg.train.epochs) << std::endl;
  });
  std::cout << "final checkpoint: " << m.checkpoints.back() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string checkpoint;
  std::vector<std::string> inputs;
  std::string out;
  std::string name = "synthesized";
  bool emit_pseudo = false;
};

/// Orders the input paths by the checkpoint's source modalities. Inputs are
/// either all `MOD=path` or all bare paths given in source order.
std::vector<std::string> order_inputs(const std::vector<std::string>& inputs, const std::vector<Modality>& sources) {
  const bool tagged = std::any_of(inputs.begin(), inputs.end(),
                                  [](const std::string& s) { return s.find('=') != std::string::npos; });
  const std::string expected = detail::join_modalities(sources);
  if (!tagged) {
    if (inputs.size() != sources.size()) {
      throw UsageError("checkpoint expects " + std::to_string(sources.size()) + " inputs (" + expected + "), got " +
                       std::to_string(inputs.size()));
    }
    return inputs;
  }
  std::map<Modality, std::string> by_mod;
  for (const auto& s : inputs) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw UsageError("mix of MOD=path and bare inputs: " + s);
    const Modality m = parse_modality(s.substr(0, eq));
    if (!by_mod.emplace(m, s.substr(eq + 1)).second) throw UsageError("modality " + to_string(m) + " given twice");
  }
  std::vector<std::string> ordered;
  for (Modality m : sources) {
    auto it = by_mod.find(m);
    if (it == by_mod.end()) throw UsageError("checkpoint expects modalities " + expected + "; missing " + to_string(m));
    ordered.push_back(it->second);
    by_mod.erase(it);
  }
  if (!by_mod.empty()) {
    throw UsageError("checkpoint expects modalities " + expected + "; unexpected " + to_string(by_mod.begin()->first));
  }
  return ordered;
}

/// Reads a grayscale PNG slice, min-max normalizes it to [-1, 1] and resizes
/// it to size x size.
Tensor<float> load_input_slice(const std::string& path, int size) {
  const GrayImage img = read_png_gray(path);
  std::vector<float> raw(img.pixels.begin(), img.pixels.end());
  const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
  const NormParams norm{*lo, *hi};
  for (auto& v : raw) v = norm.normalize(v);
  const std::vector<float> resized = resize_bilinear(raw.data(), img.height, img.width, size, size);
  Tensor<float> t(1, 1, size, size);
  std::copy(resized.begin(), resized.end(), t.data());
  return t;
}

/// Maps [-1, 1] to the full 16-bit range, clamping outliers.
void write_unit_png(const std::string& path, const float* data, int size) {
  GrayImage img;
  img.width = img.height = size;
  img.pixels.resize(static_cast<std::size_t>(size) * size);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const double v = std::clamp((static_cast<double>(data[i]) + 1.0) * 0.5, 0.0, 1.0);
    img.pixels[i] = static_cast<std::uint16_t>(std::lround(v * 65535.0));
  }
  write_png_gray16(path, img);
}

int run_synth(const SynthArgs& a) {
  auto [cfg, g] = load_generator(a.checkpoint);
  const std::vector<std::string> paths = order_inputs(a.inputs, cfg.data.sources);
  std::vector<Tensor<float>> slices;
  for (const auto& p : paths) slices.push_back(load_input_slice(p, cfg.generator.image_size));
  NoGradGuard guard;
  const auto out = g.forward(Var<float>(stack_modalities(slices)));
  fs::create_directories(a.out);
  const int s = cfg.generator.image_size;
  const std::string synth_path = (fs::path(a.out) / (a.name + ".png")).string();
  write_unit_png(synth_path, out.synthesized.value().data(), s);
  std::cout << "synthesized " << to_string(cfg.data.target) << ": " << synth_path << "\n";
  if (a.emit_pseudo) {
    const std::string pseudo_path = (fs::path(a.out) / (a.name + "_pseudo.png")).string();
    write_unit_png(pseudo_path, out.pseudo_target.value().data(), s);
    std::cout << "pseudo-target: " << pseudo_path << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string pred_dir;
  std::string gt_dir;
  std::string csv;
};

std::set<std::string> png_names(const std::string& dir) {
  std::set<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") names.insert(e.path().filename().string());
  }
  return names;
}

Tensor<double> unit_slice(const GrayImage& img) {
  Tensor<double> t(1, 1, img.height, img.width);
  const double scale = 1.0 / img.max_value();
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = img.pixels[i] * scale;
  return t;
}

int run_eval(const EvalArgs& a) {
  const std::set<std::string> pred = png_names(a.pred_dir), gt = png_names(a.gt_dir);
  std::vector<std::string> missing;
  for (const auto& n : gt)
    if (!pred.count(n)) missing.push_back(n + " (no prediction)");
  for (const auto& n : pred)
    if (!gt.count(n)) missing.push_back(n + " (no ground truth)");
  if (!missing.empty()) {
    std::string msg = "unpaired files:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw UsageError(msg);
  }
  if (gt.empty()) throw UsageError("no PNG files in " + a.gt_dir);
  MetricReport report;
  int index = 0, skipped = 0;
  for (const auto& n : gt) {
    const GrayImage real = read_png_gray((fs::path(a.gt_dir) / n).string());
    const GrayImage fake = read_png_gray((fs::path(a.pred_dir) / n).string());
    if (real.width != fake.width || real.height != fake.height) {
      throw UsageError(n + ": prediction is " + std::to_string(fake.width) + "x" + std::to_string(fake.height) +
                       ", ground truth is " + std::to_string(real.width) + "x" + std::to_string(real.height));
    }
    const int slice = index++;
    if (std::all_of(real.pixels.begin(), real.pixels.end(), [](std::uint16_t v) { return v == 0; })) {
      ++skipped;
      continue;
    }
    report.slices.push_back(evaluate_slice(fs::path(n).stem().string(), slice, unit_slice(real), unit_slice(fake)));
  }
  if (report.slices.empty()) throw UsageError("every ground-truth slice is empty");
  if (const auto parent = fs::path(a.csv).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream csv(a.csv, std::ios::trunc);
  write_metric_csv(csv, report);
  csv.flush();
  if (!csv) throw IoError("write failed for " + a.csv);
  const auto agg = report.aggregate();
  std::cout << "slices " << agg.sample_count;
  if (skipped) std::cout << " (" << skipped << " empty ground-truth slices skipped)";
  if (agg.infinite_psnr) std::cout << " (" << agg.infinite_psnr << " exact matches left out of PSNR)";
  std::cout << "\nPSNR  " << format_mean_std(agg.psnr) << "\nSSIM  " << format_mean_std(agg.ssim) << "\nNRMSE "
            << format_mean_std(agg.nrmse) << "\ncsv: " << a.csv << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblateArgs {
  std::string matrix_config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int run_ablate(const AblateArgs& a) {
  MatrixSpec spec = load_matrix_config(a.matrix_config);
  if (!a.out.empty()) spec.output_root = a.out;
  if (a.seed) spec.base.train.seed = *a.seed;
  const ExperimentMatrix m = build_matrix(spec);
  if (spec.base.data.manifest.empty()) throw UsageError(a.matrix_config + ": no manifest set");
  const ManifestData data(spec.base.data.manifest);
  std::cout << "matrix " << m.name << ": " << m.runs.size() << " runs\n" << std::flush;
  const MatrixResult r = run_matrix(m, data, [](const AblationRun& run, const EpochRecord& e) {
    std::cout << "[" << run.label << "] " << epoch_line(e, run.config.train.epochs) << std::endl;
  });
  std::cout << "\n" << r.table_markdown << "\nplot: " << r.plot_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  const std::string provenance =
      "Defaults marked 'published' follow the published training protocol and experiment setup; the rest are "
      "choices of this implementation.";
  CLI::App app{"Multi-modal MRI synthesis: phantom data, training, inference, evaluation and ablations."};
  app.require_subcommand(1);
  app.footer("Seeds fall back to the MODSYNTH_SEED environment variable, then 0.");

  PhantomArgs pa;
  auto* phantom = app.add_subcommand("phantom", "Write a synthetic multi-modality dataset and its manifest.");
  phantom->add_option("--out", pa.out, "Output directory")->required();
  phantom->add_option("--subjects", pa.subjects, "Number of subjects [implementation choice]")
      ->check(CLI::Range(1, 1000000))
      ->capture_default_str();
  phantom->add_option("--seed", pa.seed, "Random seed [default: MODSYNTH_SEED, then 0]");
  phantom->add_option("--depth", pa.depth, "Axial slices per volume [implementation choice]")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  phantom->add_option("--height", pa.height, "Rows per slice [implementation choice]")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  phantom->add_option("--width", pa.width, "Columns per slice [implementation choice]")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  phantom->add_option("--format", pa.format, "Volume format [implementation choice]")
      ->check(CLI::IsMember({"nii", "nii.gz", "png"}))
      ->capture_default_str();

  TrainArgs ta;
  auto* trainc = app.add_subcommand("train", "Train a generator and discriminator from a config file.");
  trainc->add_option("--config", ta.config, "Run configuration (key = value lines)")
      ->required()
      ->check(CLI::ExistingFile);
  trainc->add_option("--out", ta.out, "Override the configured output_dir");
  trainc->add_option("--seed", ta.seed, "Override the configured seed");
  trainc->footer("Configuration keys:\n" + config_reference() + provenance);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Synthesize the target modality for one slice.");
  synth->add_option("--checkpoint", sa.checkpoint, "Checkpoint written by train")
      ->required()
      ->check(CLI::ExistingFile);
  synth->add_option("--inputs", sa.inputs,
                    "Source slices as PNG, either MOD=path or bare paths in the checkpoint's modality order")
      ->required();
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--name", sa.name, "Output file stem")->capture_default_str();
  synth->add_flag("--emit-pseudo", sa.emit_pseudo, "Also write the fused pseudo-target as <name>_pseudo.png");
  synth->footer(
      "Each input is min-max normalized to [-1, 1] and resized to the checkpoint's image size. Outputs are 16-bit "
      "PNGs with [-1, 1] mapped to 0..65535.");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Score predicted slices against ground truth.");
  eval->add_option("--pred-dir", ea.pred_dir, "Directory of predicted PNG slices")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval->add_option("--gt-dir", ea.gt_dir, "Directory of ground-truth PNG slices")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval->add_option("--csv", ea.csv, "Per-slice metric CSV to write")->required();
  eval->footer(
      "Files pair by name. Intensities are scaled to [0, 1] by the PNG bit depth; all-zero ground-truth slices are "
      "skipped.");

  AblateArgs aa;
  auto* ablate = app.add_subcommand("ablate", "Run a block-size or modality sweep and tabulate the results.");
  ablate->add_option("--matrix-config", aa.matrix_config,
                     "Matrix file: name, sweep (block_size|modality), sizes, output_root, plus run keys")
      ->required()
      ->check(CLI::ExistingFile);
  ablate->add_option("--out", aa.out, "Override the configured output_root");
  ablate->add_option("--seed", aa.seed, "Override the configured seed");
  ablate->footer(
      "Block-size sweeps default to image sizes 1, 1/2, 1/4, 1/8 and 1/16 of the image side, following the "
      "published block-size experiment.\nRun keys:\n" +
      config_reference() + provenance);

  bool reference = false;
  auto* configc = app.add_subcommand("config", "Print the default configuration.");
  configc->add_flag("--reference", reference, "Print the key reference with defaults and provenance instead");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*phantom) return run_phantom(pa);
    if (*trainc) return run_train(ta);
    if (*synth) return run_synth(sa);
    if (*eval) return run_eval(ea);
    if (*ablate) return run_ablate(aa);
    if (*configc) {
      if (reference) {
        std::cout << config_reference() << provenance << "\n";
      } else {
        std::cout << config_text(RunConfig{});
      }
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
