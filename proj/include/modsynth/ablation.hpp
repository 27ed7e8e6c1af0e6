#pragma once

// Experiment matrices: runs that differ in one swept variable, trained and
// scored on the same subject split, summarized as Markdown/CSV tables and a
// bar plot under <root>/<matrix>/<run>/.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "modsynth/config.hpp"
#include "modsynth/data_pipeline.hpp"
#include "modsynth/metrics.hpp"
#include "modsynth/plot.hpp"
#include "modsynth/training.hpp"

namespace modsynth {

struct AblationRun {
  std::string name;   // directory name
  std::string label;  // table row label
  RunConfig config;
};

struct ExperimentMatrix {
  std::string name;
  std::vector<AblationRun> runs;
  std::string output_root = "experiments";
  /// Context row values (label -> "mean ± std" text) shown next to the results.
  std::map<std::string, std::string> reference;
  std::string reference_note;
};

// ---------------------------------------------------------------------------
// Matrix builders
// ---------------------------------------------------------------------------

/// {256, 128, 64, 32, 16} scaled by image_size / 256.
inline std::vector<int> default_block_sizes(int image_size) {
  std::vector<int> out;
  for (int s : {256, 128, 64, 32, 16}) out.push_back(std::max(1, s * image_size / 256));
  return out;
}

inline std::string block_size_label(int size, int image_size) {
  std::string l = std::to_string(size) + "×" + std::to_string(size);
  if (size == image_size) l += " (no chunking)";
  return l;
}

/// One run per LAF block size; everything else is taken from `base`. Sizes
/// that do not tile the image are rejected before anything is trained.
inline ExperimentMatrix block_size_sweep(const RunConfig& base, std::vector<int> sizes = {},
                                         const std::string& name = "block_size") {
  const int image = base.generator.image_size;
  if (sizes.empty()) sizes = default_block_sizes(image);
  std::set<int> seen;
  for (int s : sizes) {
    if (s < 1 || image % s != 0) {
      throw ContractError("block size " + std::to_string(s) + " does not divide image_size " + std::to_string(image));
    }
    if (!seen.insert(s).second) throw ContractError("block size " + std::to_string(s) + " listed twice");
  }
  ExperimentMatrix m;
  m.name = name;
  for (int s : sizes) {
    AblationRun r;
    r.name = "block_" + std::to_string(s);
    r.label = block_size_label(s, image);
    r.config = base;
    r.config.generator.laf_block_size = s;
    r.config.validate();
    m.runs.push_back(std::move(r));
  }
  return m;
}

inline std::string modality_label(const std::vector<Modality>& sources, Modality target) {
  std::string l;
  for (std::size_t i = 0; i < sources.size(); ++i) l += (i ? "+" : "") + to_string(sources[i]);
  return l + "→" + to_string(target);
}

/// Full-scale reference PSNR for the modality-count rows (BRATS2015, 200 epochs).
inline std::map<std::string, std::string> modality_sweep_reference() {
  return {{"T1→FLAIR", "23.7 ± 2.16"}, {"T1+T2→FLAIR", "24.8 ± 1.85"}, {"T1+T2+T1c→FLAIR", "24.93 ± 1.96"}};
}

/// Incremental source sets, each adding one modality to its predecessor.
inline ExperimentMatrix modality_sweep(const RunConfig& base,
                                       const std::vector<std::vector<Modality>>& inputs =
                                           {{Modality::T1}, {Modality::T1, Modality::T2},
                                            {Modality::T1, Modality::T2, Modality::T1c}},
                                       Modality target = Modality::FLAIR, const std::string& name = "modality") {
  if (inputs.empty()) throw ContractError("modality sweep needs at least one input set");
  ExperimentMatrix m;
  m.name = name;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (i > 0) {
      const auto& prev = inputs[i - 1];
      const auto& cur = inputs[i];
      if (cur.size() != prev.size() + 1 || !std::equal(prev.begin(), prev.end(), cur.begin())) {
        throw ContractError("modality sweep inputs must each add exactly one modality to the previous set");
      }
    }
    AblationRun r;
    r.label = modality_label(inputs[i], target);
    r.name = "inputs_" + std::to_string(inputs[i].size());
    r.config = base;
    r.config.data.sources = inputs[i];
    r.config.data.target = target;
    r.config.generator.modality_count = static_cast<int>(inputs[i].size());
    r.config.validate();
    m.runs.push_back(std::move(r));
  }
  m.reference = modality_sweep_reference();
  m.reference_note = "full-scale reference PSNR (BRATS2015, 200 epochs); not reproduced at desk scale";
  return m;
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

struct SplitData {
  std::vector<SliceSample> train;
  std::vector<SliceSample> test;
};

using DataProvider = std::function<SplitData(const RunConfig&)>;

/// Loads the manifest once and serves every run from the same subject split
/// (seeded by the run seed), extracting the run's source and target slices.
class ManifestData {
 public:
  explicit ManifestData(const std::string& manifest) : entries_(read_manifest(manifest)) {
    if (entries_.empty()) throw ContractError("manifest " + manifest + " lists no subjects");
  }
  explicit ManifestData(std::vector<SubjectEntry> entries) : entries_(std::move(entries)) {}

  const std::vector<SubjectEntry>& entries() const { return entries_; }

  /// Throws if any subject lacks one of the listed modalities.
  void require(const std::vector<Modality>& needed) const {
    for (const auto& e : entries_)
      for (Modality m : needed)
        if (!e.paths.count(m)) throw ContractError("subject " + e.subject_id + " has no " + to_string(m) + " volume");
  }

  SplitData operator()(const RunConfig& cfg) const {
    std::vector<Modality> needed = cfg.data.sources;
    needed.push_back(cfg.data.target);
    require(needed);
    std::vector<std::string> ids;
    for (const auto& e : entries_) ids.push_back(e.subject_id);
    if (cfg.data.train_subjects >= static_cast<int>(ids.size())) {
      throw ContractError("train_subjects = " + std::to_string(cfg.data.train_subjects) + " leaves no held-out subject among " +
                          std::to_string(ids.size()));
    }
    const SubjectSplit split = split_subjects(ids, cfg.data.train_subjects, cfg.train.seed);
    const SliceOptions opt{cfg.data.keep_slices, cfg.generator.image_size};
    const std::string key = detail::join_modalities(needed) + "/" + std::to_string(opt.keep_count) + "/" +
                            std::to_string(opt.out_size);
    auto it = cache_.find(key);
    if (it == cache_.end()) {
      it = cache_.emplace(key, load_dataset(entries_, cfg.data.sources, cfg.data.target, opt)).first;
    }
    return {select_subjects(it->second, split.train), select_subjects(it->second, split.test)};
  }

 private:
  std::vector<SubjectEntry> entries_;
  mutable std::map<std::string, std::vector<SliceSample>> cache_;
};

// ---------------------------------------------------------------------------
// Running and reporting
// ---------------------------------------------------------------------------

struct RunOutcome {
  AblationRun run;
  MetricReport report;
  MetricReport::Aggregate aggregate;
  std::string directory;
};

struct MatrixResult {
  std::string name;
  std::string directory;
  std::vector<RunOutcome> runs;
  std::string table_markdown;
  std::string table_csv;
  std::string plot_path;
};

/// Describes the PSNR sequence across runs in order, e.g. "rise then decline".
inline std::string describe_trend(const std::vector<double>& values) {
  if (values.size() < 2) return "single run";
  std::string out;
  char prev = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    const char c = values[i] > values[i - 1] ? 'r' : (values[i] < values[i - 1] ? 'd' : 'f');
    if (c == prev) continue;
    if (!out.empty()) out += " then ";
    out += c == 'r' ? "rise" : (c == 'd' ? "decline" : "flat");
    prev = c;
  }
  return out;
}

inline std::string results_markdown(const ExperimentMatrix& m, const std::vector<RunOutcome>& runs) {
  std::ostringstream os;
  os << "# " << m.name << "\n\n";
  const bool has_ref = !m.reference.empty();
  os << "| run | slices | PSNR (dB) | SSIM | NRMSE |" << (has_ref ? " reference PSNR |" : "") << "\n";
  os << "|---|---|---|---|---|" << (has_ref ? "---|" : "") << "\n";
  for (const auto& r : runs) {
    os << "| " << r.run.label << " | " << r.aggregate.sample_count << " | " << format_mean_std(r.aggregate.psnr)
       << " | " << format_mean_std(r.aggregate.ssim) << " | " << format_mean_std(r.aggregate.nrmse) << " |";
    if (has_ref) {
      auto it = m.reference.find(r.run.label);
      os << ' ' << (it == m.reference.end() ? "-" : it->second) << " |";
    }
    os << "\n";
  }
  if (has_ref) os << "\nReference column: " << m.reference_note << ".\n";
  std::vector<double> psnr;
  for (const auto& r : runs) psnr.push_back(r.aggregate.psnr.mean);
  os << "\nObserved PSNR trend in run order: " << describe_trend(psnr) << " (reported, not asserted).\n";
  return os.str();
}

inline std::string results_csv(const ExperimentMatrix& m, const std::vector<RunOutcome>& runs) {
  std::ostringstream os;
  os << "run,label,slices,psnr_mean,psnr_std,ssim_mean,ssim_std,nrmse_mean,nrmse_std";
  if (!m.reference.empty()) os << ",reference_psnr";
  os << "\n" << std::setprecision(10);
  for (const auto& r : runs) {
    const auto& a = r.aggregate;
    os << r.run.name << ',' << r.run.label << ',' << a.sample_count << ',' << a.psnr.mean << ',' << a.psnr.std << ','
       << a.ssim.mean << ',' << a.ssim.std << ',' << a.nrmse.mean << ',' << a.nrmse.std;
    if (!m.reference.empty()) {
      auto it = m.reference.find(r.run.label);
      os << ',' << (it == m.reference.end() ? "" : it->second);
    }
    os << "\n";
  }
  return os.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

using RunCallback = std::function<void(const AblationRun&, const EpochRecord&)>;

/// Trains and scores every run, then writes results.md, results.csv and
/// results.png under <output_root>/<name>/.
inline MatrixResult run_matrix(const ExperimentMatrix& m, const DataProvider& data, const RunCallback& progress = {}) {
  namespace fs = std::filesystem;
  if (m.runs.empty()) throw ContractError("experiment matrix " + m.name + " has no runs");
  std::set<std::string> names;
  for (const auto& r : m.runs) {
    r.config.validate();
    if (!names.insert(r.name).second) throw ContractError("duplicate run name " + r.name);
  }
  MatrixResult result;
  result.name = m.name;
  const fs::path dir = fs::path(m.output_root) / m.name;
  result.directory = dir.string();
  fs::create_directories(dir);
  for (const auto& run : m.runs) {
    AblationRun r = run;
    r.config.output_dir = (dir / r.name).string();
    const SplitData split = data(r.config);
    if (split.train.empty() || split.test.empty()) throw ContractError("run " + r.name + ": empty train or test set");
    train(r.config, split.train, split.test, [&](const EpochRecord& e) {
      if (progress) progress(r, e);
    });
    // Score the final weights on the whole held-out cohort.
    const fs::path last = fs::path(r.config.output_dir) / ("epoch_" + std::to_string(r.config.train.epochs) + ".ckpt");
    const Checkpoint ck = load_checkpoint(last.string());
    Generator<float> g(r.config.generator, r.config.train.seed);
    restore_generator(ck, g);
    RunOutcome o;
    o.report = evaluate_generator(g, split.test, 0, r.config.train.batch_size);
    o.aggregate = o.report.aggregate();
    o.directory = r.config.output_dir;
    std::ofstream csv(fs::path(o.directory) / "metrics.csv");
    write_metric_csv(csv, o.report);
    o.run = std::move(r);
    result.runs.push_back(std::move(o));
  }
  result.table_markdown = results_markdown(m, result.runs);
  result.table_csv = results_csv(m, result.runs);
  write_text_file(dir / "results.md", result.table_markdown);
  write_text_file(dir / "results.csv", result.table_csv);

  std::vector<std::string> labels;
  BarSeries psnr{"PSNR (dB)", {}, {}, 2}, ssim{"SSIM", {}, {}, 3}, nrmse{"NRMSE", {}, {}, 3};
  for (const auto& o : result.runs) {
    labels.push_back(o.run.label);
    psnr.mean.push_back(o.aggregate.psnr.mean);
    psnr.std.push_back(o.aggregate.psnr.std);
    ssim.mean.push_back(o.aggregate.ssim.mean);
    ssim.std.push_back(o.aggregate.ssim.std);
    nrmse.mean.push_back(o.aggregate.nrmse.mean);
    nrmse.std.push_back(o.aggregate.nrmse.std);
  }
  result.plot_path = (dir / "results.png").string();
  write_png_rgb(result.plot_path, render_bar_chart(labels, {psnr, ssim, nrmse}));
  return result;
}

// ---------------------------------------------------------------------------
// Significance
// ---------------------------------------------------------------------------

struct MetricComparison {
  std::string metric;
  double mean_a = 0.0, mean_b = 0.0;
  TTestResult test;
  std::size_t pairs = 0;
  bool significant = false;  // p < 0.05
};

struct SignificanceSummary {
  std::vector<MetricComparison> metrics;
  std::string markdown;
};

/// Paired t-test per metric between two reports over the same slices.
/// Slices with an infinite PSNR in either report are left out of the PSNR test.
inline SignificanceSummary compare_methods(const MetricReport& a, const MetricReport& b, const std::string& name_a = "A",
                                           const std::string& name_b = "B", double alpha = 0.05) {
  if (a.slices.size() != b.slices.size()) {
    throw ContractError("compare_methods: reports cover " + std::to_string(a.slices.size()) + " and " +
                        std::to_string(b.slices.size()) + " slices");
  }
  for (std::size_t i = 0; i < a.slices.size(); ++i) {
    if (a.slices[i].subject_id != b.slices[i].subject_id || a.slices[i].slice_index != b.slices[i].slice_index) {
      throw ContractError("compare_methods: slice " + std::to_string(i) + " differs (" + a.slices[i].subject_id + "/" +
                          std::to_string(a.slices[i].slice_index) + " vs " + b.slices[i].subject_id + "/" +
                          std::to_string(b.slices[i].slice_index) + ")");
    }
  }
  SignificanceSummary s;
  const std::pair<const char*, double SliceMetrics::*> fields[] = {
      {"PSNR", &SliceMetrics::psnr}, {"SSIM", &SliceMetrics::ssim}, {"NRMSE", &SliceMetrics::nrmse}};
  for (const auto& [metric, field] : fields) {
    std::vector<double> xa, xb;
    for (std::size_t i = 0; i < a.slices.size(); ++i) {
      const double va = a.slices[i].*field, vb = b.slices[i].*field;
      if (!std::isfinite(va) || !std::isfinite(vb)) continue;
      xa.push_back(va);
      xb.push_back(vb);
    }
    MetricComparison c;
    c.metric = metric;
    c.pairs = xa.size();
    c.mean_a = mean_std(xa).mean;
    c.mean_b = mean_std(xb).mean;
    c.test = paired_t_test(xa, xb);
    c.significant = c.test.p < alpha;
    s.metrics.push_back(c);
  }
  std::ostringstream os;
  os << "| metric | " << name_a << " | " << name_b << " | t | p |\n|---|---|---|---|---|\n";
  for (const auto& c : s.metrics) {
    // The asterisk goes on the better mean (lower for NRMSE).
    const bool lower_better = c.metric == "NRMSE";
    const bool a_better = lower_better ? c.mean_a < c.mean_b : c.mean_a > c.mean_b;
    auto cell = [&](double v, bool better) {
      std::ostringstream x;
      x << std::fixed << std::setprecision(4) << v << (c.significant && better ? "*" : "");
      return x.str();
    };
    os << "| " << c.metric << " | " << cell(c.mean_a, a_better) << " | " << cell(c.mean_b, !a_better && c.mean_a != c.mean_b)
       << " | " << std::setprecision(4) << c.test.t << " | " << std::setprecision(4) << c.test.p << " |\n";
  }
  os << "\n* p < " << alpha << " (paired t-test).\n";
  s.markdown = os.str();
  return s;
}

// ---------------------------------------------------------------------------
// Matrix files: matrix keys plus any run-config keys for the shared base.
// ---------------------------------------------------------------------------

struct MatrixSpec {
  std::string name;
  std::string sweep = "block_size";  // block_size or modality
  std::vector<int> sizes;
  std::string output_root = "experiments";
  RunConfig base;
};

inline MatrixSpec parse_matrix_config(const std::string& text, const std::string& origin = "matrix") {
  MatrixSpec spec;
  std::string forwarded;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string body = line;
    if (auto hash = body.find('#'); hash != std::string::npos) body.erase(hash);
    const auto eq = body.find('=');
    const std::string key = eq == std::string::npos ? "" : detail::trim(body.substr(0, eq));
    const std::string value = eq == std::string::npos ? "" : detail::trim(body.substr(eq + 1));
    const std::string where = origin + ":" + std::to_string(lineno);
    if (key == "name") {
      spec.name = value;
    } else if (key == "sweep") {
      if (value != "block_size" && value != "modality") {
        throw ConfigError(where + ": sweep must be block_size or modality, got '" + value + "'");
      }
      spec.sweep = value;
    } else if (key == "sizes") {
      std::stringstream ss(value);
      for (std::string item; std::getline(ss, item, ',');) {
        spec.sizes.push_back(detail::parse_number<int>("sizes", detail::trim(item)));
      }
    } else if (key == "output_root") {
      spec.output_root = value;
    } else {
      forwarded += line;  // keep line numbering for run-config errors
    }
    forwarded += '\n';
  }
  spec.base = parse_config(forwarded, origin);
  if (spec.name.empty()) spec.name = spec.sweep;
  if (spec.sweep == "modality" && !spec.sizes.empty()) throw ConfigError(origin + ": sizes only applies to block_size sweeps");
  return spec;
}

inline MatrixSpec load_matrix_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open matrix config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_matrix_config(ss.str(), path);
}

/// Builds the matrix a spec describes; invalid block sizes fail here.
inline ExperimentMatrix build_matrix(const MatrixSpec& spec) {
  ExperimentMatrix m;
  if (spec.sweep == "modality") {
    m = modality_sweep(spec.base,
                       {{Modality::T1}, {Modality::T1, Modality::T2}, {Modality::T1, Modality::T2, Modality::T1c}},
                       spec.base.data.target, spec.name);
  } else {
    m = block_size_sweep(spec.base, spec.sizes, spec.name);
  }
  m.output_root = spec.output_root;
  return m;
}

}  // namespace modsynth
