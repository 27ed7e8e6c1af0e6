#pragma once

// Volume ingestion (NIfTI-1 or 16-bit PNG slice directories), axial slice
// extraction with empty-slice removal, min-max normalization, bilinear
// resizing and subject-level splitting.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "modsynth/image_io.hpp"
#include "modsynth/nifti.hpp"
#include "modsynth/rng.hpp"
#include "modsynth/tensor.hpp"

namespace modsynth {

namespace fs = std::filesystem;

enum class Modality { T1, T1c, T2, FLAIR };

inline constexpr Modality kAllModalities[] = {Modality::T1, Modality::T1c, Modality::T2, Modality::FLAIR};

inline std::string to_string(Modality m) {
  switch (m) {
    case Modality::T1: return "T1";
    case Modality::T1c: return "T1c";
    case Modality::T2: return "T2";
    case Modality::FLAIR: return "FLAIR";
  }
  return "?";
}

/// Case-insensitive; "T1ce" is accepted for T1c.
inline Modality parse_modality(const std::string& s) {
  std::string u;
  for (char c : s) u += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  if (u == "T1") return Modality::T1;
  if (u == "T1C" || u == "T1CE") return Modality::T1c;
  if (u == "T2") return Modality::T2;
  if (u == "FLAIR") return Modality::FLAIR;
  throw ContractError("unknown modality '" + s + "' (expected T1, T1c, T2 or FLAIR)");
}

inline std::vector<Modality> parse_modality_list(const std::string& s) {
  std::vector<Modality> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty()) continue;
    const Modality m = parse_modality(item);
    if (std::find(out.begin(), out.end(), m) != out.end()) throw ContractError("modality listed twice: " + item);
    out.push_back(m);
  }
  if (out.empty()) throw ContractError("empty modality list");
  return out;
}

/// Axial-first voxel grid: voxel (z, y, x) at index (z * height + y) * width + x.
struct ModalityVolume {
  std::string subject_id;
  Modality modality = Modality::T1;
  int depth = 0, height = 0, width = 0;
  std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};  // x, y, z
  std::vector<float> voxels;

  std::size_t slice_size() const { return static_cast<std::size_t>(height) * width; }
  const float* slice(int z) const { return voxels.data() + slice_size() * z; }
  float at(int z, int y, int x) const { return voxels[(static_cast<std::size_t>(z) * height + y) * width + x]; }
  bool same_grid(const ModalityVolume& o) const { return depth == o.depth && height == o.height && width == o.width; }
};

// ---------------------------------------------------------------------------
// Loading and writing
// ---------------------------------------------------------------------------

inline ModalityVolume from_nifti(NiftiVolume n) {
  ModalityVolume v;
  v.width = n.dim[0];
  v.height = n.dim[1];
  v.depth = n.dim[2];
  v.spacing = n.spacing;
  v.voxels = std::move(n.voxels);
  return v;
}

inline NiftiVolume to_nifti(const ModalityVolume& v) {
  NiftiVolume n;
  n.dim = {v.width, v.height, v.depth};
  n.spacing = v.spacing;
  n.voxels = v.voxels;
  return n;
}

/// Loads a NIfTI-1 file or a directory of grayscale PNG slices (sorted by
/// file name, one slice per axial index).
inline ModalityVolume load_volume(const std::string& path) {
  if (!fs::exists(path)) throw IoError("volume not found: " + path);
  if (!fs::is_directory(path)) return from_nifti(read_nifti(path));
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(path)) {
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no PNG slices in " + path);
  ModalityVolume v;
  v.depth = static_cast<int>(files.size());
  for (std::size_t z = 0; z < files.size(); ++z) {
    const GrayImage img = read_png_gray(files[z].string());
    if (z == 0) {
      v.width = img.width;
      v.height = img.height;
      v.voxels.reserve(v.slice_size() * v.depth);
    } else if (img.width != v.width || img.height != v.height) {
      throw IoError("inconsistent slice shape in " + files[z].string() + ": " + std::to_string(img.width) + "x" +
                    std::to_string(img.height) + " vs " + std::to_string(v.width) + "x" + std::to_string(v.height));
    }
    v.voxels.insert(v.voxels.end(), img.pixels.begin(), img.pixels.end());
  }
  return v;
}

/// Writes `<dir>/<index:04>.png` for each axial slice. Voxels are rounded and
/// clamped to the 16-bit range.
inline void write_png_volume(const std::string& dir, const ModalityVolume& v) {
  fs::create_directories(dir);
  for (int z = 0; z < v.depth; ++z) {
    GrayImage img;
    img.width = v.width;
    img.height = v.height;
    img.pixels.resize(v.slice_size());
    const float* s = v.slice(z);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      img.pixels[i] = static_cast<std::uint16_t>(std::clamp(std::lround(s[i]), 0L, 65535L));
    }
    char name[32];
    std::snprintf(name, sizeof name, "%04d.png", z);
    write_png_gray16((fs::path(dir) / name).string(), img);
  }
}

// ---------------------------------------------------------------------------
// Manifest: one subject per line, "<id> <MOD>=<path> ...". Relative paths are
// resolved against the manifest's directory; '#' starts a comment.
// ---------------------------------------------------------------------------

struct SubjectEntry {
  std::string subject_id;
  std::map<Modality, std::string> paths;
};

inline std::vector<SubjectEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);
  const fs::path base = fs::path(path).parent_path();
  std::vector<SubjectEntry> out;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::stringstream ss(line);
    SubjectEntry e;
    if (!(ss >> e.subject_id)) continue;
    std::string field;
    while (ss >> field) {
      const auto eq = field.find('=');
      if (eq == std::string::npos) {
        throw IoError(path + ":" + std::to_string(lineno) + ": expected MOD=path, got '" + field + "'");
      }
      fs::path p = field.substr(eq + 1);
      if (p.is_relative()) p = base / p;
      e.paths[parse_modality(field.substr(0, eq))] = p.lexically_normal().string();
    }
    if (!seen.insert(e.subject_id).second) throw IoError(path + ": duplicate subject " + e.subject_id);
    out.push_back(std::move(e));
  }
  return out;
}

/// Writes entries with paths relative to the manifest's directory when possible.
inline void write_manifest(const std::string& path, const std::vector<SubjectEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot create manifest " + path);
  const fs::path base = fs::path(path).parent_path();
  for (const auto& e : entries) {
    out << e.subject_id;
    for (const auto& [m, p] : e.paths) {
      fs::path rel = fs::path(p).lexically_relative(base.empty() ? fs::path(".") : base);
      out << ' ' << to_string(m) << '=' << (rel.empty() ? p : rel.string());
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path);
}

// ---------------------------------------------------------------------------
// Normalization and resizing
// ---------------------------------------------------------------------------

struct NormParams {
  float min = 0.0f;
  float max = 0.0f;

  /// Maps [min, max] to [-1, 1]; a constant range maps to 0.
  float normalize(float v) const {
    if (max <= min) return 0.0f;
    return static_cast<float>(2.0 * (static_cast<double>(v) - min) / (static_cast<double>(max) - min) - 1.0);
  }

  float denormalize(float v) const {
    if (max <= min) return min;
    return static_cast<float>((static_cast<double>(v) + 1.0) * 0.5 * (static_cast<double>(max) - min) + min);
  }
};

inline NormParams volume_range(const ModalityVolume& v) {
  if (v.voxels.empty()) throw ContractError("empty volume for subject " + v.subject_id);
  const auto [lo, hi] = std::minmax_element(v.voxels.begin(), v.voxels.end());
  return {*lo, *hi};
}

template <typename T>
Tensor<T> denormalize(const Tensor<T>& slice, const NormParams& p) {
  Tensor<T> out = slice;
  for (auto& v : out.vec()) v = static_cast<T>(p.denormalize(static_cast<float>(v)));
  return out;
}

/// Bilinear resize with half-pixel centers and edge clamping.
inline std::vector<float> resize_bilinear(const float* src, int h, int w, int oh, int ow) {
  std::vector<float> out(static_cast<std::size_t>(oh) * ow);
  const double sy = static_cast<double>(h) / oh, sx = static_cast<double>(w) / ow;
  for (int y = 0; y < oh; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, h - 1);
    const double ay = fy - y0;
    for (int x = 0; x < ow; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, w - 1);
      const double ax = fx - x0;
      const double top = (1 - ax) * src[y0 * w + x0] + ax * src[y0 * w + x1];
      const double bottom = (1 - ax) * src[y1 * w + x0] + ax * src[y1 * w + x1];
      out[static_cast<std::size_t>(y) * ow + x] = static_cast<float>((1 - ay) * top + ay * bottom);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Slice extraction
// ---------------------------------------------------------------------------

/// Co-registered axial slices of one subject, each (1, 1, S, S) in [-1, 1].
struct SliceSample {
  std::string subject_id;
  int slice_index = 0;
  std::vector<Tensor<float>> sources;
  Tensor<float> target;
  std::vector<NormParams> source_norm;
  NormParams target_norm;
};

struct SliceOptions {
  int keep_count = 80;
  int out_size = 256;
};

/// Axial indices holding at least one nonzero voxel in any of the volumes.
inline std::vector<int> nonempty_slices(const std::vector<const ModalityVolume*>& volumes) {
  std::vector<int> out;
  const ModalityVolume& first = *volumes.front();
  for (int z = 0; z < first.depth; ++z) {
    bool any = false;
    for (const auto* v : volumes) {
      const float* s = v->slice(z);
      any = any || std::any_of(s, s + v->slice_size(), [](float x) { return x != 0.0f; });
      if (any) break;
    }
    if (any) out.push_back(z);
  }
  return out;
}

/// Drops empty slices, keeps the middle `keep_count` of the rest (centered on
/// the count of remaining slices), normalizes each modality over the whole
/// subject volume and resizes to out_size x out_size.
inline std::vector<SliceSample> extract_slices(const std::map<Modality, ModalityVolume>& volumes,
                                               const std::vector<Modality>& sources, Modality target,
                                               const SliceOptions& opt = {}) {
  if (sources.empty()) throw ContractError("extract_slices: no source modalities");
  if (opt.keep_count < 1 || opt.out_size < 1) throw ContractError("extract_slices: invalid options");
  std::vector<Modality> order = sources;
  order.push_back(target);
  std::vector<const ModalityVolume*> vols;
  for (Modality m : order) {
    auto it = volumes.find(m);
    if (it == volumes.end()) throw ContractError("extract_slices: missing modality " + to_string(m));
    vols.push_back(&it->second);
  }
  const std::string& subject = vols.front()->subject_id;
  for (const auto* v : vols) {
    if (!v->same_grid(*vols.front())) {
      throw ContractError("extract_slices: subject " + subject + " volumes are not co-registered (" +
                          to_string(v->modality) + " grid differs)");
    }
  }
  const std::vector<int> kept_all = nonempty_slices(vols);
  if (static_cast<int>(kept_all.size()) < opt.keep_count) {
    throw ContractError("extract_slices: subject " + subject + " has " + std::to_string(kept_all.size()) +
                        " nonempty slices, fewer than " + std::to_string(opt.keep_count));
  }
  const std::size_t start = (kept_all.size() - static_cast<std::size_t>(opt.keep_count)) / 2;
  std::vector<NormParams> norms;
  for (const auto* v : vols) norms.push_back(volume_range(*v));

  std::vector<SliceSample> out;
  out.reserve(opt.keep_count);
  std::vector<float> normalized;
  for (int k = 0; k < opt.keep_count; ++k) {
    const int z = kept_all[start + k];
    SliceSample s;
    s.subject_id = subject;
    s.slice_index = z;
    for (std::size_t i = 0; i < vols.size(); ++i) {
      const ModalityVolume& v = *vols[i];
      normalized.assign(v.slice(z), v.slice(z) + v.slice_size());
      for (float& x : normalized) x = norms[i].normalize(x);
      Tensor<float> t(1, 1, opt.out_size, opt.out_size);
      t.vec() = resize_bilinear(normalized.data(), v.height, v.width, opt.out_size, opt.out_size);
      if (i + 1 < vols.size()) {
        s.sources.push_back(std::move(t));
        s.source_norm.push_back(norms[i]);
      } else {
        s.target = std::move(t);
        s.target_norm = norms[i];
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Loads every subject of a manifest and concatenates their slices in
/// canonical (subject_id, slice_index) order.
inline std::vector<SliceSample> load_dataset(const std::vector<SubjectEntry>& subjects,
                                             const std::vector<Modality>& sources, Modality target,
                                             const SliceOptions& opt = {}) {
  std::vector<SubjectEntry> sorted = subjects;
  std::sort(sorted.begin(), sorted.end(),
            [](const SubjectEntry& a, const SubjectEntry& b) { return a.subject_id < b.subject_id; });
  std::vector<SliceSample> out;
  std::vector<Modality> needed = sources;
  needed.push_back(target);
  for (const auto& e : sorted) {
    std::map<Modality, ModalityVolume> vols;
    for (Modality m : needed) {
      auto it = e.paths.find(m);
      if (it == e.paths.end()) {
        throw ContractError("subject " + e.subject_id + " has no " + to_string(m) + " volume in the manifest");
      }
      ModalityVolume v = load_volume(it->second);
      v.subject_id = e.subject_id;
      v.modality = m;
      vols.emplace(m, std::move(v));
    }
    auto slices = extract_slices(vols, sources, target, opt);
    std::move(slices.begin(), slices.end(), std::back_inserter(out));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

struct SubjectSplit {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

/// Random subject-level split, deterministic under `seed` and independent of
/// the input order. Both cohorts are returned sorted.
inline SubjectSplit split_subjects(std::vector<std::string> ids, int train_count, std::uint64_t seed) {
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw ContractError("split_subjects: duplicate ids");
  if (train_count < 0 || train_count > static_cast<int>(ids.size())) {
    throw ContractError("split_subjects: train_count " + std::to_string(train_count) + " out of range for " +
                        std::to_string(ids.size()) + " subjects");
  }
  Rng rng(seed);
  rng.shuffle(ids.begin(), ids.end());
  SubjectSplit s;
  s.train.assign(ids.begin(), ids.begin() + train_count);
  s.test.assign(ids.begin() + train_count, ids.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

inline std::vector<SliceSample> select_subjects(const std::vector<SliceSample>& samples,
                                                const std::vector<std::string>& ids) {
  const std::set<std::string> keep(ids.begin(), ids.end());
  std::vector<SliceSample> out;
  for (const auto& s : samples) {
    if (keep.count(s.subject_id)) out.push_back(s);
  }
  return out;
}

}  // namespace modsynth
