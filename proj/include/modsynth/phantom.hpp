#pragma once

// Procedural multi-modal phantom. One label field per subject (background,
// head ellipsoid, random inner ellipsoids) is rendered through a per-modality
// contrast map, plus bounded modality-specific noise inside the head.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "modsynth/data_pipeline.hpp"
#include "modsynth/rng.hpp"

namespace modsynth {

inline constexpr int kPhantomLabels = 5;  // 0 background, 1 head, 2-4 inner regions

using ContrastMap = std::array<float, kPhantomLabels>;

struct PhantomSpec {
  std::uint64_t seed = 0;
  int subject_count = 12;
  int depth = 32, height = 96, width = 96;
  int shape_count = 6;
  /// Noise inside the head is uniform in [-texture_amplitude, texture_amplitude].
  float texture_amplitude = 20.0f;
  std::map<Modality, ContrastMap> contrast = {
      {Modality::T1, {0.0f, 600.0f, 900.0f, 300.0f, 450.0f}},
      {Modality::T1c, {0.0f, 620.0f, 950.0f, 330.0f, 800.0f}},
      {Modality::T2, {0.0f, 400.0f, 250.0f, 900.0f, 650.0f}},
      {Modality::FLAIR, {0.0f, 450.0f, 200.0f, 700.0f, 950.0f}},
  };

  void validate() const {
    if (subject_count < 1) throw ContractError("phantom subject_count must be positive");
    if (depth < 1 || height < 1 || width < 1) throw ContractError("phantom extents must be positive");
    if (shape_count < 1) throw ContractError("phantom shape_count must be positive");
    if (!(texture_amplitude >= 0.0f)) throw ContractError("phantom texture_amplitude must be nonnegative");
    for (Modality m : kAllModalities) {
      if (!contrast.count(m)) throw ContractError("phantom contrast map missing for " + to_string(m));
      if (contrast.at(m)[0] != 0.0f) throw ContractError("phantom background contrast must be 0");
    }
  }
};

struct PhantomSubject {
  std::string subject_id;
  std::vector<std::uint8_t> labels;  // same layout as ModalityVolume::voxels
  std::map<Modality, ModalityVolume> volumes;
};

inline std::string phantom_subject_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "phantom_%03d", index);
  return buf;
}

namespace detail {

struct Ellipsoid {
  double cz, cy, cx;  // center, voxel units
  double rz, ry, rx;  // semi-axes
  std::uint8_t label;

  bool contains(double z, double y, double x) const {
    const double a = (z - cz) / rz, b = (y - cy) / ry, c = (x - cx) / rx;
    return a * a + b * b + c * c <= 1.0;
  }
};

}  // namespace detail

/// Label field shared by all of the subject's modalities.
inline std::vector<std::uint8_t> phantom_labels(const PhantomSpec& spec, int index) {
  spec.validate();
  Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(index)));
  const double D = spec.depth, H = spec.height, W = spec.width;
  // The head spans ~84% of the axial extent, so ~16% of slices are empty.
  detail::Ellipsoid head{(D - 1) / 2.0 + rng.uniform(-0.01, 0.01) * D,
                         (H - 1) / 2.0 + rng.uniform(-0.03, 0.03) * H,
                         (W - 1) / 2.0 + rng.uniform(-0.03, 0.03) * W,
                         0.42 * D,
                         rng.uniform(0.36, 0.42) * H,
                         rng.uniform(0.30, 0.38) * W,
                         1};
  std::vector<detail::Ellipsoid> shapes;
  for (int s = 0; s < spec.shape_count; ++s) {
    detail::Ellipsoid e;
    e.rz = head.rz * rng.uniform(0.2, 0.45);
    e.ry = head.ry * rng.uniform(0.15, 0.4);
    e.rx = head.rx * rng.uniform(0.15, 0.4);
    e.cz = head.cz + head.rz * rng.uniform(-0.5, 0.5);
    e.cy = head.cy + head.ry * rng.uniform(-0.5, 0.5);
    e.cx = head.cx + head.rx * rng.uniform(-0.5, 0.5);
    e.label = static_cast<std::uint8_t>(2 + rng.below(3));
    shapes.push_back(e);
  }
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(spec.depth) * spec.height * spec.width, 0);
  std::size_t i = 0;
  for (int z = 0; z < spec.depth; ++z)
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x, ++i) {
        if (!head.contains(z, y, x)) continue;
        std::uint8_t label = 1;
        // Later shapes paint over earlier ones; inner regions stay inside the head.
        for (const auto& e : shapes) {
          if (e.contains(z, y, x)) label = e.label;
        }
        labels[i] = label;
      }
  return labels;
}

/// All four modality volumes of subject `index`, deterministic in (seed, index).
inline PhantomSubject generate_subject(const PhantomSpec& spec, int index) {
  PhantomSubject subject;
  subject.subject_id = phantom_subject_id(index);
  subject.labels = phantom_labels(spec, index);
  const std::uint64_t subject_seed = mix_seed(spec.seed, static_cast<std::uint64_t>(index));
  for (Modality m : kAllModalities) {
    Rng noise(mix_seed(subject_seed, 16 + static_cast<std::uint64_t>(m)));
    ModalityVolume v;
    v.subject_id = subject.subject_id;
    v.modality = m;
    v.depth = spec.depth;
    v.height = spec.height;
    v.width = spec.width;
    v.voxels.resize(subject.labels.size());
    const ContrastMap& c = spec.contrast.at(m);
    for (std::size_t i = 0; i < v.voxels.size(); ++i) {
      const std::uint8_t l = subject.labels[i];
      v.voxels[i] = l == 0 ? 0.0f
                           : c[l] + static_cast<float>(noise.uniform(-spec.texture_amplitude, spec.texture_amplitude));
    }
    subject.volumes.emplace(m, std::move(v));
  }
  return subject;
}

/// Noise-free intensity of a modality: the closed-form oracle for its volume.
inline std::vector<float> phantom_oracle(const PhantomSpec& spec, const PhantomSubject& subject, Modality m) {
  std::vector<float> out(subject.labels.size());
  const ContrastMap& c = spec.contrast.at(m);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c[subject.labels[i]];
  return out;
}

enum class VolumeFormat { Nifti, NiftiGz, Png };

inline VolumeFormat parse_volume_format(const std::string& s) {
  if (s == "nii") return VolumeFormat::Nifti;
  if (s == "nii.gz" || s == "nifti") return VolumeFormat::NiftiGz;
  if (s == "png") return VolumeFormat::Png;
  throw ContractError("unknown volume format '" + s + "' (expected nii, nii.gz or png)");
}

/// Writes `<out>/<subject>/<MOD>.nii.gz` (or `<MOD>/<index:04>.png`) for every
/// subject plus `<out>/manifest.txt`; returns the manifest path.
inline std::string write_phantom_dataset(const PhantomSpec& spec, const std::string& out_dir,
                                         VolumeFormat format = VolumeFormat::NiftiGz) {
  spec.validate();
  std::filesystem::create_directories(out_dir);
  std::vector<SubjectEntry> entries;
  for (int k = 0; k < spec.subject_count; ++k) {
    PhantomSubject s = generate_subject(spec, k);
    const std::filesystem::path dir = std::filesystem::path(out_dir) / s.subject_id;
    std::filesystem::create_directories(dir);
    SubjectEntry e;
    e.subject_id = s.subject_id;
    for (const auto& [m, vol] : s.volumes) {
      std::filesystem::path p;
      if (format == VolumeFormat::Png) {
        p = dir / to_string(m);
        write_png_volume(p.string(), vol);
      } else {
        p = dir / (to_string(m) + (format == VolumeFormat::Nifti ? ".nii" : ".nii.gz"));
        write_nifti(p.string(), to_nifti(vol));
      }
      e.paths[m] = p.string();
    }
    entries.push_back(std::move(e));
  }
  const std::string manifest = (std::filesystem::path(out_dir) / "manifest.txt").string();
  write_manifest(manifest, entries);
  return manifest;
}

}  // namespace modsynth
