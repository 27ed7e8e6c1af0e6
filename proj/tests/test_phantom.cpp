#include <gtest/gtest.h>

#include <cmath>

#include "modsynth/phantom.hpp"
#include "test_support.hpp"

using namespace modsynth;
using modsynth::testing::TempDir;

namespace {

PhantomSpec small_spec() {
  PhantomSpec s;
  s.seed = 11;
  s.subject_count = 3;
  s.depth = 12;
  s.height = 24;
  s.width = 20;
  return s;
}

}  // namespace

TEST(Phantom, Deterministic) {
  const PhantomSpec spec = small_spec();
  const PhantomSubject a = generate_subject(spec, 1), b = generate_subject(spec, 1);
  EXPECT_EQ(a.labels, b.labels);
  for (Modality m : kAllModalities) EXPECT_EQ(a.volumes.at(m).voxels, b.volumes.at(m).voxels);
  const PhantomSubject c = generate_subject(spec, 2);
  EXPECT_NE(a.volumes.at(Modality::T1).voxels, c.volumes.at(Modality::T1).voxels);
}

TEST(Phantom, MasksCoincideAcrossModalities) {
  const PhantomSpec spec = small_spec();
  const PhantomSubject s = generate_subject(spec, 0);
  // Recover each voxel's label from each modality by nearest contrast level.
  for (Modality m : kAllModalities) {
    const auto& c = spec.contrast.at(m);
    const auto& v = s.volumes.at(m).voxels;
    for (std::size_t i = 0; i < v.size(); ++i) {
      int best = 0;
      for (int l = 1; l < kPhantomLabels; ++l) {
        if (std::abs(v[i] - c[l]) < std::abs(v[i] - c[best])) best = l;
      }
      ASSERT_EQ(best, s.labels[i]) << to_string(m) << " voxel " << i;
    }
  }
  std::set<int> present(s.labels.begin(), s.labels.end());
  EXPECT_TRUE(present.count(0) && present.count(1));
  EXPECT_GE(present.size(), 3u);
}

TEST(Phantom, ResidualBoundedByTextureAmplitude) {
  const PhantomSpec spec = small_spec();
  const PhantomSubject s = generate_subject(spec, 2);
  for (Modality m : kAllModalities) {
    const auto oracle = phantom_oracle(spec, s, m);
    const auto& v = s.volumes.at(m).voxels;
    double worst = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      worst = std::max(worst, std::abs(static_cast<double>(v[i]) - oracle[i]));
      if (s.labels[i] == 0) ASSERT_EQ(v[i], 0.0f);
    }
    EXPECT_LE(worst, spec.texture_amplitude);
    EXPECT_GT(worst, 0.5 * spec.texture_amplitude);
  }
}

TEST(Phantom, NoiseDiffersPerModality) {
  PhantomSpec spec = small_spec();
  spec.contrast[Modality::T2] = spec.contrast[Modality::T1];
  const PhantomSubject s = generate_subject(spec, 0);
  EXPECT_NE(s.volumes.at(Modality::T1).voxels, s.volumes.at(Modality::T2).voxels);
}

TEST(Phantom, InvalidSpec) {
  PhantomSpec spec = small_spec();
  spec.shape_count = 0;
  EXPECT_THROW(generate_subject(spec, 0), ContractError);
  spec = small_spec();
  spec.subject_count = 0;
  EXPECT_THROW(spec.validate(), ContractError);
  spec = small_spec();
  spec.contrast.erase(Modality::T1c);
  EXPECT_THROW(spec.validate(), ContractError);
}

TEST(Phantom, DefaultDeskSubjectHasEmptyMarginSlices) {
  PhantomSpec spec;
  const PhantomSubject s = generate_subject(spec, 0);
  std::vector<const ModalityVolume*> vols;
  for (const auto& [m, v] : s.volumes) vols.push_back(&v);
  const auto kept = nonempty_slices(vols);
  EXPECT_LT(kept.size(), static_cast<std::size_t>(spec.depth));
  EXPECT_GE(kept.size(), 24u);
}

TEST(Phantom, DatasetOnDiskFeedsThePipeline) {
  TempDir dir("phantom");
  const PhantomSpec spec = small_spec();
  for (VolumeFormat f : {VolumeFormat::NiftiGz, VolumeFormat::Png}) {
    const std::string sub = dir / (f == VolumeFormat::Png ? "png" : "nii");
    const std::string manifest = write_phantom_dataset(spec, sub, f);
    const auto entries = read_manifest(manifest);
    ASSERT_EQ(entries.size(), 3u);
    EXPECT_EQ(entries[1].subject_id, "phantom_001");
    const ModalityVolume v = load_volume(entries[1].paths.at(Modality::FLAIR));
    const PhantomSubject s = generate_subject(spec, 1);
    const auto& ref = s.volumes.at(Modality::FLAIR).voxels;
    ASSERT_EQ(v.voxels.size(), ref.size());
    // PNG slices are rounded to integers.
    const float tol = f == VolumeFormat::Png ? 0.5f : 0.0f;
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_LE(std::abs(v.voxels[i] - ref[i]), tol);
    const auto samples = load_dataset(entries, {Modality::T1, Modality::T2}, Modality::FLAIR, {6, 16});
    EXPECT_EQ(samples.size(), 18u);
  }
}

TEST(VolumeFormat, Parse) {
  EXPECT_EQ(parse_volume_format("png"), VolumeFormat::Png);
  EXPECT_EQ(parse_volume_format("nii.gz"), VolumeFormat::NiftiGz);
  EXPECT_THROW(parse_volume_format("dcm"), ContractError);
}
