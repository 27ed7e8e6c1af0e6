#pragma once

// Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer. Reading
// goes through zlib's gz stream, which passes uncompressed files through.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "modsynth/image_io.hpp"

namespace modsynth {

/// Voxel grid in NIfTI storage order: x fastest, then y, then z.
struct NiftiVolume {
  std::array<int, 3> dim{};        // x, y, z extents
  std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
  std::vector<float> voxels;
};

namespace detail {

inline constexpr int kNiftiHeaderSize = 348;

enum NiftiType : std::int16_t {
  kUint8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
  kInt8 = 256,
  kUint16 = 512,
  kUint32 = 768,
};

template <typename V>
V load_scalar(const unsigned char* p, bool swap) {
  unsigned char b[sizeof(V)];
  std::memcpy(b, p, sizeof(V));
  if (swap) {
    for (std::size_t i = 0; i < sizeof(V) / 2; ++i) std::swap(b[i], b[sizeof(V) - 1 - i]);
  }
  V v;
  std::memcpy(&v, b, sizeof(V));
  return v;
}

template <typename V>
void store_scalar(unsigned char* p, V v) {
  std::memcpy(p, &v, sizeof(V));
}

struct GzCloser {
  void operator()(gzFile f) const {
    if (f) gzclose(f);
  }
};

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace detail

inline NiftiVolume read_nifti(const std::string& path) {
  std::unique_ptr<gzFile_s, detail::GzCloser> f(gzopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open " + path);
  unsigned char hdr[detail::kNiftiHeaderSize];
  if (gzread(f.get(), hdr, sizeof hdr) != static_cast<int>(sizeof hdr)) {
    throw IoError(path + ": truncated NIfTI header");
  }
  bool swap = false;
  if (detail::load_scalar<std::int32_t>(hdr, false) != detail::kNiftiHeaderSize) {
    swap = true;
    if (detail::load_scalar<std::int32_t>(hdr, true) != detail::kNiftiHeaderSize) {
      throw IoError(path + ": not a NIfTI-1 file (bad sizeof_hdr)");
    }
  }
  if (std::memcmp(hdr + 344, "n+1", 4) != 0) throw IoError(path + ": not a single-file NIfTI-1 image");
  const int ndim = detail::load_scalar<std::int16_t>(hdr + 40, swap);
  if (ndim < 1 || ndim > 7) throw IoError(path + ": invalid dimension count");
  NiftiVolume vol;
  std::size_t count = 1;
  for (int i = 0; i < 3; ++i) {
    const int d = i < ndim ? detail::load_scalar<std::int16_t>(hdr + 42 + 2 * i, swap) : 1;
    if (d < 1) throw IoError(path + ": invalid extent");
    vol.dim[i] = d;
    count *= static_cast<std::size_t>(d);
    const float px = detail::load_scalar<float>(hdr + 80 + 4 * i, swap);
    vol.spacing[i] = px > 0.0f ? px : 1.0f;
  }
  for (int i = 3; i < ndim; ++i) {
    if (detail::load_scalar<std::int16_t>(hdr + 42 + 2 * i, swap) > 1) {
      throw IoError(path + ": only 3D volumes are supported");
    }
  }
  const auto type = detail::load_scalar<std::int16_t>(hdr + 70, swap);
  const int bits = detail::load_scalar<std::int16_t>(hdr + 72, swap);
  const float offset = detail::load_scalar<float>(hdr + 108, swap);
  float slope = detail::load_scalar<float>(hdr + 112, swap);
  const float inter = detail::load_scalar<float>(hdr + 116, swap);
  if (slope == 0.0f) slope = 1.0f;
  if (bits % 8 != 0 || bits == 0) throw IoError(path + ": invalid bitpix");
  const std::size_t bytes = static_cast<std::size_t>(bits / 8);

  // Skip extensions up to vox_offset.
  const long skip = static_cast<long>(offset) - detail::kNiftiHeaderSize;
  if (skip > 0) {
    std::vector<unsigned char> ext(static_cast<std::size_t>(skip));
    if (gzread(f.get(), ext.data(), static_cast<unsigned>(skip)) != skip) throw IoError(path + ": truncated extension");
  }
  std::vector<unsigned char> raw(count * bytes);
  std::size_t done = 0;
  while (done < raw.size()) {
    const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(raw.size() - done, 1u << 30));
    const int got = gzread(f.get(), raw.data() + done, chunk);
    if (got <= 0) throw IoError(path + ": truncated voxel data (" + std::to_string(done) + " of " +
                                std::to_string(raw.size()) + " bytes)");
    done += static_cast<std::size_t>(got);
  }
  vol.voxels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const unsigned char* p = raw.data() + i * bytes;
    double v = 0;
    switch (type) {
      case detail::kUint8: v = p[0]; break;
      case detail::kInt8: v = static_cast<std::int8_t>(p[0]); break;
      case detail::kInt16: v = detail::load_scalar<std::int16_t>(p, swap); break;
      case detail::kUint16: v = detail::load_scalar<std::uint16_t>(p, swap); break;
      case detail::kInt32: v = detail::load_scalar<std::int32_t>(p, swap); break;
      case detail::kUint32: v = detail::load_scalar<std::uint32_t>(p, swap); break;
      case detail::kFloat32: v = detail::load_scalar<float>(p, swap); break;
      case detail::kFloat64: v = detail::load_scalar<double>(p, swap); break;
      default: throw IoError(path + ": unsupported NIfTI datatype " + std::to_string(type));
    }
    vol.voxels[i] = static_cast<float>(v * slope + inter);
  }
  return vol;
}

/// Writes float32 voxels; a ".gz" suffix selects gzip compression.
inline void write_nifti(const std::string& path, const NiftiVolume& vol) {
  const std::size_t count = static_cast<std::size_t>(vol.dim[0]) * vol.dim[1] * vol.dim[2];
  if (vol.voxels.size() != count) throw IoError("write_nifti: voxel count does not match extents for " + path);
  unsigned char hdr[352] = {};
  detail::store_scalar<std::int32_t>(hdr, detail::kNiftiHeaderSize);
  detail::store_scalar<std::int16_t>(hdr + 40, 3);
  for (int i = 0; i < 3; ++i) detail::store_scalar<std::int16_t>(hdr + 42 + 2 * i, static_cast<std::int16_t>(vol.dim[i]));
  for (int i = 3; i < 7; ++i) detail::store_scalar<std::int16_t>(hdr + 42 + 2 * i, 1);
  detail::store_scalar<std::int16_t>(hdr + 70, detail::kFloat32);
  detail::store_scalar<std::int16_t>(hdr + 72, 32);
  detail::store_scalar<float>(hdr + 76, 1.0f);
  for (int i = 0; i < 3; ++i) detail::store_scalar<float>(hdr + 80 + 4 * i, vol.spacing[i]);
  detail::store_scalar<float>(hdr + 108, 352.0f);
  detail::store_scalar<float>(hdr + 112, 1.0f);
  hdr[123] = 10;  // xyzt_units: mm, s
  std::memcpy(hdr + 344, "n+1", 4);
  // 4 zero bytes of extension flag follow the header.
  const bool gz = detail::ends_with(path, ".gz");
  std::unique_ptr<gzFile_s, detail::GzCloser> f(gzopen(path.c_str(), gz ? "wb6" : "wbT"));
  if (!f) throw IoError("cannot create " + path);
  if (gzwrite(f.get(), hdr, sizeof hdr) != static_cast<int>(sizeof hdr)) throw IoError("write failed for " + path);
  const auto* data = reinterpret_cast<const unsigned char*>(vol.voxels.data());
  std::size_t left = count * sizeof(float);
  while (left > 0) {
    const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(left, 1u << 30));
    if (gzwrite(f.get(), data, chunk) != static_cast<int>(chunk)) throw IoError("write failed for " + path);
    data += chunk;
    left -= chunk;
  }
  if (gzclose(f.release()) != Z_OK) throw IoError("write failed for " + path);
}

}  // namespace modsynth
