#pragma once

// Building blocks of the disentangling generator: instance normalization,
// adaptive instance normalization driven by external style statistics,
// block partitioning, the block-wise local adaptive fusion (LAF) and the
// concatenate-then-convolve (Cat-Conv) fusion of shared features.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "modsynth/autograd.hpp"
#include "modsynth/ops.hpp"
#include "modsynth/tensor.hpp"

namespace modsynth {

inline constexpr double kNormEpsilon = 1e-5;

/// Per-channel style statistics consumed by AdaIN: target mean and std.
template <typename T>
struct StyleStats {
  std::vector<T> mean;
  std::vector<T> std;

  void validate() const {
    if (mean.size() != std.size()) throw ContractError("StyleStats: mean/std length mismatch");
    for (std::size_t i = 0; i < mean.size(); ++i) {
      if (!std::isfinite(mean[i]) || !std::isfinite(this->std[i])) throw ContractError("StyleStats: non-finite entry");
    }
  }
};

/// Row-major grid of equally sized sub-images cut from an (1, M, H, W) image.
template <typename T>
struct BlockGrid {
  int rows = 0;
  int cols = 0;
  int block_size = 0;
  std::vector<Tensor<T>> blocks;  // each (1, M, block_size, block_size)

  int cell_count() const { return rows * cols; }
};

/// Number of LAF grid cells for an image of `image_size` and `block_size`.
inline int laf_cell_count(int height, int width, int block_size) {
  return (height / block_size) * (width / block_size);
}

namespace detail {

template <typename T>
void check_divisible(int height, int width, int block_size) {
  if (block_size < 1 || height % block_size != 0 || width % block_size != 0) {
    throw ContractError("image " + std::to_string(height) + "x" + std::to_string(width) +
                        " is not divisible by block size " + std::to_string(block_size));
  }
}

/// Population mean and std of a plane.
template <typename T>
void plane_moments(const T* p, std::size_t len, T& mean, T& sd) {
  T m = 0;
  for (std::size_t i = 0; i < len; ++i) m += p[i];
  m /= static_cast<T>(len);
  T v = 0;
  for (std::size_t i = 0; i < len; ++i) v += (p[i] - m) * (p[i] - m);
  mean = m;
  sd = std::sqrt(v / static_cast<T>(len));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Instance normalization and AdaIN
// ---------------------------------------------------------------------------

/// Per (sample, channel): (x - mean) / max(std, eps), population std, no
/// affine. Channels with std >= eps come out with exactly zero mean and unit
/// std; constant channels map to zero.
template <typename T>
Var<T> instance_norm(const Var<T>& x, T eps = T(kNormEpsilon)) {
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  Tensor<T> y(s);
  std::vector<T> sd(static_cast<std::size_t>(s.n) * s.c), denom(sd.size());
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* p = x.value().plane(n, c);
      T m, d;
      detail::plane_moments(p, plane, m, d);
      const std::size_t k = static_cast<std::size_t>(n) * s.c + c;
      sd[k] = d;
      denom[k] = std::max(d, eps);
      T* o = y.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) o[i] = (p[i] - m) / denom[k];
    }
  return make_result<T>(std::move(y), {x}, [sd, denom, plane, eps](Node<T>& self) {
    Tensor<T>* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& yv = self.value;
    const T count = static_cast<T>(plane);
    for (int n = 0; n < yv.n(); ++n)
      for (int c = 0; c < yv.c(); ++c) {
        const std::size_t k = static_cast<std::size_t>(n) * yv.c() + c;
        const T* g = self.grad.plane(n, c);
        const T* y = yv.plane(n, c);
        T sg = 0, sgy = 0;
        for (std::size_t i = 0; i < plane; ++i) {
          sg += g[i];
          sgy += g[i] * y[i];
        }
        // y = d / s with d = x - mean; s = std varies with x only above eps,
        // where d(std)/dx_i = d_i / (N std).
        const T s = denom[k];
        const T second = sd[k] > eps ? sgy / (count * sd[k]) : T(0);
        T* dst = gx->plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) {
          dst[i] += (g[i] - sg / count) / s - y[i] * second;
        }
      }
  });
}

/// AdaIN: std_nc * instance_norm(x) + mean_nc. `style_mean` and `style_std`
/// are (n, c, 1, 1) and may carry gradients back into the style encoder.
template <typename T>
Var<T> adain(const Var<T>& x, const Var<T>& style_mean, const Var<T>& style_std, T eps = T(kNormEpsilon)) {
  const Shape s = x.shape();
  const Shape want{s.n, s.c, 1, 1};
  if (!(style_mean.shape() == want) || !(style_std.shape() == want)) {
    throw ContractError("adain: style statistics " + style_mean.shape().str() + "/" + style_std.shape().str() +
                        " do not match feature channels " + want.str());
  }
  return channel_affine(instance_norm(x, eps), style_std, style_mean);
}

/// Single-sample convenience form operating on plain tensors.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, T eps = T(kNormEpsilon)) {
  NoGradGuard guard;
  return instance_norm(Var<T>(x), eps).value();
}

template <typename T>
Tensor<T> adain(const Tensor<T>& x, const StyleStats<T>& stats, T eps = T(kNormEpsilon)) {
  stats.validate();
  if (static_cast<int>(stats.mean.size()) != x.c()) {
    throw ContractError("adain: style statistics have " + std::to_string(stats.mean.size()) + " entries but input has " +
                        std::to_string(x.c()) + " channels");
  }
  Tensor<T> m(x.n(), x.c(), 1, 1), d(x.n(), x.c(), 1, 1);
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c) {
      m.at(n, c, 0, 0) = stats.mean[c];
      d.at(n, c, 0, 0) = stats.std[c];
    }
  NoGradGuard guard;
  return adain(Var<T>(x), Var<T>(m), Var<T>(d), eps).value();
}

// ---------------------------------------------------------------------------
// Block partitioning
// ---------------------------------------------------------------------------

/// Cuts a (1, M, H, W) image into a row-major grid of block_size squares.
template <typename T>
BlockGrid<T> partition_blocks(const Tensor<T>& image, int block_size) {
  if (image.n() != 1) throw ContractError("partition_blocks expects a single image");
  detail::check_divisible<T>(image.h(), image.w(), block_size);
  BlockGrid<T> grid;
  grid.rows = image.h() / block_size;
  grid.cols = image.w() / block_size;
  grid.block_size = block_size;
  grid.blocks.reserve(grid.cell_count());
  for (int r = 0; r < grid.rows; ++r)
    for (int q = 0; q < grid.cols; ++q) {
      Tensor<T> b(1, image.c(), block_size, block_size);
      for (int c = 0; c < image.c(); ++c)
        for (int y = 0; y < block_size; ++y) {
          const T* src = &image.at(0, c, r * block_size + y, q * block_size);
          std::copy_n(src, block_size, &b.at(0, c, y, 0));
        }
      grid.blocks.push_back(std::move(b));
    }
  return grid;
}

/// Inverse of partition_blocks: places each block back at its grid position.
template <typename T>
Tensor<T> reassemble_blocks(const BlockGrid<T>& grid) {
  if (grid.rows < 1 || grid.cols < 1 || static_cast<int>(grid.blocks.size()) != grid.cell_count()) {
    throw ContractError("reassemble_blocks: grid is " + std::to_string(grid.rows) + "x" + std::to_string(grid.cols) +
                        " but holds " + std::to_string(grid.blocks.size()) + " blocks");
  }
  const int bs = grid.block_size;
  const int channels = grid.blocks.front().c();
  for (const auto& b : grid.blocks) {
    if (b.n() != 1 || b.c() != channels || b.h() != bs || b.w() != bs) {
      throw ContractError("reassemble_blocks: inconsistent block shape " + b.shape().str());
    }
  }
  Tensor<T> image(1, channels, grid.rows * bs, grid.cols * bs);
  for (int r = 0; r < grid.rows; ++r)
    for (int q = 0; q < grid.cols; ++q) {
      const auto& b = grid.blocks[r * grid.cols + q];
      for (int c = 0; c < channels; ++c)
        for (int y = 0; y < bs; ++y) std::copy_n(&b.at(0, c, y, 0), bs, &image.at(0, c, r * bs + y, q * bs));
    }
  return image;
}

// ---------------------------------------------------------------------------
// Local adaptive fusion
// ---------------------------------------------------------------------------

/// One 1x1 kernel (M weights + bias) per grid cell.
template <typename T>
struct LafParams {
  int modalities = 0;
  Tensor<T> weight;  // (cells, M, 1, 1)
  Tensor<T> bias;    // (cells, 1, 1, 1)

  int cell_count() const { return weight.n(); }
  std::size_t parameter_count() const { return weight.size() + bias.size(); }

  /// Averaging kernels: every cell starts as the modality mean.
  static LafParams averaging(int cells, int modalities) {
    LafParams p;
    p.modalities = modalities;
    p.weight = Tensor<T>(cells, modalities, 1, 1, T(1) / static_cast<T>(modalities));
    p.bias = Tensor<T>(cells, 1, 1, 1, T(0));
    return p;
  }
};

namespace detail {

/// Applies per-cell 1x1 kernels block by block on one sample.
template <typename T>
Tensor<T> laf_sample(const Tensor<T>& sample, const T* weight, const T* bias, int block_size) {
  const int m = sample.c();
  BlockGrid<T> grid = partition_blocks(sample, block_size);
  BlockGrid<T> fused{grid.rows, grid.cols, block_size, {}};
  fused.blocks.reserve(grid.blocks.size());
  const std::size_t plane = static_cast<std::size_t>(block_size) * block_size;
  for (int cell = 0; cell < grid.cell_count(); ++cell) {
    const auto& b = grid.blocks[cell];
    Tensor<T> out(1, 1, block_size, block_size, bias[cell]);
    for (int k = 0; k < m; ++k) {
      const T wk = weight[cell * m + k];
      const T* src = b.plane(0, k);
      for (std::size_t i = 0; i < plane; ++i) out[i] += wk * src[i];
    }
    fused.blocks.push_back(std::move(out));
  }
  return reassemble_blocks(fused);
}

}  // namespace detail

/// Pseudo-target synthesis. x: (n, M, H, W); weight: (cells, M, 1, 1);
/// bias: (cells, 1, 1, 1). Returns (n, 1, H, W).
template <typename T>
Var<T> laf(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int block_size) {
  const Shape s = x.shape();
  detail::check_divisible<T>(s.h, s.w, block_size);
  const int cells = laf_cell_count(s.h, s.w, block_size);
  if (weight.shape() != Shape{cells, s.c, 1, 1} || bias.shape() != Shape{cells, 1, 1, 1}) {
    throw ContractError("laf: parameters " + weight.shape().str() + "/" + bias.shape().str() + " do not match " +
                        std::to_string(cells) + " cells of " + std::to_string(s.c) + " modalities");
  }
  Tensor<T> y(s.n, 1, s.h, s.w);
  for (int n = 0; n < s.n; ++n) {
    Tensor<T> out = detail::laf_sample(x.value().slice_sample(n), weight.value().data(), bias.value().data(), block_size);
    std::copy_n(out.data(), out.size(), y.sample(n));
  }
  return make_result<T>(std::move(y), {x, weight, bias}, [block_size, cells](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    Tensor<T>* gx = parent_grad(self, 0);
    Tensor<T>* gw = parent_grad(self, 1);
    Tensor<T>* gb = parent_grad(self, 2);
    const int m = xv.c();
    const std::size_t plane = static_cast<std::size_t>(block_size) * block_size;
    for (int n = 0; n < xv.n(); ++n) {
      const BlockGrid<T> gy = partition_blocks(self.grad.slice_sample(n), block_size);
      const BlockGrid<T> xs = partition_blocks(xv.slice_sample(n), block_size);
      BlockGrid<T> gxs{gy.rows, gy.cols, block_size, {}};
      for (int cell = 0; cell < cells; ++cell) {
        const T* g = gy.blocks[cell].data();
        if (gb) {
          T sg = 0;
          for (std::size_t i = 0; i < plane; ++i) sg += g[i];
          (*gb)[cell] += sg;
        }
        Tensor<T> dx(1, m, block_size, block_size);
        for (int k = 0; k < m; ++k) {
          const T* src = xs.blocks[cell].plane(0, k);
          T* d = dx.plane(0, k);
          const T wk = wv[cell * m + k];
          T sgx = 0;
          for (std::size_t i = 0; i < plane; ++i) {
            sgx += g[i] * src[i];
            d[i] = wk * g[i];
          }
          if (gw) (*gw)[cell * m + k] += sgx;
        }
        gxs.blocks.push_back(std::move(dx));
      }
      if (gx) {
        const Tensor<T> full = reassemble_blocks(gxs);
        T* dst = gx->sample(n);
        for (std::size_t i = 0; i < full.size(); ++i) dst[i] += full[i];
      }
    }
  });
}

/// Plain-tensor LAF on a (1, M, H, W) stack of modalities.
template <typename T>
Tensor<T> laf_forward(const Tensor<T>& modalities, const LafParams<T>& params, int block_size) {
  if (params.modalities != modalities.c()) {
    throw ContractError("laf_forward: parameters expect " + std::to_string(params.modalities) + " modalities, got " +
                        std::to_string(modalities.c()));
  }
  NoGradGuard guard;
  return laf(Var<T>(modalities), Var<T>(params.weight), Var<T>(params.bias), block_size).value();
}

/// Stacks single-channel images into one (1, M, H, W) tensor, rejecting
/// resolution mismatches.
template <typename T>
Tensor<T> stack_modalities(const std::vector<Tensor<T>>& images) {
  if (images.empty()) throw ContractError("stack_modalities: no images");
  const Shape s = images.front().shape();
  for (const auto& im : images) {
    if (im.n() != 1 || im.c() != 1 || im.h() != s.h || im.w() != s.w) {
      throw ContractError("modality resolution mismatch: " + s.str() + " vs " + im.shape().str());
    }
  }
  Tensor<T> out(1, static_cast<int>(images.size()), s.h, s.w);
  for (std::size_t k = 0; k < images.size(); ++k) std::copy_n(images[k].data(), images[k].size(), out.plane(0, k));
  return out;
}

// ---------------------------------------------------------------------------
// Cat-Conv fusion
// ---------------------------------------------------------------------------

/// Concatenates M shared features along channels and fuses them with a
/// 3x3 stride-1 padding-1 convolution. weight: (cout, sum c_m, 3, 3).
template <typename T>
Var<T> cat_conv(const std::vector<Var<T>>& features, const Var<T>& weight, const Var<T>& bias) {
  if (features.empty()) throw ContractError("cat_conv: no features");
  const Shape s = features.front().shape();
  for (const auto& f : features) {
    if (!(f.shape() == s)) throw ContractError("cat_conv: feature shape mismatch " + s.str() + " vs " + f.shape().str());
  }
  if (weight.shape().h != 3 || weight.shape().w != 3) throw ContractError("cat_conv: expected a 3x3 kernel");
  return conv2d(concat_channels(features), weight, bias, ConvOptions{1, 1, PadMode::Zero});
}

template <typename T>
Tensor<T> cat_conv_forward(const std::vector<Tensor<T>>& features, const Tensor<T>& weight, const Tensor<T>& bias) {
  NoGradGuard guard;
  std::vector<Var<T>> vs;
  for (const auto& f : features) vs.emplace_back(f);
  return cat_conv(vs, Var<T>(weight), Var<T>(bias)).value();
}

}  // namespace modsynth
