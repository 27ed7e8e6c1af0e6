#pragma once

// Differentiable tensor operations on the reverse-mode tape. Each op computes
// its forward value eagerly and registers a closure that propagates the
// output gradient to whichever inputs require one.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "modsynth/autograd.hpp"
#include "modsynth/gemm.hpp"
#include "modsynth/tensor.hpp"

namespace modsynth {

enum class PadMode { Zero, Reflect };

inline std::string to_string(PadMode m) { return m == PadMode::Zero ? "zero" : "reflect"; }
inline PadMode parse_pad_mode(const std::string& s) {
  if (s == "zero") return PadMode::Zero;
  if (s == "reflect") return PadMode::Reflect;
  throw ContractError("unknown padding mode '" + s + "' (expected zero|reflect)");
}

struct ConvOptions {
  int stride = 1;
  int pad = 0;
  PadMode mode = PadMode::Zero;
};

namespace detail {

/// Geometry of a convolution that maps (cin, h, w) to (cout, hout, wout).
struct ConvGeom {
  int cin, h, w, k, stride, pad, hout, wout;
  PadMode mode;
  int rows() const { return cin * k * k; }
  int cols() const { return hout * wout; }
};

inline int reflect_index(int i, int n) {
  if (i < 0) i = -i;
  if (i >= n) i = 2 * n - 2 - i;
  return i;
}

inline ConvGeom conv_geom(int cin, int h, int w, int k, const ConvOptions& o) {
  ConvGeom g{cin, h, w, k, o.stride, o.pad, 0, 0, o.mode};
  g.hout = (h + 2 * o.pad - k) / o.stride + 1;
  g.wout = (w + 2 * o.pad - k) / o.stride + 1;
  if (g.hout < 1 || g.wout < 1) {
    throw ContractError("convolution input " + std::to_string(h) + "x" + std::to_string(w) + " too small for kernel " +
                        std::to_string(k));
  }
  if (o.mode == PadMode::Reflect && (o.pad >= h || o.pad >= w)) {
    throw ContractError("reflection padding must be smaller than the spatial extent");
  }
  return g;
}

/// Unfolds x (cin, h, w) into col (cin*k*k, hout*wout).
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const int cols = g.cols();
  for (int c = 0; c < g.cin; ++c) {
    const T* xc = x + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = col + (static_cast<std::size_t>(c) * g.k * g.k + ky * g.k + kx) * cols;
        for (int oy = 0; oy < g.hout; ++oy) {
          int iy = oy * g.stride - g.pad + ky;
          T* out = row + oy * g.wout;
          if (g.mode == PadMode::Reflect) {
            iy = reflect_index(iy, g.h);
          } else if (iy < 0 || iy >= g.h) {
            std::fill_n(out, g.wout, T(0));
            continue;
          }
          const T* xrow = xc + static_cast<std::size_t>(iy) * g.w;
          for (int ox = 0; ox < g.wout; ++ox) {
            int ix = ox * g.stride - g.pad + kx;
            if (g.mode == PadMode::Reflect) {
              out[ox] = xrow[reflect_index(ix, g.w)];
            } else {
              out[ox] = (ix >= 0 && ix < g.w) ? xrow[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters col back into x, accumulating.
template <typename T>
void col2im(const T* col, const ConvGeom& g, T* x) {
  const int cols = g.cols();
  for (int c = 0; c < g.cin; ++c) {
    T* xc = x + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = col + (static_cast<std::size_t>(c) * g.k * g.k + ky * g.k + kx) * cols;
        for (int oy = 0; oy < g.hout; ++oy) {
          int iy = oy * g.stride - g.pad + ky;
          const T* in = row + oy * g.wout;
          if (g.mode == PadMode::Reflect) {
            iy = reflect_index(iy, g.h);
          } else if (iy < 0 || iy >= g.h) {
            continue;
          }
          T* xrow = xc + static_cast<std::size_t>(iy) * g.w;
          for (int ox = 0; ox < g.wout; ++ox) {
            int ix = ox * g.stride - g.pad + kx;
            if (g.mode == PadMode::Reflect) {
              xrow[reflect_index(ix, g.w)] += in[ox];
            } else if (ix >= 0 && ix < g.w) {
              xrow[ix] += in[ox];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void add_bias(Tensor<T>& y, const Tensor<T>& b) {
  for (int n = 0; n < y.n(); ++n)
    for (int c = 0; c < y.c(); ++c) {
      T* p = y.plane(n, c);
      const T bc = b[c];
      for (std::size_t i = 0; i < y.shape().plane(); ++i) p[i] += bc;
    }
}

template <typename T>
void accumulate_bias_grad(const Tensor<T>& g, Tensor<T>& db) {
  for (int n = 0; n < g.n(); ++n)
    for (int c = 0; c < g.c(); ++c) {
      const T* p = g.plane(n, c);
      T s = 0;
      for (std::size_t i = 0; i < g.shape().plane(); ++i) s += p[i];
      db[c] += s;
    }
}

}  // namespace detail

/// 2D cross-correlation. x: (n, cin, h, w); weight: (cout, cin, k, k);
/// bias: (cout, 1, 1, 1) or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, ConvOptions opt) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.c != xs.c || ws.h != ws.w) {
    throw ContractError("conv2d: weight " + ws.str() + " incompatible with input " + xs.str());
  }
  const auto g = detail::conv_geom(xs.c, xs.h, xs.w, ws.h, opt);
  const int cout = ws.n;
  Tensor<T> y(xs.n, cout, g.hout, g.wout);
  std::vector<T> col(static_cast<std::size_t>(g.rows()) * g.cols());
  for (int n = 0; n < xs.n; ++n) {
    detail::im2col(x.value().sample(n), g, col.data());
    detail::gemm<T>(false, false, cout, g.cols(), g.rows(), T(1), weight.value().data(), g.rows(), col.data(),
                    g.cols(), T(0), y.sample(n), g.cols());
  }
  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) {
    detail::add_bias(y, bias.value());
    inputs.push_back(bias);
  }
  return make_result<T>(std::move(y), inputs, [g, cout](Node<T>& self) {
    const auto& gy = self.grad;
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    Tensor<T>* gx = parent_grad(self, 0);
    Tensor<T>* gw = parent_grad(self, 1);
    std::vector<T> col(static_cast<std::size_t>(g.rows()) * g.cols());
    for (int n = 0; n < gy.n(); ++n) {
      if (gw) {
        detail::im2col(xv.sample(n), g, col.data());
        detail::gemm<T>(false, true, cout, g.rows(), g.cols(), T(1), gy.sample(n), g.cols(), col.data(), g.cols(),
                        T(1), gw->data(), g.rows());
      }
      if (gx) {
        detail::gemm<T>(true, false, g.rows(), g.cols(), cout, T(1), wv.data(), g.rows(), gy.sample(n), g.cols(),
                        T(0), col.data(), g.cols());
        detail::col2im(col.data(), g, gx->sample(n));
      }
    }
    if (self.parents.size() > 2) {
      if (Tensor<T>* gb = parent_grad(self, 2)) detail::accumulate_bias_grad(gy, *gb);
    }
  });
}

/// Transposed convolution (adjoint of conv2d with the same geometry).
/// weight: (cin, cout, k, k); output extent (h-1)*stride - 2*pad + k.
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, ConvOptions opt) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.n != xs.c || ws.h != ws.w) {
    throw ContractError("conv_transpose2d: weight " + ws.str() + " incompatible with input " + xs.str());
  }
  if (opt.mode != PadMode::Zero) throw ContractError("conv_transpose2d supports zero padding only");
  const int k = ws.h;
  const int cout = ws.c;
  const int hout = (xs.h - 1) * opt.stride - 2 * opt.pad + k;
  const int wout = (xs.w - 1) * opt.stride - 2 * opt.pad + k;
  if (hout < 1 || wout < 1) throw ContractError("conv_transpose2d: empty output");
  const auto g = detail::conv_geom(cout, hout, wout, k, opt);
  if (g.hout != xs.h || g.wout != xs.w) throw ContractError("conv_transpose2d: geometry is not invertible");
  const int cin = xs.c;
  Tensor<T> y(xs.n, cout, hout, wout);
  std::vector<T> col(static_cast<std::size_t>(g.rows()) * g.cols());
  for (int n = 0; n < xs.n; ++n) {
    detail::gemm<T>(true, false, g.rows(), g.cols(), cin, T(1), weight.value().data(), g.rows(), x.value().sample(n),
                    g.cols(), T(0), col.data(), g.cols());
    detail::col2im(col.data(), g, y.sample(n));
  }
  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) {
    detail::add_bias(y, bias.value());
    inputs.push_back(bias);
  }
  return make_result<T>(std::move(y), inputs, [g, cin](Node<T>& self) {
    const auto& gy = self.grad;
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    Tensor<T>* gx = parent_grad(self, 0);
    Tensor<T>* gw = parent_grad(self, 1);
    std::vector<T> col(static_cast<std::size_t>(g.rows()) * g.cols());
    for (int n = 0; n < gy.n(); ++n) {
      if (!gx && !gw) break;
      detail::im2col(gy.sample(n), g, col.data());
      if (gx) {
        detail::gemm<T>(false, false, cin, g.cols(), g.rows(), T(1), wv.data(), g.rows(), col.data(), g.cols(), T(1),
                        gx->sample(n), g.cols());
      }
      if (gw) {
        detail::gemm<T>(false, true, cin, g.rows(), g.cols(), T(1), xv.sample(n), g.cols(), col.data(), g.cols(),
                        T(1), gw->data(), g.rows());
      }
    }
    if (self.parents.size() > 2) {
      if (Tensor<T>* gb = parent_grad(self, 2)) detail::accumulate_bias_grad(gy, *gb);
    }
  });
}

/// Elementwise map with derivative expressed through (input, output).
template <typename T, typename F, typename DF>
Var<T> elementwise(const Var<T>& x, F f, DF df) {
  Tensor<T> y(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return make_result<T>(std::move(y), {x}, [df](Node<T>& self) {
    Tensor<T>* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += self.grad[i] * df(xv[i], self.value[i]);
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return elementwise(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  return elementwise(
      x, [slope](T v) { return v > T(0) ? v : slope * v; }, [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  return elementwise(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return elementwise(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a.value().require_same(b.value(), "add");
  Tensor<T> y = a.value();
  y += b.value();
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& self) {
    for (std::size_t i = 0; i < 2; ++i)
      if (Tensor<T>* g = parent_grad(self, i)) *g += self.grad;
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T k) {
  Tensor<T> y = x.value();
  y *= k;
  return make_result<T>(std::move(y), {x}, [k](Node<T>& self) {
    if (Tensor<T>* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += k * self.grad[i];
  });
}

/// Concatenates along channels; all inputs share n, h, w.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ContractError("concat_channels: no inputs");
  Shape s = xs.front().shape();
  int total = 0;
  for (const auto& x : xs) {
    const Shape& t = x.shape();
    if (t.n != s.n || t.h != s.h || t.w != s.w) {
      throw ContractError("concat_channels: shape mismatch " + s.str() + " vs " + t.str());
    }
    total += t.c;
  }
  Tensor<T> y(s.n, total, s.h, s.w);
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    T* dst = y.sample(n);
    for (const auto& x : xs) {
      const std::size_t len = x.shape().c * plane;
      std::copy_n(x.value().sample(n), len, dst);
      dst += len;
    }
  }
  return make_result<T>(std::move(y), xs, [plane](Node<T>& self) {
    for (int n = 0; n < self.grad.n(); ++n) {
      const T* src = self.grad.sample(n);
      for (std::size_t i = 0; i < self.parents.size(); ++i) {
        const std::size_t len = self.parents[i]->value.c() * plane;
        if (Tensor<T>* g = parent_grad(self, i)) {
          T* dst = g->sample(n);
          for (std::size_t j = 0; j < len; ++j) dst[j] += src[j];
        }
        src += len;
      }
    }
  });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, int start, int count) {
  const Shape s = x.shape();
  if (start < 0 || count < 1 || start + count > s.c) throw ContractError("slice_channels: range out of bounds");
  Tensor<T> y(s.n, count, s.h, s.w);
  const std::size_t len = count * s.plane();
  for (int n = 0; n < s.n; ++n) std::copy_n(x.value().plane(n, start), len, y.sample(n));
  return make_result<T>(std::move(y), {x}, [start, len](Node<T>& self) {
    Tensor<T>* g = parent_grad(self, 0);
    if (!g) return;
    for (int n = 0; n < self.grad.n(); ++n) {
      T* dst = g->plane(n, start);
      const T* src = self.grad.sample(n);
      for (std::size_t j = 0; j < len; ++j) dst[j] += src[j];
    }
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  Tensor<T> y(s.n, s.c, 1, 1);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* p = x.value().plane(n, c);
      T acc = 0;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      y.at(n, c, 0, 0) = acc / static_cast<T>(plane);
    }
  return make_result<T>(std::move(y), {x}, [plane](Node<T>& self) {
    Tensor<T>* g = parent_grad(self, 0);
    if (!g) return;
    for (int n = 0; n < g->n(); ++n)
      for (int c = 0; c < g->c(); ++c) {
        const T v = self.grad.at(n, c, 0, 0) / static_cast<T>(plane);
        T* p = g->plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) p[i] += v;
      }
  });
}

/// Mean over every element, returned as a (1,1,1,1) scalar.
template <typename T>
Var<T> mean_all(const Var<T>& x) {
  const auto& v = x.value();
  T acc = 0;
  for (std::size_t i = 0; i < v.size(); ++i) acc += v[i];
  const T count = static_cast<T>(v.size());
  return make_result<T>(Tensor<T>::scalar(acc / count), {x}, [count](Node<T>& self) {
    Tensor<T>* g = parent_grad(self, 0);
    if (!g) return;
    const T d = self.grad[0] / count;
    for (auto& e : g->vec()) e += d;
  });
}

/// Spatial mean per (n, c), giving (n, c, 1, 1).
template <typename T>
Var<T> spatial_mean(const Var<T>& x) {
  return global_avg_pool(x);
}

/// Per-(n, c) affine map y = scale * x + shift with scale/shift of shape (n, c, 1, 1).
template <typename T>
Var<T> channel_affine(const Var<T>& x, const Var<T>& scale_nc, const Var<T>& shift_nc) {
  const Shape s = x.shape();
  const Shape want{s.n, s.c, 1, 1};
  if (!(scale_nc.shape() == want) || !(shift_nc.shape() == want)) {
    throw ContractError("channel_affine: expected per-channel statistics " + want.str() + ", got " +
                        scale_nc.shape().str() + " and " + shift_nc.shape().str());
  }
  Tensor<T> y(s);
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T a = scale_nc.value().at(n, c, 0, 0);
      const T b = shift_nc.value().at(n, c, 0, 0);
      const T* src = x.value().plane(n, c);
      T* dst = y.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) dst[i] = a * src[i] + b;
    }
  return make_result<T>(std::move(y), {x, scale_nc, shift_nc}, [plane](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& av = self.parents[1]->value;
    Tensor<T>* gx = parent_grad(self, 0);
    Tensor<T>* ga = parent_grad(self, 1);
    Tensor<T>* gb = parent_grad(self, 2);
    for (int n = 0; n < xv.n(); ++n)
      for (int c = 0; c < xv.c(); ++c) {
        const T* g = self.grad.plane(n, c);
        const T* src = xv.plane(n, c);
        T sg = 0, sgx = 0;
        for (std::size_t i = 0; i < plane; ++i) {
          sg += g[i];
          sgx += g[i] * src[i];
        }
        if (gx) {
          const T a = av.at(n, c, 0, 0);
          T* dst = gx->plane(n, c);
          for (std::size_t i = 0; i < plane; ++i) dst[i] += a * g[i];
        }
        if (ga) ga->at(n, c, 0, 0) += sgx;
        if (gb) gb->at(n, c, 0, 0) += sg;
      }
  });
}

/// Running statistics carried by a batch-normalization layer.
template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
};

/// Batch normalization over (n, h, w) per channel. In training mode batch
/// statistics are used and, when `update_stats` is set, folded into `stats`.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormStats<T>& stats, bool training,
                  bool update_stats, T eps = T(1e-5)) {
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  const T count = static_cast<T>(s.n * plane);
  std::vector<T> mean(s.c), inv_std(s.c);
  for (int c = 0; c < s.c; ++c) {
    if (training) {
      T m = 0;
      for (int n = 0; n < s.n; ++n) {
        const T* p = x.value().plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) m += p[i];
      }
      m /= count;
      T v = 0;
      for (int n = 0; n < s.n; ++n) {
        const T* p = x.value().plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) v += (p[i] - m) * (p[i] - m);
      }
      v /= count;
      mean[c] = m;
      inv_std[c] = T(1) / std::sqrt(v + eps);
      if (update_stats) {
        const T unbiased = count > 1 ? v * count / (count - 1) : v;
        stats.running_mean[c] = (T(1) - stats.momentum) * stats.running_mean[c] + stats.momentum * m;
        stats.running_var[c] = (T(1) - stats.momentum) * stats.running_var[c] + stats.momentum * unbiased;
      }
    } else {
      mean[c] = stats.running_mean[c];
      inv_std[c] = T(1) / std::sqrt(stats.running_var[c] + eps);
    }
  }
  Tensor<T> y(s);
  Tensor<T> xhat(s);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* p = x.value().plane(n, c);
      T* h = xhat.plane(n, c);
      T* o = y.plane(n, c);
      const T gm = gamma.value()[c], bt = beta.value()[c];
      for (std::size_t i = 0; i < plane; ++i) {
        h[i] = (p[i] - mean[c]) * inv_std[c];
        o[i] = gm * h[i] + bt;
      }
    }
  return make_result<T>(std::move(y), {x, gamma, beta},
                        [xhat = std::move(xhat), inv_std, plane, count, training](Node<T>& self) {
                          const auto& gy = self.grad;
                          const auto& gm = self.parents[1]->value;
                          Tensor<T>* gx = parent_grad(self, 0);
                          Tensor<T>* gg = parent_grad(self, 1);
                          Tensor<T>* gb = parent_grad(self, 2);
                          for (int c = 0; c < gy.c(); ++c) {
                            T sg = 0, sgh = 0;
                            for (int n = 0; n < gy.n(); ++n) {
                              const T* g = gy.plane(n, c);
                              const T* h = xhat.plane(n, c);
                              for (std::size_t i = 0; i < plane; ++i) {
                                sg += g[i];
                                sgh += g[i] * h[i];
                              }
                            }
                            if (gg) (*gg)[c] += sgh;
                            if (gb) (*gb)[c] += sg;
                            if (!gx) continue;
                            const T k = gm[c] * inv_std[c];
                            for (int n = 0; n < gy.n(); ++n) {
                              const T* g = gy.plane(n, c);
                              const T* h = xhat.plane(n, c);
                              T* d = gx->plane(n, c);
                              for (std::size_t i = 0; i < plane; ++i) {
                                d[i] += training ? k * (g[i] - sg / count - h[i] * sgh / count) : k * g[i];
                              }
                            }
                          }
                        });
}

}  // namespace modsynth
