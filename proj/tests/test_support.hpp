#pragma once

// Test-only helpers: random tensors and a central finite-difference oracle
// that evaluates the forward graph only.

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "modsynth/autograd.hpp"
#include "modsynth/rng.hpp"
#include "modsynth/tensor.hpp"

namespace modsynth::testing {

inline Tensor<double> random_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(s);
  for (auto& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

/// Central difference d loss / d target[i] for each listed index. The loss
/// closure must recompute its value from the current contents of `target`.
inline std::vector<double> central_differences(Tensor<double>& target, const std::vector<std::size_t>& indices,
                                               const std::function<double()>& loss, double step = 1e-4) {
  std::vector<double> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    const double saved = target[i];
    target[i] = saved + step;
    const double up = loss();
    target[i] = saved - step;
    const double down = loss();
    target[i] = saved;
    out.push_back((up - down) / (2.0 * step));
  }
  return out;
}

inline std::vector<std::size_t> all_indices(const Tensor<double>& t) {
  std::vector<std::size_t> idx(t.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

/// ||a - n|| / max(||a||, ||n||); zero when both vanish.
inline double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double scale = std::sqrt(std::max(na, nn));
  return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

/// Linear functional sum(r * y) used to turn a tensor output into a scalar.
inline double project(const Tensor<double>& y, const Tensor<double>& r) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
  return s;
}

/// Fresh directory under the system temp path, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("modsynth_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace modsynth::testing
