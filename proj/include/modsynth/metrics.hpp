#pragma once

// Image-quality metrics (PSNR, SSIM, NRMSE), per-slice reports with
// aggregates, and the paired two-tailed t-test used for method comparison.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "modsynth/tensor.hpp"

namespace modsynth {

// ---------------------------------------------------------------------------
// Summation
// ---------------------------------------------------------------------------

/// Neumaier compensated sum; order-independent to within rounding.
class CompensatedSum {
 public:
  void add(double v) {
    const double t = sum_ + v;
    if (std::abs(sum_) >= std::abs(v)) {
      carry_ += (sum_ - t) + v;
    } else {
      carry_ += (v - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + carry_; }

 private:
  double sum_ = 0.0;
  double carry_ = 0.0;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1)
  std::size_t count = 0;
};

inline MeanStd mean_std(const std::vector<double>& values) {
  MeanStd r;
  r.count = values.size();
  if (values.empty()) return r;
  CompensatedSum s;
  for (double v : values) s.add(v);
  r.mean = s.value() / static_cast<double>(values.size());
  if (values.size() > 1) {
    CompensatedSum q;
    for (double v : values) q.add((v - r.mean) * (v - r.mean));
    r.std = std::sqrt(q.value() / static_cast<double>(values.size() - 1));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void require_same_extent(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.size() != b.size()) {
    throw ContractError(std::string(what) + ": image shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
}
}  // namespace detail

/// 10 log10(A * MAX^2 / ||Y - Y'||^2) with MAX the real image's maximum.
/// Identical images give +infinity.
template <typename T>
double psnr(const Tensor<T>& real, const Tensor<T>& synth) {
  detail::require_same_extent(real, synth, "psnr");
  CompensatedSum sse;
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < real.size(); ++i) {
    const double d = static_cast<double>(real[i]) - static_cast<double>(synth[i]);
    sse.add(d * d);
    peak = std::max(peak, static_cast<double>(real[i]));
  }
  if (sse.value() == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(static_cast<double>(real.size()) * peak * peak / sse.value());
}

struct SsimOptions {
  double dynamic_range = 1.0;
  /// Gaussian-windowed SSIM (11x11, sigma 1.5) averaged over the image instead
  /// of the single global-statistics evaluation.
  bool windowed = false;
};

namespace detail {
inline double ssim_from_moments(double mx, double my, double vx, double vy, double cov, double range) {
  // Canonical operand order keeps ssim(a, b) == ssim(b, a) bit-exact even
  // when the compiler contracts products into fused multiply-adds.
  if (mx < my || (mx == my && vx < vy)) {
    std::swap(mx, my);
    std::swap(vx, vy);
  }
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);
  return ((2.0 * (mx * my) + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
}
}  // namespace detail

/// Structural similarity from whole-image means, population variances and
/// covariance, with C1 = (0.01 L)^2 and C2 = (0.03 L)^2.
template <typename T>
double ssim(const Tensor<T>& real, const Tensor<T>& synth, const SsimOptions& opt = {}) {
  detail::require_same_extent(real, synth, "ssim");
  const std::size_t n = real.size();
  if (!opt.windowed) {
    CompensatedSum sx, sy;
    for (std::size_t i = 0; i < n; ++i) {
      sx.add(real[i]);
      sy.add(synth[i]);
    }
    const double mx = sx.value() / n, my = sy.value() / n;
    CompensatedSum vx, vy, cxy;
    for (std::size_t i = 0; i < n; ++i) {
      const double dx = real[i] - mx, dy = synth[i] - my;
      vx.add(dx * dx);
      vy.add(dy * dy);
      cxy.add(dx * dy);
    }
    return detail::ssim_from_moments(mx, my, vx.value() / n, vy.value() / n, cxy.value() / n, opt.dynamic_range);
  }
  const int h = real.h(), w = real.w();
  constexpr int kWin = 11;
  if (h < kWin || w < kWin) throw ContractError("windowed ssim needs images of at least 11x11");
  double kernel[kWin];
  double ksum = 0;
  for (int i = 0; i < kWin; ++i) {
    const double d = i - kWin / 2;
    kernel[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    ksum += kernel[i];
  }
  for (double& k : kernel) k /= ksum;
  CompensatedSum total;
  std::size_t windows = 0;
  for (int y = 0; y + kWin <= h; ++y)
    for (int x = 0; x + kWin <= w; ++x) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int j = 0; j < kWin; ++j)
        for (int i = 0; i < kWin; ++i) {
          const double k = kernel[j] * kernel[i];
          const double a = real[static_cast<std::size_t>(y + j) * w + x + i];
          const double b = synth[static_cast<std::size_t>(y + j) * w + x + i];
          mx += k * a;
          my += k * b;
          sxx += k * a * a;
          syy += k * b * b;
          sxy += k * a * b;
        }
      total.add(detail::ssim_from_moments(mx, my, sxx - mx * mx, syy - my * my, sxy - mx * my, opt.dynamic_range));
      ++windows;
    }
  return total.value() / static_cast<double>(windows);
}

/// sqrt(sum (synth - real)^2 / sum real^2); undefined for an all-zero real image.
template <typename T>
double nrmse(const Tensor<T>& real, const Tensor<T>& synth) {
  detail::require_same_extent(real, synth, "nrmse");
  CompensatedSum num, den;
  for (std::size_t i = 0; i < real.size(); ++i) {
    const double d = static_cast<double>(synth[i]) - static_cast<double>(real[i]);
    num.add(d * d);
    den.add(static_cast<double>(real[i]) * real[i]);
  }
  if (den.value() == 0.0) throw ContractError("nrmse: reference image is all zero");
  return std::sqrt(num.value() / den.value());
}

// ---------------------------------------------------------------------------
// Student t distribution
// ---------------------------------------------------------------------------

namespace detail {

/// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr double kTiny = 1e-300;
  constexpr double kEps = 1e-16;
  double c = 1.0;
  double d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double regularized_incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

/// Two-tailed p-value P(|T| >= |t|) for Student's t with `df` degrees of freedom.
inline double student_t_two_tailed(double t, double df) {
  if (std::isinf(t)) return 0.0;
  return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  std::size_t df = 0;
};

/// Paired two-tailed t-test on differences a - b. All-zero differences give
/// p = 1; zero variance with a nonzero mean gives t = +/-inf and p = 0.
inline TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ContractError("paired_t_test: samples differ in length");
  if (a.size() < 2) throw ContractError("paired_t_test: need at least two pairs");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const MeanStd ms = mean_std(d);
  TTestResult r;
  r.df = d.size() - 1;
  const bool all_zero = std::all_of(d.begin(), d.end(), [](double v) { return v == 0.0; });
  if (all_zero) return r;
  if (ms.std == 0.0) {
    r.t = ms.mean > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    r.p = 0.0;
    return r;
  }
  r.t = ms.mean / (ms.std / std::sqrt(static_cast<double>(d.size())));
  r.p = student_t_two_tailed(r.t, static_cast<double>(r.df));
  return r;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct SliceMetrics {
  std::string subject_id;
  int slice_index = 0;
  double psnr = 0.0;
  double ssim = 0.0;
  double nrmse = 0.0;
};

/// Evaluates one slice pair given as intensities in [0, 1].
template <typename T>
SliceMetrics evaluate_slice(const std::string& subject, int index, const Tensor<T>& real, const Tensor<T>& synth,
                            const SsimOptions& opt = {}) {
  return {subject, index, psnr(real, synth), ssim(real, synth, opt), nrmse(real, synth)};
}

struct MetricReport {
  std::vector<SliceMetrics> slices;

  struct Aggregate {
    MeanStd psnr, ssim, nrmse;
    std::size_t sample_count = 0;
    std::size_t infinite_psnr = 0;  // excluded from the psnr aggregate; all infinite gives an infinite mean
  };

  std::vector<double> column(double SliceMetrics::*field) const {
    std::vector<double> out;
    out.reserve(slices.size());
    for (const auto& s : slices) out.push_back(s.*field);
    return out;
  }

  Aggregate aggregate() const {
    Aggregate a;
    a.sample_count = slices.size();
    std::vector<double> finite_psnr;
    for (const auto& s : slices) {
      if (std::isinf(s.psnr)) {
        ++a.infinite_psnr;
      } else {
        finite_psnr.push_back(s.psnr);
      }
    }
    a.psnr = mean_std(finite_psnr);
    if (finite_psnr.empty() && a.infinite_psnr > 0) a.psnr.mean = std::numeric_limits<double>::infinity();
    a.ssim = mean_std(column(&SliceMetrics::ssim));
    a.nrmse = mean_std(column(&SliceMetrics::nrmse));
    return a;
  }
};

inline std::string format_mean_std(const MeanStd& m, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << m.mean << " ± " << m.std;
  return os.str();
}

/// One row per slice (subject_id, slice_index, psnr, ssim, nrmse) followed by
/// an aggregate footer "aggregate,<count>,mean ± std,...".
inline void write_metric_csv(std::ostream& os, const MetricReport& report) {
  os << "subject_id,slice_index,psnr,ssim,nrmse\n";
  os << std::setprecision(10);
  for (const auto& s : report.slices) {
    os << s.subject_id << ',' << s.slice_index << ',';
    if (std::isinf(s.psnr)) {
      os << "inf";
    } else {
      os << s.psnr;
    }
    os << ',' << s.ssim << ',' << s.nrmse << '\n';
  }
  const auto a = report.aggregate();
  os << "aggregate," << a.sample_count << ',' << format_mean_std(a.psnr) << ',' << format_mean_std(a.ssim) << ','
     << format_mean_std(a.nrmse) << '\n';
}

}  // namespace modsynth
