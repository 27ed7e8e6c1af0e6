#pragma once

// Conditional-GAN objective: binary cross-entropy discriminator loss,
// non-saturating generator loss and the weighted pair of L1 terms on the
// synthesized target and on the LAF pseudo-target.

#include <algorithm>
#include <cmath>

#include "modsynth/autograd.hpp"
#include "modsynth/ops.hpp"
#include "modsynth/tensor.hpp"

namespace modsynth {

inline constexpr double kProbabilityClamp = 1e-7;

struct LossWeights {
  double lambda1 = 0.1;  // synthesized target L1
  double lambda2 = 0.1;  // pseudo-target L1

  void validate() const {
    if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw ContractError("loss weights must be nonnegative");
  }
};

inline double clamp_probability(double p) {
  return std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
}

/// -[ln D(real) + ln(1 - D(fake))], natural log, clamped probabilities.
inline double discriminator_loss(double d_real, double d_fake) {
  return -(std::log(clamp_probability(d_real)) + std::log(1.0 - clamp_probability(d_fake)));
}

/// Non-saturating generator term -ln D(fake).
inline double generator_adversarial_loss(double d_fake) { return -std::log(clamp_probability(d_fake)); }

/// lambda1 * mean|Y - synthesized| + lambda2 * mean|Y - pseudo|.
template <typename T>
double reconstruction_loss(const Tensor<T>& real, const Tensor<T>& synthesized, const Tensor<T>& pseudo,
                           const LossWeights& w) {
  real.require_same(synthesized, "reconstruction_loss(synthesized)");
  real.require_same(pseudo, "reconstruction_loss(pseudo)");
  w.validate();
  double s1 = 0, s2 = 0;
  for (std::size_t i = 0; i < real.size(); ++i) {
    s1 += std::abs(static_cast<double>(real[i]) - synthesized[i]);
    s2 += std::abs(static_cast<double>(real[i]) - pseudo[i]);
  }
  const double count = static_cast<double>(real.size());
  return w.lambda1 * (s1 / count) + w.lambda2 * (s2 / count);
}

template <typename T>
double total_generator_loss(double d_fake, const Tensor<T>& real, const Tensor<T>& synthesized,
                            const Tensor<T>& pseudo, const LossWeights& w) {
  return generator_adversarial_loss(d_fake) + reconstruction_loss(real, synthesized, pseudo, w);
}

// ---------------------------------------------------------------------------
// Differentiable forms (batch means) used by the trainer
// ---------------------------------------------------------------------------

/// mean |a - b| over all elements; b carries no gradient.
template <typename T>
Var<T> l1_mean(const Var<T>& a, const Tensor<T>& b) {
  a.value().require_same(b, "l1_mean");
  T acc = 0;
  for (std::size_t i = 0; i < b.size(); ++i) acc += std::abs(a.value()[i] - b[i]);
  const T count = static_cast<T>(b.size());
  return make_result<T>(Tensor<T>::scalar(acc / count), {a}, [b, count](Node<T>& self) {
    Tensor<T>* g = parent_grad(self, 0);
    if (!g) return;
    const auto& av = self.parents[0]->value;
    const T k = self.grad[0] / count;
    for (std::size_t i = 0; i < g->size(); ++i) {
      const T d = av[i] - b[i];
      (*g)[i] += d > T(0) ? k : (d < T(0) ? -k : T(0));
    }
  });
}

/// mean over the batch of -ln(clamp(p)) (or -ln(1 - clamp(p)) when `complement`).
/// Clamped entries receive no gradient.
template <typename T>
Var<T> neg_log_mean(const Var<T>& p, bool complement) {
  const auto& pv = p.value();
  const T lo = T(kProbabilityClamp), hi = T(1) - T(kProbabilityClamp);
  T acc = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const T q = std::clamp(pv[i], lo, hi);
    acc -= std::log(complement ? T(1) - q : q);
  }
  const T count = static_cast<T>(pv.size());
  return make_result<T>(Tensor<T>::scalar(acc / count), {p}, [complement, count, lo, hi](Node<T>& self) {
    Tensor<T>* g = parent_grad(self, 0);
    if (!g) return;
    const auto& pv = self.parents[0]->value;
    const T k = self.grad[0] / count;
    for (std::size_t i = 0; i < g->size(); ++i) {
      const T q = pv[i];
      if (q < lo || q > hi) continue;
      (*g)[i] += complement ? k / (T(1) - q) : -k / q;
    }
  });
}

template <typename T>
Var<T> discriminator_loss(const Var<T>& d_real, const Var<T>& d_fake) {
  return add(neg_log_mean(d_real, false), neg_log_mean(d_fake, true));
}

template <typename T>
Var<T> generator_adversarial_loss(const Var<T>& d_fake) {
  return neg_log_mean(d_fake, false);
}

template <typename T>
Var<T> reconstruction_loss(const Tensor<T>& real, const Var<T>& synthesized, const Var<T>& pseudo,
                           const LossWeights& w) {
  w.validate();
  return add(scale(l1_mean(synthesized, real), T(w.lambda1)), scale(l1_mean(pseudo, real), T(w.lambda2)));
}

/// Components of the generator objective; `total` carries the gradient.
template <typename T>
struct GeneratorLoss {
  Var<T> total;
  Var<T> adversarial;
  Var<T> reconstruction;
};

template <typename T>
GeneratorLoss<T> total_generator_loss(const Var<T>& d_fake, const Tensor<T>& real, const Var<T>& synthesized,
                                      const Var<T>& pseudo, const LossWeights& w) {
  GeneratorLoss<T> out;
  out.adversarial = generator_adversarial_loss(d_fake);
  out.reconstruction = reconstruction_loss(real, synthesized, pseudo, w);
  out.total = add(out.adversarial, out.reconstruction);
  return out;
}

}  // namespace modsynth
