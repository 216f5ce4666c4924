#pragma once

#include <cstddef>
#include <span>

#include "picn/rng.hpp"
#include "picn/tensor.hpp"

namespace picn {

// Diagonal Gaussian parameterised by mean and natural-log variance, both [B,Z].
template <typename T>
struct DiagGaussian {
  Tensor<T> mu;
  Tensor<T> logvar;

  std::size_t batch() const { return mu.dim(0); }
  std::size_t latent_dim() const { return mu.dim(1); }
  // Throws ShapeError / NumericalError when the invariants do not hold.
  void validate() const;
  Tensor<T> sigma() const;  // exp(0.5 logvar), untracked
};

// Latent prior of a hole with `hidden` missing pixels out of `total`.
struct AdaptivePrior {
  std::size_t hidden = 0;
  std::size_t total = 1;
  double sigma_min_sq = 0.25;
};

// max(sigma_min_sq, hidden / total): grows with the hole, 1 for a full image.
double adaptive_sigma_sq(const AdaptivePrior& prior);

// N(0, sigma^2(n_b) I) for each instance b, as a constant DiagGaussian.
template <typename T>
DiagGaussian<T> prior_gaussian(std::span<const AdaptivePrior> priors, std::size_t latent_dim);

template <typename T>
struct LatentSample {
  Tensor<T> z;
  Tensor<T> eps;
};

// z = mu + exp(0.5 logvar) * eps with eps ~ N(0, I) drawn from rng.
template <typename T>
LatentSample<T> sample(const DiagGaussian<T>& dist, Rng& rng);
// Same, with caller-provided noise (eps is never differentiated).
template <typename T>
LatentSample<T> sample_with_noise(const DiagGaussian<T>& dist, const Tensor<T>& eps);

// KL(q || p) in closed form, summed over latent dimensions and averaged over
// the batch. Differentiable in all four parameter tensors.
template <typename T>
Tensor<T> kl_divergence(const DiagGaussian<T>& q, const DiagGaussian<T>& p);

}  // namespace picn
