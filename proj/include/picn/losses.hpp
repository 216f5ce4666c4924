#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "picn/dists.hpp"
#include "picn/tensor.hpp"

namespace picn {

struct LossWeights {
  double alpha_kl = 20.0;
  double alpha_app = 20.0;
  double alpha_ad = 1.0;
  std::size_t n_scale = 1;  // multiplies alpha_kl; training sets it to the output scale count

  double effective_kl() const { return alpha_kl * static_cast<double>(n_scale); }
  void validate() const;
};

// Plain values of one step's losses.
struct LossReport {
  double kl_r = 0, kl_g = 0, app_r = 0, app_g = 0, ad_r = 0, ad_g = 0, total = 0;

  static std::string csv_header();  // step,kl_r,kl_g,app_r,app_g,ad_r,ad_g,total
  std::string csv_row(std::size_t step) const;
  bool finite() const;
};

// The six differentiable components; unset (undefined) tensors count as 0.
template <typename T>
struct LossTerms {
  Tensor<T> kl_r, kl_g, app_r, app_g, ad_r, ad_g;
};

// KL(q || N(0, sigma^2(n) I)) with one sigma per instance.
template <typename T>
Tensor<T> loss_kl_r(const DiagGaussian<T>& q, std::span<const AdaptivePrior> priors);
// KL(q || p); gradients reach both heads.
template <typename T>
Tensor<T> loss_kl_g(const DiagGaussian<T>& q, const DiagGaussian<T>& p);
// Mean absolute error over full images, averaged over scales.
template <typename T>
Tensor<T> loss_app_r(const std::vector<Tensor<T>>& rec, const std::vector<Tensor<T>>& truth);
// Absolute error on visible pixels (mask 1) divided by the visible element
// count, averaged over scales. Hidden values of `gen` never enter the sum.
template <typename T>
Tensor<T> loss_app_g(const std::vector<Tensor<T>>& gen, const std::vector<Tensor<T>>& truth,
                     const std::vector<Tensor<T>>& masks);
// Batch mean of ||feat_rec - feat_real||_2.
template <typename T>
Tensor<T> loss_ad_r(const Tensor<T>& feat_rec, const Tensor<T>& feat_real);
// Batch mean of (score - 1)^2.
template <typename T>
Tensor<T> loss_ad_g(const Tensor<T>& score_gen);
// Batch mean of 0.5 [(real - 1)^2 + fake^2].
template <typename T>
Tensor<T> loss_disc(const Tensor<T>& score_real, const Tensor<T>& score_fake);

template <typename T>
Tensor<T> total_loss(const LossTerms<T>& terms, const LossWeights& w);
template <typename T>
LossReport make_report(const LossTerms<T>& terms, const LossWeights& w);
// Weighted sum of plain values; the LossReport invariant.
double weighted_total(const LossReport& r, const LossWeights& w);

}  // namespace picn
