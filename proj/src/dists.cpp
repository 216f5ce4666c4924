#include "picn/dists.hpp"

#include <algorithm>
#include <cmath>

#include "picn/ops.hpp"

namespace picn {

template <typename T>
void DiagGaussian<T>::validate() const {
  if (!mu.defined() || !logvar.defined()) throw ShapeError("DiagGaussian with undefined parameters");
  if (mu.rank() != 2 || mu.shape() != logvar.shape())
    throw ShapeError("DiagGaussian expects matching [B,Z] mu/logvar, got " + shape_str(mu.shape()) + " and " +
                     shape_str(logvar.shape()));
  for (const T v : logvar.data())
    if (!std::isfinite(v)) throw NumericalError("DiagGaussian logvar is not finite");
}

template <typename T>
Tensor<T> DiagGaussian<T>::sigma() const {
  std::vector<T> s(logvar.numel());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::exp(T(0.5) * logvar[i]);
  return Tensor<T>(logvar.shape(), std::move(s));
}

double adaptive_sigma_sq(const AdaptivePrior& prior) {
  const double fraction = static_cast<double>(prior.hidden) / static_cast<double>(prior.total);
  return std::max(prior.sigma_min_sq, fraction);
}

template <typename T>
DiagGaussian<T> prior_gaussian(std::span<const AdaptivePrior> priors, std::size_t latent_dim) {
  const auto b = priors.size();
  std::vector<T> logvar(b * latent_dim);
  for (std::size_t i = 0; i < b; ++i)
    std::fill_n(logvar.begin() + i * latent_dim, latent_dim, static_cast<T>(std::log(adaptive_sigma_sq(priors[i]))));
  return {Tensor<T>::zeros({b, latent_dim}), Tensor<T>({b, latent_dim}, std::move(logvar))};
}

template <typename T>
LatentSample<T> sample(const DiagGaussian<T>& dist, Rng& rng) {
  std::vector<T> eps(dist.mu.numel());
  for (auto& e : eps) e = static_cast<T>(rng.normal());
  return sample_with_noise(dist, Tensor<T>(dist.mu.shape(), std::move(eps)));
}

template <typename T>
LatentSample<T> sample_with_noise(const DiagGaussian<T>& dist, const Tensor<T>& eps) {
  const auto std_dev = ops::exp(ops::scale(dist.logvar, T(0.5)));
  return {ops::add(dist.mu, ops::mul(std_dev, eps)), eps};
}

template <typename T>
Tensor<T> kl_divergence(const DiagGaussian<T>& q, const DiagGaussian<T>& p) {
  if (q.mu.shape() != p.mu.shape() || q.logvar.shape() != p.logvar.shape() || q.mu.shape() != q.logvar.shape())
    throw ShapeError("kl_divergence shape mismatch: " + shape_str(q.mu.shape()) + " vs " + shape_str(p.mu.shape()));
  using namespace ops;
  // 0.5 * [lv_p - lv_q + (exp(lv_q) + (mu_q - mu_p)^2) / exp(lv_p) - 1]
  const auto ratio = exp(sub(q.logvar, p.logvar));
  const auto spread = mul(square(sub(q.mu, p.mu)), exp(scale(p.logvar, T(-1))));
  const auto inner = add_scalar(add(sub(p.logvar, q.logvar), add(ratio, spread)), T(-1));
  return scale(mean(sum(inner, {1}), {0}), T(0.5));
}

template struct DiagGaussian<float>;
template struct DiagGaussian<double>;
template DiagGaussian<float> prior_gaussian<float>(std::span<const AdaptivePrior>, std::size_t);
template DiagGaussian<double> prior_gaussian<double>(std::span<const AdaptivePrior>, std::size_t);
template LatentSample<float> sample<float>(const DiagGaussian<float>&, Rng&);
template LatentSample<double> sample<double>(const DiagGaussian<double>&, Rng&);
template LatentSample<float> sample_with_noise<float>(const DiagGaussian<float>&, const Tensor<float>&);
template LatentSample<double> sample_with_noise<double>(const DiagGaussian<double>&, const Tensor<double>&);
template Tensor<float> kl_divergence<float>(const DiagGaussian<float>&, const DiagGaussian<float>&);
template Tensor<double> kl_divergence<double>(const DiagGaussian<double>&, const DiagGaussian<double>&);

}  // namespace picn
