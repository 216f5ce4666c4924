#include "picn/completion.hpp"

#include <algorithm>
#include <stdexcept>

#include "picn/data.hpp"
#include "picn/ops.hpp"

namespace picn {

Tensor<float> composite(const Tensor<float>& image, const Tensor<float>& mask, const Tensor<float>& generated) {
  if (image.shape() != generated.shape())
    throw ShapeError("composite: image " + shape_str(image.shape()) + " vs generated " +
                     shape_str(generated.shape()));
  if (mask.rank() != 3 || mask.dim(0) != 1 || mask.dim(1) != image.dim(1) || mask.dim(2) != image.dim(2))
    throw ShapeError("composite: mask " + shape_str(mask.shape()) + " does not cover " + shape_str(image.shape()));
  const std::size_t hw = mask.numel();
  std::vector<float> out(image.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask[i % hw] > 0.5f ? image[i] : generated[i];
  return Tensor<float>(image.shape(), std::move(out));
}

Completions complete(ModelBundle<float>& model, const Tensor<float>& image, const Tensor<float>& mask, std::size_t k,
                     Rng& rng, LatentSource source, std::size_t chunk) {
  if (k == 0) throw std::invalid_argument("complete: sample count must be positive");
  if (chunk == 0) throw std::invalid_argument("complete: chunk must be positive");
  const auto& cfg = model.cfg;
  if (image.rank() != 3 || image.dim(0) != cfg.channels || image.dim(1) != cfg.image_size ||
      image.dim(2) != cfg.image_size)
    throw ShapeError("complete: image " + shape_str(image.shape()) + " does not match the model (" +
                     std::to_string(cfg.channels) + "x" + std::to_string(cfg.image_size) + "x" +
                     std::to_string(cfg.image_size) + ")");
  NoGradGuard ng;
  const auto sample = make_sample(image, mask);
  Completions out;
  const std::size_t z_dim = cfg.latent_dim;
  for (std::size_t done = 0; done < k;) {
    const std::size_t n = std::min(chunk, k - done);
    const auto batch = collate<float>(std::vector<Sample>(n, sample));
    const auto f_m = model.encode(batch.masked);
    const auto p = model.infer_prior(f_m.bottleneck());
    if (!out.prior_sigma.defined()) out.prior_sigma = ops::reshape(ops::slice(p.sigma(), 0, 0, 1), Shape{z_dim});
    std::vector<float> eps(n * z_dim);
    for (auto& e : eps) e = static_cast<float>(rng.normal());
    const Tensor<float> noise({n, z_dim}, std::move(eps));
    const auto z = source == LatentSource::conditional_prior ? sample_with_noise(p, noise).z : noise;
    const auto gen = model.generate(z, f_m, batch.mask).back();
    for (std::size_t i = 0; i < n; ++i) {
      auto one = ops::reshape(ops::slice(gen, 0, i, 1), image.shape());
      out.composite.push_back(composite(image, mask, one));
      out.raw.push_back(std::move(one));
    }
    done += n;
  }
  return out;
}

double mean_prior_sigma(ModelBundle<float>& model, const std::vector<Tensor<float>>& images,
                        const Tensor<float>& mask) {
  if (images.empty()) throw std::invalid_argument("mean_prior_sigma: no images");
  NoGradGuard ng;
  std::vector<Sample> samples;
  for (const auto& img : images) samples.push_back(make_sample(img, mask));
  double total = 0;
  std::size_t count = 0;
  constexpr std::size_t kChunk = 32;
  for (std::size_t i = 0; i < samples.size(); i += kChunk) {
    const std::vector<Sample> part(samples.begin() + i, samples.begin() + std::min(samples.size(), i + kChunk));
    const auto batch = collate<float>(part);
    const auto sigma = model.infer_prior(model.encode(batch.masked).bottleneck()).sigma();
    for (std::size_t j = 0; j < sigma.numel(); ++j) total += sigma[j];
    count += sigma.numel();
  }
  return total / static_cast<double>(count);
}

}  // namespace picn
