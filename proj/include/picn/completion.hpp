#pragma once

#include <cstddef>
#include <vector>

#include "picn/networks.hpp"
#include "picn/rng.hpp"
#include "picn/tensor.hpp"

namespace picn {

// Where test-time latent codes come from.
enum class LatentSource {
  conditional_prior,  // z ~ p(z | I_m)
  standard_normal,    // z ~ N(0, I), for models trained against a fixed prior
};

struct Completions {
  std::vector<Tensor<float>> raw;        // full-resolution generator outputs, [C,H,W]
  std::vector<Tensor<float>> composite;  // visible pixels copied from the input
  Tensor<float> prior_sigma;             // [Z] sigma of p(z | I_m)
};

// Output pixel = input where mask is 1, generated where mask is 0. Shapes
// [C,H,W] for image/generated and [1,H,W] for the mask.
Tensor<float> composite(const Tensor<float>& image, const Tensor<float>& mask, const Tensor<float>& generated);

// Draws k completions of one [C,H,W] image under a [1,H,W] mask, batching at
// most `chunk` samples per forward pass. Runs without gradient tracking.
Completions complete(ModelBundle<float>& model, const Tensor<float>& image, const Tensor<float>& mask, std::size_t k,
                     Rng& rng, LatentSource source = LatentSource::conditional_prior, std::size_t chunk = 25);

// Mean of exp(0.5 logvar) of p(z | I_m) over every image and latent unit.
double mean_prior_sigma(ModelBundle<float>& model, const std::vector<Tensor<float>>& images,
                        const Tensor<float>& mask);

}  // namespace picn
