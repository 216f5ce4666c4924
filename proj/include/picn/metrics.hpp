#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "picn/networks.hpp"
#include "picn/tensor.hpp"

namespace picn {

// Images are [C,H,W] (or any matching shapes) with values in [-1,1].
double l1(const Tensor<float>& a, const Tensor<float>& b);
// 10 log10(1 / MSE) after mapping both images to [0,1]; 100 when MSE < 1e-10.
double psnr(const Tensor<float>& a, const Tensor<float>& b);
// Mean |horizontal difference| + mean |vertical difference| of a [C,H,W] image.
double tv(const Tensor<float>& img);

struct Diversity {
  double full = 0;
  double masked = 0;   // over hidden pixels (mask 0) only; 0 when nothing is hidden
  double visible = 0;  // over visible pixels only; 0 when nothing is visible
};
// Mean over unordered pairs of the mean absolute difference. mask is [1,H,W].
Diversity diversity(const std::vector<Tensor<float>>& samples, const Tensor<float>& mask);
// Mean absolute difference to `reference` over visible pixels, averaged over samples.
double visible_l1(const std::vector<Tensor<float>>& samples, const Tensor<float>& reference, const Tensor<float>& mask);

// Indices of the k highest scores, ties resolved toward the lower index.
std::vector<std::size_t> rank_samples(const std::vector<double>& scores, std::size_t k);
// Scores completions ([C,H,W] each) with the generative-path discriminator.
std::vector<double> disc_scores(Discriminator<float>& d, const std::vector<Tensor<float>>& completions);
std::vector<std::size_t> rank_samples(Discriminator<float>& d, const std::vector<Tensor<float>>& completions,
                                      std::size_t k);

// Index (into `candidates`) with the best balance of low l1 and high PSNR
// against `truth`: smallest sum of the two ranks, ties toward the earlier
// candidate.
std::size_t best_balance(const std::vector<Tensor<float>>& candidates, const Tensor<float>& truth);

struct MetricsReport {
  std::string name;
  double l1 = 0, psnr = 0, tv = 0, diversity_full = 0, diversity_masked = 0;

  static std::string csv_header();  // name,l1,psnr,tv,diversity_full,diversity_masked
  std::string csv_row() const;
};

MetricsReport aggregate(const std::vector<MetricsReport>& rows, const std::string& name = "mean");
std::string format_table(const std::vector<MetricsReport>& rows);

}  // namespace picn
