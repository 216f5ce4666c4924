#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "picn/rng.hpp"
#include "picn/tensor.hpp"

namespace picn {

// Named handles into a module's state. Handles share storage with the
// module, so optimizers and checkpoint loaders write through them.
template <typename T>
struct StateDict {
  std::vector<std::pair<std::string, Tensor<T>>> params;
  std::vector<std::pair<std::string, Tensor<T>>> buffers;
};

// While alive on a thread, spectral-norm forwards on that thread use the
// stored u vector without advancing the power iteration. Gradient checks
// rely on this to evaluate a fixed function.
class SpectralNormFreeze {
 public:
  SpectralNormFreeze();
  ~SpectralNormFreeze();
  SpectralNormFreeze(const SpectralNormFreeze&) = delete;
  SpectralNormFreeze& operator=(const SpectralNormFreeze&) = delete;
  static bool active();

 private:
  bool previous_;
};

// Power-iteration estimate of the largest singular value of a weight viewed
// as (out, in*k*k). u persists between calls.
template <typename T>
struct SpectralNorm {
  Tensor<T> u;         // [out], unit norm
  T last_sigma = T(0); // most recent estimate

  SpectralNorm() = default;
  SpectralNorm(std::size_t rows, Rng& rng);

  // One power-iteration step (unless frozen or not recording), then
  // weight / sigma_hat with sigma_hat = u^T W v floored at 1e-12. The
  // division is differentiable with respect to the weight.
  Tensor<T> normalize(const Tensor<T>& weight);
  // Runs `iterations` power steps on u without producing a tensor.
  void power_iterate(const Tensor<T>& weight, int iterations);
};

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, Rng& rng, bool bias = true,
         bool spectral = true);

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> effective_weight();
  void collect(const std::string& prefix, StateDict<T>& out) const;

  Tensor<T> weight;
  Tensor<T> bias;  // undefined when disabled
  std::optional<SpectralNorm<T>> sn;
  std::size_t pad = 0;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in_features, std::size_t out_features, Rng& rng, bool spectral = true);

  Tensor<T> forward(const Tensor<T>& x);  // [B,in] -> [B,out]
  void collect(const std::string& prefix, StateDict<T>& out) const;

  Tensor<T> weight;  // [out,in]
  Tensor<T> bias;    // [out]
  std::optional<SpectralNorm<T>> sn;
};

inline constexpr double kInstanceNormEps = 1e-5;

// Per-(instance, channel) normalisation with a learned affine map.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift,
                        T eps = T(kInstanceNormEps));

template <typename T>
class InstanceNorm {
 public:
  InstanceNorm() = default;
  explicit InstanceNorm(std::size_t channels);
  Tensor<T> forward(const Tensor<T>& x) const { return instance_norm(x, scale, shift); }
  void collect(const std::string& prefix, StateDict<T>& out) const;

  Tensor<T> scale;
  Tensor<T> shift;
};

enum class BlockKind { start, plain, down, up };

// Residual block. Main path: [instance norm (up only)] -> act -> conv3x3 ->
// act -> conv3x3, with the activation before the first conv omitted for the
// start block (raw image input). down pools after both convolutions and the
// 1x1 shortcut; up upsamples before the first conv and the shortcut.
template <typename T>
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(BlockKind kind, std::size_t in_ch, std::size_t out_ch, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x);
  void collect(const std::string& prefix, StateDict<T>& out) const;

  BlockKind kind = BlockKind::plain;
  std::size_t in_ch = 0, out_ch = 0;
  Conv2d<T> conv1, conv2, shortcut;
  std::optional<InstanceNorm<T>> norm;
};

template <typename T>
struct AttentionOutput {
  Tensor<T> y_d;   // gamma_d * c_d + f_d
  Tensor<T> y_e;   // gamma_e * (1 - M) * c_e + M * f_e
  Tensor<T> beta;  // [B, N, N]; row j holds the weights of output position j over all sources
};

// beta = softmax_i(Q(f_i)^T Q(f_j)) for Q a 1x1 convolution of f.
template <typename T>
Tensor<T> attention_scores(Conv2d<T>& query, const Tensor<T>& f);
// c[:, j] = sum_i beta[j, i] f[:, i], returned in f's [B,C,H,W] layout.
template <typename T>
Tensor<T> attend(const Tensor<T>& beta, const Tensor<T>& f);

// Decoder self-attention plus mask-gated contextual flow over encoder features.
template <typename T>
class ShortLongAttention {
 public:
  ShortLongAttention() = default;
  ShortLongAttention(std::size_t decoder_ch, Rng& rng);

  // mask: [B,1,H,W] with 1 = visible, 0 = hole, already at the feature resolution.
  AttentionOutput<T> forward(const Tensor<T>& f_d, const Tensor<T>& f_e, const Tensor<T>& mask);
  void collect(const std::string& prefix, StateDict<T>& out) const;

  Conv2d<T> query;
  Tensor<T> gamma_d;  // [1], starts at 0
  Tensor<T> gamma_e;  // [1], starts at 0
};

// SA-GAN style self-attention used inside the discriminator: gamma * c + f.
template <typename T>
class SelfAttention {
 public:
  SelfAttention() = default;
  SelfAttention(std::size_t channels, Rng& rng);

  Tensor<T> forward(const Tensor<T>& f, Tensor<T>* beta_out = nullptr);
  void collect(const std::string& prefix, StateDict<T>& out) const;

  Conv2d<T> query;
  Tensor<T> gamma;  // [1], starts at 0
};

}  // namespace picn
