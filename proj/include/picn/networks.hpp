#pragma once

#include <cstdint>
#include <vector>

#include "picn/dists.hpp"
#include "picn/layers.hpp"
#include "picn/rng.hpp"

namespace picn {

struct NetConfig {
  std::size_t image_size = 32;
  std::size_t channels = 1;
  std::size_t base_width = 8;
  std::size_t latent_dim = 32;
  std::size_t down_blocks = 3;
  std::size_t attention_resolution = 8;
  std::size_t output_scales = 2;
  std::size_t prior_blocks = 3;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
  std::size_t bottleneck() const { return image_size >> down_blocks; }
  // Channel width of encoder level l (l = 0 is full resolution).
  std::size_t width(std::size_t level) const;
  std::size_t level_of(std::size_t resolution) const;
};

inline constexpr double kLogvarMin = -30.0;
inline constexpr double kLogvarMax = 20.0;

template <typename T>
struct EncoderFeatures {
  std::vector<Tensor<T>> levels;  // levels[l] at image_size / 2^l
  const Tensor<T>& bottleneck() const { return levels.back(); }
};

template <typename T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const NetConfig& cfg, Rng& rng);
  EncoderFeatures<T> forward(const Tensor<T>& img);
  void collect(const std::string& prefix, StateDict<T>& out) const;

  NetConfig cfg;
  std::vector<ResBlock<T>> blocks;
};

// Residual stack + projection to a diagonal Gaussian over the latent code.
template <typename T>
class InferenceHead {
 public:
  InferenceHead() = default;
  InferenceHead(const NetConfig& cfg, std::size_t depth, Rng& rng);
  DiagGaussian<T> forward(const Tensor<T>& feature);
  void collect(const std::string& prefix, StateDict<T>& out) const;

  NetConfig cfg;
  std::vector<ResBlock<T>> blocks;
  Linear<T> project;
};

template <typename T>
class Generator {
 public:
  Generator() = default;
  Generator(const NetConfig& cfg, Rng& rng);

  // Images coarse to fine (output_scales of them), each through tanh.
  // f_e must sit at the attention resolution; mask is full resolution.
  std::vector<Tensor<T>> forward(const Tensor<T>& z, const Tensor<T>& f_m, const Tensor<T>& f_e,
                                 const Tensor<T>& mask, Tensor<T>* beta_out = nullptr);
  void collect(const std::string& prefix, StateDict<T>& out) const;

  NetConfig cfg;
  Linear<T> latent_proj;
  Conv2d<T> fuse;
  std::vector<ResBlock<T>> ups;
  ShortLongAttention<T> attention;
  Conv2d<T> attention_fuse;
  std::vector<Conv2d<T>> heads;  // one per output scale
};

template <typename T>
struct DiscOutput {
  Tensor<T> score;  // [B,1]
  Tensor<T> feat;   // final-layer features [B,F]
};

template <typename T>
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(const NetConfig& cfg, Rng& rng);
  DiscOutput<T> forward(const Tensor<T>& img);
  void collect(const std::string& prefix, StateDict<T>& out) const;

  NetConfig cfg;
  std::vector<ResBlock<T>> blocks;
  SelfAttention<T> attention;
  std::size_t attention_after = 0;  // index of the block whose output is attended
  ResBlock<T> tail;
  Conv2d<T> score_conv;
};

// [B,1,H,W] binary mask reduced by an integer factor; a coarse cell is
// visible only when every pixel it covers is visible.
template <typename T>
Tensor<T> downsample_mask(const Tensor<T>& mask, std::size_t factor);
// Average-pooled copies of `img` matching the generator's output scales.
template <typename T>
std::vector<Tensor<T>> image_pyramid(const Tensor<T>& img, std::size_t scales);

// The five sub-networks of the dual pipeline. The encoder and generator are
// single objects used by both the reconstructive and generative paths.
template <typename T>
class ModelBundle {
 public:
  ModelBundle() = default;
  ModelBundle(const NetConfig& cfg, std::uint64_t seed);

  EncoderFeatures<T> encode(const Tensor<T>& img) { return encoder.forward(img); }
  DiagGaussian<T> infer_posterior(const Tensor<T>& f_c) { return posterior.forward(f_c); }
  DiagGaussian<T> infer_prior(const Tensor<T>& f_m) { return prior.forward(f_m); }
  std::vector<Tensor<T>> generate(const Tensor<T>& z, const EncoderFeatures<T>& f_m, const Tensor<T>& mask);

  StateDict<T> generator_state() const;  // encoder, infer1, infer2, generator
  StateDict<T> disc_rec_state() const;
  StateDict<T> disc_gen_state() const;
  StateDict<T> state() const;            // everything, in a fixed order
  std::size_t parameter_count() const;

  NetConfig cfg;
  Encoder<T> encoder;
  InferenceHead<T> posterior;  // Infer1: q(z | I_c)
  InferenceHead<T> prior;      // Infer2: p(z | I_m)
  Generator<T> generator;
  Discriminator<T> disc_rec;   // D1
  Discriminator<T> disc_gen;   // D2
};

// Tensors describing one batch of training samples.
template <typename T>
struct Batch {
  Tensor<T> image;       // I_g [B,C,H,W] in [-1,1]
  Tensor<T> mask;        // M [B,1,H,W], 1 = visible
  Tensor<T> masked;      // I_m = M * I_g (hidden pixels 0)
  Tensor<T> complement;  // I_c = (1 - M) * I_g
  std::vector<std::size_t> hidden;  // zero count of M per instance

  std::size_t size() const { return image.dim(0); }
  std::vector<AdaptivePrior> priors(double sigma_min_sq = 0.25) const;
};

template <typename T>
struct PathOutputs {
  std::vector<Tensor<T>> rec;  // I_rec per scale
  std::vector<Tensor<T>> gen;  // I_gen per scale
  DiagGaussian<T> q;           // q_psi(z | I_c)
  DiagGaussian<T> p;           // p_phi(z | I_m)
  LatentSample<T> z_rec;
  LatentSample<T> z_gen;
  EncoderFeatures<T> f_m;
};

// Reconstructive and generative paths through the shared encoder/generator.
template <typename T>
PathOutputs<T> forward_dual(ModelBundle<T>& model, const Batch<T>& batch, Rng& rng);
template <typename T>
PathOutputs<T> forward_dual(ModelBundle<T>& model, const Batch<T>& batch, const Tensor<T>& eps_rec,
                            const Tensor<T>& eps_gen);

}  // namespace picn
