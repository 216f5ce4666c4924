#include "picn/networks.hpp"

#include <stdexcept>

#include "picn/ops.hpp"

namespace picn {
namespace {

bool is_pow2(std::size_t v) { return v && !(v & (v - 1)); }

void require_image(const NetConfig& cfg, const Shape& s, const char* who) {
  if (s.size() != 4 || s[1] != cfg.channels || s[2] != cfg.image_size || s[3] != cfg.image_size)
    throw ShapeError(std::string(who) + " expects [B," + std::to_string(cfg.channels) + "," +
                     std::to_string(cfg.image_size) + "," + std::to_string(cfg.image_size) + "], got " + shape_str(s));
}

}  // namespace

void NetConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("net." + field + ": " + why);
  };
  if (!is_pow2(image_size) || image_size < 4) fail("image_size", "must be a power of two >= 4");
  if (channels == 0) fail("channels", "must be positive");
  if (base_width == 0) fail("base_width", "must be positive");
  if (latent_dim == 0) fail("latent_dim", "must be positive");
  if (down_blocks == 0 || (image_size >> down_blocks) < 2 || (image_size >> down_blocks) << down_blocks != image_size)
    fail("down_blocks", "must leave a bottleneck of at least 2x2");
  if (!is_pow2(attention_resolution) || attention_resolution > image_size || attention_resolution < bottleneck())
    fail("attention_resolution", "must be a power of two between the bottleneck and image size");
  if (output_scales == 0 || output_scales > down_blocks)
    fail("output_scales", "must be between 1 and down_blocks");
  if (prior_blocks == 0) fail("prior_blocks", "must be positive");
}

std::size_t NetConfig::width(std::size_t level) const {
  return base_width * (std::size_t{1} << std::min<std::size_t>(level, 2));
}

std::size_t NetConfig::level_of(std::size_t resolution) const {
  std::size_t level = 0;
  while ((image_size >> level) > resolution) ++level;
  if ((image_size >> level) != resolution) throw std::invalid_argument("resolution not on the pyramid");
  return level;
}

template <typename T>
Encoder<T>::Encoder(const NetConfig& c, Rng& rng) : cfg(c) {
  blocks.emplace_back(BlockKind::start, cfg.channels, cfg.width(0), rng);
  for (std::size_t l = 1; l <= cfg.down_blocks; ++l)
    blocks.emplace_back(BlockKind::down, cfg.width(l - 1), cfg.width(l), rng);
}

template <typename T>
EncoderFeatures<T> Encoder<T>::forward(const Tensor<T>& img) {
  require_image(cfg, img.shape(), "encode");
  EncoderFeatures<T> f;
  Tensor<T> h = img;
  for (auto& b : blocks) {
    h = b.forward(h);
    f.levels.push_back(h);
  }
  return f;
}

template <typename T>
void Encoder<T>::collect(const std::string& prefix, StateDict<T>& out) const {
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".block" + std::to_string(i), out);
}

template <typename T>
InferenceHead<T>::InferenceHead(const NetConfig& c, std::size_t depth, Rng& rng) : cfg(c) {
  const auto w = cfg.width(cfg.down_blocks);
  for (std::size_t i = 0; i < depth; ++i) blocks.emplace_back(BlockKind::plain, w, w, rng);
  const auto b = cfg.bottleneck();
  project = Linear<T>(w * b * b, 2 * cfg.latent_dim, rng);
}

template <typename T>
DiagGaussian<T> InferenceHead<T>::forward(const Tensor<T>& feature) {
  const auto w = cfg.width(cfg.down_blocks);
  const auto b = cfg.bottleneck();
  if (feature.rank() != 4 || feature.dim(1) != w || feature.dim(2) != b || feature.dim(3) != b)
    throw ShapeError("inference head expects bottleneck features, got " + shape_str(feature.shape()));
  Tensor<T> h = feature;
  for (auto& blk : blocks) h = blk.forward(h);
  h = ops::leaky_relu(h);
  const auto stats = project.forward(ops::reshape(h, {h.dim(0), w * b * b}));
  DiagGaussian<T> d;
  d.mu = ops::slice(stats, 1, 0, cfg.latent_dim);
  d.logvar = ops::clamp(ops::slice(stats, 1, cfg.latent_dim, cfg.latent_dim), T(kLogvarMin), T(kLogvarMax));
  return d;
}

template <typename T>
void InferenceHead<T>::collect(const std::string& prefix, StateDict<T>& out) const {
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".block" + std::to_string(i), out);
  project.collect(prefix + ".project", out);
}

template <typename T>
Generator<T>::Generator(const NetConfig& c, Rng& rng) : cfg(c) {
  const auto depth = cfg.down_blocks;
  const auto wb = cfg.width(depth);
  const auto b = cfg.bottleneck();
  latent_proj = Linear<T>(cfg.latent_dim, wb * b * b, rng);
  fuse = Conv2d<T>(2 * wb, wb, 1, rng);
  for (std::size_t l = depth; l >= 1; --l) ups.emplace_back(BlockKind::up, cfg.width(l), cfg.width(l - 1), rng);
  const auto attn_w = cfg.width(cfg.level_of(cfg.attention_resolution));
  attention = ShortLongAttention<T>(attn_w, rng);
  attention_fuse = Conv2d<T>(2 * attn_w, attn_w, 1, rng);
  for (std::size_t s = 0; s < cfg.output_scales; ++s) {
    const auto level = cfg.output_scales - 1 - s;
    heads.emplace_back(cfg.width(level), cfg.channels, 3, rng);
  }
}

template <typename T>
std::vector<Tensor<T>> Generator<T>::forward(const Tensor<T>& z, const Tensor<T>& f_m, const Tensor<T>& f_e,
                                             const Tensor<T>& mask, Tensor<T>* beta_out) {
  using namespace ops;
  if (z.rank() != 2 || z.dim(1) != cfg.latent_dim)
    throw ShapeError("generate: latent must be [B," + std::to_string(cfg.latent_dim) + "], got " + shape_str(z.shape()));
  const auto batch = z.dim(0);
  const auto wb = cfg.width(cfg.down_blocks);
  const auto b = cfg.bottleneck();
  if (f_m.rank() != 4 || f_m.dim(0) != batch || f_m.dim(1) != wb || f_m.dim(2) != b)
    throw ShapeError("generate: bottleneck feature shape " + shape_str(f_m.shape()));
  const auto attn_level = cfg.level_of(cfg.attention_resolution);
  if (f_e.rank() != 4 || f_e.dim(1) != cfg.width(attn_level) || f_e.dim(2) != cfg.attention_resolution)
    throw ShapeError("generate: encoder skip feature shape " + shape_str(f_e.shape()));
  const auto coarse_mask = downsample_mask(mask, cfg.image_size / cfg.attention_resolution);

  auto h = reshape(latent_proj.forward(z), {batch, wb, b, b});
  h = fuse.forward(concat<T>({h, f_m}, 1));

  auto apply_attention = [&](const Tensor<T>& x) {
    auto att = attention.forward(x, f_e, coarse_mask);
    if (beta_out) *beta_out = att.beta;
    return attention_fuse.forward(concat<T>({att.y_d, att.y_e}, 1));
  };

  std::vector<Tensor<T>> outputs;
  std::size_t level = cfg.down_blocks;
  if (level == attn_level) h = apply_attention(h);
  for (auto& up : ups) {
    h = up.forward(h);
    --level;
    if (level == attn_level) h = apply_attention(h);
    if (level < cfg.output_scales) {
      auto& head = heads[cfg.output_scales - 1 - level];
      outputs.push_back(tanh(head.forward(leaky_relu(h))));
    }
  }
  return outputs;
}

template <typename T>
void Generator<T>::collect(const std::string& prefix, StateDict<T>& out) const {
  latent_proj.collect(prefix + ".latent_proj", out);
  fuse.collect(prefix + ".fuse", out);
  for (std::size_t i = 0; i < ups.size(); ++i) ups[i].collect(prefix + ".up" + std::to_string(i), out);
  attention.collect(prefix + ".attention", out);
  attention_fuse.collect(prefix + ".attention_fuse", out);
  for (std::size_t i = 0; i < heads.size(); ++i) heads[i].collect(prefix + ".head" + std::to_string(i), out);
}

template <typename T>
Discriminator<T>::Discriminator(const NetConfig& c, Rng& rng) : cfg(c) {
  blocks.emplace_back(BlockKind::start, cfg.channels, cfg.width(0), rng);
  for (std::size_t l = 1; l <= cfg.down_blocks; ++l)
    blocks.emplace_back(BlockKind::down, cfg.width(l - 1), cfg.width(l), rng);
  attention_after = cfg.level_of(cfg.attention_resolution);
  attention = SelfAttention<T>(cfg.width(attention_after), rng);
  const auto wb = cfg.width(cfg.down_blocks);
  tail = ResBlock<T>(BlockKind::plain, wb, wb, rng);
  score_conv = Conv2d<T>(wb, 1, 3, rng);
}

template <typename T>
DiscOutput<T> Discriminator<T>::forward(const Tensor<T>& img) {
  require_image(cfg, img.shape(), "discriminate");
  using namespace ops;
  Tensor<T> h = img;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    h = blocks[i].forward(h);
    if (i == attention_after) h = attention.forward(h);
  }
  h = tail.forward(h);
  DiscOutput<T> out;
  out.feat = reshape(h, {h.dim(0), h.numel() / h.dim(0)});
  out.score = mean(score_conv.forward(leaky_relu(h)), {2, 3});  // [B,1]
  return out;
}

template <typename T>
void Discriminator<T>::collect(const std::string& prefix, StateDict<T>& out) const {
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".block" + std::to_string(i), out);
  attention.collect(prefix + ".attention", out);
  tail.collect(prefix + ".tail", out);
  score_conv.collect(prefix + ".score", out);
}

template <typename T>
Tensor<T> downsample_mask(const Tensor<T>& mask, std::size_t factor) {
  if (mask.rank() != 4 || mask.dim(1) != 1) throw ShapeError("mask must be [B,1,H,W], got " + shape_str(mask.shape()));
  if (factor == 0 || mask.dim(2) % factor || mask.dim(3) % factor) throw ShapeError("mask not divisible by factor");
  const auto b = mask.dim(0), h = mask.dim(2), w = mask.dim(3), ho = h / factor, wo = w / factor;
  std::vector<T> out(b * ho * wo, T(1));
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const T m = mask[(n * h + y) * w + x];
        if (m != T(0) && m != T(1)) throw std::invalid_argument("mask must be binary");
        if (m == T(0)) out[(n * ho + y / factor) * wo + x / factor] = T(0);
      }
  return Tensor<T>({b, 1, ho, wo}, std::move(out));
}

template <typename T>
std::vector<Tensor<T>> image_pyramid(const Tensor<T>& img, std::size_t scales) {
  std::vector<Tensor<T>> out{img};
  for (std::size_t s = 1; s < scales; ++s) out.insert(out.begin(), ops::avg_pool2(out.front()));
  return out;
}

template <typename T>
ModelBundle<T>::ModelBundle(const NetConfig& c, std::uint64_t seed) : cfg(c) {
  cfg.validate();
  Rng root(seed);
  Rng r_enc = root.derive(1), r_q = root.derive(2), r_p = root.derive(3), r_g = root.derive(4), r_d1 = root.derive(5),
      r_d2 = root.derive(6);
  encoder = Encoder<T>(cfg, r_enc);
  posterior = InferenceHead<T>(cfg, 1, r_q);
  prior = InferenceHead<T>(cfg, cfg.prior_blocks, r_p);
  generator = Generator<T>(cfg, r_g);
  disc_rec = Discriminator<T>(cfg, r_d1);
  disc_gen = Discriminator<T>(cfg, r_d2);
}

template <typename T>
std::vector<Tensor<T>> ModelBundle<T>::generate(const Tensor<T>& z, const EncoderFeatures<T>& f_m,
                                                const Tensor<T>& mask) {
  return generator.forward(z, f_m.bottleneck(), f_m.levels[cfg.level_of(cfg.attention_resolution)], mask);
}

template <typename T>
StateDict<T> ModelBundle<T>::generator_state() const {
  StateDict<T> s;
  encoder.collect("encoder", s);
  posterior.collect("infer1", s);
  prior.collect("infer2", s);
  generator.collect("generator", s);
  return s;
}

template <typename T>
StateDict<T> ModelBundle<T>::disc_rec_state() const {
  StateDict<T> s;
  disc_rec.collect("disc_rec", s);
  return s;
}

template <typename T>
StateDict<T> ModelBundle<T>::disc_gen_state() const {
  StateDict<T> s;
  disc_gen.collect("disc_gen", s);
  return s;
}

template <typename T>
StateDict<T> ModelBundle<T>::state() const {
  auto s = generator_state();
  for (const auto& part : {disc_rec_state(), disc_gen_state()}) {
    s.params.insert(s.params.end(), part.params.begin(), part.params.end());
    s.buffers.insert(s.buffers.end(), part.buffers.begin(), part.buffers.end());
  }
  return s;
}

template <typename T>
std::size_t ModelBundle<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : state().params) n += t.numel();
  return n;
}

template <typename T>
std::vector<AdaptivePrior> Batch<T>::priors(double sigma_min_sq) const {
  std::vector<AdaptivePrior> out;
  const auto total = mask.dim(2) * mask.dim(3);
  for (auto n : hidden) out.push_back({n, total, sigma_min_sq});
  return out;
}

template <typename T>
PathOutputs<T> forward_dual(ModelBundle<T>& model, const Batch<T>& batch, const Tensor<T>& eps_rec,
                            const Tensor<T>& eps_gen) {
  PathOutputs<T> out;
  // Reconstructive path: q(z | I_c), decode with the visible-region features.
  const auto f_c = model.encode(batch.complement);
  out.f_m = model.encode(batch.masked);
  out.q = model.infer_posterior(f_c.bottleneck());
  out.z_rec = sample_with_noise(out.q, eps_rec);
  out.rec = model.generate(out.z_rec.z, out.f_m, batch.mask);
  // Generative path: p(z | I_m) through the same generator.
  out.p = model.infer_prior(out.f_m.bottleneck());
  out.z_gen = sample_with_noise(out.p, eps_gen);
  out.gen = model.generate(out.z_gen.z, out.f_m, batch.mask);
  return out;
}

template <typename T>
PathOutputs<T> forward_dual(ModelBundle<T>& model, const Batch<T>& batch, Rng& rng) {
  const auto b = batch.size(), z = model.cfg.latent_dim;
  auto noise = [&] {
    std::vector<T> v(b * z);
    for (auto& x : v) x = static_cast<T>(rng.normal());
    return Tensor<T>({b, z}, std::move(v));
  };
  const auto eps_rec = noise();
  const auto eps_gen = noise();
  return forward_dual(model, batch, eps_rec, eps_gen);
}

#define PICN_INSTANTIATE_NETWORKS(T)                                                                       \
  template class Encoder<T>;                                                                               \
  template class InferenceHead<T>;                                                                         \
  template class Generator<T>;                                                                             \
  template class Discriminator<T>;                                                                         \
  template class ModelBundle<T>;                                                                           \
  template struct Batch<T>;                                                                                \
  template Tensor<T> downsample_mask<T>(const Tensor<T>&, std::size_t);                                    \
  template std::vector<Tensor<T>> image_pyramid<T>(const Tensor<T>&, std::size_t);                         \
  template PathOutputs<T> forward_dual<T>(ModelBundle<T>&, const Batch<T>&, Rng&);                         \
  template PathOutputs<T> forward_dual<T>(ModelBundle<T>&, const Batch<T>&, const Tensor<T>&, const Tensor<T>&);

PICN_INSTANTIATE_NETWORKS(float)
PICN_INSTANTIATE_NETWORKS(double)

}  // namespace picn
