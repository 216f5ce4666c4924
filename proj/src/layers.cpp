#include "picn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "picn/init.hpp"
#include "picn/ops.hpp"

namespace picn {
namespace {

thread_local bool g_sn_frozen = false;

constexpr double kSigmaFloor = 1e-12;

template <typename T>
Tensor<T> as_row_bcast(const Tensor<T>& v, const Shape& target) {
  // [C] -> [1,C,1,...] broadcast to target (channel axis 1)
  Shape s(target.size(), 1);
  s[1] = v.numel();
  return ops::broadcast_to(ops::reshape(v, s), target);
}

template <typename T>
Tensor<T> as_scalar_bcast(const Tensor<T>& v, const Shape& target) {
  return ops::broadcast_to(ops::reshape(v, Shape(target.size(), 1)), target);
}

// Normalises `vec` in place; leaves it untouched when the norm vanishes.
template <typename T>
void normalize_in_place(std::vector<double>& vec, std::span<T> keep) {
  double norm = 0;
  for (double x : vec) norm += x * x;
  norm = std::sqrt(norm);
  if (norm < kSigmaFloor) {
    for (std::size_t i = 0; i < vec.size() && i < keep.size(); ++i) vec[i] = static_cast<double>(keep[i]);
    return;
  }
  for (double& x : vec) x /= norm;
}

}  // namespace

SpectralNormFreeze::SpectralNormFreeze() : previous_(g_sn_frozen) { g_sn_frozen = true; }
SpectralNormFreeze::~SpectralNormFreeze() { g_sn_frozen = previous_; }
bool SpectralNormFreeze::active() { return g_sn_frozen; }

template <typename T>
SpectralNorm<T>::SpectralNorm(std::size_t rows, Rng& rng) {
  std::vector<double> v(rows);
  for (auto& x : v) x = rng.normal();
  std::vector<T> dummy;
  normalize_in_place<T>(v, std::span<T>(dummy));
  std::vector<T> init(v.begin(), v.end());
  u = Tensor<T>({rows}, std::move(init));
}

template <typename T>
void SpectralNorm<T>::power_iterate(const Tensor<T>& weight, int iterations) {
  const auto rows = weight.dim(0);
  const auto cols = weight.numel() / rows;
  const auto w = weight.data();
  auto u_data = u.mutable_data();
  std::vector<double> uu(u_data.begin(), u_data.end()), v(cols);
  for (int it = 0; it < iterations; ++it) {
    std::fill(v.begin(), v.end(), 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) v[c] += static_cast<double>(w[r * cols + c]) * uu[r];
    double vn = 0;
    for (double x : v) vn += x * x;
    vn = std::sqrt(vn);
    if (vn < kSigmaFloor) break;
    for (double& x : v) x /= vn;
    std::vector<double> nu(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) nu[r] += static_cast<double>(w[r * cols + c]) * v[c];
    normalize_in_place<T>(nu, u_data);
    uu = std::move(nu);
  }
  for (std::size_t r = 0; r < rows; ++r) u_data[r] = static_cast<T>(uu[r]);
}

template <typename T>
Tensor<T> SpectralNorm<T>::normalize(const Tensor<T>& weight) {
  if (!SpectralNormFreeze::active() && Tape::current().recording()) power_iterate(weight, 1);
  const auto rows = weight.dim(0);
  const auto cols = weight.numel() / rows;
  // v = normalize(W^T u), computed as a constant.
  std::vector<double> v(cols, 0.0);
  const auto w = weight.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) v[c] += static_cast<double>(w[r * cols + c]) * static_cast<double>(u[r]);
  double vn = 0;
  for (double x : v) vn += x * x;
  vn = std::sqrt(vn);
  for (double& x : v) x = vn < kSigmaFloor ? 0.0 : x / vn;
  const Tensor<T> u_row({1, rows}, std::vector<T>(u.data().begin(), u.data().end()));
  const Tensor<T> v_col({cols, 1}, std::vector<T>(v.begin(), v.end()));
  auto sigma = ops::matmul(ops::matmul(u_row, ops::reshape(weight, {rows, cols})), v_col);
  sigma = ops::clamp(sigma, static_cast<T>(kSigmaFloor), std::numeric_limits<T>::max());
  last_sigma = sigma.item();
  return ops::div(weight, as_scalar_bcast(sigma, weight.shape()));
}

template <typename T>
Conv2d<T>::Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, Rng& rng, bool with_bias,
                  bool spectral)
    : pad(kernel / 2) {
  weight = orthogonal_init<T>({out_ch, in_ch, kernel, kernel}, rng).set_requires_grad(true);
  if (with_bias) bias = Tensor<T>::zeros({out_ch}).set_requires_grad(true);
  if (spectral) sn.emplace(out_ch, rng);
}

template <typename T>
Tensor<T> Conv2d<T>::effective_weight() {
  return sn ? sn->normalize(weight) : weight;
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) {
  return ops::conv2d(x, effective_weight(), bias, 1, pad);
}

template <typename T>
void Conv2d<T>::collect(const std::string& prefix, StateDict<T>& out) const {
  out.params.emplace_back(prefix + ".weight", weight);
  if (bias.defined()) out.params.emplace_back(prefix + ".bias", bias);
  if (sn) out.buffers.emplace_back(prefix + ".sn_u", sn->u);
}

template <typename T>
Linear<T>::Linear(std::size_t in_features, std::size_t out_features, Rng& rng, bool spectral) {
  weight = orthogonal_init<T>({out_features, in_features}, rng).set_requires_grad(true);
  bias = Tensor<T>::zeros({out_features}).set_requires_grad(true);
  if (spectral) sn.emplace(out_features, rng);
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) {
  if (x.rank() != 2 || x.dim(1) != weight.dim(1))
    throw ShapeError("Linear expects [B," + std::to_string(weight.dim(1)) + "], got " + shape_str(x.shape()));
  const auto w = sn ? sn->normalize(weight) : weight;
  const auto y = ops::matmul(x, w, false, true);
  return ops::add(y, ops::broadcast_to(ops::reshape(bias, {1, bias.numel()}), y.shape()));
}

template <typename T>
void Linear<T>::collect(const std::string& prefix, StateDict<T>& out) const {
  out.params.emplace_back(prefix + ".weight", weight);
  out.params.emplace_back(prefix + ".bias", bias);
  if (sn) out.buffers.emplace_back(prefix + ".sn_u", sn->u);
}

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift, T eps) {
  if (x.rank() != 4) throw ShapeError("instance_norm expects [B,C,H,W], got " + shape_str(x.shape()));
  if (x.dim(2) * x.dim(3) < 2) throw ShapeError("instance_norm over a single-pixel plane is undefined");
  if (scale.numel() != x.dim(1) || shift.numel() != x.dim(1)) throw ShapeError("instance_norm affine size mismatch");
  using namespace ops;
  const auto& s = x.shape();
  const auto centered = sub(x, broadcast_to(mean(x, {2, 3}, true), s));
  const auto var = mean(square(centered), {2, 3}, true);
  const auto normed = div(centered, broadcast_to(sqrt(add_scalar(var, eps)), s));
  return add(mul(normed, as_row_bcast(scale, s)), as_row_bcast(shift, s));
}

template <typename T>
InstanceNorm<T>::InstanceNorm(std::size_t channels)
    : scale(Tensor<T>::full({channels}, T(1)).set_requires_grad(true)),
      shift(Tensor<T>::zeros({channels}).set_requires_grad(true)) {}

template <typename T>
void InstanceNorm<T>::collect(const std::string& prefix, StateDict<T>& out) const {
  out.params.emplace_back(prefix + ".scale", scale);
  out.params.emplace_back(prefix + ".shift", shift);
}

template <typename T>
ResBlock<T>::ResBlock(BlockKind k, std::size_t in, std::size_t out, Rng& rng)
    : kind(k),
      in_ch(in),
      out_ch(out),
      conv1(in, out, 3, rng),
      conv2(out, out, 3, rng),
      shortcut(in, out, 1, rng) {
  if (kind == BlockKind::up) norm.emplace(in);
}

template <typename T>
Tensor<T> ResBlock<T>::forward(const Tensor<T>& x) {
  if (x.rank() != 4 || x.dim(1) != in_ch)
    throw ShapeError("ResBlock expects " + std::to_string(in_ch) + " channels, got " + shape_str(x.shape()));
  using namespace ops;
  Tensor<T> h = x;
  Tensor<T> skip = x;
  if (norm) h = norm->forward(h);
  if (kind != BlockKind::start) h = leaky_relu(h);
  if (kind == BlockKind::up) {
    h = upsample_nearest2(h);
    skip = upsample_nearest2(skip);
  }
  h = conv2.forward(leaky_relu(conv1.forward(h)));
  skip = shortcut.forward(skip);
  if (kind == BlockKind::down) {
    h = avg_pool2(h);
    skip = avg_pool2(skip);
  }
  return add(h, skip);
}

template <typename T>
void ResBlock<T>::collect(const std::string& prefix, StateDict<T>& out) const {
  if (norm) norm->collect(prefix + ".norm", out);
  conv1.collect(prefix + ".conv1", out);
  conv2.collect(prefix + ".conv2", out);
  shortcut.collect(prefix + ".shortcut", out);
}

template <typename T>
Tensor<T> attention_scores(Conv2d<T>& query, const Tensor<T>& f) {
  const auto b = f.dim(0), n = f.dim(2) * f.dim(3);
  const auto q = query.forward(f);
  const auto qm = ops::reshape(q, {b, q.dim(1), n});
  // s[j][i] = Q(f_j)^T Q(f_i); symmetric, so rows can be softmaxed directly.
  return ops::softmax(ops::bmm(qm, qm, true, false), 2);
}

template <typename T>
Tensor<T> attend(const Tensor<T>& beta, const Tensor<T>& f) {
  const auto b = f.dim(0), c = f.dim(1), n = f.dim(2) * f.dim(3);
  if (beta.rank() != 3 || beta.dim(0) != b || beta.dim(1) != n || beta.dim(2) != n)
    throw ShapeError("attention weights " + shape_str(beta.shape()) + " do not match features " + shape_str(f.shape()));
  const auto fm = ops::reshape(f, {b, c, n});
  return ops::reshape(ops::bmm(fm, beta, false, true), f.shape());
}

template <typename T>
ShortLongAttention<T>::ShortLongAttention(std::size_t decoder_ch, Rng& rng)
    : query(decoder_ch, std::max<std::size_t>(1, decoder_ch / 4), 1, rng, false),
      gamma_d(Tensor<T>::zeros({1}).set_requires_grad(true)),
      gamma_e(Tensor<T>::zeros({1}).set_requires_grad(true)) {}

template <typename T>
AttentionOutput<T> ShortLongAttention<T>::forward(const Tensor<T>& f_d, const Tensor<T>& f_e, const Tensor<T>& mask) {
  if (f_d.rank() != 4 || f_e.rank() != 4 || mask.rank() != 4) throw ShapeError("attention expects rank-4 inputs");
  if (f_d.dim(0) != f_e.dim(0) || f_d.dim(2) != f_e.dim(2) || f_d.dim(3) != f_e.dim(3))
    throw ShapeError("decoder " + shape_str(f_d.shape()) + " and encoder " + shape_str(f_e.shape()) +
                     " features differ spatially");
  if (mask.dim(0) != f_d.dim(0) || mask.dim(1) != 1 || mask.dim(2) != f_d.dim(2) || mask.dim(3) != f_d.dim(3))
    throw ShapeError("attention mask shape " + shape_str(mask.shape()));
  for (const T m : mask.data())
    if (m != T(0) && m != T(1)) throw std::invalid_argument("attention mask must be binary");

  using namespace ops;
  AttentionOutput<T> out;
  out.beta = attention_scores(query, f_d);
  const auto c_d = attend(out.beta, f_d);
  const auto c_e = attend(out.beta, f_e);
  out.y_d = add(mul(as_scalar_bcast(gamma_d, f_d.shape()), c_d), f_d);

  std::vector<T> hole(mask.numel());
  for (std::size_t i = 0; i < hole.size(); ++i) hole[i] = T(1) - mask[i];
  const Tensor<T> hole_mask(mask.shape(), std::move(hole));
  const auto& es = f_e.shape();
  const auto gated = mul(broadcast_to(hole_mask, es), c_e);
  out.y_e = add(mul(as_scalar_bcast(gamma_e, es), gated), mul(broadcast_to(mask, es), f_e));
  return out;
}

template <typename T>
void ShortLongAttention<T>::collect(const std::string& prefix, StateDict<T>& out) const {
  query.collect(prefix + ".query", out);
  out.params.emplace_back(prefix + ".gamma_d", gamma_d);
  out.params.emplace_back(prefix + ".gamma_e", gamma_e);
}

template <typename T>
SelfAttention<T>::SelfAttention(std::size_t channels, Rng& rng)
    : query(channels, std::max<std::size_t>(1, channels / 4), 1, rng, false),
      gamma(Tensor<T>::zeros({1}).set_requires_grad(true)) {}

template <typename T>
Tensor<T> SelfAttention<T>::forward(const Tensor<T>& f, Tensor<T>* beta_out) {
  if (f.rank() != 4) throw ShapeError("self-attention expects [B,C,H,W]");
  const auto beta = attention_scores(query, f);
  if (beta_out) *beta_out = beta;
  return ops::add(ops::mul(as_scalar_bcast(gamma, f.shape()), attend(beta, f)), f);
}

template <typename T>
void SelfAttention<T>::collect(const std::string& prefix, StateDict<T>& out) const {
  query.collect(prefix + ".query", out);
  out.params.emplace_back(prefix + ".gamma", gamma);
}

#define PICN_INSTANTIATE_LAYERS(T)                                                              \
  template struct SpectralNorm<T>;                                                              \
  template class Conv2d<T>;                                                                     \
  template class Linear<T>;                                                                     \
  template class InstanceNorm<T>;                                                               \
  template class ResBlock<T>;                                                                   \
  template class ShortLongAttention<T>;                                                         \
  template class SelfAttention<T>;                                                              \
  template Tensor<T> instance_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T); \
  template Tensor<T> attention_scores<T>(Conv2d<T>&, const Tensor<T>&);                         \
  template Tensor<T> attend<T>(const Tensor<T>&, const Tensor<T>&);

PICN_INSTANTIATE_LAYERS(float)
PICN_INSTANTIATE_LAYERS(double)

}  // namespace picn
