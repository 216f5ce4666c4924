#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "picn/data.hpp"
#include "picn/losses.hpp"
#include "picn/networks.hpp"
#include "picn/ops.hpp"
#include "support/gradcheck.hpp"

using namespace picn;
using picn::testing::grad_check;
using picn::testing::random_tensor;

namespace {

NetConfig tiny() {
  NetConfig c;
  c.image_size = 8;
  c.base_width = 2;
  c.latent_dim = 3;
  c.down_blocks = 2;
  c.attention_resolution = 4;
  c.output_scales = 2;
  c.prior_blocks = 1;
  return c;
}

template <typename T>
Batch<T> make_batch(const NetConfig& cfg, std::size_t b, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Sample> samples;
  MaskSpec spec;
  spec.kind = MaskKind::random_rect;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<float> v(cfg.channels * cfg.image_size * cfg.image_size);
    for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
    samples.push_back(make_sample(Tensor<float>({cfg.channels, cfg.image_size, cfg.image_size}, std::move(v)),
                                  make_mask(spec, cfg.image_size, cfg.image_size, rng)));
  }
  return collate<T>(samples);
}

template <typename T>
bool same(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

template <typename T>
void copy_params(const StateDict<T>& from, const StateDict<T>& to) {
  REQUIRE(from.params.size() == to.params.size());
  for (std::size_t i = 0; i < from.params.size(); ++i) {
    auto dst = to.params[i].second;
    const auto src = from.params[i].second.data();
    std::copy(src.begin(), src.end(), dst.mutable_data().begin());
  }
  for (std::size_t i = 0; i < from.buffers.size(); ++i) {
    auto dst = to.buffers[i].second;
    const auto src = from.buffers[i].second.data();
    std::copy(src.begin(), src.end(), dst.mutable_data().begin());
  }
}

}  // namespace

TEST_CASE("config validation names the field") {
  NetConfig c;
  c.image_size = 24;
  CHECK_THROWS_WITH(c.validate(), doctest::Contains("net.image_size"));
  c = NetConfig{};
  c.down_blocks = 5;
  CHECK_THROWS_WITH(c.validate(), doctest::Contains("net.down_blocks"));
  c = NetConfig{};
  c.attention_resolution = 2;
  CHECK_THROWS_WITH(c.validate(), doctest::Contains("net.attention_resolution"));
  c = NetConfig{};
  c.output_scales = 4;
  CHECK_THROWS_WITH(c.validate(), doctest::Contains("net.output_scales"));
}

TEST_CASE("default model shapes and size") {
  NoGradGuard ng;
  const NetConfig cfg;
  ModelBundle<float> m(cfg, 1);
  CHECK(m.parameter_count() <= 500000);
  const auto batch = make_batch<float>(cfg, 2, 3);
  const auto f = m.encode(ops::slice(batch.masked, 0, 0, 1));
  CHECK(f.bottleneck().shape() == Shape{1, 4 * cfg.base_width, 4, 4});
  const auto q = m.infer_posterior(m.encode(batch.complement).bottleneck());
  CHECK(q.mu.shape() == Shape{2, cfg.latent_dim});
  CHECK(q.logvar.shape() == Shape{2, cfg.latent_dim});
  Rng rng(4);
  const auto out = forward_dual(m, batch, rng);
  REQUIRE(out.rec.size() == 2);
  REQUIRE(out.gen.size() == 2);
  CHECK(out.gen[0].shape() == Shape{2, 1, 16, 16});
  CHECK(out.gen[1].shape() == Shape{2, 1, 32, 32});
  for (const auto& img : out.gen)
    for (float v : img.data()) CHECK((v >= -1.0f && v <= 1.0f));
  const auto d = m.disc_gen.forward(batch.image);
  CHECK(d.score.shape() == Shape{2, 1});
  CHECK(d.feat.dim(0) == 2);
}

TEST_CASE("shape contract across image sizes") {
  NoGradGuard ng;
  for (std::size_t size : {16, 32, 64}) {
    CAPTURE(size);
    NetConfig cfg;
    cfg.image_size = size;
    cfg.down_blocks = size == 16 ? 2 : 3;
    cfg.attention_resolution = 8;
    ModelBundle<float> m(cfg, 2);
    const auto batch = make_batch<float>(cfg, 1, 5);
    Rng rng(1);
    const auto out = forward_dual(m, batch, rng);
    for (std::size_t k = 0; k < cfg.output_scales; ++k) {
      const auto res = size >> (cfg.output_scales - 1 - k);
      CHECK(out.rec[k].shape() == Shape{1, 1, res, res});
      CHECK(out.gen[k].shape() == Shape{1, 1, res, res});
    }
    CHECK(m.encode(batch.masked).bottleneck().dim(2) == cfg.bottleneck());
  }
}

TEST_CASE("encoder") {
  NoGradGuard ng;
  const NetConfig cfg;
  ModelBundle<float> m(cfg, 7);
  const auto batch = make_batch<float>(cfg, 1, 9);
  SUBCASE("deterministic") {
    CHECK(same(m.encode(batch.masked).bottleneck(), m.encode(batch.masked).bottleneck()));
  }
  SUBCASE("masked input ignores hidden pixel values") {
    std::vector<float> other(batch.image.data().begin(), batch.image.data().end());
    for (std::size_t i = 0; i < other.size(); ++i)
      if (batch.mask[i] == 0.f) other[i] = -other[i] + 0.3f;
    const auto s = make_sample(Tensor<float>({1, 32, 32}, other),
                               ops::reshape(batch.mask, Shape{1, 32, 32}));
    const auto b2 = collate<float>({s});
    CHECK(same(m.encode(batch.masked).bottleneck(), m.encode(b2.masked).bottleneck()));
  }
}

TEST_CASE("inference heads clamp logvar and pass gradients to the encoder") {
  const auto cfg = tiny();
  ModelBundle<double> m(cfg, 3);
  const auto batch = make_batch<double>(cfg, 2, 4);
  auto& w = m.posterior.project.weight;
  for (auto& x : w.mutable_data()) x *= 1e4;
  {
    NoGradGuard ng;
    const auto q = m.infer_posterior(m.encode(batch.complement).bottleneck());
    for (double v : q.logvar.data()) CHECK((v >= kLogvarMin && v <= kLogvarMax));
  }
  for (auto& x : w.mutable_data()) x *= 1e-4;
  for (auto* head : {&m.posterior, &m.prior}) {
    Tape::current().clear();
    StateDict<double> enc;
    m.encoder.collect("encoder", enc);
    for (auto& [n, t] : enc.params) t.zero_grad();
    const auto d = head->forward(m.encode(batch.masked).bottleneck());
    const std::vector<AdaptivePrior> priors(2, AdaptivePrior{10, 64, 0.25});
    backward(loss_kl_r(d, std::span<const AdaptivePrior>(priors)));
    double norm = 0;
    for (auto& [n, t] : enc.params)
      for (double g : t.grad_data()) norm += g * g;
    CHECK(norm > 0);
  }
}

TEST_CASE("discriminator features are differentiable in the input") {
  auto cfg = tiny();
  Rng rng(8);
  Discriminator<double> d(cfg, rng);
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = random_tensor({1 + std::size_t(trial % 2), 1, 8, 8}, rng);
    CHECK(grad_check([&](const auto& v) { return ops::sum_all(ops::square(d.forward(v[0]).feat)); }, {x}).ok(1e-4));
  }
  NoGradGuard ng;
  const auto x = random_tensor({2, 1, 8, 8}, rng);
  const auto a = d.forward(x), b = d.forward(x);
  CHECK(same(a.score, b.score));
  CHECK(same(a.feat, b.feat));
}

TEST_CASE("generator output is differentiable in z and features") {
  auto cfg = tiny();
  Rng rng(10);
  Generator<double> g(cfg, rng);
  g.attention.gamma_d.mutable_data()[0] = 0.4;
  g.attention.gamma_e.mutable_data()[0] = -0.3;
  const auto mask = downsample_mask(make_batch<double>(cfg, 1, 2).mask, 1);
  const auto fn = [&](const std::vector<Tensor<double>>& v) {
    const auto out = g.forward(v[0], v[1], v[2], mask);
    return ops::add(ops::sum_all(ops::square(out[0])), ops::sum_all(ops::square(out[1])));
  };
  CHECK(grad_check(fn, {random_tensor({1, 3}, rng), random_tensor({1, 8, 2, 2}, rng),
                        random_tensor({1, 4, 4, 4}, rng)})
            .ok(1e-4));
}

TEST_CASE("dual forward") {
  auto cfg = tiny();
  SUBCASE("zero noise and equal heads make both paths identical") {
    ModelBundle<double> m(cfg, 5);
    StateDict<double> from, to;
    m.posterior.collect("h", from);
    m.prior.collect("h", to);
    copy_params(from, to);
    Rng rng(3);
    MaskSpec spec;
    spec.kind = MaskKind::center;
    const auto batch = collate<double>({make_sample(Tensor<float>::zeros({1, 8, 8}), make_mask(spec, 8, 8, rng))});
    const auto zero = Tensor<double>::zeros({1, 3});
    NoGradGuard ng;
    const auto out = forward_dual(m, batch, zero, zero);
    REQUIRE(out.rec.size() == cfg.output_scales);
    for (std::size_t k = 0; k < cfg.output_scales; ++k) CHECK(same(out.rec[k], out.gen[k]));
  }
  SUBCASE("both paths accumulate into the shared encoder gradient") {
    ModelBundle<double> m(cfg, 6);
    const auto batch = make_batch<double>(cfg, 2, 7);
    Rng noise(1);
    const auto e1 = random_tensor({2, 3}, noise), e2 = random_tensor({2, 3}, noise);
    StateDict<double> enc;
    m.encoder.collect("encoder", enc);
    auto grads = [&](bool rec, bool gen) {
      SpectralNormFreeze freeze;
      for (auto& [n, t] : m.state().params) t.zero_grad();
      const auto out = forward_dual(m, batch, e1, e2);
      Tensor<double> loss = Tensor<double>::scalar(0);
      if (rec) loss = ops::add(loss, ops::mean_all(ops::square(out.rec.back())));
      if (gen) loss = ops::add(loss, ops::mean_all(ops::abs(out.gen.back())));
      backward(loss);
      std::vector<double> g;
      for (auto& [n, t] : enc.params) {
        const auto gt = t.grad();
        g.insert(g.end(), gt.data().begin(), gt.data().end());
      }
      return g;
    };
    const auto both = grads(true, true), r = grads(true, false), g = grads(false, true);
    double diff = 0, norm_r = 0, norm_g = 0;
    for (std::size_t i = 0; i < both.size(); ++i) {
      diff = std::max(diff, std::abs(both[i] - r[i] - g[i]));
      norm_r += r[i] * r[i];
      norm_g += g[i] * g[i];
    }
    CHECK(diff < 1e-12);
    CHECK(norm_r > 0);
    CHECK(norm_g > 0);
  }
}

TEST_CASE("mask pyramid and image pyramid") {
  const Tensor<float> mask({1, 1, 4, 4}, {1, 1, 1, 1, 1, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1});
  const auto m2 = downsample_mask(mask, 2);
  CHECK(m2.shape() == Shape{1, 1, 2, 2});
  CHECK(m2[0] == 0.f);
  CHECK(m2[1] == 1.f);
  CHECK(m2[2] == 1.f);
  CHECK(m2[3] == 1.f);
  CHECK_THROWS(downsample_mask(Tensor<float>::full({1, 1, 2, 2}, 0.5f), 2));
  const Tensor<float> img({1, 1, 2, 2}, {1, 2, 3, 4});
  const auto pyr = image_pyramid(img, 2);
  REQUIRE(pyr.size() == 2);
  CHECK(pyr[0].item() == 2.5f);
  CHECK(same(pyr[1], img));
}

TEST_CASE("seeded construction is reproducible") {
  ModelBundle<float> a(NetConfig{}, 11), b(NetConfig{}, 11), c(NetConfig{}, 12);
  const auto sa = a.state(), sb = b.state(), sc = c.state();
  REQUIRE(sa.params.size() == sb.params.size());
  bool all_same = true, any_diff = false;
  for (std::size_t i = 0; i < sa.params.size(); ++i) {
    CHECK(sa.params[i].first == sb.params[i].first);
    all_same &= same(sa.params[i].second, sb.params[i].second);
    any_diff |= !same(sa.params[i].second, sc.params[i].second);
  }
  CHECK(all_same);
  CHECK(any_diff);
}
