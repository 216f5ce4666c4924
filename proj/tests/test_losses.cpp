#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "picn/losses.hpp"
#include "picn/ops.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace picn;
using picn::testing::grad_check;
using picn::testing::random_tensor;

namespace {

Tensor<double> half_mask(std::size_t b, std::size_t h, std::size_t w) {
  std::vector<double> v(b * h * w);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (i % w) < w / 2 ? 1.0 : 0.0;
  return Tensor<double>({b, 1, h, w}, std::move(v));
}

Tensor<double> random_binary(const Shape& s, Rng& rng) {
  std::vector<double> v(numel_of(s));
  for (auto& x : v) x = rng.uniform() < 0.6 ? 1.0 : 0.0;
  v[0] = 1.0;
  return Tensor<double>(s, std::move(v));
}

}  // namespace

TEST_CASE("loss_kl_r") {
  const std::vector<AdaptivePrior> quarter(2, AdaptivePrior{16, 64, 0.25});
  const auto q = prior_gaussian<double>(quarter, 4);
  CHECK(std::abs(loss_kl_r(q, std::span<const AdaptivePrior>(quarter)).item()) < 1e-15);

  const std::vector<AdaptivePrior> full(1, AdaptivePrior{64, 64, 0.25});
  const DiagGaussian<double> shifted{Tensor<double>::full({1, 3}, 1.0), Tensor<double>::zeros({1, 3})};
  const double v = loss_kl_r(shifted, std::span<const AdaptivePrior>(full)).item();
  CHECK(v == doctest::Approx(1.5).epsilon(1e-12));  // 0.5 per dimension
  CHECK(std::abs(v / 3 - picn::testing::mc_kl_1d(1, 1, 0, 1, 1000000, 3)) < 1e-2);

  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const DiagGaussian<double> r{random_tensor({2, 4}, rng, -2, 2), random_tensor({2, 4}, rng, -3, 3)};
    CHECK(loss_kl_r(r, std::span<const AdaptivePrior>(quarter)).item() >= 0.0);
  }
}

TEST_CASE("loss_kl_g") {
  Rng rng(2);
  const DiagGaussian<double> a{random_tensor({1, 3}, rng), random_tensor({1, 3}, rng)};
  const DiagGaussian<double> b{random_tensor({1, 3}, rng), random_tensor({1, 3}, rng)};
  CHECK(std::abs(loss_kl_g(a, a).item()) < 1e-15);
  const double ab = loss_kl_g(a, b).item(), ba = loss_kl_g(b, a).item();
  CHECK(ab > 0);
  CHECK(ba > 0);
  CHECK(std::abs(ab - ba) > 1e-6);
  // closed form, one direction, by hand
  double expect = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double vq = std::exp(a.logvar[i]), vp = std::exp(b.logvar[i]), d = a.mu[i] - b.mu[i];
    expect += 0.5 * (std::log(vp / vq) + (vq + d * d) / vp - 1);
  }
  CHECK(ab == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("loss_app_r") {
  Rng rng(3);
  const auto x = random_tensor({2, 1, 4, 4}, rng);
  CHECK(loss_app_r<double>({x}, {x}).item() == 0.0);
  CHECK(loss_app_r<double>({ops::add_scalar(x, 0.1)}, {x}).item() == doctest::Approx(0.1).epsilon(1e-12));
  const auto y = random_tensor({2, 1, 4, 4}, rng);
  const auto xs = random_tensor({2, 1, 2, 2}, rng), ys = random_tensor({2, 1, 2, 2}, rng);
  double a = 0, b = 0;
  for (std::size_t i = 0; i < 32; ++i) a += std::abs(x[i] - y[i]);
  for (std::size_t i = 0; i < 8; ++i) b += std::abs(xs[i] - ys[i]);
  CHECK(loss_app_r<double>({xs, x}, {ys, y}).item() == doctest::Approx((a / 32 + b / 8) / 2).epsilon(1e-12));
}

TEST_CASE("loss_app_g") {
  Rng rng(4);
  const auto truth = random_tensor({2, 1, 4, 4}, rng);
  const auto mask = half_mask(2, 4, 4);
  SUBCASE("exact on visible pixels, garbage in holes") {
    std::vector<double> g(truth.data().begin(), truth.data().end());
    for (std::size_t i = 0; i < g.size(); ++i)
      if (mask[i] == 0.0) g[i] = 100.0 * rng.uniform(-1, 1);
    CHECK(loss_app_g<double>({Tensor<double>(truth.shape(), g)}, {truth}, {mask}).item() == 0.0);
  }
  SUBCASE("constant error on the visible half") {
    CHECK(loss_app_g<double>({ops::add_scalar(truth, 0.2)}, {truth}, {mask}).item() ==
          doctest::Approx(0.2).epsilon(1e-12));
  }
  SUBCASE("bit-identical under hidden-pixel perturbation") {
    const auto gen = random_tensor({2, 1, 4, 4}, rng);
    const double base = loss_app_g<double>({gen}, {truth}, {mask}).item();
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<double> g(gen.data().begin(), gen.data().end());
      for (std::size_t i = 0; i < g.size(); ++i)
        if (mask[i] == 0.0) g[i] = rng.uniform(-1e3, 1e3);
      const double v = loss_app_g<double>({Tensor<double>(gen.shape(), g)}, {truth}, {mask}).item();
      CHECK(std::memcmp(&v, &base, sizeof v) == 0);
    }
  }
  SUBCASE("multi-channel images share the mask") {
    const auto t3 = random_tensor({1, 3, 2, 2}, rng);
    const Tensor<double> m({1, 1, 2, 2}, {1, 0, 0, 0});
    CHECK(loss_app_g<double>({ops::add_scalar(t3, -0.5)}, {t3}, {m}).item() == doctest::Approx(0.5));
  }
  SUBCASE("non-binary mask is rejected") {
    CHECK_THROWS(loss_app_g<double>({truth}, {truth}, {Tensor<double>::full({2, 1, 4, 4}, 0.5)}));
  }
}

TEST_CASE("adversarial losses") {
  const Tensor<double> f1({1, 2}, {1, 2}), f0({1, 2}, {0, 0});
  CHECK(loss_ad_r(f0, f0).item() == 0.0);
  CHECK(loss_ad_r(f1, f0).item() == doctest::Approx(std::sqrt(5.0)).epsilon(1e-12));
  CHECK(loss_ad_r(ops::scale(f1, -3.0), f0).item() == doctest::Approx(3 * std::sqrt(5.0)).epsilon(1e-12));
  CHECK(loss_ad_g(Tensor<double>::full({2, 1}, 1.0)).item() == 0.0);
  CHECK(loss_ad_g(Tensor<double>::zeros({2, 1})).item() == 1.0);
  CHECK(loss_disc(Tensor<double>::full({3, 1}, 1.0), Tensor<double>::zeros({3, 1})).item() == 0.0);
  CHECK(loss_disc(Tensor<double>::zeros({1, 1}), Tensor<double>::full({1, 1}, 1.0)).item() == 1.0);
}

TEST_CASE("total_loss") {
  LossTerms<double> ones;
  for (auto* t : {&ones.kl_r, &ones.kl_g, &ones.app_r, &ones.app_g, &ones.ad_r, &ones.ad_g})
    *t = Tensor<double>::scalar(1.0);
  LossWeights w;
  w.n_scale = 1;
  CHECK(total_loss(ones, w).item() == 82.0);
  CHECK(make_report(ones, w).total == 82.0);
  LossTerms<double> zeros;
  for (auto* t : {&zeros.kl_r, &zeros.kl_g, &zeros.app_r, &zeros.app_g, &zeros.ad_r, &zeros.ad_g})
    *t = Tensor<double>::scalar(0.0);
  CHECK(total_loss(zeros, w).item() == 0.0);
  LossTerms<double> mixed = ones;
  mixed.ad_r = Tensor<double>::scalar(0.7);
  mixed.ad_g = Tensor<double>::scalar(1.9);
  auto w2 = w;
  w2.alpha_ad *= 2;
  CHECK(total_loss(mixed, w2).item() - total_loss(mixed, w).item() ==
        doctest::Approx(w.alpha_ad * (0.7 + 1.9)).epsilon(1e-12));
  w.n_scale = 2;
  CHECK(total_loss(ones, w).item() == 122.0);
  LossTerms<double> partial;
  partial.app_r = Tensor<double>::scalar(0.5);
  CHECK(total_loss(partial, w).item() == 10.0);
}

TEST_CASE("loss report") {
  CHECK(LossReport::csv_header() == "step,kl_r,kl_g,app_r,app_g,ad_r,ad_g,total");
  LossReport r{1, 2, 3, 4, 5, 6, 0};
  LossWeights w;
  r.total = weighted_total(r, w);
  CHECK(r.total == doctest::Approx(20 * (1 + 2) + 20 * (3 + 4) + 5 + 6));
  CHECK(r.csv_row(7).rfind("7,1,2,3,4,5,6,", 0) == 0);
  CHECK(r.finite());
  r.ad_g = std::nan("");
  CHECK_FALSE(r.finite());
  w.alpha_kl = -1;
  CHECK_THROWS(w.validate());
}
