#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "picn/ops.hpp"
#include "support/gradcheck.hpp"

using namespace picn;
using picn::testing::grad_check;
using picn::testing::random_nonzero;
using picn::testing::random_tensor;

namespace {

// Direct nested-loop cross-correlation, independent of the im2col path.
std::vector<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                                std::size_t stride, std::size_t pad) {
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto O = w.dim(0), K = w.dim(2);
  const auto Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  std::vector<double> out(B * O * Ho * Wo, 0.0);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t y = 0; y < Ho; ++y)
        for (std::size_t xx = 0; xx < Wo; ++xx) {
          double acc = b.defined() ? b[o] : 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ky = 0; ky < K; ++ky)
              for (std::size_t kx = 0; kx < K; ++kx) {
                const long iy = static_cast<long>(y * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(xx * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                acc += x.data()[((n * C + c) * H + iy) * W + ix] * w.data()[((o * C + c) * K + ky) * K + kx];
              }
          out[((n * O + o) * Ho + y) * Wo + xx] = acc;
        }
  return out;
}

template <typename T>
std::vector<T> values(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace

TEST_CASE("conv2d examples") {
  SUBCASE("identity kernel") {
    const Tensor<double> x({1, 1, 1, 1}, {5}), w({1, 1, 1, 1}, {1}), b({1}, {0});
    CHECK(ops::conv2d(x, w, b, 1, 0).item() == 5.0);
  }
  SUBCASE("zero weights give zero output") {
    Rng rng(3);
    const auto x = random_tensor({2, 3, 5, 5}, rng);
    const auto y = ops::conv2d(x, Tensor<double>::zeros({4, 3, 3, 3}), Tensor<double>::zeros({4}), 1, 1);
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("3x3 input with diagonal 2x2 kernel matches nested loops") {
    const Tensor<double> x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    const Tensor<double> w({1, 1, 2, 2}, {1, 0, 0, 1});
    const auto oracle = conv_oracle(x, w, {}, 1, 0);
    CHECK(oracle == std::vector<double>{6, 8, 12, 14});
    CHECK(values(ops::conv2d(x, w, {}, 1, 0)) == oracle);
  }
  SUBCASE("random configurations match nested loops") {
    Rng rng(11);
    for (std::size_t stride : {1u, 2u})
      for (std::size_t pad : {0u, 1u}) {
        const auto x = random_tensor({2, 3, 7, 7}, rng);
        const auto w = random_tensor({4, 3, 3, 3}, rng);
        const auto b = random_tensor({4}, rng);
        const auto got = ops::conv2d(x, w, b, stride, pad);
        const auto want = conv_oracle(x, w, b, stride, pad);
        REQUIRE(got.numel() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
      }
  }
  SUBCASE("errors") {
    const auto x = Tensor<double>::zeros({1, 2, 4, 4});
    CHECK_THROWS_AS(ops::conv2d(x, Tensor<double>::zeros({1, 3, 3, 3}), {}, 1, 1), ShapeError);
    CHECK_THROWS_AS(ops::conv2d(x, Tensor<double>::zeros({1, 2, 3, 3}), {}, 2, 0), ShapeError);
  }
}

TEST_CASE("elementwise examples") {
  CHECK(ops::tanh(Tensor<double>::scalar(0)).item() == 0.0);
  CHECK(ops::leaky_relu(Tensor<double>::scalar(-1), 0.1).item() == doctest::Approx(-0.1));
  CHECK(ops::exp(Tensor<double>::scalar(1)).item() == doctest::Approx(2.718281828459045).epsilon(1e-15));
  CHECK_THROWS_AS(ops::add(Tensor<double>::zeros({2}), Tensor<double>::zeros({3})), ShapeError);

  // Derivative of leaky_relu at exactly 0 is the positive-side slope.
  auto x = Tensor<double>::scalar(0).set_requires_grad(true);
  backward(ops::leaky_relu(x, 0.1));
  CHECK(x.grad().item() == 1.0);
}

TEST_CASE("reduction examples") {
  const Tensor<double> v({4}, {1, 2, 3, 4});
  CHECK(ops::mean_all(v).item() == 2.5);
  CHECK(ops::sum_all(Tensor<double>::zeros({3, 2})).item() == 0.0);

  auto m = Tensor<double>({3}, {3, 1, 3}).set_requires_grad(true);
  const auto top = ops::max(m, {0});
  CHECK(top.item() == 3.0);
  backward(top);
  CHECK(values(m.grad()) == std::vector<double>{1, 0, 0});

  const Tensor<double> grid({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(values(ops::sum(grid, {1})) == std::vector<double>{6, 15});
  CHECK(values(ops::sum(grid, {0}, true)) == std::vector<double>{5, 7, 9});
  CHECK(ops::sum(grid, {0}, true).shape() == Shape{1, 3});
  CHECK_THROWS_AS(ops::sum(grid, {}), ShapeError);
  CHECK_THROWS_AS(ops::sum(grid, {2}), ShapeError);
}

TEST_CASE("matmul examples") {
  const Tensor<double> a({2, 2}, {1, 2, 3, 4}), b({2, 2}, {5, 6, 7, 8});
  const Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  CHECK(values(ops::matmul(eye, a)) == values(a));
  CHECK(values(ops::matmul(Tensor<double>::zeros({2, 2}), a)) == std::vector<double>(4, 0.0));
  // Hand evaluation: [1*5+2*7, 1*6+2*8; 3*5+4*7, 3*6+4*8]
  CHECK(values(ops::matmul(a, b)) == std::vector<double>{19, 22, 43, 50});
  CHECK(values(ops::matmul(a, b, true, false)) == std::vector<double>{26, 30, 38, 44});
  CHECK_THROWS_AS(ops::matmul(a, Tensor<double>::zeros({3, 2})), ShapeError);
}

TEST_CASE("softmax examples") {
  const auto uniform = ops::softmax(Tensor<double>::full({1, 5}, 0.7), 1);
  for (double v : uniform.data()) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));

  const auto pair = ops::softmax(Tensor<double>({2}, {0.0, std::log(3.0)}), 0);
  CHECK(pair[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(pair[1] == doctest::Approx(0.75).epsilon(1e-12));

  Rng rng(5);
  const auto logits = random_tensor({3, 7}, rng, -5, 5);
  const auto s = ops::softmax(logits, 1);
  const auto shifted = ops::softmax(ops::add_scalar(logits, 123.0), 1);
  for (std::size_t r = 0; r < 3; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 7; ++c) {
      total += s[r * 7 + c];
      CHECK(s[r * 7 + c] > 0.0);
      CHECK(std::abs(s[r * 7 + c] - shifted[r * 7 + c]) < 1e-6);
    }
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
}

TEST_CASE("pooling and upsampling examples") {
  const auto pooled = ops::avg_pool2(Tensor<double>::full({1, 2, 4, 4}, 0.3));
  CHECK(pooled.shape() == Shape{1, 2, 2, 2});
  for (double v : pooled.data()) CHECK(v == doctest::Approx(0.3));
  CHECK(values(ops::upsample_nearest2(Tensor<double>({1, 1, 1, 1}, {1}))) == std::vector<double>{1, 1, 1, 1});
  CHECK(ops::avg_pool2(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4})).item() == 2.5);
  CHECK_THROWS_AS(ops::avg_pool2(Tensor<double>::zeros({1, 1, 3, 4})), ShapeError);
}

TEST_CASE("backward examples") {
  auto x = Tensor<double>({2}, {1, 2}).set_requires_grad(true);
  backward(ops::sum_all(x));
  CHECK(values(x.grad()) == std::vector<double>{1, 1});
  x.zero_grad();
  backward(ops::sum_all(ops::square(x)));
  CHECK(values(x.grad()) == std::vector<double>{2, 4});

  CHECK_THROWS_AS(backward(ops::square(x)), ShapeError);
  Tape::current().clear();
  CHECK(Tape::current().size() == 0);

  SUBCASE("composite conv -> leaky relu -> mean matches finite differences") {
    Rng rng(21);
    const auto fn = [](const std::vector<Tensor<double>>& in) {
      return ops::mean_all(ops::leaky_relu(ops::conv2d(in[0], in[1], in[2], 1, 1)));
    };
    const auto r = grad_check(fn, {random_tensor({2, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng),
                                   random_tensor({3}, rng)});
    CHECK(r.ok(1e-4));
  }
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(9);
  auto x = random_tensor({2, 3}, rng).set_requires_grad(true);
  const auto l1 = [&] { return ops::sum_all(ops::tanh(x)); };
  const auto l2 = [&] { return ops::mean_all(ops::square(ops::exp(x))); };
  backward(ops::add(l1(), l2()));
  const auto joint = x.grad();
  x.zero_grad();
  backward(l1());
  backward(l2());
  const auto separate = x.grad();
  for (std::size_t i = 0; i < joint.numel(); ++i) CHECK(joint[i] == doctest::Approx(separate[i]).epsilon(1e-14));
}

TEST_CASE("operations do not mutate their inputs") {
  Rng rng(13);
  auto a = random_tensor({1, 2, 4, 4}, rng).set_requires_grad(true);
  const auto w = random_tensor({2, 2, 3, 3}, rng);
  const auto a_before = values(a);
  const auto w_before = values(w);
  const auto feat = ops::conv2d(ops::tanh(a), w, {}, 1, 1);
  const auto y = ops::add(ops::upsample_nearest2(ops::avg_pool2(feat)), feat);
  const auto s = ops::softmax(ops::reshape(y, {2, 16}), 1);
  backward(ops::sum_all(ops::square(s)));
  CHECK(values(a) == a_before);
  CHECK(values(w) == w_before);
}

TEST_CASE("no recording under NoGradGuard") {
  auto x = Tensor<double>({2}, {1, 2}).set_requires_grad(true);
  Tape::current().clear();
  {
    NoGradGuard guard;
    const auto y = ops::square(x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(Tape::current().size() == 0);
  CHECK_THROWS(backward(ops::sum_all(x.detach())));
}
