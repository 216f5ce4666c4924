#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "picn/completion.hpp"
#include "picn/degeneracy.hpp"
#include "picn/ops.hpp"
#include "support/small.hpp"

using namespace picn;

namespace {

std::vector<float> values(const Tensor<float>& t) { return {t.data().begin(), t.data().end()}; }

DegeneracyConfig tiny_config() {
  DegeneracyConfig c;
  c.budget = 3;
  c.train_count = 12;
  c.held_out = 2;
  c.samples = 3;
  c.sigma_every = 1;
  c.batch_size = 4;
  c.net.base_width = 4;
  c.net.latent_dim = 4;
  c.net.prior_blocks = 1;
  return c;
}

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  std::istringstream in(s);
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

}  // namespace

TEST_CASE("variant names round trip") {
  CHECK(all_variants().size() == 4);
  for (auto v : all_variants()) CHECK(parse_variant(to_string(v)) == v);
  CHECK_THROWS_AS(parse_variant("bicycle"), std::invalid_argument);
  CHECK(objective_of(VariantKind::dual_path) == Objective::dual_path);
  CHECK(objective_of(VariantKind::cvae) == Objective::cvae);
  CHECK(latent_source_of(VariantKind::fixed_prior_cvae) == LatentSource::standard_normal);
  CHECK(latent_source_of(VariantKind::cvae) == LatentSource::conditional_prior);
}

TEST_CASE("toy task conditions are unique and deterministic") {
  Rng a(5), b(5);
  const auto t1 = toy_task(60, a), t2 = toy_task(60, b);
  REQUIRE(t1.pairs.size() == 60);
  CHECK(t1.size == 16);
  CHECK(t1.mask.shape() == Shape{1, 16, 16});
  std::set<std::vector<float>> conditions;
  for (std::size_t i = 0; i < t1.pairs.size(); ++i) {
    const auto& p = t1.pairs[i];
    CHECK(p.image.shape() == Shape{1, 16, 16});
    conditions.insert(values(p.condition));
    CHECK(values(p.image) == values(t2.pairs[i].image));
    // condition + completion reassembles the image, and the two never overlap.
    for (std::size_t k = 0; k < p.image.numel(); ++k) {
      CHECK(p.condition[k] + p.completion[k] == p.image[k]);
      if (t1.mask[k] == 0.f) CHECK(p.condition[k] == 0.f);
      else CHECK(p.completion[k] == 0.f);
    }
  }
  CHECK(conditions.size() == 60);
  CHECK(t1.images().size() == 60);
}

TEST_CASE("sigma_non_increasing") {
  std::vector<SigmaPoint> down, up, noisy;
  for (std::size_t s = 0; s < 200; s += 10) {
    down.push_back({s, 1.0 - 0.001 * double(s)});
    up.push_back({s, 0.5 + 0.001 * double(s)});
    noisy.push_back({s, 1.0 - 0.001 * double(s) + ((s / 10) % 2 ? 0.02 : 0.0)});
  }
  CHECK(sigma_non_increasing(down, 1));
  CHECK_FALSE(sigma_non_increasing(up, 1));
  CHECK_FALSE(sigma_non_increasing(noisy, 1));
  CHECK(sigma_non_increasing(noisy, 20));
}

TEST_CASE("config validation") {
  auto c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.samples = 1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.budget = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("composite copies visible pixels exactly") {
  Rng rng(3);
  const auto imgs = testing::small_images(1);
  const auto mask = make_mask(MaskSpec{}, 16, 16, rng);
  const auto gen = Tensor<float>::full({1, 16, 16}, 0.123f);
  const auto out = composite(imgs[0], mask, gen);
  for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out[i] == (mask[i] > 0.5f ? imgs[0][i] : 0.123f));
  CHECK_THROWS_AS(composite(imgs[0], mask, Tensor<float>::full({1, 8, 8}, 0.f)), ShapeError);
}

TEST_CASE("complete draws k samples with an exact visible region") {
  auto cfg = testing::small_train_config();
  TrainSession s(cfg);
  const auto img = testing::small_images(1)[0];
  Rng mr(1);
  const auto mask = make_mask(cfg.mask, 16, 16, mr);
  Rng r1(9), r2(9);
  const auto c = complete(s.model, img, mask, 7, r1, LatentSource::conditional_prior, 3);
  REQUIRE(c.raw.size() == 7);
  REQUIRE(c.composite.size() == 7);
  CHECK(c.prior_sigma.shape() == Shape{cfg.net.latent_dim});
  for (const auto& out : c.composite)
    for (std::size_t i = 0; i < out.numel(); ++i)
      if (mask[i] > 0.5f) CHECK(out[i] == img[i]);
  // Chunking does not change the draws.
  const auto d = complete(s.model, img, mask, 7, r2, LatentSource::conditional_prior, 25);
  for (std::size_t k = 0; k < 7; ++k)
    for (std::size_t i = 0; i < img.numel(); ++i) CHECK(d.raw[k][i] == doctest::Approx(c.raw[k][i]).epsilon(1e-5));
  Rng r3(9);
  CHECK_THROWS_AS(complete(s.model, Tensor<float>::full({1, 8, 8}, 0.f), mask, 2, r3), ShapeError);
}

TEST_CASE("run_all produces one row per variant and seed, deterministically") {
  const auto cfg = tiny_config();
  const auto a = run_all(cfg, {1, 2});
  REQUIRE(a.entries.size() == 8);
  CHECK(a.seeds() == std::vector<std::uint64_t>{1, 2});
  for (const auto& e : a.entries) {
    CHECK(e.steps_completed == cfg.budget);
    CHECK(e.stable);
    CHECK(e.mean_prior_sigma >= 0.0);
    CHECK(e.diversity_masked >= 0.0);
    CHECK(e.sigma_trajectory.size() >= 2);
  }
  CHECK(a.find(VariantKind::fixed_prior_cvae, 1).mean_prior_sigma == 1.0);
  CHECK(count_lines(a.csv()) == 1 + 8);
  CHECK(a.csv().rfind(DegeneracyReport::csv_header(), 0) == 0);
  CHECK(a.ordering_wins() <= 2);

  auto threaded = cfg;
  threaded.threads = 3;
  const auto b = run_all(threaded, {1, 2});
  CHECK(a.csv() == b.csv());

  const auto dir = std::filesystem::temp_directory_path() / "picn_test_degeneracy";
  std::filesystem::remove_all(dir);
  write_report(a, dir);
  CHECK(std::filesystem::exists(dir / "degeneracy.csv"));
  CHECK(std::filesystem::exists(dir / "sigma.csv"));
  std::ifstream md(dir / "degeneracy.md");
  const std::string text((std::istreambuf_iterator<char>(md)), {});
  CHECK(text.find("dual_path") != std::string::npos);
  CHECK((text.find("PASS") != std::string::npos || text.find("FAIL") != std::string::npos));
}
