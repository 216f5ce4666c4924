#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "picn/completion.hpp"
#include "picn/training.hpp"

namespace picn {

// Completion strategies compared on the toy task. All share the network
// capacity and the training budget; only the objective differs.
enum class VariantKind {
  cvae,              // conditional VAE trained on its own bound
  fixed_prior_cvae,  // conditional VAE against a fixed N(0, I) prior
  instance_blind,    // generative path only: visible-region fit + adversarial
  dual_path,         // reconstructive + generative paths
};
VariantKind parse_variant(const std::string& name);
std::string to_string(VariantKind kind);
Objective objective_of(VariantKind kind);
LatentSource latent_source_of(VariantKind kind);
const std::vector<VariantKind>& all_variants();

// One image whose visible part (the condition) occurs nowhere else in the
// set, so each condition has exactly one training completion.
struct ToyPair {
  Tensor<float> image;       // [1,S,S]
  Tensor<float> condition;   // mask * image
  Tensor<float> completion;  // (1 - mask) * image
};

struct ToyTask {
  std::size_t size = 16;
  Tensor<float> mask;  // centre hole, [1,S,S]
  std::vector<ToyPair> pairs;

  std::vector<Tensor<float>> images() const;
};

// `count` stripe images at 16x16 with a centre hole; duplicate conditions
// are redrawn. Deterministic in the rng state.
ToyTask toy_task(std::size_t count, Rng& rng);

struct DegeneracyConfig {
  std::size_t budget = 2000;        // training steps per variant
  std::size_t train_count = 128;    // distinct training conditions
  std::size_t held_out = 8;         // evaluation conditions
  std::size_t samples = 20;         // samples per evaluation condition
  std::size_t sigma_every = 20;     // steps between sigma-trajectory points
  std::size_t batch_size = 16;
  std::size_t threads = 1;          // variants trained concurrently
  NetConfig net = default_net();

  static NetConfig default_net();
  void validate() const;
};

struct SigmaPoint {
  std::size_t step = 0;
  double sigma = 0;
};

struct DegeneracyEntry {
  VariantKind variant = VariantKind::dual_path;
  std::uint64_t seed = 0;
  double initial_prior_sigma = 0;
  double mean_prior_sigma = 0;  // after training; 1 for the fixed prior
  double diversity_masked = 0;
  double diversity_full = 0;
  bool stable = true;           // every loss finite
  std::size_t steps_completed = 0;
  std::string failure;          // message of the numerical error, if any
  std::vector<SigmaPoint> sigma_trajectory;

  // 1 - final / initial mean prior sigma.
  double sigma_contraction() const;
};

struct DegeneracyReport {
  std::vector<DegeneracyEntry> entries;

  const DegeneracyEntry& find(VariantKind kind, std::uint64_t seed) const;
  std::vector<std::uint64_t> seeds() const;
  // dual_path masked diversity strictly above the variant's on that seed.
  bool dual_beats(VariantKind other, std::uint64_t seed) const;
  // Number of seeds on which dual_path beats both cvae and fixed_prior_cvae.
  std::size_t ordering_wins() const;

  static std::string csv_header();  // variant,seed,mean_prior_sigma,diversity_masked,diversity_full,stable
  std::string csv() const;
  std::string markdown() const;
};

// Trains one variant on the toy task for cfg.budget steps, then draws
// cfg.samples completions per held-out condition from the variant's
// test-time latent source. A non-finite loss stops training and is
// recorded as instability.
DegeneracyEntry run_variant(VariantKind kind, const DegeneracyConfig& cfg, std::uint64_t seed);

// Every variant for every seed, ordered by seed then variant.
DegeneracyReport run_all(const DegeneracyConfig& cfg, const std::vector<std::uint64_t>& seeds);

// Writes degeneracy.csv and degeneracy.md (plus per-run sigma
// trajectories in sigma.csv) into dir.
void write_report(const DegeneracyReport& report, const std::filesystem::path& dir);

// Smoothed trajectory (trailing mean over `window` steps) is non-increasing
// over the last half of training, allowing `tolerance` of slack per point.
bool sigma_non_increasing(const std::vector<SigmaPoint>& trajectory, std::size_t window, double tolerance = 0.0);

}  // namespace picn
