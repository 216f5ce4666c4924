#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "picn/data.hpp"
#include "picn/losses.hpp"
#include "picn/networks.hpp"

namespace picn {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.0;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moments for one parameter group, aligned by index with the
// group's StateDict params.
template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t step = 0;
};

// One bias-corrected Adam update of every parameter in `params` using its
// accumulated gradient (a missing gradient counts as zero). A non-finite
// gradient throws NumericalError naming the parameter, before any update.
template <typename T>
void adam_step(const StateDict<T>& params, AdamState<T>& state, const AdamConfig& cfg);

// Which losses drive the generator-side update. dual_path is the full
// framework; the others are the baselines of the degeneracy study.
enum class Objective { dual_path, cvae, fixed_prior_cvae, instance_blind };
Objective parse_objective(const std::string& name);
std::string to_string(Objective o);

struct TrainConfig {
  AdamConfig adam;
  std::size_t d_steps_per_g = 1;
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 0;  // 0 = only at the end
  std::size_t sample_every = 0;      // 0 = never
  Objective objective = Objective::dual_path;
  LossWeights loss;
  NetConfig net;
  MaskSpec mask;

  void validate() const;
};

struct Optimizers {
  AdamState<float> gen;  // encoder, infer1, infer2, generator
  AdamState<float> d1;
  AdamState<float> d2;
};

struct TrainSession {
  TrainConfig cfg;
  ModelBundle<float> model;
  Optimizers opt;
  std::size_t step = 0;  // completed steps

  TrainSession() = default;
  explicit TrainSession(const TrainConfig& cfg);
};

// Draws the batch for `step`: indices, masks and nothing else depend only
// on (seed, step), which is what makes resumed runs bit-identical.
std::vector<Sample> draw_batch(const TrainConfig& cfg, const std::vector<Tensor<float>>& images, std::size_t step);

// Discriminator phase then generator phase on one batch. Returns the
// generator-side losses measured before the update.
LossReport train_step(TrainSession& s, const Batch<float>& batch, Rng& rng);

// Per-step hooks for the CLI and tests.
struct TrainCallbacks {
  std::function<void(std::size_t step, const LossReport&)> on_step;
  std::function<void(std::size_t step, const TrainSession&, const Batch<float>&, Rng&)> on_sample;
  std::function<void(std::size_t step, const TrainSession&)> on_checkpoint;
};

// Runs until s.step == s.cfg.steps. Throws NumericalError naming the step
// when a loss becomes non-finite.
void train(TrainSession& s, const std::vector<Tensor<float>>& images, const TrainCallbacks& cb = {});

// Process-wide allocator settings for large short-lived buffers (glibc
// only; a no-op elsewhere). Called by TrainSession.
void tune_allocator();

// Sets requires_grad on every parameter of a state dict.
template <typename T>
void set_trainable(const StateDict<T>& sd, bool on);
template <typename T>
void zero_grads(const StateDict<T>& sd);

}  // namespace picn
