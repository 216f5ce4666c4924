#include "picn/training.hpp"

#include <cmath>
#include <mutex>
#include <stdexcept>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "picn/ops.hpp"

namespace picn {

template <typename T>
void set_trainable(const StateDict<T>& sd, bool on) {
  for (const auto& [name, t] : sd.params) {
    auto copy = t;
    copy.set_requires_grad(on);
  }
}

template <typename T>
void zero_grads(const StateDict<T>& sd) {
  for (const auto& [name, t] : sd.params) {
    auto copy = t;
    copy.zero_grad();
  }
}

template <typename T>
void adam_step(const StateDict<T>& params, AdamState<T>& state, const AdamConfig& cfg) {
  const auto n = params.params.size();
  if (state.m.empty()) {
    state.m.resize(n);
    state.v.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      state.m[i].assign(params.params[i].second.numel(), T(0));
      state.v[i].assign(params.params[i].second.numel(), T(0));
    }
  }
  if (state.m.size() != n) throw ShapeError("optimizer state does not match the parameter list");
  for (std::size_t i = 0; i < n; ++i) {
    const auto& [name, p] = params.params[i];
    if (state.m[i].size() != p.numel()) throw ShapeError("optimizer moment shape mismatch for " + name);
    if (!p.has_grad()) continue;
    for (T g : p.grad_data())
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter " + name);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
  const T step_size = T(cfg.lr / bc1);
  const T inv_bc2 = T(1.0 / bc2);
  const T eps = T(cfg.eps);
  for (std::size_t i = 0; i < n; ++i) {
    auto p = params.params[i].second;
    auto& m = state.m[i];
    auto& v = state.v[i];
    const bool has = p.has_grad();
    auto data = p.mutable_data();
    for (std::size_t k = 0; k < m.size(); ++k) {
      const T g = has ? p.grad_data()[k] : T(0);
      m[k] = b1 * m[k] + (T(1) - b1) * g;
      v[k] = b2 * v[k] + (T(1) - b2) * g * g;
      data[k] -= step_size * m[k] / (std::sqrt(v[k] * inv_bc2) + eps);
    }
  }
}

template void adam_step<float>(const StateDict<float>&, AdamState<float>&, const AdamConfig&);
template void adam_step<double>(const StateDict<double>&, AdamState<double>&, const AdamConfig&);
template void set_trainable<float>(const StateDict<float>&, bool);
template void set_trainable<double>(const StateDict<double>&, bool);
template void zero_grads<float>(const StateDict<float>&);
template void zero_grads<double>(const StateDict<double>&);

Objective parse_objective(const std::string& name) {
  if (name == "dual_path") return Objective::dual_path;
  if (name == "cvae") return Objective::cvae;
  if (name == "fixed_prior_cvae") return Objective::fixed_prior_cvae;
  if (name == "instance_blind") return Objective::instance_blind;
  throw std::invalid_argument("unknown objective '" + name +
                              "' (expected dual_path, cvae, fixed_prior_cvae or instance_blind)");
}

std::string to_string(Objective o) {
  switch (o) {
    case Objective::dual_path: return "dual_path";
    case Objective::cvae: return "cvae";
    case Objective::fixed_prior_cvae: return "fixed_prior_cvae";
    case Objective::instance_blind: return "instance_blind";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (!(adam.lr >= 0) || !std::isfinite(adam.lr)) throw std::invalid_argument("train.lr must be finite and >= 0");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1)) throw std::invalid_argument("train.beta1 must lie in [0,1)");
  if (!(adam.beta2 >= 0 && adam.beta2 < 1)) throw std::invalid_argument("train.beta2 must lie in [0,1)");
  if (!(adam.eps > 0)) throw std::invalid_argument("train.eps must be positive");
  if (d_steps_per_g == 0) throw std::invalid_argument("train.d_steps_per_g must be >= 1");
  if (batch_size == 0) throw std::invalid_argument("train.batch_size must be positive");
  loss.validate();
  net.validate();
  mask.validate();
}

void tune_allocator() {
#ifdef __GLIBC__
  // Convolution scratch buffers are megabytes each and freed every call;
  // keeping them on the heap instead of fresh mmaps avoids a page-fault
  // storm on every layer.
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 256 << 20);
  });
#endif
}

TrainSession::TrainSession(const TrainConfig& c) : cfg(c) {
  tune_allocator();
  cfg.validate();
  cfg.loss.n_scale = cfg.net.output_scales;
  model = ModelBundle<float>(cfg.net, cfg.seed);
}

std::vector<Sample> draw_batch(const TrainConfig& cfg, const std::vector<Tensor<float>>& images, std::size_t step) {
  if (images.empty()) throw std::invalid_argument("training dataset is empty");
  Rng rng = Rng(cfg.seed).derive(step, 0);
  std::vector<Sample> out;
  out.reserve(cfg.batch_size);
  for (std::size_t i = 0; i < cfg.batch_size; ++i) {
    const auto idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(images.size()) - 1));
    const auto& img = images[idx];
    out.push_back(make_sample(img, make_mask(cfg.mask, img.dim(1), img.dim(2), rng)));
  }
  return out;
}

namespace {

struct GeneratorPass {
  std::vector<Tensor<float>> rec;  // empty when the objective has no reconstructive path
  std::vector<Tensor<float>> gen;  // empty when the objective has no generative path
  LossTerms<float> terms;
};

Tensor<float> noise_like(const Tensor<float>& mu, Rng& rng) {
  std::vector<float> v(mu.numel());
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return Tensor<float>(mu.shape(), std::move(v));
}

GeneratorPass generator_forward(TrainSession& s, const Batch<float>& batch, Rng& rng) {
  auto& m = s.model;
  const auto scales = s.cfg.net.output_scales;
  const auto truth = image_pyramid(batch.image, scales);
  GeneratorPass g;
  switch (s.cfg.objective) {
    case Objective::dual_path: {
      auto out = forward_dual(m, batch, rng);
      const auto priors = batch.priors();
      g.terms.kl_r = loss_kl_r(out.q, std::span<const AdaptivePrior>(priors));
      g.terms.kl_g = loss_kl_g(out.q, out.p);
      std::vector<Tensor<float>> masks;
      for (std::size_t k = 0; k < scales; ++k)
        masks.push_back(downsample_mask(batch.mask, std::size_t{1} << (scales - 1 - k)));
      g.terms.app_r = loss_app_r(out.rec, truth);
      g.terms.app_g = loss_app_g(out.gen, truth, masks);
      g.rec = std::move(out.rec);
      g.gen = std::move(out.gen);
      break;
    }
    case Objective::cvae:
    case Objective::fixed_prior_cvae: {
      // The posterior sees the whole image (hidden and visible parts); the
      // decoder is conditioned on the visible part as in the dual path.
      const auto f_m = m.encode(batch.masked);
      const auto f_g = m.encode(batch.image);
      const auto q = m.infer_posterior(f_g.bottleneck());
      const auto z = sample_with_noise(q, noise_like(q.mu, rng));
      g.rec = m.generate(z.z, f_m, batch.mask);
      if (s.cfg.objective == Objective::cvae) {
        g.terms.kl_g = loss_kl_g(q, m.infer_prior(f_m.bottleneck()));
      } else {
        const std::vector<AdaptivePrior> unit(batch.size(), AdaptivePrior{1, 1, 1.0});
        g.terms.kl_r = loss_kl_r(q, std::span<const AdaptivePrior>(unit));
      }
      g.terms.app_r = loss_app_r(g.rec, truth);
      break;
    }
    case Objective::instance_blind: {
      const auto f_m = m.encode(batch.masked);
      const auto p = m.infer_prior(f_m.bottleneck());
      const auto z = sample_with_noise(p, noise_like(p.mu, rng));
      g.gen = m.generate(z.z, f_m, batch.mask);
      std::vector<Tensor<float>> masks;
      for (std::size_t k = 0; k < scales; ++k)
        masks.push_back(downsample_mask(batch.mask, std::size_t{1} << (scales - 1 - k)));
      g.terms.app_g = loss_app_g(g.gen, truth, masks);
      break;
    }
  }
  return g;
}

}  // namespace

LossReport train_step(TrainSession& s, const Batch<float>& batch, Rng& rng) {
  auto& m = s.model;
  const auto gen_sd = m.generator_state();
  const auto d1_sd = m.disc_rec_state();
  const auto d2_sd = m.disc_gen_state();
  zero_grads(gen_sd);
  zero_grads(d1_sd);
  zero_grads(d2_sd);

  auto g = generator_forward(s, batch, rng);
  const bool use_d1 = !g.rec.empty() && s.cfg.objective == Objective::dual_path;
  const bool use_d2 = !g.gen.empty();

  // Discriminator phase on detached fakes, on a tape of its own so the
  // generator graph above stays intact for the generator phase.
  if (use_d1 || use_d2) {
    TapeScope scope;
    for (std::size_t k = 0; k < s.cfg.d_steps_per_g; ++k) {
      Tensor<float> loss = Tensor<float>::scalar(0.f);
      // Real and fake go through each discriminator as one stacked batch.
      const auto b = batch.size();
      auto disc_loss = [&](Discriminator<float>& d, const Tensor<float>& fake) {
        const auto score = d.forward(ops::concat<float>({batch.image, fake.detach()}, 0)).score;
        return loss_disc(ops::slice(score, 0, 0, b), ops::slice(score, 0, b, b));
      };
      if (use_d1) loss = ops::add(loss, disc_loss(m.disc_rec, g.rec.back()));
      if (use_d2) loss = ops::add(loss, disc_loss(m.disc_gen, g.gen.back()));
      if (!std::isfinite(loss.item()))
        throw NumericalError("non-finite discriminator loss at step " + std::to_string(s.step));
      backward(loss);
      if (use_d1) adam_step(d1_sd, s.opt.d1, s.cfg.adam);
      if (use_d2) adam_step(d2_sd, s.opt.d2, s.cfg.adam);
      zero_grads(d1_sd);
      zero_grads(d2_sd);
    }
  }

  // Generator phase: discriminators act as fixed functions.
  set_trainable(d1_sd, false);
  set_trainable(d2_sd, false);
  try {
    if (use_d1) {
      Tensor<float> feat_real;
      {
        NoGradGuard ng;
        feat_real = m.disc_rec.forward(batch.image).feat;
      }
      g.terms.ad_r = loss_ad_r(m.disc_rec.forward(g.rec.back()).feat, feat_real);
    }
    if (use_d2) g.terms.ad_g = loss_ad_g(m.disc_gen.forward(g.gen.back()).score);
    const auto total = total_loss(g.terms, s.cfg.loss);
    const auto report = make_report(g.terms, s.cfg.loss);
    if (!report.finite()) throw NumericalError("non-finite loss at step " + std::to_string(s.step));
    backward(total);
    adam_step(gen_sd, s.opt.gen, s.cfg.adam);
    zero_grads(gen_sd);
    set_trainable(d1_sd, true);
    set_trainable(d2_sd, true);
    return report;
  } catch (...) {
    Tape::current().clear();
    set_trainable(d1_sd, true);
    set_trainable(d2_sd, true);
    throw;
  }
}

void train(TrainSession& s, const std::vector<Tensor<float>>& images, const TrainCallbacks& cb) {
  if (images.empty()) throw std::invalid_argument("training dataset is empty");
  while (s.step < s.cfg.steps) {
    const auto batch = collate<float>(draw_batch(s.cfg, images, s.step));
    Rng rng = Rng(s.cfg.seed).derive(s.step, 1);
    const auto report = train_step(s, batch, rng);
    const auto done = s.step;
    ++s.step;
    if (cb.on_step) cb.on_step(done, report);
    if (cb.on_sample && s.cfg.sample_every && s.step % s.cfg.sample_every == 0) {
      Rng srng = Rng(s.cfg.seed).derive(s.step, 2);
      cb.on_sample(s.step, s, batch, srng);
    }
    if (cb.on_checkpoint &&
        ((s.cfg.checkpoint_every && s.step % s.cfg.checkpoint_every == 0) || s.step == s.cfg.steps))
      cb.on_checkpoint(s.step, s);
  }
}

}  // namespace picn
