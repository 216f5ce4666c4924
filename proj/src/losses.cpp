#include "picn/losses.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "picn/ops.hpp"

namespace picn {

void LossWeights::validate() const {
  if (!(alpha_kl >= 0)) throw std::invalid_argument("loss.alpha_kl must be non-negative");
  if (!(alpha_app >= 0)) throw std::invalid_argument("loss.alpha_app must be non-negative");
  if (!(alpha_ad >= 0)) throw std::invalid_argument("loss.alpha_ad must be non-negative");
  if (n_scale == 0) throw std::invalid_argument("loss.n_scale must be positive");
}

std::string LossReport::csv_header() { return "step,kl_r,kl_g,app_r,app_g,ad_r,ad_g,total"; }

std::string LossReport::csv_row(std::size_t step) const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", step, kl_r, kl_g, app_r, app_g, ad_r,
                ad_g, total);
  return buf;
}

bool LossReport::finite() const {
  for (double v : {kl_r, kl_g, app_r, app_g, ad_r, ad_g, total})
    if (!std::isfinite(v)) return false;
  return true;
}

double weighted_total(const LossReport& r, const LossWeights& w) {
  return w.effective_kl() * (r.kl_r + r.kl_g) + w.alpha_app * (r.app_r + r.app_g) + w.alpha_ad * (r.ad_r + r.ad_g);
}

template <typename T>
Tensor<T> loss_kl_r(const DiagGaussian<T>& q, std::span<const AdaptivePrior> priors) {
  if (priors.size() != q.batch()) throw ShapeError("one adaptive prior per instance required");
  return kl_divergence(q, prior_gaussian<T>(priors, q.latent_dim()));
}

template <typename T>
Tensor<T> loss_kl_g(const DiagGaussian<T>& q, const DiagGaussian<T>& p) {
  return kl_divergence(q, p);
}

template <typename T>
Tensor<T> loss_app_r(const std::vector<Tensor<T>>& rec, const std::vector<Tensor<T>>& truth) {
  using namespace ops;
  if (rec.empty() || rec.size() != truth.size()) throw ShapeError("scale count mismatch in appearance loss");
  Tensor<T> acc;
  for (std::size_t s = 0; s < rec.size(); ++s) {
    auto term = mean_all(abs(sub(rec[s], truth[s])));
    acc = s == 0 ? term : add(acc, term);
  }
  return scale(acc, T(1) / T(rec.size()));
}

template <typename T>
Tensor<T> loss_app_g(const std::vector<Tensor<T>>& gen, const std::vector<Tensor<T>>& truth,
                     const std::vector<Tensor<T>>& masks) {
  using namespace ops;
  if (gen.empty() || gen.size() != truth.size() || gen.size() != masks.size())
    throw ShapeError("scale count mismatch in masked appearance loss");
  Tensor<T> acc;
  for (std::size_t s = 0; s < gen.size(); ++s) {
    const auto& m = masks[s];
    const auto& g = gen[s];
    if (m.rank() != 4 || m.dim(1) != 1 || m.dim(0) != g.dim(0) || m.dim(2) != g.dim(2) || m.dim(3) != g.dim(3))
      throw ShapeError("mask " + shape_str(m.shape()) + " does not match image " + shape_str(g.shape()));
    double visible = 0;
    for (T v : m.data()) {
      if (v != T(0) && v != T(1)) throw std::invalid_argument("appearance mask must be binary");
      visible += v;
    }
    const auto mm = g.dim(1) == 1 ? m : broadcast_to(m, g.shape());
    const auto masked_err = mul(abs(sub(g, truth[s])), mm);
    const T denom = T(std::max(1.0, visible * g.dim(1)));
    auto term = scale(sum_all(masked_err), T(1) / denom);
    acc = s == 0 ? term : add(acc, term);
  }
  return scale(acc, T(1) / T(gen.size()));
}

template <typename T>
Tensor<T> loss_ad_r(const Tensor<T>& feat_rec, const Tensor<T>& feat_real) {
  using namespace ops;
  if (feat_rec.shape() != feat_real.shape() || feat_rec.rank() != 2)
    throw ShapeError("feature match needs equal [B,F] features, got " + shape_str(feat_rec.shape()) + " and " +
                     shape_str(feat_real.shape()));
  return mean_all(sqrt(sum(square(sub(feat_rec, feat_real)), {1})));
}

template <typename T>
Tensor<T> loss_ad_g(const Tensor<T>& score_gen) {
  return ops::mean_all(ops::square(ops::add_scalar(score_gen, T(-1))));
}

template <typename T>
Tensor<T> loss_disc(const Tensor<T>& score_real, const Tensor<T>& score_fake) {
  using namespace ops;
  if (score_real.shape() != score_fake.shape()) throw ShapeError("real/fake score shapes differ");
  const auto err = add(square(add_scalar(score_real, T(-1))), square(score_fake));
  return scale(mean_all(err), T(0.5));
}

template <typename T>
Tensor<T> total_loss(const LossTerms<T>& t, const LossWeights& w) {
  using namespace ops;
  Tensor<T> acc = Tensor<T>::scalar(T(0));
  auto add_term = [&](const Tensor<T>& term, double weight) {
    if (term.defined() && weight != 0) acc = add(acc, scale(term, static_cast<T>(weight)));
  };
  add_term(t.kl_r, w.effective_kl());
  add_term(t.kl_g, w.effective_kl());
  add_term(t.app_r, w.alpha_app);
  add_term(t.app_g, w.alpha_app);
  add_term(t.ad_r, w.alpha_ad);
  add_term(t.ad_g, w.alpha_ad);
  return acc;
}

template <typename T>
LossReport make_report(const LossTerms<T>& t, const LossWeights& w) {
  auto v = [](const Tensor<T>& x) { return x.defined() ? static_cast<double>(x.item()) : 0.0; };
  LossReport r{v(t.kl_r), v(t.kl_g), v(t.app_r), v(t.app_g), v(t.ad_r), v(t.ad_g), 0.0};
  r.total = weighted_total(r, w);
  return r;
}

#define PICN_INSTANTIATE_LOSSES(T)                                                                      \
  template Tensor<T> loss_kl_r<T>(const DiagGaussian<T>&, std::span<const AdaptivePrior>);              \
  template Tensor<T> loss_kl_g<T>(const DiagGaussian<T>&, const DiagGaussian<T>&);                      \
  template Tensor<T> loss_app_r<T>(const std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&);       \
  template Tensor<T> loss_app_g<T>(const std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&,        \
                                   const std::vector<Tensor<T>>&);                                      \
  template Tensor<T> loss_ad_r<T>(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> loss_ad_g<T>(const Tensor<T>&);                                                    \
  template Tensor<T> loss_disc<T>(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> total_loss<T>(const LossTerms<T>&, const LossWeights&);                            \
  template LossReport make_report<T>(const LossTerms<T>&, const LossWeights&);

PICN_INSTANTIATE_LOSSES(float)
PICN_INSTANTIATE_LOSSES(double)

}  // namespace picn
