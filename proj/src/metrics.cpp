#include "picn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace picn {
namespace {

void same_shape(const Tensor<float>& a, const Tensor<float>& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

double l1(const Tensor<float>& a, const Tensor<float>& b) {
  same_shape(a, b, "l1");
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += std::abs(double(a[i]) - double(b[i]));
  return a.numel() ? s / double(a.numel()) : 0.0;
}

double psnr(const Tensor<float>& a, const Tensor<float>& b) {
  same_shape(a, b, "psnr");
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = 0.5 * (double(a[i]) - double(b[i]));  // difference on the [0,1] scale
    s += d * d;
  }
  const double mse = a.numel() ? s / double(a.numel()) : 0.0;
  if (mse < 1e-10) return 100.0;
  return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

double tv(const Tensor<float>& img) {
  if (img.rank() != 3) throw ShapeError("tv expects [C,H,W], got " + shape_str(img.shape()));
  const auto c = img.dim(0), h = img.dim(1), w = img.dim(2);
  double sh = 0, sv = 0;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double v = img[(ch * h + y) * w + x];
        if (x + 1 < w) sh += std::abs(double(img[(ch * h + y) * w + x + 1]) - v);
        if (y + 1 < h) sv += std::abs(double(img[(ch * h + y + 1) * w + x]) - v);
      }
  const double nh = double(c * h * (w - 1)), nv = double(c * (h - 1) * w);
  return (nh > 0 ? sh / nh : 0.0) + (nv > 0 ? sv / nv : 0.0);
}

Diversity diversity(const std::vector<Tensor<float>>& samples, const Tensor<float>& mask) {
  if (samples.size() < 2) throw std::invalid_argument("diversity needs at least two samples");
  const auto& first = samples.front();
  if (first.rank() != 3 || mask.rank() != 3 || mask.dim(0) != 1 || mask.dim(1) != first.dim(1) ||
      mask.dim(2) != first.dim(2))
    throw ShapeError("diversity expects [C,H,W] samples and a [1,H,W] mask");
  for (const auto& s : samples) same_shape(s, first, "diversity");
  const auto c = first.dim(0), hw = first.dim(1) * first.dim(2);
  std::size_t hidden = 0;
  for (std::size_t i = 0; i < hw; ++i) hidden += mask[i] == 0.f;
  const std::size_t shown = hw - hidden;
  double full = 0, masked = 0, visible = 0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < samples.size(); ++a)
    for (std::size_t b = a + 1; b < samples.size(); ++b, ++pairs) {
      double sf = 0, sm = 0, sv = 0;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = std::abs(double(samples[a][ch * hw + i]) - double(samples[b][ch * hw + i]));
          sf += d;
          if (mask[i] == 0.f)
            sm += d;
          else
            sv += d;
        }
      full += sf / double(c * hw);
      if (hidden) masked += sm / double(c * hidden);
      if (shown) visible += sv / double(c * shown);
    }
  return {full / double(pairs), masked / double(pairs), visible / double(pairs)};
}

double visible_l1(const std::vector<Tensor<float>>& samples, const Tensor<float>& reference, const Tensor<float>& mask) {
  if (samples.empty()) throw std::invalid_argument("visible_l1 needs at least one sample");
  const auto c = reference.dim(0), hw = reference.dim(1) * reference.dim(2);
  std::size_t visible = 0;
  for (std::size_t i = 0; i < hw; ++i) visible += mask[i] == 1.f;
  if (!visible) return 0.0;
  double total = 0;
  for (const auto& s : samples) {
    same_shape(s, reference, "visible_l1");
    double acc = 0;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i)
        if (mask[i] == 1.f) acc += std::abs(double(s[ch * hw + i]) - double(reference[ch * hw + i]));
    total += acc / double(c * visible);
  }
  return total / double(samples.size());
}

std::vector<std::size_t> rank_samples(const std::vector<double>& scores, std::size_t k) {
  if (scores.empty()) throw std::invalid_argument("rank_samples: no samples to rank");
  if (k > scores.size())
    throw std::invalid_argument("rank_samples: k=" + std::to_string(k) + " exceeds " + std::to_string(scores.size()));
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(k);
  return idx;
}

std::vector<double> disc_scores(Discriminator<float>& d, const std::vector<Tensor<float>>& completions) {
  if (completions.empty()) throw std::invalid_argument("disc_scores: no samples");
  NoGradGuard ng;
  Shape shape{completions.size()};
  shape.insert(shape.end(), completions.front().shape().begin(), completions.front().shape().end());
  std::vector<float> stacked;
  stacked.reserve(numel_of(shape));
  for (const auto& c : completions) {
    same_shape(c, completions.front(), "disc_scores");
    stacked.insert(stacked.end(), c.data().begin(), c.data().end());
  }
  const auto out = d.forward(Tensor<float>(shape, std::move(stacked)));
  return std::vector<double>(out.score.data().begin(), out.score.data().end());
}

std::vector<std::size_t> rank_samples(Discriminator<float>& d, const std::vector<Tensor<float>>& completions,
                                      std::size_t k) {
  return rank_samples(disc_scores(d, completions), k);
}

std::size_t best_balance(const std::vector<Tensor<float>>& candidates, const Tensor<float>& truth) {
  if (candidates.empty()) throw std::invalid_argument("best_balance: no candidates");
  const auto n = candidates.size();
  std::vector<double> e(n), p(n);
  for (std::size_t i = 0; i < n; ++i) {
    e[i] = l1(candidates[i], truth);
    p[i] = psnr(candidates[i], truth);
  }
  auto ranks = [n](const std::vector<double>& v, bool ascending) {
    std::vector<std::size_t> idx(n), r(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return ascending ? v[a] < v[b] : v[a] > v[b]; });
    for (std::size_t i = 0; i < n; ++i) r[idx[i]] = i;
    return r;
  };
  const auto re = ranks(e, true), rp = ranks(p, false);
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (re[i] + rp[i] < re[best] + rp[best]) best = i;
  return best;
}

std::string MetricsReport::csv_header() { return "name,l1,psnr,tv,diversity_full,diversity_masked"; }

std::string MetricsReport::csv_row() const {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%s,%.9g,%.9g,%.9g,%.9g,%.9g", name.c_str(), l1, psnr, tv, diversity_full,
                diversity_masked);
  return buf;
}

MetricsReport aggregate(const std::vector<MetricsReport>& rows, const std::string& name) {
  MetricsReport m;
  m.name = name;
  if (rows.empty()) return m;
  for (const auto& r : rows) {
    m.l1 += r.l1;
    m.psnr += r.psnr;
    m.tv += r.tv;
    m.diversity_full += r.diversity_full;
    m.diversity_masked += r.diversity_masked;
  }
  const double n = double(rows.size());
  m.l1 /= n;
  m.psnr /= n;
  m.tv /= n;
  m.diversity_full /= n;
  m.diversity_masked /= n;
  return m;
}

std::string format_table(const std::vector<MetricsReport>& rows) {
  std::size_t width = 4;
  for (const auto& r : rows) width = std::max(width, r.name.size());
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s %10s %10s %10s %10s %10s\n", int(width), "name", "l1", "psnr", "tv", "div_full",
                "div_mask");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-*s %10.5f %10.3f %10.5f %10.5f %10.5f\n", int(width), r.name.c_str(), r.l1,
                  r.psnr, r.tv, r.diversity_full, r.diversity_masked);
    os << buf;
  }
  return os.str();
}

}  // namespace picn
