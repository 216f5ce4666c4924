#include "picn/degeneracy.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <stdexcept>
#include <thread>

#include "picn/metrics.hpp"

namespace picn {

VariantKind parse_variant(const std::string& name) {
  if (name == "cvae") return VariantKind::cvae;
  if (name == "fixed_prior_cvae") return VariantKind::fixed_prior_cvae;
  if (name == "instance_blind") return VariantKind::instance_blind;
  if (name == "dual_path") return VariantKind::dual_path;
  throw std::invalid_argument("unknown variant '" + name + "'");
}

std::string to_string(VariantKind kind) {
  switch (kind) {
    case VariantKind::cvae: return "cvae";
    case VariantKind::fixed_prior_cvae: return "fixed_prior_cvae";
    case VariantKind::instance_blind: return "instance_blind";
    case VariantKind::dual_path: return "dual_path";
  }
  return "?";
}

Objective objective_of(VariantKind kind) {
  switch (kind) {
    case VariantKind::cvae: return Objective::cvae;
    case VariantKind::fixed_prior_cvae: return Objective::fixed_prior_cvae;
    case VariantKind::instance_blind: return Objective::instance_blind;
    case VariantKind::dual_path: return Objective::dual_path;
  }
  return Objective::dual_path;
}

LatentSource latent_source_of(VariantKind kind) {
  return kind == VariantKind::fixed_prior_cvae ? LatentSource::standard_normal : LatentSource::conditional_prior;
}

const std::vector<VariantKind>& all_variants() {
  static const std::vector<VariantKind> v{VariantKind::cvae, VariantKind::fixed_prior_cvae,
                                          VariantKind::instance_blind, VariantKind::dual_path};
  return v;
}

std::vector<Tensor<float>> ToyTask::images() const {
  std::vector<Tensor<float>> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(p.image);
  return out;
}

ToyTask toy_task(std::size_t count, Rng& rng) {
  ToyTask task;
  MaskSpec spec;
  spec.kind = MaskKind::center;
  task.mask = make_mask(spec, task.size, task.size, rng);
  std::set<std::vector<std::uint8_t>> seen;
  while (task.pairs.size() < count) {
    auto image = gen_dataset(DatasetKind::stripes, 1, task.size, rng).front();
    auto s = make_sample(image, task.mask);
    std::vector<std::uint8_t> key;
    key.reserve(s.masked.numel());
    for (std::size_t i = 0; i < s.masked.numel(); ++i) key.push_back(to_byte(s.masked[i]));
    if (!seen.insert(std::move(key)).second) continue;
    task.pairs.push_back({std::move(image), std::move(s.masked), std::move(s.complement)});
  }
  return task;
}

NetConfig DegeneracyConfig::default_net() {
  NetConfig n;
  n.image_size = 16;
  n.channels = 1;
  n.base_width = 8;
  n.latent_dim = 32;
  n.down_blocks = 2;
  n.attention_resolution = 8;
  n.output_scales = 2;
  n.prior_blocks = 3;
  return n;
}

void DegeneracyConfig::validate() const {
  if (budget == 0) throw std::invalid_argument("degeneracy.budget must be positive");
  if (train_count == 0) throw std::invalid_argument("degeneracy.train_count must be positive");
  if (held_out == 0) throw std::invalid_argument("degeneracy.held_out must be positive");
  if (samples < 2) throw std::invalid_argument("degeneracy.samples must be at least 2");
  if (sigma_every == 0) throw std::invalid_argument("degeneracy.sigma_every must be positive");
  if (batch_size == 0) throw std::invalid_argument("degeneracy.batch_size must be positive");
  if (threads == 0) throw std::invalid_argument("degeneracy.threads must be positive");
  if (net.image_size != 16) throw std::invalid_argument("degeneracy.net.image_size must be 16");
  net.validate();
}

double DegeneracyEntry::sigma_contraction() const {
  if (!(initial_prior_sigma > 0)) return 0;
  return 1.0 - mean_prior_sigma / initial_prior_sigma;
}

namespace {

double measured_sigma(VariantKind kind, ModelBundle<float>& model, const std::vector<Tensor<float>>& held,
                      const Tensor<float>& mask) {
  // The fixed-prior variant samples from N(0, I) at test time whatever its
  // prior head says.
  if (kind == VariantKind::fixed_prior_cvae) return 1.0;
  return mean_prior_sigma(model, held, mask);
}

}  // namespace

DegeneracyEntry run_variant(VariantKind kind, const DegeneracyConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng task_rng = Rng(seed).derive(0x70E);
  const auto task = toy_task(cfg.train_count + cfg.held_out, task_rng);
  std::vector<Tensor<float>> train_images, held;
  for (std::size_t i = 0; i < task.pairs.size(); ++i)
    (i < cfg.train_count ? train_images : held).push_back(task.pairs[i].image);

  TrainConfig tc;
  tc.steps = cfg.budget;
  tc.batch_size = cfg.batch_size;
  tc.seed = seed;
  tc.objective = objective_of(kind);
  tc.net = cfg.net;
  tc.mask.kind = MaskKind::center;
  TrainSession session(tc);

  DegeneracyEntry e;
  e.variant = kind;
  e.seed = seed;
  e.initial_prior_sigma = measured_sigma(kind, session.model, held, task.mask);
  e.sigma_trajectory.push_back({0, e.initial_prior_sigma});
  TrainCallbacks cb;
  cb.on_step = [&](std::size_t step, const LossReport&) {
    const auto done = step + 1;
    if (done % cfg.sigma_every == 0)
      e.sigma_trajectory.push_back({done, measured_sigma(kind, session.model, held, task.mask)});
  };
  try {
    train(session, train_images, cb);
  } catch (const NumericalError& err) {
    e.stable = false;
    e.failure = err.what();
  }
  e.steps_completed = session.step;
  e.mean_prior_sigma = measured_sigma(kind, session.model, held, task.mask);

  double masked = 0, full = 0;
  for (std::size_t i = 0; i < held.size(); ++i) {
    Rng rng = Rng(seed).derive(0x5A3, i);
    const auto c = complete(session.model, held[i], task.mask, cfg.samples, rng, latent_source_of(kind));
    const auto d = diversity(c.raw, task.mask);
    masked += d.masked;
    full += d.full;
  }
  e.diversity_masked = masked / static_cast<double>(held.size());
  e.diversity_full = full / static_cast<double>(held.size());
  return e;
}

DegeneracyReport run_all(const DegeneracyConfig& cfg, const std::vector<std::uint64_t>& seeds) {
  cfg.validate();
  if (seeds.empty()) throw std::invalid_argument("degeneracy: no seeds given");
  struct Job {
    VariantKind kind;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (auto s : seeds)
    for (auto k : all_variants()) jobs.push_back({k, s});
  DegeneracyReport report;
  report.entries.resize(jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < jobs.size();) {
      try {
        report.entries[i] = run_variant(jobs[i].kind, cfg, jobs[i].seed);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const auto n = std::min(cfg.threads, jobs.size());
  if (n <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return report;
}

const DegeneracyEntry& DegeneracyReport::find(VariantKind kind, std::uint64_t seed) const {
  for (const auto& e : entries)
    if (e.variant == kind && e.seed == seed) return e;
  throw std::out_of_range("no degeneracy entry for " + to_string(kind) + " seed " + std::to_string(seed));
}

std::vector<std::uint64_t> DegeneracyReport::seeds() const {
  std::vector<std::uint64_t> out;
  for (const auto& e : entries)
    if (std::find(out.begin(), out.end(), e.seed) == out.end()) out.push_back(e.seed);
  return out;
}

bool DegeneracyReport::dual_beats(VariantKind other, std::uint64_t seed) const {
  return find(VariantKind::dual_path, seed).diversity_masked > find(other, seed).diversity_masked;
}

std::size_t DegeneracyReport::ordering_wins() const {
  std::size_t wins = 0;
  for (auto s : seeds())
    if (dual_beats(VariantKind::cvae, s) && dual_beats(VariantKind::fixed_prior_cvae, s)) ++wins;
  return wins;
}

std::string DegeneracyReport::csv_header() {
  return "variant,seed,mean_prior_sigma,diversity_masked,diversity_full,stable";
}

std::string DegeneracyReport::csv() const {
  std::string out = csv_header() + "\n";
  char buf[256];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof buf, "%s,%llu,%.9g,%.9g,%.9g,%d\n", to_string(e.variant).c_str(),
                  static_cast<unsigned long long>(e.seed), e.mean_prior_sigma, e.diversity_masked, e.diversity_full,
                  e.stable ? 1 : 0);
    out += buf;
  }
  return out;
}

std::string DegeneracyReport::markdown() const {
  std::string out;
  char buf[256];
  out += "| variant | seed | prior sigma (init -> final) | masked diversity | full diversity | stable |\n";
  out += "|---|---|---|---|---|---|\n";
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof buf, "| %s | %llu | %.4f -> %.4f | %.4f | %.4f | %s |\n", to_string(e.variant).c_str(),
                  static_cast<unsigned long long>(e.seed), e.initial_prior_sigma, e.mean_prior_sigma,
                  e.diversity_masked, e.diversity_full, e.stable ? "yes" : "no");
    out += buf;
  }
  out += "\n| variant | mean masked diversity | mean prior sigma |\n|---|---|---|\n";
  const auto s = seeds();
  for (auto k : all_variants()) {
    double d = 0, sig = 0;
    for (auto seed : s) {
      d += find(k, seed).diversity_masked;
      sig += find(k, seed).mean_prior_sigma;
    }
    std::snprintf(buf, sizeof buf, "| %s | %.4f | %.4f |\n", to_string(k).c_str(), d / s.size(), sig / s.size());
    out += buf;
  }
  out += "\nOrdering (dual_path above cvae and fixed_prior_cvae in masked diversity):\n\n";
  for (auto seed : s) {
    const bool ok = dual_beats(VariantKind::cvae, seed) && dual_beats(VariantKind::fixed_prior_cvae, seed);
    std::snprintf(buf, sizeof buf, "- seed %llu: %s\n", static_cast<unsigned long long>(seed), ok ? "holds" : "fails");
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "- overall: %s (%zu of %zu seeds)\n",
                ordering_wins() * 2 > s.size() ? "PASS" : "FAIL", ordering_wins(), s.size());
  out += buf;
  return out;
}

void write_report(const DegeneracyReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto write = [&](const std::filesystem::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    f << text;
    if (!f) throw std::runtime_error("cannot write " + p.string());
  };
  write(dir / "degeneracy.csv", report.csv());
  write(dir / "degeneracy.md", report.markdown());
  std::string traj = "variant,seed,step,mean_prior_sigma\n";
  char buf[128];
  for (const auto& e : report.entries)
    for (const auto& p : e.sigma_trajectory) {
      std::snprintf(buf, sizeof buf, "%s,%llu,%zu,%.9g\n", to_string(e.variant).c_str(),
                    static_cast<unsigned long long>(e.seed), p.step, p.sigma);
      traj += buf;
    }
  write(dir / "sigma.csv", traj);
}

bool sigma_non_increasing(const std::vector<SigmaPoint>& trajectory, std::size_t window, double tolerance) {
  if (trajectory.size() < 2) return true;
  const auto last = trajectory.back().step;
  std::vector<double> smooth;
  for (std::size_t i = 0; i < trajectory.size(); ++i) {
    if (2 * trajectory[i].step < last) continue;
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t j = 0; j <= i; ++j)
      if (trajectory[j].step + window > trajectory[i].step) {
        sum += trajectory[j].sigma;
        ++n;
      }
    smooth.push_back(sum / static_cast<double>(n));
  }
  for (std::size_t i = 1; i < smooth.size(); ++i)
    if (smooth[i] > smooth[i - 1] + tolerance) return false;
  return true;
}

}  // namespace picn
