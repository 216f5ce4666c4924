#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "picn/checkpoint.hpp"
#include "picn/completion.hpp"
#include "picn/config.hpp"
#include "picn/degeneracy.hpp"
#include "picn/metrics.hpp"
#include "picn/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace picn;

namespace {

constexpr int kUsage = 2;
constexpr int kIo = 3;
constexpr int kNumerical = 4;

// Raised for invalid arguments that CLI11 cannot check on its own.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t thread_cap() {
  const char* v = std::getenv("PICNET_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const auto n = std::strtoull(v, &end, 10);
  if (*end || n == 0) throw UsageError("PICNET_THREADS: expected a positive integer, got '" + std::string(v) + "'");
  return n;
}

void print_resolved(const std::string& command, const json& cfg) {
  std::cout << json{{"command", command}, {"config", cfg}}.dump(2) << std::endl;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(dir.string() + ": " + ec.message());
}

std::string image_ext(const Tensor<float>& img) { return img.dim(0) == 3 ? ".ppm" : ".pgm"; }

fs::path sidecar_of(const fs::path& ckpt) { return fs::path(ckpt.string() + ".json"); }

void write_sidecar(const fs::path& ckpt, const RunConfig& cfg, std::size_t step) {
  std::ofstream out(sidecar_of(ckpt));
  if (!out) throw IoError(sidecar_of(ckpt).string() + ": cannot open for writing");
  out << json{{"step", step}, {"config", to_json(cfg)}}.dump(2) << "\n";
  if (!out) throw IoError(sidecar_of(ckpt).string() + ": write failed");
}

// The sidecar carries the network configuration the checkpoint was made with.
RunConfig read_sidecar(const fs::path& ckpt) {
  const auto path = sidecar_of(ckpt);
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": cannot open (every checkpoint needs its .json sidecar)");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  if (!doc.contains("config")) throw IoError(path.string() + ": no config");
  try {
    return parse_config(doc.at("config"));
  } catch (const ConfigError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

TrainSession load_model(const fs::path& ckpt, RunConfig& cfg) {
  if (!fs::exists(ckpt)) throw IoError(ckpt.string() + ": no such checkpoint");
  cfg = read_sidecar(ckpt);
  TrainSession s(cfg.train);
  load_session(ckpt, s);
  return s;
}

Tensor<float> load_mask(const std::string& spec, const Tensor<float>& image) {
  const auto h = image.dim(1), w = image.dim(2);
  if (spec == "center") {
    Rng unused(0);
    return make_mask(MaskSpec{}, h, w, unused);
  }
  const auto m = read_image(spec);
  if (m.dim(0) != 1) throw UsageError("--mask: " + spec + " must be a single-channel PGM");
  if (m.dim(1) != h || m.dim(2) != w)
    throw UsageError("--mask: " + spec + " is " + std::to_string(m.dim(2)) + "x" + std::to_string(m.dim(1)) +
                     " but the image is " + std::to_string(w) + "x" + std::to_string(h));
  std::vector<float> v(h * w);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = m[i] > 0.f ? 1.f : 0.f;
  return Tensor<float>({1, h, w}, std::move(v));
}

void check_image(const Tensor<float>& img, const NetConfig& net, const std::string& what) {
  if (img.dim(0) != net.channels || img.dim(1) != net.image_size || img.dim(2) != net.image_size)
    throw UsageError(what + ": image is " + shape_str(img.shape()) + " but the checkpoint expects [" +
                     std::to_string(net.channels) + "," + std::to_string(net.image_size) + "," +
                     std::to_string(net.image_size) + "]");
}

Tensor<float> masked_input(const Tensor<float>& image, const Tensor<float>& mask) {
  return composite(image, mask, Tensor<float>::full(image.shape(), -1.f));
}

// ---- train ----

struct TrainArgs {
  std::string config, out, resume;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

int cmd_train(const TrainArgs& a) {
  auto cfg = load_config(a.config);
  if (a.seed_set) cfg.train.seed = a.seed;
  print_resolved("train", to_json(cfg));

  const fs::path out(a.out);
  ensure_dir(out);
  save_config(out / "config.json", cfg);
  const auto images = load_images(cfg.data, cfg.train.net.image_size);
  if (images.empty()) throw UsageError("data: no training images");
  for (std::size_t i = 0; i < images.size(); ++i) check_image(images[i], cfg.train.net, "data image " + std::to_string(i));

  TrainSession s(cfg.train);
  if (!a.resume.empty()) {
    load_session(a.resume, s);
    std::cout << "resumed at step " << s.step << std::endl;
  }

  const auto csv_path = out / "loss.csv";
  const bool append = !a.resume.empty() && fs::exists(csv_path);
  std::ofstream csv(csv_path, append ? std::ios::app : std::ios::trunc);
  if (!csv) throw IoError(csv_path.string() + ": cannot open for writing");
  if (!append) csv << LossReport::csv_header() << "\n";

  TrainCallbacks cb;
  cb.on_step = [&](std::size_t step, const LossReport& r) {
    csv << r.csv_row(step) << "\n";
    if (step % 50 == 0 || step + 1 == cfg.train.steps) {
      csv.flush();
      std::cout << "step " << step << " total " << r.total << std::endl;
    }
  };
  cb.on_sample = [&](std::size_t step, const TrainSession&, const Batch<float>& batch, Rng& rng) {
    // Row per batch instance: masked input, three completions, ground truth.
    const auto n = std::min<std::size_t>(4, batch.image.dim(0));
    const auto c = cfg.train.net.channels, h = cfg.train.net.image_size;
    std::vector<Tensor<float>> tiles;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<float> img(batch.image.data().begin() + i * c * h * h, batch.image.data().begin() + (i + 1) * c * h * h);
      std::vector<float> msk(batch.mask.data().begin() + i * h * h, batch.mask.data().begin() + (i + 1) * h * h);
      const Tensor<float> image({c, h, h}, std::move(img)), mask({1, h, h}, std::move(msk));
      const auto comp = complete(s.model, image, mask, 3, rng);
      tiles.push_back(masked_input(image, mask));
      tiles.insert(tiles.end(), comp.composite.begin(), comp.composite.end());
      tiles.push_back(image);
    }
    char name[64];
    std::snprintf(name, sizeof name, "samples_%06zu", step);
    write_grid(out / (std::string(name) + image_ext(tiles.front())), tiles, 5);
  };
  cb.on_checkpoint = [&](std::size_t step, const TrainSession& sess) {
    char name[64];
    std::snprintf(name, sizeof name, "checkpoint_%06zu.picn", step);
    save_session(out / name, sess);
    write_sidecar(out / name, cfg, step);
    save_session(out / "latest.picn", sess);
    write_sidecar(out / "latest.picn", cfg, step);
    std::cout << "checkpoint " << (out / name).string() << std::endl;
  };
  train(s, images, cb);
  csv.flush();
  if (!csv) throw IoError(csv_path.string() + ": write failed");
  return 0;
}

// ---- complete ----

struct CompleteArgs {
  std::string ckpt, image, mask = "center", out;
  std::size_t samples = 50, topk = 10;
  std::uint64_t seed = 0;
};

int cmd_complete(const CompleteArgs& a) {
  if (a.topk > a.samples)
    throw UsageError("--topk " + std::to_string(a.topk) + " exceeds --samples " + std::to_string(a.samples));
  if (a.topk == 0) throw UsageError("--topk must be positive");
  RunConfig cfg;
  auto s = load_model(a.ckpt, cfg);
  print_resolved("complete", json{{"checkpoint", a.ckpt},
                                  {"image", a.image},
                                  {"mask", a.mask},
                                  {"samples", a.samples},
                                  {"topk", a.topk},
                                  {"seed", a.seed},
                                  {"model", to_json(cfg)}});
  const auto image = read_image(a.image);
  check_image(image, cfg.train.net, "--image " + a.image);
  const auto mask = load_mask(a.mask, image);

  Rng rng(a.seed);
  const auto comp = complete(s.model, image, mask, a.samples, rng);
  const auto scores = disc_scores(s.model.disc_gen, comp.composite);
  const auto top = rank_samples(scores, a.topk);

  const fs::path out(a.out);
  ensure_dir(out);
  const auto ext = image_ext(image);
  std::ofstream ranks(out / "ranking.csv");
  if (!ranks) throw IoError((out / "ranking.csv").string() + ": cannot open for writing");
  ranks << "rank,sample,score\n";
  std::vector<Tensor<float>> tiles{masked_input(image, mask)};
  for (std::size_t r = 0; r < top.size(); ++r) {
    char name[32];
    std::snprintf(name, sizeof name, "top_%02zu", r);
    write_image(out / (std::string(name) + ext), comp.composite[top[r]]);
    ranks << r << "," << top[r] << "," << scores[top[r]] << "\n";
    tiles.push_back(comp.composite[top[r]]);
  }
  write_grid(out / ("grid" + ext), tiles, std::min<std::size_t>(tiles.size(), 6));
  std::cout << "wrote " << top.size() << " completions to " << out.string() << std::endl;
  return 0;
}

// ---- eval ----

struct EvalArgs {
  std::string ckpt, dataset, out, mask = "center";
  std::size_t samples = 50, topk = 10;
  std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a) {
  if (a.topk > a.samples || a.topk < 2)
    throw UsageError("--topk must be in [2, --samples], got " + std::to_string(a.topk));
  const auto paths = read_manifest(a.dataset);
  if (paths.empty()) throw UsageError("--dataset " + a.dataset + ": manifest lists no images");
  MaskSpec mask_spec;
  try {
    mask_spec.kind = parse_mask_kind(a.mask);
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("--mask: ") + e.what());
  }
  RunConfig cfg;
  auto s = load_model(a.ckpt, cfg);
  print_resolved("eval", json{{"checkpoint", a.ckpt},
                              {"dataset", a.dataset},
                              {"mask", a.mask},
                              {"samples", a.samples},
                              {"topk", a.topk},
                              {"seed", a.seed},
                              {"model", to_json(cfg)}});

  std::vector<MetricsReport> rows;
  const Rng root(a.seed);
  for (std::size_t i = 0; i < paths.size(); ++i) {
    const auto image = read_image(paths[i]);
    check_image(image, cfg.train.net, paths[i].string());
    Rng mrng = root.derive(i, 0), srng = root.derive(i, 1);
    const auto mask = make_mask(mask_spec, image.dim(1), image.dim(2), mrng);
    const auto comp = complete(s.model, image, mask, a.samples, srng);
    const auto top = rank_samples(s.model.disc_gen, comp.composite, a.topk);
    std::vector<Tensor<float>> best;
    for (auto k : top) best.push_back(comp.composite[k]);
    const auto& pick = best[best_balance(best, image)];
    const auto div = diversity(best, mask);
    rows.push_back({paths[i].filename().string(), l1(pick, image), psnr(pick, image), tv(pick), div.full, div.masked});
  }
  const auto mean = aggregate(rows);
  std::ofstream csv(a.out);
  if (!csv) throw IoError(a.out + ": cannot open for writing");
  csv << MetricsReport::csv_header() << "\n";
  for (const auto& r : rows) csv << r.csv_row() << "\n";
  csv << mean.csv_row() << "\n";
  if (!csv) throw IoError(a.out + ": write failed");
  auto table = rows;
  table.push_back(mean);
  std::cout << format_table(table);
  return 0;
}

// ---- degeneracy ----

struct DegeneracyArgs {
  std::size_t budget = 2000;
  std::string seeds = "1,2,3";
  std::string out;
};

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    std::size_t used = 0;
    std::uint64_t v = 0;
    try {
      if (item.empty() || item[0] == '-') throw std::invalid_argument(item);
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw UsageError("--seeds: '" + item + "' is not an unsigned integer");
    seeds.push_back(v);
  }
  if (seeds.empty()) throw UsageError("--seeds: empty list");
  return seeds;
}

int cmd_degeneracy(const DegeneracyArgs& a) {
  DegeneracyConfig cfg;
  cfg.budget = a.budget;
  cfg.threads = thread_cap();
  const auto seeds = parse_seeds(a.seeds);
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto& n = cfg.net;
  print_resolved("degeneracy",
                 json{{"budget", cfg.budget},
                      {"seeds", seeds},
                      {"train_count", cfg.train_count},
                      {"held_out", cfg.held_out},
                      {"samples", cfg.samples},
                      {"batch_size", cfg.batch_size},
                      {"threads", cfg.threads},
                      {"net",
                       {{"image_size", n.image_size},
                        {"channels", n.channels},
                        {"base_width", n.base_width},
                        {"latent_dim", n.latent_dim},
                        {"down_blocks", n.down_blocks},
                        {"attention_resolution", n.attention_resolution},
                        {"output_scales", n.output_scales},
                        {"prior_blocks", n.prior_blocks}}}});
  const auto report = run_all(cfg, seeds);
  try {
    write_report(report, a.out);
  } catch (const std::runtime_error& e) {
    throw IoError(e.what());
  }
  std::cout << report.markdown();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pluralistic image completion: training, sampling, evaluation and the degeneracy study"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a JSON config");
  train_cmd->add_option("--config", ta.config, "JSON config file")->required();
  train_cmd->add_option("--out", ta.out, "Output directory")->required();
  train_cmd->add_option("--resume", ta.resume, "Checkpoint to resume from");
  auto* seed_opt = train_cmd->add_option("--seed", ta.seed, "Overrides train.seed");

  CompleteArgs ca;
  auto* complete_cmd = app.add_subcommand("complete", "Sample, rank and write completions of one image");
  complete_cmd->add_option("--ckpt", ca.ckpt, "Checkpoint (with its .json sidecar)")->required();
  complete_cmd->add_option("--image", ca.image, "PGM or PPM image")->required();
  complete_cmd->add_option("--mask", ca.mask, "'center' or a PGM mask (nonzero = visible)")->capture_default_str();
  complete_cmd->add_option("--samples", ca.samples, "Samples drawn (K)")->capture_default_str();
  complete_cmd->add_option("--topk", ca.topk, "Completions kept after ranking (T)")->capture_default_str();
  complete_cmd->add_option("--seed", ca.seed, "Sampling seed")->capture_default_str();
  complete_cmd->add_option("--out", ca.out, "Output directory")->required();

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Metrics over a manifest of images");
  eval_cmd->add_option("--ckpt", ea.ckpt, "Checkpoint (with its .json sidecar)")->required();
  eval_cmd->add_option("--dataset", ea.dataset, "Manifest file, one image path per line")->required();
  eval_cmd->add_option("--out", ea.out, "CSV output")->required();
  eval_cmd->add_option("--mask", ea.mask, "Mask kind")->capture_default_str();
  eval_cmd->add_option("--samples", ea.samples, "Samples drawn per image")->capture_default_str();
  eval_cmd->add_option("--topk", ea.topk, "Top-ranked samples considered per image")->capture_default_str();
  eval_cmd->add_option("--seed", ea.seed, "Seed for masks and samples")->capture_default_str();

  DegeneracyArgs da;
  auto* deg_cmd = app.add_subcommand("degeneracy", "Compare completion strategies on the toy task");
  deg_cmd->add_option("--budget", da.budget, "Training steps per variant")->capture_default_str();
  deg_cmd->add_option("--seeds", da.seeds, "Comma-separated seeds")->capture_default_str();
  deg_cmd->add_option("--out", da.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*train_cmd) {
      ta.seed_set = seed_opt->count() > 0;
      return cmd_train(ta);
    }
    if (*complete_cmd) return cmd_complete(ca);
    if (*eval_cmd) return cmd_eval(ea);
    if (*deg_cmd) return cmd_degeneracy(da);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << std::endl;
    return kNumerical;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << std::endl;
    return kIo;
  } catch (const ImageError& e) {
    std::cerr << "i/o error: " << e.what() << std::endl;
    return kIo;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << std::endl;
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << std::endl;
    return kIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kIo;
  }
  return kUsage;
}
