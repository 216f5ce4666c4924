#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "picn/data.hpp"

namespace fs = std::filesystem;
using namespace picn;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "picn_test_cli";

struct Result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Result picnet(const std::string& args) {
  const auto out = kRoot / "stdout.txt", err = kRoot / "stderr.txt";
  const std::string cmd = std::string(PICNET_BINARY) + " " + args + " > " + out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

bool contains(const std::string& s, const std::string& part) { return s.find(part) != std::string::npos; }

std::size_t line_count(const std::string& s) {
  std::size_t n = 0;
  std::istringstream in(s);
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

fs::path write_config(const std::string& name, std::size_t steps) {
  const auto p = kRoot / name;
  std::ofstream(p) << R"({"train": {"steps": )" << steps
                   << R"(, "batch_size": 4, "sample_every": 2, "checkpoint_every": 2},
 "net": {"image_size": 16, "base_width": 4, "latent_dim": 4, "down_blocks": 2, "prior_blocks": 1,
         "attention_resolution": 8},
 "data": {"count": 12}})";
  return p;
}

fs::path dataset(std::size_t count, std::size_t size) {
  Rng rng(21 + size);
  return write_dataset(kRoot / ("data" + std::to_string(size)), gen_dataset(DatasetKind::stripes, count, size, rng));
}

// One trained model shared by the complete/eval cases.
const fs::path& trained_checkpoint() {
  static const fs::path ckpt = [] {
    const auto r = picnet("train --config " + write_config("cfg4.json", 4).string() + " --out " +
                          (kRoot / "model").string());
    REQUIRE(r.code == 0);
    return kRoot / "model" / "latest.picn";
  }();
  return ckpt;
}

struct Setup {
  Setup() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
  }
} setup;

}  // namespace

TEST_CASE("train writes checkpoints, loss csv and samples") {
  const auto out = kRoot / "train";
  const auto r = picnet("train --config " + write_config("cfg.json", 4).string() + " --out " + out.string());
  REQUIRE(r.code == 0);
  CHECK(contains(r.out, "\"command\": \"train\""));
  CHECK(contains(r.out, "\"lr\": 0.0001"));
  CHECK(fs::exists(out / "latest.picn"));
  CHECK(fs::exists(out / "latest.picn.json"));
  CHECK(fs::exists(out / "checkpoint_000002.picn"));
  CHECK(fs::exists(out / "samples_000004.pgm"));
  const auto csv = slurp(out / "loss.csv");
  CHECK(csv.rfind("step,kl_r,kl_g,app_r,app_g,ad_r,ad_g,total", 0) == 0);
  CHECK(line_count(csv) == 5);
}

TEST_CASE("train config errors exit 2 naming the field") {
  auto r = picnet("train --config " + (kRoot / "absent.json").string() + " --out " + (kRoot / "x").string());
  CHECK(r.code == 2);
  CHECK(contains(r.err, "absent.json"));
  const auto bad = kRoot / "bad.json";
  std::ofstream(bad) << R"({"loss": {"alpha_kl": "lots"}})";
  r = picnet("train --config " + bad.string() + " --out " + (kRoot / "x").string());
  CHECK(r.code == 2);
  CHECK(contains(r.err, "loss.alpha_kl"));
  r = picnet("train --out " + (kRoot / "x").string());
  CHECK(r.code == 2);
  CHECK(contains(r.err, "--config"));
}

TEST_CASE("train --seed overrides the config seed") {
  const auto out = kRoot / "seeded";
  const auto r = picnet("train --config " + write_config("cfg1.json", 1).string() + " --out " + out.string() +
                        " --seed 1234");
  REQUIRE(r.code == 0);
  CHECK(contains(slurp(out / "config.json"), "\"seed\": 1234"));
}

TEST_CASE("resumed training matches uninterrupted training byte for byte") {
  const auto full = kRoot / "full", part = kRoot / "part";
  REQUIRE(picnet("train --config " + write_config("cfg6.json", 6).string() + " --out " + full.string()).code == 0);
  REQUIRE(picnet("train --config " + write_config("cfg2.json", 2).string() + " --out " + part.string()).code == 0);
  REQUIRE(picnet("train --config " + (kRoot / "cfg6.json").string() + " --out " + part.string() + " --resume " +
                 (part / "latest.picn").string())
              .code == 0);
  CHECK(slurp(full / "latest.picn") == slurp(part / "latest.picn"));
  CHECK(slurp(full / "loss.csv") == slurp(part / "loss.csv"));
}

TEST_CASE("complete writes top-T composites equal to the input on visible pixels") {
  const auto ckpt = trained_checkpoint();
  const auto image = read_manifest(dataset(1, 16)).front();
  const auto out = kRoot / "complete";
  const auto r = picnet("complete --ckpt " + ckpt.string() + " --image " + image.string() + " --out " + out.string());
  REQUIRE(r.code == 0);
  CHECK(contains(r.out, "\"samples\": 50"));
  CHECK(contains(r.out, "\"topk\": 10"));
  CHECK(line_count(slurp(out / "ranking.csv")) == 11);
  CHECK(fs::exists(out / "grid.pgm"));
  const auto input = read_image(image);
  Rng unused(0);
  const auto mask = make_mask(MaskSpec{}, 16, 16, unused);
  for (int k = 0; k < 10; ++k) {
    const auto p = out / ("top_" + std::string(k < 10 ? "0" : "") + std::to_string(k) + ".pgm");
    REQUIRE(fs::exists(p));
    const auto c = read_image(p);
    for (std::size_t i = 0; i < c.numel(); ++i)
      if (mask[i] == 1.f) CHECK(c[i] == input[i]);
  }
  CHECK_FALSE(fs::exists(out / "top_10.pgm"));
}

TEST_CASE("complete argument and file errors") {
  const auto ckpt = trained_checkpoint();
  const auto image = read_manifest(dataset(1, 16)).front();
  const auto big = read_manifest(dataset(1, 32)).front();
  const auto out = (kRoot / "complete_err").string();
  auto r = picnet("complete --ckpt " + ckpt.string() + " --image " + image.string() + " --samples 5 --topk 6 --out " + out);
  CHECK(r.code == 2);
  r = picnet("complete --ckpt " + ckpt.string() + " --image " + big.string() + " --out " + out);
  CHECK(r.code == 2);
  CHECK(contains(r.err, "expects [1,16,16]"));

  const auto corrupt = kRoot / "corrupt.picn";
  auto bytes = slurp(ckpt);
  bytes[bytes.size() / 3] ^= 0x5A;
  std::ofstream(corrupt, std::ios::binary) << bytes;
  fs::copy_file(fs::path(ckpt.string() + ".json"), fs::path(corrupt.string() + ".json"),
                fs::copy_options::overwrite_existing);
  r = picnet("complete --ckpt " + corrupt.string() + " --image " + image.string() + " --out " + out);
  CHECK(r.code == 3);
  CHECK(contains(r.err, "CRC"));
  r = picnet("complete --ckpt " + (kRoot / "none.picn").string() + " --image " + image.string() + " --out " + out);
  CHECK(r.code == 3);
}

TEST_CASE("eval writes one row per image plus the aggregate, deterministically") {
  const auto ckpt = trained_checkpoint();
  const auto manifest = dataset(3, 16);
  const auto a = kRoot / "eval_a.csv", b = kRoot / "eval_b.csv";
  const std::string common = "eval --ckpt " + ckpt.string() + " --dataset " + manifest.string() + " --samples 6 --topk 3";
  REQUIRE(picnet(common + " --out " + a.string()).code == 0);
  REQUIRE(picnet(common + " --out " + b.string()).code == 0);
  const auto csv = slurp(a);
  CHECK(line_count(csv) == 1 + 3 + 1);
  CHECK(csv.rfind("name,l1,psnr,tv,diversity_full,diversity_masked", 0) == 0);
  CHECK(contains(csv, "\nmean,"));
  CHECK(csv == slurp(b));

  const auto empty = kRoot / "empty_manifest.txt";
  std::ofstream(empty) << "\n";
  const auto r = picnet("eval --ckpt " + ckpt.string() + " --dataset " + empty.string() + " --out " +
                        (kRoot / "eval_empty.csv").string());
  CHECK(r.code == 2);
}

TEST_CASE("degeneracy writes csv and markdown and exits 0") {
  const auto out = kRoot / "degeneracy";
  const auto r = picnet("degeneracy --budget 2 --seeds 1,2 --out " + out.string());
  REQUIRE(r.code == 0);
  const auto csv = slurp(out / "degeneracy.csv");
  CHECK(line_count(csv) == 1 + 4 * 2);
  CHECK(csv.rfind("variant,seed,mean_prior_sigma,diversity_masked,diversity_full,stable", 0) == 0);
  CHECK(fs::exists(out / "degeneracy.md"));
  CHECK(contains(r.out, "\"seeds\""));

  CHECK(picnet("degeneracy --budget 2 --seeds 1,x --out " + out.string()).code == 2);
  CHECK(picnet("degeneracy --budget 2 --seeds ,, --out " + out.string()).code == 2);
  CHECK(picnet("degeneracy --budget 0 --out " + out.string()).code == 2);
}

TEST_CASE("PICNET_THREADS must be a positive integer") {
  const auto out = kRoot / "threads";
  CHECK(picnet("degeneracy --budget 1 --seeds 1 --out " + out.string()).code == 0);
  const std::string cmd = "PICNET_THREADS=zero " + std::string(PICNET_BINARY) + " degeneracy --budget 1 --seeds 1 --out " +
                          out.string() + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  CHECK(WEXITSTATUS(status) == 2);
}
