#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <functional>
#include <fstream>
#include <string>

#include <zlib.h>

#include "picn/checkpoint.hpp"
#include "picn/config.hpp"
#include "support/small.hpp"

using namespace picn;
using nlohmann::json;
using picn::testing::small_images;
using picn::testing::small_train_config;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

bool contains(const std::string& s, const std::string& part) { return s.find(part) != std::string::npos; }

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "picn_test_checkpoint";
  std::filesystem::create_directories(dir);
  return dir / name;
}

TrainSession trained_session(std::size_t steps) {
  auto cfg = small_train_config();
  cfg.steps = steps;
  TrainSession s(cfg);
  train(s, small_images());
  return s;
}

}  // namespace

TEST_CASE("entry encode and decode") {
  const float f[6] = {1.f, -2.f, 3.5f, 0.f, 1e-30f, -0.f};
  const double d = 42.25;
  const std::vector<CheckpointEntry> in{make_entry<float>("a.w", {2, 3}, f), make_entry<double>("s", {}, &d)};
  const auto bytes = encode_checkpoint(in);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "PICN");
  CHECK(bytes[4] == kCheckpointVersion);
  const auto out = decode_checkpoint(bytes);
  REQUIRE(out.size() == 2);
  CHECK(out[0].name == "a.w");
  CHECK(out[0].shape == Shape{2, 3});
  CHECK(entry_values<float>(out[0]) == std::vector<float>(f, f + 6));
  CHECK(entry_values<double>(out[1]) == std::vector<double>{42.25});
  CHECK(encode_checkpoint(out) == bytes);
  CHECK_THROWS_AS(entry_values<float>(out[1]), CheckpointError);
}

TEST_CASE("corrupted byte gives a CRC error naming the offset") {
  const float f[4] = {1, 2, 3, 4};
  auto bytes = encode_checkpoint({make_entry<float>("w", {4}, f)});
  const auto crc_offset = std::to_string(bytes.size() - 4);
  bytes[bytes.size() / 2] ^= 0x10;
  const auto msg = error_of([&] { decode_checkpoint(bytes); });
  CHECK(contains(msg, "CRC"));
  CHECK(contains(msg, "offset " + crc_offset));
}

TEST_CASE("bad magic, truncation and version") {
  const float f[1] = {1};
  auto bytes = encode_checkpoint({make_entry<float>("w", {1}, f)});
  auto bad = bytes;
  bad[0] = 'X';
  CHECK(contains(error_of([&] { decode_checkpoint(bad); }), "magic"));
  CHECK_THROWS_AS(decode_checkpoint({bytes.begin(), bytes.begin() + 10}), CheckpointError);
  // A different version with a valid CRC.
  auto v2 = bytes;
  v2[4] = 2;
  const auto body = v2.size() - 4;
  const auto crc = static_cast<std::uint32_t>(crc32(0L, v2.data(), static_cast<uInt>(body)));
  for (int i = 0; i < 4; ++i) v2[body + i] = static_cast<std::uint8_t>(crc >> (8 * i));
  CHECK(contains(error_of([&] { decode_checkpoint(v2); }), "version 2"));
}

TEST_CASE("session save, load, save is byte-identical") {
  auto s = trained_session(3);
  const auto p1 = scratch("a.ckpt"), p2 = scratch("b.ckpt");
  save_session(p1, s);
  TrainSession fresh(s.cfg);
  load_session(p1, fresh);
  CHECK(fresh.step == 3);
  save_session(p2, fresh);
  std::ifstream a(p1, std::ios::binary), b(p2, std::ios::binary);
  const std::string ba((std::istreambuf_iterator<char>(a)), {}), bb((std::istreambuf_iterator<char>(b)), {});
  CHECK(!ba.empty());
  CHECK(ba == bb);
}

TEST_CASE("checkpoint holds spectral-norm vectors and optimizer moments") {
  const auto entries = session_entries(trained_session(1));
  bool has_u = false, has_m = false, has_v = false;
  for (const auto& e : entries) {
    has_u |= contains(e.name, ".u");
    has_m |= contains(e.name, "opt.gen.m.");
    has_v |= contains(e.name, "opt.d2.v.");
  }
  CHECK(has_u);
  CHECK(has_m);
  CHECK(has_v);
}

TEST_CASE("restore rejects missing, unknown, retyped and reshaped entries") {
  const auto s = trained_session(1);
  const auto entries = session_entries(s);
  TrainSession target(s.cfg);

  auto missing = entries;
  const auto dropped = missing.back().name;
  missing.pop_back();
  CHECK(contains(error_of([&] { restore_session(target, missing); }), "missing entry " + dropped));

  auto extra = entries;
  const double one = 1;
  extra.push_back(make_entry<double>("stray", {}, &one));
  CHECK(contains(error_of([&] { restore_session(target, extra); }), "unexpected entry stray"));

  auto dup = entries;
  dup.push_back(entries[1]);
  CHECK(contains(error_of([&] { restore_session(target, dup); }), "duplicate"));

  // An f64 checkpoint loaded into the f32 session must fail instead of casting.
  auto wide = entries;
  auto& e = wide[1];
  const auto vals = entry_values<float>(e);
  const std::vector<double> dv(vals.begin(), vals.end());
  e = make_entry<double>(e.name, e.shape, dv.data());
  const auto msg = error_of([&] { restore_session(target, wide); });
  CHECK(contains(msg, e.name));
  CHECK(contains(msg, "f64"));

  auto reshaped = entries;
  auto& r = reshaped[1];
  const auto rv = entry_values<float>(r);
  r = make_entry<float>(r.name, {rv.size()}, rv.data());
  if (entries[1].shape.size() != 1) CHECK(contains(error_of([&] { restore_session(target, reshaped); }), "shape"));
}

TEST_CASE("unreadable checkpoint file") {
  TrainSession s(small_train_config());
  CHECK_THROWS_AS(load_session(scratch("does_not_exist.ckpt"), s), CheckpointError);
  const auto p = scratch("garbage.ckpt");
  std::ofstream(p) << "not a checkpoint at all";
  CHECK_THROWS_AS(load_session(p, s), CheckpointError);
}

TEST_CASE("config defaults and round trip") {
  const auto c = parse_config(json::object());
  CHECK(c.train.adam.lr == 1e-4);
  CHECK(c.train.adam.beta1 == 0.0);
  CHECK(c.train.adam.beta2 == 0.999);
  CHECK(c.train.net.image_size == 32);
  const auto j = to_json(c);
  CHECK(to_json(parse_config(j)) == j);

  const auto p = scratch("cfg.json");
  auto mod = c;
  mod.train.seed = 77;
  mod.train.objective = Objective::cvae;
  save_config(p, mod);
  const auto back = load_config(p);
  CHECK(back.train.seed == 77);
  CHECK(back.train.objective == Objective::cvae);
}

TEST_CASE("config overrides") {
  const auto c = parse_config(json::parse(R"({"train": {"seed": 9, "objective": "instance_blind"},
      "net": {"image_size": 16, "latent_dim": 8}, "mask": {"kind": "center"}, "loss": {"alpha_kl": 5},
      "data": {"count": 40}})"));
  CHECK(c.train.seed == 9);
  CHECK(c.train.objective == Objective::instance_blind);
  CHECK(c.train.net.image_size == 16);
  CHECK(c.train.net.latent_dim == 8);
  CHECK(c.train.mask.kind == MaskKind::center);
  CHECK(c.train.loss.alpha_kl == 5);
  CHECK(c.data.count == 40);
}

TEST_CASE("config errors name the field") {
  auto err = [](const char* text) { return error_of([&] { parse_config(json::parse(text)); }); };
  CHECK(contains(err(R"({"train": {"lrr": 1}})"), "train.lrr"));
  CHECK(contains(err(R"({"bogus": {}})"), "bogus"));
  CHECK(contains(err(R"({"train": {"lr": "fast"}})"), "train.lr"));
  CHECK(contains(err(R"({"train": {"lr": -1}})"), "train.lr"));
  CHECK(contains(err(R"({"train": {"steps": -3}})"), "train.steps"));
  CHECK(contains(err(R"({"train": {"objective": "gan"}})"), "train.objective"));
  CHECK(contains(err(R"({"net": {"image_size": 24}})"), "net."));
  CHECK(contains(err(R"({"mask": {"kind": "star"}})"), "mask.kind"));
  CHECK(contains(err(R"({"data": {"count": 0}})"), "data.count"));
  CHECK(contains(err(R"([1, 2])"), "config"));
  CHECK_THROWS_AS(parse_config(json::parse(R"({"loss": {"alpha_app": -1}})")), ConfigError);
  CHECK_THROWS_AS(load_config(scratch("missing.json")), ConfigError);
  const auto p = scratch("broken.json");
  std::ofstream(p) << "{ not json";
  CHECK_THROWS_AS(load_config(p), ConfigError);
}

TEST_CASE("generated data follows the data section") {
  auto c = parse_config(json::parse(R"({"net": {"image_size": 16}, "data": {"count": 5, "seed": 4}})"));
  const auto a = load_images(c.data, 16), b = load_images(c.data, 16);
  REQUIRE(a.size() == 5);
  CHECK(a[0].shape() == Shape{1, 16, 16});
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK(std::equal(a[i].data().begin(), a[i].data().end(), b[i].data().begin()));
}
