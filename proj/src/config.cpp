#include "picn/config.hpp"

#include <fstream>
#include <set>

namespace picn {
namespace {

using nlohmann::json;

class Section {
 public:
  Section(const json& doc, std::string name, std::set<std::string> keys) : name_(std::move(name)) {
    if (!doc.contains(name_)) return;
    obj_ = &doc.at(name_);
    if (!obj_->is_object()) throw ConfigError(name_ + ": must be an object");
    for (const auto& [k, v] : obj_->items())
      if (!keys.count(k)) throw ConfigError(name_ + "." + k + ": unknown key");
  }

  void number(const char* key, double& out) const {
    if (const auto* v = get(key)) {
      if (!v->is_number()) throw ConfigError(path(key) + ": expected a number");
      out = v->get<double>();
    }
  }
  template <typename U>
  void count(const char* key, U& out) const {
    if (const auto* v = get(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(path(key) + ": expected a non-negative integer");
      out = static_cast<U>(v->get<std::uint64_t>());
    }
  }
  void text(const char* key, std::string& out) const {
    if (const auto* v = get(key)) {
      if (!v->is_string()) throw ConfigError(path(key) + ": expected a string");
      out = v->get<std::string>();
    }
  }
  template <typename E, typename Parse>
  void choice(const char* key, E& out, Parse parse) const {
    std::string s;
    text(key, s);
    if (s.empty()) return;
    try {
      out = parse(s);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(path(key) + ": " + e.what());
    }
  }

 private:
  const json* get(const char* key) const {
    if (!obj_ || !obj_->contains(key)) return nullptr;
    return &obj_->at(key);
  }
  std::string path(const char* key) const { return name_ + "." + key; }

  std::string name_;
  const json* obj_ = nullptr;
};

}  // namespace

RunConfig parse_config(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config: top level must be an object");
  static const std::set<std::string> sections{"train", "net", "mask", "loss", "data"};
  for (const auto& [k, v] : doc.items())
    if (!sections.count(k)) throw ConfigError(k + ": unknown section");

  RunConfig c;
  auto& t = c.train;
  Section train(doc, "train",
                {"lr", "beta1", "beta2", "eps", "d_steps_per_g", "steps", "batch_size", "seed", "checkpoint_every",
                 "sample_every", "objective"});
  train.number("lr", t.adam.lr);
  train.number("beta1", t.adam.beta1);
  train.number("beta2", t.adam.beta2);
  train.number("eps", t.adam.eps);
  train.count("d_steps_per_g", t.d_steps_per_g);
  train.count("steps", t.steps);
  train.count("batch_size", t.batch_size);
  train.count("seed", t.seed);
  train.count("checkpoint_every", t.checkpoint_every);
  train.count("sample_every", t.sample_every);
  train.choice("objective", t.objective, parse_objective);

  Section net(doc, "net",
              {"image_size", "channels", "base_width", "latent_dim", "down_blocks", "attention_resolution",
               "output_scales", "prior_blocks"});
  net.count("image_size", t.net.image_size);
  net.count("channels", t.net.channels);
  net.count("base_width", t.net.base_width);
  net.count("latent_dim", t.net.latent_dim);
  net.count("down_blocks", t.net.down_blocks);
  net.count("attention_resolution", t.net.attention_resolution);
  net.count("output_scales", t.net.output_scales);
  net.count("prior_blocks", t.net.prior_blocks);

  Section mask(doc, "mask", {"kind", "min_fraction", "max_fraction", "brush"});
  mask.choice("kind", t.mask.kind, parse_mask_kind);
  mask.number("min_fraction", t.mask.min_fraction);
  mask.number("max_fraction", t.mask.max_fraction);
  mask.count("brush", t.mask.brush);

  Section loss(doc, "loss", {"alpha_kl", "alpha_app", "alpha_ad"});
  loss.number("alpha_kl", t.loss.alpha_kl);
  loss.number("alpha_app", t.loss.alpha_app);
  loss.number("alpha_ad", t.loss.alpha_ad);

  Section data(doc, "data", {"kind", "count", "seed", "manifest"});
  data.choice("kind", c.data.kind, parse_dataset_kind);
  data.count("count", c.data.count);
  data.count("seed", c.data.seed);
  data.text("manifest", c.data.manifest);

  // validate() messages already name the field ("train.lr ...").
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (t.net.channels != 1 && t.net.channels != 3) throw ConfigError("net.channels: must be 1 or 3");
  if (c.data.manifest.empty()) {
    if (c.data.count == 0) throw ConfigError("data.count: must be positive");
    if (t.net.channels != 1) throw ConfigError("net.channels: generated datasets are single-channel");
    const auto s = t.net.image_size;
    if (s != 16 && s != 32 && s != 64) throw ConfigError("net.image_size: generated datasets need 16, 32 or 64");
  }
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON (" + e.what() + ")");
  }
  return parse_config(doc);
}

json to_json(const RunConfig& c) {
  const auto& t = c.train;
  json j;
  j["train"] = {{"lr", t.adam.lr},
                {"beta1", t.adam.beta1},
                {"beta2", t.adam.beta2},
                {"eps", t.adam.eps},
                {"d_steps_per_g", t.d_steps_per_g},
                {"steps", t.steps},
                {"batch_size", t.batch_size},
                {"seed", t.seed},
                {"checkpoint_every", t.checkpoint_every},
                {"sample_every", t.sample_every},
                {"objective", to_string(t.objective)}};
  j["net"] = {{"image_size", t.net.image_size},
              {"channels", t.net.channels},
              {"base_width", t.net.base_width},
              {"latent_dim", t.net.latent_dim},
              {"down_blocks", t.net.down_blocks},
              {"attention_resolution", t.net.attention_resolution},
              {"output_scales", t.net.output_scales},
              {"prior_blocks", t.net.prior_blocks}};
  j["mask"] = {{"kind", to_string(t.mask.kind)},
               {"min_fraction", t.mask.min_fraction},
               {"max_fraction", t.mask.max_fraction},
               {"brush", t.mask.brush}};
  j["loss"] = {{"alpha_kl", t.loss.alpha_kl}, {"alpha_app", t.loss.alpha_app}, {"alpha_ad", t.loss.alpha_ad}};
  j["data"] = {{"kind", to_string(c.data.kind)},
               {"count", c.data.count},
               {"seed", c.data.seed},
               {"manifest", c.data.manifest}};
  return j;
}

void save_config(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw ImageError(path.string() + ": cannot open for writing");
  out << to_json(cfg).dump(2) << "\n";
  if (!out) throw ImageError(path.string() + ": write failed");
}

std::vector<Tensor<float>> load_images(const DataSpec& spec, std::size_t image_size) {
  if (spec.manifest.empty()) {
    Rng rng(spec.seed);
    return gen_dataset(spec.kind, spec.count, image_size, rng);
  }
  std::vector<Tensor<float>> out;
  for (const auto& p : read_manifest(spec.manifest)) out.push_back(read_image(p));
  return out;
}

}  // namespace picn
