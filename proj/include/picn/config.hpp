#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "picn/data.hpp"
#include "picn/training.hpp"

namespace picn {

// Thrown for any invalid configuration; the message starts with the
// offending field path (for example "train.lr").
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataSpec {
  DatasetKind kind = DatasetKind::stripes;
  std::size_t count = 500;
  std::uint64_t seed = 1;
  std::string manifest;  // when set, images come from this manifest instead
};

struct RunConfig {
  TrainConfig train;
  DataSpec data;
};

// Sections train / net / mask / loss / data; every key optional, unknown
// keys rejected. Values are validated before anything is allocated.
RunConfig parse_config(const nlohmann::json& doc);
RunConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& cfg);
void save_config(const std::filesystem::path& path, const RunConfig& cfg);

// Training images described by the data section (generated or read).
std::vector<Tensor<float>> load_images(const DataSpec& spec, std::size_t image_size);

}  // namespace picn
