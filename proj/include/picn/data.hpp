#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "picn/networks.hpp"
#include "picn/rng.hpp"
#include "picn/tensor.hpp"

namespace picn {

// One training example. image is [C,H,W] in [-1,1]; mask is [1,H,W] with
// 1 = visible. masked = mask * image (holes read as 0, mid-gray) and
// complement = (1 - mask) * image.
struct Sample {
  Tensor<float> image;
  Tensor<float> mask;
  Tensor<float> masked;
  Tensor<float> complement;
  std::size_t hidden = 0;  // zero count of mask
};

Sample make_sample(const Tensor<float>& image, const Tensor<float>& mask);
// Stacks samples into a [B,...] batch of the requested precision.
template <typename T>
Batch<T> collate(const std::vector<Sample>& samples);

enum class DatasetKind { stripes, blobs, gradients };
DatasetKind parse_dataset_kind(const std::string& name);
std::string to_string(DatasetKind kind);

// Procedural single-channel images of size x size, size in {16,32,64}.
//  stripes:   cosine stripes (vertical or horizontal, random period and
//             phase); the central size/2 tile carries its own random phase,
//             so a centre hole has many consistent completions.
//  blobs:     one to three soft ellipses on a dark background.
//  gradients: linear ramp in a random direction plus a random offset.
std::vector<Tensor<float>> gen_dataset(DatasetKind kind, std::size_t count, std::size_t size, Rng& rng);

struct StripeParams {
  bool vertical = true;
  double period = 4;
  double phase = 0;       // outside the centre tile, in pixels
  double tile_phase = 0;  // inside the centre tile
};
Tensor<float> render_stripes(const StripeParams& p, std::size_t size);
// Periods gen_dataset draws from for the stripe family.
const std::vector<double>& stripe_periods();

enum class MaskKind { center, random_rect, irregular_walk, mixed };
MaskKind parse_mask_kind(const std::string& name);
std::string to_string(MaskKind kind);

struct MaskSpec {
  MaskKind kind = MaskKind::center;
  double min_fraction = 0.1;  // hole area bounds for random masks
  double max_fraction = 0.5;
  std::size_t brush = 2;      // stroke half-width for irregular_walk
  void validate() const;
};

// [1,H,W] binary mask, 1 = visible.
//  center:         H/2 x W/2 hole centred in the image.
//  random_rect:    one uniformly placed rectangle, hole fraction in bounds.
//  irregular_walk: random-walk brush strokes until the hole fraction
//                  reaches a target drawn inside the bounds.
//  mixed:          one of the above chosen uniformly.
Tensor<float> make_mask(const MaskSpec& spec, std::size_t height, std::size_t width, Rng& rng);

// Binary PGM (P5, 1 channel) or PPM (P6, 3 channels), maxval 255. Pixels
// map [-1,1] <-> [0,255] affinely with round-half-up on write.
class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
Tensor<float> read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Tensor<float>& image);
std::uint8_t to_byte(float v);
float from_byte(std::uint8_t b);
// Tiles [C,H,W] images row-major into `columns` columns with 1-pixel
// separators (value -1).
Tensor<float> tile_grid(const std::vector<Tensor<float>>& images, std::size_t columns);
void write_grid(const std::filesystem::path& path, const std::vector<Tensor<float>>& images, std::size_t columns);

// Writes every image as img_NNNNN.pgm under dir plus manifest.txt listing
// the files relative to dir. Returns the manifest path.
std::filesystem::path write_dataset(const std::filesystem::path& dir, const std::vector<Tensor<float>>& images);
// Reads a manifest (one path per line, relative paths resolved against the
// manifest's directory, blank lines skipped).
std::vector<std::filesystem::path> read_manifest(const std::filesystem::path& manifest);

}  // namespace picn
