#include "picn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace picn {
namespace {

constexpr double kStripeAmplitude = 0.9;
constexpr double kStripeSharpness = 2.5;

double stripe_profile(double t) {
  // Cosine pushed toward a square wave so light and dark bands dominate.
  return kStripeAmplitude * std::tanh(kStripeSharpness * std::cos(t)) / std::tanh(kStripeSharpness);
}

void check_size(std::size_t size) {
  if (size != 16 && size != 32 && size != 64)
    throw std::invalid_argument("image size must be 16, 32 or 64, got " + std::to_string(size));
}

}  // namespace

Sample make_sample(const Tensor<float>& image, const Tensor<float>& mask) {
  if (image.rank() != 3 || mask.rank() != 3 || mask.dim(0) != 1 || mask.dim(1) != image.dim(1) ||
      mask.dim(2) != image.dim(2))
    throw ShapeError("sample needs image [C,H,W] and mask [1,H,W], got " + shape_str(image.shape()) + " and " +
                     shape_str(mask.shape()));
  const auto c = image.dim(0), hw = image.dim(1) * image.dim(2);
  std::vector<float> masked(image.numel()), comp(image.numel());
  Sample s;
  for (std::size_t i = 0; i < hw; ++i) {
    const float m = mask[i];
    if (m != 0.f && m != 1.f) throw std::invalid_argument("mask must be binary");
    if (m == 0.f) ++s.hidden;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const auto k = ch * hw + i;
      masked[k] = m == 1.f ? image[k] : 0.f;
      comp[k] = m == 1.f ? 0.f : image[k];
    }
  }
  s.image = image;
  s.mask = mask;
  s.masked = Tensor<float>(image.shape(), std::move(masked));
  s.complement = Tensor<float>(image.shape(), std::move(comp));
  return s;
}

template <typename T>
Batch<T> collate(const std::vector<Sample>& samples) {
  if (samples.empty()) throw std::invalid_argument("cannot collate an empty batch");
  auto stack = [&](auto member) {
    const auto& first = samples.front().*member;
    Shape shape{samples.size()};
    shape.insert(shape.end(), first.shape().begin(), first.shape().end());
    std::vector<T> out;
    out.reserve(numel_of(shape));
    for (const auto& s : samples) {
      const auto& t = s.*member;
      if (t.shape() != first.shape()) throw ShapeError("samples in a batch must share a shape");
      for (float v : t.data()) out.push_back(static_cast<T>(v));
    }
    return Tensor<T>(shape, std::move(out));
  };
  Batch<T> b;
  b.image = stack(&Sample::image);
  b.mask = stack(&Sample::mask);
  b.masked = stack(&Sample::masked);
  b.complement = stack(&Sample::complement);
  for (const auto& s : samples) b.hidden.push_back(s.hidden);
  return b;
}

template Batch<float> collate<float>(const std::vector<Sample>&);
template Batch<double> collate<double>(const std::vector<Sample>&);

DatasetKind parse_dataset_kind(const std::string& name) {
  if (name == "stripes") return DatasetKind::stripes;
  if (name == "blobs") return DatasetKind::blobs;
  if (name == "gradients") return DatasetKind::gradients;
  throw std::invalid_argument("unknown dataset kind '" + name + "' (expected stripes, blobs or gradients)");
}

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::stripes: return "stripes";
    case DatasetKind::blobs: return "blobs";
    case DatasetKind::gradients: return "gradients";
  }
  return "?";
}

const std::vector<double>& stripe_periods() {
  static const std::vector<double> periods{4.0, 6.0, 8.0};
  return periods;
}

Tensor<float> render_stripes(const StripeParams& p, std::size_t size) {
  std::vector<float> v(size * size);
  const auto lo = size / 4, hi = size / 4 + size / 2;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const bool tile = y >= lo && y < hi && x >= lo && x < hi;
      const double coord = p.vertical ? double(x) : double(y);
      const double phase = tile ? p.tile_phase : p.phase;
      v[y * size + x] = static_cast<float>(stripe_profile(2 * std::numbers::pi * (coord + phase) / p.period));
    }
  return Tensor<float>({1, size, size}, std::move(v));
}

namespace {

Tensor<float> render_blobs(std::size_t size, Rng& rng) {
  const double bg = rng.uniform(-0.9, -0.5);
  std::vector<double> img(size * size, bg);
  const auto blobs = rng.uniform_int(1, 3);
  for (int i = 0; i < blobs; ++i) {
    const double cx = rng.uniform(0.15, 0.85) * size, cy = rng.uniform(0.15, 0.85) * size;
    const double rx = rng.uniform(0.1, 0.3) * size, ry = rng.uniform(0.1, 0.3) * size;
    const double level = rng.uniform(0.0, 0.9);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
        const double r = std::sqrt(dx * dx + dy * dy);
        const double w = 1.0 / (1.0 + std::exp((r - 1.0) * 6.0));
        auto& px = img[y * size + x];
        px = px + (level - px) * w;
      }
  }
  std::vector<float> out(img.begin(), img.end());
  return Tensor<float>({1, size, size}, std::move(out));
}

Tensor<float> render_gradient(std::size_t size, Rng& rng) {
  const double theta = rng.uniform(0.0, 2 * std::numbers::pi);
  const double slope = rng.uniform(0.5, 1.8);
  const double offset = rng.uniform(-0.3, 0.3);
  std::vector<float> v(size * size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double u = ((x + 0.5) / size - 0.5) * std::cos(theta) + ((y + 0.5) / size - 0.5) * std::sin(theta);
      v[y * size + x] = static_cast<float>(std::clamp(offset + slope * u, -1.0, 1.0));
    }
  return Tensor<float>({1, size, size}, std::move(v));
}

}  // namespace

std::vector<Tensor<float>> gen_dataset(DatasetKind kind, std::size_t count, std::size_t size, Rng& rng) {
  check_size(size);
  std::vector<Tensor<float>> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    switch (kind) {
      case DatasetKind::stripes: {
        StripeParams p;
        p.vertical = rng.uniform() < 0.5;
        const auto& periods = stripe_periods();
        p.period = periods[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(periods.size()) - 1))];
        p.phase = rng.uniform(0.0, p.period);
        p.tile_phase = rng.uniform(0.0, p.period);
        out.push_back(render_stripes(p, size));
        break;
      }
      case DatasetKind::blobs: out.push_back(render_blobs(size, rng)); break;
      case DatasetKind::gradients: out.push_back(render_gradient(size, rng)); break;
    }
  }
  return out;
}

MaskKind parse_mask_kind(const std::string& name) {
  if (name == "center") return MaskKind::center;
  if (name == "random_rect") return MaskKind::random_rect;
  if (name == "irregular_walk") return MaskKind::irregular_walk;
  if (name == "mixed") return MaskKind::mixed;
  throw std::invalid_argument("unknown mask kind '" + name + "' (expected center, random_rect, irregular_walk or mixed)");
}

std::string to_string(MaskKind kind) {
  switch (kind) {
    case MaskKind::center: return "center";
    case MaskKind::random_rect: return "random_rect";
    case MaskKind::irregular_walk: return "irregular_walk";
    case MaskKind::mixed: return "mixed";
  }
  return "?";
}

void MaskSpec::validate() const {
  if (!(min_fraction > 0 && min_fraction <= max_fraction && max_fraction < 1))
    throw std::invalid_argument("mask.min_fraction/max_fraction must satisfy 0 < min <= max < 1");
  if (brush == 0) throw std::invalid_argument("mask.brush must be positive");
}

namespace {

std::size_t target_hidden(const MaskSpec& spec, std::size_t total, Rng& rng) {
  const auto lo = static_cast<std::size_t>(std::ceil(spec.min_fraction * total));
  const auto hi = static_cast<std::size_t>(std::floor(spec.max_fraction * total));
  if (lo > hi) throw std::invalid_argument("mask fraction bounds admit no pixel count at this size");
  const auto want = static_cast<std::size_t>(std::lround(rng.uniform(spec.min_fraction, spec.max_fraction) * total));
  return std::clamp(want, lo, hi);
}

void rect_mask(std::vector<float>& m, std::size_t h, std::size_t w, const MaskSpec& spec, Rng& rng) {
  const double total = double(h * w);
  for (;;) {
    const double frac = rng.uniform(spec.min_fraction, spec.max_fraction);
    const double aspect = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
    auto rh = static_cast<std::size_t>(std::lround(std::sqrt(frac * total * aspect)));
    rh = std::clamp<std::size_t>(rh, 1, h);
    auto rw = static_cast<std::size_t>(std::lround(frac * total / double(rh)));
    rw = std::clamp<std::size_t>(rw, 1, w);
    const double got = double(rh * rw) / total;
    if (got < spec.min_fraction || got > spec.max_fraction) continue;
    const auto y0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(h - rh)));
    const auto x0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(w - rw)));
    for (std::size_t y = y0; y < y0 + rh; ++y)
      for (std::size_t x = x0; x < x0 + rw; ++x) m[y * w + x] = 0.f;
    return;
  }
}

void walk_mask(std::vector<float>& m, std::size_t h, std::size_t w, const MaskSpec& spec, Rng& rng) {
  const auto target = target_hidden(spec, h * w, rng);
  std::size_t hidden = 0;
  const auto b = static_cast<long>(spec.brush);
  double y = 0, x = 0, angle = 0;
  int stroke_left = 0;
  while (hidden < target) {
    if (stroke_left == 0) {
      y = rng.uniform(0.0, double(h));
      x = rng.uniform(0.0, double(w));
      angle = rng.uniform(0.0, 2 * std::numbers::pi);
      stroke_left = static_cast<int>(rng.uniform_int(4, 12));
    }
    const long cy = static_cast<long>(y), cx = static_cast<long>(x);
    for (long dy = -b + 1; dy < b && hidden < target; ++dy)
      for (long dx = -b + 1; dx < b && hidden < target; ++dx) {
        const long py = cy + dy, px = cx + dx;
        if (py < 0 || px < 0 || py >= long(h) || px >= long(w)) continue;
        auto& v = m[py * w + px];
        if (v == 1.f) {
          v = 0.f;
          ++hidden;
        }
      }
    angle += rng.uniform(-0.8, 0.8);
    y = std::clamp(y + std::sin(angle) * b, 0.0, double(h) - 1e-9);
    x = std::clamp(x + std::cos(angle) * b, 0.0, double(w) - 1e-9);
    --stroke_left;
  }
}

}  // namespace

Tensor<float> make_mask(const MaskSpec& spec, std::size_t height, std::size_t width, Rng& rng) {
  spec.validate();
  std::vector<float> m(height * width, 1.f);
  auto kind = spec.kind;
  if (kind == MaskKind::mixed) kind = static_cast<MaskKind>(rng.uniform_int(0, 2));
  switch (kind) {
    case MaskKind::center:
      for (std::size_t y = height / 4; y < height / 4 + height / 2; ++y)
        for (std::size_t x = width / 4; x < width / 4 + width / 2; ++x) m[y * width + x] = 0.f;
      break;
    case MaskKind::random_rect: rect_mask(m, height, width, spec, rng); break;
    case MaskKind::irregular_walk: walk_mask(m, height, width, spec, rng); break;
    case MaskKind::mixed: break;
  }
  return Tensor<float>({1, height, width}, std::move(m));
}

std::uint8_t to_byte(float v) {
  const double scaled = std::floor((double(v) + 1.0) * 127.5 + 0.5);
  return static_cast<std::uint8_t>(std::clamp(scaled, 0.0, 255.0));
}

float from_byte(std::uint8_t b) { return static_cast<float>(double(b) / 127.5 - 1.0); }

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in, const std::string& path) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw ImageError(path + ": truncated header");
  return tok;
}

std::size_t header_number(std::istream& in, const std::string& path, const char* what) {
  const auto tok = header_token(in, path);
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char ch) { return std::isdigit(ch); }))
    throw ImageError(path + ": malformed " + what + " '" + tok + "'");
  return std::stoul(tok);
}

}  // namespace

Tensor<float> read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  const auto name = path.string();
  if (!in) throw ImageError(name + ": cannot open");
  const auto magic = header_token(in, name);
  std::size_t channels;
  if (magic == "P5") channels = 1;
  else if (magic == "P6") channels = 3;
  else throw ImageError(name + ": unsupported magic '" + magic + "' (expected P5 or P6)");
  const auto w = header_number(in, name, "width");
  const auto h = header_number(in, name, "height");
  const auto maxval = header_number(in, name, "maxval");
  if (maxval != 255) throw ImageError(name + ": unsupported maxval " + std::to_string(maxval));
  if (w == 0 || h == 0) throw ImageError(name + ": zero extent");
  std::vector<unsigned char> bytes(w * h * channels);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size())
    throw ImageError(name + ": truncated payload (" + std::to_string(in.gcount()) + " of " +
                     std::to_string(bytes.size()) + " bytes)");
  std::vector<float> v(bytes.size());
  // Interleaved RGB -> planar [C,H,W].
  for (std::size_t i = 0; i < w * h; ++i)
    for (std::size_t c = 0; c < channels; ++c) v[c * w * h + i] = from_byte(bytes[i * channels + c]);
  return Tensor<float>({channels, h, w}, std::move(v));
}

void write_image(const std::filesystem::path& path, const Tensor<float>& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3))
    throw ShapeError("write_image expects [1|3,H,W], got " + shape_str(image.shape()));
  const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError(path.string() + ": cannot open for writing");
  out << (c == 1 ? "P5" : "P6") << "\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> bytes(w * h * c);
  for (std::size_t i = 0; i < w * h; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) bytes[i * c + ch] = to_byte(image[ch * w * h + i]);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageError(path.string() + ": write failed");
}

Tensor<float> tile_grid(const std::vector<Tensor<float>>& images, std::size_t columns) {
  if (images.empty() || columns == 0) throw std::invalid_argument("grid needs at least one image and column");
  const auto& first = images.front();
  const auto c = first.dim(0), h = first.dim(1), w = first.dim(2);
  const auto cols = std::min(columns, images.size());
  const auto rows = (images.size() + columns - 1) / columns;
  const auto gh = rows * h + (rows - 1), gw = cols * w + (cols - 1);
  std::vector<float> g(c * gh * gw, -1.f);
  for (std::size_t k = 0; k < images.size(); ++k) {
    if (images[k].shape() != first.shape()) throw ShapeError("grid images must share a shape");
    const auto oy = (k / columns) * (h + 1), ox = (k % columns) * (w + 1);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) g[(ch * gh + oy + y) * gw + ox + x] = images[k][(ch * h + y) * w + x];
  }
  return Tensor<float>({c, gh, gw}, std::move(g));
}

void write_grid(const std::filesystem::path& path, const std::vector<Tensor<float>>& images, std::size_t columns) {
  write_image(path, tile_grid(images, columns));
}

std::filesystem::path write_dataset(const std::filesystem::path& dir, const std::vector<Tensor<float>>& images) {
  std::filesystem::create_directories(dir);
  const auto manifest = dir / "manifest.txt";
  std::ofstream out(manifest);
  if (!out) throw ImageError(manifest.string() + ": cannot open for writing");
  for (std::size_t i = 0; i < images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%05zu.%s", i, images[i].dim(0) == 3 ? "ppm" : "pgm");
    write_image(dir / name, images[i]);
    out << name << "\n";
  }
  if (!out) throw ImageError(manifest.string() + ": write failed");
  return manifest;
}

std::vector<std::filesystem::path> read_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw ImageError(manifest.string() + ": cannot open");
  std::vector<std::filesystem::path> out;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    if (line.empty()) continue;
    std::filesystem::path p(line);
    out.push_back(p.is_relative() ? manifest.parent_path() / p : p);
  }
  return out;
}

}  // namespace picn
