#pragma once

// Flat-colored 2D scenes with known factors: the desk-scale dataset and the
// ground truth for evaluation. Coordinates are in the unit square, x to the
// right and y down; pixel (px, py) samples the point ((px+.5)/R, (py+.5)/R).

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "ganformer/errors.hpp"
#include "ganformer/rng.hpp"
#include "ganformer/tensor.hpp"

namespace ganformer {

enum class ShapeKind { kCircle = 0, kSquare = 1, kTriangle = 2 };
inline constexpr std::size_t kNumShapes = 3;
inline constexpr std::size_t kNumColors = 8;
inline constexpr std::size_t kMaxObjects = 4;
inline constexpr double kMinRadius = 0.08;
inline constexpr double kMaxRadius = 0.2;
// Extra clearance between circumscribed circles so that equal colors never
// touch after rasterization.
inline constexpr double kObjectGap = 0.03;
inline constexpr std::size_t kPlacementAttempts = 1000;

inline const char* shape_name(ShapeKind s) {
  switch (s) {
    case ShapeKind::kCircle: return "circle";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
  }
  return "?";
}

inline ShapeKind parse_shape(const std::string& name) {
  for (std::size_t i = 0; i < kNumShapes; ++i)
    if (name == shape_name(static_cast<ShapeKind>(i))) return static_cast<ShapeKind>(i);
  throw FormatError("unknown shape '" + name + "'");
}

using Rgb8 = std::array<std::uint8_t, 3>;

/// Saturated colors, far apart in RGB and far from the gray background.
inline constexpr std::array<Rgb8, kNumColors> kPalette{{
    {200, 40, 40},    // red
    {40, 170, 60},    // green
    {40, 70, 210},    // blue
    {220, 200, 40},   // yellow
    {40, 190, 200},   // cyan
    {200, 50, 190},   // magenta
    {235, 130, 30},   // orange
    {120, 50, 180},   // purple
}};
inline constexpr Rgb8 kBackground{128, 128, 128};

inline float byte_to_value(std::uint8_t b) { return static_cast<float>(b / 127.5 - 1.0); }

/// q = round((v + 1) * 127.5), halves rounded up, clamped to [0, 255].
inline std::uint8_t value_to_byte(float v) {
  const double q = std::floor((static_cast<double>(v) + 1.0) * 127.5 + 0.5);
  return static_cast<std::uint8_t>(std::clamp(q, 0.0, 255.0));
}

struct SceneObject {
  ShapeKind shape = ShapeKind::kCircle;
  std::size_t color = 0;
  double x = 0.5, y = 0.5;
  double radius = 0.1;  // circumscribed circle
};

struct SceneSpec {
  std::vector<SceneObject> objects;
  Rgb8 background = kBackground;
};

inline bool objects_overlap(const SceneObject& a, const SceneObject& b) {
  return std::hypot(a.x - b.x, a.y - b.y) < a.radius + b.radius + kObjectGap;
}

/// Count, then every object's shape, color and radius are drawn uniformly and
/// independently; only positions are rejection-sampled, so the factor
/// marginals stay exactly uniform. After kPlacementAttempts failures the
/// count drops by one.
inline SceneSpec sample_scene(Rng& rng) {
  SceneSpec spec;
  std::size_t count = 1 + rng.below(kMaxObjects);
  std::vector<SceneObject> drawn(count);
  for (auto& o : drawn) {
    o.shape = static_cast<ShapeKind>(rng.below(kNumShapes));
    o.color = rng.below(kNumColors);
    o.radius = rng.uniform(kMinRadius, kMaxRadius);
  }
  while (true) {
    // One attempt places every object; it succeeds when none overlap.
    for (std::size_t attempt = 0; attempt < kPlacementAttempts; ++attempt) {
      std::vector<SceneObject> placed(drawn.begin(), drawn.begin() + static_cast<long>(count));
      bool ok = true;
      for (std::size_t k = 0; k < count; ++k) {
        auto& o = placed[k];
        o.x = rng.uniform(o.radius, 1.0 - o.radius);
        o.y = rng.uniform(o.radius, 1.0 - o.radius);
        for (std::size_t j = 0; j < k; ++j) ok = ok && !objects_overlap(o, placed[j]);
      }
      if (ok) {
        spec.objects = std::move(placed);
        return spec;
      }
    }
    --count;  // count >= 2 here: a lone object always fits
  }
}

/// Does the shape cover the point (u, v)?
inline bool shape_contains(const SceneObject& o, double u, double v) {
  const double dx = u - o.x, dy = v - o.y;
  switch (o.shape) {
    case ShapeKind::kCircle: return dx * dx + dy * dy <= o.radius * o.radius;
    case ShapeKind::kSquare: {
      const double h = o.radius / std::numbers::sqrt2;
      return std::abs(dx) <= h && std::abs(dy) <= h;
    }
    case ShapeKind::kTriangle: {
      // Apex up at (0, -r); base at y = r/2 spanning x = +-r*sqrt(3)/2.
      const double r = o.radius;
      if (dy > r / 2) return false;
      // Side edges: |dx| <= (dy + r) / sqrt(3)
      return std::abs(dx) * std::numbers::sqrt3 <= dy + r;
    }
  }
  return false;
}

struct RenderedScene {
  Tensor<float> image;  // [3, R, R]
  // One mask per object in spec order, then the background; row-major R x R.
  std::vector<std::vector<std::uint8_t>> masks;
  std::size_t resolution = 0;
};

inline RenderedScene render_scene(const SceneSpec& spec, std::size_t R) {
  if (R < 16) throw UsageError("render_scene needs resolution >= 16, got " + std::to_string(R));
  const std::size_t n = spec.objects.size();
  std::vector<int> owner(R * R, -1);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t py = 0; py < R; ++py)
      for (std::size_t px = 0; px < R; ++px)
        if (shape_contains(spec.objects[k], (px + 0.5) / R, (py + 0.5) / R)) owner[py * R + px] = static_cast<int>(k);

  RenderedScene out;
  out.resolution = R;
  out.masks.assign(n + 1, std::vector<std::uint8_t>(R * R, 0));
  std::vector<float> pixels(3 * R * R);
  for (std::size_t i = 0; i < R * R; ++i) {
    const int k = owner[i];
    const Rgb8 c = k < 0 ? spec.background : kPalette.at(spec.objects[k].color);
    for (std::size_t ch = 0; ch < 3; ++ch) pixels[ch * R * R + i] = byte_to_value(c[ch]);
    out.masks[k < 0 ? n : static_cast<std::size_t>(k)][i] = 1;
  }
  out.image = Tensor<float>({3, R, R}, std::move(pixels));
  return out;
}

// --- image files ----------------------------------------------------------------

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace detail

/// Raw 8-bit RGB, interleaved, from a [3, H, W] image in (-1, 1).
inline std::string encode_ppm(const Tensor<float>& image) {
  if (image.rank() != 3 || image.extent(0) != 3) {
    throw DimensionError("PPM needs a [3, H, W] image, got " + shape_string(image.shape()));
  }
  const std::size_t H = image.extent(1), W = image.extent(2);
  std::string out = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  const auto v = image.data();
  for (std::size_t i = 0; i < H * W; ++i)
    for (std::size_t c = 0; c < 3; ++c) out.push_back(static_cast<char>(value_to_byte(v[c * H * W + i])));
  return out;
}

inline std::string encode_pgm(const std::vector<std::uint8_t>& gray, std::size_t H, std::size_t W) {
  if (gray.size() != H * W) throw DimensionError("PGM pixel count does not match " + std::to_string(H) + "x" + std::to_string(W));
  std::string out = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  out.append(gray.begin(), gray.end());
  return out;
}

namespace detail {

/// Parses "P6"/"P5" headers with comments; returns the offset of the raster.
inline std::size_t parse_pnm_header(const std::string& bytes, const char* magic, std::size_t& W, std::size_t& H,
                                    const std::string& where) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& why) {
    throw FormatError(where + ": " + why + " at offset " + std::to_string(pos));
  };
  if (bytes.compare(0, 2, magic) != 0) fail(std::string("expected magic ") + magic);
  pos = 2;
  auto next_int = [&]() -> std::size_t {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) fail("expected a number");
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > 1u << 20) fail("number too large");
      ++pos;
    }
    return v;
  };
  W = next_int();
  H = next_int();
  const std::size_t maxval = next_int();
  if (W == 0 || H == 0) fail("empty image");
  if (maxval != 255) fail("only maxval 255 is supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) fail("missing separator");
  return pos + 1;
}

}  // namespace detail

inline Tensor<float> decode_ppm(const std::string& bytes, const std::string& where = "PPM") {
  std::size_t W = 0, H = 0;
  const std::size_t start = detail::parse_pnm_header(bytes, "P6", W, H, where);
  if (bytes.size() - start != 3 * W * H) {
    throw FormatError(where + ": expected " + std::to_string(3 * W * H) + " raster bytes at offset " +
                      std::to_string(start) + ", found " + std::to_string(bytes.size() - start));
  }
  std::vector<float> v(3 * H * W);
  for (std::size_t i = 0; i < H * W; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      v[c * H * W + i] = byte_to_value(static_cast<std::uint8_t>(bytes[start + 3 * i + c]));
  return Tensor<float>({3, H, W}, std::move(v));
}

inline void save_ppm(const Tensor<float>& image, const std::filesystem::path& path) {
  detail::write_file(path, encode_ppm(image));
}

inline Tensor<float> load_ppm(const std::filesystem::path& path) {
  return decode_ppm(detail::read_file(path), path.string());
}

inline void save_pgm(const std::vector<std::uint8_t>& gray, std::size_t H, std::size_t W,
                     const std::filesystem::path& path) {
  detail::write_file(path, encode_pgm(gray, H, W));
}

// --- datasets -------------------------------------------------------------------

inline std::string manifest_line(std::size_t index, const SceneSpec& spec) {
  std::ostringstream line;
  line << index << '\t' << spec.objects.size();
  line << std::fixed << std::setprecision(6);
  for (const auto& o : spec.objects)
    line << '\t' << shape_name(o.shape) << ',' << o.color << ',' << o.x << ',' << o.y << ',' << o.radius;
  return line.str();
}

inline SceneSpec parse_manifest_line(const std::string& line, std::size_t line_no) {
  std::istringstream in(line);
  std::string field;
  std::vector<std::string> fields;
  while (std::getline(in, field, '\t')) fields.push_back(field);
  auto fail = [&](const std::string& why) {
    throw FormatError("manifest line " + std::to_string(line_no) + ": " + why);
  };
  if (fields.size() < 2) fail("expected index and count");
  SceneSpec spec;
  std::size_t count = 0;
  try {
    count = std::stoul(fields[1]);
  } catch (const std::exception&) {
    fail("bad count '" + fields[1] + "'");
  }
  if (fields.size() != 2 + count) fail("count " + std::to_string(count) + " does not match object fields");
  for (std::size_t k = 0; k < count; ++k) {
    std::istringstream obj(fields[2 + k]);
    std::string shape, color, x, y, r;
    if (!std::getline(obj, shape, ',') || !std::getline(obj, color, ',') || !std::getline(obj, x, ',') ||
        !std::getline(obj, y, ',') || !std::getline(obj, r, ',')) {
      fail("malformed object '" + fields[2 + k] + "'");
    }
    SceneObject o;
    o.shape = parse_shape(shape);
    try {
      o.color = std::stoul(color);
      o.x = std::stod(x);
      o.y = std::stod(y);
      o.radius = std::stod(r);
    } catch (const std::exception&) {
      fail("malformed object '" + fields[2 + k] + "'");
    }
    if (o.color >= kNumColors) fail("color index out of range");
    spec.objects.push_back(o);
  }
  return spec;
}

inline std::string scene_filename(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%06zu.ppm", index);
  return buf;
}

/// Scene i comes from its own stream of `seed`, so a dataset of n scenes is
/// a prefix of any larger one with the same seed.
inline SceneSpec dataset_scene(std::uint64_t seed, std::size_t index) {
  Rng rng(derive_seed(seed, index));
  return sample_scene(rng);
}

/// Writes images/scene_XXXXXX.ppm and manifest.tsv; returns the manifest lines.
inline std::vector<std::string> generate_dataset(std::size_t n, std::uint64_t seed, std::size_t resolution,
                                                 const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());
  std::vector<std::string> lines;
  std::string manifest;
  for (std::size_t i = 0; i < n; ++i) {
    const SceneSpec spec = dataset_scene(seed, i);
    save_ppm(render_scene(spec, resolution).image, out_dir / "images" / scene_filename(i));
    lines.push_back(manifest_line(i, spec));
    manifest += lines.back() + "\n";
  }
  detail::write_file(out_dir / "manifest.tsv", manifest);
  return lines;
}

struct Dataset {
  std::vector<Tensor<float>> images;
  std::vector<SceneSpec> scenes;
};

/// Reads the first `limit` scenes (all when 0) listed in the manifest.
inline Dataset load_dataset(const std::filesystem::path& dir, std::size_t limit = 0) {
  std::istringstream manifest(detail::read_file(dir / "manifest.tsv"));
  Dataset data;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (limit && data.scenes.size() == limit) break;
    data.scenes.push_back(parse_manifest_line(line, line_no));
    const std::size_t index = std::stoul(line.substr(0, line.find('\t')));
    data.images.push_back(load_ppm(dir / "images" / scene_filename(index)));
  }
  return data;
}

}  // namespace ganformer
