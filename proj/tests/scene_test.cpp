#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "ganformer/scene.hpp"
#include "support/oracles.hpp"

namespace ganformer {
namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("ganformer_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

TEST(SampleScene, DeterministicPerSeed) {
  Rng a(11), b(11);
  for (int i = 0; i < 20; ++i) {
    const auto sa = sample_scene(a), sb = sample_scene(b);
    ASSERT_EQ(manifest_line(0, sa), manifest_line(0, sb));
  }
}

TEST(SampleScene, ObjectsInsideAndApart) {
  Rng rng(3);
  for (int i = 0; i < 2000; ++i) {
    const auto s = sample_scene(rng);
    ASSERT_GE(s.objects.size(), 1u);
    ASSERT_LE(s.objects.size(), kMaxObjects);
    for (std::size_t a = 0; a < s.objects.size(); ++a) {
      const auto& o = s.objects[a];
      EXPECT_GE(o.radius, kMinRadius);
      EXPECT_LE(o.radius, kMaxRadius);
      EXPECT_GE(o.x - o.radius, 0.0);
      EXPECT_LE(o.x + o.radius, 1.0);
      EXPECT_GE(o.y - o.radius, 0.0);
      EXPECT_LE(o.y + o.radius, 1.0);
      for (std::size_t b = a + 1; b < s.objects.size(); ++b)
        EXPECT_GE(std::hypot(o.x - s.objects[b].x, o.y - s.objects[b].y), o.radius + s.objects[b].radius);
    }
  }
}

TEST(SampleScene, FactorFrequenciesWithinThreeSigma) {
  Rng rng(5);
  std::vector<double> colors(kNumColors, 0), shapes(kNumShapes, 0), counts(kMaxObjects, 0);
  double objects = 0;
  const int scenes = 10000;
  for (int i = 0; i < scenes; ++i) {
    const auto s = sample_scene(rng);
    counts[s.objects.size() - 1] += 1;
    for (const auto& o : s.objects) {
      colors[o.color] += 1;
      shapes[static_cast<std::size_t>(o.shape)] += 1;
      objects += 1;
    }
  }
  auto within = [](const std::vector<double>& hist, double n) {
    const double p = 1.0 / static_cast<double>(hist.size());
    const double sigma = std::sqrt(n * p * (1 - p));
    for (double h : hist) EXPECT_LE(std::abs(h - n * p), 3 * sigma) << h << " vs " << n * p;
  };
  within(colors, objects);
  within(shapes, objects);
  within(counts, scenes);
}

TEST(RenderScene, SingleCircleCenterPixelIsPaletteRed) {
  SceneSpec s;
  s.objects.push_back({ShapeKind::kCircle, 0, 0.5, 0.5, 0.15});
  const auto r = render_scene(s, 32);
  const std::size_t i = 16 * 32 + 16;
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(r.image.data()[c * 32 * 32 + i], byte_to_value(kPalette[0][c]));
    EXPECT_EQ(value_to_byte(r.image.data()[c * 32 * 32 + i]), kPalette[0][c]);
  }
  EXPECT_EQ(value_to_byte(r.image.data()[0]), kBackground[0]);
}

TEST(RenderScene, ShapeAreasMatchGeometry) {
  const std::size_t R = 64;
  for (const double r : {0.08, 0.1, 0.12, 0.15, 0.2}) {
    for (std::size_t k = 0; k < kNumShapes; ++k) {
      SceneSpec s;
      s.objects.push_back({static_cast<ShapeKind>(k), 2, 0.5, 0.5, r});
      const auto out = render_scene(s, R);
      double count = 0;
      for (auto v : out.masks[0]) count += v;
      const double unit[3] = {std::numbers::pi, 2.0, 0.75 * std::numbers::sqrt3};
      const double expected = unit[k] * r * r * R * R;
      // Only pixels cut by the outline can disagree with the exact area.
      const double perimeter[3] = {2 * std::numbers::pi, 4 * std::numbers::sqrt2, 3 * std::numbers::sqrt3};
      EXPECT_NEAR(count, expected, perimeter[k] * r * R + 4) << shape_name(static_cast<ShapeKind>(k)) << " r=" << r;
      if (k == 0) EXPECT_NEAR(count, expected, 0.05 * expected) << "circle r=" << r;
    }
  }
}

TEST(RenderScene, MasksPartitionTheGrid) {
  Rng rng(7);
  for (int t = 0; t < 50; ++t) {
    const auto s = sample_scene(rng);
    const auto r = render_scene(s, 32);
    ASSERT_EQ(r.masks.size(), s.objects.size() + 1);
    for (std::size_t i = 0; i < 32 * 32; ++i) {
      int owners = 0;
      for (const auto& m : r.masks) owners += m[i];
      ASSERT_EQ(owners, 1);
    }
    for (std::size_t k = 0; k < s.objects.size(); ++k) {
      std::size_t n = 0;
      for (auto v : r.masks[k]) n += v;
      EXPECT_GT(n, 0u) << "object " << k << " invisible";
    }
  }
  EXPECT_THROW(render_scene(SceneSpec{}, 8), UsageError);
}

TEST(ImageIo, QuantizationEndpoints) {
  EXPECT_EQ(value_to_byte(-1.0f), 0);
  EXPECT_EQ(value_to_byte(1.0f), 255);
  EXPECT_EQ(value_to_byte(0.0f), 128);
  EXPECT_EQ(value_to_byte(-3.0f), 0);
  EXPECT_EQ(value_to_byte(7.0f), 255);
  for (int b = 0; b < 256; ++b) EXPECT_EQ(value_to_byte(byte_to_value(static_cast<std::uint8_t>(b))), b);
}

TEST(ImageIo, RoundTripWithinOneStepAndByteIdentical) {
  Rng rng(1);
  auto img = tanh(testing::randn<float>({3, 9, 13}, rng));
  const auto bytes = encode_ppm(img);
  EXPECT_EQ(bytes.substr(0, 11), "P6\n13 9\n255");
  const auto back = decode_ppm(bytes);
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_LE(std::abs(back.data()[i] - img.data()[i]), 1.0 / 255 + 1e-6);
  EXPECT_EQ(encode_ppm(back), bytes);

  const auto dir = scratch_dir("ppm");
  save_ppm(img, dir / "a.ppm");
  save_ppm(load_ppm(dir / "a.ppm"), dir / "b.ppm");
  EXPECT_EQ(detail::read_file(dir / "a.ppm"), detail::read_file(dir / "b.ppm"));
  std::filesystem::remove_all(dir);
}

TEST(ImageIo, HeaderCommentsAccepted) {
  const std::string bytes = std::string("P6\n# made by hand\n2 1\n255\n") + std::string("\x00\x80\xff\x10\x20\x30", 6);
  const auto img = decode_ppm(bytes);
  EXPECT_EQ(img.shape(), (Shape{3, 1, 2}));
  EXPECT_EQ(value_to_byte(img.data()[0]), 0);
  EXPECT_EQ(value_to_byte(img.data()[2]), 128);
}

TEST(ImageIo, MalformedInputsRejected) {
  EXPECT_THROW(decode_ppm("P5\n1 1\n255\nx"), FormatError);
  EXPECT_THROW(decode_ppm("P6\n1 1\n65535\nxxxxxx"), FormatError);
  EXPECT_THROW(decode_ppm("P6\n2 2\n255\nxyz"), FormatError);
  EXPECT_THROW(decode_ppm("P6\nfoo"), FormatError);
  EXPECT_THROW(load_ppm("/nonexistent/x.ppm"), IoError);
}

TEST(Dataset, EmptyManifest) {
  const auto dir = scratch_dir("empty");
  EXPECT_TRUE(generate_dataset(0, 1, 32, dir).empty());
  EXPECT_EQ(detail::read_file(dir / "manifest.tsv"), "");
  EXPECT_TRUE(std::filesystem::is_empty(dir / "images"));
  std::filesystem::remove_all(dir);
}

TEST(Dataset, DeterministicPrefixAndRoundTrip) {
  const auto a = scratch_dir("ds_a"), b = scratch_dir("ds_b"), c = scratch_dir("ds_c");
  const auto lines = generate_dataset(12, 42, 32, a);
  generate_dataset(12, 42, 32, b);
  generate_dataset(5, 42, 32, c);
  EXPECT_EQ(lines.size(), 12u);
  EXPECT_EQ(detail::read_file(a / "manifest.tsv"), detail::read_file(b / "manifest.tsv"));
  for (std::size_t i = 0; i < 12; ++i)
    EXPECT_EQ(detail::read_file(a / "images" / scene_filename(i)), detail::read_file(b / "images" / scene_filename(i)));
  for (std::size_t i = 0; i < 5; ++i)
    EXPECT_EQ(detail::read_file(a / "images" / scene_filename(i)), detail::read_file(c / "images" / scene_filename(i)));

  // manifest fields: index, count, then shape,color,x,y,r with six decimals
  EXPECT_EQ(lines[0].substr(0, 2), "0\t");
  const auto spec = parse_manifest_line(lines[3], 4);
  EXPECT_EQ(manifest_line(3, spec), lines[3]);

  const auto data = load_dataset(a, 7);
  ASSERT_EQ(data.images.size(), 7u);
  const auto rendered = render_scene(dataset_scene(42, 6), 32);
  EXPECT_EQ(encode_ppm(data.images[6]), encode_ppm(rendered.image));
  for (auto d : {a, b, c}) std::filesystem::remove_all(d);
}

TEST(Dataset, MalformedManifestNamesLine) {
  try {
    parse_manifest_line("0\t2\tcircle,1,0.5,0.5,0.1", 9);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("line 9"), std::string::npos);
  }
  EXPECT_THROW(parse_manifest_line("0\t1\thexagon,1,0.5,0.5,0.1", 1), FormatError);
  EXPECT_THROW(parse_manifest_line("0\t1\tcircle,9,0.5,0.5,0.1", 1), FormatError);
}

}  // namespace
}  // namespace ganformer
