#pragma once

// Desk-scale evaluation: attention segments and their IoU against object
// masks, an exact detector for flat-colored scenes, chi-square scene
// statistics, and distribution metrics over a fixed random-conv embedding.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>

#include "ganformer/errors.hpp"
#include "ganformer/rng.hpp"
#include "ganformer/scene.hpp"
#include "ganformer/tensor.hpp"
#include "json.hpp"

namespace ganformer {

// --- attention segments ---------------------------------------------------------

/// Attention of one layer as an H x W x m map, row-major over pixels.
struct AttentionMap {
  std::size_t height = 0, width = 0, latents = 0;
  std::vector<double> weights;  // [(y * W + x) * m + j]
};

/// weights [n, m] with n = H * W (row-major grid).
template <typename T>
AttentionMap attention_map(const Tensor<T>& weights, std::size_t height, std::size_t width) {
  if (weights.rank() != 2 || weights.extent(0) != height * width) {
    throw DimensionError("attention weights " + shape_string(weights.shape()) + " do not cover a " +
                         std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  AttentionMap m{height, width, weights.extent(1), {}};
  m.weights.assign(weights.data().begin(), weights.data().end());
  return m;
}

/// Bilinear resampling with half-pixel centers and edge clamping.
inline AttentionMap resize_attention(const AttentionMap& a, std::size_t height, std::size_t width) {
  if (a.height == height && a.width == width) return a;
  AttentionMap out{height, width, a.latents, std::vector<double>(height * width * a.latents)};
  auto axis = [](std::size_t i, std::size_t from, std::size_t to, std::size_t& i0, std::size_t& i1, double& t) {
    const double s = (static_cast<double>(i) + 0.5) * static_cast<double>(from) / static_cast<double>(to) - 0.5;
    const double c = std::clamp(s, 0.0, static_cast<double>(from - 1));
    i0 = static_cast<std::size_t>(std::floor(c));
    i1 = std::min(i0 + 1, from - 1);
    t = c - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t y0, y1;
    double ty;
    axis(y, a.height, height, y0, y1, ty);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t x0, x1;
      double tx;
      axis(x, a.width, width, x0, x1, tx);
      for (std::size_t j = 0; j < a.latents; ++j) {
        auto at = [&](std::size_t yy, std::size_t xx) { return a.weights[(yy * a.width + xx) * a.latents + j]; };
        const double top = (1 - tx) * at(y0, x0) + tx * at(y0, x1);
        const double bottom = (1 - tx) * at(y1, x0) + tx * at(y1, x1);
        out.weights[(y * width + x) * a.latents + j] = (1 - ty) * top + ty * bottom;
      }
    }
  }
  return out;
}

struct AttentionSegments {
  std::size_t height = 0, width = 0, latents = 0;
  std::vector<std::size_t> labels;  // argmax latent per pixel

  std::vector<std::uint8_t> mask(std::size_t latent) const {
    std::vector<std::uint8_t> m(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) m[i] = labels[i] == latent;
    return m;
  }
};

/// Per-pixel argmax over latents; ties go to the lowest index.
inline AttentionSegments extract_attention_segments(const AttentionMap& a) {
  AttentionSegments s{a.height, a.width, a.latents, std::vector<std::size_t>(a.height * a.width, 0)};
  for (std::size_t i = 0; i < s.labels.size(); ++i) {
    const double* row = a.weights.data() + i * a.latents;
    std::size_t best = 0;
    for (std::size_t j = 1; j < a.latents; ++j)
      if (row[j] > row[best]) best = j;
    s.labels[i] = best;
  }
  return s;
}

inline double mask_iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  if (a.size() != b.size()) {
    throw DimensionError("IoU of masks with " + std::to_string(a.size()) + " and " + std::to_string(b.size()) +
                         " pixels");
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]);
    uni += (a[i] || b[i]);
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Max over (layer, latent) of the IoU between a segment and the class mask.
/// Maps are resized to the mask grid and re-argmaxed first.
inline double attention_segment_iou(const std::vector<AttentionMap>& layers, const std::vector<std::uint8_t>& mask,
                                    std::size_t height, std::size_t width) {
  if (mask.size() != height * width) throw DimensionError("class mask does not match its stated size");
  double best = 0.0;
  for (const auto& layer : layers) {
    const auto seg = extract_attention_segments(resize_attention(layer, height, width));
    for (std::size_t j = 0; j < seg.latents; ++j) best = std::max(best, mask_iou(seg.mask(j), mask));
  }
  return best;
}

// --- detection ------------------------------------------------------------------

struct DetectedObject {
  std::size_t color = 0;
  std::optional<ShapeKind> shape;  // empty when the fill ratio fits no band
  std::size_t area = 0;            // pixels
  double cx = 0, cy = 0;           // unit coordinates
  double fill_ratio = 0;
  double radius = 0;               // circumscribed radius implied by area and shape
};

struct Detection {
  std::vector<DetectedObject> objects;
  std::vector<int> labels;  // object index per pixel, -1 for background
  std::size_t height = 0, width = 0;

  std::vector<std::uint8_t> shape_mask(ShapeKind s) const {
    std::vector<std::uint8_t> m(labels.size(), 0);
    for (std::size_t i = 0; i < labels.size(); ++i)
      m[i] = labels[i] >= 0 && objects[static_cast<std::size_t>(labels[i])].shape == s;
    return m;
  }
  std::vector<std::uint8_t> background_mask() const {
    std::vector<std::uint8_t> m(labels.size(), 0);
    for (std::size_t i = 0; i < labels.size(); ++i) m[i] = labels[i] < 0;
    return m;
  }
};

inline constexpr std::size_t kMinComponentPixels = 12;
inline constexpr double kShapeBand = 0.12;

/// Expected bounding-box fill ratio of each shape and the area of a shape
/// with unit circumscribed radius.
inline constexpr std::array<double, kNumShapes> kFillRatio{std::numbers::pi / 4, 1.0, 0.5};
inline constexpr std::array<double, kNumShapes> kUnitArea{std::numbers::pi, 2.0, 0.75 * std::numbers::sqrt3};

inline std::optional<ShapeKind> classify_fill_ratio(double ratio) {
  std::optional<ShapeKind> best;
  double best_gap = kShapeBand;
  for (std::size_t s = 0; s < kNumShapes; ++s) {
    const double gap = std::abs(ratio - kFillRatio[s]);
    if (gap <= best_gap) {
      best_gap = gap;
      best = static_cast<ShapeKind>(s);
    }
  }
  return best;
}

/// Nearest of palette and background per pixel, then 4-connected components
/// of one color with at least kMinComponentPixels pixels.
inline Detection detect_objects(const Tensor<float>& image) {
  if (image.rank() != 3 || image.extent(0) != 3) {
    throw DimensionError("detect_objects needs a [3, H, W] image, got " + shape_string(image.shape()));
  }
  const std::size_t H = image.extent(1), W = image.extent(2), n = H * W;
  const auto px = image.data();
  std::vector<int> color(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int c = -1; c < static_cast<int>(kNumColors); ++c) {
      const Rgb8& ref = c < 0 ? kBackground : kPalette[static_cast<std::size_t>(c)];
      double d = 0;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double diff = static_cast<double>(px[ch * n + i]) - static_cast<double>(byte_to_value(ref[ch]));
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        color[i] = c;
      }
    }
  }

  Detection det;
  det.height = H;
  det.width = W;
  det.labels.assign(n, -1);
  std::vector<std::uint8_t> visited(n, 0);
  std::vector<std::size_t> stack, comp;
  for (std::size_t start = 0; start < n; ++start) {
    if (visited[start] || color[start] < 0) continue;
    const int c = color[start];
    comp.clear();
    stack.assign(1, start);
    visited[start] = 1;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      comp.push_back(i);
      const std::size_t y = i / W, x = i % W;
      const std::size_t nbr[4] = {y > 0 ? i - W : n, y + 1 < H ? i + W : n, x > 0 ? i - 1 : n, x + 1 < W ? i + 1 : n};
      for (const std::size_t j : nbr)
        if (j < n && !visited[j] && color[j] == c) {
          visited[j] = 1;
          stack.push_back(j);
        }
    }
    if (comp.size() < kMinComponentPixels) continue;
    std::size_t y0 = H, y1 = 0, x0 = W, x1 = 0;
    double sx = 0, sy = 0;
    for (const std::size_t i : comp) {
      const std::size_t y = i / W, x = i % W;
      y0 = std::min(y0, y), y1 = std::max(y1, y), x0 = std::min(x0, x), x1 = std::max(x1, x);
      sx += static_cast<double>(x) + 0.5;
      sy += static_cast<double>(y) + 0.5;
    }
    DetectedObject o;
    o.color = static_cast<std::size_t>(c);
    o.area = comp.size();
    o.cx = sx / static_cast<double>(o.area) / static_cast<double>(W);
    o.cy = sy / static_cast<double>(o.area) / static_cast<double>(H);
    o.fill_ratio = static_cast<double>(o.area) / static_cast<double>((y1 - y0 + 1) * (x1 - x0 + 1));
    o.shape = classify_fill_ratio(o.fill_ratio);
    const double unit = kUnitArea[static_cast<std::size_t>(o.shape.value_or(ShapeKind::kCircle))];
    o.radius = std::sqrt(static_cast<double>(o.area) / (unit * static_cast<double>(H * W)));
    const int index = static_cast<int>(det.objects.size());
    for (const std::size_t i : comp) det.labels[i] = index;
    det.objects.push_back(o);
  }
  return det;
}

// --- chi-square -----------------------------------------------------------------

inline double chi_square(const std::vector<double>& observed, const std::vector<double>& expected) {
  if (observed.size() != expected.size()) {
    throw UsageError("chi_square: " + std::to_string(observed.size()) + " observed vs " +
                     std::to_string(expected.size()) + " expected bins");
  }
  double stat = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    if (!(expected[i] > 0)) throw UsageError("chi_square: expected count of bin " + std::to_string(i) + " is not positive");
    const double d = observed[i] - expected[i];
    stat += d * d / expected[i];
  }
  return stat;
}

/// Upper `level` quantile of the chi-square distribution with `dof` degrees.
inline double chi_square_quantile(double level, std::size_t dof) {
  return boost::math::quantile(boost::math::chi_squared_distribution<double>(static_cast<double>(dof)), level);
}

inline constexpr std::size_t kCountBins = 4;  // <=1, 2, 3, >=4
inline constexpr std::size_t kSizeBins = 3;
inline constexpr std::size_t kColorPairs = kNumColors * (kNumColors + 1) / 2;

inline std::size_t size_bin(double radius) {
  const double t = (radius - kMinRadius) / (kMaxRadius - kMinRadius);
  return static_cast<std::size_t>(std::clamp(std::floor(t * kSizeBins), 0.0, double(kSizeBins - 1)));
}

inline std::size_t color_pair_index(std::size_t a, std::size_t b) {
  if (a > b) std::swap(a, b);
  // Row a of the upper triangle starts after a rows of decreasing length.
  return a * kNumColors - a * (a - 1) / 2 + (b - a);
}

/// Histograms of scene properties for a set of scenes.
struct SceneStatistics {
  std::vector<double> count = std::vector<double>(kCountBins, 0.0);
  std::vector<double> color = std::vector<double>(kNumColors, 0.0);
  std::vector<double> shape = std::vector<double>(kNumShapes, 0.0);
  std::vector<double> size = std::vector<double>(kSizeBins, 0.0);
  std::vector<double> cooccurrence = std::vector<double>(kColorPairs, 0.0);
  std::size_t scenes = 0;

  void add_scene(const std::vector<std::size_t>& colors, const std::vector<std::optional<ShapeKind>>& shapes,
                 const std::vector<double>& radii) {
    ++scenes;
    count[std::clamp<std::size_t>(colors.size(), 1, kCountBins) - 1] += 1;
    for (const std::size_t c : colors) color[c] += 1;
    for (const auto& s : shapes)
      if (s) shape[static_cast<std::size_t>(*s)] += 1;
    for (const double r : radii) size[size_bin(r)] += 1;
    for (std::size_t i = 0; i < colors.size(); ++i)
      for (std::size_t j = i + 1; j < colors.size(); ++j) cooccurrence[color_pair_index(colors[i], colors[j])] += 1;
  }

  void add(const Detection& d) {
    std::vector<std::size_t> colors;
    std::vector<std::optional<ShapeKind>> shapes;
    std::vector<double> radii;
    for (const auto& o : d.objects) {
      colors.push_back(o.color);
      shapes.push_back(o.shape);
      radii.push_back(o.radius);
    }
    add_scene(colors, shapes, radii);
  }

  void add(const SceneSpec& s) {
    std::vector<std::size_t> colors;
    std::vector<std::optional<ShapeKind>> shapes;
    std::vector<double> radii;
    for (const auto& o : s.objects) {
      colors.push_back(o.color);
      shapes.push_back(o.shape);
      radii.push_back(o.radius);
    }
    add_scene(colors, shapes, radii);
  }
};

/// Expected histograms under the generating distribution, conditioned on the
/// observed totals (scenes, objects, classified shapes, pairs).
inline SceneStatistics expected_statistics(const SceneStatistics& observed) {
  SceneStatistics e;
  e.scenes = observed.scenes;
  auto total = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s;
  };
  std::fill(e.count.begin(), e.count.end(), static_cast<double>(observed.scenes) / kCountBins);
  std::fill(e.color.begin(), e.color.end(), total(observed.color) / kNumColors);
  std::fill(e.shape.begin(), e.shape.end(), total(observed.shape) / kNumShapes);
  std::fill(e.size.begin(), e.size.end(), total(observed.size) / kSizeBins);
  const double pairs = total(observed.cooccurrence);
  for (std::size_t a = 0; a < kNumColors; ++a)
    for (std::size_t b = a; b < kNumColors; ++b)
      e.cooccurrence[color_pair_index(a, b)] = pairs * (a == b ? 1.0 : 2.0) / (kNumColors * kNumColors);
  return e;
}

struct ChiSquareReport {
  double count = 0, color = 0, shape = 0, size = 0, cooccurrence = 0;
};

inline ChiSquareReport chi_square_report(const SceneStatistics& observed) {
  const SceneStatistics e = expected_statistics(observed);
  auto safe = [](const std::vector<double>& o, const std::vector<double>& ex) {
    for (double v : ex)
      if (!(v > 0)) return std::numeric_limits<double>::quiet_NaN();  // nothing observed
    return chi_square(o, ex);
  };
  return {safe(observed.count, e.count), safe(observed.color, e.color), safe(observed.shape, e.shape),
          safe(observed.size, e.size), safe(observed.cooccurrence, e.cooccurrence)};
}

// --- embeddings and distribution metrics ----------------------------------------

struct EmbeddingSet {
  Eigen::MatrixXd rows;  // N x e
  std::uint64_t embedder_seed = 0;
};

/// Fixed random conv net: three 3x3 stride-2 convolutions (3->16->32->e)
/// with leaky ReLU, then global average pooling. Never trained.
class RandomEmbedder {
 public:
  explicit RandomEmbedder(std::uint64_t seed, std::size_t dims = 64) : seed_(seed), dims_(dims) {
    Rng rng(seed);
    const std::array<std::size_t, 4> ch{3, 16, 32, dims};
    for (std::size_t l = 0; l < 3; ++l) {
      Layer layer{ch[l], ch[l + 1], std::vector<double>(ch[l + 1] * ch[l] * 9)};
      const double std = std::sqrt(2.0 / static_cast<double>(ch[l] * 9));
      for (auto& w : layer.weights) w = std * rng.normal();
      layers_.push_back(std::move(layer));
    }
  }

  std::uint64_t seed() const { return seed_; }
  std::size_t dims() const { return dims_; }

  std::vector<double> embed(const Tensor<float>& image) const {
    if (image.rank() != 3 || image.extent(0) != 3) {
      throw DimensionError("embedder needs a [3, H, W] image, got " + shape_string(image.shape()));
    }
    std::size_t H = image.extent(1), W = image.extent(2);
    std::vector<double> x(image.data().begin(), image.data().end());
    for (const auto& layer : layers_) {
      const std::size_t Ho = (H + 1) / 2, Wo = (W + 1) / 2;
      std::vector<double> y(layer.out * Ho * Wo, 0.0);
      for (std::size_t o = 0; o < layer.out; ++o)
        for (std::size_t c = 0; c < layer.in; ++c) {
          const double* k = layer.weights.data() + (o * layer.in + c) * 9;
          const double* src = x.data() + c * H * W;
          double* dst = y.data() + o * Ho * Wo;
          for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              double acc = 0;
              for (long ky = -1; ky <= 1; ++ky) {
                const long sy = 2 * static_cast<long>(oy) + ky;
                if (sy < 0 || sy >= static_cast<long>(H)) continue;
                for (long kx = -1; kx <= 1; ++kx) {
                  const long sx = 2 * static_cast<long>(ox) + kx;
                  if (sx < 0 || sx >= static_cast<long>(W)) continue;
                  acc += k[(ky + 1) * 3 + (kx + 1)] * src[sy * static_cast<long>(W) + sx];
                }
              }
              dst[oy * Wo + ox] += acc;
            }
        }
      for (auto& v : y) v = v > 0 ? v : 0.2 * v;
      x = std::move(y);
      H = Ho;
      W = Wo;
    }
    std::vector<double> out(dims_, 0.0);
    for (std::size_t c = 0; c < dims_; ++c) {
      for (std::size_t i = 0; i < H * W; ++i) out[c] += x[c * H * W + i];
      out[c] /= static_cast<double>(H * W);
    }
    return out;
  }

  EmbeddingSet embed_all(const std::vector<Tensor<float>>& images) const {
    EmbeddingSet set{Eigen::MatrixXd(images.size(), dims_), seed_};
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto e = embed(images[i]);
      for (std::size_t c = 0; c < dims_; ++c) set.rows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = e[c];
    }
    return set;
  }

 private:
  struct Layer {
    std::size_t in, out;
    std::vector<double> weights;  // [out][in][3][3]
  };
  std::uint64_t seed_;
  std::size_t dims_;
  std::vector<Layer> layers_;
};

struct FrechetDiagnostics {
  double most_negative_eigenvalue = 0.0;
  bool clamped_beyond_tolerance = false;
};

namespace detail {

inline Eigen::MatrixXd covariance(const Eigen::MatrixXd& x, Eigen::VectorXd& mean) {
  mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - mean.transpose();
  return (centered.transpose() * centered) / static_cast<double>(x.rows() - 1);
}

inline Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& s) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (s + s.transpose()));
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

/// Tr((S2^1/2 S1 S2^1/2)^1/2) with eigenvalues clamped at 0.
inline double trace_sqrt_product(const Eigen::MatrixXd& s1, const Eigen::MatrixXd& s2, FrechetDiagnostics& diag) {
  const Eigen::MatrixXd r2 = symmetric_sqrt(s2);
  const Eigen::MatrixXd m = r2 * s1 * r2;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  const Eigen::VectorXd ev = eig.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  double tr = 0.0;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    diag.most_negative_eigenvalue = std::min(diag.most_negative_eigenvalue, ev[i]);
    if (ev[i] < -1e-6 * scale) diag.clamped_beyond_tolerance = true;
    tr += std::sqrt(std::max(ev[i], 0.0));
  }
  return tr;
}

}  // namespace detail

/// |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^1/2). The cross term is evaluated
/// in both argument orders and averaged, so the result is exactly symmetric.
inline double frechet_embed_distance(const EmbeddingSet& a, const EmbeddingSet& b,
                                     FrechetDiagnostics* diagnostics = nullptr) {
  if (a.embedder_seed != b.embedder_seed) throw UsageError("embedding sets come from different embedders");
  if (a.rows.cols() != b.rows.cols()) throw DimensionError("embedding sets differ in width");
  const auto e = static_cast<std::size_t>(a.rows.cols());
  if (static_cast<std::size_t>(a.rows.rows()) < e + 1 || static_cast<std::size_t>(b.rows.rows()) < e + 1) {
    throw UsageError("Frechet distance needs at least " + std::to_string(e + 1) + " rows per set");
  }
  Eigen::VectorXd ma, mb;
  const Eigen::MatrixXd sa = detail::covariance(a.rows, ma), sb = detail::covariance(b.rows, mb);
  FrechetDiagnostics diag;
  const double cross = 0.5 * (detail::trace_sqrt_product(sa, sb, diag) + detail::trace_sqrt_product(sb, sa, diag));
  if (diagnostics) *diagnostics = diag;
  const double value = (ma - mb).squaredNorm() + (sa.trace() + sb.trace()) - 2.0 * cross;
  return std::max(value, 0.0);
}

struct PrecisionRecall {
  double precision = 0, recall = 0;
};

namespace detail {

/// Fraction of `query` rows inside the union of k-NN balls of `support`.
inline double manifold_coverage(const Eigen::MatrixXd& support, const Eigen::MatrixXd& query, std::size_t k) {
  const Eigen::Index n = support.rows();
  std::vector<double> radius(static_cast<std::size_t>(n));
  std::vector<double> d(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) d[static_cast<std::size_t>(j)] = (support.row(i) - support.row(j)).squaredNorm();
    // d[i] = 0 is the point itself, so the k-th neighbour sits at rank k.
    std::nth_element(d.begin(), d.begin() + static_cast<long>(k), d.end());
    radius[static_cast<std::size_t>(i)] = d[k];
  }
  std::size_t inside = 0;
  for (Eigen::Index q = 0; q < query.rows(); ++q) {
    for (Eigen::Index i = 0; i < n; ++i)
      if ((query.row(q) - support.row(i)).squaredNorm() <= radius[static_cast<std::size_t>(i)]) {
        ++inside;
        break;
      }
  }
  return static_cast<double>(inside) / static_cast<double>(query.rows());
}

}  // namespace detail

inline PrecisionRecall knn_precision_recall(const EmbeddingSet& real, const EmbeddingSet& fake, std::size_t k = 3) {
  if (static_cast<std::size_t>(real.rows.rows()) < k + 1 || static_cast<std::size_t>(fake.rows.rows()) < k + 1) {
    throw UsageError("kNN precision/recall needs at least " + std::to_string(k + 1) + " points per set");
  }
  if (real.rows.cols() != fake.rows.cols()) throw DimensionError("embedding sets differ in width");
  return {detail::manifold_coverage(real.rows, fake.rows, k), detail::manifold_coverage(fake.rows, real.rows, k)};
}

// --- attention-map export -------------------------------------------------------

/// Fixed 16 colors for composites; latent j uses entry j mod 16.
inline constexpr std::array<Rgb8, 16> kSegmentPalette{{
    {230, 25, 75},   {60, 180, 75},   {255, 225, 25},  {0, 130, 200},  {245, 130, 48},  {145, 30, 180},
    {70, 240, 240},  {240, 50, 230},  {210, 245, 60},  {250, 190, 212}, {0, 128, 128},  {220, 190, 255},
    {170, 110, 40},  {255, 250, 200}, {128, 0, 0},     {170, 255, 195},
}};

/// One min-max scaled gray image per latent.
inline std::vector<std::vector<std::uint8_t>> latent_gray_maps(const AttentionMap& a) {
  std::vector<std::vector<std::uint8_t>> out;
  const std::size_t n = a.height * a.width;
  for (std::size_t j = 0; j < a.latents; ++j) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t i = 0; i < n; ++i) {
      lo = std::min(lo, a.weights[i * a.latents + j]);
      hi = std::max(hi, a.weights[i * a.latents + j]);
    }
    std::vector<std::uint8_t> g(n, 0);
    if (hi > lo)
      for (std::size_t i = 0; i < n; ++i)
        g[i] = static_cast<std::uint8_t>(std::lround(255.0 * (a.weights[i * a.latents + j] - lo) / (hi - lo)));
    out.push_back(std::move(g));
  }
  return out;
}

/// [3, H, W] image coloring each pixel by its argmax latent.
inline Tensor<float> segment_composite(const AttentionMap& a) {
  const auto seg = extract_attention_segments(a);
  const std::size_t n = a.height * a.width;
  std::vector<float> v(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const Rgb8& c = kSegmentPalette[seg.labels[i] % kSegmentPalette.size()];
    for (std::size_t ch = 0; ch < 3; ++ch) v[ch * n + i] = byte_to_value(c[ch]);
  }
  return Tensor<float>({3, a.height, a.width}, std::move(v));
}

/// attmaps/layer{L}_latent{j}.pgm and attmaps/layer{L}_composite.ppm
inline void export_attention_maps(const std::vector<std::pair<std::size_t, AttentionMap>>& layers,
                                  const std::filesystem::path& dir) {
  for (const auto& [level, map] : layers) {
    const auto gray = latent_gray_maps(map);
    for (std::size_t j = 0; j < gray.size(); ++j)
      save_pgm(gray[j], map.height, map.width,
               dir / ("layer" + std::to_string(level) + "_latent" + std::to_string(j) + ".pgm"));
    save_ppm(segment_composite(map), dir / ("layer" + std::to_string(level) + "_composite.ppm"));
  }
}

// --- per-image segmentation score -----------------------------------------------

/// Best attention-segment IoU for each shape class present in `det`, and
/// for the background.
struct SegmentScores {
  std::array<std::optional<double>, kNumShapes> shape;
  double background = 0;
};

inline SegmentScores segment_scores(const std::vector<AttentionMap>& layers, const Detection& det) {
  SegmentScores s;
  for (std::size_t k = 0; k < kNumShapes; ++k) {
    const auto mask = det.shape_mask(static_cast<ShapeKind>(k));
    if (std::find(mask.begin(), mask.end(), 1) == mask.end()) continue;
    s.shape[k] = attention_segment_iou(layers, mask, det.height, det.width);
  }
  s.background = attention_segment_iou(layers, det.background_mask(), det.height, det.width);
  return s;
}

/// Running means of segment scores over images.
struct IouSummary {
  std::array<double, kNumShapes> sum{};
  std::array<std::size_t, kNumShapes> seen{};
  double background_sum = 0;
  double object_sum = 0;  // per image: mean over its present shape classes
  std::size_t images = 0, images_with_objects = 0;

  void add(const SegmentScores& s) {
    ++images;
    background_sum += s.background;
    double img = 0;
    std::size_t present = 0;
    for (std::size_t k = 0; k < kNumShapes; ++k)
      if (s.shape[k]) {
        sum[k] += *s.shape[k];
        ++seen[k];
        img += *s.shape[k];
        ++present;
      }
    if (present) {
      object_sum += img / static_cast<double>(present);
      ++images_with_objects;
    }
  }
  double shape_mean(std::size_t k) const { return seen[k] ? sum[k] / static_cast<double>(seen[k]) : 0.0; }
  double background_mean() const { return images ? background_sum / static_cast<double>(images) : 0.0; }
  double object_mean() const {
    return images_with_objects ? object_sum / static_cast<double>(images_with_objects) : 0.0;
  }
};

}  // namespace ganformer
