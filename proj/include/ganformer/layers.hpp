#pragma once

// Parameterized building blocks with equalized-learning-rate weights: the
// stored weights have unit variance and the init scale gain/sqrt(fan_in) is
// applied at forward time.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "ganformer/rng.hpp"
#include "ganformer/tensor.hpp"

namespace ganformer {

inline constexpr double kLeakyGain = std::numbers::sqrt2;

/// Unit-variance uniform draws, U(-sqrt(3), sqrt(3)).
template <typename T>
Tensor<T> unit_uniform_parameter(Shape shape, Rng& rng) {
  std::vector<T> values(shape_size(shape));
  const double bound = std::sqrt(3.0);
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::parameter(std::move(shape), std::move(values));
}

template <typename T>
Tensor<T> constant_parameter(Shape shape, T value) {
  return Tensor<T>::parameter(shape, std::vector<T>(shape_size(shape), value));
}

/// y = multiplier * x W^T + b over the last axis.
template <typename T>
struct Affine {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]
  T multiplier = T(1);

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias, multiplier); }
  std::size_t in_dim() const { return weight.extent(1); }
  std::size_t out_dim() const { return weight.extent(0); }
};

template <typename T>
Affine<T> make_affine(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0, T bias_init = T(0)) {
  Affine<T> a;
  a.weight = unit_uniform_parameter<T>({out, in}, rng);
  a.bias = constant_parameter<T>({out}, bias_init);
  a.multiplier = static_cast<T>(gain / std::sqrt(static_cast<double>(in)));
  return a;
}

/// Same-size convolution with an odd square kernel.
template <typename T>
struct Conv {
  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;    // [out]
  T multiplier = T(1);

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, multiplier); }
  std::size_t in_channels() const { return weight.extent(1); }
  std::size_t out_channels() const { return weight.extent(0); }
};

template <typename T>
Conv<T> make_conv(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng, double gain = kLeakyGain) {
  Conv<T> c;
  c.weight = unit_uniform_parameter<T>({out, in, kernel, kernel}, rng);
  c.bias = constant_parameter<T>({out}, T(0));
  c.multiplier = static_cast<T>(gain / std::sqrt(static_cast<double>(in * kernel * kernel)));
  return c;
}

/// Ordered (name, tensor) registry used for optimizers and checkpoints.
template <typename T>
class ParamList {
 public:
  void add(std::string name, Tensor<T>& tensor) { entries_.push_back({std::move(name), &tensor}); }
  void add(const std::string& prefix, Affine<T>& a) {
    add(prefix + ".weight", a.weight);
    add(prefix + ".bias", a.bias);
  }
  void add(const std::string& prefix, Conv<T>& c) {
    add(prefix + ".weight", c.weight);
    add(prefix + ".bias", c.bias);
  }

  struct Entry {
    std::string name;
    Tensor<T>* tensor;
  };
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor->size();
    return n;
  }

  void set_requires_grad(bool flag) const {
    for (const auto& e : entries_) e.tensor->set_requires_grad(flag);
  }

 private:
  std::vector<Entry> entries_;
};

}  // namespace ganformer
