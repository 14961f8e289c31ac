#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tpamtl/diff/rng.hpp"
#include "tpamtl/diff/tensor.hpp"

namespace tpamtl::model {

using diff::Tensor;

// Ordered collection of named trainable tensors. Order is insertion order and
// is stable, which fixes optimizer state layout and checkpoint layout.
class ParameterSet {
 public:
  using Entry = std::pair<std::string, Tensor>;

  Tensor& add(std::string name, Tensor tensor);
  const Tensor& get(std::string_view name) const;
  Tensor* find(std::string_view name);
  const Tensor* find(std::string_view name) const;

  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad();
  // Sum of squared entries of every parameter, differentiable.
  Tensor squared_norm() const;

  std::vector<std::vector<Real>> snapshot() const;
  void restore(const std::vector<std::vector<Real>>& values);
  // Copies values for every name present in both sets; returns names copied.
  std::size_t copy_values_from(const ParameterSet& other);

 private:
  std::vector<Entry> entries_;
};

// Draws every parameter from its own named substream, so adding a parameter
// never changes the initial values of the others.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : root_(seed, 0x1A17) {}

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), fan_in = rows.
  Tensor fan_in_uniform(std::string_view name, std::size_t rows, std::size_t cols) const;
  // Bound taken from an explicit fan-in, for weights that are blocks of a
  // wider layer.
  Tensor uniform(std::string_view name, std::size_t rows, std::size_t cols, std::size_t fan_in) const;
  // Same bound as the weight it accompanies.
  Tensor fan_in_bias(std::string_view name, std::size_t fan_in, std::size_t cols) const;
  Tensor constant(std::size_t rows, std::size_t cols, Real value) const;

 private:
  diff::RngStream root_;
};

// Affine map x W + b.
struct Dense {
  Tensor weight;
  Tensor bias;

  Tensor apply(const Tensor& x) const;

  static Dense create(ParameterSet& params, const Initializer& init, const std::string& name,
                      std::size_t in, std::size_t out);
};

}  // namespace tpamtl::model
