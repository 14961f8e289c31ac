#include "tpamtl/model/parameters.hpp"

#include <cmath>

#include "tpamtl/diff/ops.hpp"
#include "tpamtl/model/config.hpp"

namespace tpamtl::model {

Tensor& ParameterSet::add(std::string name, Tensor tensor) {
  if (find(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  if (!tensor.requires_grad()) {
    tensor = Tensor::from(tensor.shape(), {tensor.values().begin(), tensor.values().end()}, true);
  }
  entries_.emplace_back(std::move(name), std::move(tensor));
  return entries_.back().second;
}

const Tensor& ParameterSet::get(std::string_view name) const {
  if (const Tensor* t = find(name)) return *t;
  throw ConfigError("no parameter named '" + std::string(name) + "'");
}

Tensor* ParameterSet::find(std::string_view name) {
  for (auto& [key, tensor] : entries_)
    if (key == name) return &tensor;
  return nullptr;
}

const Tensor* ParameterSet::find(std::string_view name) const {
  return const_cast<ParameterSet*>(this)->find(name);
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [key, tensor] : entries_) n += tensor.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& [key, tensor] : entries_) tensor.zero_grad();
}

Tensor ParameterSet::squared_norm() const {
  Tensor total = Tensor::scalar(0);
  for (const auto& [key, tensor] : entries_) total = diff::add(total, diff::sum_squares(tensor));
  return total;
}

std::vector<std::vector<Real>> ParameterSet::snapshot() const {
  std::vector<std::vector<Real>> out;
  out.reserve(entries_.size());
  for (const auto& [key, tensor] : entries_) out.emplace_back(tensor.values().begin(), tensor.values().end());
  return out;
}

void ParameterSet::restore(const std::vector<std::vector<Real>>& values) {
  if (values.size() != entries_.size()) throw ConfigError("snapshot does not match parameter set");
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto dst = entries_[i].second.mutable_values();
    if (dst.size() != values[i].size()) {
      throw ConfigError("snapshot size mismatch for parameter '" + entries_[i].first + "'");
    }
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

std::size_t ParameterSet::copy_values_from(const ParameterSet& other) {
  std::size_t copied = 0;
  for (auto& [name, tensor] : entries_) {
    const Tensor* src = other.find(name);
    if (!src) continue;
    if (src->shape() != tensor.shape()) {
      throw ConfigError("parameter '" + name + "' has shape " + diff::to_string(src->shape()) +
                        " in the source but " + diff::to_string(tensor.shape()) + " here");
    }
    std::copy(src->values().begin(), src->values().end(), tensor.mutable_values().begin());
    ++copied;
  }
  return copied;
}

Tensor Initializer::fan_in_uniform(std::string_view name, std::size_t rows, std::size_t cols) const {
  return uniform(name, rows, cols, rows);
}

Tensor Initializer::uniform(std::string_view name, std::size_t rows, std::size_t cols,
                            std::size_t fan_in) const {
  const Tensor flat = fan_in_bias(name, fan_in, rows * cols);
  return Tensor::from({rows, cols}, {flat.values().begin(), flat.values().end()}, true);
}

Tensor Initializer::fan_in_bias(std::string_view name, std::size_t fan_in, std::size_t cols) const {
  diff::RngStream rng = root_.substream(name);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<Real> values(cols);
  for (auto& v : values) v = static_cast<Real>((2.0 * rng.uniform() - 1.0) * bound);
  return Tensor::from({1, cols}, std::move(values), true);
}

Tensor Initializer::constant(std::size_t rows, std::size_t cols, Real value) const {
  return Tensor::full({rows, cols}, value, true);
}

Tensor Dense::apply(const Tensor& x) const { return diff::add_row(diff::matmul(x, weight), bias); }

Dense Dense::create(ParameterSet& params, const Initializer& init, const std::string& name,
                    std::size_t in, std::size_t out) {
  Dense layer;
  layer.weight = params.add(name + ".W", init.fan_in_uniform(name + ".W", in, out));
  layer.bias = params.add(name + ".b", init.fan_in_bias(name + ".b", in, out));
  return layer;
}

}  // namespace tpamtl::model
