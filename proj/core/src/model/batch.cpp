#include "tpamtl/model/batch.hpp"

#include <algorithm>
#include <numeric>

#include "tpamtl/diff/tensor.hpp"

namespace tpamtl::model {

std::vector<Real> EpisodeBatch::task_labels(std::size_t d) const {
  if (d >= num_tasks) throw diff::DimensionError("task index " + std::to_string(d) + " out of range");
  std::vector<Real> out(batch);
  for (std::size_t b = 0; b < batch; ++b) out[b] = labels[b * num_tasks + d];
  return out;
}

std::vector<Real> EpisodeBatch::task_mask(std::size_t d) const {
  if (d >= num_tasks) throw diff::DimensionError("task index " + std::to_string(d) + " out of range");
  std::vector<Real> out(batch);
  for (std::size_t b = 0; b < batch; ++b) out[b] = label_mask[b * num_tasks + d];
  return out;
}

std::size_t EpisodeBatch::labelled_count(std::size_t d) const {
  std::size_t n = 0;
  for (std::size_t b = 0; b < batch; ++b) n += label_mask[b * num_tasks + d] != 0;
  return n;
}

Tensor EpisodeBatch::time_weights() const {
  std::vector<Real> w(timesteps * batch, Real(0));
  for (std::size_t t = 0; t < timesteps; ++t)
    for (std::size_t b = 0; b < batch; ++b)
      if (step_mask[t * batch + b] != 0) w[t * batch + b] = Real(1) / static_cast<Real>(lengths[b]);
  return Tensor::from({timesteps * batch, 1}, std::move(w));
}

bool EpisodeBatch::all_steps_valid() const {
  return std::all_of(step_mask.begin(), step_mask.end(), [](Real m) { return m != 0; });
}

void check_episode(const Episode& e, std::size_t num_features, std::size_t num_tasks) {
  if (e.length == 0) throw diff::DimensionError("episode '" + e.id + "' has no timesteps");
  if (e.features.size() != e.length * num_features) {
    throw diff::DimensionError("episode '" + e.id + "' has " + std::to_string(e.features.size()) +
                               " feature values, expected " + std::to_string(e.length) + "x" +
                               std::to_string(num_features));
  }
  if (e.labels.size() != num_tasks || e.mask.size() != num_tasks) {
    throw diff::DimensionError("episode '" + e.id + "' has label/mask sizes " +
                               std::to_string(e.labels.size()) + "/" + std::to_string(e.mask.size()) +
                               ", expected " + std::to_string(num_tasks));
  }
}

EpisodeBatch make_batch(std::span<const Episode> episodes, std::span<const std::size_t> indices,
                        std::size_t timesteps) {
  if (indices.empty()) throw diff::DimensionError("make_batch: empty selection");
  const Episode& first = episodes[indices.front()];
  EpisodeBatch out;
  out.batch = indices.size();
  out.num_tasks = first.labels.size();
  out.num_features = first.length ? first.features.size() / first.length : 0;
  std::size_t longest = 0;
  for (std::size_t i : indices) {
    if (i >= episodes.size()) throw diff::DimensionError("make_batch: index out of range");
    check_episode(episodes[i], out.num_features, out.num_tasks);
    longest = std::max(longest, episodes[i].length);
  }
  if (timesteps == 0) timesteps = longest;
  if (timesteps < longest) {
    throw diff::DimensionError("make_batch: padding length " + std::to_string(timesteps) +
                               " shorter than episode length " + std::to_string(longest));
  }
  out.timesteps = timesteps;
  const std::size_t B = out.batch, m = out.num_features, D = out.num_tasks;
  std::vector<Real> x(timesteps * B * m, Real(0));
  out.step_mask.assign(timesteps * B, Real(0));
  out.labels.resize(B * D);
  out.label_mask.resize(B * D);
  for (std::size_t b = 0; b < B; ++b) {
    const Episode& e = episodes[indices[b]];
    out.ids.push_back(e.id);
    out.lengths.push_back(e.length);
    for (std::size_t t = 0; t < e.length; ++t) {
      std::copy_n(e.features.begin() + static_cast<std::ptrdiff_t>(t * m), m,
                  x.begin() + static_cast<std::ptrdiff_t>((t * B + b) * m));
      out.step_mask[t * B + b] = 1;
    }
    std::copy(e.labels.begin(), e.labels.end(), out.labels.begin() + static_cast<std::ptrdiff_t>(b * D));
    std::copy(e.mask.begin(), e.mask.end(), out.label_mask.begin() + static_cast<std::ptrdiff_t>(b * D));
  }
  out.inputs = Tensor::from({timesteps * B, m}, std::move(x));
  return out;
}

EpisodeBatch make_batch(std::span<const Episode> episodes) {
  std::vector<std::size_t> all(episodes.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return make_batch(episodes, all);
}

}  // namespace tpamtl::model
