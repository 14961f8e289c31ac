#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "tpamtl/diff/tensor.hpp"

namespace tpamtl::model {

using diff::Tensor;

// One multi-task time series. Features are row-major [length x m]; labels and
// mask hold one entry per task, mask 0 meaning the label is absent.
struct Episode {
  std::string id;
  std::size_t length = 0;
  std::vector<Real> features;
  std::vector<Real> labels;
  std::vector<Real> mask;
};

// Padded, time-major batch: row t*batch + b of `inputs` is step t of instance
// b. Steps at or beyond an instance's length are zero rows with step_mask 0.
struct EpisodeBatch {
  std::size_t batch = 0;
  std::size_t timesteps = 0;
  std::size_t num_features = 0;
  std::size_t num_tasks = 0;
  Tensor inputs;                    // [T*B x m]
  std::vector<Real> labels;         // [B x D], b*D + d
  std::vector<Real> label_mask;     // [B x D]
  std::vector<std::size_t> lengths; // B
  std::vector<Real> step_mask;      // [T*B]
  std::vector<std::string> ids;     // B

  std::vector<Real> task_labels(std::size_t d) const;
  std::vector<Real> task_mask(std::size_t d) const;
  std::size_t labelled_count(std::size_t d) const;
  // mask / length per row, so a block sum over steps is the per-instance mean.
  Tensor time_weights() const;
  bool all_steps_valid() const;
};

// Gathers episodes[indices] into a batch padded to the longest selected
// episode (or to `timesteps` when nonzero, which must cover every length).
EpisodeBatch make_batch(std::span<const Episode> episodes, std::span<const std::size_t> indices,
                        std::size_t timesteps = 0);
EpisodeBatch make_batch(std::span<const Episode> episodes);

// Validates that an episode matches (m, D) and has consistent sizes.
void check_episode(const Episode& e, std::size_t num_features, std::size_t num_tasks);

}  // namespace tpamtl::model
