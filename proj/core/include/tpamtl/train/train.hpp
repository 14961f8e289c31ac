#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tpamtl/data/data.hpp"
#include "tpamtl/model/network.hpp"

namespace tpamtl::train {

using model::ModelConfig;
using model::MultiTaskModel;
using model::ParameterSet;

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First and second moments per parameter, in parameter-set order.
struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<double>> m, v;
};

// One bias-corrected Adam update on a flat buffer. Throws NonFiniteError on a
// NaN or infinite gradient before touching anything.
void adam_update(std::span<Real> values, std::span<const Real> grads, std::vector<double>& m,
                 std::vector<double>& v, std::size_t step, const AdamOptions& opt);

// Updates every parameter from its accumulated gradient. Parameters without a
// gradient count as zero-gradient.
void adam_step(ParameterSet& params, AdamState& state, const AdamOptions& opt);

// Search space; the defaults are the full ranges.
struct Grid {
  std::vector<std::size_t> hidden_size{8, 16, 32, 64};
  std::vector<std::size_t> embed_layers{2, 3, 6};
  std::vector<std::size_t> batch_size{32, 64, 128, 256};
  std::vector<double> learning_rate{0.01, 0.001, 0.0001};
  std::vector<double> l2{0.02, 0.002, 0.0002};
  std::vector<double> dropout_rate{0.1, 0.2, 0.3, 0.4, 0.5};

  std::size_t size() const;
};

struct GridCell {
  std::size_t hidden_size = 16;
  std::size_t embed_layers = 2;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  double l2 = 2e-4;
  double dropout_rate = 0.1;

  // Canonical text key, e.g. "h16_l2_b64_lr0.001_wd0.0002_p0.1".
  std::string key() const;
  bool operator==(const GridCell&) const = default;
};

// Sorted, duplicate-free enumeration of the grid.
std::vector<GridCell> enumerate(const Grid& grid);

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 64;
  std::size_t max_iterations = 100000;
  std::size_t max_epochs = 200;
  double l2 = 2e-4;
  double dropout_rate = 0.1;
  std::size_t patience = 10;  // epochs without validation improvement
  std::size_t eval_batch_size = 512;
  Grid grid;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};

  void validate() const;
  // Copies the cell's values into this config and the model config.
  void apply(const GridCell& cell, ModelConfig& model);
};

void to_json(nlohmann::json& j, const Grid& g);
void from_json(const nlohmann::json& j, Grid& g);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct RunRecord {
  nlohmann::json variant = nlohmann::json::object();
  ModelConfig config;
  TrainConfig train;
  std::uint64_t seed = 0;
  std::vector<std::size_t> epochs;  // 1-based epoch index per trace entry
  std::vector<double> train_loss;   // mean masked loss per labelled label
  std::vector<double> valid_auroc;  // macro validation AUROC after each epoch
  std::size_t best_epoch = 0;
  double best_valid_auroc = 0;
  std::vector<double> valid_task_auroc;  // at the restored checkpoint
  std::vector<double> test_auroc;        // per task; NaN (null in JSON) when undefined
  std::size_t iterations = 0;
  std::string stop_reason;
  double wall_seconds = 0;
  std::string checkpoint;

  double test_macro() const;
  // Trace equality, ignoring wall-clock time and the checkpoint path.
  bool same_trace(const RunRecord& other) const;
};

void to_json(nlohmann::json& j, const RunRecord& r);
void from_json(const nlohmann::json& j, RunRecord& r);

// Per-task AUROC of the model on episodes, predicted in chunks.
std::vector<double> evaluate(MultiTaskModel& model, const std::vector<data::Episode>& episodes,
                             std::size_t chunk, std::uint64_t seed);

// Mini-batch training with early stopping on validation macro-AUROC. The
// model ends holding its best-validation parameters. On a non-finite loss or
// gradient the best parameters are restored and NonFiniteError is thrown.
RunRecord fit(MultiTaskModel& model, const data::DatasetSplit& split, const TrainConfig& config,
              std::uint64_t seed);

// Sorted into tie-break order (hidden size, learning rate, then the rest) and
// de-duplicated.
std::vector<GridCell> canonical_cells(std::vector<GridCell> cells);
// Index of the best mean score for cells in canonical order; NaN marks a cell
// without successful runs. Empty when every score is NaN.
std::optional<std::size_t> select_cell(const std::vector<double>& scores);

using ModelFactory = std::function<std::unique_ptr<MultiTaskModel>(const ModelConfig&, std::uint64_t seed)>;

struct GridRun {
  GridCell cell;
  std::uint64_t seed = 0;
  RunRecord record;
  std::string error;  // set when the run failed
};

struct GridResult {
  GridCell best;
  double best_score = 0;
  std::vector<GridRun> runs;  // cell-major in canonical order, then seeds
};

// Trains every (cell, seed) with up to `workers` threads and picks the cell
// with the highest mean best-validation macro AUROC. Ties go to the smaller
// hidden size, then the smaller learning rate, then the canonical key.
GridResult grid_search(const ModelFactory& factory, const ModelConfig& base, const TrainConfig& config,
                       const std::vector<GridCell>& cells, const data::DatasetSplit& split,
                       const std::vector<std::uint64_t>& seeds, std::size_t workers = 1);

}  // namespace tpamtl::train
