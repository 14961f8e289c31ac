#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "experiment.hpp"
#include "tpamtl/eval/eval.hpp"

namespace tpamtl::app {

// One (variant, grid cell, seed) unit of work.
struct CellId {
  std::string variant;
  train::GridCell cell;
  std::uint64_t seed = 0;

  // "<variant>/<cell key>/seed<s>", also the cell's directory under runs/.
  std::string key() const;
};

// The grid cells a config asks for, in canonical order.
std::vector<train::GridCell> experiment_cells(const ExperimentConfig& config);
// Every cell of the experiment: variants in config order, then cells, then
// the first eval.runs seeds.
std::vector<CellId> experiment_plan(const ExperimentConfig& config);

struct RunSummary {
  std::size_t executed = 0;
  std::size_t skipped = 0;  // already complete from an earlier invocation
  std::vector<std::string> failed;  // "key: error"
  eval::ResultTable table;
  bool table_ready = false;
};

// Generates or loads the dataset and writes <out>/dataset when synthetic.
data::DatasetSplit generate_command(const ExperimentConfig& config, const fs::path& out, std::ostream& log);

// Trains every pending cell, then writes results.json / results.txt and the
// negative-transfer report. Completed cells (listed in completed.json with a
// record on disk) are not recomputed.
RunSummary run_command(const ExperimentConfig& config, const fs::path& out, std::ostream& log);

struct AnalyzeSummary {
  eval::ResultTable table;
  std::vector<std::string> missing;  // cell keys without a record
  std::size_t graphs_written = 0;
  nlohmann::json correlation = nlohmann::json::object();
};

// Rebuilds the result table from the records under <out>, exports transfer
// graphs for the first `instances` test instances of each selected run and
// writes the uncertainty/transfer correlation. Throws when cells are missing.
AnalyzeSummary analyze_command(const fs::path& out, std::size_t instances, std::ostream& log);

// Human-readable summary of a checkpoint file.
void inspect_checkpoint_command(const fs::path& path, std::ostream& out);

// Best cell per variant from records on disk (mean best validation AUROC
// over seeds, canonical tie-break).
struct Selection {
  std::string variant;
  train::GridCell cell;
  double score = 0;
  std::vector<train::RunRecord> records;  // one per seed, plan order
};
std::vector<Selection> select_cells(const ExperimentConfig& config, const fs::path& out,
                                    std::vector<std::string>* missing = nullptr);

// Stored copy of the resolved config under an output directory.
void save_experiment(const ExperimentConfig& config, const fs::path& out);
ExperimentConfig load_saved_experiment(const fs::path& out);

std::vector<std::string> task_names(std::size_t tasks);

}  // namespace tpamtl::app
