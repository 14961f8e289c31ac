#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tpamtl/transfer/transfer.hpp"

namespace tpamtl::eval {

class UndefinedMetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Probability that a random positive scores above a random negative, ties
// counting one half. Labels are 0/1. Throws UndefinedMetricError unless both
// classes are present.
double auroc(const std::vector<double>& scores, const std::vector<double>& labels);

// Per-task AUROC over labelled instances. probabilities: [D][B]; labels and
// mask: B x D row-major. Tasks without both classes get NaN.
std::vector<double> task_aurocs(const std::vector<std::vector<double>>& probabilities,
                                const std::vector<double>& labels, const std::vector<double>& mask,
                                std::size_t num_tasks);
// Mean over the defined entries; throws if none is defined.
double macro(const std::vector<double>& per_task);

// ---- aggregation ---------------------------------------------------------------

// Test AUROC of one run: one value per task.
struct RunScores {
  std::string variant;
  std::string run;
  std::vector<double> task_auroc;
};

struct Cell {
  double mean = 0;
  double se = 0;  // sample standard deviation / sqrt(runs)
  std::size_t runs = 0;
};

struct ResultRow {
  std::string variant;
  std::vector<Cell> tasks;
  Cell macro;  // per-run task average, then averaged over runs
};

struct ResultTable {
  std::vector<std::string> task_names;
  std::vector<ResultRow> rows;  // sorted by variant name

  const ResultRow& row(const std::string& variant) const;
  std::string to_text() const;
  nlohmann::json to_json() const;
};

Cell summarize(std::vector<double> values);

// Requires at least `min_runs` runs for every variant and the same task count
// everywhere; throws std::invalid_argument naming what is missing.
ResultTable aggregate(const std::vector<RunScores>& runs, std::vector<std::string> task_names = {},
                      std::size_t min_runs = 2);

// ---- negative transfer -------------------------------------------------------

struct TransferFlag {
  std::string variant;
  std::size_t task = 0;
  double stl = 0;
  double value = 0;
  // stl - value exceeds the standard error of the difference.
  bool beyond_stderr = false;
};

struct NegativeTransferReport {
  std::vector<TransferFlag> flags;
  std::map<std::string, std::size_t> counts;            // all flags per variant
  std::map<std::string, std::size_t> counts_beyond_se;  // flags beyond one standard error

  std::string to_text(const std::vector<std::string>& task_names = {}) const;
};

// Flags every (variant, task) whose mean AUROC is strictly below the STL
// row's. Throws std::invalid_argument when task counts differ.
NegativeTransferReport negative_transfer_report(const ResultRow& stl, const std::vector<ResultRow>& others);

// ---- rank correlation --------------------------------------------------------

struct Correlation {
  double rho = 0;
  double p_value = 1;  // two-sided, Student t approximation with n - 2 dof
  std::size_t n = 0;
};

// Spearman correlation with average ranks for ties. Throws
// UndefinedMetricError for constant input or fewer than 3 points.
Correlation spearman(const std::vector<double>& x, const std::vector<double>& y);

// Per (task, step) summaries over a set of instance graphs.
struct UncertaintyTrace {
  std::size_t tasks = 0;
  std::size_t timesteps = 0;
  std::vector<double> variance;  // [task][step], epistemic + aleatoric
  std::vector<double> outgoing;  // [task][step], normalized outgoing transfer averaged over targets
  std::vector<double> incoming;  // [task][step], normalized incoming transfer averaged over sources
};

// Graphs must share (tasks, timesteps). `allowed(source, target)` selects the
// task pairs that may transfer at all.
UncertaintyTrace uncertainty_trace(const std::vector<transfer::TransferGraph>& graphs,
                                   const std::vector<std::vector<bool>>& allowed);

struct CorrelationReport {
  Correlation outgoing;  // source variance vs normalized outgoing transfer
  Correlation incoming;  // target variance vs normalized incoming transfer
};

// Pools every (task, step) point of every trace. Needs at least 20 points.
CorrelationReport uncertainty_transfer_correlation(const std::vector<UncertaintyTrace>& traces);

// Element-wise mean of graphs with identical shape.
transfer::TransferGraph mean_graph(const std::vector<transfer::TransferGraph>& graphs);

// ---- export ------------------------------------------------------------------

inline constexpr const char* kGraphHeader =
    "source_task,target_task,source_t,target_t,alpha,source_epistemic_var,source_aleatoric_var,"
    "target_epistemic_var,target_aleatoric_var";

// Writes one record per (source, target, source step, target step). An empty
// graph writes the header and a comment line carrying `note`.
void write_graph_csv(const std::filesystem::path& path, const transfer::TransferGraph& graph,
                     const std::string& note = "");
transfer::TransferGraph read_graph_csv(const std::filesystem::path& path);

}  // namespace tpamtl::eval
