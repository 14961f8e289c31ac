#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tpamtl/model/batch.hpp"

namespace tpamtl::data {

using model::Episode;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Task `target`'s label is driven by an event in task `source`'s channel
// `lag` steps earlier.
struct LagLink {
  std::size_t source = 0;
  std::size_t target = 0;
  std::size_t lag = 0;
  bool operator==(const LagLink&) const = default;
};

struct SyntheticSpec {
  std::size_t num_tasks = 5;
  std::size_t timesteps = 1;
  std::size_t num_features = 8;
  // Imbalanced generator: instances per task (disjoint sets).
  // Temporal generator: only the first entry is used, as the instance count.
  std::vector<std::size_t> task_counts{5000, 5000, 1000, 1000, 500};
  std::vector<double> label_noise;  // flip probability per task; empty = 0
  std::vector<LagLink> links;       // temporal generator
  std::uint64_t seed = 1;

  double train_fraction = 0.6;
  double valid_fraction = 0.2;

  // Imbalanced generator knobs.
  std::size_t latent_dims = 4;
  // Tasks in one group share a base rule; must have num_tasks entries.
  std::vector<std::size_t> task_groups{0, 1, 0, 1, 2};
  double feature_noise = 0.1;
  double task_perturbation = 0.3;
  double nonlinear_weight = 1.0;

  // Temporal generator knobs.
  double source_amplitude = 1.0;
  double target_amplitude = 0.6;
  double channel_noise = 0.15;
  std::vector<double> label_rates;  // probability a task's label is observed; empty = 1

  void validate_imbalanced() const;
  void validate_temporal() const;
};

void to_json(nlohmann::json& j, const SyntheticSpec& spec);
void from_json(const nlohmann::json& j, SyntheticSpec& spec);

struct DatasetSplit {
  std::size_t num_tasks = 0;
  std::size_t num_features = 0;
  std::size_t timesteps = 0;
  std::vector<Episode> train, valid, test;
  double train_fraction = 0, valid_fraction = 0;
  std::uint64_t seed = 0;
  std::vector<LagLink> ground_truth;
  // Noise-free score of the generating rule per instance id and task.
  std::map<std::string, std::vector<double>> rule_scores;
  nlohmann::json source = nlohmann::json::object();

  std::vector<Episode>& split(const std::string& name);
  const std::vector<Episode>& split(const std::string& name) const;
};

DatasetSplit generate_imbalanced_tasks(const SyntheticSpec& spec);
DatasetSplit generate_temporal_tasks(const SyntheticSpec& spec);

// Scores each task from an episode's features with the temporal generating
// rule: spike positions are read off as the argmax of each task's channel.
std::vector<double> temporal_rule_scores(const SyntheticSpec& spec, const Episode& episode);

// ---- CSV -------------------------------------------------------------------

inline constexpr const char* kCsvTag = "# tpamtl-episodes v1";

struct IngestReport {
  std::size_t total_lines = 0;
  std::size_t header_lines = 0;
  std::size_t comment_lines = 0;
  std::size_t blank_lines = 0;
  std::size_t data_rows = 0;
  std::size_t instances = 0;
  std::size_t imputed_cells = 0;

  bool balanced() const { return header_lines + comment_lines + blank_lines + data_rows == total_lines; }
};

struct CsvData {
  std::size_t num_features = 0;
  std::size_t num_tasks = 0;
  std::vector<Episode> episodes;
  IngestReport report;
};

CsvData read_episodes_csv(const std::filesystem::path& path);
void write_episodes_csv(const std::filesystem::path& path, const std::vector<Episode>& episodes,
                        std::size_t num_features, std::size_t num_tasks);

// Reads train/valid/test CSVs listed in a manifest, or a single CSV that is
// then split by `fractions` with `seed`.
DatasetSplit ingest_csv(const std::filesystem::path& path, double train_fraction = 0.6,
                        double valid_fraction = 0.2, std::uint64_t seed = 1);

// Writes <dir>/{train,valid,test}.csv and <dir>/manifest.json.
void write_dataset(const std::filesystem::path& dir, const DatasetSplit& split);
DatasetSplit read_dataset(const std::filesystem::path& dir);
nlohmann::json manifest(const DatasetSplit& split);

}  // namespace tpamtl::data
