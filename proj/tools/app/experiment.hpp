#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tpamtl/data/data.hpp"
#include "tpamtl/model/config.hpp"
#include "tpamtl/train/train.hpp"
#include "tpamtl/variants/variants.hpp"

namespace tpamtl::app {

namespace fs = std::filesystem;

struct DatasetSection {
  // Exactly one source: a generator spec, a CSV file or a dataset directory.
  std::string generator;  // "imbalanced" or "temporal" when synthetic
  std::optional<data::SyntheticSpec> synthetic;
  std::optional<fs::path> csv;
  std::optional<fs::path> path;
  double train_fraction = 0.6;
  double valid_fraction = 0.2;
  std::uint64_t split_seed = 1;
};

struct EvalSection {
  std::size_t runs = 5;  // seeds per (variant, cell); tables need at least 2
  std::optional<fs::path> output_dir;
  std::size_t graph_instances = 3;  // test instances exported per transfer run
  std::size_t workers = 1;
  bool grid_search = false;  // search train.grid instead of using train.* directly
};

struct ExperimentConfig {
  DatasetSection dataset;
  model::ModelConfig model;  // num_tasks / num_features come from the data
  std::vector<variants::VariantSpec> variants;
  train::TrainConfig train;
  EvalSection eval;
  nlohmann::json source = nlohmann::json::object();  // as loaded, after overrides
};

// Parses and fully validates; every problem is a model::ConfigError naming
// the offending key.
ExperimentConfig parse_experiment(const nlohmann::json& j);
ExperimentConfig load_experiment(const fs::path& path, const std::vector<std::string>& overrides = {});

// Applies "a.b.c=value" to a JSON document. The value is parsed as JSON when
// possible and taken as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// Output directory: explicit, else eval.output_dir, else
// $TPAMTL_OUTPUT_ROOT/<stem> (or ./runs/<stem>).
fs::path resolve_output(const std::optional<fs::path>& explicit_dir, const ExperimentConfig& config,
                        const std::string& stem);

// Loads or materializes the dataset. Synthetic data is generated into
// <out>/dataset unless an identical one is already there.
data::DatasetSplit prepare_dataset(const ExperimentConfig& config, const fs::path& out);

}  // namespace tpamtl::app
