#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tpamtl/model/config.hpp"
#include "tpamtl/model/network.hpp"

namespace tpamtl::model {

inline constexpr const char* kCheckpointFormat = "tpamtl-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct StoredParameter {
  std::string name;
  diff::Shape shape;
  std::vector<Real> values;
};

struct Checkpoint {
  std::string family;
  ModelConfig config;
  nlohmann::json variant = nlohmann::json::object();
  nlohmann::json extra = nlohmann::json::object();
  std::vector<StoredParameter> parameters;
};

// `variant` is an opaque description of how the model was built; the caller
// uses it to rebuild an identical model before apply_checkpoint.
Checkpoint make_checkpoint(const MultiTaskModel& model, const nlohmann::json& variant);
nlohmann::json to_json(const Checkpoint& checkpoint);
Checkpoint checkpoint_from_json(const nlohmann::json& j);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies stored values into the model. The parameter names and shapes must
// match exactly in both directions.
void apply_checkpoint(const Checkpoint& checkpoint, MultiTaskModel& model);

}  // namespace tpamtl::model
