#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "tpamtl/diff/tensor.hpp"

namespace tpamtl::model {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class UncertaintyMode { both, epistemic, aleatoric, none };

// Which (source task, source step) pairs may feed task d at step t:
//   full           all tasks, steps i <= t
//   intratask      task d only, steps i <= t
//   samestep       tasks j != d, step i == t
//   none           nothing; C_d = f_d
//   unconstrained  all tasks, every step
enum class TransferMode { full, intratask, samestep, none, unconstrained };

// Inputs of the transfer-weight network F.
enum class GateInput {
  uncertainty,    // features and their variances
  features_only,  // deterministic variant
  task_loss,      // running mean task losses, static over time
};

enum class MuActivation { leaky_relu, sigmoid };

enum class AlphaNormalization { sigmoid, softmax };

struct ModelConfig {
  std::size_t num_tasks = 1;
  std::size_t num_features = 1;
  std::size_t hidden_size = 16;
  std::size_t embed_layers = 2;
  Real dropout_rate = Real(0.1);
  std::size_t mc_samples = 4;
  UncertaintyMode uncertainty_mode = UncertaintyMode::both;
  TransferMode transfer_mode = TransferMode::full;
  GateInput gate_input = GateInput::uncertainty;
  MuActivation mu_activation = MuActivation::leaky_relu;
  AlphaNormalization alpha_normalization = AlphaNormalization::sigmoid;
  Real leaky_slope = Real(0.01);

  bool epistemic() const {
    return uncertainty_mode == UncertaintyMode::both ||
           uncertainty_mode == UncertaintyMode::epistemic;
  }
  bool aleatoric() const {
    return uncertainty_mode == UncertaintyMode::both ||
           uncertainty_mode == UncertaintyMode::aleatoric;
  }

  // Throws ConfigError naming the offending field.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

std::string_view to_string(UncertaintyMode mode);
std::string_view to_string(TransferMode mode);
std::string_view to_string(GateInput input);
std::string_view to_string(MuActivation act);
std::string_view to_string(AlphaNormalization norm);

UncertaintyMode parse_uncertainty_mode(std::string_view name);
TransferMode parse_transfer_mode(std::string_view name);
GateInput parse_gate_input(std::string_view name);
MuActivation parse_mu_activation(std::string_view name);
AlphaNormalization parse_alpha_normalization(std::string_view name);

// Strict: unknown keys are rejected; missing keys keep their defaults.
void to_json(nlohmann::json& j, const ModelConfig& config);
void from_json(const nlohmann::json& j, ModelConfig& config);

}  // namespace tpamtl::model
