#include "tpamtl/model/config.hpp"

#include <array>
#include <set>
#include <utility>

namespace tpamtl::model {

namespace {

template <class Enum, std::size_t N>
Enum parse_enum(std::string_view name, const std::array<std::pair<std::string_view, Enum>, N>& table,
                std::string_view what) {
  for (const auto& [key, value] : table)
    if (key == name) return value;
  std::string known;
  for (const auto& [key, value] : table) known += (known.empty() ? "" : ", ") + std::string(key);
  throw ConfigError("unknown " + std::string(what) + " '" + std::string(name) + "' (expected one of " +
                    known + ")");
}

template <class Enum, std::size_t N>
std::string_view enum_name(Enum value, const std::array<std::pair<std::string_view, Enum>, N>& table) {
  for (const auto& [key, v] : table)
    if (v == value) return key;
  return "?";
}

constexpr std::array<std::pair<std::string_view, UncertaintyMode>, 4> kUncertainty{{
    {"both", UncertaintyMode::both},
    {"epistemic", UncertaintyMode::epistemic},
    {"aleatoric", UncertaintyMode::aleatoric},
    {"none", UncertaintyMode::none},
}};

constexpr std::array<std::pair<std::string_view, TransferMode>, 5> kTransfer{{
    {"full", TransferMode::full},
    {"intratask", TransferMode::intratask},
    {"samestep", TransferMode::samestep},
    {"none", TransferMode::none},
    {"unconstrained", TransferMode::unconstrained},
}};

constexpr std::array<std::pair<std::string_view, GateInput>, 3> kGate{{
    {"uncertainty", GateInput::uncertainty},
    {"features_only", GateInput::features_only},
    {"task_loss", GateInput::task_loss},
}};

constexpr std::array<std::pair<std::string_view, MuActivation>, 2> kMu{{
    {"leaky_relu", MuActivation::leaky_relu},
    {"sigmoid", MuActivation::sigmoid},
}};

constexpr std::array<std::pair<std::string_view, AlphaNormalization>, 2> kNorm{{
    {"sigmoid", AlphaNormalization::sigmoid},
    {"softmax", AlphaNormalization::softmax},
}};

}  // namespace

std::string_view to_string(UncertaintyMode mode) { return enum_name(mode, kUncertainty); }
std::string_view to_string(TransferMode mode) { return enum_name(mode, kTransfer); }
std::string_view to_string(GateInput input) { return enum_name(input, kGate); }
std::string_view to_string(MuActivation act) { return enum_name(act, kMu); }
std::string_view to_string(AlphaNormalization norm) { return enum_name(norm, kNorm); }

UncertaintyMode parse_uncertainty_mode(std::string_view name) {
  return parse_enum(name, kUncertainty, "uncertainty_mode");
}
TransferMode parse_transfer_mode(std::string_view name) {
  return parse_enum(name, kTransfer, "transfer_mode");
}
GateInput parse_gate_input(std::string_view name) { return parse_enum(name, kGate, "gate_input"); }
MuActivation parse_mu_activation(std::string_view name) {
  return parse_enum(name, kMu, "mu_activation");
}
AlphaNormalization parse_alpha_normalization(std::string_view name) {
  return parse_enum(name, kNorm, "alpha_normalization");
}

void ModelConfig::validate() const {
  if (num_tasks == 0) throw ConfigError("num_tasks must be positive");
  if (num_features == 0) throw ConfigError("num_features must be positive");
  if (hidden_size == 0) throw ConfigError("hidden_size must be positive");
  if (embed_layers == 0) throw ConfigError("embed_layers must be positive");
  if (!(dropout_rate >= 0) || dropout_rate >= 1) {
    throw ConfigError("dropout_rate must lie in [0, 1), got " + std::to_string(dropout_rate));
  }
  if (mc_samples == 0) throw ConfigError("mc_samples must be positive");
  if (epistemic() && mc_samples < 2) {
    throw ConfigError("mc_samples must be >= 2 when uncertainty_mode includes epistemic, got " +
                      std::to_string(mc_samples));
  }
  if (!(leaky_slope >= 0) || leaky_slope >= 1) {
    throw ConfigError("leaky_slope must lie in [0, 1)");
  }
  if (gate_input == GateInput::uncertainty && uncertainty_mode == UncertaintyMode::none) {
    throw ConfigError("gate_input 'uncertainty' needs uncertainty_mode other than 'none'");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{
      {"num_tasks", c.num_tasks},
      {"num_features", c.num_features},
      {"hidden_size", c.hidden_size},
      {"embed_layers", c.embed_layers},
      {"dropout_rate", c.dropout_rate},
      {"mc_samples", c.mc_samples},
      {"uncertainty_mode", to_string(c.uncertainty_mode)},
      {"transfer_mode", to_string(c.transfer_mode)},
      {"gate_input", to_string(c.gate_input)},
      {"mu_activation", to_string(c.mu_activation)},
      {"alpha_normalization", to_string(c.alpha_normalization)},
      {"leaky_slope", c.leaky_slope},
  };
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  static const std::set<std::string> known{
      "num_tasks",      "num_features",  "hidden_size", "embed_layers",  "dropout_rate",
      "mc_samples",     "uncertainty_mode", "transfer_mode", "gate_input", "mu_activation",
      "alpha_normalization", "leaky_slope"};
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown model config key '" + key + "'");
  }
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string("model config key '") + key + "' has the wrong type");
    }
  };
  auto get_enum = [&](const char* key, auto& field, auto parse) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_string()) throw ConfigError(std::string("model config key '") + key + "' must be a string");
    field = parse(j.at(key).get<std::string>());
  };
  get("num_tasks", c.num_tasks);
  get("num_features", c.num_features);
  get("hidden_size", c.hidden_size);
  get("embed_layers", c.embed_layers);
  get("dropout_rate", c.dropout_rate);
  get("mc_samples", c.mc_samples);
  get("leaky_slope", c.leaky_slope);
  get_enum("uncertainty_mode", c.uncertainty_mode, parse_uncertainty_mode);
  get_enum("transfer_mode", c.transfer_mode, parse_transfer_mode);
  get_enum("gate_input", c.gate_input, parse_gate_input);
  get_enum("mu_activation", c.mu_activation, parse_mu_activation);
  get_enum("alpha_normalization", c.alpha_normalization, parse_alpha_normalization);
}

}  // namespace tpamtl::model
