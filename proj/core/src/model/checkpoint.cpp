#include "tpamtl/model/checkpoint.hpp"

#include <fstream>
#include <set>

namespace tpamtl::model {

using nlohmann::json;

Checkpoint make_checkpoint(const MultiTaskModel& model, const json& variant) {
  Checkpoint c;
  c.family = model.family();
  c.config = model.config();
  c.variant = variant;
  c.extra = model.extra_state();
  for (const auto& [name, tensor] : model.parameters())
    c.parameters.push_back({name, tensor.shape(), {tensor.values().begin(), tensor.values().end()}});
  return c;
}

json to_json(const Checkpoint& c) {
  json params = json::array();
  for (const auto& p : c.parameters)
    params.push_back({{"name", p.name}, {"shape", p.shape}, {"values", p.values}});
  return {{"format", kCheckpointFormat}, {"version", kCheckpointVersion}, {"family", c.family},
          {"config", c.config},          {"variant", c.variant},          {"extra", c.extra},
          {"parameters", params}};
}

Checkpoint checkpoint_from_json(const json& j) {
  if (!j.is_object() || j.value("format", "") != kCheckpointFormat) {
    throw ConfigError("not a tpamtl checkpoint");
  }
  if (j.at("version").get<int>() != kCheckpointVersion) {
    throw ConfigError("unsupported checkpoint version " + j.at("version").dump());
  }
  Checkpoint c;
  c.family = j.at("family").get<std::string>();
  c.config = j.at("config").get<ModelConfig>();
  c.variant = j.value("variant", json::object());
  c.extra = j.value("extra", json::object());
  for (const auto& p : j.at("parameters")) {
    StoredParameter sp{p.at("name").get<std::string>(), p.at("shape").get<diff::Shape>(),
                       p.at("values").get<std::vector<Real>>()};
    std::size_t n = 1;
    for (std::size_t e : sp.shape) n *= e;
    if (n != sp.values.size()) {
      throw ConfigError("checkpoint parameter '" + sp.name + "' has " +
                        std::to_string(sp.values.size()) + " values for shape " +
                        diff::to_string(sp.shape));
    }
    c.parameters.push_back(std::move(sp));
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out << to_json(checkpoint).dump() << '\n';
    if (!out) throw std::runtime_error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("checkpoint " + path.string() + " is not valid JSON: " + e.what());
  }
  return checkpoint_from_json(j);
}

void apply_checkpoint(const Checkpoint& checkpoint, MultiTaskModel& model) {
  ParameterSet& params = model.parameters();
  std::set<std::string> seen;
  for (const auto& p : checkpoint.parameters) {
    Tensor* t = params.find(p.name);
    if (!t) throw ConfigError("checkpoint parameter '" + p.name + "' does not exist in the model");
    if (t->shape() != p.shape) {
      throw ConfigError("checkpoint parameter '" + p.name + "' has shape " + diff::to_string(p.shape) +
                        ", model expects " + diff::to_string(t->shape()));
    }
    std::copy(p.values.begin(), p.values.end(), t->mutable_values().begin());
    seen.insert(p.name);
  }
  for (const auto& [name, tensor] : params)
    if (!seen.count(name)) throw ConfigError("checkpoint lacks parameter '" + name + "'");
  model.load_extra_state(checkpoint.extra);
}

}  // namespace tpamtl::model
