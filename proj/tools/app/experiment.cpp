#include "experiment.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

namespace tpamtl::app {

using model::ConfigError;

namespace {

void require_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  const std::set<std::string> known(keys.begin(), keys.end());
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown key '" + where + "." + key + "'");
}

template <class T>
T field(const nlohmann::json& j, const char* key, const std::string& where, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("key '" + where + "." + key + "' has the wrong type");
  }
}

// Re-throws nested config errors with the section they came from.
template <class F>
auto in_section(const std::string& where, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

DatasetSection parse_dataset(const nlohmann::json& j) {
  require_keys(j, "dataset", {"synthetic", "csv", "path", "train_fraction", "valid_fraction", "split_seed"});
  DatasetSection d;
  const int sources = int(j.contains("synthetic")) + int(j.contains("csv")) + int(j.contains("path"));
  if (sources != 1) throw ConfigError("dataset needs exactly one of 'synthetic', 'csv' or 'path'");
  if (j.contains("synthetic")) {
    nlohmann::json spec = j.at("synthetic");
    if (!spec.is_object() || !spec.contains("generator")) {
      throw ConfigError("dataset.synthetic.generator is required ('imbalanced' or 'temporal')");
    }
    d.generator = field<std::string>(spec, "generator", "dataset.synthetic", "");
    if (d.generator != "imbalanced" && d.generator != "temporal") {
      throw ConfigError("dataset.synthetic.generator must be 'imbalanced' or 'temporal', got '" + d.generator + "'");
    }
    spec.erase("generator");
    d.synthetic = in_section("dataset.synthetic", [&] { return spec.get<data::SyntheticSpec>(); });
    in_section("dataset.synthetic", [&] {
      d.generator == "imbalanced" ? d.synthetic->validate_imbalanced() : d.synthetic->validate_temporal();
      return 0;
    });
  }
  if (j.contains("csv")) d.csv = field<std::string>(j, "csv", "dataset", "");
  if (j.contains("path")) d.path = field<std::string>(j, "path", "dataset", "");
  d.train_fraction = field(j, "train_fraction", "dataset", d.train_fraction);
  d.valid_fraction = field(j, "valid_fraction", "dataset", d.valid_fraction);
  d.split_seed = field(j, "split_seed", "dataset", d.split_seed);
  if (!(d.train_fraction > 0) || !(d.valid_fraction > 0) || !(d.train_fraction + d.valid_fraction < 1)) {
    throw ConfigError("dataset.train_fraction and dataset.valid_fraction must be positive with a sum below 1");
  }
  return d;
}

EvalSection parse_eval(const nlohmann::json& j) {
  require_keys(j, "eval", {"runs", "output_dir", "graph_instances", "workers", "grid_search"});
  EvalSection e;
  e.runs = field(j, "runs", "eval", e.runs);
  if (j.contains("output_dir")) e.output_dir = field<std::string>(j, "output_dir", "eval", "");
  e.graph_instances = field(j, "graph_instances", "eval", e.graph_instances);
  e.workers = field(j, "workers", "eval", e.workers);
  e.grid_search = field(j, "grid_search", "eval", e.grid_search);
  if (e.runs == 0) throw ConfigError("eval.runs must be positive");
  if (e.workers == 0) throw ConfigError("eval.workers must be positive");
  return e;
}

}  // namespace

ExperimentConfig parse_experiment(const nlohmann::json& j) {
  require_keys(j, "experiment", {"dataset", "model", "variants", "train", "eval"});
  ExperimentConfig c;
  c.source = j;
  if (!j.contains("dataset")) throw ConfigError("missing required section 'dataset'");
  if (!j.contains("variants")) throw ConfigError("missing required section 'variants'");
  c.dataset = parse_dataset(j.at("dataset"));
  if (j.contains("model")) {
    const auto& m = j.at("model");
    if (m.contains("num_tasks") || m.contains("num_features")) {
      throw ConfigError("model.num_tasks and model.num_features come from the dataset and may not be set");
    }
    c.model = in_section("model", [&] { return m.get<model::ModelConfig>(); });
  }
  if (!j.at("variants").is_array() || j.at("variants").empty()) throw ConfigError("variants must be a non-empty list");
  std::set<std::string> labels;
  for (std::size_t i = 0; i < j.at("variants").size(); ++i) {
    const std::string where = "variants[" + std::to_string(i) + "]";
    auto spec = in_section(where, [&] { return j.at("variants")[i].get<variants::VariantSpec>(); });
    const auto name = spec.display_name();
    if (name.find_first_not_of("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_.-") != std::string::npos ||
        name.front() == '.') {
      throw ConfigError(where + ".label '" + name + "' may only use letters, digits, '_', '-' and '.'");
    }
    if (!labels.insert(name).second) {
      throw ConfigError(where + ": duplicate variant label '" + spec.display_name() + "'");
    }
    c.variants.push_back(std::move(spec));
  }
  if (j.contains("train")) c.train = in_section("train", [&] { return j.at("train").get<train::TrainConfig>(); });
  in_section("train", [&] {
    c.train.validate();
    return 0;
  });
  c.model.dropout_rate = static_cast<Real>(c.train.dropout_rate);
  if (j.contains("eval")) c.eval = parse_eval(j.at("eval"));
  if (c.train.seeds.size() < c.eval.runs) {
    throw ConfigError("train.seeds has " + std::to_string(c.train.seeds.size()) + " entries but eval.runs needs " +
                      std::to_string(c.eval.runs));
  }
  // Resolve every variant against a placeholder shape so family conflicts
  // surface before any work starts.
  model::ModelConfig probe = c.model;
  probe.num_tasks = 2;
  probe.num_features = 1;
  for (const auto& v : c.variants) {
    in_section("variant '" + v.display_name() + "'", [&] {
      variants::resolve_config(v, probe).validate();
      return 0;
    });
  }
  return c;
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' must look like key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty key segment");
    if (!node->is_object()) throw ConfigError("override '" + assignment + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = nlohmann::json::object();
    start = dot + 1;
  }
}

ExperimentConfig load_experiment(const fs::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file " + path.string() + " is not valid JSON");
  for (const auto& o : overrides) apply_override(j, o);
  return parse_experiment(j);
}

fs::path resolve_output(const std::optional<fs::path>& explicit_dir, const ExperimentConfig& config,
                        const std::string& stem) {
  if (explicit_dir) return *explicit_dir;
  if (config.eval.output_dir) return *config.eval.output_dir;
  if (const char* root = std::getenv("TPAMTL_OUTPUT_ROOT"); root && *root) return fs::path(root) / stem;
  return fs::path("runs") / stem;
}

data::DatasetSplit prepare_dataset(const ExperimentConfig& config, const fs::path& out) {
  const auto& d = config.dataset;
  if (d.path) return data::read_dataset(*d.path);
  if (d.csv) return data::ingest_csv(*d.csv, d.train_fraction, d.valid_fraction, d.split_seed);
  const fs::path dir = out / "dataset";
  nlohmann::json wanted = *d.synthetic;
  wanted["generator"] = d.generator;
  if (fs::exists(dir / "manifest.json")) {
    auto existing = data::read_dataset(dir);
    if (existing.source == wanted) return existing;
    throw std::runtime_error(dir.string() + " holds a dataset generated from a different spec");
  }
  auto split = d.generator == "imbalanced" ? data::generate_imbalanced_tasks(*d.synthetic)
                                           : data::generate_temporal_tasks(*d.synthetic);
  data::write_dataset(dir, split);
  return split;
}

}  // namespace tpamtl::app
