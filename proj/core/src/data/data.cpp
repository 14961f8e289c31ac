#include "tpamtl/data/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include "tpamtl/diff/rng.hpp"
#include "tpamtl/model/config.hpp"

namespace tpamtl::data {

using model::ConfigError;
namespace fs = std::filesystem;

namespace {

void check_fractions(double train, double valid) {
  if (!(train > 0) || !(valid >= 0) || !(train + valid < 1)) {
    throw ConfigError("split fractions must satisfy train > 0, valid >= 0, train + valid < 1");
  }
}

void check_noise(const SyntheticSpec& s) {
  if (!s.label_noise.empty() && s.label_noise.size() != s.num_tasks)
    throw ConfigError("label_noise must have one entry per task");
  for (double p : s.label_noise)
    if (!(p >= 0 && p < 0.5)) throw ConfigError("label_noise entries must lie in [0, 0.5)");
}

double noise_of(const SyntheticSpec& s, std::size_t d) {
  return s.label_noise.empty() ? 0.0 : s.label_noise[d];
}

// Deterministic split of `items` into train/valid/test by fractions; counts
// are floor(n * fraction) for train and valid, the rest goes to test.
template <class T>
void split_into(std::vector<T> items, double train, double valid, diff::RngStream rng,
                std::vector<T>& out_train, std::vector<T>& out_valid, std::vector<T>& out_test) {
  for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[rng.below(i)]);
  const auto n = items.size();
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * train));
  const auto n_valid = static_cast<std::size_t>(std::floor(static_cast<double>(n) * valid));
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n_train ? out_train : (i < n_train + n_valid ? out_valid : out_test);
    dst.push_back(std::move(items[i]));
  }
}

}  // namespace

void SyntheticSpec::validate_imbalanced() const {
  if (num_tasks == 0) throw ConfigError("num_tasks must be positive");
  if (num_features == 0) throw ConfigError("num_features must be positive");
  if (timesteps != 1) throw ConfigError("the imbalanced generator produces single-step instances (timesteps = 1)");
  if (task_counts.size() != num_tasks) throw ConfigError("task_counts must have one entry per task");
  for (auto n : task_counts)
    if (n < 1) throw ConfigError("every task needs at least 1 instance");
  if (task_groups.size() != num_tasks) throw ConfigError("task_groups must have one entry per task");
  if (latent_dims < 2) throw ConfigError("latent_dims must be at least 2");
  if (feature_noise < 0 || task_perturbation < 0) throw ConfigError("noise scales must be non-negative");
  check_noise(*this);
  check_fractions(train_fraction, valid_fraction);
}

void SyntheticSpec::validate_temporal() const {
  if (num_tasks == 0) throw ConfigError("num_tasks must be positive");
  if (timesteps < 2) throw ConfigError("the temporal generator needs timesteps >= 2");
  if (num_features < num_tasks) throw ConfigError("num_features must be at least num_tasks (one channel per task)");
  if (task_counts.empty() || task_counts.front() < 2) throw ConfigError("task_counts[0] sets the instance count and must be >= 2");
  std::vector<int> parent(num_tasks, -1);
  for (const auto& l : links) {
    if (l.source >= num_tasks || l.target >= num_tasks) throw ConfigError("link task index out of range");
    if (l.source == l.target) throw ConfigError("a link must connect two different tasks");
    if (l.lag >= timesteps) throw ConfigError("link lag must be smaller than timesteps");
    if (parent[l.target] != -1) throw ConfigError("task " + std::to_string(l.target) + " has more than one incoming link");
    parent[l.target] = static_cast<int>(l.source);
  }
  for (std::size_t d = 0; d < num_tasks; ++d) {
    std::size_t hops = 0;
    for (int p = parent[d]; p != -1; p = parent[static_cast<std::size_t>(p)])
      if (++hops > num_tasks) throw ConfigError("links form a cycle");
  }
  if (!label_rates.empty() && label_rates.size() != num_tasks) throw ConfigError("label_rates must have one entry per task");
  for (double r : label_rates)
    if (!(r > 0 && r <= 1)) throw ConfigError("label_rates entries must lie in (0, 1]");
  if (channel_noise < 0) throw ConfigError("channel_noise must be non-negative");
  check_noise(*this);
  check_fractions(train_fraction, valid_fraction);
}

void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  nlohmann::json links = nlohmann::json::array();
  for (const auto& l : s.links) links.push_back({{"source", l.source}, {"target", l.target}, {"lag", l.lag}});
  j = nlohmann::json{
      {"num_tasks", s.num_tasks},
      {"timesteps", s.timesteps},
      {"num_features", s.num_features},
      {"task_counts", s.task_counts},
      {"label_noise", s.label_noise},
      {"links", links},
      {"seed", s.seed},
      {"train_fraction", s.train_fraction},
      {"valid_fraction", s.valid_fraction},
      {"latent_dims", s.latent_dims},
      {"task_groups", s.task_groups},
      {"feature_noise", s.feature_noise},
      {"task_perturbation", s.task_perturbation},
      {"nonlinear_weight", s.nonlinear_weight},
      {"source_amplitude", s.source_amplitude},
      {"target_amplitude", s.target_amplitude},
      {"channel_noise", s.channel_noise},
      {"label_rates", s.label_rates},
  };
}

void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  if (!j.is_object()) throw ConfigError("dataset spec must be an object");
  const nlohmann::json defaults = SyntheticSpec{};
  for (const auto& [key, value] : j.items())
    if (!defaults.contains(key)) throw ConfigError("unknown dataset spec key '" + key + "'");
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string("dataset spec key '") + key + "' has the wrong type");
    }
  };
  get("num_tasks", s.num_tasks);
  get("timesteps", s.timesteps);
  get("num_features", s.num_features);
  get("task_counts", s.task_counts);
  get("label_noise", s.label_noise);
  get("seed", s.seed);
  get("train_fraction", s.train_fraction);
  get("valid_fraction", s.valid_fraction);
  get("latent_dims", s.latent_dims);
  get("task_groups", s.task_groups);
  get("feature_noise", s.feature_noise);
  get("task_perturbation", s.task_perturbation);
  get("nonlinear_weight", s.nonlinear_weight);
  get("source_amplitude", s.source_amplitude);
  get("target_amplitude", s.target_amplitude);
  get("channel_noise", s.channel_noise);
  get("label_rates", s.label_rates);
  if (j.contains("links")) {
    if (!j.at("links").is_array()) throw ConfigError("dataset spec key 'links' must be an array");
    s.links.clear();
    for (const auto& l : j.at("links")) {
      LagLink link;
      try {
        link.source = l.at("source").get<std::size_t>();
        link.target = l.at("target").get<std::size_t>();
        link.lag = l.at("lag").get<std::size_t>();
      } catch (const nlohmann::json::exception&) {
        throw ConfigError("each link needs integer 'source', 'target' and 'lag'");
      }
      s.links.push_back(link);
    }
  }
}

std::vector<Episode>& DatasetSplit::split(const std::string& name) {
  if (name == "train") return train;
  if (name == "valid") return valid;
  if (name == "test") return test;
  throw std::out_of_range("unknown split '" + name + "'");
}

const std::vector<Episode>& DatasetSplit::split(const std::string& name) const {
  return const_cast<DatasetSplit*>(this)->split(name);
}

// ---- imbalanced, single-step tasks -----------------------------------------

DatasetSplit generate_imbalanced_tasks(const SyntheticSpec& spec) {
  spec.validate_imbalanced();
  const std::size_t D = spec.num_tasks, m = spec.num_features, q = spec.latent_dims;
  const diff::RngStream root(spec.seed, 0xDA7A);

  // Observation map x = A u + noise.
  std::vector<double> A(m * q);
  {
    auto rng = root.substream("mixing");
    for (auto& a : A) a = rng.normal() / std::sqrt(static_cast<double>(q));
  }
  auto normalize = [](std::vector<double> v) {
    double n = 0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (auto& x : v) x /= n;
    return v;
  };
  std::vector<std::vector<double>> w(D);
  std::vector<std::pair<std::size_t, std::size_t>> pair(D);
  for (std::size_t d = 0; d < D; ++d) {
    const std::size_t g = spec.task_groups[d];
    auto grng = root.substream("group").substream(g);
    auto trng = root.substream("task").substream(d);
    std::vector<double> v(q);
    for (std::size_t i = 0; i < q; ++i) v[i] = grng.normal() + spec.task_perturbation * trng.normal();
    w[d] = normalize(std::move(v));
    pair[d] = {g % q, (g + 1) % q};
  }

  DatasetSplit out;
  out.num_tasks = D;
  out.num_features = m;
  out.timesteps = 1;
  out.train_fraction = spec.train_fraction;
  out.valid_fraction = spec.valid_fraction;
  out.seed = spec.seed;
  out.source = spec;
  out.source["generator"] = "imbalanced";

  for (std::size_t d = 0; d < D; ++d) {
    const std::size_t n = spec.task_counts[d];
    const std::size_t want_pos = n / 2, want_neg = n - want_pos;
    std::size_t pos = 0, neg = 0;
    auto rng = root.substream("instances").substream(d);
    std::vector<Episode> episodes;
    episodes.reserve(n);
    std::vector<double> u(q);
    while (pos + neg < n) {
      for (auto& x : u) x = rng.normal();
      double score = spec.nonlinear_weight * u[pair[d].first] * u[pair[d].second];
      for (std::size_t i = 0; i < q; ++i) score += w[d][i] * u[i];
      bool label = score > 0;
      if (rng.uniform() < noise_of(spec, d)) label = !label;
      std::vector<Real> x(m);
      for (std::size_t f = 0; f < m; ++f) {
        double v = spec.feature_noise * rng.normal();
        for (std::size_t i = 0; i < q; ++i) v += A[f * q + i] * u[i];
        x[f] = static_cast<Real>(v);
      }
      if (label ? pos >= want_pos : neg >= want_neg) continue;
      (label ? pos : neg)++;
      Episode e;
      e.id = "t" + std::to_string(d) + "_" + std::to_string(episodes.size());
      e.length = 1;
      e.features = std::move(x);
      e.labels.assign(D, Real(0));
      e.mask.assign(D, Real(0));
      e.labels[d] = label ? Real(1) : Real(0);
      e.mask[d] = Real(1);
      std::vector<double> scores(D, 0.0);
      scores[d] = score;
      out.rule_scores.emplace(e.id, std::move(scores));
      episodes.push_back(std::move(e));
    }
    split_into(std::move(episodes), spec.train_fraction, spec.valid_fraction,
               root.substream("split").substream(d), out.train, out.valid, out.test);
  }
  return out;
}

// ---- temporal tasks with lagged dependencies --------------------------------

namespace {

struct TemporalPlan {
  std::vector<int> parent;
  std::vector<std::size_t> lag;
  std::vector<std::size_t> order;  // parents before children
  std::vector<bool> is_source;
};

TemporalPlan plan_of(const SyntheticSpec& spec) {
  TemporalPlan p;
  const std::size_t D = spec.num_tasks;
  p.parent.assign(D, -1);
  p.lag.assign(D, 0);
  p.is_source.assign(D, false);
  for (const auto& l : spec.links) {
    p.parent[l.target] = static_cast<int>(l.source);
    p.lag[l.target] = l.lag;
    p.is_source[l.source] = true;
  }
  std::vector<bool> placed(D, false);
  while (p.order.size() < D) {
    for (std::size_t d = 0; d < D; ++d) {
      if (placed[d]) continue;
      if (p.parent[d] != -1 && !placed[static_cast<std::size_t>(p.parent[d])]) continue;
      placed[d] = true;
      p.order.push_back(d);
    }
  }
  return p;
}

}  // namespace

DatasetSplit generate_temporal_tasks(const SyntheticSpec& spec) {
  spec.validate_temporal();
  const std::size_t D = spec.num_tasks, m = spec.num_features, T = spec.timesteps;
  const std::size_t n = spec.task_counts.front();
  const auto plan = plan_of(spec);
  const diff::RngStream root(spec.seed, 0x7E3F);

  DatasetSplit out;
  out.num_tasks = D;
  out.num_features = m;
  out.timesteps = T;
  out.train_fraction = spec.train_fraction;
  out.valid_fraction = spec.valid_fraction;
  out.seed = spec.seed;
  out.ground_truth = spec.links;
  out.source = spec;
  out.source["generator"] = "temporal";

  std::vector<Episode> episodes;
  episodes.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    auto rng = root.substream("instance").substream(k);
    std::vector<std::size_t> spike(D, 0);
    std::vector<bool> clean(D, false);
    for (std::size_t d : plan.order) {
      const bool want = rng.uniform() < 0.5;
      if (plan.parent[d] == -1) {
        const std::size_t half = T / 2;
        clean[d] = want;
        spike[d] = want ? rng.below(half) : half + rng.below(T - half);
      } else {
        const std::size_t at = spike[static_cast<std::size_t>(plan.parent[d])] + plan.lag[d];
        clean[d] = want && at < T;
        if (clean[d]) {
          spike[d] = at;
        } else {
          std::size_t s = rng.below(at < T ? T - 1 : T);
          if (at < T && s >= at) ++s;
          spike[d] = s;
        }
      }
    }
    Episode e;
    e.id = "i" + std::to_string(k);
    e.length = T;
    e.features.resize(T * m);
    for (auto& x : e.features) x = static_cast<Real>(spec.channel_noise * rng.normal());
    for (std::size_t d = 0; d < D; ++d) {
      const double amp = plan.is_source[d] || plan.parent[d] == -1 ? spec.source_amplitude : spec.target_amplitude;
      e.features[spike[d] * m + d] += static_cast<Real>(amp);
    }
    e.labels.resize(D);
    e.mask.resize(D);
    std::vector<double> scores(D);
    for (std::size_t d = 0; d < D; ++d) {
      bool label = clean[d];
      if (rng.uniform() < noise_of(spec, d)) label = !label;
      const double rate = spec.label_rates.empty() ? 1.0 : spec.label_rates[d];
      e.labels[d] = label ? Real(1) : Real(0);
      e.mask[d] = rng.uniform() < rate ? Real(1) : Real(0);
      scores[d] = clean[d] ? 1.0 : 0.0;
    }
    out.rule_scores.emplace(e.id, std::move(scores));
    episodes.push_back(std::move(e));
  }
  split_into(std::move(episodes), spec.train_fraction, spec.valid_fraction, root.substream("split"),
             out.train, out.valid, out.test);
  return out;
}

std::vector<double> temporal_rule_scores(const SyntheticSpec& spec, const Episode& e) {
  const std::size_t D = spec.num_tasks;
  const std::size_t m = e.length ? e.features.size() / e.length : 0;
  if (m < D) throw ConfigError("episode has fewer channels than tasks");
  std::vector<std::size_t> peak(D, 0);
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t t = 1; t < e.length; ++t)
      if (e.features[t * m + d] > e.features[peak[d] * m + d]) peak[d] = t;
  const auto plan = plan_of(spec);
  std::vector<double> scores(D);
  for (std::size_t d = 0; d < D; ++d) {
    if (plan.parent[d] == -1) {
      scores[d] = peak[d] < e.length / 2 ? 1.0 : 0.0;
    } else {
      scores[d] = peak[d] == peak[static_cast<std::size_t>(plan.parent[d])] + plan.lag[d] ? 1.0 : 0.0;
    }
  }
  return scores;
}

// ---- CSV ---------------------------------------------------------------------

namespace {

std::vector<std::string_view> split_cells(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    cells.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

[[noreturn]] void fail(const fs::path& path, std::size_t line, const std::string& what) {
  throw DataError(path.string() + ":" + std::to_string(line) + ": " + what);
}

bool parse_number(std::string_view s, double& out) {
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end && std::isfinite(out);
}

bool parse_index(std::string_view s, long long& out) {
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

// "feature_3" -> 3 when the prefix matches.
bool column_index(std::string_view name, std::string_view prefix, std::size_t& index) {
  if (name.substr(0, prefix.size()) != prefix) return false;
  long long v = 0;
  if (!parse_index(name.substr(prefix.size()), v) || v < 1) return false;
  index = static_cast<std::size_t>(v);
  return true;
}

std::string format_real(Real v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace

CsvData read_episodes_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  CsvData data;
  auto& rep = data.report;

  enum class Col { id, step, feature, label, mask, ignored };
  std::vector<std::pair<Col, std::size_t>> columns;
  std::size_t id_col = 0;

  struct Building {
    Episode episode;
    long long last_step = 0;
    std::vector<int> label;  // -1 unknown
    std::vector<int> mask;
    std::vector<std::size_t> label_line;
  };
  std::vector<Building> building;
  std::unordered_map<std::string, std::size_t> index_of;
  std::size_t open = static_cast<std::size_t>(-1);

  std::string raw;
  bool header_seen = false;
  while (std::getline(in, raw)) {
    const std::size_t line_no = ++rep.total_lines;
    const std::string_view line = trim(raw);
    if (line.empty()) {
      ++rep.blank_lines;
      continue;
    }
    if (line.front() == '#') {
      ++rep.comment_lines;
      if (line.substr(0, 17) == "# tpamtl-episodes" && line != kCsvTag)
        fail(path, line_no, "unsupported schema tag '" + std::string(line) + "'");
      continue;
    }
    const auto cells = split_cells(line);
    if (!header_seen) {
      header_seen = true;
      ++rep.header_lines;
      bool have_id = false, have_step = false;
      std::set<std::size_t> features, labels, masks;
      for (std::size_t c = 0; c < cells.size(); ++c) {
        const auto name = trim(cells[c]);
        std::size_t k = 0;
        if (name == "instance_id") {
          if (have_id) fail(path, line_no, "duplicate column 'instance_id'");
          have_id = true;
          id_col = c;
          columns.emplace_back(Col::id, 0);
        } else if (name == "timestep") {
          if (have_step) fail(path, line_no, "duplicate column 'timestep'");
          have_step = true;
          columns.emplace_back(Col::step, 0);
        } else if (column_index(name, "feature_", k)) {
          if (!features.insert(k).second) fail(path, line_no, "duplicate column '" + std::string(name) + "'");
          columns.emplace_back(Col::feature, k - 1);
        } else if (column_index(name, "label_task_", k)) {
          if (!labels.insert(k).second) fail(path, line_no, "duplicate column '" + std::string(name) + "'");
          columns.emplace_back(Col::label, k - 1);
        } else if (column_index(name, "mask_task_", k)) {
          if (!masks.insert(k).second) fail(path, line_no, "duplicate column '" + std::string(name) + "'");
          columns.emplace_back(Col::mask, k - 1);
        } else {
          fail(path, line_no, "unrecognized column '" + std::string(name) + "'");
        }
      }
      if (!have_id) fail(path, line_no, "missing required column 'instance_id'");
      if (!have_step) fail(path, line_no, "missing required column 'timestep'");
      if (features.empty()) fail(path, line_no, "no feature_<k> columns");
      if (labels.empty()) fail(path, line_no, "no label_task_<k> columns");
      auto contiguous = [&](const std::set<std::size_t>& s, const char* what) {
        if (*s.rbegin() != s.size()) fail(path, line_no, std::string(what) + " columns must be numbered 1..N without gaps");
      };
      contiguous(features, "feature_");
      contiguous(labels, "label_task_");
      if (!masks.empty()) {
        contiguous(masks, "mask_task_");
        if (masks.size() != labels.size()) fail(path, line_no, "mask_task_ columns must match label_task_ columns");
      }
      data.num_features = features.size();
      data.num_tasks = labels.size();
      continue;
    }

    ++rep.data_rows;
    if (cells.size() != columns.size()) {
      fail(path, line_no, "expected " + std::to_string(columns.size()) + " cells, found " + std::to_string(cells.size()));
    }
    const std::string id(trim(cells[id_col]));
    if (id.empty()) fail(path, line_no, "empty instance_id");
    auto it = index_of.find(id);
    if (it == index_of.end()) {
      it = index_of.emplace(id, building.size()).first;
      Building b;
      b.episode.id = id;
      b.last_step = -1;
      b.label.assign(data.num_tasks, -1);
      b.mask.assign(data.num_tasks, -1);
      b.label_line.assign(data.num_tasks, 0);
      building.push_back(std::move(b));
    } else if (it->second != open) {
      fail(path, line_no, "rows of instance '" + id + "' are not contiguous");
    }
    open = it->second;
    Building& b = building[it->second];
    std::vector<Real> row(data.num_features, Real(0));
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto cell = trim(cells[c]);
      const auto [kind, k] = columns[c];
      double v = 0;
      switch (kind) {
        case Col::id:
        case Col::ignored:
          break;
        case Col::step: {
          long long s = 0;
          if (!parse_index(cell, s) || s < 0) fail(path, line_no, "timestep '" + std::string(cell) + "' is not a non-negative integer");
          if (s == b.last_step) fail(path, line_no, "duplicate timestep " + std::to_string(s) + " for instance '" + id + "'");
          if (s < b.last_step) fail(path, line_no, "timesteps of instance '" + id + "' are not increasing");
          b.last_step = s;
          break;
        }
        case Col::feature:
          if (cell.empty()) {
            ++rep.imputed_cells;  // stays 0
          } else if (!parse_number(cell, v)) {
            fail(path, line_no, "feature_" + std::to_string(k + 1) + " value '" + std::string(cell) + "' is not a finite number");
          } else {
            row[k] = static_cast<Real>(v);
          }
          break;
        case Col::label:
        case Col::mask: {
          if (cell.empty()) break;
          const char* what = kind == Col::label ? "label_task_" : "mask_task_";
          if (!parse_number(cell, v) || (v != 0 && v != 1)) {
            fail(path, line_no, what + std::to_string(k + 1) + " value '" + std::string(cell) + "' must be 0 or 1");
          }
          auto& slot = kind == Col::label ? b.label[k] : b.mask[k];
          if (slot != -1 && slot != static_cast<int>(v)) {
            fail(path, line_no, std::string(what) + std::to_string(k + 1) + " conflicts with an earlier row of instance '" + id + "'");
          }
          slot = static_cast<int>(v);
          if (kind == Col::label && b.label_line[k] == 0) b.label_line[k] = line_no;
          break;
        }
      }
    }
    b.episode.features.insert(b.episode.features.end(), row.begin(), row.end());
    ++b.episode.length;
  }
  if (!header_seen) throw DataError(path.string() + ": no header row");

  for (auto& b : building) {
    Episode& e = b.episode;
    e.labels.assign(data.num_tasks, Real(0));
    e.mask.assign(data.num_tasks, Real(0));
    for (std::size_t d = 0; d < data.num_tasks; ++d) {
      const int mask = b.mask[d] != -1 ? b.mask[d] : (b.label[d] != -1 ? 1 : 0);
      if (mask == 1 && b.label[d] == -1) {
        throw DataError(path.string() + ": instance '" + e.id + "' has mask_task_" + std::to_string(d + 1) +
                        " = 1 but no label");
      }
      e.mask[d] = static_cast<Real>(mask);
      e.labels[d] = mask == 1 ? static_cast<Real>(b.label[d]) : Real(0);
    }
    data.episodes.push_back(std::move(e));
  }
  rep.instances = data.episodes.size();
  return data;
}

void write_episodes_csv(const fs::path& path, const std::vector<Episode>& episodes,
                        std::size_t num_features, std::size_t num_tasks) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw DataError("cannot write " + tmp.string());
    out << kCsvTag << '\n' << "instance_id,timestep";
    for (std::size_t f = 1; f <= num_features; ++f) out << ",feature_" << f;
    for (std::size_t d = 1; d <= num_tasks; ++d) out << ",label_task_" << d;
    for (std::size_t d = 1; d <= num_tasks; ++d) out << ",mask_task_" << d;
    out << '\n';
    for (const auto& e : episodes) {
      model::check_episode(e, num_features, num_tasks);
      if (e.id.empty() || e.id.find_first_of(",\n\r#") != std::string::npos || e.id != trim(e.id)) {
        throw DataError("instance id '" + e.id + "' cannot be written to CSV");
      }
      for (std::size_t t = 0; t < e.length; ++t) {
        out << e.id << ',' << t;
        for (std::size_t f = 0; f < num_features; ++f) out << ',' << format_real(e.features[t * num_features + f]);
        for (std::size_t d = 0; d < num_tasks; ++d) {
          out << ',';
          if (e.mask[d] != 0) out << (e.labels[d] != 0 ? 1 : 0);
        }
        for (std::size_t d = 0; d < num_tasks; ++d) out << ',' << (e.mask[d] != 0 ? 1 : 0);
        out << '\n';
      }
    }
    if (!out) throw DataError("error writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

nlohmann::json manifest(const DatasetSplit& s) {
  nlohmann::json links = nlohmann::json::array();
  for (const auto& l : s.ground_truth) links.push_back({{"source", l.source}, {"target", l.target}, {"lag", l.lag}});
  nlohmann::json splits = nlohmann::json::object();
  for (const char* name : {"train", "valid", "test"}) {
    nlohmann::json ids = nlohmann::json::array();
    for (const auto& e : s.split(name)) ids.push_back(e.id);
    splits[name] = {{"file", std::string(name) + ".csv"}, {"instances", ids.size()}, {"ids", ids}};
  }
  return {
      {"format", "tpamtl-dataset"},
      {"version", 1},
      {"num_tasks", s.num_tasks},
      {"num_features", s.num_features},
      {"timesteps", s.timesteps},
      {"seed", s.seed},
      {"train_fraction", s.train_fraction},
      {"valid_fraction", s.valid_fraction},
      {"ground_truth", links},
      {"source", s.source},
      {"splits", splits},
      {"rule_scores", s.rule_scores},
  };
}

void write_dataset(const fs::path& dir, const DatasetSplit& s) {
  fs::create_directories(dir);
  for (const char* name : {"train", "valid", "test"})
    write_episodes_csv(dir / (std::string(name) + ".csv"), s.split(name), s.num_features, s.num_tasks);
  const fs::path tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(tmp);
    out << manifest(s).dump(1) << '\n';
    if (!out) throw DataError("error writing " + tmp.string());
  }
  fs::rename(tmp, dir / "manifest.json");
}

DatasetSplit read_dataset(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw DataError("cannot open " + (dir / "manifest.json").string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + (dir / "manifest.json").string() + " is not valid JSON: " + e.what());
  }
  if (j.value("format", "") != "tpamtl-dataset" || j.value("version", 0) != 1)
    throw DataError("unsupported dataset manifest in " + dir.string());
  DatasetSplit s;
  try {
    s.num_tasks = j.at("num_tasks").get<std::size_t>();
    s.num_features = j.at("num_features").get<std::size_t>();
    s.timesteps = j.at("timesteps").get<std::size_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.train_fraction = j.at("train_fraction").get<double>();
    s.valid_fraction = j.at("valid_fraction").get<double>();
    for (const auto& l : j.at("ground_truth"))
      s.ground_truth.push_back({l.at("source").get<std::size_t>(), l.at("target").get<std::size_t>(),
                                l.at("lag").get<std::size_t>()});
    s.source = j.value("source", nlohmann::json::object());
    if (j.contains("rule_scores")) j.at("rule_scores").get_to(s.rule_scores);
    for (const char* name : {"train", "valid", "test"}) {
      const auto& entry = j.at("splits").at(name);
      CsvData data = read_episodes_csv(dir / entry.at("file").get<std::string>());
      if (!data.episodes.empty() && (data.num_features != s.num_features || data.num_tasks != s.num_tasks)) {
        throw DataError(std::string(name) + " split does not match the manifest dimensions");
      }
      const auto ids = entry.at("ids").get<std::vector<std::string>>();
      if (ids.size() != data.episodes.size()) throw DataError(std::string(name) + " split size differs from the manifest");
      for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] != data.episodes[i].id) throw DataError(std::string(name) + " split membership differs from the manifest");
      s.split(name) = std::move(data.episodes);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed dataset manifest in " + dir.string() + ": " + e.what());
  }
  return s;
}

DatasetSplit ingest_csv(const fs::path& path, double train_fraction, double valid_fraction,
                        std::uint64_t seed) {
  if (fs::is_directory(path)) return read_dataset(path);
  check_fractions(train_fraction, valid_fraction);
  CsvData data = read_episodes_csv(path);
  if (data.episodes.empty()) throw DataError(path.string() + ": no data rows");
  DatasetSplit s;
  s.num_tasks = data.num_tasks;
  s.num_features = data.num_features;
  for (const auto& e : data.episodes) s.timesteps = std::max(s.timesteps, e.length);
  s.train_fraction = train_fraction;
  s.valid_fraction = valid_fraction;
  s.seed = seed;
  s.source = {{"generator", "csv"}, {"path", path.string()}};
  split_into(std::move(data.episodes), train_fraction, valid_fraction, diff::RngStream(seed, 0xC5F).substream("split"),
             s.train, s.valid, s.test);
  return s;
}

}  // namespace tpamtl::data
