#include "tpamtl/train/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "tpamtl/eval/eval.hpp"

namespace tpamtl::train {

using model::ConfigError;

void adam_update(std::span<Real> values, std::span<const Real> grads, std::vector<double>& m,
                 std::vector<double>& v, std::size_t step, const AdamOptions& opt) {
  for (Real g : grads)
    if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient at Adam step " + std::to_string(step));
  const double c1 = 1 - std::pow(opt.beta1, static_cast<double>(step));
  const double c2 = 1 - std::pow(opt.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double g = grads.empty() ? 0.0 : static_cast<double>(grads[i]);
    m[i] = opt.beta1 * m[i] + (1 - opt.beta1) * g;
    v[i] = opt.beta2 * v[i] + (1 - opt.beta2) * g * g;
    const double m_hat = m[i] / c1, v_hat = v[i] / c2;
    values[i] = static_cast<Real>(static_cast<double>(values[i]) - opt.learning_rate * m_hat / (std::sqrt(v_hat) + opt.eps));
  }
}

void adam_step(ParameterSet& params, AdamState& state, const AdamOptions& opt) {
  if (state.m.empty()) {
    for (const auto& [name, t] : params) {
      state.m.emplace_back(t.size(), 0.0);
      state.v.emplace_back(t.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ConfigError("Adam state does not match the parameter set");
  // Check everything first so a bad gradient leaves all parameters untouched.
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    for (Real g : t.grad())
      if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient in parameter '" + name + "'");
  }
  ++state.step;
  std::size_t i = 0;
  for (auto& [name, t] : params) {
    const std::span<const Real> g = t.has_grad() ? t.grad() : std::span<const Real>{};
    adam_update(t.mutable_values(), g, state.m[i], state.v[i], state.step, opt);
    ++i;
  }
}

// ---- configuration -----------------------------------------------------------

std::size_t Grid::size() const {
  return hidden_size.size() * embed_layers.size() * batch_size.size() * learning_rate.size() * l2.size() *
         dropout_rate.size();
}

std::string GridCell::key() const {
  std::ostringstream out;
  out << 'h' << hidden_size << "_l" << embed_layers << "_b" << batch_size << "_lr" << learning_rate << "_wd" << l2
      << "_p" << dropout_rate;
  return out.str();
}

namespace {

auto cell_tuple(const GridCell& c) {
  return std::tie(c.hidden_size, c.learning_rate, c.embed_layers, c.batch_size, c.l2, c.dropout_rate);
}

}  // namespace

std::vector<GridCell> enumerate(const Grid& g) {
  std::vector<GridCell> out;
  for (auto h : g.hidden_size)
    for (auto l : g.embed_layers)
      for (auto b : g.batch_size)
        for (auto lr : g.learning_rate)
          for (auto wd : g.l2)
            for (auto p : g.dropout_rate) out.push_back({h, l, b, lr, wd, p});
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return cell_tuple(a) < cell_tuple(b); });
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) throw ConfigError("train.learning_rate must be >= 0");
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (max_iterations == 0) throw ConfigError("train.max_iterations must be positive");
  if (max_epochs == 0) throw ConfigError("train.max_epochs must be positive");
  if (!(l2 >= 0)) throw ConfigError("train.l2 must be >= 0");
  if (!(dropout_rate >= 0 && dropout_rate < 1)) throw ConfigError("train.dropout_rate must lie in [0, 1)");
  if (patience == 0) throw ConfigError("train.patience must be positive");
  if (eval_batch_size == 0) throw ConfigError("train.eval_batch_size must be positive");
  if (seeds.empty()) throw ConfigError("train.seeds must not be empty");
}

void TrainConfig::apply(const GridCell& cell, ModelConfig& model) {
  batch_size = cell.batch_size;
  learning_rate = cell.learning_rate;
  l2 = cell.l2;
  dropout_rate = cell.dropout_rate;
  model.hidden_size = cell.hidden_size;
  model.embed_layers = cell.embed_layers;
  model.dropout_rate = static_cast<Real>(cell.dropout_rate);
}

namespace {

template <class F>
void strict_object(const nlohmann::json& j, const char* what, std::initializer_list<const char*> keys, F&& body) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be an object");
  std::set<std::string> known(keys.begin(), keys.end());
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown " + std::string(what) + " key '" + key + "'");
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string(what) + " key '" + key + "' has the wrong type");
    }
  };
  body(get);
}

}  // namespace

void to_json(nlohmann::json& j, const Grid& g) {
  j = {{"hidden_size", g.hidden_size}, {"embed_layers", g.embed_layers}, {"batch_size", g.batch_size},
       {"learning_rate", g.learning_rate}, {"l2", g.l2}, {"dropout_rate", g.dropout_rate}};
}

void from_json(const nlohmann::json& j, Grid& g) {
  strict_object(j, "grid", {"hidden_size", "embed_layers", "batch_size", "learning_rate", "l2", "dropout_rate"},
                [&](auto get) {
                  get("hidden_size", g.hidden_size);
                  get("embed_layers", g.embed_layers);
                  get("batch_size", g.batch_size);
                  get("learning_rate", g.learning_rate);
                  get("l2", g.l2);
                  get("dropout_rate", g.dropout_rate);
                });
  if (g.size() == 0) throw ConfigError("grid has an empty axis");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},   {"max_iterations", c.max_iterations},
       {"max_epochs", c.max_epochs},       {"l2", c.l2},                   {"dropout_rate", c.dropout_rate},
       {"patience", c.patience},           {"eval_batch_size", c.eval_batch_size}, {"grid", c.grid},
       {"seeds", c.seeds}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  strict_object(j, "train",
                {"learning_rate", "batch_size", "max_iterations", "max_epochs", "l2", "dropout_rate", "patience",
                 "eval_batch_size", "grid", "seeds"},
                [&](auto get) {
                  get("learning_rate", c.learning_rate);
                  get("batch_size", c.batch_size);
                  get("max_iterations", c.max_iterations);
                  get("max_epochs", c.max_epochs);
                  get("l2", c.l2);
                  get("dropout_rate", c.dropout_rate);
                  get("patience", c.patience);
                  get("eval_batch_size", c.eval_batch_size);
                  get("seeds", c.seeds);
                });
  if (j.contains("grid")) c.grid = j.at("grid").get<Grid>();
}

// ---- run records -------------------------------------------------------------

double RunRecord::test_macro() const { return eval::macro(test_auroc); }

bool RunRecord::same_trace(const RunRecord& o) const {
  auto same = [](const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!(a[i] == b[i] || (std::isnan(a[i]) && std::isnan(b[i])))) return false;
    return true;
  };
  return variant == o.variant && config == o.config && seed == o.seed && epochs == o.epochs &&
         same(train_loss, o.train_loss) && same(valid_auroc, o.valid_auroc) && best_epoch == o.best_epoch &&
         same(valid_task_auroc, o.valid_task_auroc) && same(test_auroc, o.test_auroc) &&
         iterations == o.iterations && stop_reason == o.stop_reason;
}

namespace {

nlohmann::json nullable(const std::vector<double>& v) {
  nlohmann::json out = nlohmann::json::array();
  for (double x : v) out.push_back(std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x));
  return out;
}

std::vector<double> from_nullable(const nlohmann::json& j) {
  std::vector<double> out;
  for (const auto& x : j) out.push_back(x.is_null() ? std::numeric_limits<double>::quiet_NaN() : x.get<double>());
  return out;
}

}  // namespace

void to_json(nlohmann::json& j, const RunRecord& r) {
  j = {{"format", "tpamtl-run"},
       {"version", 1},
       {"variant", r.variant},
       {"config", r.config},
       {"train", r.train},
       {"seed", r.seed},
       {"epochs", r.epochs},
       {"train_loss", r.train_loss},
       {"valid_auroc", r.valid_auroc},
       {"best_epoch", r.best_epoch},
       {"best_valid_auroc", r.best_valid_auroc},
       {"valid_task_auroc", nullable(r.valid_task_auroc)},
       {"test_auroc", nullable(r.test_auroc)},
       {"iterations", r.iterations},
       {"stop_reason", r.stop_reason},
       {"wall_seconds", r.wall_seconds},
       {"checkpoint", r.checkpoint}};
}

void from_json(const nlohmann::json& j, RunRecord& r) {
  if (j.value("format", "") != "tpamtl-run") throw std::runtime_error("not a run record");
  r.variant = j.at("variant");
  r.config = j.at("config").get<ModelConfig>();
  r.train = j.at("train").get<TrainConfig>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.epochs = j.at("epochs").get<std::vector<std::size_t>>();
  r.train_loss = j.at("train_loss").get<std::vector<double>>();
  r.valid_auroc = j.at("valid_auroc").get<std::vector<double>>();
  r.best_epoch = j.at("best_epoch").get<std::size_t>();
  r.best_valid_auroc = j.at("best_valid_auroc").get<double>();
  r.valid_task_auroc = from_nullable(j.at("valid_task_auroc"));
  r.test_auroc = from_nullable(j.at("test_auroc"));
  r.iterations = j.at("iterations").get<std::size_t>();
  r.stop_reason = j.at("stop_reason").get<std::string>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  r.checkpoint = j.at("checkpoint").get<std::string>();
}

// ---- training ------------------------------------------------------------------

std::vector<double> evaluate(MultiTaskModel& model, const std::vector<data::Episode>& episodes, std::size_t chunk,
                             std::uint64_t seed) {
  const std::size_t D = model.config().num_tasks;
  std::vector<std::vector<double>> proba(D);
  std::vector<double> labels, mask;
  diff::RngStream rng(seed, 0xE7A1);
  for (std::size_t start = 0; start < episodes.size(); start += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, episodes.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto batch = model::make_batch(episodes, idx);
    const auto p = model::predict_proba(model, batch, rng);
    for (std::size_t d = 0; d < D; ++d) proba[d].insert(proba[d].end(), p[d].begin(), p[d].end());
    labels.insert(labels.end(), batch.labels.begin(), batch.labels.end());
    mask.insert(mask.end(), batch.label_mask.begin(), batch.label_mask.end());
  }
  return eval::task_aurocs(proba, labels, mask, D);
}

RunRecord fit(MultiTaskModel& model, const data::DatasetSplit& split, const TrainConfig& config, std::uint64_t seed) {
  config.validate();
  if (split.train.empty() || split.valid.empty()) throw ConfigError("fit needs non-empty train and valid splits");
  const auto started = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.config = model.config();
  rec.train = config;
  rec.seed = seed;

  const diff::RngStream root(seed, 0x7121);
  ParameterSet& params = model.parameters();
  AdamState adam;
  const AdamOptions opt{config.learning_rate};
  auto best = params.snapshot();
  nlohmann::json best_extra = model.extra_state();
  rec.best_valid_auroc = -1;

  auto restore_best = [&] {
    params.restore(best);
    model.load_extra_state(best_extra);
  };

  std::vector<std::size_t> order(split.train.size());
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= config.max_epochs && rec.iterations < config.max_iterations; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    auto shuffle = root.substream("epoch").substream(epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    double loss_sum = 0, labelled = 0;
    for (std::size_t start = 0; start < order.size() && rec.iterations < config.max_iterations;
         start += config.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(config.batch_size, order.size() - start));
      const auto batch = model::make_batch(split.train, idx);
      auto rng = root.substream("step").substream(rec.iterations);
      const auto result = model.forward(batch, model::Phase::train, rng);
      const diff::Tensor loss = model.objective(batch, result, static_cast<Real>(config.l2));
      if (!std::isfinite(loss.item())) {
        restore_best();
        throw NonFiniteError("non-finite loss at iteration " + std::to_string(rec.iterations) + " (epoch " +
                             std::to_string(epoch) + ")");
      }
      params.zero_grad();
      loss.backward();
      try {
        adam_step(params, adam, opt);
      } catch (const NonFiniteError& e) {
        restore_best();
        throw NonFiniteError(std::string(e.what()) + " at iteration " + std::to_string(rec.iterations));
      }
      model.after_step(batch, result);
      ++rec.iterations;
      loss_sum += loss.item();
      for (std::size_t d = 0; d < batch.num_tasks; ++d) labelled += static_cast<double>(batch.labelled_count(d));
    }

    const auto valid = evaluate(model, split.valid, config.eval_batch_size, seed);
    const double score = eval::macro(valid);
    rec.epochs.push_back(epoch);
    rec.train_loss.push_back(labelled > 0 ? loss_sum / labelled : 0.0);
    rec.valid_auroc.push_back(score);
    if (score > rec.best_valid_auroc) {
      rec.best_valid_auroc = score;
      rec.best_epoch = epoch;
      rec.valid_task_auroc = valid;
      best = params.snapshot();
      best_extra = model.extra_state();
      since_best = 0;
    } else if (++since_best >= config.patience) {
      rec.stop_reason = "patience";
      break;
    }
  }
  if (rec.stop_reason.empty())
    rec.stop_reason = rec.iterations >= config.max_iterations ? "max_iterations" : "max_epochs";
  restore_best();
  if (!split.test.empty()) rec.test_auroc = evaluate(model, split.test, config.eval_batch_size, seed);
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return rec;
}

std::vector<GridCell> canonical_cells(std::vector<GridCell> cells) {
  std::sort(cells.begin(), cells.end(), [](const auto& a, const auto& b) { return cell_tuple(a) < cell_tuple(b); });
  cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
  return cells;
}

std::optional<std::size_t> select_cell(const std::vector<double>& scores) {
  std::optional<std::size_t> best;
  // Scores arrive in tie-break order, so only a strict improvement wins.
  for (std::size_t c = 0; c < scores.size(); ++c) {
    if (std::isnan(scores[c])) continue;
    if (!best || scores[c] > scores[*best]) best = c;
  }
  return best;
}

GridResult grid_search(const ModelFactory& factory, const ModelConfig& base, const TrainConfig& config,
                       const std::vector<GridCell>& cells, const data::DatasetSplit& split,
                       const std::vector<std::uint64_t>& seeds, std::size_t workers) {
  if (cells.empty()) throw ConfigError("grid_search: empty grid");
  if (seeds.empty()) throw ConfigError("grid_search: no seeds");
  const std::vector<GridCell> sorted = canonical_cells(cells);

  GridResult result;
  for (const auto& c : sorted)
    for (auto s : seeds) result.runs.push_back({c, s, {}, {}});

  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < result.runs.size(); i = next++) {
      GridRun& run = result.runs[i];  // each slot has exactly one writer
      try {
        ModelConfig mc = base;
        TrainConfig tc = config;
        tc.apply(run.cell, mc);
        auto model = factory(mc, run.seed);
        run.record = fit(*model, split, tc, run.seed);
      } catch (const std::exception& e) {
        run.error = e.what();
      }
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, result.runs.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  std::vector<double> scores(sorted.size(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t c = 0; c < sorted.size(); ++c) {
    double sum = 0;
    std::size_t ok = 0;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const auto& run = result.runs[c * seeds.size() + s];
      if (!run.error.empty()) continue;
      sum += run.record.best_valid_auroc;
      ++ok;
    }
    if (ok > 0) scores[c] = sum / static_cast<double>(ok);
  }
  const auto best = select_cell(scores);
  if (best) {
    result.best = sorted[*best];
    result.best_score = scores[*best];
  }
  if (!best) throw std::runtime_error("grid_search: every run failed; first error: " + result.runs.front().error);
  return result;
}

}  // namespace tpamtl::train
