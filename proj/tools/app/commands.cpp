#include "commands.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "tpamtl/model/checkpoint.hpp"

namespace tpamtl::app {

namespace {

constexpr const char* kRecordFile = "record.json";
constexpr const char* kCheckpointFile = "model.json";
constexpr const char* kCompletedFile = "completed.json";

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out.flush()) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw std::runtime_error(path.string() + " is not valid JSON");
  return j;
}

// Keys that may change between invocations without invalidating results.
nlohmann::json comparable(nlohmann::json source) {
  if (source.contains("eval")) {
    source["eval"].erase("workers");
    source["eval"].erase("output_dir");
    source["eval"].erase("graph_instances");
  }
  return source;
}

std::set<std::string> read_completed(const fs::path& out) {
  const fs::path path = out / kCompletedFile;
  if (!fs::exists(path)) return {};
  const auto j = read_json(path);
  return j.at("cells").get<std::set<std::string>>();
}

void write_completed(const fs::path& out, const std::set<std::string>& cells) {
  write_json(out / kCompletedFile, {{"format", "tpamtl-completed"}, {"version", 1}, {"cells", cells}});
}

model::ModelConfig shaped(const model::ModelConfig& base, const data::DatasetSplit& split) {
  model::ModelConfig mc = base;
  mc.num_tasks = split.num_tasks;
  mc.num_features = split.num_features;
  return mc;
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

}  // namespace

std::string CellId::key() const { return variant + "/" + cell.key() + "/seed" + std::to_string(seed); }

std::vector<std::string> task_names(std::size_t tasks) {
  std::vector<std::string> names;
  for (std::size_t d = 0; d < tasks; ++d) names.push_back("task" + std::to_string(d));
  return names;
}

std::vector<train::GridCell> experiment_cells(const ExperimentConfig& config) {
  if (config.eval.grid_search) return train::enumerate(config.train.grid);
  train::GridCell cell;
  cell.hidden_size = config.model.hidden_size;
  cell.embed_layers = config.model.embed_layers;
  cell.batch_size = config.train.batch_size;
  cell.learning_rate = config.train.learning_rate;
  cell.l2 = config.train.l2;
  cell.dropout_rate = config.train.dropout_rate;
  return {cell};
}

std::vector<CellId> experiment_plan(const ExperimentConfig& config) {
  const auto cells = experiment_cells(config);
  std::vector<CellId> plan;
  for (const auto& v : config.variants)
    for (const auto& c : cells)
      for (std::size_t s = 0; s < config.eval.runs; ++s) plan.push_back({v.display_name(), c, config.train.seeds[s]});
  return plan;
}

void save_experiment(const ExperimentConfig& config, const fs::path& out) {
  const fs::path path = out / "experiment.json";
  if (fs::exists(path)) {
    const auto existing = read_json(path);
    if (comparable(existing) != comparable(config.source)) {
      throw std::runtime_error(out.string() + " already holds a different experiment; use another output directory");
    }
  }
  write_json(path, config.source);
}

ExperimentConfig load_saved_experiment(const fs::path& out) {
  const fs::path path = out / "experiment.json";
  if (!fs::exists(path)) throw std::runtime_error(out.string() + " is not an experiment directory (no experiment.json)");
  return parse_experiment(read_json(path));
}

data::DatasetSplit generate_command(const ExperimentConfig& config, const fs::path& out, std::ostream& log) {
  fs::create_directories(out);
  auto split = prepare_dataset(config, out);
  log << "dataset: " << split.num_tasks << " tasks, " << split.num_features << " features, " << split.timesteps
      << " steps; train " << split.train.size() << ", valid " << split.valid.size() << ", test " << split.test.size()
      << "\n";
  if (config.dataset.synthetic) log << "written to " << (out / "dataset").string() << "\n";
  return split;
}

std::vector<Selection> select_cells(const ExperimentConfig& config, const fs::path& out,
                                    std::vector<std::string>* missing) {
  const auto cells = experiment_cells(config);
  std::vector<Selection> result;
  for (const auto& v : config.variants) {
    std::vector<double> scores(cells.size(), std::numeric_limits<double>::quiet_NaN());
    std::vector<std::vector<train::RunRecord>> records(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      bool complete = true;
      double sum = 0;
      for (std::size_t s = 0; s < config.eval.runs; ++s) {
        const CellId id{v.display_name(), cells[c], config.train.seeds[s]};
        const fs::path path = out / "runs" / id.key() / kRecordFile;
        if (!fs::exists(path)) {
          if (missing) missing->push_back(id.key());
          complete = false;
          continue;
        }
        auto rec = read_json(path).get<train::RunRecord>();
        sum += rec.best_valid_auroc;
        records[c].push_back(std::move(rec));
      }
      // A cell competes only with every seed present.
      if (complete) scores[c] = sum / static_cast<double>(config.eval.runs);
    }
    const auto best = train::select_cell(scores);
    if (!best) continue;
    result.push_back({v.display_name(), cells[*best], scores[*best], std::move(records[*best])});
  }
  return result;
}

namespace {

struct Tables {
  eval::ResultTable table;
  std::optional<eval::NegativeTransferReport> negative;
};

Tables build_tables(const ExperimentConfig& config, const std::vector<Selection>& selections, std::size_t tasks) {
  std::vector<eval::RunScores> runs;
  for (const auto& sel : selections)
    for (std::size_t r = 0; r < sel.records.size(); ++r)
      runs.push_back({sel.variant, "seed" + std::to_string(sel.records[r].seed), sel.records[r].test_auroc});
  Tables t;
  t.table = eval::aggregate(runs, task_names(tasks));
  // The first STL-family variant is the reference row.
  for (const auto& v : config.variants) {
    if (v.family != variants::Family::stl) continue;
    std::vector<eval::ResultRow> others;
    for (const auto& row : t.table.rows)
      if (row.variant != v.display_name()) others.push_back(row);
    t.negative = eval::negative_transfer_report(t.table.row(v.display_name()), others);
    break;
  }
  return t;
}

nlohmann::json selection_json(const std::vector<Selection>& selections) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& s : selections) {
    nlohmann::json seeds = nlohmann::json::array();
    for (const auto& r : s.records) seeds.push_back(r.seed);
    j.push_back({{"variant", s.variant}, {"cell", s.cell.key()}, {"mean_best_valid_auroc", s.score}, {"seeds", seeds}});
  }
  return j;
}

void write_tables(const fs::path& dir, const Tables& t, const std::vector<Selection>& selections) {
  nlohmann::json results = t.table.to_json();
  results["selection"] = selection_json(selections);
  write_json(dir / "results.json", results);
  std::string text = t.table.to_text();
  for (const auto& s : selections) text += s.variant + " uses " + s.cell.key() + "\n";
  write_text(dir / "results.txt", text);
  if (t.negative) {
    write_text(dir / "negative_transfer.txt", t.negative->to_text(t.table.task_names));
  } else {
    write_text(dir / "negative_transfer.txt", "no STL variant in this experiment; nothing to compare against\n");
  }
}

}  // namespace

RunSummary run_command(const ExperimentConfig& config, const fs::path& out, std::ostream& log) {
  fs::create_directories(out);
  save_experiment(config, out);
  const auto split = prepare_dataset(config, out);
  const auto plan = experiment_plan(config);
  std::map<std::string, const variants::VariantSpec*> specs;
  for (const auto& v : config.variants) specs[v.display_name()] = &v;

  std::set<std::string> completed = read_completed(out);
  std::vector<const CellId*> pending;
  RunSummary summary;
  for (const auto& id : plan) {
    if (completed.contains(id.key()) && fs::exists(out / "runs" / id.key() / kRecordFile)) {
      ++summary.skipped;
    } else {
      completed.erase(id.key());
      pending.push_back(&id);
    }
  }
  log << plan.size() << " cells, " << summary.skipped << " already complete, " << pending.size() << " to run\n";

  std::mutex mutex;  // guards `completed`, `summary` and `log`
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < pending.size(); i = next++) {
      const CellId& id = *pending[i];
      const fs::path dir = out / "runs" / id.key();
      std::string error;
      train::RunRecord rec;
      try {
        const auto& spec = *specs.at(id.variant);
        model::ModelConfig mc = shaped(config.model, split);
        train::TrainConfig tc = config.train;
        tc.apply(id.cell, mc);
        auto m = variants::build(spec, mc, id.seed);
        rec = train::fit(*m, split, tc, id.seed);
        rec.checkpoint = kCheckpointFile;
        fs::create_directories(dir);
        model::save_checkpoint(dir / kCheckpointFile, model::make_checkpoint(*m, spec));
        // The record is written last; its presence marks the cell as done.
        write_json(dir / kRecordFile, rec);
      } catch (const std::exception& e) {
        error = e.what();
      }
      std::lock_guard lock(mutex);
      if (error.empty()) {
        completed.insert(id.key());
        write_completed(out, completed);
        ++summary.executed;
        log << "done " << id.key() << ": valid " << fixed(rec.best_valid_auroc) << " test "
            << fixed(rec.test_macro()) << " (" << rec.stop_reason << ", " << fixed(rec.wall_seconds, 1) << " s)\n";
      } else {
        summary.failed.push_back(id.key() + ": " + error);
        write_text(dir / "error.txt", error + "\n");
        log << "FAILED " << id.key() << ": " << error << "\n";
      }
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(config.eval.workers, 1, std::max<std::size_t>(pending.size(), 1));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  write_completed(out, completed);

  std::vector<std::string> missing;
  const auto selections = select_cells(config, out, &missing);
  if (!summary.failed.empty()) {
    write_text(out / "failed.txt", [&] {
      std::string s;
      for (const auto& f : summary.failed) s += f + "\n";
      return s;
    }());
  } else if (fs::exists(out / "failed.txt")) {
    fs::remove(out / "failed.txt");
  }
  if (config.eval.runs < 2) {
    log << "result tables need at least 2 runs per variant; only the run records were written\n";
  } else if (missing.empty()) {
    const auto tables = build_tables(config, selections, split.num_tasks);
    write_tables(out, tables, selections);
    summary.table = tables.table;
    summary.table_ready = true;
    log << "\n" << tables.table.to_text();
    if (tables.negative) log << "\n" << tables.negative->to_text(tables.table.task_names);
  } else {
    log << missing.size() << " cells have no record; results were not written\n";
  }
  return summary;
}

namespace {

struct GraphBatch {
  std::vector<transfer::TransferGraph> graphs;  // one per episode, in order
};

// Forward pass over the episodes in eval chunks, one graph per instance.
GraphBatch collect_graphs(model::MultiTaskModel& m, const std::vector<data::Episode>& episodes, std::size_t chunk,
                          std::uint64_t seed) {
  GraphBatch out;
  const std::size_t D = m.config().num_tasks;
  diff::RngStream rng(seed, 0xE7A1);
  for (std::size_t start = 0; start < episodes.size(); start += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, episodes.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto batch = model::make_batch(episodes, idx);
    const auto result = m.forward(batch, model::Phase::eval, rng);
    std::vector<diff::Tensor> epistemic, aleatoric;
    for (const auto& lat : result.latents) {
      epistemic.push_back(lat.mc_variance);
      aleatoric.push_back(lat.aleatoric_variance());
    }
    for (std::size_t b = 0; b < batch.batch; ++b) {
      out.graphs.push_back(transfer::extract_graph(result.alphas, D, batch.batch, b, batch.lengths[b], epistemic,
                                                   aleatoric));
    }
  }
  return out;
}

nlohmann::json correlation_json(const eval::Correlation& c) {
  return {{"rho", c.rho}, {"p_value", c.p_value}, {"n", c.n}};
}

}  // namespace

AnalyzeSummary analyze_command(const fs::path& out, std::size_t instances, std::ostream& log) {
  const auto config = load_saved_experiment(out);
  const auto split = prepare_dataset(config, out);
  AnalyzeSummary summary;
  const auto selections = select_cells(config, out, &summary.missing);
  if (!summary.missing.empty()) {
    log << "experiment is incomplete; missing cells:\n";
    for (const auto& m : summary.missing) log << "  " << m << "\n";
    return summary;
  }
  const fs::path dir = out / "analysis";
  fs::create_directories(dir);
  const auto tables = build_tables(config, selections, split.num_tasks);
  write_tables(dir, tables, selections);
  summary.table = tables.table;
  log << tables.table.to_text();
  if (tables.negative) log << "\n" << tables.negative->to_text(tables.table.task_names);

  const std::size_t D = split.num_tasks;
  nlohmann::json correlation = nlohmann::json::object();
  for (const auto& sel : selections) {
    const fs::path vdir = dir / "graphs" / sel.variant;
    nlohmann::json per_seed = nlohmann::json::array();
    std::vector<eval::UncertaintyTrace> traces;
    for (const auto& rec : sel.records) {
      const fs::path run_dir = out / "runs" / CellId{sel.variant, sel.cell, rec.seed}.key();
      const auto ckpt = model::load_checkpoint(run_dir / rec.checkpoint);
      const auto spec = ckpt.variant.get<variants::VariantSpec>();
      auto m = variants::build(spec, ckpt.config, rec.seed);
      model::apply_checkpoint(ckpt, *m);
      const fs::path sdir = vdir / ("seed" + std::to_string(rec.seed));
      if (!m->has_transfer()) {
        eval::write_graph_csv(sdir / "graph.csv", {}, "variant " + sel.variant + " (" + std::string(to_string(spec.family)) +
                                                     ") has no inter-task transfer; there are no edges to export");
        ++summary.graphs_written;
        continue;
      }
      const auto graphs = collect_graphs(*m, split.test, rec.train.eval_batch_size, rec.seed).graphs;
      for (std::size_t i = 0; i < std::min(instances, graphs.size()); ++i) {
        eval::write_graph_csv(sdir / ("instance_" + split.test[i].id + ".csv"), graphs[i]);
        ++summary.graphs_written;
      }
      // Traces need a common length; instances shorter than the longest are left out.
      std::vector<transfer::TransferGraph> full;
      for (const auto& g : graphs)
        if (g.timesteps == split.timesteps) full.push_back(g);
      if (full.empty()) continue;
      eval::write_graph_csv(sdir / "mean.csv", eval::mean_graph(full));
      std::vector<std::vector<bool>> allowed(D, std::vector<bool>(D));
      for (std::size_t j = 0; j < D; ++j)
        for (std::size_t d = 0; d < D; ++d)
          allowed[j][d] = j != d && transfer::source_task_allowed(m->config().transfer_mode, j, d);
      traces.push_back(eval::uncertainty_trace(full, allowed));
      try {
        const auto c = eval::uncertainty_transfer_correlation({traces.back()});
        per_seed.push_back({{"seed", rec.seed}, {"outgoing", correlation_json(c.outgoing)},
                            {"incoming", correlation_json(c.incoming)}});
      } catch (const std::exception& e) {
        per_seed.push_back({{"seed", rec.seed}, {"error", e.what()}});
      }
    }
    if (traces.empty()) continue;
    nlohmann::json entry{{"cell", sel.cell.key()}, {"per_seed", per_seed}};
    try {
      const auto pooled = eval::uncertainty_transfer_correlation(traces);
      entry["pooled"] = {{"outgoing", correlation_json(pooled.outgoing)},
                         {"incoming", correlation_json(pooled.incoming)}};
      log << sel.variant << ": variance vs outgoing rho " << fixed(pooled.outgoing.rho, 3) << " (p "
          << fixed(pooled.outgoing.p_value, 3) << "), vs incoming rho " << fixed(pooled.incoming.rho, 3) << " (p "
          << fixed(pooled.incoming.p_value, 3) << ")\n";
    } catch (const std::exception& e) {
      entry["pooled"] = {{"error", e.what()}};
    }
    correlation[sel.variant] = entry;
  }
  write_json(dir / "correlation.json", correlation);
  summary.correlation = correlation;
  log << summary.graphs_written << " graph files under " << (dir / "graphs").string() << "\n";
  return summary;
}

void inspect_checkpoint_command(const fs::path& path, std::ostream& out) {
  const auto ckpt = model::load_checkpoint(path);
  std::size_t total = 0;
  for (const auto& p : ckpt.parameters) total += p.values.size();
  out << "family: " << ckpt.family << "\n";
  out << "variant: " << ckpt.variant.dump() << "\n";
  out << "config: " << nlohmann::json(ckpt.config).dump() << "\n";
  out << "parameters: " << ckpt.parameters.size() << " tensors, " << total << " values\n";
  for (const auto& p : ckpt.parameters) {
    double sq = 0;
    for (double v : p.values) sq += v * v;
    out << "  " << p.name << " [";
    for (std::size_t i = 0; i < p.shape.size(); ++i) out << (i ? "x" : "") << p.shape[i];
    out << "] norm " << fixed(std::sqrt(sq), 6) << "\n";
  }
  if (!ckpt.extra.empty()) out << "extra state: " << ckpt.extra.dump() << "\n";
}

}  // namespace tpamtl::app
