#include "tpamtl/eval/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>

namespace tpamtl::eval {

namespace fs = std::filesystem;
using transfer::TransferGraph;

namespace {

// 1-based ranks, ties share their average rank.
std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return x[a] < x[b]; });
  std::vector<double> rank(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double auroc(const std::vector<double>& scores, const std::vector<double>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auroc: scores and labels differ in length");
  double positives = 0, negatives = 0, rank_sum = 0;
  const auto rank = average_ranks(scores);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      positives += 1;
      rank_sum += rank[i];
    } else if (labels[i] == 0) {
      negatives += 1;
    } else {
      throw std::invalid_argument("auroc: labels must be 0 or 1");
    }
    if (std::isnan(scores[i])) throw std::invalid_argument("auroc: NaN score");
  }
  if (positives == 0 || negatives == 0) throw UndefinedMetricError("auroc is undefined when only one class is present");
  return (rank_sum - positives * (positives + 1) / 2) / (positives * negatives);
}

std::vector<double> task_aurocs(const std::vector<std::vector<double>>& probabilities,
                                const std::vector<double>& labels, const std::vector<double>& mask,
                                std::size_t num_tasks) {
  std::vector<double> out(num_tasks, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t d = 0; d < num_tasks; ++d) {
    std::vector<double> s, y;
    for (std::size_t b = 0; b < probabilities[d].size(); ++b) {
      if (mask[b * num_tasks + d] == 0) continue;
      s.push_back(probabilities[d][b]);
      y.push_back(labels[b * num_tasks + d]);
    }
    try {
      out[d] = auroc(s, y);
    } catch (const UndefinedMetricError&) {
    }
  }
  return out;
}

double macro(const std::vector<double>& per_task) {
  double sum = 0;
  std::size_t n = 0;
  for (double v : per_task)
    if (!std::isnan(v)) {
      sum += v;
      ++n;
    }
  if (n == 0) throw UndefinedMetricError("macro average: no task has a defined value");
  return sum / static_cast<double>(n);
}

// ---- aggregation ---------------------------------------------------------------

Cell summarize(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("summarize: no values");
  // Sorting makes the floating-point sums independent of run order.
  std::sort(values.begin(), values.end());
  Cell c;
  c.runs = values.size();
  const double n = static_cast<double>(values.size());
  c.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - c.mean) * (v - c.mean);
    c.se = std::sqrt(ss / (n - 1)) / std::sqrt(n);
  }
  return c;
}

const ResultRow& ResultTable::row(const std::string& variant) const {
  for (const auto& r : rows)
    if (r.variant == variant) return r;
  throw std::out_of_range("no result row for variant '" + variant + "'");
}

std::string ResultTable::to_text() const {
  std::size_t width = 8;
  for (const auto& r : rows) width = std::max(width, r.variant.size());
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(width)) << "variant";
  for (const auto& t : task_names) out << "  " << std::setw(17) << t;
  out << "  " << "macro" << '\n';
  out << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    out << std::left << std::setw(static_cast<int>(width)) << r.variant;
    for (const auto& c : r.tasks) {
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(4) << c.mean << " +- " << c.se;
      out << "  " << std::setw(17) << cell.str();
    }
    out << "  " << r.macro.mean << " +- " << r.macro.se << '\n';
  }
  return out.str();
}

nlohmann::json ResultTable::to_json() const {
  auto cell = [](const Cell& c) { return nlohmann::json{{"mean", c.mean}, {"stderr", c.se}, {"runs", c.runs}}; };
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& c : r.tasks) tasks.push_back(cell(c));
    rows_json.push_back({{"variant", r.variant}, {"tasks", tasks}, {"macro", cell(r.macro)}});
  }
  return {{"tasks", task_names}, {"rows", rows_json}};
}

ResultTable aggregate(const std::vector<RunScores>& runs, std::vector<std::string> task_names,
                      std::size_t min_runs) {
  if (runs.empty()) throw std::invalid_argument("aggregate: no runs");
  const std::size_t D = runs.front().task_auroc.size();
  if (task_names.empty())
    for (std::size_t d = 0; d < D; ++d) task_names.push_back("task" + std::to_string(d));
  if (task_names.size() != D) throw std::invalid_argument("aggregate: task name count differs from task count");
  std::map<std::string, std::vector<const RunScores*>> by_variant;
  for (const auto& r : runs) {
    if (r.task_auroc.size() != D) {
      throw std::invalid_argument("aggregate: run '" + r.run + "' of '" + r.variant + "' has " +
                                  std::to_string(r.task_auroc.size()) + " tasks, expected " + std::to_string(D));
    }
    by_variant[r.variant].push_back(&r);
  }
  ResultTable table;
  table.task_names = std::move(task_names);
  for (const auto& [variant, list] : by_variant) {
    if (list.size() < min_runs) {
      throw std::invalid_argument("aggregate: variant '" + variant + "' has " + std::to_string(list.size()) +
                                  " runs, need at least " + std::to_string(min_runs));
    }
    ResultRow row;
    row.variant = variant;
    for (std::size_t d = 0; d < D; ++d) {
      std::vector<double> values;
      for (const auto* r : list) {
        if (std::isnan(r->task_auroc[d])) {
          throw std::invalid_argument("aggregate: missing value for task " + std::to_string(d) + " in run '" +
                                      r->run + "' of '" + variant + "'");
        }
        values.push_back(r->task_auroc[d]);
      }
      row.tasks.push_back(summarize(std::move(values)));
    }
    std::vector<double> macros;
    for (const auto* r : list) macros.push_back(macro(r->task_auroc));
    row.macro = summarize(std::move(macros));
    table.rows.push_back(std::move(row));
  }
  return table;
}

// ---- negative transfer -------------------------------------------------------

NegativeTransferReport negative_transfer_report(const ResultRow& stl, const std::vector<ResultRow>& others) {
  NegativeTransferReport report;
  for (const auto& row : others) {
    if (row.tasks.size() != stl.tasks.size()) {
      throw std::invalid_argument("negative_transfer_report: '" + row.variant + "' has " +
                                  std::to_string(row.tasks.size()) + " tasks but the STL row has " +
                                  std::to_string(stl.tasks.size()));
    }
    report.counts[row.variant] = 0;
    report.counts_beyond_se[row.variant] = 0;
    for (std::size_t d = 0; d < row.tasks.size(); ++d) {
      const Cell& a = stl.tasks[d];
      const Cell& b = row.tasks[d];
      if (!(b.mean < a.mean)) continue;
      TransferFlag f{row.variant, d, a.mean, b.mean, a.mean - b.mean > std::hypot(a.se, b.se)};
      ++report.counts[row.variant];
      if (f.beyond_stderr) ++report.counts_beyond_se[row.variant];
      report.flags.push_back(f);
    }
  }
  return report;
}

std::string NegativeTransferReport::to_text(const std::vector<std::string>& task_names) const {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  for (const auto& f : flags) {
    const std::string task = f.task < task_names.size() ? task_names[f.task] : "task" + std::to_string(f.task);
    out << f.variant << "  " << task << "  " << f.value << " < " << f.stl
        << (f.beyond_stderr ? "  (beyond 1 stderr)" : "") << '\n';
  }
  for (const auto& [variant, n] : counts)
    out << variant << ": " << n << " flagged, " << counts_beyond_se.at(variant) << " beyond 1 stderr\n";
  return out.str();
}

// ---- rank correlation --------------------------------------------------------

Correlation spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman: series differ in length");
  if (x.size() < 3) throw UndefinedMetricError("spearman needs at least 3 points");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mean = (n + 1) / 2;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mean) * (ry[i] - mean);
    sxx += (rx[i] - mean) * (rx[i] - mean);
    syy += (ry[i] - mean) * (ry[i] - mean);
  }
  if (sxx == 0 || syy == 0) throw UndefinedMetricError("spearman is undefined for a constant series");
  Correlation c;
  c.n = x.size();
  c.rho = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  if (std::abs(c.rho) >= 1) {
    c.p_value = 0;
  } else {
    const double dof = n - 2;
    const double t = c.rho * std::sqrt(dof / (1 - c.rho * c.rho));
    c.p_value = 2 * boost::math::cdf(boost::math::complement(boost::math::students_t(dof), std::abs(t)));
  }
  return c;
}

UncertaintyTrace uncertainty_trace(const std::vector<TransferGraph>& graphs,
                                   const std::vector<std::vector<bool>>& allowed) {
  if (graphs.empty()) throw std::invalid_argument("uncertainty_trace: no graphs");
  UncertaintyTrace tr;
  tr.tasks = graphs.front().tasks;
  tr.timesteps = graphs.front().timesteps;
  const std::size_t D = tr.tasks, T = tr.timesteps;
  if (allowed.size() != D) throw std::invalid_argument("uncertainty_trace: allowed matrix has the wrong size");
  tr.variance.assign(D * T, 0.0);
  tr.outgoing.assign(D * T, 0.0);
  tr.incoming.assign(D * T, 0.0);
  std::vector<std::size_t> out_pairs(D, 0), in_pairs(D, 0);
  for (std::size_t j = 0; j < D; ++j)
    for (std::size_t d = 0; d < D; ++d)
      if (allowed[j][d]) {
        ++out_pairs[j];
        ++in_pairs[d];
      }
  for (const auto& g : graphs) {
    if (g.tasks != D || g.timesteps != T) throw std::invalid_argument("uncertainty_trace: graphs differ in shape");
    for (std::size_t task = 0; task < D; ++task) {
      for (std::size_t t = 0; t < T; ++t) {
        tr.variance[task * T + t] += g.total_variance(task, t);
        for (std::size_t other = 0; other < D; ++other) {
          if (allowed[task][other]) tr.outgoing[task * T + t] += transfer::normalized_outgoing(g, task, t, other);
          if (allowed[other][task]) tr.incoming[task * T + t] += transfer::normalized_incoming(g, task, t, other);
        }
      }
    }
  }
  const double n = static_cast<double>(graphs.size());
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t task = 0; task < D; ++task) {
    for (std::size_t t = 0; t < T; ++t) {
      tr.variance[task * T + t] /= n;
      tr.outgoing[task * T + t] = out_pairs[task] ? tr.outgoing[task * T + t] / (n * static_cast<double>(out_pairs[task])) : nan;
      tr.incoming[task * T + t] = in_pairs[task] ? tr.incoming[task * T + t] / (n * static_cast<double>(in_pairs[task])) : nan;
    }
  }
  return tr;
}

CorrelationReport uncertainty_transfer_correlation(const std::vector<UncertaintyTrace>& traces) {
  std::vector<double> vo, o, vi, in;
  for (const auto& tr : traces) {
    for (std::size_t i = 0; i < tr.variance.size(); ++i) {
      if (!std::isnan(tr.outgoing[i])) {
        vo.push_back(tr.variance[i]);
        o.push_back(tr.outgoing[i]);
      }
      if (!std::isnan(tr.incoming[i])) {
        vi.push_back(tr.variance[i]);
        in.push_back(tr.incoming[i]);
      }
    }
  }
  if (vo.size() < 20 || vi.size() < 20) {
    throw UndefinedMetricError("uncertainty/transfer correlation needs at least 20 (task, step) points");
  }
  return {spearman(vo, o), spearman(vi, in)};
}

TransferGraph mean_graph(const std::vector<TransferGraph>& graphs) {
  if (graphs.empty()) throw std::invalid_argument("mean_graph: no graphs");
  TransferGraph out(graphs.front().tasks, graphs.front().timesteps);
  for (const auto& g : graphs) {
    if (g.tasks != out.tasks || g.timesteps != out.timesteps) throw std::invalid_argument("mean_graph: graphs differ in shape");
    for (std::size_t i = 0; i < g.alpha.size(); ++i) out.alpha[i] += g.alpha[i];
    for (std::size_t i = 0; i < g.epistemic.size(); ++i) {
      out.epistemic[i] += g.epistemic[i];
      out.aleatoric[i] += g.aleatoric[i];
    }
  }
  const auto n = static_cast<Real>(graphs.size());
  for (auto& v : out.alpha) v /= n;
  for (auto& v : out.epistemic) v /= n;
  for (auto& v : out.aleatoric) v /= n;
  return out;
}

// ---- export ------------------------------------------------------------------

void write_graph_csv(const fs::path& path, const TransferGraph& g, const std::string& note) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << kGraphHeader << '\n';
  if (g.empty()) {
    out << "# " << (note.empty() ? "no transfer in this model" : note) << '\n';
    return;
  }
  out << std::setprecision(std::numeric_limits<Real>::max_digits10);
  const std::size_t T = g.timesteps;
  for (std::size_t j = 0; j < g.tasks; ++j)
    for (std::size_t d = 0; d < g.tasks; ++d)
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t t = 0; t < T; ++t)
          out << j << ',' << d << ',' << i << ',' << t << ',' << g.at(j, d, i, t) << ',' << g.epistemic[j * T + i]
              << ',' << g.aleatoric[j * T + i] << ',' << g.epistemic[d * T + t] << ',' << g.aleatoric[d * T + t]
              << '\n';
  if (!out) throw std::runtime_error("error writing " + path.string());
}

TransferGraph read_graph_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kGraphHeader) throw std::runtime_error(path.string() + ": unexpected header");
  struct Rec {
    std::size_t j, d, i, t;
    double v[5];
  };
  std::vector<Rec> recs;
  std::size_t tasks = 0, steps = 0, line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    std::istringstream ss(line);
    Rec r{};
    char c1, c2, c3, c4, c5, c6, c7, c8;
    ss >> r.j >> c1 >> r.d >> c2 >> r.i >> c3 >> r.t >> c4 >> r.v[0] >> c5 >> r.v[1] >> c6 >> r.v[2] >> c7 >> r.v[3] >>
        c8 >> r.v[4];
    if (!ss) throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": malformed record");
    tasks = std::max({tasks, r.j + 1, r.d + 1});
    steps = std::max({steps, r.i + 1, r.t + 1});
    recs.push_back(r);
  }
  TransferGraph g(tasks, steps);
  for (const auto& r : recs) {
    g.at(r.j, r.d, r.i, r.t) = static_cast<Real>(r.v[0]);
    g.epistemic[r.j * steps + r.i] = static_cast<Real>(r.v[1]);
    g.aleatoric[r.j * steps + r.i] = static_cast<Real>(r.v[2]);
    g.epistemic[r.d * steps + r.t] = static_cast<Real>(r.v[3]);
    g.aleatoric[r.d * steps + r.t] = static_cast<Real>(r.v[4]);
  }
  return g;
}

}  // namespace tpamtl::eval
