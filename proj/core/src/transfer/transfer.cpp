#include "tpamtl/transfer/transfer.hpp"

#include <algorithm>
#include <stdexcept>

#include "tpamtl/diff/ops.hpp"

namespace tpamtl::transfer {

namespace d = tpamtl::diff;

namespace {

constexpr Real kMaskedLogit = Real(-1e30);

std::string pair_name(std::size_t source, std::size_t target) {
  return "transfer.F" + std::to_string(source) + "_" + std::to_string(target);
}

void check_rows(const Tensor& t, std::size_t rows, std::size_t cols, const char* what) {
  if (!t.defined() || t.rows() != rows || t.cols() != cols) {
    throw d::DimensionError(std::string(what) + ": expected [" + std::to_string(rows) + "x" +
                            std::to_string(cols) + "], got " +
                            (t.defined() ? d::to_string(t.shape()) : std::string("<undefined>")));
  }
}

Tensor constant_column(std::span<const Real> values) {
  return Tensor::from({values.size(), 1}, {values.begin(), values.end()});
}

Tensor log_mask_column(std::span<const Real> mask) {
  std::vector<Real> v(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) v[i] = mask[i] != 0 ? Real(0) : kMaskedLogit;
  const std::size_t n = v.size();
  return Tensor::from({n, 1}, std::move(v));
}

struct StepSources {
  std::vector<std::size_t> tasks;
  std::vector<Tensor> logits;
  std::vector<Tensor> encoded;
};

// Turns per-source logits into alpha columns and sums the gated, encoded
// source features. Shared by combine() and the incremental path so both
// evaluate the identical sequence of operations.
Tensor gate_and_sum(const ModelConfig& config, StepSources& sources, std::size_t batch,
                    std::span<const Real> source_mask, std::vector<Tensor>& alphas_out) {
  alphas_out.clear();
  if (sources.tasks.empty()) return {};
  const bool masked = !source_mask.empty();
  const std::size_t n = sources.logits.front().rows();

  if (config.alpha_normalization == model::AlphaNormalization::softmax) {
    Tensor stacked = d::concat_rows(sources.logits);
    if (masked) {
      std::vector<Real> tiled;
      for (std::size_t s = 0; s < sources.tasks.size(); ++s)
        tiled.insert(tiled.end(), source_mask.begin(), source_mask.end());
      stacked = d::add(stacked, log_mask_column(tiled));
    }
    const Tensor all = d::block_softmax(stacked, batch);
    for (std::size_t s = 0; s < sources.tasks.size(); ++s) {
      Tensor a = d::slice_rows(all, s * n, n);
      if (masked) a = d::mul(a, constant_column(source_mask));
      alphas_out.push_back(std::move(a));
    }
  } else {
    for (auto& logit : sources.logits) {
      Tensor a = d::sigmoid(logit);
      if (masked) a = d::mul(a, constant_column(source_mask));
      alphas_out.push_back(std::move(a));
    }
  }

  Tensor total;
  for (std::size_t s = 0; s < sources.tasks.size(); ++s) {
    Tensor part = d::block_sum_rows(d::mul_col(alphas_out[s], sources.encoded[s]), batch);
    total = total.defined() ? d::add(total, part) : part;
  }
  return total;
}

}  // namespace

TransferNet TransferNet::create(model::ParameterSet& params, const model::Initializer& init,
                                const std::string& name, std::size_t hidden, bool with_variance) {
  const std::size_t fan_in = (with_variance ? 4 : 2) * hidden;
  TransferNet net;
  auto weight = [&](const char* suffix, std::size_t rows, std::size_t cols, std::size_t fan) {
    const std::string full = name + "." + suffix;
    return params.add(full, init.uniform(full, rows, cols, fan));
  };
  net.w_source = weight("w_source", hidden, hidden, fan_in);
  net.w_target = weight("w_target", hidden, hidden, fan_in);
  if (with_variance) {
    net.w_source_var = weight("w_source_var", hidden, hidden, fan_in);
    net.w_target_var = weight("w_target_var", hidden, hidden, fan_in);
  }
  net.b1 = params.add(name + ".b1", init.fan_in_bias(name + ".b1", fan_in, hidden));
  net.w2 = params.add(name + ".w2", init.fan_in_uniform(name + ".w2", hidden, 1));
  net.b2 = params.add(name + ".b2", init.fan_in_bias(name + ".b2", hidden, 1));
  return net;
}

Tensor source_projection(const TransferNet& net, const Tensor& features, const Tensor& variance) {
  Tensor out = d::matmul(features, net.w_source);
  if (net.uses_variance()) out = d::add(out, d::matmul(variance, net.w_source_var));
  return out;
}

Tensor target_projection(const TransferNet& net, const Tensor& features, const Tensor& variance) {
  Tensor out = d::matmul(features, net.w_target);
  if (net.uses_variance()) out = d::add(out, d::matmul(variance, net.w_target_var));
  return d::add_row(out, net.b1);
}

Tensor transfer_logit(const TransferNet& net, const Tensor& source_proj, const Tensor& target_proj,
                      Real slope) {
  const Tensor hidden = d::leaky_relu(d::add(source_proj, target_proj), slope);
  return d::add_row(d::matmul(hidden, net.w2), net.b2);
}

Tensor transfer_weight(const TransferNet& net, const Tensor& source_features,
                       const Tensor& target_features, const Tensor& source_variance,
                       const Tensor& target_variance, Real slope) {
  return d::sigmoid(transfer_logit(net, source_projection(net, source_features, source_variance),
                                   target_projection(net, target_features, target_variance), slope));
}

LossGateNet LossGateNet::create(model::ParameterSet& params, const model::Initializer& init,
                                const std::string& name, std::size_t hidden) {
  LossGateNet net;
  net.w1 = params.add(name + ".w1", init.fan_in_uniform(name + ".w1", 2, hidden));
  net.b1 = params.add(name + ".b1", init.fan_in_bias(name + ".b1", 2, hidden));
  net.w2 = params.add(name + ".w2", init.fan_in_uniform(name + ".w2", hidden, 1));
  net.b2 = params.add(name + ".b2", init.fan_in_bias(name + ".b2", hidden, 1));
  return net;
}

Tensor loss_gate_logit(const LossGateNet& net, Real source_loss, Real target_loss, Real slope) {
  const Tensor input = Tensor::from({1, 2}, {source_loss, target_loss});
  const Tensor hidden = d::leaky_relu(d::add_row(d::matmul(input, net.w1), net.b1), slope);
  return d::add_row(d::matmul(hidden, net.w2), net.b2);
}

Tensor Adapter::encode(const Tensor& x, Real slope) const {
  return d::leaky_relu(to_shared.apply(x), slope);
}

Tensor Adapter::decode(const Tensor& x) const { return d::matmul(x, from_shared); }

TransferParams TransferParams::create(model::ParameterSet& params, const model::Initializer& init,
                                      const ModelConfig& config) {
  TransferParams out;
  const std::size_t D = config.num_tasks;
  const std::size_t k = config.hidden_size;
  out.num_tasks = D;
  if (config.transfer_mode == TransferMode::none) return out;

  out.nets.resize(D * D);
  out.loss_nets.resize(D * D);
  for (std::size_t j = 0; j < D; ++j) {
    for (std::size_t t = 0; t < D; ++t) {
      if (!source_task_allowed(config.transfer_mode, j, t)) continue;
      if (config.gate_input == model::GateInput::task_loss) {
        out.loss_nets[j * D + t] = LossGateNet::create(params, init, pair_name(j, t), k);
      } else {
        out.nets[j * D + t] = TransferNet::create(
            params, init, pair_name(j, t), k, config.gate_input == model::GateInput::uncertainty);
      }
    }
  }
  for (std::size_t t = 0; t < D; ++t) {
    const std::string name = "adapter" + std::to_string(t);
    Adapter a;
    a.to_shared = Dense::create(params, init, name + ".g1", k, k);
    a.from_shared = params.add(name + ".g2.W", init.constant(k, k, Real(0)));
    out.adapters.push_back(std::move(a));
  }
  return out;
}

SourceRange source_range(TransferMode mode, std::size_t t, std::size_t timesteps) {
  switch (mode) {
    case TransferMode::full:
    case TransferMode::intratask:
      return {0, t + 1};
    case TransferMode::samestep:
      return {t, 1};
    case TransferMode::unconstrained:
      return {0, timesteps};
    case TransferMode::none:
      return {t, 0};
  }
  throw model::ConfigError("unknown transfer mode");
}

bool source_task_allowed(TransferMode mode, std::size_t source, std::size_t target) {
  switch (mode) {
    case TransferMode::full:
    case TransferMode::unconstrained:
      return true;
    case TransferMode::intratask:
      return source == target;
    case TransferMode::samestep:
      return source != target;
    case TransferMode::none:
      return false;
  }
  throw model::ConfigError("unknown transfer mode");
}

CombineResult combine(const TransferParams& params, const ModelConfig& config,
                      const TransferInputs& in) {
  const std::size_t D = params.num_tasks;
  const std::size_t B = in.batch;
  const std::size_t T = in.timesteps;
  const std::size_t k = config.hidden_size;
  if (in.features.size() != D) {
    throw d::DimensionError("combine: expected features for " + std::to_string(D) + " tasks, got " +
                            std::to_string(in.features.size()));
  }
  for (const auto& f : in.features) check_rows(f, T * B, k, "combine features");
  const bool uses_loss = config.gate_input == model::GateInput::task_loss;
  const bool uses_var = config.gate_input == model::GateInput::uncertainty;
  if (uses_var) {
    if (in.variances.size() != D) throw d::DimensionError("combine: variances required by F");
    for (const auto& v : in.variances) check_rows(v, T * B, k, "combine variances");
  }
  if (uses_loss && in.task_losses.size() != D) {
    throw d::DimensionError("combine: task losses required by the loss gate");
  }
  if (!in.step_mask.empty() && in.step_mask.size() != T * B) {
    throw d::DimensionError("combine: step mask has " + std::to_string(in.step_mask.size()) +
                            " entries, expected " + std::to_string(T * B));
  }

  CombineResult result;
  if (config.transfer_mode == TransferMode::none) {
    result.combined.assign(in.features.begin(), in.features.end());
    return result;
  }

  const Real slope = config.leaky_slope;
  auto variance = [&](std::size_t task) { return uses_var ? in.variances[task] : Tensor{}; };

  std::vector<Tensor> encoded(D);
  std::vector<Tensor> src(D * D), tgt(D * D), static_logit(D * D);
  for (std::size_t j = 0; j < D; ++j) {
    bool used = false;
    for (std::size_t t = 0; t < D; ++t) {
      if (!source_task_allowed(config.transfer_mode, j, t)) continue;
      used = true;
      if (uses_loss) {
        static_logit[j * D + t] =
            loss_gate_logit(params.loss_net(j, t), in.task_losses[j], in.task_losses[t], slope);
      } else {
        const TransferNet& net = params.net(j, t);
        src[j * D + t] = source_projection(net, in.features[j], variance(j));
        tgt[j * D + t] = target_projection(net, in.features[t], variance(t));
      }
    }
    if (used) encoded[j] = params.adapters[j].encode(in.features[j], slope);
  }

  result.combined.resize(D);
  std::vector<Tensor> alphas;
  for (std::size_t target = 0; target < D; ++target) {
    std::vector<Tensor> steps(T);
    for (std::size_t t = 0; t < T; ++t) {
      const SourceRange range = source_range(config.transfer_mode, t, T);
      const std::size_t rows = range.count * B;
      StepSources sources;
      for (std::size_t j = 0; j < D; ++j) {
        if (!source_task_allowed(config.transfer_mode, j, target)) continue;
        const std::size_t pair = j * D + target;
        Tensor logit;
        if (uses_loss) {
          logit = d::broadcast(static_logit[pair], rows, 1);
        } else {
          const Tensor s = d::slice_rows(src[pair], range.first * B, rows);
          const Tensor u = d::tile_rows(d::slice_rows(tgt[pair], t * B, B), range.count);
          logit = transfer_logit(params.net(j, target), s, u, slope);
        }
        sources.tasks.push_back(j);
        sources.logits.push_back(std::move(logit));
        sources.encoded.push_back(d::slice_rows(encoded[j], range.first * B, rows));
      }
      const std::span<const Real> mask =
          in.step_mask.empty() ? std::span<const Real>{} : in.step_mask.subspan(range.first * B, rows);
      const Tensor total = gate_and_sum(config, sources, B, mask, alphas);
      const Tensor own = d::slice_rows(in.features[target], t * B, B);
      steps[t] = total.defined() ? d::add(own, params.adapters[target].decode(total)) : own;
      for (std::size_t s = 0; s < sources.tasks.size(); ++s) {
        result.alphas.push_back(
            {sources.tasks[s], target, t, range.first, range.count, std::move(alphas[s])});
      }
    }
    result.combined[target] = T == 1 ? steps[0] : d::concat_rows(steps);
  }
  return result;
}

IncrementalCombiner::IncrementalCombiner(const TransferParams& params, const ModelConfig& config,
                                         std::size_t batch)
    : params_(params), config_(config), batch_(batch) {
  if (config.transfer_mode == TransferMode::unconstrained) {
    throw model::ConfigError("incremental combination needs a causal transfer mode, not unconstrained");
  }
  const std::size_t D = params.num_tasks;
  source_proj_.resize(D * D);
  encoded_.resize(D);
}

std::vector<Tensor> IncrementalCombiner::step(std::span<const Tensor> features,
                                              std::span<const Tensor> variances,
                                              std::span<const Real> step_mask,
                                              std::span<const Real> task_losses) {
  const std::size_t D = params_.num_tasks;
  const std::size_t B = batch_;
  const std::size_t k = config_.hidden_size;
  const std::size_t t = steps_;
  if (features.size() != D) throw d::DimensionError("incremental step: wrong number of tasks");
  for (const auto& f : features) check_rows(f, B, k, "incremental step features");
  const bool uses_loss = config_.gate_input == model::GateInput::task_loss;
  const bool uses_var = config_.gate_input == model::GateInput::uncertainty;
  if (uses_var) {
    if (variances.size() != D) throw d::DimensionError("incremental step: variances required by F");
    for (const auto& v : variances) check_rows(v, B, k, "incremental step variances");
  }
  if (!step_mask.empty() && step_mask.size() != B) {
    throw d::DimensionError("incremental step: mask must have one entry per batch row");
  }
  const Real slope = config_.leaky_slope;
  last_alphas_.clear();

  if (config_.transfer_mode == TransferMode::none) {
    ++steps_;
    return {features.begin(), features.end()};
  }

  if (step_mask.empty()) {
    mask_.insert(mask_.end(), B, Real(1));
  } else {
    mask_.insert(mask_.end(), step_mask.begin(), step_mask.end());
  }
  auto variance = [&](std::size_t task) { return uses_var ? variances[task] : Tensor{}; };

  // Extend the caches with this step's source-side quantities.
  std::vector<Tensor> tgt(D * D);
  for (std::size_t j = 0; j < D; ++j) {
    bool used = false;
    for (std::size_t target = 0; target < D; ++target) {
      if (!source_task_allowed(config_.transfer_mode, j, target)) continue;
      used = true;
      if (uses_loss) continue;
      const TransferNet& net = params_.net(j, target);
      const Tensor s = source_projection(net, features[j], variance(j));
      auto& cache = source_proj_[j * D + target];
      cache.insert(cache.end(), s.values().begin(), s.values().end());
      tgt[j * D + target] = target_projection(net, features[target], variance(target));
    }
    if (used) {
      const Tensor e = params_.adapters[j].encode(features[j], slope);
      encoded_[j].insert(encoded_[j].end(), e.values().begin(), e.values().end());
    }
  }
  ++steps_;

  const SourceRange range = source_range(config_.transfer_mode, t, steps_);
  const std::size_t rows = range.count * B;
  auto cached_rows = [&](const std::vector<Real>& cache) {
    const auto first = cache.begin() + static_cast<std::ptrdiff_t>(range.first * B * k);
    return Tensor::from({rows, k}, std::vector<Real>(first, first + static_cast<std::ptrdiff_t>(rows * k)));
  };
  // An all-ones mask leaves alpha bit-identical to the unmasked path
  // (x * 1 and x + 0 are exact), so the cache always carries one.
  const std::span<const Real> mask = std::span<const Real>(mask_).subspan(range.first * B, rows);

  std::vector<Tensor> out(D);
  std::vector<Tensor> alphas;
  for (std::size_t target = 0; target < D; ++target) {
    StepSources sources;
    for (std::size_t j = 0; j < D; ++j) {
      if (!source_task_allowed(config_.transfer_mode, j, target)) continue;
      const std::size_t pair = j * D + target;
      Tensor logit;
      if (uses_loss) {
        logit = d::broadcast(
            loss_gate_logit(params_.loss_net(j, target), task_losses[j], task_losses[target], slope),
            rows, 1);
      } else {
        logit = transfer_logit(params_.net(j, target), cached_rows(source_proj_[pair]),
                               d::tile_rows(tgt[pair], range.count), slope);
      }
      sources.tasks.push_back(j);
      sources.logits.push_back(std::move(logit));
      sources.encoded.push_back(cached_rows(encoded_[j]));
    }
    const Tensor total = gate_and_sum(config_, sources, B, mask, alphas);
    out[target] = total.defined() ? d::add(features[target], params_.adapters[target].decode(total))
                                  : features[target];
    for (std::size_t s = 0; s < sources.tasks.size(); ++s) {
      last_alphas_.push_back({sources.tasks[s], target, t, range.first, range.count, std::move(alphas[s])});
    }
  }
  return out;
}

TransferGraph::TransferGraph(std::size_t tasks_, std::size_t timesteps_)
    : tasks(tasks_),
      timesteps(timesteps_),
      alpha(tasks_ * tasks_ * timesteps_ * timesteps_, Real(0)),
      epistemic(tasks_ * timesteps_, Real(0)),
      aleatoric(tasks_ * timesteps_, Real(0)) {}

Real TransferGraph::at(std::size_t source, std::size_t target, std::size_t source_step,
                       std::size_t target_step) const {
  return alpha[((source * tasks + target) * timesteps + source_step) * timesteps + target_step];
}

Real& TransferGraph::at(std::size_t source, std::size_t target, std::size_t source_step,
                        std::size_t target_step) {
  return alpha[((source * tasks + target) * timesteps + source_step) * timesteps + target_step];
}

TransferGraph extract_graph(std::span<const AlphaBlock> alphas, std::size_t tasks,
                            std::size_t batch, std::size_t b, std::size_t length,
                            std::span<const Tensor> epistemic_variance,
                            std::span<const Tensor> aleatoric_variance) {
  if (b >= batch) throw std::out_of_range("extract_graph: instance index outside batch");
  TransferGraph graph(tasks, length);
  for (const auto& block : alphas) {
    if (block.target_step >= length) continue;
    for (std::size_t s = 0; s < block.source_steps; ++s) {
      const std::size_t source_step = block.first_source_step + s;
      if (source_step >= length) continue;
      graph.at(block.source_task, block.target_task, source_step, block.target_step) =
          block.alpha.values()[s * batch + b];
    }
  }
  auto annotate = [&](std::span<const Tensor> vars, std::vector<Real>& out) {
    if (vars.empty()) return;
    for (std::size_t task = 0; task < tasks; ++task) {
      const Tensor& v = vars[task];
      const std::size_t k = v.cols();
      for (std::size_t step = 0; step < length; ++step) {
        Real acc = 0;
        for (std::size_t c = 0; c < k; ++c) acc += v.at(step * batch + b, c);
        out[task * length + step] = acc / static_cast<Real>(k);
      }
    }
  };
  annotate(epistemic_variance, graph.epistemic);
  annotate(aleatoric_variance, graph.aleatoric);
  return graph;
}

Real normalized_outgoing(const TransferGraph& graph, std::size_t source, std::size_t step,
                         std::size_t target) {
  if (source >= graph.tasks || target >= graph.tasks || step >= graph.timesteps) {
    throw std::out_of_range("normalized_outgoing: index out of range");
  }
  Real acc = 0;
  for (std::size_t t = step; t < graph.timesteps; ++t) acc += graph.at(source, target, step, t);
  return acc / static_cast<Real>(graph.timesteps - step);
}

Real normalized_incoming(const TransferGraph& graph, std::size_t target, std::size_t step,
                         std::size_t source) {
  if (source >= graph.tasks || target >= graph.tasks || step >= graph.timesteps) {
    throw std::out_of_range("normalized_incoming: index out of range");
  }
  Real acc = 0;
  for (std::size_t i = 0; i <= step; ++i) acc += graph.at(source, target, i, step);
  return acc / static_cast<Real>(step + 1);
}

}  // namespace tpamtl::transfer
