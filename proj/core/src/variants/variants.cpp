#include "tpamtl/variants/variants.hpp"

#include <array>
#include <cmath>

#include "tpamtl/diff/ops.hpp"

namespace tpamtl::variants {

namespace d = tpamtl::diff;
using model::ConfigError;
using model::GateInput;
using model::TransferMode;
using model::UncertaintyMode;

namespace {

constexpr std::array<std::pair<Family, std::string_view>, 7> kFamilies{{
    {Family::stl, "stl"},
    {Family::mtl, "mtl"},
    {Family::amtl_loss, "amtl_loss"},
    {Family::mtl_kendall, "mtl_kendall"},
    {Family::p_amtl, "p_amtl"},
    {Family::td_amtl, "td_amtl"},
    {Family::tp_amtl, "tp_amtl"},
}};

std::string task_prefix(std::size_t t) { return "task" + std::to_string(t); }

void check_batch(const EpisodeBatch& batch, const ModelConfig& config) {
  if (batch.num_tasks != config.num_tasks || batch.num_features != config.num_features) {
    throw d::DimensionError("batch has " + std::to_string(batch.num_tasks) + " tasks and " +
                            std::to_string(batch.num_features) + " features; model expects " +
                            std::to_string(config.num_tasks) + " and " +
                            std::to_string(config.num_features));
  }
}

}  // namespace

std::string_view to_string(Family family) {
  for (const auto& [f, name] : kFamilies)
    if (f == family) return name;
  throw ConfigError("unknown variant family");
}

Family parse_family(std::string_view name) {
  for (const auto& [f, n] : kFamilies)
    if (n == name) return f;
  std::string known;
  for (const auto& [f, n] : kFamilies) known += (known.empty() ? "" : ", ") + std::string(n);
  throw ConfigError("unknown variant family '" + std::string(name) + "' (expected one of " + known + ")");
}

std::string VariantSpec::display_name() const {
  return label.empty() ? std::string(to_string(family)) : label;
}

void to_json(nlohmann::json& j, const VariantSpec& spec) {
  j = nlohmann::json{{"family", to_string(spec.family)}};
  if (spec.transfer_mode) j["transfer_mode"] = model::to_string(*spec.transfer_mode);
  if (spec.uncertainty_mode) j["uncertainty_mode"] = model::to_string(*spec.uncertainty_mode);
  if (!spec.label.empty()) j["label"] = spec.label;
}

void from_json(const nlohmann::json& j, VariantSpec& spec) {
  if (j.is_string()) {
    spec = VariantSpec{};
    spec.family = parse_family(j.get<std::string>());
    return;
  }
  if (!j.is_object()) throw ConfigError("variant must be a family name or an object");
  VariantSpec out;
  for (const auto& [key, value] : j.items()) {
    if (key == "family") {
      out.family = parse_family(value.get<std::string>());
    } else if (key == "transfer_mode") {
      out.transfer_mode = model::parse_transfer_mode(value.get<std::string>());
    } else if (key == "uncertainty_mode") {
      out.uncertainty_mode = model::parse_uncertainty_mode(value.get<std::string>());
    } else if (key == "label") {
      out.label = value.get<std::string>();
    } else {
      throw ConfigError("unknown variant key '" + key + "'");
    }
  }
  if (!j.contains("family")) throw ConfigError("variant is missing 'family'");
  spec = out;
}

ModelConfig resolve_config(const VariantSpec& spec, const ModelConfig& base) {
  ModelConfig c = base;
  if (spec.uncertainty_mode) c.uncertainty_mode = *spec.uncertainty_mode;
  if (spec.transfer_mode) c.transfer_mode = *spec.transfer_mode;
  const std::string name(to_string(spec.family));

  switch (spec.family) {
    case Family::stl:
    case Family::mtl:
    case Family::mtl_kendall:
      if (spec.transfer_mode && *spec.transfer_mode != TransferMode::none)
        throw ConfigError("variant " + name + " has no transfer; transfer_mode must be none");
      if (spec.uncertainty_mode && *spec.uncertainty_mode != UncertaintyMode::none)
        throw ConfigError("variant " + name + " is deterministic; uncertainty_mode must be none");
      c.transfer_mode = TransferMode::none;
      c.uncertainty_mode = UncertaintyMode::none;
      c.gate_input = GateInput::features_only;
      break;
    case Family::amtl_loss:
      c.gate_input = GateInput::task_loss;
      break;
    case Family::p_amtl:
      if (!spec.transfer_mode) c.transfer_mode = TransferMode::samestep;
      if (c.transfer_mode != TransferMode::samestep && c.transfer_mode != TransferMode::none)
        throw ConfigError("variant p_amtl is non-temporal; transfer_mode must be samestep or none");
      c.gate_input = c.uncertainty_mode == UncertaintyMode::none ? GateInput::features_only
                                                                 : GateInput::uncertainty;
      break;
    case Family::td_amtl:
      if (spec.uncertainty_mode && *spec.uncertainty_mode != UncertaintyMode::none)
        throw ConfigError("variant td_amtl is deterministic; uncertainty_mode must be none");
      c.uncertainty_mode = UncertaintyMode::none;
      c.gate_input = GateInput::features_only;
      break;
    case Family::tp_amtl:
      c.gate_input = c.uncertainty_mode == UncertaintyMode::none ? GateInput::features_only
                                                                 : GateInput::uncertainty;
      break;
  }
  c.validate();
  return c;
}

std::unique_ptr<MultiTaskModel> build(const VariantSpec& spec, const ModelConfig& config,
                                      std::uint64_t seed) {
  const ModelConfig c = resolve_config(spec, config);
  switch (spec.family) {
    case Family::stl: return std::make_unique<LstmBaseline>(c, seed, false);
    case Family::mtl: return std::make_unique<LstmBaseline>(c, seed, true);
    case Family::mtl_kendall: return std::make_unique<MtlKendall>(c, seed);
    case Family::amtl_loss: return std::make_unique<AmtlLoss>(c, seed);
    case Family::p_amtl: return std::make_unique<ProbabilisticAmtl>(c, seed);
    case Family::td_amtl: return std::make_unique<model::TpAmtlNetwork>(c, seed, "td_amtl");
    case Family::tp_amtl: return std::make_unique<model::TpAmtlNetwork>(c, seed, "tp_amtl");
  }
  throw ConfigError("unknown variant family");
}

LstmBaseline::LstmBaseline(const ModelConfig& config, std::uint64_t seed, bool shared)
    : config_(config), shared_(shared) {
  config_.validate();
  const model::Initializer init(seed);
  const std::size_t k = config_.hidden_size;
  const std::size_t towers = shared ? 1 : config_.num_tasks;
  for (std::size_t t = 0; t < towers; ++t) {
    const std::string p = shared ? "" : "stl" + std::to_string(t) + ".";
    LstmTower tower;
    tower.w_emb = params_.add(p + "embed.W", init.fan_in_uniform(p + "embed.W", config_.num_features, k));
    tower.lstm = model::create_lstm(params_, init, p + "rnn", k, k);
    towers_.push_back(std::move(tower));
  }
  for (std::size_t t = 0; t < config_.num_tasks; ++t) {
    const std::string p = (shared ? "" : "stl" + std::to_string(t) + ".") + task_prefix(t);
    outputs_.push_back(model::Dense::create(params_, init, p + ".output", k, 1));
  }
}

ForwardResult LstmBaseline::forward(const EpisodeBatch& batch, Phase phase, d::RngStream& rng) {
  check_batch(batch, config_);
  const d::RngStream base = rng.substream(rng.next_u64());
  const std::size_t B = batch.batch;
  const Tensor weights = batch.time_weights();
  ForwardResult result;
  std::vector<Tensor> v(towers_.size()), beta(towers_.size());
  for (std::size_t t = 0; t < towers_.size(); ++t) {
    v[t] = model::embed(batch.inputs, towers_[t].w_emb);
    Tensor h = model::shared_encode(v[t], towers_[t].lstm, B);
    d::RngStream drop = base.substream(t);
    h = d::dropout(h, config_.dropout_rate, drop, phase == Phase::train);
    beta[t] = d::tanh(h);
  }
  result.embedding = v.front();
  for (std::size_t t = 0; t < config_.num_tasks; ++t) {
    const std::size_t tower = shared_ ? 0 : t;
    const Tensor pooled = d::block_sum_rows(d::mul_col(weights, d::mul(beta[tower], v[tower])), B);
    result.probabilities.push_back(d::sigmoid(outputs_[t].apply(pooled)));
  }
  return result;
}

Tensor kendall_weighted_loss(std::span<const Tensor> task_losses, std::span<const Tensor> log_sigmas) {
  if (task_losses.size() != log_sigmas.size()) {
    throw d::DimensionError("kendall_weighted_loss: " + std::to_string(task_losses.size()) +
                            " losses for " + std::to_string(log_sigmas.size()) + " sigmas");
  }
  Tensor total = Tensor::scalar(0);
  for (std::size_t t = 0; t < task_losses.size(); ++t) {
    const Tensor precision = d::exp(d::scale(log_sigmas[t], -2));
    total = d::add(total, d::add(d::mul(precision, task_losses[t]), log_sigmas[t]));
  }
  return total;
}

MtlKendall::MtlKendall(const ModelConfig& config, std::uint64_t seed) : LstmBaseline(config, seed, true) {
  const model::Initializer init(seed);
  for (std::size_t t = 0; t < config_.num_tasks; ++t) {
    const std::string name = "kendall.log_sigma" + std::to_string(t);
    log_sigmas_.push_back(params_.add(name, init.constant(1, 1, 0)));
  }
}

Tensor MtlKendall::objective(const EpisodeBatch& batch, const ForwardResult& result, Real weight_decay) {
  std::vector<Tensor> losses;
  for (std::size_t t = 0; t < config_.num_tasks; ++t)
    losses.push_back(model::task_loss(result.probabilities[t], batch, t));
  Tensor total = kendall_weighted_loss(losses, log_sigmas_);
  if (weight_decay != 0) total = d::add(total, d::scale(params_.squared_norm(), weight_decay));
  return total;
}

Real MtlKendall::sigma(std::size_t t) const { return std::exp(log_sigmas_.at(t).item()); }

TaskLossTracker::TaskLossTracker(std::size_t tasks, Real decay)
    : decay_(decay), mean_(tasks, std::log(Real(2))), seen_(tasks, false) {
  if (!(decay >= 0) || decay >= 1) throw ConfigError("tracker decay must lie in [0, 1)");
}

void TaskLossTracker::record(std::size_t task, Real mean_loss) {
  if (task >= mean_.size()) throw d::DimensionError("tracker task index out of range");
  if (!std::isfinite(mean_loss)) throw std::runtime_error("non-finite task loss recorded");
  mean_[task] = seen_[task] ? decay_ * mean_[task] + (1 - decay_) * mean_loss : mean_loss;
  seen_[task] = true;
  ++records_;
}

std::vector<Real> TaskLossTracker::means() const { return mean_; }

nlohmann::json TaskLossTracker::to_json() const {
  std::vector<int> seen(seen_.begin(), seen_.end());
  return {{"decay", decay_}, {"means", mean_}, {"seen", seen}, {"records", records_}};
}

void TaskLossTracker::load(const nlohmann::json& j) {
  if (j.empty()) return;
  const auto means = j.at("means").get<std::vector<Real>>();
  const auto seen = j.at("seen").get<std::vector<int>>();
  if (means.size() != mean_.size() || seen.size() != mean_.size())
    throw ConfigError("tracker state has the wrong number of tasks");
  decay_ = j.at("decay").get<Real>();
  mean_ = means;
  seen_.assign(seen.begin(), seen.end());
  records_ = j.at("records").get<std::size_t>();
}

Real amtl_loss_weight(const TaskLossTracker& tracker, const transfer::LossGateNet& net,
                      std::size_t source, std::size_t target, Real slope) {
  if (tracker.empty()) throw std::logic_error("amtl_loss_weight: tracker has no recorded batch");
  const auto means = tracker.means();
  if (source >= means.size() || target >= means.size())
    throw d::DimensionError("amtl_loss_weight: task index out of range");
  d::NoGradGuard guard;
  return d::sigmoid(transfer::loss_gate_logit(net, means[source], means[target], slope)).item();
}

AmtlLoss::AmtlLoss(const ModelConfig& config, std::uint64_t seed)
    : net_(config, seed, "amtl_loss"), tracker_(config.num_tasks) {
  if (config.gate_input != GateInput::task_loss)
    throw ConfigError("amtl_loss needs gate_input task_loss");
}

ForwardResult AmtlLoss::forward(const EpisodeBatch& batch, Phase phase, d::RngStream& rng) {
  net_.set_task_losses(tracker_.means());
  return net_.forward(batch, phase, rng);
}

void AmtlLoss::after_step(const EpisodeBatch& batch, const ForwardResult& result) {
  d::NoGradGuard guard;
  for (std::size_t t = 0; t < result.probabilities.size(); ++t) {
    const std::size_t n = batch.labelled_count(t);
    if (n == 0) continue;
    const Tensor p = result.probabilities[t].detach();
    tracker_.record(t, model::task_loss(p, batch, t).item() / static_cast<Real>(n));
  }
}

void AmtlLoss::load_extra_state(const nlohmann::json& state) { tracker_.load(state); }

ProbabilisticAmtl::ProbabilisticAmtl(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  if (config_.transfer_mode != TransferMode::samestep && config_.transfer_mode != TransferMode::none)
    throw ConfigError("p_amtl needs transfer_mode samestep or none");
  if (config_.gate_input == GateInput::task_loss) throw ConfigError("p_amtl gates on features");
  const model::Initializer init(seed);
  const std::size_t k = config_.hidden_size;
  w_emb_ = params_.add("embed.W", init.fan_in_uniform("embed.W", config_.num_features, k));
  lstm_ = model::create_lstm(params_, init, "rnn", k, k);
  for (std::size_t t = 0; t < config_.num_tasks; ++t) {
    stacks_.push_back(model::create_task_stack(params_, init, task_prefix(t), k, config_.embed_layers));
    heads_.push_back(model::create_latent_heads(params_, init, task_prefix(t), config_));
  }
  transfer_ = transfer::TransferParams::create(params_, init, config_);
  for (std::size_t t = 0; t < config_.num_tasks; ++t)
    outputs_.push_back(model::create_output_head(params_, init, task_prefix(t), k));
}

ForwardResult ProbabilisticAmtl::forward(const EpisodeBatch& batch, Phase phase, d::RngStream& rng) {
  check_batch(batch, config_);
  if (batch.timesteps != 1)
    throw d::DimensionError("p_amtl takes single-step inputs, got " + std::to_string(batch.timesteps) + " steps");
  const d::RngStream base = rng.substream(rng.next_u64());
  const std::size_t B = batch.batch, D = config_.num_tasks;
  const Real slope = config_.leaky_slope;

  ForwardResult result;
  result.embedding = model::embed(batch.inputs, w_emb_);
  const Tensor r = d::lstm_step(result.embedding, d::LstmState::zeros(B, config_.hidden_size), lstm_).h;

  std::vector<Tensor> z(D), var(D);
  for (std::size_t t = 0; t < D; ++t) {
    const Tensor h = model::task_embed(r, stacks_[t], slope);
    result.latents.push_back(model::latent(h, heads_[t], config_, phase, base.substream(task_prefix(t)), B));
    z[t] = result.latents.back().features;
    if (config_.gate_input == GateInput::uncertainty) var[t] = result.latents.back().gate_variance(config_);
  }

  const Tensor weights = batch.time_weights();
  for (std::size_t target = 0; target < D; ++target) {
    Tensor c = z[target];
    if (config_.transfer_mode == TransferMode::samestep) {
      Tensor total;
      for (std::size_t j = 0; j < D; ++j) {
        if (j == target) continue;
        const transfer::TransferNet& net = transfer_.net(j, target);
        const Tensor alpha = d::sigmoid(transfer::transfer_logit(
            net, transfer::source_projection(net, z[j], var[j]),
            transfer::target_projection(net, z[target], var[target]), slope));
        const Tensor part = d::mul_col(alpha, transfer_.adapters[j].encode(z[j], slope));
        total = total.defined() ? d::add(total, part) : part;
        result.alphas.push_back({j, target, 0, 0, 1, alpha});
      }
      if (total.defined()) c = d::add(z[target], transfer_.adapters[target].decode(total));
    }
    result.combined.push_back(c);
    result.probabilities.push_back(model::attend_and_predict(c, result.embedding, outputs_[target], weights, B));
  }
  return result;
}

}  // namespace tpamtl::variants
