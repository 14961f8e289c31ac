#include "tpamtl/model/network.hpp"

#include <cmath>

#include "tpamtl/diff/ops.hpp"

namespace tpamtl::model {

namespace d = tpamtl::diff;

namespace {

std::string task_prefix(std::size_t task) { return "task" + std::to_string(task); }

// Constant tensor of per-element draws, keyed by step so that the values for
// step t do not depend on how many steps the tensor holds.
template <typename Draw>
Tensor keyed_noise(std::size_t rows, std::size_t cols, std::size_t batch, std::size_t first_step,
                   const d::RngStream& rng, Draw draw) {
  std::vector<Real> out(rows * cols);
  const std::size_t steps = rows / batch;
  for (std::size_t s = 0; s < steps; ++s) {
    d::RngStream step_rng = rng.substream(static_cast<std::uint64_t>(first_step + s));
    for (std::size_t i = 0; i < batch * cols; ++i) out[s * batch * cols + i] = draw(step_rng);
  }
  return Tensor::from({rows, cols}, std::move(out));
}

Tensor keyed_dropout(const Tensor& x, Real rate, std::size_t batch, std::size_t first_step,
                     const d::RngStream& rng) {
  const Real keep = Real(1) / (Real(1) - rate);
  const Tensor mask = keyed_noise(x.rows(), x.cols(), batch, first_step, rng, [&](d::RngStream& r) {
    return r.uniform() < static_cast<double>(rate) ? Real(0) : keep;
  });
  return d::mul(x, mask);
}

}  // namespace

Tensor LatentDistribution::gate_variance(const ModelConfig& config) const {
  if (config.epistemic() && config.aleatoric()) return d::add(mc_variance, d::square(scale));
  if (config.epistemic()) return mc_variance;
  if (config.aleatoric()) return d::square(scale);
  return {};
}

Tensor LatentDistribution::aleatoric_variance() const {
  if (scale.defined()) return d::square(scale);
  return Tensor::zeros(mean.shape());
}

Tensor embed(const Tensor& x, const Tensor& w_emb) { return d::matmul(x, w_emb); }

Tensor shared_encode(const Tensor& v, const d::LstmParams& lstm, std::size_t batch) {
  if (batch == 0 || v.rows() % batch != 0) {
    throw d::DimensionError("shared_encode: " + std::to_string(v.rows()) +
                            " rows do not split into batches of " + std::to_string(batch));
  }
  const std::size_t steps = v.rows() / batch;
  d::LstmState state = d::LstmState::zeros(batch, lstm.hidden_size());
  std::vector<Tensor> outputs;
  outputs.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    state = d::lstm_step(d::slice_rows(v, t * batch, batch), state, lstm);
    outputs.push_back(state.h);
  }
  return steps == 1 ? outputs.front() : d::concat_rows(outputs);
}

Tensor task_embed(const Tensor& r, const TaskStack& stack, Real slope) {
  Tensor h = r;
  for (const Dense& layer : stack.layers) h = d::leaky_relu(layer.apply(h), slope);
  return h;
}

LatentDistribution latent(const Tensor& h, const LatentHeads& heads, const ModelConfig& config,
                          Phase phase, const d::RngStream& rng, std::size_t batch,
                          std::size_t first_step) {
  const Real slope = config.leaky_slope;
  auto mu_of = [&](const Tensor& x) {
    const Tensor pre = heads.mu.apply(x);
    return config.mu_activation == MuActivation::sigmoid ? d::sigmoid(pre) : d::leaky_relu(pre, slope);
  };
  auto sigma_of = [&](const Tensor& x) { return d::softplus(heads.sigma.apply(x)); };

  LatentDistribution out;
  const bool replay = config.epistemic() && config.dropout_rate > 0;
  if (replay) {
    const std::size_t K = config.mc_samples;
    std::vector<Tensor> mus;
    Tensor mu_sum, sigma_sum;
    for (std::size_t s = 0; s < K; ++s) {
      const Tensor dropped =
          keyed_dropout(h, config.dropout_rate, batch, first_step, rng.substream(s));
      const Tensor mu = mu_of(dropped);
      mu_sum = mu_sum.defined() ? d::add(mu_sum, mu) : mu;
      if (config.aleatoric()) {
        const Tensor sigma = sigma_of(dropped);
        sigma_sum = sigma_sum.defined() ? d::add(sigma_sum, sigma) : sigma;
      }
      mus.push_back(mu);
    }
    const Real inv_k = Real(1) / static_cast<Real>(K);
    out.mean = d::scale(mu_sum, inv_k);
    if (config.aleatoric()) out.scale = d::scale(sigma_sum, inv_k);
    Tensor dev_sum;
    for (const Tensor& mu : mus) {
      const Tensor dev = d::square(d::sub(mu, out.mean));
      dev_sum = dev_sum.defined() ? d::add(dev_sum, dev) : dev;
    }
    out.mc_variance = d::scale(dev_sum, Real(1) / static_cast<Real>(K - 1));
  } else {
    out.mean = mu_of(h);
    if (config.aleatoric()) out.scale = sigma_of(h);
    out.mc_variance = Tensor::zeros(out.mean.shape());
  }

  if (phase == Phase::train && config.aleatoric()) {
    const Tensor eps = keyed_noise(out.mean.rows(), out.mean.cols(), batch, first_step,
                                   rng.substream("noise"),
                                   [](d::RngStream& r) { return static_cast<Real>(r.normal()); });
    out.features = d::add(out.mean, d::mul(out.scale, eps));
  } else {
    out.features = out.mean;
  }
  return out;
}

Tensor attend_logit(const Tensor& combined, const Tensor& v, const OutputHead& head,
                    const Tensor& weights, std::size_t batch) {
  const Tensor beta = d::tanh(head.attention.apply(combined));
  const Tensor pooled = d::block_sum_rows(d::mul_col(weights, d::mul(beta, v)), batch);
  return head.output.apply(pooled);
}

Tensor attend_and_predict(const Tensor& combined, const Tensor& v, const OutputHead& head,
                          const Tensor& weights, std::size_t batch) {
  return d::sigmoid(attend_logit(combined, v, head, weights, batch));
}

d::LstmParams create_lstm(ParameterSet& params, const Initializer& init, const std::string& name,
                          std::size_t in, std::size_t hidden) {
  d::LstmParams lstm;
  lstm.w_input = params.add(name + ".w_input", init.fan_in_uniform(name + ".w_input", in, 4 * hidden));
  lstm.w_hidden =
      params.add(name + ".w_hidden", init.fan_in_uniform(name + ".w_hidden", hidden, 4 * hidden));
  Tensor bias = init.fan_in_bias(name + ".bias", hidden, 4 * hidden);
  auto values = bias.mutable_values();
  for (std::size_t c = hidden; c < 2 * hidden; ++c) values[c] += Real(1);
  lstm.bias = params.add(name + ".bias", std::move(bias));
  return lstm;
}

TaskStack create_task_stack(ParameterSet& params, const Initializer& init, const std::string& name,
                            std::size_t hidden, std::size_t layers) {
  TaskStack stack;
  for (std::size_t l = 0; l < layers; ++l)
    stack.layers.push_back(
        Dense::create(params, init, name + ".layer" + std::to_string(l), hidden, hidden));
  return stack;
}

LatentHeads create_latent_heads(ParameterSet& params, const Initializer& init,
                                const std::string& name, const ModelConfig& config) {
  LatentHeads heads;
  const std::size_t k = config.hidden_size;
  heads.mu = Dense::create(params, init, name + ".mu", k, k);
  if (config.aleatoric()) heads.sigma = Dense::create(params, init, name + ".sigma", k, k);
  return heads;
}

OutputHead create_output_head(ParameterSet& params, const Initializer& init,
                              const std::string& name, std::size_t hidden) {
  OutputHead head;
  head.attention = Dense::create(params, init, name + ".attention", hidden, hidden);
  head.output = Dense::create(params, init, name + ".output", hidden, 1);
  return head;
}

Tensor MultiTaskModel::objective(const EpisodeBatch& batch, const ForwardResult& result,
                                 Real weight_decay) {
  return total_loss(result, batch, parameters(), weight_decay);
}

std::vector<std::vector<Real>> predict_proba(MultiTaskModel& model, const EpisodeBatch& batch,
                                             d::RngStream& rng) {
  d::NoGradGuard guard;
  const ForwardResult result = model.forward(batch, Phase::eval, rng);
  std::vector<std::vector<Real>> out;
  for (const Tensor& p : result.probabilities) out.emplace_back(p.values().begin(), p.values().end());
  return out;
}

TpAmtlNetwork::TpAmtlNetwork(const ModelConfig& config, std::uint64_t seed, std::string family)
    : config_(config), family_(std::move(family)) {
  config_.validate();
  const Initializer init(seed);
  const std::size_t k = config_.hidden_size;
  w_emb_ = params_.add("embed.W", init.fan_in_uniform("embed.W", config_.num_features, k));
  lstm_ = create_lstm(params_, init, "rnn", k, k);
  for (std::size_t t = 0; t < config_.num_tasks; ++t) {
    stacks_.push_back(create_task_stack(params_, init, task_prefix(t), k, config_.embed_layers));
    heads_.push_back(create_latent_heads(params_, init, task_prefix(t), config_));
  }
  transfer_ = transfer::TransferParams::create(params_, init, config_);
  for (std::size_t t = 0; t < config_.num_tasks; ++t)
    outputs_.push_back(create_output_head(params_, init, task_prefix(t), k));
  if (config_.gate_input == GateInput::task_loss)
    task_losses_.assign(config_.num_tasks, std::log(Real(2)));
}

ForwardResult TpAmtlNetwork::forward(const EpisodeBatch& batch, Phase phase, d::RngStream& rng) {
  if (batch.num_tasks != config_.num_tasks || batch.num_features != config_.num_features) {
    throw d::DimensionError("batch has " + std::to_string(batch.num_tasks) + " tasks and " +
                            std::to_string(batch.num_features) + " features; model expects " +
                            std::to_string(config_.num_tasks) + " and " +
                            std::to_string(config_.num_features));
  }
  const d::RngStream base = rng.substream(rng.next_u64());
  const std::size_t B = batch.batch;
  const std::size_t D = config_.num_tasks;

  ForwardResult result;
  result.embedding = embed(batch.inputs, w_emb_);
  const Tensor r = shared_encode(result.embedding, lstm_, B);

  std::vector<Tensor> features(D), variances;
  for (std::size_t t = 0; t < D; ++t) {
    const Tensor h = task_embed(r, stacks_[t], config_.leaky_slope);
    result.latents.push_back(
        latent(h, heads_[t], config_, phase, base.substream(task_prefix(t)), B));
    features[t] = result.latents.back().features;
    if (config_.gate_input == GateInput::uncertainty)
      variances.push_back(result.latents.back().gate_variance(config_));
  }

  transfer::TransferInputs in;
  in.batch = B;
  in.timesteps = batch.timesteps;
  in.features = features;
  in.variances = variances;
  if (!batch.all_steps_valid()) in.step_mask = batch.step_mask;
  in.task_losses = task_losses_;
  transfer::CombineResult combined = transfer::combine(transfer_, config_, in);

  const Tensor weights = batch.time_weights();
  for (std::size_t t = 0; t < D; ++t)
    result.probabilities.push_back(
        attend_and_predict(combined.combined[t], result.embedding, outputs_[t], weights, B));
  result.combined = std::move(combined.combined);
  result.alphas = std::move(combined.alphas);
  return result;
}

TpAmtlNetwork::Online TpAmtlNetwork::online(std::size_t batch, d::RngStream rng) const {
  return Online(*this, batch, rng);
}

TpAmtlNetwork::Online::Online(const TpAmtlNetwork& net, std::size_t batch, d::RngStream rng)
    : net_(net),
      batch_(batch),
      rng_(rng.substream(rng.next_u64())),
      state_(d::LstmState::zeros(batch, net.config_.hidden_size)),
      combiner_(net.transfer_, net.config_, batch),
      attention_sum_(net.config_.num_tasks) {}

std::vector<Tensor> TpAmtlNetwork::Online::step(const Tensor& x) {
  const ModelConfig& config = net_.config_;
  if (x.rows() != batch_ || x.cols() != config.num_features) {
    throw d::DimensionError("online step: expected [" + std::to_string(batch_) + "x" +
                            std::to_string(config.num_features) + "], got " + d::to_string(x.shape()));
  }
  const std::size_t D = config.num_tasks;
  const Tensor v = embed(x, net_.w_emb_);
  state_ = d::lstm_step(v, state_, net_.lstm_);

  std::vector<Tensor> features(D), variances;
  for (std::size_t t = 0; t < D; ++t) {
    const Tensor h = task_embed(state_.h, net_.stacks_[t], config.leaky_slope);
    const LatentDistribution lat =
        latent(h, net_.heads_[t], config, Phase::eval, rng_.substream(task_prefix(t)), batch_, steps_);
    features[t] = lat.features;
    if (config.gate_input == GateInput::uncertainty) variances.push_back(lat.gate_variance(config));
  }
  const std::vector<Tensor> combined = combiner_.step(features, variances, {}, net_.task_losses_);
  ++steps_;

  std::vector<Tensor> out;
  const Real inv_t = Real(1) / static_cast<Real>(steps_);
  for (std::size_t t = 0; t < D; ++t) {
    const OutputHead& head = net_.outputs_[t];
    const Tensor term = d::mul(d::tanh(head.attention.apply(combined[t])), v);
    attention_sum_[t] = attention_sum_[t].defined() ? d::add(attention_sum_[t], term) : term;
    out.push_back(d::sigmoid(head.output.apply(d::scale(attention_sum_[t], inv_t))));
  }
  return out;
}

Tensor task_loss(const Tensor& p, const EpisodeBatch& batch, std::size_t d) {
  return d::binary_cross_entropy(p, batch.task_labels(d), batch.task_mask(d));
}

Tensor total_loss(const ForwardResult& result, const EpisodeBatch& batch, const ParameterSet& params,
                  Real weight_decay) {
  Tensor total;
  for (std::size_t t = 0; t < result.probabilities.size(); ++t) {
    const Tensor l = task_loss(result.probabilities[t], batch, t);
    total = total.defined() ? d::add(total, l) : l;
  }
  if (!total.defined()) total = Tensor::scalar(0);
  if (weight_decay != 0) total = d::add(total, d::scale(params.squared_norm(), weight_decay));
  return total;
}

}  // namespace tpamtl::model
