#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tpamtl/diff/lstm.hpp"
#include "tpamtl/diff/rng.hpp"
#include "tpamtl/diff/tensor.hpp"
#include "tpamtl/model/batch.hpp"
#include "tpamtl/model/config.hpp"
#include "tpamtl/model/parameters.hpp"
#include "tpamtl/transfer/transfer.hpp"

namespace tpamtl::model {

// train: dropout masks and latent sampling are live.
// eval: latents collapse to their means; MC-dropout replays still run so the
// epistemic estimate exists, drawn from the caller's (fixed) stream.
enum class Phase { train, eval };

// All tensors are stacked time-major [T*B x k].
struct LatentDistribution {
  Tensor mean;         // mu averaged over MC replays
  Tensor scale;        // sigma averaged over MC replays; undefined without aleatoric
  Tensor mc_variance;  // unbiased variance of mu over replays; zeros without dropout
  Tensor features;     // f: a reparameterized draw in training, else the mean

  // Variance handed to F: mc_variance, sigma^2 or their sum, per mode.
  Tensor gate_variance(const ModelConfig& config) const;
  // sigma^2, or zeros when there is no aleatoric head.
  Tensor aleatoric_variance() const;
};

struct TaskStack {
  std::vector<Dense> layers;
};

struct LatentHeads {
  Dense mu;
  Dense sigma;  // unset without aleatoric uncertainty
};

struct OutputHead {
  Dense attention;  // W_beta [k x k], b_beta
  Dense output;     // W_o [k x 1], b_o
};

Tensor embed(const Tensor& x, const Tensor& w_emb);
// Runs the shared LSTM over stacked steps; row t*batch + b of the result is
// the output for step t of instance b.
Tensor shared_encode(const Tensor& v, const diff::LstmParams& lstm, std::size_t batch);
Tensor task_embed(const Tensor& r, const TaskStack& stack, Real slope);
// Dropout masks and noise for step t come from rng.substream(replay).substream(t),
// so a prefix of the sequence sees the same draws as the whole sequence.
// `first_step` is the step index of the first block of rows in h.
LatentDistribution latent(const Tensor& h, const LatentHeads& heads, const ModelConfig& config,
                          Phase phase, const diff::RngStream& rng, std::size_t batch,
                          std::size_t first_step = 0);
// weights: [T*B x 1] per-row averaging weights (mask / length). Returns p [B x 1].
Tensor attend_and_predict(const Tensor& combined, const Tensor& v, const OutputHead& head,
                          const Tensor& weights, std::size_t batch);
// Logit before the final sigmoid, same arguments.
Tensor attend_logit(const Tensor& combined, const Tensor& v, const OutputHead& head,
                    const Tensor& weights, std::size_t batch);

diff::LstmParams create_lstm(ParameterSet& params, const Initializer& init, const std::string& name,
                             std::size_t in, std::size_t hidden);
TaskStack create_task_stack(ParameterSet& params, const Initializer& init, const std::string& name,
                            std::size_t hidden, std::size_t layers);
LatentHeads create_latent_heads(ParameterSet& params, const Initializer& init,
                                const std::string& name, const ModelConfig& config);
OutputHead create_output_head(ParameterSet& params, const Initializer& init,
                              const std::string& name, std::size_t hidden);

struct ForwardResult {
  std::vector<Tensor> probabilities;  // D x [B x 1]
  Tensor embedding;                   // v
  std::vector<LatentDistribution> latents;
  std::vector<Tensor> combined;
  std::vector<transfer::AlphaBlock> alphas;
};

// Common surface of every trainable variant.
class MultiTaskModel {
 public:
  virtual ~MultiTaskModel() = default;

  virtual std::string family() const = 0;
  virtual const ModelConfig& config() const = 0;
  virtual ParameterSet& parameters() = 0;
  const ParameterSet& parameters() const { return const_cast<MultiTaskModel*>(this)->parameters(); }

  virtual ForwardResult forward(const EpisodeBatch& batch, Phase phase, diff::RngStream& rng) = 0;
  // Training objective. The default is the masked cross-entropy summed over
  // instances and tasks plus weight_decay * ||theta||^2.
  virtual Tensor objective(const EpisodeBatch& batch, const ForwardResult& result, Real weight_decay);
  // Hook run after each optimizer step with the step's forward result.
  virtual void after_step(const EpisodeBatch& /*batch*/, const ForwardResult& /*result*/) {}
  virtual bool has_transfer() const { return false; }

  // State outside the parameter set that a checkpoint must carry.
  virtual nlohmann::json extra_state() const { return nlohmann::json::object(); }
  virtual void load_extra_state(const nlohmann::json& /*state*/) {}
};

// Class probabilities without graph recording: [D][B].
std::vector<std::vector<Real>> predict_proba(MultiTaskModel& model, const EpisodeBatch& batch,
                                             diff::RngStream& rng);

// The temporal network: shared embedding and LSTM, per-task stacks and
// probabilistic heads, uncertainty-gated transfer, attention and prediction.
class TpAmtlNetwork : public MultiTaskModel {
 public:
  TpAmtlNetwork(const ModelConfig& config, std::uint64_t seed, std::string family = "tp_amtl");

  std::string family() const override { return family_; }
  const ModelConfig& config() const override { return config_; }
  ParameterSet& parameters() override { return params_; }
  ForwardResult forward(const EpisodeBatch& batch, Phase phase, diff::RngStream& rng) override;
  bool has_transfer() const override { return config_.transfer_mode != TransferMode::none; }

  // Inputs of the loss gate; used only with GateInput::task_loss.
  void set_task_losses(std::vector<Real> losses) { task_losses_ = std::move(losses); }
  const std::vector<Real>& task_losses() const { return task_losses_; }

  const Tensor& embedding_weight() const { return w_emb_; }
  const diff::LstmParams& lstm() const { return lstm_; }
  const TaskStack& task_stack(std::size_t d) const { return stacks_.at(d); }
  const LatentHeads& latent_heads(std::size_t d) const { return heads_.at(d); }
  const OutputHead& output_head(std::size_t d) const { return outputs_.at(d); }
  const transfer::TransferParams& transfer_params() const { return transfer_; }

  // Streaming inference for one batch of instances: each step consumes x(t)
  // [B x m] and returns p_d from the steps seen so far. Causal modes only.
  class Online {
   public:
    Online(const TpAmtlNetwork& net, std::size_t batch, diff::RngStream rng);
    std::vector<Tensor> step(const Tensor& x);
    std::size_t steps() const { return steps_; }

   private:
    const TpAmtlNetwork& net_;
    std::size_t batch_;
    diff::RngStream rng_;
    diff::LstmState state_;
    transfer::IncrementalCombiner combiner_;
    std::vector<Tensor> attention_sum_;
    std::size_t steps_ = 0;
  };
  Online online(std::size_t batch, diff::RngStream rng) const;

 private:
  ModelConfig config_;
  std::string family_;
  ParameterSet params_;
  Tensor w_emb_;
  diff::LstmParams lstm_;
  std::vector<TaskStack> stacks_;
  std::vector<LatentHeads> heads_;
  transfer::TransferParams transfer_;
  std::vector<OutputHead> outputs_;
  std::vector<Real> task_losses_;
};

// Per-task masked cross-entropy sum for p [B x 1].
Tensor task_loss(const Tensor& p, const EpisodeBatch& batch, std::size_t d);
// Sum over tasks of task_loss plus weight_decay * ||theta||^2.
Tensor total_loss(const ForwardResult& result, const EpisodeBatch& batch,
                  const ParameterSet& params, Real weight_decay);

}  // namespace tpamtl::model
