#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "tpamtl/diff/lstm.hpp"
#include "tpamtl/model/network.hpp"

namespace tpamtl::variants {

using diff::Tensor;
using model::EpisodeBatch;
using model::ForwardResult;
using model::ModelConfig;
using model::MultiTaskModel;
using model::ParameterSet;
using model::Phase;

enum class Family { stl, mtl, amtl_loss, mtl_kendall, p_amtl, td_amtl, tp_amtl };

std::string_view to_string(Family family);
Family parse_family(std::string_view name);

struct VariantSpec {
  Family family = Family::tp_amtl;
  std::optional<model::TransferMode> transfer_mode;
  std::optional<model::UncertaintyMode> uncertainty_mode;
  std::string label;  // display name; defaults to the family name

  std::string display_name() const;
  bool operator==(const VariantSpec&) const = default;
};

void to_json(nlohmann::json& j, const VariantSpec& spec);
void from_json(const nlohmann::json& j, VariantSpec& spec);

// Applies the VariantSpec overrides and family rules to `base`; throws
// model::ConfigError when they contradict each other.
ModelConfig resolve_config(const VariantSpec& spec, const ModelConfig& base);

std::unique_ptr<MultiTaskModel> build(const VariantSpec& spec, const ModelConfig& config,
                                      std::uint64_t seed);

// Embedding plus LSTM, the base network of the LSTM baselines.
struct LstmTower {
  Tensor w_emb;
  diff::LstmParams lstm;
};

// Hard-sharing MTL-LSTM (one tower, per-task output layers) or STL-LSTM
// (one tower and output layer per task, no parameters shared).
// beta = tanh(h), p_d = sigmoid(mean_t(beta * v) W_o + b_o).
class LstmBaseline : public MultiTaskModel {
 public:
  LstmBaseline(const ModelConfig& config, std::uint64_t seed, bool shared);

  std::string family() const override { return shared_ ? "mtl" : "stl"; }
  const ModelConfig& config() const override { return config_; }
  ParameterSet& parameters() override { return params_; }
  ForwardResult forward(const EpisodeBatch& batch, Phase phase, diff::RngStream& rng) override;

 protected:
  ModelConfig config_;
  bool shared_;
  ParameterSet params_;
  std::vector<LstmTower> towers_;
  std::vector<model::Dense> outputs_;
};

// Sum_d exp(-2 s_d) L_d + s_d with s_d = log sigma_d.
Tensor kendall_weighted_loss(std::span<const Tensor> task_losses, std::span<const Tensor> log_sigmas);

class MtlKendall : public LstmBaseline {
 public:
  MtlKendall(const ModelConfig& config, std::uint64_t seed);

  std::string family() const override { return "mtl_kendall"; }
  Tensor objective(const EpisodeBatch& batch, const ForwardResult& result, Real weight_decay) override;
  Real sigma(std::size_t d) const;

 private:
  std::vector<Tensor> log_sigmas_;
};

// Running per-task mean of batch losses (exponential moving average).
class TaskLossTracker {
 public:
  explicit TaskLossTracker(std::size_t tasks, Real decay = Real(0.99));

  void record(std::size_t task, Real mean_loss);
  // Unrecorded tasks report ln 2, the loss of an uninformed predictor.
  std::vector<Real> means() const;
  std::size_t records() const { return records_; }
  bool empty() const { return records_ == 0; }

  nlohmann::json to_json() const;
  void load(const nlohmann::json& j);

 private:
  Real decay_;
  std::vector<Real> mean_;
  std::vector<bool> seen_;
  std::size_t records_ = 0;
};

// Static transfer weight of the loss-gated baseline from the tracker's means.
Real amtl_loss_weight(const TaskLossTracker& tracker, const transfer::LossGateNet& net,
                      std::size_t source, std::size_t target, Real slope);

// Loss-gated asymmetric transfer: the temporal network with F fed by running
// task losses instead of feature uncertainty.
class AmtlLoss : public MultiTaskModel {
 public:
  AmtlLoss(const ModelConfig& config, std::uint64_t seed);

  std::string family() const override { return "amtl_loss"; }
  const ModelConfig& config() const override { return net_.config(); }
  ParameterSet& parameters() override { return net_.parameters(); }
  ForwardResult forward(const EpisodeBatch& batch, Phase phase, diff::RngStream& rng) override;
  void after_step(const EpisodeBatch& batch, const ForwardResult& result) override;
  bool has_transfer() const override { return net_.has_transfer(); }
  nlohmann::json extra_state() const override { return tracker_.to_json(); }
  void load_extra_state(const nlohmann::json& state) override;

  const TaskLossTracker& tracker() const { return tracker_; }
  const model::TpAmtlNetwork& network() const { return net_; }

 private:
  model::TpAmtlNetwork net_;
  TaskLossTracker tracker_;
};

// Non-temporal probabilistic AMTL on single-step inputs:
// C_d = Z_d + G2_d(sum_{j != d} alpha_{j,d} G1_j(Z_j)). Parameter names match
// the temporal network so values can be mapped across by name.
class ProbabilisticAmtl : public MultiTaskModel {
 public:
  ProbabilisticAmtl(const ModelConfig& config, std::uint64_t seed);

  std::string family() const override { return "p_amtl"; }
  const ModelConfig& config() const override { return config_; }
  ParameterSet& parameters() override { return params_; }
  ForwardResult forward(const EpisodeBatch& batch, Phase phase, diff::RngStream& rng) override;
  bool has_transfer() const override { return config_.transfer_mode != model::TransferMode::none; }

 private:
  ModelConfig config_;
  ParameterSet params_;
  Tensor w_emb_;
  diff::LstmParams lstm_;
  std::vector<model::TaskStack> stacks_;
  std::vector<model::LatentHeads> heads_;
  transfer::TransferParams transfer_;
  std::vector<model::OutputHead> outputs_;
};

}  // namespace tpamtl::variants
