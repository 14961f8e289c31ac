#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "tpamtl/diff/tensor.hpp"
#include "tpamtl/model/config.hpp"
#include "tpamtl/model/parameters.hpp"

// Uncertainty-gated knowledge transfer between task features.
//
// For target task d at step t the combined feature is
//   C_d(t) = f_d(t) + G2_d( sum_{(j,i) in S(d,t)} alpha(j,d,i,t) * G1_j(f_j(i)) )
// where S(d,t) depends on the transfer mode (see model::TransferMode) and
// alpha(j,d,i,t) = F_jd(f_j(i), f_d(t), var_j(i), var_d(t)).
//
// G1_j(x) = leaky_relu(x W + b) maps into the shared space and G2_d(x) = x W'
// maps back. Because G2 is linear, the restricted modes equal their
// single-adapter forms sum alpha * G_{j,d}(f) with G_{j,d} = G2_d o G1_j.
namespace tpamtl::transfer {

using diff::Tensor;
using model::Dense;
using model::ModelConfig;
using model::TransferMode;

// F_{j,d}: a two-layer perceptron on concat(f_src, f_tgt, var_src, var_tgt)
// with a leaky-relu hidden layer and a scalar output. The first layer is kept
// as per-input blocks so source and target halves can be projected once per
// step and reused across pairs.
struct TransferNet {
  Tensor w_source;        // [k x h]
  Tensor w_target;        // [k x h]
  Tensor w_source_var;    // [k x h], undefined when F sees features only
  Tensor w_target_var;    // [k x h], undefined when F sees features only
  Tensor b1;              // [1 x h]
  Tensor w2;              // [h x 1]
  Tensor b2;              // [1 x 1]

  bool uses_variance() const { return w_source_var.defined(); }

  static TransferNet create(model::ParameterSet& params, const model::Initializer& init,
                            const std::string& name, std::size_t hidden, bool with_variance);
};

Tensor source_projection(const TransferNet& net, const Tensor& features, const Tensor& variance);
Tensor target_projection(const TransferNet& net, const Tensor& features, const Tensor& variance);
// Pre-sigmoid score from projected halves; rows of the two inputs pair up.
Tensor transfer_logit(const TransferNet& net, const Tensor& source_proj, const Tensor& target_proj,
                      Real slope);
// alpha in (0, 1), one per row: [rows x 1].
Tensor transfer_weight(const TransferNet& net, const Tensor& source_features,
                       const Tensor& target_features, const Tensor& source_variance,
                       const Tensor& target_variance, Real slope);

// Loss-gated F used by the AMTL-Loss baseline: input (mean loss of source,
// mean loss of target), output a static scalar gate.
struct LossGateNet {
  Tensor w1;  // [2 x h]
  Tensor b1;  // [1 x h]
  Tensor w2;  // [h x 1]
  Tensor b2;  // [1 x 1]

  static LossGateNet create(model::ParameterSet& params, const model::Initializer& init,
                            const std::string& name, std::size_t hidden);
};

Tensor loss_gate_logit(const LossGateNet& net, Real source_loss, Real target_loss, Real slope);

struct Adapter {
  Dense to_shared;     // G1
  Tensor from_shared;  // G2 weight [k x k], zero-initialized

  Tensor encode(const Tensor& x, Real slope) const;
  Tensor decode(const Tensor& x) const;
};

struct TransferParams {
  std::size_t num_tasks = 0;
  std::vector<TransferNet> nets;       // index source * D + target
  std::vector<LossGateNet> loss_nets;  // same indexing, task_loss gate only
  std::vector<Adapter> adapters;       // one per task

  const TransferNet& net(std::size_t source, std::size_t target) const {
    return nets[source * num_tasks + target];
  }
  const LossGateNet& loss_net(std::size_t source, std::size_t target) const {
    return loss_nets[source * num_tasks + target];
  }

  // Registers "transfer.F<j>_<d>.*" and "adapter<d>.*" parameters. Nothing is
  // created when the transfer mode is none.
  static TransferParams create(model::ParameterSet& params, const model::Initializer& init,
                               const ModelConfig& config);
};

struct SourceRange {
  std::size_t first = 0;
  std::size_t count = 0;
};

// Source steps feeding target step t (0-based) out of `timesteps`.
SourceRange source_range(TransferMode mode, std::size_t t, std::size_t timesteps);
bool source_task_allowed(TransferMode mode, std::size_t source, std::size_t target);

// Per-step inputs, stacked time-major: row t*batch + b.
struct TransferInputs {
  std::size_t batch = 0;
  std::size_t timesteps = 0;
  std::span<const Tensor> features;   // D x [T*B x k]
  std::span<const Tensor> variances;  // D x [T*B x k]; empty when F sees features only
  std::span<const Real> step_mask;    // T*B validity of source rows; empty = all valid
  std::span<const Real> task_losses;  // D running mean losses; task_loss gate only
};

// alpha for one (source task, target task, target step): rows
// (s - first_source_step) * batch + b for source step s.
struct AlphaBlock {
  std::size_t source_task = 0;
  std::size_t target_task = 0;
  std::size_t target_step = 0;
  std::size_t first_source_step = 0;
  std::size_t source_steps = 0;
  Tensor alpha;
};

struct CombineResult {
  std::vector<Tensor> combined;  // D x [T*B x k]
  std::vector<AlphaBlock> alphas;
};

CombineResult combine(const TransferParams& params, const ModelConfig& config,
                      const TransferInputs& inputs);

// Online form of combine for the causal modes: each call appends one step and
// returns C_d for that step only. Per-step cost is linear in the number of
// cached steps. Results equal the matching rows of combine() bit-for-bit.
class IncrementalCombiner {
 public:
  IncrementalCombiner(const TransferParams& params, const ModelConfig& config, std::size_t batch);

  // features/variances: D x [B x k] for the new step (variances may be empty
  // when F sees features only). step_mask: B validity flags or empty.
  std::vector<Tensor> step(std::span<const Tensor> features, std::span<const Tensor> variances,
                           std::span<const Real> step_mask = {},
                           std::span<const Real> task_losses = {});

  std::size_t steps() const { return steps_; }
  const std::vector<AlphaBlock>& last_alphas() const { return last_alphas_; }

 private:
  const TransferParams& params_;
  ModelConfig config_;
  std::size_t batch_;
  std::size_t steps_ = 0;
  std::vector<std::vector<Real>> source_proj_;  // per (j,d): rows of source projections
  std::vector<std::vector<Real>> encoded_;      // per j: rows of G1_j(f_j)
  std::vector<Real> mask_;
  std::vector<AlphaBlock> last_alphas_;
};

// Dense alpha tensor for one instance, with per-(task, step) uncertainty.
struct TransferGraph {
  std::size_t tasks = 0;
  std::size_t timesteps = 0;
  std::vector<Real> alpha;           // [source][target][source_step][target_step]
  std::vector<Real> epistemic;       // [task][step], mean over features
  std::vector<Real> aleatoric;       // [task][step], mean over features

  TransferGraph() = default;
  TransferGraph(std::size_t tasks, std::size_t timesteps);

  Real at(std::size_t source, std::size_t target, std::size_t source_step,
          std::size_t target_step) const;
  Real& at(std::size_t source, std::size_t target, std::size_t source_step,
           std::size_t target_step);
  Real total_variance(std::size_t task, std::size_t step) const {
    return epistemic[task * timesteps + step] + aleatoric[task * timesteps + step];
  }
  bool empty() const { return tasks == 0; }
};

// Extracts instance b (of `batch`) from a forward pass. `length` truncates to
// the instance's valid steps. Variance tensors are D x [T*B x k] and may be
// empty (annotations are then zero).
TransferGraph extract_graph(std::span<const AlphaBlock> alphas, std::size_t tasks,
                            std::size_t batch, std::size_t b, std::size_t length,
                            std::span<const Tensor> epistemic_variance,
                            std::span<const Tensor> aleatoric_variance);

// Mean of alpha[j, d, t, t..T-1] (0-based t).
Real normalized_outgoing(const TransferGraph& graph, std::size_t source, std::size_t step,
                         std::size_t target);
// Mean of alpha[j, d, 0..t, t] (0-based t).
Real normalized_incoming(const TransferGraph& graph, std::size_t target, std::size_t step,
                         std::size_t source);

}  // namespace tpamtl::transfer
