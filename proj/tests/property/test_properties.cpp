// Randomized invariant checks, 1000 cases per property. Each case draws its
// own configuration from a counter-based stream, so a failure names the case
// index that reproduces it.
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "oracles.hpp"
#include "tpamtl/data/data.hpp"
#include "tpamtl/diff/ops.hpp"
#include "tpamtl/eval/eval.hpp"
#include "tpamtl/model/network.hpp"
#include "tpamtl/train/train.hpp"
#include "tpamtl/variants/variants.hpp"

using namespace tpamtl;
using namespace tpamtl::model;
using diff::RngStream;

namespace {

constexpr std::size_t kCases = 1000;

template <class T>
T pick(RngStream& rng, std::initializer_list<T> options) {
  return *(options.begin() + rng.below(options.size()));
}

std::size_t between(RngStream& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

ModelConfig random_config(RngStream& rng) {
  ModelConfig c;
  c.num_tasks = between(rng, 1, 3);
  c.num_features = between(rng, 1, 4);
  c.hidden_size = between(rng, 2, 5);
  c.embed_layers = between(rng, 1, 3);
  c.mc_samples = between(rng, 2, 3);
  c.dropout_rate = pick<Real>(rng, {0, 0.1, 0.5});
  c.uncertainty_mode = pick(rng, {UncertaintyMode::both, UncertaintyMode::epistemic, UncertaintyMode::aleatoric,
                                  UncertaintyMode::none});
  c.transfer_mode = pick(rng, {TransferMode::full, TransferMode::intratask, TransferMode::samestep, TransferMode::none,
                               TransferMode::unconstrained});
  c.alpha_normalization = pick(rng, {AlphaNormalization::sigmoid, AlphaNormalization::softmax});
  c.mu_activation = pick(rng, {MuActivation::leaky_relu, MuActivation::sigmoid});
  if (c.uncertainty_mode == UncertaintyMode::none) c.gate_input = GateInput::features_only;
  c.validate();
  return c;
}

std::vector<Episode> random_episodes(RngStream& rng, std::size_t n, std::size_t T, const ModelConfig& c,
                                     bool vary_length = true) {
  std::vector<Episode> out;
  for (std::size_t b = 0; b < n; ++b) {
    Episode e;
    e.id = "e" + std::to_string(b);
    e.length = vary_length ? between(rng, 1, T) : T;
    for (std::size_t i = 0; i < e.length * c.num_features; ++i) e.features.push_back(Real(2 * rng.normal()));
    for (std::size_t d = 0; d < c.num_tasks; ++d) {
      e.labels.push_back(Real(rng.below(2)));
      e.mask.push_back(rng.uniform() < 0.7 ? 1 : 0);
    }
    out.push_back(std::move(e));
  }
  return out;
}

void randomize(ParameterSet& params, RngStream& rng, double scale) {
  for (auto& [name, t] : params)
    for (Real& v : t.mutable_values()) v = Real(scale * (2 * rng.uniform() - 1));
}

std::vector<Real> values(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

std::vector<Real> grad_of(const Tensor& t) {
  if (!t.has_grad()) return std::vector<Real>(t.values().size(), 0);
  return {t.grad().begin(), t.grad().end()};
}

const std::vector<variants::Family> kFamilies{variants::Family::stl,         variants::Family::mtl,
                                              variants::Family::amtl_loss,   variants::Family::mtl_kendall,
                                              variants::Family::p_amtl,      variants::Family::td_amtl,
                                              variants::Family::tp_amtl};

}  // namespace

TEST_CASE("latent scales are positive, variances non-negative and probabilities in range") {
  for (std::size_t n = 0; n < kCases; ++n) {
    CAPTURE(n);
    RngStream rng(n, 0x51);
    const ModelConfig c = random_config(rng);
    TpAmtlNetwork net(c, n);
    randomize(net.parameters(), rng, pick(rng, {0.5, 2.0, 4.0}));
    const auto batch = make_batch(random_episodes(rng, between(rng, 1, 3), between(rng, 1, 4), c));
    const Phase phase = rng.below(2) ? Phase::train : Phase::eval;
    RngStream fwd(n, 0x52);
    const ForwardResult r = net.forward(batch, phase, fwd);
    for (const auto& lat : r.latents) {
      if (c.aleatoric()) {
        for (Real s : lat.scale.values()) REQUIRE(s > 0);
      }
      for (Real v : lat.mc_variance.values()) {
        REQUIRE(v >= 0);
        if (c.dropout_rate == 0) REQUIRE(v == 0);
      }
      const Tensor aleatoric = lat.aleatoric_variance();
      for (Real v : aleatoric.values()) REQUIRE(v >= 0);
    }
    for (const auto& p : r.probabilities)
      for (Real v : p.values()) REQUIRE((std::isfinite(v) && v >= 0 && v <= 1));
  }
}

TEST_CASE("transfer weights respect the mode masks on every forward pass") {
  for (std::size_t n = 0; n < kCases; ++n) {
    CAPTURE(n);
    RngStream rng(n, 0x61);
    ModelConfig c = random_config(rng);
    c.num_tasks = between(rng, 2, 3);
    TpAmtlNetwork net(c, n);
    randomize(net.parameters(), rng, 1.0);
    const std::size_t T = between(rng, 1, 4);
    const auto batch = make_batch(random_episodes(rng, between(rng, 1, 3), T, c));
    RngStream fwd(n, 0x62);
    const ForwardResult r = net.forward(batch, Phase::train, fwd);
    if (c.transfer_mode == TransferMode::none) {
      REQUIRE(r.alphas.empty());
      continue;
    }
    for (std::size_t b = 0; b < batch.batch; ++b) {
      const auto g = transfer::extract_graph(r.alphas, c.num_tasks, batch.batch, b, batch.lengths[b], {}, {});
      for (std::size_t j = 0; j < c.num_tasks; ++j)
        for (std::size_t d = 0; d < c.num_tasks; ++d)
          for (std::size_t i = 0; i < g.timesteps; ++i)
            for (std::size_t t = 0; t < g.timesteps; ++t) {
              const Real a = g.at(j, d, i, t);
              REQUIRE(std::isfinite(a));
              if (c.transfer_mode != TransferMode::unconstrained && i > t) REQUIRE(a == 0);
              if (c.transfer_mode == TransferMode::samestep && i != t) REQUIRE(a == 0);
              if (c.transfer_mode == TransferMode::intratask && j != d) REQUIRE(a == 0);
            }
    }
  }
}

TEST_CASE("masked labels never reach the loss or any gradient, in every variant") {
  for (std::size_t n = 0; n < kCases; ++n) {
    CAPTURE(n);
    RngStream rng(n, 0x71);
    ModelConfig c = random_config(rng);
    const auto family = kFamilies[rng.below(kFamilies.size())];
    CAPTURE(variants::to_string(family));
    const bool single_step = family == variants::Family::p_amtl;
    if (family == variants::Family::p_amtl || family == variants::Family::tp_amtl) {
      // Leave the mode as drawn; the other families pick their own.
    } else {
      c.transfer_mode = TransferMode::full;
      c.uncertainty_mode = UncertaintyMode::both;
      c.gate_input = GateInput::uncertainty;
    }
    if (single_step && c.transfer_mode != TransferMode::none) c.transfer_mode = TransferMode::full;
    variants::VariantSpec spec;
    spec.family = family;
    auto a = variants::build(spec, c, n);
    auto b = variants::build(spec, c, n);
    const auto episodes = random_episodes(rng, between(rng, 1, 4), single_step ? 1 : between(rng, 1, 4), c);
    EpisodeBatch clean = make_batch(episodes);
    EpisodeBatch flipped = clean;
    for (std::size_t i = 0; i < flipped.labels.size(); ++i)
      if (flipped.label_mask[i] == 0) flipped.labels[i] = 1 - flipped.labels[i];
    // Mask one task completely: its output head must see exactly zero gradient
    // (no weight decay here, which would touch every parameter).
    const std::size_t silent = rng.below(c.num_tasks);
    for (std::size_t i = 0; i < clean.batch; ++i) {
      clean.label_mask[i * c.num_tasks + silent] = 0;
      flipped.label_mask[i * c.num_tasks + silent] = 0;
      flipped.labels[i * c.num_tasks + silent] = 1 - clean.labels[i * c.num_tasks + silent];
    }
    RngStream ra(n, 0x72), rb(n, 0x72);
    const auto la = a->objective(clean, a->forward(clean, Phase::train, ra), Real(0));
    const auto lb = b->objective(flipped, b->forward(flipped, Phase::train, rb), Real(0));
    REQUIRE(la.item() == lb.item());
    la.backward();
    lb.backward();
    auto pa = a->parameters().begin();
    for (auto& [name, t] : b->parameters()) {
      REQUIRE(grad_of(pa->second) == grad_of(t));
      const std::string prefix = "task" + std::to_string(silent) + ".";
      const bool head = name.rfind(prefix + "output", 0) == 0 || name.rfind(prefix + "attention", 0) == 0;
      if (head) {
        for (Real g : grad_of(t)) REQUIRE(g == 0);
      }
      ++pa;
    }
  }
}

TEST_CASE("AUROC identities") {
  for (std::size_t n = 0; n < kCases; ++n) {
    CAPTURE(n);
    RngStream rng(n, 0x81);
    const std::size_t size = between(rng, 2, 60);
    std::vector<double> scores(size), labels(size);
    const bool ties = rng.below(2);
    for (std::size_t i = 0; i < size; ++i) {
      labels[i] = double(rng.below(2));
      scores[i] = ties ? double(rng.below(5)) : rng.normal();
    }
    labels[0] = 0;
    labels[1] = 1;
    const double a = eval::auroc(scores, labels);
    REQUIRE((a >= 0 && a <= 1));
    REQUIRE(a == doctest::Approx(oracle::pairwise_auroc(scores, labels)).epsilon(1e-12));

    std::vector<double> flipped(size), warped(size);
    for (std::size_t i = 0; i < size; ++i) {
      flipped[i] = 1 - labels[i];
      warped[i] = std::exp(0.5 * scores[i]) * 3 + 1;  // strictly increasing
    }
    REQUIRE(a + eval::auroc(scores, flipped) == doctest::Approx(1).epsilon(1e-12));
    REQUIRE(eval::auroc(warped, labels) == a);

    // Aggregation ignores run order.
    std::vector<eval::RunScores> runs;
    const std::size_t count = between(rng, 2, 6), tasks = between(rng, 1, 3);
    for (std::size_t r = 0; r < count; ++r) {
      std::vector<double> t(tasks);
      for (auto& v : t) v = rng.uniform();
      runs.push_back({"v", "r" + std::to_string(r), t});
    }
    const auto before = eval::aggregate(runs).to_json();
    for (std::size_t i = runs.size() - 1; i > 0; --i) std::swap(runs[i], runs[rng.below(i + 1)]);
    REQUIRE(eval::aggregate(runs).to_json() == before);
  }
}

TEST_CASE("replays with the same seed are bit-identical") {
  for (std::size_t n = 0; n < kCases; ++n) {
    CAPTURE(n);
    RngStream rng(n, 0x91);
    const ModelConfig c = random_config(rng);
    const auto family = kFamilies[rng.below(kFamilies.size())];
    variants::VariantSpec spec;
    spec.family = family;
    ModelConfig cc = c;
    if (family == variants::Family::p_amtl && cc.transfer_mode != TransferMode::none) cc.transfer_mode = TransferMode::full;
    if (family != variants::Family::p_amtl && family != variants::Family::tp_amtl) {
      cc.transfer_mode = TransferMode::full;
      cc.uncertainty_mode = UncertaintyMode::both;
      cc.gate_input = GateInput::uncertainty;
    }
    auto a = variants::build(spec, cc, n);
    auto b = variants::build(spec, cc, n);
    const std::size_t T = family == variants::Family::p_amtl ? 1 : between(rng, 1, 4);
    const auto batch = make_batch(random_episodes(rng, between(rng, 1, 3), T, cc));
    train::AdamState sa, sb;
    RngStream ra(n, 0x92), rb(n, 0x92);
    for (int step = 0; step < 2; ++step) {
      a->parameters().zero_grad();
      b->parameters().zero_grad();
      const auto fa = a->forward(batch, Phase::train, ra);
      const auto fb = b->forward(batch, Phase::train, rb);
      for (std::size_t d = 0; d < cc.num_tasks; ++d) REQUIRE(values(fa.probabilities[d]) == values(fb.probabilities[d]));
      const auto la = a->objective(batch, fa, Real(1e-3));
      const auto lb = b->objective(batch, fb, Real(1e-3));
      REQUIRE(la.item() == lb.item());
      la.backward();
      lb.backward();
      train::adam_step(a->parameters(), sa, {});
      train::adam_step(b->parameters(), sb, {});
      a->after_step(batch, fa);
      b->after_step(batch, fb);
    }
    auto pa = a->parameters().begin();
    for (auto& [name, t] : b->parameters()) {
      REQUIRE(values(pa->second) == values(t));
      ++pa;
    }
    // The stream itself replays from its seed.
    RngStream x(n, 7), y(n, 7);
    for (int i = 0; i < 8; ++i) REQUIRE(x.next_u64() == y.next_u64());
  }
}

TEST_CASE("streaming inference equals batch prediction on every prefix") {
  for (std::size_t n = 0; n < kCases; ++n) {
    CAPTURE(n);
    RngStream rng(n, 0xA1);
    ModelConfig c = random_config(rng);
    c.transfer_mode = pick(rng, {TransferMode::full, TransferMode::intratask, TransferMode::samestep, TransferMode::none});
    TpAmtlNetwork net(c, n);
    randomize(net.parameters(), rng, 0.7);
    const std::size_t T = between(rng, 1, 4), B = between(rng, 1, 3);
    const auto episodes = random_episodes(rng, B, T, c, false);
    const auto batch = make_batch(episodes);
    auto online = net.online(B, RngStream(n, 0xA2));
    for (std::size_t t = 1; t <= T; ++t) {
      const auto step = online.step(diff::slice_rows(batch.inputs, (t - 1) * B, B));
      auto prefix = episodes;
      for (auto& e : prefix) e.length = t, e.features.resize(t * c.num_features);
      RngStream r(n, 0xA2);
      const auto p = predict_proba(net, make_batch(prefix), r);
      for (std::size_t d = 0; d < c.num_tasks; ++d)
        for (std::size_t b = 0; b < B; ++b) REQUIRE(std::abs(step[d].at(b, 0) - p[d][b]) <= 1e-12);
    }
  }
}

TEST_CASE("generated splits are disjoint, complete and pure functions of the generator settings") {
  for (std::size_t n = 0; n < kCases; ++n) {
    CAPTURE(n);
    RngStream rng(n, 0xB1);
    data::SyntheticSpec spec;
    spec.seed = n;
    spec.num_tasks = between(rng, 2, 3);
    spec.num_features = spec.num_tasks + between(rng, 0, 2);
    spec.timesteps = between(rng, 2, 5);
    spec.task_counts = {between(rng, 5, 40)};
    spec.links = {{0, 1, between(rng, 0, spec.timesteps - 1)}};
    const auto a = data::generate_temporal_tasks(spec);
    const auto b = data::generate_temporal_tasks(spec);
    std::set<std::string> ids;
    std::size_t total = 0;
    for (const char* name : {"train", "valid", "test"}) {
      const auto& xs = a.split(name);
      const auto& ys = b.split(name);
      REQUIRE(xs.size() == ys.size());
      for (std::size_t i = 0; i < xs.size(); ++i) {
        REQUIRE(xs[i].id == ys[i].id);
        REQUIRE(xs[i].features == ys[i].features);
        REQUIRE(xs[i].labels == ys[i].labels);
        ids.insert(xs[i].id);
      }
      total += xs.size();
    }
    REQUIRE(ids.size() == total);
    REQUIRE(total == spec.task_counts[0]);
    REQUIRE(a.train.size() == std::size_t(std::floor(double(total) * spec.train_fraction)));
  }
}
