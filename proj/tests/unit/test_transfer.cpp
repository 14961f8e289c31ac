#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "tpamtl/diff/ops.hpp"
#include "tpamtl/transfer/transfer.hpp"

using namespace tpamtl;
using namespace tpamtl::transfer;
using diff::RngStream;
using model::GateInput;
using tpamtl::testing::gradcheck;
using tpamtl::testing::random_tensor;

namespace {

const std::vector<TransferMode> kModes{TransferMode::full, TransferMode::intratask,
                                       TransferMode::samestep, TransferMode::none,
                                       TransferMode::unconstrained};

ModelConfig make_config(std::size_t D, std::size_t k, TransferMode mode,
                        GateInput gate = GateInput::uncertainty) {
  ModelConfig c;
  c.num_tasks = D;
  c.hidden_size = k;
  c.transfer_mode = mode;
  c.gate_input = gate;
  return c;
}

void randomize(model::ParameterSet& params, std::uint64_t seed) {
  RngStream rng(seed, 31);
  for (auto& [name, t] : params)
    for (Real& v : t.mutable_values()) v = static_cast<Real>(2 * rng.uniform() - 1);
}

struct Fixture {
  ModelConfig config;
  model::ParameterSet params;
  TransferParams transfer;
  std::vector<Tensor> features, variances;

  Fixture(std::size_t D, std::size_t k, std::size_t T, std::size_t B, TransferMode mode,
          std::uint64_t seed, GateInput gate = GateInput::uncertainty)
      : config(make_config(D, k, mode, gate)) {
    transfer = TransferParams::create(params, model::Initializer(seed), config);
    randomize(params, seed);
    RngStream rng(seed, 2);
    for (std::size_t j = 0; j < D; ++j) {
      features.push_back(random_tensor(rng, T * B, k, -1, 1));
      variances.push_back(random_tensor(rng, T * B, k, 0, 1));
    }
  }

  CombineResult run(std::size_t T, std::size_t B, std::span<const Real> mask = {}) const {
    TransferInputs in;
    in.batch = B;
    in.timesteps = T;
    in.features = features;
    if (config.gate_input == GateInput::uncertainty) in.variances = variances;
    in.step_mask = mask;
    return combine(transfer, config, in);
  }
};

double leaky(double x, double slope) { return x > 0 ? x : slope * x; }
double sigm(double x) { return 1 / (1 + std::exp(-x)); }
double p(const model::ParameterSet& ps, const std::string& name, std::size_t i = 0) {
  return ps.get(name).values()[i];
}

// Scalar evaluation of C_d(t) for k = 1, B = 1, written from the defining
// sum with every mode's source set listed explicitly.
double oracle(const Fixture& f, std::size_t d, std::size_t t, std::size_t T) {
  const auto& ps = f.params;
  const double slope = f.config.leaky_slope;
  auto feat = [&](std::size_t j, std::size_t i) { return f.features[j].values()[i]; };
  auto var = [&](std::size_t j, std::size_t i) { return f.variances[j].values()[i]; };
  std::vector<std::pair<std::size_t, std::size_t>> sources;
  for (std::size_t j = 0; j < 2; ++j) {
    for (std::size_t i = 0; i < T; ++i) {
      bool ok = false;
      switch (f.config.transfer_mode) {
        case TransferMode::full: ok = i <= t; break;
        case TransferMode::intratask: ok = j == d && i <= t; break;
        case TransferMode::samestep: ok = j != d && i == t; break;
        case TransferMode::none: ok = false; break;
        case TransferMode::unconstrained: ok = true; break;
      }
      if (ok) sources.emplace_back(j, i);
    }
  }
  if (sources.empty()) return feat(d, t);
  double acc = 0;
  for (auto [j, i] : sources) {
    const std::string F = "transfer.F" + std::to_string(j) + "_" + std::to_string(d);
    const double hidden = p(ps, F + ".w_source") * feat(j, i) + p(ps, F + ".w_target") * feat(d, t) +
                          p(ps, F + ".w_source_var") * var(j, i) +
                          p(ps, F + ".w_target_var") * var(d, t) + p(ps, F + ".b1");
    const double alpha = sigm(p(ps, F + ".w2") * leaky(hidden, slope) + p(ps, F + ".b2"));
    const std::string A = "adapter" + std::to_string(j);
    const double g1 = leaky(p(ps, A + ".g1.W") * feat(j, i) + p(ps, A + ".g1.b"), slope);
    acc += alpha * g1;
  }
  return feat(d, t) + p(ps, "adapter" + std::to_string(d) + ".g2.W") * acc;
}

}  // namespace

TEST_CASE("combine matches the scalar oracle for every mode (D=2, T=2, k=1)") {
  for (TransferMode mode : kModes) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      Fixture f(2, 1, 2, 1, mode, seed);
      const CombineResult r = f.run(2, 1);
      for (std::size_t d = 0; d < 2; ++d)
        for (std::size_t t = 0; t < 2; ++t)
          CHECK_MESSAGE(std::abs(r.combined[d].values()[t] - oracle(f, d, t, 2)) < 1e-12,
                        model::to_string(mode));
    }
  }
}

TEST_CASE("mode none is the identity") {
  Fixture f(3, 4, 5, 2, TransferMode::none, 3);
  const CombineResult r = f.run(5, 2);
  for (std::size_t d = 0; d < 3; ++d)
    CHECK(std::vector<Real>(r.combined[d].values().begin(), r.combined[d].values().end()) ==
          std::vector<Real>(f.features[d].values().begin(), f.features[d].values().end()));
  CHECK(r.alphas.empty());
  CHECK(f.params.size() == 0);
}

TEST_CASE("zero-initialized G2 leaves features unchanged in every mode") {
  for (TransferMode mode : kModes) {
    ModelConfig config = make_config(3, 4, mode);
    model::ParameterSet params;
    const TransferParams tp = TransferParams::create(params, model::Initializer(5), config);
    RngStream rng(4);
    std::vector<Tensor> feats, vars;
    for (int j = 0; j < 3; ++j) {
      feats.push_back(random_tensor(rng, 6 * 2, 4));
      vars.push_back(random_tensor(rng, 6 * 2, 4, 0, 1));
    }
    TransferInputs in{2, 6, feats, vars, {}, {}};
    const CombineResult r = combine(tp, config, in);
    for (int d = 0; d < 3; ++d) {
      double worst = 0;
      for (std::size_t i = 0; i < feats[d].size(); ++i)
        worst = std::max(worst, std::abs(double(r.combined[d].values()[i] - feats[d].values()[i])));
      CHECK(worst == 0);
    }
  }
}

TEST_CASE("transfer graph obeys the mode masks") {
  for (TransferMode mode : kModes) {
    Fixture f(3, 3, 4, 2, mode, 8);
    const CombineResult r = f.run(4, 2);
    for (std::size_t b = 0; b < 2; ++b) {
      const TransferGraph g = extract_graph(r.alphas, 3, 2, b, 4, {}, {});
      for (std::size_t j = 0; j < 3; ++j)
        for (std::size_t d = 0; d < 3; ++d)
          for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t t = 0; t < 4; ++t) {
              const Real a = g.at(j, d, i, t);
              CHECK(std::isfinite(a));
              const bool allowed = source_task_allowed(mode, j, d) &&
                                   i >= source_range(mode, t, 4).first &&
                                   i < source_range(mode, t, 4).first + source_range(mode, t, 4).count;
              if (!allowed) CHECK(a == 0);
              if (allowed) CHECK(a > 0);
              if (mode == TransferMode::full && i > t) CHECK(a == 0);
              if (mode == TransferMode::samestep && i != t) CHECK(a == 0);
              if (mode == TransferMode::intratask && j != d) CHECK(a == 0);
            }
    }
  }
}

TEST_CASE("transfer weight contract") {
  ModelConfig config = make_config(2, 3, TransferMode::full);
  model::ParameterSet params;
  TransferParams tp = TransferParams::create(params, model::Initializer(1), config);
  const TransferNet& net = tp.net(0, 1);
  RngStream rng(3);
  Tensor fs = random_tensor(rng, 5, 3), ft = random_tensor(rng, 5, 3);
  Tensor vs = random_tensor(rng, 5, 3, 0, 1), vt = random_tensor(rng, 5, 3, 0, 1);

  const Tensor a = transfer_weight(net, fs, ft, vs, vt, 0.01);
  CHECK(a.shape() == diff::Shape{5, 1});
  for (Real x : a.values()) {
    CHECK(x > 0);
    CHECK(x < 1);
  }

  // Asymmetry: F_{0,1} and F_{1,0} are different networks.
  const Tensor back = transfer_weight(tp.net(1, 0), fs, ft, vs, vt, 0.01);
  CHECK(a.values()[0] != back.values()[0]);

  // Gradient reaches all four inputs.
  const auto report = gradcheck(
      [&] { return diff::sum(transfer_weight(net, fs, ft, vs, vt, 0.01)); }, {fs, ft, vs, vt});
  CHECK_MESSAGE(report.max_rel_error < 1e-4, report.worst);
  for (const Tensor* t : {&fs, &ft, &vs, &vt}) {
    double norm = 0;
    for (Real g : t->grad()) norm += g * g;
    CHECK(norm > 0);
  }

  auto w2 = params.find("transfer.F0_1.w2")->mutable_values();
  std::fill(w2.begin(), w2.end(), Real(0));
  params.find("transfer.F0_1.b2")->mutable_values()[0] = 0;
  const Tensor half = transfer_weight(net, fs, ft, vs, vt, 0.01);
  for (Real x : half.values()) CHECK(x == 0.5);
}

TEST_CASE("combine gradient matches finite differences") {
  for (TransferMode mode : kModes) {
    if (mode == TransferMode::none) continue;
    Fixture f(2, 2, 3, 2, mode, 21);
    std::vector<Tensor> inputs;
    for (auto& [name, t] : f.params) inputs.push_back(t);
    for (auto& t : f.features) inputs.push_back(t);
    for (auto& t : f.variances) inputs.push_back(t);
    RngStream rng(9);
    const Tensor w0 = random_tensor(rng, 6, 2, -1, 1, false), w1 = random_tensor(rng, 6, 2, -1, 1, false);
    auto loss = [&] {
      const CombineResult r = f.run(3, 2);
      return diff::add(diff::sum(diff::mul(r.combined[0], w0)), diff::sum(diff::mul(r.combined[1], w1)));
    };
    const auto report = gradcheck(loss, inputs);
    CHECK_MESSAGE(report.max_rel_error < 1e-4, model::to_string(mode), ": ", report.worst);
  }
}

TEST_CASE("incremental combination equals full recomputation") {
  for (TransferMode mode : {TransferMode::full, TransferMode::intratask, TransferMode::samestep,
                            TransferMode::none}) {
    for (auto norm : {model::AlphaNormalization::sigmoid, model::AlphaNormalization::softmax}) {
      const std::size_t T = 40, B = 2, k = 3, D = 3;
      Fixture f(D, k, T, B, mode, 13);
      f.config.alpha_normalization = norm;
      const CombineResult full = f.run(T, B);
      IncrementalCombiner inc(f.transfer, f.config, B);
      double worst = 0;
      for (std::size_t t = 0; t < T; ++t) {
        std::vector<Tensor> fs, vs;
        for (std::size_t j = 0; j < D; ++j) {
          fs.push_back(diff::slice_rows(f.features[j], t * B, B));
          vs.push_back(diff::slice_rows(f.variances[j], t * B, B));
        }
        const auto out = inc.step(fs, vs);
        for (std::size_t d = 0; d < D; ++d)
          for (std::size_t i = 0; i < B * k; ++i)
            worst = std::max(worst, std::abs(double(out[d].values()[i] -
                                                   full.combined[d].values()[t * B * k + i])));
      }
      CHECK(worst == 0);
      CHECK(inc.steps() == T);
    }
  }
}

TEST_CASE("incremental T=1 equals the batch path and rejects unconstrained") {
  Fixture f(2, 3, 1, 4, TransferMode::full, 2);
  const CombineResult full = f.run(1, 4);
  IncrementalCombiner inc(f.transfer, f.config, 4);
  const auto out = inc.step(f.features, f.variances);
  for (std::size_t d = 0; d < 2; ++d)
    for (std::size_t i = 0; i < out[d].size(); ++i) CHECK(out[d].values()[i] == full.combined[d].values()[i]);
  CHECK(inc.last_alphas().size() == full.alphas.size());

  Fixture u(2, 3, 1, 4, TransferMode::unconstrained, 2);
  CHECK_THROWS_AS(IncrementalCombiner(u.transfer, u.config, 4), model::ConfigError);
  CHECK_THROWS_AS(inc.step(std::vector<Tensor>{f.features[0]}, f.variances), diff::DimensionError);
}

TEST_CASE("masked source steps receive zero weight") {
  const std::size_t T = 3, B = 2;
  Fixture f(2, 2, T, B, TransferMode::full, 4);
  // instance 1 has length 2
  const std::vector<Real> mask{1, 1, 1, 1, 1, 0};
  const CombineResult r = f.run(T, B, mask);
  const TransferGraph g = extract_graph(r.alphas, 2, B, 1, T, {}, {});
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t d = 0; d < 2; ++d)
      for (std::size_t t = 0; t < T; ++t) CHECK(g.at(j, d, 2, t) == 0);
  // the valid prefix is untouched by the mask
  const CombineResult plain = f.run(T, B);
  for (std::size_t d = 0; d < 2; ++d)
    for (std::size_t i = 0; i < 2 * B * 2; ++i) CHECK(r.combined[d].values()[i] == plain.combined[d].values()[i]);
}

TEST_CASE("softmax normalization sums to one over allowed sources") {
  Fixture f(3, 2, 4, 2, TransferMode::full, 6);
  f.config.alpha_normalization = model::AlphaNormalization::softmax;
  const CombineResult r = f.run(4, 2);
  const TransferGraph g = extract_graph(r.alphas, 3, 2, 0, 4, {}, {});
  for (std::size_t d = 0; d < 3; ++d)
    for (std::size_t t = 0; t < 4; ++t) {
      double total = 0;
      for (std::size_t j = 0; j < 3; ++j)
        for (std::size_t i = 0; i < 4; ++i) total += g.at(j, d, i, t);
      CHECK(total == doctest::Approx(1).epsilon(1e-12));
    }
}

TEST_CASE("loss gate is static over time and symmetric at equal losses") {
  ModelConfig config = make_config(3, 2, TransferMode::full, GateInput::task_loss);
  model::ParameterSet params;
  const TransferParams tp = TransferParams::create(params, model::Initializer(1), config);
  for (std::size_t j = 0; j < 3; ++j) {
    const Real a = diff::sigmoid(loss_gate_logit(tp.loss_net(j, (j + 1) % 3), 0.7, 0.7, 0.01)).item();
    CHECK(a > 0);
    CHECK(a < 1);
  }
  RngStream rng(1);
  std::vector<Tensor> feats;
  for (int j = 0; j < 3; ++j) feats.push_back(random_tensor(rng, 3 * 2, 2));
  const std::vector<Real> losses{0.3, 0.6, 0.9};
  TransferInputs in{2, 3, feats, {}, {}, losses};
  const CombineResult r = combine(tp, config, in);
  const TransferGraph g = extract_graph(r.alphas, 3, 2, 1, 3, {}, {});
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t d = 0; d < 3; ++d)
      for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t i = 0; i <= t; ++i) CHECK(g.at(j, d, i, t) == g.at(j, d, 0, 0));
}

TEST_CASE("normalized transfer quantities") {
  TransferGraph g(1, 3);
  // 1-based t = 2 with alpha row (0.2, 0.4) over target steps 2..3
  g.at(0, 0, 1, 1) = 0.2;
  g.at(0, 0, 1, 2) = 0.4;
  CHECK(normalized_outgoing(g, 0, 1, 0) == doctest::Approx(0.3).epsilon(1e-15));
  g.at(0, 0, 2, 2) = 0.7;
  CHECK(normalized_outgoing(g, 0, 2, 0) == 0.7);
  CHECK(normalized_incoming(g, 0, 2, 0) == doctest::Approx((0.4 + 0.7) / 3));

  TransferGraph c(2, 4);
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t d = 0; d < 2; ++d)
      for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t i = 0; i <= t; ++i) c.at(j, d, i, t) = 0.37;
  for (std::size_t t = 0; t < 4; ++t) {
    CHECK(normalized_outgoing(c, 0, t, 1) == doctest::Approx(0.37).epsilon(1e-15));
    CHECK(normalized_incoming(c, 1, t, 0) == doctest::Approx(0.37).epsilon(1e-15));
  }
  CHECK_THROWS_AS((void)normalized_outgoing(c, 2, 0, 0), std::out_of_range);
  CHECK_THROWS_AS((void)normalized_incoming(c, 0, 4, 0), std::out_of_range);
}

TEST_CASE("graph extraction carries uncertainty annotations") {
  Fixture f(2, 2, 2, 1, TransferMode::full, 3);
  const CombineResult r = f.run(2, 1);
  const TransferGraph g = extract_graph(r.alphas, 2, 1, 0, 2, f.variances, f.variances);
  const auto v = f.variances[1].values();
  CHECK(g.epistemic[1 * 2 + 1] == doctest::Approx((v[2] + v[3]) / 2));
  CHECK(g.total_variance(1, 1) == doctest::Approx(v[2] + v[3]));
}
