#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "tpamtl/diff/ops.hpp"
#include "tpamtl/variants/variants.hpp"

using namespace tpamtl;
using namespace tpamtl::variants;
using diff::RngStream;
using model::Episode;
using model::TransferMode;
using model::UncertaintyMode;

namespace {

ModelConfig base_config(std::size_t D = 3, std::size_t m = 4, std::size_t k = 5) {
  ModelConfig c;
  c.num_tasks = D;
  c.num_features = m;
  c.hidden_size = k;
  c.embed_layers = 2;
  c.dropout_rate = 0.25;
  c.mc_samples = 3;
  return c;
}

std::vector<Episode> episodes(std::size_t n, std::size_t T, std::size_t m, std::size_t D, std::uint64_t seed) {
  RngStream rng(seed, 1);
  std::vector<Episode> out;
  for (std::size_t b = 0; b < n; ++b) {
    Episode e;
    e.id = std::to_string(b);
    e.length = T;
    for (std::size_t i = 0; i < T * m; ++i) e.features.push_back(static_cast<Real>(rng.normal()));
    for (std::size_t d = 0; d < D; ++d) {
      e.labels.push_back(static_cast<Real>(rng.below(2)));
      e.mask.push_back(1);
    }
    out.push_back(std::move(e));
  }
  return out;
}

void randomize(ParameterSet& params, std::uint64_t seed) {
  RngStream rng(seed, 3);
  for (auto& [n, t] : params)
    for (Real& v : t.mutable_values()) v = static_cast<Real>(rng.uniform() - 0.5);
}

std::vector<Real> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

VariantSpec spec(Family f) {
  VariantSpec s;
  s.family = f;
  return s;
}

}  // namespace

TEST_CASE("every family builds, runs and trains through one interface") {
  const auto eps = episodes(4, 1, 4, 3, 1);
  const auto batch = model::make_batch(eps);
  for (Family f : {Family::stl, Family::mtl, Family::amtl_loss, Family::mtl_kendall, Family::p_amtl,
                   Family::td_amtl, Family::tp_amtl}) {
    auto m = build(spec(f), base_config(), 7);
    CHECK(m->family() == to_string(f));
    RngStream rng(2);
    const auto r = m->forward(batch, model::Phase::train, rng);
    CHECK(r.probabilities.size() == 3);
    for (const auto& p : r.probabilities)
      for (Real x : p.values()) {
        CHECK(x > 0);
        CHECK(x < 1);
      }
    m->objective(batch, r, 0.001).backward();
    m->after_step(batch, r);
    const bool transfer = f == Family::amtl_loss || f == Family::p_amtl || f == Family::td_amtl ||
                          f == Family::tp_amtl;
    CHECK(m->has_transfer() == transfer);
    CHECK(r.alphas.empty() == !transfer);
  }
}

TEST_CASE("stl: disjoint parameter sets with zero cross-task gradient") {
  auto m = build(spec(Family::stl), base_config(), 3);
  const auto batch = model::make_batch(episodes(5, 3, 4, 3, 2));
  RngStream rng(1);
  const auto r = m->forward(batch, model::Phase::train, rng);
  for (std::size_t task = 0; task < 3; ++task) {
    m->parameters().zero_grad();
    model::task_loss(r.probabilities[task], batch, task).backward();
    for (auto& [name, t] : m->parameters()) {
      const bool own = name.rfind("stl" + std::to_string(task) + ".", 0) == 0;
      CHECK(name.rfind("stl", 0) == 0);
      double g = 0;
      if (t.has_grad())
        for (Real x : t.grad()) g += std::abs(x);
      if (!own) CHECK(g == 0);
    }
  }
}

TEST_CASE("transfer_mode none equals a directly built no-transfer network") {
  const auto batch = model::make_batch(episodes(3, 4, 4, 3, 3));
  VariantSpec s = spec(Family::tp_amtl);
  s.transfer_mode = TransferMode::none;
  auto via_spec = build(s, base_config(), 11);
  ModelConfig direct_config = base_config();
  direct_config.transfer_mode = TransferMode::none;
  model::TpAmtlNetwork direct(direct_config, 11);
  CHECK(via_spec->parameters().size() == direct.parameters().size());
  for (auto phase : {model::Phase::train, model::Phase::eval}) {
    RngStream r1(5), r2(5);
    const auto a = via_spec->forward(batch, phase, r1);
    const auto b = direct.forward(batch, phase, r2);
    for (std::size_t d = 0; d < 3; ++d) CHECK(vals(a.probabilities[d]) == vals(b.probabilities[d]));
  }
}

TEST_CASE("p_amtl equals the temporal network at T=1 with samestep transfer") {
  for (auto unc : {UncertaintyMode::both, UncertaintyMode::epistemic, UncertaintyMode::aleatoric,
                   UncertaintyMode::none}) {
    VariantSpec ps = spec(Family::p_amtl);
    ps.uncertainty_mode = unc;
    VariantSpec ts = spec(Family::tp_amtl);
    ts.transfer_mode = TransferMode::samestep;
    ts.uncertainty_mode = unc;
    auto p = build(ps, base_config(), 21);
    auto t = build(ts, base_config(), 99);
    randomize(p->parameters(), 4);
    CHECK(t->parameters().copy_values_from(p->parameters()) == t->parameters().size());
    CHECK(p->parameters().size() == t->parameters().size());
    const auto batch = model::make_batch(episodes(6, 1, 4, 3, 8));
    for (auto phase : {model::Phase::train, model::Phase::eval}) {
      RngStream r1(17), r2(17);
      const auto a = p->forward(batch, phase, r1);
      const auto b = t->forward(batch, phase, r2);
      for (std::size_t d = 0; d < 3; ++d) CHECK(vals(a.probabilities[d]) == vals(b.probabilities[d]));
    }
  }
  auto p = build(spec(Family::p_amtl), base_config(), 1);
  const auto multi = model::make_batch(episodes(2, 3, 4, 3, 1));
  RngStream rng(1);
  CHECK_THROWS_AS(p->forward(multi, model::Phase::eval, rng), diff::DimensionError);
}

TEST_CASE("td_amtl forward does not depend on the random stream") {
  auto m = build(spec(Family::td_amtl), base_config(), 5);
  CHECK(m->config().uncertainty_mode == UncertaintyMode::none);
  CHECK(m->config().gate_input == model::GateInput::features_only);
  const auto batch = model::make_batch(episodes(3, 4, 4, 3, 4));
  for (auto phase : {model::Phase::train, model::Phase::eval}) {
    RngStream r1(1), r2(987654321, 42);
    const auto a = m->forward(batch, phase, r1);
    const auto b = m->forward(batch, phase, r2);
    for (std::size_t d = 0; d < 3; ++d) CHECK(vals(a.probabilities[d]) == vals(b.probabilities[d]));
  }
  VariantSpec bad = spec(Family::td_amtl);
  bad.uncertainty_mode = UncertaintyMode::epistemic;
  CHECK_THROWS_AS(build(bad, base_config(), 1), model::ConfigError);
  VariantSpec bad2 = spec(Family::mtl);
  bad2.transfer_mode = TransferMode::full;
  CHECK_THROWS_AS(build(bad2, base_config(), 1), model::ConfigError);
  VariantSpec bad3 = spec(Family::p_amtl);
  bad3.transfer_mode = TransferMode::full;
  CHECK_THROWS_AS(build(bad3, base_config(), 1), model::ConfigError);
}

TEST_CASE("amtl_loss_weight") {
  model::ParameterSet params;
  const auto zero = transfer::LossGateNet::create(params, model::Initializer(1), "g", 4);
  TaskLossTracker tracker(3);
  CHECK_THROWS_AS(amtl_loss_weight(tracker, zero, 0, 1, 0.01), std::logic_error);
  tracker.record(0, 0.5);
  tracker.record(1, 0.5);
  tracker.record(2, 0.5);
  const Real a = amtl_loss_weight(tracker, zero, 0, 1, 0.01);
  CHECK(a > 0);
  CHECK(a < 1);
  // Same F, equal losses: swapping source and target feeds identical inputs.
  CHECK(amtl_loss_weight(tracker, zero, 1, 0, 0.01) == a);
  for (auto& [n, t] : params)
    if (n.find("w2") != std::string::npos || n.find("b2") != std::string::npos)
      for (Real& v : t.mutable_values()) v = 0;
  CHECK(amtl_loss_weight(tracker, zero, 0, 2, 0.01) == 0.5);

  TaskLossTracker ema(1, 0.5);
  ema.record(0, 1.0);
  ema.record(0, 0.0);
  CHECK(ema.means()[0] == doctest::Approx(0.5));
  CHECK_THROWS(ema.record(0, std::nan("")));
}

TEST_CASE("amtl_loss updates its tracker after each step and round-trips it") {
  auto m = build(spec(Family::amtl_loss), base_config(), 3);
  auto* amtl = dynamic_cast<AmtlLoss*>(m.get());
  REQUIRE(amtl);
  CHECK(amtl->tracker().empty());
  const auto batch = model::make_batch(episodes(4, 2, 4, 3, 5));
  RngStream rng(2);
  const auto r = m->forward(batch, model::Phase::train, rng);
  m->after_step(batch, r);
  CHECK(amtl->tracker().records() == 3);
  const auto state = m->extra_state();
  auto other = build(spec(Family::amtl_loss), base_config(), 3);
  other->load_extra_state(state);
  CHECK(dynamic_cast<AmtlLoss*>(other.get())->tracker().means() == amtl->tracker().means());
}

TEST_CASE("kendall weighted loss") {
  const std::vector<Tensor> losses{Tensor::scalar(1.5), Tensor::scalar(0.25)};
  const std::vector<Tensor> zero{Tensor::scalar(0), Tensor::scalar(0)};
  CHECK(kendall_weighted_loss(losses, zero).item() == doctest::Approx(1.75));

  const std::vector<Tensor> two{Tensor::scalar(2)};
  const std::vector<Tensor> log2{Tensor::scalar(std::log(2.0))};
  CHECK(kendall_weighted_loss(two, log2).item() == doctest::Approx(0.5 + std::log(2.0)).epsilon(1e-14));
  CHECK(kendall_weighted_loss(two, log2).item() == doctest::Approx(1.1931).epsilon(1e-4));

  for (double L : {0.3, 1.0, 2.0, 7.5}) {
    Tensor s = Tensor::from({1, 1}, {std::log(std::sqrt(2 * L))}, true);
    Tensor l = Tensor::from({1, 1}, {L}, true);
    const std::vector<Tensor> ls{l}, ss{s};
    kendall_weighted_loss(ls, ss).backward();
    CHECK(std::abs(s.grad()[0]) < 1e-12);
    CHECK(l.grad()[0] == doctest::Approx(1 / (2 * L)));
  }
}

TEST_CASE("mtl_kendall objective uses its log-sigma parameters") {
  auto m = build(spec(Family::mtl_kendall), base_config(), 4);
  CHECK(m->parameters().find("kendall.log_sigma2") != nullptr);
  const auto batch = model::make_batch(episodes(5, 2, 4, 3, 6));
  RngStream rng(1);
  const auto r = m->forward(batch, model::Phase::eval, rng);
  // sigma = 1 at start: the objective equals the plain masked loss.
  CHECK(m->objective(batch, r, 0).item() ==
        doctest::Approx(model::total_loss(r, batch, m->parameters(), 0).item()).epsilon(1e-14));
  m->objective(batch, r, 0).backward();
  CHECK(m->parameters().get("kendall.log_sigma0").grad()[0] != 0);
}

TEST_CASE("mtl shares one tower") {
  auto m = build(spec(Family::mtl), base_config(), 4);
  CHECK(m->parameters().find("embed.W") != nullptr);
  CHECK(m->parameters().find("task2.output.W") != nullptr);
  CHECK(m->parameters().find("task0.attention.W") == nullptr);
  auto s = build(spec(Family::stl), base_config(), 4);
  CHECK(s->parameters().size() == 3 * (1 + 3 + 2));
}

TEST_CASE("variant spec json") {
  VariantSpec s;
  s.family = Family::tp_amtl;
  s.transfer_mode = TransferMode::intratask;
  s.label = "AMTL-intratask";
  const nlohmann::json j = s;
  CHECK(j.get<VariantSpec>() == s);
  CHECK(nlohmann::json("mtl").get<VariantSpec>().family == Family::mtl);
  CHECK_THROWS_AS(nlohmann::json({{"family", "tp_amtl"}, {"extra", 1}}).get<VariantSpec>(), model::ConfigError);
  CHECK_THROWS_AS(parse_family("retain"), model::ConfigError);
}
