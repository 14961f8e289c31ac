#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "gradcheck.hpp"
#include "tpamtl/diff/ops.hpp"
#include "tpamtl/model/checkpoint.hpp"
#include "tpamtl/model/network.hpp"

using namespace tpamtl;
using namespace tpamtl::model;
using diff::RngStream;
using tpamtl::testing::gradcheck;
using tpamtl::testing::random_tensor;

namespace {

std::vector<Real> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

ModelConfig small_config(std::size_t D = 2, std::size_t m = 4, std::size_t k = 5) {
  ModelConfig c;
  c.num_tasks = D;
  c.num_features = m;
  c.hidden_size = k;
  c.embed_layers = 2;
  c.dropout_rate = 0.2;
  c.mc_samples = 3;
  return c;
}

std::vector<Episode> random_episodes(std::size_t n, std::size_t T, std::size_t m, std::size_t D,
                                     std::uint64_t seed, bool vary_length = false) {
  RngStream rng(seed, 77);
  std::vector<Episode> out;
  for (std::size_t b = 0; b < n; ++b) {
    Episode e;
    e.id = "e" + std::to_string(b);
    e.length = vary_length ? 1 + rng.below(T) : T;
    for (std::size_t i = 0; i < e.length * m; ++i) e.features.push_back(static_cast<Real>(rng.normal()));
    for (std::size_t d = 0; d < D; ++d) {
      e.labels.push_back(static_cast<Real>(rng.below(2)));
      e.mask.push_back(rng.uniform() < 0.8 ? 1 : 0);
    }
    out.push_back(std::move(e));
  }
  return out;
}

void randomize(ParameterSet& params, std::uint64_t seed, double scale = 1) {
  RngStream rng(seed, 5);
  for (auto& [name, t] : params)
    for (Real& v : t.mutable_values()) v = static_cast<Real>(scale * (2 * rng.uniform() - 1));
}

}  // namespace

TEST_CASE("embed") {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor x = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
  CHECK(vals(embed(x, eye)) == vals(x));
  CHECK(vals(embed(Tensor::zeros({3, 2}), Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}))) ==
        std::vector<Real>(9, 0));
  RngStream rng(1);
  const Tensor a = random_tensor(rng, 4, 3), w = random_tensor(rng, 3, 2);
  const Tensor v = embed(a, w);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 2; ++c) {
      double acc = 0;
      for (std::size_t i = 0; i < 3; ++i) acc += a.at(r, i) * w.at(i, c);
      CHECK(v.at(r, c) == doctest::Approx(acc).epsilon(1e-14));
    }
}

TEST_CASE("shared_encode") {
  ParameterSet params;
  const Initializer init(4);
  const diff::LstmParams lstm = create_lstm(params, init, "rnn", 3, 3);
  RngStream rng(2);
  const std::size_t B = 2, T = 6;
  const Tensor v = random_tensor(rng, T * B, 3, -1, 1, false);

  const Tensor one = shared_encode(diff::slice_rows(v, 0, B), lstm, B);
  const auto step = diff::lstm_step(diff::slice_rows(v, 0, B), diff::LstmState::zeros(B, 3), lstm);
  CHECK(vals(one) == vals(step.h));

  const Tensor r = shared_encode(v, lstm, B);
  for (std::size_t t = 1; t <= T; ++t) {
    const Tensor prefix = shared_encode(diff::slice_rows(v, 0, t * B), lstm, B);
    for (std::size_t i = 0; i < prefix.size(); ++i) CHECK(prefix.values()[i] == r.values()[i]);
  }

  diff::LstmParams zero{Tensor::zeros({3, 12}), Tensor::zeros({3, 12}), Tensor::zeros({1, 12})};
  CHECK(vals(shared_encode(v, zero, B)) == std::vector<Real>(T * B * 3, 0));
  CHECK_THROWS_AS((void)shared_encode(v, lstm, 5), diff::DimensionError);
}

TEST_CASE("task_embed") {
  TaskStack stack;
  stack.layers.push_back({Tensor::from({2, 2}, {1, 0, 0, 1}), Tensor::zeros({1, 2})});
  const Tensor r = Tensor::from({3, 2}, {0.5, 0, 1, 2, 3, 0.25});
  CHECK(vals(task_embed(r, stack, 0.01)) == vals(r));

  ParameterSet params;
  const TaskStack deep = create_task_stack(params, Initializer(3), "t", 3, 3);
  RngStream rng(8);
  Tensor rr = random_tensor(rng, 4, 3);
  const Tensor h = task_embed(rr, deep, 0.01);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  std::vector<Tensor> rows;
  for (std::size_t i : perm) rows.push_back(diff::slice_rows(rr, i, 1));
  const Tensor hp = task_embed(diff::concat_rows(rows), deep, 0.01);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 3; ++c) CHECK(hp.at(i, c) == h.at(perm[i], c));

  std::vector<Tensor> inputs{rr};
  for (auto& [n, t] : params) inputs.push_back(t);
  const auto report = gradcheck([&] { return diff::sum(diff::square(task_embed(rr, deep, 0.01))); }, inputs);
  CHECK_MESSAGE(report.max_rel_error < 1e-4, report.worst);
}

TEST_CASE("latent: deterministic corner cases") {
  ModelConfig c = small_config();
  c.dropout_rate = 0;
  c.uncertainty_mode = UncertaintyMode::epistemic;
  ParameterSet params;
  const LatentHeads heads = create_latent_heads(params, Initializer(1), "t", c);
  RngStream rng(3);
  const Tensor h = random_tensor(rng, 6, 5, -1, 1, false);
  const LatentDistribution lat = latent(h, heads, c, Phase::train, RngStream(4), 2);
  CHECK(vals(lat.mc_variance) == std::vector<Real>(30, 0));
  CHECK(vals(lat.features) == vals(lat.mean));

  ModelConfig a = small_config();
  a.uncertainty_mode = UncertaintyMode::aleatoric;
  ParameterSet p2;
  LatentHeads zh = create_latent_heads(p2, Initializer(1), "t", a);
  for (auto& [n, t] : p2)
    if (n.find("sigma") != std::string::npos)
      for (Real& v : t.mutable_values()) v = 0;
  const LatentDistribution l2 = latent(h, zh, a, Phase::eval, RngStream(4), 2);
  for (Real s : l2.scale.values()) CHECK(s == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(vals(l2.features) == vals(l2.mean));
  const LatentDistribution l3 = latent(h, zh, a, Phase::train, RngStream(4), 2);
  CHECK(vals(l3.features) != vals(l3.mean));
  for (Real s : l3.scale.values()) CHECK(s > 0);
}

TEST_CASE("latent: MC variance agrees with a large independent sample") {
  ModelConfig c = small_config(1, 2, 16);
  c.dropout_rate = 0.2;
  c.mc_samples = 64;
  c.uncertainty_mode = UncertaintyMode::epistemic;
  ParameterSet params;
  const LatentHeads heads = create_latent_heads(params, Initializer(9), "t", c);
  RngStream rng(10);
  const std::size_t rows = 4, k = 16;
  const Tensor h = random_tensor(rng, rows, k, 0, 2, false);
  const LatentDistribution lat = latent(h, heads, c, Phase::eval, RngStream(11), rows);

  // Independent estimate: 10^4 scalar dropout replays of mu = leaky(h' W + b).
  RngStream oracle_rng(555);
  const std::size_t N = 10000;
  std::vector<double> sum(rows * k, 0), sumsq(rows * k, 0);
  for (std::size_t s = 0; s < N; ++s) {
    for (std::size_t r = 0; r < rows; ++r) {
      std::vector<double> dropped(k);
      for (std::size_t i = 0; i < k; ++i)
        dropped[i] = oracle_rng.uniform() < 0.2 ? 0 : h.at(r, i) / 0.8;
      for (std::size_t o = 0; o < k; ++o) {
        double z = heads.mu.bias.at(0, o);
        for (std::size_t i = 0; i < k; ++i) z += dropped[i] * heads.mu.weight.at(i, o);
        const double mu = z > 0 ? z : 0.01 * z;
        sum[r * k + o] += mu;
        sumsq[r * k + o] += mu * mu;
      }
    }
  }
  double oracle_mean_var = 0, mc_mean_var = 0;
  for (std::size_t i = 0; i < rows * k; ++i) {
    const double m = sum[i] / N;
    oracle_mean_var += (sumsq[i] - N * m * m) / (N - 1);
    mc_mean_var += lat.mc_variance.values()[i];
  }
  CHECK(oracle_mean_var > 0);
  CHECK(std::abs(mc_mean_var - oracle_mean_var) < 0.2 * oracle_mean_var);
  for (Real v : lat.mc_variance.values()) CHECK(v >= 0);
}

TEST_CASE("attend_and_predict") {
  ParameterSet params;
  OutputHead head = create_output_head(params, Initializer(2), "t", 2);
  RngStream rng(3);
  const Tensor C = random_tensor(rng, 4, 2, -1, 1, false), v = random_tensor(rng, 4, 2, -1, 1, false);
  const Tensor w = Tensor::full({4, 1}, 0.5);
  const Tensor p = attend_and_predict(C, v, head, w, 2);
  for (Real x : p.values()) {
    CHECK(x > 0);
    CHECK(x < 1);
  }
  // Hand-unrolled: B = 2, T = 2, k = 2; row t*2 + b.
  for (std::size_t b = 0; b < 2; ++b) {
    double pooled[2] = {0, 0};
    for (std::size_t t = 0; t < 2; ++t) {
      const std::size_t row = t * 2 + b;
      for (std::size_t o = 0; o < 2; ++o) {
        double z = head.attention.bias.at(0, o);
        for (std::size_t i = 0; i < 2; ++i) z += C.at(row, i) * head.attention.weight.at(i, o);
        pooled[o] += std::tanh(z) * v.at(row, o) / 2;
      }
    }
    const double logit = pooled[0] * head.output.weight.at(0, 0) + pooled[1] * head.output.weight.at(1, 0) +
                         head.output.bias.at(0, 0);
    CHECK(p.at(b, 0) == doctest::Approx(1 / (1 + std::exp(-logit))).epsilon(1e-14));
  }
  for (auto& [n, t] : params)
    for (Real& x : t.mutable_values()) x = 0;
  const Tensor half = attend_and_predict(C, v, head, w, 2);
  for (Real x : half.values()) CHECK(x == 0.5);
  const Tensor big = Tensor::full({4, 2}, 1e6);
  const Tensor extreme = attend_and_predict(big, big, create_output_head(params, Initializer(5), "u", 2), w, 2);
  for (Real x : extreme.values()) CHECK(std::isfinite(x));
}

TEST_CASE("loss contract") {
  const auto episodes = random_episodes(3, 2, 4, 2, 1);
  EpisodeBatch batch = make_batch(episodes);
  std::fill(batch.label_mask.begin(), batch.label_mask.end(), 0);
  TpAmtlNetwork net(small_config(), 3);
  RngStream rng(1);
  const ForwardResult r = net.forward(batch, Phase::train, rng);
  const Real l2 = 0.01;
  CHECK(total_loss(r, batch, net.parameters(), l2).item() ==
        doctest::Approx(l2 * net.parameters().squared_norm().item()).epsilon(1e-14));
  CHECK(total_loss(r, batch, net.parameters(), 0).item() == 0);

  EpisodeBatch one;
  one.batch = 1;
  one.num_tasks = 1;
  one.labels = {1};
  one.label_mask = {1};
  CHECK(task_loss(Tensor::from({1, 1}, {0.5}), one, 0).item() == doctest::Approx(std::log(2.0)));
}

TEST_CASE("masked task heads receive exactly zero gradient") {
  ModelConfig c = small_config(3, 4, 5);
  c.transfer_mode = TransferMode::none;
  const auto episodes = random_episodes(4, 3, 4, 3, 2);
  EpisodeBatch batch = make_batch(episodes);
  for (std::size_t b = 0; b < batch.batch; ++b) batch.label_mask[b * 3 + 1] = 0;
  TpAmtlNetwork net(c, 4);
  RngStream rng(5);
  const ForwardResult r = net.forward(batch, Phase::train, rng);
  total_loss(r, batch, net.parameters(), 0).backward();
  for (auto& [name, t] : net.parameters()) {
    if (name.rfind("task1.", 0) != 0) continue;
    for (Real g : t.grad()) CHECK(g == 0);
  }
}

TEST_CASE("task privacy: other tasks' private parameters get gradient only via transfer") {
  for (TransferMode mode : {TransferMode::none, TransferMode::intratask, TransferMode::full}) {
    ModelConfig c = small_config(3, 4, 5);
    c.transfer_mode = mode;
    TpAmtlNetwork net(c, 6);
    randomize(net.parameters(), 7, 0.5);
    const auto episodes = random_episodes(4, 3, 4, 3, 3);
    EpisodeBatch batch = make_batch(episodes);
    for (std::size_t b = 0; b < batch.batch; ++b) {
      batch.label_mask[b * 3 + 0] = 1;
      batch.label_mask[b * 3 + 1] = 0;
      batch.label_mask[b * 3 + 2] = 0;
    }
    RngStream rng(5);
    const ForwardResult r = net.forward(batch, Phase::train, rng);
    total_loss(r, batch, net.parameters(), 0).backward();
    double other = 0;
    for (auto& [name, t] : net.parameters())
      if (name.rfind("task1.", 0) == 0 || name.rfind("task2.", 0) == 0)
        for (Real g : t.grad()) other += std::abs(g);
    if (mode == TransferMode::full) {
      CHECK(other > 0);
    } else {
      CHECK(other == 0);
    }
  }
}

TEST_CASE("end-to-end loss gradient (D=2, T=3, m=4, k=5)") {
  for (std::uint64_t draw = 0; draw < 3; ++draw) {
    TpAmtlNetwork net(small_config(), 100 + draw);
    randomize(net.parameters(), draw, 0.5);
    const auto episodes = random_episodes(3, 3, 4, 2, draw, true);
    const EpisodeBatch batch = make_batch(episodes);
    std::vector<Tensor> inputs;
    for (auto& [n, t] : net.parameters()) inputs.push_back(t);
    const RngStream frozen(draw, 9);
    auto loss = [&] {
      RngStream r = frozen;
      return total_loss(net.forward(batch, Phase::train, r), batch, net.parameters(), 0.01);
    };
    const auto report = gradcheck(loss, inputs);
    CHECK_MESSAGE(report.max_rel_error < 1e-4, report.worst);
  }
}

TEST_CASE("causality: future inputs do not change earlier combined features") {
  for (TransferMode mode : {TransferMode::full, TransferMode::intratask, TransferMode::samestep,
                            TransferMode::unconstrained}) {
    ModelConfig c = small_config(3, 4, 5);
    c.transfer_mode = mode;
    TpAmtlNetwork net(c, 8);
    randomize(net.parameters(), 3, 0.5);
    const std::size_t T = 5, B = 2;
    const auto episodes = random_episodes(B, T, 4, 3, 4);
    RngStream r0(42);
    const ForwardResult base = net.forward(make_batch(episodes), Phase::eval, r0);
    for (std::size_t t = 1; t < T; ++t) {
      auto altered = episodes;
      for (auto& e : altered)
        for (std::size_t i = t * 4; i < T * 4; ++i) e.features[i] += 3;
      RngStream r1(42);
      const ForwardResult alt = net.forward(make_batch(altered), Phase::eval, r1);
      bool prefix_same = true;
      for (std::size_t d = 0; d < 3; ++d)
        for (std::size_t i = 0; i < t * B * 5; ++i)
          prefix_same = prefix_same && alt.combined[d].values()[i] == base.combined[d].values()[i];
      if (mode == TransferMode::unconstrained) {
        CHECK_FALSE(prefix_same);
      } else {
        CHECK(prefix_same);
      }
    }
  }
}

TEST_CASE("online inference matches batch prediction on every prefix") {
  ModelConfig c = small_config(3, 4, 5);
  TpAmtlNetwork net(c, 9);
  randomize(net.parameters(), 4, 0.5);
  const std::size_t T = 6, B = 2;
  const auto episodes = random_episodes(B, T, 4, 3, 5);
  const EpisodeBatch batch = make_batch(episodes);
  auto online = net.online(B, RngStream(77));
  for (std::size_t t = 1; t <= T; ++t) {
    const auto step = online.step(diff::slice_rows(batch.inputs, (t - 1) * B, B));
    auto prefix = episodes;
    for (auto& e : prefix) e.length = t, e.features.resize(t * 4);
    RngStream rng(77);
    const auto p = predict_proba(net, make_batch(prefix), rng);
    for (std::size_t d = 0; d < 3; ++d)
      for (std::size_t b = 0; b < B; ++b) CHECK(step[d].at(b, 0) == doctest::Approx(p[d][b]).epsilon(1e-12));
  }
}

TEST_CASE("replay determinism and padding") {
  const auto episodes = random_episodes(5, 4, 4, 2, 6, true);
  const EpisodeBatch batch = make_batch(episodes);
  TpAmtlNetwork a(small_config(), 10), b(small_config(), 10);
  RngStream ra(3), rb(3);
  const ForwardResult fa = a.forward(batch, Phase::train, ra);
  const ForwardResult fb = b.forward(batch, Phase::train, rb);
  for (std::size_t d = 0; d < 2; ++d) CHECK(vals(fa.probabilities[d]) == vals(fb.probabilities[d]));
  const ForwardResult fc = a.forward(batch, Phase::train, ra);
  CHECK(vals(fa.probabilities[0]) != vals(fc.probabilities[0]));

  // An instance's prediction does not depend on how far its batch is padded.
  const std::vector<std::size_t> idx{0, 1, 2, 3, 4};
  const EpisodeBatch padded = make_batch(episodes, idx, 7);
  RngStream e1(1), e2(1);
  const auto p1 = predict_proba(a, batch, e1), p2 = predict_proba(a, padded, e2);
  for (std::size_t d = 0; d < 2; ++d)
    for (std::size_t i = 0; i < 5; ++i) CHECK(p1[d][i] == doctest::Approx(p2[d][i]).epsilon(1e-13));
}

TEST_CASE("config validation and json") {
  ModelConfig c = small_config();
  c.mc_samples = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.mc_samples = 2;
  c.dropout_rate = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.dropout_rate = 0.1;
  c.uncertainty_mode = UncertaintyMode::none;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.gate_input = GateInput::features_only;
  CHECK_NOTHROW(c.validate());

  const nlohmann::json j = c;
  CHECK(j.get<ModelConfig>() == c);
  nlohmann::json bad = j;
  bad["surprise"] = 1;
  CHECK_THROWS_AS((void)bad.get<ModelConfig>(), ConfigError);
  CHECK_THROWS_AS(parse_transfer_mode("sideways"), ConfigError);
}

TEST_CASE("checkpoint round trip") {
  TpAmtlNetwork net(small_config(), 11);
  randomize(net.parameters(), 12);
  const auto path = std::filesystem::temp_directory_path() / "tpamtl_test_ckpt.json";
  save_checkpoint(path, make_checkpoint(net, {{"family", "tp_amtl"}}));
  const Checkpoint loaded = load_checkpoint(path);
  CHECK(loaded.config == net.config());
  TpAmtlNetwork fresh(loaded.config, 1);
  apply_checkpoint(loaded, fresh);
  auto it = fresh.parameters().begin();
  for (const auto& [name, t] : net.parameters()) {
    CHECK(it->first == name);
    CHECK(vals(it->second) == vals(t));
    ++it;
  }
  ModelConfig other = small_config();
  other.hidden_size = 6;
  TpAmtlNetwork wrong(other, 1);
  CHECK_THROWS_AS(apply_checkpoint(loaded, wrong), ConfigError);
  std::filesystem::remove(path);
}
