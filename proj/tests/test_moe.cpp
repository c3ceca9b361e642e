#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "anytraj/moe.hpp"
#include "grad_check.hpp"

using namespace anytraj;
using namespace anytraj::nn;
using namespace anytraj::moe;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Dense evaluation of the MoE layer output: every expert computes every
// token, combined with the (masked-softmax) gate probabilities.
Tensor dense_oracle(const Tensor& tokens, const MoELayer& layer,
                    const Tensor& logits) {
  Tensor probs = gate_probs(top_k_mask(logits, layer.k));
  Tensor out = Tensor::zeros({tokens.rows(), tokens.cols()});
  for (int64_t e = 0; e < layer.num_experts(); ++e) {
    Tensor fe = layer.experts[static_cast<size_t>(e)].forward(tokens);
    Tensor pe = slice_cols(probs, e, 1);
    out = add(out, scale_rows(fe, reshape(pe, {tokens.rows()})));
  }
  return out;
}

// Eqs. 5-7 accumulated token by token, no tensor ops.
double brute_force_lb(const Tensor& logits) {
  int64_t s = logits.rows(), n = logits.cols();
  std::vector<double> q(static_cast<size_t>(n), 0.0),
      p(static_cast<size_t>(n), 0.0);
  for (int64_t t = 0; t < s; ++t) {
    int64_t best = 0;
    for (int64_t j = 1; j < n; ++j)
      if (logits.at(t, j) > logits.at(t, best)) best = j;
    q[static_cast<size_t>(best)] += 1.0 / static_cast<double>(s);
    double m = logits.at(t, 0);
    for (int64_t j = 1; j < n; ++j) m = std::max(m, logits.at(t, j));
    double z = 0.0;
    for (int64_t j = 0; j < n; ++j) z += std::exp(logits.at(t, j) - m);
    for (int64_t j = 0; j < n; ++j)
      p[static_cast<size_t>(j)] +=
          std::exp(logits.at(t, j) - m) / z / static_cast<double>(s);
  }
  double loss = 0.0;
  for (int64_t j = 0; j < n; ++j)
    loss += q[static_cast<size_t>(j)] * p[static_cast<size_t>(j)];
  return static_cast<double>(n) * loss;
}

}  // namespace

TEST_CASE("gate_logits: zero parameters give zero logits, noise off is "
          "deterministic") {
  Rng rng(1);
  GatingNetwork gate = GatingNetwork::init(4, 3, rng);
  gate.theta.data().assign(gate.theta.data().size(), 0.0);
  Tensor tokens = Tensor::uniform({5, 4}, -1, 1, rng);
  Rng r1(2);
  Tensor logits = gate_logits(tokens, gate, r1, true);
  for (int64_t i = 0; i < logits.size(); ++i) CHECK(logits.at(i) == 0.0);

  GatingNetwork g2 = GatingNetwork::init(4, 3, rng);
  Rng ra(3), rb(4);
  Tensor la = gate_logits(tokens, g2, ra, true);
  Tensor lb = gate_logits(tokens, g2, rb, true);
  for (int64_t i = 0; i < la.size(); ++i) CHECK(la.at(i) == lb.at(i));
}

TEST_CASE("gate noise: reproducible under a fixed seed, zero-mean") {
  Rng rng(5);
  GatingNetwork gate = GatingNetwork::init(2, 1, rng);
  gate.noise_enabled = true;
  gate.noise_scale = 1.0;
  Tensor tokens = Tensor::uniform({100000, 2}, -1, 1, rng);
  Rng ra(7), rb(7);
  Tensor noisy = gate_logits(tokens, gate, ra, true);
  Tensor again = gate_logits(tokens, gate, rb, true);
  for (int64_t i = 0; i < 100; ++i) CHECK(noisy.at(i) == again.at(i));

  gate.noise_enabled = false;
  Rng rc(8);
  Tensor clean = gate_logits(tokens, gate, rc, true);
  double mean = 0.0;
  int64_t n = noisy.size();
  for (int64_t i = 0; i < n; ++i) mean += noisy.at(i) - clean.at(i);
  mean /= static_cast<double>(n);
  CHECK(std::abs(mean) < 3.0 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("top_k_mask: max selection, tie-break, k=N, bad k") {
  Tensor l1 = Tensor::from({1, 4}, {2, 1, 3, 0});
  Tensor m1 = top_k_mask(l1, 1);
  CHECK(m1.at(0) == -kInf);
  CHECK(m1.at(1) == -kInf);
  CHECK(m1.at(2) == 3.0);
  CHECK(m1.at(3) == -kInf);

  Tensor l2 = Tensor::from({1, 3}, {5, 5, 1});
  Tensor m2 = top_k_mask(l2, 1);
  CHECK(m2.at(0) == 5.0);
  CHECK(m2.at(1) == -kInf);

  Tensor m3 = top_k_mask(l1, 4);
  for (int64_t i = 0; i < 4; ++i) CHECK(m3.at(i) == l1.at(i));

  CHECK_THROWS(top_k_mask(l1, 0));
  CHECK_THROWS(top_k_mask(l1, 5));
}

TEST_CASE("gate_probs: one-hot at k=1, symmetric and asymmetric k=2") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor logits = Tensor::uniform({6, 4}, -3, 3, rng);
    Tensor probs = gate_probs(top_k_mask(logits, 1));
    for (int64_t t = 0; t < 6; ++t) {
      int ones = 0;
      for (int64_t j = 0; j < 4; ++j) {
        double p = probs.at(t, j);
        CHECK((p == 0.0 || p == 1.0));
        ones += p == 1.0;
      }
      CHECK(ones == 1);
    }
  }

  Tensor sym = gate_probs(Tensor::from({1, 3}, {1.0, 1.0, -kInf}));
  CHECK(sym.at(0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(sym.at(1) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(sym.at(2) == 0.0);

  Tensor asym = gate_probs(Tensor::from({1, 3}, {2.0, 1.0, -kInf}));
  double z = std::exp(2.0) + std::exp(1.0);
  CHECK(asym.at(0) == doctest::Approx(std::exp(2.0) / z).epsilon(1e-9));
  CHECK(asym.at(1) == doctest::Approx(std::exp(1.0) / z).epsilon(1e-9));
}

TEST_CASE("moe_forward: N=1 degenerates to the single expert") {
  Rng rng(12);
  MoELayer layer = MoELayer::init(6, 12, 1, 1, rng);
  Tensor tokens = Tensor::uniform({7, 6}, -1, 1, rng);
  Rng fr(0);
  auto res = moe_forward(tokens, layer, fr, false);
  Tensor direct = layer.experts[0].forward(tokens);
  for (int64_t i = 0; i < direct.size(); ++i)
    CHECK(std::abs(res.output.at(i) - direct.at(i)) < 1e-12);
  CHECK(res.stats.q[0] == 1.0);
}

TEST_CASE("moe_forward: sparse dispatch equals the dense oracle") {
  Rng rng(13);
  for (int n : {2, 4, 8}) {
    for (int k : {1, 2}) {
      for (int trial = 0; trial < 40; ++trial) {
        MoELayer layer = MoELayer::init(5, 9, n, k, rng);
        Tensor tokens = Tensor::uniform({6, 5}, -2, 2, rng);
        Rng fr(0);
        auto res = moe_forward(tokens, layer, fr, false);
        Rng fr2(0);
        Tensor logits = gate_logits(tokens, layer.gate, fr2, false);
        Tensor oracle = dense_oracle(tokens, layer, logits);
        for (int64_t i = 0; i < oracle.size(); ++i)
          CHECK(std::abs(res.output.at(i) - oracle.at(i)) < 1e-9);
      }
    }
  }
}

TEST_CASE("moe_forward: identical experts make routing irrelevant") {
  Rng rng(14);
  MoELayer layer = MoELayer::init(4, 8, 3, 1, rng);
  for (size_t e = 1; e < layer.experts.size(); ++e) {
    layer.experts[e].w1.data() = layer.experts[0].w1.data();
    layer.experts[e].b1.data() = layer.experts[0].b1.data();
    layer.experts[e].w2.data() = layer.experts[0].w2.data();
    layer.experts[e].b2.data() = layer.experts[0].b2.data();
  }
  Tensor tokens = Tensor::uniform({5, 4}, -1, 1, rng);
  Rng fr(0);
  auto res = moe_forward(tokens, layer, fr, false);
  Tensor direct = layer.experts[0].forward(tokens);
  for (int64_t i = 0; i < direct.size(); ++i)
    CHECK(std::abs(res.output.at(i) - direct.at(i)) < 1e-9);
}

TEST_CASE("moe_forward: permutation equivariance") {
  Rng rng(15);
  MoELayer layer = MoELayer::init(4, 8, 4, 1, rng);
  Tensor tokens = Tensor::uniform({6, 4}, -1, 1, rng);
  std::vector<int64_t> perm = {3, 1, 5, 0, 4, 2};
  Rng fr(0);
  auto base = moe_forward(tokens, layer, fr, false);
  Rng fr2(0);
  auto permuted =
      moe_forward(gather_rows(tokens, perm), layer, fr2, false);
  for (size_t i = 0; i < perm.size(); ++i)
    for (int64_t j = 0; j < 4; ++j)
      CHECK(std::abs(permuted.output.at(static_cast<int64_t>(i), j) -
                     base.output.at(perm[i], j)) < 1e-12);
}

TEST_CASE("load_balance_loss closed forms") {
  // uniform routing: exactly 1
  RoutingStats uniform;
  uniform.q = {0.25, 0.25, 0.25, 0.25};
  uniform.p = Tensor::from({1, 4}, {0.25, 0.25, 0.25, 0.25});
  uniform.token_count = 8;
  CHECK(load_balance_loss(uniform).item() == 1.0);

  // collapse: approaches N
  RoutingStats collapse;
  collapse.q = {1.0, 0.0};
  collapse.p = Tensor::from({1, 2}, {0.999, 0.001});
  collapse.token_count = 4;
  CHECK(load_balance_loss(collapse).item() == doctest::Approx(2.0 * 0.999));

  // hand example: 3 tokens over N=2 routed [0,0,1]
  RoutingStats hand;
  hand.q = {2.0 / 3.0, 1.0 / 3.0};
  double p0 = (0.9 + 0.8 + 0.3) / 3.0, p1 = (0.1 + 0.2 + 0.7) / 3.0;
  hand.p = Tensor::from({1, 2}, {p0, p1});
  hand.token_count = 3;
  CHECK(load_balance_loss(hand).item() ==
        doctest::Approx(10.0 / 9.0).epsilon(1e-12));

  RoutingStats empty;
  empty.q = {0.0, 0.0};
  empty.p = Tensor::from({1, 2}, {0.0, 0.0});
  empty.token_count = 0;
  CHECK_THROWS(load_balance_loss(empty));
}

TEST_CASE("load_balance_loss matches per-token brute force on random "
          "batches") {
  Rng rng(16);
  for (int trial = 0; trial < 100; ++trial) {
    int n = 2 + static_cast<int>(rng.below(7));
    MoELayer layer = MoELayer::init(4, 6, n, 1, rng);
    Tensor tokens = Tensor::uniform({9, 4}, -2, 2, rng);
    Rng fr(0);
    auto res = moe_forward(tokens, layer, fr, false);
    double expected = brute_force_lb(res.logits);
    CHECK(std::abs(load_balance_loss(res.stats).item() - expected) < 1e-12);
  }
}

TEST_CASE("router_z_loss closed forms and shift identity") {
  Tensor zeros4 = Tensor::zeros({3, 4});
  double ln4 = std::log(4.0);
  CHECK(std::abs(router_z_loss(zeros4).item() - ln4 * ln4) < 1e-9);

  // constructed per-token logsumexp of zero
  Tensor z0 = Tensor::from({1, 2}, {-std::log(2.0), -std::log(2.0)});
  CHECK(std::abs(router_z_loss(z0).item()) < 1e-12);

  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor g = Tensor::uniform({5, 3}, -4, 4, rng);
    // direct unshifted evaluation
    double direct = 0.0;
    for (int64_t t = 0; t < 5; ++t) {
      double z = 0.0;
      for (int64_t j = 0; j < 3; ++j) z += std::exp(g.at(t, j));
      direct += std::log(z) * std::log(z);
    }
    direct /= 5.0;
    CHECK(std::abs(router_z_loss(g).item() - direct) < 1e-9);

    // shift identity: lse(g + c) = lse(g) + c
    double c = rng.uniform(0.5, 2.0);
    std::vector<double> shifted = g.data();
    for (auto& v : shifted) v += c;
    double expect = 0.0;
    for (int64_t t = 0; t < 5; ++t) {
      double z = 0.0;
      for (int64_t j = 0; j < 3; ++j) z += std::exp(g.at(t, j));
      double l = std::log(z) + c;
      expect += l * l;
    }
    expect /= 5.0;
    CHECK(std::abs(router_z_loss(Tensor::from({5, 3}, shifted)).item() -
                   expect) < 1e-9);
  }

  // monotone under scaling when all per-token logsumexp values are positive
  Tensor pos = Tensor::from({2, 2}, {1.0, 2.0, 0.5, 1.5});
  double base = router_z_loss(pos).item();
  std::vector<double> scaled = pos.data();
  for (auto& v : scaled) v *= 1.7;
  CHECK(router_z_loss(Tensor::from({2, 2}, scaled)).item() > base);
}

TEST_CASE("FLOPs accounting: constant expert compute, linear gating") {
  Rng rng(18);
  std::vector<int64_t> expert_counts;
  std::vector<int64_t> gating_counts;
  for (int n : {1, 2, 4, 8}) {
    MoELayer layer = MoELayer::init(16, 64, n, 1, rng);
    auto f = flops_per_token(layer);
    expert_counts.push_back(f.expert_flops);
    gating_counts.push_back(f.gating_flops);
  }
  for (size_t i = 1; i < expert_counts.size(); ++i)
    CHECK(expert_counts[i] == expert_counts[0]);
  CHECK(gating_counts[1] == 2 * gating_counts[0]);
  CHECK(gating_counts[3] == 8 * gating_counts[0]);

  MoELayer paper = MoELayer::init(384, 1536, 4, 1, rng);
  CHECK(flops_per_token(paper).expert_flops ==
        2LL * (384 * 1536 + 1536 * 384));
}

TEST_CASE("gradients flow through routing into gate and experts") {
  Rng rng(19);
  for (int trial = 0; trial < 10; ++trial) {
    MoELayer layer = MoELayer::init(3, 5, 3, 1, rng);
    Tensor tokens = Tensor::uniform({4, 3}, -1, 1, rng, false);
    auto loss_fn = [&] {
      Rng fr(0);
      auto res = moe_forward(tokens, layer, fr, false);
      Tensor task = mse(res.output, Tensor::zeros({4, 3}));
      Tensor lb = load_balance_loss(res.stats);
      Tensor z = router_z_loss(res.logits);
      return add(add(task, scale(lb, 0.01)), scale(z, 1e-3));
    };
    std::vector<Tensor> params = {layer.gate.theta, layer.gate.bias,
                                  layer.experts[0].w1, layer.experts[0].b1,
                                  layer.experts[1].w2, layer.experts[2].b2};
    CHECK(testutil::max_grad_error(loss_fn, params) < 1e-3);
  }
}

TEST_CASE("routing statistics invariants and JSON export") {
  Rng rng(20);
  MoELayer layer = MoELayer::init(4, 8, 4, 1, rng);
  Tensor tokens = Tensor::uniform({10, 4}, -1, 1, rng);
  Rng fr(0);
  auto res = moe_forward(tokens, layer, fr, false);
  double qs = 0.0, ps = 0.0;
  for (double q : res.stats.q) {
    CHECK(q >= 0.0);
    CHECK(q <= 1.0);
    qs += q;
  }
  for (double p : res.stats.p_values()) {
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
    ps += p;
  }
  CHECK(std::abs(qs - 1.0) < 1e-12);
  CHECK(std::abs(ps - 1.0) < 1e-9);
  CHECK(res.stats.token_count == 10);

  auto rec = routing_record(3, 1, res.stats, 1.1, 0.2);
  CHECK(rec.at("step") == 3);
  CHECK(rec.at("layer_id") == 1);
  CHECK(rec.at("q").size() == 4);
  CHECK(rec.at("p").size() == 4);
  CHECK(rec.at("lb_loss") == 1.1);
  CHECK(rec.at("z_loss") == 0.2);
}
