#include "anytraj/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace anytraj::moe {

using nn::Tensor;

GatingNetwork GatingNetwork::init(int64_t d, int64_t n, Rng& rng) {
  GatingNetwork g;
  double bound = 1.0 / std::sqrt(static_cast<double>(d));
  g.theta = Tensor::uniform({d, n}, -bound, bound, rng, true);
  g.bias = Tensor::zeros({n}, true);
  return g;
}

Expert Expert::init(int64_t d, int64_t ff, Rng& rng) {
  Expert e;
  double b1 = 1.0 / std::sqrt(static_cast<double>(d));
  double b2 = 1.0 / std::sqrt(static_cast<double>(ff));
  e.w1 = Tensor::uniform({d, ff}, -b1, b1, rng, true);
  e.b1 = Tensor::zeros({ff}, true);
  e.w2 = Tensor::uniform({ff, d}, -b2, b2, rng, true);
  e.b2 = Tensor::zeros({d}, true);
  return e;
}

Tensor Expert::forward(const Tensor& x) const {
  return add_rowwise(matmul(gelu(add_rowwise(matmul(x, w1), b1)), w2), b2);
}

MoELayer MoELayer::init(int64_t d, int64_t ff, int64_t n, int64_t k, Rng& rng) {
  if (n < 1) throw std::invalid_argument("MoELayer: need at least one expert");
  if (k < 1 || k > n) throw std::invalid_argument("MoELayer: k out of range");
  MoELayer layer;
  layer.k = k;
  layer.gate = GatingNetwork::init(d, n, rng);
  for (int64_t i = 0; i < n; ++i) layer.experts.push_back(Expert::init(d, ff, rng));
  return layer;
}

void MoELayer::collect_params(const std::string& prefix,
                              nn::NamedParams& out) const {
  out.emplace_back(prefix + ".gate.theta", gate.theta);
  out.emplace_back(prefix + ".gate.bias", gate.bias);
  for (size_t i = 0; i < experts.size(); ++i) {
    std::string p = prefix + ".expert" + std::to_string(i);
    out.emplace_back(p + ".w1", experts[i].w1);
    out.emplace_back(p + ".b1", experts[i].b1);
    out.emplace_back(p + ".w2", experts[i].w2);
    out.emplace_back(p + ".b2", experts[i].b2);
  }
}

Tensor gate_logits(const Tensor& tokens, const GatingNetwork& gate, Rng& rng,
                   bool training) {
  Tensor logits = add_rowwise(matmul(tokens, gate.theta), gate.bias);
  if (training && gate.noise_enabled) {
    std::vector<double> noise(static_cast<size_t>(logits.size()));
    for (auto& v : noise) v = gate.noise_scale * rng.gaussian();
    logits = add(logits, Tensor::from(logits.shape(), std::move(noise)));
  }
  return logits;
}

std::vector<uint8_t> top_k_keep(const Tensor& logits, int64_t k) {
  int64_t s = logits.rows(), n = logits.cols();
  if (k < 1 || k > n) throw std::invalid_argument("top_k: k out of range");
  std::vector<uint8_t> keep(static_cast<size_t>(s * n), 0);
  std::vector<int64_t> idx(static_cast<size_t>(n));
  for (int64_t r = 0; r < s; ++r) {
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
      return logits.at(r, a) > logits.at(r, b);
    });
    for (int64_t j = 0; j < k; ++j) keep[r * n + idx[j]] = 1;
  }
  return keep;
}

Tensor top_k_mask(const Tensor& logits, int64_t k) {
  return masked_keep(logits, top_k_keep(logits, k));
}

Tensor gate_probs(const Tensor& masked_logits) { return softmax(masked_logits); }

MoEForwardResult moe_forward(const Tensor& tokens, const MoELayer& layer,
                             Rng& rng, bool training) {
  int64_t s = tokens.rows();
  int64_t n = layer.num_experts();

  MoEForwardResult res;
  res.logits = gate_logits(tokens, layer.gate, rng, training);
  auto keep = top_k_keep(res.logits, layer.k);
  Tensor probs = gate_probs(masked_keep(res.logits, keep));
  res.soft_probs = softmax(res.logits);

  // Q_i: hard argmax counts over the same logits that drive routing.
  res.stats.q.assign(static_cast<size_t>(n), 0.0);
  for (int64_t r = 0; r < s; ++r) {
    int64_t best = 0;
    for (int64_t i = 1; i < n; ++i)
      if (res.logits.at(r, i) > res.logits.at(r, best)) best = i;
    res.stats.q[best] += 1.0;
  }
  for (auto& v : res.stats.q) v /= static_cast<double>(s);
  res.stats.token_count = s;
  // P_i: column means of the soft probabilities, differentiable.
  Tensor ones = Tensor::full({1, s}, 1.0 / static_cast<double>(s));
  res.stats.p = matmul(ones, res.soft_probs);

  Tensor out = Tensor::zeros({s, tokens.cols()});
  for (int64_t i = 0; i < n; ++i) {
    std::vector<int64_t> routed;
    for (int64_t r = 0; r < s; ++r)
      if (keep[r * n + i]) routed.push_back(r);
    if (routed.empty()) continue;
    Tensor x_i = gather_rows(tokens, routed);
    Tensor h_i = layer.experts[i].forward(x_i);
    Tensor w_i = gather_rows(slice_cols(probs, i, 1), routed);
    out = scatter_add_rows(out, routed, scale_rows(h_i, w_i));
  }
  res.output = out;
  return res;
}

Tensor load_balance_loss(const RoutingStats& stats) {
  if (stats.token_count <= 0)
    throw std::invalid_argument("load_balance_loss: empty batch");
  int64_t n = static_cast<int64_t>(stats.q.size());
  Tensor q_const = Tensor::from({1, n}, stats.q);
  return scale(sum(mul(stats.p, q_const)), static_cast<double>(n));
}

Tensor router_z_loss(const Tensor& logits) {
  if (logits.rows() < 1)
    throw std::invalid_argument("router_z_loss: empty input");
  Tensor lse = logsumexp_rows(logits);
  return mean(mul(lse, lse));
}

FlopsPerToken flops_per_token(const MoELayer& layer) {
  int64_t d = layer.model_dim();
  int64_t ff = layer.ff_dim();
  FlopsPerToken f;
  f.expert_flops = layer.k * 2 * (d * ff + ff * d);
  f.gating_flops = d * layer.num_experts();
  return f;
}

nlohmann::json routing_record(int64_t step, int64_t layer_id,
                              const RoutingStats& stats, double lb_loss,
                              double z_loss) {
  return nlohmann::json{{"step", step},       {"layer_id", layer_id},
                        {"q", stats.q},       {"p", stats.p_values()},
                        {"lb_loss", lb_loss}, {"z_loss", z_loss}};
}

}  // namespace anytraj::moe
