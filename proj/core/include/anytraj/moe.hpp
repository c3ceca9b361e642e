#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "anytraj/optim.hpp"
#include "anytraj/tensor.hpp"

namespace anytraj::moe {

// Linear gating network g(x; theta): token [d] -> per-expert logits [N].
struct GatingNetwork {
  nn::Tensor theta;  // [d, N]
  nn::Tensor bias;   // [N], initialized to zero
  bool noise_enabled = false;
  double noise_scale = 1.0;

  int64_t input_dim() const { return theta.rows(); }
  int64_t num_experts() const { return theta.cols(); }

  // theta ~ U(-1/sqrt(d), 1/sqrt(d)) so initial routing is near-uniform.
  static GatingNetwork init(int64_t d, int64_t n, Rng& rng);
};

// One expert FFN: linear - GELU - linear.
struct Expert {
  nn::Tensor w1, b1;  // [d, ff], [ff]
  nn::Tensor w2, b2;  // [ff, d], [d]

  static Expert init(int64_t d, int64_t ff, Rng& rng);
  nn::Tensor forward(const nn::Tensor& x) const;
};

struct MoELayer {
  std::vector<Expert> experts;
  GatingNetwork gate;
  int64_t k = 1;

  int64_t num_experts() const { return static_cast<int64_t>(experts.size()); }
  int64_t model_dim() const { return experts[0].w1.rows(); }
  int64_t ff_dim() const { return experts[0].w1.cols(); }

  static MoELayer init(int64_t d, int64_t ff, int64_t n, int64_t k, Rng& rng);
  void collect_params(const std::string& prefix, nn::NamedParams& out) const;
};

// Per-batch routing statistics. q_i is the fraction of tokens whose routing
// argmax is expert i (hard count, constant w.r.t. gradients); p is the mean
// soft gate probability per expert and stays differentiable.
struct RoutingStats {
  std::vector<double> q;
  nn::Tensor p;  // [1, N]
  int64_t token_count = 0;

  std::vector<double> p_values() const { return p.data(); }
};

// tokens [S,d] -> logits [S,N]; adds Gaussian noise (std = noise_scale) when
// training with noise enabled.
nn::Tensor gate_logits(const nn::Tensor& tokens, const GatingNetwork& gate,
                       Rng& rng, bool training);

// Per-row keep mask for the k largest logits; ties broken toward the lowest
// expert index.
std::vector<uint8_t> top_k_keep(const nn::Tensor& logits, int64_t k);
nn::Tensor top_k_mask(const nn::Tensor& logits, int64_t k);

// softmax over Top-K-masked logits; with k=1 each row is exactly one-hot.
nn::Tensor gate_probs(const nn::Tensor& masked_logits);

struct MoEForwardResult {
  nn::Tensor output;      // [S, d]
  nn::Tensor logits;      // routing logits (post-noise when noise is on)
  nn::Tensor soft_probs;  // softmax over unmasked logits, feeds P_i
  RoutingStats stats;
};

// Sparse dispatch: each token is evaluated by exactly its k routed experts
// via gather/scatter, then combined with its gate probabilities.
MoEForwardResult moe_forward(const nn::Tensor& tokens, const MoELayer& layer,
                             Rng& rng, bool training);

// N * sum_i Q_i P_i. Q is a constant; gradient flows through P only.
nn::Tensor load_balance_loss(const RoutingStats& stats);

// (1/S) * sum_k (logsumexp of row k)^2 over pre-mask logits.
nn::Tensor router_z_loss(const nn::Tensor& logits);

struct FlopsPerToken {
  int64_t expert_flops;  // k FFN evaluations, constant in N for fixed k
  int64_t gating_flops;  // model_dim * N, linear in N
};
// Multiply-add pairs are counted as two flops; bias additions are excluded
// from both counts.
FlopsPerToken flops_per_token(const MoELayer& layer);

nlohmann::json routing_record(int64_t step, int64_t layer_id,
                              const RoutingStats& stats, double lb_loss,
                              double z_loss);

}  // namespace anytraj::moe
