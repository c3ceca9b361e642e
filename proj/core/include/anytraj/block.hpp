#pragma once

#include <optional>
#include <string>

#include "anytraj/moe.hpp"
#include "anytraj/optim.hpp"
#include "anytraj/tensor.hpp"

namespace anytraj {

// Multi-head self-attention over a [S, d] token matrix.
struct AttentionBlock {
  nn::Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  int heads = 1;

  static AttentionBlock init(int64_t d, int heads, Rng& rng);
  nn::Tensor forward(const nn::Tensor& x) const;
  void collect_params(const std::string& prefix, nn::NamedParams& out) const;
};

// Pre-norm residual transformer layer. The FFN sub-block is either a single
// dense expert or a sparsely-gated MoE layer; attention wiring is identical
// in both cases.
struct TransformerLayer {
  nn::Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  AttentionBlock attn;
  bool is_moe = false;
  moe::Expert ffn;        // when !is_moe
  moe::MoELayer moe_ffn;  // when is_moe

  static TransformerLayer init_dense(int64_t d, int64_t ff, int heads,
                                     Rng& rng);
  static TransformerLayer init_moe(int64_t d, int64_t ff, int heads, int64_t n,
                                   int64_t k, Rng& rng);

  struct Out {
    nn::Tensor x;
    std::optional<moe::MoEForwardResult> moe;
  };
  Out forward(const nn::Tensor& x, double dropout_rate, Rng& rng,
              bool training) const;
  void collect_params(const std::string& prefix, nn::NamedParams& out) const;
};

}  // namespace anytraj
