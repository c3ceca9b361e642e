#include "anytraj/block.hpp"

#include <cmath>
#include <stdexcept>

namespace anytraj {

using nn::Tensor;

AttentionBlock AttentionBlock::init(int64_t d, int heads, Rng& rng) {
  if (heads < 1 || d % heads != 0)
    throw std::invalid_argument("attention: model_dim must divide by heads");
  AttentionBlock a;
  a.heads = heads;
  double bound = 1.0 / std::sqrt(static_cast<double>(d));
  a.wq = Tensor::uniform({d, d}, -bound, bound, rng, true);
  a.wk = Tensor::uniform({d, d}, -bound, bound, rng, true);
  a.wv = Tensor::uniform({d, d}, -bound, bound, rng, true);
  a.wo = Tensor::uniform({d, d}, -bound, bound, rng, true);
  a.bq = Tensor::zeros({d}, true);
  a.bk = Tensor::zeros({d}, true);
  a.bv = Tensor::zeros({d}, true);
  a.bo = Tensor::zeros({d}, true);
  return a;
}

Tensor AttentionBlock::forward(const Tensor& x) const {
  int64_t d = x.cols();
  int64_t dh = d / heads;
  Tensor q = add_rowwise(matmul(x, wq), bq);
  Tensor k = add_rowwise(matmul(x, wk), bk);
  Tensor v = add_rowwise(matmul(x, wv), bv);
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> head_outs;
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    head_outs.push_back(matmul(softmax(scores), vh));
  }
  return add_rowwise(matmul(concat(head_outs, 1), wo), bo);
}

void AttentionBlock::collect_params(const std::string& prefix,
                                    nn::NamedParams& out) const {
  out.emplace_back(prefix + ".wq", wq);
  out.emplace_back(prefix + ".bq", bq);
  out.emplace_back(prefix + ".wk", wk);
  out.emplace_back(prefix + ".bk", bk);
  out.emplace_back(prefix + ".wv", wv);
  out.emplace_back(prefix + ".bv", bv);
  out.emplace_back(prefix + ".wo", wo);
  out.emplace_back(prefix + ".bo", bo);
}

TransformerLayer TransformerLayer::init_dense(int64_t d, int64_t ff, int heads,
                                              Rng& rng) {
  TransformerLayer l;
  l.ln1_g = Tensor::full({d}, 1.0, true);
  l.ln1_b = Tensor::zeros({d}, true);
  l.ln2_g = Tensor::full({d}, 1.0, true);
  l.ln2_b = Tensor::zeros({d}, true);
  l.attn = AttentionBlock::init(d, heads, rng);
  l.is_moe = false;
  l.ffn = moe::Expert::init(d, ff, rng);
  return l;
}

TransformerLayer TransformerLayer::init_moe(int64_t d, int64_t ff, int heads,
                                            int64_t n, int64_t k, Rng& rng) {
  TransformerLayer l;
  l.ln1_g = Tensor::full({d}, 1.0, true);
  l.ln1_b = Tensor::zeros({d}, true);
  l.ln2_g = Tensor::full({d}, 1.0, true);
  l.ln2_b = Tensor::zeros({d}, true);
  l.attn = AttentionBlock::init(d, heads, rng);
  l.is_moe = true;
  l.moe_ffn = moe::MoELayer::init(d, ff, n, k, rng);
  return l;
}

TransformerLayer::Out TransformerLayer::forward(const Tensor& x,
                                                double dropout_rate, Rng& rng,
                                                bool training) const {
  Out out;
  Tensor a = attn.forward(layer_norm(x, ln1_g, ln1_b));
  Tensor h = add(x, dropout(a, dropout_rate, rng, training));
  Tensor hn = layer_norm(h, ln2_g, ln2_b);
  Tensor f;
  if (is_moe) {
    auto res = moe::moe_forward(hn, moe_ffn, rng, training);
    f = res.output;
    out.moe = std::move(res);
  } else {
    f = ffn.forward(hn);
  }
  out.x = add(h, dropout(f, dropout_rate, rng, training));
  return out;
}

void TransformerLayer::collect_params(const std::string& prefix,
                                      nn::NamedParams& out) const {
  out.emplace_back(prefix + ".ln1_g", ln1_g);
  out.emplace_back(prefix + ".ln1_b", ln1_b);
  out.emplace_back(prefix + ".ln2_g", ln2_g);
  out.emplace_back(prefix + ".ln2_b", ln2_b);
  attn.collect_params(prefix + ".attn", out);
  if (is_moe) {
    moe_ffn.collect_params(prefix + ".moe", out);
  } else {
    out.emplace_back(prefix + ".ffn.w1", ffn.w1);
    out.emplace_back(prefix + ".ffn.b1", ffn.b1);
    out.emplace_back(prefix + ".ffn.w2", ffn.w2);
    out.emplace_back(prefix + ".ffn.b2", ffn.b2);
  }
}

}  // namespace anytraj
