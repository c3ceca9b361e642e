#pragma once

#include <string>
#include <utility>
#include <vector>

#include "anytraj/rng.hpp"
#include "anytraj/tensor.hpp"
#include "grad_check.hpp"

namespace testutil {

using anytraj::Rng;
using namespace anytraj::nn;

// Central-difference sweep over every differentiable op: `trials` random
// instances per op, inputs in [-2, 2]. Returns (op name, worst relative
// error) pairs.
inline std::vector<std::pair<std::string, double>> run_op_grad_sweep(
    int trials, uint64_t seed) {
  Rng root(seed);
  std::vector<std::pair<std::string, double>> results;

  auto record = [&](const std::string& name, auto&& make_case) {
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
      Rng rng = root.stream(name, static_cast<uint64_t>(t));
      auto [loss_fn, params] = make_case(rng);
      worst = std::max(worst, max_grad_error(loss_fn, params));
    }
    results.emplace_back(name, worst);
  };

  using Case =
      std::pair<std::function<Tensor()>, std::vector<Tensor>>;

  record("add", [](Rng& rng) -> Case {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
    return {[=] { return sum(add(a, b)); }, {a, b}};
  });
  record("sub", [](Rng& rng) -> Case {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
    return {[=] { return sum(sub(a, b)); }, {a, b}};
  });
  record("mul", [](Rng& rng) -> Case {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
    return {[=] { return sum(mul(a, b)); }, {a, b}};
  });
  record("scale", [](Rng& rng) -> Case {
    Tensor a = random_tensor({3, 4}, rng);
    double c = rng.uniform(-2.0, 2.0);
    return {[=] { return sum(scale(a, c)); }, {a}};
  });
  record("add_rowwise", [](Rng& rng) -> Case {
    Tensor x = random_tensor({3, 4}, rng), b = random_tensor({4}, rng);
    Tensor w = random_tensor({3, 4}, rng, false);
    return {[=] { return sum(mul(add_rowwise(x, b), w)); }, {x, b}};
  });
  record("scale_rows", [](Rng& rng) -> Case {
    Tensor x = random_tensor({3, 4}, rng), w = random_tensor({3}, rng);
    Tensor m = random_tensor({3, 4}, rng, false);
    return {[=] { return sum(mul(scale_rows(x, w), m)); }, {x, w}};
  });
  record("matmul", [](Rng& rng) -> Case {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
    return {[=] { return sum(matmul(a, b)); }, {a, b}};
  });
  record("transpose", [](Rng& rng) -> Case {
    Tensor a = random_tensor({3, 4}, rng);
    Tensor w = random_tensor({4, 3}, rng, false);
    return {[=] { return sum(mul(transpose(a), w)); }, {a}};
  });
  record("softmax", [](Rng& rng) -> Case {
    Tensor x = random_tensor({3, 4}, rng);
    Tensor w = random_tensor({3, 4}, rng, false);
    return {[=] { return sum(mul(softmax(x), w)); }, {x}};
  });
  record("gelu", [](Rng& rng) -> Case {
    Tensor x = random_tensor({3, 4}, rng);
    return {[=] { return sum(gelu(x)); }, {x}};
  });
  record("layer_norm", [](Rng& rng) -> Case {
    Tensor x = random_tensor({3, 4}, rng);
    Tensor g = random_tensor({4}, rng), b = random_tensor({4}, rng);
    Tensor w = random_tensor({3, 4}, rng, false);
    return {[=] { return sum(mul(layer_norm(x, g, b), w)); }, {x, g, b}};
  });
  record("logsumexp_rows", [](Rng& rng) -> Case {
    Tensor x = random_tensor({3, 4}, rng);
    Tensor w = random_tensor({3, 1}, rng, false);
    return {[=] { return sum(mul(logsumexp_rows(x), w)); }, {x}};
  });
  record("sum", [](Rng& rng) -> Case {
    Tensor x = random_tensor({3, 4}, rng);
    return {[=] { return sum(x); }, {x}};
  });
  record("mean", [](Rng& rng) -> Case {
    Tensor x = random_tensor({3, 4}, rng);
    return {[=] { return mean(mul(x, x)); }, {x}};
  });
  record("mse", [](Rng& rng) -> Case {
    Tensor p = random_tensor({3, 4}, rng), t = random_tensor({3, 4}, rng);
    return {[=] { return mse(p, t); }, {p, t}};
  });
  record("reshape", [](Rng& rng) -> Case {
    Tensor x = random_tensor({3, 4}, rng);
    Tensor w = random_tensor({4, 3}, rng, false);
    return {[=] { return sum(mul(reshape(x, {4, 3}), w)); }, {x}};
  });
  record("concat0", [](Rng& rng) -> Case {
    Tensor a = random_tensor({2, 3}, rng), b = random_tensor({3, 3}, rng);
    Tensor w = random_tensor({5, 3}, rng, false);
    return {[=] { return sum(mul(concat({a, b}, 0), w)); }, {a, b}};
  });
  record("concat1", [](Rng& rng) -> Case {
    Tensor a = random_tensor({3, 2}, rng), b = random_tensor({3, 3}, rng);
    Tensor w = random_tensor({3, 5}, rng, false);
    return {[=] { return sum(mul(concat({a, b}, 1), w)); }, {a, b}};
  });
  record("slice_rows", [](Rng& rng) -> Case {
    Tensor x = random_tensor({5, 3}, rng);
    Tensor w = random_tensor({2, 3}, rng, false);
    return {[=] { return sum(mul(slice_rows(x, 1, 2), w)); }, {x}};
  });
  record("slice_cols", [](Rng& rng) -> Case {
    Tensor x = random_tensor({3, 5}, rng);
    Tensor w = random_tensor({3, 2}, rng, false);
    return {[=] { return sum(mul(slice_cols(x, 2, 2), w)); }, {x}};
  });
  record("gather_rows", [](Rng& rng) -> Case {
    Tensor x = random_tensor({5, 3}, rng);
    std::vector<int64_t> idx = {
        static_cast<int64_t>(rng.below(5)), static_cast<int64_t>(rng.below(5)),
        static_cast<int64_t>(rng.below(5)), static_cast<int64_t>(rng.below(5))};
    Tensor w = random_tensor({4, 3}, rng, false);
    return {[=] { return sum(mul(gather_rows(x, idx), w)); }, {x}};
  });
  record("scatter_add_rows", [](Rng& rng) -> Case {
    Tensor base = random_tensor({5, 3}, rng);
    Tensor rows = random_tensor({4, 3}, rng);
    std::vector<int64_t> idx = {
        static_cast<int64_t>(rng.below(5)), static_cast<int64_t>(rng.below(5)),
        static_cast<int64_t>(rng.below(5)), static_cast<int64_t>(rng.below(5))};
    Tensor w = random_tensor({5, 3}, rng, false);
    return {[=] { return sum(mul(scatter_add_rows(base, idx, rows), w)); },
            {base, rows}};
  });
  record("gather_elems", [](Rng& rng) -> Case {
    Tensor x = random_tensor({4, 3}, rng);
    std::vector<int64_t> idx;
    for (int i = 0; i < 6; ++i)
      idx.push_back(static_cast<int64_t>(rng.below(12)));
    Tensor w = random_tensor({2, 3}, rng, false);
    return {[=] { return sum(mul(gather_elems(x, idx, {2, 3}), w)); }, {x}};
  });
  record("masked_keep", [](Rng& rng) -> Case {
    Tensor x = random_tensor({3, 4}, rng);
    std::vector<uint8_t> keep(12);
    for (auto& k : keep) k = rng.uniform() < 0.5 ? 1 : 0;
    keep[0] = 1;  // keep the graph connected
    // -inf fills must stay out of the loss: select kept entries only
    std::vector<int64_t> kept;
    for (size_t i = 0; i < keep.size(); ++i)
      if (keep[i]) kept.push_back(static_cast<int64_t>(i));
    int64_t n = static_cast<int64_t>(kept.size());
    return {[=] {
              return sum(gather_elems(masked_keep(x, keep), kept, {n}));
            },
            {x}};
  });
  record("dropout", [](Rng& rng) -> Case {
    Tensor x = random_tensor({3, 4}, rng);
    uint64_t drop_seed = rng.next_u64();
    return {[=] {
              anytraj::Rng drng(drop_seed);
              return sum(dropout(x, 0.3, drng, true));
            },
            {x}};
  });

  return results;
}

}  // namespace testutil
