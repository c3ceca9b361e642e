#pragma once

#include <string>
#include <utility>
#include <vector>

#include "anytraj/tensor.hpp"

namespace anytraj::nn {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// Cosine decay with linear warm-up, in epoch units.
struct LrSchedule {
  double base_lr = 1e-4;
  double min_lr = 0.0;
  int warmup_epochs = 5;
  int total_epochs = 100;

  double lr_at(int epoch) const;
};

class AdamW {
 public:
  AdamW(NamedParams params, AdamWConfig cfg);

  // Applies one update from the gradients currently held by the parameters,
  // then clears them. Throws if any gradient is non-finite.
  void step(double lr);

  void zero_grad();
  const NamedParams& params() const { return params_; }

 private:
  NamedParams params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  int64_t t_ = 0;
};

}  // namespace anytraj::nn
