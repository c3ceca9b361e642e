#include "anytraj/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace anytraj::nn {

double LrSchedule::lr_at(int epoch) const {
  if (warmup_epochs > 0 && epoch < warmup_epochs)
    return base_lr * (epoch + 1) / warmup_epochs;
  int span = total_epochs - warmup_epochs;
  if (span <= 0) return base_lr;
  double t = static_cast<double>(epoch - warmup_epochs) / span;
  if (t > 1.0) t = 1.0;
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(3.14159265358979323846 * t));
}

AdamW::AdamW(NamedParams params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  for (auto& [name, p] : params_) {
    (void)name;
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t k = 0; k < params_.size(); ++k) {
    auto& [name, p] = params_[k];
    if (!p.has_grad()) continue;
    const auto& g = p.grad();
    auto& d = p.data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (size_t i = 0; i < d.size(); ++i) {
      if (!std::isfinite(g[i]))
        throw std::runtime_error("non-finite gradient in parameter " + name);
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      // decoupled weight decay
      d[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * d[i]);
    }
  }
  zero_grad();
}

void AdamW::zero_grad() {
  for (auto& [name, p] : params_) {
    (void)name;
    p.zero_grad();
  }
}

}  // namespace anytraj::nn
