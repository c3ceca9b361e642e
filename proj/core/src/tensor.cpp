#include "anytraj/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace anytraj::nn {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

using detail::Node;

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> data) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  return n;
}

// Result node wired to its parents; backward_fn attached only when some
// parent actually needs a gradient.
Tensor make_op(Shape shape, std::vector<double> data,
               std::vector<std::shared_ptr<Node>> parents,
               std::function<void(Node&)> backward_fn) {
  auto n = make_node(std::move(shape), std::move(data));
  bool needs = false;
  for (const auto& p : parents)
    if (p->requires_grad) needs = true;
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

int64_t last_dim(const Shape& s) {
  require(!s.empty(), "tensor must have at least one axis");
  return s.back();
}

// C += A(m x k) * B(k x n)
void gemm(const double* a, const double* b, double* c, int64_t m, int64_t k,
          int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      const double* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C += A(m x k) * B(n x k)^T
void gemm_nt(const double* a, const double* b, double* c, int64_t m, int64_t k,
             int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// C += A(k x m)^T * B(k x n)
void gemm_tn(const double* a, const double* b, double* c, int64_t m, int64_t k,
             int64_t n) {
  for (int64_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      const double api = ap[i];
      if (api == 0.0) continue;
      double* ci = c + i * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

}  // namespace

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    require(d > 0, "all extents must be positive");
    n *= d;
  }
  return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  int64_t n = numel(shape);
  auto node = make_node(std::move(shape),
                        std::vector<double>(static_cast<size_t>(n), value));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  require(numel(shape) == static_cast<int64_t>(data.size()),
          "shape does not match data length");
  auto node = make_node(std::move(shape), std::move(data));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng,
                       bool requires_grad) {
  int64_t n = numel(shape);
  std::vector<double> d(static_cast<size_t>(n));
  for (auto& v : d) v = rng.uniform(lo, hi);
  return from(std::move(shape), std::move(d), requires_grad);
}

int64_t Tensor::rows() const {
  require(node_->shape.size() == 2, "rows() requires a 2D tensor");
  return node_->shape[0];
}

int64_t Tensor::cols() const {
  require(node_->shape.size() == 2, "cols() requires a 2D tensor");
  return node_->shape[1];
}

double Tensor::item() const {
  require(size() == 1, "item() requires a single-element tensor");
  return node_->data[0];
}

double Tensor::at(int64_t r, int64_t c) const {
  return node_->data[static_cast<size_t>(r * cols() + c)];
}

void backward(const Tensor& loss) {
  auto root = loss.node();
  if (loss.size() != 1)
    throw std::invalid_argument("backward() requires a scalar loss");
  if (root->backward_done)
    throw std::runtime_error(
        "backward() already ran through this loss; rebuild the graph");
  root->backward_done = true;

  // Iterative post-order DFS gives topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

bool all_finite(const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

void check_finite(const Tensor& t, const std::string& what) {
  if (!all_finite(t))
    throw std::runtime_error("non-finite values in " + what);
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add: shape mismatch");
  std::vector<double> out(a.data());
  for (int64_t i = 0; i < b.size(); ++i) out[i] += b.at(i);
  return make_op(a.shape(), std::move(out), {a.node(), b.node()},
                 [](Node& self) {
                   for (auto& p : self.parents) {
                     if (!p->requires_grad) continue;
                     p->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       p->grad[i] += self.grad[i];
                   }
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "sub: shape mismatch");
  std::vector<double> out(a.data());
  for (int64_t i = 0; i < b.size(); ++i) out[i] -= b.at(i);
  return make_op(a.shape(), std::move(out), {a.node(), b.node()},
                 [](Node& self) {
                   auto& pa = self.parents[0];
                   auto& pb = self.parents[1];
                   if (pa->requires_grad) {
                     pa->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       pa->grad[i] += self.grad[i];
                   }
                   if (pb->requires_grad) {
                     pb->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       pb->grad[i] -= self.grad[i];
                   }
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch");
  std::vector<double> out(a.data());
  for (int64_t i = 0; i < b.size(); ++i) out[i] *= b.at(i);
  return make_op(a.shape(), std::move(out), {a.node(), b.node()},
                 [](Node& self) {
                   auto& pa = self.parents[0];
                   auto& pb = self.parents[1];
                   if (pa->requires_grad) {
                     pa->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       pa->grad[i] += self.grad[i] * pb->data[i];
                   }
                   if (pb->requires_grad) {
                     pb->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       pb->grad[i] += self.grad[i] * pa->data[i];
                   }
                 });
}

Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.data());
  for (auto& v : out) v *= c;
  return make_op(x.shape(), std::move(out), {x.node()}, [c](Node& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      p->grad[i] += c * self.grad[i];
  });
}

Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  int64_t c = last_dim(x.shape());
  require(bias.size() == c, "add_rowwise: bias length mismatch");
  int64_t r = x.size() / c;
  std::vector<double> out(x.data());
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out[i * c + j] += bias.at(j);
  return make_op(x.shape(), std::move(out), {x.node(), bias.node()},
                 [r, c](Node& self) {
                   auto& px = self.parents[0];
                   auto& pb = self.parents[1];
                   if (px->requires_grad) {
                     px->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       px->grad[i] += self.grad[i];
                   }
                   if (pb->requires_grad) {
                     pb->ensure_grad();
                     for (int64_t i = 0; i < r; ++i)
                       for (int64_t j = 0; j < c; ++j)
                         pb->grad[j] += self.grad[i * c + j];
                   }
                 });
}

Tensor scale_rows(const Tensor& x, const Tensor& w) {
  require(x.shape().size() == 2, "scale_rows: x must be 2D");
  int64_t r = x.rows(), c = x.cols();
  require(w.size() == r, "scale_rows: one weight per row required");
  std::vector<double> out(x.data());
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out[i * c + j] *= w.at(i);
  return make_op(x.shape(), std::move(out), {x.node(), w.node()},
                 [r, c](Node& self) {
                   auto& px = self.parents[0];
                   auto& pw = self.parents[1];
                   if (px->requires_grad) {
                     px->ensure_grad();
                     for (int64_t i = 0; i < r; ++i)
                       for (int64_t j = 0; j < c; ++j)
                         px->grad[i * c + j] +=
                             self.grad[i * c + j] * pw->data[i];
                   }
                   if (pw->requires_grad) {
                     pw->ensure_grad();
                     for (int64_t i = 0; i < r; ++i) {
                       double acc = 0.0;
                       for (int64_t j = 0; j < c; ++j)
                         acc += self.grad[i * c + j] * px->data[i * c + j];
                       pw->grad[i] += acc;
                     }
                   }
                 });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.shape().size() == 2 && b.shape().size() == 2,
          "matmul: 2D tensors required");
  require(a.cols() == b.rows(), "matmul: inner dimensions disagree");
  int64_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  gemm(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_op({m, n}, std::move(out), {a.node(), b.node()},
                 [m, k, n](Node& self) {
                   auto& pa = self.parents[0];
                   auto& pb = self.parents[1];
                   if (pa->requires_grad) {
                     pa->ensure_grad();
                     // dA = dC * B^T
                     gemm_nt(self.grad.data(), pb->data.data(),
                             pa->grad.data(), m, n, k);
                   }
                   if (pb->requires_grad) {
                     pb->ensure_grad();
                     // dB = A^T * dC
                     gemm_tn(pa->data.data(), self.grad.data(),
                             pb->grad.data(), k, m, n);
                   }
                 });
}

Tensor transpose(const Tensor& x) {
  require(x.shape().size() == 2, "transpose: 2D tensor required");
  int64_t r = x.rows(), c = x.cols();
  std::vector<double> out(static_cast<size_t>(r * c));
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out[j * r + i] = x.at(i, j);
  return make_op({c, r}, std::move(out), {x.node()}, [r, c](Node& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j)
        p->grad[i * c + j] += self.grad[j * r + i];
  });
}

Tensor softmax(const Tensor& x) {
  int64_t c = last_dim(x.shape());
  int64_t r = x.size() / c;
  std::vector<double> out(static_cast<size_t>(r * c));
  for (int64_t i = 0; i < r; ++i) {
    double m = kNegInf;
    for (int64_t j = 0; j < c; ++j) m = std::max(m, x.at(i * c + j));
    if (m == kNegInf)
      throw std::invalid_argument("softmax: row with no finite entry");
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      double e = std::exp(x.at(i * c + j) - m);
      out[i * c + j] = e;
      z += e;
    }
    for (int64_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  return make_op(x.shape(), std::move(out), {x.node()}, [r, c](Node& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    for (int64_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (int64_t j = 0; j < c; ++j)
        dot += self.grad[i * c + j] * self.data[i * c + j];
      for (int64_t j = 0; j < c; ++j) {
        double pj = self.data[i * c + j];
        if (pj != 0.0)
          p->grad[i * c + j] += pj * (self.grad[i * c + j] - dot);
      }
    }
  });
}

Tensor gelu(const Tensor& x) {
  // tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  std::vector<double> out(static_cast<size_t>(x.size()));
  for (int64_t i = 0; i < x.size(); ++i) {
    double v = x.at(i);
    out[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  return make_op(x.shape(), std::move(out), {x.node()}, [](Node& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double v = p->data[i];
      double u = kC * (v + kA * v * v * v);
      double t = std::tanh(u);
      double du = kC * (1.0 + 3.0 * kA * v * v);
      double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      p->grad[i] += self.grad[i] * d;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  constexpr double kEps = 1e-8;
  int64_t c = last_dim(x.shape());
  require(gain.size() == c && bias.size() == c,
          "layer_norm: gain/bias length mismatch");
  int64_t r = x.size() / c;
  std::vector<double> out(static_cast<size_t>(r * c));
  std::vector<double> xhat(static_cast<size_t>(r * c));
  std::vector<double> inv_std(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (int64_t j = 0; j < c; ++j) mu += x.at(i * c + j);
    mu /= c;
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      double d = x.at(i * c + j) - mu;
      var += d * d;
    }
    var /= c;
    double is = 1.0 / std::sqrt(var + kEps);
    inv_std[i] = is;
    for (int64_t j = 0; j < c; ++j) {
      double h = (x.at(i * c + j) - mu) * is;
      xhat[i * c + j] = h;
      out[i * c + j] = gain.at(j) * h + bias.at(j);
    }
  }
  return make_op(
      x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
      [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        if (pg->requires_grad) {
          pg->ensure_grad();
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j)
              pg->grad[j] += self.grad[i * c + j] * xhat[i * c + j];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j)
              pb->grad[j] += self.grad[i * c + j];
        }
        if (px->requires_grad) {
          px->ensure_grad();
          for (int64_t i = 0; i < r; ++i) {
            double sum_g = 0.0, sum_gh = 0.0;
            for (int64_t j = 0; j < c; ++j) {
              double gj = self.grad[i * c + j] * pg->data[j];
              sum_g += gj;
              sum_gh += gj * xhat[i * c + j];
            }
            for (int64_t j = 0; j < c; ++j) {
              double gj = self.grad[i * c + j] * pg->data[j];
              px->grad[i * c + j] +=
                  inv_std[i] *
                  (gj - sum_g / c - xhat[i * c + j] * sum_gh / c);
            }
          }
        }
      });
}

Tensor logsumexp_rows(const Tensor& x) {
  require(x.shape().size() == 2, "logsumexp_rows: 2D tensor required");
  int64_t r = x.rows(), c = x.cols();
  std::vector<double> out(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i) {
    double m = kNegInf;
    for (int64_t j = 0; j < c; ++j) m = std::max(m, x.at(i, j));
    require(std::isfinite(m), "logsumexp_rows: row with no finite entry");
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) z += std::exp(x.at(i, j) - m);
    out[i] = m + std::log(z);
  }
  return make_op({r, 1}, std::move(out), {x.node()}, [r, c](Node& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    for (int64_t i = 0; i < r; ++i) {
      for (int64_t j = 0; j < c; ++j)
        p->grad[i * c + j] +=
            self.grad[i] * std::exp(p->data[i * c + j] - self.data[i]);
    }
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_op({1}, {s}, {x.node()}, [](Node& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    for (auto& g : p->grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / x.size()); }

Tensor mse(const Tensor& pred, const Tensor& target) {
  require(pred.shape() == target.shape(), "mse: shape mismatch");
  int64_t n = pred.size();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double d = pred.at(i) - target.at(i);
    s += d * d;
  }
  return make_op({1}, {s / n}, {pred.node(), target.node()}, [n](Node& self) {
    auto& pp = self.parents[0];
    auto& pt = self.parents[1];
    double g = self.grad[0] * 2.0 / n;
    if (pp->requires_grad) {
      pp->ensure_grad();
      for (int64_t i = 0; i < n; ++i)
        pp->grad[i] += g * (pp->data[i] - pt->data[i]);
    }
    if (pt->requires_grad) {
      pt->ensure_grad();
      for (int64_t i = 0; i < n; ++i)
        pt->grad[i] -= g * (pp->data[i] - pt->data[i]);
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(numel(shape) == x.size(), "reshape: element count mismatch");
  return make_op(std::move(shape), x.data(), {x.node()}, [](Node& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  require(!parts.empty(), "concat: empty input");
  require(axis == 0 || axis == 1, "concat: axis must be 0 or 1");
  for (const auto& p : parts)
    require(p.shape().size() == 2, "concat: 2D tensors required");
  std::vector<std::shared_ptr<Node>> parents;
  for (const auto& p : parts) parents.push_back(p.node());

  if (axis == 0) {
    int64_t c = parts[0].cols(), r = 0;
    for (const auto& p : parts) {
      require(p.cols() == c, "concat axis 0: column mismatch");
      r += p.rows();
    }
    std::vector<double> out;
    out.reserve(static_cast<size_t>(r * c));
    for (const auto& p : parts)
      out.insert(out.end(), p.data().begin(), p.data().end());
    return make_op({r, c}, std::move(out), std::move(parents), [](Node& self) {
      size_t off = 0;
      for (auto& p : self.parents) {
        if (p->requires_grad) {
          p->ensure_grad();
          for (size_t i = 0; i < p->data.size(); ++i)
            p->grad[i] += self.grad[off + i];
        }
        off += p->data.size();
      }
    });
  }

  int64_t r = parts[0].rows(), c = 0;
  std::vector<int64_t> widths;
  for (const auto& p : parts) {
    require(p.rows() == r, "concat axis 1: row mismatch");
    widths.push_back(p.cols());
    c += p.cols();
  }
  std::vector<double> out(static_cast<size_t>(r * c));
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t w = p.cols();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < w; ++j) out[i * c + off + j] = p.at(i, j);
    off += w;
  }
  return make_op({r, c}, std::move(out), std::move(parents),
                 [r, c, widths](Node& self) {
                   int64_t off = 0;
                   for (size_t k = 0; k < self.parents.size(); ++k) {
                     auto& p = self.parents[k];
                     int64_t w = widths[k];
                     if (p->requires_grad) {
                       p->ensure_grad();
                       for (int64_t i = 0; i < r; ++i)
                         for (int64_t j = 0; j < w; ++j)
                           p->grad[i * w + j] += self.grad[i * c + off + j];
                     }
                     off += w;
                   }
                 });
}

Tensor slice_rows(const Tensor& x, int64_t start, int64_t len) {
  require(x.shape().size() == 2, "slice_rows: 2D tensor required");
  require(start >= 0 && len > 0 && start + len <= x.rows(),
          "slice_rows: range out of bounds");
  int64_t c = x.cols();
  std::vector<double> out(x.data().begin() + start * c,
                          x.data().begin() + (start + len) * c);
  return make_op({len, c}, std::move(out), {x.node()},
                 [start, len, c](Node& self) {
                   auto& p = self.parents[0];
                   p->ensure_grad();
                   for (int64_t i = 0; i < len * c; ++i)
                     p->grad[start * c + i] += self.grad[i];
                 });
}

Tensor slice_cols(const Tensor& x, int64_t start, int64_t len) {
  require(x.shape().size() == 2, "slice_cols: 2D tensor required");
  require(start >= 0 && len > 0 && start + len <= x.cols(),
          "slice_cols: range out of bounds");
  int64_t r = x.rows(), c = x.cols();
  std::vector<double> out(static_cast<size_t>(r * len));
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < len; ++j) out[i * len + j] = x.at(i, start + j);
  return make_op({r, len}, std::move(out), {x.node()},
                 [r, c, start, len](Node& self) {
                   auto& p = self.parents[0];
                   p->ensure_grad();
                   for (int64_t i = 0; i < r; ++i)
                     for (int64_t j = 0; j < len; ++j)
                       p->grad[i * c + start + j] += self.grad[i * len + j];
                 });
}

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& indices) {
  require(x.shape().size() == 2, "gather_rows: 2D tensor required");
  int64_t r = x.rows(), c = x.cols();
  for (int64_t idx : indices)
    require(idx >= 0 && idx < r, "gather_rows: index out of range");
  int64_t m = static_cast<int64_t>(indices.size());
  require(m > 0, "gather_rows: empty index list");
  std::vector<double> out(static_cast<size_t>(m * c));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < c; ++j) out[i * c + j] = x.at(indices[i], j);
  return make_op({m, c}, std::move(out), {x.node()},
                 [indices, c](Node& self) {
                   auto& p = self.parents[0];
                   p->ensure_grad();
                   for (size_t i = 0; i < indices.size(); ++i)
                     for (int64_t j = 0; j < c; ++j)
                       p->grad[indices[i] * c + j] += self.grad[i * c + j];
                 });
}

Tensor scatter_add_rows(const Tensor& base, const std::vector<int64_t>& indices,
                        const Tensor& rows) {
  require(base.shape().size() == 2 && rows.shape().size() == 2,
          "scatter_add_rows: 2D tensors required");
  require(base.cols() == rows.cols(), "scatter_add_rows: column mismatch");
  require(static_cast<int64_t>(indices.size()) == rows.rows(),
          "scatter_add_rows: one index per row required");
  int64_t c = base.cols();
  for (int64_t idx : indices)
    require(idx >= 0 && idx < base.rows(),
            "scatter_add_rows: index out of range");
  std::vector<double> out(base.data());
  for (size_t i = 0; i < indices.size(); ++i)
    for (int64_t j = 0; j < c; ++j)
      out[indices[i] * c + j] += rows.at(static_cast<int64_t>(i), j);
  return make_op(base.shape(), std::move(out), {base.node(), rows.node()},
                 [indices, c](Node& self) {
                   auto& pb = self.parents[0];
                   auto& pr = self.parents[1];
                   if (pb->requires_grad) {
                     pb->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       pb->grad[i] += self.grad[i];
                   }
                   if (pr->requires_grad) {
                     pr->ensure_grad();
                     for (size_t i = 0; i < indices.size(); ++i)
                       for (int64_t j = 0; j < c; ++j)
                         pr->grad[i * c + j] += self.grad[indices[i] * c + j];
                   }
                 });
}

Tensor gather_elems(const Tensor& x, const std::vector<int64_t>& indices,
                    Shape out_shape) {
  require(numel(out_shape) == static_cast<int64_t>(indices.size()),
          "gather_elems: shape does not match index count");
  for (int64_t idx : indices)
    require(idx >= 0 && idx < x.size(), "gather_elems: index out of range");
  std::vector<double> out(indices.size());
  for (size_t i = 0; i < indices.size(); ++i) out[i] = x.at(indices[i]);
  return make_op(std::move(out_shape), std::move(out), {x.node()},
                 [indices](Node& self) {
                   auto& p = self.parents[0];
                   p->ensure_grad();
                   for (size_t i = 0; i < indices.size(); ++i)
                     p->grad[indices[i]] += self.grad[i];
                 });
}

Tensor masked_keep(const Tensor& x, const std::vector<uint8_t>& keep) {
  require(static_cast<int64_t>(keep.size()) == x.size(),
          "masked_keep: mask length mismatch");
  std::vector<double> out(static_cast<size_t>(x.size()));
  for (int64_t i = 0; i < x.size(); ++i)
    out[i] = keep[i] ? x.at(i) : kNegInf;
  return make_op(x.shape(), std::move(out), {x.node()}, [keep](Node& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    for (size_t i = 0; i < keep.size(); ++i)
      if (keep[i]) p->grad[i] += self.grad[i];
  });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
  require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0, 1)");
  if (!training || rate == 0.0) return x;
  double inv_keep = 1.0 / (1.0 - rate);
  std::vector<double> mask(static_cast<size_t>(x.size()));
  std::vector<double> out(static_cast<size_t>(x.size()));
  for (int64_t i = 0; i < x.size(); ++i) {
    mask[i] = rng.uniform() < rate ? 0.0 : inv_keep;
    out[i] = x.at(i) * mask[i];
  }
  return make_op(x.shape(), std::move(out), {x.node()},
                 [mask = std::move(mask)](Node& self) {
                   auto& p = self.parents[0];
                   p->ensure_grad();
                   for (size_t i = 0; i < mask.size(); ++i)
                     p->grad[i] += self.grad[i] * mask[i];
                 });
}

}  // namespace anytraj::nn
