#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "anytraj/rng.hpp"

namespace anytraj::nn {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& s);

namespace detail {

// One record of the computation graph. The graph is the set of nodes
// reachable from a loss through `parents`; backward() walks it in reverse
// topological order exactly once.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool backward_done = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Dense 64-bit real tensor participating in a dynamically built reverse-mode
// autodiff graph. Value-semantics handle: copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng,
                        bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t size() const { return node_->size(); }
  int64_t rows() const;
  int64_t cols() const;

  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& data() const { return node_->data; }
  const std::vector<double>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  double item() const;
  double at(int64_t i) const { return node_->data[static_cast<size_t>(i)]; }
  double at(int64_t r, int64_t c) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Reverse pass from a scalar loss. A graph may be walked once; a second
// backward() through the same loss node throws.
void backward(const Tensor& loss);

bool all_finite(const Tensor& t);
// Throws std::runtime_error naming `what` if t holds a NaN/Inf.
void check_finite(const Tensor& t, const std::string& what);

// Elementwise / broadcast arithmetic.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor add_rowwise(const Tensor& x, const Tensor& bias);   // bias per column
Tensor scale_rows(const Tensor& x, const Tensor& w);       // one weight per row

// Linear algebra (2D).
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

// Nonlinearities and norms (last-axis semantics).
Tensor softmax(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation, forward and gradient
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor logsumexp_rows(const Tensor& x);  // [r,n] -> [r,1], shifted

// Reductions and losses.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse(const Tensor& pred, const Tensor& target);

// Structure.
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);  // 2D, axis 0 or 1
Tensor slice_rows(const Tensor& x, int64_t start, int64_t len);
Tensor slice_cols(const Tensor& x, int64_t start, int64_t len);
Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& indices);
Tensor scatter_add_rows(const Tensor& base, const std::vector<int64_t>& indices,
                        const Tensor& rows);
Tensor gather_elems(const Tensor& x, const std::vector<int64_t>& indices,
                    Shape out_shape);

// Keeps entries where keep[i] != 0, replaces the rest with -inf (no gradient
// through the filled entries).
Tensor masked_keep(const Tensor& x, const std::vector<uint8_t>& keep);

// Inverted dropout: identity when !training, else zeroes with probability
// `rate` and rescales survivors by 1/(1-rate).
Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training);

}  // namespace anytraj::nn
