#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "lsd/tensor.hpp"

namespace lsd::ag {

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool grad_ready = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backprop;

  void accumulate(const Tensor& g);
};

// Handle to a tape node. Graphs are built per forward pass and freed when the
// last Var goes out of scope.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& val() const { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  double item() const { return node_->value[0]; }
  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

Var leaf(Tensor value, bool requires_grad = false);
inline Var constant(Tensor value) { return leaf(std::move(value), false); }
inline Var scalar(double v) { return constant(Tensor::scalar(v)); }

// Reverse-mode sweep from a scalar root.
void backward(const Var& root);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var silu(const Var& a);
Var square(const Var& a);

// ---- shape ----
Var reshape(const Var& a, std::vector<std::int64_t> shape);
Var slice_lastdim(const Var& a, std::int64_t start, std::int64_t len);
Var split_heads(const Var& x, int heads);  // (B,L,H*hd) -> (B,H,L,hd)
Var merge_heads(const Var& x);             // (B,H,L,hd) -> (B,L,H*hd)

// ---- reductions ----
Var sum_all(const Var& a);  // -> scalar

// ---- broadcast over rows of the last dim ----
Var add_rowvec(const Var& x, const Var& v);  // x (..., d) + v (d)
Var mul_rowvec(const Var& x, const Var& v);
// Multiply each length-d row (x viewed as (R, d)) by rowmask[r].
Var mask_rows(const Var& x, const std::vector<double>& rowmask);

// ---- linear algebra ----
// a (..., M, K) @ b (K, N), or (..., M, K) @ (..., K, N) with equal leading dims.
Var matmul(const Var& a, const Var& b);
Var layernorm(const Var& x, double eps = 1e-5);

// ---- gather / scatter ----
// x viewed as (R, d); picks the given flat rows into (N, d).
Var gather_rows(const Var& x, const std::vector<std::int64_t>& rows);
// Adds vector v (d) at the given flat rows of x.
Var add_at_rows(const Var& x, const std::vector<std::int64_t>& rows, const Var& v);
// table (V, d), ids length B*L -> (B, L, d).
Var embedding(const Var& table, const std::vector<int>& ids, std::int64_t batch,
              std::int64_t len);

// ---- domain ops ----
// Rotary embedding on (B,H,L,hd); positions has length L; hd must be even.
Var rope(const Var& x, const std::vector<std::int64_t>& positions, double base = 10000.0);

// Softmax attention over unmasked keys. q,k,v: (B,H,L,hd); key_mask length B*L.
// Masked keys get exactly zero weight; a query with no unmasked key throws.
// When capture is non-null the post-softmax weights (B,H,L,L) are stored there.
Var attention(const Var& q, const Var& k, const Var& v,
              const std::vector<std::uint8_t>& key_mask, Tensor* capture = nullptr);

// Weighted mean token cross-entropy. logits (B,L,C), targets/weights length B*L.
// Positions with weight 0 are excluded; zero total weight throws.
Var cross_entropy(const Var& logits, const std::vector<int>& targets,
                  const std::vector<double>& weights);

// KL(N(mu, diag(var)) || N(0, I)) / d from empirical per-coordinate moments of
// the rows (N, d), biased variance estimator.
Var kl_norm_univariate_rows(const Var& rows, double var_floor = 1e-8);
// Multivariate form with empirical covariance, ridge-regularized determinant.
Var kl_norm_multivariate_rows(const Var& rows, double ridge = 1e-6);

// x (B,L,d), mask length B*L -> per-sequence mean over masked positions (B,d).
Var mean_pool(const Var& x, const std::vector<std::uint8_t>& mask);

}  // namespace lsd::ag
