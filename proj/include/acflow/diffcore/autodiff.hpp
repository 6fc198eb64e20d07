#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "acflow/diffcore/tensor.hpp"

namespace acflow::ad {

// One vertex of the define-by-run graph.  Leaves have no backward function;
// interior nodes only keep their parents when at least one of them needs a
// gradient, so graphs built from constants alone cost nothing to discard.
struct Node {
  std::shared_ptr<const Tensor> value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  // Gradient accumulator, zero-initialised on first use.
  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor& value() const { return *node_->value; }
  // Gradient after backward(); an all-zero tensor when the node was unreachable.
  Tensor grad() const;
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }

  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Per-row column indices: at[r * cols + c] is the source column of entry (r, c).
struct RowIndex {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> at;

  std::size_t operator()(std::size_t r, std::size_t c) const { return at[r * cols + c]; }
};

Var constant(Tensor value);
// Differentiable leaf owning its value.
Var variable(Tensor value);
// Leaf sharing storage with an externally owned tensor (model parameters).
Var leaf(std::shared_ptr<const Tensor> value, bool requires_grad);

// Reverse sweep from a single-element root.  Gradients accumulate into every
// reachable node that requires them; each node is visited exactly once.
void backward(const Var& root);

// Elementwise binary ops broadcast any operand dimension of extent 1.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var exp(const Var& a);
Var log(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);
Var relu(const Var& a);
Var leaky_relu(const Var& a, double alpha);
Var square(const Var& a);

// Matrix product; a rank-1 right operand is treated as a column vector and
// the result is rank 1.
Var matmul(const Var& a, const Var& b);
// x * weight + bias, bias broadcast over rows.
Var linear(const Var& x, const Var& weight, const Var& bias);

Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var logsumexp_rows(const Var& a);
Var logsumexp(const Var& a);

Var sum(const Var& a);
Var mean(const Var& a);
// Sum across columns: R x C -> R x 1.
Var row_sum(const Var& a);

Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(const Var& a, std::size_t begin, std::size_t count);
Var slice_rows(const Var& a, std::size_t begin, std::size_t count);
// Keeps the columns whose flag is non-zero, order preserved.
Var slice_by_mask(const Var& a, std::span<const std::uint8_t> keep);
Var gather_cols(const Var& a, const RowIndex& index);
// Inverse of gather_cols: places column c of row r at index(r, c) of a zero
// row of the given width.
Var scatter_cols(const Var& a, const RowIndex& index, std::size_t width);
// Rows of a hold flattened dim x dim matrices; extracts the index x index
// submatrix of each row (rows then columns), flattened row-major.
Var gather_submatrix(const Var& a, const RowIndex& index, std::size_t dim);

// Row r of w holds an n x n matrix W_r (row-major); row r of x is a vector.
Var batched_matvec(const Var& w, const Var& x);
// Row r of a is an n x k matrix, row r of b a k x m matrix; returns the
// per-row n x m products.
Var batched_matmul(const Var& a, const Var& b, std::size_t n, std::size_t k, std::size_t m);
Var batched_solve(const Var& w, const Var& y);
// log |det W_r| per row (R x 1).  Raises NumericalError when |det| < 1e-30 or
// the 1-norm condition estimate exceeds 1e12.
Var batched_logabsdet(const Var& w);

// Fused GRU update on pre-projected input x_proj = x W_ih + b_ih (R x 3H),
// gates ordered (reset, update, candidate):
//   r = sigmoid(xr + h W_hr + b_hr),  u = sigmoid(xu + h W_hu + b_hu)
//   n = tanh(xn + r * (h W_hn + b_hn)),  h' = (1 - u) * n + u * h
Var gru_step(const Var& x_proj, const Var& h_prev, const Var& w_hidden, const Var& b_hidden);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator+(const Var& a, double c) { return add_scalar(a, c); }
inline Var operator-(const Var& a, double c) { return add_scalar(a, -c); }

}  // namespace acflow::ad
