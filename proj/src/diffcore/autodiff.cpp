#include "acflow/diffcore/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_set>

#include "acflow/error.hpp"

namespace acflow::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const Tensor& t) { return ConstMap(t.data(), t.rows(), t.cols()); }
MutMap as_matrix(Tensor& t) { return MutMap(t.data(), t.rows(), t.cols()); }

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) +
                   " and " + shape_string(b.shape()));
}

Var make_node(Tensor value, std::initializer_list<const Var*> inputs,
              std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::make_shared<const Tensor>(std::move(value));
  bool needs = false;
  for (const Var* in : inputs) needs = needs || in->requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (const Var* in : inputs) node->parents.push_back(in->ptr());
    node->backward = std::move(backward_fn);
  }
  return Var(std::move(node));
}

Var make_node_list(Tensor value, const std::vector<Var>& inputs,
                   std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::make_shared<const Tensor>(std::move(value));
  bool needs = std::any_of(inputs.begin(), inputs.end(),
                           [](const Var& v) { return v.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    for (const Var& in : inputs) node->parents.push_back(in.ptr());
    node->backward = std::move(backward_fn);
  }
  return Var(std::move(node));
}

// Gradient buffer of parent i, or nullptr when that parent needs none.
Tensor* parent_grad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

const Tensor& parent_value(const Node& self, std::size_t i) { return *self.parents[i]->value; }

struct Broadcast {
  std::size_t rows, cols;
  bool a_rows, a_cols, b_rows, b_cols;  // operand varies along that axis
  Shape shape;
};

Broadcast broadcast(const char* op, const Tensor& a, const Tensor& b) {
  const std::size_t ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  if ((ar != br && ar != 1 && br != 1) || (ac != bc && ac != 1 && bc != 1)) shape_fail(op, a, b);
  Broadcast out{std::max(ar, br), std::max(ac, bc), ar != 1, ac != 1, br != 1, bc != 1, {}};
  const std::size_t n = out.rows * out.cols;
  if (a.size() == n && (a.rank() >= b.rank() || b.size() != n)) {
    out.shape = a.shape();
  } else if (b.size() == n) {
    out.shape = b.shape();
  } else {
    out.shape = Shape{out.rows, out.cols};
  }
  return out;
}

template <class Fwd, class DA, class DB>
Var binary(const char* op, const Var& a, const Var& b, Fwd fwd, DA da, DB db) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast bc = broadcast(op, av, bv);
  Tensor out(bc.shape);
  const std::size_t acols = av.cols(), bcols = bv.cols();
  for (std::size_t r = 0; r < bc.rows; ++r) {
    const double* arow = av.data() + (bc.a_rows ? r * acols : 0);
    const double* brow = bv.data() + (bc.b_rows ? r * bcols : 0);
    double* orow = out.data() + r * bc.cols;
    for (std::size_t c = 0; c < bc.cols; ++c) {
      orow[c] = fwd(arow[bc.a_cols ? c : 0], brow[bc.b_cols ? c : 0]);
    }
  }
  return make_node(std::move(out), {&a, &b}, [bc, acols, bcols, da, db](Node& self) {
    const Tensor& av = parent_value(self, 0);
    const Tensor& bv = parent_value(self, 1);
    const Tensor& ov = *self.value;
    Tensor* ga = parent_grad(self, 0);
    Tensor* gb = parent_grad(self, 1);
    for (std::size_t r = 0; r < bc.rows; ++r) {
      const std::size_t ar = bc.a_rows ? r * acols : 0;
      const std::size_t br = bc.b_rows ? r * bcols : 0;
      for (std::size_t c = 0; c < bc.cols; ++c) {
        const std::size_t ai = ar + (bc.a_cols ? c : 0);
        const std::size_t bi = br + (bc.b_cols ? c : 0);
        const std::size_t oi = r * bc.cols + c;
        const double g = self.grad[oi];
        if (ga) (*ga)[ai] += g * da(av[ai], bv[bi], ov[oi]);
        if (gb) (*gb)[bi] += g * db(av[ai], bv[bi], ov[oi]);
      }
    }
  });
}

// dfn(x, y) is dy/dx given input x and output y.
template <class Fwd, class Deriv>
Var unary(const Var& a, Fwd fwd, Deriv dfn) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return make_node(std::move(out), {&a}, [dfn](Node& self) {
    const Tensor& av = parent_value(self, 0);
    const Tensor& ov = *self.value;
    Tensor& ga = *parent_grad(self, 0);
    for (std::size_t i = 0; i < av.size(); ++i) ga[i] += self.grad[i] * dfn(av[i], ov[i]);
  });
}

void check_batched_square(const char* op, const Tensor& w, std::size_t& n) {
  const std::size_t cols = w.cols();
  n = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(cols))));
  if (n * n != cols) {
    throw ShapeError(std::string(op) + ": row length " + std::to_string(cols) +
                     " is not a square matrix");
  }
}

constexpr double kMinAbsDet = 1e-30;
constexpr double kMaxCondition = 1e12;

// LU of row r of w with the invertibility contract applied.
Eigen::PartialPivLU<Eigen::MatrixXd> checked_lu(const Tensor& w, std::size_t r, std::size_t n,
                                                double* logabsdet) {
  Eigen::MatrixXd m = ConstMap(w.data() + r * n * n, n, n);
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(m);
  double logdet = 0.0;
  const auto diag = lu.matrixLU().diagonal();
  for (Eigen::Index i = 0; i < diag.size(); ++i) logdet += std::log(std::abs(diag[i]));
  if (!std::isfinite(logdet) || logdet < std::log(kMinAbsDet)) {
    throw NumericalError("singular matrix (log|det| = " + std::to_string(logdet) + ")");
  }
  const double rcond = lu.rcond();
  if (!(rcond * kMaxCondition >= 1.0)) {
    throw NumericalError("ill-conditioned matrix (condition estimate " +
                         std::to_string(1.0 / rcond) + ")");
  }
  if (logabsdet) *logabsdet = logdet;
  return lu;
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.size() != value->size() || grad.shape() != value->shape()) {
    grad = Tensor(value->shape(), 0.0);
  }
  return grad;
}

Tensor Var::grad() const {
  if (node_->grad.shape() == node_->value->shape() && node_->grad.size() == node_->value->size()) {
    return node_->grad;
  }
  return Tensor(node_->value->shape(), 0.0);
}

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::make_shared<const Tensor>(std::move(value));
  return Var(std::move(node));
}

Var variable(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::make_shared<const Tensor>(std::move(value));
  node->requires_grad = true;
  return Var(std::move(node));
}

Var leaf(std::shared_ptr<const Tensor> value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

void backward(const Var& root) {
  if (!root.defined() || root.value().size() != 1) {
    throw ShapeError("backward: root must be a single-element tensor, got " +
                     (root.defined() ? shape_string(root.shape()) : std::string("undefined")));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{&root.node(), 0}};
  seen.insert(&root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node().grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) {
      n->grad_buffer();
      n->backward(*n);
    }
  }
}

Var add(const Var& a, const Var& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Var div(const Var& a, const Var& b) {
  for (double v : b.value().values()) {
    if (v == 0.0) throw DomainError("div: division by zero");
  }
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double o) { return -o / y; });
}

Var neg(const Var& a) {
  return unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var scale(const Var& a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(const Var& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  for (double v : a.value().values()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
  }
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& a) {
  return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](double, double y) { return y * (1.0 - y); });
}

Var softplus(const Var& a) {
  return unary(
      a, [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& a, double alpha) {
  return unary(a, [alpha](double x) { return x >= 0 ? x : alpha * x; },
               [alpha](double x, double) { return x >= 0 ? 1.0 : alpha; });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool vec = bv.rank() == 1;
  const std::size_t k = av.cols();
  const std::size_t bk = vec ? bv.size() : bv.rows();
  const std::size_t m = vec ? 1 : bv.cols();
  if (k != bk) shape_fail("matmul", av, bv);
  Tensor out = vec ? Tensor(Shape{av.rows()}) : Tensor::matrix(av.rows(), m);
  MutMap(out.data(), av.rows(), m).noalias() =
      as_matrix(av) * ConstMap(bv.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m));
  return make_node(std::move(out), {&a, &b}, [k, m](Node& self) {
    const Tensor& av = parent_value(self, 0);
    const Tensor& bv = parent_value(self, 1);
    ConstMap g(self.grad.data(), av.rows(), m);
    ConstMap bm(bv.data(), k, m);
    if (Tensor* ga = parent_grad(self, 0)) as_matrix(*ga).noalias() += g * bm.transpose();
    if (Tensor* gb = parent_grad(self, 1)) {
      MutMap(gb->data(), k, m).noalias() += as_matrix(av).transpose() * g;
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  if (xv.cols() != wv.rows()) shape_fail("linear", xv, wv);
  if (bv.size() != wv.cols()) shape_fail("linear(bias)", wv, bv);
  const std::size_t rows = xv.rows(), out_cols = wv.cols();
  Tensor out = Tensor::matrix(rows, out_cols);
  auto om = as_matrix(out);
  om.noalias() = as_matrix(xv) * as_matrix(wv);
  om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.data(), out_cols);
  return make_node(std::move(out), {&x, &weight, &bias}, [](Node& self) {
    const Tensor& xv = parent_value(self, 0);
    const Tensor& wv = parent_value(self, 1);
    auto g = as_matrix(static_cast<const Tensor&>(self.grad));
    if (Tensor* gx = parent_grad(self, 0)) as_matrix(*gx).noalias() += g * as_matrix(wv).transpose();
    if (Tensor* gw = parent_grad(self, 1)) as_matrix(*gw).noalias() += as_matrix(xv).transpose() * g;
    if (Tensor* gb = parent_grad(self, 2)) {
      Eigen::Map<Eigen::RowVectorXd>(gb->data(), gb->size()) += g.colwise().sum();
    }
  });
}

Var softmax_rows(const Var& a) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    auto in = av.row(r);
    auto o = out.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) total += (o[c] = std::exp(in[c] - mx));
    for (double& v : o) v /= total;
  }
  return make_node(std::move(out), {&a}, [](Node& self) {
    const Tensor& y = *self.value;
    Tensor& ga = *parent_grad(self, 0);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row(r);
      auto gr = self.grad.row(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < yr.size(); ++c) dot += gr[c] * yr[c];
      auto out = ga.row(r);
      for (std::size_t c = 0; c < yr.size(); ++c) out[c] += yr[c] * (gr[c] - dot);
    }
  });
}

Var log_softmax_rows(const Var& a) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    auto in = av.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (double v : in) total += std::exp(v - mx);
    const double lse = mx + std::log(total);
    auto o = out.row(r);
    for (std::size_t c = 0; c < in.size(); ++c) o[c] = in[c] - lse;
  }
  return make_node(std::move(out), {&a}, [](Node& self) {
    const Tensor& y = *self.value;
    Tensor& ga = *parent_grad(self, 0);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row(r);
      auto gr = self.grad.row(r);
      double gsum = 0.0;
      for (double g : gr) gsum += g;
      auto out = ga.row(r);
      for (std::size_t c = 0; c < yr.size(); ++c) out[c] += gr[c] - std::exp(yr[c]) * gsum;
    }
  });
}

Var logsumexp_rows(const Var& a) {
  const Tensor& av = a.value();
  if (av.cols() == 0) throw ShapeError("logsumexp_rows: empty rows");
  Tensor out = Tensor::matrix(av.rows(), 1);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    auto in = av.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (double v : in) total += std::exp(v - mx);
    out[r] = mx + std::log(total);
  }
  return make_node(std::move(out), {&a}, [](Node& self) {
    const Tensor& av = parent_value(self, 0);
    Tensor& ga = *parent_grad(self, 0);
    for (std::size_t r = 0; r < av.rows(); ++r) {
      auto in = av.row(r);
      auto out = ga.row(r);
      const double lse = (*self.value)[r];
      for (std::size_t c = 0; c < in.size(); ++c) out[c] += self.grad[r] * std::exp(in[c] - lse);
    }
  });
}

Var logsumexp(const Var& a) {
  const Tensor& av = a.value();
  if (av.size() == 0) throw ShapeError("logsumexp: empty input");
  const double mx = *std::max_element(av.values().begin(), av.values().end());
  double total = 0.0;
  for (double v : av.values()) total += std::exp(v - mx);
  return make_node(Tensor::scalar(mx + std::log(total)), {&a}, [](Node& self) {
    const Tensor& av = parent_value(self, 0);
    Tensor& ga = *parent_grad(self, 0);
    const double lse = self.value->item();
    for (std::size_t i = 0; i < av.size(); ++i) ga[i] += self.grad[0] * std::exp(av[i] - lse);
  });
}

Var sum(const Var& a) {
  double total = 0.0;
  for (double v : a.value().values()) total += v;
  return make_node(Tensor::scalar(total), {&a}, [](Node& self) {
    Tensor& ga = *parent_grad(self, 0);
    for (double& g : ga.values()) g += self.grad[0];
  });
}

Var mean(const Var& a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var row_sum(const Var& a) {
  const Tensor& av = a.value();
  Tensor out = Tensor::matrix(av.rows(), 1);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    double s = 0.0;
    for (double v : av.row(r)) s += v;
    out[r] = s;
  }
  return make_node(std::move(out), {&a}, [](Node& self) {
    Tensor& ga = *parent_grad(self, 0);
    for (std::size_t r = 0; r < ga.rows(); ++r) {
      for (double& g : ga.row(r)) g += self.grad[r];
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) shape_fail("concat_cols", parts.front().value(), p.value());
    total += p.cols();
  }
  Tensor out = Tensor::matrix(rows, total);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(pv.row(r).begin(), pv.row(r).end(), out.data() + r * total + offset);
    }
    offset += pv.cols();
  }
  return make_node_list(std::move(out), parts, [total](Node& self) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      const std::size_t w = self.parents[i]->value->cols();
      if (Tensor* g = parent_grad(self, i)) {
        for (std::size_t r = 0; r < g->rows(); ++r) {
          const double* src = self.grad.data() + r * total + offset;
          auto dst = g->row(r);
          for (std::size_t c = 0; c < w; ++c) dst[c] += src[c];
        }
      }
      offset += w;
    }
  });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
  const Tensor& av = a.value();
  if (begin + count > av.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") exceeds " + std::to_string(av.cols()) +
                     " columns");
  }
  Tensor out = Tensor::matrix(av.rows(), count);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    std::copy_n(av.row(r).begin() + static_cast<std::ptrdiff_t>(begin), count, out.row(r).begin());
  }
  return make_node(std::move(out), {&a}, [begin, count](Node& self) {
    Tensor& ga = *parent_grad(self, 0);
    for (std::size_t r = 0; r < ga.rows(); ++r) {
      auto dst = ga.row(r);
      auto src = self.grad.row(r);
      for (std::size_t c = 0; c < count; ++c) dst[begin + c] += src[c];
    }
  });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t count) {
  const Tensor& av = a.value();
  if (av.rank() != 2 || begin + count > av.rows()) {
    throw ShapeError("slice_rows: range exceeds input " + shape_string(av.shape()));
  }
  const std::size_t cols = av.cols();
  Tensor out = Tensor::matrix(count, cols);
  std::copy_n(av.data() + begin * cols, count * cols, out.data());
  return make_node(std::move(out), {&a}, [begin, count, cols](Node& self) {
    Tensor& ga = *parent_grad(self, 0);
    for (std::size_t i = 0; i < count * cols; ++i) ga[begin * cols + i] += self.grad[i];
  });
}

Var slice_by_mask(const Var& a, std::span<const std::uint8_t> keep) {
  const Tensor& av = a.value();
  if (keep.size() != av.cols()) {
    throw ShapeError("slice_by_mask: mask length " + std::to_string(keep.size()) + " vs " +
                     std::to_string(av.cols()) + " columns");
  }
  RowIndex index;
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < keep.size(); ++c) {
    if (keep[c]) cols.push_back(c);
  }
  index.rows = av.rows();
  index.cols = cols.size();
  for (std::size_t r = 0; r < av.rows(); ++r) index.at.insert(index.at.end(), cols.begin(), cols.end());
  return gather_cols(a, index);
}

Var gather_cols(const Var& a, const RowIndex& index) {
  const Tensor& av = a.value();
  if (index.rows != av.rows()) {
    throw ShapeError("gather_cols: index has " + std::to_string(index.rows) + " rows, input " +
                     std::to_string(av.rows()));
  }
  Tensor out = Tensor::matrix(index.rows, index.cols);
  for (std::size_t r = 0; r < index.rows; ++r) {
    for (std::size_t c = 0; c < index.cols; ++c) {
      const std::size_t src = index(r, c);
      if (src >= av.cols()) throw ShapeError("gather_cols: column index out of range");
      out(r, c) = av(r, src);
    }
  }
  return make_node(std::move(out), {&a}, [index](Node& self) {
    Tensor& ga = *parent_grad(self, 0);
    for (std::size_t r = 0; r < index.rows; ++r) {
      for (std::size_t c = 0; c < index.cols; ++c) ga(r, index(r, c)) += self.grad(r, c);
    }
  });
}

Var scatter_cols(const Var& a, const RowIndex& index, std::size_t width) {
  const Tensor& av = a.value();
  if (index.rows != av.rows() || index.cols != av.cols()) {
    throw ShapeError("scatter_cols: index shape does not match input " + shape_string(av.shape()));
  }
  Tensor out = Tensor::matrix(index.rows, width);
  for (std::size_t r = 0; r < index.rows; ++r) {
    for (std::size_t c = 0; c < index.cols; ++c) {
      const std::size_t dst = index(r, c);
      if (dst >= width) throw ShapeError("scatter_cols: column index out of range");
      out(r, dst) += av(r, c);
    }
  }
  return make_node(std::move(out), {&a}, [index](Node& self) {
    Tensor& ga = *parent_grad(self, 0);
    for (std::size_t r = 0; r < index.rows; ++r) {
      for (std::size_t c = 0; c < index.cols; ++c) ga(r, c) += self.grad(r, index(r, c));
    }
  });
}

Var gather_submatrix(const Var& a, const RowIndex& index, std::size_t dim) {
  const Tensor& av = a.value();
  if (av.cols() != dim * dim || index.rows != av.rows()) {
    throw ShapeError("gather_submatrix: input " + shape_string(av.shape()) +
                     " is not a batch of " + std::to_string(dim) + "x" + std::to_string(dim) +
                     " matrices matching the index");
  }
  const std::size_t n = index.cols;
  Tensor out = Tensor::matrix(index.rows, n * n);
  for (std::size_t r = 0; r < index.rows; ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) out(r, i * n + j) = av(r, index(r, i) * dim + index(r, j));
    }
  }
  return make_node(std::move(out), {&a}, [index, dim, n](Node& self) {
    Tensor& ga = *parent_grad(self, 0);
    for (std::size_t r = 0; r < index.rows; ++r) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          ga(r, index(r, i) * dim + index(r, j)) += self.grad(r, i * n + j);
        }
      }
    }
  });
}

Var batched_matvec(const Var& w, const Var& x) {
  const Tensor& wv = w.value();
  const Tensor& xv = x.value();
  std::size_t n = 0;
  check_batched_square("batched_matvec", wv, n);
  if (wv.rows() != xv.rows() || xv.cols() != n) shape_fail("batched_matvec", wv, xv);
  Tensor out = Tensor::matrix(xv.rows(), n);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    Eigen::Map<Eigen::VectorXd>(out.data() + r * n, n).noalias() =
        ConstMap(wv.data() + r * n * n, n, n) *
        Eigen::Map<const Eigen::VectorXd>(xv.data() + r * n, n);
  }
  return make_node(std::move(out), {&w, &x}, [n](Node& self) {
    const Tensor& wv = parent_value(self, 0);
    const Tensor& xv = parent_value(self, 1);
    Tensor* gw = parent_grad(self, 0);
    Tensor* gx = parent_grad(self, 1);
    for (std::size_t r = 0; r < xv.rows(); ++r) {
      Eigen::Map<const Eigen::VectorXd> g(self.grad.data() + r * n, n);
      Eigen::Map<const Eigen::VectorXd> xr(xv.data() + r * n, n);
      if (gw) MutMap(gw->data() + r * n * n, n, n).noalias() += g * xr.transpose();
      if (gx) {
        Eigen::Map<Eigen::VectorXd>(gx->data() + r * n, n).noalias() +=
            ConstMap(wv.data() + r * n * n, n, n).transpose() * g;
      }
    }
  });
}

Var batched_matmul(const Var& a, const Var& b, std::size_t n, std::size_t k, std::size_t m) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != n * k || bv.cols() != k * m || av.rows() != bv.rows()) {
    shape_fail("batched_matmul", av, bv);
  }
  Tensor out = Tensor::matrix(av.rows(), n * m);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    MutMap(out.data() + r * n * m, n, m).noalias() =
        ConstMap(av.data() + r * n * k, n, k) * ConstMap(bv.data() + r * k * m, k, m);
  }
  return make_node(std::move(out), {&a, &b}, [n, k, m](Node& self) {
    const Tensor& av = parent_value(self, 0);
    const Tensor& bv = parent_value(self, 1);
    Tensor* ga = parent_grad(self, 0);
    Tensor* gb = parent_grad(self, 1);
    for (std::size_t r = 0; r < av.rows(); ++r) {
      ConstMap g(self.grad.data() + r * n * m, n, m);
      if (ga) {
        MutMap(ga->data() + r * n * k, n, k).noalias() +=
            g * ConstMap(bv.data() + r * k * m, k, m).transpose();
      }
      if (gb) {
        MutMap(gb->data() + r * k * m, k, m).noalias() +=
            ConstMap(av.data() + r * n * k, n, k).transpose() * g;
      }
    }
  });
}

Var batched_solve(const Var& w, const Var& y) {
  const Tensor& wv = w.value();
  const Tensor& yv = y.value();
  std::size_t n = 0;
  check_batched_square("batched_solve", wv, n);
  if (wv.rows() != yv.rows() || yv.cols() != n) shape_fail("batched_solve", wv, yv);
  Tensor out = Tensor::matrix(yv.rows(), n);
  // Row-major inverses, kept for the backward pass.
  auto inverses = std::make_shared<Tensor>(Tensor::matrix(yv.rows(), n * n));
  for (std::size_t r = 0; r < yv.rows(); ++r) {
    if (n == 0) continue;
    auto lu = checked_lu(wv, r, n, nullptr);
    Eigen::MatrixXd inv = lu.inverse();
    MutMap(inverses->data() + r * n * n, n, n) = inv;
    Eigen::Map<Eigen::VectorXd>(out.data() + r * n, n).noalias() =
        inv * Eigen::Map<const Eigen::VectorXd>(yv.data() + r * n, n);
  }
  return make_node(std::move(out), {&w, &y}, [n, inverses](Node& self) {
    const Tensor& xv = *self.value;
    Tensor* gw = parent_grad(self, 0);
    Tensor* gy = parent_grad(self, 1);
    for (std::size_t r = 0; r < xv.rows(); ++r) {
      Eigen::Map<const Eigen::VectorXd> g(self.grad.data() + r * n, n);
      Eigen::VectorXd gy_r = ConstMap(inverses->data() + r * n * n, n, n).transpose() * g;
      if (gy) Eigen::Map<Eigen::VectorXd>(gy->data() + r * n, n) += gy_r;
      if (gw) {
        Eigen::Map<const Eigen::VectorXd> xr(xv.data() + r * n, n);
        MutMap(gw->data() + r * n * n, n, n).noalias() -= gy_r * xr.transpose();
      }
    }
  });
}

Var batched_logabsdet(const Var& w) {
  const Tensor& wv = w.value();
  std::size_t n = 0;
  check_batched_square("batched_logabsdet", wv, n);
  Tensor out = Tensor::matrix(wv.rows(), 1);
  auto inverse_t = std::make_shared<Tensor>(Tensor::matrix(wv.rows(), n * n));
  for (std::size_t r = 0; r < wv.rows(); ++r) {
    if (n == 0) continue;
    double logdet = 0.0;
    auto lu = checked_lu(wv, r, n, &logdet);
    out[r] = logdet;
    MutMap(inverse_t->data() + r * n * n, n, n) = lu.inverse().transpose();
  }
  return make_node(std::move(out), {&w}, [n, inverse_t](Node& self) {
    Tensor& gw = *parent_grad(self, 0);
    for (std::size_t r = 0; r < gw.rows(); ++r) {
      const double g = self.grad[r];
      for (std::size_t i = 0; i < n * n; ++i) gw(r, i) += g * (*inverse_t)(r, i);
    }
  });
}

Var gru_step(const Var& x_proj, const Var& h_prev, const Var& w_hidden, const Var& b_hidden) {
  const Tensor& xp = x_proj.value();
  const Tensor& hv = h_prev.value();
  const Tensor& wh = w_hidden.value();
  const Tensor& bh = b_hidden.value();
  const std::size_t rows = hv.rows(), hidden = hv.cols();
  if (xp.rows() != rows || xp.cols() != 3 * hidden) shape_fail("gru_step(input)", xp, hv);
  if (wh.rows() != hidden || wh.cols() != 3 * hidden) shape_fail("gru_step(w_hidden)", wh, hv);
  if (bh.size() != 3 * hidden) shape_fail("gru_step(b_hidden)", bh, hv);

  // hp = h W_hh + b_hh, gates = (r, u, n) stored side by side.
  auto hp = std::make_shared<Tensor>(Tensor::matrix(rows, 3 * hidden));
  auto gates = std::make_shared<Tensor>(Tensor::matrix(rows, 3 * hidden));
  as_matrix(*hp).noalias() = as_matrix(hv) * as_matrix(wh);
  as_matrix(*hp).rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bh.data(), 3 * hidden);
  Tensor out = Tensor::matrix(rows, hidden);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = xp.data() + r * 3 * hidden;
    const double* p = hp->data() + r * 3 * hidden;
    double* gt = gates->data() + r * 3 * hidden;
    const double* h = hv.data() + r * hidden;
    double* o = out.data() + r * hidden;
    for (std::size_t j = 0; j < hidden; ++j) {
      const double rg = 1.0 / (1.0 + std::exp(-(x[j] + p[j])));
      const double ug = 1.0 / (1.0 + std::exp(-(x[hidden + j] + p[hidden + j])));
      const double ng = std::tanh(x[2 * hidden + j] + rg * p[2 * hidden + j]);
      gt[j] = rg;
      gt[hidden + j] = ug;
      gt[2 * hidden + j] = ng;
      o[j] = ng + ug * (h[j] - ng);
    }
  }
  return make_node(std::move(out), {&x_proj, &h_prev, &w_hidden, &b_hidden},
                   [hp, gates, rows, hidden](Node& self) {
    const Tensor& hv = parent_value(self, 1);
    const Tensor& wh = parent_value(self, 2);
    Tensor d_pre = Tensor::matrix(rows, 3 * hidden);  // d wrt x_proj
    Tensor d_hp = Tensor::matrix(rows, 3 * hidden);   // d wrt h W_hh + b_hh
    Tensor* gh = parent_grad(self, 1);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = self.grad.data() + r * hidden;
      const double* gt = gates->data() + r * 3 * hidden;
      const double* p = hp->data() + r * 3 * hidden;
      const double* h = hv.data() + r * hidden;
      double* dx = d_pre.data() + r * 3 * hidden;
      double* dp = d_hp.data() + r * 3 * hidden;
      for (std::size_t j = 0; j < hidden; ++j) {
        const double rg = gt[j], ug = gt[hidden + j], ng = gt[2 * hidden + j];
        const double dn = g[j] * (1.0 - ug) * (1.0 - ng * ng);
        const double du = g[j] * (h[j] - ng) * ug * (1.0 - ug);
        const double dr = dn * p[2 * hidden + j] * rg * (1.0 - rg);
        dx[j] = dr;
        dx[hidden + j] = du;
        dx[2 * hidden + j] = dn;
        dp[j] = dr;
        dp[hidden + j] = du;
        dp[2 * hidden + j] = dn * rg;
        if (gh) (*gh)(r, j) += g[j] * ug;
      }
    }
    if (Tensor* gx = parent_grad(self, 0)) as_matrix(*gx) += as_matrix(d_pre);
    if (gh) as_matrix(*gh).noalias() += as_matrix(d_hp) * as_matrix(wh).transpose();
    if (Tensor* gw = parent_grad(self, 2)) as_matrix(*gw).noalias() += as_matrix(hv).transpose() * as_matrix(d_hp);
    if (Tensor* gb = parent_grad(self, 3)) {
      Eigen::Map<Eigen::RowVectorXd>(gb->data(), gb->size()) += as_matrix(d_hp).colwise().sum();
    }
  });
}

}  // namespace acflow::ad
