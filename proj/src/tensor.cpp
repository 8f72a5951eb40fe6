#include "hcvc/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace hcvc {

namespace {

using Node = detail::TensorNode;
using NodePtr = std::shared_ptr<Node>;
using EigenMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const EigenMat>;
using MutMap = Eigen::Map<EigenMat>;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

NodePtr make_node(int rows, int cols) {
  if (rows <= 0 || cols <= 0) {
    throw std::invalid_argument("tensor shape must be positive, got " +
                                std::to_string(rows) + "x" + std::to_string(cols));
  }
  auto n = std::make_shared<Node>();
  n->shape = {rows, cols};
  n->data.assign(static_cast<size_t>(rows) * cols, 0.0);
  return n;
}

[[noreturn]] void shape_error(const std::string& op, const Tensor& a) {
  throw std::invalid_argument(op + ": bad shape " + std::to_string(a.rows()) +
                              "x" + std::to_string(a.cols()));
}

[[noreturn]] void shape_error2(const std::string& op, const Tensor& a, const Tensor& b) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << a.rows() << "x" << a.cols() << " and "
     << b.rows() << "x" << b.cols();
  throw std::invalid_argument(os.str());
}

}  // namespace

struct TensorOps {
  static const NodePtr& node(const Tensor& t) {
    if (!t.defined()) throw std::invalid_argument("undefined tensor used in op");
    return t.node_;
  }
  static Tensor wrap(NodePtr n) { return Tensor(std::move(n)); }

  // Links `out` into the graph when any input needs gradients.
  static void link(const NodePtr& out, std::vector<NodePtr> parents,
                   std::function<void(Node&)> backward) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || p->requires_grad;
    if (!needs) return;
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward = std::move(backward);
  }
};

namespace {

const NodePtr& node_of(const Tensor& t) { return TensorOps::node(t); }

ConstMap cmap(const Node& n) { return ConstMap(n.data.data(), n.shape[0], n.shape[1]); }
ConstMap gmap(const Node& n) { return ConstMap(n.grad.data(), n.shape[0], n.shape[1]); }
MutMap gmap_mut(Node& n) {
  n.ensure_grad();
  return MutMap(n.grad.data(), n.shape[0], n.shape[1]);
}
MutMap dmap_mut(Node& n) { return MutMap(n.data.data(), n.shape[0], n.shape[1]); }

}  // namespace

// ---- Tensor basics ----------------------------------------------------------

Tensor Tensor::zeros(int rows, int cols) { return TensorOps::wrap(make_node(rows, cols)); }

Tensor Tensor::full(int rows, int cols, double value) {
  auto n = make_node(rows, cols);
  std::fill(n->data.begin(), n->data.end(), value);
  return TensorOps::wrap(std::move(n));
}

Tensor Tensor::from_data(int rows, int cols, std::vector<double> data) {
  auto n = make_node(rows, cols);
  if (data.size() != n->data.size()) {
    throw std::invalid_argument("from_data: " + std::to_string(data.size()) +
                                " values for shape " + std::to_string(rows) + "x" +
                                std::to_string(cols));
  }
  n->data = std::move(data);
  return TensorOps::wrap(std::move(n));
}

Tensor Tensor::scalar(double value) { return full(1, 1, value); }

int Tensor::rows() const { return node_ ? node_->shape[0] : 0; }
int Tensor::cols() const { return node_ ? node_->shape[1] : 0; }
int64_t Tensor::size() const { return node_ ? static_cast<int64_t>(node_->data.size()) : 0; }

const std::vector<int>& Tensor::shape() const {
  static const std::vector<int> kEmpty;
  return node_ ? node_->shape : kEmpty;
}

double Tensor::at(int r, int c) const {
  if (!node_ || r < 0 || r >= rows() || c < 0 || c >= cols()) {
    throw std::out_of_range("Tensor::at(" + std::to_string(r) + "," + std::to_string(c) + ")");
  }
  return node_->data[static_cast<size_t>(r) * cols() + c];
}

double Tensor::value() const {
  if (size() != 1) throw std::invalid_argument("Tensor::value on non-scalar tensor");
  return node_->data[0];
}

std::span<const double> Tensor::data() const {
  if (!node_) return {};
  return {node_->data.data(), node_->data.size()};
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw std::invalid_argument("mutable_data on undefined tensor");
  return {node_->data.data(), node_->data.size()};
}

std::span<const double> Tensor::grad() const {
  if (!node_ || node_->grad.empty()) return {};
  return {node_->grad.data(), node_->grad.size()};
}

std::span<double> Tensor::mutable_grad() {
  if (!node_) throw std::invalid_argument("mutable_grad on undefined tensor");
  node_->ensure_grad();
  return {node_->grad.data(), node_->grad.size()};
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

void Tensor::set_requires_grad(bool v) {
  if (!node_) throw std::invalid_argument("set_requires_grad on undefined tensor");
  node_->requires_grad = v;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detached() const {
  if (!node_) return Tensor();
  return from_data(rows(), cols(), node_->data);
}

bool Tensor::all_finite() const {
  if (!node_) return true;
  for (double v : node_->data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::backward() const {
  if (size() != 1) throw std::invalid_argument("backward requires a scalar loss tensor");
  if (!node_->requires_grad) return;  // nothing trainable upstream

  // Iterative post-order DFS, then run backwards so every consumer's
  // contribution lands before a node propagates to its parents.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* n;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({node_.get(), 0});
  visited.insert(node_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.n->parents.size()) {
      Node* p = f.n->parents[f.next_parent++].get();
      if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) {
      n->ensure_grad();  // consumers may have skipped this node entirely
      n->backward(*n);
    }
  }
}

// ---- elementwise helpers ----------------------------------------------------

namespace {

Tensor unary_op(const Tensor& a, const std::function<double(double)>& fwd,
                const std::function<double(double x, double y)>& dfdx) {
  const NodePtr& an = node_of(a);
  auto out = make_node(a.rows(), a.cols());
  for (size_t i = 0; i < an->data.size(); ++i) out->data[i] = fwd(an->data[i]);
  TensorOps::link(out, {an}, [an, dfdx](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < self.data.size(); ++i) {
      an->grad[i] += self.grad[i] * dfdx(an->data[i], self.data[i]);
    }
  });
  return TensorOps::wrap(std::move(out));
}

void check_same_shape(const std::string& op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error2(op, a, b);
}

}  // namespace

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const NodePtr& an = node_of(a);
  const NodePtr& bn = node_of(b);
  if (a.cols() != b.rows()) shape_error2("matmul", a, b);
  auto out = make_node(a.rows(), b.cols());
  MutMap(out->data.data(), a.rows(), b.cols()) = cmap(*an) * cmap(*bn);
  TensorOps::link(out, {an, bn}, [an, bn](Node& self) {
    ConstMap dc(self.grad.data(), self.shape[0], self.shape[1]);
    if (an->requires_grad) gmap_mut(*an) += dc * cmap(*bn).transpose();
    if (bn->requires_grad) gmap_mut(*bn) += cmap(*an).transpose() * dc;
  });
  return TensorOps::wrap(std::move(out));
}

Tensor transpose(const Tensor& a) {
  const NodePtr& an = node_of(a);
  auto out = make_node(a.cols(), a.rows());
  MutMap(out->data.data(), a.cols(), a.rows()) = cmap(*an).transpose();
  TensorOps::link(out, {an}, [an](Node& self) {
    if (!an->requires_grad) return;
    gmap_mut(*an) += ConstMap(self.grad.data(), self.shape[0], self.shape[1]).transpose();
  });
  return TensorOps::wrap(std::move(out));
}

// ---- arithmetic ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  const NodePtr& an = node_of(a);
  const NodePtr& bn = node_of(b);
  auto out = make_node(a.rows(), a.cols());
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = an->data[i] + bn->data[i];
  TensorOps::link(out, {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
    }
  });
  return TensorOps::wrap(std::move(out));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  const NodePtr& an = node_of(a);
  const NodePtr& bn = node_of(b);
  auto out = make_node(a.rows(), a.cols());
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = an->data[i] - bn->data[i];
  TensorOps::link(out, {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
    }
  });
  return TensorOps::wrap(std::move(out));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  const NodePtr& an = node_of(a);
  const NodePtr& bn = node_of(b);
  auto out = make_node(a.rows(), a.cols());
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = an->data[i] * bn->data[i];
  TensorOps::link(out, {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->data[i];
    }
  });
  return TensorOps::wrap(std::move(out));
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape("div", a, b);
  const NodePtr& an = node_of(a);
  const NodePtr& bn = node_of(b);
  auto out = make_node(a.rows(), a.cols());
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = an->data[i] / bn->data[i];
  TensorOps::link(out, {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] / bn->data[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) {
        bn->grad[i] -= self.grad[i] * an->data[i] / (bn->data[i] * bn->data[i]);
      }
    }
  });
  return TensorOps::wrap(std::move(out));
}

namespace {

// Subgradient convention at ties: the first argument wins.
Tensor min_max_op(const Tensor& a, const Tensor& b, bool take_min) {
  check_same_shape(take_min ? "minimum" : "maximum", a, b);
  const NodePtr& an = node_of(a);
  const NodePtr& bn = node_of(b);
  auto out = make_node(a.rows(), a.cols());
  for (size_t i = 0; i < out->data.size(); ++i) {
    const double x = an->data[i], y = bn->data[i];
    out->data[i] = take_min ? (x <= y ? x : y) : (x >= y ? x : y);
  }
  TensorOps::link(out, {an, bn}, [an, bn, take_min](Node& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const double x = an->data[i], y = bn->data[i];
      const bool pick_a = take_min ? (x <= y) : (x >= y);
      NodePtr target = pick_a ? an : bn;
      if (!target->requires_grad) continue;
      target->ensure_grad();
      target->grad[i] += self.grad[i];
    }
  });
  return TensorOps::wrap(std::move(out));
}

}  // namespace

Tensor minimum(const Tensor& a, const Tensor& b) { return min_max_op(a, b, true); }
Tensor maximum(const Tensor& a, const Tensor& b) { return min_max_op(a, b, false); }

Tensor scale(const Tensor& a, double c) {
  return unary_op(a, [c](double x) { return x * c; },
                  [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(a, [c](double x) { return x + c; },
                  [](double, double) { return 1.0; });
}

Tensor add_row_broadcast(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) shape_error2("add_row_broadcast", a, row);
  const NodePtr& an = node_of(a);
  const NodePtr& rn = node_of(row);
  auto out = make_node(a.rows(), a.cols());
  const int c = a.cols();
  for (int r = 0; r < a.rows(); ++r) {
    for (int j = 0; j < c; ++j) {
      out->data[static_cast<size_t>(r) * c + j] =
          an->data[static_cast<size_t>(r) * c + j] + rn->data[j];
    }
  }
  TensorOps::link(out, {an, rn}, [an, rn](Node& self) {
    const int rows = self.shape[0], cols = self.shape[1];
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (rn->requires_grad) {
      rn->ensure_grad();
      for (int r = 0; r < rows; ++r) {
        for (int j = 0; j < cols; ++j) {
          rn->grad[j] += self.grad[static_cast<size_t>(r) * cols + j];
        }
      }
    }
  });
  return TensorOps::wrap(std::move(out));
}

Tensor mul_by_scalar_tensor(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) shape_error("mul_by_scalar_tensor: scalar operand", s);
  const NodePtr& an = node_of(a);
  const NodePtr& sn = node_of(s);
  auto out = make_node(a.rows(), a.cols());
  const double sv = sn->data[0];
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = an->data[i] * sv;
  TensorOps::link(out, {an, sn}, [an, sn](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * sn->data[0];
    }
    if (sn->requires_grad) {
      sn->ensure_grad();
      double acc = 0.0;
      for (size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * an->data[i];
      sn->grad[0] += acc;
    }
  });
  return TensorOps::wrap(std::move(out));
}

// ---- nonlinearities ----------------------------------------------------

Tensor relu(const Tensor& a) {
  return unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor abs_elem(const Tensor& a) {
  return unary_op(a, [](double x) { return std::abs(x); },
                  [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor gelu(const Tensor& a) {
  return unary_op(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a,
      [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp_elem(const Tensor& a) {
  return unary_op(a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}

Tensor softmax_rows(const Tensor& a) {
  const NodePtr& an = node_of(a);
  const int rows = a.rows(), cols = a.cols();
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const double v = an->data[static_cast<size_t>(r) * cols + c];
      if (!std::isfinite(v)) {
        std::ostringstream os;
        os << "softmax_rows: non-finite input " << v << " at (" << r << "," << c << ")";
        throw std::invalid_argument(os.str());
      }
    }
  }
  auto out = make_node(rows, cols);
  for (int r = 0; r < rows; ++r) {
    const double* x = &an->data[static_cast<size_t>(r) * cols];
    double* y = &out->data[static_cast<size_t>(r) * cols];
    double m = x[0];
    for (int c = 1; c < cols; ++c) m = std::max(m, x[c]);
    double z = 0.0;
    for (int c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - m);
      z += y[c];
    }
    for (int c = 0; c < cols; ++c) y[c] /= z;
  }
  TensorOps::link(out, {an}, [an](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const int rows = self.shape[0], cols = self.shape[1];
    for (int r = 0; r < rows; ++r) {
      const double* y = &self.data[static_cast<size_t>(r) * cols];
      const double* dy = &self.grad[static_cast<size_t>(r) * cols];
      double dot = 0.0;
      for (int c = 0; c < cols; ++c) dot += dy[c] * y[c];
      double* dx = &an->grad[static_cast<size_t>(r) * cols];
      for (int c = 0; c < cols; ++c) dx[c] += y[c] * (dy[c] - dot);
    }
  });
  return TensorOps::wrap(std::move(out));
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const int rows = x.rows(), cols = x.cols();
  if (gain.rows() != 1 || gain.cols() != cols) shape_error2("layer_norm_rows gain", x, gain);
  if (bias.rows() != 1 || bias.cols() != cols) shape_error2("layer_norm_rows bias", x, bias);
  constexpr double kEps = 1e-6;
  const NodePtr& xn = node_of(x);
  const NodePtr& gn = node_of(gain);
  const NodePtr& bn = node_of(bias);
  auto out = make_node(rows, cols);

  // xhat and 1/sigma are captured for the backward pass.
  auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(rows) * cols);
  auto inv_sigma = std::make_shared<std::vector<double>>(rows);
  for (int r = 0; r < rows; ++r) {
    const double* xi = &xn->data[static_cast<size_t>(r) * cols];
    double mu = 0.0;
    for (int c = 0; c < cols; ++c) mu += xi[c];
    mu /= cols;
    double var = 0.0;
    for (int c = 0; c < cols; ++c) var += (xi[c] - mu) * (xi[c] - mu);
    var /= cols;
    const double is = 1.0 / std::sqrt(var + kEps);
    (*inv_sigma)[r] = is;
    for (int c = 0; c < cols; ++c) {
      const double h = (xi[c] - mu) * is;
      (*xhat)[static_cast<size_t>(r) * cols + c] = h;
      out->data[static_cast<size_t>(r) * cols + c] = h * gn->data[c] + bn->data[c];
    }
  }
  TensorOps::link(out, {xn, gn, bn}, [xn, gn, bn, xhat, inv_sigma](Node& self) {
    const int rows = self.shape[0], cols = self.shape[1];
    for (int r = 0; r < rows; ++r) {
      const double* dy = &self.grad[static_cast<size_t>(r) * cols];
      const double* h = &(*xhat)[static_cast<size_t>(r) * cols];
      if (gn->requires_grad) {
        gn->ensure_grad();
        for (int c = 0; c < cols; ++c) gn->grad[c] += dy[c] * h[c];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int c = 0; c < cols; ++c) bn->grad[c] += dy[c];
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        double mean_dh = 0.0, mean_dhh = 0.0;
        for (int c = 0; c < cols; ++c) {
          const double dh = dy[c] * gn->data[c];
          mean_dh += dh;
          mean_dhh += dh * h[c];
        }
        mean_dh /= cols;
        mean_dhh /= cols;
        double* dx = &xn->grad[static_cast<size_t>(r) * cols];
        const double is = (*inv_sigma)[r];
        for (int c = 0; c < cols; ++c) {
          const double dh = dy[c] * gn->data[c];
          dx[c] += is * (dh - mean_dh - h[c] * mean_dhh);
        }
      }
    }
  });
  return TensorOps::wrap(std::move(out));
}

Tensor l2_normalize_rows(const Tensor& a) {
  const NodePtr& an = node_of(a);
  const int rows = a.rows(), cols = a.cols();
  constexpr double kEps2 = 1e-24;  // keeps unit rows unit to ~1e-24
  auto out = make_node(rows, cols);
  auto inv_norm = std::make_shared<std::vector<double>>(rows);
  for (int r = 0; r < rows; ++r) {
    const double* x = &an->data[static_cast<size_t>(r) * cols];
    double ss = 0.0;
    for (int c = 0; c < cols; ++c) ss += x[c] * x[c];
    const double in = 1.0 / std::sqrt(ss + kEps2);
    (*inv_norm)[r] = in;
    for (int c = 0; c < cols; ++c) out->data[static_cast<size_t>(r) * cols + c] = x[c] * in;
  }
  TensorOps::link(out, {an}, [an, inv_norm](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const int rows = self.shape[0], cols = self.shape[1];
    for (int r = 0; r < rows; ++r) {
      const double* y = &self.data[static_cast<size_t>(r) * cols];
      const double* dy = &self.grad[static_cast<size_t>(r) * cols];
      double dot = 0.0;
      for (int c = 0; c < cols; ++c) dot += dy[c] * y[c];
      double* dx = &an->grad[static_cast<size_t>(r) * cols];
      const double in = (*inv_norm)[r];
      for (int c = 0; c < cols; ++c) dx[c] += (dy[c] - y[c] * dot) * in;
    }
  });
  return TensorOps::wrap(std::move(out));
}

// ---- shape surgery -------------------------------------------------------

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const int cols = parts[0].cols();
  int rows = 0;
  std::vector<NodePtr> nodes;
  for (const Tensor& p : parts) {
    if (p.cols() != cols) shape_error2("concat_rows", parts[0], p);
    rows += p.rows();
    nodes.push_back(node_of(p));
  }
  auto out = make_node(rows, cols);
  size_t off = 0;
  for (const auto& n : nodes) {
    std::copy(n->data.begin(), n->data.end(), out->data.begin() + off);
    off += n->data.size();
  }
  TensorOps::link(out, nodes, [nodes](Node& self) {
    size_t off = 0;
    for (const auto& n : nodes) {
      if (n->requires_grad) {
        n->ensure_grad();
        for (size_t i = 0; i < n->data.size(); ++i) n->grad[i] += self.grad[off + i];
      }
      off += n->data.size();
    }
  });
  return TensorOps::wrap(std::move(out));
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const int rows = parts[0].rows();
  int cols = 0;
  std::vector<NodePtr> nodes;
  for (const Tensor& p : parts) {
    if (p.rows() != rows) shape_error2("concat_cols", parts[0], p);
    cols += p.cols();
    nodes.push_back(node_of(p));
  }
  auto out = make_node(rows, cols);
  for (int r = 0; r < rows; ++r) {
    int c0 = 0;
    for (const auto& n : nodes) {
      const int pc = n->shape[1];
      std::copy(n->data.begin() + static_cast<size_t>(r) * pc,
                n->data.begin() + static_cast<size_t>(r + 1) * pc,
                out->data.begin() + static_cast<size_t>(r) * cols + c0);
      c0 += pc;
    }
  }
  TensorOps::link(out, nodes, [nodes](Node& self) {
    const int rows = self.shape[0], cols = self.shape[1];
    int c0 = 0;
    for (const auto& n : nodes) {
      const int pc = n->shape[1];
      if (n->requires_grad) {
        n->ensure_grad();
        for (int r = 0; r < rows; ++r) {
          for (int c = 0; c < pc; ++c) {
            n->grad[static_cast<size_t>(r) * pc + c] +=
                self.grad[static_cast<size_t>(r) * cols + c0 + c];
          }
        }
      }
      c0 += pc;
    }
  });
  return TensorOps::wrap(std::move(out));
}

Tensor slice_rows(const Tensor& a, int first, int count) {
  const NodePtr& an = node_of(a);
  if (first < 0 || count <= 0 || first + count > a.rows()) {
    throw std::invalid_argument("slice_rows: range [" + std::to_string(first) + "," +
                                std::to_string(first + count) + ") of " +
                                std::to_string(a.rows()) + " rows");
  }
  const int cols = a.cols();
  auto out = make_node(count, cols);
  std::copy(an->data.begin() + static_cast<size_t>(first) * cols,
            an->data.begin() + static_cast<size_t>(first + count) * cols, out->data.begin());
  TensorOps::link(out, {an}, [an, first](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const int cols = self.shape[1];
    const size_t base = static_cast<size_t>(first) * cols;
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[base + i] += self.grad[i];
  });
  return TensorOps::wrap(std::move(out));
}

Tensor slice_cols(const Tensor& a, int first, int count) {
  const NodePtr& an = node_of(a);
  if (first < 0 || count <= 0 || first + count > a.cols()) {
    throw std::invalid_argument("slice_cols: range [" + std::to_string(first) + "," +
                                std::to_string(first + count) + ") of " +
                                std::to_string(a.cols()) + " cols");
  }
  const int rows = a.rows(), cols = a.cols();
  auto out = make_node(rows, count);
  for (int r = 0; r < rows; ++r) {
    std::copy(an->data.begin() + static_cast<size_t>(r) * cols + first,
              an->data.begin() + static_cast<size_t>(r) * cols + first + count,
              out->data.begin() + static_cast<size_t>(r) * count);
  }
  TensorOps::link(out, {an}, [an, first, cols](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const int rows = self.shape[0], count = self.shape[1];
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < count; ++c) {
        an->grad[static_cast<size_t>(r) * cols + first + c] +=
            self.grad[static_cast<size_t>(r) * count + c];
      }
    }
  });
  return TensorOps::wrap(std::move(out));
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& indices) {
  const NodePtr& an = node_of(a);
  if (indices.empty()) throw std::invalid_argument("gather_rows: empty index list");
  for (int idx : indices) {
    if (idx < 0 || idx >= a.rows()) {
      throw std::invalid_argument("gather_rows: index " + std::to_string(idx) +
                                  " out of " + std::to_string(a.rows()) + " rows");
    }
  }
  const int cols = a.cols();
  auto out = make_node(static_cast<int>(indices.size()), cols);
  for (size_t k = 0; k < indices.size(); ++k) {
    std::copy(an->data.begin() + static_cast<size_t>(indices[k]) * cols,
              an->data.begin() + static_cast<size_t>(indices[k] + 1) * cols,
              out->data.begin() + k * cols);
  }
  TensorOps::link(out, {an}, [an, indices](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const int cols = self.shape[1];
    for (size_t k = 0; k < indices.size(); ++k) {
      for (int c = 0; c < cols; ++c) {
        an->grad[static_cast<size_t>(indices[k]) * cols + c] += self.grad[k * cols + c];
      }
    }
  });
  return TensorOps::wrap(std::move(out));
}

// ---- reductions & losses --------------------------------------------------

Tensor sum_all(const Tensor& a) {
  const NodePtr& an = node_of(a);
  auto out = make_node(1, 1);
  double acc = 0.0;
  for (double v : an->data) acc += v;
  out->data[0] = acc;
  TensorOps::link(out, {an}, [an](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const double g = self.grad[0];
    for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
  });
  return TensorOps::wrap(std::move(out));
}

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.size())); }

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                             const std::vector<double>& weights, double norm) {
  const NodePtr& ln = node_of(logits);
  const int rows = logits.rows(), cols = logits.cols();
  if (static_cast<int>(targets.size()) != rows || static_cast<int>(weights.size()) != rows) {
    throw std::invalid_argument("softmax_cross_entropy: target/weight count != rows");
  }
  if (norm <= 0.0) throw std::invalid_argument("softmax_cross_entropy: norm must be positive");
  for (int t : targets) {
    if (t < 0 || t >= cols) {
      throw std::invalid_argument("softmax_cross_entropy: target " + std::to_string(t) +
                                  " out of " + std::to_string(cols) + " classes");
    }
  }
  auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(rows) * cols);
  auto out = make_node(1, 1);
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    const double* z = &ln->data[static_cast<size_t>(r) * cols];
    double m = z[0];
    for (int c = 1; c < cols; ++c) m = std::max(m, z[c]);
    double sum = 0.0;
    for (int c = 0; c < cols; ++c) sum += std::exp(z[c] - m);
    const double lse = m + std::log(sum);
    for (int c = 0; c < cols; ++c) {
      (*probs)[static_cast<size_t>(r) * cols + c] = std::exp(z[c] - lse);
    }
    total += weights[r] * (lse - z[targets[r]]);
  }
  out->data[0] = total / norm;
  TensorOps::link(out, {ln}, [ln, probs, targets, weights, norm](Node& self) {
    if (!ln->requires_grad) return;
    ln->ensure_grad();
    const double g = self.grad[0] / norm;
    const int cols = ln->shape[1];
    for (size_t r = 0; r < targets.size(); ++r) {
      const double w = weights[r] * g;
      for (int c = 0; c < cols; ++c) {
        double p = (*probs)[r * cols + c];
        if (c == targets[r]) p -= 1.0;
        ln->grad[r * cols + c] += w * p;
      }
    }
  });
  return TensorOps::wrap(std::move(out));
}

Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& targets) {
  check_same_shape("bce_with_logits_mean", logits, targets);
  const NodePtr& ln = node_of(logits);
  const NodePtr& tn = node_of(targets);
  auto out = make_node(1, 1);
  const double inv_n = 1.0 / static_cast<double>(logits.size());
  double total = 0.0;
  for (size_t i = 0; i < ln->data.size(); ++i) {
    const double z = ln->data[i], t = tn->data[i];
    total += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
  }
  out->data[0] = total * inv_n;
  TensorOps::link(out, {ln, tn}, [ln, tn, inv_n](Node& self) {
    if (!ln->requires_grad) return;
    ln->ensure_grad();
    const double g = self.grad[0] * inv_n;
    for (size_t i = 0; i < ln->data.size(); ++i) {
      const double z = ln->data[i];
      const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      ln->grad[i] += g * (s - tn->data[i]);
    }
  });
  return TensorOps::wrap(std::move(out));
}

}  // namespace hcvc
