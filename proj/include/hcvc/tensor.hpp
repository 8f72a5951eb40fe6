#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace hcvc {

namespace detail {

struct TensorNode {
  std::vector<int> shape;  // {rows, cols}
  std::vector<double> data;
  std::vector<double> grad;  // empty until first needed
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

/// Dense row-major matrix of 64-bit floats with an optional gradient
/// buffer. Copies share the underlying node; ops on tensors that require
/// gradients record a reverse-mode graph. All model math is 2-D; scalars
/// are 1x1 tensors.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(int rows, int cols);
  static Tensor full(int rows, int cols, double value);
  static Tensor from_data(int rows, int cols, std::vector<double> data);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  int rows() const;
  int cols() const;
  int64_t size() const;
  const std::vector<int>& shape() const;

  double at(int r, int c) const;
  double value() const;  // 1x1 tensors only
  std::span<const double> data() const;
  std::span<double> mutable_data();  // optimizer / finite-difference use
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  bool has_grad() const;

  void set_requires_grad(bool v);
  bool requires_grad() const;
  void zero_grad();

  /// Reverse sweep from a scalar tensor. Gradients accumulate into every
  /// reachable tensor with requires_grad; call zero_grad on leaves between
  /// optimization steps, not between images of one batch.
  void backward() const;

  /// Value copy detached from any graph.
  Tensor detached() const;

  bool all_finite() const;

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::TensorNode> node_;

  friend struct TensorOps;
};

// ---- ops ------------------------------------------------------------------
// Every op validates shapes and throws std::invalid_argument on mismatch.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor div(const Tensor& a, const Tensor& b);  // elementwise
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor add_row_broadcast(const Tensor& a, const Tensor& row);
Tensor mul_by_scalar_tensor(const Tensor& a, const Tensor& s);  // s is 1x1

Tensor relu(const Tensor& a);
Tensor abs_elem(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp_elem(const Tensor& a);

/// Numerically stabilized row softmax (max subtraction). Rejects
/// non-finite input with a diagnostic naming the offending entry.
Tensor softmax_rows(const Tensor& a);

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor l2_normalize_rows(const Tensor& a);

Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, int first, int count);
Tensor slice_cols(const Tensor& a, int first, int count);
Tensor gather_rows(const Tensor& a, const std::vector<int>& indices);

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

/// (1/norm) * sum_i weights[i] * CE(logits row i, targets[i]); stable
/// log-sum-exp form.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                             const std::vector<double>& weights, double norm);

/// Mean over all entries of the stable binary cross-entropy between
/// logits and {0,1} targets.
Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& targets);

}  // namespace hcvc
