#pragma once

// Dense row-major float64 tensors with tape-free reverse-mode autodiff.
//
// A Tensor is a shared handle: copies alias the same storage and graph node,
// which is what lets parameters accumulate gradient across uses. Use clone()
// for an independent deep copy. Every op is defined on matrices; rank-1
// tensors are treated as 1 x n row vectors and scalars are tensors with one
// element.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sdlm/errors.hpp"

namespace sdlm {

using Shape = std::vector<std::size_t>;

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

/// Graph node. inputs/backward_fn are empty for leaves.
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until a gradient has been accumulated
  std::vector<NodePtr> inputs;
  std::function<void(TensorNode&)> backward_fn;
  const char* op = "leaf";

  std::size_t numel() const { return data.size(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor scalar(double v);
  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }
  static Tensor full(std::size_t rows, std::size_t cols, double v) { return Tensor({rows, cols}, v); }
  static Tensor identity(std::size_t n);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor row_vector(std::vector<double> values);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  /// Direct write access; only meaningful on leaves (parameters, inputs).
  std::span<double> mutable_data() { return node_->data; }
  double operator()(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return node_->data[r * cols() + c]; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; all zeros if none has been accumulated yet.
  std::vector<double> grad() const;
  void zero_grad() { node_->grad.clear(); }

  /// Same values, no graph, no grad requirement.
  Tensor detach() const;
  /// Deep copy including requires_grad flag (but not graph history).
  Tensor clone() const;

  const NodePtr& node() const { return node_; }
  bool same_as(const Tensor& other) const { return node_ == other.node_; }

 private:
  NodePtr node_;
};

/// Thread-local switch that disables graph recording, e.g. for evaluation
/// and finite-difference probes.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---------------------------------------------------------------------------
// Operations. All return fresh tensors; inputs are never modified.

Tensor matmul(const Tensor& a, const Tensor& b);
/// a * b^T without materialising the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// Adds a 1 x n row to every row of an m x n matrix.
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor scale(const Tensor& a, double s);
/// s * a where s is a one-element tensor (differentiable in both).
Tensor mul_scalar(const Tensor& s, const Tensor& a);
Tensor add_constant(const Tensor& a, double c);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Column-wise mean over rows: m x n -> 1 x n.
Tensor mean_rows(const Tensor& a);
/// Row-wise sum: m x n -> m x 1.
Tensor sum_cols(const Tensor& a);

Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
/// Row-wise layer normalisation with population variance.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
/// Row-wise x / sqrt(mean(x^2) + eps) * gain + bias; no mean centring.
Tensor rms_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

Tensor gelu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// log(1 + e^x), stable for large |x|.
Tensor softplus(const Tensor& x);
/// Euclidean norm of all elements; subgradient 0 at the origin.
Tensor l2_norm(const Tensor& x);

/// Mean negative log-likelihood of targets under row-wise softmax(logits).
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

/// Gathers rows of table (V x d) by id.
Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
Tensor concat_rows(const std::vector<Tensor>& parts);
/// out has `total_rows` rows; row idx[i] receives row i of a, other rows 0.
Tensor scatter_rows(const Tensor& a, std::span<const std::size_t> idx, std::size_t total_rows);
/// Single element as a scalar tensor.
Tensor element(const Tensor& a, std::size_t r, std::size_t c);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

// ---------------------------------------------------------------------------
// Reverse mode.

/// Topologically ordered list of graph nodes reachable from a root; inputs of
/// entry k always appear at positions < k.
struct ComputationRecord {
  std::vector<NodePtr> steps;
};

ComputationRecord record_graph(const Tensor& root);

/// Propagates d(root)/d(node) into every requires_grad node of the record.
/// Gradients accumulate into existing buffers. root must have one element.
void backward(const ComputationRecord& record, const Tensor& root);
void backward(const Tensor& root);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares analytic gradients of a scalar function against central finite
/// differences. fn must rebuild its graph from `inputs` on every call; inputs
/// are perturbed in place and restored.
GradCheckResult grad_check(const std::function<Tensor()>& fn, std::vector<Tensor> inputs,
                           double h = 1e-5);

/// Throws NumericError if any element is NaN or infinite.
void check_finite(const Tensor& t, const char* what);

}  // namespace sdlm
