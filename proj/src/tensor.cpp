#include "sdlm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <unordered_set>

namespace sdlm {

namespace {

thread_local bool g_grad_enabled = true;

std::size_t product(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

std::size_t rows_of(const TensorNode& n) { return n.shape.size() >= 2 ? n.shape[0] : 1; }
std::size_t cols_of(const TensorNode& n) {
  return n.shape.size() >= 2 ? n.shape[1] : (n.shape.empty() ? 1 : n.shape[0]);
}

using BackwardFn = std::function<void(TensorNode&)>;

/// Wraps a computed value; attaches graph history only when some input needs
/// a gradient and recording is on.
Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   std::vector<NodePtr> inputs, BackwardFn fn) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(fn);
  }
  return Tensor(std::move(node));
}

void require_matrix(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
  if (t.rank() > 2 || t.rank() == 0)
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* A, const double* B,
             double* C) {
  for (std::size_t i = 0; i < m; ++i) {
    double* c = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a = A[i * k + p];
      if (a == 0.0) continue;
      const double* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* A, const double* B,
             double* C) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* b = B + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[p] * b[p];
      C[i * n + j] += acc;
    }
  }
}

// C[m x n] += A[k x m]^T * B[k x n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* A, const double* B,
             double* C) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* b = B + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double a = A[p * m + i];
      if (a == 0.0) continue;
      double* c = C + i * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
    }
  }
}

template <class F, class DF>
Tensor unary(const Tensor& x, const char* op, F f, DF df) {
  require_matrix(x, op);
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result(x.shape(), std::move(out), op, {x.node()}, [df](TensorNode& self) {
    auto& a = *self.inputs[0];
    if (!a.requires_grad) return;
    a.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      a.grad[i] += self.grad[i] * df(a.data[i], self.data[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<TensorNode>()) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
  node_->data.assign(product(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : node_(std::make_shared<TensorNode>()) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
  if (product(shape) != data.size())
    throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

Tensor Tensor::scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged initializer rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::row_vector(std::vector<double> values) {
  const auto n = values.size();
  return Tensor({1, n}, std::move(values));
}

std::size_t Tensor::rows() const { return rows_of(*node_); }
std::size_t Tensor::cols() const { return cols_of(*node_); }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return node_->grad;
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->data); }

Tensor Tensor::clone() const {
  Tensor t(shape(), node_->data);
  t.set_requires_grad(requires_grad());
  return t;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void check_finite(const Tensor& t, const char* what) {
  for (double v : t.data())
    if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite value");
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
  return make_result({m, n}, std::move(out), "matmul", {a.node(), b.node()},
                     [m, n, k](TensorNode& self) {
                       auto& A = *self.inputs[0];
                       auto& B = *self.inputs[1];
                       if (A.requires_grad) {
                         A.ensure_grad();  // dA = dC B^T
                         gemm_nt(m, k, n, self.grad.data(), B.data.data(), A.grad.data());
                       }
                       if (B.requires_grad) {
                         B.ensure_grad();  // dB = A^T dC
                         gemm_tn(k, n, m, A.data.data(), self.grad.data(), B.grad.data());
                       }
                     });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k)
    throw DimensionError("matmul_nt: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  std::vector<double> out(m * n, 0.0);
  gemm_nt(m, n, k, a.data().data(), b.data().data(), out.data());
  return make_result({m, n}, std::move(out), "matmul_nt", {a.node(), b.node()},
                     [m, n, k](TensorNode& self) {
                       auto& A = *self.inputs[0];
                       auto& B = *self.inputs[1];
                       if (A.requires_grad) {
                         A.ensure_grad();  // dA = dC B
                         gemm_nn(m, k, n, self.grad.data(), B.data.data(), A.grad.data());
                       }
                       if (B.requires_grad) {
                         B.ensure_grad();  // dB = dC^T A
                         gemm_tn(n, k, m, self.grad.data(), A.data.data(), B.grad.data());
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  const auto in = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
  return make_result({n, m}, std::move(out), "transpose", {a.node()}, [m, n](TensorNode& self) {
    auto& A = *self.inputs[0];
    if (!A.requires_grad) return;
    A.ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) A.grad[i * n + j] += self.grad[j * m + i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_matrix(a, "add");
  require_matrix(b, "add");
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result(a.shape(), std::move(out), "add", {a.node(), b.node()}, [](TensorNode& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      in->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_matrix(a, "sub");
  require_matrix(b, "sub");
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result(a.shape(), std::move(out), "sub", {a.node(), b.node()}, [](TensorNode& self) {
    auto& A = *self.inputs[0];
    auto& B = *self.inputs[1];
    if (A.requires_grad) {
      A.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) A.grad[i] += self.grad[i];
    }
    if (B.requires_grad) {
      B.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) B.grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "mul");
  require_matrix(b, "mul");
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result(a.shape(), std::move(out), "mul", {a.node(), b.node()}, [](TensorNode& self) {
    auto& A = *self.inputs[0];
    auto& B = *self.inputs[1];
    if (A.requires_grad) {
      A.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) A.grad[i] += self.grad[i] * B.data[i];
    }
    if (B.requires_grad) {
      B.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) B.grad[i] += self.grad[i] * A.data[i];
    }
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  require_matrix(a, "add_row");
  require_matrix(row, "add_row");
  const std::size_t m = a.rows(), n = a.cols();
  if (row.numel() != n)
    throw DimensionError("add_row: row of " + std::to_string(row.numel()) + " vs " +
                         std::to_string(n) + " columns");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] + row.data()[j];
  return make_result(a.shape(), std::move(out), "add_row", {a.node(), row.node()},
                     [m, n](TensorNode& self) {
                       auto& A = *self.inputs[0];
                       auto& R = *self.inputs[1];
                       if (A.requires_grad) {
                         A.ensure_grad();
                         for (std::size_t i = 0; i < self.grad.size(); ++i) A.grad[i] += self.grad[i];
                       }
                       if (R.requires_grad) {
                         R.ensure_grad();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) R.grad[j] += self.grad[i * n + j];
                       }
                     });
}

Tensor scale(const Tensor& a, double s) {
  return unary(
      a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_constant(const Tensor& a, double c) {
  return unary(
      a, "add_constant", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& s, const Tensor& a) {
  require_matrix(a, "mul_scalar");
  if (!s.defined() || s.numel() != 1)
    throw DimensionError("mul_scalar: first operand must hold exactly one element");
  const double sv = s.data()[0];
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * a.data()[i];
  return make_result(a.shape(), std::move(out), "mul_scalar", {s.node(), a.node()},
                     [](TensorNode& self) {
                       auto& S = *self.inputs[0];
                       auto& A = *self.inputs[1];
                       if (S.requires_grad) {
                         S.ensure_grad();
                         double acc = 0.0;
                         for (std::size_t i = 0; i < self.grad.size(); ++i)
                           acc += self.grad[i] * A.data[i];
                         S.grad[0] += acc;
                       }
                       if (A.requires_grad) {
                         A.ensure_grad();
                         const double sv = S.data[0];
                         for (std::size_t i = 0; i < self.grad.size(); ++i)
                           A.grad[i] += sv * self.grad[i];
                       }
                     });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  require_matrix(a, "sum");
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return make_result({1}, {acc}, "sum", {a.node()}, [](TensorNode& self) {
    auto& A = *self.inputs[0];
    if (!A.requires_grad) return;
    A.ensure_grad();
    for (auto& g : A.grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mean_rows(const Tensor& a) {
  require_matrix(a, "mean_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += a.data()[i * n + j];
  for (auto& v : out) v /= static_cast<double>(m);
  return make_result({1, n}, std::move(out), "mean_rows", {a.node()}, [m, n](TensorNode& self) {
    auto& A = *self.inputs[0];
    if (!A.requires_grad) return;
    A.ensure_grad();
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) A.grad[i * n + j] += self.grad[j] * inv;
  });
}

Tensor sum_cols(const Tensor& a) {
  require_matrix(a, "sum_cols");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += a.data()[i * n + j];
  return make_result({m, 1}, std::move(out), "sum_cols", {a.node()}, [m, n](TensorNode& self) {
    auto& A = *self.inputs[0];
    if (!A.requires_grad) return;
    A.ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) A.grad[i * n + j] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Normalisation

Tensor softmax_rows(const Tensor& x) {
  require_matrix(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* r = in.data() + i * n;
    double mx = r[0];
    for (std::size_t j = 0; j < n; ++j) {
      if (std::isnan(r[j])) throw NumericError("softmax_rows: NaN input");
      mx = std::max(mx, r[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (out[i * n + j] = std::exp(r[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  return make_result(x.shape(), std::move(out), "softmax_rows", {x.node()},
                     [m, n](TensorNode& self) {
                       auto& X = *self.inputs[0];
                       if (!X.requires_grad) return;
                       X.ensure_grad();
                       for (std::size_t i = 0; i < m; ++i) {
                         const double* y = self.data.data() + i * n;
                         const double* g = self.grad.data() + i * n;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
                         for (std::size_t j = 0; j < n; ++j) X.grad[i * n + j] += y[j] * (g[j] - dot);
                       }
                     });
}

Tensor log_softmax_rows(const Tensor& x) {
  require_matrix(x, "log_softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* r = in.data() + i * n;
    double mx = r[0];
    for (std::size_t j = 0; j < n; ++j) {
      if (std::isnan(r[j])) throw NumericError("log_softmax_rows: NaN input");
      mx = std::max(mx, r[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(r[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = r[j] - lz;
  }
  return make_result(x.shape(), std::move(out), "log_softmax_rows", {x.node()},
                     [m, n](TensorNode& self) {
                       auto& X = *self.inputs[0];
                       if (!X.requires_grad) return;
                       X.ensure_grad();
                       for (std::size_t i = 0; i < m; ++i) {
                         const double* y = self.data.data() + i * n;
                         const double* g = self.grad.data() + i * n;
                         double gs = 0.0;
                         for (std::size_t j = 0; j < n; ++j) gs += g[j];
                         for (std::size_t j = 0; j < n; ++j)
                           X.grad[i * n + j] += g[j] - std::exp(y[j]) * gs;
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_matrix(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n || bias.numel() != n)
    throw DimensionError("layer_norm: gain/bias length must equal " + std::to_string(n));
  if (!(eps >= 0.0)) throw ContractError("layer_norm: eps must be non-negative");
  std::vector<double> out(x.numel());
  // Per-row normalised values and inverse std, kept for the backward pass.
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(m);
  const auto in = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* r = in.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += r[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (r[j] - mu) * (r[j] - mu);
    var /= static_cast<double>(n);
    const double denom = var + eps;
    if (!(denom > 0.0)) {
      // Zero variance: the centred row is exactly zero, output is the bias.
      (*inv_std)[i] = 0.0;
    } else {
      (*inv_std)[i] = 1.0 / std::sqrt(denom);
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (r[j] - mu) * (*inv_std)[i];
      (*xhat)[i * n + j] = h;
      out[i * n + j] = h * gain.data()[j] + bias.data()[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), "layer_norm", {x.node(), gain.node(), bias.node()},
      [m, n, xhat, inv_std](TensorNode& self) {
        auto& X = *self.inputs[0];
        auto& G = *self.inputs[1];
        auto& B = *self.inputs[2];
        if (G.requires_grad) G.ensure_grad();
        if (B.requires_grad) B.ensure_grad();
        if (X.requires_grad) X.ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
          const double* g = self.grad.data() + i * n;
          const double* h = xhat->data() + i * n;
          if (G.requires_grad)
            for (std::size_t j = 0; j < n; ++j) G.grad[j] += g[j] * h[j];
          if (B.requires_grad)
            for (std::size_t j = 0; j < n; ++j) B.grad[j] += g[j];
          if (X.requires_grad) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double gh = g[j] * G.data[j];
              s1 += gh;
              s2 += gh * h[j];
            }
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const double gh = g[j] * G.data[j];
              X.grad[i * n + j] += (*inv_std)[i] * (gh - s1 * inv_n - h[j] * s2 * inv_n);
            }
          }
        }
      });
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_matrix(x, "rms_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n || bias.numel() != n)
    throw DimensionError("rms_norm: gain/bias length must equal " + std::to_string(n));
  if (!(eps >= 0.0)) throw ContractError("rms_norm: eps must be non-negative");
  std::vector<double> out(x.numel());
  auto inv_rms = std::make_shared<std::vector<double>>(m);
  const auto in = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* r = in.data() + i * n;
    double ms = 0.0;
    for (std::size_t j = 0; j < n; ++j) ms += r[j] * r[j];
    const double denom = ms / static_cast<double>(n) + eps;
    (*inv_rms)[i] = denom > 0.0 ? 1.0 / std::sqrt(denom) : 0.0;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = r[j] * (*inv_rms)[i] * gain.data()[j] + bias.data()[j];
  }
  return make_result(
      x.shape(), std::move(out), "rms_norm", {x.node(), gain.node(), bias.node()},
      [m, n, inv_rms](TensorNode& self) {
        auto& X = *self.inputs[0];
        auto& G = *self.inputs[1];
        auto& B = *self.inputs[2];
        if (G.requires_grad) G.ensure_grad();
        if (B.requires_grad) B.ensure_grad();
        if (X.requires_grad) X.ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
          const double* g = self.grad.data() + i * n;
          const double* xr = X.data.data() + i * n;
          const double r = (*inv_rms)[i];
          if (G.requires_grad)
            for (std::size_t j = 0; j < n; ++j) G.grad[j] += g[j] * xr[j] * r;
          if (B.requires_grad)
            for (std::size_t j = 0; j < n; ++j) B.grad[j] += g[j];
          if (X.requires_grad) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += g[j] * G.data[j] * xr[j];
            const double c = r * r * r * s / static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) X.grad[i * n + j] += r * g[j] * G.data[j] - c * xr[j];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return unary(
      x, "gelu",
      [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v))); },
      [](double v, double) {
        const double u = c * (v + 0.044715 * v * v * v);
        const double t = std::tanh(u);
        const double du = c * (1.0 + 3.0 * 0.044715 * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.data())
    if (!(v > 0.0)) throw NumericError("log: non-positive input");
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  for (double v : x.data())
    if (v < 0.0) throw NumericError("sqrt: negative input");
  return unary(
      x, "sqrt", [](double v) { return std::sqrt(v); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor square(const Tensor& x) {
  return unary(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x, "softplus",
      [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      });
}

Tensor l2_norm(const Tensor& x) {
  require_matrix(x, "l2_norm");
  double ss = 0.0;
  for (double v : x.data()) ss += v * v;
  const double nrm = std::sqrt(ss);
  return make_result({1}, {nrm}, "l2_norm", {x.node()}, [](TensorNode& self) {
    auto& X = *self.inputs[0];
    if (!X.requires_grad) return;
    X.ensure_grad();
    const double nrm = self.data[0];
    if (nrm == 0.0) return;
    for (std::size_t i = 0; i < X.data.size(); ++i) X.grad[i] += self.grad[0] * X.data[i] / nrm;
  });
}

// ---------------------------------------------------------------------------
// Losses and indexing

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_matrix(logits, "cross_entropy");
  const std::size_t T = logits.rows(), V = logits.cols();
  if (targets.size() != T)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(T) + " rows");
  for (int t : targets)
    if (t < 0 || static_cast<std::size_t>(t) >= V)
      throw IndexError("cross_entropy: target id " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(V));
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  auto tg = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  double loss = 0.0;
  const auto in = logits.data();
  for (std::size_t i = 0; i < T; ++i) {
    const double* r = in.data() + i * V;
    double mx = r[0];
    for (std::size_t j = 0; j < V; ++j) {
      if (std::isnan(r[j])) throw NumericError("cross_entropy: NaN logit");
      mx = std::max(mx, r[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < V; ++j) z += ((*probs)[i * V + j] = std::exp(r[j] - mx));
    for (std::size_t j = 0; j < V; ++j) (*probs)[i * V + j] /= z;
    loss += (mx + std::log(z)) - r[targets[i]];
  }
  loss /= static_cast<double>(T);
  return make_result({1}, {loss}, "cross_entropy", {logits.node()},
                     [T, V, probs, tg](TensorNode& self) {
                       auto& L = *self.inputs[0];
                       if (!L.requires_grad) return;
                       L.ensure_grad();
                       const double g = self.grad[0] / static_cast<double>(T);
                       for (std::size_t i = 0; i < T; ++i) {
                         for (std::size_t j = 0; j < V; ++j) L.grad[i * V + j] += g * (*probs)[i * V + j];
                         L.grad[i * V + static_cast<std::size_t>((*tg)[i])] -= g;
                       }
                     });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_matrix(table, "embedding");
  const std::size_t V = table.rows(), d = table.cols();
  if (ids.empty()) throw InputError("embedding: empty id sequence");
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= V)
      throw IndexError("embedding: token id " + std::to_string(id) + " outside table of " +
                       std::to_string(V));
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  auto idv = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  return make_result({ids.size(), d}, std::move(out), "embedding", {table.node()},
                     [d, idv](TensorNode& self) {
                       auto& W = *self.inputs[0];
                       if (!W.requires_grad) return;
                       W.ensure_grad();
                       for (std::size_t i = 0; i < idv->size(); ++i) {
                         double* g = W.grad.data() + static_cast<std::size_t>((*idv)[i]) * d;
                         for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[i * d + j];
                       }
                     });
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  require_matrix(a, "slice_cols");
  const std::size_t m = a.rows(), n = a.cols();
  if (count == 0 || start + count > n) throw DimensionError("slice_cols: range outside matrix");
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(a.data().data() + i * n + start, count, out.data() + i * count);
  return make_result({m, count}, std::move(out), "slice_cols", {a.node()},
                     [m, n, start, count](TensorNode& self) {
                       auto& A = *self.inputs[0];
                       if (!A.requires_grad) return;
                       A.ensure_grad();
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < count; ++j)
                           A.grad[i * n + start + j] += self.grad[i * count + j];
                     });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.rows() != m) throw DimensionError("concat_cols: row counts differ");
    n += p.cols();
    nodes.push_back(p.node());
  }
  std::vector<double> out(m * n);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(p.data().data() + i * c, c, out.data() + i * n + off);
    off += c;
  }
  return make_result({m, n}, std::move(out), "concat_cols", std::move(nodes),
                     [m, n](TensorNode& self) {
                       std::size_t off = 0;
                       for (auto& in : self.inputs) {
                         const std::size_t c = cols_of(*in);
                         if (in->requires_grad) {
                           in->ensure_grad();
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < c; ++j)
                               in->grad[i * c + j] += self.grad[i * n + off + j];
                         }
                         off += c;
                       }
                     });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  require_matrix(a, "gather_rows");
  const std::size_t m = a.rows(), n = a.cols();
  if (rows.empty()) throw DimensionError("gather_rows: empty row selection");
  for (auto r : rows)
    if (r >= m) throw IndexError("gather_rows: row " + std::to_string(r) + " out of range");
  std::vector<double> out(rows.size() * n);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(a.data().data() + rows[i] * n, n, out.data() + i * n);
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  return make_result({rows.size(), n}, std::move(out), "gather_rows", {a.node()},
                     [n, idx](TensorNode& self) {
                       auto& A = *self.inputs[0];
                       if (!A.requires_grad) return;
                       A.ensure_grad();
                       for (std::size_t i = 0; i < idx->size(); ++i)
                         for (std::size_t j = 0; j < n; ++j)
                           A.grad[(*idx)[i] * n + j] += self.grad[i * n + j];
                     });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  std::vector<NodePtr> nodes;
  std::vector<double> out;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.cols() != n) throw DimensionError("concat_rows: column counts differ");
    m += p.rows();
    nodes.push_back(p.node());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return make_result({m, n}, std::move(out), "concat_rows", std::move(nodes), [](TensorNode& self) {
    std::size_t off = 0;
    for (auto& in : self.inputs) {
      const std::size_t len = in->data.size();
      if (in->requires_grad) {
        in->ensure_grad();
        for (std::size_t i = 0; i < len; ++i) in->grad[i] += self.grad[off + i];
      }
      off += len;
    }
  });
}

Tensor scatter_rows(const Tensor& a, std::span<const std::size_t> idx, std::size_t total_rows) {
  require_matrix(a, "scatter_rows");
  const std::size_t n = a.cols();
  if (idx.size() != a.rows()) throw DimensionError("scatter_rows: index count != rows");
  std::vector<double> out(total_rows * n, 0.0);
  std::vector<bool> used(total_rows, false);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= total_rows) throw IndexError("scatter_rows: target row out of range");
    if (used[idx[i]]) throw IndexError("scatter_rows: duplicate target row");
    used[idx[i]] = true;
    std::copy_n(a.data().data() + i * n, n, out.data() + idx[i] * n);
  }
  auto iv = std::make_shared<std::vector<std::size_t>>(idx.begin(), idx.end());
  return make_result({total_rows, n}, std::move(out), "scatter_rows", {a.node()},
                     [n, iv](TensorNode& self) {
                       auto& A = *self.inputs[0];
                       if (!A.requires_grad) return;
                       A.ensure_grad();
                       for (std::size_t i = 0; i < iv->size(); ++i)
                         for (std::size_t j = 0; j < n; ++j)
                           A.grad[i * n + j] += self.grad[(*iv)[i] * n + j];
                     });
}

Tensor element(const Tensor& a, std::size_t r, std::size_t c) {
  require_matrix(a, "element");
  if (r >= a.rows() || c >= a.cols()) throw IndexError("element: index out of range");
  const std::size_t k = r * a.cols() + c;
  return make_result({1}, {a.data()[k]}, "element", {a.node()}, [k](TensorNode& self) {
    auto& A = *self.inputs[0];
    if (!A.requires_grad) return;
    A.ensure_grad();
    A.grad[k] += self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Reverse mode

ComputationRecord record_graph(const Tensor& root) {
  ComputationRecord rec;
  if (!root.defined()) return rec;
  std::unordered_set<const TensorNode*> seen;
  // Iterative post-order DFS; a node is emitted after all of its inputs.
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  std::vector<NodePtr> holder_stack{root.node()};
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const NodePtr& child = node->inputs[next++];
      if (child->requires_grad && seen.insert(child.get()).second) {
        stack.emplace_back(child.get(), 0);
        holder_stack.push_back(child);
      }
    } else {
      rec.steps.push_back(holder_stack.back());
      holder_stack.pop_back();
      stack.pop_back();
    }
  }
  return rec;
}

void backward(const ComputationRecord& record, const Tensor& root) {
  if (!root.defined() || root.numel() != 1)
    throw ContractError("backward: root must be a scalar tensor");
  if (record.steps.empty() || record.steps.back() != root.node())
    throw ContractError("backward: record was not built from this root");
  auto& r = *root.node();
  r.ensure_grad();
  r.grad[0] += 1.0;
  for (auto it = record.steps.rbegin(); it != record.steps.rend(); ++it) {
    TensorNode& n = **it;
    if (n.backward_fn && !n.grad.empty()) n.backward_fn(n);
  }
  // Interior gradients are only scaffolding; free them so repeated passes
  // over the same parameters accumulate cleanly.
  for (auto& step : record.steps)
    if (step->backward_fn) step->grad.clear();
}

void backward(const Tensor& root) { backward(record_graph(root), root); }

// ---------------------------------------------------------------------------
// Finite-difference oracle

GradCheckResult grad_check(const std::function<Tensor()>& fn, std::vector<Tensor> inputs,
                           double h) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw ContractError("grad_check: step must lie in [1e-7, 1e-3]");
  for (auto& in : inputs) in.zero_grad();
  {
    Tensor root = fn();
    backward(root);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& in : inputs) analytic.push_back(in.grad());

  GradCheckResult res;
  NoGradGuard guard;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double fp = fn().item();
      data[i] = orig - h;
      const double fm = fn().item();
      data[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double ga = analytic[k][i];
      const double err = std::abs(ga - fd) / std::max(1e-12, std::abs(ga) + std::abs(fd));
      if (err > res.max_rel_error) {
        res = {err, k, i, ga, fd};
      }
    }
  }
  for (auto& in : inputs) in.zero_grad();
  return res;
}

}  // namespace sdlm
