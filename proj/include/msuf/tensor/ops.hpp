#pragma once
// Differentiable primitives. Every op checks shapes up front and names the
// op and the offending shapes in its error.

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "msuf/tensor/tensor.hpp"

namespace msuf::tensor {

namespace detail {

inline void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw ShapeError(std::string(op) + ": " + what);
}

inline std::string shapes(const Tensor& a, const Tensor& b) {
  return shape_str(a.rows(), a.cols()) + " vs " + shape_str(b.rows(), b.cols());
}

// Row-major views over raw buffers; products go through Eigen.
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstView = Eigen::Map<const RowMat>;
using View = Eigen::Map<RowMat>;

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  View(c, M, N).noalias() += ConstView(a, M, K) * ConstView(b, K, N);
}

// C[m x n] += A[m x k] * B[n x k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  View(c, M, N).noalias() += ConstView(a, M, K) * ConstView(b, N, K).transpose();
}

// C[m x n] += A[k x m]^T * B[k x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  View(c, M, N).noalias() += ConstView(a, K, M).transpose() * ConstView(b, K, N);
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require(a.cols() == b.rows(), "matmul", detail::shapes(a, b));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result("matmul", m, n, std::move(out), {a.node_ptr(), b.node_ptr()}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) detail::gemm_nt(self.grad.data(), pb.value.data(), pa.grad.data(), m, n, k);
    if (pb.requires_grad) detail::gemm_tn(pa.value.data(), self.grad.data(), pb.grad.data(), k, m, n);
  });
}

// a * b^T
inline Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  detail::require(a.cols() == b.cols(), "matmul_bt", detail::shapes(a, b));
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result("matmul_bt", m, n, std::move(out), {a.node_ptr(), b.node_ptr()}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) detail::gemm_nn(self.grad.data(), pb.value.data(), pa.grad.data(), m, n, k);
    if (pb.requires_grad) detail::gemm_tn(self.grad.data(), pa.value.data(), pb.grad.data(), n, m, k);
  });
}

inline Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  const auto in = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in[i * c + j];
  return make_result("transpose", c, r, std::move(out), {a.node_ptr()}, [r, c](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) p.grad[i * c + j] += self.grad[j * r + i];
  });
}

// Elementwise a + b. b may also be a 1 x cols row, broadcast over rows.
inline Tensor add(const Tensor& a, const Tensor& b) {
  const bool broadcast = b.rows() == 1 && a.rows() != 1 && a.cols() == b.cols();
  detail::require(broadcast || (a.rows() == b.rows() && a.cols() == b.cols()), "add", detail::shapes(a, b));
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bv[broadcast ? j : i * c + j];
  return make_result("add", r, c, std::move(out), {a.node_ptr(), b.node_ptr()}, [r, c, broadcast](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad)
      for (std::size_t k = 0; k < r * c; ++k) pa.grad[k] += self.grad[k];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) pb.grad[broadcast ? j : i * c + j] += self.grad[i * c + j];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub", detail::shapes(a, b));
  std::vector<double> out(a.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = a.data()[k] - b.data()[k];
  return make_result("sub", a.rows(), a.cols(), std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    for (std::size_t k = 0; k < self.grad.size(); ++k) {
      if (pa.requires_grad) pa.grad[k] += self.grad[k];
      if (pb.requires_grad) pb.grad[k] -= self.grad[k];
    }
  });
}

// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "mul", detail::shapes(a, b));
  std::vector<double> out(a.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = a.data()[k] * b.data()[k];
  return make_result("mul", a.rows(), a.cols(), std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    for (std::size_t k = 0; k < self.grad.size(); ++k) {
      if (pa.requires_grad) pa.grad[k] += self.grad[k] * pb.value[k];
      if (pb.requires_grad) pb.grad[k] += self.grad[k] * pa.value[k];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= s;
  return make_result("scale", a.rows(), a.cols(), std::move(out), {a.node_ptr()}, [s](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t k = 0; k < self.grad.size(); ++k) p.grad[k] += s * self.grad[k];
  });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v += s;
  return make_result("add_scalar", a.rows(), a.cols(), std::move(out), {a.node_ptr()}, [](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t k = 0; k < self.grad.size(); ++k) p.grad[k] += self.grad[k];
  });
}

inline Tensor square(const Tensor& a) { return mul(a, a); }

// Stack along the row (sequence) axis.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  detail::require(!parts.empty(), "concat_rows", "no inputs");
  const std::size_t c = parts.front().cols();
  std::size_t r = 0;
  std::vector<std::shared_ptr<Node>> parents;
  for (const auto& p : parts) {
    detail::require(p.cols() == c, "concat_rows", detail::shapes(parts.front(), p));
    r += p.rows();
    parents.push_back(p.node_ptr());
  }
  std::vector<double> out;
  out.reserve(r * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result("concat_rows", r, c, std::move(out), std::move(parents), [](Node& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad)
        for (std::size_t k = 0; k < p->size(); ++k) p->grad[k] += self.grad[offset + k];
      offset += p->size();
    }
  });
}

// Stack along the column (feature) axis.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  detail::require(!parts.empty(), "concat_cols", "no inputs");
  const std::size_t r = parts.front().rows();
  std::size_t c = 0;
  std::vector<std::shared_ptr<Node>> parents;
  for (const auto& p : parts) {
    detail::require(p.rows() == r, "concat_cols", detail::shapes(parts.front(), p));
    c += p.cols();
    parents.push_back(p.node_ptr());
  }
  std::vector<double> out(r * c);
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out[i * c + c0 + j] = p.data()[i * p.cols() + j];
    c0 += p.cols();
  }
  return make_result("concat_cols", r, c, std::move(out), std::move(parents), [r, c](Node& self) {
    std::size_t col0 = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad)
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < p->cols; ++j) p->grad[i * p->cols + j] += self.grad[i * c + col0 + j];
      col0 += p->cols;
    }
  });
}

// Columns [begin, end).
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require(begin < end && end <= a.cols(), "slice_cols",
                  "range [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(a.rows(), a.cols()));
  const std::size_t r = a.rows(), c = a.cols(), w = end - begin;
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a.data()[i * c + begin + j];
  return make_result("slice_cols", r, w, std::move(out), {a.node_ptr()}, [r, c, w, begin](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) p.grad[i * c + begin + j] += self.grad[i * w + j];
  });
}

// Rows [begin, end).
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require(begin < end && end <= a.rows(), "slice_rows",
                  "range [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(a.rows(), a.cols()));
  const std::size_t c = a.cols();
  std::vector<double> out(a.data().begin() + begin * c, a.data().begin() + end * c);
  return make_result("slice_rows", end - begin, c, std::move(out), {a.node_ptr()}, [begin, c](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t k = 0; k < self.grad.size(); ++k) p.grad[begin * c + k] += self.grad[k];
  });
}

// Mean over rows: r x c -> 1 x c.
inline Tensor mean_rows(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  detail::require(r > 0, "mean_rows", "empty input");
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += a.data()[i * c + j];
  for (double& v : out) v /= static_cast<double>(r);
  return make_result("mean_rows", 1, c, std::move(out), {a.node_ptr()}, [r, c](Node& self) {
    Node& p = *self.parents[0];
    const double inv = 1.0 / static_cast<double>(r);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) p.grad[i * c + j] += self.grad[j] * inv;
  });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result("sum", 1, 1, {s}, {a.node_ptr()}, [](Node& self) {
    Node& p = *self.parents[0];
    for (double& g : p.grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  detail::require(a.size() > 0, "mean", "empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

// Row-wise softmax. With a causal offset, entry (r, c) is masked to zero
// probability when c > r + offset; offset 0 is the standard square mask.
inline Tensor softmax_rows(const Tensor& a, std::optional<std::size_t> causal_offset = std::nullopt) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c, 0.0);
  const auto in = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t limit = causal_offset ? std::min(c, i + *causal_offset + 1) : c;
    detail::require(limit > 0, "softmax_rows", "row with every entry masked");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < limit; ++j) mx = std::max(mx, in[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < limit; ++j) {
      out[i * c + j] = std::exp(in[i * c + j] - mx);
      z += out[i * c + j];
    }
    for (std::size_t j = 0; j < limit; ++j) out[i * c + j] /= z;
  }
  return make_result("softmax_rows", r, c, std::move(out), {a.node_ptr()}, [r, c](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * self.value[i * c + j];
      for (std::size_t j = 0; j < c; ++j) p.grad[i * c + j] += self.value[i * c + j] * (self.grad[i * c + j] - dot);
    }
  });
}

// Per-row normalization with learned gain and bias (both 1 x cols).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  const std::size_t r = x.rows(), c = x.cols();
  detail::require(gain.rows() == 1 && gain.cols() == c && bias.rows() == 1 && bias.cols() == c, "layer_norm",
                  "input " + shape_str(r, c) + ", gain " + shape_str(gain.rows(), gain.cols()) + ", bias " +
                      shape_str(bias.rows(), bias.cols()));
  std::vector<double> xhat(r * c), inv_std(r), out(r * c);
  const auto in = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += in[i * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (in[i * c + j] - mu) * (in[i * c + j] - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (in[i * c + j] - mu) * inv_std[i];
      out[i * c + j] = gain.data()[j] * xhat[i * c + j] + bias.data()[j];
    }
  }
  return make_result("layer_norm", r, c, std::move(out), {x.node_ptr(), gain.node_ptr(), bias.node_ptr()},
                     [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       Node& px = *self.parents[0];
                       Node& pg = *self.parents[1];
                       Node& pb = *self.parents[2];
                       std::vector<double> dxhat(c);
                       for (std::size_t i = 0; i < r; ++i) {
                         double m1 = 0.0, m2 = 0.0;
                         for (std::size_t j = 0; j < c; ++j) {
                           const double g = self.grad[i * c + j];
                           if (pg.requires_grad) pg.grad[j] += g * xhat[i * c + j];
                           if (pb.requires_grad) pb.grad[j] += g;
                           dxhat[j] = g * pg.value[j];
                           m1 += dxhat[j];
                           m2 += dxhat[j] * xhat[i * c + j];
                         }
                         if (!px.requires_grad) continue;
                         m1 /= static_cast<double>(c);
                         m2 /= static_cast<double>(c);
                         for (std::size_t j = 0; j < c; ++j)
                           px.grad[i * c + j] += inv_std[i] * (dxhat[j] - m1 - xhat[i * c + j] * m2);
                       }
                     });
}

// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline double gelu_value(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

inline double gelu_derivative(double x) {
  constexpr double k = 0.7978845608028654;
  const double u = k * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = k * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

inline Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = gelu_value(a.data()[k]);
  return make_result("gelu", a.rows(), a.cols(), std::move(out), {a.node_ptr()}, [](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t k = 0; k < self.grad.size(); ++k) p.grad[k] += self.grad[k] * gelu_derivative(p.value[k]);
  });
}

// Gather rows of `table` by id.
inline Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& ids) {
  const std::size_t c = table.cols();
  detail::require(!ids.empty(), "embedding_lookup", "empty id list");
  std::vector<double> out(ids.size() * c);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    detail::require(ids[i] < table.rows(), "embedding_lookup",
                    "id " + std::to_string(ids[i]) + " outside table of " + std::to_string(table.rows()) + " rows");
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = table.data()[ids[i] * c + j];
  }
  return make_result("embedding_lookup", ids.size(), c, std::move(out), {table.node_ptr()}, [ids, c](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) p.grad[ids[i] * c + j] += self.grad[i * c + j];
  });
}

// Negative log-likelihood of `label` under softmax(logits); logits is 1 x C.
inline Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  detail::require(logits.rows() == 1, "cross_entropy", "logits must be a row, got " + shape_str(logits.rows(), logits.cols()));
  detail::require(label < logits.cols(), "cross_entropy",
                  "label " + std::to_string(label) + " outside " + std::to_string(logits.cols()) + " classes");
  const auto z = logits.data();
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : z) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  std::vector<double> probs(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) probs[j] = std::exp(z[j] - lse);
  return make_result("cross_entropy", 1, 1, {lse - z[label]}, {logits.node_ptr()},
                     [label, probs = std::move(probs)](Node& self) {
                       Node& p = *self.parents[0];
                       for (std::size_t j = 0; j < probs.size(); ++j)
                         p.grad[j] += self.grad[0] * (probs[j] - (j == label ? 1.0 : 0.0));
                     });
}

}  // namespace msuf::tensor
