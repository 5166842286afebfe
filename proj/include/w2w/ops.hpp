// Differentiable tensor operations.
//
// Every op computes its forward result eagerly and, when recording, registers
// a backward rule that accumulates into the gradient buffers of its inputs.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "w2w/tensor.hpp"

namespace w2w {

enum class Padding { zero, circular_width };
enum class PoolMode { max, avg };

namespace detail {

inline void require(bool ok, const std::string& message) {
  if (!ok) throw DimensionError(message);
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  require(a == b, std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// Splits a shape around `axis` into (outer, length, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, length = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Inner product with eight independent partial sums so the compiler can
// vectorize it without reassociating a single accumulator.
template <typename T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  T tail = T(0);
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto an = a.node(), bn = b.node();
  return detail::record<T>("add", Tensor<T>(a.shape(), std::move(out)), {&a, &b},
                           [an, bn](const std::vector<T>& g) {
                             if (T* ga = detail::sink(an))
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                             if (T* gb = detail::sink(bn))
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                           });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  auto an = a.node(), bn = b.node();
  return detail::record<T>("sub", Tensor<T>(a.shape(), std::move(out)), {&a, &b},
                           [an, bn](const std::vector<T>& g) {
                             if (T* ga = detail::sink(an))
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                             if (T* gb = detail::sink(bn))
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                           });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto an = a.node(), bn = b.node();
  return detail::record<T>("mul", Tensor<T>(a.shape(), std::move(out)), {&a, &b},
                           [an, bn](const std::vector<T>& g) {
                             if (T* ga = detail::sink(an))
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->data[i];
                             if (T* gb = detail::sink(bn))
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->data[i];
                           });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  auto an = a.node();
  return detail::record<T>("scale", Tensor<T>(a.shape(), std::move(out)), {&a},
                           [an, factor](const std::vector<T>& g) {
                             if (T* ga = detail::sink(an))
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
                           });
}

// x[..., c] + b[c]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t c = x.shape().back();
  detail::require(bias.size() == c, "add_bias: bias " + shape_str(bias.shape()) +
                                        " does not match last axis of " + shape_str(x.shape()));
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + bias[i % c];
  auto xn = x.node(), bn = bias.node();
  return detail::record<T>("add_bias", Tensor<T>(x.shape(), std::move(out)), {&x, &bias},
                           [xn, bn, c](const std::vector<T>& g) {
                             if (T* gx = detail::sink(xn))
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                             if (T* gb = detail::sink(bn))
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
                           });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  auto xn = x.node();
  return detail::record<T>("relu", Tensor<T>(x.shape(), std::move(out)), {&x},
                           [xn](const std::vector<T>& g) {
                             if (T* gx = detail::sink(xn))
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 if (xn->data[i] > T(0)) gx[i] += g[i];
                           });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  auto xn = x.node();
  return detail::record<T>("sum", Tensor<T>::scalar(total), {&x},
                           [xn](const std::vector<T>& g) {
                             if (T* gx = detail::sink(xn))
                               for (std::size_t i = 0; i < xn->data.size(); ++i) gx[i] += g[0];
                           });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(shape_numel(shape) == x.size(),
                  "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  auto xn = x.node();
  return detail::record<T>("reshape", Tensor<T>(std::move(shape), x.values()), {&x},
                           [xn](const std::vector<T>& g) {
                             if (T* gx = detail::sink(xn))
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                           });
}

// out axis i is input axis perm[i].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const auto& in_shape = x.shape();
  const std::size_t rank = in_shape.size();
  detail::require(perm.size() == rank, "permute: rank mismatch");
  Shape out_shape(rank);
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  std::vector<bool> seen(rank, false);
  for (std::size_t i = 0; i < rank; ++i) {
    detail::require(perm[i] < rank && !seen[perm[i]], "permute: invalid axis order");
    seen[perm[i]] = true;
    out_shape[i] = in_shape[perm[i]];
  }
  // source flat index for each destination element
  std::vector<std::size_t> source(x.size());
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < source.size(); ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < rank; ++i) src += idx[i] * in_strides[perm[i]];
    source[flat] = src;
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[source[i]];
  auto xn = x.node();
  return detail::record<T>("permute", Tensor<T>(out_shape, std::move(out)), {&x},
                           [xn, source = std::move(source)](const std::vector<T>& g) {
                             if (T* gx = detail::sink(xn))
                               for (std::size_t i = 0; i < g.size(); ++i) gx[source[i]] += g[i];
                           });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require(x.rank() == 2, "transpose: expected a matrix, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

// Rows of x viewed as [numel / C, C], selected by index.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& rows) {
  detail::require(!rows.empty(), "gather_rows: empty row set");
  const std::size_t c = x.shape().back();
  const std::size_t total_rows = x.size() / c;
  std::vector<T> out(rows.size() * c);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    detail::require(rows[r] < total_rows, "gather_rows: row " + std::to_string(rows[r]) +
                                              " out of range for " + shape_str(x.shape()));
    std::copy_n(x.data().begin() + rows[r] * c, c, out.begin() + r * c);
  }
  auto xn = x.node();
  return detail::record<T>("gather_rows", Tensor<T>({rows.size(), c}, std::move(out)), {&x},
                           [xn, rows, c](const std::vector<T>& g) {
                             if (T* gx = detail::sink(xn))
                               for (std::size_t r = 0; r < rows.size(); ++r)
                                 for (std::size_t j = 0; j < c; ++j) gx[rows[r] * c + j] += g[r * c + j];
                           });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_rows: nothing to concatenate");
  const std::size_t c = parts.front().shape().back();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == 2 && p.dim(1) == c,
                    "concat_rows: part " + shape_str(p.shape()) + " is not [rows x " +
                        std::to_string(c) + "]");
    rows += p.dim(0);
  }
  std::vector<T> out;
  out.reserve(rows * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Tensor<T> result({rows, c}, std::move(out));
  auto* tape = Tape<T>::active();
  bool needs = false;
  for (const auto& p : parts) needs = needs || p.requires_grad();
  if (tape == nullptr || !needs) return result;
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  result.node()->requires_grad = true;
  result.node()->leaf = false;
  tape->record("concat_rows", result.node(), [nodes](const std::vector<T>& g) {
    std::size_t offset = 0;
    for (const auto& n : nodes) {
      if (T* gp = detail::sink(n))
        for (std::size_t i = 0; i < n->data.size(); ++i) gp[i] += g[offset + i];
      offset += n->data.size();
    }
  });
  return result;
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  const T* A = a.data().data();
  const T* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = A[i * k + p];
      const T* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  auto an = a.node(), bn = b.node();
  return detail::record<T>("matmul", Tensor<T>({m, n}, std::move(out)), {&a, &b},
                           [an, bn, m, k, n](const std::vector<T>& g) {
                             const T* A = an->data.data();
                             const T* B = bn->data.data();
                             if (T* ga = detail::sink(an)) {
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t p = 0; p < k; ++p)
                                   ga[i * k + p] += detail::dot(g.data() + i * n, B + p * n, n);
                             }
                             if (T* gb = detail::sink(bn)) {
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t p = 0; p < k; ++p) {
                                   const T av = A[i * k + p];
                                   for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
                                 }
                             }
                           });
}

// Affine map on the last axis: x[..., Din] * weight[Din, Dout] + bias[Dout].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias = nullptr) {
  detail::require(weight.rank() == 2 && x.shape().back() == weight.dim(0),
                  "linear: input " + shape_str(x.shape()) + " does not match weight " +
                      shape_str(weight.shape()));
  const std::size_t din = weight.dim(0), dout = weight.dim(1);
  if (bias != nullptr) {
    detail::require(bias->size() == dout, "linear: bias " + shape_str(bias->shape()) +
                                              " does not match weight " + shape_str(weight.shape()));
  }
  const std::size_t rows = x.size() / din;
  std::vector<T> out(rows * dout, T(0));
  const T* X = x.data().data();
  const T* W = weight.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T* o = out.data() + r * dout;
    if (bias != nullptr) std::copy(bias->data().begin(), bias->data().end(), o);
    for (std::size_t p = 0; p < din; ++p) {
      const T xv = X[r * din + p];
      if (xv == T(0)) continue;
      const T* wrow = W + p * dout;
      for (std::size_t j = 0; j < dout; ++j) o[j] += xv * wrow[j];
    }
  }
  Shape shape = x.shape();
  shape.back() = dout;
  auto xn = x.node(), wn = weight.node();
  auto bn = bias != nullptr ? bias->node() : nullptr;
  return detail::record<T>(
      "linear", Tensor<T>(std::move(shape), std::move(out)), {&x, &weight, bias},
      [xn, wn, bn, rows, din, dout](const std::vector<T>& g) {
        const T* X = xn->data.data();
        const T* W = wn->data.data();
        if (T* gx = detail::sink(xn)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t p = 0; p < din; ++p)
              gx[r * din + p] += detail::dot(g.data() + r * dout, W + p * dout, dout);
        }
        if (T* gw = detail::sink(wn)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t p = 0; p < din; ++p) {
              const T xv = X[r * din + p];
              if (xv == T(0)) continue;
              T* gwrow = gw + p * dout;
              const T* grow = g.data() + r * dout;
              for (std::size_t j = 0; j < dout; ++j) gwrow[j] += xv * grow[j];
            }
        }
        if (bn) {
          if (T* gb = detail::sink(bn))
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < dout; ++j) gb[j] += g[r * dout + j];
        }
      });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return linear(x, weight, &bias);
}

// ---------------------------------------------------------------------------
// Normalizers

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
  }
  const auto s = detail::split_axis(x.shape(), axis);
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.length * s.inner + in;
      T peak = -std::numeric_limits<T>::infinity();
      for (std::size_t l = 0; l < s.length; ++l) peak = std::max(peak, x[base + l * s.inner]);
      T total = T(0);
      for (std::size_t l = 0; l < s.length; ++l) {
        const T e = std::exp(x[base + l * s.inner] - peak);
        out[base + l * s.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < s.length; ++l) out[base + l * s.inner] /= total;
    }
  Tensor<T> result(x.shape(), std::move(out));
  auto xn = x.node();
  auto yn = result.node();
  return detail::record<T>("softmax", result, {&x}, [xn, yn, s](const std::vector<T>& g) {
    T* gx = detail::sink(xn);
    if (gx == nullptr) return;
    const auto& y = yn->data;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.length * s.inner + in;
        T dot = T(0);
        for (std::size_t l = 0; l < s.length; ++l) dot += g[base + l * s.inner] * y[base + l * s.inner];
        for (std::size_t l = 0; l < s.length; ++l) {
          const std::size_t i = base + l * s.inner;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
  });
}

// Normalizes each last-axis row to zero mean / unit variance, then applies
// gain and shift.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift,
                     T eps = T(1e-5)) {
  const std::size_t c = x.shape().back();
  detail::require(gain.size() == c && shift.size() == c,
                  "layer_norm: gain/shift do not match " + shape_str(x.shape()));
  const std::size_t rows = x.size() / c;
  std::vector<T> normed(x.size()), inv_std(rows), out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.data().data() + r * c;
    T mu = T(0);
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var = T(0);
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      normed[r * c + j] = (row[j] - mu) * inv_std[r];
      out[r * c + j] = gain[j] * normed[r * c + j] + shift[j];
    }
  }
  auto xn = x.node(), gn = gain.node(), sn = shift.node();
  return detail::record<T>(
      "layer_norm", Tensor<T>(x.shape(), std::move(out)), {&x, &gain, &shift},
      [xn, gn, sn, c, rows, normed = std::move(normed),
       inv_std = std::move(inv_std)](const std::vector<T>& g) {
        if (T* gg = detail::sink(gn))
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % c] += g[i] * normed[i];
        if (T* gs = detail::sink(sn))
          for (std::size_t i = 0; i < g.size(); ++i) gs[i % c] += g[i];
        T* gx = detail::sink(xn);
        if (gx == nullptr) return;
        std::vector<T> dn(c);
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_dn = T(0), mean_dn_n = T(0);
          for (std::size_t j = 0; j < c; ++j) {
            dn[j] = g[r * c + j] * gn->data[j];
            mean_dn += dn[j];
            mean_dn_n += dn[j] * normed[r * c + j];
          }
          mean_dn /= static_cast<T>(c);
          mean_dn_n /= static_cast<T>(c);
          for (std::size_t j = 0; j < c; ++j)
            gx[r * c + j] += inv_std[r] * (dn[j] - mean_dn - normed[r * c + j] * mean_dn_n);
        }
      });
}

// Each row divided by (its Euclidean norm + eps).
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps = T(1e-8)) {
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.size() / c;
  std::vector<T> norms(rows), out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    T sq = T(0);
    for (std::size_t j = 0; j < c; ++j) sq += x[r * c + j] * x[r * c + j];
    norms[r] = std::sqrt(sq);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = x[r * c + j] / (norms[r] + eps);
  }
  auto xn = x.node();
  return detail::record<T>("l2_normalize", Tensor<T>(x.shape(), std::move(out)), {&x},
                           [xn, c, rows, eps, norms = std::move(norms)](const std::vector<T>& g) {
                             T* gx = detail::sink(xn);
                             if (gx == nullptr) return;
                             for (std::size_t r = 0; r < rows; ++r) {
                               const T s = norms[r] + eps;
                               T dot = T(0);
                               for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * xn->data[r * c + j];
                               const T radial = norms[r] > T(0) ? dot / (s * s * norms[r]) : T(0);
                               for (std::size_t j = 0; j < c; ++j)
                                 gx[r * c + j] += g[r * c + j] / s - radial * xn->data[r * c + j];
                             }
                           });
}

// Mean over rows of -log softmax(logits[i])[targets[i]].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets) {
  detail::require(logits.rank() == 2 && logits.dim(0) == targets.size(),
                  "cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                      std::to_string(targets.size()) + " targets");
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  std::vector<T> probs(logits.size());
  T loss = T(0);
  for (std::size_t i = 0; i < b; ++i) {
    detail::require(targets[i] < k, "cross_entropy: target out of range");
    const T* row = logits.data().data() + i * k;
    const T peak = *std::max_element(row, row + k);
    T total = T(0);
    for (std::size_t j = 0; j < k; ++j) total += std::exp(row[j] - peak);
    const T log_z = peak + std::log(total);
    loss += log_z - row[targets[i]];
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - log_z);
  }
  loss /= static_cast<T>(b);
  auto ln = logits.node();
  return detail::record<T>("cross_entropy", Tensor<T>::scalar(loss), {&logits},
                           [ln, b, k, targets, probs = std::move(probs)](const std::vector<T>& g) {
                             T* gl = detail::sink(ln);
                             if (gl == nullptr) return;
                             const T w = g[0] / static_cast<T>(b);
                             for (std::size_t i = 0; i < b; ++i)
                               for (std::size_t j = 0; j < k; ++j)
                                 gl[i * k + j] += w * (probs[i * k + j] - (j == targets[i] ? T(1) : T(0)));
                           });
}

// ---------------------------------------------------------------------------
// Spatial ops on (H, W, C) maps

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>* bias,
                 std::size_t stride, Padding padding) {
  detail::require(x.rank() == 3, "conv2d: input must be HxWxC, got " + shape_str(x.shape()));
  detail::require(kernel.rank() == 4 && kernel.dim(0) == kernel.dim(1) && kernel.dim(2) == x.dim(2),
                  "conv2d: kernel " + shape_str(kernel.shape()) + " incompatible with input " +
                      shape_str(x.shape()));
  const std::size_t k = kernel.dim(0);
  detail::require(k % 2 == 1, "conv2d: kernel size must be odd");
  detail::require(stride >= 1, "conv2d: stride must be >= 1");
  const std::size_t h = x.dim(0), w = x.dim(1), cin = x.dim(2), cout = kernel.dim(3);
  const std::size_t pad = k / 2;
  if (padding == Padding::circular_width && k > w) {
    throw DimensionError("conv2d: kernel " + std::to_string(k) + " wider than circular input width " +
                         std::to_string(w));
  }
  if (bias != nullptr) detail::require(bias->size() == cout, "conv2d: bias size mismatch");
  const std::size_t ho = (h + stride - 1) / stride, wo = (w + stride - 1) / stride;

  // Column source per (output col, kernel col); -1 marks zero padding.
  std::vector<long> col_src(wo * k);
  for (std::size_t ox = 0; ox < wo; ++ox)
    for (std::size_t kx = 0; kx < k; ++kx) {
      long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
      if (padding == Padding::circular_width) {
        ix = ((ix % static_cast<long>(w)) + static_cast<long>(w)) % static_cast<long>(w);
      } else if (ix < 0 || ix >= static_cast<long>(w)) {
        ix = -1;
      }
      col_src[ox * k + kx] = ix;
    }

  std::vector<T> out(ho * wo * cout, T(0));
  const T* X = x.data().data();
  const T* K = kernel.data().data();
  for (std::size_t oy = 0; oy < ho; ++oy)
    for (std::size_t ox = 0; ox < wo; ++ox) {
      T* o = out.data() + (oy * wo + ox) * cout;
      if (bias != nullptr) std::copy(bias->data().begin(), bias->data().end(), o);
      for (std::size_t ky = 0; ky < k; ++ky) {
        const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
        if (iy < 0 || iy >= static_cast<long>(h)) continue;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const long ix = col_src[ox * k + kx];
          if (ix < 0) continue;
          const T* xp = X + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
          const T* kp = K + (ky * k + kx) * cin * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const T xv = xp[ci];
            const T* kr = kp + ci * cout;
            for (std::size_t co = 0; co < cout; ++co) o[co] += xv * kr[co];
          }
        }
      }
    }

  auto xn = x.node(), kn = kernel.node();
  auto bn = bias != nullptr ? bias->node() : nullptr;
  return detail::record<T>(
      "conv2d", Tensor<T>({ho, wo, cout}, std::move(out)), {&x, &kernel, bias},
      [xn, kn, bn, h, w, cin, cout, k, pad, stride, ho, wo,
       col_src = std::move(col_src)](const std::vector<T>& g) {
        T* gx = detail::sink(xn);
        T* gk = detail::sink(kn);
        const T* X = xn->data.data();
        const T* K = kn->data.data();
        for (std::size_t oy = 0; oy < ho; ++oy)
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const T* go = g.data() + (oy * wo + ox) * cout;
            for (std::size_t ky = 0; ky < k; ++ky) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long ix = col_src[ox * k + kx];
                if (ix < 0) continue;
                const std::size_t xoff = (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
                const std::size_t koff = (ky * k + kx) * cin * cout;
                for (std::size_t ci = 0; ci < cin; ++ci) {
                  const T* kr = K + koff + ci * cout;
                  if (gx != nullptr) gx[xoff + ci] += detail::dot(kr, go, cout);
                  if (gk != nullptr) {
                    const T xv = X[xoff + ci];
                    T* gkr = gk + koff + ci * cout;
                    for (std::size_t co = 0; co < cout; ++co) gkr[co] += xv * go[co];
                  }
                }
              }
            }
          }
        if (bn) {
          if (T* gb = detail::sink(bn))
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % cout] += g[i];
        }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride, Padding padding) {
  return conv2d(x, kernel, static_cast<const Tensor<T>*>(nullptr), stride, padding);
}

// Reduces one axis. Max routes gradient to the first maximal element.
template <typename T>
Tensor<T> pool_axis(const Tensor<T>& x, std::size_t axis, PoolMode mode) {
  detail::require(axis < x.rank(), "pool_axis: axis out of range for " + shape_str(x.shape()));
  const auto s = detail::split_axis(x.shape(), axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<long>(axis));
  if (shape.empty()) shape = {1};
  std::vector<T> out(s.outer * s.inner);
  std::vector<std::size_t> argmax;
  if (mode == PoolMode::max) argmax.resize(out.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.length * s.inner + in;
      if (mode == PoolMode::max) {
        std::size_t best = base;
        for (std::size_t l = 1; l < s.length; ++l) {
          const std::size_t i = base + l * s.inner;
          if (x[i] > x[best]) best = i;
        }
        out[o * s.inner + in] = x[best];
        argmax[o * s.inner + in] = best;
      } else {
        T total = T(0);
        for (std::size_t l = 0; l < s.length; ++l) total += x[base + l * s.inner];
        out[o * s.inner + in] = total / static_cast<T>(s.length);
      }
    }
  auto xn = x.node();
  return detail::record<T>(mode == PoolMode::max ? "pool_axis_max" : "pool_axis_avg",
                           Tensor<T>(std::move(shape), std::move(out)), {&x},
                           [xn, s, mode, argmax = std::move(argmax)](const std::vector<T>& g) {
                             T* gx = detail::sink(xn);
                             if (gx == nullptr) return;
                             for (std::size_t o = 0; o < s.outer; ++o)
                               for (std::size_t in = 0; in < s.inner; ++in) {
                                 const std::size_t oi = o * s.inner + in;
                                 if (mode == PoolMode::max) {
                                   gx[argmax[oi]] += g[oi];
                                 } else {
                                   const T share = g[oi] / static_cast<T>(s.length);
                                   const std::size_t base = o * s.length * s.inner + in;
                                   for (std::size_t l = 0; l < s.length; ++l) gx[base + l * s.inner] += share;
                                 }
                               }
                           });
}

// Non-overlapping window pooling of an (H, W, C) map; window must tile the map.
template <typename T>
Tensor<T> pool_window(const Tensor<T>& x, std::size_t window_h, std::size_t window_w, PoolMode mode) {
  detail::require(x.rank() == 3, "pool_window: input must be HxWxC");
  detail::require(window_h >= 1 && window_w >= 1, "pool_window: empty pooling window");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  detail::require(h % window_h == 0 && w % window_w == 0,
                  "pool_window: window does not tile " + shape_str(x.shape()));
  const std::size_t ho = h / window_h, wo = w / window_w;
  std::vector<T> out(ho * wo * c);
  std::vector<std::size_t> argmax(mode == PoolMode::max ? out.size() : 0);
  for (std::size_t oy = 0; oy < ho; ++oy)
    for (std::size_t ox = 0; ox < wo; ++ox)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t oi = (oy * wo + ox) * c + ch;
        T acc = T(0);
        std::size_t best = (oy * window_h * w + ox * window_w) * c + ch;
        for (std::size_t dy = 0; dy < window_h; ++dy)
          for (std::size_t dx = 0; dx < window_w; ++dx) {
            const std::size_t i = ((oy * window_h + dy) * w + ox * window_w + dx) * c + ch;
            acc += x[i];
            if (x[i] > x[best]) best = i;
          }
        if (mode == PoolMode::max) {
          out[oi] = x[best];
          argmax[oi] = best;
        } else {
          out[oi] = acc / static_cast<T>(window_h * window_w);
        }
      }
  auto xn = x.node();
  return detail::record<T>(
      mode == PoolMode::max ? "pool_window_max" : "pool_window_avg",
      Tensor<T>({ho, wo, c}, std::move(out)), {&x},
      [xn, mode, w, c, ho, wo, window_h, window_w, argmax = std::move(argmax)](const std::vector<T>& g) {
        T* gx = detail::sink(xn);
        if (gx == nullptr) return;
        const T share = T(1) / static_cast<T>(window_h * window_w);
        for (std::size_t oy = 0; oy < ho; ++oy)
          for (std::size_t ox = 0; ox < wo; ++ox)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t oi = (oy * wo + ox) * c + ch;
              if (mode == PoolMode::max) {
                gx[argmax[oi]] += g[oi];
                continue;
              }
              for (std::size_t dy = 0; dy < window_h; ++dy)
                for (std::size_t dx = 0; dx < window_w; ++dx)
                  gx[((oy * window_h + dy) * w + ox * window_w + dx) * c + ch] += g[oi] * share;
            }
      });
}

// Mean over every axis but the last: (..., C) -> (C).
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const std::size_t c = x.shape().back();
  return pool_axis(reshape(x, {x.size() / c, c}), 0, PoolMode::avg);
}

// Nearest-neighbour 2x upsampling of an (H, W, C) map.
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  detail::require(x.rank() == 3, "upsample2x: input must be HxWxC");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  std::vector<T> out(4 * x.size());
  for (std::size_t y = 0; y < 2 * h; ++y)
    for (std::size_t xx = 0; xx < 2 * w; ++xx)
      std::copy_n(x.data().begin() + ((y / 2) * w + xx / 2) * c, c, out.begin() + (y * 2 * w + xx) * c);
  auto xn = x.node();
  return detail::record<T>("upsample2x", Tensor<T>({2 * h, 2 * w, c}, std::move(out)), {&x},
                           [xn, h, w, c](const std::vector<T>& g) {
                             T* gx = detail::sink(xn);
                             if (gx == nullptr) return;
                             for (std::size_t y = 0; y < 2 * h; ++y)
                               for (std::size_t xx = 0; xx < 2 * w; ++xx)
                                 for (std::size_t ch = 0; ch < c; ++ch)
                                   gx[((y / 2) * w + xx / 2) * c + ch] += g[(y * 2 * w + xx) * c + ch];
                           });
}

namespace detail {

struct LerpTap {
  std::size_t lo, hi;
  double frac;
};

// Half-pixel-centre sampling positions, clamped at the borders.
inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    taps[i] = {lo, std::min(lo + 1, in - 1), src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

// Bilinear resize of an (H, W, C) map.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require(x.rank() == 3 && out_h >= 1 && out_w >= 1, "resize_bilinear: bad shapes");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  auto rows = detail::lerp_taps(h, out_h);
  auto cols = detail::lerp_taps(w, out_w);
  std::vector<T> out(out_h * out_w * c, T(0));
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t xx = 0; xx < out_w; ++xx) {
      const auto& ry = rows[y];
      const auto& cx = cols[xx];
      const T w00 = static_cast<T>((1 - ry.frac) * (1 - cx.frac));
      const T w01 = static_cast<T>((1 - ry.frac) * cx.frac);
      const T w10 = static_cast<T>(ry.frac * (1 - cx.frac));
      const T w11 = static_cast<T>(ry.frac * cx.frac);
      T* o = out.data() + (y * out_w + xx) * c;
      const T* p00 = x.data().data() + (ry.lo * w + cx.lo) * c;
      const T* p01 = x.data().data() + (ry.lo * w + cx.hi) * c;
      const T* p10 = x.data().data() + (ry.hi * w + cx.lo) * c;
      const T* p11 = x.data().data() + (ry.hi * w + cx.hi) * c;
      for (std::size_t ch = 0; ch < c; ++ch)
        o[ch] = w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch];
    }
  auto xn = x.node();
  return detail::record<T>(
      "resize_bilinear", Tensor<T>({out_h, out_w, c}, std::move(out)), {&x},
      [xn, w, c, out_h, out_w, rows = std::move(rows), cols = std::move(cols)](const std::vector<T>& g) {
        T* gx = detail::sink(xn);
        if (gx == nullptr) return;
        for (std::size_t y = 0; y < out_h; ++y)
          for (std::size_t xx = 0; xx < out_w; ++xx) {
            const auto& ry = rows[y];
            const auto& cx = cols[xx];
            const T w00 = static_cast<T>((1 - ry.frac) * (1 - cx.frac));
            const T w01 = static_cast<T>((1 - ry.frac) * cx.frac);
            const T w10 = static_cast<T>(ry.frac * (1 - cx.frac));
            const T w11 = static_cast<T>(ry.frac * cx.frac);
            const T* go = g.data() + (y * out_w + xx) * c;
            for (std::size_t ch = 0; ch < c; ++ch) {
              gx[(ry.lo * w + cx.lo) * c + ch] += w00 * go[ch];
              gx[(ry.lo * w + cx.hi) * c + ch] += w01 * go[ch];
              gx[(ry.hi * w + cx.lo) * c + ch] += w10 * go[ch];
              gx[(ry.hi * w + cx.hi) * c + ch] += w11 * go[ch];
            }
          }
      });
}

// volume[h, w, d, c] = depth[h, w, d] * features[h, w, c]
template <typename T>
Tensor<T> lift(const Tensor<T>& depth, const Tensor<T>& features) {
  detail::require(depth.rank() == 3 && features.rank() == 3 && depth.dim(0) == features.dim(0) &&
                      depth.dim(1) == features.dim(1),
                  "lift: depth " + shape_str(depth.shape()) + " does not match features " +
                      shape_str(features.shape()));
  const std::size_t pixels = depth.dim(0) * depth.dim(1), d = depth.dim(2), c = features.dim(2);
  std::vector<T> out(pixels * d * c);
  for (std::size_t p = 0; p < pixels; ++p)
    for (std::size_t b = 0; b < d; ++b) {
      const T pd = depth[p * d + b];
      for (std::size_t ch = 0; ch < c; ++ch) out[(p * d + b) * c + ch] = pd * features[p * c + ch];
    }
  auto dn = depth.node(), fn = features.node();
  return detail::record<T>("lift", Tensor<T>({depth.dim(0), depth.dim(1), d, c}, std::move(out)),
                           {&depth, &features}, [dn, fn, pixels, d, c](const std::vector<T>& g) {
                             T* gd = detail::sink(dn);
                             T* gf = detail::sink(fn);
                             for (std::size_t p = 0; p < pixels; ++p)
                               for (std::size_t b = 0; b < d; ++b) {
                                 const T* go = g.data() + (p * d + b) * c;
                                 if (gd != nullptr) {
                                   T acc = T(0);
                                   for (std::size_t ch = 0; ch < c; ++ch) acc += go[ch] * fn->data[p * c + ch];
                                   gd[p * d + b] += acc;
                                 }
                                 if (gf != nullptr) {
                                   const T pd = dn->data[p * d + b];
                                   for (std::size_t ch = 0; ch < c; ++ch) gf[p * c + ch] += pd * go[ch];
                                 }
                               }
                           });
}

// ---------------------------------------------------------------------------
// Attention

// Multi-head scaled dot-product attention core on already-projected tokens:
// per head h, softmax(q_h k_h^T / sqrt(d_head)) v_h, heads concatenated along
// channels. When `weights_out` is given it receives the heads x n x m weights.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    std::vector<T>* weights_out = nullptr) {
  detail::require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "attention: tokens must be matrices");
  detail::require(k.dim(0) >= 1, "attention: empty key set");
  detail::require(q.dim(1) == k.dim(1) && k.shape() == v.shape(),
                  "attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                      shape_str(v.shape()) + " disagree");
  const std::size_t n = q.dim(0), m = k.dim(0), c = q.dim(1);
  detail::require(heads >= 1 && c % heads == 0, "attention: channels not divisible by heads");
  const std::size_t dh = c / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  const T* Q = q.data().data();
  const T* K = k.data().data();
  const T* V = v.data().data();
  std::vector<T> probs(heads * n * m);
  std::vector<T> out(n * c, T(0));
  for (std::size_t hd = 0; hd < heads; ++hd) {
    const std::size_t off = hd * dh;
    for (std::size_t i = 0; i < n; ++i) {
      T* p = probs.data() + (hd * n + i) * m;
      T peak = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < m; ++j) {
        p[j] = detail::dot(Q + i * c + off, K + j * c + off, dh) * inv_sqrt;
        peak = std::max(peak, p[j]);
      }
      T total = T(0);
      for (std::size_t j = 0; j < m; ++j) {
        p[j] = std::exp(p[j] - peak);
        total += p[j];
      }
      T* o = out.data() + i * c + off;
      for (std::size_t j = 0; j < m; ++j) {
        p[j] /= total;
        const T* vr = V + j * c + off;
        for (std::size_t t = 0; t < dh; ++t) o[t] += p[j] * vr[t];
      }
    }
  }
  if (weights_out != nullptr) *weights_out = probs;
  auto qn = q.node(), kn = k.node(), vn = v.node();
  return detail::record<T>(
      "attention", Tensor<T>({n, c}, std::move(out)), {&q, &k, &v},
      [qn, kn, vn, n, m, c, heads, dh, inv_sqrt, probs = std::move(probs)](const std::vector<T>& g) {
        T* gq = detail::sink(qn);
        T* gk = detail::sink(kn);
        T* gv = detail::sink(vn);
        const T* Q = qn->data.data();
        const T* K = kn->data.data();
        const T* V = vn->data.data();
        std::vector<T> dp(m);
        for (std::size_t hd = 0; hd < heads; ++hd) {
          const std::size_t off = hd * dh;
          for (std::size_t i = 0; i < n; ++i) {
            const T* p = probs.data() + (hd * n + i) * m;
            const T* go = g.data() + i * c + off;
            T dot = T(0);
            for (std::size_t j = 0; j < m; ++j) {
              const T s = detail::dot(go, V + j * c + off, dh);
              dp[j] = s;
              dot += s * p[j];
              if (gv != nullptr)
                for (std::size_t t = 0; t < dh; ++t) gv[j * c + off + t] += p[j] * go[t];
            }
            for (std::size_t j = 0; j < m; ++j) {
              const T ds = p[j] * (dp[j] - dot) * inv_sqrt;
              if (ds == T(0)) continue;
              if (gq != nullptr)
                for (std::size_t t = 0; t < dh; ++t) gq[i * c + off + t] += ds * K[j * c + off + t];
              if (gk != nullptr)
                for (std::size_t t = 0; t < dh; ++t) gk[j * c + off + t] += ds * Q[i * c + off + t];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Non-recording helpers

// Circularly shifts the width axis of an (H, W, C) map: out[:, (x + shift) % W] = in[:, x].
template <typename T>
Tensor<T> roll_width(const Tensor<T>& x, long shift) {
  detail::require(x.rank() == 3, "roll_width: input must be HxWxC");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const long wl = static_cast<long>(w);
  const std::size_t s = static_cast<std::size_t>(((shift % wl) + wl) % wl);
  std::vector<T> out(x.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t xx = 0; xx < w; ++xx)
      std::copy_n(x.data().begin() + (y * w + xx) * c, c, out.begin() + (y * w + (xx + s) % w) * c);
  return Tensor<T>(x.shape(), std::move(out));
}

template <typename T>
bool all_finite(const Tensor<T>& x) {
  return std::all_of(x.data().begin(), x.data().end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  T worst = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace w2w
