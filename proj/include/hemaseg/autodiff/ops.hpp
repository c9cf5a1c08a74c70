#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hemaseg/autodiff/tape.hpp"
#include "hemaseg/tensor.hpp"

// Differentiable primitives. Every reduction iterates in a fixed index order so
// results are bit-reproducible for a given build.

namespace hemaseg {

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapM = Eigen::Map<const MatRM<T>>;

/// c (m×n) = op(a) · op(b), optionally accumulating. op(x) = xᵀ when the flag is set.
/// `a` is stored as (ta ? k×m : m×k), `b` as (tb ? n×k : k×n).
template <typename T>
void gemm(const T* a, bool ta, const T* b, bool tb, T* c, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto K = static_cast<Eigen::Index>(k);
  const auto N = static_cast<Eigen::Index>(n);
  MapM<T> C(c, M, N);
  auto run = [&](const auto& A, const auto& B) {
    if (accumulate) {
      C.noalias() += A * B;
    } else {
      C.noalias() = A * B;
    }
  };
  if (!ta && !tb) run(CMapM<T>(a, M, K), CMapM<T>(b, K, N));
  if (!ta && tb) run(CMapM<T>(a, M, K), CMapM<T>(b, N, K).transpose());
  if (ta && !tb) run(CMapM<T>(a, K, M).transpose(), CMapM<T>(b, K, N));
  if (ta && tb) run(CMapM<T>(a, K, M).transpose(), CMapM<T>(b, N, K).transpose());
}

template <typename T>
void accumulate(Tensor<T>& dst, std::span<const T> src) {
  auto d = dst.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
}

/// Layout of a broadcasting binary op: `big` operand index and the period of
/// the small operand (its element count). Broadcasting is only over leading dims.
struct Broadcast {
  Shape out;
  bool a_big = true;
  std::size_t period = 0;
};

inline Shape strip_leading_ones(const Shape& s) {
  std::size_t i = 0;
  while (i + 1 < s.size() && s[i] == 1) ++i;
  return Shape(s.begin() + static_cast<std::ptrdiff_t>(i), s.end());
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline Broadcast broadcast(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return {a, true, numel(a)};
  const Shape sa = strip_leading_ones(a);
  const Shape sb = strip_leading_ones(b);
  if (is_suffix(sb, a)) return {a, true, numel(b)};
  if (is_suffix(sa, b)) return {b, false, numel(a)};
  throw_shape_mismatch(op, a, b);
}

template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo,
            T* cols) {
  const std::size_t plane = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        T* row = cols + ((c * kh + i) * kw + j) * plane;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * stride + i) -
                          static_cast<std::ptrdiff_t>(pad);
          T* dst = row + oh * Wo;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = x + (c * H + static_cast<std::size_t>(ih)) * W;
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * stride + j) -
                            static_cast<std::ptrdiff_t>(pad);
            dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W))
                          ? T(0)
                          : src[static_cast<std::size_t>(iw)];
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters-adds columns back into x.
template <typename T>
void col2im(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo,
            T* x) {
  const std::size_t plane = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        const T* row = cols + ((c * kh + i) * kw + j) * plane;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * stride + i) -
                          static_cast<std::ptrdiff_t>(pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
          T* dst = x + (c * H + static_cast<std::size_t>(ih)) * W;
          const T* src = row + oh * Wo;
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * stride + j) -
                            static_cast<std::ptrdiff_t>(pad);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(W)) {
              dst[static_cast<std::size_t>(iw)] += src[ow];
            }
          }
        }
      }
    }
  }
}

/// out[perm-ordered index] = in[index]; out.shape[i] = in.shape[perm[i]].
template <typename T>
void permute_copy(const T* in, const Shape& in_shape, const std::vector<std::size_t>& perm,
                  T* out, bool accumulate_into_out) {
  const std::size_t r = in_shape.size();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(r);
  std::vector<std::size_t> stride_of_out(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[perm[i]];
    stride_of_out[i] = in_strides[perm[i]];
  }
  const std::size_t n = numel(in_shape);
  if (r == 0) {
    if (n) out[0] = accumulate_into_out ? out[0] + in[0] : in[0];
    return;
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  const std::size_t last = out_shape[r - 1];
  const std::size_t last_stride = stride_of_out[r - 1];
  for (std::size_t o = 0; o < n; o += last) {
    for (std::size_t t = 0; t < last; ++t) {
      const T v = in[src + t * last_stride];
      out[o + t] = accumulate_into_out ? out[o + t] + v : v;
    }
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      src += stride_of_out[d];
      if (idx[d] < out_shape[d]) break;
      src -= stride_of_out[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

template <typename T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <typename T, typename F, typename D>
Var<T> unary(const char* op, Var<T> x, F f, D dfdx) {
  const Tensor<T>& xv = x.value();
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  const std::size_t xi = x.id;
  return x.tape->record(op, std::move(y), {x}, [xi, dfdx](Tape<T>& t, std::size_t self) {
    const Tensor<T>& dy = t.grad_buffer(self);
    const Tensor<T>& xv = t.value(xi);
    const Tensor<T>& yv = t.value(self);
    Tensor<T>& dx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * dfdx(xv[i], yv[i]);
  });
}

template <typename T>
void same_tape(const char* op, Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (broadcast over leading dims only)

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::same_tape("add", a, b);
  const auto bc = detail::broadcast("add", a.shape(), b.shape());
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> y(bc.out);
  const std::size_t n = y.size(), p = bc.period;
  if (bc.a_big) {
    for (std::size_t i = 0; i < n; ++i) y[i] = av[i] + bv[i % p];
  } else {
    for (std::size_t i = 0; i < n; ++i) y[i] = av[i % p] + bv[i];
  }
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record("add", std::move(y), {a, b}, [ai, bi, bc](Tape<T>& t, std::size_t self) {
    const Tensor<T>& dy = t.grad_buffer(self);
    const std::size_t p = bc.period;
    if (t.requires_grad(ai)) {
      Tensor<T>& da = t.grad_buffer(ai);
      for (std::size_t i = 0; i < dy.size(); ++i) da[bc.a_big ? i : i % p] += dy[i];
    }
    if (t.requires_grad(bi)) {
      Tensor<T>& db = t.grad_buffer(bi);
      for (std::size_t i = 0; i < dy.size(); ++i) db[bc.a_big ? i % p : i] += dy[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::same_tape("sub", a, b);
  const auto bc = detail::broadcast("sub", a.shape(), b.shape());
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> y(bc.out);
  const std::size_t n = y.size(), p = bc.period;
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = bc.a_big ? av[i] - bv[i % p] : av[i % p] - bv[i];
  }
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record("sub", std::move(y), {a, b}, [ai, bi, bc](Tape<T>& t, std::size_t self) {
    const Tensor<T>& dy = t.grad_buffer(self);
    const std::size_t p = bc.period;
    if (t.requires_grad(ai)) {
      Tensor<T>& da = t.grad_buffer(ai);
      for (std::size_t i = 0; i < dy.size(); ++i) da[bc.a_big ? i : i % p] += dy[i];
    }
    if (t.requires_grad(bi)) {
      Tensor<T>& db = t.grad_buffer(bi);
      for (std::size_t i = 0; i < dy.size(); ++i) db[bc.a_big ? i % p : i] -= dy[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::same_tape("mul", a, b);
  const auto bc = detail::broadcast("mul", a.shape(), b.shape());
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> y(bc.out);
  const std::size_t n = y.size(), p = bc.period;
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = bc.a_big ? av[i] * bv[i % p] : av[i % p] * bv[i];
  }
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record("mul", std::move(y), {a, b}, [ai, bi, bc](Tape<T>& t, std::size_t self) {
    const Tensor<T>& dy = t.grad_buffer(self);
    const Tensor<T>& av = t.value(ai);
    const Tensor<T>& bv = t.value(bi);
    const std::size_t p = bc.period;
    if (t.requires_grad(ai)) {
      Tensor<T>& da = t.grad_buffer(ai);
      for (std::size_t i = 0; i < dy.size(); ++i) {
        if (bc.a_big) {
          da[i] += dy[i] * bv[i % p];
        } else {
          da[i % p] += dy[i] * bv[i];
        }
      }
    }
    if (t.requires_grad(bi)) {
      Tensor<T>& db = t.grad_buffer(bi);
      for (std::size_t i = 0; i < dy.size(); ++i) {
        if (bc.a_big) {
          db[i % p] += dy[i] * av[i];
        } else {
          db[i] += dy[i] * av[i % p];
        }
      }
    }
  });
}

/// y = s · x for a compile-time-constant scalar s.
template <typename T>
Var<T> scale(Var<T> x, T s) {
  return detail::unary<T>(
      "scale", x, [s](T v) { return s * v; }, [s](T, T) { return s; });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a: [..., M, K]; b: [K, N] (shared) or [..., K, N] with a's leading dims.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::same_tape("matmul", a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) throw_shape_mismatch("matmul", as, bs);
  const std::size_t M = as[as.size() - 2], K = as.back();
  const std::size_t N = bs.back();
  if (bs[bs.size() - 2] != K) throw_shape_mismatch("matmul", as, bs);
  const bool shared = bs.size() == 2;
  std::size_t batch = 1;
  if (!shared) {
    if (bs.size() != as.size() || !std::equal(as.begin(), as.end() - 2, bs.begin())) {
      throw_shape_mismatch("matmul", as, bs);
    }
    batch = numel(Shape(as.begin(), as.end() - 2));
  }
  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(N);
  Tensor<T> y(out_shape);
  const T* ap = a.value().ptr();
  const T* bp = b.value().ptr();
  if (shared) {
    detail::gemm(ap, false, bp, false, y.ptr(), numel(as) / K, K, N, false);
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      detail::gemm(ap + i * M * K, false, bp + i * K * N, false, y.ptr() + i * M * N, M, K, N,
                   false);
    }
  }
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record(
      "matmul", std::move(y), {a, b},
      [ai, bi, shared, batch, M, K, N](Tape<T>& t, std::size_t self) {
        const T* dy = t.grad_buffer(self).ptr();
        const T* av = t.value(ai).ptr();
        const T* bv = t.value(bi).ptr();
        if (shared) {
          const std::size_t rows = t.value(ai).size() / K;
          if (t.requires_grad(ai)) detail::gemm(dy, false, bv, true, t.grad_buffer(ai).ptr(), rows, N, K, true);
          if (t.requires_grad(bi)) detail::gemm(av, true, dy, false, t.grad_buffer(bi).ptr(), K, rows, N, true);
          return;
        }
        for (std::size_t i = 0; i < batch; ++i) {
          if (t.requires_grad(ai)) {
            detail::gemm(dy + i * M * N, false, bv + i * K * N, true,
                         t.grad_buffer(ai).ptr() + i * M * K, M, N, K, true);
          }
          if (t.requires_grad(bi)) {
            detail::gemm(av + i * M * K, true, dy + i * M * N, false,
                         t.grad_buffer(bi).ptr() + i * K * N, K, M, N, true);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> y = x.value().reshaped(std::move(shape));
  const std::size_t xi = x.id;
  return x.tape->record("reshape", std::move(y), {x}, [xi](Tape<T>& t, std::size_t self) {
    detail::accumulate(t.grad_buffer(xi), std::span<const T>(t.grad_buffer(self).data()));
  });
}

template <typename T>
Var<T> permute(Var<T> x, std::vector<std::size_t> perm) {
  const Shape& in = x.shape();
  if (perm.size() != in.size()) throw_shape_mismatch("permute", in, Shape(perm.begin(), perm.end()));
  std::vector<bool> seen(perm.size(), false);
  Shape out(in.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= perm.size() || seen[perm[i]]) {
      throw std::invalid_argument("permute: not a permutation of axes of " + to_string(in));
    }
    seen[perm[i]] = true;
    out[i] = in[perm[i]];
  }
  Tensor<T> y(out);
  detail::permute_copy(x.value().ptr(), in, perm, y.ptr(), false);
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  const std::size_t xi = x.id;
  return x.tape->record("permute", std::move(y), {x}, [xi, inv, out](Tape<T>& t, std::size_t self) {
    detail::permute_copy(t.grad_buffer(self).ptr(), out, inv, t.grad_buffer(xi).ptr(), true);
  });
}

/// Swaps the last two axes.
template <typename T>
Var<T> transpose(Var<T> x) {
  const std::size_t r = x.shape().size();
  if (r < 2) throw ShapeError("transpose: rank < 2, shape " + to_string(x.shape()));
  std::vector<std::size_t> perm(r);
  for (std::size_t i = 0; i < r; ++i) perm[i] = i;
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(x, std::move(perm));
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = xs[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + to_string(s0));
  Shape out = s0;
  out[axis] = 0;
  std::vector<std::size_t> chunk(xs.size());
  bool needs = false;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    detail::same_tape("concat", xs[0], xs[k]);
    const Shape& s = xs[k].shape();
    for (std::size_t d = 0; d < s0.size(); ++d) {
      if (s.size() != s0.size() || (d != axis && s[d] != s0[d])) throw_shape_mismatch("concat", s0, s);
    }
    out[axis] += s[axis];
    chunk[k] = numel(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis), s.end()));
    needs = needs || xs[k].requires_grad();
  }
  const std::size_t outer = numel(Shape(s0.begin(), s0.begin() + static_cast<std::ptrdiff_t>(axis)));
  std::size_t row = 0;
  for (auto c : chunk) row += c;
  Tensor<T> y(out);
  std::size_t off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const T* src = xs[k].value().ptr();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src + o * chunk[k], chunk[k], y.ptr() + o * row + off);
    }
    off += chunk[k];
  }
  std::vector<std::size_t> ids;
  for (const auto& x : xs) ids.push_back(x.id);
  return xs[0].tape->record_if("concat", std::move(y), needs,
                               [ids, chunk, outer, row](Tape<T>& t, std::size_t self) {
    const T* dy = t.grad_buffer(self).ptr();
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        T* dx = t.grad_buffer(ids[k]).ptr();
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = dy + o * row + off;
          T* dst = dx + o * chunk[k];
          for (std::size_t i = 0; i < chunk[k]; ++i) dst[i] += src[i];
        }
      }
      off += chunk[k];
    }
  });
}

/// Selects slices along axis 0; indices may repeat (gradients accumulate).
template <typename T>
Var<T> gather_rows(Var<T> x, std::vector<std::size_t> indices) {
  const Shape& in = x.shape();
  if (in.empty()) throw ShapeError("gather_rows: scalar input");
  const std::size_t rows = in[0];
  const std::size_t width = x.value().size() / std::max<std::size_t>(rows, 1);
  for (auto i : indices) {
    if (i >= rows) {
      throw std::out_of_range("gather_rows: index " + std::to_string(i) + " out of range for " +
                              to_string(in));
    }
  }
  Shape out = in;
  out[0] = indices.size();
  Tensor<T> y(out);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(x.value().ptr() + indices[r] * width, width, y.ptr() + r * width);
  }
  const std::size_t xi = x.id;
  return x.tape->record("gather_rows", std::move(y), {x},
                        [xi, indices = std::move(indices), width](Tape<T>& t, std::size_t self) {
    const T* dy = t.grad_buffer(self).ptr();
    T* dx = t.grad_buffer(xi).ptr();
    for (std::size_t r = 0; r < indices.size(); ++r) {
      for (std::size_t j = 0; j < width; ++j) dx[indices[r] * width + j] += dy[r * width + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Normalizations and activations

template <typename T>
Var<T> softmax(Var<T> x) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() == 0) throw ShapeError("softmax: scalar input");
  const std::size_t n = xv.shape().back(), rows = xv.size() / n;
  Tensor<T> y(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.ptr() + r * n;
    T* out = y.ptr() + r * n;
    const T mx = *std::max_element(in, in + n);
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += (out[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[j] /= s;
  }
  const std::size_t xi = x.id;
  return x.tape->record("softmax", std::move(y), {x}, [xi, n, rows](Tape<T>& t, std::size_t self) {
    const T* dy = t.grad_buffer(self).ptr();
    const T* yv = t.value(self).ptr();
    T* dx = t.grad_buffer(xi).ptr();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += dy[r * n + j] * yv[r * n + j];
      for (std::size_t j = 0; j < n; ++j) dx[r * n + j] += yv[r * n + j] * (dy[r * n + j] - dot);
    }
  });
}

template <typename T>
Var<T> log_softmax(Var<T> x) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() == 0) throw ShapeError("log_softmax: scalar input");
  const std::size_t n = xv.shape().back(), rows = xv.size() / n;
  Tensor<T> y(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.ptr() + r * n;
    T* out = y.ptr() + r * n;
    const T mx = *std::max_element(in, in + n);
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(in[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) out[j] = in[j] - lse;
  }
  const std::size_t xi = x.id;
  return x.tape->record("log_softmax", std::move(y), {x}, [xi, n, rows](Tape<T>& t, std::size_t self) {
    const T* dy = t.grad_buffer(self).ptr();
    const T* yv = t.value(self).ptr();
    T* dx = t.grad_buffer(xi).ptr();
    for (std::size_t r = 0; r < rows; ++r) {
      T s = 0;
      for (std::size_t j = 0; j < n; ++j) s += dy[r * n + j];
      for (std::size_t j = 0; j < n; ++j) dx[r * n + j] += dy[r * n + j] - std::exp(yv[r * n + j]) * s;
    }
  });
}

/// Normalizes over the last axis, then applies per-feature gain and bias.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, double eps) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t n = xv.shape().back(), rows = xv.size() / n;
  if (gamma.shape() != Shape{n}) throw_shape_mismatch("layer_norm", xv.shape(), gamma.shape());
  if (beta.shape() != Shape{n}) throw_shape_mismatch("layer_norm", xv.shape(), beta.shape());
  const T* g = gamma.value().ptr();
  const T* b = beta.value().ptr();
  Tensor<T> y(xv.shape());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.ptr() + r * n;
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= T(n);
    rstd[r] = T(1) / std::sqrt(var + T(eps));
    T* out = y.ptr() + r * n;
    for (std::size_t j = 0; j < n; ++j) out[j] = (in[j] - mean) * rstd[r] * g[j] + b[j];
  }
  const std::size_t xi = x.id, gi = gamma.id, bi = beta.id;
  return x.tape->record(
      "layer_norm", std::move(y), {x, gamma, beta},
      [xi, gi, bi, n, rows, rstd = std::move(rstd)](Tape<T>& t, std::size_t self) {
        const T* dy = t.grad_buffer(self).ptr();
        const T* xv = t.value(xi).ptr();
        const T* g = t.value(gi).ptr();
        T* dx = t.requires_grad(xi) ? t.grad_buffer(xi).ptr() : nullptr;
        T* dg = t.requires_grad(gi) ? t.grad_buffer(gi).ptr() : nullptr;
        T* db = t.requires_grad(bi) ? t.grad_buffer(bi).ptr() : nullptr;
        std::vector<T> xhat(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* in = xv + r * n;
          const T* d = dy + r * n;
          T mean = 0;
          for (std::size_t j = 0; j < n; ++j) mean += in[j];
          mean /= T(n);
          T s1 = 0, s2 = 0;
          for (std::size_t j = 0; j < n; ++j) {
            xhat[j] = (in[j] - mean) * rstd[r];
            const T gd = g[j] * d[j];
            s1 += gd;
            s2 += gd * xhat[j];
          }
          s1 /= T(n);
          s2 /= T(n);
          for (std::size_t j = 0; j < n; ++j) {
            if (dx) dx[r * n + j] += rstd[r] * (g[j] * d[j] - s1 - xhat[j] * s2);
            if (dg) dg[j] += d[j] * xhat[j];
            if (db) db[j] += d[j];
          }
        }
      });
}

/// x: [B, C, ...]; normalizes every (b, c) slice over its remaining axes. No affine.
template <typename T>
Var<T> instance_norm(Var<T> x, double eps = 1e-5) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() < 3) throw ShapeError("instance_norm: expected [B, C, ...], got " + to_string(xv.shape()));
  const std::size_t groups = xv.dim(0) * xv.dim(1);
  const std::size_t n = xv.size() / groups;
  Tensor<T> y(xv.shape());
  std::vector<T> rstd(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    const T* in = xv.ptr() + g * n;
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= T(n);
    rstd[g] = T(1) / std::sqrt(var + T(eps));
    T* out = y.ptr() + g * n;
    for (std::size_t j = 0; j < n; ++j) out[j] = (in[j] - mean) * rstd[g];
  }
  const std::size_t xi = x.id;
  return x.tape->record("instance_norm", std::move(y), {x},
                        [xi, groups, n, rstd = std::move(rstd)](Tape<T>& t, std::size_t self) {
    const T* dy = t.grad_buffer(self).ptr();
    const T* yv = t.value(self).ptr();
    T* dx = t.grad_buffer(xi).ptr();
    for (std::size_t g = 0; g < groups; ++g) {
      const T* d = dy + g * n;
      const T* xh = yv + g * n;
      T s1 = 0, s2 = 0;
      for (std::size_t j = 0; j < n; ++j) {
        s1 += d[j];
        s2 += d[j] * xh[j];
      }
      s1 /= T(n);
      s2 /= T(n);
      for (std::size_t j = 0; j < n; ++j) dx[g * n + j] += rstd[g] * (d[j] - s1 - xh[j] * s2);
    }
  });
}

/// Exact (erf) GELU.
template <typename T>
Var<T> gelu(Var<T> x) {
  return detail::unary<T>(
      "gelu", x, [](T v) { return detail::gelu_value(v); },
      [](T v, T) { return detail::gelu_derivative(v); });
}

template <typename T>
Var<T> relu(Var<T> x) {
  return detail::unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> abs(Var<T> x) {
  return detail::unary<T>(
      "abs", x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Var<T> log(Var<T> x) {
  return detail::unary<T>(
      "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Var<T> exp(Var<T> x) {
  return detail::unary<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

// ---------------------------------------------------------------------------
// Reductions (to a rank-0 scalar)

template <typename T>
Var<T> sum(Var<T> x) {
  T s = 0;
  for (T v : x.value().data()) s += v;
  const std::size_t xi = x.id;
  return x.tape->record("sum", Tensor<T>(Shape{}, std::vector<T>{s}), {x},
                        [xi](Tape<T>& t, std::size_t self) {
    const T g = t.grad_buffer(self)[0];
    for (T& d : t.grad_buffer(xi).data()) d += g;
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ShapeError("mean: empty tensor");
  T s = 0;
  for (T v : x.value().data()) s += v;
  const std::size_t xi = x.id;
  return x.tape->record("mean", Tensor<T>(Shape{}, std::vector<T>{s / T(n)}), {x},
                        [xi, n](Tape<T>& t, std::size_t self) {
    const T g = t.grad_buffer(self)[0] / T(n);
    for (T& d : t.grad_buffer(xi).data()) d += g;
  });
}

// ---------------------------------------------------------------------------
// Convolutions

struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

/// x: [B, C, H, W], w: [O, C, kh, kw], bias: [O]. Zero padding.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::optional<Var<T>> bias, Conv2dGeometry geo = {}) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1]) throw_shape_mismatch("conv2d", xs, ws);
  if (bias && bias->shape() != Shape{ws[0]}) throw_shape_mismatch("conv2d(bias)", ws, bias->shape());
  if (geo.stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  const std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const std::size_t O = ws[0], kh = ws[2], kw = ws[3], s = geo.stride, p = geo.pad;
  if (H + 2 * p < kh || W + 2 * p < kw) throw_shape_mismatch("conv2d", xs, ws);
  const std::size_t Ho = (H + 2 * p - kh) / s + 1, Wo = (W + 2 * p - kw) / s + 1;
  const std::size_t K = C * kh * kw, P = Ho * Wo;
  const bool pointwise = kh == 1 && kw == 1 && s == 1 && p == 0;
  Tensor<T> y(Shape{B, O, Ho, Wo});
  std::vector<T> cols(pointwise ? 0 : K * P);
  for (std::size_t b = 0; b < B; ++b) {
    const T* xb = x.value().ptr() + b * C * H * W;
    const T* colp = xb;
    if (!pointwise) {
      detail::im2col(xb, C, H, W, kh, kw, s, p, Ho, Wo, cols.data());
      colp = cols.data();
    }
    T* yb = y.ptr() + b * O * P;
    detail::gemm(w.value().ptr(), false, colp, false, yb, O, K, P, false);
    if (bias) {
      const T* bv = bias->value().ptr();
      for (std::size_t o = 0; o < O; ++o) {
        for (std::size_t i = 0; i < P; ++i) yb[o * P + i] += bv[o];
      }
    }
  }
  const std::size_t xi = x.id, wi = w.id;
  const std::optional<std::size_t> bi = bias ? std::optional<std::size_t>(bias->id) : std::nullopt;
  const bool needs = x.requires_grad() || w.requires_grad() || (bias && bias->requires_grad());
  return x.tape->record_if("conv2d", std::move(y), needs, [=](Tape<T>& t, std::size_t self) {
    const T* dy = t.grad_buffer(self).ptr();
    const bool want_x = t.requires_grad(xi), want_w = t.requires_grad(wi);
    std::vector<T> cols(pointwise ? 0 : K * P);
    for (std::size_t b = 0; b < B; ++b) {
      const T* dyb = dy + b * O * P;
      if (want_w) {
        const T* xb = t.value(xi).ptr() + b * C * H * W;
        const T* colp = xb;
        if (!pointwise) {
          detail::im2col(xb, C, H, W, kh, kw, s, p, Ho, Wo, cols.data());
          colp = cols.data();
        }
        detail::gemm(dyb, false, colp, true, t.grad_buffer(wi).ptr(), O, P, K, true);
      }
      if (want_x) {
        T* dxb = t.grad_buffer(xi).ptr() + b * C * H * W;
        if (pointwise) {
          detail::gemm(t.value(wi).ptr(), true, dyb, false, dxb, K, O, P, true);
        } else {
          detail::gemm(t.value(wi).ptr(), true, dyb, false, cols.data(), K, O, P, false);
          detail::col2im(cols.data(), C, H, W, kh, kw, s, p, Ho, Wo, dxb);
        }
      }
      if (bi && t.requires_grad(*bi)) {
        T* db = t.grad_buffer(*bi).ptr();
        for (std::size_t o = 0; o < O; ++o) {
          T acc = 0;
          for (std::size_t i = 0; i < P; ++i) acc += dyb[o * P + i];
          db[o] += acc;
        }
      }
    }
  });
}

/// x: [B, Cin, H, W], w: [Cin, O, kh, kw], bias: [O].
/// Output side (H-1)·stride - 2·pad + k. With shared weights this is the
/// adjoint of conv2d under the same geometry.
template <typename T>
Var<T> conv_transpose2d(Var<T> x, Var<T> w, std::optional<Var<T>> bias, Conv2dGeometry geo = {}) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || ws[0] != xs[1]) throw_shape_mismatch("conv_transpose2d", xs, ws);
  if (bias && bias->shape() != Shape{ws[1]}) throw_shape_mismatch("conv_transpose2d(bias)", ws, bias->shape());
  if (geo.stride == 0) throw std::invalid_argument("conv_transpose2d: stride must be positive");
  const std::size_t B = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
  const std::size_t O = ws[1], kh = ws[2], kw = ws[3], s = geo.stride, p = geo.pad;
  if ((H - 1) * s + kh < 2 * p + 1 || (W - 1) * s + kw < 2 * p + 1) throw_shape_mismatch("conv_transpose2d", xs, ws);
  const std::size_t Ho = (H - 1) * s + kh - 2 * p, Wo = (W - 1) * s + kw - 2 * p;
  const std::size_t K = O * kh * kw, P = H * W;
  Tensor<T> y(Shape{B, O, Ho, Wo});
  std::vector<T> cols(K * P);
  for (std::size_t b = 0; b < B; ++b) {
    const T* xb = x.value().ptr() + b * Ci * P;
    detail::gemm(w.value().ptr(), true, xb, false, cols.data(), K, Ci, P, false);
    T* yb = y.ptr() + b * O * Ho * Wo;
    detail::col2im(cols.data(), O, Ho, Wo, kh, kw, s, p, H, W, yb);
    if (bias) {
      const T* bv = bias->value().ptr();
      for (std::size_t o = 0; o < O; ++o) {
        for (std::size_t i = 0; i < Ho * Wo; ++i) yb[o * Ho * Wo + i] += bv[o];
      }
    }
  }
  const std::size_t xi = x.id, wi = w.id;
  const std::optional<std::size_t> bi = bias ? std::optional<std::size_t>(bias->id) : std::nullopt;
  const bool needs = x.requires_grad() || w.requires_grad() || (bias && bias->requires_grad());
  return x.tape->record_if("conv_transpose2d", std::move(y), needs, [=](Tape<T>& t, std::size_t self) {
    const T* dy = t.grad_buffer(self).ptr();
    std::vector<T> cols(K * P);
    for (std::size_t b = 0; b < B; ++b) {
      const T* dyb = dy + b * O * Ho * Wo;
      const bool want_x = t.requires_grad(xi), want_w = t.requires_grad(wi);
      if (want_x || want_w) detail::im2col(dyb, O, Ho, Wo, kh, kw, s, p, H, W, cols.data());
      if (want_x) {
        detail::gemm(t.value(wi).ptr(), false, cols.data(), false,
                     t.grad_buffer(xi).ptr() + b * Ci * P, Ci, K, P, true);
      }
      if (want_w) {
        detail::gemm(t.value(xi).ptr() + b * Ci * P, false, cols.data(), true,
                     t.grad_buffer(wi).ptr(), Ci, P, K, true);
      }
      if (bi && t.requires_grad(*bi)) {
        T* db = t.grad_buffer(*bi).ptr();
        for (std::size_t o = 0; o < O; ++o) {
          T acc = 0;
          for (std::size_t i = 0; i < Ho * Wo; ++i) acc += dyb[o * Ho * Wo + i];
          db[o] += acc;
        }
      }
    }
  });
}

}  // namespace hemaseg
