#ifndef MATRREC_OPS_HPP
#define MATRREC_OPS_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

#include "matrrec/tape.hpp"
#include "matrrec/tensor.hpp"

namespace matrrec::ops {

namespace detail {

template <typename T>
void accumulate(T* dst, const T* src, std::size_t n) {
    if (!dst) return;
    for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T{0}) continue;
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// dA[m,k] += dC[m,n] * B[k,n]^T
template <typename T>
void gemm_nt(const T* dc, const T* b, T* da, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* drow = dc + i * n;
        T* arow = da + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T* brow = b + p * n;
            T acc{0};
            for (std::size_t j = 0; j < n; ++j) acc += drow[j] * brow[j];
            arow[p] += acc;
        }
    }
}

// dB[k,n] += A[m,k]^T * dC[m,n]
template <typename T>
void gemm_tn(const T* a, const T* dc, T* db, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* drow = dc + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T{0}) continue;
            T* brow = db + p * n;
            for (std::size_t j = 0; j < n; ++j) brow[j] += av * drow[j];
        }
    }
}

// Right-aligned broadcast of two shapes; throws on incompatible extents.
inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
    std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
        std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (ea != eb && ea != 1 && eb != 1) {
            throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        out[i] = std::max(ea, eb);
    }
    return out;
}

// For each flat output index, the flat index into a broadcast operand.
inline std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
    std::size_t r = out.size();
    std::vector<std::size_t> stride(r, 0);
    std::size_t s = 1;
    for (std::size_t i = r; i-- > 0;) {
        std::size_t k = i + in.size();
        if (k < r) continue;
        std::size_t extent = in[k - r];
        stride[i] = extent == 1 ? 0 : s;
        s *= extent;
    }
    std::size_t n = numel_of(out);
    std::vector<std::size_t> idx(n);
    std::vector<std::size_t> counter(r, 0);
    std::size_t flat = 0;
    for (std::size_t e = 0; e < n; ++e) {
        idx[e] = flat;
        for (std::size_t d = r; d-- > 0;) {
            ++counter[d];
            flat += stride[d];
            if (counter[d] < out[d]) break;
            flat -= stride[d] * counter[d];
            counter[d] = 0;
        }
    }
    return idx;
}

inline bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

template <typename T>
T normal_cdf(T x) {
    return T(0.5) * std::erfc(-x / std::sqrt(T(2)));
}

template <typename T>
T sigmoid(T x) {
    if (x >= 0) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product [..,m,k] x [..,k,n] -> [..,m,n] with broadcast batch extents.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2 || a.shape()[a.rank() - 1] != b.shape()[b.rank() - 2]) {
        throw DimensionError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t m = a.shape()[a.rank() - 2];
    const std::size_t k = a.shape()[a.rank() - 1];
    const std::size_t n = b.shape()[b.rank() - 1];

    // Fast path: a weight matrix shared by every batch row.
    if (b.rank() == 2) {
        const std::size_t rows = a.numel() / k;
        Shape out_shape = a.shape();
        out_shape.back() = n;
        std::vector<T> out(rows * n, T{0});
        detail::gemm_nn(a.values().data(), b.values().data(), out.data(), rows, k, n);
        auto an = a.node(), bn = b.node();
        return make_result<T>(std::move(out_shape), std::move(out), {a, b}, [an, bn, rows, k, n](Node<T>& y) {
            if (T* ga = an->grad_buffer()) detail::gemm_nt(y.grad.data(), bn->value.data(), ga, rows, k, n);
            if (T* gb = bn->grad_buffer()) detail::gemm_tn(an->value.data(), y.grad.data(), gb, rows, k, n);
        });
    }

    Shape a_batch(a.shape().begin(), a.shape().end() - 2);
    Shape b_batch(b.shape().begin(), b.shape().end() - 2);
    Shape batch;
    try {
        batch = detail::broadcast_shapes(a_batch, b_batch, "matmul");
    } catch (const DimensionError&) {
        throw DimensionError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    auto a_idx = detail::broadcast_index(a_batch, batch);
    auto b_idx = detail::broadcast_index(b_batch, batch);
    const std::size_t nb = numel_of(batch);
    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<T> out(nb * m * n, T{0});
    for (std::size_t i = 0; i < nb; ++i) {
        detail::gemm_nn(a.values().data() + a_idx[i] * m * k, b.values().data() + b_idx[i] * k * n,
                        out.data() + i * m * n, m, k, n);
    }
    auto an = a.node(), bn = b.node();
    return make_result<T>(std::move(out_shape), std::move(out), {a, b},
                          [an, bn, a_idx = std::move(a_idx), b_idx = std::move(b_idx), nb, m, k, n](Node<T>& y) {
                              T* ga = an->grad_buffer();
                              T* gb = bn->grad_buffer();
                              for (std::size_t i = 0; i < nb; ++i) {
                                  const T* dy = y.grad.data() + i * m * n;
                                  if (ga) detail::gemm_nt(dy, bn->value.data() + b_idx[i] * k * n,
                                                          ga + a_idx[i] * m * k, m, k, n);
                                  if (gb) detail::gemm_tn(an->value.data() + a_idx[i] * m * k, dy,
                                                          gb + b_idx[i] * k * n, m, k, n);
                              }
                          });
}

/// Swaps the two trailing axes.
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
    if (x.rank() < 2) throw DimensionError("transpose_last2: rank < 2 for " + shape_str(x.shape()));
    const std::size_t r = x.shape()[x.rank() - 2];
    const std::size_t c = x.shape()[x.rank() - 1];
    const std::size_t nb = x.numel() / (r * c);
    Shape out_shape = x.shape();
    std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
    std::vector<T> out(x.numel());
    auto xv = x.values();
    for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = xv[b * r * c + i * c + j];
    auto xn = x.node();
    return make_result<T>(std::move(out_shape), std::move(out), {x}, [xn, nb, r, c](Node<T>& y) {
        T* gx = xn->grad_buffer();
        for (std::size_t b = 0; b < nb; ++b)
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gx[b * r * c + i * c + j] += y.grad[b * r * c + j * r + i];
    });
}

// ---------------------------------------------------------------------------
// Elementwise

enum class BinaryKind { add, sub, mul };

/// Broadcasting binary op (numpy rules); gradients are reduced over broadcast axes.
template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind) {
    const char* name = kind == BinaryKind::add ? "add" : kind == BinaryKind::sub ? "sub" : "mul";
    Shape out_shape = detail::broadcast_shapes(a.shape(), b.shape(), name);
    const std::size_t n = numel_of(out_shape);
    std::vector<std::size_t> ai, bi;
    bool a_direct = a.shape() == out_shape;
    bool b_modulo = a_direct && detail::is_suffix(b.shape(), out_shape);
    if (!a_direct) ai = detail::broadcast_index(a.shape(), out_shape);
    if (!b_modulo) bi = detail::broadcast_index(b.shape(), out_shape);
    const std::size_t nbv = b.numel();
    auto ia = [&ai, a_direct](std::size_t e) { return a_direct ? e : ai[e]; };
    auto ib = [&bi, b_modulo, nbv](std::size_t e) { return b_modulo ? e % nbv : bi[e]; };

    auto av = a.values();
    auto bv = b.values();
    std::vector<T> out(n);
    for (std::size_t e = 0; e < n; ++e) {
        T x = av[ia(e)], y = bv[ib(e)];
        out[e] = kind == BinaryKind::add ? x + y : kind == BinaryKind::sub ? x - y : x * y;
    }
    auto an = a.node(), bn = b.node();
    return make_result<T>(std::move(out_shape), std::move(out), {a, b},
                          [an, bn, kind, n, nbv, a_direct, b_modulo, ai = std::move(ai), bi = std::move(bi)](Node<T>& y) {
                              T* ga = an->grad_buffer();
                              T* gb = bn->grad_buffer();
                              for (std::size_t e = 0; e < n; ++e) {
                                  const std::size_t ka = a_direct ? e : ai[e];
                                  const std::size_t kb = b_modulo ? e % nbv : bi[e];
                                  const T g = y.grad[e];
                                  switch (kind) {
                                      case BinaryKind::add:
                                          if (ga) ga[ka] += g;
                                          if (gb) gb[kb] += g;
                                          break;
                                      case BinaryKind::sub:
                                          if (ga) ga[ka] += g;
                                          if (gb) gb[kb] -= g;
                                          break;
                                      case BinaryKind::mul:
                                          if (ga) ga[ka] += g * bn->value[kb];
                                          if (gb) gb[kb] += g * an->value[ka];
                                          break;
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary(a, b, BinaryKind::add);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary(a, b, BinaryKind::sub);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary(a, b, BinaryKind::mul);
}

enum class UnaryKind { gelu, silu, softplus, exp, neg };

/// Pointwise activation. GELU is the exact Gaussian-CDF form.
template <typename T>
Tensor<T> unary(const Tensor<T>& x, UnaryKind kind) {
    auto xv = x.values();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const T v = xv[i];
        switch (kind) {
            case UnaryKind::gelu: out[i] = v * detail::normal_cdf(v); break;
            case UnaryKind::silu: out[i] = v * detail::sigmoid(v); break;
            case UnaryKind::softplus: out[i] = std::max(v, T{0}) + std::log1p(std::exp(-std::abs(v))); break;
            case UnaryKind::exp: out[i] = std::exp(v); break;
            case UnaryKind::neg: out[i] = -v; break;
        }
    }
    auto xn = x.node();
    return make_result<T>(x.shape(), std::move(out), {x}, [xn, kind](Node<T>& y) {
        T* gx = xn->grad_buffer();
        const auto& xv = xn->value;
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const T v = xv[i];
            T d{};
            switch (kind) {
                case UnaryKind::gelu: {
                    const T pdf = std::exp(-T(0.5) * v * v) / std::sqrt(T(2) * T(3.14159265358979323846));
                    d = detail::normal_cdf(v) + v * pdf;
                    break;
                }
                case UnaryKind::silu: {
                    const T s = detail::sigmoid(v);
                    d = s * (T(1) + v * (T(1) - s));
                    break;
                }
                case UnaryKind::softplus: d = detail::sigmoid(v); break;
                case UnaryKind::exp: d = y.value[i]; break;
                case UnaryKind::neg: d = T(-1); break;
            }
            gx[i] += y.grad[i] * d;
        }
    });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    return unary(x, UnaryKind::gelu);
}
template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
    return unary(x, UnaryKind::silu);
}
template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
    return unary(x, UnaryKind::softplus);
}
template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    return unary(x, UnaryKind::exp);
}
template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
    return unary(x, UnaryKind::neg);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    std::vector<T> out(x.values().begin(), x.values().end());
    for (auto& v : out) v *= factor;
    auto xn = x.node();
    return make_result<T>(x.shape(), std::move(out), {x}, [xn, factor](Node<T>& y) {
        T* gx = xn->grad_buffer();
        for (std::size_t i = 0; i < y.grad.size(); ++i) gx[i] += factor * y.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Reductions and normalization

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc{0};
    for (T v : x.values()) acc += v;
    auto xn = x.node();
    return make_result<T>(Shape{}, {acc}, {x}, [xn](Node<T>& y) {
        T* gx = xn->grad_buffer();
        for (std::size_t i = 0; i < xn->value.size(); ++i) gx[i] += y.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Numerically stable softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) throw DimensionError("softmax: axis out of range for " + shape_str(x.shape()));
    const auto& s = x.shape();
    const std::size_t n = s[axis];
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t outer = x.numel() / (n * inner);
    auto xv = x.values();
    std::vector<T> out(x.numel());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
            T z{0};
            for (std::size_t j = 0; j < n; ++j) {
                T e = std::exp(xv[base + j * inner] - mx);
                out[base + j * inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
        }
    }
    auto xn = x.node();
    return make_result<T>(s, std::move(out), {x}, [xn, outer, inner, n](Node<T>& y) {
        T* gx = xn->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * n * inner + in;
                T dot{0};
                for (std::size_t j = 0; j < n; ++j) dot += y.grad[base + j * inner] * y.value[base + j * inner];
                for (std::size_t j = 0; j < n; ++j) {
                    const std::size_t k = base + j * inner;
                    gx[k] += y.value[k] * (y.grad[k] - dot);
                }
            }
        }
    });
}

/// Softmax over the last axis restricted to entries with keep[i] != 0.
/// Masked entries get probability 0; a row with no kept entry is all zeros.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& x, std::vector<std::uint8_t> keep) {
    if (keep.size() != x.numel()) {
        throw DimensionError("masked_softmax: mask length " + std::to_string(keep.size()) + " vs " +
                             shape_str(x.shape()));
    }
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.numel() / n;
    auto xv = x.values();
    std::vector<T> out(x.numel(), T{0});
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * n;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (keep[base + j]) mx = std::max(mx, xv[base + j]);
        if (mx == -std::numeric_limits<T>::infinity()) continue;
        T z{0};
        for (std::size_t j = 0; j < n; ++j) {
            if (!keep[base + j]) continue;
            out[base + j] = std::exp(xv[base + j] - mx);
            z += out[base + j];
        }
        for (std::size_t j = 0; j < n; ++j) out[base + j] /= z;
    }
    auto xn = x.node();
    return make_result<T>(x.shape(), std::move(out), {x}, [xn, rows, n](Node<T>& y) {
        T* gx = xn->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t base = r * n;
            T dot{0};
            for (std::size_t j = 0; j < n; ++j) dot += y.grad[base + j] * y.value[base + j];
            for (std::size_t j = 0; j < n; ++j) gx[base + j] += y.value[base + j] * (y.grad[base + j] - dot);
        }
    });
}

/// LayerNorm over the last axis with population variance; eps sits inside the square root.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-12)) {
    if (!(eps > T{0})) throw ConfigError("layer_norm: eps must be positive");
    const std::size_t d = x.shape().back();
    if (gamma.numel() != d || beta.numel() != d) {
        throw DimensionError("layer_norm: affine shapes " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                             " do not match " + shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / d;
    auto xv = x.values();
    auto gv = gamma.values();
    auto bv = beta.values();
    std::vector<T> out(x.numel());
    std::vector<T> xhat(x.numel());
    std::vector<T> rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * d;
        T mu{0};
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<T>(d);
        T var{0};
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<T>(d);
        rstd[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (row[j] - mu) * rstd[r];
            out[r * d + j] = gv[j] * xhat[r * d + j] + bv[j];
        }
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                          [xn, gn, bn, rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& y) {
                              T* gx = xn->grad_buffer();
                              T* gg = gn->grad_buffer();
                              T* gb = bn->grad_buffer();
                              std::vector<T> dxhat(d);
                              for (std::size_t r = 0; r < rows; ++r) {
                                  const T* dy = y.grad.data() + r * d;
                                  const T* xh = xhat.data() + r * d;
                                  T s1{0}, s2{0};
                                  for (std::size_t j = 0; j < d; ++j) {
                                      if (gg) gg[j] += dy[j] * xh[j];
                                      if (gb) gb[j] += dy[j];
                                      dxhat[j] = dy[j] * gn->value[j];
                                      s1 += dxhat[j];
                                      s2 += dxhat[j] * xh[j];
                                  }
                                  if (!gx) continue;
                                  const T inv_d = T(1) / static_cast<T>(d);
                                  for (std::size_t j = 0; j < d; ++j) {
                                      gx[r * d + j] += rstd[r] * (dxhat[j] - inv_d * s1 - xh[j] * inv_d * s2);
                                  }
                              }
                          });
}

// ---------------------------------------------------------------------------
// Sequence primitives

/// Depthwise causal convolution: x[B,L,C], kernel[K,C], bias[C]. Output at t
/// mixes inputs t-K+1..t; positions before 0 read as zero. Kernel row K-1
/// weights the current step.
template <typename T>
Tensor<T> causal_conv1d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias) {
    if (x.rank() != 3 || kernel.rank() != 2 || kernel.dim(1) != x.dim(2) || bias.numel() != x.dim(2)) {
        throw DimensionError("causal_conv1d: incompatible shapes " + shape_str(x.shape()) + ", " +
                             shape_str(kernel.shape()) + ", " + shape_str(bias.shape()));
    }
    const std::size_t nb = x.dim(0), len = x.dim(1), ch = x.dim(2), k = kernel.dim(0);
    auto xv = x.values();
    auto kv = kernel.values();
    auto bv = bias.values();
    std::vector<T> out(x.numel());
    for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t t = 0; t < len; ++t) {
            T* o = out.data() + (b * len + t) * ch;
            for (std::size_t c = 0; c < ch; ++c) o[c] = bv[c];
            for (std::size_t j = 0; j < k; ++j) {
                // kernel row j reads position t - (k-1) + j
                if (t + j + 1 < k) continue;
                const std::size_t src = t + j + 1 - k;
                const T* xi = xv.data() + (b * len + src) * ch;
                const T* kr = kv.data() + j * ch;
                for (std::size_t c = 0; c < ch; ++c) o[c] += kr[c] * xi[c];
            }
        }
    }
    auto xn = x.node(), kn = kernel.node(), bn = bias.node();
    return make_result<T>(x.shape(), std::move(out), {x, kernel, bias}, [xn, kn, bn, nb, len, ch, k](Node<T>& y) {
        T* gx = xn->grad_buffer();
        T* gk = kn->grad_buffer();
        T* gb = bn->grad_buffer();
        for (std::size_t b = 0; b < nb; ++b) {
            for (std::size_t t = 0; t < len; ++t) {
                const T* dy = y.grad.data() + (b * len + t) * ch;
                if (gb)
                    for (std::size_t c = 0; c < ch; ++c) gb[c] += dy[c];
                for (std::size_t j = 0; j < k; ++j) {
                    if (t + j + 1 < k) continue;
                    const std::size_t src = t + j + 1 - k;
                    const std::size_t xo = (b * len + src) * ch;
                    for (std::size_t c = 0; c < ch; ++c) {
                        if (gk) gk[j * ch + c] += dy[c] * xn->value[xo + c];
                        if (gx) gx[xo + c] += dy[c] * kn->value[j * ch + c];
                    }
                }
            }
        }
    });
}

/// Inverted dropout. Evaluation mode and p = 0 return the input unchanged.
template <typename T, typename Rng>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, Rng& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: probability must lie in [0, 1), got " + std::to_string(p));
    if (!training || p == 0.0) return x;
    std::bernoulli_distribution keep(1.0 - p);
    const T factor = static_cast<T>(1.0 / (1.0 - p));
    std::vector<T> mask(x.numel());
    for (auto& m : mask) m = keep(rng) ? factor : T{0};
    std::vector<T> out(x.numel());
    auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
    auto xn = x.node();
    return make_result<T>(x.shape(), std::move(out), {x}, [xn, mask = std::move(mask)](Node<T>& y) {
        T* gx = xn->grad_buffer();
        for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += y.grad[i] * mask[i];
    });
}

// ---------------------------------------------------------------------------
// Indexing and layout

/// Columns [start, start+len) of the last axis.
template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t start, std::size_t len) {
    const std::size_t w = x.shape().back();
    if (len == 0 || start + len > w) {
        throw DimensionError("slice_last: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                             ") outside " + shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / w;
    Shape s = x.shape();
    s.back() = len;
    std::vector<T> out(rows * len);
    auto xv = x.values();
    for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(xv.data() + r * w + start, len, out.data() + r * len);
    auto xn = x.node();
    return make_result<T>(std::move(s), std::move(out), {x}, [xn, rows, w, start, len](Node<T>& y) {
        T* gx = xn->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < len; ++j) gx[r * w + start + j] += y.grad[r * len + j];
    });
}

/// Concatenation along the last axis; leading extents must agree.
template <typename T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_last: no inputs");
    Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (!std::equal(lead.begin(), lead.end(), p.shape().begin()) || p.rank() != lead.size() + 1) {
            throw DimensionError("concat_last: leading shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                                 shape_str(p.shape()));
        }
        total += p.shape().back();
    }
    const std::size_t rows = numel_of(lead);
    std::vector<T> out(rows * total);
    std::vector<std::shared_ptr<Node<T>>> nodes;
    std::vector<std::size_t> widths;
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.shape().back();
        for (std::size_t r = 0; r < rows; ++r) std::copy_n(p.values().data() + r * w, w, out.data() + r * total + off);
        off += w;
        nodes.push_back(p.node());
        widths.push_back(w);
    }
    Shape s = lead;
    s.push_back(total);
    return make_result<T>(std::move(s), std::move(out), parts, [nodes, widths, rows, total](Node<T>& y) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            const std::size_t w = widths[i];
            if (T* g = nodes[i]->grad_buffer()) {
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < w; ++j) g[r * w + j] += y.grad[r * total + off + j];
            }
            off += w;
        }
    });
}

/// Rows [start, start+len) of the first axis.
template <typename T>
Tensor<T> slice_first(const Tensor<T>& x, std::size_t start, std::size_t len) {
    const std::size_t n0 = x.shape().front();
    if (len == 0 || start + len > n0) {
        throw DimensionError("slice_first: range outside " + shape_str(x.shape()));
    }
    const std::size_t stride = x.numel() / n0;
    Shape s = x.shape();
    s.front() = len;
    std::vector<T> out(x.values().begin() + static_cast<std::ptrdiff_t>(start * stride),
                       x.values().begin() + static_cast<std::ptrdiff_t>((start + len) * stride));
    auto xn = x.node();
    return make_result<T>(std::move(s), std::move(out), {x}, [xn, start, stride](Node<T>& y) {
        T* gx = xn->grad_buffer();
        for (std::size_t i = 0; i < y.grad.size(); ++i) gx[start * stride + i] += y.grad[i];
    });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel_of(shape) != x.numel()) {
        throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    std::vector<T> out(x.values().begin(), x.values().end());
    auto xn = x.node();
    return make_result<T>(std::move(shape), std::move(out), {x}, [xn](Node<T>& y) {
        detail::accumulate(xn->grad_buffer(), y.grad.data(), y.grad.size());
    });
}

/// Row lookup table[ids] -> ids.shape + [D]. Row 0 is the padding row and
/// never receives gradient.
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::int32_t> ids, Shape id_shape) {
    if (table.rank() != 2) throw DimensionError("embedding_lookup: table must be rank 2");
    if (numel_of(id_shape) != ids.size()) throw DimensionError("embedding_lookup: id shape mismatch");
    const std::size_t rows = table.dim(0), d = table.dim(1);
    std::vector<T> out(ids.size() * d);
    auto tv = table.values();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
            throw std::out_of_range("embedding_lookup: item id " + std::to_string(ids[i]) +
                                    " outside vocabulary [0, " + std::to_string(rows - 1) + "]");
        }
        std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
    }
    Shape s = std::move(id_shape);
    s.push_back(d);
    auto tn = table.node();
    std::vector<std::int32_t> saved(ids.begin(), ids.end());
    return make_result<T>(std::move(s), std::move(out), {table}, [tn, d, saved = std::move(saved)](Node<T>& y) {
        T* g = tn->grad_buffer();
        for (std::size_t i = 0; i < saved.size(); ++i) {
            if (saved[i] == 0) continue;
            T* row = g + static_cast<std::size_t>(saved[i]) * d;
            for (std::size_t j = 0; j < d; ++j) row[j] += y.grad[i * d + j];
        }
    });
}

/// h[B,L,D] -> [B,D] taking row positions[b] of each sequence.
template <typename T>
Tensor<T> gather_positions(const Tensor<T>& h, std::span<const std::size_t> positions) {
    if (h.rank() != 3 || positions.size() != h.dim(0)) {
        throw DimensionError("gather_positions: expected [B,L,D] with B positions, got " + shape_str(h.shape()));
    }
    const std::size_t nb = h.dim(0), len = h.dim(1), d = h.dim(2);
    std::vector<T> out(nb * d);
    for (std::size_t b = 0; b < nb; ++b) {
        if (positions[b] >= len) throw DimensionError("gather_positions: position beyond sequence length");
        std::copy_n(h.values().data() + (b * len + positions[b]) * d, d, out.data() + b * d);
    }
    auto hn = h.node();
    std::vector<std::size_t> pos(positions.begin(), positions.end());
    return make_result<T>(Shape{nb, d}, std::move(out), {h}, [hn, pos = std::move(pos), len, d](Node<T>& y) {
        T* g = hn->grad_buffer();
        for (std::size_t b = 0; b < pos.size(); ++b)
            for (std::size_t j = 0; j < d; ++j) g[(b * len + pos[b]) * d + j] += y.grad[b * d + j];
    });
}

/// Mean negative log-likelihood over rows of logits[..., C]; classes[r] < 0 marks ignored rows.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> classes) {
    const std::size_t c = logits.shape().back();
    const std::size_t rows = logits.numel() / c;
    if (classes.size() != rows) {
        throw DimensionError("cross_entropy: " + std::to_string(classes.size()) + " targets for " +
                             shape_str(logits.shape()));
    }
    std::size_t valid = 0;
    for (auto k : classes) {
        if (k >= 0) {
            if (static_cast<std::size_t>(k) >= c) throw DimensionError("cross_entropy: class index out of range");
            ++valid;
        }
    }
    if (valid == 0) throw ContractError("cross_entropy: no valid target positions");
    auto lv = logits.values();
    std::vector<T> lse(rows, T{0});
    T total{0};
    for (std::size_t r = 0; r < rows; ++r) {
        if (classes[r] < 0) continue;
        const T* row = lv.data() + r * c;
        T mx = *std::max_element(row, row + c);
        T z{0};
        for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        lse[r] = mx + std::log(z);
        total += lse[r] - row[classes[r]];
    }
    const T inv = T(1) / static_cast<T>(valid);
    auto ln = logits.node();
    std::vector<std::int32_t> cls(classes.begin(), classes.end());
    return make_result<T>(Shape{}, {total * inv}, {logits},
                          [ln, c, inv, cls = std::move(cls), lse = std::move(lse)](Node<T>& y) {
                              T* g = ln->grad_buffer();
                              const T scale = y.grad[0] * inv;
                              for (std::size_t r = 0; r < cls.size(); ++r) {
                                  if (cls[r] < 0) continue;
                                  const T* row = ln->value.data() + r * c;
                                  T* gr = g + r * c;
                                  for (std::size_t j = 0; j < c; ++j) gr[j] += scale * std::exp(row[j] - lse[r]);
                                  gr[cls[r]] -= scale;
                              }
                          });
}

}  // namespace matrrec::ops

#endif  // MATRREC_OPS_HPP
