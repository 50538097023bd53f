#ifndef MATRREC_LAYERS_HPP
#define MATRREC_LAYERS_HPP

#include <cmath>
#include <optional>
#include <random>

#include "matrrec/ops.hpp"

namespace matrrec {

/// Dropout mode and randomness for one forward pass.
struct ForwardContext {
    bool training = false;
    std::mt19937_64* rng = nullptr;

    template <typename T>
    Tensor<T> drop(const Tensor<T>& x, double p) const {
        if (!training || p == 0.0) return ops::dropout(x, p, false, *dummy());
        if (!rng) throw ContractError("ForwardContext: training mode needs a generator");
        return ops::dropout(x, p, true, *rng);
    }

private:
    static std::mt19937_64* dummy() {
        thread_local std::mt19937_64 g{0};
        return &g;
    }
};

template <typename T>
struct NormParams {
    Tensor<T> gamma;
    Tensor<T> beta;
};

/// Item embedding matrix with row 0 reserved for padding, plus the LayerNorm applied after lookup.
template <typename T>
struct EmbeddingTable {
    Tensor<T> table;  // [|V|+1, D]
    NormParams<T> norm;

    std::size_t vocab_size() const { return table.dim(0) - 1; }
    std::size_t dim() const { return table.dim(1); }
};

template <typename T>
struct MambaBlockParams {
    Tensor<T> in_proj;      // [D, 2E]
    Tensor<T> conv_kernel;  // [K, E]
    Tensor<T> conv_bias;    // [E]
    Tensor<T> x_proj;       // [E, dt_rank + 2 d_state]
    Tensor<T> dt_proj;      // [dt_rank, E]
    Tensor<T> dt_bias;      // [E]
    Tensor<T> A_log;        // [E, d_state]
    Tensor<T> D_skip;       // [E]
    Tensor<T> out_proj;     // [E, D]

    std::size_t inner() const { return D_skip.numel(); }
    std::size_t d_state() const { return A_log.dim(1); }
    std::size_t dt_rank() const { return dt_proj.dim(0); }
};

/// Heads are stored side by side: columns [i*d_k, (i+1)*d_k) of W_Q belong to head i.
template <typename T>
struct AttentionParams {
    Tensor<T> W_Q, W_K, W_V;  // [D, h*d_k]
    Tensor<T> W_O;            // [h*d_v, D]
    std::size_t heads = 1;
};

template <typename T>
struct FfnParams {
    Tensor<T> W1, b1, W2, b2;
};

namespace layers {

inline std::size_t dt_rank_for(std::size_t d_model) { return (d_model + 15) / 16; }

// ---------------------------------------------------------------------------
// Initialization

template <typename T>
Tensor<T> normal_param(Shape shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> v(numel_of(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>(std::move(shape), std::move(v), true);
}

template <typename T>
Tensor<T> uniform_param(Shape shape, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> v(numel_of(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>(std::move(shape), std::move(v), true);
}

template <typename T>
NormParams<T> init_norm(std::size_t d) {
    return {Tensor<T>::full({d}, T{1}, true), Tensor<T>::zeros({d}, true)};
}

template <typename T>
EmbeddingTable<T> init_embedding(std::size_t vocab, std::size_t d, std::mt19937_64& rng) {
    auto table = normal_param<T>({vocab + 1, d}, 0.02, rng);
    auto row0 = table.mutable_values().subspan(0, d);
    std::fill(row0.begin(), row0.end(), T{0});
    return {table, init_norm<T>(d)};
}

template <typename T>
MambaBlockParams<T> init_mamba(std::size_t d, std::size_t d_state, std::size_t kernel, std::size_t expand,
                               std::mt19937_64& rng) {
    const std::size_t e = expand * d;
    const std::size_t r = dt_rank_for(d);
    MambaBlockParams<T> p;
    p.in_proj = normal_param<T>({d, 2 * e}, 0.02, rng);
    const double conv_bound = 1.0 / std::sqrt(static_cast<double>(kernel));
    p.conv_kernel = uniform_param<T>({kernel, e}, conv_bound, rng);
    p.conv_bias = uniform_param<T>({e}, conv_bound, rng);
    p.x_proj = normal_param<T>({e, r + 2 * d_state}, 0.02, rng);
    p.dt_proj = normal_param<T>({r, e}, 0.02, rng);
    // softplus(dt_bias) log-uniform in [1e-3, 1e-1]
    std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
    std::vector<T> dtb(e);
    for (auto& b : dtb) {
        const double dt = std::exp(u(rng));
        b = static_cast<T>(dt + std::log(-std::expm1(-dt)));
    }
    p.dt_bias = Tensor<T>({e}, std::move(dtb), true);
    std::vector<T> alog(e * d_state);
    for (std::size_t c = 0; c < e; ++c)
        for (std::size_t s = 0; s < d_state; ++s) alog[c * d_state + s] = static_cast<T>(std::log(double(s + 1)));
    p.A_log = Tensor<T>({e, d_state}, std::move(alog), true);
    p.D_skip = Tensor<T>::full({e}, T{1}, true);
    p.out_proj = normal_param<T>({e, d}, 0.02, rng);
    return p;
}

template <typename T>
AttentionParams<T> init_attention(std::size_t d, std::size_t heads, std::mt19937_64& rng) {
    if (heads == 0 || d % heads != 0) {
        throw ConfigError("attention: head count " + std::to_string(heads) + " must divide d_model " +
                          std::to_string(d));
    }
    AttentionParams<T> p;
    p.W_Q = normal_param<T>({d, d}, 0.02, rng);
    p.W_K = normal_param<T>({d, d}, 0.02, rng);
    p.W_V = normal_param<T>({d, d}, 0.02, rng);
    p.W_O = normal_param<T>({d, d}, 0.02, rng);
    p.heads = heads;
    return p;
}

template <typename T>
FfnParams<T> init_ffn(std::size_t d, std::mt19937_64& rng) {
    return {normal_param<T>({d, 4 * d}, 0.02, rng), Tensor<T>::zeros({4 * d}, true),
            normal_param<T>({4 * d, d}, 0.02, rng), Tensor<T>::zeros({d}, true)};
}

// ---------------------------------------------------------------------------
// Forward building blocks

/// Lookup, then dropout, then LayerNorm. ids is [B,L] row-major, 0 = padding.
template <typename T>
Tensor<T> embed_sequence(std::span<const std::int32_t> ids, std::size_t batch, std::size_t len,
                         const EmbeddingTable<T>& emb, double p_drop, const ForwardContext& ctx) {
    auto h = ops::embedding_lookup(emb.table, ids, Shape{batch, len});
    h = ctx.drop(h, p_drop);
    return ops::layer_norm(h, emb.norm.gamma, emb.norm.beta);
}

/// Selective state-space recurrence, sequential over time and independent per channel:
///   h_t = exp(delta_t A) * h_{t-1} + delta_t B_t u_t,   y_t = <C_t, h_t> + D u_t.
/// u, delta: [B,L,E]; A: [E,S]; B_in, C: [B,L,S]; D_skip: [E].
/// Backward recomputes the hidden states per channel instead of storing them.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& A, const Tensor<T>& B_in,
                         const Tensor<T>& C, const Tensor<T>& D_skip) {
    if (u.rank() != 3 || delta.shape() != u.shape() || A.rank() != 2 || A.dim(0) != u.dim(2) ||
        B_in.rank() != 3 || C.shape() != B_in.shape() || B_in.dim(0) != u.dim(0) || B_in.dim(1) != u.dim(1) ||
        B_in.dim(2) != A.dim(1) || D_skip.numel() != u.dim(2)) {
        throw DimensionError("selective_scan: incompatible shapes u" + shape_str(u.shape()) + " delta" +
                             shape_str(delta.shape()) + " A" + shape_str(A.shape()) + " B" +
                             shape_str(B_in.shape()) + " C" + shape_str(C.shape()));
    }
    for (T d : delta.values()) {
        if (d < T{0}) throw ContractError("selective_scan: delta must be positive");
        if (!(d > T{0}) || !std::isfinite(d)) throw NumericError("selective_scan: step size is zero or not finite");
    }
    const std::size_t nb = u.dim(0), len = u.dim(1), ch = u.dim(2), ns = A.dim(1);
    const T* uv = u.values().data();
    const T* dv = delta.values().data();
    const T* av = A.values().data();
    const T* bv = B_in.values().data();
    const T* cv = C.values().data();
    const T* skip = D_skip.values().data();
    std::vector<T> out(u.numel());
    std::vector<T> h(ns);
    for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t c = 0; c < ch; ++c) {
            std::fill(h.begin(), h.end(), T{0});
            const T* arow = av + c * ns;
            for (std::size_t t = 0; t < len; ++t) {
                const std::size_t i = (b * len + t) * ch + c;
                const T* bt = bv + (b * len + t) * ns;
                const T* ct = cv + (b * len + t) * ns;
                const T dt = dv[i], x = uv[i];
                T y{0};
                for (std::size_t s = 0; s < ns; ++s) {
                    h[s] = std::exp(dt * arow[s]) * h[s] + dt * bt[s] * x;
                    y += ct[s] * h[s];
                }
                out[i] = y + skip[c] * x;
            }
        }
    }
    auto un = u.node(), dn = delta.node(), an = A.node(), bn = B_in.node(), cn = C.node(), sn = D_skip.node();
    return make_result<T>(u.shape(), std::move(out), {u, delta, A, B_in, C, D_skip},
                          [un, dn, an, bn, cn, sn, nb, len, ch, ns](Node<T>& y) {
                              T* gu = un->grad_buffer();
                              T* gd = dn->grad_buffer();
                              T* ga = an->grad_buffer();
                              T* gbi = bn->grad_buffer();
                              T* gc = cn->grad_buffer();
                              T* gs = sn->grad_buffer();
                              const T* uv = un->value.data();
                              const T* dv = dn->value.data();
                              const T* av = an->value.data();
                              const T* bv = bn->value.data();
                              const T* cv = cn->value.data();
                              const T* skip = sn->value.data();
                              // states[t+1] = h_t, states[0] = 0
                              std::vector<T> states((len + 1) * ns);
                              std::vector<T> decay(len * ns);
                              std::vector<T> dh(ns);
                              for (std::size_t b = 0; b < nb; ++b) {
                                  for (std::size_t c = 0; c < ch; ++c) {
                                      const T* arow = av + c * ns;
                                      std::fill(states.begin(), states.begin() + ns, T{0});
                                      for (std::size_t t = 0; t < len; ++t) {
                                          const std::size_t i = (b * len + t) * ch + c;
                                          const T* bt = bv + (b * len + t) * ns;
                                          for (std::size_t s = 0; s < ns; ++s) {
                                              const T a = std::exp(dv[i] * arow[s]);
                                              decay[t * ns + s] = a;
                                              states[(t + 1) * ns + s] = a * states[t * ns + s] + dv[i] * bt[s] * uv[i];
                                          }
                                      }
                                      std::fill(dh.begin(), dh.end(), T{0});
                                      for (std::size_t t = len; t-- > 0;) {
                                          const std::size_t i = (b * len + t) * ch + c;
                                          const std::size_t row = (b * len + t) * ns;
                                          const T g = y.grad[i];
                                          const T dt = dv[i], x = uv[i];
                                          const T* ht = states.data() + (t + 1) * ns;
                                          const T* hp = states.data() + t * ns;
                                          T du = g * skip[c];
                                          T ddt{0};
                                          if (gs) gs[c] += g * x;
                                          for (std::size_t s = 0; s < ns; ++s) {
                                              if (gc) gc[row + s] += g * ht[s];
                                              dh[s] += g * cv[row + s];
                                              const T a = decay[t * ns + s];
                                              const T bts = bv[row + s];
                                              ddt += dh[s] * (hp[s] * a * arow[s] + bts * x);
                                              if (ga) ga[c * ns + s] += dh[s] * hp[s] * a * dt;
                                              if (gbi) gbi[row + s] += dh[s] * dt * x;
                                              du += dh[s] * dt * bts;
                                              dh[s] *= a;
                                          }
                                          if (gu) gu[i] += du;
                                          if (gd) gd[i] += ddt;
                                      }
                                  }
                              }
                          });
}

/// in_proj -> (x, z); x -> causal conv -> SiLU -> (delta, B, C) -> scan; gate by SiLU(z); out_proj.
template <typename T>
Tensor<T> mamba_block(const Tensor<T>& X, const MambaBlockParams<T>& p) {
    const std::size_t e = p.inner(), r = p.dt_rank(), ns = p.d_state();
    auto xz = ops::matmul(X, p.in_proj);
    auto x = ops::slice_last(xz, 0, e);
    auto z = ops::slice_last(xz, e, e);
    auto xc = ops::silu(ops::causal_conv1d(x, p.conv_kernel, p.conv_bias));
    auto dbc = ops::matmul(xc, p.x_proj);
    auto dt = ops::slice_last(dbc, 0, r);
    auto b_in = ops::slice_last(dbc, r, ns);
    auto c_out = ops::slice_last(dbc, r + ns, ns);
    auto delta = ops::softplus(ops::add(ops::matmul(dt, p.dt_proj), p.dt_bias));
    auto A = ops::neg(ops::exp(p.A_log));
    auto y = selective_scan(xc, delta, A, b_in, c_out, p.D_skip);
    y = ops::mul(y, ops::silu(z));
    return ops::matmul(y, p.out_proj);
}

/// Keep-mask [B,L,L] for causal self-attention over right-padded rows.
inline std::vector<std::uint8_t> attention_keep_mask(std::size_t batch, std::size_t len,
                                                     std::span<const std::size_t> lengths, bool causal = true) {
    std::vector<std::uint8_t> keep(batch * len * len, 0);
    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t valid = lengths.empty() ? len : lengths[b];
        for (std::size_t i = 0; i < len; ++i)
            for (std::size_t j = 0; j < len; ++j)
                keep[(b * len + i) * len + j] = (j < valid) && (!causal || j <= i);
    }
    return keep;
}

/// Concat(head_1..head_h) W_O with head_i = softmax(Q_i K_i^T / sqrt(d_k)) V_i.
/// Future positions and padding keys are excluded; `lengths` may be empty (no padding).
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& X, const AttentionParams<T>& p, std::span<const std::size_t> lengths,
                               std::vector<Tensor<T>>* weights_out = nullptr) {
    if (X.rank() != 3) throw DimensionError("multi_head_attention: expected [B,L,D], got " + shape_str(X.shape()));
    const std::size_t nb = X.dim(0), len = X.dim(1), d = X.dim(2);
    const std::size_t dk = d / p.heads;
    auto q = ops::matmul(X, p.W_Q);
    auto k = ops::matmul(X, p.W_K);
    auto v = ops::matmul(X, p.W_V);
    const auto keep = attention_keep_mask(nb, len, lengths);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));
    std::vector<Tensor<T>> heads;
    for (std::size_t h = 0; h < p.heads; ++h) {
        auto qh = ops::slice_last(q, h * dk, dk);
        auto kh = ops::slice_last(k, h * dk, dk);
        auto vh = ops::slice_last(v, h * dk, dk);
        auto scores = ops::scale(ops::matmul(qh, ops::transpose_last2(kh)), inv_sqrt);
        auto w = ops::masked_softmax(scores, keep);
        if (weights_out) weights_out->push_back(w);
        heads.push_back(ops::matmul(w, vh));
    }
    auto cat = heads.size() == 1 ? heads.front() : ops::concat_last(heads);
    return ops::matmul(cat, p.W_O);
}

/// GELU(H W1 + b1) W2 + b2, position-wise.
template <typename T>
Tensor<T> feed_forward(const Tensor<T>& H, const FfnParams<T>& p) {
    auto inner = ops::gelu(ops::add(ops::matmul(H, p.W1), p.b1));
    return ops::add(ops::matmul(inner, p.W2), p.b2);
}

/// Post-norm residual: LayerNorm(x + dropout(sublayer_out)). Without the
/// residual path the skip term is dropped.
template <typename T>
Tensor<T> residual_norm(const Tensor<T>& x, const Tensor<T>& sublayer_out, const NormParams<T>& norm, double p_drop,
                        const ForwardContext& ctx, bool residual = true) {
    if (x.shape() != sublayer_out.shape()) {
        throw DimensionError("residual_norm: shape mismatch " + shape_str(x.shape()) + " vs " +
                             shape_str(sublayer_out.shape()));
    }
    auto s = ctx.drop(sublayer_out, p_drop);
    return ops::layer_norm(residual ? ops::add(x, s) : s, norm.gamma, norm.beta);
}

/// Logits H W_h + b_h; softmax is left to the consumer.
template <typename T>
Tensor<T> predict_scores(const Tensor<T>& h, const Tensor<T>& W_h, const Tensor<T>& b_h) {
    return ops::add(ops::matmul(h, W_h), b_h);
}

}  // namespace layers
}  // namespace matrrec

#endif  // MATRREC_LAYERS_HPP
