#pragma once

#include "tensor.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace stiv {

inline constexpr double kNormEps = 1e-6;

// y = gain ⊙ x / sqrt(mean(x²) + eps), mean taken over groups of the last
// axis (n_groups > 1 gives per-head RMSNorm).
template <class S>
TensorBase<S> rms_norm(const TensorBase<S>& x, const TensorBase<S>& gain, int64_t n_groups = 1) {
    int64_t d = x.dim(-1);
    if (gain.numel() != d) throw std::invalid_argument("rms_norm: gain size mismatch");
    if (d % n_groups != 0) throw std::invalid_argument("rms_norm: groups must divide feature dim");
    int64_t gsz = d / n_groups;
    auto out = TensorBase<S>(detail::alloc_node<S>(x.shape(), "rms_norm"));
    int64_t rows = x.numel() / d;
    const auto& xd = x.data();
    const auto& gd = gain.data();
    auto& od = out.data();
    std::vector<S> inv(static_cast<size_t>(rows * n_groups));
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t g = 0; g < n_groups; ++g) {
            const S* xp = &xd[static_cast<size_t>(r * d + g * gsz)];
            S ms = 0;
            for (int64_t j = 0; j < gsz; ++j) ms += xp[j] * xp[j];
            ms = ms / static_cast<S>(gsz) + static_cast<S>(kNormEps);
            S iv = S(1) / std::sqrt(ms);
            inv[static_cast<size_t>(r * n_groups + g)] = iv;
            S* op = &od[static_cast<size_t>(r * d + g * gsz)];
            for (int64_t j = 0; j < gsz; ++j) op[j] = gd[static_cast<size_t>(g * gsz + j)] * xp[j] * iv;
        }
    }
    auto xn = x.n, gn = gain.n;
    detail::wire<S>(out, {x, gain}, [xn, gn, rows, n_groups, gsz, d, inv](typename TensorBase<S>::Node& self) {
        bool need_x = xn->requires_grad, need_g = gn->requires_grad;
        if (need_x) xn->ensure_grad();
        if (need_g) gn->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            for (int64_t g = 0; g < n_groups; ++g) {
                int64_t base = r * d + g * gsz;
                S iv = inv[static_cast<size_t>(r * n_groups + g)];
                const S* xp = &xn->data[static_cast<size_t>(base)];
                const S* gr = &self.grad[static_cast<size_t>(base)];
                const S* gp = &gn->data[static_cast<size_t>(g * gsz)];
                if (need_g) {
                    for (int64_t j = 0; j < gsz; ++j)
                        gn->grad[static_cast<size_t>(g * gsz + j)] += gr[j] * xp[j] * iv;
                }
                if (need_x) {
                    S dot = 0;
                    for (int64_t j = 0; j < gsz; ++j) dot += gr[j] * gp[j] * xp[j];
                    S c = dot * iv * iv * iv / static_cast<S>(gsz);
                    S* dst = &xn->grad[static_cast<size_t>(base)];
                    for (int64_t j = 0; j < gsz; ++j) dst[j] += gr[j] * gp[j] * iv - c * xp[j];
                }
            }
        }
    });
    return out;
}

// Zero-mean unit-variance per vector over the last axis; no learned affine.
template <class S>
TensorBase<S> stateless_layer_norm(const TensorBase<S>& x) {
    auto m = mean_last(x);
    auto centered = sub(x, m);
    auto var = mean_last(mul(centered, centered));
    return mul(centered, rsqrt_t(add_scalar(var, static_cast<S>(kNormEps))));
}

// ----------------------------------- RoPE ----------------------------------

enum class RopeKind { temporal_1d, spatial_2d };

// Precomputed rotation angles per position. position_scale = 1 is the
// identity schedule; old_len/new_len interpolates a longer axis back onto the
// trained one.
struct RopeTable {
    RopeKind kind = RopeKind::temporal_1d;
    int64_t head_dim = 0;
    double base = 10000.0;
    double position_scale = 1.0;

    RopeTable() = default;
    RopeTable(RopeKind k, int64_t hd, double b = 10000.0, double scale = 1.0)
        : kind(k), head_dim(hd), base(b), position_scale(scale) {
        if (hd % 2 != 0) throw std::invalid_argument("RopeTable: head_dim must be even");
        if (k == RopeKind::spatial_2d && hd % 4 != 0)
            throw std::invalid_argument("RopeTable: spatial_2d head_dim must be divisible by 4");
    }

    // cos/sin arrays of length n_positions * head_dim/2 (pairs (2j, 2j+1)).
    template <class S>
    void build_1d(const std::vector<double>& positions, std::vector<S>& cs, std::vector<S>& sn) const {
        int64_t pairs = head_dim / 2;
        cs.resize(positions.size() * static_cast<size_t>(pairs));
        sn.resize(cs.size());
        for (size_t p = 0; p < positions.size(); ++p) {
            double pos = positions[p] * position_scale;
            for (int64_t j = 0; j < pairs; ++j) {
                double freq = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(head_dim));
                double a = pos * freq;
                cs[p * static_cast<size_t>(pairs) + static_cast<size_t>(j)] = static_cast<S>(std::cos(a));
                sn[p * static_cast<size_t>(pairs) + static_cast<size_t>(j)] = static_cast<S>(std::sin(a));
            }
        }
    }

    // First half of the pairs rotates by row, second half by column.
    template <class S>
    void build_2d(const std::vector<std::pair<double, double>>& positions, std::vector<S>& cs,
                  std::vector<S>& sn) const {
        int64_t pairs = head_dim / 2;
        int64_t axis_pairs = pairs / 2;
        int64_t axis_dim = head_dim / 2;
        cs.resize(positions.size() * static_cast<size_t>(pairs));
        sn.resize(cs.size());
        for (size_t p = 0; p < positions.size(); ++p) {
            for (int64_t j = 0; j < pairs; ++j) {
                double pos = (j < axis_pairs ? positions[p].first : positions[p].second) * position_scale;
                int64_t jj = j % axis_pairs;
                double freq = std::pow(base, -2.0 * static_cast<double>(jj) / static_cast<double>(axis_dim));
                double a = pos * freq;
                cs[p * static_cast<size_t>(pairs) + static_cast<size_t>(j)] = static_cast<S>(std::cos(a));
                sn[p * static_cast<size_t>(pairs) + static_cast<size_t>(j)] = static_cast<S>(std::sin(a));
            }
        }
    }
};

// Rotates each head's dim pairs by the per-position angles. x: [..., N, D]
// with D = n_heads * head_dim; cs/sn: [N, head_dim/2].
template <class S>
TensorBase<S> rope_apply(const TensorBase<S>& x, const std::vector<S>& cs, const std::vector<S>& sn,
                         int64_t n_heads) {
    int64_t d = x.dim(-1);
    int64_t hd = d / n_heads;
    if (d % n_heads != 0 || hd % 2 != 0) throw std::invalid_argument("rope_apply: head_dim parity violation");
    int64_t pairs = hd / 2;
    int64_t n_pos = x.dim(-2);
    if (static_cast<int64_t>(cs.size()) != n_pos * pairs) throw std::invalid_argument("rope_apply: table size");
    auto out = TensorBase<S>(detail::alloc_node<S>(x.shape(), "rope"));
    int64_t batch = x.numel() / (n_pos * d);
    const auto& xd = x.data();
    auto& od = out.data();
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t p = 0; p < n_pos; ++p) {
            const S* cp = &cs[static_cast<size_t>(p * pairs)];
            const S* sp = &sn[static_cast<size_t>(p * pairs)];
            const S* xp = &xd[static_cast<size_t>((b * n_pos + p) * d)];
            S* op = &od[static_cast<size_t>((b * n_pos + p) * d)];
            for (int64_t h = 0; h < n_heads; ++h)
                for (int64_t j = 0; j < pairs; ++j) {
                    S x0 = xp[h * hd + 2 * j], x1 = xp[h * hd + 2 * j + 1];
                    op[h * hd + 2 * j] = x0 * cp[j] - x1 * sp[j];
                    op[h * hd + 2 * j + 1] = x0 * sp[j] + x1 * cp[j];
                }
        }
    auto xn = x.n;
    detail::wire<S>(out, {x}, [xn, cs, sn, batch, n_pos, d, n_heads, hd, pairs](typename TensorBase<S>::Node& self) {
        xn->ensure_grad();
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t p = 0; p < n_pos; ++p) {
                const S* cp = &cs[static_cast<size_t>(p * pairs)];
                const S* sp = &sn[static_cast<size_t>(p * pairs)];
                const S* gp = &self.grad[static_cast<size_t>((b * n_pos + p) * d)];
                S* dst = &xn->grad[static_cast<size_t>((b * n_pos + p) * d)];
                for (int64_t h = 0; h < n_heads; ++h)
                    for (int64_t j = 0; j < pairs; ++j) {
                        S g0 = gp[h * hd + 2 * j], g1 = gp[h * hd + 2 * j + 1];
                        dst[h * hd + 2 * j] += g0 * cp[j] + g1 * sp[j];
                        dst[h * hd + 2 * j + 1] += -g0 * sp[j] + g1 * cp[j];
                    }
            }
    });
    return out;
}

// -------------------------------- attention --------------------------------

template <class S>
TensorBase<S> linear_weight(RngState& rng, int64_t in, int64_t out, double std_dev = 0.02) {
    auto w = TensorBase<S>::gaussian(rng, {in, out});
    for (auto& v : w.data()) v = static_cast<S>(v * std_dev);
    return w;
}

template <class S>
struct AttentionParams {
    int64_t n_heads = 1;
    int64_t head_dim = 1;
    bool causal = false;
    bool qk_norm = true;
    TensorBase<S> wq, wk, wv, wo;  // wk/wv: [kv_dim, D]
    TensorBase<S> bq, bk, bv, bo;
    TensorBase<S> q_gain, k_gain;  // per-head RMSNorm gains, [D]

    static AttentionParams init(RngState& rng, int64_t hidden, int64_t n_heads, int64_t kv_dim = -1,
                                bool causal = false, bool zero_out_proj = false) {
        if (kv_dim < 0) kv_dim = hidden;
        if (hidden % n_heads != 0) throw std::invalid_argument("attention: n_heads must divide hidden dim");
        AttentionParams p;
        p.n_heads = n_heads;
        p.head_dim = hidden / n_heads;
        p.causal = causal;
        p.wq = linear_weight<S>(rng, hidden, hidden);
        p.wk = linear_weight<S>(rng, kv_dim, hidden);
        p.wv = linear_weight<S>(rng, kv_dim, hidden);
        p.wo = zero_out_proj ? TensorBase<S>::zeros({hidden, hidden}) : linear_weight<S>(rng, hidden, hidden);
        p.bq = TensorBase<S>::zeros({hidden});
        p.bk = TensorBase<S>::zeros({hidden});
        p.bv = TensorBase<S>::zeros({hidden});
        p.bo = TensorBase<S>::zeros({hidden});
        p.q_gain = TensorBase<S>::ones({hidden});
        p.k_gain = TensorBase<S>::ones({hidden});
        return p;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".wq", wq);
        f(prefix + ".wk", wk);
        f(prefix + ".wv", wv);
        f(prefix + ".wo", wo);
        f(prefix + ".bq", bq);
        f(prefix + ".bk", bk);
        f(prefix + ".bv", bv);
        f(prefix + ".bo", bo);
        f(prefix + ".q_gain", q_gain);
        f(prefix + ".k_gain", k_gain);
    }
};

// Multi-head attention. x_q: [B, Nq, D]; x_kv: [B, Nk, kv_dim]. Optional RoPE
// rotates q and k with the same table. Causal restricts to non-future keys.
template <class S>
TensorBase<S> attention(const TensorBase<S>& x_q, const TensorBase<S>& x_kv, const AttentionParams<S>& p,
                        const std::vector<S>* rope_cos = nullptr, const std::vector<S>* rope_sin = nullptr) {
    int64_t B = x_q.dim(0), Nq = x_q.dim(1), Nk = x_kv.dim(1);
    int64_t D = p.n_heads * p.head_dim;
    auto q = add(matmul(x_q, p.wq), p.bq);
    auto k = add(matmul(x_kv, p.wk), p.bk);
    auto v = add(matmul(x_kv, p.wv), p.bv);
    if (p.qk_norm) {
        q = rms_norm(q, p.q_gain, p.n_heads);
        k = rms_norm(k, p.k_gain, p.n_heads);
    }
    if (rope_cos) {
        q = rope_apply(q, *rope_cos, *rope_sin, p.n_heads);
        k = rope_apply(k, *rope_cos, *rope_sin, p.n_heads);
    }
    auto split = [&](const TensorBase<S>& t, int64_t N) {
        return reshape(permute(reshape(t, {B, N, p.n_heads, p.head_dim}), {0, 2, 1, 3}),
                       {B * p.n_heads, N, p.head_dim});
    };
    auto qh = split(q, Nq), kh = split(k, Nk), vh = split(v, Nk);
    auto logits = scale(matmul(qh, kh, /*transpose_b=*/true), static_cast<S>(1.0 / std::sqrt(double(p.head_dim))));
    if (p.causal) {
        auto mask = TensorBase<S>::zeros({Nq, Nk});
        for (int64_t i = 0; i < Nq; ++i)
            for (int64_t j = i + 1; j < Nk; ++j) mask.data()[static_cast<size_t>(i * Nk + j)] = S(-1e9);
        logits = add(logits, mask);
    }
    auto att = softmax_last(logits);
    auto ctx = matmul(att, vh);  // [B*H, Nq, hd]
    auto merged = reshape(permute(reshape(ctx, {B, p.n_heads, Nq, p.head_dim}), {0, 2, 1, 3}), {B, Nq, D});
    return add(matmul(merged, p.wo), p.bo);
}

// ----------------------------- sandwich sublayer ----------------------------

// Per-feature scale/shift/gate driving a sublayer; identity means
// scale=1, shift=0, gate=1.
template <class S>
struct Modulation {
    bool identity = true;
    TensorBase<S> scale, shift, gate;

    static Modulation none() { return Modulation{}; }
    static Modulation of(TensorBase<S> scale_, TensorBase<S> shift_, TensorBase<S> gate_) {
        return Modulation{false, std::move(scale_), std::move(shift_), std::move(gate_)};
    }
};

// Learned gains of the pre/post stateless norms inside a sandwich sublayer.
template <class S>
struct SandwichParams {
    TensorBase<S> pre_gain, post_gain;

    static SandwichParams init(int64_t hidden) {
        return SandwichParams{TensorBase<S>::ones({hidden}), TensorBase<S>::ones({hidden})};
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".pre_gain", pre_gain);
        f(prefix + ".post_gain", post_gain);
    }
};

// x + gate ⊙ norm(inner(scale ⊙ norm(x) + shift))
template <class S>
TensorBase<S> sandwich_sublayer(const TensorBase<S>& x, const SandwichParams<S>& sw, const Modulation<S>& mod,
                                const std::function<TensorBase<S>(const TensorBase<S>&)>& inner) {
    auto h = mul(stateless_layer_norm(x), sw.pre_gain);
    if (!mod.identity) h = add(mul(h, mod.scale), mod.shift);
    auto y = mul(stateless_layer_norm(inner(h)), sw.post_gain);
    if (!mod.identity) y = mul(y, mod.gate);
    return add(x, y);
}

// ----------------------------------- FFN -----------------------------------

template <class S>
struct FfnParams {
    TensorBase<S> w1, b1, w2, b2;

    static FfnParams init(RngState& rng, int64_t hidden, int64_t expansion = 4) {
        FfnParams p;
        p.w1 = linear_weight<S>(rng, hidden, hidden * expansion);
        p.b1 = TensorBase<S>::zeros({hidden * expansion});
        p.w2 = linear_weight<S>(rng, hidden * expansion, hidden);
        p.b2 = TensorBase<S>::zeros({hidden});
        return p;
    }

    TensorBase<S> forward(const TensorBase<S>& x) const {
        return add(matmul(gelu(add(matmul(x, w1), b1)), w2), b2);
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".w1", w1);
        f(prefix + ".b1", b1);
        f(prefix + ".w2", w2);
        f(prefix + ".b2", b2);
    }
};

// ------------------------------- STIV block --------------------------------

// One transformer block: spatial self-attention -> temporal self-attention
// -> text cross-attention -> FFN, all residual sandwich sublayers. Spatial
// and FFN take the shared AdaLN modulation; temporal and cross run with
// identity modulation. Cross-attention output projection starts at zero so a
// fresh text path is a no-op.
template <class S>
struct StivBlock {
    bool has_temporal = true;
    AttentionParams<S> spatial_attn, temporal_attn, cross_attn;
    FfnParams<S> ffn;
    SandwichParams<S> sw_spatial, sw_temporal, sw_cross, sw_ffn;

    static StivBlock init(RngState& rng, int64_t hidden, int64_t n_heads, int64_t text_dim, bool temporal,
                          bool causal_temporal) {
        StivBlock b;
        b.has_temporal = temporal;
        b.spatial_attn = AttentionParams<S>::init(rng, hidden, n_heads);
        if (temporal)
            b.temporal_attn = AttentionParams<S>::init(rng, hidden, n_heads, -1, causal_temporal,
                                                       /*zero_out_proj=*/true);
        b.cross_attn = AttentionParams<S>::init(rng, hidden, n_heads, text_dim, false, /*zero_out_proj=*/true);
        b.ffn = FfnParams<S>::init(rng, hidden);
        b.sw_spatial = SandwichParams<S>::init(hidden);
        if (temporal) b.sw_temporal = SandwichParams<S>::init(hidden);
        b.sw_cross = SandwichParams<S>::init(hidden);
        b.sw_ffn = SandwichParams<S>::init(hidden);
        return b;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        spatial_attn.visit(prefix + ".spatial_attn", f);
        sw_spatial.visit(prefix + ".sw_spatial", f);
        if (has_temporal) {
            temporal_attn.visit(prefix + ".temporal_attn", f);
            sw_temporal.visit(prefix + ".sw_temporal", f);
        }
        cross_attn.visit(prefix + ".cross_attn", f);
        sw_cross.visit(prefix + ".sw_cross", f);
        ffn.visit(prefix + ".ffn", f);
        sw_ffn.visit(prefix + ".sw_ffn", f);
    }
};

// Spatial self-attention over each frame: the temporal axis folds into the
// batch, so no information crosses frames.
template <class S>
TensorBase<S> spatial_attention(const TensorBase<S>& tokens_tsd, const AttentionParams<S>& p,
                                const std::vector<S>& rope_cos, const std::vector<S>& rope_sin) {
    return attention(tokens_tsd, tokens_tsd, p, &rope_cos, &rope_sin);
}

// Temporal self-attention over each spatial site: the spatial axis folds into
// the batch.
template <class S>
TensorBase<S> temporal_attention(const TensorBase<S>& tokens_tsd, const AttentionParams<S>& p,
                                 const std::vector<S>& rope_cos, const std::vector<S>& rope_sin) {
    auto std_layout = permute(tokens_tsd, {1, 0, 2});  // [S, T, D]
    auto y = attention(std_layout, std_layout, p, &rope_cos, &rope_sin);
    return permute(y, {1, 0, 2});
}

template <class S>
TensorBase<S> stiv_block_forward(const TensorBase<S>& tokens_tsd, const StivBlock<S>& block,
                                 const TensorBase<S>& text_seq, const Modulation<S>& mod_attn,
                                 const Modulation<S>& mod_ffn, const std::vector<S>& spatial_cos,
                                 const std::vector<S>& spatial_sin, const std::vector<S>& temporal_cos,
                                 const std::vector<S>& temporal_sin) {
    int64_t T = tokens_tsd.dim(0), Ssites = tokens_tsd.dim(1), D = tokens_tsd.dim(2);
    auto x = sandwich_sublayer<S>(tokens_tsd, block.sw_spatial, mod_attn, [&](const TensorBase<S>& h) {
        return spatial_attention(h, block.spatial_attn, spatial_cos, spatial_sin);
    });
    if (block.has_temporal) {
        x = sandwich_sublayer<S>(x, block.sw_temporal, Modulation<S>::none(), [&](const TensorBase<S>& h) {
            return temporal_attention(h, block.temporal_attn, temporal_cos, temporal_sin);
        });
    }
    x = sandwich_sublayer<S>(x, block.sw_cross, Modulation<S>::none(), [&](const TensorBase<S>& h) {
        auto flat = reshape(h, {1, T * Ssites, D});
        auto text3 = reshape(text_seq, {1, text_seq.dim(0), text_seq.dim(1)});
        return reshape(attention(flat, text3, block.cross_attn), {T, Ssites, D});
    });
    x = sandwich_sublayer<S>(x, block.sw_ffn, mod_ffn,
                             [&](const TensorBase<S>& h) { return block.ffn.forward(h); });
    return x;
}

}  // namespace stiv
