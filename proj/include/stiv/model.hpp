#pragma once

#include "blocks.hpp"
#include "codec.hpp"
#include "tensor.hpp"
#include "text.hpp"
#include "types.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace stiv {

enum class MaskAxis { spatial, temporal };

struct StivConfig {
    int64_t n_blocks = 2;
    int64_t hidden_dim = 64;
    int64_t n_heads = 4;
    int64_t spatial_patch = 2;
    int64_t temporal_patch = 2;
    double mask_ratio = 0.5;
    MaskAxis mask_axis = MaskAxis::spatial;
    int64_t n_decoder_blocks = 2;
    bool causal_temporal = false;
    bool first_frame_loss = false;
    double text_dropout_p = 0.10;
    double image_dropout_p = 0.08;
    bool temporal_blocks = true;  // off for a pure image (T2I style) model
    int64_t latent_channels = kCodecChannels;
    int64_t text_dim = 32;
    int64_t vocab_size = 64;
    int64_t ffn_expansion = 4;
    double spatial_pos_scale = 1.0;
    double temporal_pos_scale = 1.0;

    int64_t head_dim() const { return hidden_dim / n_heads; }
    int64_t patch_dim() const { return temporal_patch * spatial_patch * spatial_patch * latent_channels; }

    void validate() const {
        if (n_blocks < 1 || hidden_dim < 1 || n_heads < 1) throw std::invalid_argument("config: empty model");
        if (hidden_dim % n_heads != 0) throw std::invalid_argument("config: n_heads must divide hidden_dim");
        if (head_dim() % 4 != 0) throw std::invalid_argument("config: head_dim must be divisible by 4 for 2D RoPE");
        if (temporal_patch != 1 && temporal_patch != 2 && temporal_patch != 4)
            throw std::invalid_argument("config: temporal_patch must be 1, 2 or 4");
        if (mask_ratio < 0.0 || mask_ratio >= 1.0) throw std::invalid_argument("config: mask_ratio must be in [0,1)");
        if (n_decoder_blocks < 0) throw std::invalid_argument("config: negative decoder depth");
    }
};

// Deterministic split of token sites into kept and masked index sets. The
// kept count is round((1-ratio)*n) and both lists come back sorted.
struct MaskSelection {
    std::vector<int64_t> kept, masked;
};

inline MaskSelection select_mask_indices(int64_t n_sites, double ratio, RngState& rng) {
    if (ratio < 0.0 || ratio >= 1.0) throw std::invalid_argument("select_mask_indices: ratio must be in [0,1)");
    int64_t n_keep = static_cast<int64_t>(std::llround((1.0 - ratio) * static_cast<double>(n_sites)));
    n_keep = std::max<int64_t>(1, std::min(n_sites, n_keep));
    auto perm = rng_permutation(rng, static_cast<uint64_t>(n_sites));
    MaskSelection sel;
    sel.kept.assign(perm.begin(), perm.begin() + n_keep);
    sel.masked.assign(perm.begin() + n_keep, perm.end());
    std::sort(sel.kept.begin(), sel.kept.end());
    std::sort(sel.masked.begin(), sel.masked.end());
    return sel;
}

// Drops the masked sites along the chosen axis of [T, S, D] tokens. For
// axis=spatial every frame loses the same spatial subset, keeping the grid
// rectangular for factorized attention.
template <class S>
TensorBase<S> mask_tokens(const TensorBase<S>& tokens_tsd, const MaskSelection& sel, MaskAxis axis) {
    return index_select(tokens_tsd, axis == MaskAxis::spatial ? 1 : 0, sel.kept);
}

// Rebuilds the full grid: kept slots pass through, masked slots take the
// learned mask token.
template <class S>
TensorBase<S> unmask_tokens(const TensorBase<S>& kept_tokens, const MaskSelection& sel, MaskAxis axis,
                            const TensorBase<S>& mask_token) {
    int ax = axis == MaskAxis::spatial ? 1 : 0;
    int64_t full = static_cast<int64_t>(sel.kept.size() + sel.masked.size());
    if (kept_tokens.dim(ax) != static_cast<int64_t>(sel.kept.size()))
        throw std::invalid_argument("unmask_tokens: kept extent mismatch");
    if (sel.masked.empty()) return kept_tokens;
    // disjoint scatters: kept slots see kept_tokens + 0, masked slots see
    // 0 + mask_token, so kept values survive bit-exactly
    Shape tile_shape = kept_tokens.shape();
    tile_shape[static_cast<size_t>(ax)] = static_cast<int64_t>(sel.masked.size());
    auto tile = add(TensorBase<S>::zeros(tile_shape), mask_token);
    return add(index_scatter(kept_tokens, ax, sel.kept, full), index_scatter(tile, ax, sel.masked, full));
}

// [n, dim] sinusoidal features of arbitrary scalars, diffusion-style
// frequency ladder. Constant w.r.t. the tape.
template <class S>
TensorBase<S> sinusoidal_embedding(const std::vector<double>& values, int64_t dim) {
    if (dim % 2 != 0) throw std::invalid_argument("sinusoidal_embedding: dim must be even");
    int64_t half = dim / 2;
    auto out = TensorBase<S>::zeros({static_cast<int64_t>(values.size()), dim});
    for (size_t i = 0; i < values.size(); ++i)
        for (int64_t j = 0; j < half; ++j) {
            double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
            double a = values[i] * freq;
            out.data()[i * static_cast<size_t>(dim) + static_cast<size_t>(j)] = static_cast<S>(std::sin(a));
            out.data()[i * static_cast<size_t>(dim) + static_cast<size_t>(half + j)] = static_cast<S>(std::cos(a));
        }
    return out;
}

template <class S>
struct ForwardOptionsT {
    bool training = false;
    RngState* mask_rng = nullptr;           // enables MaskDiT masking when training
    const MaskSelection* fixed_mask = nullptr;  // overrides rng-driven selection
};

template <class S>
struct StivModelT {
    StivConfig config;

    TensorBase<S> cubify_w, cubify_b;   // [patch_dim, D], [D]
    TensorBase<S> text_table;           // [vocab, text_dim]
    TensorBase<S> pooled_w, pooled_b;   // [text_dim, D], [D]
    TensorBase<S> t_w1, t_b1, t_w2, t_b2;          // timestep MLP, D->D
    TensorBase<S> micro_w1, micro_b1, micro_w2, micro_b2;  // micro-scalar MLP, shared over scalars
    TensorBase<S> adaln_w, adaln_b;     // [D, 6D]: scale/shift/gate for attn then FFN
    TensorBase<S> mask_token;           // [D]
    std::vector<StivBlock<S>> blocks, decoder_blocks;
    TensorBase<S> final_gain;           // [D]
    TensorBase<S> final_mod_w, final_mod_b;  // [D, 2D]: scale/shift of the final norm
    TensorBase<S> head_w, head_b;       // [D, patch_dim]

    static StivModelT init(const StivConfig& cfg, RngState& rng) {
        cfg.validate();
        StivModelT m;
        m.config = cfg;
        int64_t D = cfg.hidden_dim, P = cfg.patch_dim(), E = cfg.text_dim;
        // fan-in scaled so patch tokens enter the stream at unit magnitude
        m.cubify_w = linear_weight<S>(rng, P, D, 1.0 / std::sqrt(static_cast<double>(P)));
        m.cubify_b = TensorBase<S>::zeros({D});
        m.text_table = linear_weight<S>(rng, cfg.vocab_size, E, 1.0);
        m.pooled_w = linear_weight<S>(rng, E, D);
        m.pooled_b = TensorBase<S>::zeros({D});
        m.t_w1 = linear_weight<S>(rng, D, D);
        m.t_b1 = TensorBase<S>::zeros({D});
        m.t_w2 = linear_weight<S>(rng, D, D);
        m.t_b2 = TensorBase<S>::zeros({D});
        m.micro_w1 = linear_weight<S>(rng, D, D);
        m.micro_b1 = TensorBase<S>::zeros({D});
        m.micro_w2 = linear_weight<S>(rng, D, D);
        m.micro_b2 = TensorBase<S>::zeros({D});
        m.adaln_w = linear_weight<S>(rng, D, 6 * D);
        // bias layout [scale_a, shift_a, gate_a, scale_f, shift_f, gate_f];
        // scales start at 1; gates start small so the residual stream is
        // input-dominated at init while every sublayer still receives gradient
        m.adaln_b = TensorBase<S>::zeros({6 * D});
        for (int64_t j = 0; j < D; ++j) {
            m.adaln_b.data()[static_cast<size_t>(j)] = S(1);
            m.adaln_b.data()[static_cast<size_t>(2 * D + j)] = S(0.1);
            m.adaln_b.data()[static_cast<size_t>(3 * D + j)] = S(1);
            m.adaln_b.data()[static_cast<size_t>(5 * D + j)] = S(0.1);
        }
        m.mask_token = TensorBase<S>::gaussian(rng, {D});
        for (auto& v : m.mask_token.data()) v = static_cast<S>(v * 0.02);
        for (int64_t i = 0; i < cfg.n_blocks; ++i)
            m.blocks.push_back(
                StivBlock<S>::init(rng, D, cfg.n_heads, E, cfg.temporal_blocks, cfg.causal_temporal));
        for (int64_t i = 0; i < cfg.n_decoder_blocks; ++i)
            m.decoder_blocks.push_back(
                StivBlock<S>::init(rng, D, cfg.n_heads, E, cfg.temporal_blocks, cfg.causal_temporal));
        m.final_gain = TensorBase<S>::ones({D});
        m.final_mod_w = linear_weight<S>(rng, D, 2 * D);
        m.final_mod_b = TensorBase<S>::zeros({2 * D});
        for (int64_t j = 0; j < D; ++j) m.final_mod_b.data()[static_cast<size_t>(j)] = S(1);  // scale half
        m.head_w = linear_weight<S>(rng, D, P);
        m.head_b = TensorBase<S>::zeros({P});
        return m;
    }

    template <class F>
    void visit(F&& f) {
        f("cubify.w", cubify_w);
        f("cubify.b", cubify_b);
        f("text.table", text_table);
        f("pooled.w", pooled_w);
        f("pooled.b", pooled_b);
        f("t_mlp.w1", t_w1);
        f("t_mlp.b1", t_b1);
        f("t_mlp.w2", t_w2);
        f("t_mlp.b2", t_b2);
        f("micro_mlp.w1", micro_w1);
        f("micro_mlp.b1", micro_b1);
        f("micro_mlp.w2", micro_w2);
        f("micro_mlp.b2", micro_b2);
        f("adaln.w", adaln_w);
        f("adaln.b", adaln_b);
        f("mask_token", mask_token);
        for (size_t i = 0; i < blocks.size(); ++i) blocks[i].visit("block." + std::to_string(i), f);
        for (size_t i = 0; i < decoder_blocks.size(); ++i)
            decoder_blocks[i].visit("decoder." + std::to_string(i), f);
        f("final.gain", final_gain);
        f("final_mod.w", final_mod_w);
        f("final_mod.b", final_mod_b);
        f("head.w", head_w);
        f("head.b", head_b);
    }

    std::vector<TensorBase<S>> parameters() {
        std::vector<TensorBase<S>> out;
        visit([&](const std::string&, TensorBase<S>& t) { out.push_back(t); });
        return out;
    }

    std::vector<std::string> parameter_names() {
        std::vector<std::string> out;
        visit([&](const std::string& n, TensorBase<S>&) { out.push_back(n); });
        return out;
    }

    int64_t actual_parameter_count() {
        int64_t n = 0;
        visit([&](const std::string&, TensorBase<S>& t) { n += t.numel(); });
        return n;
    }

    // [T,H,W,C] -> [T/p_t, (H/p_s)(W/p_s), D]
    TensorBase<S> cubify(const TensorBase<S>& latent) const {
        const auto& sh = latent.shape();
        if (sh.size() != 4) throw std::invalid_argument("cubify: expected [T,H,W,C]");
        int64_t T = sh[0], H = sh[1], W = sh[2], C = sh[3];
        int64_t pt = config.temporal_patch, ps = config.spatial_patch;
        if (T % pt != 0 || H % ps != 0 || W % ps != 0 || C != config.latent_channels)
            throw std::invalid_argument("cubify: shape not divisible by patch sizes");
        int64_t Tp = T / pt, Hp = H / ps, Wp = W / ps;
        auto x = reshape(latent, {Tp, pt, Hp, ps, Wp, ps, C});
        x = permute(x, {0, 2, 4, 1, 3, 5, 6});
        x = reshape(x, {Tp, Hp * Wp, pt * ps * ps * C});
        return add(matmul(x, cubify_w), cubify_b);
    }

    // [T/p_t, S, patch_dim] -> [T,H,W,C]; inverse of the cubify rearrangement
    TensorBase<S> uncubify(const TensorBase<S>& patches, int64_t H, int64_t W) const {
        int64_t pt = config.temporal_patch, ps = config.spatial_patch, C = config.latent_channels;
        int64_t Tp = patches.dim(0), Hp = H / ps, Wp = W / ps;
        auto x = reshape(patches, {Tp, Hp, Wp, pt, ps, ps, C});
        x = permute(x, {0, 3, 1, 4, 2, 5, 6});
        return reshape(x, {Tp * pt, H, W, C});
    }

    // [L, text_dim] rows of the embedding table; null text is the NULL token
    TensorBase<S> text_sequence(const ConditionT<S>& cond) const {
        std::vector<int64_t> ids =
            cond.text_tokens ? *cond.text_tokens : std::vector<int64_t>{kNullTokenId};
        if (ids.empty()) ids = {kNullTokenId};
        for (int64_t id : ids)
            if (id < 0 || id >= config.vocab_size) throw std::invalid_argument("text_sequence: token id out of range");
        return index_select(text_table, 0, ids);
    }

    // Summed singleton condition [1, D]: timestep, micro scalars and pooled
    // text, each normalized to zero mean and unit variance before the sum.
    TensorBase<S> singleton_condition(double t, const MicroConditions& micro, const TensorBase<S>& text_seq) const {
        int64_t D = config.hidden_dim;
        auto t_feat = sinusoidal_embedding<S>({1000.0 * t}, D);
        auto t_emb = add(matmul(silu(add(matmul(t_feat, t_w1), t_b1)), t_w2), t_b2);

        auto m_feat = sinusoidal_embedding<S>(micro.scalars(), D);
        auto m_emb = add(matmul(silu(add(matmul(m_feat, micro_w1), micro_b1)), micro_w2), micro_b2);
        auto m_sum = matmul(TensorBase<S>::ones({1, m_emb.dim(0)}), stateless_layer_norm(m_emb));

        int64_t L = text_seq.dim(0);
        auto pooled = index_select(text_seq, 0, {L - 1});
        auto p_emb = add(matmul(pooled, pooled_w), pooled_b);

        return add(add(stateless_layer_norm(t_emb), m_sum), stateless_layer_norm(p_emb));
    }

    // Shared across all blocks: one scale/shift/gate pair for the spatial
    // attention and one for the FFN.
    void adaln_modulations(const TensorBase<S>& cond_vec, Modulation<S>& mod_attn, Modulation<S>& mod_ffn) const {
        int64_t D = config.hidden_dim;
        auto a = reshape(add(matmul(silu(cond_vec), adaln_w), adaln_b), {6, D});
        auto row = [&](int64_t i) { return reshape(index_select(a, 0, {i}), {D}); };
        mod_attn = Modulation<S>::of(row(0), row(1), row(2));
        mod_ffn = Modulation<S>::of(row(3), row(4), row(5));
    }

    // cubify -> (mask) -> main blocks -> unmask -> decoder blocks -> final
    // norm -> head -> uncubify. Returns the velocity field, same shape as x.
    TensorBase<S> forward(const VideoLatentT<S>& x_t, double t, const ConditionT<S>& cond,
                          const ForwardOptionsT<S>& opts = {}) const {
        const auto& sh = x_t.data.shape();
        int64_t H = sh[1], W = sh[2];
        auto tokens = cubify(x_t.data);
        int64_t Tp = tokens.dim(0), Ssites = tokens.dim(1);
        int64_t Wp = W / config.spatial_patch;

        auto text_seq = text_sequence(cond);
        auto cvec = singleton_condition(t, x_t.micro, text_seq);
        Modulation<S> mod_attn, mod_ffn;
        adaln_modulations(cvec, mod_attn, mod_ffn);

        MaskSelection sel;
        bool masked = false;
        if (opts.fixed_mask) {
            sel = *opts.fixed_mask;
            masked = !sel.masked.empty();
        } else if (opts.training && config.mask_ratio > 0.0 && opts.mask_rng) {
            int64_t n_sites = config.mask_axis == MaskAxis::spatial ? Ssites : Tp;
            sel = select_mask_indices(n_sites, config.mask_ratio, *opts.mask_rng);
            masked = !sel.masked.empty();
        }

        // RoPE tables for the (possibly reduced) grid seen by the main blocks
        std::vector<int64_t> site_ids(static_cast<size_t>(Ssites)), frame_ids(static_cast<size_t>(Tp));
        for (int64_t i = 0; i < Ssites; ++i) site_ids[static_cast<size_t>(i)] = i;
        for (int64_t i = 0; i < Tp; ++i) frame_ids[static_cast<size_t>(i)] = i;
        std::vector<int64_t> main_sites = site_ids, main_frames = frame_ids;
        if (masked) {
            if (config.mask_axis == MaskAxis::spatial) main_sites = sel.kept;
            else main_frames = sel.kept;
        }

        RopeTable sp_table(RopeKind::spatial_2d, config.head_dim(), 10000.0, config.spatial_pos_scale);
        RopeTable tm_table(RopeKind::temporal_1d, config.head_dim(), 10000.0, config.temporal_pos_scale);
        auto build_spatial = [&](const std::vector<int64_t>& sites, std::vector<S>& cs, std::vector<S>& sn) {
            std::vector<std::pair<double, double>> pos;
            for (int64_t s : sites) pos.emplace_back(double(s / Wp), double(s % Wp));
            sp_table.template build_2d<S>(pos, cs, sn);
        };
        auto build_temporal = [&](const std::vector<int64_t>& frames, std::vector<S>& cs, std::vector<S>& sn) {
            std::vector<double> pos(frames.begin(), frames.end());
            tm_table.template build_1d<S>(pos, cs, sn);
        };
        std::vector<S> sp_cos, sp_sin, tm_cos, tm_sin;
        build_spatial(main_sites, sp_cos, sp_sin);
        build_temporal(main_frames, tm_cos, tm_sin);

        auto x = masked ? mask_tokens(tokens, sel, config.mask_axis) : tokens;
        for (const auto& b : blocks)
            x = stiv_block_forward(x, b, text_seq, mod_attn, mod_ffn, sp_cos, sp_sin, tm_cos, tm_sin);
        if (masked) {
            x = unmask_tokens(x, sel, config.mask_axis, mask_token);
            build_spatial(site_ids, sp_cos, sp_sin);
            build_temporal(frame_ids, tm_cos, tm_sin);
        }
        for (const auto& b : decoder_blocks)
            x = stiv_block_forward(x, b, text_seq, mod_attn, mod_ffn, sp_cos, sp_sin, tm_cos, tm_sin);

        // final norm modulated by the singleton condition, then the head
        auto fm = reshape(add(matmul(silu(cvec), final_mod_w), final_mod_b), {2, config.hidden_dim});
        auto fscale = reshape(index_select(fm, 0, {0}), {config.hidden_dim});
        auto fshift = reshape(index_select(fm, 0, {1}), {config.hidden_dim});
        auto y = add(mul(mul(stateless_layer_norm(x), final_gain), fscale), fshift);
        return uncubify(add(matmul(y, head_w), head_b), H, W);
    }
};

using StivModel = StivModelT<float>;
template <class S>
using ForwardOptions = ForwardOptionsT<S>;

// Closed-form parameter count for a config; must equal the instantiated sum.
inline int64_t parameter_count(const StivConfig& cfg) {
    int64_t D = cfg.hidden_dim, E = cfg.text_dim, P = cfg.patch_dim(), X = cfg.ffn_expansion;
    int64_t self_attn = 4 * D * D + 6 * D;               // q,k,v,o weights + 4 biases + 2 qk gains
    int64_t cross_attn = 2 * D * D + 2 * E * D + 6 * D;
    int64_t ffn = 2 * X * D * D + X * D + D;
    int64_t sandwich = 2 * D;
    int64_t block = self_attn + cross_attn + ffn + 3 * sandwich;
    if (cfg.temporal_blocks) block += self_attn + sandwich;
    int64_t n_total_blocks = cfg.n_blocks + cfg.n_decoder_blocks;
    int64_t embedders = (P * D + D)                 // cubify
                        + cfg.vocab_size * E        // text table
                        + (E * D + D)               // pooled projector
                        + 2 * (2 * D * D + 2 * D)   // timestep and micro MLPs
                        + (6 * D * D + 6 * D)       // shared AdaLN head
                        + D                         // mask token
                        + D                         // final gain
                        + (2 * D * D + 2 * D)       // final norm modulation
                        + (D * P + P);              // velocity head
    return n_total_blocks * block + embedders;
}

}  // namespace stiv
