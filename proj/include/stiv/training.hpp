#pragma once

#include "conditioning.hpp"
#include "flow.hpp"
#include "model.hpp"
#include "tensor.hpp"

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace stiv {

// Scales every gradient by max_norm/g when the global L2 norm g exceeds
// max_norm. Returns the pre-clip norm.
template <class S>
double clip_grad_norm(std::vector<TensorBase<S>>& grads, double max_norm = 1.0) {
    double sq = 0;
    for (auto& g : grads)
        for (S v : g.data()) sq += static_cast<double>(v) * static_cast<double>(v);
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
        S f = static_cast<S>(max_norm / norm);
        for (auto& g : grads)
            for (S& v : g.data()) v *= f;
    }
    return norm;
}

enum class OptimizerKind { adafactor, adamw };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adafactor;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double max_lr = 2e-4;
    int64_t warmup_steps = 1000;
    int64_t decay_steps = 0;         // if > warmup_steps, linear decay to 0 by this step
    double weight_decay = 0.0;       // AdamW only
    double eps1 = 1e-30;             // second-moment regularizer
    double clip_threshold = 1.0;     // AdaFactor update-RMS bound
    double adam_eps = 1e-8;
};

// AdaFactor with first-moment momentum and an absolute learning-rate step;
// matrices use factored row/column second moments, vectors keep the full
// moment. AdamW is available as a cross-check.
template <class S>
struct Optimizer {
    OptimizerConfig cfg;
    int64_t step_count = 0;

    struct Slot {
        std::vector<double> m;           // first moment
        std::vector<double> row, col;    // factored second moments (matrices)
        std::vector<double> full;        // full second moment (vectors, AdamW)
        int64_t rows = 0, cols = 0;
        bool factored = false;
    };
    std::vector<Slot> slots;

    explicit Optimizer(OptimizerConfig c = {}) : cfg(c) {}

    void init(const std::vector<TensorBase<S>>& params) {
        slots.clear();
        for (const auto& p : params) {
            Slot s;
            size_t n = static_cast<size_t>(p.numel());
            s.m.assign(n, 0.0);
            s.factored = cfg.kind == OptimizerKind::adafactor && p.shape().size() >= 2;
            if (s.factored) {
                s.rows = p.shape()[0];
                s.cols = p.numel() / p.shape()[0];
                s.row.assign(static_cast<size_t>(s.rows), 0.0);
                s.col.assign(static_cast<size_t>(s.cols), 0.0);
            } else {
                s.full.assign(n, 0.0);
            }
            slots.push_back(std::move(s));
        }
    }

    double lr() const {
        double warm = cfg.warmup_steps > 0
                          ? std::min(1.0, static_cast<double>(step_count) / static_cast<double>(cfg.warmup_steps))
                          : 1.0;
        double decay = 1.0;
        if (cfg.decay_steps > cfg.warmup_steps && step_count > cfg.warmup_steps) {
            double span = static_cast<double>(cfg.decay_steps - cfg.warmup_steps);
            decay = std::max(0.0, 1.0 - static_cast<double>(step_count - cfg.warmup_steps) / span);
        }
        return cfg.max_lr * warm * decay;
    }

    void step(std::vector<TensorBase<S>>& params, const std::vector<TensorBase<S>>& grads) {
        if (params.size() != slots.size() || grads.size() != slots.size())
            throw std::invalid_argument("optimizer: parameter/gradient count mismatch");
        ++step_count;
        double rate = lr();
        double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_count));
        double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_count));
        for (size_t pi = 0; pi < params.size(); ++pi) {
            auto& p = params[pi].data();
            const auto& g = grads[pi].data();
            Slot& s = slots[pi];
            size_t n = p.size();
            std::vector<double> u(n);
            if (cfg.kind == OptimizerKind::adamw) {
                for (size_t i = 0; i < n; ++i) {
                    double gv = static_cast<double>(g[i]);
                    s.m[i] = cfg.beta1 * s.m[i] + (1.0 - cfg.beta1) * gv;
                    s.full[i] = cfg.beta2 * s.full[i] + (1.0 - cfg.beta2) * gv * gv;
                    double mh = s.m[i] / bc1, vh = s.full[i] / bc2;
                    p[i] = static_cast<S>(static_cast<double>(p[i]) -
                                          rate * (mh / (std::sqrt(vh) + cfg.adam_eps) +
                                                  cfg.weight_decay * static_cast<double>(p[i])));
                }
                continue;
            }
            // AdaFactor second moment
            if (s.factored) {
                int64_t R = s.rows, C = s.cols;
                std::vector<double> rmean(static_cast<size_t>(R), 0.0), cmean(static_cast<size_t>(C), 0.0);
                for (int64_t r = 0; r < R; ++r)
                    for (int64_t c = 0; c < C; ++c) {
                        double g2 = static_cast<double>(g[static_cast<size_t>(r * C + c)]);
                        g2 = g2 * g2 + cfg.eps1;
                        rmean[static_cast<size_t>(r)] += g2 / static_cast<double>(C);
                        cmean[static_cast<size_t>(c)] += g2 / static_cast<double>(R);
                    }
                for (int64_t r = 0; r < R; ++r)
                    s.row[static_cast<size_t>(r)] =
                        cfg.beta2 * s.row[static_cast<size_t>(r)] + (1.0 - cfg.beta2) * rmean[static_cast<size_t>(r)];
                for (int64_t c = 0; c < C; ++c)
                    s.col[static_cast<size_t>(c)] =
                        cfg.beta2 * s.col[static_cast<size_t>(c)] + (1.0 - cfg.beta2) * cmean[static_cast<size_t>(c)];
                double rsum = 0;
                for (double v : s.row) rsum += v;
                double rmean_all = rsum / static_cast<double>(R);
                for (int64_t r = 0; r < R; ++r)
                    for (int64_t c = 0; c < C; ++c) {
                        double v = s.row[static_cast<size_t>(r)] * s.col[static_cast<size_t>(c)] / rmean_all;
                        u[static_cast<size_t>(r * C + c)] =
                            static_cast<double>(g[static_cast<size_t>(r * C + c)]) / std::sqrt(v / bc2);
                    }
            } else {
                for (size_t i = 0; i < n; ++i) {
                    double gv = static_cast<double>(g[i]);
                    s.full[i] = cfg.beta2 * s.full[i] + (1.0 - cfg.beta2) * (gv * gv + cfg.eps1);
                    u[i] = gv / std::sqrt(s.full[i] / bc2);
                }
            }
            // bound the update RMS, then apply momentum and the absolute step
            double rms = 0;
            for (double v : u) rms += v * v;
            rms = std::sqrt(rms / static_cast<double>(n));
            double scale_u = 1.0 / std::max(1.0, rms / cfg.clip_threshold);
            for (size_t i = 0; i < n; ++i) {
                s.m[i] = cfg.beta1 * s.m[i] + (1.0 - cfg.beta1) * u[i] * scale_u;
                p[i] = static_cast<S>(static_cast<double>(p[i]) - rate * s.m[i]);
            }
        }
    }
};

// shadow <- decay*shadow + (1-decay)*params
template <class S>
struct Ema {
    double decay = 0.9999;
    std::vector<std::vector<S>> shadow;

    void init(const std::vector<TensorBase<S>>& params) {
        shadow.clear();
        for (const auto& p : params) shadow.push_back(p.data());
    }

    void update(const std::vector<TensorBase<S>>& params) {
        if (shadow.size() != params.size()) throw std::invalid_argument("ema: parameter count mismatch");
        for (size_t i = 0; i < params.size(); ++i) {
            const auto& p = params[i].data();
            auto& s = shadow[i];
            if (s.size() != p.size()) throw std::invalid_argument("ema: shape mismatch");
            for (size_t j = 0; j < p.size(); ++j)
                s[j] = static_cast<S>(decay * static_cast<double>(s[j]) + (1.0 - decay) * static_cast<double>(p[j]));
        }
    }

    // writes the shadow weights into the given parameter tensors
    void apply(std::vector<TensorBase<S>>& params) const {
        for (size_t i = 0; i < params.size(); ++i) params[i].data() = shadow[i];
    }
};

template <class S>
struct TrainSample {
    VideoLatentT<S> x1;  // clean latent clip
    ConditionT<S> cond;
    TaskMode mode;
};

struct TrainConfig {
    OptimizerConfig opt;
    double ema_decay = 0.9999;
    double grad_clip = 1.0;
};

// Owns the model parameters and optimizer/EMA state for one training run.
// One step: per sample draw t and noise, apply condition dropout and frame
// replacement, run the masked forward, average the flow losses, one backward,
// clip, optimizer step, EMA update.
template <class S>
struct Trainer {
    StivModelT<S>& model;
    TrainConfig cfg;
    Optimizer<S> opt;
    Ema<S> ema;
    RngState rng;
    std::vector<TensorBase<S>> params;
    double last_grad_norm = 0.0;  // pre-clip global norm of the latest step

    Trainer(StivModelT<S>& m, TrainConfig c, uint64_t seed) : model(m), cfg(c), opt(c.opt), rng{seed, 0} {
        params = model.parameters();
        for (auto& p : params) p.set_requires_grad(true);
        opt.init(params);
        ema.decay = cfg.ema_decay;
        ema.init(params);
    }

    double step(const std::vector<TrainSample<S>>& batch) {
        if (batch.empty()) throw std::invalid_argument("train step: empty batch");
        TensorBase<S> total;
        bool first = true;
        for (const auto& sample : batch) {
            double t = rng_uniform(rng);
            TensorBase<S> eps;
            {
                NoGradGuard ng;
                eps = TensorBase<S>::gaussian(rng, sample.x1.data.shape());
            }
            auto cond = sample_training_condition(rng, sample.cond, model.config.text_dropout_p,
                                                  model.config.image_dropout_p);
            TaskMode mode = cond.image ? sample.mode : TaskMode{TaskKind::t2v};
            VideoLatentT<S> x_t{interpolant(sample.x1.data.detach(), eps, t), sample.x1.micro};
            auto [pinned, mask] = apply_frame_replacement(x_t, cond.image, mode, model.config.first_frame_loss);
            ForwardOptionsT<S> opts{true, &rng, nullptr};
            auto pred = model.forward(pinned, t, cond, opts);
            auto target = velocity_target(sample.x1.data.detach(), eps);
            auto loss = fm_loss(pred, target, mask);
            total = first ? loss : add(total, loss);
            first = false;
        }
        auto mean_loss = scale(total, static_cast<S>(1.0 / static_cast<double>(batch.size())));
        double value = static_cast<double>(mean_loss.item());
        if (!std::isfinite(value))
            throw std::runtime_error("train step: non-finite loss at step " + std::to_string(opt.step_count));
        auto grads = grad(mean_loss, params);
        last_grad_norm = clip_grad_norm(grads, cfg.grad_clip);
        opt.step(params, grads);
        ema.update(params);
        return value;
    }
};

// ------------------------------ model surgery -------------------------------

template <class S>
struct SurgeryResult {
    StivModelT<S> model;
    std::map<std::string, std::string> audit;  // parameter name -> source tag
};

namespace detail {

template <class S>
std::map<std::string, TensorBase<S>> named_params(StivModelT<S>& m) {
    std::map<std::string, TensorBase<S>> out;
    m.visit([&](const std::string& n, TensorBase<S>& t) { out.emplace(n, t); });
    return out;
}

}  // namespace detail

// Video model seeded from an image model: spatial/cross/FFN paths, embedders
// and head are copied; cubify weights inflate across the temporal patch
// (replicated and divided by p_t, so temporally constant clips embed as the
// single frame did); temporal attention is fresh with a zero out projection.
template <class S>
SurgeryResult<S> init_t2v_from_t2i(StivModelT<S>& t2i, const StivConfig& cfg, RngState& rng) {
    if (t2i.config.hidden_dim != cfg.hidden_dim || t2i.config.n_heads != cfg.n_heads ||
        t2i.config.spatial_patch != cfg.spatial_patch || t2i.config.latent_channels != cfg.latent_channels ||
        t2i.config.text_dim != cfg.text_dim)
        throw std::invalid_argument("init_t2v_from_t2i: incompatible dimensions");
    if (!cfg.temporal_blocks) throw std::invalid_argument("init_t2v_from_t2i: target must have temporal attention");
    SurgeryResult<S> out{StivModelT<S>::init(cfg, rng), {}};
    auto src = detail::named_params(t2i);
    int64_t pt = cfg.temporal_patch, pt_src = t2i.config.temporal_patch;
    if (pt_src != 1) throw std::invalid_argument("init_t2v_from_t2i: source must have temporal_patch 1");
    int64_t slice = t2i.config.patch_dim();  // p_s*p_s*C rows per temporal slice
    out.model.visit([&](const std::string& n, TensorBase<S>& t) {
        bool temporal = n.find("temporal_attn") != std::string::npos || n.find("sw_temporal") != std::string::npos;
        if (temporal) {
            out.audit[n] = "fresh";
            return;
        }
        auto it = src.find(n);
        if (it == src.end()) throw std::invalid_argument("init_t2v_from_t2i: missing source parameter " + n);
        if (n == "cubify.w" && pt > 1) {
            for (int64_t dt = 0; dt < pt; ++dt)
                for (int64_t r = 0; r < slice; ++r)
                    for (int64_t c = 0; c < cfg.hidden_dim; ++c)
                        t.data()[static_cast<size_t>(((dt * slice) + r) * cfg.hidden_dim + c)] =
                            it->second.data()[static_cast<size_t>(r * cfg.hidden_dim + c)] / static_cast<S>(pt);
            out.audit[n] = "t2i:inflated";
            return;
        }
        if (n == "head.w" && pt > 1) {
            // each temporal output slice repeats the single-frame prediction
            for (int64_t r = 0; r < cfg.hidden_dim; ++r)
                for (int64_t dt = 0; dt < pt; ++dt)
                    for (int64_t c = 0; c < slice; ++c)
                        t.data()[static_cast<size_t>(r * cfg.patch_dim() + dt * slice + c)] =
                            it->second.data()[static_cast<size_t>(r * slice + c)];
            out.audit[n] = "t2i:inflated";
            return;
        }
        if (n == "head.b" && pt > 1) {
            for (int64_t dt = 0; dt < pt; ++dt)
                for (int64_t c = 0; c < slice; ++c)
                    t.data()[static_cast<size_t>(dt * slice + c)] = it->second.data()[static_cast<size_t>(c)];
            out.audit[n] = "t2i:inflated";
            return;
        }
        if (it->second.shape() != t.shape())
            throw std::invalid_argument("init_t2v_from_t2i: shape mismatch for " + n);
        t.data() = it->second.data();
        out.audit[n] = "t2i";
    });
    return out;
}

// High-resolution video model from a low-resolution video model (temporal
// weights) plus a high-resolution image model (everything else). The spatial
// RoPE scale maps the new grid back onto the trained one.
template <class S>
SurgeryResult<S> init_from_both(StivModelT<S>& lowres_t2v, StivModelT<S>& highres_t2i, StivConfig cfg,
                                int64_t old_grid, int64_t new_grid, RngState& rng) {
    if (lowres_t2v.config.hidden_dim != cfg.hidden_dim || highres_t2i.config.hidden_dim != cfg.hidden_dim)
        throw std::invalid_argument("init_from_both: hidden dims disagree");
    cfg.spatial_pos_scale = static_cast<double>(old_grid) / static_cast<double>(new_grid);
    SurgeryResult<S> out{StivModelT<S>::init(cfg, rng), {}};
    auto temporal_src = detail::named_params(lowres_t2v);
    auto spatial_src = detail::named_params(highres_t2i);
    out.model.visit([&](const std::string& n, TensorBase<S>& t) {
        bool temporal = n.find("temporal_attn") != std::string::npos || n.find("sw_temporal") != std::string::npos;
        auto& src = temporal ? temporal_src : spatial_src;
        auto it = src.find(n);
        if (it == src.end()) throw std::invalid_argument("init_from_both: missing source parameter " + n);
        if (it->second.shape() != t.shape()) throw std::invalid_argument("init_from_both: shape mismatch for " + n);
        t.data() = it->second.data();
        out.audit[n] = temporal ? "t2v" : "t2i";
    });
    return out;
}

enum class RopeExtension { interpolate, extrapolate };

// Longer-clip model from a shorter one: weights copied verbatim; temporal
// RoPE either squeezes the new range onto the trained positions (interpolate)
// or leaves positions untouched (extrapolate).
template <class S>
StivModelT<S> extend_frames_init(StivModelT<S>& short_model, int64_t old_T, int64_t new_T, RopeExtension mode) {
    if (new_T < old_T) throw std::invalid_argument("extend_frames_init: new frame count is shorter");
    StivConfig cfg = short_model.config;
    cfg.temporal_pos_scale = mode == RopeExtension::interpolate
                                 ? static_cast<double>(old_T) / static_cast<double>(new_T)
                                 : 1.0;
    RngState rng{0, 0};
    auto out = StivModelT<S>::init(cfg, rng);
    auto src = detail::named_params(short_model);
    out.visit([&](const std::string& n, TensorBase<S>& t) { t.data() = src.at(n).data(); });
    return out;
}

}  // namespace stiv
