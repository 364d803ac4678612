#pragma once

#include "conditioning.hpp"
#include "tensor.hpp"
#include "types.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace stiv {

// x_t = t*x1 + (1-t)*eps
template <class S>
TensorBase<S> interpolant(const TensorBase<S>& x1, const TensorBase<S>& eps, double t) {
    if (x1.shape() != eps.shape()) throw std::invalid_argument("interpolant: shape mismatch");
    if (t < 0.0 || t > 1.0) throw std::invalid_argument("interpolant: t outside [0,1]");
    return add(scale(x1, static_cast<S>(t)), scale(eps, static_cast<S>(1.0 - t)));
}

// v = x1 - eps, independent of t for the linear interpolant
template <class S>
TensorBase<S> velocity_target(const TensorBase<S>& x1, const TensorBase<S>& eps) {
    if (x1.shape() != eps.shape()) throw std::invalid_argument("velocity_target: shape mismatch");
    return sub(x1, eps);
}

// Mean squared error over the frames the mask keeps; mean over included
// elements only.
template <class S>
TensorBase<S> fm_loss(const TensorBase<S>& pred, const TensorBase<S>& target, const LossMask& mask) {
    if (pred.shape() != target.shape()) throw std::invalid_argument("fm_loss: shape mismatch");
    int64_t T = pred.dim(0);
    if (static_cast<int64_t>(mask.include.size()) != T) throw std::invalid_argument("fm_loss: mask length mismatch");
    std::vector<int64_t> frames;
    for (int64_t f = 0; f < T; ++f)
        if (mask.include[static_cast<size_t>(f)]) frames.push_back(f);
    if (frames.empty()) throw std::invalid_argument("fm_loss: every frame is excluded from the loss");
    auto d = sub(index_select(pred, 0, frames), index_select(target, 0, frames));
    return mean_all(mul(d, d));
}

// F_null + s*(F_joint - F_null)
template <class S>
TensorBase<S> jit_cfg(const TensorBase<S>& f_null, const TensorBase<S>& f_joint, double s) {
    if (f_null.shape() != f_joint.shape()) throw std::invalid_argument("jit_cfg: shape mismatch");
    if (s == 1.0) return f_joint;  // exact algebraic identity, keeps trajectories bit-equal
    return add(f_null, scale(sub(f_joint, f_null), static_cast<S>(s)));
}

// F_null + s1*(F_img - F_null) + s2*(F_joint - F_img)
template <class S>
TensorBase<S> sit_cfg(const TensorBase<S>& f_null, const TensorBase<S>& f_img, const TensorBase<S>& f_joint,
                      double s1, double s2) {
    if (f_null.shape() != f_img.shape() || f_img.shape() != f_joint.shape())
        throw std::invalid_argument("sit_cfg: shape mismatch");
    if (s1 == 1.0 && s2 == 1.0) return f_joint;  // exact algebraic identity, keeps trajectories bit-equal
    return add(add(f_null, scale(sub(f_img, f_null), static_cast<S>(s1))),
               scale(sub(f_joint, f_img), static_cast<S>(s2)));
}

// Rescales the guided field to the conditional field's global L2 norm while
// keeping its direction. A zero guided field falls back to the conditional.
template <class S>
TensorBase<S> cfg_renorm(const TensorBase<S>& f_hat, const TensorBase<S>& f_cond) {
    if (f_hat.shape() != f_cond.shape()) throw std::invalid_argument("cfg_renorm: shape mismatch");
    double n_hat = 0, n_cond = 0;
    for (S v : f_hat.data()) n_hat += static_cast<double>(v) * static_cast<double>(v);
    for (S v : f_cond.data()) n_cond += static_cast<double>(v) * static_cast<double>(v);
    n_hat = std::sqrt(n_hat);
    n_cond = std::sqrt(n_cond);
    if (n_hat == 0.0) return f_cond;
    return scale(f_hat, static_cast<S>(n_cond / n_hat));
}

inline constexpr double kSamplerDelta = 1e-3;

// score = (t/(1-t))*F - (1/(1-t))*x_t; singular at t=1
template <class S>
TensorBase<S> velocity_to_score(const TensorBase<S>& f, const TensorBase<S>& x_t, double t) {
    if (f.shape() != x_t.shape()) throw std::invalid_argument("velocity_to_score: shape mismatch");
    if (t < 0.0 || t > 1.0 - kSamplerDelta)
        throw std::invalid_argument("velocity_to_score: t must lie in [0, 1-delta]");
    double om = 1.0 - t;
    return sub(scale(f, static_cast<S>(t / om)), scale(x_t, static_cast<S>(1.0 / om)));
}

enum class GuidanceScheme { none, jit, sit };

struct GuidanceConfig {
    GuidanceScheme scheme = GuidanceScheme::none;
    double s = 7.5;        // JIT scale
    double s1 = 1.5, s2 = 7.5;  // SIT image / joint scales
    bool renorm = false;
};

struct SamplerConfig {
    int64_t n_steps = 50;
    uint64_t seed = 0;
};

// The Cartesian product of SIT scales searched in evaluation: 5x5 = 25 pairs.
inline std::vector<std::pair<double, double>> sit_scale_grid() {
    const double vals[] = {1.1, 1.5, 4.5, 7.5, 10.5};
    std::vector<std::pair<double, double>> out;
    for (double a : vals)
        for (double b : vals) out.emplace_back(a, b);
    return out;
}

// Deterministic Euler integration of the velocity ODE on the uniform grid
// t_i = i*h with h = (1-delta)/n_steps. velocity(x, t, cond) must return a
// field of x.data's shape. The state is re-pinned after every step so pinned
// frames stay bit-identical to the condition throughout.
template <class S, class VelocityFn>
VideoLatentT<S> euler_sample(VelocityFn&& velocity, const Shape& latent_shape, const MicroConditions& micro,
                             const ConditionT<S>& cond, const TaskMode& mode, const GuidanceConfig& g,
                             const SamplerConfig& sc) {
    if (sc.n_steps < 1) throw std::invalid_argument("euler_sample: n_steps must be >= 1");
    NoGradGuard guard;
    RngState rng{sc.seed, 0};
    MicroConditions m = micro;
    m.sampling_stride = mode.sampling_stride();
    VideoLatentT<S> x{TensorBase<S>::gaussian(rng, latent_shape), m};
    x = pin_state(x, cond.image, mode);

    ConditionT<S> c_null;  // no text, no image label
    ConditionT<S> c_img{std::nullopt, cond.image};
    const ConditionT<S>& c_joint = cond;

    double h = (1.0 - kSamplerDelta) / static_cast<double>(sc.n_steps);
    for (int64_t i = 0; i < sc.n_steps; ++i) {
        double t = static_cast<double>(i) * h;
        TensorBase<S> f;
        if (g.scheme == GuidanceScheme::none) {
            f = velocity(x, t, c_joint);
        } else if (g.scheme == GuidanceScheme::jit) {
            auto f_null = velocity(x, t, c_null);
            auto f_joint = velocity(x, t, c_joint);
            f = jit_cfg(f_null, f_joint, g.s);
            if (g.renorm) f = cfg_renorm(f, f_joint);
        } else {
            auto f_null = velocity(x, t, c_null);
            auto f_img = velocity(x, t, c_img);
            auto f_joint = velocity(x, t, c_joint);
            f = sit_cfg(f_null, f_img, f_joint, g.s1, g.s2);
            if (g.renorm) f = cfg_renorm(f, f_joint);
        }
        x.data = add(x.data, scale(f, static_cast<S>(h)));
        x = pin_state(x, cond.image, mode);
    }
    return x;
}

}  // namespace stiv
