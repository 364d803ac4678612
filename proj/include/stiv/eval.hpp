#pragma once

#include "flow.hpp"
#include "model.hpp"
#include "synthdata.hpp"

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

// Post-training evaluation on the synthetic corpus: sample videos under the
// requested conditioning modes, decode them and let the pixel-space motion
// oracle judge the result. All metrics are deterministic per (model, seed).

namespace stiv {

struct EvalReport {
    int64_t n_samples = 0;
    int64_t n_pinned_first = 0;    // samples whose mode pins frame 0
    int64_t n_holdout_clips = 0;
    double first_frame_exact = 0;  // fraction of pinned-first samples, byte-exact frame 0
    double direction_accuracy = 0;  // oracle direction == caption direction
    double motion_presence = 0;     // fraction judged non-static
    double holdout_flow_loss = 0;   // mean flow-matching loss on held-out clips
    double nan_free = 0;            // fraction of samples with fully finite latents

    std::string summary() const {
        std::ostringstream os;
        os << "samples," << n_samples << "\n"
           << "first_frame_exact," << first_frame_exact << "\n"
           << "direction_accuracy," << direction_accuracy << "\n"
           << "motion_presence," << motion_presence << "\n"
           << "holdout_flow_loss," << holdout_flow_loss << "\n"
           << "nan_free," << nan_free << "\n";
        return os.str();
    }
};

// Adapter from a model to the sampler's velocity interface (eval forward, no
// masking, no tape).
template <class S>
auto model_velocity(StivModelT<S>& model) {
    return [&model](const VideoLatentT<S>& x, double t, const ConditionT<S>& cond) {
        ForwardOptionsT<S> opts{false, nullptr, nullptr};
        return model.forward(x, t, cond, opts);
    };
}

// Builds the sampling condition a clip spec implies under the given task.
template <class S>
ConditionT<S> clip_condition(const GeneratedClip& clip, const TaskMode& mode) {
    ConditionT<S> cond{clip.tokens, std::nullopt};
    auto pins = mode.pinned_frames(static_cast<int64_t>(clip.frames.size()));
    if (!pins.empty()) {
        auto latent = encode_pixels(frames_to_pixels<S>(clip.frames));
        cond.image = ImageConditionT<S>{index_select(latent, 0, pins).detach(), pins};
    }
    return cond;
}

// Scores one decoded generation against its source spec.
struct ClipScore {
    bool nan_free = false;
    bool direction_match = false;
    bool moving = false;
    bool first_frame_exact = false;
    bool has_pinned_first = false;
};

template <class S>
ClipScore score_generation(const ClipSpec& spec, const GeneratedClip& truth, const TaskMode& mode,
                           const VideoLatentT<S>& sampled) {
    ClipScore sc;
    sc.nan_free = true;
    for (S v : sampled.data.data())
        if (!std::isfinite(static_cast<double>(v))) sc.nan_free = false;
    if (!sc.nan_free) return sc;

    auto pixels = decode_latent(sampled.data);
    auto frames = pixels_to_frames(pixels);
    auto est = motion_oracle(frames_to_pixels<S>(frames));
    sc.direction_match = matches(est.direction, spec.direction);
    sc.moving = est.direction != MotionVerdict::still;

    auto pins = mode.pinned_frames(static_cast<int64_t>(truth.frames.size()));
    if (!pins.empty() && pins.front() == 0) {
        sc.has_pinned_first = true;
        sc.first_frame_exact = frames.at(0).rgb == truth.frames.at(0).rgb;
    }
    return sc;
}

// Mean flow loss over clips at a fixed t grid with per-clip deterministic
// noise; the generalization check on held-out data.
template <class S>
double mean_flow_loss(StivModelT<S>& model, const std::vector<ClipSpec>& clips, uint64_t seed) {
    NoGradGuard guard;
    if (clips.empty()) return 0.0;
    double total = 0;
    int64_t count = 0;
    for (size_t ci = 0; ci < clips.size(); ++ci) {
        auto clip = generate_clip(clips[ci]);
        auto x1 = encode_pixels(frames_to_pixels<S>(clip.frames));
        RngState rng{seed, ci * 1000};
        for (double t : {0.1, 0.3, 0.5, 0.7, 0.9}) {
            auto eps = TensorBase<S>::gaussian(rng, x1.shape());
            VideoLatentT<S> x_t{interpolant(x1, eps, t), clip.micro};
            ConditionT<S> cond{clip.tokens, std::nullopt};
            ForwardOptionsT<S> opts{false, nullptr, nullptr};
            auto pred = model.forward(x_t, t, cond, opts);
            auto loss = fm_loss(pred, velocity_target(x1, eps), LossMask::all(x1.dim(0)));
            total += static_cast<double>(loss.item());
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

// Samples each (clip, mode) pair round-robin until at least min_samples
// generations are scored; seeds advance per sample so repeats differ.
template <class S>
EvalReport eval_suite(StivModelT<S>& model, const std::vector<ClipSpec>& clips,
                      const std::vector<TaskMode>& modes, const GuidanceConfig& g, const SamplerConfig& sc,
                      int64_t min_samples = 64) {
    if (clips.empty() || modes.empty()) throw std::invalid_argument("eval_suite: empty clips or modes");
    NoGradGuard guard;
    EvalReport rep;
    int64_t n = std::max<int64_t>(min_samples, static_cast<int64_t>(clips.size() * modes.size()));
    int64_t exact = 0, dir_ok = 0, moving = 0, finite = 0;

    auto velocity = model_velocity(model);
    for (int64_t i = 0; i < n; ++i) {
        const ClipSpec& spec = clips[static_cast<size_t>(i) % clips.size()];
        const TaskMode& mode = modes[static_cast<size_t>(i) % modes.size()];
        auto clip = generate_clip(spec);
        auto cond = clip_condition<S>(clip, mode);
        Shape latent_shape{spec.frames, spec.height / 2, spec.width / 2, kCodecChannels};
        SamplerConfig per = sc;
        per.seed = sc.seed + static_cast<uint64_t>(i);
        auto sampled = euler_sample<S>(velocity, latent_shape, clip.micro, cond, mode, g, per);
        auto score = score_generation(spec, clip, mode, sampled);
        rep.n_samples += 1;
        if (score.has_pinned_first) {
            rep.n_pinned_first += 1;
            exact += score.first_frame_exact ? 1 : 0;
        }
        dir_ok += score.direction_match ? 1 : 0;
        moving += score.moving ? 1 : 0;
        finite += score.nan_free ? 1 : 0;
    }

    rep.first_frame_exact = rep.n_pinned_first ? static_cast<double>(exact) / static_cast<double>(rep.n_pinned_first) : 0.0;
    rep.direction_accuracy = static_cast<double>(dir_ok) / static_cast<double>(rep.n_samples);
    rep.motion_presence = static_cast<double>(moving) / static_cast<double>(rep.n_samples);
    rep.nan_free = static_cast<double>(finite) / static_cast<double>(rep.n_samples);

    auto holdout = holdout_corpus();
    rep.n_holdout_clips = static_cast<int64_t>(holdout.size());
    rep.holdout_flow_loss = mean_flow_loss(model, holdout, sc.seed + 7919);
    return rep;
}

}  // namespace stiv
