#pragma once

#include "tensor.hpp"
#include "text.hpp"
#include "types.hpp"

#include <algorithm>
#include <optional>
#include <stdexcept>
#include <vector>

namespace stiv {

enum class TaskKind { t2v, ti2v, predict4, interpolate, keyframe };

inline const char* to_string(TaskKind k) {
    switch (k) {
        case TaskKind::t2v: return "t2v";
        case TaskKind::ti2v: return "ti2v";
        case TaskKind::predict4: return "predict4";
        case TaskKind::interpolate: return "interpolate";
        default: return "keyframe";
    }
}

// Task modes differ only in which latent frames are pinned to clean values
// and, for keyframe generation, the sampling-stride micro condition.
struct TaskMode {
    TaskKind kind = TaskKind::t2v;

    std::vector<int64_t> pinned_frames(int64_t T) const {
        switch (kind) {
            case TaskKind::t2v:
            case TaskKind::keyframe: return {};
            case TaskKind::ti2v:
                if (T < 1) throw std::invalid_argument("ti2v: empty clip");
                return {0};
            case TaskKind::predict4:
                if (T <= 4)
                    throw std::invalid_argument("predict4: needs more than 4 frames, got " + std::to_string(T));
                return {0, 1, 2, 3};
            default:  // interpolate
                if (T < 3) throw std::invalid_argument("interpolate: needs at least 3 frames");
                return {0, T - 1};
        }
    }

    int64_t sampling_stride() const { return kind == TaskKind::keyframe ? 20 : 1; }
};

// Per-frame loss inclusion flags.
struct LossMask {
    std::vector<bool> include;

    static LossMask all(int64_t T) { return LossMask{std::vector<bool>(static_cast<size_t>(T), true)}; }
    int64_t included_count() const {
        return static_cast<int64_t>(std::count(include.begin(), include.end(), true));
    }
};

namespace detail {

// Overwrites the pinned frames of x with the condition frames, leaving every
// other frame bit-identical. Tape-aware so gradients route correctly.
template <class S>
TensorBase<S> replace_frames(const TensorBase<S>& x, const ImageConditionT<S>& img,
                             const std::vector<int64_t>& pinned) {
    int64_t T = x.dim(0);
    if (img.frame_indices != pinned)
        throw std::invalid_argument("frame replacement: condition frame indices do not match the task mode");
    if (img.frames.dim(0) != static_cast<int64_t>(pinned.size()))
        throw std::invalid_argument("frame replacement: condition frame count mismatch");
    Shape want = x.shape();
    want[0] = img.frames.dim(0);
    if (img.frames.shape() != want) throw std::invalid_argument("frame replacement: condition frame shape mismatch");
    std::vector<int64_t> rest;
    for (int64_t f = 0; f < T; ++f)
        if (std::find(pinned.begin(), pinned.end(), f) == pinned.end()) rest.push_back(f);
    return add(index_scatter(index_select(x, 0, rest), 0, rest, T), index_scatter(img.frames, 0, pinned, T));
}

}  // namespace detail

// Training-side frame replacement: pin clean latents into x_t and exclude
// those frames from the loss (unless first_frame_loss keeps them in).
template <class S>
std::pair<VideoLatentT<S>, LossMask> apply_frame_replacement(const VideoLatentT<S>& x_t,
                                                             const std::optional<ImageConditionT<S>>& c_img,
                                                             const TaskMode& mode, bool first_frame_loss = false) {
    int64_t T = x_t.data.dim(0);
    auto pinned = mode.pinned_frames(T);
    if (pinned.empty()) {
        if (c_img) throw std::invalid_argument("frame replacement: mode " + std::string(to_string(mode.kind)) +
                                               " takes no image condition");
        return {x_t, LossMask::all(T)};
    }
    if (!c_img) throw std::invalid_argument("frame replacement: mode " + std::string(to_string(mode.kind)) +
                                            " requires an image condition");
    VideoLatentT<S> out{detail::replace_frames(x_t.data, *c_img, pinned), x_t.micro};
    auto mask = LossMask::all(T);
    if (!first_frame_loss)
        for (int64_t f : pinned) mask.include[static_cast<size_t>(f)] = false;
    return {out, mask};
}

// Sampler-side re-pinning of the evolving state. Identity for unpinned modes;
// idempotent by construction.
template <class S>
VideoLatentT<S> pin_state(const VideoLatentT<S>& x, const std::optional<ImageConditionT<S>>& c_img,
                          const TaskMode& mode) {
    auto pinned = mode.pinned_frames(x.data.dim(0));
    if (pinned.empty()) {
        if (c_img) throw std::invalid_argument("pin_state: mode takes no image condition");
        return x;
    }
    if (!c_img) throw std::invalid_argument("pin_state: mode requires an image condition");
    return VideoLatentT<S>{detail::replace_frames(x.data, *c_img, pinned), x.micro};
}

// Independent text/image dropout for classifier-free guidance training.
template <class S>
ConditionT<S> sample_training_condition(RngState& rng, const ConditionT<S>& full, double text_dropout_p,
                                        double image_dropout_p) {
    ConditionT<S> out = full;
    if (rng_uniform(rng) < text_dropout_p) out.text_tokens.reset();
    if (rng_uniform(rng) < image_dropout_p) out.image.reset();
    return out;
}

}  // namespace stiv
