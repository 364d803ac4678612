#pragma once

#include "tensor.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace stiv {

// Metadata scalars embedded as conditioning.
struct MicroConditions {
    int64_t orig_h = 0, orig_w = 0;
    int64_t crop_top = 0, crop_left = 0;
    int64_t sampling_stride = 1;
    int64_t num_frames = 0;

    std::vector<double> scalars() const {
        return {double(orig_h), double(orig_w), double(crop_top), double(crop_left), double(sampling_stride),
                double(num_frames)};
    }
};

// A latent clip [T, H, W, C] plus its micro-metadata.
template <class S>
struct VideoLatentT {
    TensorBase<S> data;
    MicroConditions micro;
};

// Pinned latent frames for frame replacement.
template <class S>
struct ImageConditionT {
    TensorBase<S> frames;                // [K, H, W, C]
    std::vector<int64_t> frame_indices;  // sorted, within [0, T)
};

// Optional text (token ids; null text becomes the single NULL token) and
// optional image condition.
template <class S>
struct ConditionT {
    std::optional<std::vector<int64_t>> text_tokens;
    std::optional<ImageConditionT<S>> image;
};

using VideoLatent = VideoLatentT<float>;
using Condition = ConditionT<float>;

}  // namespace stiv
