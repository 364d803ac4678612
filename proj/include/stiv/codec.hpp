#pragma once

#include "ppm.hpp"
#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace stiv {

// Fixed linear pixel<->latent codec. Each 2x2 pixel block per color channel is
// mapped to four latent channels by the orthonormal Haar basis
//   a = (x00+x01+x10+x11)/2   (2x the average pool)
//   h = (x00-x01+x10-x11)/2
//   v = (x00+x01-x10-x11)/2
//   d = (x00-x01-x10+x11)/2
// The map is its own inverse up to the same 1/2 factor, so encode/decode round
// trips exactly in floating point. Pixels live in [-1,1] via x = 2p-1.
inline constexpr int64_t kCodecSpatial = 2;
inline constexpr int64_t kCodecChannels = 12;  // 3 colors x 4 subbands

namespace detail {

template <class S>
void haar2x2_forward(const S* x, S* y) {
    // x: 4 samples of one channel in row-major 2x2 order, y: a,h,v,d
    y[0] = static_cast<S>((x[0] + x[1] + x[2] + x[3]) * 0.5);
    y[1] = static_cast<S>((x[0] - x[1] + x[2] - x[3]) * 0.5);
    y[2] = static_cast<S>((x[0] + x[1] - x[2] - x[3]) * 0.5);
    y[3] = static_cast<S>((x[0] - x[1] - x[2] + x[3]) * 0.5);
}

template <class S>
void haar2x2_inverse(const S* y, S* x) {
    x[0] = static_cast<S>((y[0] + y[1] + y[2] + y[3]) * 0.5);
    x[1] = static_cast<S>((y[0] - y[1] + y[2] - y[3]) * 0.5);
    x[2] = static_cast<S>((y[0] + y[1] - y[2] - y[3]) * 0.5);
    x[3] = static_cast<S>((y[0] - y[1] - y[2] + y[3]) * 0.5);
}

}  // namespace detail

// [T,H,W,3] pixels in [-1,1] -> [T,H/2,W/2,12] latent. Pure data transform,
// never recorded on the autograd tape.
template <class S>
TensorBase<S> encode_pixels(const TensorBase<S>& pixels) {
    const auto& sh = pixels.shape();
    if (sh.size() != 4 || sh[3] != 3 || sh[1] % 2 != 0 || sh[2] % 2 != 0)
        throw std::invalid_argument("encode_pixels: expected [T,H,W,3] with even H,W");
    int64_t T = sh[0], H = sh[1], W = sh[2];
    int64_t h = H / 2, w = W / 2;
    auto out = TensorBase<S>::zeros({T, h, w, kCodecChannels});
    const S* src = pixels.data().data();
    S* dst = out.data().data();
    for (int64_t t = 0; t < T; ++t)
        for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w; ++j)
                for (int64_t c = 0; c < 3; ++c) {
                    const S* base = src + ((t * H + 2 * i) * W + 2 * j) * 3 + c;
                    S block[4] = {base[0], base[3], base[W * 3], base[W * 3 + 3]};
                    S sub[4];
                    detail::haar2x2_forward(block, sub);
                    S* o = dst + ((t * h + i) * w + j) * kCodecChannels + c * 4;
                    o[0] = sub[0];
                    o[1] = sub[1];
                    o[2] = sub[2];
                    o[3] = sub[3];
                }
    return out;
}

// [T,h,w,12] latent -> [T,2h,2w,3] pixels. Exact inverse of encode_pixels.
template <class S>
TensorBase<S> decode_latent(const TensorBase<S>& latent) {
    const auto& sh = latent.shape();
    if (sh.size() != 4 || sh[3] != kCodecChannels)
        throw std::invalid_argument("decode_latent: expected [T,h,w,12]");
    int64_t T = sh[0], h = sh[1], w = sh[2];
    int64_t H = h * 2, W = w * 2;
    auto out = TensorBase<S>::zeros({T, H, W, 3});
    const S* src = latent.data().data();
    S* dst = out.data().data();
    for (int64_t t = 0; t < T; ++t)
        for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w; ++j)
                for (int64_t c = 0; c < 3; ++c) {
                    const S* o = src + ((t * h + i) * w + j) * kCodecChannels + c * 4;
                    S block[4];
                    detail::haar2x2_inverse(o, block);
                    S* base = dst + ((t * H + 2 * i) * W + 2 * j) * 3 + c;
                    base[0] = block[0];
                    base[3] = block[1];
                    base[W * 3] = block[2];
                    base[W * 3 + 3] = block[3];
                }
    return out;
}

// Byte raster -> normalized pixel tensor, x = 2*(byte/255) - 1.
template <class S>
TensorBase<S> frames_to_pixels(const std::vector<Image>& frames) {
    if (frames.empty()) throw std::invalid_argument("frames_to_pixels: empty clip");
    int64_t T = static_cast<int64_t>(frames.size());
    int64_t H = frames[0].height, W = frames[0].width;
    auto out = TensorBase<S>::zeros({T, H, W, 3});
    S* dst = out.data().data();
    for (int64_t t = 0; t < T; ++t) {
        if (frames[t].height != H || frames[t].width != W)
            throw std::invalid_argument("frames_to_pixels: inconsistent frame sizes");
        for (size_t k = 0; k < frames[t].rgb.size(); ++k)
            dst[t * H * W * 3 + static_cast<int64_t>(k)] =
                static_cast<S>(2.0 * (frames[t].rgb[k] / 255.0) - 1.0);
    }
    return out;
}

// Normalized pixel tensor -> byte rasters, byte = round(clamp((x+1)/2)*255).
template <class S>
std::vector<Image> pixels_to_frames(const TensorBase<S>& pixels) {
    const auto& sh = pixels.shape();
    if (sh.size() != 4 || sh[3] != 3) throw std::invalid_argument("pixels_to_frames: expected [T,H,W,3]");
    int64_t T = sh[0], H = sh[1], W = sh[2];
    std::vector<Image> frames(static_cast<size_t>(T));
    const S* src = pixels.data().data();
    for (int64_t t = 0; t < T; ++t) {
        frames[static_cast<size_t>(t)] = Image{H, W, std::vector<uint8_t>(static_cast<size_t>(H * W * 3))};
        auto& rgb = frames[static_cast<size_t>(t)].rgb;
        for (size_t k = 0; k < rgb.size(); ++k) {
            double p = (static_cast<double>(src[t * H * W * 3 + static_cast<int64_t>(k)]) + 1.0) * 0.5;
            p = std::clamp(p, 0.0, 1.0);
            rgb[k] = static_cast<uint8_t>(std::lround(p * 255.0));
        }
    }
    return frames;
}

}  // namespace stiv
