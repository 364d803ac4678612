#pragma once

#include "codec.hpp"
#include "ppm.hpp"
#include "tensor.hpp"
#include "text.hpp"
#include "types.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace stiv {

enum class ShapeKind { square, circle, triangle };
enum class ColorKind { red, green, blue };
enum class Direction { up, down, left, right };

inline const char* to_string(ShapeKind s) {
    switch (s) {
        case ShapeKind::square: return "square";
        case ShapeKind::circle: return "circle";
        default: return "triangle";
    }
}
inline const char* to_string(ColorKind c) {
    switch (c) {
        case ColorKind::red: return "red";
        case ColorKind::green: return "green";
        default: return "blue";
    }
}
inline const char* to_string(Direction d) {
    switch (d) {
        case Direction::up: return "up";
        case Direction::down: return "down";
        case Direction::left: return "left";
        default: return "right";
    }
}

// One corpus entry. speed 0 is a test-only static variant, never emitted by
// the corpus enumerators.
struct ClipSpec {
    ShapeKind shape = ShapeKind::square;
    ColorKind color = ColorKind::red;
    Direction direction = Direction::right;
    int64_t speed = 1;  // pixels per frame
    int64_t frames = 8;
    int64_t height = 32, width = 32;

    std::string caption() const {
        return std::string("a ") + to_string(color) + " " + to_string(shape) + " moving " + to_string(direction) +
               " speed " + std::to_string(speed);
    }
    std::string name() const {
        return std::string(to_string(color)) + "_" + to_string(shape) + "_" + to_string(direction) + "_" +
               std::to_string(speed);
    }
};

namespace detail {

inline constexpr int64_t kObjectExtent = 10;

inline void direction_delta(Direction d, int64_t speed, int64_t& dx, int64_t& dy) {
    dx = dy = 0;
    switch (d) {
        case Direction::up: dy = -speed; break;
        case Direction::down: dy = speed; break;
        case Direction::left: dx = -speed; break;
        case Direction::right: dx = speed; break;
    }
}

// true if pixel (px,py) inside the shape whose bounding box starts at (x0,y0)
inline bool shape_hit(ShapeKind s, int64_t x0, int64_t y0, int64_t px, int64_t py) {
    int64_t lx = px - x0, ly = py - y0;
    if (lx < 0 || ly < 0 || lx >= kObjectExtent || ly >= kObjectExtent) return false;
    switch (s) {
        case ShapeKind::square:
            return true;
        case ShapeKind::circle: {
            double cx = (kObjectExtent - 1) / 2.0, cy = (kObjectExtent - 1) / 2.0;
            double r = kObjectExtent / 2.0 - 0.5;
            return (lx - cx) * (lx - cx) + (ly - cy) * (ly - cy) <= r * r + 1e-9;
        }
        default: {  // triangle, apex at top, base at bottom
            int64_t half = (ly + 1) / 2;
            int64_t mid_lo = kObjectExtent / 2 - 1, mid_hi = kObjectExtent / 2;
            return lx >= mid_lo - half + 1 && lx <= mid_hi + half - 1;
        }
    }
}

inline void color_rgb(ColorKind c, uint8_t out[3]) {
    out[0] = out[1] = out[2] = 0;
    switch (c) {
        case ColorKind::red: out[0] = 255; break;
        case ColorKind::green: out[1] = 255; break;
        case ColorKind::blue: out[2] = 255; break;
    }
}

inline uint64_t fnv1a(const std::string& s) {
    uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace detail

struct GeneratedClip {
    std::vector<Image> frames;       // byte rasters, one per frame
    std::vector<int64_t> tokens;     // caption token ids
    MicroConditions micro;
};

// Hard-edged raster of the moving object, start position centered on the
// trajectory so the object stays in bounds for all corpus specs.
inline GeneratedClip generate_clip(const ClipSpec& spec) {
    int64_t dx, dy;
    detail::direction_delta(spec.direction, spec.speed, dx, dy);
    int64_t ext = detail::kObjectExtent;
    int64_t x0 = (spec.width - ext) / 2 - dx * (spec.frames - 1) / 2;
    int64_t y0 = (spec.height - ext) / 2 - dy * (spec.frames - 1) / 2;

    uint8_t rgb[3];
    detail::color_rgb(spec.color, rgb);
    GeneratedClip clip;
    clip.tokens = tokenize(spec.caption());
    clip.micro = MicroConditions{spec.height, spec.width, 0, 0, 1, spec.frames};
    for (int64_t t = 0; t < spec.frames; ++t) {
        int64_t ox = x0 + dx * t, oy = y0 + dy * t;
        if (ox < 0 || oy < 0 || ox + ext > spec.width || oy + ext > spec.height)
            throw std::invalid_argument("generate_clip: trajectory leaves the frame for " + spec.name());
        Image img{spec.height, spec.width, std::vector<uint8_t>(static_cast<size_t>(spec.height * spec.width * 3), 0)};
        for (int64_t py = oy; py < oy + ext; ++py)
            for (int64_t px = ox; px < ox + ext; ++px)
                if (detail::shape_hit(spec.shape, ox, oy, px, py)) {
                    size_t base = static_cast<size_t>((py * spec.width + px) * 3);
                    img.rgb[base] = rgb[0];
                    img.rgb[base + 1] = rgb[1];
                    img.rgb[base + 2] = rgb[2];
                }
        clip.frames.push_back(std::move(img));
    }
    return clip;
}

enum class MotionVerdict { up, down, left, right, still };

inline const char* to_string(MotionVerdict v) {
    switch (v) {
        case MotionVerdict::up: return "up";
        case MotionVerdict::down: return "down";
        case MotionVerdict::left: return "left";
        case MotionVerdict::right: return "right";
        default: return "static";
    }
}

struct MotionEstimate {
    MotionVerdict direction = MotionVerdict::still;
    double speed = 0.0;       // pixels per frame along the dominant axis
    double confidence = 0.0;  // fraction of frame pairs agreeing with the verdict
};

inline bool matches(MotionVerdict v, Direction d) {
    return (v == MotionVerdict::up && d == Direction::up) || (v == MotionVerdict::down && d == Direction::down) ||
           (v == MotionVerdict::left && d == Direction::left) || (v == MotionVerdict::right && d == Direction::right);
}

// Intensity-weighted centroid tracking on normalized pixels [T,H,W,3] in
// [-1,1]. Looks only at the raster, never at captions or model state.
template <class S>
MotionEstimate motion_oracle(const TensorBase<S>& pixels) {
    const auto& sh = pixels.shape();
    if (sh.size() != 4 || sh[3] != 3 || sh[0] < 1) throw std::invalid_argument("motion_oracle: expected [T,H,W,3]");
    int64_t T = sh[0], H = sh[1], W = sh[2];
    const S* src = pixels.data().data();

    std::vector<double> cx(static_cast<size_t>(T)), cy(static_cast<size_t>(T));
    for (int64_t t = 0; t < T; ++t) {
        double wsum = 0, xsum = 0, ysum = 0;
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                const S* p = src + ((t * H + y) * W + x) * 3;
                double wgt = 0;
                for (int c = 0; c < 3; ++c) wgt += (static_cast<double>(p[c]) + 1.0) * 0.5;
                wsum += wgt;
                xsum += wgt * static_cast<double>(x);
                ysum += wgt * static_cast<double>(y);
            }
        if (wsum < 1e-9) return MotionEstimate{};  // all-black frame, nothing to track
        cx[static_cast<size_t>(t)] = xsum / wsum;
        cy[static_cast<size_t>(t)] = ysum / wsum;
    }
    if (T == 1) return MotionEstimate{};

    std::vector<double> dx, dy;
    for (int64_t t = 0; t + 1 < T; ++t) {
        dx.push_back(cx[static_cast<size_t>(t + 1)] - cx[static_cast<size_t>(t)]);
        dy.push_back(cy[static_cast<size_t>(t + 1)] - cy[static_cast<size_t>(t)]);
    }
    double ax = 0, ay = 0;
    for (size_t i = 0; i < dx.size(); ++i) {
        ax += std::abs(dx[i]);
        ay += std::abs(dy[i]);
    }
    const std::vector<double>& axis = ax >= ay ? dx : dy;

    std::vector<double> mags(axis.size());
    for (size_t i = 0; i < axis.size(); ++i) mags[i] = std::abs(axis[i]);
    std::sort(mags.begin(), mags.end());
    double speed = mags[mags.size() / 2];
    if (speed < 0.1) return MotionEstimate{MotionVerdict::still, 0.0, 1.0};

    int pos = 0, neg = 0;
    for (double v : axis) (v >= 0 ? pos : neg)++;
    bool positive = pos >= neg;
    MotionVerdict dir = ax >= ay ? (positive ? MotionVerdict::right : MotionVerdict::left)
                                 : (positive ? MotionVerdict::down : MotionVerdict::up);
    double conf = static_cast<double>(std::max(pos, neg)) / static_cast<double>(axis.size());
    return MotionEstimate{dir, speed, conf};
}

// All 3 shapes x 3 colors x 4 directions x 2 speeds = 72 specs.
inline std::vector<ClipSpec> full_corpus(int64_t frames = 8, int64_t height = 32, int64_t width = 32) {
    std::vector<ClipSpec> out;
    for (auto s : {ShapeKind::square, ShapeKind::circle, ShapeKind::triangle})
        for (auto c : {ColorKind::red, ColorKind::green, ColorKind::blue})
            for (auto d : {Direction::up, Direction::down, Direction::left, Direction::right})
                for (int64_t sp : {int64_t(1), int64_t(2)})
                    out.push_back(ClipSpec{s, c, d, sp, frames, height, width});
    return out;
}

// Deterministic split keyed on the spec name, independent of enumeration order.
inline bool is_holdout(const ClipSpec& spec) { return detail::fnv1a(spec.name()) % 6 == 0; }

inline std::vector<ClipSpec> train_corpus(int64_t frames = 8, int64_t height = 32, int64_t width = 32) {
    std::vector<ClipSpec> out;
    for (const auto& s : full_corpus(frames, height, width))
        if (!is_holdout(s)) out.push_back(s);
    return out;
}

inline std::vector<ClipSpec> holdout_corpus(int64_t frames = 8, int64_t height = 32, int64_t width = 32) {
    std::vector<ClipSpec> out;
    for (const auto& s : full_corpus(frames, height, width))
        if (is_holdout(s)) out.push_back(s);
    return out;
}

}  // namespace stiv
