#pragma once

// Image container and resampling helpers. Images are CHW doubles in [0, 1]
// with a low/high resolution tag carried alongside.

#include <cmath>
#include <cstdint>

#include "ebsr/tensor.hpp"

namespace ebsr {

enum class Resolution { LR, HR };

struct ImageTensor {
    Tensor chw;  // (C, H, W)
    Resolution res = Resolution::HR;

    ImageTensor() = default;
    ImageTensor(Tensor t, Resolution r) : chw(std::move(t)), res(r) {
        if (chw.rank() != 3) throw DimensionError("ImageTensor: expected (C, H, W), got " + shape_str(chw.shape));
    }

    std::int64_t channels() const { return chw.dim(0); }
    std::int64_t height() const { return chw.dim(1); }
    std::int64_t width() const { return chw.dim(2); }
};

// ITU-R BT.601 luminance. 1-channel input passes through unchanged.
inline Tensor to_luminance(const Tensor& chw) {
    if (chw.rank() != 3) throw DimensionError("to_luminance: expected (C, H, W)");
    const std::int64_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
    if (c == 1) return chw;
    if (c != 3) throw DimensionError("to_luminance: expected 1 or 3 channels, got " + std::to_string(c));
    Tensor out({1, h, w});
    const std::int64_t plane = h * w;
    for (std::int64_t i = 0; i < plane; ++i)
        out.data[i] = 0.299 * chw.data[i] + 0.587 * chw.data[plane + i] + 0.114 * chw.data[2 * plane + i];
    return out;
}

// Bilinear upsampling by integer factor, half-pixel centers (the parameter-free
// skip path of the network). Border samples clamp.
inline Tensor bilinear_upsample(const Tensor& chw, std::int64_t scale) {
    if (chw.rank() != 3) throw DimensionError("bilinear_upsample: expected (C, H, W)");
    if (scale < 1) throw ArgumentError("bilinear_upsample: scale must be >= 1");
    if (scale == 1) return chw;
    const std::int64_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
    Tensor out({c, h * scale, w * scale});
    const double inv = 1.0 / static_cast<double>(scale);
    for (std::int64_t oy = 0; oy < h * scale; ++oy) {
        const double sy = (static_cast<double>(oy) + 0.5) * inv - 0.5;
        const double fy = std::floor(sy);
        const double wy = sy - fy;
        const std::int64_t y0 = std::clamp<std::int64_t>(static_cast<std::int64_t>(fy), 0, h - 1);
        const std::int64_t y1 = std::clamp<std::int64_t>(y0 + 1, 0, h - 1);
        for (std::int64_t ox = 0; ox < w * scale; ++ox) {
            const double sx = (static_cast<double>(ox) + 0.5) * inv - 0.5;
            const double fx = std::floor(sx);
            const double wx = sx - fx;
            const std::int64_t x0 = std::clamp<std::int64_t>(static_cast<std::int64_t>(fx), 0, w - 1);
            const std::int64_t x1 = std::clamp<std::int64_t>(x0 + 1, 0, w - 1);
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const double top = (1.0 - wx) * chw.at(ch, y0, x0) + wx * chw.at(ch, y0, x1);
                const double bot = (1.0 - wx) * chw.at(ch, y1, x0) + wx * chw.at(ch, y1, x1);
                out.at(ch, oy, ox) = (1.0 - wy) * top + wy * bot;
            }
        }
    }
    return out;
}

// Nearest-neighbour (block-replicate) upsampling.
inline Tensor upsample_nearest(const Tensor& chw, std::int64_t scale) {
    if (chw.rank() != 3) throw DimensionError("upsample_nearest: expected (C, H, W)");
    if (scale < 1) throw ArgumentError("upsample_nearest: scale must be >= 1");
    const std::int64_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
    Tensor out({c, h * scale, w * scale});
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t y = 0; y < h * scale; ++y)
            for (std::int64_t x = 0; x < w * scale; ++x) out.at(ch, y, x) = chw.at(ch, y / scale, x / scale);
    return out;
}

inline Tensor crop(const Tensor& chw, std::int64_t y0, std::int64_t x0, std::int64_t ch_, std::int64_t cw) {
    if (chw.rank() != 3) throw DimensionError("crop: expected (C, H, W)");
    if (y0 < 0 || x0 < 0 || y0 + ch_ > chw.dim(1) || x0 + cw > chw.dim(2))
        throw DimensionError("crop: window outside image");
    Tensor out({chw.dim(0), ch_, cw});
    for (std::int64_t c = 0; c < chw.dim(0); ++c)
        for (std::int64_t y = 0; y < ch_; ++y)
            for (std::int64_t x = 0; x < cw; ++x) out.at(c, y, x) = chw.at(c, y0 + y, x0 + x);
    return out;
}

inline Tensor flip_horizontal(const Tensor& chw) {
    if (chw.rank() != 3) throw DimensionError("flip_horizontal: expected (C, H, W)");
    Tensor out(chw.shape);
    const std::int64_t w = chw.dim(2);
    for (std::int64_t c = 0; c < chw.dim(0); ++c)
        for (std::int64_t y = 0; y < chw.dim(1); ++y)
            for (std::int64_t x = 0; x < w; ++x) out.at(c, y, x) = chw.at(c, y, w - 1 - x);
    return out;
}

}  // namespace ebsr
