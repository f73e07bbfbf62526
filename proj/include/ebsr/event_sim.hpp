#pragma once

// Synthetic data pipeline: blur formation, area downsampling, and an
// idealized event camera over a sequence of sharp frames.
//
// The event model: per pixel, the log intensity l(t) = log(I(t) + log_eps)
// is linearly interpolated between frame samples. An event of polarity p
// fires each time l crosses the level ref + p*c, where ref is the level
// crossed by the previous event of that pixel (the first frame's value
// initially). Crossings at a segment's right endpoint are inclusive; the
// left endpoint is exclusive so a crossing is never emitted twice.

#include <cmath>
#include <cstdint>
#include <vector>

#include "ebsr/events.hpp"
#include "ebsr/image.hpp"
#include "ebsr/tensor.hpp"

namespace ebsr {

struct TimeInterval {
    double start = 0.0;
    double end = 0.0;

    double duration() const { return end - start; }
    double midpoint() const { return 0.5 * (start + end); }
    bool contains(double t) const { return t >= start && t <= end; }

    void validate() const {
        if (!(end > start)) throw ArgumentError("TimeInterval: end must exceed start");
    }
};

struct VideoSequence {
    std::vector<ImageTensor> frames;  // equal shapes, values in [0, 1]
    std::vector<double> timestamps;   // strictly increasing, spans exposure
    TimeInterval exposure;

    void validate() const {
        exposure.validate();
        if (frames.size() < 2) throw ArgumentError("VideoSequence: need at least 2 frames");
        if (frames.size() != timestamps.size())
            throw ArgumentError("VideoSequence: frame/timestamp count mismatch");
        for (std::size_t i = 0; i < frames.size(); ++i) {
            if (!frames[i].chw.same_shape(frames[0].chw))
                throw DimensionError("VideoSequence: frame " + std::to_string(i) + " shape differs");
            if (i > 0 && !(timestamps[i] > timestamps[i - 1]))
                throw ArgumentError("VideoSequence: timestamps not strictly increasing at index " + std::to_string(i));
            for (double v : frames[i].chw.data)
                if (!(v >= 0.0 && v <= 1.0))
                    throw ArgumentError("VideoSequence: pixel value outside [0, 1] in frame " + std::to_string(i));
        }
        if (timestamps.front() != exposure.start || timestamps.back() != exposure.end)
            throw ArgumentError("VideoSequence: timestamps must span the exposure interval");
    }
};

// Area averaging over scale x scale blocks.
inline Tensor downsample(const Tensor& chw, std::int64_t scale) {
    if (chw.rank() != 3) throw DimensionError("downsample: expected (C, H, W)");
    if (scale < 1) throw ArgumentError("downsample: scale must be >= 1");
    const std::int64_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
    if (h % scale != 0 || w % scale != 0)
        throw DimensionError("downsample: dimensions " + shape_str(chw.shape) + " not divisible by " + std::to_string(scale));
    if (scale == 1) return chw;
    Tensor out({c, h / scale, w / scale});
    const long double block = static_cast<long double>(scale * scale);
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t y = 0; y < h / scale; ++y)
            for (std::int64_t x = 0; x < w / scale; ++x) {
                long double acc = 0.0L;
                for (std::int64_t dy = 0; dy < scale; ++dy)
                    for (std::int64_t dx = 0; dx < scale; ++dx) acc += chw.at(ch, y * scale + dy, x * scale + dx);
                out.at(ch, y, x) = static_cast<double>(acc / block);
            }
    return out;
}

inline ImageTensor downsample(const ImageTensor& img, std::int64_t scale) {
    return ImageTensor(downsample(img.chw, scale), Resolution::LR);
}

// Per-pixel mean of equally shaped frames: the discretized blur integral.
// Extended-precision accumulation keeps the sum of up to ~2000 identical
// values exact, so a static scene reproduces its frame bit-for-bit.
inline Tensor synthesize_blur(const std::vector<Tensor>& frames) {
    if (frames.empty()) throw ArgumentError("synthesize_blur: empty frame list");
    for (const Tensor& f : frames) require_same_shape(f, frames[0], "synthesize_blur");
    Tensor out(frames[0].shape);
    const long double m = static_cast<long double>(frames.size());
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        long double acc = 0.0L;
        for (const Tensor& f : frames) acc += f.data[i];
        out.data[i] = static_cast<double>(acc / m);
    }
    return out;
}

inline ImageTensor synthesize_blur(const std::vector<ImageTensor>& frames) {
    if (frames.empty()) throw ArgumentError("synthesize_blur: empty frame list");
    std::vector<Tensor> raw;
    raw.reserve(frames.size());
    for (const ImageTensor& f : frames) raw.push_back(f.chw);
    return ImageTensor(synthesize_blur(raw), frames[0].res);
}

inline Tensor log_frame(const Tensor& chw, double log_eps) {
    Tensor lum = to_luminance(chw);
    for (double& v : lum.data) v = std::log(v + log_eps);
    return lum;
}

inline EventStream simulate_events(const VideoSequence& seq, double threshold = 0.2, double log_eps = 1e-3) {
    if (!(threshold > 0.0)) throw ArgumentError("simulate_events: threshold must be positive");
    if (!(log_eps > 0.0)) throw ArgumentError("simulate_events: log_eps must be positive");
    seq.validate();

    const std::int64_t h = seq.frames[0].height();
    const std::int64_t w = seq.frames[0].width();
    if (h > 65535 || w > 65535) throw DimensionError("simulate_events: sensor exceeds uint16 coordinates");

    std::vector<Tensor> logs;
    logs.reserve(seq.frames.size());
    for (const ImageTensor& f : seq.frames) logs.push_back(log_frame(f.chw, log_eps));

    EventStream out;
    out.width = static_cast<std::uint16_t>(w);
    out.height = static_cast<std::uint16_t>(h);
    out.threshold = threshold;
    out.log_eps = log_eps;

    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            double ref = logs[0].at(0, y, x);
            for (std::size_t j = 0; j + 1 < logs.size(); ++j) {
                const double v0 = logs[j].at(0, y, x);
                const double v1 = logs[j + 1].at(0, y, x);
                if (v1 == v0) continue;
                const double t0 = seq.timestamps[j];
                const double dt = seq.timestamps[j + 1] - t0;
                const double pol = v1 > v0 ? 1.0 : -1.0;
                double level = ref + pol * threshold;
                while ((pol > 0.0 && level > v0 && level <= v1) || (pol < 0.0 && level < v0 && level >= v1)) {
                    const double te = t0 + (level - v0) * dt / (v1 - v0);
                    out.records.push_back(Event{te, static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y),
                                                static_cast<std::int8_t>(pol > 0.0 ? 1 : -1)});
                    ref = level;
                    level += pol * threshold;
                }
            }
        }
    }
    out.sort_canonical();
    return out;
}

// Validation oracle: integrate polarities to recover the log intensity at
// time t from the initial log frame. Quantization leaves at most one
// threshold of residual error.
inline Tensor reconstruct_log_intensity(const EventStream& events, const Tensor& initial_log, double t,
                                        const TimeInterval& interval) {
    interval.validate();
    if (!interval.contains(t)) throw ArgumentError("reconstruct_log_intensity: t outside the stream interval");
    if (initial_log.rank() != 3 || initial_log.dim(0) != 1 || initial_log.dim(1) != events.height ||
        initial_log.dim(2) != events.width)
        throw DimensionError("reconstruct_log_intensity: initial frame does not match the sensor");
    Tensor out = initial_log;
    for (const Event& e : events.records) {
        if (e.t > t) break;  // records are time sorted
        out.at(0, e.y, e.x) += events.threshold * static_cast<double>(e.p);
    }
    return out;
}

}  // namespace ebsr
