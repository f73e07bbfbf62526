#pragma once

// Independent reference implementations used to cross-check the library.
// Everything here is written against the documented contracts only, with
// deliberately different algorithms/code paths than the production code.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "ebsr/event_sim.hpp"
#include "ebsr/events.hpp"
#include "ebsr/mcer.hpp"
#include "ebsr/tensor.hpp"

namespace oracle {

using ebsr::Event;
using ebsr::EventStream;
using ebsr::Rng;
using ebsr::Tensor;

// ---------------------------------------------------------------------------
// Brute-force level-crossing enumerator.
//
// Tracks the reference as an integer level index k relative to the pixel's
// initial log value, so the k-th level is computed directly as l0 + k*c
// instead of by accumulation. Segment convention: left endpoint exclusive,
// right endpoint inclusive; the reference becomes the crossed level.
inline EventStream enumerate_events(const ebsr::VideoSequence& seq, double c, double log_eps) {
    const std::int64_t h = seq.frames[0].height();
    const std::int64_t w = seq.frames[0].width();

    std::vector<Tensor> logs;
    for (const ebsr::ImageTensor& f : seq.frames) {
        Tensor lum = ebsr::to_luminance(f.chw);
        for (double& v : lum.data) v = std::log(v + log_eps);
        logs.push_back(std::move(lum));
    }

    EventStream out;
    out.width = static_cast<std::uint16_t>(w);
    out.height = static_cast<std::uint16_t>(h);
    out.threshold = c;
    out.log_eps = log_eps;

    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
            const double l0 = logs[0].at(0, y, x);
            std::int64_t k = 0;
            for (std::size_t j = 0; j + 1 < logs.size(); ++j) {
                const double v0 = logs[j].at(0, y, x);
                const double v1 = logs[j + 1].at(0, y, x);
                const double t0 = seq.timestamps[j];
                const double t1 = seq.timestamps[j + 1];
                if (v1 > v0) {
                    while (true) {
                        const double level = l0 + static_cast<double>(k + 1) * c;
                        if (!(level > v0 && level <= v1)) break;
                        const double te = t0 + (level - v0) / (v1 - v0) * (t1 - t0);
                        out.records.push_back(Event{te, static_cast<std::uint16_t>(x),
                                                    static_cast<std::uint16_t>(y), 1});
                        ++k;
                    }
                } else if (v1 < v0) {
                    while (true) {
                        const double level = l0 + static_cast<double>(k - 1) * c;
                        if (!(level < v0 && level >= v1)) break;
                        const double te = t0 + (level - v0) / (v1 - v0) * (t1 - t0);
                        out.records.push_back(Event{te, static_cast<std::uint16_t>(x),
                                                    static_cast<std::uint16_t>(y), -1});
                        --k;
                    }
                }
            }
        }
    out.sort_canonical();
    return out;
}

// ---------------------------------------------------------------------------
// Direct event-map quantizers: plain loops over the raw stream, no shared
// windowing helper.

struct DirectMaps {
    Tensor count_pos, count_neg, ts_pos, ts_neg;
};

inline DirectMaps direct_maps(const EventStream& events, double f, double dt) {
    const std::int64_t h = events.height, w = events.width;
    DirectMaps m{Tensor({1, h, w}), Tensor({1, h, w}), Tensor({1, h, w}), Tensor({1, h, w})};
    Tensor last_pos = Tensor::full({1, h, w}, -1.0);
    Tensor last_neg = Tensor::full({1, h, w}, -1.0);
    const double lo = f - 0.5 * dt, hi = f + 0.5 * dt;
    for (const Event& e : events.records) {
        if (e.t < lo || e.t > hi) continue;
        if (e.p > 0) {
            m.count_pos.at(0, e.y, e.x) += 1.0;
            last_pos.at(0, e.y, e.x) = std::max(last_pos.at(0, e.y, e.x), e.t);
        } else {
            m.count_neg.at(0, e.y, e.x) += 1.0;
            last_neg.at(0, e.y, e.x) = std::max(last_neg.at(0, e.y, e.x), e.t);
        }
    }
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
            if (last_pos.at(0, y, x) >= 0.0) m.ts_pos.at(0, y, x) = (last_pos.at(0, y, x) - lo) / dt;
            if (last_neg.at(0, y, x) >= 0.0) m.ts_neg.at(0, y, x) = (last_neg.at(0, y, x) - lo) / dt;
        }
    return m;
}

// ---------------------------------------------------------------------------
// Reference SSIM: direct dense 2-D Gaussian-window statistics, no separable
// tricks, accumulation in long double.
inline double ssim_reference(const Tensor& a, const Tensor& b) {
    const std::int64_t c = a.dim(0), h = a.dim(1), w = a.dim(2);
    const int rad = 5;
    const double sigma = 1.5;
    double kernel[11][11];
    long double ksum = 0.0L;
    for (int i = -rad; i <= rad; ++i)
        for (int j = -rad; j <= rad; ++j) {
            kernel[i + rad][j + rad] = std::exp(-(i * i + j * j) / (2.0 * sigma * sigma));
            ksum += kernel[i + rad][j + rad];
        }
    for (auto& row : kernel)
        for (double& v : row) v = static_cast<double>(v / ksum);

    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    long double total = 0.0L;
    std::int64_t n = 0;
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t y = rad; y < h - rad; ++y)
            for (std::int64_t x = rad; x < w - rad; ++x) {
                long double ma = 0, mb = 0, maa = 0, mbb = 0, mab = 0;
                for (int i = -rad; i <= rad; ++i)
                    for (int j = -rad; j <= rad; ++j) {
                        const double k = kernel[i + rad][j + rad];
                        const double va = a.at(ch, y + i, x + j);
                        const double vb = b.at(ch, y + i, x + j);
                        ma += k * va;
                        mb += k * vb;
                        maa += k * va * va;
                        mbb += k * vb * vb;
                        mab += k * va * vb;
                    }
                const long double va = maa - ma * ma, vb = mbb - mb * mb, cab = mab - ma * mb;
                total += ((2 * ma * mb + c1) * (2 * cab + c2)) /
                         ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++n;
            }
    return static_cast<double>(total / n);
}

// ---------------------------------------------------------------------------
// Random test data.

inline Tensor random_tensor(Rng& rng, const ebsr::Shape& shape, double lo = 0.0, double hi = 1.0) {
    Tensor t(shape);
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// A random smooth-ish video sequence with enough contrast to emit events.
// Values stay strictly inside (0, 1) by construction: no clamping, so the
// corpus has no artificial plateaus or repeated exact values.
inline ebsr::VideoSequence random_sequence(Rng& rng, std::int64_t h, std::int64_t w,
                                           std::int64_t frames) {
    ebsr::VideoSequence seq;
    seq.exposure = {0.0, 1.0};
    Tensor base = random_tensor(rng, {1, h, w}, -1.0, 1.0);
    const double phase = rng.uniform(0.0, 6.28);
    for (std::int64_t i = 0; i < frames; ++i) {
        const double t = static_cast<double>(i) / static_cast<double>(frames - 1);
        Tensor f({1, h, w});
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) {
                const double v = 0.5 + 0.08 * base.at(0, y, x) +
                                 0.25 * std::sin(6.0 * t + 0.5 * x + 0.3 * y + phase) +
                                 0.1 * std::cos(9.0 * t - 0.4 * x + 0.7 * y);
                f.at(0, y, x) = v;
            }
        seq.frames.emplace_back(f, ebsr::Resolution::LR);
        seq.timestamps.push_back(t);
    }
    seq.timestamps.front() = 0.0;
    seq.timestamps.back() = 1.0;
    return seq;
}

// A random event stream with timestamps spread over the exposure.
inline EventStream random_stream(Rng& rng, std::int64_t h, std::int64_t w, std::int64_t count,
                                 const ebsr::TimeInterval& exposure) {
    EventStream s;
    s.width = static_cast<std::uint16_t>(w);
    s.height = static_cast<std::uint16_t>(h);
    s.threshold = 0.2;
    for (std::int64_t i = 0; i < count; ++i) {
        Event e;
        e.t = rng.uniform(exposure.start, exposure.end);
        e.x = static_cast<std::uint16_t>(rng.below(static_cast<std::uint64_t>(w)));
        e.y = static_cast<std::uint16_t>(rng.below(static_cast<std::uint64_t>(h)));
        e.p = rng.below(2) ? 1 : -1;
        s.records.push_back(e);
    }
    s.sort_canonical();
    return s;
}

}  // namespace oracle
