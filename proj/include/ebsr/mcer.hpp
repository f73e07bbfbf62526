#pragma once

// Multi-scale center-surround event representation: a nest of temporal
// windows centered at the exposure midpoint, each quantized into per-polarity
// count maps and timesurfaces and stacked along the channel axis.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ebsr/event_sim.hpp"
#include "ebsr/events.hpp"
#include "ebsr/image_io.hpp"
#include "ebsr/tensor.hpp"

namespace ebsr {

struct MCERConfig {
    std::vector<double> scales = {1.0, 0.5, 0.25};  // window fractions of T, strictly decreasing
    bool include_counts = true;
    bool include_timesurface = true;
    double count_normalizer = 10.0;  // network input scaling; raw counts are kept in the tensor

    std::int64_t channels_per_scale() const {
        return 2 * (include_counts ? 1 : 0) + 2 * (include_timesurface ? 1 : 0);
    }
    std::int64_t total_channels() const { return static_cast<std::int64_t>(scales.size()) * channels_per_scale(); }

    void validate() const {
        if (scales.empty()) throw ConfigError("MCERConfig: empty scale list");
        if (scales.front() != 1.0) throw ConfigError("MCERConfig: first scale must be 1.0");
        for (std::size_t i = 0; i < scales.size(); ++i) {
            if (!(scales[i] > 0.0 && scales[i] <= 1.0)) throw ConfigError("MCERConfig: scales must lie in (0, 1]");
            if (i > 0 && !(scales[i] < scales[i - 1])) throw ConfigError("MCERConfig: scales must be strictly decreasing");
        }
        if (!include_counts && !include_timesurface) throw ConfigError("MCERConfig: no quantizer enabled");
        if (!(count_normalizer > 0.0)) throw ConfigError("MCERConfig: count_normalizer must be positive");
    }
};

struct MCERTensor {
    Tensor data;  // (scales * channels_per_scale, H, W)
    double f = 0.0;
    TimeInterval exposure;
};

// Events with |f - t| <= dt/2, both boundaries inclusive. Order preserved.
inline EventStream window_events(const EventStream& events, double f, double dt) {
    if (!(dt > 0.0)) throw ArgumentError("window_events: dt must be positive");
    EventStream out = events;
    out.records.clear();
    const double half = 0.5 * dt;
    for (const Event& e : events.records)
        if (std::fabs(f - e.t) <= half) out.records.push_back(e);
    return out;
}

// Channel 0: count of +1 events per pixel; channel 1: count of -1 events.
inline Tensor count_map(const EventStream& window) {
    Tensor out({2, window.height, window.width});
    for (const Event& e : window.records) out.at(e.p > 0 ? 0 : 1, e.y, e.x) += 1.0;
    return out;
}

// Normalized timestamp of the most recent event per pixel and polarity:
// (t_last - window_start) / dt, zero where the window holds no event.
inline Tensor timesurface(const EventStream& window, double f, double dt) {
    if (!(dt > 0.0)) throw ArgumentError("timesurface: dt must be positive");
    Tensor out({2, window.height, window.width});
    const double start = f - 0.5 * dt;
    for (const Event& e : window.records) {
        double& slot = out.at(e.p > 0 ? 0 : 1, e.y, e.x);
        slot = std::max(slot, (e.t - start) / dt);  // records are time sorted; max guards ties
    }
    return out;
}

inline MCERTensor encode_mcer(const EventStream& events, const TimeInterval& exposure, const MCERConfig& cfg) {
    cfg.validate();
    exposure.validate();
    const double f = exposure.midpoint();
    const double T = exposure.duration();

    MCERTensor out;
    out.f = f;
    out.exposure = exposure;
    out.data = Tensor({cfg.total_channels(), events.height, events.width});

    const std::int64_t plane = static_cast<std::int64_t>(events.height) * events.width;
    std::int64_t ch = 0;
    for (double r : cfg.scales) {
        const EventStream win = window_events(events, f, r * T);
        if (cfg.include_counts) {
            const Tensor cm = count_map(win);
            std::copy(cm.data.begin(), cm.data.end(), out.data.data.begin() + ch * plane);
            ch += 2;
        }
        if (cfg.include_timesurface) {
            const Tensor ts = timesurface(win, f, r * T);
            std::copy(ts.data.begin(), ts.data.end(), out.data.data.begin() + ch * plane);
            ch += 2;
        }
    }
    return out;
}

// Network input view: count channels divided by the normalizer and clamped
// at 1; timesurface channels pass through.
inline Tensor normalize_for_network(const MCERTensor& mcer, const MCERConfig& cfg) {
    Tensor out = mcer.data;
    const std::int64_t plane = out.dim(1) * out.dim(2);
    const std::int64_t per_scale = cfg.channels_per_scale();
    for (std::int64_t c = 0; c < out.dim(0); ++c) {
        const bool is_count = cfg.include_counts && (c % per_scale) < 2;
        if (!is_count) continue;
        for (std::int64_t i = 0; i < plane; ++i) {
            double& v = out.data[static_cast<std::size_t>(c * plane + i)];
            v = std::min(v / cfg.count_normalizer, 1.0);
        }
    }
    return out;
}

// Canonical persistence: one JSON header line, then raw little-endian
// float32 channel data.
inline void write_mcer(const std::filesystem::path& path, const MCERTensor& mcer) {
    nlohmann::json header = {
        {"shape", mcer.data.shape},
        {"f", mcer.f},
        {"exposure", {mcer.exposure.start, mcer.exposure.end}},
    };
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("write_mcer: cannot open " + path.string());
    out << header.dump() << '\n';
    std::vector<float> buf(mcer.data.data.begin(), mcer.data.data.end());
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!out) throw IoError("write_mcer: write failed: " + path.string());
}

inline MCERTensor read_mcer(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_mcer: cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw FormatError("read_mcer: missing header", 0);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("read_mcer: bad header: ") + e.what(), 0);
    }
    MCERTensor mcer;
    Shape shape = header.at("shape").get<Shape>();
    mcer.f = header.at("f").get<double>();
    mcer.exposure = {header.at("exposure")[0].get<double>(), header.at("exposure")[1].get<double>()};
    mcer.data = Tensor(shape);
    std::vector<float> buf(static_cast<std::size_t>(mcer.data.numel()));
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(float)))
        throw FormatError("read_mcer: truncated payload",
                          static_cast<std::int64_t>(line.size()) + 1 + in.gcount());
    std::copy(buf.begin(), buf.end(), mcer.data.data.begin());
    return mcer;
}

// Debug sheet: channels tiled left to right, counts squashed by the
// normalizer for display.
inline void dump_mcer_sheet(const std::filesystem::path& path, const MCERTensor& mcer, const MCERConfig& cfg) {
    const Tensor norm = normalize_for_network(mcer, cfg);
    const std::int64_t c = norm.dim(0), h = norm.dim(1), w = norm.dim(2);
    Tensor sheet({1, h, w * c});
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) sheet.at(0, y, ch * w + x) = std::clamp(norm.at(ch, y, x), 0.0, 1.0);
    write_png(path, sheet);
}

}  // namespace ebsr
