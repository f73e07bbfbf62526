#pragma once

// Dataset plumbing: sample sidecar metadata, the dataset manifest, loading
// simulated samples from disk, preparing network-ready training samples, the
// full blur/downsample/event simulation of one sequence, and a procedural
// sequence generator for self-contained runs and tests.
//
// On-disk layout produced by the simulator:
//   <out>/manifest.json
//   <out>/<sample-id>/blurry_lr.png     LR blurry input
//   <out>/<sample-id>/sharp_hr.png      HR sharp target (exposure midpoint)
//   <out>/<sample-id>/events.evt1       event stream over the exposure
//   <out>/<sample-id>/sample.json       sidecar metadata

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ebsr/event_sim.hpp"
#include "ebsr/events.hpp"
#include "ebsr/image.hpp"
#include "ebsr/image_io.hpp"
#include "ebsr/mcer.hpp"

namespace ebsr {

// Per-sample metadata required to interpret the event stream and geometry.
struct Sidecar {
    double exposure_start = 0.0;
    double exposure_end = 0.0;
    std::int64_t scale = 4;
    double c = 0.2;
    double log_eps = 1e-3;
    std::int64_t frame_count = 0;

    TimeInterval exposure() const { return TimeInterval{exposure_start, exposure_end}; }
};

inline nlohmann::json sidecar_to_json(const Sidecar& s) {
    return nlohmann::json{{"exposure_start", s.exposure_start},
                          {"exposure_end", s.exposure_end},
                          {"scale", s.scale},
                          {"c", s.c},
                          {"log_eps", s.log_eps},
                          {"frame_count", s.frame_count}};
}

inline Sidecar sidecar_from_json(const nlohmann::json& j) {
    Sidecar s;
    try {
        s.exposure_start = j.at("exposure_start").get<double>();
        s.exposure_end = j.at("exposure_end").get<double>();
        s.scale = j.at("scale").get<std::int64_t>();
        s.c = j.at("c").get<double>();
        s.log_eps = j.at("log_eps").get<double>();
        s.frame_count = j.at("frame_count").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad sidecar JSON: ") + e.what());
    }
    return s;
}

inline void write_sidecar(const std::string& path, const Sidecar& s) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write sidecar: " + path);
    os << sidecar_to_json(s).dump(2) << "\n";
    if (!os) throw IoError("failed writing sidecar: " + path);
}

inline Sidecar read_sidecar(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open sidecar: " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    return sidecar_from_json(j);
}

// ---------------------------------------------------------------------------
// Manifest

struct SampleRecord {
    std::string id;
    std::string blurry;   // paths relative to the manifest directory
    std::string sharp;
    std::string events;
    std::string sidecar;
};

struct Manifest {
    std::int64_t scale = 4;
    std::vector<SampleRecord> samples;
};

inline void write_manifest(const std::string& path, const Manifest& m) {
    nlohmann::json samples = nlohmann::json::array();
    for (const SampleRecord& r : m.samples)
        samples.push_back({{"id", r.id},
                           {"blurry", r.blurry},
                           {"sharp", r.sharp},
                           {"events", r.events},
                           {"sidecar", r.sidecar}});
    const nlohmann::json j = {{"scale", m.scale}, {"samples", samples}};
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write manifest: " + path);
    os << j.dump(2) << "\n";
    if (!os) throw IoError("failed writing manifest: " + path);
}

inline Manifest read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open manifest: " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    Manifest m;
    try {
        m.scale = j.at("scale").get<std::int64_t>();
        for (const auto& e : j.at("samples"))
            m.samples.push_back(SampleRecord{e.at("id").get<std::string>(),
                                             e.at("blurry").get<std::string>(),
                                             e.at("sharp").get<std::string>(),
                                             e.at("events").get<std::string>(),
                                             e.at("sidecar").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": bad manifest: " + e.what());
    }
    return m;
}

// ---------------------------------------------------------------------------
// Simulation of one sequence into one sample

struct SimulatedSample {
    Tensor sharp_hr;      // latent frame at the exposure midpoint, HR
    Tensor blurry_lr;     // temporal mean of the LR latent frames
    EventStream events;   // simulated at LR over the exposure
    Sidecar meta;
};

// hr_frames: >= 2 equal-shape (C,H,W) frames in [0,1], uniformly spanning
// `exposure`; H and W must be divisible by `scale`.
inline SimulatedSample simulate_sample(const std::vector<Tensor>& hr_frames,
                                       const TimeInterval& exposure, std::int64_t scale,
                                       double threshold = 0.2, double log_eps = 1e-3) {
    if (hr_frames.size() < 2) throw ArgumentError("simulate_sample: need at least 2 frames");
    exposure.validate();
    const std::int64_t m = static_cast<std::int64_t>(hr_frames.size());

    VideoSequence lr_seq;
    lr_seq.exposure = exposure;
    std::vector<Tensor> lr_frames;
    for (std::int64_t i = 0; i < m; ++i) {
        lr_frames.push_back(downsample(hr_frames[static_cast<std::size_t>(i)], scale));
        lr_seq.frames.push_back(ImageTensor{lr_frames.back(), Resolution::LR});
        lr_seq.timestamps.push_back(exposure.start + exposure.duration() *
                                                         static_cast<double>(i) /
                                                         static_cast<double>(m - 1));
    }
    lr_seq.timestamps.back() = exposure.end;  // exact endpoint despite rounding

    SimulatedSample out;
    out.sharp_hr = hr_frames[static_cast<std::size_t>((m - 1) / 2)];
    out.blurry_lr = synthesize_blur(lr_frames);
    out.events = simulate_events(lr_seq, threshold, log_eps);
    out.meta = Sidecar{exposure.start, exposure.end, scale, threshold, log_eps, m};
    return out;
}

// ---------------------------------------------------------------------------
// Loading and preparing samples

struct LoadedSample {
    std::string id;
    Tensor blurry;        // (C, h, w) LR
    Tensor sharp;         // (C, s*h, s*w) HR
    EventStream events;
    Sidecar meta;
};

inline LoadedSample load_sample(const std::string& root, const SampleRecord& rec) {
    namespace fs = std::filesystem;
    LoadedSample s;
    s.id = rec.id;
    s.blurry = read_png((fs::path(root) / rec.blurry).string());
    s.sharp = read_png((fs::path(root) / rec.sharp).string());
    s.events = read_events((fs::path(root) / rec.events).string());
    s.meta = read_sidecar((fs::path(root) / rec.sidecar).string());
    return s;
}

inline std::vector<LoadedSample> load_dataset(const std::string& manifest_path) {
    const Manifest m = read_manifest(manifest_path);
    const std::string root = std::filesystem::path(manifest_path).parent_path().string();
    std::vector<LoadedSample> out;
    for (const SampleRecord& rec : m.samples) out.push_back(load_sample(root, rec));
    return out;
}

// Network-ready triple: blurry LR input, normalized MCER stack, HR target.
struct TrainSample {
    std::string id;
    Tensor blurry;   // (in_channels, h, w)
    Tensor mcer;     // (mcer_channels, h, w), counts normalized
    Tensor target;   // (in_channels, s*h, s*w)
};

inline TrainSample prepare_sample(const LoadedSample& s, const MCERConfig& mcer_cfg) {
    const std::int64_t h = s.blurry.dim(1), w = s.blurry.dim(2);
    if (s.events.height != h || s.events.width != w)
        throw DimensionError("prepare_sample " + s.id + ": events are " +
                             std::to_string(s.events.width) + "x" + std::to_string(s.events.height) +
                             ", blurry image is " + std::to_string(w) + "x" + std::to_string(h));
    if (s.sharp.dim(1) != h * s.meta.scale || s.sharp.dim(2) != w * s.meta.scale ||
        s.sharp.dim(0) != s.blurry.dim(0))
        throw DimensionError("prepare_sample " + s.id + ": sharp " + shape_str(s.sharp.shape) +
                             " does not match blurry " + shape_str(s.blurry.shape) + " at scale " +
                             std::to_string(s.meta.scale));
    TrainSample t;
    t.id = s.id;
    t.blurry = s.blurry;
    t.mcer = normalize_for_network(encode_mcer(s.events, s.meta.exposure(), mcer_cfg), mcer_cfg);
    t.target = s.sharp;
    return t;
}

// ---------------------------------------------------------------------------
// Procedural scenes

// Generates `count` frames (channels, h, w) in [0,1] of drifting sinusoidal
// gratings plus moving Gaussian blobs. Motion across frames produces blur and
// events; all randomness comes from `rng`.
inline std::vector<Tensor> make_synthetic_frames(Rng& rng, std::int64_t channels, std::int64_t h,
                                                 std::int64_t w, std::int64_t count) {
    if (count < 2) throw ArgumentError("make_synthetic_frames: need at least 2 frames");
    if (channels != 1 && channels != 3)
        throw ArgumentError("make_synthetic_frames: channels must be 1 or 3");
    struct Grating {
        double fy, fx, phase, drift, amp;
    };
    struct Blob {
        double y0, x0, vy, vx, sigma, amp;
    };
    const double tau = 2.0 * 3.14159265358979323846;
    std::vector<Grating> gratings;
    for (int i = 0; i < 3; ++i) {
        const double angle = rng.uniform(0.0, tau);
        const double cycles = rng.uniform(1.5, 4.0);
        gratings.push_back(Grating{cycles * std::sin(angle) / static_cast<double>(h),
                                   cycles * std::cos(angle) / static_cast<double>(w),
                                   rng.uniform(0.0, tau), rng.uniform(-2.5, 2.5),
                                   rng.uniform(0.06, 0.13)});
    }
    const double dim = static_cast<double>(std::min(h, w));
    std::vector<Blob> blobs;
    for (int i = 0; i < 2; ++i) {
        blobs.push_back(Blob{rng.uniform(0.2, 0.8) * static_cast<double>(h),
                             rng.uniform(0.2, 0.8) * static_cast<double>(w),
                             rng.uniform(-0.25, 0.25) * dim, rng.uniform(-0.25, 0.25) * dim,
                             rng.uniform(0.10, 0.18) * dim,
                             (i == 0 ? 1.0 : -1.0) * rng.uniform(0.18, 0.30)});
    }
    std::vector<double> chan_gain(static_cast<std::size_t>(channels));
    for (double& gn : chan_gain) gn = rng.uniform(0.8, 1.2);

    std::vector<Tensor> frames;
    for (std::int64_t f = 0; f < count; ++f) {
        const double t = static_cast<double>(f) / static_cast<double>(count - 1);
        Tensor img({channels, h, w});
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) {
                double v = 0.5;
                for (const Grating& gr : gratings)
                    v += gr.amp * std::sin(tau * (gr.fy * static_cast<double>(y) +
                                                  gr.fx * static_cast<double>(x)) +
                                           gr.phase + gr.drift * t);
                for (const Blob& bl : blobs) {
                    const double dy = static_cast<double>(y) - (bl.y0 + bl.vy * t);
                    const double dx = static_cast<double>(x) - (bl.x0 + bl.vx * t);
                    v += bl.amp * std::exp(-(dy * dy + dx * dx) / (2.0 * bl.sigma * bl.sigma));
                }
                for (std::int64_t ch = 0; ch < channels; ++ch) {
                    const double cv = 0.5 + (v - 0.5) * chan_gain[static_cast<std::size_t>(ch)];
                    img.at(ch, y, x) = std::min(1.0, std::max(0.0, cv));
                }
            }
        frames.push_back(std::move(img));
    }
    return frames;
}

}  // namespace ebsr
