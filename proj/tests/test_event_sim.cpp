#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ebsr/event_sim.hpp"
#include "ebsr/events.hpp"
#include "ebsr/image.hpp"
#include "oracles.hpp"

using namespace ebsr;
namespace fs = std::filesystem;

namespace {

// One-pixel sequence whose log intensity moves linearly through the given
// values (log(I + log_eps) hits each value exactly up to rounding).
VideoSequence log_ramp(const std::vector<double>& log_values, double log_eps) {
    VideoSequence seq;
    const std::int64_t n = static_cast<std::int64_t>(log_values.size());
    seq.exposure = {0.0, 1.0};
    for (std::int64_t i = 0; i < n; ++i) {
        Tensor f({1, 1, 1});
        f.at(0, 0, 0) = std::exp(log_values[static_cast<std::size_t>(i)]) - log_eps;
        seq.frames.emplace_back(f, Resolution::LR);
        seq.timestamps.push_back(static_cast<double>(i) / static_cast<double>(n - 1));
    }
    seq.timestamps.front() = 0.0;
    seq.timestamps.back() = 1.0;
    return seq;
}

fs::path temp_dir() {
    static int counter = 0;
    fs::path p = fs::temp_directory_path() / ("ebsr_evt_test_" + std::to_string(::getpid()) + "_" +
                                              std::to_string(counter++));
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("downsample block means") {
    SECTION("constant image is preserved") {
        Tensor img = Tensor::full({1, 4, 4}, 0.5);
        Tensor out = downsample(img, 2);
        REQUIRE(out.shape == Shape{1, 2, 2});
        for (double v : out.data) REQUIRE(v == 0.5);
    }
    SECTION("checkerboard averages to one half") {
        Tensor img({1, 2, 2});
        img.at(0, 0, 0) = 0.0;
        img.at(0, 0, 1) = 1.0;
        img.at(0, 1, 0) = 1.0;
        img.at(0, 1, 1) = 0.0;
        Tensor out = downsample(img, 2);
        REQUIRE(out.shape == Shape{1, 1, 1});
        REQUIRE(out.at(0, 0, 0) == 0.5);
    }
    SECTION("scale one is the identity") {
        Rng rng(1);
        Tensor img = oracle::random_tensor(rng, {3, 4, 6});
        Tensor out = downsample(img, 1);
        REQUIRE(max_abs_diff(out, img) == 0.0);
    }
    SECTION("non-divisible dimensions are rejected") {
        REQUIRE_THROWS_AS(downsample(Tensor({1, 5, 4}), 2), DimensionError);
        REQUIRE_THROWS_AS(downsample(Tensor({1, 4, 4}), 0), ArgumentError);
    }
    SECTION("block-constant images survive a down/up round trip") {
        Rng rng(2);
        Tensor img({2, 6, 8});
        for (std::int64_t c = 0; c < 2; ++c)
            for (std::int64_t y = 0; y < 3; ++y)
                for (std::int64_t x = 0; x < 4; ++x) {
                    const double v = rng.uniform(0.0, 1.0);
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) img.at(c, 2 * y + dy, 2 * x + dx) = v;
                }
        Tensor up = upsample_nearest(downsample(img, 2), 2);
        REQUIRE(max_abs_diff(up, img) == 0.0);
    }
}

TEST_CASE("synthesize_blur averages frames") {
    SECTION("identical frames collapse to the frame") {
        Tensor f = Tensor::full({1, 3, 3}, 0.25);
        std::vector<Tensor> frames(5, f);
        REQUIRE(max_abs_diff(synthesize_blur(frames), f) == 0.0);
    }
    SECTION("a linear pixel trace averages to its midpoint") {
        std::vector<Tensor> frames;
        for (double v : {0.0, 0.25, 0.5, 0.75, 1.0}) frames.push_back(Tensor::full({1, 1, 1}, v));
        REQUIRE(synthesize_blur(frames).at(0, 0, 0) == 0.5);
    }
    SECTION("single frame is the identity") {
        Rng rng(3);
        Tensor f = oracle::random_tensor(rng, {1, 2, 2});
        REQUIRE(max_abs_diff(synthesize_blur({f}), f) == 0.0);
    }
    SECTION("empty list and shape mismatches are rejected") {
        REQUIRE_THROWS_AS(synthesize_blur(std::vector<Tensor>{}), ArgumentError);
        REQUIRE_THROWS_AS(synthesize_blur({Tensor({1, 2, 2}), Tensor({1, 2, 3})}), DimensionError);
    }
}

TEST_CASE("luminance conversion uses BT.601 weights") {
    Tensor rgb({3, 1, 1});
    rgb.at(0, 0, 0) = 1.0;
    rgb.at(1, 0, 0) = 0.5;
    rgb.at(2, 0, 0) = 0.25;
    Tensor lum = to_luminance(rgb);
    REQUIRE(lum.shape == Shape{1, 1, 1});
    REQUIRE_THAT(lum.at(0, 0, 0),
                 Catch::Matchers::WithinAbs(0.299 * 1.0 + 0.587 * 0.5 + 0.114 * 0.25, 1e-15));
    Tensor gray = Tensor::full({1, 2, 2}, 0.7);
    REQUIRE(max_abs_diff(to_luminance(gray), gray) == 0.0);
}

TEST_CASE("simulate_events level crossings") {
    const double c = 0.2, eps = 1e-3;
    SECTION("constant sequence emits nothing") {
        VideoSequence seq = log_ramp({-1.0, -1.0, -1.0}, eps);
        REQUIRE(simulate_events(seq, c, eps).records.empty());
    }
    SECTION("a 1.05 log rise emits five positive events at the crossing times") {
        VideoSequence seq = log_ramp({-1.2, -0.15}, eps);
        EventStream ev = simulate_events(seq, c, eps);
        REQUIRE(ev.records.size() == 5);
        for (std::size_t k = 0; k < 5; ++k) {
            REQUIRE(ev.records[k].p == 1);
            REQUIRE_THAT(ev.records[k].t,
                         Catch::Matchers::WithinAbs(0.2 * static_cast<double>(k + 1) / 1.05, 1e-9));
        }
    }
    SECTION("a 0.5 log fall emits two negative events") {
        VideoSequence seq = log_ramp({-0.2, -0.7}, eps);
        EventStream ev = simulate_events(seq, c, eps);
        REQUIRE(ev.records.size() == 2);
        for (const Event& e : ev.records) REQUIRE(e.p == -1);
    }
    SECTION("unordered timestamps are rejected") {
        VideoSequence seq = log_ramp({-1.0, -0.5, -0.2}, eps);
        seq.timestamps[1] = 0.9;
        seq.timestamps[2] = 0.8;
        seq.exposure = {0.0, 0.8};
        REQUIRE_THROWS_AS(simulate_events(seq, c, eps), ArgumentError);
    }
    SECTION("larger thresholds never emit more events per pixel") {
        Rng rng(11);
        for (int rep = 0; rep < 5; ++rep) {
            VideoSequence seq = oracle::random_sequence(rng, 6, 6, 8);
            const std::size_t lo = simulate_events(seq, 0.15, eps).records.size();
            const std::size_t hi = simulate_events(seq, 0.3, eps).records.size();
            REQUIRE(hi <= lo);
        }
    }
    SECTION("reflecting the log signal about a midline flips polarities only") {
        Rng rng(12);
        VideoSequence seq = oracle::random_sequence(rng, 5, 5, 7);
        // Mirror image values in log space: g = 2m - l stays representable for
        // a midline below the value range.
        const double m = -2.0;
        VideoSequence mirrored = seq;
        for (ImageTensor& f : mirrored.frames)
            for (double& v : f.chw.data) {
                const double g = 2.0 * m - std::log(v + eps);
                v = std::clamp(std::exp(g) - eps, 0.0, 1.0);
            }
        EventStream a = simulate_events(seq, c, eps);
        EventStream b = simulate_events(mirrored, c, eps);
        REQUIRE(a.records.size() == b.records.size());
        for (std::size_t i = 0; i < a.records.size(); ++i) {
            REQUIRE(a.records[i].x == b.records[i].x);
            REQUIRE(a.records[i].y == b.records[i].y);
            REQUIRE(a.records[i].p == -b.records[i].p);
            REQUIRE_THAT(a.records[i].t, Catch::Matchers::WithinAbs(b.records[i].t, 1e-9));
        }
    }
}

TEST_CASE("simulate_events matches the brute-force enumerator") {
    Rng rng(21);
    const double eps = 1e-3;
    for (int rep = 0; rep < 10; ++rep) {
        VideoSequence seq = oracle::random_sequence(rng, 16, 16, 20);
        EventStream lib = simulate_events(seq, 0.2, eps);
        EventStream ref = oracle::enumerate_events(seq, 0.2, eps);
        REQUIRE(lib.records.size() == ref.records.size());
        for (std::size_t i = 0; i < lib.records.size(); ++i) {
            REQUIRE(lib.records[i].x == ref.records[i].x);
            REQUIRE(lib.records[i].y == ref.records[i].y);
            REQUIRE(lib.records[i].p == ref.records[i].p);
            REQUIRE_THAT(lib.records[i].t, Catch::Matchers::WithinAbs(ref.records[i].t, 1e-9));
        }
    }
}

TEST_CASE("reconstruct_log_intensity integrates polarities") {
    const double c = 0.2, eps = 1e-3;
    SECTION("no events returns the initial frame") {
        VideoSequence seq = log_ramp({-1.0, -1.0}, eps);
        EventStream ev = simulate_events(seq, c, eps);
        Tensor init = log_frame(seq.frames[0].chw, eps);
        Tensor rec = reconstruct_log_intensity(ev, init, 1.0, seq.exposure);
        REQUIRE(max_abs_diff(rec, init) == 0.0);
    }
    SECTION("five positive crossings land one threshold short of the end value") {
        VideoSequence seq = log_ramp({-1.2, -0.15}, eps);
        EventStream ev = simulate_events(seq, c, eps);
        Tensor init = log_frame(seq.frames[0].chw, eps);
        Tensor rec = reconstruct_log_intensity(ev, init, 1.0, seq.exposure);
        REQUIRE_THAT(rec.at(0, 0, 0), Catch::Matchers::WithinAbs(-1.2 + 5 * c, 1e-12));
    }
    SECTION("a +1 then -1 pair cancels") {
        // Threshold 0.25 is a power of two, so the +c then -c walk returns to
        // the initial value without rounding residue.
        VideoSequence seq = log_ramp({-1.0, -0.7, -1.02}, eps);
        EventStream ev = simulate_events(seq, 0.25, eps);
        REQUIRE(ev.records.size() == 2);
        REQUIRE(ev.records[0].p == 1);
        REQUIRE(ev.records[1].p == -1);
        Tensor init = log_frame(seq.frames[0].chw, eps);
        Tensor rec = reconstruct_log_intensity(ev, init, 1.0, seq.exposure);
        REQUIRE(max_abs_diff(rec, init) == 0.0);
    }
    SECTION("query times outside the interval are rejected") {
        VideoSequence seq = log_ramp({-1.0, -0.5}, eps);
        EventStream ev = simulate_events(seq, c, eps);
        Tensor init = log_frame(seq.frames[0].chw, eps);
        REQUIRE_THROWS_AS(reconstruct_log_intensity(ev, init, 1.5, seq.exposure), ArgumentError);
    }
    SECTION("reconstruction stays within one threshold at every frame time") {
        Rng rng(31);
        for (int rep = 0; rep < 5; ++rep) {
            VideoSequence seq = oracle::random_sequence(rng, 8, 8, 12);
            EventStream ev = simulate_events(seq, c, eps);
            Tensor init = log_frame(seq.frames[0].chw, eps);
            for (std::size_t j = 0; j < seq.frames.size(); ++j) {
                Tensor truth = log_frame(seq.frames[j].chw, eps);
                Tensor rec = reconstruct_log_intensity(ev, init, seq.timestamps[j], seq.exposure);
                REQUIRE(max_abs_diff(rec, truth) <= c);
            }
        }
    }
}

TEST_CASE("event files round trip losslessly") {
    const fs::path dir = temp_dir();
    SECTION("empty stream") {
        EventStream s;
        s.width = 7;
        s.height = 9;
        s.threshold = 0.25;
        const fs::path p = dir / "empty.evt1";
        write_events(p.string(), s);
        EventStream r = read_events(p.string());
        REQUIRE(r.records.empty());
        REQUIRE(r.width == 7);
        REQUIRE(r.height == 9);
        REQUIRE(r.threshold == 0.25);
    }
    SECTION("three events round trip bit-exactly") {
        EventStream s;
        s.width = 4;
        s.height = 4;
        s.threshold = 0.2;
        s.records = {Event{0.125, 1, 2, 1}, Event{0.5, 0, 0, -1}, Event{0.875, 3, 3, 1}};
        const fs::path p = dir / "three.evt1";
        write_events(p.string(), s);
        EventStream r = read_events(p.string());
        REQUIRE(r.records.size() == 3);
        for (std::size_t i = 0; i < 3; ++i) {
            REQUIRE(r.records[i].t == s.records[i].t);
            REQUIRE(r.records[i].x == s.records[i].x);
            REQUIRE(r.records[i].y == s.records[i].y);
            REQUIRE(r.records[i].p == s.records[i].p);
        }
    }
    SECTION("wrong magic fails with a byte offset") {
        const fs::path p = dir / "bad.evt1";
        std::ofstream(p) << "NOPExxxxxxxxxxxxxxxx";
        REQUIRE_THROWS_AS(read_events(p.string()), FormatError);
    }
    SECTION("truncated payload fails") {
        EventStream s;
        s.width = 2;
        s.height = 2;
        s.threshold = 0.2;
        s.records = {Event{0.5, 1, 1, 1}};
        const fs::path p = dir / "trunc.evt1";
        write_events(p.string(), s);
        const auto size = fs::file_size(p);
        fs::resize_file(p, size - 3);
        REQUIRE_THROWS_AS(read_events(p.string()), FormatError);
    }
    fs::remove_all(dir);
}

TEST_CASE("static scenes produce no events and no blur") {
    Rng rng(41);
    Tensor frame = oracle::random_tensor(rng, {1, 6, 6}, 0.1, 0.9);
    VideoSequence seq;
    seq.exposure = {0.0, 1.0};
    for (int i = 0; i < 5; ++i) {
        seq.frames.emplace_back(frame, Resolution::LR);
        seq.timestamps.push_back(i / 4.0);
    }
    REQUIRE(simulate_events(seq, 0.2, 1e-3).records.empty());
    std::vector<Tensor> raw(5, frame);
    REQUIRE(max_abs_diff(synthesize_blur(raw), frame) == 0.0);
}
