#pragma once

// Event stream container plus the EVT1 binary format.
//
// EVT1 layout (little-endian):
//   magic "EVT1" | uint16 width | uint16 height | float64 threshold
//   then repeated records of (float64 t, uint16 x, uint16 y, int8 p).
// Fixed-width 13-byte records, no record count: the payload length must be
// an exact multiple of the record size.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <tuple>
#include <vector>

#include "ebsr/common.hpp"

namespace ebsr {

struct Event {
    double t = 0.0;
    std::uint16_t x = 0;
    std::uint16_t y = 0;
    std::int8_t p = 1;  // +1 or -1

    bool operator==(const Event&) const = default;
};

// Canonical order: by time, ties broken by (y, x, p).
inline bool event_order(const Event& a, const Event& b) {
    return std::tie(a.t, a.y, a.x, a.p) < std::tie(b.t, b.y, b.x, b.p);
}

struct EventStream {
    std::vector<Event> records;
    std::uint16_t width = 0;
    std::uint16_t height = 0;
    double threshold = 0.2;  // contrast threshold c, log-intensity units
    double log_eps = 1e-3;   // not persisted in EVT1; carried by the sidecar

    void sort_canonical() { std::stable_sort(records.begin(), records.end(), event_order); }

    void validate() const {
        if (threshold <= 0.0) throw ArgumentError("EventStream: threshold must be positive");
        if (log_eps <= 0.0) throw ArgumentError("EventStream: log_eps must be positive");
        for (std::size_t i = 0; i < records.size(); ++i) {
            const Event& e = records[i];
            if (e.x >= width || e.y >= height)
                throw ArgumentError("EventStream: event " + std::to_string(i) + " outside the sensor");
            if (e.p != 1 && e.p != -1)
                throw ArgumentError("EventStream: event " + std::to_string(i) + " has polarity " + std::to_string(e.p));
            if (i > 0 && event_order(e, records[i - 1]))
                throw ArgumentError("EventStream: records not in canonical order at index " + std::to_string(i));
        }
    }

    // Persisted-field equality: records, geometry, threshold.
    bool operator==(const EventStream& o) const {
        return records == o.records && width == o.width && height == o.height && threshold == o.threshold;
    }
};

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline std::uint16_t get_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline double get_f64(const unsigned char* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace detail

inline constexpr char kEvtMagic[4] = {'E', 'V', 'T', '1'};
inline constexpr std::size_t kEvtHeaderSize = 4 + 2 + 2 + 8;
inline constexpr std::size_t kEvtRecordSize = 8 + 2 + 2 + 1;

inline std::string serialize_events(const EventStream& s) {
    std::string out;
    out.reserve(kEvtHeaderSize + kEvtRecordSize * s.records.size());
    out.append(kEvtMagic, 4);
    detail::put_u16(out, s.width);
    detail::put_u16(out, s.height);
    detail::put_f64(out, s.threshold);
    for (const Event& e : s.records) {
        detail::put_f64(out, e.t);
        detail::put_u16(out, e.x);
        detail::put_u16(out, e.y);
        out.push_back(static_cast<char>(e.p));
    }
    return out;
}

inline void write_events(const std::filesystem::path& path, const EventStream& s) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("write_events: cannot open " + path.string());
    const std::string bytes = serialize_events(s);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write_events: write failed: " + path.string());
}

inline EventStream parse_events(const std::string& bytes, double log_eps = 1e-3) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < kEvtHeaderSize) throw FormatError("EVT1: truncated header", static_cast<std::int64_t>(bytes.size()));
    if (std::memcmp(p, kEvtMagic, 4) != 0) throw FormatError("EVT1: bad magic", 0);
    EventStream s;
    s.width = detail::get_u16(p + 4);
    s.height = detail::get_u16(p + 6);
    s.threshold = detail::get_f64(p + 8);
    s.log_eps = log_eps;
    const std::size_t payload = bytes.size() - kEvtHeaderSize;
    if (payload % kEvtRecordSize != 0)
        throw FormatError("EVT1: truncated record", static_cast<std::int64_t>(kEvtHeaderSize + payload - payload % kEvtRecordSize));
    s.records.resize(payload / kEvtRecordSize);
    for (std::size_t i = 0; i < s.records.size(); ++i) {
        const unsigned char* r = p + kEvtHeaderSize + i * kEvtRecordSize;
        s.records[i].t = detail::get_f64(r);
        s.records[i].x = detail::get_u16(r + 8);
        s.records[i].y = detail::get_u16(r + 10);
        s.records[i].p = static_cast<std::int8_t>(r[12]);
    }
    return s;
}

inline EventStream read_events(const std::filesystem::path& path, double log_eps = 1e-3) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_events: cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_events(bytes, log_eps);
}

}  // namespace ebsr
