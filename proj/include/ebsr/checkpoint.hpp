#pragma once

// Checkpoint archive (".ebck"): a single file holding every parameter tensor
// keyed by its hierarchical name, the NetworkConfig and MCERConfig as JSON,
// and (optionally) full optimizer/trainer state for bit-exact resume.
//
// Layout (little-endian):
//   bytes 0..3   magic "EBC1"
//   bytes 4..11  uint64 JSON header length in bytes
//   header       UTF-8 JSON: {"config", "mcer", "tensors": [{name, shape}...],
//                             "train": null | {...}}
//   payload      float64 data for each tensor in header order, contiguous
//
// Adam moments are stored as ordinary tensors named "adam.m.<param>" and
// "adam.v.<param>"; loading validates every parameter shape against the
// config by rebuilding the expected parameter skeleton.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ebsr/autograd.hpp"
#include "ebsr/mcer.hpp"
#include "ebsr/network.hpp"

namespace ebsr {

inline constexpr char kCkptMagic[4] = {'E', 'B', 'C', '1'};

inline nlohmann::json network_config_to_json(const NetworkConfig& c) {
    return nlohmann::json{{"scale", c.scale},
                          {"in_channels", c.in_channels},
                          {"embed_dim", c.embed_dim},
                          {"num_rdstb", c.num_rdstb},
                          {"stl_per_rdstb", c.stl_per_rdstb},
                          {"window_size", c.window_size},
                          {"num_heads", c.num_heads},
                          {"scma_heads", c.scma_heads},
                          {"mlp_ratio", c.mlp_ratio},
                          {"mcer_channels", c.mcer_channels},
                          {"use_scma", c.use_scma},
                          {"use_irg", c.use_irg}};
}

inline NetworkConfig network_config_from_json(const nlohmann::json& j) {
    NetworkConfig c;
    c.scale = j.at("scale").get<std::int64_t>();
    c.in_channels = j.at("in_channels").get<std::int64_t>();
    c.embed_dim = j.at("embed_dim").get<std::int64_t>();
    c.num_rdstb = j.at("num_rdstb").get<std::int64_t>();
    c.stl_per_rdstb = j.at("stl_per_rdstb").get<std::int64_t>();
    c.window_size = j.at("window_size").get<std::int64_t>();
    c.num_heads = j.at("num_heads").get<std::int64_t>();
    c.scma_heads = j.at("scma_heads").get<std::int64_t>();
    c.mlp_ratio = j.at("mlp_ratio").get<double>();
    c.mcer_channels = j.at("mcer_channels").get<std::int64_t>();
    c.use_scma = j.at("use_scma").get<bool>();
    c.use_irg = j.at("use_irg").get<bool>();
    return c;
}

inline nlohmann::json mcer_config_to_json(const MCERConfig& c) {
    return nlohmann::json{{"scales", c.scales},
                          {"include_counts", c.include_counts},
                          {"include_timesurface", c.include_timesurface},
                          {"count_normalizer", c.count_normalizer}};
}

inline MCERConfig mcer_config_from_json(const nlohmann::json& j) {
    MCERConfig c;
    c.scales = j.at("scales").get<std::vector<double>>();
    c.include_counts = j.at("include_counts").get<bool>();
    c.include_timesurface = j.at("include_timesurface").get<bool>();
    c.count_normalizer = j.at("count_normalizer").get<double>();
    return c;
}

// Optimizer + loop state carried across a resume.
struct TrainState {
    std::int64_t step = 0;
    std::int64_t epoch = 0;
    double best_val_psnr = -1.0;
    std::string rng_state;           // serialized Rng
    std::vector<Tensor> adam_m;      // parallel to ParamStore order
    std::vector<Tensor> adam_v;
};

struct Checkpoint {
    NetworkConfig config;
    MCERConfig mcer;
    ParamStore params;
    std::optional<TrainState> train;
};

namespace ckpt_detail {

inline void write_f64_le(std::ostream& os, const std::vector<double>& v) {
    for (double d : v) {
        std::uint64_t bits;
        std::memcpy(&bits, &d, 8);
        char buf[8];
        for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
        os.write(buf, 8);
    }
}

inline void read_f64_le(std::istream& is, std::vector<double>& v, const std::string& path) {
    std::vector<char> buf(v.size() * 8);
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (is.gcount() != static_cast<std::streamsize>(buf.size()))
        throw FormatError(path + ": truncated checkpoint payload");
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::uint64_t bits = 0;
        for (int k = 0; k < 8; ++k)
            bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i * 8 + static_cast<std::size_t>(k)])) << (8 * k);
        std::memcpy(&v[i], &bits, 8);
    }
}

}  // namespace ckpt_detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    nlohmann::json tensors = nlohmann::json::array();
    std::vector<const Tensor*> payload;
    for (int i = 0; i < ck.params.size(); ++i) {
        tensors.push_back({{"name", ck.params.names[static_cast<std::size_t>(i)]},
                           {"shape", ck.params.values[static_cast<std::size_t>(i)].shape}});
        payload.push_back(&ck.params.values[static_cast<std::size_t>(i)]);
    }
    nlohmann::json train = nullptr;
    if (ck.train) {
        const TrainState& ts = *ck.train;
        if (static_cast<int>(ts.adam_m.size()) != ck.params.size() ||
            static_cast<int>(ts.adam_v.size()) != ck.params.size())
            throw ArgumentError("save_checkpoint: optimizer state size mismatch");
        for (int i = 0; i < ck.params.size(); ++i) {
            tensors.push_back({{"name", "adam.m." + ck.params.names[static_cast<std::size_t>(i)]},
                               {"shape", ts.adam_m[static_cast<std::size_t>(i)].shape}});
            payload.push_back(&ts.adam_m[static_cast<std::size_t>(i)]);
        }
        for (int i = 0; i < ck.params.size(); ++i) {
            tensors.push_back({{"name", "adam.v." + ck.params.names[static_cast<std::size_t>(i)]},
                               {"shape", ts.adam_v[static_cast<std::size_t>(i)].shape}});
            payload.push_back(&ts.adam_v[static_cast<std::size_t>(i)]);
        }
        train = nlohmann::json{{"step", ts.step},
                               {"epoch", ts.epoch},
                               {"best_val_psnr", ts.best_val_psnr},
                               {"rng", ts.rng_state}};
    }
    const nlohmann::json header = {{"config", network_config_to_json(ck.config)},
                                   {"mcer", mcer_config_to_json(ck.mcer)},
                                   {"tensors", tensors},
                                   {"train", train}};
    const std::string hs = header.dump();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    os.write(kCkptMagic, 4);
    const std::uint64_t hl = hs.size();
    char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((hl >> (8 * i)) & 0xff);
    os.write(lenbuf, 8);
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const Tensor* t : payload) ckpt_detail::write_f64_le(os, t->data);
    if (!os) throw IoError("failed writing checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, kCkptMagic, 4) != 0)
        throw FormatError(path + ": bad checkpoint magic (byte offset 0)");
    char lenbuf[8];
    is.read(lenbuf, 8);
    if (is.gcount() != 8) throw FormatError(path + ": truncated checkpoint header (byte offset 4)");
    std::uint64_t hl = 0;
    for (int i = 0; i < 8; ++i)
        hl |= static_cast<std::uint64_t>(static_cast<unsigned char>(lenbuf[i])) << (8 * i);
    std::string hs(hl, '\0');
    is.read(hs.data(), static_cast<std::streamsize>(hl));
    if (is.gcount() != static_cast<std::streamsize>(hl))
        throw FormatError(path + ": truncated checkpoint header (byte offset 12)");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": bad checkpoint header JSON: " + e.what());
    }

    Checkpoint ck;
    try {
        ck.config = network_config_from_json(header.at("config"));
        ck.mcer = mcer_config_from_json(header.at("mcer"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": bad checkpoint config: " + e.what());
    }
    ck.config.validate();
    ck.mcer.validate();

    // Expected parameter skeleton for shape validation.
    Rng rng(0);
    const ParamStore expected = init_params(ck.config, rng);

    std::vector<Tensor> adam_m(static_cast<std::size_t>(expected.size()));
    std::vector<Tensor> adam_v(static_cast<std::size_t>(expected.size()));
    bool saw_adam = false;

    for (const auto& entry : header.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const Shape shape = entry.at("shape").get<Shape>();
        Tensor t(shape);
        ckpt_detail::read_f64_le(is, t.data, path);
        std::string base = name;
        Tensor* dest = nullptr;
        if (name.rfind("adam.m.", 0) == 0) {
            base = name.substr(7);
            dest = &adam_m[static_cast<std::size_t>(expected.find(base))];
            saw_adam = true;
        } else if (name.rfind("adam.v.", 0) == 0) {
            base = name.substr(7);
            dest = &adam_v[static_cast<std::size_t>(expected.find(base))];
            saw_adam = true;
        }
        const int idx = expected.find(base);  // throws ArgumentError on unknown names
        const Tensor& want = expected.values[static_cast<std::size_t>(idx)];
        if (shape != want.shape)
            throw DimensionError(path + ": tensor " + name + " has shape " + shape_str(shape) +
                                 ", config requires " + shape_str(want.shape));
        if (dest)
            *dest = std::move(t);
        else {
            if (static_cast<int>(ck.params.values.size()) != idx)
                throw FormatError(path + ": parameter tensors out of order at " + name);
            ck.params.add(name, std::move(t));
        }
    }
    if (ck.params.size() != expected.size())
        throw FormatError(path + ": checkpoint is missing parameter tensors");

    const nlohmann::json& train = header.at("train");
    if (!train.is_null()) {
        TrainState ts;
        ts.step = train.at("step").get<std::int64_t>();
        ts.epoch = train.at("epoch").get<std::int64_t>();
        ts.best_val_psnr = train.at("best_val_psnr").get<double>();
        ts.rng_state = train.at("rng").get<std::string>();
        if (!saw_adam) throw FormatError(path + ": train state present but optimizer tensors missing");
        ts.adam_m = std::move(adam_m);
        ts.adam_v = std::move(adam_v);
        ck.train = std::move(ts);
    }
    return ck;
}

}  // namespace ebsr
