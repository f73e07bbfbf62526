#pragma once

// EBSR-Net computation graph: convolutional image/event encoders, Symmetric
// Cross-Modal Attention (SCMA) fusion, an Intermodal Residual Group (IRG) of
// Residual Dense Swin Transformer Blocks (RDSTB), and a sub-pixel decoder
// with a bilinear skip connection.
//
// All forward functions build onto a Graph, so the same code path serves
// inference (grad disabled) and training (backward through every block).
//
// Parameter naming (stable checkpoint contract):
//   enc_img.conv{1,2}.{w,b}            image encoder 3x3 convs
//   enc_evt.conv{1,2}.{w,b}            event encoder 3x3 convs
//   scma.{img,evt}.{q,k,v}.ln.{g,b}    per-projection LayerNorm
//   scma.{img,evt}.{q,k,v}.{w,b}       per-projection 1x1 conv
//   scma.{be,eb}.mlp.ln.{g,b}          branch MLP LayerNorm
//   scma.{be,eb}.mlp.fc{1,2}.{w,b}     branch MLP linears
//   scma.fuse.{w,b}                    fusion 1x1 conv (2C -> C)
//   fuse_conv.{w,b}                    [--no-scma] 3x3 conv (2C -> C)
//   irg.rdstb{i}.stl{d}.compress.{w,b} dense compression 1x1 conv (d*C -> C)
//   irg.rdstb{i}.stl{d}.ln1.{g,b}      pre-attention LayerNorm
//   irg.rdstb{i}.stl{d}.qkv.{w,b}      fused QKV linear (C -> 3C)
//   irg.rdstb{i}.stl{d}.relpos         relative position bias table
//   irg.rdstb{i}.stl{d}.proj.{w,b}     attention output projection
//   irg.rdstb{i}.stl{d}.ln2.{g,b}      pre-MLP LayerNorm
//   irg.rdstb{i}.stl{d}.fc{1,2}.{w,b}  MLP linears
//   irg.rdstb{i}.conv.{w,b}            RDSTB final 3x3 conv
//   irg.stack{i}.{w,b}                 [--no-irg] replacement 3x3 convs
//   irg.conv{1,2}.{w,b}                IRG-level 3x3 convs
//   dec.up{k}.{w,b}                    per-stage 3x3 conv (C -> 4C)
//   dec.final.{w,b}                    final 3x3 conv (C -> in_channels)

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ebsr/autograd.hpp"
#include "ebsr/image.hpp"
#include "ebsr/tensor.hpp"

namespace ebsr {

struct NetworkConfig {
    std::int64_t scale = 4;          // super-resolution factor, {2, 4}
    std::int64_t in_channels = 3;    // blurry image channels, {1, 3}
    std::int64_t embed_dim = 128;    // C
    std::int64_t num_rdstb = 4;
    std::int64_t stl_per_rdstb = 4;
    std::int64_t window_size = 8;    // w
    std::int64_t num_heads = 4;      // STL attention heads
    std::int64_t scma_heads = 1;     // SCMA attention heads
    double mlp_ratio = 4.0;
    std::int64_t mcer_channels = 12; // from MCERConfig::total_channels()
    bool use_scma = true;            // false: 3x3-conv fusion of the concatenation
    bool use_irg = true;             // false: plain 3x3 conv + ReLU stack

    std::int64_t mlp_hidden() const {
        return std::max<std::int64_t>(1, std::llround(static_cast<double>(embed_dim) * mlp_ratio));
    }

    std::int64_t upsample_stages() const {
        return scale == 2 ? 1 : 2;
    }

    void validate() const {
        if (scale != 2 && scale != 4) throw ConfigError("scale must be 2 or 4");
        if (in_channels != 1 && in_channels != 3) throw ConfigError("in_channels must be 1 or 3");
        if (embed_dim <= 0) throw ConfigError("embed_dim must be positive");
        if (num_rdstb < 1) throw ConfigError("num_rdstb must be >= 1");
        if (stl_per_rdstb < 1) throw ConfigError("stl_per_rdstb must be >= 1");
        if (window_size <= 0) throw ConfigError("window_size must be positive");
        if (num_heads <= 0 || scma_heads <= 0) throw ConfigError("head counts must be positive");
        if (embed_dim % num_heads != 0)
            throw ConfigError("embed_dim must be divisible by num_heads");
        if (embed_dim % scma_heads != 0)
            throw ConfigError("embed_dim must be divisible by scma_heads");
        if (mlp_ratio <= 0.0) throw ConfigError("mlp_ratio must be positive");
        if (mcer_channels < 1) throw ConfigError("mcer_channels must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// Parameter construction

namespace init_detail {

inline void fill_trunc_normal(Tensor& t, Rng& rng, double std_dev) {
    for (double& v : t.data) v = rng.trunc_normal(std_dev);
}

inline void add_conv(ParamStore& s, const std::string& name, std::int64_t cout, std::int64_t cin,
                     std::int64_t k, Rng& rng, bool zero) {
    Tensor w({cout, cin, k, k});
    if (!zero) fill_trunc_normal(w, rng, 0.02);
    s.add(name + ".w", std::move(w));
    s.add(name + ".b", Tensor({cout}));
}

inline void add_linear(ParamStore& s, const std::string& name, std::int64_t cout,
                       std::int64_t cin, Rng& rng, bool zero) {
    Tensor w({cout, cin});
    if (!zero) fill_trunc_normal(w, rng, 0.02);
    s.add(name + ".w", std::move(w));
    s.add(name + ".b", Tensor({cout}));
}

inline void add_layer_norm(ParamStore& s, const std::string& name, std::int64_t c) {
    s.add(name + ".g", Tensor::full({c}, 1.0));
    s.add(name + ".b", Tensor({c}));
}

}  // namespace init_detail

// Builds all parameters for `cfg` in a fixed registration order.
//
// Default initialization: truncated normal (std 0.02) for weights, zeros for
// biases, identity LayerNorm affines. Residual-closing layers start at zero so
// that the whole network is exactly identity-plus-bilinear at initialization:
// every STL output projection and MLP second linear, every RDSTB final conv,
// the second IRG-level conv, and the decoder final conv. The first IRG conv is
// deliberately NOT zeroed: with both IRG convs zero, each conv's gradient is
// gated by the other's zeros and the pair could never leave zero.
inline ParamStore init_params(const NetworkConfig& cfg, Rng& rng) {
    using namespace init_detail;
    cfg.validate();
    ParamStore s;
    const std::int64_t c = cfg.embed_dim, hid = cfg.mlp_hidden();
    add_conv(s, "enc_img.conv1", c, cfg.in_channels, 3, rng, false);
    add_conv(s, "enc_img.conv2", c, c, 3, rng, false);
    add_conv(s, "enc_evt.conv1", c, cfg.mcer_channels, 3, rng, false);
    add_conv(s, "enc_evt.conv2", c, c, 3, rng, false);
    if (cfg.use_scma) {
        for (const char* mod : {"img", "evt"})
            for (const char* p : {"q", "k", "v"}) {
                const std::string base = std::string("scma.") + mod + "." + p;
                add_layer_norm(s, base + ".ln", c);
                add_linear(s, base, c, c, rng, false);
            }
        for (const char* br : {"be", "eb"}) {
            const std::string base = std::string("scma.") + br + ".mlp";
            add_layer_norm(s, base + ".ln", c);
            add_linear(s, base + ".fc1", hid, c, rng, false);
            add_linear(s, base + ".fc2", c, hid, rng, false);
        }
        add_linear(s, "scma.fuse", c, 2 * c, rng, false);
    } else {
        add_conv(s, "fuse_conv", c, 2 * c, 3, rng, false);
    }
    if (cfg.use_irg) {
        const std::int64_t relpos_len = (2 * cfg.window_size - 1) * (2 * cfg.window_size - 1);
        for (std::int64_t i = 0; i < cfg.num_rdstb; ++i) {
            const std::string rb = "irg.rdstb" + std::to_string(i);
            for (std::int64_t d = 1; d <= cfg.stl_per_rdstb; ++d) {
                const std::string st = rb + ".stl" + std::to_string(d);
                add_linear(s, st + ".compress", c, d * c, rng, false);
                add_layer_norm(s, st + ".ln1", c);
                add_linear(s, st + ".qkv", 3 * c, c, rng, false);
                Tensor table({cfg.num_heads, relpos_len});
                fill_trunc_normal(table, rng, 0.02);
                s.add(st + ".relpos", std::move(table));
                add_linear(s, st + ".proj", c, c, rng, true);
                add_layer_norm(s, st + ".ln2", c);
                add_linear(s, st + ".fc1", hid, c, rng, false);
                add_linear(s, st + ".fc2", c, hid, rng, true);
            }
            add_conv(s, rb + ".conv", c, c, 3, rng, true);
        }
    } else {
        for (std::int64_t i = 0; i < cfg.num_rdstb; ++i)
            add_conv(s, "irg.stack" + std::to_string(i), c, c, 3, rng, false);
    }
    add_conv(s, "irg.conv1", c, c, 3, rng, false);
    add_conv(s, "irg.conv2", c, c, 3, rng, true);
    for (std::int64_t k = 0; k < cfg.upsample_stages(); ++k)
        add_conv(s, "dec.up" + std::to_string(k), 4 * c, c, 3, rng, false);
    add_conv(s, "dec.final", cfg.in_channels, c, 3, rng, true);
    return s;
}

inline std::int64_t param_count(const NetworkConfig& cfg) {
    Rng rng(0);
    return init_params(cfg, rng).scalar_count();
}

// ---------------------------------------------------------------------------
// Parameter index resolution

struct WbRef {
    int w = -1, b = -1;
};
struct LnRef {
    int g = -1, b = -1;
};
struct ProjRef {
    LnRef ln;
    WbRef lin;
};
struct MlpRef {
    LnRef ln;
    WbRef fc1, fc2;
};
struct StlRef {
    WbRef compress;
    LnRef ln1;
    WbRef qkv;
    int relpos = -1;
    WbRef proj;
    LnRef ln2;
    WbRef fc1, fc2;
};
struct RdstbRef {
    std::vector<StlRef> stls;
    WbRef conv;
};
struct ScmaRef {
    ProjRef img_q, img_k, img_v, evt_q, evt_k, evt_v;
    MlpRef mlp_be, mlp_eb;
    WbRef fuse;
};

struct NetRefs {
    WbRef enc_img1, enc_img2, enc_evt1, enc_evt2;
    ScmaRef scma;
    WbRef fuse_conv;
    std::vector<RdstbRef> rdstbs;
    std::vector<WbRef> conv_stack;
    WbRef irg_conv1, irg_conv2;
    std::vector<WbRef> dec_up;
    WbRef dec_final;
};

namespace init_detail {
inline WbRef wb(const ParamStore& s, const std::string& base) {
    return WbRef{s.find(base + ".w"), s.find(base + ".b")};
}
inline LnRef ln(const ParamStore& s, const std::string& base) {
    return LnRef{s.find(base + ".g"), s.find(base + ".b")};
}
inline ProjRef proj(const ParamStore& s, const std::string& base) {
    return ProjRef{ln(s, base + ".ln"), wb(s, base)};
}
inline MlpRef mlp(const ParamStore& s, const std::string& base) {
    return MlpRef{ln(s, base + ".ln"), wb(s, base + ".fc1"), wb(s, base + ".fc2")};
}
}  // namespace init_detail

inline NetRefs resolve_refs(const ParamStore& s, const NetworkConfig& cfg) {
    using namespace init_detail;
    NetRefs r;
    r.enc_img1 = wb(s, "enc_img.conv1");
    r.enc_img2 = wb(s, "enc_img.conv2");
    r.enc_evt1 = wb(s, "enc_evt.conv1");
    r.enc_evt2 = wb(s, "enc_evt.conv2");
    if (cfg.use_scma) {
        r.scma.img_q = proj(s, "scma.img.q");
        r.scma.img_k = proj(s, "scma.img.k");
        r.scma.img_v = proj(s, "scma.img.v");
        r.scma.evt_q = proj(s, "scma.evt.q");
        r.scma.evt_k = proj(s, "scma.evt.k");
        r.scma.evt_v = proj(s, "scma.evt.v");
        r.scma.mlp_be = mlp(s, "scma.be.mlp");
        r.scma.mlp_eb = mlp(s, "scma.eb.mlp");
        r.scma.fuse = wb(s, "scma.fuse");
    } else {
        r.fuse_conv = wb(s, "fuse_conv");
    }
    if (cfg.use_irg) {
        for (std::int64_t i = 0; i < cfg.num_rdstb; ++i) {
            const std::string rb = "irg.rdstb" + std::to_string(i);
            RdstbRef rr;
            for (std::int64_t d = 1; d <= cfg.stl_per_rdstb; ++d) {
                const std::string st = rb + ".stl" + std::to_string(d);
                StlRef sr;
                sr.compress = wb(s, st + ".compress");
                sr.ln1 = ln(s, st + ".ln1");
                sr.qkv = wb(s, st + ".qkv");
                sr.relpos = s.find(st + ".relpos");
                sr.proj = wb(s, st + ".proj");
                sr.ln2 = ln(s, st + ".ln2");
                sr.fc1 = wb(s, st + ".fc1");
                sr.fc2 = wb(s, st + ".fc2");
                rr.stls.push_back(sr);
            }
            rr.conv = wb(s, rb + ".conv");
            r.rdstbs.push_back(std::move(rr));
        }
    } else {
        for (std::int64_t i = 0; i < cfg.num_rdstb; ++i)
            r.conv_stack.push_back(wb(s, "irg.stack" + std::to_string(i)));
    }
    r.irg_conv1 = wb(s, "irg.conv1");
    r.irg_conv2 = wb(s, "irg.conv2");
    for (std::int64_t k = 0; k < cfg.upsample_stages(); ++k)
        r.dec_up.push_back(wb(s, "dec.up" + std::to_string(k)));
    r.dec_final = wb(s, "dec.final");
    return r;
}

// ---------------------------------------------------------------------------
// Attention plumbing

// Collects forward-pass internals for tests and diagnostics.
struct ForwardProbe {
    std::vector<Tensor>* softmax_mats = nullptr;   // every softmax value, (B, N, N)
    std::vector<Tensor>* rdstb_feats = nullptr;    // every F_n(d) inside RDSTBs
    std::vector<Tensor>* scma_branches = nullptr;  // the two branch token maps
};

// Relative-position index for a w*w window: entry (i, j) indexes the
// (2w-1)^2-row bias table by the spatial offset between tokens i and j.
inline std::vector<std::int64_t> relpos_index(std::int64_t win) {
    const std::int64_t n = win * win, span = 2 * win - 1;
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n * n));
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t yi = i / win, xi = i % win;
        for (std::int64_t j = 0; j < n; ++j) {
            const std::int64_t yj = j / win, xj = j % win;
            idx[static_cast<std::size_t>(i * n + j)] = (yi - yj + win - 1) * span + (xi - xj + win - 1);
        }
    }
    return idx;
}

// Shifted-window attention mask on the rolled canvas: tokens that originate
// from different pre-roll regions must not attend to each other. Additive
// mask, 0 within a region and -1e9 across regions (exp underflows to 0).
inline Tensor make_shift_mask(std::int64_t hp, std::int64_t wp, std::int64_t win,
                              std::int64_t shift) {
    std::vector<int> label(static_cast<std::size_t>(hp * wp));
    auto bounds = [&](std::int64_t n) {
        return std::vector<std::int64_t>{0, n - win, n - shift, n};
    };
    const auto yb = bounds(hp), xb = bounds(wp);
    int cnt = 0;
    for (int si = 0; si < 3; ++si) {
        for (int sj = 0; sj < 3; ++sj) {
            for (std::int64_t y = std::max<std::int64_t>(0, yb[static_cast<std::size_t>(si)]); y < yb[static_cast<std::size_t>(si) + 1]; ++y)
                for (std::int64_t x = std::max<std::int64_t>(0, xb[static_cast<std::size_t>(sj)]); x < xb[static_cast<std::size_t>(sj) + 1]; ++x)
                    label[static_cast<std::size_t>(y * wp + x)] = cnt;
            ++cnt;
        }
    }
    const std::int64_t wy = hp / win, wx = wp / win, n = win * win;
    Tensor mask({wy * wx, n, n});
    for (std::int64_t gy = 0; gy < wy; ++gy)
        for (std::int64_t gx = 0; gx < wx; ++gx) {
            const std::int64_t wi = gy * wx + gx;
            for (std::int64_t i = 0; i < n; ++i) {
                const int li = label[static_cast<std::size_t>((gy * win + i / win) * wp + gx * win + i % win)];
                for (std::int64_t j = 0; j < n; ++j) {
                    const int lj = label[static_cast<std::size_t>((gy * win + j / win) * wp + gx * win + j % win)];
                    mask.data[static_cast<std::size_t>((wi * n + i) * n + j)] = (li == lj) ? 0.0 : -1e9;
                }
            }
        }
    return mask;
}

// Scaled dot-product attention over windowed tokens (B, N, C), multi-head.
inline VarId window_attention(Graph& g, VarId q, VarId k, VarId v, std::int64_t heads,
                              const Tensor* mask, VarId relpos_table,
                              const std::vector<std::int64_t>* rp_index, ForwardProbe* probe) {
    const std::int64_t c = g.val(q).shape[2];
    const std::int64_t dh = c / heads;
    VarId qh = split_heads(g, q, heads);
    VarId kh = split_heads(g, k, heads);
    VarId vh = split_heads(g, v, heads);
    VarId scores = scale(g, bmm(g, qh, kh, true), 1.0 / std::sqrt(static_cast<double>(dh)));
    if (relpos_table != kNoVar) scores = add_relpos_bias(g, scores, relpos_table, *rp_index, heads);
    if (mask != nullptr) scores = add_window_mask(g, scores, *mask, heads);
    VarId att = softmax_lastdim(g, scores);
    if (probe && probe->softmax_mats) probe->softmax_mats->push_back(g.val(att));
    return merge_heads(g, bmm(g, att, vh, false), heads);
}

namespace fwd_detail {

struct Padded {
    VarId var;
    std::int64_t h, w, hp, wp;
    bool padded;
};

// Reflect-pads (C,H,W) up to window multiples.
inline Padded pad_to_window(Graph& g, VarId x, std::int64_t win) {
    const Tensor& t = g.val(x);
    const std::int64_t h = t.shape[1], w = t.shape[2];
    const std::int64_t hp = (h + win - 1) / win * win, wp = (w + win - 1) / win * win;
    if (hp == h && wp == w) return {x, h, w, hp, wp, false};
    return {pad_reflect_chw(g, x, 0, hp - h, 0, wp - w), h, w, hp, wp, true};
}

inline void require_finite(const Tensor& t, const char* what) {
    if (!t.all_finite()) throw NumericError(std::string(what) + ": non-finite input");
}

}  // namespace fwd_detail

// ---------------------------------------------------------------------------
// Blocks

inline VarId encode_image(Graph& g, const NetworkConfig& cfg, const NetRefs& r, VarId b) {
    const Tensor& t = g.val(b);
    if (t.rank() != 3 || t.shape[0] != cfg.in_channels)
        throw DimensionError("encode_image: expected (" + std::to_string(cfg.in_channels) +
                             ", H, W), got " + shape_str(t.shape));
    fwd_detail::require_finite(t, "encode_image");
    VarId h = conv2d(g, b, g.param(r.enc_img1.w), g.param(r.enc_img1.b), 1);
    return conv2d(g, relu(g, h), g.param(r.enc_img2.w), g.param(r.enc_img2.b), 1);
}

inline VarId encode_events(Graph& g, const NetworkConfig& cfg, const NetRefs& r, VarId e) {
    const Tensor& t = g.val(e);
    if (t.rank() != 3 || t.shape[0] != cfg.mcer_channels)
        throw DimensionError("encode_events: expected (" + std::to_string(cfg.mcer_channels) +
                             ", H, W), got " + shape_str(t.shape));
    fwd_detail::require_finite(t, "encode_events");
    VarId h = conv2d(g, e, g.param(r.enc_evt1.w), g.param(r.enc_evt1.b), 1);
    return conv2d(g, relu(g, h), g.param(r.enc_evt2.w), g.param(r.enc_evt2.b), 1);
}

// Symmetric cross-modal attention fusion of F_b and F_e into F_s.
inline VarId scma_forward(Graph& g, const NetworkConfig& cfg, const ScmaRef& p, VarId fb, VarId fe,
                          ForwardProbe* probe = nullptr) {
    const Tensor& tb_val = g.val(fb);
    const Tensor& te_val = g.val(fe);
    if (tb_val.shape != te_val.shape)
        throw DimensionError("scma_forward: branch shapes differ: " + shape_str(tb_val.shape) +
                             " vs " + shape_str(te_val.shape));
    fwd_detail::require_finite(tb_val, "scma_forward");
    fwd_detail::require_finite(te_val, "scma_forward");

    const std::int64_t win = cfg.window_size;
    auto pb = fwd_detail::pad_to_window(g, fb, win);
    auto pe = fwd_detail::pad_to_window(g, fe, win);
    VarId tb = chw_to_tokens(g, pb.var);
    VarId te = chw_to_tokens(g, pe.var);

    auto project = [&](VarId t, const ProjRef& pr) {
        VarId n = layer_norm(g, t, g.param(pr.ln.g), g.param(pr.ln.b));
        return linear(g, n, g.param(pr.lin.w), g.param(pr.lin.b));
    };
    auto windows = [&](VarId t) { return tokens_to_windows(g, t, pb.hp, pb.wp, win); };

    VarId qb = windows(project(tb, p.img_q));
    VarId kb = windows(project(tb, p.img_k));
    VarId vb = windows(project(tb, p.img_v));
    VarId qe = windows(project(te, p.evt_q));
    VarId ke = windows(project(te, p.evt_k));
    VarId ve = windows(project(te, p.evt_v));

    auto branch = [&](VarId x_tokens, VarId att_windows, const MlpRef& m) {
        VarId att = windows_to_tokens(g, att_windows, pb.hp, pb.wp, win);
        VarId y = add(g, x_tokens, att);
        VarId h = layer_norm(g, y, g.param(m.ln.g), g.param(m.ln.b));
        h = linear(g, h, g.param(m.fc1.w), g.param(m.fc1.b));
        h = gelu(g, h);
        h = linear(g, h, g.param(m.fc2.w), g.param(m.fc2.b));
        return add(g, y, h);
    };

    VarId att_be = window_attention(g, qb, ke, ve, cfg.scma_heads, nullptr, kNoVar, nullptr, probe);
    VarId f_be = branch(tb, att_be, p.mlp_be);
    VarId att_eb = window_attention(g, qe, kb, vb, cfg.scma_heads, nullptr, kNoVar, nullptr, probe);
    VarId f_eb = branch(te, att_eb, p.mlp_eb);
    if (probe && probe->scma_branches) {
        probe->scma_branches->push_back(g.val(f_be));
        probe->scma_branches->push_back(g.val(f_eb));
    }

    VarId fused = linear(g, concat_lastdim(g, {f_be, f_eb}), g.param(p.fuse.w), g.param(p.fuse.b));
    VarId out = tokens_to_chw(g, fused, pb.hp, pb.wp);
    if (pb.padded) out = crop_chw(g, out, 0, 0, pb.h, pb.w);
    return out;
}

// Swin transformer layer: x += W-MSA(LN(x)) with optional cyclic shift, then
// x += MLP(LN(x)).
inline VarId stl_forward(Graph& g, const NetworkConfig& cfg, const StlRef& p, VarId x, bool shifted,
                         ForwardProbe* probe = nullptr) {
    fwd_detail::require_finite(g.val(x), "stl_forward");
    const std::int64_t win = cfg.window_size, c = cfg.embed_dim;
    const std::int64_t shift = win / 2;
    auto pad = fwd_detail::pad_to_window(g, x, win);
    VarId t0 = chw_to_tokens(g, pad.var);

    VarId h = layer_norm(g, t0, g.param(p.ln1.g), g.param(p.ln1.b));
    if (shifted) h = roll_tokens(g, h, pad.hp, pad.wp, -shift, -shift);
    VarId qkv = linear(g, tokens_to_windows(g, h, pad.hp, pad.wp, win), g.param(p.qkv.w),
                       g.param(p.qkv.b));
    VarId q = slice_lastdim(g, qkv, 0, c);
    VarId k = slice_lastdim(g, qkv, c, 2 * c);
    VarId v = slice_lastdim(g, qkv, 2 * c, 3 * c);

    const std::vector<std::int64_t> rp_idx = relpos_index(win);
    Tensor mask;
    if (shifted) mask = make_shift_mask(pad.hp, pad.wp, win, shift);
    VarId att = window_attention(g, q, k, v, cfg.num_heads, shifted ? &mask : nullptr,
                                 g.param(p.relpos), &rp_idx, probe);

    VarId at = windows_to_tokens(g, att, pad.hp, pad.wp, win);
    if (shifted) at = roll_tokens(g, at, pad.hp, pad.wp, shift, shift);
    VarId a = linear(g, at, g.param(p.proj.w), g.param(p.proj.b));
    VarId x1 = add(g, t0, a);

    VarId m = layer_norm(g, x1, g.param(p.ln2.g), g.param(p.ln2.b));
    m = linear(g, m, g.param(p.fc1.w), g.param(p.fc1.b));
    m = gelu(g, m);
    m = linear(g, m, g.param(p.fc2.w), g.param(p.fc2.b));
    VarId x2 = add(g, x1, m);

    VarId out = tokens_to_chw(g, x2, pad.hp, pad.wp);
    if (pad.padded) out = crop_chw(g, out, 0, 0, pad.h, pad.w);
    return out;
}

// Residual dense Swin block: F_n(d) = STL(Compress1x1([F_n(d-1),...,F_n(1),F_in]))
// for d = 1..stl_per_rdstb (even d shifted), output = Conv3x3(F_n(last)) + F_in.
inline VarId rdstb_forward(Graph& g, const NetworkConfig& cfg, const RdstbRef& p, VarId x,
                           ForwardProbe* probe = nullptr) {
    std::vector<VarId> feats{x};
    VarId last = x;
    for (std::int64_t d = 1; d <= cfg.stl_per_rdstb; ++d) {
        std::vector<VarId> cat(feats.rbegin(), feats.rend());
        const StlRef& sp = p.stls[static_cast<std::size_t>(d - 1)];
        VarId comp = conv1x1(g, concat_dim0(g, cat), g.param(sp.compress.w), g.param(sp.compress.b));
        last = stl_forward(g, cfg, sp, comp, d % 2 == 0, probe);
        if (probe && probe->rdstb_feats) probe->rdstb_feats->push_back(g.val(last));
        feats.push_back(last);
    }
    VarId out = conv2d(g, last, g.param(p.conv.w), g.param(p.conv.b), 1);
    return add(g, out, x);
}

// Intermodal residual group: RDSTB chain, two 3x3 convs, group residual.
inline VarId irg_forward(Graph& g, const NetworkConfig& cfg, const NetRefs& r, VarId fs,
                         ForwardProbe* probe = nullptr) {
    fwd_detail::require_finite(g.val(fs), "irg_forward");
    VarId y = fs;
    if (cfg.use_irg) {
        for (const RdstbRef& rb : r.rdstbs) y = rdstb_forward(g, cfg, rb, y, probe);
    } else {
        for (const WbRef& cv : r.conv_stack)
            y = relu(g, conv2d(g, y, g.param(cv.w), g.param(cv.b), 1));
    }
    VarId t = conv2d(g, y, g.param(r.irg_conv1.w), g.param(r.irg_conv1.b), 1);
    t = relu(g, t);
    t = conv2d(g, t, g.param(r.irg_conv2.w), g.param(r.irg_conv2.b), 1);
    return add(g, t, fs);
}

// Sub-pixel decoder: log2(scale) stages of [3x3 conv C->4C, depth-to-space x2,
// ReLU], then a final 3x3 conv to in_channels.
inline VarId decode(Graph& g, const NetRefs& r, VarId fi) {
    VarId y = fi;
    for (const WbRef& up : r.dec_up) {
        y = conv2d(g, y, g.param(up.w), g.param(up.b), 1);
        y = pixel_shuffle(g, y, 2);
        y = relu(g, y);
    }
    return conv2d(g, y, g.param(r.dec_final.w), g.param(r.dec_final.b), 1);
}

// Full model: L = Dec(IRG(SCMA(Enc(B), Enc(E)))) + bilinear_upsample(B, s).
inline VarId ebsrnet_forward(Graph& g, const NetworkConfig& cfg, const NetRefs& r, VarId b,
                             VarId e, ForwardProbe* probe = nullptr) {
    const Tensor& tb = g.val(b);
    const Tensor& te = g.val(e);
    if (tb.rank() != 3 || te.rank() != 3 || tb.shape[1] != te.shape[1] ||
        tb.shape[2] != te.shape[2])
        throw DimensionError("ebsrnet_forward: image " + shape_str(tb.shape) +
                             " vs events " + shape_str(te.shape));
    VarId fb = encode_image(g, cfg, r, b);
    VarId fe = encode_events(g, cfg, r, e);
    VarId fs;
    if (cfg.use_scma) {
        fs = scma_forward(g, cfg, r.scma, fb, fe, probe);
    } else {
        fs = conv2d(g, concat_dim0(g, {fb, fe}), g.param(r.fuse_conv.w), g.param(r.fuse_conv.b), 1);
    }
    VarId fi = irg_forward(g, cfg, r, fs, probe);
    VarId dec = decode(g, r, fi);
    return add_const(g, dec, bilinear_upsample(g.val(b), cfg.scale));
}

// Convenience inference entry point (no gradients).
inline Tensor ebsrnet_infer(const NetworkConfig& cfg, ParamStore& store, const Tensor& blurry,
                            const Tensor& mcer, ForwardProbe* probe = nullptr) {
    Graph g(false);
    g.attach(&store);
    const NetRefs refs = resolve_refs(store, cfg);
    const VarId out =
        ebsrnet_forward(g, cfg, refs, g.constant(blurry), g.constant(mcer), probe);
    return g.val(out);
}

}  // namespace ebsr
