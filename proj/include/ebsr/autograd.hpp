#pragma once

// Define-by-run reverse-mode autodiff over dense double tensors.
//
// A Graph is a tape: every op appends a node holding the forward value and
// a backward closure; creation order is a topological order, so backward()
// is a single reverse sweep. Graphs are built per forward pass and thrown
// away. When grad_enabled is false, ops skip closures and saved buffers
// entirely (inference mode).
//
// Matrix products go through Eigen maps; everything else is plain loops.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ebsr/tensor.hpp"

namespace ebsr {

using VarId = std::int32_t;
inline constexpr VarId kNoVar = -1;

// Named parameter tensors in a stable registration order. The order is the
// contract for optimizer state and checkpoint layout.
struct ParamStore {
    std::vector<std::string> names;
    std::vector<Tensor> values;
    std::unordered_map<std::string, int> by_name;

    int add(const std::string& name, Tensor t) {
        if (by_name.count(name)) throw ArgumentError("ParamStore: duplicate parameter " + name);
        const int idx = static_cast<int>(values.size());
        names.push_back(name);
        values.push_back(std::move(t));
        by_name.emplace(names.back(), idx);
        return idx;
    }

    int find(const std::string& name) const {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw ArgumentError("ParamStore: unknown parameter " + name);
        return it->second;
    }

    bool contains(const std::string& name) const { return by_name.count(name) != 0; }

    int size() const { return static_cast<int>(values.size()); }

    std::int64_t scalar_count() const {
        std::int64_t n = 0;
        for (const Tensor& t : values) n += t.numel();
        return n;
    }
};

namespace eig {
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<Mat>;
using CMap = Eigen::Map<const Mat>;
inline Map map(Tensor& t, std::int64_t r, std::int64_t c) { return Map(t.data.data(), r, c); }
inline CMap map(const Tensor& t, std::int64_t r, std::int64_t c) { return CMap(t.data.data(), r, c); }
inline Map map(double* d, std::int64_t r, std::int64_t c) { return Map(d, r, c); }
inline CMap map(const double* d, std::int64_t r, std::int64_t c) { return CMap(d, r, c); }
}  // namespace eig

class Graph {
public:
    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool grad_enabled() const { return grad_enabled_; }

    VarId constant(Tensor v) { return push(std::move(v), false); }

    VarId leaf(Tensor v) { return push(std::move(v), grad_enabled_); }

    void attach(ParamStore* store) {
        store_ = store;
        param_vars_.assign(static_cast<std::size_t>(store->size()), kNoVar);
    }

    // Leaf for a stored parameter, memoized so repeated uses share gradients.
    VarId param(int idx) {
        if (!store_) throw ArgumentError("Graph::param: no store attached");
        VarId& slot = param_vars_.at(static_cast<std::size_t>(idx));
        if (slot == kNoVar) slot = leaf(store_->values[static_cast<std::size_t>(idx)]);
        return slot;
    }

    const Tensor& val(VarId id) const { return nodes_[static_cast<std::size_t>(id)].value; }

    bool needs_grad(VarId id) const {
        return id != kNoVar && nodes_[static_cast<std::size_t>(id)].needs;
    }

    Tensor& grad_buf(VarId id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.data.empty()) n.grad = Tensor(n.value.shape);
        return n.grad;
    }

    // Null when no gradient reached this node.
    const Tensor* grad_of(VarId id) const {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        return n.grad.data.empty() ? nullptr : &n.grad;
    }

    const Tensor* param_grad(int idx) const {
        const VarId v = param_vars_.at(static_cast<std::size_t>(idx));
        return v == kNoVar ? nullptr : grad_of(v);
    }

    void backward(VarId root) {
        if (!grad_enabled_) throw ArgumentError("Graph::backward: gradients disabled");
        if (val(root).numel() != 1) throw ArgumentError("Graph::backward: root must be scalar");
        grad_buf(root).data[0] = 1.0;
        for (VarId id = root; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (n.backward && !n.grad.data.empty()) n.backward();
        }
    }

    std::size_t node_count() const { return nodes_.size(); }

    // --- op construction API (used by the free-function ops below) -----

    VarId push(Tensor value, bool needs) {
        nodes_.push_back(Node{std::move(value), Tensor{}, nullptr, needs});
        return static_cast<VarId>(nodes_.size() - 1);
    }

    void set_backward(VarId id, std::function<void()> fn) {
        nodes_[static_cast<std::size_t>(id)].backward = std::move(fn);
    }

    // True when at least one parent participates in differentiation.
    bool track(std::initializer_list<VarId> parents) const {
        if (!grad_enabled_) return false;
        for (VarId p : parents)
            if (needs_grad(p)) return true;
        return false;
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void()> backward;
        bool needs = false;
    };

    std::vector<Node> nodes_;
    bool grad_enabled_;
    ParamStore* store_ = nullptr;
    std::vector<VarId> param_vars_;
};

// ---------------------------------------------------------------------------
// Elementwise / scalar ops

inline VarId add(Graph& g, VarId a, VarId b) {
    const Tensor& ta = g.val(a);
    const Tensor& tb = g.val(b);
    require_same_shape(ta, tb, "add");
    Tensor out = ta;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += tb.data[i];
    const bool needs = g.track({a, b});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, a, b] {
            const Tensor& go = *g.grad_of(id);
            if (g.needs_grad(a)) {
                Tensor& ga = g.grad_buf(a);
                for (std::size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i];
            }
            if (g.needs_grad(b)) {
                Tensor& gb = g.grad_buf(b);
                for (std::size_t i = 0; i < go.data.size(); ++i) gb.data[i] += go.data[i];
            }
        });
    return id;
}

inline VarId scale(Graph& g, VarId a, double s) {
    Tensor out = g.val(a);
    for (double& v : out.data) v *= s;
    const bool needs = g.track({a});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, a, s] {
            const Tensor& go = *g.grad_of(id);
            Tensor& ga = g.grad_buf(a);
            for (std::size_t i = 0; i < go.data.size(); ++i) ga.data[i] += s * go.data[i];
        });
    return id;
}

// Adds a constant tensor (no gradient through `c`).
inline VarId add_const(Graph& g, VarId a, const Tensor& c) {
    const Tensor& ta = g.val(a);
    require_same_shape(ta, c, "add_const");
    Tensor out = ta;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += c.data[i];
    const bool needs = g.track({a});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, a] {
            const Tensor& go = *g.grad_of(id);
            Tensor& ga = g.grad_buf(a);
            for (std::size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i];
        });
    return id;
}

inline VarId relu(Graph& g, VarId a) {
    Tensor out = g.val(a);
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    const bool needs = g.track({a});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, a] {
            const Tensor& go = *g.grad_of(id);
            const Tensor& x = g.val(a);
            Tensor& ga = g.grad_buf(a);
            for (std::size_t i = 0; i < go.data.size(); ++i)
                if (x.data[i] > 0.0) ga.data[i] += go.data[i];
        });
    return id;
}

// Exact (erf) GELU.
inline VarId gelu(Graph& g, VarId a) {
    static const double kInvSqrt2 = 1.0 / std::sqrt(2.0);
    static const double kInvSqrt2Pi = 1.0 / std::sqrt(2.0 * 3.14159265358979323846);
    Tensor out = g.val(a);
    for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    const bool needs = g.track({a});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, a] {
            const Tensor& go = *g.grad_of(id);
            const Tensor& x = g.val(a);
            Tensor& ga = g.grad_buf(a);
            for (std::size_t i = 0; i < go.data.size(); ++i) {
                const double v = x.data[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                ga.data[i] += go.data[i] * (cdf + v * pdf);
            }
        });
    return id;
}

// ---------------------------------------------------------------------------
// Shape ops

inline VarId reshape(Graph& g, VarId a, Shape shape) {
    Tensor out = g.val(a);
    std::int64_t n = 1;
    for (std::int64_t d : shape) n *= d;
    if (n != out.numel())
        throw DimensionError("reshape: cannot view " + shape_str(out.shape) + " as " +
                             shape_str(shape));
    out.shape = std::move(shape);
    const bool needs = g.track({a});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, a] {
            const Tensor& go = *g.grad_of(id);
            Tensor& ga = g.grad_buf(a);
            for (std::size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i];
        });
    return id;
}

// (C,H,W) -> (H*W, C) token matrix.
inline VarId chw_to_tokens(Graph& g, VarId a) {
    const Tensor& x = g.val(a);
    if (x.rank() != 3) throw DimensionError("chw_to_tokens: expected rank-3, got " + shape_str(x.shape));
    const std::int64_t c = x.shape[0], hw = x.shape[1] * x.shape[2];
    Tensor out({hw, c});
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t t = 0; t < hw; ++t) out.data[static_cast<std::size_t>(t * c + ch)] = x.data[static_cast<std::size_t>(ch * hw + t)];
    const bool needs = g.track({a});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, a, c, hw] {
            const Tensor& go = *g.grad_of(id);
            Tensor& ga = g.grad_buf(a);
            for (std::int64_t ch = 0; ch < c; ++ch)
                for (std::int64_t t = 0; t < hw; ++t)
                    ga.data[static_cast<std::size_t>(ch * hw + t)] += go.data[static_cast<std::size_t>(t * c + ch)];
        });
    return id;
}

// (H*W, C) -> (C,H,W).
inline VarId tokens_to_chw(Graph& g, VarId a, std::int64_t h, std::int64_t w) {
    const Tensor& x = g.val(a);
    if (x.rank() != 2 || x.shape[0] != h * w)
        throw DimensionError("tokens_to_chw: expected (" + std::to_string(h * w) + ", C), got " +
                             shape_str(x.shape));
    const std::int64_t c = x.shape[1], hw = h * w;
    Tensor out({c, h, w});
    for (std::int64_t t = 0; t < hw; ++t)
        for (std::int64_t ch = 0; ch < c; ++ch) out.data[static_cast<std::size_t>(ch * hw + t)] = x.data[static_cast<std::size_t>(t * c + ch)];
    const bool needs = g.track({a});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, a, c, hw] {
            const Tensor& go = *g.grad_of(id);
            Tensor& ga = g.grad_buf(a);
            for (std::int64_t t = 0; t < hw; ++t)
                for (std::int64_t ch = 0; ch < c; ++ch)
                    ga.data[static_cast<std::size_t>(t * c + ch)] += go.data[static_cast<std::size_t>(ch * hw + t)];
        });
    return id;
}

// Cyclic shift of an (H*W, C) token grid: out[y][x] = in[(y - dy) mod H][(x - dx) mod W].
inline VarId roll_tokens(Graph& g, VarId a, std::int64_t h, std::int64_t w, std::int64_t dy,
                         std::int64_t dx) {
    const Tensor& x = g.val(a);
    if (x.rank() != 2 || x.shape[0] != h * w)
        throw DimensionError("roll_tokens: bad shape " + shape_str(x.shape));
    const std::int64_t c = x.shape[1];
    auto wrap = [](std::int64_t i, std::int64_t n) { return ((i % n) + n) % n; };
    std::vector<std::int64_t> src(static_cast<std::size_t>(h * w));
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t xx = 0; xx < w; ++xx)
            src[static_cast<std::size_t>(y * w + xx)] = wrap(y - dy, h) * w + wrap(xx - dx, w);
    Tensor out({h * w, c});
    for (std::int64_t t = 0; t < h * w; ++t)
        std::copy_n(x.data.begin() + src[static_cast<std::size_t>(t)] * c, c,
                    out.data.begin() + t * c);
    const bool needs = g.track({a});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, a, src, c, n = h * w] {
            const Tensor& go = *g.grad_of(id);
            Tensor& ga = g.grad_buf(a);
            for (std::int64_t t = 0; t < n; ++t) {
                const std::int64_t s = src[static_cast<std::size_t>(t)];
                for (std::int64_t ch = 0; ch < c; ++ch)
                    ga.data[static_cast<std::size_t>(s * c + ch)] += go.data[static_cast<std::size_t>(t * c + ch)];
            }
        });
    return id;
}

// (H*W, C) tokens -> (nWin, win*win, C) non-overlapping windows, both row-major.
inline VarId tokens_to_windows(Graph& g, VarId a, std::int64_t h, std::int64_t w,
                               std::int64_t win) {
    const Tensor& x = g.val(a);
    if (x.rank() != 2 || x.shape[0] != h * w)
        throw DimensionError("tokens_to_windows: bad shape " + shape_str(x.shape));
    if (h % win != 0 || w % win != 0)
        throw DimensionError("tokens_to_windows: " + std::to_string(h) + "x" + std::to_string(w) +
                             " not divisible by window " + std::to_string(win));
    const std::int64_t c = x.shape[1], wy = h / win, wx = w / win, n = win * win;
    std::vector<std::int64_t> src(static_cast<std::size_t>(h * w));
    for (std::int64_t gy = 0; gy < wy; ++gy)
        for (std::int64_t gx = 0; gx < wx; ++gx)
            for (std::int64_t iy = 0; iy < win; ++iy)
                for (std::int64_t ix = 0; ix < win; ++ix)
                    src[static_cast<std::size_t>((gy * wx + gx) * n + iy * win + ix)] =
                        (gy * win + iy) * w + (gx * win + ix);
    Tensor out({wy * wx, n, c});
    for (std::int64_t t = 0; t < h * w; ++t)
        std::copy_n(x.data.begin() + src[static_cast<std::size_t>(t)] * c, c,
                    out.data.begin() + t * c);
    const bool needs = g.track({a});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, a, src, c, total = h * w] {
            const Tensor& go = *g.grad_of(id);
            Tensor& ga = g.grad_buf(a);
            for (std::int64_t t = 0; t < total; ++t) {
                const std::int64_t s = src[static_cast<std::size_t>(t)];
                for (std::int64_t ch = 0; ch < c; ++ch)
                    ga.data[static_cast<std::size_t>(s * c + ch)] += go.data[static_cast<std::size_t>(t * c + ch)];
            }
        });
    return id;
}

// Inverse of tokens_to_windows.
inline VarId windows_to_tokens(Graph& g, VarId a, std::int64_t h, std::int64_t w,
                               std::int64_t win) {
    const Tensor& x = g.val(a);
    const std::int64_t wy = h / win, wx = w / win, n = win * win;
    if (x.rank() != 3 || x.shape[0] != wy * wx || x.shape[1] != n)
        throw DimensionError("windows_to_tokens: bad shape " + shape_str(x.shape));
    const std::int64_t c = x.shape[2];
    std::vector<std::int64_t> dst(static_cast<std::size_t>(h * w));
    for (std::int64_t gy = 0; gy < wy; ++gy)
        for (std::int64_t gx = 0; gx < wx; ++gx)
            for (std::int64_t iy = 0; iy < win; ++iy)
                for (std::int64_t ix = 0; ix < win; ++ix)
                    dst[static_cast<std::size_t>((gy * wx + gx) * n + iy * win + ix)] =
                        (gy * win + iy) * w + (gx * win + ix);
    Tensor out({h * w, c});
    for (std::int64_t t = 0; t < h * w; ++t)
        std::copy_n(x.data.begin() + t * c, c, out.data.begin() + dst[static_cast<std::size_t>(t)] * c);
    const bool needs = g.track({a});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, a, dst, c, total = h * w] {
            const Tensor& go = *g.grad_of(id);
            Tensor& ga = g.grad_buf(a);
            for (std::int64_t t = 0; t < total; ++t) {
                const std::int64_t d = dst[static_cast<std::size_t>(t)];
                for (std::int64_t ch = 0; ch < c; ++ch)
                    ga.data[static_cast<std::size_t>(t * c + ch)] += go.data[static_cast<std::size_t>(d * c + ch)];
            }
        });
    return id;
}

// Reflective padding of (C,H,W); pad amounts must be <= dim-1.
inline VarId pad_reflect_chw(Graph& g, VarId a, std::int64_t pt, std::int64_t pb, std::int64_t pl,
                             std::int64_t pr) {
    const Tensor& x = g.val(a);
    if (x.rank() != 3) throw DimensionError("pad_reflect_chw: expected rank-3");
    const std::int64_t c = x.shape[0], h = x.shape[1], w = x.shape[2];
    if (pt >= h || pb >= h || pl >= w || pr >= w)
        throw DimensionError("pad_reflect_chw: pad exceeds input extent " + shape_str(x.shape));
    const std::int64_t ho = h + pt + pb, wo = w + pl + pr;
    auto refl = [](std::int64_t i, std::int64_t n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
        return i;
    };
    std::vector<std::int64_t> sy(static_cast<std::size_t>(ho)), sx(static_cast<std::size_t>(wo));
    for (std::int64_t y = 0; y < ho; ++y) sy[static_cast<std::size_t>(y)] = refl(y - pt, h);
    for (std::int64_t xx = 0; xx < wo; ++xx) sx[static_cast<std::size_t>(xx)] = refl(xx - pl, w);
    Tensor out({c, ho, wo});
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t y = 0; y < ho; ++y)
            for (std::int64_t xx = 0; xx < wo; ++xx)
                out.at(ch, y, xx) = x.at(ch, sy[static_cast<std::size_t>(y)], sx[static_cast<std::size_t>(xx)]);
    const bool needs = g.track({a});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, a, sy, sx, c, ho, wo, h, w] {
            const Tensor& go = *g.grad_of(id);
            Tensor& ga = g.grad_buf(a);
            for (std::int64_t ch = 0; ch < c; ++ch)
                for (std::int64_t y = 0; y < ho; ++y)
                    for (std::int64_t xx = 0; xx < wo; ++xx)
                        ga.data[static_cast<std::size_t>((ch * h + sy[static_cast<std::size_t>(y)]) * w +
                                                         sx[static_cast<std::size_t>(xx)])] +=
                            go.data[static_cast<std::size_t>((ch * ho + y) * wo + xx)];
        });
    return id;
}

// Crop (C,H,W) to the window starting at (y0,x0) with extent (h,w).
inline VarId crop_chw(Graph& g, VarId a, std::int64_t y0, std::int64_t x0, std::int64_t h,
                      std::int64_t w) {
    const Tensor& x = g.val(a);
    if (x.rank() != 3) throw DimensionError("crop_chw: expected rank-3");
    const std::int64_t c = x.shape[0], hi = x.shape[1], wi = x.shape[2];
    if (y0 < 0 || x0 < 0 || y0 + h > hi || x0 + w > wi)
        throw DimensionError("crop_chw: window out of range");
    Tensor out({c, h, w});
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t xx = 0; xx < w; ++xx) out.at(ch, y, xx) = x.at(ch, y0 + y, x0 + xx);
    const bool needs = g.track({a});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, a, y0, x0, c, h, w, hi, wi] {
            const Tensor& go = *g.grad_of(id);
            Tensor& ga = g.grad_buf(a);
            for (std::int64_t ch = 0; ch < c; ++ch)
                for (std::int64_t y = 0; y < h; ++y)
                    for (std::int64_t xx = 0; xx < w; ++xx)
                        ga.data[static_cast<std::size_t>((ch * hi + y0 + y) * wi + x0 + xx)] +=
                            go.data[static_cast<std::size_t>((ch * h + y) * w + xx)];
        });
    return id;
}

// Concatenate along dim 0 (shapes must match on the remaining dims).
inline VarId concat_dim0(Graph& g, const std::vector<VarId>& parts) {
    if (parts.empty()) throw ArgumentError("concat_dim0: no inputs");
    const Tensor& first = g.val(parts[0]);
    Shape rest(first.shape.begin() + 1, first.shape.end());
    std::int64_t total0 = 0;
    for (VarId p : parts) {
        const Tensor& t = g.val(p);
        if (t.rank() != first.rank() ||
            !std::equal(rest.begin(), rest.end(), t.shape.begin() + 1))
            throw DimensionError("concat_dim0: incompatible shapes " + shape_str(first.shape) +
                                 " vs " + shape_str(t.shape));
        total0 += t.shape[0];
    }
    Shape out_shape = first.shape;
    out_shape[0] = total0;
    Tensor out(out_shape);
    std::size_t off = 0;
    for (VarId p : parts) {
        const Tensor& t = g.val(p);
        std::copy(t.data.begin(), t.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
        off += t.data.size();
    }
    bool needs = false;
    for (VarId p : parts) needs = needs || g.needs_grad(p);
    needs = needs && g.grad_enabled();
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, parts] {
            const Tensor& go = *g.grad_of(id);
            std::size_t off2 = 0;
            for (VarId p : parts) {
                const std::size_t n = g.val(p).data.size();
                if (g.needs_grad(p)) {
                    Tensor& gp = g.grad_buf(p);
                    for (std::size_t i = 0; i < n; ++i) gp.data[i] += go.data[off2 + i];
                }
                off2 += n;
            }
        });
    return id;
}

// Concatenate along the last dimension (leading dims must match).
inline VarId concat_lastdim(Graph& g, const std::vector<VarId>& parts) {
    if (parts.empty()) throw ArgumentError("concat_lastdim: no inputs");
    const Tensor& first = g.val(parts[0]);
    Shape lead(first.shape.begin(), first.shape.end() - 1);
    std::int64_t rows = 1;
    for (std::int64_t d : lead) rows *= d;
    std::int64_t total = 0;
    std::vector<std::int64_t> widths;
    for (VarId p : parts) {
        const Tensor& t = g.val(p);
        if (t.rank() != first.rank() ||
            !std::equal(lead.begin(), lead.end(), t.shape.begin()))
            throw DimensionError("concat_lastdim: incompatible shapes " + shape_str(first.shape) +
                                 " vs " + shape_str(t.shape));
        widths.push_back(t.shape.back());
        total += t.shape.back();
    }
    Shape out_shape = first.shape;
    out_shape.back() = total;
    Tensor out(out_shape);
    for (std::int64_t r = 0; r < rows; ++r) {
        std::int64_t off = 0;
        for (std::size_t pi = 0; pi < parts.size(); ++pi) {
            const Tensor& t = g.val(parts[pi]);
            std::copy_n(t.data.begin() + r * widths[pi], widths[pi],
                        out.data.begin() + r * total + off);
            off += widths[pi];
        }
    }
    bool needs = false;
    for (VarId p : parts) needs = needs || g.needs_grad(p);
    needs = needs && g.grad_enabled();
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, parts, widths, rows, total] {
            const Tensor& go = *g.grad_of(id);
            for (std::int64_t r = 0; r < rows; ++r) {
                std::int64_t off = 0;
                for (std::size_t pi = 0; pi < parts.size(); ++pi) {
                    if (g.needs_grad(parts[pi])) {
                        Tensor& gp = g.grad_buf(parts[pi]);
                        for (std::int64_t j = 0; j < widths[pi]; ++j)
                            gp.data[static_cast<std::size_t>(r * widths[pi] + j)] +=
                                go.data[static_cast<std::size_t>(r * total + off + j)];
                    }
                    off += widths[pi];
                }
            }
        });
    return id;
}

// Slice [from, to) of the last dimension.
inline VarId slice_lastdim(Graph& g, VarId a, std::int64_t from, std::int64_t to) {
    const Tensor& x = g.val(a);
    const std::int64_t c = x.shape.back();
    if (from < 0 || to > c || from >= to) throw DimensionError("slice_lastdim: bad range");
    const std::int64_t rows = x.numel() / c, cs = to - from;
    Shape out_shape = x.shape;
    out_shape.back() = cs;
    Tensor out(out_shape);
    for (std::int64_t r = 0; r < rows; ++r)
        std::copy_n(x.data.begin() + r * c + from, cs, out.data.begin() + r * cs);
    const bool needs = g.track({a});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, a, rows, c, cs, from] {
            const Tensor& go = *g.grad_of(id);
            Tensor& ga = g.grad_buf(a);
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < cs; ++j)
                    ga.data[static_cast<std::size_t>(r * c + from + j)] += go.data[static_cast<std::size_t>(r * cs + j)];
        });
    return id;
}

// (B, N, C) -> (B*heads, N, C/heads).
inline VarId split_heads(Graph& g, VarId a, std::int64_t heads) {
    const Tensor& x = g.val(a);
    if (x.rank() != 3) throw DimensionError("split_heads: expected rank-3");
    const std::int64_t b = x.shape[0], n = x.shape[1], c = x.shape[2];
    if (c % heads != 0) throw DimensionError("split_heads: channels not divisible by heads");
    const std::int64_t dh = c / heads;
    Tensor out({b * heads, n, dh});
    for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t hh = 0; hh < heads; ++hh)
            for (std::int64_t t = 0; t < n; ++t)
                std::copy_n(x.data.begin() + (bi * n + t) * c + hh * dh, dh,
                            out.data.begin() + ((bi * heads + hh) * n + t) * dh);
    const bool needs = g.track({a});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, a, b, n, c, heads, dh] {
            const Tensor& go = *g.grad_of(id);
            Tensor& ga = g.grad_buf(a);
            for (std::int64_t bi = 0; bi < b; ++bi)
                for (std::int64_t hh = 0; hh < heads; ++hh)
                    for (std::int64_t t = 0; t < n; ++t)
                        for (std::int64_t d = 0; d < dh; ++d)
                            ga.data[static_cast<std::size_t>((bi * n + t) * c + hh * dh + d)] +=
                                go.data[static_cast<std::size_t>(((bi * heads + hh) * n + t) * dh + d)];
        });
    return id;
}

// (B*heads, N, C/heads) -> (B, N, C); inverse of split_heads.
inline VarId merge_heads(Graph& g, VarId a, std::int64_t heads) {
    const Tensor& x = g.val(a);
    if (x.rank() != 3 || x.shape[0] % heads != 0) throw DimensionError("merge_heads: bad shape");
    const std::int64_t b = x.shape[0] / heads, n = x.shape[1], dh = x.shape[2], c = dh * heads;
    Tensor out({b, n, c});
    for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t hh = 0; hh < heads; ++hh)
            for (std::int64_t t = 0; t < n; ++t)
                std::copy_n(x.data.begin() + ((bi * heads + hh) * n + t) * dh, dh,
                            out.data.begin() + (bi * n + t) * c + hh * dh);
    const bool needs = g.track({a});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, a, b, n, c, heads, dh] {
            const Tensor& go = *g.grad_of(id);
            Tensor& ga = g.grad_buf(a);
            for (std::int64_t bi = 0; bi < b; ++bi)
                for (std::int64_t hh = 0; hh < heads; ++hh)
                    for (std::int64_t t = 0; t < n; ++t)
                        for (std::int64_t d = 0; d < dh; ++d)
                            ga.data[static_cast<std::size_t>(((bi * heads + hh) * n + t) * dh + d)] +=
                                go.data[static_cast<std::size_t>((bi * n + t) * c + hh * dh + d)];
        });
    return id;
}

// (C*r*r, H, W) -> (C, r*H, r*W) sub-pixel rearrangement.
inline VarId pixel_shuffle(Graph& g, VarId a, std::int64_t r) {
    const Tensor& x = g.val(a);
    if (x.rank() != 3 || x.shape[0] % (r * r) != 0)
        throw DimensionError("pixel_shuffle: channels not divisible by r^2");
    const std::int64_t c = x.shape[0] / (r * r), h = x.shape[1], w = x.shape[2];
    Tensor out({c, h * r, w * r});
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t dy = 0; dy < r; ++dy)
            for (std::int64_t dx = 0; dx < r; ++dx)
                for (std::int64_t y = 0; y < h; ++y)
                    for (std::int64_t xx = 0; xx < w; ++xx)
                        out.data[static_cast<std::size_t>((ch * h * r + y * r + dy) * w * r + xx * r + dx)] =
                            x.data[static_cast<std::size_t>(((ch * r * r + dy * r + dx) * h + y) * w + xx)];
    const bool needs = g.track({a});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, a, c, h, w, r] {
            const Tensor& go = *g.grad_of(id);
            Tensor& ga = g.grad_buf(a);
            for (std::int64_t ch = 0; ch < c; ++ch)
                for (std::int64_t dy = 0; dy < r; ++dy)
                    for (std::int64_t dx = 0; dx < r; ++dx)
                        for (std::int64_t y = 0; y < h; ++y)
                            for (std::int64_t xx = 0; xx < w; ++xx)
                                ga.data[static_cast<std::size_t>(((ch * r * r + dy * r + dx) * h + y) * w + xx)] +=
                                    go.data[static_cast<std::size_t>((ch * h * r + y * r + dy) * w * r + xx * r + dx)];
        });
    return id;
}

// ---------------------------------------------------------------------------
// Linear algebra

// x: (..., Cin) treated as (rows, Cin); w: (Cout, Cin); b: (Cout) or kNoVar.
inline VarId linear(Graph& g, VarId x, VarId w, VarId b) {
    const Tensor& tx = g.val(x);
    const Tensor& tw = g.val(w);
    if (tw.rank() != 2) throw DimensionError("linear: weight must be rank-2");
    const std::int64_t cin = tw.shape[1], cout = tw.shape[0];
    if (tx.shape.back() != cin)
        throw DimensionError("linear: input " + shape_str(tx.shape) + " vs weight " +
                             shape_str(tw.shape));
    const std::int64_t rows = tx.numel() / cin;
    Shape out_shape = tx.shape;
    out_shape.back() = cout;
    Tensor out(out_shape);
    eig::map(out, rows, cout).noalias() = eig::map(tx, rows, cin) * eig::map(tw, cout, cin).transpose();
    if (b != kNoVar) {
        const Tensor& tb = g.val(b);
        if (tb.numel() != cout) throw DimensionError("linear: bias size mismatch");
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < cout; ++j) out.data[static_cast<std::size_t>(r * cout + j)] += tb.data[static_cast<std::size_t>(j)];
    }
    const bool needs = g.track({x, w, b});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, x, w, b, rows, cin, cout] {
            const Tensor& go = *g.grad_of(id);
            eig::CMap dY = eig::map(go, rows, cout);
            if (g.needs_grad(x)) {
                Tensor& gx = g.grad_buf(x);
                eig::map(gx, rows, cin).noalias() += dY * eig::map(g.val(w), cout, cin);
            }
            if (g.needs_grad(w)) {
                Tensor& gw = g.grad_buf(w);
                eig::map(gw, cout, cin).noalias() += dY.transpose() * eig::map(g.val(x), rows, cin);
            }
            if (b != kNoVar && g.needs_grad(b)) {
                Tensor& gb = g.grad_buf(b);
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < cout; ++j) gb.data[static_cast<std::size_t>(j)] += go.data[static_cast<std::size_t>(r * cout + j)];
            }
        });
    return id;
}

// Batched matmul: a (B,M,K) x b (B,K,N) -> (B,M,N); transpose_b swaps b to (B,N,K).
inline VarId bmm(Graph& g, VarId a, VarId b, bool transpose_b) {
    const Tensor& ta = g.val(a);
    const Tensor& tb = g.val(b);
    if (ta.rank() != 3 || tb.rank() != 3 || ta.shape[0] != tb.shape[0])
        throw DimensionError("bmm: bad shapes " + shape_str(ta.shape) + ", " + shape_str(tb.shape));
    const std::int64_t bs = ta.shape[0], m = ta.shape[1], k = ta.shape[2];
    const std::int64_t n = transpose_b ? tb.shape[1] : tb.shape[2];
    const std::int64_t kb = transpose_b ? tb.shape[2] : tb.shape[1];
    if (kb != k) throw DimensionError("bmm: inner dims differ");
    Tensor out({bs, m, n});
    for (std::int64_t i = 0; i < bs; ++i) {
        eig::CMap A(ta.data.data() + i * m * k, m, k);
        eig::Map C(out.data.data() + i * m * n, m, n);
        if (transpose_b) {
            eig::CMap B(tb.data.data() + i * n * k, n, k);
            C.noalias() = A * B.transpose();
        } else {
            eig::CMap B(tb.data.data() + i * k * n, k, n);
            C.noalias() = A * B;
        }
    }
    const bool needs = g.track({a, b});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, a, b, transpose_b, bs, m, k, n] {
            const Tensor& go = *g.grad_of(id);
            for (std::int64_t i = 0; i < bs; ++i) {
                eig::CMap dC(go.data.data() + i * m * n, m, n);
                if (g.needs_grad(a)) {
                    eig::Map dA(g.grad_buf(a).data.data() + i * m * k, m, k);
                    if (transpose_b) {
                        eig::CMap B(g.val(b).data.data() + i * n * k, n, k);
                        dA.noalias() += dC * B;
                    } else {
                        eig::CMap B(g.val(b).data.data() + i * k * n, k, n);
                        dA.noalias() += dC * B.transpose();
                    }
                }
                if (g.needs_grad(b)) {
                    eig::CMap A(g.val(a).data.data() + i * m * k, m, k);
                    if (transpose_b) {
                        eig::Map dB(g.grad_buf(b).data.data() + i * n * k, n, k);
                        dB.noalias() += dC.transpose() * A;
                    } else {
                        eig::Map dB(g.grad_buf(b).data.data() + i * k * n, k, n);
                        dB.noalias() += A.transpose() * dC;
                    }
                }
            }
        });
    return id;
}

// ---------------------------------------------------------------------------
// Normalization / attention pieces

// LayerNorm over the last dimension. gamma/beta: (C).
inline VarId layer_norm(Graph& g, VarId x, VarId gamma, VarId beta, double eps = 1e-5) {
    const Tensor& tx = g.val(x);
    const std::int64_t c = tx.shape.back(), rows = tx.numel() / c;
    const Tensor& tg = g.val(gamma);
    const Tensor& tb = g.val(beta);
    if (tg.numel() != c || tb.numel() != c) throw DimensionError("layer_norm: affine size mismatch");
    Tensor out(tx.shape);
    Tensor xhat(tx.shape);
    std::vector<double> inv_std(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = tx.data.data() + r * c;
        double mu = 0.0;
        for (std::int64_t j = 0; j < c; ++j) mu += xr[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::int64_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = is;
        for (std::int64_t j = 0; j < c; ++j) {
            const double xh = (xr[j] - mu) * is;
            xhat.data[static_cast<std::size_t>(r * c + j)] = xh;
            out.data[static_cast<std::size_t>(r * c + j)] = tg.data[static_cast<std::size_t>(j)] * xh + tb.data[static_cast<std::size_t>(j)];
        }
    }
    const bool needs = g.track({x, gamma, beta});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, x, gamma, beta, xhat = std::move(xhat),
                            inv_std = std::move(inv_std), rows, c] {
            const Tensor& go = *g.grad_of(id);
            const Tensor& tg = g.val(gamma);
            if (g.needs_grad(gamma)) {
                Tensor& gg = g.grad_buf(gamma);
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < c; ++j)
                        gg.data[static_cast<std::size_t>(j)] += go.data[static_cast<std::size_t>(r * c + j)] *
                                                                xhat.data[static_cast<std::size_t>(r * c + j)];
            }
            if (g.needs_grad(beta)) {
                Tensor& gb = g.grad_buf(beta);
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < c; ++j) gb.data[static_cast<std::size_t>(j)] += go.data[static_cast<std::size_t>(r * c + j)];
            }
            if (g.needs_grad(x)) {
                Tensor& gx = g.grad_buf(x);
                for (std::int64_t r = 0; r < rows; ++r) {
                    double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                    for (std::int64_t j = 0; j < c; ++j) {
                        const double dxh = go.data[static_cast<std::size_t>(r * c + j)] * tg.data[static_cast<std::size_t>(j)];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xhat.data[static_cast<std::size_t>(r * c + j)];
                    }
                    mean_dxh /= static_cast<double>(c);
                    mean_dxh_xh /= static_cast<double>(c);
                    const double is = inv_std[static_cast<std::size_t>(r)];
                    for (std::int64_t j = 0; j < c; ++j) {
                        const double dxh = go.data[static_cast<std::size_t>(r * c + j)] * tg.data[static_cast<std::size_t>(j)];
                        const double xh = xhat.data[static_cast<std::size_t>(r * c + j)];
                        gx.data[static_cast<std::size_t>(r * c + j)] += is * (dxh - mean_dxh - xh * mean_dxh_xh);
                    }
                }
            }
        });
    return id;
}

// Numerically stable softmax over the last dimension.
inline VarId softmax_lastdim(Graph& g, VarId x) {
    const Tensor& tx = g.val(x);
    const std::int64_t c = tx.shape.back(), rows = tx.numel() / c;
    Tensor out(tx.shape);
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = tx.data.data() + r * c;
        double* yr = out.data.data() + r * c;
        double mx = xr[0];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < c; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        for (std::int64_t j = 0; j < c; ++j) yr[j] /= sum;
    }
    const bool needs = g.track({x});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, x, rows, c] {
            const Tensor& go = *g.grad_of(id);
            const Tensor& y = g.val(id);
            Tensor& gx = g.grad_buf(x);
            for (std::int64_t r = 0; r < rows; ++r) {
                double s = 0.0;
                for (std::int64_t j = 0; j < c; ++j)
                    s += go.data[static_cast<std::size_t>(r * c + j)] * y.data[static_cast<std::size_t>(r * c + j)];
                for (std::int64_t j = 0; j < c; ++j)
                    gx.data[static_cast<std::size_t>(r * c + j)] +=
                        y.data[static_cast<std::size_t>(r * c + j)] * (go.data[static_cast<std::size_t>(r * c + j)] - s);
            }
        });
    return id;
}

// Adds a per-window constant mask to attention scores laid out (nWin*heads, N, N);
// batch index b maps to window b / heads.
inline VarId add_window_mask(Graph& g, VarId scores, const Tensor& mask, std::int64_t heads) {
    const Tensor& ts = g.val(scores);
    if (ts.rank() != 3 || mask.rank() != 3 || ts.shape[0] != mask.shape[0] * heads ||
        ts.shape[1] != mask.shape[1] || ts.shape[2] != mask.shape[2])
        throw DimensionError("add_window_mask: scores " + shape_str(ts.shape) + " vs mask " +
                             shape_str(mask.shape));
    const std::int64_t nn = ts.shape[1] * ts.shape[2];
    Tensor out = ts;
    for (std::int64_t b = 0; b < ts.shape[0]; ++b) {
        const double* mb = mask.data.data() + (b / heads) * nn;
        double* ob = out.data.data() + b * nn;
        for (std::int64_t i = 0; i < nn; ++i) ob[i] += mb[i];
    }
    const bool needs = g.track({scores});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, scores] {
            const Tensor& go = *g.grad_of(id);
            Tensor& gs = g.grad_buf(scores);
            for (std::size_t i = 0; i < go.data.size(); ++i) gs.data[i] += go.data[i];
        });
    return id;
}

// Adds learned relative-position bias to scores (nWin*heads, N, N); batch index b
// maps to head b % heads; `index` holds N*N entries into the table rows.
inline VarId add_relpos_bias(Graph& g, VarId scores, VarId table,
                             const std::vector<std::int64_t>& index, std::int64_t heads) {
    const Tensor& ts = g.val(scores);
    const Tensor& tt = g.val(table);
    if (ts.rank() != 3 || tt.rank() != 2 || tt.shape[0] != heads)
        throw DimensionError("add_relpos_bias: bad shapes");
    const std::int64_t nn = ts.shape[1] * ts.shape[2];
    if (static_cast<std::int64_t>(index.size()) != nn)
        throw DimensionError("add_relpos_bias: index size mismatch");
    Tensor out = ts;
    const std::int64_t L = tt.shape[1];
    for (std::int64_t b = 0; b < ts.shape[0]; ++b) {
        const std::int64_t hh = b % heads;
        double* ob = out.data.data() + b * nn;
        for (std::int64_t i = 0; i < nn; ++i) ob[i] += tt.data[static_cast<std::size_t>(hh * L + index[static_cast<std::size_t>(i)])];
    }
    const bool needs = g.track({scores, table});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, scores, table, index, heads, nn, L] {
            const Tensor& go = *g.grad_of(id);
            if (g.needs_grad(scores)) {
                Tensor& gs = g.grad_buf(scores);
                for (std::size_t i = 0; i < go.data.size(); ++i) gs.data[i] += go.data[i];
            }
            if (g.needs_grad(table)) {
                Tensor& gt = g.grad_buf(table);
                const std::int64_t bs = go.shape[0];
                for (std::int64_t b = 0; b < bs; ++b) {
                    const std::int64_t hh = b % heads;
                    const double* gb = go.data.data() + b * nn;
                    for (std::int64_t i = 0; i < nn; ++i)
                        gt.data[static_cast<std::size_t>(hh * L + index[static_cast<std::size_t>(i)])] += gb[i];
                }
            }
        });
    return id;
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM, chunked over output positions)

// x: (Cin,H,W), w: (Cout,Cin,kh,kw), b: (Cout) or kNoVar; zero padding `pad`.
inline VarId conv2d(Graph& g, VarId x, VarId w, VarId b, std::int64_t pad) {
    const Tensor& tx = g.val(x);
    const Tensor& tw = g.val(w);
    if (tx.rank() != 3 || tw.rank() != 4) throw DimensionError("conv2d: bad ranks");
    const std::int64_t cin = tx.shape[0], h = tx.shape[1], wd = tx.shape[2];
    const std::int64_t cout = tw.shape[0], kh = tw.shape[2], kw = tw.shape[3];
    if (tw.shape[1] != cin)
        throw DimensionError("conv2d: input channels " + std::to_string(cin) + " vs weight " +
                             shape_str(tw.shape));
    const std::int64_t ho = h + 2 * pad - kh + 1, wo = wd + 2 * pad - kw + 1;
    if (ho <= 0 || wo <= 0) throw DimensionError("conv2d: kernel larger than padded input");
    const std::int64_t kdim = cin * kh * kw, npos = ho * wo;
    const std::int64_t chunk = std::max<std::int64_t>(1, std::min<std::int64_t>(npos, 4096));

    auto fill_cols = [cin, h, wd, kh, kw, pad, wo, kdim](const Tensor& src, std::int64_t p0,
                                                         std::int64_t p1, std::vector<double>& cols) {
        // cols is (p1-p0, kdim) row-major: one row per output position.
        const std::int64_t np = p1 - p0;
        std::fill(cols.begin(), cols.begin() + np * kdim, 0.0);
        for (std::int64_t p = p0; p < p1; ++p) {
            const std::int64_t oy = p / wo, ox = p % wo;
            double* row = cols.data() + (p - p0) * kdim;
            for (std::int64_t ci = 0; ci < cin; ++ci)
                for (std::int64_t dy = 0; dy < kh; ++dy) {
                    const std::int64_t iy = oy + dy - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (std::int64_t dx = 0; dx < kw; ++dx) {
                        const std::int64_t ix = ox + dx - pad;
                        if (ix < 0 || ix >= wd) continue;
                        row[(ci * kh + dy) * kw + dx] = src.data[static_cast<std::size_t>((ci * h + iy) * wd + ix)];
                    }
                }
        }
    };

    Tensor out({cout, ho, wo});
    {
        std::vector<double> cols(static_cast<std::size_t>(chunk * kdim));
        eig::CMap W(tw.data.data(), cout, kdim);
        for (std::int64_t p0 = 0; p0 < npos; p0 += chunk) {
            const std::int64_t p1 = std::min(npos, p0 + chunk);
            fill_cols(tx, p0, p1, cols);
            eig::CMap K(cols.data(), p1 - p0, kdim);
            eig::Mat Y = K * W.transpose();  // (np, cout)
            for (std::int64_t p = p0; p < p1; ++p)
                for (std::int64_t co = 0; co < cout; ++co)
                    out.data[static_cast<std::size_t>(co * npos + p)] = Y(p - p0, co);
        }
    }
    if (b != kNoVar) {
        const Tensor& tb = g.val(b);
        if (tb.numel() != cout) throw DimensionError("conv2d: bias size mismatch");
        for (std::int64_t co = 0; co < cout; ++co)
            for (std::int64_t p = 0; p < npos; ++p) out.data[static_cast<std::size_t>(co * npos + p)] += tb.data[static_cast<std::size_t>(co)];
    }

    const bool needs = g.track({x, w, b});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, x, w, b, fill_cols, cin, h, wd, cout, kh, kw, pad, ho, wo,
                            kdim, npos, chunk] {
            const Tensor& go = *g.grad_of(id);
            const Tensor& tx2 = g.val(x);
            const Tensor& tw2 = g.val(w);
            const bool nx = g.needs_grad(x), nw = g.needs_grad(w);
            std::vector<double> cols(static_cast<std::size_t>(chunk * kdim));
            std::vector<double> gyt(static_cast<std::size_t>(chunk * cout));
            std::vector<double> dcols(static_cast<std::size_t>(chunk * kdim));
            eig::CMap W(tw2.data.data(), cout, kdim);
            for (std::int64_t p0 = 0; p0 < npos; p0 += chunk) {
                const std::int64_t p1 = std::min(npos, p0 + chunk);
                const std::int64_t np = p1 - p0;
                // gather dY chunk as (np, cout)
                for (std::int64_t p = p0; p < p1; ++p)
                    for (std::int64_t co = 0; co < cout; ++co)
                        gyt[static_cast<std::size_t>((p - p0) * cout + co)] = go.data[static_cast<std::size_t>(co * npos + p)];
                eig::CMap dY(gyt.data(), np, cout);
                if (nw) {
                    fill_cols(tx2, p0, p1, cols);
                    eig::CMap K(cols.data(), np, kdim);
                    eig::map(g.grad_buf(w), cout, kdim).noalias() += dY.transpose() * K;
                }
                if (nx) {
                    eig::Map dK(dcols.data(), np, kdim);
                    dK.noalias() = dY * W;
                    Tensor& gx = g.grad_buf(x);
                    for (std::int64_t p = p0; p < p1; ++p) {
                        const std::int64_t oy = p / wo, ox = p % wo;
                        const double* row = dcols.data() + (p - p0) * kdim;
                        for (std::int64_t ci = 0; ci < cin; ++ci)
                            for (std::int64_t dy = 0; dy < kh; ++dy) {
                                const std::int64_t iy = oy + dy - pad;
                                if (iy < 0 || iy >= h) continue;
                                for (std::int64_t dx = 0; dx < kw; ++dx) {
                                    const std::int64_t ix = ox + dx - pad;
                                    if (ix < 0 || ix >= wd) continue;
                                    gx.data[static_cast<std::size_t>((ci * h + iy) * wd + ix)] +=
                                        row[(ci * kh + dy) * kw + dx];
                                }
                            }
                    }
                }
            }
            if (b != kNoVar && g.needs_grad(b)) {
                Tensor& gb = g.grad_buf(b);
                for (std::int64_t co = 0; co < cout; ++co)
                    for (std::int64_t p = 0; p < npos; ++p) gb.data[static_cast<std::size_t>(co)] += go.data[static_cast<std::size_t>(co * npos + p)];
            }
        });
    return id;
}

// 1x1 convolution expressed as a per-pixel linear map; w: (Cout, Cin).
inline VarId conv1x1(Graph& g, VarId x, VarId w, VarId b) {
    const Tensor& tx = g.val(x);
    if (tx.rank() != 3) throw DimensionError("conv1x1: expected rank-3 input");
    const std::int64_t h = tx.shape[1], wd = tx.shape[2];
    VarId tokens = chw_to_tokens(g, x);
    VarId y = linear(g, tokens, w, b);
    return tokens_to_chw(g, y, h, wd);
}

// ---------------------------------------------------------------------------
// Reductions / losses

inline VarId mean_all(Graph& g, VarId a) {
    const Tensor& tx = g.val(a);
    const double n = static_cast<double>(tx.numel());
    double s = 0.0;
    for (double v : tx.data) s += v;
    Tensor out({1});
    out.data[0] = s / n;
    const bool needs = g.track({a});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, a, n] {
            const double go = g.grad_of(id)->data[0];
            Tensor& ga = g.grad_buf(a);
            const double c = go / n;
            for (double& v : ga.data) v += c;
        });
    return id;
}

// Scalar dot product with a constant weight tensor.
inline VarId weighted_sum(Graph& g, VarId a, const Tensor& wgt) {
    const Tensor& tx = g.val(a);
    require_same_shape(tx, wgt, "weighted_sum");
    double s = 0.0;
    for (std::size_t i = 0; i < tx.data.size(); ++i) s += tx.data[i] * wgt.data[i];
    Tensor out({1});
    out.data[0] = s;
    const bool needs = g.track({a});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, a, wgt] {
            const double go = g.grad_of(id)->data[0];
            Tensor& ga = g.grad_buf(a);
            for (std::size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += go * wgt.data[i];
        });
    return id;
}

// Mean absolute error against a constant target.
inline VarId l1_to_target(Graph& g, VarId a, const Tensor& target) {
    const Tensor& tx = g.val(a);
    require_same_shape(tx, target, "l1_to_target");
    const double n = static_cast<double>(tx.numel());
    double s = 0.0;
    for (std::size_t i = 0; i < tx.data.size(); ++i) s += std::abs(tx.data[i] - target.data[i]);
    Tensor out({1});
    out.data[0] = s / n;
    const bool needs = g.track({a});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, a, target, n] {
            const double go = g.grad_of(id)->data[0];
            const Tensor& x = g.val(a);
            Tensor& ga = g.grad_buf(a);
            for (std::size_t i = 0; i < ga.data.size(); ++i) {
                const double d = x.data[i] - target.data[i];
                if (d > 0.0)
                    ga.data[i] += go / n;
                else if (d < 0.0)
                    ga.data[i] -= go / n;
            }
        });
    return id;
}

// Mean squared error against a constant target.
inline VarId mse_to_target(Graph& g, VarId a, const Tensor& target) {
    const Tensor& tx = g.val(a);
    require_same_shape(tx, target, "mse_to_target");
    const double n = static_cast<double>(tx.numel());
    double s = 0.0;
    for (std::size_t i = 0; i < tx.data.size(); ++i) {
        const double d = tx.data[i] - target.data[i];
        s += d * d;
    }
    Tensor out({1});
    out.data[0] = s / n;
    const bool needs = g.track({a});
    const VarId id = g.push(std::move(out), needs);
    if (needs)
        g.set_backward(id, [&g, id, a, target, n] {
            const double go = g.grad_of(id)->data[0];
            const Tensor& x = g.val(a);
            Tensor& ga = g.grad_buf(a);
            for (std::size_t i = 0; i < ga.data.size(); ++i)
                ga.data[i] += go * 2.0 * (x.data[i] - target.data[i]) / n;
        });
    return id;
}

}  // namespace ebsr
