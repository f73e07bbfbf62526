#pragma once

// Training harness: composite loss (alpha * L1 + beta * perceptual), the Adam
// optimizer with the stepped learning-rate schedule, PSNR/SSIM metrics, and
// deterministic train/evaluate loops with bit-exact checkpoint resume.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "ebsr/autograd.hpp"
#include "ebsr/checkpoint.hpp"
#include "ebsr/dataset.hpp"
#include "ebsr/network.hpp"

namespace ebsr {

// ---------------------------------------------------------------------------
// Loss

// Pluggable perceptual distance: builds a differentiable scalar node from the
// prediction variable and the (constant) target.
using PerceptualFn = std::function<VarId(Graph&, VarId pred, const Tensor& target)>;

struct LossConfig {
    double alpha = 1.0;
    double beta = 0.0;          // requires `perceptual` when > 0
    PerceptualFn perceptual;    // feature extractor -> distance; empty = none

    void validate() const {
        if (alpha < 0.0 || beta < 0.0) throw ConfigError("loss weights must be non-negative");
        if (beta > 0.0 && !perceptual)
            throw ConfigError("beta > 0 requires a perceptual extractor");
    }
};

struct LossVars {
    VarId total = kNoVar;
    VarId l1 = kNoVar;
    VarId perceptual = kNoVar;  // kNoVar when beta == 0
};

// Differentiable loss subgraph on top of a prediction node.
inline LossVars loss_graph(Graph& g, VarId pred, const Tensor& target, const LossConfig& cfg) {
    cfg.validate();
    require_same_shape(g.val(pred), target, "compute_loss");
    if (!g.val(pred).all_finite() || !target.all_finite())
        throw NumericError("compute_loss: non-finite input");
    LossVars v;
    v.l1 = l1_to_target(g, pred, target);
    v.total = scale(g, v.l1, cfg.alpha);
    if (cfg.beta > 0.0) {
        v.perceptual = cfg.perceptual(g, pred, target);
        v.total = add(g, v.total, scale(g, v.perceptual, cfg.beta));
    }
    return v;
}

struct LossParts {
    double total = 0.0;
    double l1 = 0.0;
    double perceptual = 0.0;
};

inline LossParts compute_loss(const Tensor& pred, const Tensor& target, const LossConfig& cfg) {
    Graph g(false);
    const LossVars v = loss_graph(g, g.constant(pred), target, cfg);
    LossParts p;
    p.total = g.val(v.total).data[0];
    p.l1 = g.val(v.l1).data[0];
    p.perceptual = v.perceptual == kNoVar ? 0.0 : g.val(v.perceptual).data[0];
    return p;
}

// ---------------------------------------------------------------------------
// Schedule / optimizer

// Stepped decay: base * 0.98^(epoch / 5).
inline double lr_at(std::int64_t epoch, double base_lr = 1e-4) {
    if (epoch < 0) throw ArgumentError("lr_at: epoch must be >= 0");
    return base_lr * std::pow(0.98, static_cast<double>(epoch / 5));
}

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One Adam update over every parameter; increments state.step. Moment buffers
// are created lazily on the first call.
inline void adam_step(ParamStore& params, const std::vector<Tensor>& grads, TrainState& state,
                      double lr, const AdamConfig& ac = {}) {
    const std::size_t n = params.values.size();
    if (grads.size() != n) throw ArgumentError("adam_step: gradient count mismatch");
    if (state.adam_m.empty()) {
        state.adam_m.reserve(n);
        state.adam_v.reserve(n);
        for (const Tensor& p : params.values) {
            state.adam_m.push_back(Tensor(p.shape));
            state.adam_v.push_back(Tensor(p.shape));
        }
    }
    if (state.adam_m.size() != n || state.adam_v.size() != n)
        throw ArgumentError("adam_step: optimizer state size mismatch");
    ++state.step;
    const double bc1 = 1.0 - std::pow(ac.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(ac.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < n; ++i) {
        const Tensor& gt = grads[i];
        Tensor& p = params.values[i];
        if (gt.shape != p.shape)
            throw DimensionError("adam_step: gradient for " + params.names[i] + " has shape " +
                                 shape_str(gt.shape) + ", parameter is " + shape_str(p.shape));
        if (!gt.all_finite())
            throw NumericError("adam_step: non-finite gradient for parameter " + params.names[i]);
        Tensor& m = state.adam_m[i];
        Tensor& v = state.adam_v[i];
        for (std::size_t j = 0; j < p.data.size(); ++j) {
            const double gj = gt.data[j];
            m.data[j] = ac.beta1 * m.data[j] + (1.0 - ac.beta1) * gj;
            v.data[j] = ac.beta2 * v.data[j] + (1.0 - ac.beta2) * gj * gj;
            p.data[j] -= lr * (m.data[j] / bc1) / (std::sqrt(v.data[j] / bc2) + ac.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics

// 10*log10(1/MSE) over [0,1] images, capped for identical inputs.
inline double psnr(const Tensor& a, const Tensor& b, double cap = 100.0) {
    require_same_shape(a, b, "psnr");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse <= 0.0) return cap;
    return std::min(cap, -10.0 * std::log10(mse));
}

namespace metric_detail {
inline const std::vector<double>& gaussian11() {
    static const std::vector<double> k = [] {
        std::vector<double> v(11);
        double sum = 0.0;
        for (int i = 0; i < 11; ++i) {
            const double d = static_cast<double>(i - 5);
            v[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
            sum += v[static_cast<std::size_t>(i)];
        }
        for (double& x : v) x /= sum;
        return v;
    }();
    return k;
}
}  // namespace metric_detail

// Single-scale SSIM: Gaussian window 11 (sigma 1.5), K1=0.01, K2=0.03, L=1,
// valid-region evaluation, averaged over channels for multi-channel input.
inline double ssim(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "ssim");
    if (a.rank() != 3) throw DimensionError("ssim: expected (C, H, W), got " + shape_str(a.shape));
    const std::int64_t c = a.dim(0), h = a.dim(1), w = a.dim(2);
    constexpr std::int64_t win = 11, rad = 5;
    if (h < win || w < win)
        throw DimensionError("ssim: image " + shape_str(a.shape) + " smaller than the 11x11 window");
    const std::vector<double>& k = metric_detail::gaussian11();
    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;

    double chan_sum = 0.0;
    for (std::int64_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        std::int64_t count = 0;
        for (std::int64_t y = rad; y < h - rad; ++y)
            for (std::int64_t x = rad; x < w - rad; ++x) {
                double ma = 0.0, mb = 0.0, saa = 0.0, sbb = 0.0, sab = 0.0;
                for (std::int64_t dy = -rad; dy <= rad; ++dy) {
                    const double ky = k[static_cast<std::size_t>(dy + rad)];
                    for (std::int64_t dx = -rad; dx <= rad; ++dx) {
                        const double wgt = ky * k[static_cast<std::size_t>(dx + rad)];
                        const double va = a.at(ch, y + dy, x + dx);
                        const double vb = b.at(ch, y + dy, x + dx);
                        ma += wgt * va;
                        mb += wgt * vb;
                        saa += wgt * va * va;
                        sbb += wgt * vb * vb;
                        sab += wgt * va * vb;
                    }
                }
                const double var_a = saa - ma * ma;
                const double var_b = sbb - mb * mb;
                const double cov = sab - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
                       ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
                ++count;
            }
        chan_sum += acc / static_cast<double>(count);
    }
    return chan_sum / static_cast<double>(c);
}

// ---------------------------------------------------------------------------
// Train / evaluate loops

struct LogRow {
    std::int64_t epoch = 0;
    std::int64_t step = 0;
    double loss = 0.0;
    double l1 = 0.0;
    double perceptual = 0.0;
    double lr = 0.0;
    double val_psnr = 0.0;
    double val_ssim = 0.0;
};

inline std::string metrics_csv_header() {
    return "epoch,step,loss,l1,perceptual,lr,val_psnr,val_ssim";
}

inline std::string metrics_csv_row(const LogRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%lld,%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g",
                  static_cast<long long>(r.epoch), static_cast<long long>(r.step), r.loss, r.l1,
                  r.perceptual, r.lr, r.val_psnr, r.val_ssim);
    return buf;
}

inline void write_metrics_csv(const std::string& path, const std::vector<LogRow>& rows) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write metrics log: " + path);
    os << metrics_csv_header() << "\n";
    for (const LogRow& r : rows) os << metrics_csv_row(r) << "\n";
    if (!os) throw IoError("failed writing metrics log: " + path);
}

struct TrainOptions {
    std::int64_t epochs = 1;
    std::int64_t batch = 4;
    std::int64_t crop_lr = 0;      // LR crop size per sample; 0 = full frame
    bool augment = true;           // horizontal flips
    double base_lr = 1e-4;
    std::uint64_t seed = 0;
    double target_psnr = 0.0;      // early stop once val PSNR reaches this; 0 = off
    std::string run_dir;           // when set: writes ckpt_last.ebck / ckpt_best.ebck
};

struct EvalRow {
    std::string id;
    double psnr = 0.0;
    double ssim = 0.0;
};

struct EvalResult {
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
    std::vector<EvalRow> rows;
};

inline EvalResult evaluate(const NetworkConfig& cfg, ParamStore& params,
                           const std::vector<TrainSample>& samples) {
    if (samples.empty()) throw ConfigError("evaluate: empty dataset");
    const NetRefs refs = resolve_refs(params, cfg);
    EvalResult res;
    for (const TrainSample& s : samples) {
        Graph g(false);
        g.attach(&params);
        const VarId out =
            ebsrnet_forward(g, cfg, refs, g.constant(s.blurry), g.constant(s.mcer), nullptr);
        const Tensor& pred = g.val(out);
        EvalRow row;
        row.id = s.id;
        row.psnr = psnr(pred, s.target);
        row.ssim = ssim(pred, s.target);
        res.mean_psnr += row.psnr;
        res.mean_ssim += row.ssim;
        res.rows.push_back(std::move(row));
    }
    res.mean_psnr /= static_cast<double>(res.rows.size());
    res.mean_ssim /= static_cast<double>(res.rows.size());
    return res;
}

inline void write_eval_csv(const std::string& path, const EvalResult& res) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write eval table: " + path);
    os << "id,psnr,ssim\n";
    char buf[160];
    for (const EvalRow& r : res.rows) {
        std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g", r.id.c_str(), r.psnr, r.ssim);
        os << buf << "\n";
    }
    std::snprintf(buf, sizeof buf, "mean,%.17g,%.17g", res.mean_psnr, res.mean_ssim);
    os << buf << "\n";
    if (!os) throw IoError("failed writing eval table: " + path);
}

struct TrainResult {
    Checkpoint best;
    Checkpoint last;
    std::vector<LogRow> log;
};

namespace train_detail {

struct CroppedBatchSample {
    Tensor blurry, mcer, target;
};

// Draws the crop window and flip for one sample. RNG consumption order is
// part of the resume contract: (y0, x0) only when cropping, flip only when
// augmenting.
inline CroppedBatchSample draw_sample(const TrainSample& s, std::int64_t scale,
                                      const TrainOptions& opt, Rng& rng) {
    CroppedBatchSample out;
    const std::int64_t h = s.blurry.dim(1), w = s.blurry.dim(2);
    std::int64_t y0 = 0, x0 = 0, ch = h, cw = w;
    if (opt.crop_lr > 0 && (opt.crop_lr < h || opt.crop_lr < w)) {
        ch = std::min(opt.crop_lr, h);
        cw = std::min(opt.crop_lr, w);
        y0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(h - ch + 1)));
        x0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(w - cw + 1)));
    }
    out.blurry = crop(s.blurry, y0, x0, ch, cw);
    out.mcer = crop(s.mcer, y0, x0, ch, cw);
    out.target = crop(s.target, y0 * scale, x0 * scale, ch * scale, cw * scale);
    if (opt.augment && rng.below(2) == 1) {
        out.blurry = flip_horizontal(out.blurry);
        out.mcer = flip_horizontal(out.mcer);
        out.target = flip_horizontal(out.target);
    }
    return out;
}

}  // namespace train_detail

// Deterministic training loop. With `resume`, continues bit-exactly from the
// stored step/epoch/optimizer/RNG state. Aborts with a numeric error naming
// the batch when the loss stops being finite.
inline TrainResult train_loop(const NetworkConfig& cfg, const MCERConfig& mcer_cfg,
                              const std::vector<TrainSample>& train_set,
                              const std::vector<TrainSample>& val_set, const LossConfig& loss_cfg,
                              const TrainOptions& opt, const Checkpoint* resume = nullptr) {
    cfg.validate();
    loss_cfg.validate();
    if (train_set.empty()) throw ConfigError("train_loop: empty training dataset");
    const std::vector<TrainSample>& vals = val_set.empty() ? train_set : val_set;

    ParamStore params;
    TrainState state;
    Rng rng(opt.seed);
    if (resume) {
        if (!resume->train) throw ConfigError("train_loop: checkpoint has no train state");
        params = resume->params;
        state = *resume->train;
        rng.deserialize(state.rng_state);
    } else {
        params = init_params(cfg, rng);
    }
    const NetRefs refs = resolve_refs(params, cfg);

    TrainResult result;
    auto snapshot = [&](const Rng& r) {
        TrainState st = state;
        st.rng_state = r.serialize();
        return Checkpoint{cfg, mcer_cfg, params, st};
    };

    std::vector<std::size_t> order(train_set.size());
    std::vector<Tensor> grads(params.values.size());
    double best_psnr = resume ? state.best_val_psnr : -std::numeric_limits<double>::infinity();
    bool best_dirty = false;

    for (std::int64_t epoch = state.epoch; epoch < opt.epochs; ++epoch) {
        const double lr = lr_at(epoch, opt.base_lr);
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);

        double ep_loss = 0.0, ep_l1 = 0.0, ep_per = 0.0;
        std::int64_t ep_batches = 0;
        for (std::size_t bstart = 0; bstart < order.size();
             bstart += static_cast<std::size_t>(opt.batch)) {
            const std::size_t bend =
                std::min(order.size(), bstart + static_cast<std::size_t>(opt.batch));
            const double bn = static_cast<double>(bend - bstart);
            for (std::size_t i = 0; i < grads.size(); ++i) grads[i] = Tensor(params.values[i].shape);
            double b_loss = 0.0, b_l1 = 0.0, b_per = 0.0;
            for (std::size_t bi = bstart; bi < bend; ++bi) {
                const TrainSample& s = train_set[order[bi]];
                const auto cs = train_detail::draw_sample(s, cfg.scale, opt, rng);
                Graph g(true);
                g.attach(&params);
                const VarId pred = ebsrnet_forward(g, cfg, refs, g.constant(cs.blurry),
                                                   g.constant(cs.mcer), nullptr);
                const LossVars lv = loss_graph(g, pred, cs.target, loss_cfg);
                b_loss += g.val(lv.total).data[0];
                b_l1 += g.val(lv.l1).data[0];
                b_per += lv.perceptual == kNoVar ? 0.0 : g.val(lv.perceptual).data[0];
                g.backward(lv.total);
                for (std::size_t pi = 0; pi < grads.size(); ++pi) {
                    const Tensor* gp = g.param_grad(static_cast<int>(pi));
                    if (!gp) continue;
                    for (std::size_t j = 0; j < grads[pi].data.size(); ++j)
                        grads[pi].data[j] += gp->data[j] / bn;
                }
            }
            b_loss /= bn;
            b_l1 /= bn;
            b_per /= bn;
            if (!std::isfinite(b_loss))
                throw NumericError("train_loop: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", step " + std::to_string(state.step) + ", batch starting at sample index " +
                                   std::to_string(bstart));
            adam_step(params, grads, state, lr);
            ep_loss += b_loss;
            ep_l1 += b_l1;
            ep_per += b_per;
            ++ep_batches;
        }

        const EvalResult ev = evaluate(cfg, params, vals);
        LogRow row;
        row.epoch = epoch;
        row.step = state.step;
        row.loss = ep_loss / static_cast<double>(ep_batches);
        row.l1 = ep_l1 / static_cast<double>(ep_batches);
        row.perceptual = ep_per / static_cast<double>(ep_batches);
        row.lr = lr;
        row.val_psnr = ev.mean_psnr;
        row.val_ssim = ev.mean_ssim;
        result.log.push_back(row);

        state.epoch = epoch + 1;
        if (ev.mean_psnr > best_psnr) {
            best_psnr = ev.mean_psnr;
            state.best_val_psnr = best_psnr;
            result.best = snapshot(rng);
            best_dirty = true;
        }
        state.best_val_psnr = best_psnr;
        result.last = snapshot(rng);
        if (!opt.run_dir.empty()) {
            save_checkpoint(opt.run_dir + "/ckpt_last.ebck", result.last);
            if (best_dirty) {
                save_checkpoint(opt.run_dir + "/ckpt_best.ebck", result.best);
                best_dirty = false;
            }
        }
        if (opt.target_psnr > 0.0 && ev.mean_psnr >= opt.target_psnr) break;
    }
    if (result.last.params.size() == 0) result.last = snapshot(rng);
    if (result.best.params.size() == 0) result.best = result.last;
    return result;
}

}  // namespace ebsr
