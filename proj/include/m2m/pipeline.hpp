#pragma once

#include <chrono>
#include <map>

#include "m2m/coarse_flow.hpp"
#include "m2m/fusion.hpp"
#include "m2m/mrn.hpp"

namespace m2m {

struct InterpolationRequest {
    Tensor<float> i0, i1;
    std::vector<float> times;
    // external coarse flows; empty uv means use the built-in estimator
    FlowField<float> f01_ext, f10_ext;
    bool fill = true;
    int n_flows_override = 0;  // 0 = use the model's N; k <= N uses the first k heads

    void validate() const {
        require(i0.rank() == 3 && i0.same_shape(i1), "interpolate: mismatched image sizes");
        require(!times.empty(), "interpolate: empty times list");
        float prev = 0.0f;
        for (float t : times) {
            require(t > 0.0f && t < 1.0f, "interpolate: times must lie in (0,1)");
            require(t > prev, "interpolate: times must be strictly increasing");
            prev = t;
        }
    }
};

struct ComputeLedger {
    std::int64_t shared_flops = 0;
    std::int64_t unshared_flops = 0;
    int mrn_invocations = 0;
    std::map<std::string, double> stage_ms;
};

struct InterpolationResult {
    std::vector<Tensor<float>> frames;
    std::vector<HoleMask> holes;          // pre-fill hole masks, original size
    std::vector<double> hole_counts;
    ComputeLedger ledger;
};

namespace detail {

inline double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

// Symmetric replication padding of a [C,H,W] tensor to (oh, ow).
inline Tensor<float> pad_replicate(const Tensor<float>& x, int oh, int ow, int& top, int& left) {
    const int h = x.shape[1], w = x.shape[2];
    top = (oh - h) / 2;
    left = (ow - w) / 2;
    Tensor<float> y({x.shape[0], oh, ow});
    for (int c = 0; c < x.shape[0]; ++c)
        for (int yy = 0; yy < oh; ++yy)
            for (int xx = 0; xx < ow; ++xx) {
                const int sy = std::min(std::max(yy - top, 0), h - 1);
                const int sx = std::min(std::max(xx - left, 0), w - 1);
                y.at(c, yy, xx) = x.at(c, sy, sx);
            }
    return y;
}

inline Tensor<float> crop(const Tensor<float>& x, int top, int left, int h, int w) {
    Tensor<float> y({x.shape[0], h, w});
    for (int c = 0; c < x.shape[0]; ++c)
        for (int yy = 0; yy < h; ++yy)
            for (int xx = 0; xx < w; ++xx) y.at(c, yy, xx) = x.at(c, top + yy, left + xx);
    return y;
}

// Resize a flow field with per-axis magnitude rescaling.
inline FlowField<float> resize_flow(const FlowField<float>& f, int oh, int ow) {
    if (f.height() == oh && f.width() == ow) return f;
    Tensor<float> uv = resize_bilinear_fwd(f.uv, oh, ow);
    const float ku = static_cast<float>(ow) / static_cast<float>(f.width());
    const float kv = static_cast<float>(oh) / static_cast<float>(f.height());
    const std::int64_t hw = static_cast<std::int64_t>(oh) * ow;
    for (std::int64_t i = 0; i < hw; ++i) {
        uv[i] *= ku;
        uv[hw + i] *= kv;
    }
    return FlowField<float>(std::move(uv));
}

}  // namespace detail

// Full-resolution MRN products for one input pair; computed once and shared
// by every requested time step.
struct SharedMotion {
    MultiFlowField<float> flows01, flows10;
    Tensor<float> s0, s1;  // [H,W]
    FlowField<float> mean01, mean10;
};

inline SharedMotion run_mrn(const MrnModel<float>& model, const Tensor<float>& i0,
                            const Tensor<float>& i1, const FlowField<float>& f01c,
                            const FlowField<float>& f10c, ComputeLedger& ledger) {
    Tape<float> tape;
    MrnForward<float> mrn(tape, model);
    const auto v0 = tape.leaf(i0);
    const auto v1 = tape.leaf(i1);
    const auto vf01 = tape.leaf(f01c.uv);
    const auto vf10 = tape.leaf(f10c.uv);
    auto out = mrn.run(v0, v1, vf01, vf10);
    ledger.shared_flops += tape.flops;
    ledger.mrn_invocations += 1;

    SharedMotion sm;
    std::vector<FlowField<float>> f01, f10;
    for (int n = 0; n < model.cfg.n_flows; ++n) {
        f01.emplace_back(tape.val(out.flows01[static_cast<std::size_t>(n)]));
        f10.emplace_back(tape.val(out.flows10[static_cast<std::size_t>(n)]));
    }
    sm.flows01 = MultiFlowField<float>(std::move(f01));
    sm.flows10 = MultiFlowField<float>(std::move(f10));
    const auto& s0 = tape.val(out.s0);
    const auto& s1 = tape.val(out.s1);
    sm.s0 = Tensor<float>({s0.shape[1], s0.shape[2]}, s0.data);
    sm.s1 = Tensor<float>({s1.shape[1], s1.shape[2]}, s1.data);
    sm.mean01 = sm.flows01.mean();
    sm.mean10 = sm.flows10.mean();
    return sm;
}

// One unshared step: Eq.-style scale -> M2M splat of both frames -> softmax
// fusion. Returns the fused padded frame and its hole mask.
inline std::pair<Tensor<float>, HoleMask> render_step(const Tensor<float>& i0,
                                                      const Tensor<float>& i1,
                                                      const SharedMotion& sm, float alpha, float t,
                                                      int n_use, ComputeLedger* ledger) {
    const int h = i0.shape[1], w = i0.shape[2];
    auto [r0, r1] = temporal_relevance(t);
    auto [b0, b1] = brightness_consistency(i0, i1, sm.mean01, sm.mean10);
    Tensor<float> w0 = fusion_weights(b0, sm.s0, alpha, r0);
    Tensor<float> w1 = fusion_weights(b1, sm.s1, alpha, r1);
    SplatAccumulator<float> acc(3, h, w);
    MultiFlowField<float> f0t = scale_flow(sm.flows01, t, 0);
    MultiFlowField<float> f1t = scale_flow(sm.flows10, t, 1);
    for (int n = 0; n < n_use; ++n) {
        splat_forward(i0, w0, f0t.fields[static_cast<std::size_t>(n)], acc);
        splat_forward(i1, w1, f1t.fields[static_cast<std::size_t>(n)], acc);
    }
    if (ledger) {
        const std::int64_t hw = static_cast<std::int64_t>(h) * w;
        // 10 flops per pixel per contributor for splat+fuse, plus the two
        // brightness-consistency warps; constants are internally consistent
        ledger->unshared_flops += 10 * hw * 2 * n_use + 2 * 10 * 3 * hw;
    }
    return fuse(acc);
}

inline InterpolationResult interpolate(const InterpolationRequest& req,
                                       const MrnModel<float>& model) {
    req.validate();
    const int n_use = req.n_flows_override > 0 ? req.n_flows_override : model.cfg.n_flows;
    require(n_use <= model.cfg.n_flows, "interpolate: n_flows_override exceeds model heads");
    const int h = req.i0.shape[1], w = req.i0.shape[2];
    const int div = model.cfg.divisor();
    const int ph = (h + div - 1) / div * div;
    const int pw = (w + div - 1) / div * div;
    int top = 0, left = 0;
    Tensor<float> i0 = detail::pad_replicate(req.i0, ph, pw, top, left);
    Tensor<float> i1 = detail::pad_replicate(req.i1, ph, pw, top, left);

    InterpolationResult res;
    const int r = model.cfg.flow_downscale;
    double t0 = detail::now_ms();
    FlowField<float> f01c, f10c;
    if (req.f01_ext.uv.numel() > 0) {
        f01c = detail::resize_flow(req.f01_ext, ph / r, pw / r);
        f10c = detail::resize_flow(req.f10_ext, ph / r, pw / r);
    } else {
        CoarseFlowConfig cf;
        cf.downscale = r;
        auto est = estimate_coarse_flow(i0, i1, cf);
        f01c = std::move(est.first);
        f10c = std::move(est.second);
        const std::int64_t side = static_cast<std::int64_t>(ph / r) * (pw / r);
        const std::int64_t win = (2 * cf.search_radius + 1) * (2 * cf.search_radius + 1);
        res.ledger.shared_flops += 2 * 2 * cf.pyramid_levels * side * win * 3 * 2;
    }
    res.ledger.stage_ms["coarse_flow"] = detail::now_ms() - t0;

    t0 = detail::now_ms();
    SharedMotion sm = run_mrn(model, i0, i1, f01c, f10c, res.ledger);
    res.ledger.stage_ms["mrn"] = detail::now_ms() - t0;

    const float alpha = model.params.at("fusion.alpha")[0];
    t0 = detail::now_ms();
    for (float t : req.times) {
        auto [frame, holes] = render_step(i0, i1, sm, alpha, t, n_use, &res.ledger);
        if (req.fill) frame = fill_holes(frame, holes, i0, i1, sm.mean01, sm.mean10, t);
        res.frames.push_back(detail::crop(frame, top, left, h, w));
        HoleMask hm({h, w});
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                hm[static_cast<std::int64_t>(y) * w + x] =
                    holes[static_cast<std::int64_t>(top + y) * pw + (left + x)];
        res.hole_counts.push_back(count_holes(hm));
        res.holes.push_back(std::move(hm));
    }
    res.ledger.stage_ms["steps"] = detail::now_ms() - t0;
    return res;
}

// ---- quality metrics ----

inline double compute_psnr(const Tensor<float>& a, const Tensor<float>& b) {
    require(a.same_shape(b), "compute_psnr: size mismatch");
    double mse = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse <= 0) return 99.0;  // identical-image sentinel
    return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

inline double compute_ssim(const Tensor<float>& a, const Tensor<float>& b) {
    require(a.same_shape(b), "compute_ssim: size mismatch");
    const int c = a.shape[0], h = a.shape[1], w = a.shape[2];
    constexpr int kWin = 11;
    constexpr double kSigma = 1.5, kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;
    double g[kWin];
    double gsum = 0;
    for (int i = 0; i < kWin; ++i) {
        const double d = i - kWin / 2;
        g[i] = std::exp(-d * d / (2 * kSigma * kSigma));
        gsum += g[i];
    }
    for (double& v : g) v /= gsum;
    double total = 0;
    std::int64_t count = 0;
    for (int ch = 0; ch < c; ++ch)
        for (int y = kWin / 2; y < h - kWin / 2; ++y)
            for (int x = kWin / 2; x < w - kWin / 2; ++x) {
                double ma = 0, mb = 0, va = 0, vb = 0, cov = 0;
                for (int i = 0; i < kWin; ++i)
                    for (int j = 0; j < kWin; ++j) {
                        const double wt = g[i] * g[j];
                        const double pa = a.at(ch, y + i - kWin / 2, x + j - kWin / 2);
                        const double pb = b.at(ch, y + i - kWin / 2, x + j - kWin / 2);
                        ma += wt * pa;
                        mb += wt * pb;
                        va += wt * pa * pa;
                        vb += wt * pb * pb;
                        cov += wt * pa * pb;
                    }
                va -= ma * ma;
                vb -= mb * mb;
                cov -= ma * mb;
                total += (2 * ma * mb + kC1) * (2 * cov + kC2) /
                         ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
                ++count;
            }
    require(count > 0, "compute_ssim: image smaller than the window");
    return total / static_cast<double>(count);
}

// ---- sub-motion count sweep ----

struct SweepScene {
    Tensor<float> i0, i1, gt;
    float t = 0.5f;
};

struct SweepRow {
    int n_flows;
    double mean_holes;
    double psnr;
};

// Evaluate hole counts and PSNR using the first k of the model's flow heads
// for each requested k.
inline std::vector<SweepRow> sweep_n_flows(const MrnModel<float>& model,
                                           const std::vector<SweepScene>& scenes,
                                           const std::vector<int>& n_list) {
    std::vector<SweepRow> rows;
    for (int n : n_list) {
        SweepRow row{n, 0.0, 0.0};
        for (const auto& sc : scenes) {
            InterpolationRequest req;
            req.i0 = sc.i0;
            req.i1 = sc.i1;
            req.times = {sc.t};
            req.fill = true;
            req.n_flows_override = n;
            auto res = interpolate(req, model);
            row.mean_holes += res.hole_counts[0];
            row.psnr += compute_psnr(res.frames[0], sc.gt);
        }
        row.mean_holes /= static_cast<double>(scenes.size());
        row.psnr /= static_cast<double>(scenes.size());
        rows.push_back(row);
    }
    return rows;
}

}  // namespace m2m
