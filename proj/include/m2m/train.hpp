#pragma once

#include <array>
#include <random>

#include "m2m/pipeline.hpp"

namespace m2m {

// ---- synthetic scenes ----
// Triplets are rendered by transforming a continuous procedural texture, so
// the ground-truth mid frame and flows are analytically exact.

struct SceneSpec {
    enum class Kind { Translation, Rotation, Zoom, Occlusion };
    enum class Texture { Noise, Checker, Gradient };
    Kind kind = Kind::Translation;
    Texture texture = Texture::Noise;
    float texture_scale = 1.0f;  // <1 smooths the noise octaves
    int height = 64, width = 64;
    float max_shift = 5.0f;    // translation magnitude bound, px
    float max_angle = 0.12f;   // rotation bound, radians
    float min_zoom = 0.55f;    // zoom-out factor bound (frame-1 scale)
};

struct Triplet {
    Tensor<float> i0, it, i1;
    float t = 0.5f;
    FlowField<float> gt_f01, gt_f10;  // exact full-resolution flow
};

namespace scene_detail {

// Smooth periodic value-noise texture; two octaves of a seeded grid.
class NoiseTexture {
public:
    NoiseTexture(unsigned seed, SceneSpec::Texture kind, float scale = 1.0f)
        : kind_(kind), scale_(scale) {
        std::mt19937 rng(seed);
        std::uniform_real_distribution<float> d(0.0f, 1.0f);
        for (auto& v : grid_) v = d(rng);
        for (int c = 0; c < 3; ++c) {
            phase_[c] = d(rng);
            freq_[c] = 1.0f + d(rng) * 2.0f;
        }
    }

    // (x, y) in pixel units of a reference frame of the given size
    void sample(float x, float y, int h, int w, float* rgb) const {
        switch (kind_) {
            case SceneSpec::Texture::Checker: {
                const float s = 8.0f;
                const float vx = x / s - std::floor(x / s), vy = y / s - std::floor(y / s);
                const float v = (vx < 0.5f) == (vy < 0.5f) ? 0.85f : 0.15f;
                // soft edges keep the scene differentiable enough to learn from
                rgb[0] = v;
                rgb[1] = v * 0.8f + 0.1f;
                rgb[2] = 1.0f - v * 0.7f;
                return;
            }
            case SceneSpec::Texture::Gradient:
                rgb[0] = clampf(x / static_cast<float>(w));
                rgb[1] = clampf(y / static_cast<float>(h));
                rgb[2] = clampf(0.5f * (x / w + y / h));
                return;
            case SceneSpec::Texture::Noise:
            default:
                for (int c = 0; c < 3; ++c) {
                    const float fx = (x / static_cast<float>(w)) * freq_[c] * scale_ * kGrid + phase_[c];
                    const float fy = (y / static_cast<float>(h)) * freq_[c] * scale_ * kGrid + phase_[c];
                    rgb[c] = 0.65f * lookup(c, fx, fy) + 0.35f * lookup(c, 2.3f * fx, 2.3f * fy);
                }
                return;
        }
    }

private:
    static constexpr int kGrid = 12;
    static float clampf(float v) { return std::min(std::max(v, 0.0f), 1.0f); }

    float lookup(int c, float gx, float gy) const {
        gx -= std::floor(gx / kGrid) * kGrid;
        gy -= std::floor(gy / kGrid) * kGrid;
        const int x0 = static_cast<int>(gx) % kGrid, y0 = static_cast<int>(gy) % kGrid;
        const int x1 = (x0 + 1) % kGrid, y1 = (y0 + 1) % kGrid;
        const float ax = gx - std::floor(gx), ay = gy - std::floor(gy);
        auto g = [&](int yy, int xx) {
            return grid_[(static_cast<std::size_t>(c) * kGrid + yy) * kGrid + xx];
        };
        return (1 - ay) * ((1 - ax) * g(y0, x0) + ax * g(y0, x1)) +
               ay * ((1 - ax) * g(y1, x0) + ax * g(y1, x1));
    }

    SceneSpec::Texture kind_;
    float scale_ = 1.0f;
    std::array<float, 3 * kGrid * kGrid> grid_{};
    float phase_[3] = {0, 0, 0};
    float freq_[3] = {1, 1, 1};
};

struct Affine {
    // p_content = a * (p - c) + b + c
    float a00 = 1, a01 = 0, a10 = 0, a11 = 1;
    float bx = 0, by = 0, cx = 0, cy = 0;

    void apply(float x, float y, float& ox, float& oy) const {
        const float dx = x - cx, dy = y - cy;
        ox = a00 * dx + a01 * dy + bx + cx;
        oy = a10 * dx + a11 * dy + by + cy;
    }
    Affine inverse() const {
        const float det = a00 * a11 - a01 * a10;
        Affine inv;
        inv.a00 = a11 / det;
        inv.a01 = -a01 / det;
        inv.a10 = -a10 / det;
        inv.a11 = a00 / det;
        // solve a * d + b = q  =>  d = a^-1 (q - b)
        inv.bx = -(inv.a00 * bx + inv.a01 * by);
        inv.by = -(inv.a10 * bx + inv.a11 * by);
        inv.cx = cx;
        inv.cy = cy;
        return inv;
    }
};

}  // namespace scene_detail

// Render the triplet for one scene draw. The content at time tau sits at
// A_tau of its reference position; frames sample the texture at A_tau^{-1}.
inline Triplet make_triplet(const SceneSpec& spec, unsigned seed, float t = 0.5f) {
    using scene_detail::Affine;
    std::mt19937 rng(seed);
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    scene_detail::NoiseTexture tex(seed * 2654435761u + 17u, spec.texture, spec.texture_scale);
    const int h = spec.height, w = spec.width;
    const float cx = w / 2.0f, cy = h / 2.0f;

    auto at_time = [&](float dx, float dy, float angle, float zoom, float tau) {
        Affine a;
        const float s = 1.0f + (zoom - 1.0f) * tau;
        const float th = angle * tau;
        a.a00 = s * std::cos(th);
        a.a01 = -s * std::sin(th);
        a.a10 = s * std::sin(th);
        a.a11 = s * std::cos(th);
        a.bx = dx * tau;
        a.by = dy * tau;
        a.cx = cx;
        a.cy = cy;
        return a;
    };

    float dx = (d(rng) * 2 - 1) * spec.max_shift;
    float dy = (d(rng) * 2 - 1) * spec.max_shift;
    float angle = 0, zoom = 1;
    switch (spec.kind) {
        case SceneSpec::Kind::Translation:
            break;
        case SceneSpec::Kind::Rotation:
            angle = (d(rng) * 2 - 1) * spec.max_angle;
            dx *= 0.3f;
            dy *= 0.3f;
            break;
        case SceneSpec::Kind::Zoom:
        case SceneSpec::Kind::Occlusion:
            zoom = spec.min_zoom + d(rng) * (1.0f - spec.min_zoom);
            dx *= 0.3f;
            dy *= 0.3f;
            break;
    }

    // foreground layer for occlusion scenes
    const bool has_fg = spec.kind == SceneSpec::Kind::Occlusion;
    const float fg_half = 0.15f * std::min(h, w);
    const float fgx = cx + (d(rng) * 2 - 1) * 0.2f * w;
    const float fgy = cy + (d(rng) * 2 - 1) * 0.2f * h;
    const float fdx = (d(rng) * 2 - 1) * spec.max_shift;
    const float fdy = (d(rng) * 2 - 1) * spec.max_shift;
    scene_detail::NoiseTexture fg_tex(seed * 40503u + 5u, SceneSpec::Texture::Noise,
                                      spec.texture_scale);

    auto render = [&](float tau) {
        Tensor<float> img({3, h, w});
        const Affine inv = at_time(dx, dy, angle, zoom, tau).inverse();
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                float rgb[3];
                float sx, sy;
                inv.apply(static_cast<float>(x), static_cast<float>(y), sx, sy);
                tex.sample(sx, sy, h, w, rgb);
                if (has_fg) {
                    const float px = fgx + fdx * tau, py = fgy + fdy * tau;
                    if (std::abs(x - px) < fg_half && std::abs(y - py) < fg_half) {
                        fg_tex.sample(x - px, y - py, h, w, rgb);
                        rgb[0] = 0.3f + 0.7f * rgb[0];
                    }
                }
                for (int c = 0; c < 3; ++c) img.at(c, y, x) = rgb[c];
            }
        return img;
    };

    Triplet tr;
    tr.t = t;
    tr.i0 = render(0.0f);
    tr.it = render(t);
    tr.i1 = render(1.0f);
    // background flow: position of frame-0 content in frame 1
    tr.gt_f01 = FlowField<float>(h, w);
    tr.gt_f10 = FlowField<float>(h, w);
    const Affine a1 = at_time(dx, dy, angle, zoom, 1.0f);
    const Affine inv1 = a1.inverse();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            float ox, oy;
            a1.apply(static_cast<float>(x), static_cast<float>(y), ox, oy);
            tr.gt_f01.u(y, x) = ox - x;
            tr.gt_f01.v(y, x) = oy - y;
            inv1.apply(static_cast<float>(x), static_cast<float>(y), ox, oy);
            tr.gt_f10.u(y, x) = ox - x;
            tr.gt_f10.v(y, x) = oy - y;
        }
    return tr;
}

// ---- losses (tape graphs) ----

template <typename S>
typename Tape<S>::Var charbonnier_loss(Tape<S>& tape, typename Tape<S>::Var pred,
                                       typename Tape<S>::Var gt, S eps = S(1e-3)) {
    require(tape.val(pred).shape == tape.val(gt).shape, "charbonnier_loss: shape mismatch");
    return tape.reduce_mean(tape.charb(tape.sub(pred, gt), eps));
}

// Soft census loss on a 3x3 window: soft-sign census signatures compared with
// a soft Hamming distance, averaged over non-border pixels.
template <typename S>
typename Tape<S>::Var census_loss(Tape<S>& tape, typename Tape<S>::Var pred,
                                  typename Tape<S>::Var gt, S sigma = S(0.1)) {
    const Shape sh = tape.val(pred).shape;  // copy: adding ops may reallocate
    require(sh == tape.val(gt).shape, "census_loss: shape mismatch");
    require(sh[1] >= 3 && sh[2] >= 3, "census_loss: image smaller than the census window");
    using Var = typename Tape<S>::Var;
    const S inv_c = S(1) / static_cast<S>(sh[0]);
    Var g1 = tape.scale(tape.sum_channels(pred), inv_c);
    Var g2 = tape.scale(tape.sum_channels(gt), inv_c);
    Var acc = -1;
    for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
            if (dy == 0 && dx == 0) continue;
            auto sig = [&](Var g) {
                Var d = tape.sub(tape.shift2d(g, dy, dx), g);
                return tape.div(d, tape.charb(d, sigma));
            };
            Var delta = tape.sub(sig(g1), sig(g2));
            Var d2 = tape.mul(delta, delta);
            Var term = tape.div(d2, tape.add_const(d2, S(0.1)));
            acc = acc < 0 ? term : tape.add(acc, term);
        }
    return tape.reduce_mean(tape.crop2d(acc, 1, 1, sh[1] - 2, sh[2] - 2));
}

// ---- differentiable splat/fuse graph shared by training and grad checks ----

template <typename S>
struct FusionGraphInputs {
    typename Tape<S>::Var i0, i1;                       // [3,H,W]
    std::vector<typename Tape<S>::Var> flows01, flows10;  // N x [2,H,W]
    typename Tape<S>::Var s0, s1;                       // [1,H,W]
    typename Tape<S>::Var alpha;                        // [1]
    S t;
};

// Builds Eq.-style fusion: per-pixel weights exp(b*s*alpha)*r, M2M splat of
// both frames at time t, masked division. Returns the fused frame var.
template <typename S>
typename Tape<S>::Var build_fusion_graph(Tape<S>& tape, const FusionGraphInputs<S>& in) {
    using Var = typename Tape<S>::Var;
    require(!in.flows01.empty() && in.flows01.size() == in.flows10.size(),
            "build_fusion_graph: flow lists mismatch");
    const int n = static_cast<int>(in.flows01.size());
    const S inv_n = S(1) / static_cast<S>(n);
    auto mean_of = [&](const std::vector<Var>& fs) {
        Var m = fs[0];
        for (int i = 1; i < n; ++i) m = tape.add(m, fs[static_cast<std::size_t>(i)]);
        return tape.scale(m, inv_n);
    };
    const Var mean01 = mean_of(in.flows01);
    const Var mean10 = mean_of(in.flows10);
    auto brightness = [&](Var a, Var b, Var f) {
        return tape.scale(tape.sum_channels(tape.abs_(tape.sub(a, tape.backward_warp(b, f)))),
                          S(-1));
    };
    const Var b0 = brightness(in.i0, in.i1, mean01);
    const Var b1 = brightness(in.i1, in.i0, mean10);
    auto weights = [&](Var b, Var s, S r) {
        return tape.scale(tape.exp_(tape.mul_scalar(tape.mul(b, s), in.alpha)), r);
    };
    const Var w0 = weights(b0, in.s0, S(1) - in.t);
    const Var w1 = weights(b1, in.s1, in.t);
    Var acc = -1;
    for (int k = 0; k < n; ++k) {
        Var a0 = tape.splat(in.i0, w0, tape.scale(in.flows01[static_cast<std::size_t>(k)], in.t));
        Var a1 = tape.splat(in.i1, w1, tape.scale(in.flows10[static_cast<std::size_t>(k)], S(1) - in.t));
        Var both = tape.add(a0, a1);
        acc = acc < 0 ? both : tape.add(acc, both);
    }
    const int c = tape.val(in.i0).shape[0];
    const Var num = tape.slice_ch(acc, 0, c);
    const Var den = tape.slice_ch(acc, c, 1);
    return tape.div_masked(num, den, static_cast<S>(kHoleEps));
}

// ---- Adam (decoupled weight decay) ----

struct AdamState {
    std::vector<Tensor<float>> m, v;
    std::int64_t step = 0;
    int skipped = 0;  // non-finite-gradient steps
};

inline void adam_step(ParamStore<float>& params, const std::vector<Tensor<float>>& grads,
                      AdamState& state, float lr, float weight_decay,
                      const std::vector<bool>* decay_mask = nullptr) {
    constexpr float kB1 = 0.9f, kB2 = 0.999f, kEps = 1e-8f;
    require(grads.size() == params.count(), "adam_step: gradient count mismatch");
    if (state.m.empty()) {
        for (const auto& p : params.tensors) {
            state.m.emplace_back(p.shape);
            state.v.emplace_back(p.shape);
        }
    }
    for (const auto& g : grads)
        if (!g.all_finite()) {
            ++state.skipped;
            return;
        }
    ++state.step;
    const double bc1 = 1.0 - std::pow(kB1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(kB2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < params.count(); ++k) {
        auto& p = params.tensors[k];
        require(p.shape == grads[k].shape, "adam_step: shape mismatch for " + params.names[k]);
        const bool decay = decay_mask ? (*decay_mask)[k] : true;
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            auto& m = state.m[k][i];
            auto& v = state.v[k][i];
            const float g = grads[k][i];
            m = kB1 * m + (1 - kB1) * g;
            v = kB2 * v + (1 - kB2) * g * g;
            const double mh = m / bc1, vh = v / bc2;
            p[i] -= static_cast<float>(lr * (mh / (std::sqrt(vh) + kEps)));
            if (decay) p[i] -= lr * weight_decay * p[i];
        }
    }
}

// ---- toy end-to-end training ----

struct TrainConfig {
    int iterations = 2000;
    int batch_size = 2;    // averaging two scenes per step steadies the descent
    float lr_max = 3e-3f;  // cosine-annealed to 0
    float weight_decay = 1e-4f;
    int crop = 48;          // scene size per sample
    int scene_pool = 0;     // recycle this many scenes; 0 = fresh draw per step
    bool augment = true;
    unsigned seed = 1;
    int log_every = 50;
    std::vector<SceneSpec::Kind> kinds = {SceneSpec::Kind::Translation, SceneSpec::Kind::Zoom};
};

struct TrainLogRow {
    int iteration;
    double charbonnier, census, total;
};

struct TrainResult {
    std::vector<TrainLogRow> log;
    double initial_holdout_loss = 0, final_holdout_loss = 0;
};

namespace train_detail {

inline void flip_horizontal(Triplet& tr) {
    auto flip_img = [](Tensor<float>& x) {
        const int w = x.shape[2];
        for (int c = 0; c < x.shape[0]; ++c)
            for (int y = 0; y < x.shape[1]; ++y)
                for (int x0 = 0; x0 < w / 2; ++x0)
                    std::swap(x.at(c, y, x0), x.at(c, y, w - 1 - x0));
    };
    flip_img(tr.i0);
    flip_img(tr.it);
    flip_img(tr.i1);
    auto flip_flow = [&](FlowField<float>& f) {
        flip_img(f.uv);
        const std::int64_t hw = static_cast<std::int64_t>(f.height()) * f.width();
        for (std::int64_t i = 0; i < hw; ++i) f.uv[i] = -f.uv[i];  // u component
    };
    flip_flow(tr.gt_f01);
    flip_flow(tr.gt_f10);
}

inline void flip_temporal(Triplet& tr) {
    std::swap(tr.i0, tr.i1);
    std::swap(tr.gt_f01, tr.gt_f10);
    tr.t = 1.0f - tr.t;
}

inline void color_jitter(Triplet& tr, std::mt19937& rng) {
    std::uniform_real_distribution<float> d(0.85f, 1.15f);
    for (int c = 0; c < 3; ++c) {
        const float k = d(rng);
        for (Tensor<float>* img : {&tr.i0, &tr.it, &tr.i1})
            for (int y = 0; y < img->shape[1]; ++y)
                for (int x = 0; x < img->shape[2]; ++x)
                    img->at(c, y, x) = std::min(1.0f, std::max(0.0f, img->at(c, y, x) * k));
    }
}

}  // namespace train_detail

// Forward the full model+fusion on one triplet and return (loss_var, tape).
// Coarse flow comes from the built-in estimator, matching inference.
template <typename S>
typename Tape<S>::Var build_training_graph(Tape<S>& tape, MrnForward<S>& mrn, const MrnConfig& cfg,
                                           const Tensor<S>& i0, const Tensor<S>& i1,
                                           const Tensor<S>& it, S t, const FlowField<S>& f01c,
                                           const FlowField<S>& f10c,
                                           typename Tape<S>::Var* out_charb = nullptr,
                                           typename Tape<S>::Var* out_census = nullptr) {
    using Var = typename Tape<S>::Var;
    const Var v0 = tape.leaf(i0);
    const Var v1 = tape.leaf(i1);
    const Var vgt = tape.leaf(it);
    auto out = mrn.run(v0, v1, tape.leaf(f01c.uv), tape.leaf(f10c.uv));
    FusionGraphInputs<S> fin;
    fin.i0 = v0;
    fin.i1 = v1;
    fin.flows01 = out.flows01;
    fin.flows10 = out.flows10;
    fin.s0 = out.s0;
    fin.s1 = out.s1;
    fin.alpha = mrn.param("fusion.alpha");
    fin.t = t;
    const Var pred = build_fusion_graph(tape, fin);
    const Var lc = charbonnier_loss(tape, pred, vgt);
    const Var lcen = census_loss(tape, pred, vgt);
    if (out_charb) *out_charb = lc;
    if (out_census) *out_census = lcen;
    return tape.add(lc, lcen);
}

inline Triplet sample_scene(const TrainConfig& cfg, unsigned seed) {
    SceneSpec spec;
    spec.height = spec.width = cfg.crop;
    std::mt19937 rng(seed);
    spec.kind = cfg.kinds[rng() % cfg.kinds.size()];
    spec.texture = SceneSpec::Texture::Noise;
    // splatting cannot reconstruct sub-pixel detail; keep features a few px wide
    spec.texture_scale = 0.4f;
    // at crop size, severe zooms push content off-frame faster than a toy
    // model can learn to compensate
    spec.min_zoom = 0.75f;
    std::uniform_real_distribution<float> td(0.2f, 0.8f);
    const float t = std::round(td(rng) * 8.0f) / 8.0f;  // x8-friendly steps
    return make_triplet(spec, rng(), std::min(0.875f, std::max(0.125f, t)));
}

// Mean |initial − ground-truth| displacement in full-resolution pixels,
// reported for the worse of the two axes.
inline float mean_residual_px(const FlowField<float>& est, const FlowField<float>& gt_full,
                              int downscale) {
    Tensor<float> g = resize_bilinear_fwd(gt_full.uv, est.uv.shape[1], est.uv.shape[2]);
    const std::int64_t hw = static_cast<std::int64_t>(g.shape[1]) * g.shape[2];
    double du = 0, dv = 0;
    for (std::int64_t i = 0; i < hw; ++i) {
        du += std::abs(est.uv[i] * static_cast<float>(downscale) - g[i]);
        dv += std::abs(est.uv[hw + i] * static_cast<float>(downscale) - g[hw + i]);
    }
    return static_cast<float>(std::max(du, dv) / static_cast<double>(hw));
}

inline double holdout_loss(const MrnModel<float>& model, const TrainConfig& cfg, int n_scenes,
                           unsigned seed_base) {
    // held-out scenes are translations: they isolate sub-pixel refinement from
    // the coarse estimator's zoom-dependent block errors. Scenes whose initial
    // flow is already near-exact have nothing to refine, and ones beyond the
    // quantization range indicate estimator failure; both only add noise, so
    // the set keeps scenes with a meaningful initial residual.
    TrainConfig hold = cfg;
    hold.kinds = {SceneSpec::Kind::Translation};
    double total = 0;
    int kept = 0;
    for (unsigned i = 0; kept < n_scenes; ++i) {
        require(i < 400u, "holdout_loss: not enough in-band holdout scenes");
        Triplet tr = sample_scene(hold, seed_base + i * 977u);
        CoarseFlowConfig cf;
        cf.downscale = model.cfg.flow_downscale;
        auto est = estimate_coarse_flow(tr.i0, tr.i1, cf);
        const float res = mean_residual_px(est.first, tr.gt_f01, model.cfg.flow_downscale);
        if (res < 1.25f || res > 2.5f) continue;
        ++kept;
        Tape<float> tape;
        MrnForward<float> mrn(tape, model);
        auto loss = build_training_graph<float>(tape, mrn, model.cfg, tr.i0, tr.i1, tr.it, tr.t,
                                                est.first, est.second);
        total += tape.val(loss)[0];
    }
    return total / n_scenes;
}

inline TrainResult train_toy(MrnModel<float>& model, const TrainConfig& cfg) {
    require(cfg.iterations > 0 && cfg.batch_size > 0, "train_toy: nonpositive iterations/batch");
    require(cfg.crop % model.cfg.divisor() == 0,
            "train_toy: crop must be divisible by the model's size divisor");
    TrainResult result;
    result.initial_holdout_loss = holdout_loss(model, cfg, 12, 900001u);
    AdamState adam;
    std::vector<bool> decay_mask(model.params.count(), true);
    for (std::size_t k = 0; k < model.params.count(); ++k) {
        const auto& name = model.params.names[k];
        // no decay on biases, PReLU slopes, or alpha
        if (name.find(".b") == name.size() - 2 || name.find("prelu") != std::string::npos ||
            name == "fusion.alpha")
            decay_mask[k] = false;
    }
    std::mt19937 aug_rng(cfg.seed * 31337u + 1u);
    for (int it = 0; it < cfg.iterations; ++it) {
        std::vector<Tensor<float>> grads;
        double lc_sum = 0, lcen_sum = 0, total_sum = 0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const int draw = it * cfg.batch_size + b;
            const int idx = cfg.scene_pool > 0 ? draw % cfg.scene_pool : draw;
            Triplet tr = sample_scene(cfg, cfg.seed + static_cast<unsigned>(idx) * 131u);
            if (cfg.augment) {
                if (aug_rng() & 1u) train_detail::flip_horizontal(tr);
                if (aug_rng() & 1u) train_detail::flip_temporal(tr);
                if ((aug_rng() & 3u) == 0u) train_detail::color_jitter(tr, aug_rng);
            }
            CoarseFlowConfig cf;
            cf.downscale = model.cfg.flow_downscale;
            auto est = estimate_coarse_flow(tr.i0, tr.i1, cf);
            Tape<float> tape;
            MrnForward<float> mrn(tape, model);
            typename Tape<float>::Var lc = -1, lcen = -1;
            auto loss = build_training_graph<float>(tape, mrn, model.cfg, tr.i0, tr.i1, tr.it,
                                                    tr.t, est.first, est.second, &lc, &lcen);
            const float lv = tape.val(loss)[0];
            require(std::isfinite(lv), "train_toy: loss diverged (NaN/Inf) at iteration " +
                                           std::to_string(it));
            tape.backward(loss);
            lc_sum += tape.val(lc)[0];
            lcen_sum += tape.val(lcen)[0];
            total_sum += lv;
            const auto& pvars = mrn.param_vars();
            if (grads.empty()) {
                for (auto v : pvars) grads.push_back(tape.grad(v));
            } else {
                for (std::size_t k = 0; k < pvars.size(); ++k)
                    for (std::int64_t i = 0; i < grads[k].numel(); ++i)
                        grads[k][i] += tape.grad(pvars[k])[i];
            }
        }
        const float inv_b = 1.0f / static_cast<float>(cfg.batch_size);
        for (auto& g : grads)
            for (auto& v : g.data) v *= inv_b;
        const float lr = cfg.lr_max * 0.5f *
                         (1.0f + std::cos(static_cast<float>(M_PI) * it / cfg.iterations));
        adam_step(model.params, grads, adam, lr, cfg.weight_decay, &decay_mask);
        if (it % cfg.log_every == 0 || it == cfg.iterations - 1)
            result.log.push_back({it, lc_sum / cfg.batch_size, lcen_sum / cfg.batch_size,
                                  total_sum / cfg.batch_size});
    }
    result.final_holdout_loss = holdout_loss(model, cfg, 12, 900001u);
    return result;
}

}  // namespace m2m
