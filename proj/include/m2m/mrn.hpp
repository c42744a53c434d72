#pragma once

#include <random>

#include "m2m/autodiff.hpp"
#include "m2m/fusion.hpp"

// Motion refinement network: image feature pyramids, joint flow encoding of
// the two streams, low-rank feature modulation at the bottleneck, and a
// coarse-to-fine decoder emitting N bidirectional flow residuals plus a
// reliability map per direction. The two direction streams share all weights.

namespace m2m {

struct MrnConfig {
    int levels = 4;
    std::vector<int> channels = {16, 32, 64, 128};
    int rank = 16;        // M projectors per dimension in the LFM
    int n_flows = 4;      // N sub-motion vectors per pixel
    int flow_downscale = 4;  // coarse flow is at 1/R of the input resolution

    void validate() const {
        require(levels >= 1, "MrnConfig: levels must be >= 1");
        require(static_cast<int>(channels.size()) == levels,
                "MrnConfig: channels list length must equal levels");
        require(rank >= 1 && n_flows >= 1 && flow_downscale >= 1, "MrnConfig: bad counts");
    }

    // inputs must be padded to a multiple of this before the forward pass
    int divisor() const { return std::lcm(1 << levels, flow_downscale); }
};

template <typename S>
struct ParamStore {
    std::vector<std::string> names;
    std::vector<Tensor<S>> tensors;

    Tensor<S>& add(const std::string& name, Shape shape) {
        require(find(name) < 0, "ParamStore: duplicate name " + name);
        names.push_back(name);
        tensors.emplace_back(std::move(shape));
        return tensors.back();
    }
    int find(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return static_cast<int>(i);
        return -1;
    }
    Tensor<S>& at(const std::string& name) {
        const int i = find(name);
        require(i >= 0, "ParamStore: unknown parameter " + name);
        return tensors[static_cast<std::size_t>(i)];
    }
    const Tensor<S>& at(const std::string& name) const {
        const int i = find(name);
        require(i >= 0, "ParamStore: unknown parameter " + name);
        return tensors[static_cast<std::size_t>(i)];
    }
    std::size_t count() const { return tensors.size(); }

    template <typename T>
    ParamStore<T> cast() const {
        ParamStore<T> out;
        out.names = names;
        for (const auto& t : tensors) out.tensors.push_back(t.template cast<T>());
        return out;
    }
};

template <typename S>
struct MrnModel {
    MrnConfig cfg;
    ParamStore<S> params;

    MrnModel() = default;
    explicit MrnModel(MrnConfig c, unsigned seed = 7) : cfg(std::move(c)) {
        cfg.validate();
        std::mt19937 rng(seed);
        auto init = [&](const std::string& name, Shape sh, bool zero = false) {
            Tensor<S>& t = params.add(name, std::move(sh));
            if (zero) return;
            std::int64_t fan_in = 1;
            if (t.rank() == 4) fan_in = static_cast<std::int64_t>(t.shape[1]) * t.shape[2] * t.shape[3];
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (auto& v : t.data) v = static_cast<S>(dist(rng));
        };
        auto slopes = [&](const std::string& name, int c) {
            Tensor<S>& t = params.add(name, {c});
            std::fill(t.data.begin(), t.data.end(), S(0.25));
        };
        const auto& ch = cfg.channels;
        const int lvls = cfg.levels;
        for (int l = 1; l <= lvls; ++l) {
            const int ci = l == 1 ? 3 : ch[static_cast<std::size_t>(l - 2)];
            const int co = ch[static_cast<std::size_t>(l - 1)];
            const std::string p = "pyr" + std::to_string(l);
            init(p + ".conv1.w", {co, ci, 3, 3});
            init(p + ".conv1.b", {co});
            slopes(p + ".prelu1", co);
            init(p + ".conv2.w", {co, co, 3, 3});
            init(p + ".conv2.b", {co});
            slopes(p + ".prelu2", co);
        }
        for (int l = 0; l < lvls; ++l) {
            const int fc = l == 0 ? 3 : ch[static_cast<std::size_t>(l - 1)];
            const int mc = l == 0 ? 0 : ch[static_cast<std::size_t>(l - 1)];
            // + the 3x3 cost volume; level 0 also gets a dilation-2 one so the
            // full residual range of the quarter-resolution initial flow is
            // covered at the native scale
            const int in = 2 * (fc + mc) + 2 + (l == 0 ? 18 : 9);
            const int co = ch[static_cast<std::size_t>(l)];
            const std::string p = "jfe" + std::to_string(l);
            init(p + ".conv1.w", {co, in, 3, 3});
            init(p + ".conv1.b", {co});
            slopes(p + ".prelu1", co);
            init(p + ".conv2.w", {co, co, 3, 3});
            init(p + ".conv2.b", {co});
            slopes(p + ".prelu2", co);
        }
        const int cb = ch.back();
        init("lfm.ch.conv1.w", {cb, cb, 1, 1});
        init("lfm.ch.conv1.b", {cb});
        slopes("lfm.ch.prelu", cb);
        init("lfm.ch.conv2.w", {cfg.rank * cb, cb, 1, 1});
        init("lfm.ch.conv2.b", {cfg.rank * cb});
        for (const char* d : {"h", "w"}) {
            const std::string p = std::string("lfm.") + d;
            init(p + ".conv1.w", {8, 1, 1, 1});
            init(p + ".conv1.b", {8});
            slopes(p + ".prelu", 8);
            init(p + ".conv2.w", {cfg.rank, 8, 1, 1});
            init(p + ".conv2.b", {cfg.rank});
        }
        for (int i = lvls; i >= 1; --i) {
            const int in = i == lvls ? cb : ch[static_cast<std::size_t>(i - 1)];
            const int out = i >= 2 ? ch[static_cast<std::size_t>(i - 2)] : ch[0];
            // the finest skip carries the image plus the full-resolution cost
            // volume so the head has a short path to the alignment evidence
            const int skip = i >= 2 ? ch[static_cast<std::size_t>(i - 2)] : 3 + 18;
            const std::string p = "dec" + std::to_string(i);
            init(p + ".deconv.w", {in, out, 4, 4});
            init(p + ".deconv.b", {out});
            slopes(p + ".prelu1", out);
            init(p + ".conv.w", {out, out + skip, 3, 3});
            init(p + ".conv.b", {out});
            slopes(p + ".prelu2", out);
        }
        // near-zero head: at init the flows reduce to the upsampled initial
        // flow (residuals ~1e-4 px). An exactly zero head would leave every
        // sub-flow identical with identical gradients forever; the tiny random
        // component breaks that symmetry so the N heads can diversify.
        {
            Tensor<S>& hw = params.add("head.w", {2 * cfg.n_flows + 1, ch[0], 3, 3});
            std::uniform_real_distribution<double> hd(-1e-4, 1e-4);
            for (auto& v : hw.data) v = static_cast<S>(hd(rng));
        }
        init("head.b", {2 * cfg.n_flows + 1}, /*zero=*/true);
        init("fusion.alpha", {1}, /*zero=*/true);
        params.at("fusion.alpha")[0] = S(1);
    }

    template <typename T>
    MrnModel<T> cast() const {
        MrnModel<T> out;
        out.cfg = cfg;
        out.params = params.template cast<T>();
        return out;
    }
};

template <typename S>
struct MrnOutputVars {
    std::vector<typename Tape<S>::Var> flows01, flows10;  // N vars, each [2,H,W]
    typename Tape<S>::Var s0 = -1, s1 = -1;               // [1,H,W]
};

// One forward construction of the MRN on a tape. Parameters are registered
// as leaves so their gradients are available after backward().
template <typename S>
class MrnForward {
public:
    using Var = typename Tape<S>::Var;

    MrnForward(Tape<S>& tape, const MrnModel<S>& model) : tape_(tape), model_(model) {
        param_vars_.reserve(model.params.count());
        for (const auto& t : model.params.tensors) param_vars_.push_back(tape_.leaf(t));
    }

    Var param(const std::string& name) const {
        const int i = model_.params.find(name);
        require(i >= 0, "MrnForward: unknown parameter " + name);
        return param_vars_[static_cast<std::size_t>(i)];
    }
    const std::vector<Var>& param_vars() const { return param_vars_; }

    Var conv(const std::string& p, Var x, int stride, int pad) {
        return tape_.conv2d(x, param(p + ".w"), param(p + ".b"), stride, pad);
    }

    // Levels 0..L; level 0 is the image itself, each level halves the
    // resolution through two convs with PReLU.
    std::vector<Var> encode_pyramid(Var image) {
        const auto& sh = tape_.val(image).shape;
        require(sh[1] % (1 << model_.cfg.levels) == 0 && sh[2] % (1 << model_.cfg.levels) == 0,
                "encode_pyramid: H,W must be divisible by 2^levels, got " + shape_str(sh));
        std::vector<Var> levels{image};
        for (int l = 1; l <= model_.cfg.levels; ++l) {
            const std::string p = "pyr" + std::to_string(l);
            Var x = conv(p + ".conv1", levels.back(), 2, 1);
            x = tape_.prelu(x, param(p + ".prelu1"));
            x = conv(p + ".conv2", x, 1, 1);
            x = tape_.prelu(x, param(p + ".prelu2"));
            levels.push_back(x);
        }
        return levels;
    }

    // Resize a flow to (oh, ow) and rescale displacement magnitudes by the
    // spatial ratio.
    Var flow_at(Var coarse, int oh, int ow) {
        const int ch = tape_.val(coarse).shape[1], cw = tape_.val(coarse).shape[2];
        if (ch == oh && cw == ow) return coarse;
        Var r = tape_.resize_bilinear(coarse, oh, ow);
        return tape_.scale(r, static_cast<S>(oh) / static_cast<S>(ch));
    }

    // Channel-averaged squared differences between own features and ±1 px
    // integer shifts of the cross-warped features. The 3x3 cost surface is a
    // direct alignment readout: its argmin already points at the sub-pixel
    // residual the refinement has to regress.
    Var cost_volume(Var own, Var warped, int dil = 1) {
        const auto& sh = tape_.val(own).shape;
        const int h = sh[1], w = sh[2];
        const std::int64_t hw = static_cast<std::int64_t>(h) * w;
        std::vector<Var> cells;
        for (int dy = -dil; dy <= dil; dy += dil)
            for (int dx = -dil; dx <= dil; dx += dil) {
                Var shifted = warped;
                if (dy != 0 || dx != 0) {
                    Tensor<S> f({2, h, w});
                    for (std::int64_t i = 0; i < hw; ++i) {
                        f[i] = static_cast<S>(dx);
                        f[hw + i] = static_cast<S>(dy);
                    }
                    shifted = tape_.backward_warp(warped, tape_.leaf(f));
                }
                Var d = tape_.sub(own, shifted);
                cells.push_back(tape_.avg_pool_axes(tape_.mul(d, d), {true, false, false}));
            }
        return tape_.concat_ch(cells);
    }

    struct JfeOut {
        Var m0, m1;    // next-level motion features
        Var cv0, cv1;  // this level's cost volumes
    };

    // Cross-warp the two streams' features and encode the next level's motion
    // features; shared weights make this symmetric under stream exchange.
    // Level 0 stacks a dilation-2 cost volume on top of the ±1 px one so the
    // whole residual range of the quarter-resolution initial flow is visible.
    JfeOut jfe_step(int level, Var feat0, Var feat1, Var mot0, Var mot1, Var f01, Var f10) {
        require(tape_.val(feat0).shape[1] == tape_.val(f01).shape[1],
                "jfe_step: feature/flow resolution mismatch");
        auto pack = [&](Var feat, Var mot) {
            return mot < 0 ? feat : tape_.concat_ch({feat, mot});
        };
        const Var s0 = pack(feat0, mot0);
        const Var s1 = pack(feat1, mot1);
        const Var w0 = tape_.backward_warp(s1, f01);  // stream 0 sees 1 warped toward it
        const Var w1 = tape_.backward_warp(s0, f10);
        Var cv0 = cost_volume(s0, w0);
        Var cv1 = cost_volume(s1, w1);
        if (level == 0) {
            cv0 = tape_.concat_ch({cv0, cost_volume(s0, w0, 2)});
            cv1 = tape_.concat_ch({cv1, cost_volume(s1, w1, 2)});
        }
        const std::string p = "jfe" + std::to_string(level);
        auto run = [&](Var own, Var warped, Var cv, Var flow) {
            Var x = tape_.concat_ch({own, warped, cv, flow});
            x = conv(p + ".conv1", x, 1, 1);
            x = tape_.prelu(x, param(p + ".prelu1"));
            x = conv(p + ".conv2", x, 2, 1);
            return tape_.prelu(x, param(p + ".prelu2"));
        };
        return {run(s0, w0, cv0, f01), run(s1, w1, cv1, f10), cv0, cv1};
    }

    // Modulate x by the pointwise average of M rank-1 tensors built from
    // sigmoid-gated channel/height/width projections.
    Var low_rank_modulate(Var x) {
        const auto& sh = tape_.val(x).shape;
        const int c = sh[0], h = sh[1], w = sh[2], m = model_.cfg.rank;
        require(m >= 1, "low_rank_modulate: rank must be >= 1");
        Var cp = tape_.avg_pool_axes(x, {false, true, true});  // [C,1,1]
        cp = conv("lfm.ch.conv1", cp, 1, 0);
        cp = tape_.prelu(cp, param("lfm.ch.prelu"));
        cp = tape_.sigmoid_(conv("lfm.ch.conv2", cp, 1, 0));  // [M*C,1,1]
        Var hp = tape_.avg_pool_axes(x, {true, false, true});  // [1,H,1]
        hp = conv("lfm.h.conv1", hp, 1, 0);
        hp = tape_.prelu(hp, param("lfm.h.prelu"));
        hp = tape_.sigmoid_(conv("lfm.h.conv2", hp, 1, 0));  // [M,H,1]
        Var wp = tape_.avg_pool_axes(x, {true, true, false});  // [1,1,W]
        wp = tape_.reshape(wp, {1, w, 1});
        wp = conv("lfm.w.conv1", wp, 1, 0);
        wp = tape_.prelu(wp, param("lfm.w.prelu"));
        wp = tape_.sigmoid_(conv("lfm.w.conv2", wp, 1, 0));  // [M,W,1]
        Var acc = -1;
        for (int i = 0; i < m; ++i) {
            Var u = tape_.slice_ch(cp, i * c, c);
            Var v = tape_.slice_ch(hp, i, 1);
            Var ww = tape_.slice_ch(wp, i, 1);
            Var k = tape_.kron3(u, v, ww);
            acc = acc < 0 ? k : tape_.add(acc, k);
        }
        acc = tape_.scale(acc, S(1) / static_cast<S>(m));
        return tape_.mul(x, acc);
    }

    // Coarse-to-fine decoding of one direction's motion pyramid into the
    // [2N+1]-channel head output at full resolution.
    Var decode(const std::vector<Var>& mot, const std::vector<Var>& feats, Var cv0) {
        // the deepest appearance features share the bottleneck shape with the
        // deepest motion features; merge them before modulation
        Var d = low_rank_modulate(tape_.add(mot.back(), feats.back()));
        for (int i = model_.cfg.levels; i >= 1; --i) {
            const std::string p = "dec" + std::to_string(i);
            d = tape_.conv_transpose2d(d, param(p + ".deconv.w"), param(p + ".deconv.b"), 2, 1);
            d = tape_.prelu(d, param(p + ".prelu1"));
            const Var skip = i >= 2 ? mot[static_cast<std::size_t>(i - 2)]
                                    : tape_.concat_ch({feats[0], cv0});
            d = conv(p + ".conv", tape_.concat_ch({d, skip}), 1, 1);
            d = tape_.prelu(d, param(p + ".prelu2"));
        }
        return tape_.conv2d(d, param("head.w"), param("head.b"), 1, 1);
    }

    MrnOutputVars<S> run(Var i0, Var i1, Var f01_coarse, Var f10_coarse) {
        const auto& sh = tape_.val(i0).shape;
        require(sh == tape_.val(i1).shape, "mrn_forward: frame size mismatch");
        const int h = sh[1], w = sh[2];
        const int lvls = model_.cfg.levels, n = model_.cfg.n_flows;
        auto feats0 = encode_pyramid(i0);
        auto feats1 = encode_pyramid(i1);
        std::vector<Var> mot0, mot1;  // levels 1..L
        Var cv0_0 = -1, cv0_1 = -1;   // full-resolution cost volumes
        for (int l = 0; l < lvls; ++l) {
            const int hl = h >> l, wl = w >> l;
            const Var f01 = flow_at(f01_coarse, hl, wl);
            const Var f10 = flow_at(f10_coarse, hl, wl);
            const Var m0 = l == 0 ? -1 : mot0.back();
            const Var m1 = l == 0 ? -1 : mot1.back();
            auto jo = jfe_step(l, feats0[static_cast<std::size_t>(l)],
                               feats1[static_cast<std::size_t>(l)], m0, m1, f01, f10);
            mot0.push_back(jo.m0);
            mot1.push_back(jo.m1);
            if (l == 0) {
                cv0_0 = jo.cv0;
                cv0_1 = jo.cv1;
            }
        }
        const Var head0 = decode(mot0, feats0, cv0_0);
        const Var head1 = decode(mot1, feats1, cv0_1);
        const Var base01 = flow_at(f01_coarse, h, w);
        const Var base10 = flow_at(f10_coarse, h, w);
        MrnOutputVars<S> out;
        for (int k = 0; k < n; ++k) {
            out.flows01.push_back(tape_.add(base01, tape_.slice_ch(head0, 2 * k, 2)));
            out.flows10.push_back(tape_.add(base10, tape_.slice_ch(head1, 2 * k, 2)));
        }
        out.s0 = tape_.slice_ch(head0, 2 * n, 1);
        out.s1 = tape_.slice_ch(head1, 2 * n, 1);
        return out;
    }

private:
    Tape<S>& tape_;
    const MrnModel<S>& model_;
    std::vector<Var> param_vars_;
};

// ---- checkpoint container ----

namespace detail {
inline void ckpt_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint32_t ckpt_read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    require(bool(is), "checkpoint: truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
}  // namespace detail

inline void save_checkpoint(const std::string& path, const MrnModel<float>& model) {
    std::ofstream os(path, std::ios::binary);
    require(bool(os), "checkpoint: cannot open " + path + " for writing");
    os.write("M2MW", 4);
    detail::ckpt_u32(os, 1);  // version
    detail::ckpt_u32(os, static_cast<std::uint32_t>(model.cfg.levels));
    for (int c : model.cfg.channels) detail::ckpt_u32(os, static_cast<std::uint32_t>(c));
    detail::ckpt_u32(os, static_cast<std::uint32_t>(model.cfg.rank));
    detail::ckpt_u32(os, static_cast<std::uint32_t>(model.cfg.n_flows));
    detail::ckpt_u32(os, static_cast<std::uint32_t>(model.cfg.flow_downscale));
    for (std::size_t i = 0; i < model.params.count(); ++i) {
        const std::string& name = model.params.names[i];
        const Tensor<float>& t = model.params.tensors[i];
        const auto len = static_cast<std::uint16_t>(name.size());
        unsigned char lb[2] = {static_cast<unsigned char>(len), static_cast<unsigned char>(len >> 8)};
        os.write(reinterpret_cast<const char*>(lb), 2);
        os.write(name.data(), len);
        detail::ckpt_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (int e : t.shape) detail::ckpt_u32(os, static_cast<std::uint32_t>(e));
        for (float v : t.data) {
            std::uint32_t u;
            std::memcpy(&u, &v, 4);
            detail::ckpt_u32(os, u);
        }
    }
    require(bool(os), "checkpoint: write failed for " + path);
}

inline MrnModel<float> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(bool(is), "checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    require(bool(is) && std::memcmp(magic, "M2MW", 4) == 0, "checkpoint: bad magic in " + path);
    require(detail::ckpt_read_u32(is) == 1, "checkpoint: unsupported version");
    MrnConfig cfg;
    cfg.levels = static_cast<int>(detail::ckpt_read_u32(is));
    require(cfg.levels >= 1 && cfg.levels <= 16, "checkpoint: implausible level count");
    cfg.channels.resize(static_cast<std::size_t>(cfg.levels));
    for (auto& c : cfg.channels) c = static_cast<int>(detail::ckpt_read_u32(is));
    cfg.rank = static_cast<int>(detail::ckpt_read_u32(is));
    cfg.n_flows = static_cast<int>(detail::ckpt_read_u32(is));
    cfg.flow_downscale = static_cast<int>(detail::ckpt_read_u32(is));
    MrnModel<float> model(cfg);
    std::size_t loaded = 0;
    while (true) {
        unsigned char lb[2];
        is.read(reinterpret_cast<char*>(lb), 2);
        if (!is) break;
        const std::uint16_t len = static_cast<std::uint16_t>(lb[0] | (lb[1] << 8));
        std::string name(len, '\0');
        is.read(name.data(), len);
        require(bool(is), "checkpoint: truncated name");
        const auto rank = static_cast<int>(detail::ckpt_read_u32(is));
        Shape sh(static_cast<std::size_t>(rank));
        for (auto& e : sh) e = static_cast<int>(detail::ckpt_read_u32(is));
        Tensor<float>& dst = model.params.at(name);
        require(dst.shape == sh, "checkpoint: shape mismatch for " + name);
        for (auto& v : dst.data) {
            const std::uint32_t u = detail::ckpt_read_u32(is);
            std::memcpy(&v, &u, 4);
        }
        ++loaded;
    }
    require(loaded == model.params.count(), "checkpoint: missing parameters in " + path);
    return model;
}

}  // namespace m2m
