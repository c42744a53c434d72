#pragma once

#include "m2m/warp.hpp"

// Pyramidal block-matching fallback for the initial bidirectional flow when
// no external .flo pair is supplied. SAD cost over blocks, coarse-to-fine,
// deterministic tie-breaking toward the smallest displacement.

namespace m2m {

struct CoarseFlowConfig {
    int pyramid_levels = 3;
    int block_size = 8;
    int search_radius = 4;   // per level, in pixels
    int downscale = 4;       // output flow resolution is 1/downscale of input

    void validate() const {
        require(block_size >= 4, "CoarseFlowConfig: block size must be >= 4");
        require(search_radius >= 1, "CoarseFlowConfig: search radius must be >= 1");
        require(pyramid_levels >= 1 && downscale >= 1, "CoarseFlowConfig: bad counts");
    }
};

namespace detail {

template <typename S>
Tensor<S> downsample2(const Tensor<S>& x) {
    const int c = x.shape[0], h = x.shape[1] / 2, w = x.shape[2] / 2;
    Tensor<S> y({c, std::max(h, 1), std::max(w, 1)});
    for (int ch = 0; ch < c; ++ch)
        for (int yy = 0; yy < y.shape[1]; ++yy)
            for (int xx = 0; xx < y.shape[2]; ++xx) {
                const int sy = std::min(2 * yy, x.shape[1] - 2);
                const int sx = std::min(2 * xx, x.shape[2] - 2);
                y.at(ch, yy, xx) = (x.at(ch, sy, sx) + x.at(ch, sy, sx + 1) +
                                    x.at(ch, sy + 1, sx) + x.at(ch, sy + 1, sx + 1)) /
                                   S(4);
            }
    return y;
}

template <typename S>
Tensor<S> downsample_by(const Tensor<S>& x, int factor) {
    Tensor<S> y = x;
    for (int f = 1; f < factor; f *= 2) y = downsample2(y);
    return y;
}

// SAD between a block at (by,bx) in a and the block displaced by (du,dv) in b;
// out-of-frame target samples clamp to the border.
template <typename S>
double block_sad(const Tensor<S>& a, const Tensor<S>& b, int by, int bx, int bs, int du, int dv) {
    const int h = a.shape[1], w = a.shape[2];
    double cost = 0;
    for (int c = 0; c < a.shape[0]; ++c)
        for (int y = 0; y < bs; ++y)
            for (int x = 0; x < bs; ++x) {
                const int ay = std::min(by + y, h - 1), ax = std::min(bx + x, w - 1);
                const int ty = std::min(std::max(ay + dv, 0), h - 1);
                const int tx = std::min(std::max(ax + du, 0), w - 1);
                cost += std::abs(static_cast<double>(a.at(c, ay, ax)) - b.at(c, ty, tx));
            }
    return cost;
}

// One direction at one pyramid level; prior carries the upsampled coarser
// estimate (integer part) per pixel.
template <typename S>
FlowField<S> match_level(const Tensor<S>& a, const Tensor<S>& b, const FlowField<S>* prior,
                         const CoarseFlowConfig& cfg, int bs) {
    const int h = a.shape[1], w = a.shape[2], r = cfg.search_radius;
    FlowField<S> out(h, w);
    for (int by = 0; by < h; by += bs)
        for (int bx = 0; bx < w; bx += bs) {
            int pu = 0, pv = 0;
            if (prior) {
                pu = static_cast<int>(std::lround(prior->u(by, bx)));
                pv = static_cast<int>(std::lround(prior->v(by, bx)));
            }
            double best = 0;
            int bu = pu, bv = pv;
            bool first = true;
            for (int dv = -r; dv <= r; ++dv)
                for (int du = -r; du <= r; ++du) {
                    const int cu = pu + du, cv = pv + dv;
                    const double cost = block_sad(a, b, by, bx, bs, cu, cv);
                    bool take = first || cost < best;
                    if (!take && cost == best) {
                        // toward the smallest magnitude, then lexicographic (u, v)
                        const long m0 = static_cast<long>(bu) * bu + static_cast<long>(bv) * bv;
                        const long m1 = static_cast<long>(cu) * cu + static_cast<long>(cv) * cv;
                        take = m1 < m0 || (m1 == m0 && (cu < bu || (cu == bu && cv < bv)));
                    }
                    if (take) {
                        best = cost;
                        bu = cu;
                        bv = cv;
                        first = false;
                    }
                }
            for (int y = by; y < std::min(by + bs, h); ++y)
                for (int x = bx; x < std::min(bx + bs, w); ++x) {
                    out.u(y, x) = static_cast<S>(bu);
                    out.v(y, x) = static_cast<S>(bv);
                }
        }
    return out;
}

template <typename S>
FlowField<S> estimate_one_direction(const Tensor<S>& a, const Tensor<S>& b,
                                    const CoarseFlowConfig& cfg) {
    std::vector<Tensor<S>> pa{a}, pb{b};
    for (int l = 1; l < cfg.pyramid_levels; ++l) {
        // stop before a level gets smaller than one block: matching a clamped
        // fragment against itself yields junk the finer levels cannot undo
        const Tensor<S>& prev = pa.back();
        if (std::min(prev.shape[1], prev.shape[2]) / 2 < cfg.block_size) break;
        pa.push_back(downsample2(pa.back()));
        pb.push_back(downsample2(pb.back()));
    }
    FlowField<S> flow;
    const int levels = static_cast<int>(pa.size());
    for (int l = levels - 1; l >= 0; --l) {
        const Tensor<S>& la = pa[static_cast<std::size_t>(l)];
        // coarser levels keep full blocks for noise robustness (their errors
        // become priors); the finest level shrinks blocks on small grids so
        // spatially varying flow keeps >= 3 independent blocks per side
        const int bs = l > 0 ? cfg.block_size
                             : std::max(4, std::min(cfg.block_size,
                                                    std::min(la.shape[1], la.shape[2]) / 3));
        if (l == levels - 1) {
            flow = match_level(la, pb[static_cast<std::size_t>(l)],
                               static_cast<const FlowField<S>*>(nullptr), cfg, bs);
        } else {
            Tensor<S> up = resize_bilinear_fwd(flow.uv, la.shape[1], la.shape[2]);
            for (auto& v : up.data) v *= S(2);
            FlowField<S> prior(std::move(up));
            flow = match_level(la, pb[static_cast<std::size_t>(l)], &prior, cfg, bs);
        }
    }
    return flow;
}

}  // namespace detail

template <typename S>
std::pair<FlowField<S>, FlowField<S>> estimate_coarse_flow(const Tensor<S>& i0, const Tensor<S>& i1,
                                                           const CoarseFlowConfig& cfg = {}) {
    cfg.validate();
    require(i0.same_shape(i1), "estimate_coarse_flow: image size mismatch");
    Tensor<S> a = detail::downsample_by(i0, cfg.downscale);
    Tensor<S> b = detail::downsample_by(i1, cfg.downscale);
    const int min_side = std::min(a.shape[1], a.shape[2]);
    require(min_side >= 4, "estimate_coarse_flow: images too small for the pyramid");
    return {detail::estimate_one_direction(a, b, cfg), detail::estimate_one_direction(b, a, cfg)};
}

}  // namespace m2m
