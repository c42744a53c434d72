#pragma once

#include <deque>

#include "m2m/warp.hpp"

namespace m2m {

template <typename S>
struct ReliabilityMap {
    Tensor<S> s;  // [H,W], unbounded learned scores
};

template <typename S>
struct FusionParams {
    S alpha = S(1);  // learnable weight scale of the softmax fusion
};

constexpr double kHoleEps = 1e-8;

using HoleMask = Tensor<unsigned char>;  // 1 = hole (empty denominator)

// Linear time-proximity weights: r0 for pixels from I0, r1 for pixels from I1.
template <typename S>
std::pair<S, S> temporal_relevance(S t) {
    require(t >= S(0) && t <= S(1), "temporal_relevance: t must lie in [0,1]");
    return {S(1) - t, t};
}

// Negated per-pixel L1 photometric error against the cross-warped counterpart,
// summed over color channels. Always <= 0; strongly negative marks occlusion.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> brightness_consistency(const Tensor<S>& i0, const Tensor<S>& i1,
                                                       const FlowField<S>& f01,
                                                       const FlowField<S>& f10) {
    require(i0.same_shape(i1), "brightness_consistency: frame size mismatch");
    require(i0.shape[1] == f01.height() && i0.shape[2] == f01.width(),
            "brightness_consistency: flow size mismatch");
    const int h = i0.shape[1], w = i0.shape[2], c = i0.shape[0];
    Tensor<S> w1 = backward_warp(i1, f01);
    Tensor<S> w0 = backward_warp(i0, f10);
    Tensor<S> b0({h, w}), b1({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            S d0 = S(0), d1 = S(0);
            for (int ch = 0; ch < c; ++ch) {
                d0 += std::abs(i0.at(ch, y, x) - w1.at(ch, y, x));
                d1 += std::abs(i1.at(ch, y, x) - w0.at(ch, y, x));
            }
            b0[static_cast<std::int64_t>(y) * w + x] = -d0;
            b1[static_cast<std::int64_t>(y) * w + x] = -d1;
        }
    return {std::move(b0), std::move(b1)};
}

// Per-pixel fusion weight map w = exp(b * s * alpha) * r, applied to a source
// frame before splatting; one b and s per pixel shared by its N sub-motions.
template <typename S>
Tensor<S> fusion_weights(const Tensor<S>& b, const Tensor<S>& s, S alpha, S r) {
    require(b.numel() == s.numel(), "fusion_weights: b/s size mismatch");
    Tensor<S> w = b;
    for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = std::exp(b[i] * s[i] * alpha) * r;
    return w;
}

// Seal the accumulator: divide where the denominator carries weight, mark the
// rest as holes.
template <typename S>
std::pair<Tensor<S>, HoleMask> fuse(const SplatAccumulator<S>& acc) {
    const int c = acc.numerator.shape[0];
    const std::int64_t hw = acc.denominator.numel();
    Tensor<S> out(acc.numerator.shape);
    HoleMask holes(acc.denominator.shape);
    for (std::int64_t i = 0; i < hw; ++i) {
        const S d = acc.denominator[i];
        if (d > static_cast<S>(kHoleEps)) {
            for (int ch = 0; ch < c; ++ch) out[ch * hw + i] = acc.numerator[ch * hw + i] / d;
        } else {
            holes[i] = 1;
        }
    }
    return {std::move(out), std::move(holes)};
}

inline double count_holes(const HoleMask& holes) {
    double n = 0;
    for (auto v : holes.data) n += v ? 1 : 0;
    return n;
}

// Fill hole pixels by blending backward warps of the inputs under an
// approximate t-frame flow. The t-frame flows are obtained by splatting the
// negated scaled flows; holes inherit the nearest covered pixel's vectors.
template <typename S>
Tensor<S> fill_holes(const Tensor<S>& it, const HoleMask& holes, const Tensor<S>& i0,
                     const Tensor<S>& i1, const FlowField<S>& f01, const FlowField<S>& f10, S t) {
    const int h = it.shape[1], w = it.shape[2];
    bool any = false;
    for (auto v : holes.data) any |= (v != 0);
    if (!any) return it;

    // Splat -t*F01 from frame 0 and -(1-t)*F10 from frame 1; fused values
    // approximate F_{t->0} and F_{t->1} at covered pixels.
    Tensor<S> unit({h, w}, S(1));
    auto splat_neg_flow = [&](const FlowField<S>& f, S k) {
        Tensor<S> scaled = f.uv;
        for (auto& v : scaled.data) v *= k;
        Tensor<S> neg = scaled;
        for (auto& v : neg.data) v = -v;
        Tensor<S> packed = splat_fwd(neg, unit, scaled);
        FlowField<S> ft(h, w);
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i) {
            const S d = packed[2 * static_cast<std::int64_t>(h) * w + i];
            if (d > static_cast<S>(kHoleEps)) {
                ft.uv[i] = packed[i] / d;
                ft.uv[static_cast<std::int64_t>(h) * w + i] =
                    packed[static_cast<std::int64_t>(h) * w + i] / d;
            }
        }
        return ft;
    };
    FlowField<S> ft0 = splat_neg_flow(f01, t);
    FlowField<S> ft1 = splat_neg_flow(f10, S(1) - t);

    // Nearest covered pixel per hole, multi-source BFS in raster tie order.
    std::vector<std::int32_t> nearest(static_cast<std::size_t>(h) * w, -1);
    std::deque<std::int32_t> q;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (!holes[static_cast<std::int64_t>(y) * w + x]) {
                const std::int32_t i = y * w + x;
                nearest[static_cast<std::size_t>(i)] = i;
                q.push_back(i);
            }
    const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
    while (!q.empty()) {
        const std::int32_t i = q.front();
        q.pop_front();
        const int y = i / w, x = i % w;
        for (int k = 0; k < 4; ++k) {
            const int ny = y + dy[k], nx = x + dx[k];
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            auto& slot = nearest[static_cast<std::size_t>(ny) * w + nx];
            if (slot < 0) {
                slot = nearest[static_cast<std::size_t>(i)];
                q.push_back(ny * w + nx);
            }
        }
    }

    Tensor<S> out = it;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!holes[static_cast<std::int64_t>(y) * w + x]) continue;
            S fx0 = static_cast<S>(x), fy0 = static_cast<S>(y);
            S fx1 = fx0, fy1 = fy0;
            const std::int32_t src = nearest[static_cast<std::size_t>(y) * w + x];
            if (src >= 0) {
                const int sy = src / w, sx = src % w;
                fx0 += ft0.u(sy, sx);
                fy0 += ft0.v(sy, sx);
                fx1 += ft1.u(sy, sx);
                fy1 += ft1.v(sy, sx);
            }
            for (int ch = 0; ch < it.shape[0]; ++ch) {
                const S c0 = bilinear_sample(i0, ch, fx0, fy0);
                const S c1 = bilinear_sample(i1, ch, fx1, fy1);
                out.at(ch, y, x) = (S(1) - t) * c0 + t * c1;
            }
        }
    return out;
}

}  // namespace m2m
