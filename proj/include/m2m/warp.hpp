#pragma once

#include "m2m/kernels.hpp"

namespace m2m {

// Displacement field in pixel units, [2,H,W]; channel 0 is dx (u), channel 1
// is dy (v), added to a source pixel's coordinates to land in the target frame.
template <typename S>
struct FlowField {
    Tensor<S> uv;

    FlowField() = default;
    explicit FlowField(Tensor<S> t) : uv(std::move(t)) {
        require(uv.rank() == 3 && uv.shape[0] == 2, "FlowField: expected [2,H,W]");
        validate();
    }
    FlowField(int h, int w) : uv(Tensor<S>({2, h, w})) {}

    int height() const { return uv.shape[1]; }
    int width() const { return uv.shape[2]; }
    S& u(int y, int x) { return uv.at(0, y, x); }
    S& v(int y, int x) { return uv.at(1, y, x); }
    S u(int y, int x) const { return uv.at(0, y, x); }
    S v(int y, int x) const { return uv.at(1, y, x); }

    void validate() const {
        require(uv.all_finite(), "FlowField: non-finite displacement");
        const S bound = static_cast<S>(std::max(height(), width())) * S(4);
        for (S d : uv.data)
            require(std::abs(d) <= bound, "FlowField: displacement exceeds sanity bound");
    }
};

template <typename S>
struct MultiFlowField {
    std::vector<FlowField<S>> fields;

    MultiFlowField() = default;
    explicit MultiFlowField(std::vector<FlowField<S>> f) : fields(std::move(f)) {
        require(!fields.empty(), "MultiFlowField: need at least one field");
        for (const auto& fl : fields)
            require(fl.height() == fields[0].height() && fl.width() == fields[0].width(),
                    "MultiFlowField: mismatched field sizes");
    }

    int n_flows() const { return static_cast<int>(fields.size()); }

    // Per-pixel arithmetic mean of the N sub-motion fields.
    FlowField<S> mean() const {
        FlowField<S> m(fields[0].height(), fields[0].width());
        for (const auto& f : fields)
            for (std::int64_t i = 0; i < m.uv.numel(); ++i) m.uv[i] += f.uv[i];
        const S inv = S(1) / static_cast<S>(fields.size());
        for (auto& v : m.uv.data) v *= inv;
        return m;
    }
};

// Motion scaling to the intermediate time t: vectors from frame 0 scale by t,
// vectors from frame 1 by (1-t).
template <typename S>
MultiFlowField<S> scale_flow(const MultiFlowField<S>& f, S t, int source) {
    require(t >= S(0) && t <= S(1), "scale_flow: t must lie in [0,1]");
    require(source == 0 || source == 1, "scale_flow: source must be 0 or 1");
    const S k = source == 0 ? t : S(1) - t;
    MultiFlowField<S> out = f;
    for (auto& fl : out.fields)
        for (auto& v : fl.uv.data) v *= k;
    return out;
}

template <typename S>
Tensor<S> backward_warp(const Tensor<S>& x, const FlowField<S>& f) {
    return backward_warp_fwd(x, f.uv);
}

// Numerator/denominator accumulator of the softmax fusion, pre-division.
template <typename S>
struct SplatAccumulator {
    Tensor<S> numerator;    // [C,H,W]
    Tensor<S> denominator;  // [H,W]
    Tensor<S> max_weight;   // [H,W], diagnostic

    SplatAccumulator(int channels, int h, int w)
        : numerator({channels, h, w}), denominator({h, w}), max_weight({h, w}) {}
};

template <typename S>
void splat_forward(const Tensor<S>& colors, const Tensor<S>& weights, const FlowField<S>& f,
                   SplatAccumulator<S>& acc) {
    Tensor<S> packed = splat_fwd(colors, weights, f.uv);
    const int c = colors.shape[0];
    const std::int64_t hw = acc.denominator.numel();
    for (std::int64_t i = 0; i < hw * c; ++i) acc.numerator[i] += packed[i];
    for (std::int64_t i = 0; i < hw; ++i) {
        acc.denominator[i] += packed[c * hw + i];
        acc.max_weight[i] = std::max(acc.max_weight[i], packed[c * hw + i]);
    }
}

}  // namespace m2m
