#pragma once

#include <cmath>

#include "m2m/tensor.hpp"

// Forward and hand-derived backward kernels shared by the autodiff tape and
// the inference-only paths. All loops run in deterministic raster order.

namespace m2m {

template <typename S>
struct ConvLayer {
    Tensor<S> weights;  // [C_out, C_in, k, k]
    Tensor<S> bias;     // [C_out]
    int stride = 1;
    int padding = 0;
};

inline int conv_out_extent(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// Cross-correlation, zero padding.
template <typename S>
Tensor<S> conv2d_fwd(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int stride,
                     int pad) {
    require(x.rank() == 3, "conv2d: input must be [C,H,W], got " + shape_str(x.shape));
    require(w.rank() == 4, "conv2d: weights must be [Co,Ci,k,k], got " + shape_str(w.shape));
    const int ci = x.shape[0], h = x.shape[1], wd = x.shape[2];
    const int co = w.shape[0], k = w.shape[2];
    require(w.shape[1] == ci, "conv2d: channel mismatch, input " + shape_str(x.shape) +
                                  " vs weights " + shape_str(w.shape));
    require(b.numel() == co, "conv2d: bias size mismatch");
    const int oh = conv_out_extent(h, k, stride, pad);
    const int ow = conv_out_extent(wd, k, stride, pad);
    require(oh > 0 && ow > 0, "conv2d: empty output for input " + shape_str(x.shape));
    Tensor<S> y({co, oh, ow});
    for (int o = 0; o < co; ++o) {
        for (int yy = 0; yy < oh; ++yy) {
            for (int xx = 0; xx < ow; ++xx) {
                S acc = b[o];
                for (int c = 0; c < ci; ++c) {
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = yy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        const S* xrow = &x.at(c, iy, 0);
                        const S* wrow = &w.data[((static_cast<std::size_t>(o) * ci + c) * k + ky) * k];
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = xx * stride - pad + kx;
                            if (ix < 0 || ix >= wd) continue;
                            acc += xrow[ix] * wrow[kx];
                        }
                    }
                }
                y.at(o, yy, xx) = acc;
            }
        }
    }
    return y;
}

// Gradient of conv2d w.r.t. its input; also the forward pass of the
// transposed convolution (shared weight layout [Co,Ci,k,k] maps Co -> Ci).
template <typename S>
Tensor<S> conv2d_input_grad(const Tensor<S>& gy, const Tensor<S>& w, int stride, int pad, int in_h,
                            int in_w) {
    const int co = w.shape[0], ci = w.shape[1], k = w.shape[2];
    require(gy.shape[0] == co, "conv_transpose2d: channel mismatch, input " + shape_str(gy.shape) +
                                   " vs weights " + shape_str(w.shape));
    Tensor<S> gx({ci, in_h, in_w});
    const int oh = gy.shape[1], ow = gy.shape[2];
    for (int o = 0; o < co; ++o) {
        for (int yy = 0; yy < oh; ++yy) {
            for (int xx = 0; xx < ow; ++xx) {
                const S g = gy.at(o, yy, xx);
                if (g == S(0)) continue;
                for (int c = 0; c < ci; ++c) {
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = yy * stride - pad + ky;
                        if (iy < 0 || iy >= in_h) continue;
                        const S* wrow = &w.data[((static_cast<std::size_t>(o) * ci + c) * k + ky) * k];
                        S* xrow = &gx.at(c, iy, 0);
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = xx * stride - pad + kx;
                            if (ix < 0 || ix >= in_w) continue;
                            xrow[ix] += g * wrow[kx];
                        }
                    }
                }
            }
        }
    }
    return gx;
}

template <typename S>
void conv2d_param_grad(const Tensor<S>& x, const Tensor<S>& gy, int stride, int pad, Tensor<S>& gw,
                       Tensor<S>& gb) {
    const int ci = x.shape[0], h = x.shape[1], wd = x.shape[2];
    const int co = gy.shape[0], oh = gy.shape[1], ow = gy.shape[2];
    const int k = gw.shape[2];
    for (int o = 0; o < co; ++o) {
        for (int yy = 0; yy < oh; ++yy) {
            for (int xx = 0; xx < ow; ++xx) {
                const S g = gy.at(o, yy, xx);
                if (g == S(0)) continue;
                gb[o] += g;
                for (int c = 0; c < ci; ++c) {
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = yy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        const S* xrow = &x.at(c, iy, 0);
                        S* wrow = &gw.data[((static_cast<std::size_t>(o) * ci + c) * k + ky) * k];
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = xx * stride - pad + kx;
                            if (ix < 0 || ix >= wd) continue;
                            wrow[kx] += g * xrow[ix];
                        }
                    }
                }
            }
        }
    }
}

inline int conv_transpose_out_extent(int in, int k, int stride, int pad) {
    return (in - 1) * stride - 2 * pad + k;
}

// Transposed convolution: exact adjoint of conv2d for the same [Co,Ci,k,k]
// weights, plus a bias over the Ci output channels.
template <typename S>
Tensor<S> conv_transpose2d_fwd(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                               int stride, int pad) {
    require(x.rank() == 3 && w.rank() == 4, "conv_transpose2d: bad ranks");
    const int oh = conv_transpose_out_extent(x.shape[1], w.shape[2], stride, pad);
    const int ow = conv_transpose_out_extent(x.shape[2], w.shape[3], stride, pad);
    require(oh > 0 && ow > 0, "conv_transpose2d: empty output");
    require(b.numel() == w.shape[1], "conv_transpose2d: bias size mismatch");
    Tensor<S> y = conv2d_input_grad(x, w, stride, pad, oh, ow);
    for (int c = 0; c < y.shape[0]; ++c)
        for (int yy = 0; yy < oh; ++yy)
            for (int xx = 0; xx < ow; ++xx) y.at(c, yy, xx) += b[c];
    return y;
}

// Mean over the axes flagged in `collapse` (size == rank); kept axes retain
// their extent, collapsed axes become 1. Only rank-3 is needed here.
template <typename S>
Tensor<S> avg_pool_axes_fwd(const Tensor<S>& x, const std::vector<bool>& collapse) {
    require(x.rank() == 3 && collapse.size() == 3, "avg_pool_axes: rank-3 only");
    require(collapse[0] || collapse[1] || collapse[2], "avg_pool_axes: empty axis set");
    Shape os(3);
    for (int a = 0; a < 3; ++a) os[a] = collapse[a] ? 1 : x.shape[a];
    Tensor<S> y(os);
    for (int c = 0; c < x.shape[0]; ++c)
        for (int yy = 0; yy < x.shape[1]; ++yy)
            for (int xx = 0; xx < x.shape[2]; ++xx)
                y.at(collapse[0] ? 0 : c, collapse[1] ? 0 : yy, collapse[2] ? 0 : xx) +=
                    x.at(c, yy, xx);
    const S inv = S(1) / static_cast<S>(x.numel() / y.numel());
    for (auto& v : y.data) v *= inv;
    return y;
}

// T[c,h,w] = u[c] * v[h] * w[w]; accepts [C]/[C,1,1] style operands.
template <typename S>
Tensor<S> kron3_fwd(const Tensor<S>& u, const Tensor<S>& v, const Tensor<S>& w) {
    require(u.numel() > 0 && v.numel() > 0 && w.numel() > 0, "kron3: empty operand");
    const int c = static_cast<int>(u.numel()), h = static_cast<int>(v.numel()),
              wd = static_cast<int>(w.numel());
    Tensor<S> t({c, h, wd});
    for (int i = 0; i < c; ++i)
        for (int j = 0; j < h; ++j) {
            const S uv = u[i] * v[j];
            for (int l = 0; l < wd; ++l) t.at(i, j, l) = uv * w[l];
        }
    return t;
}

// Bilinear sample with clamped border coordinates. Returns value and, if
// requested, d(value)/d(x-coord) and d(value)/d(y-coord).
template <typename S>
inline S bilinear_sample(const Tensor<S>& img, int c, S fx, S fy, S* dvx = nullptr,
                         S* dvy = nullptr) {
    const int h = img.shape[1], w = img.shape[2];
    fx = std::min(std::max(fx, S(0)), static_cast<S>(w - 1));
    fy = std::min(std::max(fy, S(0)), static_cast<S>(h - 1));
    const int x0 = std::min(static_cast<int>(std::floor(fx)), w - 2 < 0 ? 0 : w - 2);
    const int y0 = std::min(static_cast<int>(std::floor(fy)), h - 2 < 0 ? 0 : h - 2);
    const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    const S ax = fx - static_cast<S>(x0), ay = fy - static_cast<S>(y0);
    const S v00 = img.at(c, y0, x0), v01 = img.at(c, y0, x1);
    const S v10 = img.at(c, y1, x0), v11 = img.at(c, y1, x1);
    if (dvx) *dvx = (S(1) - ay) * (v01 - v00) + ay * (v11 - v10);
    if (dvy) *dvy = (S(1) - ax) * (v10 - v00) + ax * (v11 - v01);
    return (S(1) - ay) * ((S(1) - ax) * v00 + ax * v01) + ay * ((S(1) - ax) * v10 + ax * v11);
}

// out(i) = x sampled at i + f(i); flow is [2,H,W] with channel 0 = dx.
template <typename S>
Tensor<S> backward_warp_fwd(const Tensor<S>& x, const Tensor<S>& flow) {
    require(flow.rank() == 3 && flow.shape[0] == 2, "backward_warp: flow must be [2,H,W]");
    require(x.rank() == 3 && x.shape[1] == flow.shape[1] && x.shape[2] == flow.shape[2],
            "backward_warp: size mismatch " + shape_str(x.shape) + " vs " + shape_str(flow.shape));
    Tensor<S> y(x.shape);
    const int h = x.shape[1], w = x.shape[2];
    for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx) {
            const S fx = static_cast<S>(xx) + flow.at(0, yy, xx);
            const S fy = static_cast<S>(yy) + flow.at(1, yy, xx);
            for (int c = 0; c < x.shape[0]; ++c) y.at(c, yy, xx) = bilinear_sample(x, c, fx, fy);
        }
    return y;
}

template <typename S>
void backward_warp_bwd(const Tensor<S>& x, const Tensor<S>& flow, const Tensor<S>& gy,
                       Tensor<S>& gx, Tensor<S>& gflow) {
    const int h = x.shape[1], w = x.shape[2];
    for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx) {
            S fx = static_cast<S>(xx) + flow.at(0, yy, xx);
            S fy = static_cast<S>(yy) + flow.at(1, yy, xx);
            const bool inx = fx > S(0) && fx < static_cast<S>(w - 1);
            const bool iny = fy > S(0) && fy < static_cast<S>(h - 1);
            fx = std::min(std::max(fx, S(0)), static_cast<S>(w - 1));
            fy = std::min(std::max(fy, S(0)), static_cast<S>(h - 1));
            const int x0 = std::min(static_cast<int>(std::floor(fx)), w - 2 < 0 ? 0 : w - 2);
            const int y0 = std::min(static_cast<int>(std::floor(fy)), h - 2 < 0 ? 0 : h - 2);
            const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
            const S ax = fx - static_cast<S>(x0), ay = fy - static_cast<S>(y0);
            for (int c = 0; c < x.shape[0]; ++c) {
                const S g = gy.at(c, yy, xx);
                if (g == S(0)) continue;
                gx.at(c, y0, x0) += g * (S(1) - ay) * (S(1) - ax);
                gx.at(c, y0, x1) += g * (S(1) - ay) * ax;
                gx.at(c, y1, x0) += g * ay * (S(1) - ax);
                gx.at(c, y1, x1) += g * ay * ax;
                const S dvx = (S(1) - ay) * (x.at(c, y0, x1) - x.at(c, y0, x0)) +
                              ay * (x.at(c, y1, x1) - x.at(c, y1, x0));
                const S dvy = (S(1) - ax) * (x.at(c, y1, x0) - x.at(c, y0, x0)) +
                              ax * (x.at(c, y1, x1) - x.at(c, y0, x1));
                if (inx) gflow.at(0, yy, xx) += g * dvx;
                if (iny) gflow.at(1, yy, xx) += g * dvy;
            }
        }
}

// Forward splat: colors [C,H,W], weights [H,W], flow [2,H,W].
// Output [C+1,H,W]: channels 0..C-1 are the weighted-color numerator,
// channel C is the weight denominator. Contributions whose 4-pixel bilinear
// footprint corner falls outside the frame are dropped corner-wise.
template <typename S>
Tensor<S> splat_fwd(const Tensor<S>& colors, const Tensor<S>& weights, const Tensor<S>& flow) {
    require(colors.rank() == 3, "splat: colors must be [C,H,W]");
    const int c = colors.shape[0], h = colors.shape[1], w = colors.shape[2];
    require(flow.rank() == 3 && flow.shape[0] == 2 && flow.shape[1] == h && flow.shape[2] == w,
            "splat: flow shape mismatch");
    require(weights.numel() == static_cast<std::int64_t>(h) * w, "splat: weights shape mismatch");
    for (S v : weights.data)
        require(std::isfinite(static_cast<double>(v)) && v >= S(0),
                "splat: weights must be finite and non-negative");
    require(flow.all_finite(), "splat: non-finite flow");
    Tensor<S> acc({c + 1, h, w});
    for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx) {
            const S px = static_cast<S>(xx) + flow.at(0, yy, xx);
            const S py = static_cast<S>(yy) + flow.at(1, yy, xx);
            const int x0 = static_cast<int>(std::floor(px));
            const int y0 = static_cast<int>(std::floor(py));
            const S ax = px - static_cast<S>(x0), ay = py - static_cast<S>(y0);
            const S wgt = weights[static_cast<std::int64_t>(yy) * w + xx];
            const S coef[4] = {(S(1) - ax) * (S(1) - ay), ax * (S(1) - ay), (S(1) - ax) * ay,
                               ax * ay};
            const int tx[4] = {x0, x0 + 1, x0, x0 + 1};
            const int ty[4] = {y0, y0, y0 + 1, y0 + 1};
            for (int k = 0; k < 4; ++k) {
                if (tx[k] < 0 || tx[k] >= w || ty[k] < 0 || ty[k] >= h) continue;
                const S cw = coef[k] * wgt;
                for (int ch = 0; ch < c; ++ch) acc.at(ch, ty[k], tx[k]) += cw * colors.at(ch, yy, xx);
                acc.at(c, ty[k], tx[k]) += cw;
            }
        }
    return acc;
}

template <typename S>
void splat_bwd(const Tensor<S>& colors, const Tensor<S>& weights, const Tensor<S>& flow,
               const Tensor<S>& gacc, Tensor<S>& gcolors, Tensor<S>& gweights, Tensor<S>& gflow) {
    const int c = colors.shape[0], h = colors.shape[1], w = colors.shape[2];
    for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx) {
            const S px = static_cast<S>(xx) + flow.at(0, yy, xx);
            const S py = static_cast<S>(yy) + flow.at(1, yy, xx);
            const int x0 = static_cast<int>(std::floor(px));
            const int y0 = static_cast<int>(std::floor(py));
            const S ax = px - static_cast<S>(x0), ay = py - static_cast<S>(y0);
            const S wgt = weights[static_cast<std::int64_t>(yy) * w + xx];
            const S coef[4] = {(S(1) - ax) * (S(1) - ay), ax * (S(1) - ay), (S(1) - ax) * ay,
                               ax * ay};
            // d(coef)/dax, d(coef)/day
            const S dcx[4] = {-(S(1) - ay), (S(1) - ay), -ay, ay};
            const S dcy[4] = {-(S(1) - ax), -ax, (S(1) - ax), ax};
            const int tx[4] = {x0, x0 + 1, x0, x0 + 1};
            const int ty[4] = {y0, y0, y0 + 1, y0 + 1};
            for (int k = 0; k < 4; ++k) {
                if (tx[k] < 0 || tx[k] >= w || ty[k] < 0 || ty[k] >= h) continue;
                S gdot = gacc.at(c, ty[k], tx[k]);  // denominator slot
                for (int ch = 0; ch < c; ++ch)
                    gdot += gacc.at(ch, ty[k], tx[k]) * colors.at(ch, yy, xx);
                for (int ch = 0; ch < c; ++ch)
                    gcolors.at(ch, yy, xx) += gacc.at(ch, ty[k], tx[k]) * coef[k] * wgt;
                gweights[static_cast<std::int64_t>(yy) * w + xx] += coef[k] * gdot;
                gflow.at(0, yy, xx) += dcx[k] * wgt * gdot;
                gflow.at(1, yy, xx) += dcy[k] * wgt * gdot;
            }
        }
}

// Bilinear resize with align-corners-false coordinate mapping; magnitudes are
// NOT rescaled here (callers rescale flow components explicitly).
template <typename S>
Tensor<S> resize_bilinear_fwd(const Tensor<S>& x, int oh, int ow) {
    require(x.rank() == 3, "resize_bilinear: input must be [C,H,W]");
    Tensor<S> y({x.shape[0], oh, ow});
    const S sy = static_cast<S>(x.shape[1]) / static_cast<S>(oh);
    const S sx = static_cast<S>(x.shape[2]) / static_cast<S>(ow);
    for (int yy = 0; yy < oh; ++yy)
        for (int xx = 0; xx < ow; ++xx) {
            const S fy = (static_cast<S>(yy) + S(0.5)) * sy - S(0.5);
            const S fx = (static_cast<S>(xx) + S(0.5)) * sx - S(0.5);
            for (int ch = 0; ch < x.shape[0]; ++ch)
                y.at(ch, yy, xx) = bilinear_sample(x, ch, fx, fy);
        }
    return y;
}

template <typename S>
void resize_bilinear_bwd(const Tensor<S>& x, const Tensor<S>& gy, Tensor<S>& gx) {
    const int oh = gy.shape[1], ow = gy.shape[2];
    const int h = x.shape[1], w = x.shape[2];
    const S sy = static_cast<S>(h) / static_cast<S>(oh);
    const S sx = static_cast<S>(w) / static_cast<S>(ow);
    for (int yy = 0; yy < oh; ++yy)
        for (int xx = 0; xx < ow; ++xx) {
            S fy = (static_cast<S>(yy) + S(0.5)) * sy - S(0.5);
            S fx = (static_cast<S>(xx) + S(0.5)) * sx - S(0.5);
            fx = std::min(std::max(fx, S(0)), static_cast<S>(w - 1));
            fy = std::min(std::max(fy, S(0)), static_cast<S>(h - 1));
            const int x0 = std::min(static_cast<int>(std::floor(fx)), w - 2 < 0 ? 0 : w - 2);
            const int y0 = std::min(static_cast<int>(std::floor(fy)), h - 2 < 0 ? 0 : h - 2);
            const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
            const S ax = fx - static_cast<S>(x0), ay = fy - static_cast<S>(y0);
            for (int ch = 0; ch < x.shape[0]; ++ch) {
                const S g = gy.at(ch, yy, xx);
                if (g == S(0)) continue;
                gx.at(ch, y0, x0) += g * (S(1) - ay) * (S(1) - ax);
                gx.at(ch, y0, x1) += g * (S(1) - ay) * ax;
                gx.at(ch, y1, x0) += g * ay * (S(1) - ax);
                gx.at(ch, y1, x1) += g * ay * ax;
            }
        }
}

}  // namespace m2m
