#pragma once

#include <functional>
#include <limits>

#include "m2m/kernels.hpp"

// Define-by-run gradient tape over the fixed op set the pipeline needs.
// Backward traverses nodes in exact reverse creation order; every op is a
// pure function of its recorded inputs, so replays are bitwise identical.

namespace m2m {

template <typename S>
class Tape {
public:
    using Var = int;

    Var leaf(Tensor<S> v) { return push(std::move(v), {}, nullptr); }

    const Tensor<S>& val(Var id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    const Tensor<S>& grad(Var id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
    std::size_t size() const { return nodes_.size(); }

    void backward(Var root) {
        require(val(root).numel() == 1, "backward: root must be scalar");
        for (auto& n : nodes_) std::fill(n.grad.data.begin(), n.grad.data.end(), S(0));
        nodes_[static_cast<std::size_t>(root)].grad[0] = S(1);
        for (int i = root; i >= 0; --i) {
            auto& n = nodes_[static_cast<std::size_t>(i)];
            if (n.backward) n.backward(*this, i);
        }
        for (const auto& n : nodes_)
            require(n.grad.all_finite(), "backward: non-finite gradient encountered");
    }

    // ---- elementwise ----

    Var add(Var a, Var b) {
        auto y = binary_value(a, b, [](S x, S z) { return x + z; });
        return push(std::move(y), {a, b}, [](Tape& t, Var self) {
            auto& n = t.node(self);
            t.accum(n.parents[0], n.grad);
            t.accum(n.parents[1], n.grad);
        });
    }

    Var sub(Var a, Var b) {
        auto y = binary_value(a, b, [](S x, S z) { return x - z; });
        return push(std::move(y), {a, b}, [](Tape& t, Var self) {
            auto& n = t.node(self);
            t.accum(n.parents[0], n.grad);
            for (std::int64_t i = 0; i < n.grad.numel(); ++i)
                t.grad_mut(n.parents[1])[i] -= n.grad[i];
        });
    }

    Var mul(Var a, Var b) {
        auto y = binary_value(a, b, [](S x, S z) { return x * z; });
        return push(std::move(y), {a, b}, [](Tape& t, Var self) {
            auto& n = t.node(self);
            const auto& va = t.val(n.parents[0]);
            const auto& vb = t.val(n.parents[1]);
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) {
                t.grad_mut(n.parents[0])[i] += n.grad[i] * vb[i];
                t.grad_mut(n.parents[1])[i] += n.grad[i] * va[i];
            }
        });
    }

    Var scale(Var a, S c) {
        Tensor<S> y = val(a);
        for (auto& v : y.data) v *= c;
        return push(std::move(y), {a}, [c](Tape& t, Var self) {
            auto& n = t.node(self);
            for (std::int64_t i = 0; i < n.grad.numel(); ++i)
                t.grad_mut(n.parents[0])[i] += c * n.grad[i];
        });
    }

    Var add_const(Var a, S c) {
        Tensor<S> y = val(a);
        for (auto& v : y.data) v += c;
        return push(std::move(y), {a}, [](Tape& t, Var self) {
            auto& n = t.node(self);
            t.accum(n.parents[0], n.grad);
        });
    }

    Var exp_(Var a) {
        Tensor<S> y = val(a);
        for (auto& v : y.data) v = std::exp(v);
        return push(std::move(y), {a}, [](Tape& t, Var self) {
            auto& n = t.node(self);
            for (std::int64_t i = 0; i < n.grad.numel(); ++i)
                t.grad_mut(n.parents[0])[i] += n.grad[i] * n.value[i];
        });
    }

    Var sigmoid_(Var a) {
        Tensor<S> y = val(a);
        for (auto& v : y.data) {
            v = v >= S(0) ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
            // keep the output strictly inside (0,1) even at saturation
            v = std::min(std::max(v, std::numeric_limits<S>::min()), std::nextafter(S(1), S(0)));
        }
        return push(std::move(y), {a}, [](Tape& t, Var self) {
            auto& n = t.node(self);
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) {
                const S s = n.value[i];
                t.grad_mut(n.parents[0])[i] += n.grad[i] * s * (S(1) - s);
            }
        });
    }

    Var abs_(Var a) {
        Tensor<S> y = val(a);
        for (auto& v : y.data) v = std::abs(v);
        return push(std::move(y), {a}, [](Tape& t, Var self) {
            auto& n = t.node(self);
            const auto& x = t.val(n.parents[0]);
            for (std::int64_t i = 0; i < n.grad.numel(); ++i)
                t.grad_mut(n.parents[0])[i] += n.grad[i] * (x[i] >= S(0) ? S(1) : S(-1));
        });
    }

    // sqrt(x^2 + eps^2): Charbonnier penalty and soft-sign denominator.
    Var charb(Var a, S eps) {
        Tensor<S> y = val(a);
        for (auto& v : y.data) v = std::sqrt(v * v + eps * eps);
        return push(std::move(y), {a}, [](Tape& t, Var self) {
            auto& n = t.node(self);
            const auto& x = t.val(n.parents[0]);
            for (std::int64_t i = 0; i < n.grad.numel(); ++i)
                t.grad_mut(n.parents[0])[i] += n.grad[i] * x[i] / n.value[i];
        });
    }

    Var div(Var a, Var b) {
        auto y = binary_value(a, b, [](S x, S z) { return x / z; });
        return push(std::move(y), {a, b}, [](Tape& t, Var self) {
            auto& n = t.node(self);
            const auto& va = t.val(n.parents[0]);
            const auto& vb = t.val(n.parents[1]);
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) {
                t.grad_mut(n.parents[0])[i] += n.grad[i] / vb[i];
                t.grad_mut(n.parents[1])[i] -= n.grad[i] * va[i] / (vb[i] * vb[i]);
            }
        });
    }

    // out = num/den where den > eps, else 0 (hole semantics of the fusion).
    // num is [C,H,W], den broadcasts per pixel with numel H*W.
    Var div_masked(Var num, Var den, S eps) {
        const auto& vn = val(num);
        const auto& vd = val(den);
        const int c = vn.shape[0];
        const std::int64_t hw = vn.numel() / c;
        require(vd.numel() == hw, "div_masked: denominator numel mismatch");
        Tensor<S> y(vn.shape);
        for (int ch = 0; ch < c; ++ch)
            for (std::int64_t i = 0; i < hw; ++i)
                y[ch * hw + i] = vd[i] > eps ? vn[ch * hw + i] / vd[i] : S(0);
        return push(std::move(y), {num, den}, [eps, c, hw](Tape& t, Var self) {
            auto& n = t.node(self);
            const auto& vn = t.val(n.parents[0]);
            const auto& vd = t.val(n.parents[1]);
            for (int ch = 0; ch < c; ++ch)
                for (std::int64_t i = 0; i < hw; ++i) {
                    if (vd[i] <= eps) continue;
                    const S g = n.grad[ch * hw + i];
                    t.grad_mut(n.parents[0])[ch * hw + i] += g / vd[i];
                    t.grad_mut(n.parents[1])[i] -= g * vn[ch * hw + i] / (vd[i] * vd[i]);
                }
        });
    }

    Var prelu(Var x, Var slope) {
        const auto& vx = val(x);
        const auto& vs = val(slope);
        require(vx.rank() == 3 && vs.numel() == vx.shape[0], "prelu: slope count != channels");
        Tensor<S> y = vx;
        const std::int64_t hw = vx.numel() / vx.shape[0];
        for (int c = 0; c < vx.shape[0]; ++c)
            for (std::int64_t i = 0; i < hw; ++i)
                if (y[c * hw + i] < S(0)) y[c * hw + i] *= vs[c];
        return push(std::move(y), {x, slope}, [hw](Tape& t, Var self) {
            auto& n = t.node(self);
            const auto& vx = t.val(n.parents[0]);
            const auto& vs = t.val(n.parents[1]);
            for (int c = 0; c < vx.shape[0]; ++c)
                for (std::int64_t i = 0; i < hw; ++i) {
                    const S g = n.grad[c * hw + i];
                    const S xv = vx[c * hw + i];
                    t.grad_mut(n.parents[0])[c * hw + i] += g * (xv >= S(0) ? S(1) : vs[c]);
                    if (xv < S(0)) t.grad_mut(n.parents[1])[c] += g * xv;
                }
        });
    }

    // Broadcast multiply by a single-element variable (fusion's alpha).
    Var mul_scalar(Var x, Var s) {
        require(val(s).numel() == 1, "mul_scalar: scalar operand must have one element");
        Tensor<S> y = val(x);
        const S sv = val(s)[0];
        for (auto& v : y.data) v *= sv;
        return push(std::move(y), {x, s}, [](Tape& t, Var self) {
            auto& n = t.node(self);
            const auto& vx = t.val(n.parents[0]);
            const S sv = t.val(n.parents[1])[0];
            S gs = S(0);
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) {
                t.grad_mut(n.parents[0])[i] += n.grad[i] * sv;
                gs += n.grad[i] * vx[i];
            }
            t.grad_mut(n.parents[1])[0] += gs;
        });
    }

    // ---- structural ----

    Var reshape(Var x, Shape sh) {
        require(shape_numel(sh) == val(x).numel(), "reshape: numel mismatch");
        Tensor<S> y(std::move(sh), val(x).data);
        return push(std::move(y), {x}, [](Tape& t, Var self) {
            auto& n = t.node(self);
            t.accum(n.parents[0], n.grad);
        });
    }

    Var concat_ch(const std::vector<Var>& parts) {
        require(!parts.empty(), "concat_ch: empty");
        const auto& first = val(parts[0]);
        int ctot = 0;
        for (Var p : parts) {
            require(val(p).rank() == 3 && val(p).shape[1] == first.shape[1] &&
                        val(p).shape[2] == first.shape[2],
                    "concat_ch: spatial mismatch");
            ctot += val(p).shape[0];
        }
        Tensor<S> y({ctot, first.shape[1], first.shape[2]});
        std::size_t off = 0;
        for (Var p : parts) {
            const auto& v = val(p);
            std::copy(v.data.begin(), v.data.end(), y.data.begin() + off);
            off += v.data.size();
        }
        return push(std::move(y), parts, [](Tape& t, Var self) {
            auto& n = t.node(self);
            std::size_t off = 0;
            for (Var p : n.parents) {
                auto& gp = t.grad_mut(p);
                for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += n.grad.data[off + i];
                off += gp.size();
            }
        });
    }

    Var slice_ch(Var x, int from, int count) {
        const auto& v = val(x);
        require(v.rank() == 3 && from >= 0 && from + count <= v.shape[0], "slice_ch: out of range");
        const std::int64_t hw = static_cast<std::int64_t>(v.shape[1]) * v.shape[2];
        Tensor<S> y({count, v.shape[1], v.shape[2]});
        std::copy(v.data.begin() + from * hw, v.data.begin() + (from + count) * hw, y.data.begin());
        return push(std::move(y), {x}, [from, hw](Tape& t, Var self) {
            auto& n = t.node(self);
            auto& gp = t.grad_mut(n.parents[0]);
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) gp[from * hw + i] += n.grad[i];
        });
    }

    Var crop2d(Var x, int top, int left, int h, int w) {
        const auto& v = val(x);
        require(v.rank() == 3 && top >= 0 && left >= 0 && top + h <= v.shape[1] &&
                    left + w <= v.shape[2],
                "crop2d: window out of range");
        Tensor<S> y({v.shape[0], h, w});
        for (int c = 0; c < v.shape[0]; ++c)
            for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w; ++xx) y.at(c, yy, xx) = v.at(c, top + yy, left + xx);
        return push(std::move(y), {x}, [top, left, h, w](Tape& t, Var self) {
            auto& n = t.node(self);
            auto& gp = t.grad_mut(n.parents[0]);
            const auto& gs = t.node(n.parents[0]).value.shape;
            for (int c = 0; c < gs[0]; ++c)
                for (int yy = 0; yy < h; ++yy)
                    for (int xx = 0; xx < w; ++xx)
                        gp[(static_cast<std::int64_t>(c) * gs[1] + top + yy) * gs[2] + left + xx] +=
                            n.grad.at(c, yy, xx);
        });
    }

    // Integer shift with zero fill; adjoint is the opposite shift.
    Var shift2d(Var x, int dy, int dx) {
        const auto& v = val(x);
        require(v.rank() == 3, "shift2d: input must be [C,H,W]");
        Tensor<S> y(v.shape);
        const int h = v.shape[1], w = v.shape[2];
        for (int c = 0; c < v.shape[0]; ++c)
            for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w; ++xx) {
                    const int sy = yy - dy, sx = xx - dx;
                    if (sy >= 0 && sy < h && sx >= 0 && sx < w) y.at(c, yy, xx) = v.at(c, sy, sx);
                }
        return push(std::move(y), {x}, [dy, dx, h, w](Tape& t, Var self) {
            auto& n = t.node(self);
            auto& gp = t.grad_mut(n.parents[0]);
            const int c_n = t.node(n.parents[0]).value.shape[0];
            for (int c = 0; c < c_n; ++c)
                for (int yy = 0; yy < h; ++yy)
                    for (int xx = 0; xx < w; ++xx) {
                        const int sy = yy - dy, sx = xx - dx;
                        if (sy >= 0 && sy < h && sx >= 0 && sx < w)
                            gp[(static_cast<std::int64_t>(c) * h + sy) * w + sx] +=
                                n.grad.at(c, yy, xx);
                    }
        });
    }

    Var reduce_sum(Var x) {
        S acc = S(0);
        for (S v : val(x).data) acc += v;
        Tensor<S> y({1});
        y[0] = acc;
        return push(std::move(y), {x}, [](Tape& t, Var self) {
            auto& n = t.node(self);
            const S g = n.grad[0];
            auto& gp = t.grad_mut(n.parents[0]);
            for (auto& v : gp) v += g;
        });
    }

    Var reduce_mean(Var x) { return scale(reduce_sum(x), S(1) / static_cast<S>(val(x).numel())); }

    // Sum over the channel axis, keeping a [1,H,W] map.
    Var sum_channels(Var x) {
        const auto& v = val(x);
        require(v.rank() == 3, "sum_channels: input must be [C,H,W]");
        const std::int64_t hw = static_cast<std::int64_t>(v.shape[1]) * v.shape[2];
        Tensor<S> y({1, v.shape[1], v.shape[2]});
        for (int c = 0; c < v.shape[0]; ++c)
            for (std::int64_t i = 0; i < hw; ++i) y[i] += v[c * hw + i];
        return push(std::move(y), {x}, [hw](Tape& t, Var self) {
            auto& n = t.node(self);
            auto& gp = t.grad_mut(n.parents[0]);
            const int cn = t.node(n.parents[0]).value.shape[0];
            for (int c = 0; c < cn; ++c)
                for (std::int64_t i = 0; i < hw; ++i) gp[c * hw + i] += n.grad[i];
        });
    }

    // ---- conv / pooling / kron ----

    // multiply-accumulates x2, conv layers only; read by the compute ledger
    std::int64_t flops = 0;

    Var conv2d(Var x, Var w, Var b, int stride, int pad) {
        Tensor<S> y = conv2d_fwd(val(x), val(w), val(b), stride, pad);
        flops += 2 * y.numel() * val(w).shape[1] * val(w).shape[2] * val(w).shape[3];
        return push(std::move(y), {x, w, b}, [stride, pad](Tape& t, Var self) {
            auto& n = t.node(self);
            const auto& vx = t.val(n.parents[0]);
            const auto& vw = t.val(n.parents[1]);
            Tensor<S> gx = conv2d_input_grad(n.grad, vw, stride, pad, vx.shape[1], vx.shape[2]);
            t.accum(n.parents[0], gx);
            Tensor<S> gw(vw.shape);
            Tensor<S> gb(t.val(n.parents[2]).shape);
            conv2d_param_grad(vx, n.grad, stride, pad, gw, gb);
            t.accum(n.parents[1], gw);
            t.accum(n.parents[2], gb);
        });
    }

    Var conv_transpose2d(Var x, Var w, Var b, int stride, int pad) {
        Tensor<S> y = conv_transpose2d_fwd(val(x), val(w), val(b), stride, pad);
        flops += 2 * val(x).numel() * val(w).shape[1] * val(w).shape[2] * val(w).shape[3];
        return push(std::move(y), {x, w, b}, [stride, pad](Tape& t, Var self) {
            auto& n = t.node(self);
            const auto& vx = t.val(n.parents[0]);
            const auto& vw = t.val(n.parents[1]);
            // forward was conv2d's input-grad, so input-grad here is conv2d
            Tensor<S> zb({vw.shape[0]});
            Tensor<S> gx = conv2d_fwd(n.grad, vw, zb, stride, pad);
            t.accum(n.parents[0], gx);
            Tensor<S> gw(vw.shape);
            Tensor<S> gb_dummy({vw.shape[0]});
            conv2d_param_grad(n.grad, vx, stride, pad, gw, gb_dummy);
            t.accum(n.parents[1], gw);
            auto& gb = t.grad_mut(n.parents[2]);
            const std::int64_t hw = n.grad.numel() / n.grad.shape[0];
            for (int c = 0; c < n.grad.shape[0]; ++c)
                for (std::int64_t i = 0; i < hw; ++i) gb[c] += n.grad[c * hw + i];
        });
    }

    Var avg_pool_axes(Var x, const std::vector<bool>& collapse) {
        Tensor<S> y = avg_pool_axes_fwd(val(x), collapse);
        return push(std::move(y), {x}, [collapse](Tape& t, Var self) {
            auto& n = t.node(self);
            const auto& vx = t.val(n.parents[0]);
            auto& gp = t.grad_mut(n.parents[0]);
            const S inv = static_cast<S>(n.value.numel()) / static_cast<S>(vx.numel());
            for (int c = 0; c < vx.shape[0]; ++c)
                for (int yy = 0; yy < vx.shape[1]; ++yy)
                    for (int xx = 0; xx < vx.shape[2]; ++xx)
                        gp[(static_cast<std::int64_t>(c) * vx.shape[1] + yy) * vx.shape[2] + xx] +=
                            inv * n.grad.at(collapse[0] ? 0 : c, collapse[1] ? 0 : yy,
                                            collapse[2] ? 0 : xx);
        });
    }

    Var kron3(Var u, Var vv, Var w) {
        Tensor<S> y = kron3_fwd(val(u), val(vv), val(w));
        return push(std::move(y), {u, vv, w}, [](Tape& t, Var self) {
            auto& n = t.node(self);
            const auto& u_ = t.val(n.parents[0]);
            const auto& v_ = t.val(n.parents[1]);
            const auto& w_ = t.val(n.parents[2]);
            const int c = static_cast<int>(u_.numel()), h = static_cast<int>(v_.numel()),
                      wd = static_cast<int>(w_.numel());
            for (int i = 0; i < c; ++i)
                for (int j = 0; j < h; ++j)
                    for (int l = 0; l < wd; ++l) {
                        const S g = n.grad.at(i, j, l);
                        t.grad_mut(n.parents[0])[i] += g * v_[j] * w_[l];
                        t.grad_mut(n.parents[1])[j] += g * u_[i] * w_[l];
                        t.grad_mut(n.parents[2])[l] += g * u_[i] * v_[j];
                    }
        });
    }

    // ---- warping ----

    Var backward_warp(Var x, Var flow) {
        Tensor<S> y = backward_warp_fwd(val(x), val(flow));
        return push(std::move(y), {x, flow}, [](Tape& t, Var self) {
            auto& n = t.node(self);
            const auto& vx = t.val(n.parents[0]);
            const auto& vf = t.val(n.parents[1]);
            Tensor<S> gx(vx.shape), gf(vf.shape);
            backward_warp_bwd(vx, vf, n.grad, gx, gf);
            t.accum(n.parents[0], gx);
            t.accum(n.parents[1], gf);
        });
    }

    Var splat(Var colors, Var weights, Var flow) {
        Tensor<S> y = splat_fwd(val(colors), val(weights), val(flow));
        return push(std::move(y), {colors, weights, flow}, [](Tape& t, Var self) {
            auto& n = t.node(self);
            const auto& vc = t.val(n.parents[0]);
            const auto& vw = t.val(n.parents[1]);
            const auto& vf = t.val(n.parents[2]);
            Tensor<S> gc(vc.shape), gw(vw.shape), gf(vf.shape);
            splat_bwd(vc, vw, vf, n.grad, gc, gw, gf);
            t.accum(n.parents[0], gc);
            t.accum(n.parents[1], gw);
            t.accum(n.parents[2], gf);
        });
    }

    Var resize_bilinear(Var x, int oh, int ow) {
        Tensor<S> y = resize_bilinear_fwd(val(x), oh, ow);
        return push(std::move(y), {x}, [](Tape& t, Var self) {
            auto& n = t.node(self);
            const auto& vx = t.val(n.parents[0]);
            Tensor<S> gx(vx.shape);
            resize_bilinear_bwd(vx, n.grad, gx);
            t.accum(n.parents[0], gx);
        });
    }

private:
    struct Node {
        Tensor<S> value;
        Tensor<S> grad;
        std::vector<Var> parents;
        std::function<void(Tape&, Var)> backward;
    };

    Node& node(Var id) { return nodes_[static_cast<std::size_t>(id)]; }
    std::vector<S>& grad_mut(Var id) { return nodes_[static_cast<std::size_t>(id)].grad.data; }

    void accum(Var id, const Tensor<S>& g) {
        auto& dst = grad_mut(id);
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g.data[i];
    }

    template <typename F>
    Tensor<S> binary_value(Var a, Var b, F f) const {
        const auto& va = val(a);
        const auto& vb = val(b);
        require(va.numel() == vb.numel(), "elementwise op: numel mismatch " + shape_str(va.shape) +
                                              " vs " + shape_str(vb.shape));
        Tensor<S> y = va;
        for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = f(va[i], vb[i]);
        return y;
    }

    Var push(Tensor<S> value, std::vector<Var> parents, std::function<void(Tape&, Var)> bwd) {
        require(value.all_finite(), "tape: op produced non-finite values");
        Node n;
        n.grad = Tensor<S>(value.shape);
        n.value = std::move(value);
        n.parents = std::move(parents);
        n.backward = std::move(bwd);
        nodes_.push_back(std::move(n));
        return static_cast<Var>(nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
};

using Taped = Tape<double>;
using Tapef = Tape<float>;

// Central finite-difference check of a scalar-valued tape program. Returns
// the max over all input coordinates of |analytic - numeric| / max(1, |analytic|).
// Run in double; finite differences are not trustworthy in float.
inline double grad_check(
    const std::function<Taped::Var(Taped&, const std::vector<Taped::Var>&)>& build,
    std::vector<Tensord> inputs, double eps = 1e-5) {
    Taped tape;
    std::vector<Taped::Var> ids;
    ids.reserve(inputs.size());
    for (auto& in : inputs) ids.push_back(tape.leaf(in));
    Taped::Var root = build(tape, ids);
    tape.backward(root);
    std::vector<Tensord> analytic;
    analytic.reserve(ids.size());
    for (auto id : ids) analytic.push_back(tape.grad(id));

    double max_err = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::int64_t i = 0; i < inputs[k].numel(); ++i) {
            const double saved = inputs[k][i];
            double f[2];
            for (int s = 0; s < 2; ++s) {
                inputs[k][i] = saved + (s == 0 ? eps : -eps);
                Taped t2;
                std::vector<Taped::Var> ids2;
                for (auto& in : inputs) ids2.push_back(t2.leaf(in));
                f[s] = t2.val(build(t2, ids2))[0];
                require(std::isfinite(f[s]), "grad_check: non-finite objective");
            }
            inputs[k][i] = saved;
            const double numeric = (f[0] - f[1]) / (2.0 * eps);
            const double a = analytic[k][i];
            max_err = std::max(max_err, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
        }
    }
    return max_err;
}

// Same comparison restricted to chosen coordinates (input index, flat offset);
// keeps large-graph checks affordable.
inline double grad_check_subset(
    const std::function<Taped::Var(Taped&, const std::vector<Taped::Var>&)>& build,
    std::vector<Tensord> inputs, const std::vector<std::pair<std::size_t, std::int64_t>>& coords,
    double eps = 1e-5) {
    Taped tape;
    std::vector<Taped::Var> ids;
    ids.reserve(inputs.size());
    for (auto& in : inputs) ids.push_back(tape.leaf(in));
    Taped::Var root = build(tape, ids);
    tape.backward(root);
    std::vector<Tensord> analytic;
    analytic.reserve(ids.size());
    for (auto id : ids) analytic.push_back(tape.grad(id));

    double max_err = 0.0;
    for (const auto& [k, i] : coords) {
        const double saved = inputs[k][i];
        double f[2];
        for (int s = 0; s < 2; ++s) {
            inputs[k][i] = saved + (s == 0 ? eps : -eps);
            Taped t2;
            std::vector<Taped::Var> ids2;
            for (auto& in : inputs) ids2.push_back(t2.leaf(in));
            f[s] = t2.val(build(t2, ids2))[0];
            require(std::isfinite(f[s]), "grad_check: non-finite objective");
        }
        inputs[k][i] = saved;
        const double numeric = (f[0] - f[1]) / (2.0 * eps);
        const double a = analytic[k][i];
        max_err = std::max(max_err, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
    return max_err;
}

}  // namespace m2m
