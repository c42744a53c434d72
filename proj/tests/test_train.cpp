#include <random>

#include "doctest.h"
#include "m2m/train.hpp"

using namespace m2m;

namespace {

Tensord random_tensor(Shape sh, std::mt19937& rng, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensord t(std::move(sh));
    for (auto& v : t.data) v = d(rng);
    return t;
}

MrnConfig toy_config() {
    MrnConfig cfg;
    cfg.levels = 2;
    cfg.channels = {8, 16};
    cfg.rank = 4;
    cfg.n_flows = 4;
    cfg.flow_downscale = 4;
    return cfg;
}

}  // namespace

TEST_CASE("charbonnier loss: closed forms") {
    // identical inputs: each element contributes sqrt(0 + eps^2) = eps
    Taped tape;
    std::mt19937 rng(3);
    Tensord x = random_tensor({2, 3, 3}, rng);
    auto vx = tape.leaf(x);
    auto l0 = charbonnier_loss(tape, vx, tape.leaf(x));
    CHECK(tape.val(l0)[0] == doctest::Approx(1e-3).epsilon(1e-9));

    // constant difference d: mean sqrt(d^2 + eps^2)
    Tensord y = x;
    for (auto& v : y.data) v += 0.3;
    auto l1 = charbonnier_loss(tape, vx, tape.leaf(y));
    CHECK(tape.val(l1)[0] == doctest::Approx(std::sqrt(0.09 + 1e-6)));
}

TEST_CASE("charbonnier loss gradient matches finite differences") {
    std::mt19937 rng(5);
    const double err = grad_check(
        [](Taped& t, const std::vector<Taped::Var>& in) {
            return charbonnier_loss(t, in[0], in[1]);
        },
        {random_tensor({2, 4, 4}, rng), random_tensor({2, 4, 4}, rng)});
    CHECK(err < 1e-5);
}

TEST_CASE("census loss: zero for identical images, invariant to global offset") {
    std::mt19937 rng(7);
    Tensord x = random_tensor({3, 6, 6}, rng);
    Taped tape;
    auto vx = tape.leaf(x);
    auto l0 = census_loss(tape, vx, tape.leaf(x));
    CHECK(tape.val(l0)[0] == doctest::Approx(0.0).epsilon(1e-12));

    // census signatures are built from local differences: adding a constant
    // to one image must not change the loss
    Tensord y = random_tensor({3, 6, 6}, rng);
    Tensord y_off = y;
    for (auto& v : y_off.data) v += 0.2;
    Taped t2;
    auto a = t2.val(census_loss(t2, t2.leaf(x), t2.leaf(y)))[0];
    Taped t3;
    auto b = t3.val(census_loss(t3, t3.leaf(x), t3.leaf(y_off)))[0];
    CHECK(a == doctest::Approx(b).epsilon(1e-9));
    CHECK(a > 0.0);
}

TEST_CASE("census loss matches a direct reimplementation") {
    std::mt19937 rng(11);
    Tensord p = random_tensor({3, 5, 7}, rng);
    Tensord g = random_tensor({3, 5, 7}, rng);
    const int h = 5, w = 7;
    const double sigma = 0.1;

    auto gray = [&](const Tensord& img, int y, int x) {
        return (img.at(0, y, x) + img.at(1, y, x) + img.at(2, y, x)) / 3.0;
    };
    auto sig = [&](const Tensord& img, int y, int x, int dy, int dx) {
        const int sy = y + dy, sx = x + dx;
        const double nb = (sy >= 0 && sy < h && sx >= 0 && sx < w) ? gray(img, sy, sx) : 0.0;
        const double d = nb - gray(img, y, x);
        return d / std::sqrt(d * d + sigma * sigma);
    };
    double total = 0;
    int count = 0;
    for (int y = 1; y < h - 1; ++y)
        for (int x = 1; x < w - 1; ++x) {
            double ham = 0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (dy == 0 && dx == 0) continue;
                    const double d = sig(p, y, x, dy, dx) - sig(g, y, x, dy, dx);
                    ham += d * d / (0.1 + d * d);
                }
            total += ham;
            ++count;
        }
    const double expected = total / count;

    Taped tape;
    auto loss = census_loss(tape, tape.leaf(p), tape.leaf(g));
    CHECK(tape.val(loss)[0] == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("census loss gradient matches finite differences") {
    std::mt19937 rng(13);
    const double err = grad_check(
        [](Taped& t, const std::vector<Taped::Var>& in) { return census_loss(t, in[0], in[1]); },
        {random_tensor({2, 5, 5}, rng), random_tensor({2, 5, 5}, rng)});
    CHECK(err < 1e-4);
}

TEST_CASE("fusion graph gradient: full differentiable path") {
    std::mt19937 rng(17);
    Tensord i0 = random_tensor({2, 5, 5}, rng, 0.2, 0.8);
    Tensord i1 = random_tensor({2, 5, 5}, rng, 0.2, 0.8);
    Tensord f01 = random_tensor({2, 5, 5}, rng, -0.8, 0.8);
    Tensord f10 = random_tensor({2, 5, 5}, rng, -0.8, 0.8);
    Tensord s0 = random_tensor({1, 5, 5}, rng, -0.5, 0.5);
    Tensord s1 = random_tensor({1, 5, 5}, rng, -0.5, 0.5);
    Tensord alpha({1}, std::vector<double>{1.2});

    const double err = grad_check(
        [](Taped& t, const std::vector<Taped::Var>& in) {
            FusionGraphInputs<double> fin;
            fin.i0 = in[0];
            fin.i1 = in[1];
            fin.flows01 = {in[2]};
            fin.flows10 = {in[3]};
            fin.s0 = in[4];
            fin.s1 = in[5];
            fin.alpha = in[6];
            fin.t = 0.5;
            return t.reduce_sum(t.mul(build_fusion_graph(t, fin), in[7]));
        },
        {i0, i1, f01, f10, s0, s1, alpha, random_tensor({2, 5, 5}, rng)}, 1e-6);
    CHECK(err < 1e-4);
}

TEST_CASE("adam: zero gradients leave parameters unchanged except decay") {
    ParamStore<float> params;
    params.add("w", {2, 2});
    params.at("w").data = {1.0f, -2.0f, 3.0f, -4.0f};
    std::vector<Tensor<float>> grads{Tensor<float>({2, 2})};
    AdamState st;
    adam_step(params, grads, st, 0.1f, 0.0f);
    for (int i = 0; i < 4; ++i)
        CHECK(params.at("w")[i] == doctest::Approx(std::vector<float>{1, -2, 3, -4}[i]));
    // with decay, weights shrink toward zero
    adam_step(params, grads, st, 0.1f, 0.5f);
    CHECK(std::abs(params.at("w")[0]) < 1.0f);
}

TEST_CASE("adam: first step moves against the gradient by ~lr") {
    ParamStore<float> params;
    params.add("w", {2});
    params.at("w").data = {0.0f, 0.0f};
    std::vector<Tensor<float>> grads{Tensor<float>({2})};
    grads[0].data = {1.0f, -3.0f};
    AdamState st;
    adam_step(params, grads, st, 0.01f, 0.0f);
    // bias-corrected first step is lr * sign(g) to within eps
    CHECK(params.at("w")[0] == doctest::Approx(-0.01f).epsilon(1e-3));
    CHECK(params.at("w")[1] == doctest::Approx(0.01f).epsilon(1e-3));
}

TEST_CASE("adam: converges on a quadratic bowl") {
    ParamStore<float> params;
    params.add("w", {3});
    params.at("w").data = {2.0f, -1.5f, 0.7f};
    AdamState st;
    for (int i = 0; i < 400; ++i) {
        std::vector<Tensor<float>> grads{Tensor<float>({3})};
        for (int k = 0; k < 3; ++k) grads[0][k] = 2.0f * params.at("w")[k];
        adam_step(params, grads, st, 0.05f, 0.0f);
    }
    for (int k = 0; k < 3; ++k) CHECK(std::abs(params.at("w")[k]) < 1e-2f);
    CHECK(st.skipped == 0);
}

TEST_CASE("adam: non-finite gradients are skipped and counted") {
    ParamStore<float> params;
    params.add("w", {2});
    params.at("w").data = {1.0f, 2.0f};
    std::vector<Tensor<float>> grads{Tensor<float>({2})};
    grads[0].data = {std::numeric_limits<float>::quiet_NaN(), 0.0f};
    AdamState st;
    adam_step(params, grads, st, 0.1f, 0.1f);
    CHECK(st.skipped == 1);
    CHECK(st.step == 0);
    CHECK(params.at("w")[0] == 1.0f);
    CHECK(params.at("w")[1] == 2.0f);
}

TEST_CASE("synthetic translation scene has exact constant flow") {
    SceneSpec spec;
    spec.kind = SceneSpec::Kind::Translation;
    Triplet tr = make_triplet(spec, 42);
    const float u = tr.gt_f01.u(0, 0), v = tr.gt_f01.v(0, 0);
    CHECK(std::abs(u) <= spec.max_shift);
    CHECK(std::abs(v) <= spec.max_shift);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            CHECK(tr.gt_f01.u(y, x) == doctest::Approx(u));
            CHECK(tr.gt_f01.v(y, x) == doctest::Approx(v));
            CHECK(tr.gt_f10.u(y, x) == doctest::Approx(-u));
            CHECK(tr.gt_f10.v(y, x) == doctest::Approx(-v));
        }
}

TEST_CASE("ground-truth flow actually registers the two frames") {
    for (auto kind : {SceneSpec::Kind::Translation, SceneSpec::Kind::Zoom}) {
        SceneSpec spec;
        spec.kind = kind;
        Triplet tr = make_triplet(spec, 7);
        Tensor<float> warped = backward_warp(tr.i1, tr.gt_f01);
        // compare interior pixels whose correspondence stays in frame
        double err = 0;
        int n = 0;
        for (int c = 0; c < 3; ++c)
            for (int y = 8; y < 56; ++y)
                for (int x = 8; x < 56; ++x) {
                    const float tx = x + tr.gt_f01.u(y, x), ty = y + tr.gt_f01.v(y, x);
                    if (tx < 1 || tx > 62 || ty < 1 || ty > 62) continue;
                    err += std::abs(warped.at(c, y, x) - tr.i0.at(c, y, x));
                    ++n;
                }
        REQUIRE(n > 0);
        CHECK(err / n < 0.03);  // bilinear resampling noise only
    }
}

TEST_CASE("t parameter interpolates the scene smoothly") {
    SceneSpec spec;
    Triplet quarter = make_triplet(spec, 9, 0.25f);
    Triplet half = make_triplet(spec, 9, 0.5f);
    // same seed, same endpoints
    CHECK(quarter.i0.data == half.i0.data);
    CHECK(quarter.i1.data == half.i1.data);
    CHECK(quarter.it.data != half.it.data);
    // the quarter frame is closer to i0 than the half frame is
    auto dist = [](const Tensor<float>& a, const Tensor<float>& b) {
        double s = 0;
        for (std::int64_t i = 0; i < a.numel(); ++i) s += std::abs(a[i] - b[i]);
        return s;
    };
    CHECK(dist(quarter.it, quarter.i0) < dist(half.it, half.i0));
}

TEST_CASE("horizontal flip negates u and preserves registration") {
    SceneSpec spec;
    Triplet tr = make_triplet(spec, 21);
    const float u = tr.gt_f01.u(5, 5);
    Triplet flipped = tr;
    train_detail::flip_horizontal(flipped);
    CHECK(flipped.gt_f01.u(5, 64 - 1 - 5) == doctest::Approx(-u));
    // flipped frames still register under the flipped flow
    Tensor<float> warped = backward_warp(flipped.i1, flipped.gt_f01);
    double err = 0;
    int n = 0;
    for (int y = 8; y < 56; ++y)
        for (int x = 8; x < 56; ++x) {
            const float tx = x + flipped.gt_f01.u(y, x), ty = y + flipped.gt_f01.v(y, x);
            if (tx < 1 || tx > 62 || ty < 1 || ty > 62) continue;
            err += std::abs(warped.at(0, y, x) - flipped.i0.at(0, y, x));
            ++n;
        }
    CHECK(err / n < 0.02);
}

TEST_CASE("temporal flip swaps endpoints and mirrors t") {
    SceneSpec spec;
    Triplet tr = make_triplet(spec, 23, 0.25f);
    Triplet rev = tr;
    train_detail::flip_temporal(rev);
    CHECK(rev.t == doctest::Approx(0.75f));
    CHECK(rev.i0.data == tr.i1.data);
    CHECK(rev.i1.data == tr.i0.data);
    CHECK(rev.gt_f01.uv.data == tr.gt_f10.uv.data);
}

TEST_CASE("every parameter receives gradient through the training graph") {
    MrnConfig cfg = toy_config();
    MrnModel<float> model(cfg);
    // the head ships near zero, which leaves almost no gradient into the
    // decoder at step 0; perturb it so every path is clearly active
    std::mt19937 hr(3);
    std::uniform_real_distribution<float> hd(-0.05f, 0.05f);
    for (auto* name : {"head.w", "head.b"})
        for (auto& v : model.params.at(name).data) v = hd(hr);
    SceneSpec spec;
    spec.height = spec.width = 16;
    spec.max_shift = 2.0f;
    Triplet tr = make_triplet(spec, 31);
    CoarseFlowConfig cf;
    auto est = estimate_coarse_flow(tr.i0, tr.i1, cf);
    Tape<float> tape;
    MrnForward<float> mrn(tape, model);
    auto loss = build_training_graph<float>(tape, mrn, cfg, tr.i0, tr.i1, tr.it, tr.t, est.first,
                                            est.second);
    CHECK(std::isfinite(tape.val(loss)[0]));
    tape.backward(loss);
    for (std::size_t k = 0; k < model.params.count(); ++k) {
        const auto& g = tape.grad(mrn.param_vars()[k]);
        bool any = false;
        for (float v : g.data) any |= (v != 0.0f);
        INFO("parameter: " << model.params.names[k]);
        CHECK(any);
    }
}

TEST_CASE("short training run is deterministic and reduces the loss trend") {
    TrainConfig cfg;
    cfg.iterations = 6;
    cfg.crop = 16;
    cfg.log_every = 1;
    cfg.seed = 5;
    MrnConfig mc = toy_config();
    MrnModel<float> a(mc, 11), b(mc, 11);
    TrainResult ra = train_toy(a, cfg);
    TrainResult rb = train_toy(b, cfg);
    REQUIRE(ra.log.size() == rb.log.size());
    for (std::size_t i = 0; i < ra.log.size(); ++i)
        CHECK(ra.log[i].total == doctest::Approx(rb.log[i].total).epsilon(1e-12));
    for (std::size_t k = 0; k < a.params.count(); ++k)
        CHECK(a.params.tensors[k].data == b.params.tensors[k].data);
    CHECK(ra.log.front().total > 0.0);
}
