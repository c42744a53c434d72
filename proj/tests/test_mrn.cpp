#include <cstdio>
#include <random>

#include "doctest.h"
#include "m2m/mrn.hpp"

using namespace m2m;

namespace {

MrnConfig toy_config() {
    MrnConfig cfg;
    cfg.levels = 2;
    cfg.channels = {8, 16};
    cfg.rank = 4;
    cfg.n_flows = 4;
    cfg.flow_downscale = 4;
    return cfg;
}

Tensord random_tensor(Shape sh, std::mt19937& rng, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensord t(std::move(sh));
    for (auto& v : t.data) v = d(rng);
    return t;
}

}  // namespace

TEST_CASE("feature pyramid shapes for the reference configuration") {
    MrnConfig cfg;  // defaults: 4 levels, {16,32,64,128}
    MrnModel<double> model(cfg);
    Taped tape;
    MrnForward<double> fwd(tape, model);
    std::mt19937 rng(3);
    auto img = tape.leaf(random_tensor({3, 64, 64}, rng));
    auto levels = fwd.encode_pyramid(img);
    REQUIRE(levels.size() == 5);
    CHECK(tape.val(levels[0]).shape == Shape{3, 64, 64});
    CHECK(tape.val(levels[1]).shape == Shape{16, 32, 32});
    CHECK(tape.val(levels[2]).shape == Shape{32, 16, 16});
    CHECK(tape.val(levels[3]).shape == Shape{64, 8, 8});
    CHECK(tape.val(levels[4]).shape == Shape{128, 4, 4});
}

TEST_CASE("pyramid rejects sizes not divisible by 2^levels") {
    MrnModel<double> model(toy_config());
    Taped tape;
    MrnForward<double> fwd(tape, model);
    std::mt19937 rng(5);
    auto img = tape.leaf(random_tensor({3, 6, 8}, rng));
    CHECK_THROWS(fwd.encode_pyramid(img));
}

TEST_CASE("zero image with zero biases gives zero features") {
    MrnConfig cfg = toy_config();
    MrnModel<double> model(cfg);
    for (std::size_t i = 0; i < model.params.count(); ++i)
        if (model.params.names[i].find(".b") != std::string::npos)
            std::fill(model.params.tensors[i].data.begin(), model.params.tensors[i].data.end(),
                      0.0);
    Taped tape;
    MrnForward<double> fwd(tape, model);
    auto img = tape.leaf(Tensord({3, 16, 16}));
    auto levels = fwd.encode_pyramid(img);
    for (std::size_t l = 1; l < levels.size(); ++l)
        for (double v : tape.val(levels[l]).data) CHECK(v == 0.0);
}

TEST_CASE("forward pass is deterministic") {
    MrnModel<double> model(toy_config());
    std::mt19937 rng(7);
    Tensord i0 = random_tensor({3, 16, 16}, rng);
    Tensord i1 = random_tensor({3, 16, 16}, rng);
    Tensord coarse = random_tensor({2, 4, 4}, rng, -1.0, 1.0);

    auto run_once = [&]() {
        Taped tape;
        MrnForward<double> fwd(tape, model);
        auto out = fwd.run(tape.leaf(i0), tape.leaf(i1), tape.leaf(coarse), tape.leaf(coarse));
        return tape.val(out.flows01[0]).data;
    };
    CHECK(run_once() == run_once());
}

TEST_CASE("shared weights make the streams exchange-symmetric") {
    MrnModel<double> model(toy_config());
    std::mt19937 rng(11);
    Tensord i0 = random_tensor({3, 16, 16}, rng);
    Tensord i1 = random_tensor({3, 16, 16}, rng);
    Tensord f01 = random_tensor({2, 4, 4}, rng, -1.0, 1.0);
    Tensord f10 = random_tensor({2, 4, 4}, rng, -1.0, 1.0);

    Taped ta;
    MrnForward<double> fa(ta, model);
    auto oa = fa.run(ta.leaf(i0), ta.leaf(i1), ta.leaf(f01), ta.leaf(f10));
    Taped tb;
    MrnForward<double> fb(tb, model);
    auto ob = fb.run(tb.leaf(i1), tb.leaf(i0), tb.leaf(f10), tb.leaf(f01));

    for (int k = 0; k < 4; ++k) {
        const auto& a01 = ta.val(oa.flows01[k]);
        const auto& b10 = tb.val(ob.flows10[k]);
        REQUIRE(a01.shape == b10.shape);
        for (std::int64_t i = 0; i < a01.numel(); ++i)
            CHECK(a01[i] == doctest::Approx(b10[i]).epsilon(1e-12));
    }
    const auto& s0a = ta.val(oa.s0);
    const auto& s1b = tb.val(ob.s1);
    for (std::int64_t i = 0; i < s0a.numel(); ++i)
        CHECK(s0a[i] == doctest::Approx(s1b[i]).epsilon(1e-12));
}

TEST_CASE("jfe halves the resolution and matches the configured width") {
    MrnModel<double> model(toy_config());
    Taped tape;
    MrnForward<double> fwd(tape, model);
    std::mt19937 rng(13);
    auto i0 = tape.leaf(random_tensor({3, 16, 16}, rng));
    auto i1 = tape.leaf(random_tensor({3, 16, 16}, rng));
    auto f = tape.leaf(Tensord({2, 16, 16}));
    auto jo = fwd.jfe_step(0, i0, i1, -1, -1, f, f);
    CHECK(tape.val(jo.m0).shape == Shape{8, 8, 8});
    CHECK(tape.val(jo.m1).shape == Shape{8, 8, 8});
    CHECK(tape.val(jo.cv0).shape == Shape{18, 16, 16});
    CHECK(tape.val(jo.cv1).shape == Shape{18, 16, 16});
}

TEST_CASE("low-rank modulation: sigmoid(0) gate halves the input") {
    // Zeroing every LFM weight and bias makes all three projections sigmoid(0)
    // = 0.5; the rank-1 average is then 0.125 everywhere.
    MrnModel<double> model(toy_config());
    for (std::size_t i = 0; i < model.params.count(); ++i)
        if (model.params.names[i].rfind("lfm.", 0) == 0)
            std::fill(model.params.tensors[i].data.begin(), model.params.tensors[i].data.end(),
                      0.0);
    Taped tape;
    MrnForward<double> fwd(tape, model);
    std::mt19937 rng(17);
    Tensord x = random_tensor({16, 8, 8}, rng, -1.0, 1.0);
    auto y = fwd.low_rank_modulate(tape.leaf(x));
    const auto& out = tape.val(y);
    for (std::int64_t i = 0; i < x.numel(); ++i)
        CHECK(out[i] == doctest::Approx(0.125 * x[i]));
}

TEST_CASE("low-rank modulation attenuates: |out| <= |in|") {
    MrnModel<double> model(toy_config());
    Taped tape;
    MrnForward<double> fwd(tape, model);
    std::mt19937 rng(19);
    Tensord x = random_tensor({16, 8, 8}, rng, -2.0, 2.0);
    auto y = fwd.low_rank_modulate(tape.leaf(x));
    const auto& out = tape.val(y);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(std::abs(out[i]) <= std::abs(x[i]) + 1e-12);
}

TEST_CASE("modulation gain has rank at most M in every unfolding") {
    // The gain field out/in is an average of M rank-1 tensors, so its
    // channel-mode unfolding has matrix rank <= M.
    MrnConfig cfg = toy_config();
    MrnModel<double> model(cfg);
    Taped tape;
    MrnForward<double> fwd(tape, model);
    std::mt19937 rng(23);
    Tensord x = random_tensor({16, 8, 8}, rng, 0.5, 1.5);
    auto y = fwd.low_rank_modulate(tape.leaf(x));
    const auto& out = tape.val(y);
    const int c = 16, h = 8, w = 8;
    // gain[c][h*w]
    std::vector<std::vector<double>> g(c, std::vector<double>(h * w));
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h * w; ++i) g[ch][i] = out[ch * h * w + i] / x[ch * h * w + i];
    // Gaussian elimination rank with pivot threshold
    int rank = 0;
    std::vector<std::vector<double>> m = g;
    for (int col = 0; col < h * w && rank < c; ++col) {
        int piv = -1;
        double best = 1e-9;
        for (int r = rank; r < c; ++r)
            if (std::abs(m[r][col]) > best) {
                best = std::abs(m[r][col]);
                piv = r;
            }
        if (piv < 0) continue;
        std::swap(m[rank], m[piv]);
        for (int r = 0; r < c; ++r) {
            if (r == rank) continue;
            const double f = m[r][col] / m[rank][col];
            for (int cc = col; cc < h * w; ++cc) m[r][cc] -= f * m[rank][cc];
        }
        ++rank;
    }
    CHECK(rank <= cfg.rank);
}

TEST_CASE("near-zero head makes the output flow the upsampled initial flow") {
    MrnModel<double> model(toy_config());  // head starts near zero
    std::mt19937 rng(29);
    Tensord i0 = random_tensor({3, 16, 16}, rng);
    Tensord i1 = random_tensor({3, 16, 16}, rng);
    Tensord coarse({2, 4, 4});
    for (auto& v : coarse.data) v = 1.0;  // uniform (1,1) at quarter res

    Taped tape;
    MrnForward<double> fwd(tape, model);
    auto out = fwd.run(tape.leaf(i0), tape.leaf(i1), tape.leaf(coarse), tape.leaf(coarse));
    REQUIRE(out.flows01.size() == 4);
    for (int k = 0; k < 4; ++k) {
        const auto& f = tape.val(out.flows01[k]);
        REQUIRE(f.shape == Shape{2, 16, 16});
        // uniform coarse flow upsamples to uniform, magnitudes scale by 4;
        // the near-zero head leaves residuals well under 1e-2 px
        for (double v : f.data) CHECK(v == doctest::Approx(4.0).epsilon(1e-2));
    }
    for (double v : tape.val(out.s0).data) CHECK(std::abs(v) < 1e-2);
    for (double v : tape.val(out.s1).data) CHECK(std::abs(v) < 1e-2);
}

TEST_CASE("output contract: N flow pairs plus one reliability map per stream") {
    MrnConfig cfg = toy_config();
    cfg.n_flows = 3;
    MrnModel<double> model(cfg);
    std::mt19937 rng(31);
    Tensord i0 = random_tensor({3, 16, 16}, rng);
    Tensord i1 = random_tensor({3, 16, 16}, rng);
    Tensord coarse = random_tensor({2, 4, 4}, rng, -1.0, 1.0);
    Taped tape;
    MrnForward<double> fwd(tape, model);
    auto out = fwd.run(tape.leaf(i0), tape.leaf(i1), tape.leaf(coarse), tape.leaf(coarse));
    CHECK(out.flows01.size() == 3);
    CHECK(out.flows10.size() == 3);
    for (int k = 0; k < 3; ++k) {
        CHECK(tape.val(out.flows01[k]).shape == Shape{2, 16, 16});
        CHECK(tape.val(out.flows10[k]).shape == Shape{2, 16, 16});
    }
    CHECK(tape.val(out.s0).shape == Shape{1, 16, 16});
    CHECK(tape.val(out.s1).shape == Shape{1, 16, 16});
}

TEST_CASE("network gradients agree with finite differences on a weight subset") {
    MrnConfig cfg;
    cfg.levels = 2;
    cfg.channels = {4, 8};
    cfg.rank = 2;
    cfg.n_flows = 2;
    cfg.flow_downscale = 4;
    MrnModel<double> model(cfg);
    std::mt19937 rng(37);
    Tensord i0 = random_tensor({3, 8, 8}, rng);
    Tensord i1 = random_tensor({3, 8, 8}, rng);
    Tensord coarse = random_tensor({2, 2, 2}, rng, -0.5, 0.5);

    Taped tape;
    MrnForward<double> fwd(tape, model);
    auto vi0 = tape.leaf(i0), vi1 = tape.leaf(i1), vc = tape.leaf(coarse);
    auto out = fwd.run(vi0, vi1, vc, vc);
    Taped::Var loss = tape.reduce_sum(out.flows01[0]);
    for (int k = 1; k < cfg.n_flows; ++k) loss = tape.add(loss, tape.reduce_sum(out.flows01[k]));
    loss = tape.add(loss, tape.reduce_sum(out.s0));
    loss = tape.add(loss, tape.reduce_sum(tape.mul(out.s1, out.s1)));
    loss = tape.add(loss, tape.reduce_sum(tape.mul(out.flows10[0], out.flows10[0])));
    tape.backward(loss);

    auto objective = [&](const MrnModel<double>& m) {
        Taped t2;
        MrnForward<double> f2(t2, m);
        auto o = f2.run(t2.leaf(i0), t2.leaf(i1), t2.leaf(coarse), t2.leaf(coarse));
        Taped::Var l = t2.reduce_sum(o.flows01[0]);
        for (int k = 1; k < cfg.n_flows; ++k) l = t2.add(l, t2.reduce_sum(o.flows01[k]));
        l = t2.add(l, t2.reduce_sum(o.s0));
        l = t2.add(l, t2.reduce_sum(t2.mul(o.s1, o.s1)));
        l = t2.add(l, t2.reduce_sum(t2.mul(o.flows10[0], o.flows10[0])));
        return t2.val(l)[0];
    };

    std::mt19937 pick(41);
    const double eps = 1e-5;
    double max_err = 0.0;
    int checked = 0;
    for (std::size_t p = 0; p < model.params.count(); ++p) {
        // at least one coordinate from every parameter tensor
        const std::int64_t n = model.params.tensors[p].numel();
        std::uniform_int_distribution<std::int64_t> d(0, n - 1);
        for (int rep = 0; rep < 2; ++rep) {
            const std::int64_t i = d(pick);
            MrnModel<double> m = model;
            m.params.tensors[p][i] += eps;
            const double f_plus = objective(m);
            m.params.tensors[p][i] -= 2 * eps;
            const double f_minus = objective(m);
            const double numeric = (f_plus - f_minus) / (2 * eps);
            const double analytic = tape.grad(fwd.param_vars()[p])[i];
            max_err = std::max(max_err,
                               std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic)));
            ++checked;
        }
    }
    CHECK(checked >= 100);
    CHECK(max_err < 1e-3);
}

TEST_CASE("checkpoint round trip preserves config and every parameter") {
    MrnConfig cfg = toy_config();
    MrnModel<float> model(cfg, 99);
    const std::string path = "m2m_test_ckpt.bin";
    save_checkpoint(path, model);
    MrnModel<float> back = load_checkpoint(path);
    CHECK(back.cfg.levels == cfg.levels);
    CHECK(back.cfg.channels == cfg.channels);
    CHECK(back.cfg.rank == cfg.rank);
    CHECK(back.cfg.n_flows == cfg.n_flows);
    CHECK(back.cfg.flow_downscale == cfg.flow_downscale);
    REQUIRE(back.params.count() == model.params.count());
    for (std::size_t i = 0; i < model.params.count(); ++i) {
        CHECK(back.params.names[i] == model.params.names[i]);
        CHECK(back.params.tensors[i].data == model.params.tensors[i].data);
    }
    std::remove(path.c_str());
}

TEST_CASE("checkpoint loader rejects corrupted files") {
    MrnModel<float> model(toy_config());
    const std::string path = "m2m_test_ckpt_bad.bin";
    save_checkpoint(path, model);

    // bad magic
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.write("NOPE", 4);
    }
    CHECK_THROWS(load_checkpoint(path));

    // truncation mid-payload
    save_checkpoint(path, model);
    {
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        in.close();
        bytes.resize(bytes.size() / 2);
        std::ofstream out(path, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    CHECK_THROWS(load_checkpoint(path));
    std::remove(path.c_str());
    CHECK_THROWS(load_checkpoint("no_such_checkpoint.bin"));
}
