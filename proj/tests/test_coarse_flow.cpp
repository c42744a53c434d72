#include <random>

#include "doctest.h"
#include "m2m/coarse_flow.hpp"

using namespace m2m;

namespace {

Tensord noise_image(int h, int w, unsigned seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> d(0.0, 1.0);
    Tensord img({1, h, w});
    for (auto& v : img.data) v = d(rng);
    return img;
}

// shift with border clamp, matching what a camera pan leaves in-frame
Tensord shift_image(const Tensord& img, int du, int dv) {
    const int h = img.shape[1], w = img.shape[2];
    Tensord out(img.shape);
    for (int c = 0; c < img.shape[0]; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int sy = std::min(std::max(y - dv, 0), h - 1);
                const int sx = std::min(std::max(x - du, 0), w - 1);
                out.at(c, y, x) = img.at(c, sy, sx);
            }
    return out;
}

}  // namespace

TEST_CASE("identical frames give exactly zero flow in both directions") {
    Tensord img = noise_image(64, 64, 3);
    auto [f01, f10] = estimate_coarse_flow(img, img);
    CHECK(f01.height() == 16);
    CHECK(f01.width() == 16);
    for (double v : f01.uv.data) CHECK(v == 0.0);
    for (double v : f10.uv.data) CHECK(v == 0.0);
}

TEST_CASE("global translation is recovered within one coarse pixel") {
    Tensord i0 = noise_image(64, 64, 7);
    Tensord i1 = shift_image(i0, 8, 0);  // 8 px at full res = 2 px at 1/4 res
    auto [f01, f10] = estimate_coarse_flow(i0, i1);
    const int h = f01.height(), w = f01.width();
    // judge interior blocks only; the clamped border smears the pattern
    for (int y = 4; y < h - 4; ++y)
        for (int x = 4; x < w - 4; ++x) {
            CHECK(std::abs(f01.u(y, x) - 2.0) <= 1.0);
            CHECK(std::abs(f01.v(y, x)) <= 1.0);
            CHECK(std::abs(f10.u(y, x) + 2.0) <= 1.0);
            CHECK(std::abs(f10.v(y, x)) <= 1.0);
        }
}

TEST_CASE("diagonal translation, both components") {
    Tensord i0 = noise_image(96, 96, 11);
    Tensord i1 = shift_image(i0, -8, 4);
    auto [f01, f10] = estimate_coarse_flow(i0, i1);
    const int h = f01.height(), w = f01.width();
    for (int y = 5; y < h - 5; ++y)
        for (int x = 5; x < w - 5; ++x) {
            CHECK(std::abs(f01.u(y, x) + 2.0) <= 1.0);
            CHECK(std::abs(f01.v(y, x) - 1.0) <= 1.0);
        }
}

TEST_CASE("uniform frames resolve ties to zero displacement") {
    Tensord flat({1, 64, 64}, 0.5);
    auto [f01, f10] = estimate_coarse_flow(flat, flat);
    for (double v : f01.uv.data) CHECK(v == 0.0);
    for (double v : f10.uv.data) CHECK(v == 0.0);
}

TEST_CASE("estimate is deterministic") {
    Tensord i0 = noise_image(64, 64, 13);
    Tensord i1 = noise_image(64, 64, 17);
    auto [a01, a10] = estimate_coarse_flow(i0, i1);
    auto [b01, b10] = estimate_coarse_flow(i0, i1);
    CHECK(a01.uv.data == b01.uv.data);
    CHECK(a10.uv.data == b10.uv.data);
}

TEST_CASE("magnitude stays within the search budget") {
    Tensord i0 = noise_image(64, 64, 19);
    Tensord i1 = noise_image(64, 64, 23);
    CoarseFlowConfig cfg;
    auto [f01, f10] = estimate_coarse_flow(i0, i1, cfg);
    // coarse-to-fine: at most radius per level accumulates geometrically
    const double bound = cfg.search_radius * ((1 << cfg.pyramid_levels) - 1);
    for (double v : f01.uv.data) CHECK(std::abs(v) <= bound);
    for (double v : f10.uv.data) CHECK(std::abs(v) <= bound);
}

TEST_CASE("config validation rejects degenerate settings") {
    Tensord img = noise_image(64, 64, 29);
    CoarseFlowConfig bad;
    bad.block_size = 2;
    CHECK_THROWS(estimate_coarse_flow(img, img, bad));
    bad = {};
    bad.search_radius = 0;
    CHECK_THROWS(estimate_coarse_flow(img, img, bad));
    Tensord tiny({1, 8, 8}, 0.1);
    CHECK_THROWS(estimate_coarse_flow(tiny, tiny));  // pyramid would underflow
}
