#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "zsdfa/preprocess.hpp"
#include "zsdfa/rng.hpp"
#include "zsdfa/synthetic.hpp"

using namespace zsdfa;

namespace {

Image constant_image(int size, std::uint8_t value) {
    Image img(size, size);
    for (auto& p : img.px) p = value;
    return img;
}

/// Vertical step: columns [0, split) at `left`, the rest at `right`.
Image step_image(int size, int split, std::uint8_t left, std::uint8_t right) {
    Image img(size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = x < split ? left : right;
    return img;
}

} // namespace

TEST_CASE("sobel_edges fixtures") {
    auto flat = sobel_edges<double>(constant_image(8, 77));
    for (double v : flat.data()) CHECK(v == 0.0);

    // Vertical step at column 4: response exactly on columns 3 and 4.
    const int split = 4;
    auto edges = sobel_edges<double>(step_image(8, split, 0, 200));
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            const double v = edges.data()[static_cast<std::size_t>(y) * 8 + x];
            if (x == split - 1 || x == split)
                CHECK(v > 0.0);
            else
                CHECK(v == 0.0);
        }

    // Bit-match against the hand stencil: |Gx| = (1+2+1) * 200 = 800, Gy = 0.
    const double expected = std::sqrt(800.0 * 800.0) / (4.0 * 255.0 * std::sqrt(2.0));
    for (int y = 0; y < 8; ++y) {
        CHECK(edges.data()[static_cast<std::size_t>(y) * 8 + split - 1] == expected);
        CHECK(edges.data()[static_cast<std::size_t>(y) * 8 + split] == expected);
    }

    CHECK_THROWS_AS(sobel_edges<double>(constant_image(2, 0)), ShapeError);
}

TEST_CASE("sobel output bounded in [0,1]") {
    Rng rng(5);
    Image img(16, 16);
    for (auto& p : img.px) p = static_cast<std::uint8_t>(rng.below(256));
    auto edges = sobel_edges<double>(img);
    for (double v : edges.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("richest_patch") {
    // Constant image except one noisy tile.
    Image img = constant_image(16, 100);
    Rng rng(9);
    for (int y = 8; y < 12; ++y)
        for (int x = 4; x < 8; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(y, x, c) = static_cast<std::uint8_t>(rng.below(256));
    auto [patch, origin] = richest_patch(img, 4);
    CHECK(origin.row == 8);
    CHECK(origin.col == 4);
    CHECK(patch.h == 4);

    auto [flat_patch, flat_origin] = richest_patch(constant_image(16, 42), 4);
    (void)flat_patch;
    CHECK(flat_origin.row == 0);  // tie-break to the first tile
    CHECK(flat_origin.col == 0);

    CHECK_THROWS_AS(richest_patch(img, 17), ConfigError);
}

TEST_CASE("richest_patch origin is tile aligned") {
    Rng rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        Image img(24, 24);
        for (auto& p : img.px) p = static_cast<std::uint8_t>(rng.below(256));
        const int p = 1 + int(rng.below(3)) * 4;  // 1, 5 or 9... keep divisor-free sizes
        auto [patch, origin] = richest_patch(img, p);
        (void)patch;
        CHECK(origin.row % p == 0);
        CHECK(origin.col % p == 0);
    }
}

TEST_CASE("srm_noise fixtures") {
    auto flat = srm_noise<double>(constant_image(9, 130));
    for (double v : flat.data()) CHECK(v == 0.0);

    // Impulse at the center of a zero patch: the response at offset (dy, dx)
    // is the flipped-kernel stencil value, accumulated in the implementation's
    // order: (k1 + k2/2) at the 3x3 tap, then k3/12 at the 5x5 tap.
    Image impulse(9, 9);
    impulse.at(4, 4, 0) = impulse.at(4, 4, 1) = impulse.at(4, 4, 2) = 255;
    auto noise = srm_noise<double>(impulse);

    static constexpr double k1[3][3] = {{0, 0, 0}, {0, -1, 1}, {0, 0, 0}};
    static constexpr double k2[3][3] = {{0, 0, 0}, {1, -2, 1}, {0, 0, 0}};
    static constexpr double k3[5][5] = {{-1, 2, -2, 2, -1},
                                        {2, -6, 8, -6, 2},
                                        {-2, 8, -12, 8, -2},
                                        {2, -6, 8, -6, 2},
                                        {-1, 2, -2, 2, -1}};
    for (int y = 2; y <= 6; ++y)
        for (int x = 2; x <= 6; ++x) {
            const int dy = 4 - y, dx = 4 - x;  // flipped stencil offset
            double acc1 = 0.0, acc2 = 0.0;
            if (std::abs(dy) <= 1 && std::abs(dx) <= 1) {
                acc1 = k1[dy + 1][dx + 1] * 255.0;
                acc2 = k2[dy + 1][dx + 1] * 255.0;
            }
            const double acc3 = k3[dy + 2][dx + 2] * 255.0;
            double expected = acc1 * 1.0 + acc2 * (1.0 / 2.0) + acc3 * (1.0 / 12.0);
            expected = std::clamp(expected / 255.0, -1.0, 1.0);
            for (int c = 0; c < 3; ++c) {
                const double got = noise.data()[(static_cast<std::size_t>(c) * 9 + y) * 9 + x];
                CAPTURE(y);
                CAPTURE(x);
                CHECK(got == expected);
            }
        }
}

TEST_CASE("srm second-order kernel annihilates a linear ramp") {
    // Horizontal ramp value = 40 + 10x.
    Image ramp(9, 9);
    for (int y = 0; y < 9; ++y)
        for (int x = 0; x < 9; ++x)
            for (int c = 0; c < 3; ++c) ramp.at(y, x, c) = static_cast<std::uint8_t>(40 + 10 * x);

    // Independent check of the second-difference property itself.
    for (int x = 1; x < 8; ++x) {
        const double second_diff =
            (40.0 + 10 * (x - 1)) - 2 * (40.0 + 10 * x) + (40.0 + 10 * (x + 1));
        CHECK(second_diff == 0.0);
    }

    // Away from borders the full residual reduces to the first-order term
    // (slope), since both the second-order and square kernels annihilate
    // linear functions.
    auto noise = srm_noise<double>(ramp);
    const double expected = (10.0) / 255.0;  // first difference = slope
    for (int y = 2; y <= 6; ++y)
        for (int x = 2; x <= 6; ++x)
            CHECK(noise.data()[(static_cast<std::size_t>(0) * 9 + y) * 9 + x] ==
                  doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("translation equivariance away from borders") {
    auto [img, map] = render_face(21, 32);
    (void)map;
    // img2 = img shifted right by 1 pixel (leftmost column duplicated).
    Image shifted(32, 32);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            for (int c = 0; c < 3; ++c)
                shifted.at(y, x, c) = img.at(y, std::max(0, x - 1), c);

    auto e1 = sobel_edges<double>(img);
    auto e2 = sobel_edges<double>(shifted);
    for (int y = 2; y < 30; ++y)
        for (int x = 3; x < 30; ++x)
            CHECK(e2.data()[static_cast<std::size_t>(y) * 32 + x] ==
                  e1.data()[static_cast<std::size_t>(y) * 32 + x - 1]);

    auto n1 = srm_noise<double>(img);
    auto n2 = srm_noise<double>(shifted);
    for (int c = 0; c < 3; ++c)
        for (int y = 3; y < 29; ++y)
            for (int x = 4; x < 29; ++x)
                CHECK(n2.data()[(static_cast<std::size_t>(c) * 32 + y) * 32 + x] ==
                      n1.data()[(static_cast<std::size_t>(c) * 32 + y) * 32 + x - 1]);
}

TEST_CASE("corruption identity at severity 0, bit-exact") {
    auto [img, map] = render_face(77, 64);
    (void)map;
    for (CorruptionKind kind : all_corruptions()) {
        const Image out = corrupt(img, {kind, 0}, 123);
        CAPTURE(to_string(kind));
        CHECK(out == img);
    }
}

TEST_CASE("corruption determinism and noise monotonicity") {
    auto [img, map] = render_face(3, 64);
    (void)map;

    const Image a = corrupt(img, {CorruptionKind::GaussianNoise, 5}, 42);
    const Image b = corrupt(img, {CorruptionKind::GaussianNoise, 5}, 42);
    CHECK(a == b);
    const Image c = corrupt(img, {CorruptionKind::GaussianNoise, 5}, 43);
    CHECK(!(a == c));

    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        double prev = -1.0;
        for (int severity = 0; severity <= 5; ++severity) {
            const Image out = corrupt(img, {CorruptionKind::GaussianNoise, severity}, seed);
            double energy = 0;
            for (std::size_t i = 0; i < img.px.size(); ++i) {
                const double d = double(out.px[i]) - double(img.px[i]);
                energy += d * d;
            }
            CHECK(energy >= prev);
            prev = energy;
        }
    }
}

TEST_CASE("corruption validation") {
    auto [img, map] = render_face(1, 32);
    (void)map;
    CHECK_THROWS_AS(corrupt(img, {CorruptionKind::Blur, 6}, 1), ConfigError);
    CHECK_THROWS_AS(corrupt(img, {CorruptionKind::Blur, -1}, 1), ConfigError);
    CHECK_THROWS_AS(corruption_from_string("mosaic"), ConfigError);
    CHECK(corruption_from_string("pixelate") == CorruptionKind::Pixelate);
    CHECK(all_corruptions().size() == 7);
}

TEST_CASE("every corruption kind produces a change at severity 5") {
    auto [img, map] = render_face(15, 64);
    (void)map;
    for (CorruptionKind kind : all_corruptions()) {
        const Image out = corrupt(img, {kind, 5}, 9);
        CAPTURE(to_string(kind));
        CHECK(!(out == img));
    }
}
