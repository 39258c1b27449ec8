#include <catch2/catch_amalgamated.hpp>

#include "diffnet/grid.hpp"
#include "diffnet/rng.hpp"
#include "test_util.hpp"

using namespace diffnet;
using testutil::max_abs;
using testutil::max_abs_diff;
using testutil::random_field;
using testutil::random_image;

TEST_CASE("zero-mean stencil annihilates constant images") {
    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        const int n = 3 + static_cast<int>(rng.below(10));
        FilterField f = random_field(n, n, rng);  // center plane is arbitrary and must be ignored
        Image c(n, n, rng.uniform(-5.0, 5.0));
        const Image out = apply_stencil(c, f, StencilMode::ZeroMeanDiffusion, rng.uniform(0.01, 2.0));
        REQUIRE(max_abs(out) < 1e-12);
    }
}

TEST_CASE("laplacian stencil gives the classic 5-point response on a delta") {
    Image u(5, 5, 0.0);
    u.at(2, 2) = 1.0;
    FilterField lap = FilterField::laplacian(5, 5);
    const Image out = apply_stencil(u, lap, StencilMode::ZeroMeanDiffusion, 1.0);
    CHECK(out.at(2, 2) == Catch::Approx(-4.0));
    CHECK(out.at(1, 2) == Catch::Approx(1.0));
    CHECK(out.at(3, 2) == Catch::Approx(1.0));
    CHECK(out.at(2, 1) == Catch::Approx(1.0));
    CHECK(out.at(2, 3) == Catch::Approx(1.0));
    double total = 0.0;
    for (double v : out.data) total += std::abs(v);
    CHECK(total == Catch::Approx(8.0));  // nothing outside the cross
}

TEST_CASE("apply_stencil matches the dense SSD matrix") {
    Rng rng(23);
    SECTION("8x8 zero-mean") {
        const FilterField f = random_field(8, 8, rng);
        const Image u = random_image(8, 8, rng);
        const double dt = 0.7;
        const Image fast = apply_stencil(u, f, StencilMode::ZeroMeanDiffusion, dt);
        const DenseMatrix m = dense_oracle_matrix(f, StencilMode::ZeroMeanDiffusion, dt);
        const auto slow = m.apply(u.data);
        double gap = 0.0;
        for (std::size_t i = 0; i < slow.size(); ++i) gap = std::max(gap, std::abs(slow[i] - fast[i]));
        REQUIRE(gap < 1e-12);
    }
    SECTION("6x6 free center, 20 random images") {
        const FilterField f = random_field(6, 6, rng);
        const DenseMatrix m = dense_oracle_matrix(f, StencilMode::FreeCenter, 0.3);
        for (int trial = 0; trial < 20; ++trial) {
            const Image u = random_image(6, 6, rng);
            const Image fast = apply_stencil(u, f, StencilMode::FreeCenter, 0.3);
            const auto slow = m.apply(u.data);
            double gap = 0.0;
            for (std::size_t i = 0; i < slow.size(); ++i)
                gap = std::max(gap, std::abs(slow[i] - fast[i]));
            REQUIRE(gap < 1e-12);
        }
    }
    SECTION("randomized shapes up to 16x16") {
        for (int trial = 0; trial < 40; ++trial) {
            const int w = 2 + static_cast<int>(rng.below(15));
            const int h = 2 + static_cast<int>(rng.below(15));
            const auto mode = rng.uniform() < 0.5 ? StencilMode::ZeroMeanDiffusion
                                                  : StencilMode::FreeCenter;
            const FilterField f = random_field(w, h, rng);
            const Image u = random_image(w, h, rng);
            const double dt = rng.uniform(0.05, 1.5);
            const Image fast = apply_stencil(u, f, mode, dt);
            const auto slow = dense_oracle_matrix(f, mode, dt).apply(u.data);
            double gap = 0.0;
            for (std::size_t i = 0; i < slow.size(); ++i)
                gap = std::max(gap, std::abs(slow[i] - fast[i]));
            REQUIRE(gap < 1e-12);
        }
    }
}

TEST_CASE("dense oracle basics") {
    SECTION("all-zero planes give the zero matrix") {
        FilterField f(2, 2, 0.0);
        const DenseMatrix m = dense_oracle_matrix(f, StencilMode::FreeCenter, 1.0);
        for (double v : m.a) CHECK(v == 0.0);
    }
    SECTION("3x3 laplacian rows") {
        const FilterField f = FilterField::laplacian(3, 3);
        const DenseMatrix m = dense_oracle_matrix(f, StencilMode::ZeroMeanDiffusion, 1.0);
        // every row sums to zero (Neumann folding keeps constants in the kernel)
        for (int i = 0; i < m.n; ++i) {
            double row = 0.0;
            for (int j = 0; j < m.n; ++j) row += m.at(i, j);
            CHECK(std::abs(row) < 1e-14);
        }
        // interior pixel (1,1) -> index 4: cross pattern 1,1,-4,1,1
        CHECK(m.at(4, 1) == Catch::Approx(1.0));
        CHECK(m.at(4, 3) == Catch::Approx(1.0));
        CHECK(m.at(4, 4) == Catch::Approx(-4.0));
        CHECK(m.at(4, 5) == Catch::Approx(1.0));
        CHECK(m.at(4, 7) == Catch::Approx(1.0));
    }
    SECTION("size guard") {
        FilterField f(65, 65, 0.0);
        CHECK_THROWS_AS(dense_oracle_matrix(f, StencilMode::FreeCenter, 1.0), ShapeError);
    }
}

TEST_CASE("apply_stencil is linear") {
    Rng rng(31);
    const FilterField f = random_field(9, 7, rng);
    const Image u = random_image(9, 7, rng);
    const Image v = random_image(9, 7, rng);
    const double a = 1.7, b = -0.4;
    Image combo(9, 7);
    for (std::size_t i = 0; i < combo.size(); ++i) combo[i] = a * u[i] + b * v[i];
    const Image lhs = apply_stencil(combo, f, StencilMode::FreeCenter, 0.5);
    const Image lu = apply_stencil(u, f, StencilMode::FreeCenter, 0.5);
    const Image lv = apply_stencil(v, f, StencilMode::FreeCenter, 0.5);
    Image rhs(9, 7);
    for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] = a * lu[i] + b * lv[i];
    REQUIRE(max_abs_diff(lhs, rhs) < 1e-12);
}

TEST_CASE("neumann laplacian annihilates constants at the boundary too") {
    const FilterField lap = FilterField::laplacian(6, 4);
    Image c(6, 4, 3.25);
    const Image out = apply_stencil(c, lap, StencilMode::ZeroMeanDiffusion, 1.0);
    REQUIRE(max_abs(out) == 0.0);
}

TEST_CASE("apply_stencil rejects shape mismatches") {
    FilterField f(4, 4, 1.0);
    Image u(5, 4, 0.0);
    CHECK_THROWS_AS(apply_stencil(u, f, StencilMode::FreeCenter, 1.0), ShapeError);
}

TEST_CASE("image_stats") {
    SECTION("all-zero image") {
        const ImageStats s = image_stats(Image(4, 4, 0.0));
        CHECK(s.min == 0.0);
        CHECK(s.max == 0.0);
        CHECK(s.mean == 0.0);
        CHECK(s.l2norm == 0.0);
    }
    SECTION("symmetric ramp has mean 1/2") {
        Image u(5, 1);
        for (int x = 0; x < 5; ++x) u.at(0, x) = x / 4.0;
        const ImageStats s = image_stats(u);
        CHECK(s.min == 0.0);
        CHECK(s.max == 1.0);
        CHECK(s.mean == Catch::Approx(0.5));
    }
    SECTION("random image matches a naive recomputation") {
        Rng rng(5);
        const Image u = random_image(7, 3, rng);
        const ImageStats s = image_stats(u);
        double mn = u[0], mx = u[0], sum = 0.0, sq = 0.0;
        for (double v : u.data) {
            mn = std::min(mn, v);
            mx = std::max(mx, v);
            sum += v;
            sq += v * v;
        }
        CHECK(s.min == mn);
        CHECK(s.max == mx);
        CHECK(s.mean == Catch::Approx(sum / 21.0).epsilon(1e-14));
        CHECK(s.l2norm == Catch::Approx(std::sqrt(sq)).epsilon(1e-14));
    }
    SECTION("empty image is rejected") {
        Image u;
        CHECK_THROWS_AS(image_stats(u), ShapeError);
    }
}
