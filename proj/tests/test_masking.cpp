#include "doctest.h"

#include <cmath>

#include "cag/masking.hpp"
#include "support.hpp"

using namespace cag;
using cag::test::random_images;

TEST_CASE("mask cardinality is exact for every ratio") {
    Rng rng(1);
    for (int gh = 1; gh <= 5; ++gh)
        for (int gw = 1; gw <= 5; ++gw)
            for (double r : {0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0}) {
                const MaskPattern p = sample_mask(gh, gw, r, rng);
                CHECK(p.masked_count() == static_cast<int>(std::lround(r * gh * gw)));
                const MaskPattern c = p.complement();
                for (int i = 0; i < p.cells(); ++i) CHECK((p.masked[i] != 0) != (c.masked[i] != 0));
            }
}

TEST_CASE("ratio edge cases") {
    Rng rng(2);
    CHECK(sample_mask(4, 4, 0.0, rng).masked_count() == 0);
    CHECK(sample_mask(4, 4, 1.0, rng).masked_count() == 16);
    CHECK(sample_mask(4, 4, 0.75, rng).masked_count() == 12);
    CHECK_THROWS_AS(sample_mask(4, 4, 1.5, rng), std::invalid_argument);
    CHECK_THROWS_AS(sample_mask(4, 4, -0.1, rng), std::invalid_argument);
    CHECK_THROWS_AS(sample_mask(0, 4, 0.5, rng), std::invalid_argument);
}

TEST_CASE("same rng state gives the same mask") {
    Rng a = make_stream(5, StreamDomain::sampler_mask, 3, 9), b = make_stream(5, StreamDomain::sampler_mask, 3, 9);
    CHECK(sample_mask(4, 4, 0.5, a).masked == sample_mask(4, 4, 0.5, b).masked);
}

TEST_CASE("per-patch mask frequency over 10000 draws") {
    std::vector<int> hits(16, 0);
    for (int step = 0; step < 10000; ++step) {
        Rng rng = make_stream(0, StreamDomain::sampler_mask, 0, static_cast<std::uint64_t>(step));
        const MaskPattern p = sample_mask(4, 4, 0.75, rng);
        for (int i = 0; i < 16; ++i) hits[i] += p.masked[i];
    }
    for (int h : hits) CHECK(std::abs(h / 10000.0 - 0.75) < 0.02);
}

TEST_CASE("consecutive-step masks are independent draws (chi-squared)") {
    // Which single patch stays visible at 15/16 masking: uniform over 16 cells.
    std::vector<double> counts(16, 0.0);
    const int draws = 10000;
    for (int step = 0; step < draws; ++step) {
        Rng rng = make_stream(42, StreamDomain::sampler_mask, 0, static_cast<std::uint64_t>(step));
        const MaskPattern p = sample_mask(4, 4, 15.0 / 16.0, rng);
        for (int i = 0; i < 16; ++i)
            if (!p.masked[i]) counts[i] += 1.0;
    }
    double chi2 = 0.0;
    const double expected = draws / 16.0;
    for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
    // 99th percentile of chi-squared with 15 degrees of freedom.
    CHECK(chi2 < 30.578);

    // Pairs of consecutive steps: joint cell of the visible patch is uniform over 256.
    std::vector<double> joint(256, 0.0);
    auto visible = [](std::uint64_t step) {
        Rng rng = make_stream(42, StreamDomain::sampler_mask, 0, step);
        const MaskPattern p = sample_mask(4, 4, 15.0 / 16.0, rng);
        for (int i = 0; i < 16; ++i)
            if (!p.masked[i]) return i;
        return -1;
    };
    const int pairs = 25600;
    for (int t = 0; t < pairs; ++t)
        joint[static_cast<std::size_t>(visible(2 * t) * 16 + visible(2 * t + 1))] += 1.0;
    double chi2j = 0.0;
    const double ej = pairs / 256.0;
    for (double c : joint) chi2j += (c - ej) * (c - ej) / ej;
    // 99th percentile of chi-squared with 255 degrees of freedom.
    CHECK(chi2j < 310.457);
}

TEST_CASE("mask and complement partition an image") {
    const Tensor x = random_images(2, 3, 8, 3);
    Rng rng(4);
    const MaskPattern p = sample_mask(2, 2, 0.5, rng, 4);
    const Tensor a = apply_mask(x, p), b = apply_complement(x, p);
    for (Index i = 0; i < x.size(); ++i) CHECK(a[i] + b[i] == x[i]);

    MaskPattern all = p;
    std::fill(all.masked.begin(), all.masked.end(), 1);
    CHECK(apply_mask(x, all) == x);
}

TEST_CASE("top-left patch of an 8x8 image on a 2x2 grid") {
    Tensor x({1, 8, 8}, 1.0);
    MaskPattern p;
    p.grid_h = p.grid_w = 2;
    p.patch_size = 4;
    p.ratio = 0.25;
    p.masked = {1, 0, 0, 0};
    const Tensor m = apply_mask(x, p);
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) CHECK((m[r * 8 + c] != 0.0) == (r < 4 && c < 4));
}

TEST_CASE("indivisible image dims are rejected with the divisor") {
    MaskPattern p;
    p.grid_h = p.grid_w = 2;
    p.patch_size = 4;
    p.masked = {1, 0, 0, 0};
    try {
        apply_mask(Tensor({1, 7, 7}), p);
        FAIL("expected rejection");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find('7') != std::string::npos);
    }
}

TEST_CASE("masked reconstruction") {
    const auto mae = cag::test::tiny_mae(7);
    const Tensor x = random_images(2, 1, 8, 5);
    Rng rng(6);
    SUBCASE("nothing hidden passes the image through") {
        const std::vector<MaskPattern> none(2, sample_mask(4, 4, 0.0, rng, 2));
        CHECK(masked_reconstruct(*mae, x, none) == x);
    }
    SUBCASE("visible patches pass through, hidden ones are predicted") {
        const std::vector<MaskPattern> ps{sample_mask(4, 4, 0.5, rng, 2), sample_mask(4, 4, 0.5, rng, 2)};
        const Tensor y = masked_reconstruct(*mae, x, ps);
        CHECK(y.shape() == x.shape());
        const Tensor hidden = batch_pixel_mask(ps, 1, 8, 8);
        int changed = 0;
        for (Index i = 0; i < x.size(); ++i) {
            if (hidden[i] == 0.0) CHECK(y[i] == x[i]);
            else changed += y[i] != x[i];
        }
        CHECK(changed > 0);
    }
    SUBCASE("gradient of the squared reconstruction matches central differences") {
        const std::vector<MaskPattern> ps{sample_mask(4, 4, 0.75, rng, 2), sample_mask(4, 4, 0.75, rng, 2)};
        const LossFn f = [&](ad::Graph& g, ad::Var v) {
            return ad::sum(g, ad::square(g, masked_reconstruct(g, *mae, v, ps)));
        };
        CHECK(cag::test::finite_difference_error(f, x) < 1e-4);
    }
}
