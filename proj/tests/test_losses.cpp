// Copyright Contributors to the gf4d Project
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "gf4d/losses.hpp"
#include "test_support.hpp"

using namespace gf4d;
using namespace gf4d::test;

namespace {

ImageD random_image(int w, int h, int c, uint64_t seed, double lo = 0.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    ImageD img(w, h, c);
    for (double& v : img.data) v = urand(rng, lo, hi);
    return img;
}

MaskImage full_mask(int w, int h) { return MaskImage(w, h, 1, 1); }

/// Naive windowed SSIM: per-center weighted moments with the 11x11 Gaussian
/// kernel, no convolution tricks.
double ssim_reference(const ImageD& x, const ImageD& y, const MaskImage& mask) {
    std::vector<double> k(11);
    double ksum = 0;
    for (int i = 0; i < 11; ++i) {
        double d = i - 5;
        k[i] = std::exp(-d * d / (2 * 1.5 * 1.5));
        ksum += k[i];
    }
    for (double& v : k) v /= ksum;
    double sum = 0;
    size_t n = 0;
    for (int cy = 5; cy < x.height - 5; ++cy)
        for (int cx = 5; cx < x.width - 5; ++cx) {
            if (!mask.at(cx, cy)) continue;
            double mx = 0, my = 0, ex2 = 0, ey2 = 0, exy = 0;
            for (int dy = -5; dy <= 5; ++dy)
                for (int dx = -5; dx <= 5; ++dx) {
                    double w = k[dx + 5] * k[dy + 5];
                    double a = x.at(cx + dx, cy + dy), b = y.at(cx + dx, cy + dy);
                    mx += w * a;
                    my += w * b;
                    ex2 += w * a * a;
                    ey2 += w * b * b;
                    exy += w * a * b;
                }
            double sx2 = ex2 - mx * mx, sy2 = ey2 - my * my, sxy = exy - mx * my;
            double c1 = 1e-4, c2 = 9e-4;
            sum += ((2 * mx * my + c1) * (2 * sxy + c2)) /
                   ((mx * mx + my * my + c1) * (sx2 + sy2 + c2));
            ++n;
        }
    return sum / double(n);
}

} // namespace

TEST_CASE("photometric loss: identical, constant offset, scalar oracle") {
    ImageD a = random_image(12, 9, 3, 1);
    MaskImage m = full_mask(12, 9);
    CHECK(photometric_loss(a, a, m).value == 0.0);

    ImageD b = a;
    for (double& v : b.data) v += 0.1;
    CHECK(photometric_loss(b, a, m).value == doctest::Approx(0.1).epsilon(1e-12));

    // Random pair against a direct per-pixel oracle.
    ImageD c = random_image(12, 9, 3, 2);
    std::mt19937_64 rng(3);
    MaskImage pm(12, 9, 1, 0);
    for (auto& v : pm.data) v = rng() % 2;
    double oracle = 0;
    size_t count = 0;
    for (int y = 0; y < 9; ++y)
        for (int x = 0; x < 12; ++x)
            if (pm.at(x, y)) {
                ++count;
                for (int ch = 0; ch < 3; ++ch) oracle += std::abs(a.at(x, y, ch) - c.at(x, y, ch));
            }
    oracle /= double(count) * 3;
    CHECK(photometric_loss(a, c, pm).value == doctest::Approx(oracle).epsilon(1e-7));

    MaskImage empty(12, 9, 1, 0);
    auto r = photometric_loss(a, c, empty);
    CHECK(r.value == 0.0);
    CHECK(r.empty_domain);
    CHECK(r.pixels == 0);
}

TEST_CASE("mask loss: identical, all-wrong, oracle") {
    ImageD alpha(8, 8, 1, 0.0);
    MaskImage ones(8, 8, 1, 1);
    MaskImage zeros(8, 8, 1, 0);
    CHECK(mask_loss(alpha, zeros).value == 0.0);
    CHECK(mask_loss(alpha, ones).value == doctest::Approx(1.0));

    ImageD a = random_image(8, 8, 1, 4);
    std::mt19937_64 rng(5);
    MaskImage m(8, 8, 1, 0);
    for (auto& v : m.data) v = rng() % 2;
    double oracle = 0;
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) oracle += std::abs(a.at(x, y) - (m.at(x, y) ? 1.0 : 0.0));
    CHECK(mask_loss(a, m).value == doctest::Approx(oracle / 64.0).epsilon(1e-12));
}

TEST_CASE("dssim: identical is zero, negative image approaches max, oracle") {
    ImageD a = random_image(24, 24, 3, 6);
    MaskImage m = full_mask(24, 24);
    CHECK(dssim_loss(a, a, m).value == doctest::Approx(0.0).epsilon(1e-12));

    ImageD black(24, 24, 3, 0.0), white(24, 24, 3, 1.0);
    double d = dssim_loss(black, white, m).value;
    CHECK(d >= 0.4995);
    CHECK(d <= 0.5);

    ImageD b = random_image(24, 24, 3, 7);
    double got = 1.0 - 2.0 * dssim_loss(a, b, m).value;
    double want = ssim_reference(detail::luminance(a), detail::luminance(b), m);
    CHECK(got == doctest::Approx(want).epsilon(1e-5));
}

TEST_CASE("dssim gradient matches finite differences") {
    ImageD a = random_image(20, 20, 3, 8);
    ImageD b = random_image(20, 20, 3, 9);
    MaskImage m = full_mask(20, 20);
    ImageD grad(20, 20, 3);
    dssim_loss(a, b, m, &grad);

    std::mt19937_64 rng(10);
    const double h = 1e-5;
    double worst = 0;
    for (int trial = 0; trial < 60; ++trial) {
        size_t idx = rng() % a.data.size();
        double orig = a.data[idx];
        a.data[idx] = orig + h;
        double hi = dssim_loss(a, b, m).value;
        a.data[idx] = orig - h;
        double lo = dssim_loss(a, b, m).value;
        a.data[idx] = orig;
        worst = std::max(worst, rel_err(grad.data[idx], (hi - lo) / (2 * h), 1e-7));
    }
    CHECK(worst <= 1e-3);
}

TEST_CASE("flow loss: identical, uniform discrepancy, occlusion invariance") {
    FlowMap fa{16, 16}, fb{16, 16};
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            fa.set(x, y, {0.5, -0.25});
            fb.set(x, y, {0.5, -0.25});
        }
    MaskImage no_occ(16, 16, 1, 0);
    CHECK(flow_loss(fa, fb, no_occ).value == 0.0);

    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) fb.set(x, y, {fa.at(x, y).x + 1.0, fa.at(x, y).y});
    CHECK(flow_loss(fa, fb, no_occ).value == doctest::Approx(1.0).epsilon(1e-12));

    // Self-consistent rotational flow pair: empty occlusion mask, zero loss
    // against itself.
    const double ang = 0.15;
    FlowMap fwd{32, 32}, bwd{32, 32};
    auto rot_flow = [&](double a, double px, double py) {
        double cx = px - 16.0, cy = py - 16.0;
        double rx = std::cos(a) * cx - std::sin(a) * cy;
        double ry = std::sin(a) * cx + std::cos(a) * cy;
        return Vec2{rx - cx, ry - cy};
    };
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            fwd.set(x, y, rot_flow(ang, x + 0.5, y + 0.5));
            bwd.set(x, y, rot_flow(-ang, x + 0.5, y + 0.5));
        }
    MaskImage occ = compute_occlusion_mask(fwd, bwd, 1.5);
    size_t interior_occluded = 0;
    for (int y = 4; y < 28; ++y)
        for (int x = 4; x < 28; ++x) interior_occluded += occ.at(x, y);
    CHECK(interior_occluded == 0);
    CHECK(flow_loss(fwd, fwd, occ).value == 0.0);

    // Perturbing the reference inside the occlusion mask leaves the loss
    // bit-identical.
    FlowMap ref = fwd;
    MaskImage occ2(32, 32, 1, 0);
    std::mt19937_64 rng(11);
    for (auto& v : occ2.data) v = rng() % 4 == 0;
    double before = flow_loss(fwd, ref, occ2).value;
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            if (occ2.at(x, y)) ref.set(x, y, {urand(rng, -9, 9), urand(rng, -9, 9)});
    double after = flow_loss(fwd, ref, occ2).value;
    CHECK(before == after);

    // Zero usable pixels flagged.
    MaskImage all_occ(16, 16, 1, 1);
    auto r = flow_loss(fa, fb, all_occ);
    CHECK(r.value == 0.0);
    CHECK(r.empty_domain);
}

TEST_CASE("normal loss: identical and opposite normals") {
    ImageD n1(6, 6, 3), n2(6, 6, 3);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 6; ++x) {
            n1.at(x, y, 2) = -1.0;
            n2.at(x, y, 2) = 1.0;
        }
    MaskImage m = full_mask(6, 6);
    CHECK(normal_loss(n1, n1, m).value == 0.0);
    // Mean over the three components: |0|+|0|+|-2| over 3.
    CHECK(normal_loss(n1, n2, m).value == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("total loss: appendix weights, zeros, linearity, NaN abort") {
    LossWeights w;
    LossTerms unit{1, 1, 1, 1, 1, 1};
    CHECK(total_loss(unit, w) == 6.0);

    CHECK(total_loss(LossTerms{}, w) == 0.0);

    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        LossTerms t{urand(rng), urand(rng), urand(rng), urand(rng), urand(rng), urand(rng)};
        double base = total_loss(t, w);
        double c = urand(rng, 0.5, 3.0);
        LossWeights w2 = w;
        w2.flow *= c;
        // Scaling one weight scales exactly that term's contribution.
        CHECK(total_loss(t, w2) - base ==
              doctest::Approx((c - 1.0) * w.flow * t.flow).epsilon(1e-12));
        LossTerms single{};
        single.normal = t.normal;
        CHECK(total_loss(single, w) == doctest::Approx(w.normal * t.normal).epsilon(1e-15));
    }

    LossTerms bad{1, std::nan(""), 1, 1, 1, 1};
    CHECK_THROWS_WITH_AS(total_loss(bad, w), "non-finite loss term: mask", NumericalAbort);
}

TEST_CASE("loss report line is stable and total-consistent") {
    LossReport rep;
    rep.iteration = 42;
    rep.stage = "coarse";
    rep.t_a = 3;
    rep.t_b = 4;
    rep.terms = {0.25, 0.5, 0.125, 0.0625, 1.0, 2.0};
    LossWeights w;
    rep.total = total_loss(rep.terms, w);
    double manual = w.rendering * 0.25 + w.mask * 0.5 + w.dssim * 0.125 + w.arap * 0.0625 +
                    w.normal * 1.0 + w.flow * 2.0;
    CHECK(std::abs(rep.total - manual) <= 1e-6);
    std::string line = rep.to_line();
    CHECK(line.find("iter=42 stage=coarse ta=3 tb=4 Lr=0.25") == 0);
    CHECK(line.find("occl=") != std::string::npos);
}
