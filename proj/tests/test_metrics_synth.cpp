// Copyright Contributors to the gf4d Project
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "gf4d/metrics.hpp"
#include "gf4d/synth.hpp"
#include "test_support.hpp"

using namespace gf4d;
using namespace gf4d::test;

namespace {

ImageD random_image(int w, int h, int c, uint64_t seed) {
    std::mt19937_64 rng(seed);
    ImageD img(w, h, c);
    for (double& v : img.data) v = urand(rng);
    return img;
}

SceneSpec small_spec(SceneKind kind) {
    SceneSpec s;
    s.kind = kind;
    s.gaussian_count = 220;
    s.frames = 4;
    s.views = 4;
    s.image_size = 64;
    s.velocity = {0.06, -0.03, 0.0};
    s.angular_rate = 0.09;
    return s;
}

} // namespace

TEST_CASE("psnr: cap, formula, symmetry, oracle, empty mask") {
    ImageD a = random_image(16, 16, 3, 1);
    MaskImage m(16, 16, 1, 1);
    CHECK(psnr(a, a, m) == 100.0);

    // MSE 0.01 with peak 1 -> 20 dB.
    ImageD b = a;
    for (double& v : b.data) v += 0.1;
    CHECK(psnr(a, b, m) == doctest::Approx(20.0).epsilon(1e-9));

    ImageD c = random_image(16, 16, 3, 2);
    CHECK(psnr(a, c, m) == doctest::Approx(psnr(c, a, m)).epsilon(1e-12));

    double se = 0;
    size_t cnt = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = a.data[i] - c.data[i];
        se += d * d;
        ++cnt;
    }
    CHECK(psnr(a, c, m) == doctest::Approx(10 * std::log10(1.0 / (se / cnt))).epsilon(1e-7));

    MaskImage empty(16, 16, 1, 0);
    CHECK_THROWS_AS(psnr(a, c, empty), UndefinedResult);
}

TEST_CASE("ssim: identity, dssim consistency, constant closed form") {
    ImageD a = random_image(24, 24, 3, 3);
    ImageD b = random_image(24, 24, 3, 4);
    MaskImage m(24, 24, 1, 1);
    CHECK(ssim(a, a, m) == doctest::Approx(1.0).epsilon(1e-12));

    double d = dssim_loss(a, b, m).value;
    CHECK(ssim(a, b, m) == doctest::Approx(1.0 - 2.0 * d).epsilon(1e-12));

    double c1 = 0.3, c2 = 0.7;
    ImageD ca(24, 24, 3, c1), cb(24, 24, 3, c2);
    double want = (2 * c1 * c2 + 1e-4) / (c1 * c1 + c2 * c2 + 1e-4);
    CHECK(ssim(ca, cb, m) == doctest::Approx(want).epsilon(1e-9));

    MaskImage empty(24, 24, 1, 0);
    CHECK_THROWS_AS(ssim(a, b, empty), UndefinedResult);
}

TEST_CASE("endpoint error: identity, 3-4-5, oracle, metric axioms") {
    FlowMap a{12, 12}, b{12, 12}, c{12, 12};
    std::mt19937_64 rng(5);
    for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x) {
            a.set(x, y, {urand(rng, -2, 2), urand(rng, -2, 2)});
            b.set(x, y, {urand(rng, -2, 2), urand(rng, -2, 2)});
            c.set(x, y, {urand(rng, -2, 2), urand(rng, -2, 2)});
        }
    MaskImage m(12, 12, 1, 1);
    CHECK(endpoint_error(a, a, m) == 0.0);

    FlowMap shifted{12, 12};
    for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x) shifted.set(x, y, a.at(x, y) + Vec2{3, 4});
    CHECK(endpoint_error(a, shifted, m) == doctest::Approx(5.0).epsilon(1e-12));

    double oracle = 0;
    for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x) oracle += (a.at(x, y) - b.at(x, y)).norm();
    CHECK(endpoint_error(a, b, m) == doctest::Approx(oracle / 144).epsilon(1e-12));

    CHECK(endpoint_error(a, b, m) == doctest::Approx(endpoint_error(b, a, m)).epsilon(1e-12));
    double ab = endpoint_error(a, b, m), bc = endpoint_error(b, c, m), ac = endpoint_error(a, c, m);
    CHECK(ac <= ab + bc + 1e-6);

    MaskImage empty(12, 12, 1, 0);
    CHECK_THROWS_AS(endpoint_error(a, b, empty), UndefinedResult);
}

TEST_CASE("static scene: all pairwise flows identically zero") {
    SyntheticScene scene = make_scene(small_spec(SceneKind::StaticSphere));
    for (int k = 1; k <= scene.spec.views; ++k) {
        FlowMap f = analytic_flow(scene, 1, 4, k);
        size_t valid = 0;
        for (int y = 0; y < f.height(); ++y)
            for (int x = 0; x < f.width(); ++x)
                if (f.validity.at(x, y)) {
                    CHECK(f.at(x, y).norm() <= 1e-12);
                    ++valid;
                }
        CHECK(valid > 100);
    }
}

TEST_CASE("translation scene: analytic flow is the projected velocity") {
    SyntheticScene scene = make_scene(small_spec(SceneKind::RigidTranslation));
    for (int k = 1; k <= scene.spec.views; ++k) {
        const Camera& cam = scene.cameras[size_t(k - 1)];
        double s = cam.pixels_per_unit();
        Vec3 v = scene.spec.velocity * 2.0; // frames 1 -> 3
        Vec2 want{s * cam.right().dot(v), s * cam.down().dot(v)};
        FlowMap f = analytic_flow(scene, 1, 3, k);
        size_t valid = 0;
        for (int y = 0; y < f.height(); ++y)
            for (int x = 0; x < f.width(); ++x)
                if (f.validity.at(x, y)) {
                    CHECK((f.at(x, y) - want).norm() <= 1e-9);
                    ++valid;
                }
        CHECK(valid > 100);
    }
}

TEST_CASE("rotation scene: front-view flow magnitude grows linearly with radius") {
    SyntheticScene scene = make_scene(small_spec(SceneKind::RigidRotation));
    const Camera& cam = scene.cameras[0];
    FlowMap f = analytic_flow(scene, 1, 2, 1);
    Vec2 center;
    double cz;
    cam.project_point(scene.bodies[0].center, center, cz);
    const double ang = scene.spec.angular_rate;
    const double chord = 2.0 * std::sin(ang / 2.0);
    for (int y = 0; y < f.height(); ++y)
        for (int x = 0; x < f.width(); ++x) {
            if (!f.validity.at(x, y)) continue;
            double radius = (Vec2{x + 0.5, y + 0.5} - center).norm();
            CHECK(f.at(x, y).norm() == doctest::Approx(radius * chord).epsilon(1e-6));
        }
}

TEST_CASE("scene flows satisfy forward-backward consistency by construction") {
    for (SceneKind kind : {SceneKind::RigidTranslation, SceneKind::RigidRotation,
                           SceneKind::TwoBodyArticulation}) {
        SyntheticScene scene = make_scene(small_spec(kind));
        for (int k = 1; k <= scene.spec.views; ++k) {
            FlowMap fwd = analytic_flow(scene, 2, 3, k);
            FlowMap bwd = analytic_flow(scene, 3, 2, k);
            double worst_exact = 0, worst_sampled = 0;
            size_t used = 0;
            for (int y = 0; y < fwd.height(); ++y)
                for (int x = 0; x < fwd.width(); ++x) {
                    if (!fwd.validity.at(x, y)) continue;
                    Vec2 fl = fwd.at(x, y);
                    double sx = x + fl.x, sy = y + fl.y;
                    // Generator-level composition: the backward flow evaluated
                    // at the exact landing point cancels the forward flow.
                    Vec2 back_exact;
                    if (flow_at_point(scene, 3, 2, k, sx + 0.5, sy + 0.5, &back_exact)) {
                        worst_exact = std::max(worst_exact, (fl + back_exact).norm());
                        ++used;
                    }
                    // Map-level composition carries bilinear resampling error
                    // of the curved field; it only needs to be far below the
                    // occlusion threshold.
                    if (bilinear_taps_valid(bwd.uv, sx, sy, &bwd.validity)) {
                        Vec2 back{sample_bilinear(bwd.uv, sx, sy, 0),
                                  sample_bilinear(bwd.uv, sx, sy, 1)};
                        worst_sampled = std::max(worst_sampled, (fl + back).norm());
                    }
                }
            CHECK(used > 50);
            CHECK(worst_exact <= 1e-4);
            CHECK(worst_sampled <= 0.05);
        }
    }
}

TEST_CASE("rendered sequence has complete slots and plausible coverage") {
    SceneSpec spec = small_spec(SceneKind::RigidTranslation);
    SyntheticScene scene = make_scene(spec);
    MultiviewSequence seq = render_scene_sequence(scene);
    CHECK(seq.frames == spec.frames);
    CHECK(seq.views() == spec.views);
    for (int n = 1; n <= spec.frames; ++n)
        for (int k = 1; k <= spec.views; ++k) {
            CHECK(seq.has_slot(n, k));
            size_t s = seq.slot(n, k);
            size_t cov = 0;
            for (uint8_t b : seq.masks[s].data) cov += b;
            CHECK(cov > 300); // the sphere is visibly framed
            // Normals are unit-length on covered pixels of the analytic disk.
            for (int y = 0; y < 64; ++y)
                for (int x = 0; x < 64; ++x) {
                    Vec3 nv{seq.normals[s].at(x, y, 0), seq.normals[s].at(x, y, 1),
                            seq.normals[s].at(x, y, 2)};
                    if (nv.norm() > 0) {
                        CHECK(std::abs(nv.norm() - 1.0) <= 1e-9);
                        CHECK(nv.z <= 0.0);
                    }
                }
        }
    CHECK(seq.flows_fwd.size() == size_t(spec.frames - 1) * spec.views);
}

TEST_CASE("unknown generator kind is rejected") {
    CHECK_THROWS_AS(scene_kind_from_string("helix"), std::invalid_argument);
    Config cfg;
    cfg.set("kind", "translation");
    cfg.set("bogus_key", "1");
    CHECK_THROWS_AS(scene_spec_from_config(cfg), std::invalid_argument);
}
