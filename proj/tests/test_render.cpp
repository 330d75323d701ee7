// Copyright Contributors to the gf4d Project
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "gf4d/rasterizer.hpp"
#include "test_support.hpp"

using namespace gf4d;
using namespace gf4d::test;

namespace {

/// Independent per-pixel scalar reference: no tiles, no support radii, plain
/// front-to-back compositing per the contract.
struct OracleOut {
    ImageD rgb, alpha, depth;
    ImageD flow;
};

OracleOut oracle_render(const std::vector<Gaussian3D>& gs, const Camera& cam,
                        const std::vector<Vec3>* paired = nullptr) {
    const int W = cam.width, H = cam.height;
    OracleOut out{ImageD(W, H, 3), ImageD(W, H, 1), ImageD(W, H, 1), ImageD(W, H, 2)};
    struct P {
        Vec2 mean, pair;
        double depth, a, b, c, ab;
        Vec3 color;
    };
    std::vector<P> ps;
    for (size_t i = 0; i < gs.size(); ++i) {
        ProjectedSplat pr = project(gs[i], cam);
        if (!pr.active) continue;
        P p;
        p.mean = pr.mean2d;
        p.depth = pr.depth;
        p.a = pr.conic_a;
        p.b = pr.conic_b;
        p.c = pr.conic_c;
        p.ab = pr.alpha_base;
        p.color = pr.color_clamped;
        if (paired) {
            Vec2 pm;
            double pz;
            cam.project_point((*paired)[i], pm, pz);
            p.pair = pm;
        }
        ps.push_back(p);
    }
    std::stable_sort(ps.begin(), ps.end(), [](const P& x, const P& y) { return x.depth < y.depth; });
    for (int py = 0; py < H; ++py)
        for (int px = 0; px < W; ++px) {
            double T = 1, A = 0, D = 0;
            Vec3 rgb{0, 0, 0};
            Vec2 fl{0, 0};
            for (const P& p : ps) {
                if (T < kTransmittanceStop) break;
                double dx = px + 0.5 - p.mean.x, dy = py + 0.5 - p.mean.y;
                double q = p.a * dx * dx + 2 * p.b * dx * dy + p.c * dy * dy;
                double alpha = std::min(kAlphaCap, p.ab * std::exp(-0.5 * q));
                if (alpha < kAlphaMin) continue;
                double w = alpha * T;
                A += w;
                rgb += p.color * w;
                D += w * p.depth;
                if (paired) fl += (p.pair - p.mean) * w;
                T *= 1 - alpha;
            }
            out.alpha.at(px, py) = A;
            for (int c = 0; c < 3; ++c) out.rgb.at(px, py, c) = rgb[c];
            out.depth.at(px, py) = A > kAlphaMin ? D / A : 0.0;
            double inv_a = A > kAlphaMin ? 1.0 / A : 0.0;
            out.flow.at(px, py, 0) = fl.x * inv_a;
            out.flow.at(px, py, 1) = fl.y * inv_a;
        }
    return out;
}

std::vector<Gaussian3D> random_splats(size_t n, uint64_t seed, double spread = 0.4) {
    std::mt19937_64 rng(seed);
    std::vector<Gaussian3D> gs(n);
    for (auto& g : gs) {
        g.position = vrand(rng, -spread, spread);
        g.orientation =
            Quat{urand(rng, -1, 1), urand(rng, -1, 1), urand(rng, -1, 1), urand(rng, -1, 1)}
                .normalized();
        g.log_scale = vrand(rng, -2.8, -2.0);
        g.opacity_logit = urand(rng, -0.5, 1.2);
        g.color = {urand(rng, 0.1, 0.9), urand(rng, 0.1, 0.9), urand(rng, 0.1, 0.9)};
    }
    return gs;
}

Camera test_cam(int size = 16) { return make_orbit_camera(30, 15, 3.0, 1.0, size, size); }

} // namespace

TEST_CASE("project: center, covariance, pixel shift") {
    Camera cam = make_orbit_camera(0, 0, 3.0, 1.2, 64, 48);
    Gaussian3D g;
    g.position = {0, 0, 0};
    g.log_scale = {std::log(0.05), std::log(0.05), std::log(0.05)};
    ProjectedSplat p = project(g, cam);
    CHECK(p.mean2d.x == doctest::Approx(32.0).epsilon(1e-9));
    CHECK(p.mean2d.y == doctest::Approx(24.0).epsilon(1e-9));

    // isotropic scale s: cov2d = (s*W/(2e))^2 I + 0.3 I
    double s_px = 0.05 * 64 / (2 * 1.2);
    CHECK(p.cov_a == doctest::Approx(s_px * s_px + 0.3).epsilon(1e-9));
    CHECK(p.cov_c == doctest::Approx(s_px * s_px + 0.3).epsilon(1e-9));
    CHECK(p.cov_b == doctest::Approx(0.0).epsilon(1e-9));

    // translate by right-axis * half_extent: mean shifts by W/2 px
    Gaussian3D g2 = g;
    g2.position = g.position + cam.right() * 1.2;
    ProjectedSplat p2 = project(g2, cam);
    CHECK(p2.mean2d.x - p.mean2d.x == doctest::Approx(32.0).epsilon(1e-9));
    CHECK(p2.mean2d.y == doctest::Approx(p.mean2d.y).epsilon(1e-9));
}

TEST_CASE("rasterize: single splat formula at its mean; empty support") {
    // With W = H = 17 the image center (8.5, 8.5) is exactly pixel (8,8)'s center.
    Camera cam = make_orbit_camera(0, 0, 3.0, 1.0, 17, 17);
    Gaussian3D g;
    g.position = cam.center + cam.forward() * 3.0;
    g.log_scale = {-2.3, -2.3, -2.3};
    g.opacity_logit = 0.7;
    g.color = {0.3, 0.6, 0.9};
    auto out = rasterize({g}, cam, RenderChannels::all());
    // The splat lands exactly on the center of pixel (8,8).
    double want_alpha = logistic(0.7);
    CHECK(out.alpha.at(8, 8) == doctest::Approx(want_alpha).epsilon(1e-12));
    CHECK(out.rgb.at(8, 8, 0) == doctest::Approx(want_alpha * 0.3).epsilon(1e-12));
    CHECK(out.rgb.at(8, 8, 2) == doctest::Approx(want_alpha * 0.9).epsilon(1e-12));

    CHECK(out.alpha.at(0, 0) == 0.0);
    CHECK(out.rgb.at(0, 16, 1) == 0.0);
    CHECK_THROWS_AS(rasterize({}, cam, RenderChannels::all()), std::invalid_argument);
}

TEST_CASE("rasterize matches the per-pixel scalar oracle") {
    Camera cam = test_cam(32);
    auto gs = random_splats(20, 5);
    std::vector<Vec3> paired(gs.size());
    std::mt19937_64 rng(6);
    for (size_t i = 0; i < gs.size(); ++i) paired[i] = gs[i].position + vrand(rng, -0.05, 0.05);

    RenderChannels ch = RenderChannels::all();
    auto out = rasterize(gs, cam, ch, nullptr, &paired);
    auto ref = oracle_render(gs, cam, &paired);
    double worst = 0;
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            worst = std::max(worst, std::abs(out.alpha.at(x, y) - ref.alpha.at(x, y)));
            for (int c = 0; c < 3; ++c)
                worst = std::max(worst, std::abs(out.rgb.at(x, y, c) - ref.rgb.at(x, y, c)));
            worst = std::max(worst, std::abs(out.depth.at(x, y) - ref.depth.at(x, y)));
            for (int c = 0; c < 2; ++c)
                worst = std::max(worst, std::abs(out.flow.uv.at(x, y, c) - ref.flow.at(x, y, c)));
        }
    CHECK(worst <= 1e-6);
}

TEST_CASE("rendering is invariant to input order") {
    Camera cam = test_cam(24);
    auto gs = random_splats(15, 7);
    auto out1 = rasterize(gs, cam, RenderChannels::all());
    std::mt19937_64 rng(8);
    std::shuffle(gs.begin(), gs.end(), rng);
    auto out2 = rasterize(gs, cam, RenderChannels::all());
    CHECK(out1.rgb.data == out2.rgb.data);
    CHECK(out1.alpha.data == out2.alpha.data);
    CHECK(out1.depth.data == out2.depth.data);
}

TEST_CASE("compositing weights sum to alpha; alpha never exceeds one") {
    Camera cam = test_cam(24);
    auto gs = random_splats(40, 9, 0.2); // heavy overlap
    auto out = rasterize(gs, cam, RenderChannels::all());
    for (double a : out.alpha.data) {
        CHECK(a >= 0.0);
        CHECK(a <= 1.0 + 1e-12);
    }
}

TEST_CASE("rasterize gradients match central finite differences") {
    Camera cam = test_cam(16);
    auto gs = random_splats(8, 11);
    std::vector<Vec3> paired(gs.size());
    std::mt19937_64 rng(12);
    for (size_t i = 0; i < gs.size(); ++i) paired[i] = gs[i].position + vrand(rng, -0.04, 0.04);

    RenderChannels ch = RenderChannels::all();
    RasterCache cache;
    auto base = rasterize(gs, cam, ch, &cache, &paired);

    // Frozen probe weights. The depth and normal probes are restricted to a
    // stable coverage interior: that is where their consumers (the normal
    // path and the normal loss) read them, and the alpha-weighted-mean depth
    // is ill-conditioned on nearly empty fringe pixels.
    MaskImage interior = erode_mask(base.normal_valid, 2);
    RenderGrads rg;
    rg.d_rgb = ImageD(16, 16, 3);
    rg.d_alpha = ImageD(16, 16, 1);
    rg.d_depth = ImageD(16, 16, 1);
    rg.d_normal = ImageD(16, 16, 3);
    rg.d_flow = ImageD(16, 16, 2);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            for (int c = 0; c < 3; ++c) rg.d_rgb.at(x, y, c) = urand(rng, -1, 1);
            rg.d_alpha.at(x, y) = urand(rng, -1, 1);
            for (int c = 0; c < 2; ++c) rg.d_flow.at(x, y, c) = urand(rng, -1, 1);
            if (interior.at(x, y)) {
                rg.d_depth.at(x, y) = urand(rng, -1, 1);
                for (int c = 0; c < 3; ++c) rg.d_normal.at(x, y, c) = urand(rng, -1, 1);
            }
        }

    auto probe = [&](const std::vector<Gaussian3D>& g, const std::vector<Vec3>& pp) {
        auto out = rasterize(g, cam, ch, nullptr, &pp);
        double L = 0;
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) {
                for (int c = 0; c < 3; ++c) L += rg.d_rgb.at(x, y, c) * out.rgb.at(x, y, c);
                L += rg.d_alpha.at(x, y) * out.alpha.at(x, y);
                L += rg.d_depth.at(x, y) * out.depth.at(x, y);
                for (int c = 0; c < 2; ++c) L += rg.d_flow.at(x, y, c) * out.flow.uv.at(x, y, c);
                if (interior.at(x, y) && out.normal_valid.at(x, y))
                    for (int c = 0; c < 3; ++c) L += rg.d_normal.at(x, y, c) * out.normal.at(x, y, c);
            }
        return L;
    };

    SplatGrads sg = rasterize_backward(gs, cam, cache, base, rg);

    const double h = 1e-4;
    double worst = 0;
    auto check_param = [&](double* slot, double analytic) {
        double orig = *slot;
        *slot = orig + h;
        double hi = probe(gs, paired);
        *slot = orig - h;
        double lo = probe(gs, paired);
        *slot = orig;
        double fd = (hi - lo) / (2 * h);
        if (std::abs(fd) < 5e-5 && std::abs(analytic) < 5e-5) return;
        worst = std::max(worst, rel_err(analytic, fd, 1e-4));
    };
    for (size_t i = 0; i < gs.size(); ++i) {
        for (int c = 0; c < 3; ++c) check_param(&gs[i].position[c], sg.dposition[i][c]);
        check_param(&gs[i].orientation.w, sg.dorientation[i].w);
        check_param(&gs[i].orientation.x, sg.dorientation[i].x);
        check_param(&gs[i].orientation.y, sg.dorientation[i].y);
        check_param(&gs[i].orientation.z, sg.dorientation[i].z);
        for (int c = 0; c < 3; ++c) check_param(&gs[i].log_scale[c], sg.dlog_scale[i][c]);
        check_param(&gs[i].opacity_logit, sg.dopacity_logit[i]);
        for (int c = 0; c < 3; ++c) check_param(&gs[i].color[c], sg.dcolor[i][c]);
        for (int c = 0; c < 3; ++c) check_param(&paired[i][c], sg.dposition_pair[i][c]);
    }
    CHECK(worst <= 1e-3);
}

TEST_CASE("render_flow: zero at equal timesteps, translation, static field") {
    // Dense, near-opaque cluster so interior alpha saturates.
    GaussianField f = random_field(150, 5, 13, 3, false);
    for (float& o : f.opacity_logits) o = 2.5f;
    Camera cam = test_cam(32);

    FlowMap same = render_flow(f, cam, 2, 2);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            if (same.validity.at(x, y)) CHECK(same.at(x, y).norm() <= 1e-12);

    // Static field (identity deformation everywhere): zero flow inside coverage.
    FlowMap stat = render_flow(f, cam, 1, 3);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            if (stat.validity.at(x, y)) CHECK(stat.at(x, y).norm() <= 1e-9);

    // Rigid translation: every per-splat offset equals the projected
    // displacement, so the composited flow is exactly alpha * v_px.
    Vec3 v{0.08, -0.05, 0.03};
    GaussianField ft = f;
    ft.scripted_motions = {RigidMotion{}, RigidMotion{}, RigidMotion{{1, 0, 0, 0}, {0, 0, 0}, v}};
    FlowMap fl = render_flow(ft, cam, 1, 3);
    double s = cam.pixels_per_unit();
    Vec2 expect{s * cam.right().dot(v), s * cam.down().dot(v)};
    // Identical per-splat offsets: the alpha-weighted mean recovers the
    // projected displacement exactly wherever any splat contributes.
    int checked = 0;
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            if (!fl.validity.at(x, y)) continue;
            CHECK((fl.at(x, y) - expect).norm() <= 1e-9);
            ++checked;
        }
    CHECK(checked > 100);
}

TEST_CASE("normal_from_depth: flat plane, tilted plane, narrow mask") {
    Camera cam = make_orbit_camera(0, 0, 3.0, 1.0, 33, 33);
    const int W = 33, H = 33;

    ImageD depth(W, H, 1, 2.0);
    MaskImage mask(W, H, 1, 1);
    MaskImage valid;
    ImageD n = normal_from_depth(depth, cam, mask, &valid);
    for (int y = 1; y < H - 1; ++y)
        for (int x = 1; x < W - 1; ++x) {
            CHECK(valid.at(x, y) == 1);
            CHECK(std::abs(n.at(x, y, 0) - 0.0) <= 1e-6);
            CHECK(std::abs(n.at(x, y, 2) - (-1.0)) <= 1e-6);
        }
    CHECK(valid.at(0, 5) == 0);

    // Tilted plane z = z0 + a * x_cam.
    double a = 0.35;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            Vec2 xy = cam.pixel_to_camera_xy(x + 0.5, y + 0.5);
            depth.at(x, y) = 2.0 + a * xy.x;
        }
    n = normal_from_depth(depth, cam, mask, &valid);
    Vec3 want = Vec3{a, 0, -1}.normalized();
    for (int y = 2; y < H - 2; ++y)
        for (int x = 2; x < W - 2; ++x) {
            Vec3 got{n.at(x, y, 0), n.at(x, y, 1), n.at(x, y, 2)};
            CHECK((got - want).norm() <= 1e-3);
            CHECK(std::abs(got.norm() - 1.0) <= 1e-6);
        }

    // One-pixel-wide mask: every stencil leaves it.
    MaskImage thin(W, H, 1, 0);
    for (int y = 0; y < H; ++y) thin.at(16, y) = 1;
    normal_from_depth(depth, cam, thin, &valid);
    for (uint8_t v : valid.data) CHECK(v == 0);
}

TEST_CASE("degenerate covariances are skipped and flagged") {
    Camera cam = test_cam(16);
    Gaussian3D g;
    g.position = {0, 0, 0};
    g.log_scale = {std::nan(""), 0, 0};
    auto out = rasterize({g}, cam, RenderChannels::all());
    CHECK(out.report.all_degenerate);
    CHECK(out.report.skipped_degenerate == 1);
    for (double a : out.alpha.data) CHECK(a == 0.0);
}
