// Copyright Contributors to the gf4d Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "gf4d/camera.hpp"
#include "gf4d/deform.hpp"
#include "gf4d/field.hpp"
#include "gf4d/image.hpp"
#include "gf4d/parallel.hpp"

namespace gf4d {

constexpr double kAlphaCap = 0.99;          // per-splat opacity cap
constexpr double kAlphaMin = 1.0 / 255.0;   // contributions below this are dropped
constexpr double kTransmittanceStop = 1e-4; // compositing stops past this
constexpr double kCovRegularizer = 0.3;     // px^2 added to the 2D covariance diagonal
constexpr int kTileSize = 16;
constexpr double kDefaultCoverageAlpha = 0.5;

struct RenderChannels {
    bool rgb = true;
    bool alpha = true;
    bool depth = false;
    bool normal = false;
    bool flow = false;

    static RenderChannels all() { return {true, true, true, true, true}; }
    static RenderChannels geometry() { return {true, true, true, true, false}; }
};

struct RenderReport {
    size_t total = 0;
    size_t skipped_degenerate = 0;
    bool all_degenerate = false;
};

struct RenderOutput {
    ImageD rgb;               // H x W x 3
    ImageD alpha;             // H x W x 1
    ImageD depth;             // H x W x 1 (camera-space, alpha-weighted mean)
    ImageD normal;            // H x W x 3, camera frame, unit inside normal_valid
    MaskImage normal_valid;   // normal stencil validity
    FlowMap flow;             // pixels; validity = coverage at the render timestep
    MaskImage coverage;       // alpha > coverage threshold
    RenderReport report;
};

struct ProjectedSplat {
    Vec2 mean2d;
    double depth = 0;
    double cov_a = 0, cov_b = 0, cov_c = 0;       // 2D covariance [[a,b],[b,c]]
    double conic_a = 0, conic_b = 0, conic_c = 0; // its inverse
    double alpha_base = 0;
    double q_max = 0; // support cutoff: alpha >= kAlphaMin inside
    Vec3 color_clamped;
    double radius = 0;
    Vec2 mean2d_pair;  // projection of the paired position (flow)
    Vec2 flow_delta;   // mean2d_pair - mean2d
    bool active = false;
};

/// Standard splat projection: orthographic mean, cov2d = J Sigma J^T + 0.3 I,
/// camera-space depth.
inline ProjectedSplat project(const Gaussian3D& g, const Camera& cam) {
    ProjectedSplat p;
    Vec3 c = cam.to_camera(g.position);
    const double s = cam.pixels_per_unit();
    p.mean2d = {cam.width * 0.5 + s * c.x, cam.height * 0.5 + s * c.y};
    p.depth = c.z;

    const Mat3 R = quat_to_mat(g.orientation.normalized());
    const Vec3 d2{std::exp(2.0 * g.log_scale.x), std::exp(2.0 * g.log_scale.y),
                  std::exp(2.0 * g.log_scale.z)};
    // Sigma = R D R^T; rows of P are s * (camera right, camera down).
    Vec3 pr = cam.right() * s, pd = cam.down() * s;
    Vec3 a0 = R.transposed() * pr; // row of P expressed in the gaussian frame
    Vec3 a1 = R.transposed() * pd;
    p.cov_a = d2.x * a0.x * a0.x + d2.y * a0.y * a0.y + d2.z * a0.z * a0.z + kCovRegularizer;
    p.cov_b = d2.x * a0.x * a1.x + d2.y * a0.y * a1.y + d2.z * a0.z * a1.z;
    p.cov_c = d2.x * a1.x * a1.x + d2.y * a1.y * a1.y + d2.z * a1.z * a1.z + kCovRegularizer;

    const double det = p.cov_a * p.cov_c - p.cov_b * p.cov_b;
    if (!(det > 0) || !std::isfinite(det) || !std::isfinite(p.mean2d.x) ||
        !std::isfinite(p.mean2d.y) || !std::isfinite(p.depth)) {
        p.active = false;
        return p;
    }
    p.conic_a = p.cov_c / det;
    p.conic_b = -p.cov_b / det;
    p.conic_c = p.cov_a / det;
    p.alpha_base = logistic(g.opacity_logit);
    p.color_clamped = {clamp01(g.color.x), clamp01(g.color.y), clamp01(g.color.z)};

    if (p.alpha_base <= kAlphaMin) {
        p.active = false;
        return p;
    }
    const double lam_max =
        0.5 * (p.cov_a + p.cov_c +
               std::sqrt((p.cov_a - p.cov_c) * (p.cov_a - p.cov_c) + 4.0 * p.cov_b * p.cov_b));
    // Support radius where alpha falls to kAlphaMin; covers every contributing pixel.
    p.q_max = std::max(2.0 * std::log(p.alpha_base / kAlphaMin), 0.0);
    p.radius = std::sqrt(p.q_max * lam_max) + 1.0;
    p.active = true;
    return p;
}

/// Per-pixel forward contributions recorded for the backward replay.
struct TileContribs {
    std::vector<uint16_t> counts;          // per pixel of the tile, row-major
    std::vector<uint32_t> ids;             // contributing splat per entry
    std::vector<double> gs;                // gaussian falloff g per entry
};

struct RasterCache {
    Camera camera;
    RenderChannels channels;
    double coverage_alpha = kDefaultCoverageAlpha;
    bool has_flow = false;
    std::vector<ProjectedSplat> proj;
    std::vector<uint32_t> order; // active splats, front to back
    int tiles_x = 0, tiles_y = 0;
    std::vector<std::vector<uint32_t>> tile_lists; // per tile, front to back
    std::vector<TileContribs> contribs;            // filled when caching a render
};

namespace detail {

inline void sort_front_to_back(const std::vector<Gaussian3D>& gs, RasterCache& cache) {
    cache.order.clear();
    for (uint32_t i = 0; i < cache.proj.size(); ++i)
        if (cache.proj[i].active) cache.order.push_back(i);
    std::sort(cache.order.begin(), cache.order.end(), [&](uint32_t a, uint32_t b) {
        const ProjectedSplat &pa = cache.proj[a], &pb = cache.proj[b];
        if (pa.depth != pb.depth) return pa.depth < pb.depth;
        const Gaussian3D &ga = gs[a], &gb = gs[b];
        auto key = [](const Gaussian3D& g) {
            return std::array<double, 7>{g.position.x, g.position.y, g.position.z,
                                         g.color.x,    g.color.y,    g.color.z,
                                         g.opacity_logit};
        };
        return key(ga) < key(gb);
    });
}

inline void build_tiles(RasterCache& cache) {
    const int W = cache.camera.width, H = cache.camera.height;
    cache.tiles_x = (W + kTileSize - 1) / kTileSize;
    cache.tiles_y = (H + kTileSize - 1) / kTileSize;
    cache.tile_lists.assign(size_t(cache.tiles_x) * cache.tiles_y, {});
    for (uint32_t id : cache.order) {
        const ProjectedSplat& p = cache.proj[id];
        int x0 = std::max(0, int(std::floor(p.mean2d.x - p.radius)));
        int x1 = std::min(W - 1, int(std::ceil(p.mean2d.x + p.radius)));
        int y0 = std::max(0, int(std::floor(p.mean2d.y - p.radius)));
        int y1 = std::min(H - 1, int(std::ceil(p.mean2d.y + p.radius)));
        if (x0 > x1 || y0 > y1) continue;
        for (int ty = y0 / kTileSize; ty <= y1 / kTileSize; ++ty)
            for (int tx = x0 / kTileSize; tx <= x1 / kTileSize; ++tx)
                cache.tile_lists[size_t(ty) * cache.tiles_x + tx].push_back(id);
    }
}

} // namespace detail

/// Computes camera-frame unit normals from an alpha-blended depth map via
/// central differences of unprojected points, oriented toward the camera.
/// Pixels whose 4-neighbor stencil leaves the mask are invalid.
inline ImageD normal_from_depth(const ImageD& depth, const Camera& cam, const MaskImage& mask,
                                MaskImage* validity = nullptr) {
    const int W = depth.width, H = depth.height;
    ImageD out(W, H, 3);
    if (validity) *validity = MaskImage(W, H, 1, 0);
    const double a = 2.0 / cam.pixels_per_unit(); // world spacing of the central stencil
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            bool ok = x > 0 && x + 1 < W && y > 0 && y + 1 < H && mask.at(x, y) &&
                      mask.at(x - 1, y) && mask.at(x + 1, y) && mask.at(x, y - 1) &&
                      mask.at(x, y + 1);
            if (!ok) continue;
            const double b = depth.at(x + 1, y) - depth.at(x - 1, y);
            const double c = depth.at(x, y + 1) - depth.at(x, y - 1);
            Vec3 v{a * b, a * c, -a * a};
            Vec3 n = v.normalized();
            out.at(x, y, 0) = n.x;
            out.at(x, y, 1) = n.y;
            out.at(x, y, 2) = n.z;
            if (validity) validity->at(x, y) = 1;
        }
    return out;
}

/// Backward of normal_from_depth: scatters dL/dnormal into dL/ddepth.
inline void normal_from_depth_backward(const ImageD& depth, const Camera& cam,
                                       const MaskImage& validity, const ImageD& d_normal,
                                       ImageD& d_depth) {
    const int W = depth.width, H = depth.height;
    const double a = 2.0 / cam.pixels_per_unit();
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            if (!validity.at(x, y)) continue;
            Vec3 dn{d_normal.at(x, y, 0), d_normal.at(x, y, 1), d_normal.at(x, y, 2)};
            if (dn.x == 0 && dn.y == 0 && dn.z == 0) continue;
            const double b = depth.at(x + 1, y) - depth.at(x - 1, y);
            const double c = depth.at(x, y + 1) - depth.at(x, y - 1);
            Vec3 v{a * b, a * c, -a * a};
            Vec3 dv = normalize_backward_vec3(v, dn);
            const double db = a * dv.x, dc = a * dv.y;
            d_depth.at(x + 1, y) += db;
            d_depth.at(x - 1, y) -= db;
            d_depth.at(x, y + 1) += dc;
            d_depth.at(x, y - 1) -= dc;
        }
}

/// Forward splatting of a deformed Gaussian list. When `paired_positions` is
/// given (flow channel), per-splat 2D offsets toward the paired projection are
/// composited with this timestep's blending weights.
inline RenderOutput rasterize(const std::vector<Gaussian3D>& gaussians, const Camera& cam,
                              RenderChannels channels, RasterCache* cache = nullptr,
                              const std::vector<Vec3>* paired_positions = nullptr,
                              double coverage_alpha = kDefaultCoverageAlpha) {
    if (gaussians.empty()) throw std::invalid_argument("rasterize: empty gaussian list");
    if (paired_positions && paired_positions->size() != gaussians.size())
        throw std::invalid_argument("rasterize: paired position count mismatch");
    if (channels.normal) channels.depth = true;

    RasterCache local;
    RasterCache& rc = cache ? *cache : local;
    rc.camera = cam;
    rc.channels = channels;
    rc.coverage_alpha = coverage_alpha;
    rc.has_flow = channels.flow && paired_positions != nullptr;
    rc.proj.resize(gaussians.size());

    RenderOutput out;
    out.report.total = gaussians.size();
    for (size_t i = 0; i < gaussians.size(); ++i) {
        rc.proj[i] = project(gaussians[i], cam);
        if (rc.has_flow && rc.proj[i].active) {
            Vec2 pb;
            double zb;
            cam.project_point((*paired_positions)[i], pb, zb);
            rc.proj[i].mean2d_pair = pb;
            rc.proj[i].flow_delta = pb - rc.proj[i].mean2d;
        }
        if (!rc.proj[i].active) out.report.skipped_degenerate++;
    }
    out.report.all_degenerate = out.report.skipped_degenerate == out.report.total;

    detail::sort_front_to_back(gaussians, rc);
    detail::build_tiles(rc);

    const int W = cam.width, H = cam.height;
    out.alpha = ImageD(W, H, 1);
    if (channels.rgb) out.rgb = ImageD(W, H, 3);
    if (channels.depth) out.depth = ImageD(W, H, 1);
    if (rc.has_flow) out.flow = FlowMap(W, H);

    const bool record = cache != nullptr;
    if (record) rc.contribs.assign(size_t(rc.tiles_x) * rc.tiles_y, {});
    parallel_for(rc.tiles_x * rc.tiles_y, [&](int tile) {
        const auto& list = rc.tile_lists[size_t(tile)];
        const int tx = tile % rc.tiles_x, ty = tile / rc.tiles_x;
        const int px0 = tx * kTileSize, py0 = ty * kTileSize;
        const int px1 = std::min(W, px0 + kTileSize), py1 = std::min(H, py0 + kTileSize);
        TileContribs* tc = record ? &rc.contribs[size_t(tile)] : nullptr;
        if (tc) {
            tc->counts.assign(size_t(px1 - px0) * size_t(py1 - py0), 0);
            tc->ids.reserve(list.size());
            tc->gs.reserve(list.size());
        }
        if (list.empty()) return;
        size_t pixel_slot = 0;
        for (int py = py0; py < py1; ++py)
            for (int px = px0; px < px1; ++px, ++pixel_slot) {
                const double cx = px + 0.5, cy = py + 0.5;
                double T = 1.0, A = 0.0, D = 0.0;
                Vec3 rgb{0, 0, 0};
                Vec2 fl{0, 0};
                uint16_t hits = 0;
                for (uint32_t id : list) {
                    if (T < kTransmittanceStop) break;
                    const ProjectedSplat& p = rc.proj[id];
                    const double dx = cx - p.mean2d.x, dy = cy - p.mean2d.y;
                    const double q =
                        p.conic_a * dx * dx + 2.0 * p.conic_b * dx * dy + p.conic_c * dy * dy;
                    if (q < 0 || q > p.q_max) continue;
                    const double g = std::exp(-0.5 * q);
                    const double alpha = std::min(kAlphaCap, p.alpha_base * g);
                    if (alpha < kAlphaMin) continue;
                    const double w = alpha * T;
                    A += w;
                    if (channels.rgb) rgb += p.color_clamped * w;
                    if (channels.depth) D += w * p.depth;
                    if (rc.has_flow) fl += p.flow_delta * w;
                    T *= 1.0 - alpha;
                    if (tc) {
                        tc->ids.push_back(id);
                        tc->gs.push_back(g);
                        ++hits;
                    }
                }
                if (tc) tc->counts[pixel_slot] = hits;
                out.alpha.at(px, py) = A;
                if (channels.rgb)
                    for (int c = 0; c < 3; ++c) out.rgb.at(px, py, c) = rgb[c];
                // Depth and flow are alpha-weighted means of their splat values.
                if (channels.depth) out.depth.at(px, py) = A > kAlphaMin ? D / A : 0.0;
                if (rc.has_flow) {
                    const double inv_a = A > kAlphaMin ? 1.0 / A : 0.0;
                    out.flow.uv.at(px, py, 0) = fl.x * inv_a;
                    out.flow.uv.at(px, py, 1) = fl.y * inv_a;
                }
            }
    });

    out.coverage = MaskImage(W, H, 1, 0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            out.coverage.at(x, y) = out.alpha.at(x, y) > coverage_alpha ? 1 : 0;
    if (rc.has_flow) out.flow.validity = out.coverage;
    if (channels.normal) out.normal = normal_from_depth(out.depth, cam, out.coverage, &out.normal_valid);
    return out;
}

/// Upstream gradients for rasterize_backward; empty images mean zero.
struct RenderGrads {
    ImageD d_rgb;
    ImageD d_alpha;
    ImageD d_depth;
    ImageD d_normal;
    ImageD d_flow; // H x W x 2
};

struct SplatGrads {
    std::vector<Vec3> dposition;
    std::vector<Quat> dorientation; // at raw stored-quaternion level
    std::vector<Vec3> dlog_scale;
    std::vector<double> dopacity_logit;
    std::vector<Vec3> dcolor;
    std::vector<Vec3> dposition_pair;       // flow path, paired timestep
    std::vector<double> mean2d_grad_norm;   // densification statistic

    void resize(size_t n) {
        dposition.assign(n, Vec3{});
        dorientation.assign(n, Quat{0, 0, 0, 0});
        dlog_scale.assign(n, Vec3{});
        dopacity_logit.assign(n, 0.0);
        dcolor.assign(n, Vec3{});
        dposition_pair.assign(n, Vec3{});
        mean2d_grad_norm.assign(n, 0.0);
    }
    void add(const SplatGrads& o) {
        for (size_t i = 0; i < dposition.size(); ++i) {
            dposition[i] += o.dposition[i];
            dorientation[i] += o.dorientation[i];
            dlog_scale[i] += o.dlog_scale[i];
            dopacity_logit[i] += o.dopacity_logit[i];
            dcolor[i] += o.dcolor[i];
            dposition_pair[i] += o.dposition_pair[i];
            mean2d_grad_norm[i] += o.mean2d_grad_norm[i];
        }
    }
};

/// Reverse pass over the cached forward. All channels' gradients flow to
/// position, orientation, log-scale, opacity logit and color; the flow
/// channel also reaches the paired positions.
inline SplatGrads rasterize_backward(const std::vector<Gaussian3D>& gaussians, const Camera& cam,
                                     const RasterCache& rc, const RenderOutput& out,
                                     const RenderGrads& grads) {
    const int W = cam.width, H = cam.height;
    const size_t n = gaussians.size();
    SplatGrads sg;
    sg.resize(n);

    const bool has_rgb = !grads.d_rgb.empty();
    const bool has_alpha = !grads.d_alpha.empty();
    const bool has_flow = !grads.d_flow.empty() && rc.has_flow;

    // Fold the normal-map gradient into a depth gradient first.
    ImageD d_depth;
    if (!grads.d_depth.empty()) d_depth = grads.d_depth;
    if (!grads.d_normal.empty()) {
        if (d_depth.empty()) d_depth = ImageD(W, H, 1);
        normal_from_depth_backward(out.depth, cam, out.normal_valid, grads.d_normal, d_depth);
    }
    const bool has_depth = !d_depth.empty();

    // Per-splat accumulators for the 2D-level gradients.
    std::vector<Vec2> dmean(n, Vec2{}), dmean_pair(n, Vec2{});
    std::vector<double> dconic_a(n, 0.0), dconic_b(n, 0.0), dconic_c(n, 0.0);
    std::vector<double> dalpha_base(n, 0.0);

    if (rc.contribs.empty())
        throw std::invalid_argument("rasterize_backward: cache was not recorded");
    for (int tile = 0; tile < rc.tiles_x * rc.tiles_y; ++tile) {
        const TileContribs& tc = rc.contribs[size_t(tile)];
        const int tx = tile % rc.tiles_x, ty = tile / rc.tiles_x;
        const int px0 = tx * kTileSize, py0 = ty * kTileSize;
        const int px1 = std::min(W, px0 + kTileSize), py1 = std::min(H, py0 + kTileSize);
        if (tc.ids.empty()) continue;
        size_t cursor = 0, pixel_slot = 0;
        for (int py = py0; py < py1; ++py)
            for (int px = px0; px < px1; ++px, ++pixel_slot) {
                const uint16_t hits = tc.counts[pixel_slot];
                if (hits == 0) continue;
                const size_t begin = cursor;
                cursor += hits;
                Vec3 dL_rgb{0, 0, 0};
                double dL_a = 0, dL_d = 0;
                Vec2 dL_f{0, 0};
                if (has_rgb)
                    dL_rgb = {grads.d_rgb.at(px, py, 0), grads.d_rgb.at(px, py, 1),
                              grads.d_rgb.at(px, py, 2)};
                if (has_alpha) dL_a = grads.d_alpha.at(px, py);
                if (has_depth) dL_d = d_depth.at(px, py);
                if (has_flow) dL_f = {grads.d_flow.at(px, py, 0), grads.d_flow.at(px, py, 1)};
                if (dL_rgb.x == 0 && dL_rgb.y == 0 && dL_rgb.z == 0 && dL_a == 0 && dL_d == 0 &&
                    dL_f.x == 0 && dL_f.y == 0)
                    continue;

                // Channel totals from the forward output. Depth was stored as
                // S/A; recover the raw weighted sum S for the quotient rule.
                Vec3 tot_rgb{0, 0, 0};
                double tot_a = out.alpha.at(px, py), tot_d = 0;
                Vec2 tot_f{0, 0};
                if (has_rgb)
                    tot_rgb = {out.rgb.at(px, py, 0), out.rgb.at(px, py, 1), out.rgb.at(px, py, 2)};
                double dL_S = 0, dL_extra_A = 0;
                if (has_depth && tot_a > kAlphaMin) {
                    tot_d = out.depth.at(px, py) * tot_a; // raw S
                    dL_S = dL_d / tot_a;
                    dL_extra_A -= dL_d * tot_d / (tot_a * tot_a);
                }
                Vec2 dL_Sf{0, 0};
                if (has_flow && tot_a > kAlphaMin) {
                    tot_f = {out.flow.uv.at(px, py, 0) * tot_a,
                             out.flow.uv.at(px, py, 1) * tot_a}; // raw weighted sum
                    dL_Sf = dL_f * (1.0 / tot_a);
                    dL_extra_A -= dL_f.dot(tot_f) / (tot_a * tot_a);
                }

                const double cx = px + 0.5, cy = py + 0.5;
                double T = 1.0;
                Vec3 pre_rgb{0, 0, 0};
                double pre_a = 0, pre_d = 0;
                Vec2 pre_f{0, 0};
                for (size_t e = begin; e < begin + hits; ++e) {
                    const uint32_t id = tc.ids[e];
                    const ProjectedSplat& p = rc.proj[id];
                    const double dx = cx - p.mean2d.x, dy = cy - p.mean2d.y;
                    const double g = tc.gs[e];
                    const double alpha_uncapped = p.alpha_base * g;
                    const double alpha = std::min(kAlphaCap, alpha_uncapped);
                    const double w = alpha * T;

                    // Value-path gradients.
                    if (has_rgb) {
                        const Gaussian3D& gs = gaussians[id];
                        Vec3 dc = dL_rgb * w;
                        // Render-time clamp: out-of-range channels get no gradient.
                        if (gs.color.x < 0 || gs.color.x > 1) dc.x = 0;
                        if (gs.color.y < 0 || gs.color.y > 1) dc.y = 0;
                        if (gs.color.z < 0 || gs.color.z > 1) dc.z = 0;
                        sg.dcolor[id] += dc;
                    }
                    const double dz = dL_S != 0 ? dL_S * w : 0.0;
                    if (has_flow) dmean_pair[id] += dL_Sf * w; // d flow_delta

                    // Alpha-path gradient: d(channel)/d(alpha_i) = T v_i - suffix/(1-alpha).
                    pre_a += w;
                    const double dAlphaTotal = dL_a + dL_extra_A;
                    double dA = dAlphaTotal != 0
                                    ? dAlphaTotal * (T - (tot_a - pre_a) / (1.0 - alpha))
                                    : 0.0;
                    if (has_rgb) {
                        pre_rgb += p.color_clamped * w;
                        Vec3 suff = tot_rgb - pre_rgb;
                        dA += dL_rgb.dot(p.color_clamped * T - suff * (1.0 / (1.0 - alpha)));
                    }
                    if (dL_S != 0) {
                        pre_d += w * p.depth;
                        dA += dL_S * (p.depth * T - (tot_d - pre_d) / (1.0 - alpha));
                    }
                    if (has_flow) {
                        pre_f += p.flow_delta * w;
                        Vec2 suff = tot_f - pre_f;
                        dA += dL_Sf.dot(p.flow_delta * T - suff * (1.0 / (1.0 - alpha)));
                    }

                    double dg = 0.0;
                    if (alpha_uncapped < kAlphaCap) {
                        dalpha_base[id] += dA * g;
                        dg = dA * p.alpha_base;
                    }
                    // Depth value path enters through p.depth directly below.
                    if (dz != 0) {
                        // z = forward . (x - eye): handled at splat level; store via
                        // a per-splat depth gradient folded into dmean handling.
                        sg.dposition[id] += cam.forward() * dz;
                    }
                    if (dg != 0) {
                        const double dqm = dg * (-0.5) * g;
                        dconic_a[id] += dqm * dx * dx;
                        dconic_b[id] += dqm * 2.0 * dx * dy;
                        dconic_c[id] += dqm * dy * dy;
                        // q = d^T M d with d = pixel - mean, so dq/dmean = -2 M d.
                        const double mx = p.conic_a * dx + p.conic_b * dy;
                        const double my = p.conic_b * dx + p.conic_c * dy;
                        dmean[id] += Vec2{-2.0 * mx, -2.0 * my} * dqm;
                    }
                    T *= 1.0 - alpha;
                }
            }
    }

    // Splat-level chain: 2D gradients back to world parameters.
    const double s = cam.pixels_per_unit();
    const Vec3 r0 = cam.right(), r1 = cam.down();
    for (uint32_t id : rc.order) {
        const ProjectedSplat& p = rc.proj[id];
        const Gaussian3D& g = gaussians[id];

        Vec2 dm = dmean[id];
        if (has_flow) dm += dmean_pair[id] * -1.0; // flow_delta = mean_pair - mean
        sg.mean2d_grad_norm[id] += dm.norm();
        sg.dposition[id] += (r0 * dm.x + r1 * dm.y) * s;
        if (has_flow && (dmean_pair[id].x != 0 || dmean_pair[id].y != 0))
            sg.dposition_pair[id] += (r0 * dmean_pair[id].x + r1 * dmean_pair[id].y) * s;

        const double ab = p.alpha_base;
        sg.dopacity_logit[id] += dalpha_base[id] * ab * (1.0 - ab);

        if (dconic_a[id] != 0 || dconic_b[id] != 0 || dconic_c[id] != 0) {
            // dL/dC = -M (dL/dM) M with M = C^{-1}; both symmetric.
            const double ma = p.conic_a, mb = p.conic_b, mc = p.conic_c;
            const double ga = dconic_a[id], gb2 = dconic_b[id] * 0.5, gc = dconic_c[id];
            // t = M * dM (2x2), dC = -t * M
            const double t00 = ma * ga + mb * gb2, t01 = ma * gb2 + mb * gc;
            const double t10 = mb * ga + mc * gb2, t11 = mb * gb2 + mc * gc;
            const double dC00 = -(t00 * ma + t01 * mb);
            const double dC01 = -(t00 * mb + t01 * mc);
            const double dC10 = -(t10 * ma + t11 * mb);
            const double dC11 = -(t10 * mb + t11 * mc);

            // C = P Sigma P^T (+reg); dSigma = P^T dC P with P rows s*r0, s*r1.
            Mat3 dSigma{};
            const Vec3 p0 = r0 * s, p1 = r1 * s;
            const double rows[2][3] = {{p0.x, p0.y, p0.z}, {p1.x, p1.y, p1.z}};
            const double dC[2][2] = {{dC00, dC01}, {dC10, dC11}};
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j)
                    for (int u = 0; u < 2; ++u)
                        for (int v = 0; v < 2; ++v)
                            dSigma.m[i][j] += rows[u][i] * dC[u][v] * rows[v][j];

            // Sigma = R D R^T with D = diag(exp(2 ls)).
            const Quat qu = g.orientation.normalized();
            const Mat3 R = quat_to_mat(qu);
            const Vec3 d2{std::exp(2.0 * g.log_scale.x), std::exp(2.0 * g.log_scale.y),
                          std::exp(2.0 * g.log_scale.z)};
            Mat3 RtG = R.transposed() * dSigma; // R^T dSigma
            for (int k = 0; k < 3; ++k) {
                double dD = 0;
                for (int r = 0; r < 3; ++r) dD += RtG.m[k][r] * R.m[r][k];
                sg.dlog_scale[id][k] += dD * 2.0 * d2[k];
            }
            // dR = 2 dSigma R D
            Mat3 dR = dSigma * R;
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) dR.m[r][c] *= 2.0 * d2[c];
            Quat dq_unit{0, 0, 0, 0};
            quat_to_mat_backward(qu, dR, dq_unit);
            normalize_backward(g.orientation, dq_unit, sg.dorientation[id]);
        }
    }
    return sg;
}

/// Renders the 2D flow map between two timesteps of a field: per-Gaussian
/// projected offsets composited with the t_a geometry's blending weights.
inline FlowMap render_flow(const GaussianField& field, const Camera& cam, int t_a, int t_b,
                           double coverage_alpha = kDefaultCoverageAlpha) {
    field.check_timestep(t_a);
    field.check_timestep(t_b);
    std::vector<Gaussian3D> ga = deform(field, t_a);
    std::vector<Gaussian3D> gb = deform(field, t_b);
    std::vector<Vec3> paired(gb.size());
    for (size_t i = 0; i < gb.size(); ++i) paired[i] = gb[i].position;
    RenderChannels ch;
    ch.rgb = false;
    ch.depth = false;
    ch.flow = true;
    RenderOutput out = rasterize(ga, cam, ch, nullptr, &paired, coverage_alpha);
    return std::move(out.flow);
}

} // namespace gf4d
