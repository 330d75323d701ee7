// Copyright Contributors to the gf4d Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "gf4d/io.hpp"
#include "gf4d/rasterizer.hpp"
#include "gf4d/sequence.hpp"

namespace gf4d {

enum class SceneKind { StaticSphere, RigidTranslation, RigidRotation, TwoBodyArticulation };

inline SceneKind scene_kind_from_string(const std::string& s) {
    if (s == "static") return SceneKind::StaticSphere;
    if (s == "translation") return SceneKind::RigidTranslation;
    if (s == "rotation") return SceneKind::RigidRotation;
    if (s == "articulated") return SceneKind::TwoBodyArticulation;
    throw std::invalid_argument("unknown scene kind: " + s);
}

struct SceneSpec {
    SceneKind kind = SceneKind::RigidTranslation;
    size_t gaussian_count = 400; // total across bodies
    int frames = 16;
    int views = 6;
    int image_size = 128;
    Vec3 velocity{0.05, 0.0, 0.0}; // world units per frame
    double angular_rate = 0.06;    // radians per frame about the front-view axis
    double sphere_radius = 0.8;
    double camera_radius = 2.5;
    double half_extent = 1.25;
    uint64_t seed = 1;
};

inline SceneSpec scene_spec_from_config(const Config& cfg) {
    static const char* known[] = {"kind",         "gaussians",    "frames",       "views",
                                  "image_size",   "velocity_x",   "velocity_y",   "velocity_z",
                                  "angular_rate", "sphere_radius", "camera_radius", "half_extent",
                                  "seed"};
    for (const auto& [k, v] : cfg.entries) {
        bool ok = false;
        for (const char* name : known) ok = ok || k == name;
        if (!ok) throw std::invalid_argument("unknown scene config key: " + k);
    }
    SceneSpec s;
    s.kind = scene_kind_from_string(cfg.get("kind", "translation"));
    s.gaussian_count = size_t(cfg.get_int("gaussians", 400));
    s.frames = cfg.get_int("frames", 16);
    s.views = cfg.get_int("views", 6);
    s.image_size = cfg.get_int("image_size", 128);
    s.velocity = {cfg.get_double("velocity_x", 0.05), cfg.get_double("velocity_y", 0.0),
                  cfg.get_double("velocity_z", 0.0)};
    s.angular_rate = cfg.get_double("angular_rate", 0.06);
    s.sphere_radius = cfg.get_double("sphere_radius", 0.8);
    s.camera_radius = cfg.get_double("camera_radius", 2.5);
    s.half_extent = cfg.get_double("half_extent", 1.25);
    s.seed = uint64_t(cfg.get_int("seed", 1));
    if (s.frames < 1 || s.views < 1 || s.image_size < 8)
        throw std::invalid_argument("scene config: implausible frames/views/image_size");
    return s;
}

struct SceneBody {
    Vec3 center{0, 0, 0};
    double radius = 0.8;
    size_t first_gaussian = 0, count = 0;
};

/// A hand-built Gaussian field with exact per-frame rigid motions and the
/// analytic sphere geometry behind every pixel-level oracle.
struct SyntheticScene {
    SceneSpec spec;
    GaussianField field; // rest state; single-body kinds carry scripted motions
    std::vector<Camera> cameras;
    std::vector<SceneBody> bodies;

    RigidMotion body_motion(int body, int frame) const {
        const double step = frame - 1;
        switch (spec.kind) {
            case SceneKind::StaticSphere:
                return {};
            case SceneKind::RigidTranslation:
                return {Quat{1, 0, 0, 0}, {0, 0, 0}, spec.velocity * step};
            case SceneKind::RigidRotation: {
                // About the front view's optical axis (world z) through the center.
                double a = spec.angular_rate * step;
                return {Quat{std::cos(a / 2), 0, 0, std::sin(a / 2)}, bodies[0].center, {0, 0, 0}};
            }
            case SceneKind::TwoBodyArticulation: {
                if (body == 0) return {};
                double a = spec.angular_rate * step;
                return {Quat{std::cos(a / 2), 0, 0, std::sin(a / 2)}, bodies[0].center,
                        spec.velocity * step};
            }
        }
        return {};
    }

    /// Ground-truth deformed Gaussians at a frame (handles per-body motion).
    std::vector<Gaussian3D> gaussians_at(int frame) const {
        std::vector<Gaussian3D> out(field.gaussian_count());
        for (size_t b = 0; b < bodies.size(); ++b) {
            RigidMotion m = body_motion(int(b), frame);
            Quat qm = m.rotation.normalized();
            for (size_t i = bodies[b].first_gaussian; i < bodies[b].first_gaussian + bodies[b].count;
                 ++i) {
                Gaussian3D g = field.gaussian(i);
                g.position = m.apply(g.position);
                g.orientation = quat_mul(qm, g.orientation.normalized());
                out[i] = g;
            }
        }
        return out;
    }
};

namespace detail {

inline Vec3 sphere_color_pattern(const Vec3& unit) {
    auto band = [](double v) { return 0.5 + 0.42 * v; };
    return {clamp01(band(std::sin(3.1 * unit.x + 1.3 * unit.y))),
            clamp01(band(std::sin(2.5 * unit.y + 1.1 * unit.z + 1.0))),
            clamp01(band(std::sin(3.9 * unit.z + 1.7 * unit.x + 2.0)))};
}

inline void add_sphere_body(GaussianField& f, std::vector<SceneBody>& bodies, Vec3 center,
                            double radius, size_t count) {
    SceneBody body;
    body.center = center;
    body.radius = radius;
    body.first_gaussian = f.gaussian_count();
    body.count = count;

    const size_t base = f.gaussian_count();
    f.resize_gaussians(base + count);
    const double spacing = std::sqrt(4.0 * M_PI * radius * radius / double(count));
    const double golden = M_PI * (3.0 - std::sqrt(5.0));
    for (size_t i = 0; i < count; ++i) {
        double y = 1.0 - 2.0 * (double(i) + 0.5) / double(count);
        double r = std::sqrt(std::max(0.0, 1.0 - y * y));
        double th = golden * double(i);
        Vec3 unit{r * std::cos(th), y, r * std::sin(th)};
        Gaussian3D g;
        g.position = center + unit * radius;
        g.orientation = {1, 0, 0, 0};
        double s = spacing * 0.65;
        g.log_scale = {std::log(s), std::log(s), std::log(s)};
        g.opacity_logit = logit(0.93);
        g.color = sphere_color_pattern(unit);
        f.set_gaussian(base + i, g);
    }
    bodies.push_back(body);
}

} // namespace detail

inline std::vector<Camera> make_scene_cameras(const SceneSpec& spec) {
    std::vector<Camera> cams;
    if (spec.views == 6) {
        cams = make_default_rig(spec.image_size, spec.image_size, spec.half_extent,
                                spec.camera_radius);
    } else {
        for (int k = 0; k < spec.views; ++k) {
            Camera c = make_orbit_camera(360.0 * k / spec.views, 0.0, spec.camera_radius,
                                         spec.half_extent, spec.image_size, spec.image_size);
            c.viewpoint_index = k + 1;
            cams.push_back(c);
        }
    }
    return cams;
}

inline SyntheticScene make_scene(const SceneSpec& spec) {
    SyntheticScene scene;
    scene.spec = spec;
    scene.cameras = make_scene_cameras(spec);
    scene.field.timeline_count = spec.frames;

    if (spec.kind == SceneKind::TwoBodyArticulation) {
        size_t ca = spec.gaussian_count * 2 / 3, cb = spec.gaussian_count - ca;
        detail::add_sphere_body(scene.field, scene.bodies, {-0.35, 0, 0},
                                spec.sphere_radius * 0.62, ca);
        detail::add_sphere_body(scene.field, scene.bodies, {0.52, 0.15, 0},
                                spec.sphere_radius * 0.42, cb);
    } else {
        detail::add_sphere_body(scene.field, scene.bodies, {0, 0, 0}, spec.sphere_radius,
                                spec.gaussian_count);
        scene.field.scripted_motions.resize(spec.frames);
        for (int n = 1; n <= spec.frames; ++n)
            scene.field.scripted_motions[size_t(n - 1)] = scene.body_motion(0, n);
    }
    return scene;
}

/// Analytic sphere hit for one pixel: nearest body, camera-space depth and
/// world surface point. Returns false when no body covers the pixel.
inline bool scene_surface_at(const SyntheticScene& scene, const Camera& cam, int frame, double px,
                             double py, int* body_out, double* depth_out, Vec3* point_out) {
    Vec2 xy = cam.pixel_to_camera_xy(px, py);
    bool hit = false;
    double best_depth = 0;
    int best_body = -1;
    Vec3 best_point;
    for (size_t b = 0; b < scene.bodies.size(); ++b) {
        RigidMotion m = scene.body_motion(int(b), frame);
        Vec3 c = m.apply(scene.bodies[b].center);
        Vec3 c_cam = cam.to_camera(c);
        double dx = xy.x - c_cam.x, dy = xy.y - c_cam.y;
        double rho2 = dx * dx + dy * dy;
        double r2 = scene.bodies[b].radius * scene.bodies[b].radius;
        if (rho2 > r2) continue;
        double depth = c_cam.z - std::sqrt(r2 - rho2);
        if (!hit || depth < best_depth) {
            hit = true;
            best_depth = depth;
            best_body = int(b);
            // Reconstruct the world point from camera coordinates.
            Vec3 cam_pt{xy.x, xy.y, depth};
            best_point = cam.rotation.transposed() * cam_pt + cam.center;
        }
    }
    if (!hit) return false;
    *body_out = best_body;
    *depth_out = best_depth;
    *point_out = best_point;
    return true;
}

inline ImageD analytic_depth(const SyntheticScene& scene, int frame, int view,
                             MaskImage* mask_out = nullptr) {
    const Camera& cam = scene.cameras[size_t(view - 1)];
    ImageD depth(cam.width, cam.height, 1);
    if (mask_out) *mask_out = MaskImage(cam.width, cam.height, 1, 0);
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            int body;
            double d;
            Vec3 pt;
            if (scene_surface_at(scene, cam, frame, x + 0.5, y + 0.5, &body, &d, &pt)) {
                depth.at(x, y) = d;
                if (mask_out) mask_out->at(x, y) = 1;
            }
        }
    return depth;
}

/// Camera-frame unit normals of the analytic surface; zero outside coverage.
inline ImageD analytic_normal(const SyntheticScene& scene, int frame, int view,
                              MaskImage* mask_out = nullptr) {
    const Camera& cam = scene.cameras[size_t(view - 1)];
    ImageD out(cam.width, cam.height, 3);
    if (mask_out) *mask_out = MaskImage(cam.width, cam.height, 1, 0);
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            int body;
            double d;
            Vec3 pt;
            if (!scene_surface_at(scene, cam, frame, x + 0.5, y + 0.5, &body, &d, &pt)) continue;
            RigidMotion m = scene.body_motion(body, frame);
            Vec3 c = m.apply(scene.bodies[size_t(body)].center);
            Vec3 n_world = (pt - c).normalized();
            Vec3 n_cam = cam.rotation * n_world;
            out.at(x, y, 0) = n_cam.x;
            out.at(x, y, 1) = n_cam.y;
            out.at(x, y, 2) = n_cam.z;
            if (mask_out) mask_out->at(x, y) = 1;
        }
    return out;
}

/// Grazing-incidence cutoff for flow validity: surface patches this oblique
/// to the camera sit on the silhouette rim where sampled flow is unreliable.
constexpr double kFlowObliquityMargin = 0.35;

/// Analytic flow from frame n to frame m at one continuous pixel position.
/// Valid when the surface is hit at n, seen at non-grazing incidence at both
/// endpoints, and the moved material point is still the visible surface at m.
inline bool flow_at_point(const SyntheticScene& scene, int n, int m, int view, double px,
                          double py, Vec2* flow_out) {
    const Camera& cam = scene.cameras[size_t(view - 1)];
    int body;
    double d;
    Vec3 pt;
    if (!scene_surface_at(scene, cam, n, px, py, &body, &d, &pt)) return false;
    RigidMotion mn = scene.body_motion(body, n);
    RigidMotion mm = scene.body_motion(body, m);
    const double radius = scene.bodies[size_t(body)].radius;
    Vec3 n_at_n = (pt - mn.apply(scene.bodies[size_t(body)].center)) * (1.0 / radius);
    if ((cam.rotation * n_at_n).z > -kFlowObliquityMargin) return false;

    // Material point: undo motion at n, apply motion at m.
    Quat qn = mn.rotation.normalized();
    Mat3 Rn = quat_to_mat(qn);
    Vec3 rest = Rn.transposed() * (pt - mn.pivot - mn.translation) + mn.pivot;
    Vec3 moved = mm.apply(rest);

    Vec2 p0, p1;
    double z0, z1;
    cam.project_point(pt, p0, z0);
    cam.project_point(moved, p1, z1);

    Vec3 n_at_m = (moved - mm.apply(scene.bodies[size_t(body)].center)) * (1.0 / radius);
    if ((cam.rotation * n_at_m).z > -kFlowObliquityMargin) return false;

    // Occlusion: the moved point must still be the visible surface at m.
    int body_m;
    double depth_m;
    Vec3 pt_m;
    if (!scene_surface_at(scene, cam, m, p1.x, p1.y, &body_m, &depth_m, &pt_m) ||
        body_m != body || std::abs(depth_m - z1) >= 0.02 * radius)
        return false;
    *flow_out = p1 - p0;
    return true;
}

/// Analytic flow map from frame n to frame m, sampled at pixel centers.
inline FlowMap analytic_flow(const SyntheticScene& scene, int n, int m, int view) {
    const Camera& cam = scene.cameras[size_t(view - 1)];
    FlowMap flow{cam.width, cam.height};
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            Vec2 f;
            if (flow_at_point(scene, n, m, view, x + 0.5, y + 0.5, &f)) flow.set(x, y, f);
        }
    return flow;
}

/// Renders the ground-truth sequence with the splatting renderer and attaches
/// the analytic normals and consecutive-pair flows.
inline MultiviewSequence render_scene_sequence(const SyntheticScene& scene) {
    MultiviewSequence seq;
    seq.frames = scene.spec.frames;
    seq.cameras = scene.cameras;
    const int N = seq.frames, K = seq.views();
    seq.images.resize(size_t(N) * K);
    seq.masks.resize(size_t(N) * K);
    seq.normals.resize(size_t(N) * K);
    if (N > 1) {
        seq.flows_fwd.resize(size_t(N - 1) * K);
        seq.flows_bwd.resize(size_t(N - 1) * K);
    }
    for (int n = 1; n <= N; ++n) {
        std::vector<Gaussian3D> gs = scene.gaussians_at(n);
        for (int k = 1; k <= K; ++k) {
            RenderChannels ch;
            ch.rgb = true;
            auto out = rasterize(gs, scene.cameras[size_t(k - 1)], ch);
            size_t s = seq.slot(n, k);
            seq.images[s] = std::move(out.rgb);
            seq.masks[s] = std::move(out.coverage);
            seq.normals[s] = analytic_normal(scene, n, k);
        }
    }
    for (int n = 1; n < N; ++n)
        for (int k = 1; k <= K; ++k) {
            seq.flows_fwd[seq.flow_slot(n, k)] = analytic_flow(scene, n, n + 1, k);
            seq.flows_bwd[seq.flow_slot(n, k)] = analytic_flow(scene, n + 1, n, k);
        }
    return seq;
}

} // namespace gf4d
