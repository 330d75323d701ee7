// Copyright Contributors to the gf4d Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <vector>

#include "gf4d/math.hpp"

namespace gf4d {

/// Orthographic camera. `rotation` maps world to camera coordinates; its rows
/// are the camera right, down, and forward axes. `center` projects to the
/// image center, and `half_extent` world units span half the image width.
struct Camera {
    Mat3 rotation = Mat3::identity();
    Vec3 center{0, 0, 0};
    double half_extent = 1.0;
    int width = 0, height = 0;
    int viewpoint_index = 1; // 1-based k

    double pixels_per_unit() const { return width / (2.0 * half_extent); }
    Vec3 right() const { return rotation.row(0); }
    Vec3 down() const { return rotation.row(1); }
    Vec3 forward() const { return rotation.row(2); }

    Vec3 to_camera(const Vec3& p) const { return rotation * (p - center); }

    /// World point to continuous pixel coordinates plus camera-space depth.
    void project_point(const Vec3& p, Vec2& pixel, double& depth) const {
        Vec3 c = to_camera(p);
        double s = pixels_per_unit();
        pixel = {width * 0.5 + s * c.x, height * 0.5 + s * c.y};
        depth = c.z;
    }

    /// Pixel-center (ix+0.5, iy+0.5) back to the camera-space x/y at z=0 plane.
    Vec2 pixel_to_camera_xy(double px, double py) const {
        double s = pixels_per_unit();
        return {(px - width * 0.5) / s, (py - height * 0.5) / s};
    }

    void validate() const {
        if (width <= 0 || height <= 0) throw std::invalid_argument("camera: empty image size");
        if (!(half_extent > 0)) throw std::invalid_argument("camera: half_extent must be > 0");
        Mat3 gram = rotation * rotation.transposed();
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double want = i == j ? 1.0 : 0.0;
                if (std::abs(gram.m[i][j] - want) > 1e-6)
                    throw std::invalid_argument("camera: rotation not orthonormal");
            }
    }
};

/// Orbit camera looking at `target` from the given azimuth/elevation
/// (degrees). Azimuth 0 looks down -Z from +Z, world Y is up.
inline Camera make_orbit_camera(double azimuth_deg, double elevation_deg, double radius,
                                double half_extent, int width, int height,
                                Vec3 target = {0, 0, 0}) {
    const double az = azimuth_deg * M_PI / 180.0;
    const double el = elevation_deg * M_PI / 180.0;
    Vec3 eye = target + Vec3{radius * std::cos(el) * std::sin(az), radius * std::sin(el),
                             radius * std::cos(el) * std::cos(az)};
    Vec3 fwd = (target - eye).normalized();
    Vec3 world_up{0, 1, 0};
    Vec3 right = fwd.cross(world_up);
    if (right.norm() < 1e-9) right = Vec3{1, 0, 0}; // looking straight up/down
    right = right.normalized();
    Vec3 down = fwd.cross(right).normalized();

    Camera cam;
    cam.rotation.m[0] = {right.x, right.y, right.z};
    cam.rotation.m[1] = {down.x, down.y, down.z};
    cam.rotation.m[2] = {fwd.x, fwd.y, fwd.z};
    cam.center = eye;
    cam.half_extent = half_extent;
    cam.width = width;
    cam.height = height;
    return cam;
}

/// Default canonical rig: azimuths {0, 45, 90, 180, 270, 315} at elevation 0.
inline std::vector<Camera> make_default_rig(int width, int height, double half_extent,
                                            double radius, Vec3 target = {0, 0, 0}) {
    const double azimuths[] = {0, 45, 90, 180, 270, 315};
    std::vector<Camera> rig;
    for (int k = 0; k < 6; ++k) {
        Camera cam = make_orbit_camera(azimuths[k], 0.0, radius, half_extent, width, height, target);
        cam.viewpoint_index = k + 1;
        rig.push_back(cam);
    }
    return rig;
}

} // namespace gf4d
