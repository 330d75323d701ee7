// Copyright Contributors to the gf4d Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>

namespace gf4d {

struct Vec2 {
    double x = 0, y = 0;

    Vec2() = default;
    Vec2(double x_, double y_) : x(x_), y(y_) {}

    Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    Vec2& operator+=(const Vec2& o) { x += o.x; y += o.y; return *this; }
    double dot(const Vec2& o) const { return x * o.x + y * o.y; }
    double norm() const { return std::sqrt(x * x + y * y); }
};

struct Vec3 {
    double x = 0, y = 0, z = 0;

    Vec3() = default;
    Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator-() const { return {-x, -y, -z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
    Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
    Vec3& operator*=(double s) { x *= s; y *= s; z *= s; return *this; }

    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm() const { return std::sqrt(dot(*this)); }
    double squared_norm() const { return dot(*this); }
    Vec3 normalized() const {
        double n = norm();
        return n > 0 ? Vec3{x / n, y / n, z / n} : Vec3{0, 0, 0};
    }
    double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
    double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }
inline Vec2 operator*(double s, const Vec2& v) { return v * s; }

/// Quaternion, scalar-first (w, x, y, z).
struct Quat {
    double w = 1, x = 0, y = 0, z = 0;

    Quat() = default;
    Quat(double w_, double x_, double y_, double z_) : w(w_), x(x_), y(y_), z(z_) {}

    Quat operator+(const Quat& o) const { return {w + o.w, x + o.x, y + o.y, z + o.z}; }
    Quat operator-(const Quat& o) const { return {w - o.w, x - o.x, y - o.y, z - o.z}; }
    Quat operator*(double s) const { return {w * s, x * s, y * s, z * s}; }
    Quat& operator+=(const Quat& o) { w += o.w; x += o.x; y += o.y; z += o.z; return *this; }
    double dot(const Quat& o) const { return w * o.w + x * o.x + y * o.y + z * o.z; }
    double norm() const { return std::sqrt(dot(*this)); }
    Quat normalized() const {
        double n = norm();
        return n > 0 ? Quat{w / n, x / n, y / n, z / n} : Quat{1, 0, 0, 0};
    }
};

/// Hamilton product a*b (apply b first, then a).
inline Quat quat_mul(const Quat& a, const Quat& b) {
    return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

/// d(a*b): accumulates into da, db given upstream dq on the product.
inline void quat_mul_backward(const Quat& a, const Quat& b, const Quat& dq, Quat& da, Quat& db) {
    da.w += dq.w * b.w + dq.x * b.x + dq.y * b.y + dq.z * b.z;
    da.x += -dq.w * b.x + dq.x * b.w - dq.y * b.z + dq.z * b.y;
    da.y += -dq.w * b.y + dq.x * b.z + dq.y * b.w - dq.z * b.x;
    da.z += -dq.w * b.z - dq.x * b.y + dq.y * b.x + dq.z * b.w;
    db.w += dq.w * a.w + dq.x * a.x + dq.y * a.y + dq.z * a.z;
    db.x += -dq.w * a.x + dq.x * a.w + dq.y * a.z - dq.z * a.y;
    db.y += -dq.w * a.y - dq.x * a.z + dq.y * a.w + dq.z * a.x;
    db.z += -dq.w * a.z + dq.x * a.y - dq.y * a.x + dq.z * a.w;
}

struct Mat2 {
    // [[a, b], [b, c]] when symmetric; stored dense.
    double m00 = 0, m01 = 0, m10 = 0, m11 = 0;

    double det() const { return m00 * m11 - m01 * m10; }
};

struct Mat3 {
    std::array<std::array<double, 3>, 3> m{};

    static Mat3 identity() {
        Mat3 r;
        r.m[0][0] = r.m[1][1] = r.m[2][2] = 1;
        return r;
    }
    Vec3 row(int i) const { return {m[i][0], m[i][1], m[i][2]}; }
    Vec3 col(int j) const { return {m[0][j], m[1][j], m[2][j]}; }
    Vec3 operator*(const Vec3& v) const {
        return {row(0).dot(v), row(1).dot(v), row(2).dot(v)};
    }
    Mat3 operator*(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                r.m[i][j] = m[i][0] * o.m[0][j] + m[i][1] * o.m[1][j] + m[i][2] * o.m[2][j];
        return r;
    }
    Mat3 transposed() const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r.m[i][j] = m[j][i];
        return r;
    }
    Mat3 operator+(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r.m[i][j] = m[i][j] + o.m[i][j];
        return r;
    }
    Mat3 operator*(double s) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r.m[i][j] = m[i][j] * s;
        return r;
    }
};

/// Rotation matrix from a unit quaternion (caller normalizes).
inline Mat3 quat_to_mat(const Quat& q) {
    const double w = q.w, x = q.x, y = q.y, z = q.z;
    Mat3 r;
    r.m[0] = {1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)};
    r.m[1] = {2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)};
    r.m[2] = {2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)};
    return r;
}

/// dL/dq_unit from dL/dR for R = quat_to_mat(q_unit). Accumulates into dq.
inline void quat_to_mat_backward(const Quat& q, const Mat3& dR, Quat& dq) {
    const double w = q.w, x = q.x, y = q.y, z = q.z;
    // Partial derivatives of each matrix entry w.r.t. (w,x,y,z).
    dq.w += 2 * (-z * dR.m[0][1] + y * dR.m[0][2] + z * dR.m[1][0] - x * dR.m[1][2] -
                 y * dR.m[2][0] + x * dR.m[2][1]);
    dq.x += 2 * (y * dR.m[0][1] + z * dR.m[0][2] + y * dR.m[1][0] - 2 * x * dR.m[1][1] -
                 w * dR.m[1][2] + z * dR.m[2][0] + w * dR.m[2][1] - 2 * x * dR.m[2][2]);
    dq.y += 2 * (-2 * y * dR.m[0][0] + x * dR.m[0][1] + w * dR.m[0][2] + x * dR.m[1][0] +
                 z * dR.m[1][2] - w * dR.m[2][0] + z * dR.m[2][1] - 2 * y * dR.m[2][2]);
    dq.z += 2 * (-2 * z * dR.m[0][0] - w * dR.m[0][1] + x * dR.m[0][2] + w * dR.m[1][0] -
                 2 * z * dR.m[1][1] + y * dR.m[1][2] + x * dR.m[2][0] + y * dR.m[2][1]);
}

/// dL/dq_raw from dL/du where u = q/|q|. Accumulates into dq_raw.
inline void normalize_backward(const Quat& q_raw, const Quat& du, Quat& dq_raw) {
    double n = q_raw.norm();
    if (n <= 0) return;
    Quat u = q_raw * (1.0 / n);
    double proj = u.dot(du);
    dq_raw += (du - u * proj) * (1.0 / n);
}

inline Vec3 normalize_backward_vec3(const Vec3& v_raw, const Vec3& du) {
    double n = v_raw.norm();
    if (n <= 0) return {0, 0, 0};
    Vec3 u = v_raw * (1.0 / n);
    return (du - u * u.dot(du)) * (1.0 / n);
}

inline double logistic(double v) { return 1.0 / (1.0 + std::exp(-v)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

/// Rigid motion x -> R*(x - pivot) + pivot + translation.
struct RigidMotion {
    Quat rotation{1, 0, 0, 0};
    Vec3 pivot{0, 0, 0};
    Vec3 translation{0, 0, 0};

    Vec3 apply(const Vec3& p) const {
        return quat_to_mat(rotation.normalized()) * (p - pivot) + pivot + translation;
    }
};

/// Splitmix-style hash, used to derive deterministic per-slot values.
inline uint64_t mix_hash(uint64_t v) {
    v += 0x9e3779b97f4a7c15ull;
    v = (v ^ (v >> 30)) * 0xbf58476d1ce4e5b9ull;
    v = (v ^ (v >> 27)) * 0x94d049bb133111ebull;
    return v ^ (v >> 31);
}

/// Uniform double in [0,1) from a hash state.
inline double hash_unit(uint64_t v) {
    return double(mix_hash(v) >> 11) * 0x1.0p-53;
}

} // namespace gf4d
