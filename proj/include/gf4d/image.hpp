// Copyright Contributors to the gf4d Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cassert>
#include <cstdint>
#include <vector>

#include "gf4d/math.hpp"

namespace gf4d {

/// Dense H x W x C raster, row-major, channel-interleaved.
template <typename T>
struct Image {
    int width = 0, height = 0, channels = 0;
    std::vector<T> data;

    Image() = default;
    Image(int w, int h, int c, T fill = T(0)) : width(w), height(h), channels(c) {
        data.assign(size_t(w) * h * c, fill);
    }

    bool empty() const { return data.empty(); }
    size_t index(int x, int y, int c = 0) const {
        return (size_t(y) * width + x) * channels + c;
    }
    T& at(int x, int y, int c = 0) { return data[index(x, y, c)]; }
    const T& at(int x, int y, int c = 0) const { return data[index(x, y, c)]; }
    bool in_bounds(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }
    bool same_shape(const Image& o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }
};

using ImageD = Image<double>;
using ImageF = Image<float>;
using MaskImage = Image<uint8_t>;

template <typename T>
Image<double> to_double(const Image<T>& img) {
    Image<double> out(img.width, img.height, img.channels);
    for (size_t i = 0; i < img.data.size(); ++i) out.data[i] = double(img.data[i]);
    return out;
}

inline Image<float> to_float(const Image<double>& img) {
    Image<float> out(img.width, img.height, img.channels);
    for (size_t i = 0; i < img.data.size(); ++i) out.data[i] = float(img.data[i]);
    return out;
}

/// Bilinear sample of one channel at continuous (x, y) in pixel-center
/// coordinates: (0,0) is the center of pixel (0,0). Out-of-range taps clamp.
template <typename T>
double sample_bilinear(const Image<T>& img, double x, double y, int c) {
    int x0 = int(std::floor(x)), y0 = int(std::floor(y));
    double fx = x - x0, fy = y - y0;
    auto tap = [&](int xi, int yi) {
        xi = std::clamp(xi, 0, img.width - 1);
        yi = std::clamp(yi, 0, img.height - 1);
        return double(img.at(xi, yi, c));
    };
    double v00 = tap(x0, y0), v10 = tap(x0 + 1, y0);
    double v01 = tap(x0, y0 + 1), v11 = tap(x0 + 1, y0 + 1);
    return (1 - fy) * ((1 - fx) * v00 + fx * v10) + fy * ((1 - fx) * v01 + fx * v11);
}

/// True when all four bilinear taps fall inside the raster and, when a
/// validity mask is given, are marked valid.
template <typename T>
bool bilinear_taps_valid(const Image<T>& img, double x, double y,
                         const MaskImage* validity = nullptr) {
    int x0 = int(std::floor(x)), y0 = int(std::floor(y));
    if (x0 < 0 || y0 < 0 || x0 + 1 >= img.width || y0 + 1 >= img.height) return false;
    if (!validity) return true;
    return validity->at(x0, y0) && validity->at(x0 + 1, y0) && validity->at(x0, y0 + 1) &&
           validity->at(x0 + 1, y0 + 1);
}

/// 2D displacement field in pixels with a per-pixel validity mask.
struct FlowMap {
    Image<double> uv;     // H x W x 2
    MaskImage validity;   // H x W x 1

    FlowMap() = default;
    FlowMap(int w, int h) : uv(w, h, 2), validity(w, h, 1, 0) {}

    int width() const { return uv.width; }
    int height() const { return uv.height; }
    Vec2 at(int x, int y) const { return {uv.at(x, y, 0), uv.at(x, y, 1)}; }
    void set(int x, int y, Vec2 v, bool valid = true) {
        uv.at(x, y, 0) = v.x;
        uv.at(x, y, 1) = v.y;
        validity.at(x, y) = valid ? 1 : 0;
    }
};

/// Erodes a binary mask by `radius` using the Chebyshev neighborhood.
inline MaskImage erode_mask(const MaskImage& m, int radius) {
    MaskImage out(m.width, m.height, 1, 0);
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) {
            bool keep = m.at(x, y) != 0;
            for (int dy = -radius; keep && dy <= radius; ++dy)
                for (int dx = -radius; keep && dx <= radius; ++dx) {
                    int xi = x + dx, yi = y + dy;
                    if (!m.in_bounds(xi, yi) || !m.at(xi, yi)) keep = false;
                }
            out.at(x, y) = keep ? 1 : 0;
        }
    return out;
}

} // namespace gf4d
