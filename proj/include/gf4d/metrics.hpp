// Copyright Contributors to the gf4d Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>

#include "gf4d/errors.hpp"
#include "gf4d/image.hpp"
#include "gf4d/losses.hpp"

namespace gf4d {

constexpr double kPsnrCap = 100.0;

/// Peak signal-to-noise ratio in dB over masked pixels, capped at 100 dB.
inline double psnr(const ImageD& a, const ImageD& b, const MaskImage& mask, double peak = 1.0) {
    if (!a.same_shape(b) || a.width != mask.width || a.height != mask.height)
        throw std::invalid_argument("psnr: shape mismatch");
    double se = 0;
    size_t count = 0;
    for (int y = 0; y < a.height; ++y)
        for (int x = 0; x < a.width; ++x) {
            if (!mask.at(x, y)) continue;
            for (int c = 0; c < a.channels; ++c) {
                double d = a.at(x, y, c) - b.at(x, y, c);
                se += d * d;
            }
            count += size_t(a.channels);
        }
    if (count == 0) throw UndefinedResult("psnr: empty mask");
    double mse = se / double(count);
    if (mse <= 0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

/// SSIM with the loss-suite window and constants (single-channel inputs use
/// the image directly; RGB inputs use the luminance-weighted mean).
inline double ssim(const ImageD& a, const ImageD& b, const MaskImage& mask) {
    if (!a.same_shape(b)) throw std::invalid_argument("ssim: shape mismatch");
    ImageD la = a.channels == 1 ? a : detail::luminance(a);
    ImageD lb = b.channels == 1 ? b : detail::luminance(b);
    detail::SsimResult r = detail::ssim_single(la, lb, mask, false);
    if (r.pixels == 0) throw UndefinedResult("ssim: empty mask");
    return r.mean;
}

/// Mean Euclidean norm of the flow difference over mutually valid masked
/// pixels (endpoint error, px).
inline double endpoint_error(const FlowMap& a, const FlowMap& b, const MaskImage& mask) {
    if (a.width() != b.width() || a.height() != b.height())
        throw std::invalid_argument("endpoint_error: shape mismatch");
    double sum = 0;
    size_t count = 0;
    for (int y = 0; y < a.height(); ++y)
        for (int x = 0; x < a.width(); ++x) {
            if (!mask.at(x, y) || !a.validity.at(x, y) || !b.validity.at(x, y)) continue;
            Vec2 d = a.at(x, y) - b.at(x, y);
            sum += d.norm();
            count++;
        }
    if (count == 0) throw UndefinedResult("endpoint_error: empty overlap");
    return sum / double(count);
}

} // namespace gf4d
