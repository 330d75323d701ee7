// Copyright Contributors to the gf4d Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "gf4d/errors.hpp"
#include "gf4d/image.hpp"

namespace gf4d {

struct LossWeights {
    double rendering = 0.8; // lambda_r
    double mask = 2.0;      // lambda_m
    double dssim = 0.2;     // lambda_DSSIM
    double arap = 1.0;      // lambda_arap
    double normal = 1.0;    // lambda_n
    double flow = 1.0;      // lambda_f
};

struct LossValue {
    double value = 0;
    size_t pixels = 0;
    bool empty_domain = false; // no usable pixels; value forced to 0
};

/// Mean absolute RGB error over pixels where the target mask is set,
/// averaged over pixels and channels.
inline LossValue photometric_loss(const ImageD& render_rgb, const ImageD& target_rgb,
                                  const MaskImage& target_mask, ImageD* d_rgb = nullptr,
                                  double grad_scale = 1.0) {
    if (!render_rgb.same_shape(target_rgb) || render_rgb.width != target_mask.width ||
        render_rgb.height != target_mask.height)
        throw std::invalid_argument("photometric_loss: shape mismatch");
    size_t count = 0;
    for (uint8_t m : target_mask.data) count += m ? 1 : 0;
    if (count == 0) return {0.0, 0, true};
    double sum = 0;
    const double inv = 1.0 / (double(count) * 3.0);
    const double ginv = inv * grad_scale;
    for (int y = 0; y < render_rgb.height; ++y)
        for (int x = 0; x < render_rgb.width; ++x) {
            if (!target_mask.at(x, y)) continue;
            for (int c = 0; c < 3; ++c) {
                double diff = render_rgb.at(x, y, c) - target_rgb.at(x, y, c);
                sum += std::abs(diff);
                if (d_rgb) d_rgb->at(x, y, c) += (diff > 0 ? ginv : (diff < 0 ? -ginv : 0.0));
            }
        }
    return {sum * inv, count, false};
}

/// Mean absolute error between rendered alpha and a {0,1} mask, all pixels.
inline LossValue mask_loss(const ImageD& alpha, const MaskImage& target_mask,
                           ImageD* d_alpha = nullptr, double grad_scale = 1.0) {
    if (alpha.width != target_mask.width || alpha.height != target_mask.height)
        throw std::invalid_argument("mask_loss: shape mismatch");
    const size_t count = size_t(alpha.width) * alpha.height;
    double sum = 0;
    const double inv = 1.0 / double(count);
    const double ginv = inv * grad_scale;
    for (int y = 0; y < alpha.height; ++y)
        for (int x = 0; x < alpha.width; ++x) {
            double diff = alpha.at(x, y) - (target_mask.at(x, y) ? 1.0 : 0.0);
            sum += std::abs(diff);
            if (d_alpha) d_alpha->at(x, y) += (diff > 0 ? ginv : (diff < 0 ? -ginv : 0.0));
        }
    return {sum * inv, count, false};
}

namespace detail {

inline const std::vector<double>& ssim_kernel() {
    static const std::vector<double> k = [] {
        std::vector<double> v(11);
        double sum = 0;
        for (int i = 0; i < 11; ++i) {
            double d = i - 5;
            v[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
            sum += v[i];
        }
        for (double& x : v) x /= sum;
        return v;
    }();
    return k;
}

/// Separable 11x11 Gaussian filter; border pixels are filled but only window
/// centers with a full in-bounds support are meaningful.
inline ImageD ssim_filter(const ImageD& img) {
    const auto& k = ssim_kernel();
    ImageD tmp(img.width, img.height, 1), out(img.width, img.height, 1);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            double acc = 0;
            for (int i = -5; i <= 5; ++i) {
                int xi = std::clamp(x + i, 0, img.width - 1);
                acc += k[i + 5] * img.at(xi, y);
            }
            tmp.at(x, y) = acc;
        }
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            double acc = 0;
            for (int i = -5; i <= 5; ++i) {
                int yi = std::clamp(y + i, 0, img.height - 1);
                acc += k[i + 5] * tmp.at(x, yi);
            }
            out.at(x, y) = acc;
        }
    return out;
}

constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;
constexpr double kLumaR = 0.299, kLumaG = 0.587, kLumaB = 0.114;

inline ImageD luminance(const ImageD& rgb) {
    ImageD y(rgb.width, rgb.height, 1);
    for (int py = 0; py < rgb.height; ++py)
        for (int px = 0; px < rgb.width; ++px)
            y.at(px, py) = kLumaR * rgb.at(px, py, 0) + kLumaG * rgb.at(px, py, 1) +
                           kLumaB * rgb.at(px, py, 2);
    return y;
}

struct SsimResult {
    double mean = 0;   // masked mean SSIM over valid window centers
    size_t pixels = 0; // number of centers used
    ImageD d_x;        // dL/dx for dL/dSSIM_mean = 1, empty unless requested
};

/// SSIM of single-channel images over window centers whose 11x11 support is
/// fully inside the image and whose mask bit is set.
inline SsimResult ssim_single(const ImageD& x, const ImageD& yimg, const MaskImage& mask,
                              bool want_grad) {
    const int W = x.width, H = x.height;
    ImageD mu_x = ssim_filter(x), mu_y = ssim_filter(yimg);
    ImageD x2(W, H, 1), y2(W, H, 1), xy(W, H, 1);
    for (size_t i = 0; i < x.data.size(); ++i) {
        x2.data[i] = x.data[i] * x.data[i];
        y2.data[i] = yimg.data[i] * yimg.data[i];
        xy.data[i] = x.data[i] * yimg.data[i];
    }
    ImageD ex2 = ssim_filter(x2), ey2 = ssim_filter(y2), exy = ssim_filter(xy);

    SsimResult res;
    ImageD dmu(W, H, 1), dex2(W, H, 1), dexy(W, H, 1); // per-center partials
    std::vector<std::pair<int, int>> centers;
    double sum = 0;
    for (int py = 5; py < H - 5; ++py)
        for (int px = 5; px < W - 5; ++px) {
            if (!mask.at(px, py)) continue;
            centers.emplace_back(px, py);
        }
    res.pixels = centers.size();
    if (centers.empty()) return res;

    const double inv_n = 1.0 / double(centers.size());
    for (auto [px, py] : centers) {
        const double mx = mu_x.at(px, py), my = mu_y.at(px, py);
        const double sx2 = ex2.at(px, py) - mx * mx;
        const double sy2 = ey2.at(px, py) - my * my;
        const double sxy = exy.at(px, py) - mx * my;
        const double a = 2 * mx * my + kSsimC1;
        const double b = 2 * sxy + kSsimC2;
        const double c = mx * mx + my * my + kSsimC1;
        const double d = sx2 + sy2 + kSsimC2;
        const double S = (a * b) / (c * d);
        sum += S;
        if (want_grad) {
            const double w = inv_n;
            dmu.at(px, py) = w * S * (2 * my / a - 2 * my / b - 2 * mx / c + 2 * mx / d);
            dex2.at(px, py) = w * (-S / d);
            dexy.at(px, py) = w * S * (2 / b);
        }
    }
    res.mean = sum * inv_n;
    if (want_grad) {
        ImageD f_dmu = ssim_filter(dmu), f_dex2 = ssim_filter(dex2), f_dexy = ssim_filter(dexy);
        res.d_x = ImageD(W, H, 1);
        for (int py = 0; py < H; ++py)
            for (int px = 0; px < W; ++px)
                res.d_x.at(px, py) = f_dmu.at(px, py) + 2.0 * x.at(px, py) * f_dex2.at(px, py) +
                                     yimg.at(px, py) * f_dexy.at(px, py);
    }
    return res;
}

} // namespace detail

/// Structural dissimilarity (1 - SSIM)/2 on the luminance-weighted RGB mean,
/// 11x11 Gaussian window (sigma 1.5), averaged over masked window centers.
inline LossValue dssim_loss(const ImageD& render_rgb, const ImageD& target_rgb,
                            const MaskImage& mask, ImageD* d_rgb = nullptr,
                            double grad_scale = 1.0) {
    if (!render_rgb.same_shape(target_rgb))
        throw std::invalid_argument("dssim_loss: shape mismatch");
    ImageD lx = detail::luminance(render_rgb);
    ImageD ly = detail::luminance(target_rgb);
    detail::SsimResult r = detail::ssim_single(lx, ly, mask, d_rgb != nullptr);
    if (r.pixels == 0) return {0.0, 0, true};
    if (d_rgb) {
        // dD/dSSIM = -1/2; fan the luma gradient back into RGB.
        for (int py = 0; py < render_rgb.height; ++py)
            for (int px = 0; px < render_rgb.width; ++px) {
                const double g = -0.5 * grad_scale * r.d_x.at(px, py);
                d_rgb->at(px, py, 0) += g * detail::kLumaR;
                d_rgb->at(px, py, 1) += g * detail::kLumaG;
                d_rgb->at(px, py, 2) += g * detail::kLumaB;
            }
    }
    return {(1.0 - r.mean) / 2.0, r.pixels, false};
}

/// Forward-backward consistency occlusion mask: a pixel is occluded when
/// | f_fwd(x) + f_bwd(x + f_fwd(x)) | exceeds the threshold (bilinear lookup),
/// or when the check cannot be evaluated.
inline MaskImage compute_occlusion_mask(const FlowMap& fwd, const FlowMap& bwd,
                                        double threshold = 1.5) {
    const int W = fwd.width(), H = fwd.height();
    MaskImage occ(W, H, 1, 1);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            if (!fwd.validity.at(x, y)) continue; // unverifiable: stays occluded
            Vec2 f = fwd.at(x, y);
            double sx = x + f.x, sy = y + f.y;
            if (!bilinear_taps_valid(bwd.uv, sx, sy, &bwd.validity)) continue;
            Vec2 fb{sample_bilinear(bwd.uv, sx, sy, 0), sample_bilinear(bwd.uv, sx, sy, 1)};
            Vec2 resid = f + fb;
            occ.at(x, y) = resid.norm() > threshold ? 1 : 0;
        }
    return occ;
}

/// L1 flow error (|du| + |dv| per pixel) over pixels valid in both maps and
/// not occluded. Returns 0 with an empty-domain flag when nothing is usable.
struct FlowLossValue {
    double value = 0;
    size_t pixels = 0;
    size_t occlusion_skipped = 0;
    bool empty_domain = false;
};

inline FlowLossValue flow_loss(const FlowMap& rendered, const FlowMap& reference,
                               const MaskImage& occlusion, ImageD* d_flow = nullptr,
                               double grad_scale = 1.0) {
    if (rendered.width() != reference.width() || rendered.height() != reference.height())
        throw std::invalid_argument("flow_loss: shape mismatch");
    FlowLossValue out;
    size_t count = 0;
    for (int y = 0; y < rendered.height(); ++y)
        for (int x = 0; x < rendered.width(); ++x) {
            if (!rendered.validity.at(x, y) || !reference.validity.at(x, y)) continue;
            if (occlusion.at(x, y)) {
                out.occlusion_skipped++;
                continue;
            }
            count++;
        }
    if (count == 0) {
        out.empty_domain = true;
        return out;
    }
    const double inv = 1.0 / double(count);
    const double ginv = inv * grad_scale;
    double sum = 0;
    for (int y = 0; y < rendered.height(); ++y)
        for (int x = 0; x < rendered.width(); ++x) {
            if (!rendered.validity.at(x, y) || !reference.validity.at(x, y) ||
                occlusion.at(x, y))
                continue;
            for (int c = 0; c < 2; ++c) {
                double diff = rendered.uv.at(x, y, c) - reference.uv.at(x, y, c);
                sum += std::abs(diff);
                if (d_flow) d_flow->at(x, y, c) += (diff > 0 ? ginv : (diff < 0 ? -ginv : 0.0));
            }
        }
    out.value = sum * inv;
    out.pixels = count;
    return out;
}

/// Mean absolute difference of normal components over masked pixels.
inline LossValue normal_loss(const ImageD& rendered_normal, const ImageD& reference_normal,
                             const MaskImage& mask, ImageD* d_normal = nullptr,
                             double grad_scale = 1.0) {
    if (!rendered_normal.same_shape(reference_normal))
        throw std::invalid_argument("normal_loss: shape mismatch");
    size_t count = 0;
    for (uint8_t m : mask.data) count += m ? 1 : 0;
    if (count == 0) return {0.0, 0, true};
    const double inv = 1.0 / (double(count) * 3.0);
    const double ginv = inv * grad_scale;
    double sum = 0;
    for (int y = 0; y < rendered_normal.height; ++y)
        for (int x = 0; x < rendered_normal.width; ++x) {
            if (!mask.at(x, y)) continue;
            for (int c = 0; c < 3; ++c) {
                double diff = rendered_normal.at(x, y, c) - reference_normal.at(x, y, c);
                sum += std::abs(diff);
                if (d_normal) d_normal->at(x, y, c) += (diff > 0 ? ginv : (diff < 0 ? -ginv : 0.0));
            }
        }
    return {sum * inv, count, false};
}

struct LossTerms {
    double rendering = 0, mask = 0, dssim = 0, arap = 0, normal = 0, flow = 0;
};

/// Weighted sum in the fixed order r, m, DSSIM, arap, n, f. A non-finite term
/// aborts training with the term named.
inline double total_loss(const LossTerms& t, const LossWeights& w) {
    auto check = [](double v, const char* name) {
        if (!std::isfinite(v)) throw NumericalAbort(std::string("non-finite loss term: ") + name);
        return v;
    };
    return w.rendering * check(t.rendering, "rendering") + w.mask * check(t.mask, "mask") +
           w.dssim * check(t.dssim, "dssim") + w.arap * check(t.arap, "arap") +
           w.normal * check(t.normal, "normal") + w.flow * check(t.flow, "flow");
}

struct LossReport {
    int64_t iteration = 0;
    std::string stage;
    int t_a = 0, t_b = 0;
    LossTerms terms;
    double total = 0;
    size_t px_rendering = 0, px_mask = 0, px_dssim = 0, px_normal = 0, px_flow = 0;
    size_t occlusion_skipped = 0;

    std::string to_line() const {
        char buf[640];
        std::snprintf(buf, sizeof(buf),
                      "iter=%lld stage=%s ta=%d tb=%d Lr=%.17g Lm=%.17g Ldssim=%.17g "
                      "Larap=%.17g Ln=%.17g Lf=%.17g total=%.17g nr=%zu nm=%zu nd=%zu nn=%zu "
                      "nf=%zu occl=%zu",
                      (long long)iteration, stage.c_str(), t_a, t_b, terms.rendering, terms.mask,
                      terms.dssim, terms.arap, terms.normal, terms.flow, total, px_rendering,
                      px_mask, px_dssim, px_normal, px_flow, occlusion_skipped);
        return buf;
    }
};

} // namespace gf4d
