// Copyright Contributors to the gf4d Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "gf4d/image.hpp"
#include "gf4d/io.hpp"

namespace gf4d {

// ---------------------------------------------------------------------------
// Keyframe scheduling: keyframes at 1, 1+interval, ... plus N when uncovered.

struct KeyframeSchedule {
    int timeline = 0;
    int interval = 8;
    std::vector<int> keyframes; // ascending, 1-based

    KeyframeSchedule() = default;
    KeyframeSchedule(int timeline_, int interval_) : timeline(timeline_), interval(interval_) {
        if (timeline < 1) throw std::invalid_argument("KeyframeSchedule: empty timeline");
        if (interval < 1) throw std::invalid_argument("KeyframeSchedule: interval must be >= 1");
        for (int n = 1; n <= timeline; n += interval) keyframes.push_back(n);
        if (keyframes.back() != timeline) keyframes.push_back(timeline);
    }

    bool is_keyframe(int n) const {
        return std::binary_search(keyframes.begin(), keyframes.end(), n);
    }

    /// Bracketing keyframe pair (prev < n < next) for a non-keyframe.
    std::pair<int, int> bracket(int n) const {
        if (n < 1 || n > timeline) throw std::invalid_argument("bracket: frame out of range");
        if (is_keyframe(n)) throw std::invalid_argument("bracket: frame is a keyframe");
        auto it = std::upper_bound(keyframes.begin(), keyframes.end(), n);
        return {*(it - 1), *it};
    }
};

// ---------------------------------------------------------------------------
// Feature warping and Eq.-style propagation.

/// Downsamples a pixel-resolution flow to the feature stride: bilinear at
/// cell centers, displacements rescaled by the stride. A cell is valid only
/// when all four taps are valid.
inline FlowMap downsample_flow(const FlowMap& flow, int stride) {
    const int fw = flow.width() / stride, fh = flow.height() / stride;
    FlowMap out{fw, fh};
    for (int y = 0; y < fh; ++y)
        for (int x = 0; x < fw; ++x) {
            double px = (x + 0.5) * stride - 0.5, py = (y + 0.5) * stride - 0.5;
            if (!bilinear_taps_valid(flow.uv, px, py, &flow.validity)) continue;
            out.set(x, y, {sample_bilinear(flow.uv, px, py, 0) / stride,
                           sample_bilinear(flow.uv, px, py, 1) / stride});
        }
    return out;
}

struct WarpedFeatures {
    FeatureVolume features;
    MaskImage validity; // H' x W'
};

/// Backward warping: output(x) = bilinear sample of source at x + flow(x).
/// Samples leaving the grid or sitting on invalid flow are marked invalid.
inline WarpedFeatures warp_features(const FeatureVolume& source, const FlowMap& flow) {
    if (flow.width() != source.width || flow.height() != source.height)
        throw std::invalid_argument("warp_features: flow resolution must match the feature grid");
    WarpedFeatures out;
    out.features = source;
    out.validity = MaskImage(source.width, source.height, 1, 0);
    std::fill(out.features.grid.begin(), out.features.grid.end(), 0.0f);
    for (int y = 0; y < source.height; ++y)
        for (int x = 0; x < source.width; ++x) {
            if (!flow.validity.at(x, y)) continue;
            const double sx = x + flow.uv.at(x, y, 0);
            const double sy = y + flow.uv.at(x, y, 1);
            // Samples on the grid boundary are still on the grid; the edge
            // tap then carries zero weight.
            if (sx < 0 || sy < 0 || sx > source.width - 1 || sy > source.height - 1) continue;
            int x0 = std::min(int(std::floor(sx)), source.width - 2 >= 0 ? source.width - 2 : 0);
            int y0 = std::min(int(std::floor(sy)), source.height - 2 >= 0 ? source.height - 2 : 0);
            const double fx = sx - x0, fy = sy - y0;
            const int x1 = std::min(x0 + 1, source.width - 1);
            const int y1 = std::min(y0 + 1, source.height - 1);
            const double w00 = (1 - fx) * (1 - fy), w10 = fx * (1 - fy);
            const double w01 = (1 - fx) * fy, w11 = fx * fy;
            for (int c = 0; c < source.channels; ++c) {
                double v = w00 * source.at(x0, y0, c) + w10 * source.at(x1, y0, c) +
                           w01 * source.at(x0, y1, c) + w11 * source.at(x1, y1, c);
                out.features.at(x, y, c) = float(v);
            }
            out.validity.at(x, y) = 1;
        }
    return out;
}

/// Position weight for frame n between its bracketing keyframes. The
/// continuity-corrected form rises 0 -> 1 from prev to next; the printed form
/// is its mirror image and stays available behind the flag.
inline double propagation_lambda(int n, int prev, int next, bool printed_form = false) {
    const double denom = double(next - prev);
    return printed_form ? double(next - n) / denom : double(n - prev) / denom;
}

/// Blends two warped keyframe feature volumes for frame n. Cells where only
/// one warp is valid take it fully; cells where neither is valid keep the
/// frame's own feature. Output is clamped to the per-cell interval of the two
/// warps wherever both are valid.
inline FeatureVolume propagate(int n, const KeyframeSchedule& schedule,
                               const FeatureVolume& own, const WarpedFeatures& warped_prev,
                               const WarpedFeatures& warped_next, bool printed_lambda = false) {
    if (schedule.is_keyframe(n))
        throw std::invalid_argument("propagate: keyframes are never propagated");
    if (!warped_prev.features.same_shape(warped_next.features) ||
        !own.same_shape(warped_prev.features))
        throw std::invalid_argument("propagate: feature shape mismatch");
    auto [prev, next] = schedule.bracket(n);
    const double lam = propagation_lambda(n, prev, next, printed_lambda);

    FeatureVolume out = own;
    out.frame_index = n;
    for (int y = 0; y < own.height; ++y)
        for (int x = 0; x < own.width; ++x) {
            const bool pv = warped_prev.validity.at(x, y) != 0;
            const bool nv = warped_next.validity.at(x, y) != 0;
            for (int c = 0; c < own.channels; ++c) {
                if (pv && nv) {
                    const double a = warped_prev.features.at(x, y, c);
                    const double b = warped_next.features.at(x, y, c);
                    double v = a + lam * (b - a); // exact fixed point when a == b
                    out.at(x, y, c) = float(std::clamp(v, std::min(a, b), std::max(a, b)));
                } else if (pv) {
                    out.at(x, y, c) = warped_prev.features.at(x, y, c);
                } else if (nv) {
                    out.at(x, y, c) = warped_next.features.at(x, y, c);
                } // else: keep the frame's own feature
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// Enlarged self-attention: queries from one frame, keys/values concatenated
// over all frames of the viewpoint.

inline FeatureVolume enlarged_self_attention(const FeatureVolume& query_frame,
                                             const std::vector<FeatureVolume>& all_frames,
                                             int heads = 1) {
    if (all_frames.empty()) throw std::invalid_argument("enlarged_self_attention: no frames");
    for (const auto& f : all_frames)
        if (!f.same_shape(query_frame))
            throw std::invalid_argument("enlarged_self_attention: shape mismatch");
    const int C = query_frame.channels;
    if (heads < 1 || C % heads != 0)
        throw std::invalid_argument("enlarged_self_attention: bad head count");
    const int hc = C / heads;
    const size_t tokens = size_t(query_frame.width) * query_frame.height;
    const double inv_sqrt = 1.0 / std::sqrt(double(hc));

    FeatureVolume out = query_frame;
    std::vector<double> logits;
    logits.reserve(all_frames.size() * tokens);
    for (size_t qi = 0; qi < tokens; ++qi) {
        for (int h = 0; h < heads; ++h) {
            logits.clear();
            double max_logit = -1e300;
            for (const auto& frame : all_frames)
                for (size_t ki = 0; ki < tokens; ++ki) {
                    double dot = 0;
                    for (int c = 0; c < hc; ++c)
                        dot += double(query_frame.grid[qi * C + h * hc + c]) *
                               double(frame.grid[ki * C + h * hc + c]);
                    double l = dot * inv_sqrt;
                    logits.push_back(l);
                    max_logit = std::max(max_logit, l);
                }
            double denom = 0;
            for (double& l : logits) {
                l = std::exp(l - max_logit);
                denom += l;
            }
            for (int c = 0; c < hc; ++c) {
                double acc = 0;
                size_t li = 0;
                for (const auto& frame : all_frames)
                    for (size_t ki = 0; ki < tokens; ++ki, ++li)
                        acc += logits[li] * double(frame.grid[ki * C + h * hc + c]);
                out.grid[qi * C + h * hc + c] = float(acc / denom);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Denoiser interface and the deterministic toy denoiser.

constexpr int kDenoiseSteps = 40; // T

/// Behavioral contract of a pluggable denoiser. One step moves the supplied
/// frames from step t to t-1; the self-attention features of a frame at step
/// t are exposed through `features_at`, and injected features replace the
/// frame's own feature volume for its step.
class DenoiserInterface {
public:
    virtual ~DenoiserInterface() = default;

    virtual int total_steps() const { return kDenoiseSteps; }

    /// The self-attention features a frame exposes at the current step
    /// (before stepping): for the toy denoiser, its current volume.
    virtual FeatureVolume features_at(const FeatureVolume& frame_state) const = 0;

    /// One denoising step t -> t-1 for one frame. `injected` (when present)
    /// replaces the frame's own self-attention features. `enlarged_sa`
    /// signals that keys/values span all frames of the viewpoint; the toy
    /// denoiser's per-frame contraction ignores it by construction.
    virtual FeatureVolume step(const FeatureVolume& frame_state, int t,
                               const FeatureVolume* injected, bool enlarged_sa) const = 0;

    /// Decodes a final feature volume to an image.
    virtual ImageD decode(const FeatureVolume& volume) const = 0;

    /// Encodes a target image to the feature grid (used for seeding tests).
    virtual FeatureVolume encode(const ImageD& image, int frame_index,
                                 int viewpoint_index) const = 0;
};

/// Deterministic stand-in for a pretrained multiview denoiser: each step
/// contracts the volume toward the encoding of its target frame by gamma.
/// With C = 3 * stride^2 the codec is space-to-depth and decode is lossless;
/// smaller C keeps pooled RGB in channels 0..2 plus fixed channel mixes.
class ToyDenoiser : public DenoiserInterface {
public:
    ToyDenoiser(std::vector<ImageD> targets, double gamma, int stride = 8, int channels = 16,
                int steps = kDenoiseSteps)
        : gamma_(gamma), stride_(stride), channels_(channels), steps_(steps) {
        if (!(gamma >= 0.0 && gamma <= 1.0))
            throw std::invalid_argument("ToyDenoiser: gamma must lie in [0,1]");
        if (targets.empty()) throw std::invalid_argument("ToyDenoiser: no targets");
        for (size_t n = 0; n < targets.size(); ++n)
            encoded_.push_back(encode(targets[n], int(n + 1), 0));
        width_ = targets[0].width;
        height_ = targets[0].height;
    }

    int total_steps() const override { return steps_; }
    int stride() const { return stride_; }
    int channels() const { return channels_; }
    bool lossless() const { return channels_ == 3 * stride_ * stride_; }

    FeatureVolume features_at(const FeatureVolume& frame_state) const override {
        return frame_state;
    }

    FeatureVolume step(const FeatureVolume& frame_state, int t, const FeatureVolume* injected,
                       bool /*enlarged_sa*/) const override {
        const FeatureVolume& base = injected ? *injected : frame_state;
        const FeatureVolume& target = encoded_.at(size_t(base.frame_index - 1));
        if (!base.same_shape(target)) throw std::invalid_argument("ToyDenoiser: shape mismatch");
        FeatureVolume out = base;
        out.denoise_step = t - 1;
        for (size_t i = 0; i < out.grid.size(); ++i)
            out.grid[i] = float((1.0 - gamma_) * double(base.grid[i]) +
                                gamma_ * double(target.grid[i]));
        return out;
    }

    FeatureVolume encode(const ImageD& image, int frame_index, int viewpoint_index) const override {
        if (image.width % stride_ != 0 || image.height % stride_ != 0)
            throw std::invalid_argument("ToyDenoiser: image size must be divisible by the stride");
        FeatureVolume fv;
        fv.width = image.width / stride_;
        fv.height = image.height / stride_;
        fv.channels = channels_;
        fv.frame_index = frame_index;
        fv.viewpoint_index = viewpoint_index;
        fv.denoise_step = steps_;
        fv.grid.assign(size_t(fv.width) * fv.height * channels_, 0.0f);
        if (lossless()) {
            // Space-to-depth: each cell stores its stride x stride RGB block.
            for (int y = 0; y < fv.height; ++y)
                for (int x = 0; x < fv.width; ++x)
                    for (int sy = 0; sy < stride_; ++sy)
                        for (int sx = 0; sx < stride_; ++sx)
                            for (int c = 0; c < 3; ++c)
                                fv.at(x, y, (sy * stride_ + sx) * 3 + c) =
                                    float(image.at(x * stride_ + sx, y * stride_ + sy, c));
            return fv;
        }
        for (int y = 0; y < fv.height; ++y)
            for (int x = 0; x < fv.width; ++x) {
                Vec3 mean{0, 0, 0};
                for (int sy = 0; sy < stride_; ++sy)
                    for (int sx = 0; sx < stride_; ++sx)
                        mean += Vec3{image.at(x * stride_ + sx, y * stride_ + sy, 0),
                                     image.at(x * stride_ + sx, y * stride_ + sy, 1),
                                     image.at(x * stride_ + sx, y * stride_ + sy, 2)};
                mean *= 1.0 / double(stride_ * stride_);
                for (int c = 0; c < channels_; ++c) {
                    if (c < 3) {
                        fv.at(x, y, c) = float(mean[c]);
                    } else {
                        // Fixed pseudo-random channel mixes of the pooled RGB.
                        double a = hash_unit(uint64_t(c) * 3 + 11) * 2 - 1;
                        double b = hash_unit(uint64_t(c) * 3 + 12) * 2 - 1;
                        double d = hash_unit(uint64_t(c) * 3 + 13) * 2 - 1;
                        fv.at(x, y, c) = float(a * mean.x + b * mean.y + d * mean.z);
                    }
                }
            }
        return fv;
    }

    ImageD decode(const FeatureVolume& volume) const override {
        ImageD out(volume.width * stride_, volume.height * stride_, 3);
        if (lossless()) {
            for (int y = 0; y < volume.height; ++y)
                for (int x = 0; x < volume.width; ++x)
                    for (int sy = 0; sy < stride_; ++sy)
                        for (int sx = 0; sx < stride_; ++sx)
                            for (int c = 0; c < 3; ++c)
                                out.at(x * stride_ + sx, y * stride_ + sy, c) =
                                    clamp01(volume.at(x, y, (sy * stride_ + sx) * 3 + c));
            return out;
        }
        for (int y = 0; y < out.height; ++y)
            for (int x = 0; x < out.width; ++x)
                for (int c = 0; c < 3; ++c)
                    out.at(x, y, c) = clamp01(volume.at(x / stride_, y / stride_, c));
        return out;
    }

private:
    double gamma_;
    int stride_, channels_, steps_;
    int width_ = 0, height_ = 0;
    std::vector<FeatureVolume> encoded_;
};

// ---------------------------------------------------------------------------
// The generation loop: keyframe denoising with token propagation for the
// first tau sampler iterations, independent denoising afterwards.

struct GenerationFlows {
    // For every non-keyframe n: flows from n to its bracketing keyframes,
    // already downsampled to the feature stride.
    std::vector<std::optional<FlowMap>> to_prev; // index n-1
    std::vector<std::optional<FlowMap>> to_next;
};

struct GenerationStats {
    std::vector<double> valid_warp_fraction; // per frame (1 for keyframes)
};

/// Runs the full sampler for one viewpoint. During the first `tau` of the T
/// sampler iterations (the high-noise early stages) only keyframes are
/// denoised; their features are warped along the supplied flows and blended
/// into the non-keyframes, which then step on the injected features. The
/// remaining iterations denoise every frame independently with enlarged
/// self-attention. Keyframe trajectories never depend on other frames.
inline std::vector<FeatureVolume> run_generation(const DenoiserInterface& denoiser,
                                                 const KeyframeSchedule& schedule,
                                                 const GenerationFlows& flows, int tau,
                                                 std::vector<FeatureVolume> state,
                                                 bool printed_lambda = false,
                                                 GenerationStats* stats = nullptr) {
    const int N = schedule.timeline;
    if (int(state.size()) != N)
        throw std::invalid_argument("run_generation: need one initial volume per frame");
    for (int n = 1; n <= N; ++n) {
        if (schedule.is_keyframe(n)) continue;
        if (size_t(n - 1) >= flows.to_prev.size() || !flows.to_prev[size_t(n - 1)] ||
            !flows.to_next[size_t(n - 1)])
            throw std::invalid_argument("run_generation: missing flow for frame " +
                                        std::to_string(n));
    }
    const int T = denoiser.total_steps();
    tau = std::clamp(tau, 0, T);
    if (stats) stats->valid_warp_fraction.assign(size_t(N), 1.0);

    for (int iter = 0; iter < T; ++iter) {
        const int t = T - iter; // sampler runs t = T .. 1
        const bool propagating = iter < tau;
        if (propagating) {
            // Keyframe features at this step, exposed before stepping.
            std::vector<FeatureVolume> kf_features(state.size());
            for (int n : schedule.keyframes)
                kf_features[size_t(n - 1)] = denoiser.features_at(state[size_t(n - 1)]);
            std::vector<FeatureVolume> next_state = state;
            for (int n : schedule.keyframes)
                next_state[size_t(n - 1)] = denoiser.step(state[size_t(n - 1)], t, nullptr, true);
            for (int n = 1; n <= N; ++n) {
                if (schedule.is_keyframe(n)) continue;
                auto [prev, next] = schedule.bracket(n);
                WarpedFeatures wp = warp_features(kf_features[size_t(prev - 1)],
                                                  *flows.to_prev[size_t(n - 1)]);
                WarpedFeatures wn = warp_features(kf_features[size_t(next - 1)],
                                                  *flows.to_next[size_t(n - 1)]);
                if (stats && iter == 0) {
                    size_t own_valid = 0, warped = 0;
                    const FlowMap& fp = *flows.to_prev[size_t(n - 1)];
                    for (int y = 0; y < wp.validity.height; ++y)
                        for (int x = 0; x < wp.validity.width; ++x) {
                            if (fp.validity.at(x, y)) ++own_valid;
                            if (wp.validity.at(x, y)) ++warped;
                        }
                    stats->valid_warp_fraction[size_t(n - 1)] =
                        own_valid ? double(warped) / double(own_valid) : 0.0;
                }
                FeatureVolume own = denoiser.features_at(state[size_t(n - 1)]);
                FeatureVolume injected = propagate(n, schedule, own, wp, wn, printed_lambda);
                next_state[size_t(n - 1)] = denoiser.step(state[size_t(n - 1)], t, &injected, true);
            }
            state = std::move(next_state);
        } else {
            for (int n = 1; n <= N; ++n)
                state[size_t(n - 1)] = denoiser.step(state[size_t(n - 1)], t, nullptr, true);
        }
    }
    return state;
}

/// Deterministic per-(view, cell, channel) initial noise, shared across the
/// frames of a viewpoint so symmetric inputs stay symmetric.
inline std::vector<FeatureVolume> make_initial_volumes(int frames, int view, int grid_w,
                                                       int grid_h, int channels, int total_steps,
                                                       uint64_t seed, bool per_frame_noise) {
    std::vector<FeatureVolume> out{size_t(frames)};
    for (int n = 1; n <= frames; ++n) {
        FeatureVolume fv;
        fv.width = grid_w;
        fv.height = grid_h;
        fv.channels = channels;
        fv.frame_index = n;
        fv.viewpoint_index = view;
        fv.denoise_step = total_steps;
        fv.grid.resize(size_t(grid_w) * grid_h * channels);
        const uint64_t frame_salt = per_frame_noise ? uint64_t(n) : 0;
        for (size_t i = 0; i < fv.grid.size(); ++i) {
            uint64_t h = mix_hash(seed ^ (uint64_t(view) << 40) ^ (frame_salt << 20) ^ i);
            fv.grid[i] = float(hash_unit(h) * 2.0 - 1.0);
        }
        out[size_t(n - 1)] = fv;
    }
    return out;
}

} // namespace gf4d
