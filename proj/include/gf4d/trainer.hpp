// Copyright Contributors to the gf4d Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <random>
#include <sstream>

#include "gf4d/io.hpp"
#include "gf4d/losses.hpp"
#include "gf4d/optimizer.hpp"
#include "gf4d/parallel.hpp"
#include "gf4d/rasterizer.hpp"
#include "gf4d/sequence.hpp"

namespace gf4d {

struct TrainConfig {
    int iterations_static = 5000;
    int iterations_coarse = 10000;
    int iterations_refine = 15000;

    double lr_deform = 3e-4;       // initial MLP rate, exponential decay per stage
    double lr_deform_final = 3e-6;
    double lr_position = 1.6e-4;
    double lr_position_final = 1.6e-6; // exponential decay per stage, 3DGS practice
    double lr_log_scale = 5e-3;
    double lr_orientation = 1e-3;
    double lr_opacity = 5e-2;
    double lr_color = 1e-2;
    double lr_rbf_radius = 1e-3;

    double adjacent_bias = 0.7; // beta: probability of sampling an adjacent pair
    int control_points = 512;
    int knn_graph_degree = 4;

    bool densify_enabled = true;
    int densify_start = 500, densify_end = 4000, densify_interval = 100;
    double densify_grad_threshold = 2e-5; // px, averaged view-space positional gradient (weighted)
    double densify_split_scale = 0.045;   // world units; larger splats split, smaller clone
    double prune_opacity = 0.005;
    double prune_scale = 0.3;       // world units; oversized splats are dropped
    int opacity_reset_iteration = 0; // 0 disables the mid-static opacity reset
    int max_gaussians = 20000;
    int init_gaussians = 2000;

    LossWeights weights;
    uint64_t seed = 0;
    int holdout_view = 0; // 1-based; 0 trains on every view
    int front_view = 1;
    int canonical_timestep = 1;
    int checkpoint_interval = 500;
    double occlusion_threshold = 1.5;
    double coverage_alpha = kDefaultCoverageAlpha;

    static const std::vector<std::string>& known_keys() {
        static const std::vector<std::string> keys = {
            "iterations_static", "iterations_coarse", "iterations_refine", "lr_deform",
            "lr_deform_final", "lr_position", "lr_position_final", "lr_log_scale", "lr_orientation", "lr_opacity",
            "lr_color", "lr_rbf_radius", "adjacent_bias", "control_points", "knn_graph_degree",
            "densify_enabled", "densify_start", "densify_end", "densify_interval",
            "densify_grad_threshold", "densify_split_scale", "prune_opacity", "prune_scale",
            "opacity_reset_iteration", "max_gaussians",
            "init_gaussians", "lambda_r", "lambda_m", "lambda_dssim", "lambda_arap", "lambda_n",
            "lambda_f", "seed", "holdout_view", "front_view", "canonical_timestep",
            "checkpoint_interval", "occlusion_threshold", "coverage_alpha"};
        return keys;
    }

    static TrainConfig from_config(const Config& cfg) {
        for (const auto& [k, v] : cfg.entries) {
            bool ok = false;
            for (const auto& known : known_keys()) ok = ok || known == k;
            if (!ok) throw std::invalid_argument("unknown train config key: " + k);
        }
        TrainConfig t;
        t.iterations_static = cfg.get_int("iterations_static", t.iterations_static);
        t.iterations_coarse = cfg.get_int("iterations_coarse", t.iterations_coarse);
        t.iterations_refine = cfg.get_int("iterations_refine", t.iterations_refine);
        t.lr_deform = cfg.get_double("lr_deform", t.lr_deform);
        t.lr_deform_final = cfg.get_double("lr_deform_final", t.lr_deform_final);
        t.lr_position = cfg.get_double("lr_position", t.lr_position);
        t.lr_position_final = cfg.get_double("lr_position_final", t.lr_position_final);
        t.lr_log_scale = cfg.get_double("lr_log_scale", t.lr_log_scale);
        t.lr_orientation = cfg.get_double("lr_orientation", t.lr_orientation);
        t.lr_opacity = cfg.get_double("lr_opacity", t.lr_opacity);
        t.lr_color = cfg.get_double("lr_color", t.lr_color);
        t.lr_rbf_radius = cfg.get_double("lr_rbf_radius", t.lr_rbf_radius);
        t.adjacent_bias = cfg.get_double("adjacent_bias", t.adjacent_bias);
        t.control_points = cfg.get_int("control_points", t.control_points);
        t.knn_graph_degree = cfg.get_int("knn_graph_degree", t.knn_graph_degree);
        t.densify_enabled = cfg.get_int("densify_enabled", t.densify_enabled ? 1 : 0) != 0;
        t.densify_start = cfg.get_int("densify_start", t.densify_start);
        t.densify_end = cfg.get_int("densify_end", t.densify_end);
        t.densify_interval = cfg.get_int("densify_interval", t.densify_interval);
        t.densify_grad_threshold = cfg.get_double("densify_grad_threshold", t.densify_grad_threshold);
        t.densify_split_scale = cfg.get_double("densify_split_scale", t.densify_split_scale);
        t.prune_opacity = cfg.get_double("prune_opacity", t.prune_opacity);
        t.prune_scale = cfg.get_double("prune_scale", t.prune_scale);
        t.opacity_reset_iteration = cfg.get_int("opacity_reset_iteration", t.opacity_reset_iteration);
        t.max_gaussians = cfg.get_int("max_gaussians", t.max_gaussians);
        t.init_gaussians = cfg.get_int("init_gaussians", t.init_gaussians);
        t.weights.rendering = cfg.get_double("lambda_r", t.weights.rendering);
        t.weights.mask = cfg.get_double("lambda_m", t.weights.mask);
        t.weights.dssim = cfg.get_double("lambda_dssim", t.weights.dssim);
        t.weights.arap = cfg.get_double("lambda_arap", t.weights.arap);
        t.weights.normal = cfg.get_double("lambda_n", t.weights.normal);
        t.weights.flow = cfg.get_double("lambda_f", t.weights.flow);
        t.seed = uint64_t(cfg.get_int("seed", int(t.seed)));
        t.holdout_view = cfg.get_int("holdout_view", t.holdout_view);
        t.front_view = cfg.get_int("front_view", t.front_view);
        t.canonical_timestep = cfg.get_int("canonical_timestep", t.canonical_timestep);
        t.checkpoint_interval = cfg.get_int("checkpoint_interval", t.checkpoint_interval);
        t.occlusion_threshold = cfg.get_double("occlusion_threshold", t.occlusion_threshold);
        t.coverage_alpha = cfg.get_double("coverage_alpha", t.coverage_alpha);
        if (!(t.adjacent_bias >= 0 && t.adjacent_bias <= 1))
            throw std::invalid_argument("adjacent_bias must lie in [0,1]");
        if (t.iterations_static < 0 || t.iterations_coarse < 0 || t.iterations_refine < 0)
            throw std::invalid_argument("iteration counts must be nonnegative");
        return t;
    }

    std::string echo() const {
        std::ostringstream ss;
        ss.precision(17);
        ss << "iterations_static=" << iterations_static << "\niterations_coarse="
           << iterations_coarse << "\niterations_refine=" << iterations_refine
           << "\nlr_deform=" << lr_deform << "\nlr_deform_final=" << lr_deform_final
           << "\nlr_position=" << lr_position << "\nlr_position_final=" << lr_position_final
           << "\nlr_log_scale=" << lr_log_scale
           << "\nlr_orientation=" << lr_orientation << "\nlr_opacity=" << lr_opacity
           << "\nlr_color=" << lr_color << "\nlr_rbf_radius=" << lr_rbf_radius
           << "\nadjacent_bias=" << adjacent_bias << "\ncontrol_points=" << control_points
           << "\nknn_graph_degree=" << knn_graph_degree << "\ndensify_enabled=" << densify_enabled
           << "\ndensify_start=" << densify_start << "\ndensify_end=" << densify_end
           << "\ndensify_interval=" << densify_interval << "\ndensify_grad_threshold="
           << densify_grad_threshold << "\ndensify_split_scale=" << densify_split_scale
           << "\nprune_opacity=" << prune_opacity << "\nprune_scale=" << prune_scale
           << "\nopacity_reset_iteration=" << opacity_reset_iteration
           << "\nmax_gaussians=" << max_gaussians
           << "\ninit_gaussians=" << init_gaussians << "\nlambda_r=" << weights.rendering
           << "\nlambda_m=" << weights.mask << "\nlambda_dssim=" << weights.dssim
           << "\nlambda_arap=" << weights.arap << "\nlambda_n=" << weights.normal
           << "\nlambda_f=" << weights.flow << "\nseed=" << seed << "\nholdout_view="
           << holdout_view << "\nfront_view=" << front_view << "\ncanonical_timestep="
           << canonical_timestep << "\ncheckpoint_interval=" << checkpoint_interval
           << "\nocclusion_threshold=" << occlusion_threshold << "\ncoverage_alpha="
           << coverage_alpha << "\n";
        return ss.str();
    }
};

struct TrainState {
    GaussianField field;
    AdamGroup g_position, g_orientation, g_log_scale, g_opacity, g_color, g_rbf, g_net;
    int64_t iteration = 0; // within the current stage
    std::string stage = "static";
    std::mt19937_64 rng;
    std::vector<double> grad_accum; // densification statistics
    std::vector<double> grad_denom;
    std::vector<std::pair<uint32_t, uint32_t>> control_edges;

    void init_optimizers(const TrainConfig& cfg) {
        g_position.lr = cfg.lr_position;
        g_position.eps = 1e-15;
        g_orientation.lr = cfg.lr_orientation;
        g_log_scale.lr = cfg.lr_log_scale;
        g_opacity.lr = cfg.lr_opacity;
        g_color.lr = cfg.lr_color;
        g_rbf.lr = cfg.lr_rbf_radius;
        g_net.lr = cfg.lr_deform;
        g_position.reset(field.positions.size());
        g_orientation.reset(field.orientations.size());
        g_log_scale.reset(field.log_scales.size());
        g_opacity.reset(field.opacity_logits.size());
        g_color.reset(field.colors.size());
        g_rbf.reset(field.rbf_log_radii.size());
        g_net.reset(field.deformation.weights.size());
    }

    void rebuild_control_edges(int degree) {
        std::vector<Vec3> cp(field.control_count());
        for (size_t j = 0; j < cp.size(); ++j) cp[j] = field.control_position(j);
        control_edges = control_graph_edges(cp, degree);
    }
};

/// With probability beta returns a uniformly random adjacent pair, otherwise a
/// uniformly random distinct pair; always ordered t_a < t_b.
inline std::pair<int, int> sample_timestep_pair(int timeline, double beta, std::mt19937_64& rng) {
    if (timeline < 2) throw std::invalid_argument("sample_timestep_pair: need at least 2 timesteps");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    if (unit(rng) < beta) {
        std::uniform_int_distribution<int> pick(1, timeline - 1);
        int t = pick(rng);
        return {t, t + 1};
    }
    std::uniform_int_distribution<int> pick(1, timeline);
    int a = pick(rng), b = pick(rng);
    while (b == a) b = pick(rng);
    if (a > b) std::swap(a, b);
    return {a, b};
}

namespace detail {

/// Chains consecutive-pair reference flows into an (a -> b) flow by repeated
/// bilinear lookup. Works in either direction.
inline FlowMap chain_sequence_flow(const MultiviewSequence& seq, int view, int a, int b) {
    const Camera& cam = seq.cameras[size_t(view - 1)];
    FlowMap acc{cam.width, cam.height};
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) acc.validity.at(x, y) = 1;
    if (a == b) return acc;
    const int dir = b > a ? 1 : -1;
    for (int t = a; t != b; t += dir) {
        const FlowMap& step = dir > 0 ? seq.flows_fwd[seq.flow_slot(t, view)]
                                      : seq.flows_bwd[seq.flow_slot(t - 1, view)];
        for (int y = 0; y < cam.height; ++y)
            for (int x = 0; x < cam.width; ++x) {
                if (!acc.validity.at(x, y)) continue;
                double sx = x + acc.uv.at(x, y, 0), sy = y + acc.uv.at(x, y, 1);
                if (!bilinear_taps_valid(step.uv, sx, sy, &step.validity)) {
                    acc.validity.at(x, y) = 0;
                    continue;
                }
                acc.uv.at(x, y, 0) += sample_bilinear(step.uv, sx, sy, 0);
                acc.uv.at(x, y, 1) += sample_bilinear(step.uv, sx, sy, 1);
            }
    }
    return acc;
}

struct LossScales {
    double rendering = 1, mask = 1, dssim = 1, normal = 1, flow = 1;
};

struct ViewJob {
    int view = 0;     // 1-based camera index
    int timestep = 0; // field timestep rendered
    bool with_flow = false;
    LossTerms terms;
    size_t px_rendering = 0, px_mask = 0, px_dssim = 0, px_normal = 0, px_flow = 0;
    size_t occl_skipped = 0;
    SplatGrads grads;
};

inline void accumulate_static_grads(const SplatGrads& sg, FieldGrads& fg) {
    const size_t n = sg.dopacity_logit.size();
    for (size_t i = 0; i < n; ++i) {
        fg.log_scales[3 * i] += sg.dlog_scale[i].x;
        fg.log_scales[3 * i + 1] += sg.dlog_scale[i].y;
        fg.log_scales[3 * i + 2] += sg.dlog_scale[i].z;
        fg.opacity_logits[i] += sg.dopacity_logit[i];
        fg.colors[3 * i] += sg.dcolor[i].x;
        fg.colors[3 * i + 1] += sg.dcolor[i].y;
        fg.colors[3 * i + 2] += sg.dcolor[i].z;
    }
}

inline void post_step_projection(GaussianField& f) {
    // Orientations unit after every update, colors inside the renderable range.
    for (size_t i = 0; i < f.gaussian_count(); ++i) {
        Quat q{f.orientations[4 * i], f.orientations[4 * i + 1], f.orientations[4 * i + 2],
               f.orientations[4 * i + 3]};
        Quat u = q.normalized();
        f.orientations[4 * i] = float(u.w);
        f.orientations[4 * i + 1] = float(u.x);
        f.orientations[4 * i + 2] = float(u.y);
        f.orientations[4 * i + 3] = float(u.z);
    }
    for (float& c : f.colors) c = std::clamp(c, 0.0f, 1.0f);
}

/// Renders one view/timestep, evaluates image-space losses against sequence
/// targets with weighted gradients, and backpropagates to splat gradients.
inline void run_view_job(const MultiviewSequence& seq, const std::vector<Gaussian3D>& splats,
                         const std::vector<Vec3>* paired_positions, const FlowMap* flow_ref_fwd,
                         const FlowMap* flow_ref_bwd, const TrainConfig& cfg,
                         const LossScales& scales, ViewJob& job) {
    const Camera& cam = seq.cameras[size_t(job.view - 1)];
    const size_t slot = seq.slot(job.timestep, job.view);
    const ImageD& target_rgb = seq.images[slot];
    const MaskImage& target_mask = seq.masks[slot];
    const bool have_normals = slot < seq.normals.size() && !seq.normals[slot].empty() &&
                              cfg.weights.normal > 0;

    RenderChannels ch;
    ch.rgb = true;
    ch.alpha = true;
    ch.depth = have_normals;
    ch.normal = have_normals;
    ch.flow = job.with_flow;
    RasterCache cache;
    RenderOutput out = rasterize(splats, cam, ch, &cache,
                                 job.with_flow ? paired_positions : nullptr, cfg.coverage_alpha);

    RenderGrads rg;
    rg.d_rgb = ImageD(cam.width, cam.height, 3);
    rg.d_alpha = ImageD(cam.width, cam.height, 1);

    auto photo = photometric_loss(out.rgb, target_rgb, target_mask, &rg.d_rgb, scales.rendering);
    job.terms.rendering = photo.value;
    job.px_rendering = photo.pixels;
    auto maskv = mask_loss(out.alpha, target_mask, &rg.d_alpha, scales.mask);
    job.terms.mask = maskv.value;
    job.px_mask = maskv.pixels;
    auto dssim = dssim_loss(out.rgb, target_rgb, target_mask, &rg.d_rgb, scales.dssim);
    job.terms.dssim = dssim.value;
    job.px_dssim = dssim.pixels;

    if (have_normals) {
        // Compare only where both the render and the reference carry normals.
        MaskImage both(cam.width, cam.height, 1, 0);
        const ImageD& ref = seq.normals[slot];
        for (int y = 0; y < cam.height; ++y)
            for (int x = 0; x < cam.width; ++x) {
                bool ref_ok = ref.at(x, y, 0) != 0 || ref.at(x, y, 1) != 0 || ref.at(x, y, 2) != 0;
                both.at(x, y) = (ref_ok && out.normal_valid.at(x, y)) ? 1 : 0;
            }
        rg.d_normal = ImageD(cam.width, cam.height, 3);
        auto nv = normal_loss(out.normal, ref, both, &rg.d_normal, scales.normal);
        job.terms.normal = nv.value;
        job.px_normal = nv.pixels;
    }

    if (job.with_flow && flow_ref_fwd && flow_ref_bwd) {
        MaskImage occ = compute_occlusion_mask(*flow_ref_fwd, *flow_ref_bwd,
                                               cfg.occlusion_threshold);
        rg.d_flow = ImageD(cam.width, cam.height, 2);
        auto fv = flow_loss(out.flow, *flow_ref_fwd, occ, &rg.d_flow, scales.flow);
        job.terms.flow = fv.value;
        job.px_flow = fv.pixels;
        job.occl_skipped = fv.occlusion_skipped;
    }

    job.grads = rasterize_backward(splats, cam, cache, out, rg);
}

} // namespace detail

/// Per-iteration progress record consumer.
using LossLogger = std::function<void(const LossReport&)>;
/// Periodic checkpoint hook (driven by checkpoint_interval).
using CheckpointHook = std::function<void(const TrainState&)>;

/// Train views: every camera except the held-out one.
inline std::vector<int> train_views(const MultiviewSequence& seq, const TrainConfig& cfg) {
    std::vector<int> views;
    for (int k = 1; k <= seq.views(); ++k)
        if (k != cfg.holdout_view) views.push_back(k);
    return views;
}

// ---------------------------------------------------------------------------
// Density control.

/// Clone/split by accumulated view-space positional gradient, prune by
/// opacity. Optimizer moments follow the surviving rows.
inline void densify_and_prune(TrainState& state, const TrainConfig& cfg) {
    GaussianField& f = state.field;
    const size_t n = f.gaussian_count();
    struct NewGaussian {
        Gaussian3D g;
        int64_t source; // parent index, or -1 for fresh moments
    };
    std::vector<NewGaussian> out;
    out.reserve(n + 64);

    for (size_t i = 0; i < n; ++i) {
        Gaussian3D g = f.gaussian(i);
        if (logistic(g.opacity_logit) < cfg.prune_opacity) continue; // prune
        const double avg_grad =
            state.grad_denom[i] > 0 ? state.grad_accum[i] / state.grad_denom[i] : 0.0;
        const double max_scale = std::exp(std::max({g.log_scale.x, g.log_scale.y, g.log_scale.z}));
        if (max_scale > cfg.prune_scale) continue; // oversized fuzz
        bool over = avg_grad > cfg.densify_grad_threshold &&
                    out.size() + 2 < size_t(cfg.max_gaussians);
        if (!over) {
            out.push_back({g, int64_t(i)});
            continue;
        }
        if (max_scale > cfg.densify_split_scale) {
            // Split into two samples along the major axis with shrunk scales.
            int axis = 0;
            if (g.log_scale.y >= g.log_scale.x && g.log_scale.y >= g.log_scale.z) axis = 1;
            if (g.log_scale.z >= g.log_scale.x && g.log_scale.z >= g.log_scale.y) axis = 2;
            Mat3 R = quat_to_mat(g.orientation.normalized());
            Vec3 dir = R.col(axis) * (0.7 * max_scale);
            Gaussian3D a = g, b = g;
            a.position = g.position + dir;
            b.position = g.position - dir;
            Vec3 shrink{g.log_scale.x - std::log(1.6), g.log_scale.y - std::log(1.6),
                        g.log_scale.z - std::log(1.6)};
            a.log_scale = b.log_scale = shrink;
            out.push_back({a, -1});
            out.push_back({b, -1});
        } else {
            // Clone with a small deterministic offset.
            Gaussian3D b = g;
            uint64_t h = mix_hash(uint64_t(i) * 0x51ull + uint64_t(state.iteration));
            Vec3 dir{hash_unit(h) - 0.5, hash_unit(h + 1) - 0.5, hash_unit(h + 2) - 0.5};
            b.position = g.position + dir.normalized() * (0.3 * max_scale);
            out.push_back({g, int64_t(i)});
            out.push_back({b, -1});
        }
    }
    if (out.empty()) {
        // Keep the most opaque survivor so the renderer always has input.
        size_t best = 0;
        for (size_t i = 1; i < n; ++i)
            if (f.opacity_logits[i] > f.opacity_logits[best]) best = i;
        out.push_back({f.gaussian(best), int64_t(best)});
    }

    const size_t m = out.size();
    GaussianField nf = f;
    nf.resize_gaussians(m);
    std::vector<int64_t> src1(m), src3(3 * m), src4(4 * m);
    for (size_t i = 0; i < m; ++i) {
        nf.set_gaussian(i, out[i].g);
        int64_t s = out[i].source;
        src1[i] = s;
        for (int c = 0; c < 3; ++c) src3[3 * i + c] = s < 0 ? -1 : 3 * s + c;
        for (int c = 0; c < 4; ++c) src4[4 * i + c] = s < 0 ? -1 : 4 * s + c;
    }
    f = std::move(nf);
    f.knn.clear(); // controls do not exist yet during the static stage
    state.g_position.remap(src3);
    state.g_orientation.remap(src4);
    state.g_log_scale.remap(src3);
    state.g_opacity.remap(src1);
    state.g_color.remap(src3);
    state.grad_accum.assign(m, 0.0);
    state.grad_denom.assign(m, 0.0);
}

// ---------------------------------------------------------------------------
// Static stage.

/// One static-stage iteration on the canonical keyframe.
inline void static_iteration(TrainState& state, const MultiviewSequence& seq,
                             const TrainConfig& cfg, const LossLogger& logger = {}) {
    const int keyframe = cfg.canonical_timestep;
    std::vector<int> views = train_views(seq, cfg);
    const size_t n = state.field.gaussian_count();

    std::vector<Gaussian3D> splats(n);
    for (size_t i = 0; i < n; ++i) splats[i] = state.field.gaussian(i);

    detail::LossScales scales;
    const double invk = 1.0 / double(views.size());
    scales.rendering = cfg.weights.rendering * invk;
    scales.mask = cfg.weights.mask * invk;
    scales.dssim = cfg.weights.dssim * invk;
    scales.normal = cfg.weights.normal * invk;

    std::vector<detail::ViewJob> jobs(views.size());
    parallel_for(int(views.size()), [&](int j) {
        jobs[size_t(j)].view = views[size_t(j)];
        jobs[size_t(j)].timestep = keyframe;
        detail::run_view_job(seq, splats, nullptr, nullptr, nullptr, cfg, scales, jobs[size_t(j)]);
    });

    FieldGrads fg;
    fg.resize_like(state.field);
    LossReport rep;
    rep.iteration = state.iteration;
    rep.stage = "static";
    rep.t_a = rep.t_b = keyframe;
    for (const auto& job : jobs) {
        rep.terms.rendering += job.terms.rendering * invk;
        rep.terms.mask += job.terms.mask * invk;
        rep.terms.dssim += job.terms.dssim * invk;
        rep.terms.normal += job.terms.normal * invk;
        rep.px_rendering += job.px_rendering;
        rep.px_mask += job.px_mask;
        rep.px_dssim += job.px_dssim;
        rep.px_normal += job.px_normal;
        detail::accumulate_static_grads(job.grads, fg);
        for (size_t i = 0; i < n; ++i) {
            fg.positions[3 * i] += job.grads.dposition[i].x;
            fg.positions[3 * i + 1] += job.grads.dposition[i].y;
            fg.positions[3 * i + 2] += job.grads.dposition[i].z;
            fg.orientations[4 * i] += job.grads.dorientation[i].w;
            fg.orientations[4 * i + 1] += job.grads.dorientation[i].x;
            fg.orientations[4 * i + 2] += job.grads.dorientation[i].y;
            fg.orientations[4 * i + 3] += job.grads.dorientation[i].z;
            state.grad_accum[i] += job.grads.mean2d_grad_norm[i];
        }
    }
    for (size_t i = 0; i < n; ++i) state.grad_denom[i] += 1.0;

    rep.total = total_loss(rep.terms, cfg.weights);
    if (logger) logger(rep);

    const double pos_scale = exp_decay_scale(cfg.lr_position, cfg.lr_position_final,
                                             state.iteration, cfg.iterations_static);
    state.g_position.step(state.field.positions, fg.positions, pos_scale);
    state.g_orientation.step(state.field.orientations, fg.orientations);
    state.g_log_scale.step(state.field.log_scales, fg.log_scales);
    state.g_opacity.step(state.field.opacity_logits, fg.opacity_logits);
    state.g_color.step(state.field.colors, fg.colors);
    detail::post_step_projection(state.field);

    if (cfg.densify_enabled && state.iteration >= cfg.densify_start &&
        state.iteration <= cfg.densify_end && cfg.densify_interval > 0 &&
        (state.iteration - cfg.densify_start) % cfg.densify_interval == cfg.densify_interval - 1)
        densify_and_prune(state, cfg);

    // Mid-stage opacity reset: splats must re-earn their opacity, which
    // starves floaters ahead of the following prunes.
    if (cfg.opacity_reset_iteration > 0 && state.iteration == cfg.opacity_reset_iteration) {
        const float cap = float(logit(0.05));
        for (float& o : state.field.opacity_logits) o = std::min(o, cap);
        state.g_opacity.reset(state.field.opacity_logits.size());
    }
}

/// Draws control points from the optimized static Gaussians and wires up the
/// deformation machinery.
inline void install_control_points(TrainState& state, const TrainConfig& cfg) {
    GaussianField& f = state.field;
    const size_t n = f.gaussian_count();
    std::vector<Vec3> pts(n);
    for (size_t i = 0; i < n; ++i) pts[i] = f.gaussian(i).position;
    const size_t m = std::min<size_t>(size_t(cfg.control_points), n);
    auto picked = fps_sample(pts, m, 0);

    f.control_rest.resize(3 * m);
    f.rbf_log_radii.resize(m);
    std::vector<Vec3> cp(m);
    for (size_t j = 0; j < m; ++j) {
        cp[j] = pts[picked[j]];
        f.control_rest[3 * j] = float(cp[j].x);
        f.control_rest[3 * j + 1] = float(cp[j].y);
        f.control_rest[3 * j + 2] = float(cp[j].z);
    }
    // Radius: mean spacing to the 3 nearest sibling controls.
    for (size_t j = 0; j < m; ++j) {
        std::array<double, 3> best{1e30, 1e30, 1e30};
        for (size_t o = 0; o < m; ++o) {
            if (o == j) continue;
            double d2 = (cp[j] - cp[o]).squared_norm();
            if (d2 < best[2]) {
                best[2] = d2;
                if (best[2] < best[1]) std::swap(best[1], best[2]);
                if (best[1] < best[0]) std::swap(best[0], best[1]);
            }
        }
        double mean_d = (std::sqrt(best[0]) + std::sqrt(best[1]) + std::sqrt(best[2])) / 3.0;
        f.rbf_log_radii[j] = float(std::log(std::max(mean_d, 1e-3)));
    }
    if (m >= 3 && n > 0) {
        auto knn = knn_assign(pts, cp);
        f.knn.resize(3 * n);
        for (size_t i = 0; i < n; ++i)
            for (int c = 0; c < 3; ++c) f.knn[3 * i + c] = knn[i][c];
    }
    f.deformation = DeformationNet{};
    f.deformation.init_weights(cfg.seed + 7);
    state.g_rbf.reset(f.rbf_log_radii.size());
    state.g_net.reset(f.deformation.weights.size());
    state.rebuild_control_edges(cfg.knn_graph_degree);
}

/// Runs (or resumes) the static stage loop and installs control points when
/// the schedule completes.
inline void run_static_stage(TrainState& state, const MultiviewSequence& seq,
                             const TrainConfig& cfg, const LossLogger& logger = {},
                             const CheckpointHook& hook = {}) {
    while (state.iteration < cfg.iterations_static) {
        static_iteration(state, seq, cfg, logger);
        ++state.iteration;
        if (hook && cfg.checkpoint_interval > 0 &&
            state.iteration % cfg.checkpoint_interval == 0 &&
            state.iteration < cfg.iterations_static)
            hook(state);
    }
    install_control_points(state, cfg);
}

/// Builds the seed state for the static stage: mask-carved positions,
/// spacing-derived scales, projected target colors.
inline TrainState make_static_state(const MultiviewSequence& seq, const TrainConfig& cfg) {
    std::vector<int> views = train_views(seq, cfg);
    if (views.size() < 2) throw std::invalid_argument("init_static: need at least 2 views");
    const int keyframe = cfg.canonical_timestep;
    for (int k : views)
        if (!seq.has_slot(keyframe, k))
            throw std::invalid_argument("init_static: missing keyframe slot for view " +
                                        std::to_string(k));

    TrainState state;
    state.stage = "static";
    state.rng.seed(cfg.seed);
    state.field.timeline_count = seq.frames;
    state.field.canonical_timestep = cfg.canonical_timestep;

    // Seed positions by carving against every view mask.
    std::vector<Vec3> pts;
    const Camera& cam0 = seq.cameras[size_t(views[0] - 1)];
    const double extent = cam0.half_extent;
    size_t attempts = size_t(cfg.init_gaussians) * 400 + 1000;
    for (size_t a = 0; a < attempts && pts.size() < size_t(cfg.init_gaussians); ++a) {
        Vec3 p{(hash_unit(a * 3 + 0 + cfg.seed * 101) * 2 - 1) * extent,
               (hash_unit(a * 3 + 1 + cfg.seed * 101) * 2 - 1) * extent,
               (hash_unit(a * 3 + 2 + cfg.seed * 101) * 2 - 1) * extent};
        bool inside = true;
        for (int k : views) {
            const Camera& cam = seq.cameras[size_t(k - 1)];
            Vec2 px;
            double z;
            cam.project_point(p, px, z);
            int xi = int(px.x), yi = int(px.y);
            const MaskImage& m = seq.masks[seq.slot(keyframe, k)];
            if (!m.in_bounds(xi, yi) || !m.at(xi, yi)) {
                inside = false;
                break;
            }
        }
        if (inside) pts.push_back(p);
    }
    // Degenerate masks: fall back to a sparse cloud; pruning shrinks it later.
    while (pts.size() < 16)
        pts.push_back({(hash_unit(pts.size() * 7 + 1) * 2 - 1) * extent * 0.5,
                       (hash_unit(pts.size() * 7 + 2) * 2 - 1) * extent * 0.5,
                       (hash_unit(pts.size() * 7 + 3) * 2 - 1) * extent * 0.5});

    const size_t n0 = pts.size();
    state.field.resize_gaussians(n0);
    state.field.knn.clear();
    for (size_t i = 0; i < n0; ++i) {
        std::array<double, 3> best{1e30, 1e30, 1e30};
        for (size_t j = 0; j < n0; ++j) {
            if (j == i) continue;
            double d2 = (pts[i] - pts[j]).squared_norm();
            if (d2 < best[2]) {
                best[2] = d2;
                if (best[2] < best[1]) std::swap(best[1], best[2]);
                if (best[1] < best[0]) std::swap(best[0], best[1]);
            }
        }
        double mean_d = (std::sqrt(best[0]) + std::sqrt(best[1]) + std::sqrt(best[2])) / 3.0;
        mean_d = std::max(mean_d, 1e-4);
        Gaussian3D g;
        g.position = pts[i];
        g.orientation = {1, 0, 0, 0};
        g.log_scale = Vec3{1, 1, 1} * std::log(mean_d * 0.8);
        g.opacity_logit = logit(0.1);
        Vec3 c{0, 0, 0};
        int hits = 0;
        for (int k : views) {
            const Camera& cam = seq.cameras[size_t(k - 1)];
            Vec2 px;
            double z;
            cam.project_point(pts[i], px, z);
            int xi = int(px.x), yi = int(px.y);
            const ImageD& img = seq.images[seq.slot(keyframe, k)];
            if (xi >= 0 && xi < img.width && yi >= 0 && yi < img.height) {
                c += Vec3{img.at(xi, yi, 0), img.at(xi, yi, 1), img.at(xi, yi, 2)};
                ++hits;
            }
        }
        g.color = hits ? c * (1.0 / hits) : Vec3{0.5, 0.5, 0.5};
        state.field.set_gaussian(i, g);
    }

    state.init_optimizers(cfg);
    state.grad_accum.assign(n0, 0.0);
    state.grad_denom.assign(n0, 0.0);
    return state;
}

/// The full static stage: seed, optimize with density control, install the
/// control points and deformation machinery.
inline TrainState init_static(const MultiviewSequence& seq, const TrainConfig& cfg,
                              const LossLogger& logger = {}, const CheckpointHook& hook = {}) {
    TrainState state = make_static_state(seq, cfg);
    run_static_stage(state, seq, cfg, logger, hook);
    return state;
}

// ---------------------------------------------------------------------------
// Dynamic stages (coarse / refine).

/// One coarse/refine iteration over a sampled timestep pair.
inline void dynamic_iteration(TrainState& state, const MultiviewSequence& seq,
                              const std::string& stage, const TrainConfig& cfg,
                              int stage_total_iterations, const LossLogger& logger = {}) {
    auto [t_a, t_b] = sample_timestep_pair(seq.frames, cfg.adjacent_bias, state.rng);
    std::vector<int> views = train_views(seq, cfg);
    const size_t n = state.field.gaussian_count();

    DeformCache cache_a, cache_b;
    std::vector<Gaussian3D> splats_a = deform(state.field, t_a, &cache_a);
    std::vector<Gaussian3D> splats_b = deform(state.field, t_b, &cache_b);
    std::vector<Vec3> pos_b(n);
    for (size_t i = 0; i < n; ++i) pos_b[i] = splats_b[i].position;

    // Flow supervision: front view only in the coarse stage, every train view
    // in refine; reference pair flows chained from consecutive files.
    std::vector<uint8_t> with_flow(views.size(), 0);
    size_t flow_count = 0;
    if (!seq.flows_fwd.empty() && cfg.weights.flow > 0) {
        for (size_t j = 0; j < views.size(); ++j) {
            if (stage == "coarse" && views[j] != cfg.front_view) continue;
            with_flow[j] = 1;
            ++flow_count;
        }
    }
    std::vector<FlowMap> ref_fwd(views.size()), ref_bwd(views.size());
    for (size_t j = 0; j < views.size(); ++j) {
        if (!with_flow[j]) continue;
        ref_fwd[j] = detail::chain_sequence_flow(seq, views[j], t_a, t_b);
        ref_bwd[j] = detail::chain_sequence_flow(seq, views[j], t_b, t_a);
    }

    detail::LossScales scales;
    const double inv2k = 1.0 / double(2 * views.size());
    scales.rendering = cfg.weights.rendering * inv2k;
    scales.mask = cfg.weights.mask * inv2k;
    scales.dssim = cfg.weights.dssim * inv2k;
    scales.normal = cfg.weights.normal * inv2k;
    scales.flow = flow_count ? cfg.weights.flow / double(flow_count) : 0.0;

    std::vector<detail::ViewJob> jobs_a(views.size()), jobs_b(views.size());
    parallel_for(int(views.size()) * 2, [&](int idx) {
        size_t j = size_t(idx % int(views.size()));
        if (idx < int(views.size())) {
            jobs_a[j].view = views[j];
            jobs_a[j].timestep = t_a;
            jobs_a[j].with_flow = with_flow[j] != 0;
            detail::run_view_job(seq, splats_a, &pos_b, with_flow[j] ? &ref_fwd[j] : nullptr,
                                 with_flow[j] ? &ref_bwd[j] : nullptr, cfg, scales, jobs_a[j]);
        } else {
            jobs_b[j].view = views[j];
            jobs_b[j].timestep = t_b;
            detail::run_view_job(seq, splats_b, nullptr, nullptr, nullptr, cfg, scales, jobs_b[j]);
        }
    });

    // Merge in fixed order: all t_a views then all t_b views.
    FieldGrads fg;
    fg.resize_like(state.field);
    std::vector<Vec3> dpos_a(n, Vec3{}), dpos_b(n, Vec3{});
    std::vector<Quat> dquat_a(n, Quat{0, 0, 0, 0}), dquat_b(n, Quat{0, 0, 0, 0});
    LossReport rep;
    rep.iteration = state.iteration;
    rep.stage = stage;
    rep.t_a = t_a;
    rep.t_b = t_b;
    for (size_t j = 0; j < views.size(); ++j) {
        for (const detail::ViewJob* job : {&jobs_a[j], &jobs_b[j]}) {
            rep.terms.rendering += job->terms.rendering * inv2k;
            rep.terms.mask += job->terms.mask * inv2k;
            rep.terms.dssim += job->terms.dssim * inv2k;
            rep.terms.normal += job->terms.normal * inv2k;
            rep.px_rendering += job->px_rendering;
            rep.px_mask += job->px_mask;
            rep.px_dssim += job->px_dssim;
            rep.px_normal += job->px_normal;
            detail::accumulate_static_grads(job->grads, fg);
        }
        if (with_flow[j]) {
            rep.terms.flow += jobs_a[j].terms.flow / double(flow_count);
            rep.px_flow += jobs_a[j].px_flow;
            rep.occlusion_skipped += jobs_a[j].occl_skipped;
        }
        for (size_t i = 0; i < n; ++i) {
            dpos_a[i] += jobs_a[j].grads.dposition[i];
            dquat_a[i] += jobs_a[j].grads.dorientation[i];
            dpos_b[i] += jobs_a[j].grads.dposition_pair[i]; // flow reaches t_b geometry
            dpos_b[i] += jobs_b[j].grads.dposition[i];
            dquat_b[i] += jobs_b[j].grads.dorientation[i];
        }
    }

    // ARAP on the sampled pair, gradient pre-scaled by its weight.
    ControlGrads cga, cgb;
    cga.resize(state.field.control_count());
    cgb.resize(state.field.control_count());
    rep.terms.arap = arap_energy_edges(state.field, cache_a.motions, cache_b.motions,
                                       state.control_edges, &cga, &cgb, cfg.weights.arap);

    rep.total = total_loss(rep.terms, cfg.weights);
    if (logger) logger(rep);

    deform_backward(state.field, cache_a, dpos_a, dquat_a, fg, cga);
    deform_backward(state.field, cache_b, dpos_b, dquat_b, fg, cgb);
    finish_control_grads(state.field, cache_a, cga, fg);
    finish_control_grads(state.field, cache_b, cgb, fg);

    const double net_scale =
        exp_decay_scale(cfg.lr_deform, cfg.lr_deform_final, state.iteration, stage_total_iterations);
    const double pos_scale = exp_decay_scale(cfg.lr_position, cfg.lr_position_final,
                                             state.iteration, stage_total_iterations);
    state.g_position.step(state.field.positions, fg.positions, pos_scale);
    state.g_orientation.step(state.field.orientations, fg.orientations);
    state.g_log_scale.step(state.field.log_scales, fg.log_scales);
    state.g_opacity.step(state.field.opacity_logits, fg.opacity_logits);
    state.g_color.step(state.field.colors, fg.colors);
    state.g_rbf.step(state.field.rbf_log_radii, fg.rbf_log_radii);
    state.g_net.step(state.field.deformation.weights, fg.net, net_scale);
    detail::post_step_projection(state.field);
}

/// Runs (or resumes) one named stage to completion. Stage entry resets the
/// per-stage iteration counter, which also restarts the deformation-net decay
/// schedule at its initial rate.
inline void train_stage(TrainState& state, const MultiviewSequence& seq, const std::string& stage,
                        const TrainConfig& cfg, const LossLogger& logger = {},
                        const CheckpointHook& hook = {}) {
    if (stage != "coarse" && stage != "refine")
        throw std::invalid_argument("train_stage: unknown stage " + stage);
    if (!state.field.has_controls())
        throw std::invalid_argument("train_stage: control points missing; run the static stage");
    const int total = stage == "coarse" ? cfg.iterations_coarse : cfg.iterations_refine;
    if (state.stage != stage) {
        state.stage = stage;
        state.iteration = 0;
    }
    if (state.control_edges.empty()) state.rebuild_control_edges(cfg.knn_graph_degree);
    while (state.iteration < total) {
        dynamic_iteration(state, seq, stage, cfg, total, logger);
        ++state.iteration;
        if (hook && cfg.checkpoint_interval > 0 && state.iteration % cfg.checkpoint_interval == 0 &&
            state.iteration < total)
            hook(state);
    }
}

// ---------------------------------------------------------------------------
// Checkpointing: the field container plus a sidecar with optimizer moments,
// RNG stream and stage bookkeeping so a resumed run continues bit-exactly.

namespace detail {

inline void put_i64(std::string& out, int64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }
inline void put_f64_array(std::string& out, const std::vector<double>& v) {
    io::put_u32(out, uint32_t(v.size()));
    out.append(reinterpret_cast<const char*>(v.data()), v.size() * 8);
}
inline void put_adam(std::string& out, const AdamGroup& g) {
    put_i64(out, g.step_count);
    put_f64_array(out, g.m);
    put_f64_array(out, g.v);
}

struct SidecarReader {
    io::Reader r;
    explicit SidecarReader(const std::string& bytes, const std::string& name) : r(bytes, name) {}
    int64_t i64() {
        int64_t v;
        r.bytes(&v, 8);
        return v;
    }
    std::vector<double> f64_array() {
        uint32_t nn = r.u32();
        if (size_t(nn) * 8 > r.n) throw FormatError(r.name + ": implausible array count");
        std::vector<double> v(nn);
        r.bytes(v.data(), size_t(nn) * 8);
        return v;
    }
    void adam(AdamGroup& g) {
        g.step_count = i64();
        g.m = f64_array();
        g.v = f64_array();
    }
};

} // namespace detail

constexpr uint32_t kStateFormatVersion = 1;

inline void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
    save_field(path, state.field);

    std::string out = "GFST";
    io::put_u32(out, kStateFormatVersion);
    io::put_u32(out, uint32_t(state.stage.size()));
    out += state.stage;
    detail::put_i64(out, state.iteration);
    io::put_u32(out, uint32_t(state.field.timeline_count));
    io::put_u32(out, uint32_t(state.field.canonical_timestep));
    io::put_u32(out, uint32_t(state.field.deformation.pos_bands));
    io::put_u32(out, uint32_t(state.field.deformation.time_bands));
    io::put_u32(out, uint32_t(state.field.deformation.hidden_width));
    io::put_u32(out, uint32_t(state.field.deformation.hidden_layers));
    std::ostringstream rngss;
    rngss << state.rng;
    io::put_u32(out, uint32_t(rngss.str().size()));
    out += rngss.str();
    for (const AdamGroup* g : {&state.g_position, &state.g_orientation, &state.g_log_scale,
                               &state.g_opacity, &state.g_color, &state.g_rbf, &state.g_net})
        detail::put_adam(out, *g);
    detail::put_f64_array(out, state.grad_accum);
    detail::put_f64_array(out, state.grad_denom);
    std::filesystem::path side = path;
    side += ".state";
    io::write_file_atomic(side, out);
}

inline TrainState load_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg) {
    std::filesystem::path side = path;
    side += ".state";
    std::string bytes = io::read_file(side);
    detail::SidecarReader sr(bytes, side.string());
    sr.r.expect_magic("GFST");
    uint32_t version = sr.r.u32();
    if (version != kStateFormatVersion)
        throw FormatError(side.string() + ": unsupported state version");
    TrainState state;
    uint32_t stage_len = sr.r.u32();
    state.stage.resize(stage_len);
    sr.r.bytes(state.stage.data(), stage_len);
    state.iteration = sr.i64();
    uint32_t timeline = sr.r.u32();
    uint32_t canonical = sr.r.u32();

    DeformationNet proto;
    proto.pos_bands = int(sr.r.u32());
    proto.time_bands = int(sr.r.u32());
    proto.hidden_width = int(sr.r.u32());
    proto.hidden_layers = int(sr.r.u32());

    uint32_t rng_len = sr.r.u32();
    std::string rng_text(rng_len, '\0');
    sr.r.bytes(rng_text.data(), rng_len);
    std::istringstream rngss(rng_text);
    rngss >> state.rng;
    if (!rngss) throw FormatError(side.string() + ": bad rng state");

    state.field = load_field(path, proto);
    state.field.timeline_count = int(timeline);
    state.field.canonical_timestep = int(canonical);

    state.init_optimizers(cfg);
    for (AdamGroup* g : {&state.g_position, &state.g_orientation, &state.g_log_scale,
                         &state.g_opacity, &state.g_color, &state.g_rbf, &state.g_net})
        sr.adam(*g);
    state.grad_accum = sr.f64_array();
    state.grad_denom = sr.f64_array();

    auto check = [&](const AdamGroup& g, size_t want, const char* name) {
        if (g.m.size() != want || g.v.size() != want)
            throw FormatError(side.string() + ": moment size mismatch for " + std::string(name));
    };
    check(state.g_position, state.field.positions.size(), "positions");
    check(state.g_orientation, state.field.orientations.size(), "orientations");
    check(state.g_log_scale, state.field.log_scales.size(), "log_scales");
    check(state.g_opacity, state.field.opacity_logits.size(), "opacity");
    check(state.g_color, state.field.colors.size(), "colors");
    check(state.g_rbf, state.field.rbf_log_radii.size(), "rbf");
    check(state.g_net, state.field.deformation.weights.size(), "net");

    if (state.field.has_controls()) state.rebuild_control_edges(cfg.knn_graph_degree);
    return state;
}

} // namespace gf4d
