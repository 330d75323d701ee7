// Copyright Contributors to the gf4d Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "gf4d/field.hpp"
#include "gf4d/math.hpp"

namespace gf4d {

/// Small fully connected network mapping (encoded rest position, encoded
/// normalized time) to a 7-vector per control point: translation (3) and a
/// quaternion delta (4) added to identity before normalization. The final
/// layer is zero-initialized so deformation starts at identity.
struct DeformationNet {
    int pos_bands = 6;
    int time_bands = 4;
    int hidden_width = 64;
    int hidden_layers = 3;
    std::vector<float> weights; // per layer: W row-major (out x in), then bias

    int input_dim() const { return 3 + 6 * pos_bands + 1 + 2 * time_bands; }
    static constexpr int output_dim() { return 7; }

    std::vector<int> layer_dims() const {
        std::vector<int> dims{input_dim()};
        for (int l = 0; l < hidden_layers; ++l) dims.push_back(hidden_width);
        dims.push_back(output_dim());
        return dims;
    }

    size_t weight_count() const {
        auto dims = layer_dims();
        size_t n = 0;
        for (size_t l = 0; l + 1 < dims.size(); ++l) n += size_t(dims[l + 1]) * dims[l] + dims[l + 1];
        return n;
    }

    void init_weights(uint64_t seed) {
        auto dims = layer_dims();
        weights.assign(weight_count(), 0.0f);
        std::mt19937_64 rng(seed);
        size_t off = 0;
        for (size_t l = 0; l + 1 < dims.size(); ++l) {
            const int in = dims[l], out = dims[l + 1];
            const bool last = (l + 2 == dims.size());
            std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / in));
            for (int i = 0; i < out * in; ++i)
                weights[off + i] = last ? 0.0f : float(dist(rng));
            off += size_t(out) * in + out; // biases stay zero
        }
    }

    size_t cache_row_size() const {
        auto dims = layer_dims();
        size_t n = 0;
        for (size_t l = 0; l + 1 < dims.size(); ++l) n += dims[l];
        return n; // input plus post-activation of every hidden layer
    }

    void encode_input(const Vec3& p, double t_norm, double* x) const {
        int n = 0;
        x[n++] = p.x;
        x[n++] = p.y;
        x[n++] = p.z;
        for (int b = 0; b < pos_bands; ++b) {
            const double f = std::ldexp(M_PI, b);
            for (int c = 0; c < 3; ++c) {
                x[n++] = std::sin(f * p[c]);
                x[n++] = std::cos(f * p[c]);
            }
        }
        x[n++] = t_norm;
        for (int b = 0; b < time_bands; ++b) {
            const double f = std::ldexp(M_PI, b);
            x[n++] = std::sin(f * t_norm);
            x[n++] = std::cos(f * t_norm);
        }
    }

    /// Forward pass. `cache` (cache_row_size doubles) receives the input and
    /// hidden activations needed by backward(); it may be null.
    void forward(const Vec3& p, double t_norm, double out[7], double* cache) const {
        auto dims = layer_dims();
        std::vector<double> cur(dims[0]), next;
        encode_input(p, t_norm, cur.data());
        size_t coff = 0, woff = 0;
        for (size_t l = 0; l + 1 < dims.size(); ++l) {
            if (cache)
                std::copy(cur.begin(), cur.end(), cache + coff);
            coff += dims[l];
            const int in = dims[l], outw = dims[l + 1];
            const bool last = (l + 2 == dims.size());
            next.assign(outw, 0.0);
            for (int o = 0; o < outw; ++o) {
                double acc = weights[woff + size_t(outw) * in + o]; // bias
                const float* wrow = &weights[woff + size_t(o) * in];
                for (int i = 0; i < in; ++i) acc += double(wrow[i]) * cur[i];
                next[o] = last ? acc : std::max(acc, 0.0);
            }
            woff += size_t(outw) * in + outw;
            cur.swap(next);
        }
        for (int i = 0; i < 7; ++i) out[i] = cur[i];
    }

    /// Accumulates weight gradients for one cached forward pass.
    void backward(const double* cache, const double dout[7], double* grad) const {
        auto dims = layer_dims();
        const int L = int(dims.size()) - 1;
        // Offsets of each layer's input inside the cache and weights arrays.
        std::vector<size_t> coff(L), woff(L);
        size_t c = 0, w = 0;
        for (int l = 0; l < L; ++l) {
            coff[l] = c;
            woff[l] = w;
            c += dims[l];
            w += size_t(dims[l + 1]) * dims[l] + dims[l + 1];
        }
        std::vector<double> delta(dout, dout + 7), prev;
        for (int l = L - 1; l >= 0; --l) {
            const int in = dims[l], out = dims[l + 1];
            const double* x = cache + coff[l];
            double* gW = grad + woff[l];
            double* gb = grad + woff[l] + size_t(out) * in;
            prev.assign(in, 0.0);
            for (int o = 0; o < out; ++o) {
                const double d = delta[o];
                if (d == 0.0) continue;
                gb[o] += d;
                double* gRow = gW + size_t(o) * in;
                const float* wRow = &weights[woff[l] + size_t(o) * in];
                for (int i = 0; i < in; ++i) {
                    gRow[i] += d * x[i];
                    prev[i] += d * double(wRow[i]);
                }
            }
            if (l > 0) {
                // ReLU mask: the cached input of layer l is layer l-1's output.
                for (int i = 0; i < in; ++i)
                    if (x[i] <= 0.0) prev[i] = 0.0;
            }
            delta.swap(prev);
        }
    }
};

/// Per-control rigid motion at a fixed timestep.
struct ControlMotion {
    Quat q_raw;  // identity + net quaternion delta, before normalization
    Quat q_unit; // normalized rotation
    Mat3 R;
    Vec3 t;
};

struct GaussianField {
    // Per-Gaussian parameters, 32-bit storage (checkpoint exact), math in double.
    std::vector<float> positions;      // 3 per gaussian
    std::vector<float> orientations;   // 4 per gaussian (w,x,y,z)
    std::vector<float> log_scales;     // 3
    std::vector<float> opacity_logits; // 1
    std::vector<float> colors;         // 3

    std::vector<float> control_rest;    // 3 per control
    std::vector<float> rbf_log_radii;   // 1 per control
    std::vector<uint32_t> knn;          // 3 per gaussian

    DeformationNet deformation;
    int timeline_count = 1;     // timesteps indexed 1..N
    int canonical_timestep = 1; // the static-initialization keyframe

    // Optional analytic motion per timestep (synthetic ground-truth fields);
    // when non-empty the deformation net is bypassed.
    std::vector<RigidMotion> scripted_motions;

    size_t gaussian_count() const { return opacity_logits.size(); }
    size_t control_count() const { return rbf_log_radii.size(); }

    double normalized_time(int timestep) const {
        return timeline_count > 1 ? double(timestep - 1) / double(timeline_count - 1) : 0.0;
    }
    void check_timestep(int timestep) const {
        if (timestep < 1 || timestep > timeline_count)
            throw std::invalid_argument("timestep out of timeline range");
    }

    Gaussian3D gaussian(size_t i) const {
        Gaussian3D g;
        g.position = {positions[3 * i], positions[3 * i + 1], positions[3 * i + 2]};
        g.orientation = {orientations[4 * i], orientations[4 * i + 1], orientations[4 * i + 2],
                         orientations[4 * i + 3]};
        g.log_scale = {log_scales[3 * i], log_scales[3 * i + 1], log_scales[3 * i + 2]};
        g.opacity_logit = opacity_logits[i];
        g.color = {colors[3 * i], colors[3 * i + 1], colors[3 * i + 2]};
        return g;
    }
    void set_gaussian(size_t i, const Gaussian3D& g) {
        positions[3 * i] = float(g.position.x);
        positions[3 * i + 1] = float(g.position.y);
        positions[3 * i + 2] = float(g.position.z);
        orientations[4 * i] = float(g.orientation.w);
        orientations[4 * i + 1] = float(g.orientation.x);
        orientations[4 * i + 2] = float(g.orientation.y);
        orientations[4 * i + 3] = float(g.orientation.z);
        log_scales[3 * i] = float(g.log_scale.x);
        log_scales[3 * i + 1] = float(g.log_scale.y);
        log_scales[3 * i + 2] = float(g.log_scale.z);
        opacity_logits[i] = float(g.opacity_logit);
        colors[3 * i] = float(g.color.x);
        colors[3 * i + 1] = float(g.color.y);
        colors[3 * i + 2] = float(g.color.z);
    }
    void resize_gaussians(size_t n) {
        positions.resize(3 * n);
        orientations.resize(4 * n);
        log_scales.resize(3 * n);
        opacity_logits.resize(n);
        colors.resize(3 * n);
        knn.resize(3 * n);
    }
    Vec3 control_position(size_t j) const {
        return {control_rest[3 * j], control_rest[3 * j + 1], control_rest[3 * j + 2]};
    }
    bool has_controls() const { return control_count() >= 3 && knn.size() == 3 * gaussian_count(); }
};

/// Everything deform_backward needs: control motions plus per-Gaussian blend
/// state for one timestep.
struct DeformCache {
    int timestep = 1;
    bool scripted = false;
    bool at_canonical = false;
    std::vector<ControlMotion> motions;      // per control
    std::vector<double> mlp_cache;           // per control, cache_row_size each
    std::vector<double> mlp_cache_canonical; // per control, at the canonical time
    std::vector<RbfEval> rbf;                // per gaussian
    std::vector<Quat> q_sum;                 // per gaussian, pre-normalization blend
    std::vector<std::array<double, 3>> sign; // per gaussian sign alignment
};

/// Per-control rigid motions at a timestep. The net output is taken relative
/// to its canonical-timestep output, so the canonical frame deforms exactly
/// to the rest configuration and time-constant drift is inexpressible.
inline std::vector<ControlMotion> control_motions(const GaussianField& field, int timestep,
                                                  std::vector<double>* mlp_cache,
                                                  std::vector<double>* mlp_cache_canonical =
                                                      nullptr) {
    const size_t m = field.control_count();
    std::vector<ControlMotion> out(m);
    if (!field.scripted_motions.empty()) {
        const RigidMotion& g = field.scripted_motions[size_t(timestep - 1)];
        Quat q = g.rotation.normalized();
        Mat3 R = quat_to_mat(q);
        for (size_t j = 0; j < m; ++j) {
            Vec3 p = field.control_position(j);
            out[j].q_raw = q;
            out[j].q_unit = q;
            out[j].R = R;
            out[j].t = g.apply(p) - p;
        }
        return out;
    }
    const double t_norm = field.normalized_time(timestep);
    const double c_norm = field.normalized_time(field.canonical_timestep);
    const bool at_canonical = timestep == field.canonical_timestep;
    const size_t row = field.deformation.cache_row_size();
    if (mlp_cache) mlp_cache->assign(m * row, 0.0);
    if (mlp_cache_canonical) mlp_cache_canonical->assign(at_canonical ? 0 : m * row, 0.0);
    for (size_t j = 0; j < m; ++j) {
        ControlMotion& cm = out[j];
        if (at_canonical) {
            cm.t = {0, 0, 0};
            cm.q_raw = {1, 0, 0, 0};
            cm.q_unit = cm.q_raw;
            cm.R = Mat3::identity();
            continue;
        }
        double raw[7], canon[7];
        field.deformation.forward(field.control_position(j), t_norm, raw,
                                  mlp_cache ? mlp_cache->data() + j * row : nullptr);
        field.deformation.forward(
            field.control_position(j), c_norm, canon,
            mlp_cache_canonical ? mlp_cache_canonical->data() + j * row : nullptr);
        for (int c = 0; c < 7; ++c) raw[c] -= canon[c];
        cm.t = {raw[0], raw[1], raw[2]};
        cm.q_raw = {1.0 + raw[3], raw[4], raw[5], raw[6]};
        cm.q_unit = cm.q_raw.normalized();
        cm.R = quat_to_mat(cm.q_unit);
    }
    return out;
}

/// Applies per-control rigid motions to every Gaussian: positions through the
/// RBF-weighted rigid blend, orientations through the sign-aligned quaternion
/// average composed onto the rest orientation.
inline std::vector<Gaussian3D> apply_control_motions(const GaussianField& field,
                                                     const std::vector<ControlMotion>& motions,
                                                     DeformCache* cache = nullptr) {
    const size_t n = field.gaussian_count();
    std::vector<Gaussian3D> out(n);
    if (cache) {
        cache->motions = motions;
        cache->rbf.resize(n);
        cache->q_sum.resize(n);
        cache->sign.resize(n);
    }

    for (size_t i = 0; i < n; ++i) {
        Gaussian3D g = field.gaussian(i);
        const uint32_t* nb = &field.knn[3 * i];
        std::array<Vec3, 3> np;
        std::array<double, 3> nr;
        for (int j = 0; j < 3; ++j) {
            np[j] = field.control_position(nb[j]);
            nr[j] = field.rbf_log_radii[nb[j]];
        }
        RbfEval ev = rbf_weights_eval(g.position, np, nr);

        Vec3 pos{0, 0, 0};
        Quat q_sum{0, 0, 0, 0};
        std::array<double, 3> sgn{1, 1, 1};
        const Quat& q_first = motions[nb[0]].q_unit;
        for (int j = 0; j < 3; ++j) {
            const ControlMotion& cm = motions[nb[j]];
            pos += ev.weights[j] * (cm.R * (g.position - np[j]) + np[j] + cm.t);
            sgn[j] = cm.q_unit.dot(q_first) >= 0 ? 1.0 : -1.0;
            q_sum += cm.q_unit * (ev.weights[j] * sgn[j]);
        }
        Quat q_rest_unit = g.orientation.normalized();
        Gaussian3D d = g;
        d.position = pos;
        d.orientation = quat_mul(q_sum.normalized(), q_rest_unit);
        out[i] = d;

        if (cache) {
            cache->rbf[i] = ev;
            cache->q_sum[i] = q_sum;
            cache->sign[i] = sgn;
        }
    }
    return out;
}

/// Deforms every Gaussian to `timestep`; fills `cache` for backward if given.
inline std::vector<Gaussian3D> deform(const GaussianField& field, int timestep,
                                      DeformCache* cache = nullptr) {
    field.check_timestep(timestep);
    const size_t n = field.gaussian_count();
    if (!field.has_controls()) {
        std::vector<Gaussian3D> out(n);
        if (!field.scripted_motions.empty()) {
            // Scripted field without control points: apply the global rigid
            // motion directly (exact, used by synthetic ground truth).
            const RigidMotion& g = field.scripted_motions[size_t(timestep - 1)];
            Quat qm = g.rotation.normalized();
            for (size_t i = 0; i < n; ++i) {
                Gaussian3D gs = field.gaussian(i);
                gs.position = g.apply(gs.position);
                gs.orientation = quat_mul(qm, gs.orientation.normalized());
                out[i] = gs;
            }
            return out;
        }
        for (size_t i = 0; i < n; ++i) out[i] = field.gaussian(i);
        return out;
    }
    const bool want_mlp_cache = cache && field.scripted_motions.empty();
    std::vector<ControlMotion> motions =
        control_motions(field, timestep, want_mlp_cache ? &cache->mlp_cache : nullptr,
                        want_mlp_cache ? &cache->mlp_cache_canonical : nullptr);
    if (cache) {
        cache->timestep = timestep;
        cache->scripted = !field.scripted_motions.empty();
        cache->at_canonical = field.scripted_motions.empty() &&
                              timestep == field.canonical_timestep;
    }
    return apply_control_motions(field, motions, cache);
}

/// Gradient buffers matching the field's parameter groups (double precision).
struct FieldGrads {
    std::vector<double> positions, orientations, log_scales, opacity_logits, colors;
    std::vector<double> rbf_log_radii;
    std::vector<double> net;

    void resize_like(const GaussianField& f) {
        positions.assign(f.positions.size(), 0.0);
        orientations.assign(f.orientations.size(), 0.0);
        log_scales.assign(f.log_scales.size(), 0.0);
        opacity_logits.assign(f.opacity_logits.size(), 0.0);
        colors.assign(f.colors.size(), 0.0);
        rbf_log_radii.assign(f.rbf_log_radii.size(), 0.0);
        net.assign(f.deformation.weight_count(), 0.0);
    }
    void add(const FieldGrads& o) {
        auto axpy = [](std::vector<double>& a, const std::vector<double>& b) {
            for (size_t i = 0; i < a.size(); ++i) a[i] += b[i];
        };
        axpy(positions, o.positions);
        axpy(orientations, o.orientations);
        axpy(log_scales, o.log_scales);
        axpy(opacity_logits, o.opacity_logits);
        axpy(colors, o.colors);
        axpy(rbf_log_radii, o.rbf_log_radii);
        axpy(net, o.net);
    }
};

/// Per-control gradient accumulators at one timestep; folded into the net by
/// finish_control_grads after all views and the ARAP term have contributed.
struct ControlGrads {
    std::vector<Vec3> dt;
    std::vector<Quat> dq_unit;
    std::vector<Mat3> dR;

    void resize(size_t m) {
        dt.assign(m, Vec3{});
        dq_unit.assign(m, Quat{0, 0, 0, 0});
        dR.assign(m, Mat3{});
    }
};

/// Backpropagates per-Gaussian position/orientation gradients through the
/// blend to rest parameters (fg) and per-control accumulators (cg).
inline void deform_backward(const GaussianField& field, const DeformCache& cache,
                            const std::vector<Vec3>& dpos, const std::vector<Quat>& dquat,
                            FieldGrads& fg, ControlGrads& cg) {
    const size_t n = field.gaussian_count();
    for (size_t i = 0; i < n; ++i) {
        const Vec3 dx = dpos[i];
        const Quat dq_def = dquat[i];
        if (dx.norm() == 0 && dq_def.norm() == 0) continue;

        Gaussian3D g = field.gaussian(i);
        const uint32_t* nb = &field.knn[3 * i];
        const RbfEval& ev = cache.rbf[i];
        std::array<double, 3> dw{0, 0, 0};

        // Orientation chain: q_def = normalize(q_sum) * normalize(q_rest).
        Quat q_rest_unit = g.orientation.normalized();
        Quat q_blend = cache.q_sum[i].normalized();
        Quat dq_blend{0, 0, 0, 0}, dq_rest_unit{0, 0, 0, 0};
        quat_mul_backward(q_blend, q_rest_unit, dq_def, dq_blend, dq_rest_unit);
        Quat dq_sum{0, 0, 0, 0};
        normalize_backward(cache.q_sum[i], dq_blend, dq_sum);
        Quat q_rest_raw = g.orientation;
        Quat dq_rest_raw{0, 0, 0, 0};
        normalize_backward(q_rest_raw, dq_rest_unit, dq_rest_raw);
        fg.orientations[4 * i] += dq_rest_raw.w;
        fg.orientations[4 * i + 1] += dq_rest_raw.x;
        fg.orientations[4 * i + 2] += dq_rest_raw.y;
        fg.orientations[4 * i + 3] += dq_rest_raw.z;

        Vec3 dmu{0, 0, 0};
        for (int j = 0; j < 3; ++j) {
            const uint32_t cj = nb[j];
            const ControlMotion& cm = cache.motions[cj];
            const Vec3 npj = field.control_position(cj);
            const Vec3 rel = g.position - npj;
            const Vec3 term = cm.R * rel + npj + cm.t;
            const double w = ev.weights[j];
            const double s = cache.sign[i][j];

            // position path
            dw[j] += dx.dot(term);
            cg.dt[cj] += dx * w;
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) cg.dR[cj].m[r][c] += w * dx[r] * rel[c];
            dmu += cm.R.transposed() * dx * w;

            // orientation path
            dw[j] += s * dq_sum.dot(cm.q_unit);
            cg.dq_unit[cj] += dq_sum * (w * s);
        }

        // Blend-weight path back to distances and log radii.
        if (!ev.uniform_fallback) {
            double wdot = 0;
            for (int j = 0; j < 3; ++j) wdot += dw[j] * ev.weights[j];
            for (int j = 0; j < 3; ++j) {
                const double draw = (dw[j] - wdot) / ev.raw_sum;
                const uint32_t cj = nb[j];
                const double r = std::exp(field.rbf_log_radii[cj]);
                const double d = ev.dist[j];
                fg.rbf_log_radii[cj] += draw * ev.raw[j] * (d * d) / (r * r);
                if (d > 1e-12) {
                    const double dd = draw * ev.raw[j] * (-d / (r * r));
                    dmu += (g.position - field.control_position(cj)) * (dd / d);
                }
            }
        }
        fg.positions[3 * i] += dmu.x;
        fg.positions[3 * i + 1] += dmu.y;
        fg.positions[3 * i + 2] += dmu.z;
    }
}

/// Folds accumulated control gradients through the quaternion chain and the
/// deformation net into weight gradients. No-op for scripted caches and at
/// the canonical timestep (where the relative output vanishes identically).
inline void finish_control_grads(const GaussianField& field, const DeformCache& cache,
                                 const ControlGrads& cg, FieldGrads& fg) {
    if (cache.scripted || cache.at_canonical) return;
    const size_t m = field.control_count();
    const size_t row = field.deformation.cache_row_size();
    for (size_t j = 0; j < m; ++j) {
        const ControlMotion& cm = cache.motions[j];
        Quat dq_unit = cg.dq_unit[j];
        quat_to_mat_backward(cm.q_unit, cg.dR[j], dq_unit);
        Quat dq_raw{0, 0, 0, 0};
        normalize_backward(cm.q_raw, dq_unit, dq_raw);
        const double dout[7] = {cg.dt[j].x, cg.dt[j].y, cg.dt[j].z,
                                dq_raw.w, dq_raw.x, dq_raw.y, dq_raw.z};
        bool any = false;
        for (double v : dout) any = any || v != 0.0;
        if (!any) continue;
        field.deformation.backward(cache.mlp_cache.data() + j * row, dout, fg.net.data());
        const double dneg[7] = {-dout[0], -dout[1], -dout[2], -dout[3],
                                -dout[4], -dout[5], -dout[6]};
        field.deformation.backward(cache.mlp_cache_canonical.data() + j * row, dneg,
                                   fg.net.data());
    }
}

/// Deformed control positions at the cached timestep.
inline std::vector<Vec3> deformed_controls(const GaussianField& field,
                                           const std::vector<ControlMotion>& motions) {
    std::vector<Vec3> out(field.control_count());
    for (size_t j = 0; j < out.size(); ++j) out[j] = field.control_position(j) + motions[j].t;
    return out;
}

/// Edge-length ARAP energy between two timesteps over the control kNN graph:
/// mean |  |e_a| - |e_b|  | per edge. Zero under any global rigid motion.
inline double arap_energy_edges(const GaussianField& field,
                                const std::vector<ControlMotion>& ma,
                                const std::vector<ControlMotion>& mb,
                                const std::vector<std::pair<uint32_t, uint32_t>>& edges,
                                ControlGrads* cga = nullptr, ControlGrads* cgb = nullptr,
                                double dE = 1.0) {
    if (edges.empty()) return 0.0;
    std::vector<Vec3> pa = deformed_controls(field, ma);
    std::vector<Vec3> pb = deformed_controls(field, mb);
    double sum = 0;
    const double scale = dE / double(edges.size());
    for (auto [j, k] : edges) {
        Vec3 ea = pa[j] - pa[k];
        Vec3 eb = pb[j] - pb[k];
        double la = ea.norm(), lb = eb.norm();
        sum += std::abs(la - lb);
        if (cga && cgb && la > 1e-12 && lb > 1e-12) {
            double s = (la - lb) > 0 ? scale : ((la - lb) < 0 ? -scale : 0.0);
            Vec3 ga = ea * (s / la);
            Vec3 gb = eb * (-s / lb);
            cga->dt[j] += ga;
            cga->dt[k] -= ga;
            cgb->dt[j] += gb;
            cgb->dt[k] -= gb;
        }
    }
    return sum / double(edges.size());
}

inline double arap_energy(const GaussianField& field, int timestep_a, int timestep_b,
                          int graph_degree = 4) {
    field.check_timestep(timestep_a);
    field.check_timestep(timestep_b);
    std::vector<Vec3> rest(field.control_count());
    for (size_t j = 0; j < rest.size(); ++j) rest[j] = field.control_position(j);
    auto edges = control_graph_edges(rest, graph_degree);
    auto ma = control_motions(field, timestep_a, nullptr);
    auto mb = control_motions(field, timestep_b, nullptr);
    return arap_energy_edges(field, ma, mb, edges);
}

} // namespace gf4d
