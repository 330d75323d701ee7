// Copyright Contributors to the gf4d Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace gf4d {

/// Adaptive moment estimation over one parameter group. Elements whose
/// gradient is exactly zero are left untouched, moments included, so unseen
/// parameters do not drift on momentum.
struct AdamGroup {
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999;
    double eps = 1e-8;
    int64_t step_count = 0;
    std::vector<double> m, v;

    void reset(size_t n) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
        step_count = 0;
    }

    void step(std::vector<float>& params, const std::vector<double>& grads, double lr_scale = 1.0) {
        if (m.size() != params.size()) reset(params.size());
        ++step_count;
        const double bc1 = 1.0 - std::pow(beta1, double(step_count));
        const double bc2 = 1.0 - std::pow(beta2, double(step_count));
        const double alpha = lr * lr_scale;
        for (size_t i = 0; i < params.size(); ++i) {
            const double g = grads[i];
            if (g == 0.0) continue;
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            params[i] = float(double(params[i]) - alpha * mhat / (std::sqrt(vhat) + eps));
        }
    }

    /// Rebuilds moments after densification: entry i of the new layout copies
    /// from old element source[i] (per-element indexing), or starts fresh when
    /// source[i] is negative.
    void remap(const std::vector<int64_t>& source) {
        std::vector<double> nm(source.size(), 0.0), nv(source.size(), 0.0);
        for (size_t i = 0; i < source.size(); ++i) {
            if (source[i] >= 0 && size_t(source[i]) < m.size()) {
                nm[i] = m[size_t(source[i])];
                nv[i] = v[size_t(source[i])];
            }
        }
        m.swap(nm);
        v.swap(nv);
    }
};

/// Exponential decay from lr_initial to lr_final over `total` iterations,
/// evaluated at iteration i (0-based). Flat when total <= 1 or lr_final <= 0.
inline double exp_decay_scale(double lr_initial, double lr_final, int64_t i, int64_t total) {
    if (total <= 1 || lr_final <= 0 || lr_initial <= 0) return 1.0;
    double frac = double(i) / double(total - 1);
    return std::pow(lr_final / lr_initial, frac);
}

} // namespace gf4d
