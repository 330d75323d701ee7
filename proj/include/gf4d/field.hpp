// Copyright Contributors to the gf4d Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "gf4d/math.hpp"

namespace gf4d {

struct Gaussian3D {
    Vec3 position{0, 0, 0};
    Quat orientation{1, 0, 0, 0}; // unit after every update
    Vec3 log_scale{0, 0, 0};
    double opacity_logit = 0;
    Vec3 color{0.5, 0.5, 0.5}; // linear RGB, clamped to [0,1] at render time only
};

struct ControlPoint {
    Vec3 rest_position{0, 0, 0};
    double rbf_log_radius = 0;
};

/// Farthest point sampling: greedy max-min selection starting at seed_index.
/// Ties resolve to the lowest candidate index.
inline std::vector<uint32_t> fps_sample(const std::vector<Vec3>& points, size_t k,
                                        size_t seed_index = 0) {
    if (points.empty()) throw std::invalid_argument("fps_sample: empty point set");
    if (k > points.size()) throw std::invalid_argument("fps_sample: k exceeds point count");
    if (seed_index >= points.size()) throw std::invalid_argument("fps_sample: bad seed index");

    std::vector<uint32_t> selected;
    selected.reserve(k);
    std::vector<double> min_d2(points.size(), std::numeric_limits<double>::infinity());

    uint32_t current = uint32_t(seed_index);
    for (size_t step = 0; step < k; ++step) {
        selected.push_back(current);
        const Vec3 p = points[current];
        uint32_t best = 0;
        double best_d2 = -1;
        for (size_t i = 0; i < points.size(); ++i) {
            double d2 = std::min(min_d2[i], (points[i] - p).squared_norm());
            min_d2[i] = d2;
            if (d2 > best_d2) {
                best_d2 = d2;
                best = uint32_t(i);
            }
        }
        current = best;
    }
    return selected;
}

/// Indices of the 3 nearest control points per position, ascending by
/// distance, ties broken by lower index.
inline std::vector<std::array<uint32_t, 3>> knn_assign(const std::vector<Vec3>& positions,
                                                       const std::vector<Vec3>& control_rest) {
    if (control_rest.size() < 3)
        throw std::invalid_argument("knn_assign: need at least 3 control points");
    std::vector<std::array<uint32_t, 3>> out(positions.size());
    std::vector<std::pair<double, uint32_t>> dist(control_rest.size());
    for (size_t i = 0; i < positions.size(); ++i) {
        for (size_t j = 0; j < control_rest.size(); ++j)
            dist[j] = {(positions[i] - control_rest[j]).squared_norm(), uint32_t(j)};
        std::partial_sort(dist.begin(), dist.begin() + 3, dist.end());
        out[i] = {dist[0].second, dist[1].second, dist[2].second};
    }
    return out;
}

/// Normalized RBF blend weights for one Gaussian against its 3 neighbors:
/// w_j ~ exp(-d_j^2 / (2 r_j^2)), r_j = exp(rbf_log_radius_j). Falls back to
/// uniform thirds when every raw weight underflows.
struct RbfEval {
    std::array<double, 3> weights{};
    std::array<double, 3> raw{};
    std::array<double, 3> dist{};
    double raw_sum = 0;
    bool uniform_fallback = false;
};

inline RbfEval rbf_weights_eval(const Vec3& position, const std::array<Vec3, 3>& neighbor_pos,
                                const std::array<double, 3>& neighbor_log_radius) {
    RbfEval ev;
    for (int j = 0; j < 3; ++j) {
        double d = (position - neighbor_pos[j]).norm();
        double r = std::exp(neighbor_log_radius[j]);
        ev.dist[j] = d;
        ev.raw[j] = std::exp(-(d * d) / (2.0 * r * r));
        ev.raw_sum += ev.raw[j];
    }
    if (!(ev.raw_sum > 1e-280)) {
        ev.uniform_fallback = true;
        ev.weights = {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
    } else {
        for (int j = 0; j < 3; ++j) ev.weights[j] = ev.raw[j] / ev.raw_sum;
    }
    return ev;
}

inline std::array<double, 3> rbf_weights(const Vec3& position,
                                         const std::array<ControlPoint, 3>& neighbors) {
    std::array<Vec3, 3> pos;
    std::array<double, 3> lr;
    for (int j = 0; j < 3; ++j) {
        pos[j] = neighbors[j].rest_position;
        lr[j] = neighbors[j].rbf_log_radius;
    }
    return rbf_weights_eval(position, pos, lr).weights;
}

/// Undirected edge list of the control-point kNN graph (rest positions).
inline std::vector<std::pair<uint32_t, uint32_t>> control_graph_edges(
    const std::vector<Vec3>& control_rest, int degree) {
    const size_t m = control_rest.size();
    std::vector<std::pair<uint32_t, uint32_t>> edges;
    if (m < 2) return edges;
    int k = std::min<int>(degree, int(m) - 1);
    std::vector<std::pair<double, uint32_t>> dist(m);
    for (size_t j = 0; j < m; ++j) {
        size_t n = 0;
        for (size_t o = 0; o < m; ++o)
            if (o != j) dist[n++] = {(control_rest[j] - control_rest[o]).squared_norm(), uint32_t(o)};
        std::partial_sort(dist.begin(), dist.begin() + k, dist.begin() + n);
        for (int e = 0; e < k; ++e) {
            uint32_t a = uint32_t(j), b = dist[e].second;
            if (a > b) std::swap(a, b);
            edges.emplace_back(a, b);
        }
    }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    return edges;
}

} // namespace gf4d
