// Copyright Contributors to the gf4d Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "gf4d/camera.hpp"
#include "gf4d/image.hpp"

namespace gf4d {

/// N timesteps x K viewpoints of images, masks, normals and consecutive-pair
/// flows, plus the camera definitions. Slots are (frame n in 1..N, view k in
/// 1..K); any slot may be absent (empty image) when a stage does not need it.
struct MultiviewSequence {
    int frames = 0;
    std::vector<Camera> cameras;

    std::vector<ImageD> images;     // rgb, N*K
    std::vector<MaskImage> masks;   // N*K
    std::vector<ImageD> normals;    // camera-frame, N*K (may be empty)
    std::vector<FlowMap> flows_fwd; // n -> n+1, (N-1)*K (may be empty)
    std::vector<FlowMap> flows_bwd; // n+1 -> n, (N-1)*K

    int views() const { return int(cameras.size()); }
    size_t slot(int n, int k) const { return size_t(n - 1) * cameras.size() + size_t(k - 1); }
    size_t flow_slot(int n, int k) const {
        return size_t(n - 1) * cameras.size() + size_t(k - 1); // pair (n, n+1)
    }
    bool has_slot(int n, int k) const {
        size_t s = slot(n, k);
        return s < images.size() && !images[s].empty();
    }
};

} // namespace gf4d
