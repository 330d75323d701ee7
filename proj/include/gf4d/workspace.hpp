// Copyright Contributors to the gf4d Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "gf4d/errors.hpp"
#include "gf4d/io.hpp"
#include "gf4d/sequence.hpp"
#include "gf4d/synth.hpp"

namespace gf4d {

namespace fs = std::filesystem;

/// On-disk layout of one reconstruction workspace:
///   inputs/frames|masks|normals/frame{n:03}_view{k}.{png|pfm}
///   inputs/flows/frame{a:03}_to{b:03}_view{k}.flo4
///   regenerated/frames/..., checkpoints/, renders/, features/, logs/
struct WorkspaceLayout {
    fs::path root;

    explicit WorkspaceLayout(fs::path r) : root(std::move(r)) {}

    static std::string frame_slot(int n, int k, const std::string& ext) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "frame%03d_view%d.%s", n, k, ext.c_str());
        return buf;
    }
    static std::string flow_slot(int a, int b, int k) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "frame%03d_to%03d_view%d.flo4", a, b, k);
        return buf;
    }

    fs::path inputs() const { return root / "inputs"; }
    fs::path frame_path(int n, int k) const {
        return inputs() / "frames" / frame_slot(n, k, "png");
    }
    fs::path mask_path(int n, int k) const { return inputs() / "masks" / frame_slot(n, k, "png"); }
    fs::path normal_path(int n, int k) const {
        return inputs() / "normals" / frame_slot(n, k, "pfm");
    }
    fs::path flow_path(int a, int b, int k) const {
        return inputs() / "flows" / flow_slot(a, b, k);
    }
    fs::path regenerated_frame_path(int n, int k) const {
        return root / "regenerated" / "frames" / frame_slot(n, k, "png");
    }
    fs::path cameras_path() const { return root / "cameras.cfg"; }
    fs::path manifest_path() const { return root / "manifest.txt"; }
    fs::path checkpoints() const { return root / "checkpoints"; }
    fs::path renders() const { return root / "renders"; }
    fs::path features() const { return root / "features"; }
    fs::path logs() const { return root / "logs"; }
    fs::path lock_path() const { return root / ".lock"; }
};

/// Exclusive per-workspace lock file; held for the duration of one command.
class WorkspaceLock {
public:
    explicit WorkspaceLock(const WorkspaceLayout& ws) : path_(ws.lock_path()) {
        fs::create_directories(path_.parent_path());
        std::error_code ec;
        if (fs::exists(path_))
            throw MissingInput("workspace is locked by another command: " + path_.string() +
                               " (remove the stale .lock file if no command is running)");
        std::ofstream f(path_);
        f << "locked\n";
    }
    ~WorkspaceLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    WorkspaceLock(const WorkspaceLock&) = delete;
    WorkspaceLock& operator=(const WorkspaceLock&) = delete;

private:
    fs::path path_;
};

// ---------------------------------------------------------------------------
// Camera rig persistence: line-oriented, one section per camera.

inline void save_cameras(const fs::path& path, const std::vector<Camera>& cams, int frames) {
    std::ostringstream ss;
    ss.precision(17);
    ss << "frames=" << frames << "\nviews=" << cams.size() << "\n";
    for (size_t k = 0; k < cams.size(); ++k) {
        const Camera& c = cams[k];
        ss << "camera" << (k + 1) << "_rotation=";
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) ss << c.rotation.m[i][j] << (i == 2 && j == 2 ? "" : " ");
        ss << "\ncamera" << (k + 1) << "_center=" << c.center.x << " " << c.center.y << " "
           << c.center.z << "\ncamera" << (k + 1) << "_half_extent=" << c.half_extent
           << "\ncamera" << (k + 1) << "_size=" << c.width << " " << c.height << "\n";
    }
    io::write_file_atomic(path, ss.str());
}

struct CameraRig {
    int frames = 0;
    std::vector<Camera> cameras;
};

inline CameraRig load_cameras(const fs::path& path) {
    Config cfg = load_config(path);
    CameraRig rig;
    rig.frames = cfg.get_int("frames", 0);
    int views = cfg.get_int("views", 0);
    if (rig.frames < 1 || views < 1) throw FormatError(path.string() + ": bad camera file");
    for (int k = 1; k <= views; ++k) {
        Camera c;
        std::istringstream rot(cfg.get("camera" + std::to_string(k) + "_rotation"));
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) rot >> c.rotation.m[i][j];
        std::istringstream cen(cfg.get("camera" + std::to_string(k) + "_center"));
        cen >> c.center.x >> c.center.y >> c.center.z;
        c.half_extent = cfg.get_double("camera" + std::to_string(k) + "_half_extent", 1.0);
        std::istringstream sz(cfg.get("camera" + std::to_string(k) + "_size"));
        sz >> c.width >> c.height;
        c.viewpoint_index = k;
        if (!rot || !cen || !sz) throw FormatError(path.string() + ": bad camera " + std::to_string(k));
        c.validate();
        rig.cameras.push_back(c);
    }
    return rig;
}

// ---------------------------------------------------------------------------
// Sequence input/output against the workspace layout.

/// Writes a rendered sequence into the workspace inputs and returns the list
/// of emitted slot paths (relative to the root).
inline std::vector<std::string> write_sequence(const WorkspaceLayout& ws,
                                               const MultiviewSequence& seq) {
    std::vector<std::string> emitted;
    auto note = [&](const fs::path& p) { emitted.push_back(fs::relative(p, ws.root).string()); };
    save_cameras(ws.cameras_path(), seq.cameras, seq.frames);
    note(ws.cameras_path());
    for (int n = 1; n <= seq.frames; ++n)
        for (int k = 1; k <= seq.views(); ++k) {
            size_t s = seq.slot(n, k);
            write_png(ws.frame_path(n, k), quantize_unit(seq.images[s]));
            note(ws.frame_path(n, k));
            write_png(ws.mask_path(n, k), Image<uint8_t>{[&] {
                          Image<uint8_t> m(seq.masks[s].width, seq.masks[s].height, 1);
                          for (size_t i = 0; i < m.data.size(); ++i)
                              m.data[i] = seq.masks[s].data[i] ? 255 : 0;
                          return m;
                      }()});
            note(ws.mask_path(n, k));
            if (s < seq.normals.size() && !seq.normals[s].empty()) {
                write_pfm(ws.normal_path(n, k), to_float(seq.normals[s]));
                note(ws.normal_path(n, k));
            }
        }
    for (int n = 1; n < seq.frames; ++n)
        for (int k = 1; k <= seq.views(); ++k) {
            write_flo4(ws.flow_path(n, n + 1, k), seq.flows_fwd[seq.flow_slot(n, k)]);
            note(ws.flow_path(n, n + 1, k));
            write_flo4(ws.flow_path(n + 1, n, k), seq.flows_bwd[seq.flow_slot(n, k)]);
            note(ws.flow_path(n + 1, n, k));
        }
    return emitted;
}

/// Loads a sequence from the workspace. `use_regenerated` swaps the frame
/// images for the regenerated set (masks/normals/flows stay from inputs/).
/// `require` lists which slot families must be complete.
struct SequenceRequirements {
    bool frames = true;
    bool masks = true;
    bool normals = false;
    bool flows = false;
};

inline MultiviewSequence load_sequence(const WorkspaceLayout& ws, bool use_regenerated,
                                       const SequenceRequirements& require) {
    CameraRig rig = load_cameras(ws.cameras_path());
    MultiviewSequence seq;
    seq.frames = rig.frames;
    seq.cameras = rig.cameras;
    const int N = seq.frames, K = seq.views();
    seq.images.resize(size_t(N) * K);
    seq.masks.resize(size_t(N) * K);
    seq.normals.resize(size_t(N) * K);
    if (N > 1) {
        seq.flows_fwd.resize(size_t(N - 1) * K);
        seq.flows_bwd.resize(size_t(N - 1) * K);
    }

    std::vector<std::string> missing;
    for (int n = 1; n <= N; ++n)
        for (int k = 1; k <= K; ++k) {
            size_t s = seq.slot(n, k);
            fs::path img = use_regenerated ? ws.regenerated_frame_path(n, k) : ws.frame_path(n, k);
            if (fs::exists(img))
                seq.images[s] = dequantize_unit(read_png(img));
            else if (require.frames)
                missing.push_back(img.string());
            if (fs::exists(ws.mask_path(n, k))) {
                Image<uint8_t> m = read_png(ws.mask_path(n, k));
                seq.masks[s] = MaskImage(m.width, m.height, 1, 0);
                for (size_t i = 0; i < m.data.size(); ++i)
                    seq.masks[s].data[i] = m.data[i] >= 128 ? 1 : 0;
            } else if (require.masks) {
                missing.push_back(ws.mask_path(n, k).string());
            }
            if (fs::exists(ws.normal_path(n, k)))
                seq.normals[s] = to_double(read_pfm(ws.normal_path(n, k)));
            else if (require.normals)
                missing.push_back(ws.normal_path(n, k).string());
        }
    for (int n = 1; n < N; ++n)
        for (int k = 1; k <= K; ++k) {
            if (fs::exists(ws.flow_path(n, n + 1, k)))
                seq.flows_fwd[seq.flow_slot(n, k)] = read_flo4(ws.flow_path(n, n + 1, k));
            else if (require.flows)
                missing.push_back(ws.flow_path(n, n + 1, k).string());
            if (fs::exists(ws.flow_path(n + 1, n, k)))
                seq.flows_bwd[seq.flow_slot(n, k)] = read_flo4(ws.flow_path(n + 1, n, k));
            else if (require.flows)
                missing.push_back(ws.flow_path(n + 1, n, k).string());
        }
    if (!missing.empty()) {
        std::string msg = "missing workspace slots:";
        for (const auto& m : missing) msg += "\n  " + m;
        throw MissingInput(msg);
    }
    return seq;
}

/// FNV-1a content hash of a file, for manifest stability checks.
inline uint64_t file_hash(const fs::path& p) {
    std::string bytes = io::read_file(p);
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline void write_manifest(const WorkspaceLayout& ws, const std::vector<std::string>& slots) {
    std::ostringstream ss;
    for (const auto& rel : slots) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)file_hash(ws.root / rel));
        ss << buf << "  " << rel << "\n";
    }
    io::write_file_atomic(ws.manifest_path(), ss.str());
}

} // namespace gf4d
