// Copyright Contributors to the gf4d Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "gf4d/deform.hpp"
#include "gf4d/errors.hpp"
#include "gf4d/image.hpp"

namespace gf4d {

// ---------------------------------------------------------------------------
// Byte-level helpers (little-endian host assumed; containers are LE on disk).

namespace io {

inline void put_u32(std::string& out, uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
inline void put_f32(std::string& out, float v) { out.append(reinterpret_cast<const char*>(&v), 4); }

struct Reader {
    const uint8_t* p;
    size_t n, off = 0;
    std::string name;

    Reader(const std::string& bytes, std::string nm)
        : p(reinterpret_cast<const uint8_t*>(bytes.data())), n(bytes.size()), name(std::move(nm)) {}

    void need(size_t k) const {
        if (off + k > n) throw FormatError(name + ": truncated file");
    }
    uint32_t u32() {
        need(4);
        uint32_t v;
        std::memcpy(&v, p + off, 4);
        off += 4;
        return v;
    }
    float f32() {
        need(4);
        float v;
        std::memcpy(&v, p + off, 4);
        off += 4;
        return v;
    }
    void bytes(void* dst, size_t k) {
        need(k);
        std::memcpy(dst, p + off, k);
        off += k;
    }
    void expect_magic(const char m[4]) {
        need(4);
        if (std::memcmp(p + off, m, 4) != 0) throw FormatError(name + ": bad magic");
        off += 4;
    }
};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

/// Writes to a temporary name and renames into place, so slots are never
/// partially overwritten.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw FormatError("cannot write " + tmp.string());
        f.write(bytes.data(), std::streamsize(bytes.size()));
        if (!f) throw FormatError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

} // namespace io

// ---------------------------------------------------------------------------
// PFM (portable float map), little-endian, scale -1.0, bottom-up rows.

inline void write_pfm(const std::filesystem::path& path, const ImageF& img) {
    if (img.channels != 1 && img.channels != 3)
        throw std::invalid_argument("write_pfm: 1 or 3 channels only");
    std::string out = img.channels == 1 ? "Pf\n" : "PF\n";
    out += std::to_string(img.width) + " " + std::to_string(img.height) + "\n-1.0\n";
    for (int y = img.height - 1; y >= 0; --y)
        out.append(reinterpret_cast<const char*>(&img.data[img.index(0, y)]),
                   size_t(img.width) * img.channels * 4);
    io::write_file_atomic(path, out);
}

inline ImageF read_pfm(const std::filesystem::path& path) {
    std::string bytes = io::read_file(path);
    std::istringstream hs(bytes);
    std::string tag;
    int w = 0, h = 0;
    double scale = 0;
    hs >> tag >> w >> h >> scale;
    if ((tag != "Pf" && tag != "PF") || w <= 0 || h <= 0)
        throw FormatError(path.string() + ": bad PFM header");
    if (scale >= 0) throw FormatError(path.string() + ": big-endian PFM unsupported");
    hs.get(); // single whitespace after scale
    const int channels = tag == "Pf" ? 1 : 3;
    const size_t payload = size_t(w) * h * channels * 4;
    const size_t start = size_t(hs.tellg());
    if (start + payload > bytes.size()) throw FormatError(path.string() + ": truncated PFM");
    ImageF img(w, h, channels);
    for (int y = 0; y < h; ++y)
        std::memcpy(&img.data[img.index(0, h - 1 - y)], bytes.data() + start + size_t(y) * w * channels * 4,
                    size_t(w) * channels * 4);
    const double s = -scale;
    if (s != 1.0)
        for (float& v : img.data) v = float(v * s);
    return img;
}

// ---------------------------------------------------------------------------
// PNG, 8-bit gray or RGB, zlib-compressed.

namespace io {

inline void png_chunk(std::string& out, const char type[4], const std::string& payload) {
    uint32_t len = uint32_t(payload.size());
    uint32_t be = __builtin_bswap32(len);
    out.append(reinterpret_cast<const char*>(&be), 4);
    size_t crc_start = out.size();
    out.append(type, 4);
    out += payload;
    uint32_t crc = uint32_t(
        ::crc32(0, reinterpret_cast<const Bytef*>(out.data() + crc_start), uInt(out.size() - crc_start)));
    uint32_t crc_be = __builtin_bswap32(crc);
    out.append(reinterpret_cast<const char*>(&crc_be), 4);
}

} // namespace io

inline void write_png(const std::filesystem::path& path, const Image<uint8_t>& img) {
    if (img.channels != 1 && img.channels != 3)
        throw std::invalid_argument("write_png: 1 or 3 channels only");
    std::string raw;
    raw.reserve(size_t(img.height) * (1 + size_t(img.width) * img.channels));
    for (int y = 0; y < img.height; ++y) {
        raw.push_back('\0'); // filter type 0
        raw.append(reinterpret_cast<const char*>(&img.data[img.index(0, y)]),
                   size_t(img.width) * img.channels);
    }
    uLongf comp_len = compressBound(uLong(raw.size()));
    std::string comp(comp_len, '\0');
    if (compress2(reinterpret_cast<Bytef*>(comp.data()), &comp_len,
                  reinterpret_cast<const Bytef*>(raw.data()), uLong(raw.size()), 9) != Z_OK)
        throw FormatError("png deflate failed");
    comp.resize(comp_len);

    std::string out("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    uint32_t wbe = __builtin_bswap32(uint32_t(img.width));
    uint32_t hbe = __builtin_bswap32(uint32_t(img.height));
    ihdr.append(reinterpret_cast<const char*>(&wbe), 4);
    ihdr.append(reinterpret_cast<const char*>(&hbe), 4);
    ihdr.push_back(8);                                  // bit depth
    ihdr.push_back(img.channels == 1 ? '\0' : '\x02');  // gray / truecolor
    ihdr.append(3, '\0');                               // compression, filter, interlace
    io::png_chunk(out, "IHDR", ihdr);
    io::png_chunk(out, "IDAT", comp);
    io::png_chunk(out, "IEND", "");
    io::write_file_atomic(path, out);
}

inline Image<uint8_t> read_png(const std::filesystem::path& path) {
    std::string bytes = io::read_file(path);
    io::Reader r(bytes, path.string());
    static const char sig[8] = {'\x89', 'P', 'N', 'G', '\r', '\n', '\x1a', '\n'};
    char got[8];
    r.bytes(got, 8);
    if (std::memcmp(got, sig, 8) != 0) throw FormatError(path.string() + ": not a PNG");

    int w = 0, h = 0, channels = 0, src_channels = 0;
    std::string idat;
    bool done = false;
    while (!done) {
        r.need(8);
        uint32_t len = __builtin_bswap32(r.u32());
        char type[5] = {};
        r.bytes(type, 4);
        std::string payload(len, '\0');
        r.bytes(payload.data(), len);
        r.u32(); // crc (unchecked)
        if (std::strcmp(type, "IHDR") == 0) {
            if (len != 13) throw FormatError(path.string() + ": bad IHDR");
            uint32_t wbe, hbe;
            std::memcpy(&wbe, payload.data(), 4);
            std::memcpy(&hbe, payload.data() + 4, 4);
            w = int(__builtin_bswap32(wbe));
            h = int(__builtin_bswap32(hbe));
            int depth = payload[8], color = payload[9], interlace = payload[12];
            if (depth != 8 || interlace != 0)
                throw FormatError(path.string() + ": only 8-bit non-interlaced PNG supported");
            if (color == 0) src_channels = 1;
            else if (color == 2) src_channels = 3;
            else if (color == 6) src_channels = 4;
            else throw FormatError(path.string() + ": unsupported PNG color type");
            channels = src_channels == 4 ? 3 : src_channels;
        } else if (std::strcmp(type, "IDAT") == 0) {
            idat += payload;
        } else if (std::strcmp(type, "IEND") == 0) {
            done = true;
        }
    }
    if (w <= 0 || h <= 0) throw FormatError(path.string() + ": missing IHDR");

    const size_t stride = size_t(w) * src_channels;
    std::string raw(size_t(h) * (stride + 1), '\0');
    uLongf raw_len = uLongf(raw.size());
    if (uncompress(reinterpret_cast<Bytef*>(raw.data()), &raw_len,
                   reinterpret_cast<const Bytef*>(idat.data()), uLong(idat.size())) != Z_OK ||
        raw_len != raw.size())
        throw FormatError(path.string() + ": PNG inflate failed");

    // Undo per-row filters.
    std::vector<uint8_t> cur(stride, 0), prev(stride, 0);
    Image<uint8_t> img(w, h, channels);
    const int bpp = src_channels;
    for (int y = 0; y < h; ++y) {
        const uint8_t* row = reinterpret_cast<const uint8_t*>(raw.data()) + size_t(y) * (stride + 1);
        const uint8_t filter = row[0];
        const uint8_t* src = row + 1;
        for (size_t i = 0; i < stride; ++i) {
            const int a = i >= size_t(bpp) ? cur[i - bpp] : 0;
            const int b = prev[i];
            const int c = i >= size_t(bpp) ? prev[i - bpp] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: {
                    int pth = a + b - c;
                    int pa = std::abs(pth - a), pb = std::abs(pth - b), pc = std::abs(pth - c);
                    v += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
                    break;
                }
                default: throw FormatError(path.string() + ": bad PNG filter");
            }
            cur[i] = uint8_t(v & 0xff);
        }
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < channels; ++ch) img.at(x, y, ch) = cur[size_t(x) * bpp + ch];
        std::swap(cur, prev);
    }
    return img;
}

inline Image<uint8_t> quantize_unit(const ImageD& img) {
    Image<uint8_t> out(img.width, img.height, img.channels);
    for (size_t i = 0; i < img.data.size(); ++i)
        out.data[i] = uint8_t(std::lround(clamp01(img.data[i]) * 255.0));
    return out;
}

inline ImageD dequantize_unit(const Image<uint8_t>& img) {
    ImageD out(img.width, img.height, img.channels);
    for (size_t i = 0; i < img.data.size(); ++i) out.data[i] = img.data[i] / 255.0;
    return out;
}

// ---------------------------------------------------------------------------
// FLO4 raw flow container: magic, u32 width, u32 height, H*W*2 LE f32, then
// H*W validity bytes.

inline void write_flo4(const std::filesystem::path& path, const FlowMap& flow) {
    std::string out = "FLO4";
    io::put_u32(out, uint32_t(flow.width()));
    io::put_u32(out, uint32_t(flow.height()));
    for (int y = 0; y < flow.height(); ++y)
        for (int x = 0; x < flow.width(); ++x) {
            io::put_f32(out, float(flow.uv.at(x, y, 0)));
            io::put_f32(out, float(flow.uv.at(x, y, 1)));
        }
    out.append(reinterpret_cast<const char*>(flow.validity.data.data()), flow.validity.data.size());
    io::write_file_atomic(path, out);
}

inline FlowMap read_flo4(const std::filesystem::path& path) {
    std::string bytes = io::read_file(path);
    io::Reader r(bytes, path.string());
    r.expect_magic("FLO4");
    uint32_t w = r.u32(), h = r.u32();
    if (w == 0 || h == 0 || w > (1u << 16) || h > (1u << 16))
        throw FormatError(path.string() + ": implausible FLO4 size");
    FlowMap flow{int(w), int(h)};
    for (uint32_t y = 0; y < h; ++y)
        for (uint32_t x = 0; x < w; ++x) {
            flow.uv.at(int(x), int(y), 0) = r.f32();
            flow.uv.at(int(x), int(y), 1) = r.f32();
        }
    r.bytes(flow.validity.data.data(), size_t(w) * h);
    return flow;
}

// ---------------------------------------------------------------------------
// FTV1 feature volume container: magic, u32 H', W', C, n, k, t, LE f32 grid.

struct FeatureVolume {
    int height = 0, width = 0, channels = 0;
    int frame_index = 0;     // n
    int viewpoint_index = 0; // k
    int denoise_step = 0;    // t
    std::vector<float> grid; // H' x W' x C row-major

    size_t index(int x, int y, int c = 0) const {
        return (size_t(y) * width + x) * channels + c;
    }
    float& at(int x, int y, int c = 0) { return grid[index(x, y, c)]; }
    float at(int x, int y, int c = 0) const { return grid[index(x, y, c)]; }
    bool same_shape(const FeatureVolume& o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }
};

inline void write_ftv1(const std::filesystem::path& path, const FeatureVolume& fv) {
    std::string out = "FTV1";
    io::put_u32(out, uint32_t(fv.height));
    io::put_u32(out, uint32_t(fv.width));
    io::put_u32(out, uint32_t(fv.channels));
    io::put_u32(out, uint32_t(fv.frame_index));
    io::put_u32(out, uint32_t(fv.viewpoint_index));
    io::put_u32(out, uint32_t(fv.denoise_step));
    out.append(reinterpret_cast<const char*>(fv.grid.data()), fv.grid.size() * 4);
    io::write_file_atomic(path, out);
}

inline FeatureVolume read_ftv1(const std::filesystem::path& path) {
    std::string bytes = io::read_file(path);
    io::Reader r(bytes, path.string());
    r.expect_magic("FTV1");
    FeatureVolume fv;
    fv.height = int(r.u32());
    fv.width = int(r.u32());
    fv.channels = int(r.u32());
    fv.frame_index = int(r.u32());
    fv.viewpoint_index = int(r.u32());
    fv.denoise_step = int(r.u32());
    if (fv.height <= 0 || fv.width <= 0 || fv.channels <= 0)
        throw FormatError(path.string() + ": bad FTV1 dims");
    fv.grid.resize(size_t(fv.height) * fv.width * fv.channels);
    r.bytes(fv.grid.data(), fv.grid.size() * 4);
    return fv;
}

// ---------------------------------------------------------------------------
// GF4D field container: magic "GF4D", version u32, then counted LE f32 arrays
// in declared order (positions, orientations, log_scales, opacity_logits,
// colors, control rest positions, rbf log radii, knn u32, net weights).

constexpr uint32_t kFieldFormatVersion = 1;

inline std::string serialize_field(const GaussianField& f) {
    std::string out = "GF4D";
    io::put_u32(out, kFieldFormatVersion);
    auto put_f32_array = [&](const std::vector<float>& v) {
        io::put_u32(out, uint32_t(v.size()));
        out.append(reinterpret_cast<const char*>(v.data()), v.size() * 4);
    };
    put_f32_array(f.positions);
    put_f32_array(f.orientations);
    put_f32_array(f.log_scales);
    put_f32_array(f.opacity_logits);
    put_f32_array(f.colors);
    put_f32_array(f.control_rest);
    put_f32_array(f.rbf_log_radii);
    io::put_u32(out, uint32_t(f.knn.size()));
    out.append(reinterpret_cast<const char*>(f.knn.data()), f.knn.size() * 4);
    put_f32_array(f.deformation.weights);
    return out;
}

inline void save_field(const std::filesystem::path& path, const GaussianField& f) {
    io::write_file_atomic(path, serialize_field(f));
}

/// Loads a field container. `proto` supplies the deformation-net architecture;
/// array counts are cross-checked against each other and the prototype.
inline GaussianField load_field(const std::filesystem::path& path,
                                const DeformationNet& proto = DeformationNet{}) {
    std::string bytes = io::read_file(path);
    io::Reader r(bytes, path.string());
    r.expect_magic("GF4D");
    uint32_t version = r.u32();
    if (version != kFieldFormatVersion)
        throw FormatError(path.string() + ": unsupported field container version " +
                          std::to_string(version));
    GaussianField f;
    f.deformation = proto;
    auto get_f32_array = [&](std::vector<float>& v, const char* what) {
        uint32_t n = r.u32();
        if (size_t(n) * 4 > bytes.size()) throw FormatError(path.string() + ": implausible count for " + what);
        v.resize(n);
        r.bytes(v.data(), size_t(n) * 4);
    };
    get_f32_array(f.positions, "positions");
    get_f32_array(f.orientations, "orientations");
    get_f32_array(f.log_scales, "log_scales");
    get_f32_array(f.opacity_logits, "opacity_logits");
    get_f32_array(f.colors, "colors");
    get_f32_array(f.control_rest, "control_rest");
    get_f32_array(f.rbf_log_radii, "rbf_log_radii");
    uint32_t knn_n = r.u32();
    if (size_t(knn_n) * 4 > bytes.size()) throw FormatError(path.string() + ": implausible knn count");
    f.knn.resize(knn_n);
    r.bytes(f.knn.data(), size_t(knn_n) * 4);
    get_f32_array(f.deformation.weights, "net weights");

    const size_t n = f.opacity_logits.size();
    const size_t m = f.rbf_log_radii.size();
    if (f.positions.size() != 3 * n || f.orientations.size() != 4 * n ||
        f.log_scales.size() != 3 * n || f.colors.size() != 3 * n)
        throw FormatError(path.string() + ": inconsistent gaussian array counts");
    if (f.control_rest.size() != 3 * m)
        throw FormatError(path.string() + ": inconsistent control array counts");
    if (!f.knn.empty() && f.knn.size() != 3 * n)
        throw FormatError(path.string() + ": inconsistent knn count");
    for (uint32_t idx : f.knn)
        if (idx >= m) throw FormatError(path.string() + ": knn index out of range");
    if (!f.deformation.weights.empty() && f.deformation.weights.size() != proto.weight_count())
        throw FormatError(path.string() + ": net weight count does not match architecture");
    return f;
}

// ---------------------------------------------------------------------------
// Line-oriented key=value config files ('#' starts a comment).

struct Config {
    std::vector<std::pair<std::string, std::string>> entries;

    bool has(const std::string& key) const {
        for (const auto& [k, v] : entries)
            if (k == key) return true;
        return false;
    }
    std::string get(const std::string& key, const std::string& fallback = "") const {
        for (auto it = entries.rbegin(); it != entries.rend(); ++it)
            if (it->first == key) return it->second;
        return fallback;
    }
    double get_double(const std::string& key, double fallback) const {
        return has(key) ? std::stod(get(key)) : fallback;
    }
    int get_int(const std::string& key, int fallback) const {
        return has(key) ? std::stoi(get(key)) : fallback;
    }
    void set(const std::string& key, const std::string& value) { entries.emplace_back(key, value); }
};

inline Config parse_config_text(const std::string& text, const std::string& name = "config") {
    Config cfg;
    std::istringstream ss(text);
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        size_t a = s.find_first_not_of(" \t\r\n");
        size_t b = s.find_last_not_of(" \t\r\n");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    while (std::getline(ss, line)) {
        ++lineno;
        if (size_t hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw FormatError(name + ":" + std::to_string(lineno) + ": expected key=value");
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

inline Config load_config(const std::filesystem::path& path) {
    return parse_config_text(io::read_file(path), path.string());
}

} // namespace gf4d
