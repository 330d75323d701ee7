// Copyright Contributors to the gf4d Project
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>

#include "gf4d/io.hpp"
#include "test_support.hpp"

using namespace gf4d;
using namespace gf4d::test;
namespace fs = std::filesystem;

namespace {

fs::path tmpdir() {
    fs::path p = fs::temp_directory_path() / "gf4d_io_test";
    fs::create_directories(p);
    return p;
}

} // namespace

TEST_CASE("pfm round trip, 1 and 3 channels") {
    std::mt19937_64 rng(1);
    for (int channels : {1, 3}) {
        ImageF img(7, 5, channels);
        for (float& v : img.data) v = float(urand(rng, -10, 10));
        fs::path p = tmpdir() / ("t" + std::to_string(channels) + ".pfm");
        write_pfm(p, img);
        ImageF back = read_pfm(p);
        CHECK(back.width == 7);
        CHECK(back.height == 5);
        CHECK(back.channels == channels);
        CHECK(back.data == img.data);
    }
    CHECK_THROWS_AS(read_pfm(tmpdir() / "missing.pfm"), FormatError);
}

TEST_CASE("png round trip and filtered-row decoding") {
    std::mt19937_64 rng(2);
    for (int channels : {1, 3}) {
        Image<uint8_t> img(19, 11, channels);
        for (auto& v : img.data) v = uint8_t(rng() & 0xff);
        fs::path p = tmpdir() / ("t" + std::to_string(channels) + ".png");
        write_png(p, img);
        Image<uint8_t> back = read_png(p);
        CHECK(back.channels == channels);
        CHECK(back.data == img.data);
    }

    // Hand-build a PNG exercising every filter type, one per row.
    const int W = 6, H = 5, bpp = 3;
    Image<uint8_t> src(W, H, 3);
    for (auto& v : src.data) v = uint8_t(rng() & 0xff);
    std::string raw;
    std::vector<uint8_t> prev(W * bpp, 0);
    for (int y = 0; y < H; ++y) {
        uint8_t filter = uint8_t(y % 5);
        raw.push_back(char(filter));
        std::vector<uint8_t> cur(W * bpp);
        for (int i = 0; i < W * bpp; ++i) cur[size_t(i)] = src.data[size_t(y) * W * bpp + i];
        for (int i = 0; i < W * bpp; ++i) {
            int a = i >= bpp ? cur[size_t(i - bpp)] : 0;
            int b = prev[size_t(i)];
            int c = i >= bpp ? prev[size_t(i - bpp)] : 0;
            int pred = 0;
            switch (filter) {
                case 0: pred = 0; break;
                case 1: pred = a; break;
                case 2: pred = b; break;
                case 3: pred = (a + b) / 2; break;
                case 4: {
                    int pth = a + b - c;
                    int pa = std::abs(pth - a), pb = std::abs(pth - b), pc = std::abs(pth - c);
                    pred = (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
                    break;
                }
            }
            raw.push_back(char(uint8_t(cur[size_t(i)] - pred)));
        }
        prev = cur;
    }
    uLongf clen = compressBound(uLong(raw.size()));
    std::string comp(clen, '\0');
    REQUIRE(compress2(reinterpret_cast<Bytef*>(comp.data()), &clen,
                      reinterpret_cast<const Bytef*>(raw.data()), uLong(raw.size()), 6) == Z_OK);
    comp.resize(clen);
    std::string png("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    uint32_t wbe = __builtin_bswap32(W), hbe = __builtin_bswap32(H);
    ihdr.append(reinterpret_cast<const char*>(&wbe), 4);
    ihdr.append(reinterpret_cast<const char*>(&hbe), 4);
    ihdr.push_back(8);
    ihdr.push_back(2);
    ihdr.append(3, '\0');
    io::png_chunk(png, "IHDR", ihdr);
    io::png_chunk(png, "IDAT", comp);
    io::png_chunk(png, "IEND", "");
    fs::path p = tmpdir() / "filters.png";
    io::write_file_atomic(p, png);
    Image<uint8_t> back = read_png(p);
    CHECK(back.data == src.data);
}

TEST_CASE("flo4 round trip and truncation") {
    std::mt19937_64 rng(3);
    FlowMap f{9, 6};
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 9; ++x) f.set(x, y, {urand(rng, -5, 5), urand(rng, -5, 5)}, rng() % 2);
    fs::path p = tmpdir() / "t.flo4";
    write_flo4(p, f);
    FlowMap back = read_flo4(p);
    CHECK(back.validity.data == f.validity.data);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 9; ++x) {
            CHECK(back.at(x, y).x == doctest::Approx(f.at(x, y).x).epsilon(1e-6));
            CHECK(back.at(x, y).y == doctest::Approx(f.at(x, y).y).epsilon(1e-6));
        }

    std::string bytes = io::read_file(p);
    io::write_file_atomic(tmpdir() / "trunc.flo4", bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(read_flo4(tmpdir() / "trunc.flo4"), FormatError);
    io::write_file_atomic(tmpdir() / "badmagic.flo4", "FLOX" + bytes.substr(4));
    CHECK_THROWS_AS(read_flo4(tmpdir() / "badmagic.flo4"), FormatError);
}

TEST_CASE("ftv1 round trip") {
    FeatureVolume fv;
    fv.height = 4;
    fv.width = 5;
    fv.channels = 3;
    fv.frame_index = 7;
    fv.viewpoint_index = 2;
    fv.denoise_step = 31;
    fv.grid.resize(60);
    std::mt19937_64 rng(4);
    for (float& v : fv.grid) v = float(urand(rng, -2, 2));
    fs::path p = tmpdir() / "t.ftv1";
    write_ftv1(p, fv);
    FeatureVolume back = read_ftv1(p);
    CHECK(back.grid == fv.grid);
    CHECK(back.frame_index == 7);
    CHECK(back.viewpoint_index == 2);
    CHECK(back.denoise_step == 31);
}

TEST_CASE("field container: lossless round trip, version check, fuzzing") {
    GaussianField f = random_field(17, 6, 5, 3, true);
    fs::path p = tmpdir() / "field.gf4d";
    save_field(p, f);
    GaussianField back = load_field(p, f.deformation);
    // save -> load -> save yields identical bytes
    std::string bytes1 = serialize_field(f);
    std::string bytes2 = serialize_field(back);
    CHECK(bytes1 == bytes2);
    CHECK(back.positions == f.positions);
    CHECK(back.orientations == f.orientations);
    CHECK(back.knn == f.knn);
    CHECK(back.deformation.weights == f.deformation.weights);

    // version mismatch
    std::string bad = bytes1;
    bad[4] = 99;
    io::write_file_atomic(tmpdir() / "badver.gf4d", bad);
    CHECK_THROWS_AS(load_field(tmpdir() / "badver.gf4d", f.deformation), FormatError);

    // truncations at many offsets never crash, always FormatError
    std::mt19937_64 rng(6);
    for (int t = 0; t < 40; ++t) {
        size_t cut = rng() % bytes1.size();
        io::write_file_atomic(tmpdir() / "cut.gf4d", bytes1.substr(0, cut));
        CHECK_THROWS_AS(load_field(tmpdir() / "cut.gf4d", f.deformation), FormatError);
    }

    // corrupt a count field: the cross-check against sibling arrays trips
    std::string corrupt = bytes1;
    uint32_t wrong = uint32_t(f.positions.size()) - 3;
    std::memcpy(corrupt.data() + 8, &wrong, 4);
    io::write_file_atomic(tmpdir() / "count.gf4d", corrupt);
    CHECK_THROWS_AS(load_field(tmpdir() / "count.gf4d", f.deformation), FormatError);
}

TEST_CASE("config parser: values, comments, overrides, errors") {
    Config cfg = parse_config_text("a = 1\n# comment\nb=2.5 # trailing\n\nc = hello\na = 3\n");
    CHECK(cfg.get_int("a", 0) == 3); // later entries win
    CHECK(cfg.get_double("b", 0) == 2.5);
    CHECK(cfg.get("c") == "hello");
    CHECK(cfg.get("missing", "dflt") == "dflt");
    CHECK_THROWS_AS(parse_config_text("not a pair\n"), FormatError);
}
