#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "cvid/archive.hpp"
#include "cvid/image_io.hpp"
#include "cvid/rng.hpp"

using namespace cvid;
namespace fs = std::filesystem;

namespace {
std::string tmpdir() {
    static std::string d = [] {
        std::string p = "io_test_tmp";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return d;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}
}  // namespace

// ===== fnv1a =====

TEST_CASE("fnv1a matches the published 64-bit test vector") {
    CHECK(fnv1a("", 0) == 14695981039346656037ull);
    CHECK(fnv1a("abc", 3) == 0xe71fa2190541574bull);
}

// ===== archive =====

TEST_CASE("archive golden byte layout") {
    Archive a;
    a.meta_hash = 0x0123456789abcdefull;
    a.add("a", Tensor({2}, {1.0, -2.0}));
    std::string path = tmpdir() + "/golden.cvar";
    a.save(path);

    std::string want;
    want += "CVAR0001";
    const uint8_t tail[] = {1,    0,    0,    0,    0, 0, 0, 0,           // count
                            0xef, 0xcd, 0xab, 0x89, 0x67, 0x45, 0x23, 0x01,  // hash
                            1,    0,    0,    0,    'a',                      // name
                            1,    0,    0,    0,                              // ndim
                            2,    0,    0,    0,                              // dim
                            0x00, 0x00, 0x80, 0x3f,                           // 1.0f
                            0x00, 0x00, 0x00, 0xc0};                          // -2.0f
    want.append((const char*)tail, sizeof(tail));
    CHECK(slurp(path) == want);
}

TEST_CASE("archive round trip preserves names shapes and exact floats") {
    Rng rng(71);
    Archive a;
    a.meta_hash = 42;
    a.add("block0.w", rng.randn({3, 4}));
    a.add("block0.b", rng.randn({4}));
    a.add("emb", rng.randn({2, 2, 2}));
    std::string path = tmpdir() + "/round.cvar";
    a.save(path);

    Archive b = Archive::load(path);
    CHECK(b.meta_hash == 42);
    REQUIRE(b.entries.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(b.entries[i].name == a.entries[i].name);
        CHECK(b.entries[i].shape == a.entries[i].shape);
        REQUIRE(b.entries[i].data.size() == a.entries[i].data.size());
        for (size_t j = 0; j < b.entries[i].data.size(); ++j)
            CHECK(b.entries[i].data[j] == a.entries[i].data[j]);
    }
    CHECK(b.has("emb"));
    CHECK_FALSE(b.has("missing"));
    Tensor t = b.tensor("block0.b");
    CHECK(t.shape == std::vector<int64_t>{4});
    CHECK_THROWS_AS(b.tensor("missing"), std::out_of_range);
}

TEST_CASE("archive load rejects corrupt input") {
    std::string good = tmpdir() + "/ok.cvar";
    Archive a;
    a.add("x", Tensor({1}, {3.0}));
    a.save(good);
    std::string bytes = slurp(good);

    std::string bad1 = tmpdir() + "/badmagic.cvar";
    {
        std::string b = bytes;
        b[0] = 'X';
        std::ofstream(bad1, std::ios::binary) << b;
    }
    CHECK_THROWS_AS(Archive::load(bad1), std::runtime_error);

    std::string bad2 = tmpdir() + "/trunc.cvar";
    std::ofstream(bad2, std::ios::binary) << bytes.substr(0, bytes.size() - 2);
    CHECK_THROWS_AS(Archive::load(bad2), std::runtime_error);

    std::string bad3 = tmpdir() + "/trail.cvar";
    std::ofstream(bad3, std::ios::binary) << (bytes + "zz");
    CHECK_THROWS_AS(Archive::load(bad3), std::runtime_error);

    CHECK_THROWS_AS(Archive::load(tmpdir() + "/nonexistent.cvar"), std::runtime_error);
}

TEST_CASE("archive save failure leaves no partial file") {
    Archive a;
    a.add("x", Tensor({1}, {1.0}));
    std::string path = tmpdir() + "/no_such_dir/out.cvar";
    CHECK_THROWS_AS(a.save(path), std::runtime_error);
    CHECK_FALSE(fs::exists(path));
    CHECK_FALSE(fs::exists(path + ".tmp"));
}

// ===== checkpoints =====

namespace {
ParamSet demo_params(Rng& rng) {
    ParamSet ps;
    ps.add_normal("base.w", {4, 4}, 0.5, rng).trainable = false;
    ps.add_normal("lora.A", {2, 4}, 0.5, rng);
    ps.add_const("lora.B", {4, 2}, 0.0);
    return ps;
}
}  // namespace

TEST_CASE("checkpoint stores trainables only and verifies frozen hash") {
    Rng rng(72);
    ParamSet ps = demo_params(rng);
    Archive ck = make_checkpoint(ps);
    REQUIRE(ck.entries.size() == 2);
    CHECK(ck.has("lora.A"));
    CHECK(ck.has("lora.B"));
    CHECK_FALSE(ck.has("base.w"));

    Rng rng2(72);
    ParamSet fresh = demo_params(rng2);
    fresh.at("lora.A").value.data[0] = -100.0;
    load_checkpoint(fresh, ck);
    CHECK(fresh.at("lora.A").value.data[0] ==
          doctest::Approx((double)(float)ps.at("lora.A").value.data[0]));

    // different base weights: frozen hash must not match
    Rng rng3(99);
    ParamSet other = demo_params(rng3);
    CHECK_THROWS_AS(load_checkpoint(other, ck), std::runtime_error);

    // unknown param name
    ParamSet tiny;
    CHECK_THROWS_AS(load_checkpoint(tiny, ck), std::runtime_error);
}

TEST_CASE("checkpoint bytes are deterministic") {
    Rng r1(73), r2(73);
    ParamSet a = demo_params(r1), b = demo_params(r2);
    std::string p1 = tmpdir() + "/ck1.cvar", p2 = tmpdir() + "/ck2.cvar";
    make_checkpoint(a).save(p1);
    make_checkpoint(b).save(p2);
    CHECK(slurp(p1) == slurp(p2));
}

// ===== png =====

TEST_CASE("gray png round trip is exact on the 256 levels") {
    Tensor img({16, 16});
    for (int64_t i = 0; i < 256; ++i) img.data[i] = double(i) / 255.0;
    std::string path = tmpdir() + "/gray.png";
    write_png_gray(path, img);
    Tensor back = read_png_gray(path);
    REQUIRE(back.shape == img.shape);
    for (int64_t i = 0; i < 256; ++i) CHECK(back.data[i] == img.data[i]);
}

TEST_CASE("rgb png round trip is exact on quantized values") {
    Rng rng(74);
    Tensor img({3, 9, 13});
    for (auto& v : img.data) v = rng.uniform();
    // snap to representable levels first so the round trip is exact
    for (auto& v : img.data) v = std::round(v * 255.0) / 255.0;
    std::string path = tmpdir() + "/rgb.png";
    write_png_rgb(path, img);
    Tensor back = read_png_rgb(path);
    REQUIRE(back.shape == img.shape);
    for (int64_t i = 0; i < img.numel(); ++i)
        CHECK(back.data[i] == doctest::Approx(img.data[i]).epsilon(1e-12));
}

TEST_CASE("png writer clamps out-of-range values") {
    Tensor img({1, 2}, {-0.5, 1.7});
    std::string path = tmpdir() + "/clamp.png";
    write_png_gray(path, img);
    Tensor back = read_png_gray(path);
    CHECK(back.data[0] == 0.0);
    CHECK(back.data[1] == 1.0);
}

TEST_CASE("png reader errors on missing or invalid files") {
    CHECK_THROWS_AS(read_png_gray(tmpdir() + "/missing.png"), std::runtime_error);
    std::string junk = tmpdir() + "/junk.png";
    std::ofstream(junk, std::ios::binary) << "this is not a png";
    CHECK_THROWS_AS(read_png_rgb(junk), std::runtime_error);
}

TEST_CASE("png write failure leaves no file behind") {
    Tensor img({2, 2}, {0.0, 0.5, 0.5, 1.0});
    CHECK_THROWS_AS(write_png_gray(tmpdir() + "/nodir/x.png", img), std::runtime_error);
    CHECK_FALSE(fs::exists(tmpdir() + "/nodir/x.png"));
}

TEST_CASE("rgb file read as gray uses luminance") {
    Tensor img({3, 2, 2});
    // red, green, blue, white pixels
    double px[4][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 1}};
    for (int64_t y = 0; y < 2; ++y)
        for (int64_t x = 0; x < 2; ++x)
            for (int64_t c = 0; c < 3; ++c) img.data[(c * 2 + y) * 2 + x] = px[y * 2 + x][c];
    std::string path = tmpdir() + "/colors.png";
    write_png_rgb(path, img);
    Tensor g = read_png_gray(path);
    CHECK(g.data[3] == 1.0);         // white stays white
    CHECK(g.data[0] < g.data[1]);    // red darker than green
    CHECK(g.data[2] < g.data[0]);    // blue darkest
}

TEST_CASE("indexed_path formats frame numbers") {
    CHECK(indexed_path("/x", "frame", 0) == "/x/frame_0000.png");
    CHECK(indexed_path(".", "ctrl", 37) == "./ctrl_0037.png");
    CHECK(indexed_path("d", "out", 9999) == "d/out_9999.png");
}
