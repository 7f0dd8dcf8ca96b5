#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "lbd/model.hpp"
#include "lbd/rng.hpp"
#include "lbd/serialize.hpp"

using namespace lbd;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("lbd_model_" + std::to_string(::getpid()) + "_" +
                std::to_string(reinterpret_cast<uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

Tensor random_image(uint64_t seed) {
    Rng rng(seed);
    Tensor x({1, 1, 28, 28});
    double* p = x.mutable_data();
    for (int64_t i = 0; i < x.size(); ++i) p[i] = rng.uniform();
    return x;
}

}  // namespace

TEST_CASE("digit teacher structure follows the shared-pool index convention") {
    ModelGraph m = build_digit_teacher(1);
    REQUIRE(m.layer_count() == 4);
    REQUIRE(m.class_count() == 5);

    // index -> kinds: {conv+pool, conv+pool, fc, fc}
    REQUIRE(m.layers[0].index == 1);
    REQUIRE(m.layers[0].kind == LayerKind::conv2d);
    REQUIRE(m.layers[1].index == 1);
    REQUIRE(m.layers[1].kind == LayerKind::maxpool2d);
    REQUIRE(m.layers[2].index == 2);
    REQUIRE(m.layers[2].kind == LayerKind::conv2d);
    REQUIRE(m.layers[3].index == 2);
    REQUIRE(m.layers[3].kind == LayerKind::maxpool2d);
    REQUIRE(m.layers[4].index == 3);
    REQUIRE(m.layers[4].kind == LayerKind::fully_connected);
    REQUIRE(m.layers[5].index == 4);
    REQUIRE(m.layers[5].kind == LayerKind::fully_connected);
    REQUIRE(m.layers[5].act == Activation::softmax);
    REQUIRE(m.layers[2].out_channels == 32);
    REQUIRE(m.layers[4].out_channels == 512);
}

TEST_CASE("forward on a zero image yields a probability vector") {
    ModelGraph m = build_digit_teacher(2);
    Tensor probs = forward(m, Tensor::zeros({1, 1, 28, 28}));
    REQUIRE(probs.shape() == std::vector<int>{1, 5});
    double s = 0.0;
    for (int i = 0; i < 5; ++i) s += probs[i];
    REQUIRE(std::abs(s - 1.0) < 1e-10);
}

TEST_CASE("feature shapes through the digit teacher") {
    ModelGraph m = build_digit_teacher(3);
    Tensor x = random_image(10);
    REQUIRE(feature_at(m, 1, x).shape() == std::vector<int>{1, 16, 12, 12});
    REQUIRE(feature_at(m, 2, x).shape() == std::vector<int>{1, 32, 4, 4});
    REQUIRE(feature_at(m, 3, x).shape() == std::vector<int>{1, 512});
    REQUIRE(feature_at(m, 4, x).shape() == std::vector<int>{1, 5});
    REQUIRE(feature_at(m, 4, x).bit_equal(forward(m, x)));
    REQUIRE_THROWS_AS(feature_at(m, 0, x), ShapeError);
    REQUIRE_THROWS_AS(feature_at(m, 5, x), ShapeError);
}

TEST_CASE("identical models produce identical features") {
    ModelGraph a = build_digit_teacher(4);
    ModelGraph b = a;
    Tensor x = random_image(20);
    for (int k = 1; k <= 4; ++k) REQUIRE(feature_at(a, k, x).bit_equal(feature_at(b, k, x)));
}

TEST_CASE("head replacement touches only the final layer") {
    ModelGraph m = build_digit_teacher(5);
    ModelGraph wide = replace_classification_layer(m, 6, 99);
    REQUIRE(wide.class_count() == 6);
    auto diff = layers_differing(m, wide);
    REQUIRE(diff == std::vector<size_t>{5});

    Tensor x = random_image(30);
    REQUIRE(feature_at(m, 3, x).bit_equal(feature_at(wide, 3, x)));

    // restoring the stored head brings back the original model bit for bit
    HeadSnapshot snap = snapshot_head(m);
    ModelGraph restored = restore_head(wide, snap);
    REQUIRE(models_bit_equal(restored, m));
}

TEST_CASE("head replacement requires a softmax fc head") {
    ModelGraph m;
    m.input_shape = {1, 8, 8};
    m.layers = {{1, LayerKind::conv2d, Activation::relu, 2, 3, 1, false, {}}};
    init_params(m, 1);
    REQUIRE_THROWS_AS(replace_classification_layer(m, 3, 1), ShapeError);
}

TEST_CASE("medium architecture builds and runs") {
    ModelGraph m = build_medium_teacher(43, 7);
    REQUIRE(m.layer_count() == 8);
    REQUIRE(m.class_count() == 43);
    Tensor probs = forward(m, Tensor::zeros({1, 3, 32, 32}));
    REQUIRE(probs.shape() == std::vector<int>{1, 43});
}

TEST_CASE("model serialization round-trips bit-exactly") {
    TempDir tmp;
    ModelGraph m = build_digit_teacher(8);
    m.layers[1].frozen = true;
    m.layers[4].unit_mask.assign(512, 0);
    m.layers[4].unit_mask[7] = 1;
    save_model(m, tmp.file("m.lbdm"));
    ModelGraph back = load_model(tmp.file("m.lbdm"));
    REQUIRE(models_bit_equal(m, back));
    REQUIRE(back.layers[1].frozen);
    REQUIRE(back.layers[4].unit_mask[7] == 1);
    REQUIRE(back.input_shape == m.input_shape);
}

TEST_CASE("corrupt model files are rejected") {
    TempDir tmp;
    ModelGraph m = build_digit_teacher(9);
    std::string path = tmp.file("m.lbdm");
    save_model(m, path);

    auto bytes = [&] {
        std::ifstream f(path, std::ios::binary);
        return std::vector<char>(std::istreambuf_iterator<char>(f), {});
    }();

    {  // truncated -> checksum failure
        std::ofstream f(tmp.file("trunc.lbdm"), std::ios::binary);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 9));
    }
    REQUIRE_THROWS_AS(load_model(tmp.file("trunc.lbdm")), FormatError);

    {  // flipped magic byte
        auto copy = bytes;
        copy[0] ^= 0xFF;
        std::ofstream f(tmp.file("magic.lbdm"), std::ios::binary);
        f.write(copy.data(), static_cast<std::streamsize>(copy.size()));
    }
    REQUIRE_THROWS_AS(load_model(tmp.file("magic.lbdm")), FormatError);

    {  // corrupted payload byte -> checksum mismatch
        auto copy = bytes;
        copy[20] ^= 0x01;
        std::ofstream f(tmp.file("bits.lbdm"), std::ios::binary);
        f.write(copy.data(), static_cast<std::streamsize>(copy.size()));
    }
    REQUIRE_THROWS_AS(load_model(tmp.file("bits.lbdm")), FormatError);

    REQUIRE_THROWS_AS(load_model(tmp.file("missing.lbdm")), IoError);
}

TEST_CASE("unknown layer kinds are rejected in forward") {
    ModelGraph m = build_digit_teacher(1);
    REQUIRE_THROWS_AS(forward(m, Tensor::zeros({1, 2, 28, 28})), ShapeError);
    REQUIRE_THROWS_AS(forward(m, Tensor::zeros({1, 1, 14, 14})), ShapeError);
}
