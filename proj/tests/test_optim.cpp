#include <catch2/catch_amalgamated.hpp>

#include "lbd/data.hpp"
#include "lbd/model.hpp"
#include "lbd/optim.hpp"
#include "lbd/train.hpp"

using namespace lbd;

TEST_CASE("zero learning rate leaves weights unchanged") {
    Sgd sgd(0.0, 0.9);
    Tensor w = Tensor::from_data({3}, {1.0, 2.0, 3.0});
    Tensor before = w;
    sgd.update(w, Tensor::full({3}, 5.0), 0);
    REQUIRE(w.bit_equal(before));
}

TEST_CASE("plain descent step") {
    Sgd sgd(1.0, 0.0);
    Tensor w = Tensor::from_data({1}, {5.0});
    sgd.update(w, Tensor::from_data({1}, {2.0}), 0);
    REQUIRE(w[0] == 3.0);
}

TEST_CASE("momentum follows the velocity recurrence") {
    // oracle: v <- 0.9 v + g, w <- w - lr v, constant g
    double lr = 0.1, g = 1.0, w = 0.0, v = 0.0;
    Sgd sgd(lr, 0.9);
    Tensor wt = Tensor::from_data({1}, {w});
    Tensor gt = Tensor::from_data({1}, {g});
    for (int step = 0; step < 2; ++step) {
        v = 0.9 * v + g;
        w -= lr * v;
        sgd.update(wt, gt, 0);
        REQUIRE(std::abs(wt[0] - w) < 1e-15);
    }
    REQUIRE(std::abs(wt[0] - (-0.29)) < 1e-15);
}

TEST_CASE("frozen layers stay bit-identical through training") {
    LabeledDataset data = make_synthetic(2, 30, 12, 7);
    ModelGraph m;
    m.input_shape = {1, 12, 12};
    m.layers = {
        {1, LayerKind::conv2d, Activation::relu, 4, 3, 1, true, {}},
        {1, LayerKind::maxpool2d, Activation::none, 0, 2, 2, true, {}},
        {2, LayerKind::fully_connected, Activation::softmax, 2, 0, 1, false, {}},
    };
    init_params(m, 3);
    Tensor conv_w = m.params[0][0];
    Tensor conv_b = m.params[0][1];
    Tensor head_before = m.params[2][0];

    SgdConfig cfg;
    cfg.epochs = 3;
    cfg.batch = 10;
    cfg.patience = 0;
    train_classifier(m, data, cfg);

    REQUIRE(m.params[0][0].bit_equal(conv_w));
    REQUIRE(m.params[0][1].bit_equal(conv_b));
    REQUIRE_FALSE(m.params[2][0].bit_equal(head_before));
}

TEST_CASE("missing gradient for a trainable weight is an error") {
    ModelGraph m;
    m.input_shape = {1, 8, 8};
    m.layers = {{1, LayerKind::fully_connected, Activation::softmax, 2, 0, 1, false, {}}};
    init_params(m, 1);
    auto input = ad::leaf(Tensor::zeros({1, 1, 8, 8}));
    GraphBuild gb = build_graph(m, input, true);
    // no backward pass ran, so leaves carry no gradients
    Sgd sgd(0.1, 0.0);
    REQUIRE_THROWS_AS(sgd.step(m, gb.param_leaves), Error);
}

TEST_CASE("same seed gives bit-identical training runs") {
    LabeledDataset data = make_synthetic(2, 40, 14, 77);
    auto run = [&](uint64_t seed) {
        ModelGraph m;
        m.input_shape = {1, 14, 14};
        m.layers = {
            {1, LayerKind::conv2d, Activation::relu, 4, 3, 1, false, {}},
            {1, LayerKind::maxpool2d, Activation::none, 0, 2, 2, false, {}},
            {2, LayerKind::fully_connected, Activation::softmax, 2, 0, 1, false, {}},
        };
        init_params(m, seed);
        SgdConfig cfg;
        cfg.epochs = 2;
        cfg.batch = 16;
        cfg.seed = seed;
        cfg.patience = 0;
        train_classifier(m, data, cfg);
        return m;
    };
    ModelGraph a = run(5), b = run(5), c = run(6);
    REQUIRE(models_bit_equal(a, b));
    REQUIRE_FALSE(models_bit_equal(a, c));
}

TEST_CASE("training a separable synthetic task converges") {
    LabeledDataset data = make_synthetic(2, 50, 14, 11);
    ModelGraph m;
    m.input_shape = {1, 14, 14};
    m.layers = {
        {1, LayerKind::fully_connected, Activation::relu, 16, 0, 1, false, {}},
        {2, LayerKind::fully_connected, Activation::softmax, 2, 0, 1, false, {}},
    };
    init_params(m, 21);
    SgdConfig cfg;
    cfg.epochs = 20;
    cfg.batch = 10;
    cfg.lr = 0.05;
    cfg.seed = 21;
    train_classifier(m, data, cfg);
    REQUIRE(clean_accuracy(m, data) == 1.0);
}
