#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include "lbd/ad.hpp"
#include "lbd/rng.hpp"

using namespace lbd;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    double* p = t.mutable_data();
    for (int64_t i = 0; i < t.size(); ++i) p[i] = rng.uniform(lo, hi);
    return t;
}

// Central finite differences against the analytic gradient of `loss_of`,
// which must build a fresh graph from the given parameter value.
void check_gradient(const Tensor& param,
                    const std::function<ad::NodePtr(const ad::NodePtr&)>& loss_of,
                    double tol = 1e-4, double h = 1e-5) {
    auto leaf = ad::leaf(param, true);
    auto loss = loss_of(leaf);
    ad::backward(loss);
    REQUIRE(leaf->grad.defined());
    REQUIRE(leaf->grad.same_shape(param));
    REQUIRE(leaf->grad.all_finite());

    auto eval = [&](const Tensor& p) { return loss_of(ad::leaf(p, false))->value[0]; };
    for (int64_t i = 0; i < param.size(); ++i) {
        Tensor plus = param;
        plus.mutable_data()[i] += h;
        Tensor minus = param;
        minus.mutable_data()[i] -= h;
        double numeric = (eval(plus) - eval(minus)) / (2 * h);
        double analytic = leaf->grad[i];
        double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
        REQUIRE(std::abs(numeric - analytic) / denom < tol);
    }
}

}  // namespace

TEST_CASE("relu forward on a fixed example") {
    auto x = ad::leaf(Tensor::from_data({3}, {-1.0, 0.0, 2.0}));
    auto y = ad::relu(x);
    REQUIRE(y->value[0] == 0.0);
    REQUIRE(y->value[1] == 0.0);
    REQUIRE(y->value[2] == 2.0);
}

TEST_CASE("fully connected with identity weights is the identity") {
    Tensor w = Tensor::zeros({3, 3});
    for (int i = 0; i < 3; ++i) w.mutable_data()[i * 3 + i] = 1.0;
    Tensor x = Tensor::from_data({1, 3}, {0.5, -2.0, 7.0});
    auto y = ad::fully_connected(ad::leaf(x), ad::leaf(w), ad::leaf(Tensor::zeros({3})));
    REQUIRE(y->value.bit_equal(x));
}

TEST_CASE("2x2 maxpool stride 2 takes the block max") {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    auto y = ad::maxpool2d(ad::leaf(x), 2, 2);
    REQUIRE(y->value.size() == 1);
    REQUIRE(y->value[0] == 4.0);
}

TEST_CASE("gradient of sum(w*w) is 2w") {
    auto w = ad::leaf(Tensor::from_data({1}, {3.0}), true);
    auto loss = ad::sum(ad::mul(w, w));
    ad::backward(loss);
    REQUIRE(loss->value[0] == 9.0);
    REQUIRE(w->grad[0] == 6.0);
}

TEST_CASE("gradient of mse(a, a) w.r.t. a is zero") {
    Rng rng(5);
    Tensor v = random_tensor({7}, rng);
    auto a = ad::leaf(v, true);
    auto loss = ad::mse_loss(a, ad::leaf(v));
    ad::backward(loss);
    REQUIRE(loss->value[0] == 0.0);
    for (int64_t i = 0; i < v.size(); ++i) REQUIRE(a->grad[i] == 0.0);
}

TEST_CASE("softmax cross-entropy equals -log p_true and is nonnegative") {
    Tensor logits = Tensor::from_data({2, 3}, {2.0, 1.0, -1.0, 0.0, 0.0, 0.0});
    auto node = ad::softmax_xent(ad::leaf(logits), {0, 2});
    Tensor p = softmax_rows(logits);
    double expect = -(std::log(p[0]) + std::log(p[5])) / 2.0;
    REQUIRE(std::abs(node->value[0] - expect) < 1e-12);
    REQUIRE(node->value[0] >= 0.0);
}

TEST_CASE("backward rejects non-scalar losses") {
    auto x = ad::leaf(Tensor::full({3}, 1.0), true);
    auto y = ad::relu(x);
    REQUIRE_THROWS_AS(ad::backward(y), ShapeError);
}

TEST_CASE("conv2d gradient matches finite differences on a 1x1x4x4 input") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(1000 + seed);
        Tensor x = random_tensor({1, 1, 4, 4}, rng);
        Tensor w = random_tensor({2, 1, 3, 3}, rng);
        Tensor b = random_tensor({2}, rng);
        Tensor target = random_tensor({1, 2, 2, 2}, rng);

        check_gradient(w, [&](const ad::NodePtr& wl) {
            return ad::mse_loss(ad::conv2d(ad::leaf(x), wl, ad::leaf(b)), ad::leaf(target));
        });
        check_gradient(x, [&](const ad::NodePtr& xl) {
            return ad::mse_loss(ad::conv2d(xl, ad::leaf(w), ad::leaf(b)), ad::leaf(target));
        });
        check_gradient(b, [&](const ad::NodePtr& bl) {
            return ad::mse_loss(ad::conv2d(ad::leaf(x), ad::leaf(w), bl), ad::leaf(target));
        });
    }
}

TEST_CASE("strided conv2d gradient matches finite differences") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(2000 + seed);
        Tensor x = random_tensor({2, 2, 5, 5}, rng);
        Tensor w = random_tensor({3, 2, 3, 3}, rng);
        Tensor b = random_tensor({3}, rng);
        Tensor target = random_tensor({2, 3, 2, 2}, rng);
        check_gradient(w, [&](const ad::NodePtr& wl) {
            return ad::mse_loss(ad::conv2d(ad::leaf(x), wl, ad::leaf(b), 2), ad::leaf(target));
        });
        check_gradient(x, [&](const ad::NodePtr& xl) {
            return ad::mse_loss(ad::conv2d(xl, ad::leaf(w), ad::leaf(b), 2), ad::leaf(target));
        });
    }
}

TEST_CASE("fully connected gradient matches finite differences") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(3000 + seed);
        Tensor x = random_tensor({3, 4}, rng);
        Tensor w = random_tensor({5, 4}, rng);
        Tensor b = random_tensor({5}, rng);
        Tensor target = random_tensor({3, 5}, rng);
        check_gradient(w, [&](const ad::NodePtr& wl) {
            return ad::mse_loss(ad::fully_connected(ad::leaf(x), wl, ad::leaf(b)),
                                ad::leaf(target));
        });
        check_gradient(x, [&](const ad::NodePtr& xl) {
            return ad::mse_loss(ad::fully_connected(xl, ad::leaf(w), ad::leaf(b)),
                                ad::leaf(target));
        });
        check_gradient(b, [&](const ad::NodePtr& bl) {
            return ad::mse_loss(ad::fully_connected(ad::leaf(x), ad::leaf(w), bl),
                                ad::leaf(target));
        });
    }
}

TEST_CASE("relu gradient matches finite differences") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(4000 + seed);
        Tensor x = random_tensor({2, 6}, rng);
        Tensor target = random_tensor({2, 6}, rng);
        check_gradient(x, [&](const ad::NodePtr& xl) {
            return ad::mse_loss(ad::relu(xl), ad::leaf(target));
        });
    }
}

TEST_CASE("maxpool gradient matches finite differences") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(5000 + seed);
        Tensor x = random_tensor({1, 2, 4, 4}, rng);
        Tensor target = random_tensor({1, 2, 2, 2}, rng);
        check_gradient(x, [&](const ad::NodePtr& xl) {
            return ad::mse_loss(ad::maxpool2d(xl, 2, 2), ad::leaf(target));
        });
    }
}

TEST_CASE("softmax cross-entropy gradient matches finite differences") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(6000 + seed);
        Tensor logits = random_tensor({4, 5}, rng, -2.0, 2.0);
        std::vector<int> labels;
        for (int i = 0; i < 4; ++i) labels.push_back(static_cast<int>(rng.below(5)));
        check_gradient(logits, [&](const ad::NodePtr& l) { return ad::softmax_xent(l, labels); });
    }
}

TEST_CASE("elementwise add/mul and tile0 gradients match finite differences") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(7000 + seed);
        Tensor a = random_tensor({3, 3}, rng);
        Tensor b = random_tensor({3, 3}, rng);
        Tensor target = random_tensor({3, 3}, rng);
        check_gradient(a, [&](const ad::NodePtr& al) {
            return ad::mse_loss(ad::add(ad::mul(al, ad::leaf(b)), ad::leaf(b)), ad::leaf(target));
        });
        // scalar broadcast path
        Tensor s = random_tensor({1}, rng);
        check_gradient(s, [&](const ad::NodePtr& sl) {
            return ad::sum(ad::mul(ad::leaf(a), sl));
        });
        // tile0
        Tensor img = random_tensor({2, 2}, rng);
        Tensor tiled_target = random_tensor({4, 2, 2}, rng);
        check_gradient(img, [&](const ad::NodePtr& il) {
            return ad::mse_loss(ad::tile0(il, 4), ad::leaf(tiled_target));
        });
    }
}

TEST_CASE("mse gradient matches finite differences on both operands") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(8000 + seed);
        Tensor a = random_tensor({2, 5}, rng);
        Tensor b = random_tensor({2, 5}, rng);
        check_gradient(a, [&](const ad::NodePtr& al) { return ad::mse_loss(al, ad::leaf(b)); });
        check_gradient(b, [&](const ad::NodePtr& bl) { return ad::mse_loss(ad::leaf(a), bl); });
    }
}

TEST_CASE("gradient accumulates across shared subexpressions") {
    // loss = sum(w*w) + sum(w) -> d/dw = 2w + 1
    auto w = ad::leaf(Tensor::from_data({2}, {1.5, -0.5}), true);
    auto loss = ad::add(ad::sum(ad::mul(w, w)), ad::sum(w));
    ad::backward(loss);
    REQUIRE(std::abs(w->grad[0] - 4.0) < 1e-12);
    REQUIRE(std::abs(w->grad[1] - 0.0) < 1e-12);
}
