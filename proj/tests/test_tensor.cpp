#include <catch2/catch_amalgamated.hpp>

#include "lbd/rng.hpp"
#include "lbd/tensor.hpp"

using namespace lbd;

TEST_CASE("tensor construction and invariants") {
    Tensor t({2, 3});
    REQUIRE(t.size() == 6);
    REQUIRE(t.all_finite());
    REQUIRE_THROWS_AS(Tensor({2, 0}), ShapeError);
    REQUIRE_THROWS_AS(Tensor::from_data({2, 2}, {1.0, 2.0, 3.0}), ShapeError);

    Tensor u = Tensor::from_data({3}, {1.0, -2.0, 0.5});
    REQUIRE(u.min() == -2.0);
    REQUIRE(u.max() == 1.0);
}

TEST_CASE("copy is shared until written") {
    Tensor a = Tensor::full({4}, 7.0);
    Tensor b = a;
    REQUIRE(b.bit_equal(a));
    b.mutable_data()[0] = 1.0;
    REQUIRE(a[0] == 7.0);
    REQUIRE(b[0] == 1.0);
}

TEST_CASE("mse basics") {
    Tensor x = Tensor::from_data({3}, {0.3, -1.2, 4.0});
    REQUIRE(mse(x, x) == 0.0);

    Tensor a = Tensor::from_data({2}, {0.0, 0.0});
    Tensor b = Tensor::from_data({2}, {2.0, 0.0});
    REQUIRE(mse(a, b) == 2.0);
    REQUIRE(mse(b, a) == 2.0);

    REQUIRE_THROWS_AS(mse(a, x), ShapeError);
}

TEST_CASE("mse matches an elementwise loop oracle") {
    Rng rng(99);
    for (int trial = 0; trial < 10; ++trial) {
        int n = 1 + static_cast<int>(rng.below(40));
        std::vector<double> av(n), bv(n);
        for (auto& v : av) v = rng.uniform(-3, 3);
        for (auto& v : bv) v = rng.uniform(-3, 3);
        Tensor a = Tensor::from_data({n}, av);
        Tensor b = Tensor::from_data({n}, bv);
        double expect = 0.0;
        for (int i = 0; i < n; ++i) expect += (av[i] - bv[i]) * (av[i] - bv[i]);
        expect /= n;
        REQUIRE(std::abs(mse(a, b) - expect) < 1e-12);
        REQUIRE(mse(a, b) >= 0.0);
    }
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(7);
    std::vector<double> v(5 * 9);
    for (auto& x : v) x = rng.uniform(-10, 10);
    Tensor logits = Tensor::from_data({5, 9}, v);
    Tensor p = softmax_rows(logits);
    for (int r = 0; r < 5; ++r) {
        double s = 0.0;
        for (int c = 0; c < 9; ++c) s += p[r * 9 + c];
        REQUIRE(std::abs(s - 1.0) < 1e-10);
    }
    REQUIRE(p.min() >= 0.0);
}

TEST_CASE("tile_batch replicates rows") {
    Tensor t = Tensor::from_data({2}, {3.0, 4.0});
    Tensor tiled = tile_batch(t, 3);
    REQUIRE(tiled.shape() == std::vector<int>{3, 2});
    for (int i = 0; i < 3; ++i) {
        REQUIRE(tiled[i * 2] == 3.0);
        REQUIRE(tiled[i * 2 + 1] == 4.0);
    }
}

TEST_CASE("deterministic rng streams") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) REQUIRE(a.uniform() == b.uniform());
    Rng c(43);
    bool differs = false;
    Rng a2(42);
    for (int i = 0; i < 10; ++i) differs |= (a2.uniform() != c.uniform());
    REQUIRE(differs);

    REQUIRE(derive_seed(1, 0) != derive_seed(1, 1));
    REQUIRE(derive_seed(1, 0) == derive_seed(1, 0));
}
