#include <catch2/catch_amalgamated.hpp>

#include "headsup/rng.hpp"
#include "headsup/tensor.hpp"

using namespace headsup;

TEST_CASE("rng is a pure function of seed and draw index") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());

    Rng c(42), d(43);
    bool any_diff = false;
    for (int i = 0; i < 10; ++i) any_diff |= (c.next_u64() != d.next_u64());
    REQUIRE(any_diff);
}

TEST_CASE("rng streams are independent of sibling consumption") {
    Rng root(7);
    Rng s1 = root.stream(1);
    Rng s2 = root.stream(2);
    double first_of_s2 = s2.uniform();

    Rng root2(7);
    Rng s1b = root2.stream(1);
    for (int i = 0; i < 50; ++i) (void)s1b.uniform();  // extra draws on stream 1
    Rng s2b = root2.stream(2);
    REQUIRE(s2b.uniform() == first_of_s2);
    (void)s1;
}

TEST_CASE("rng normal moments") {
    Rng r(123);
    const int n = 200000;
    double sum = 0, sum2 = 0;
    for (int i = 0; i < n; ++i) {
        double v = r.normal();
        sum += v;
        sum2 += v * v;
    }
    double mean = sum / n;
    double var = sum2 / n - mean * mean;
    REQUIRE(std::abs(mean) < 0.01);
    REQUIRE(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("rng uniform_int covers range inclusively") {
    Rng r(5);
    bool saw_lo = false, saw_hi = false;
    for (int i = 0; i < 1000; ++i) {
        int64_t v = r.uniform_int(2, 5);
        REQUIRE(v >= 2);
        REQUIRE(v <= 5);
        saw_lo |= (v == 2);
        saw_hi |= (v == 5);
    }
    REQUIRE(saw_lo);
    REQUIRE(saw_hi);
}

TEST_CASE("tensor shape checks") {
    Tensor t({3, 4, 5}, 1.5);
    REQUIRE(t.numel() == 60);
    REQUIRE(t.sum() == Catch::Approx(90.0));
    t.at(2, 3, 4) = 7.0;
    REQUIRE(t[59] == 7.0);
    REQUIRE_THROWS_AS(Tensor({3, 0, 5}), ShapeError);
    REQUIRE_THROWS_AS(Tensor({2, 2}, std::vector<double>{1.0}), ShapeError);
}
