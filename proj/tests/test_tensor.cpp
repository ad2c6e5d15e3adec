#include <doctest.h>

#include <cmath>
#include <limits>

#include "ldp/error.hpp"
#include "ldp/ops.hpp"
#include "ldp/tensor.hpp"

using namespace ldp;

TEST_CASE("conv2d hand oracle: all-ones 3x3, pad 1") {
    Tensor x = Tensor::full({1, 1, 3, 3}, 1.f);
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.f);
    Tensor b = Tensor::zeros({1});
    Tensor y = ops::conv2d(x, w, b, 1, 1);
    REQUIRE(y.shape() == Shape{1, 1, 3, 3});
    // Hand convolution: corners see 4 taps, edges 6, center 9.
    CHECK(y.data()[4] == doctest::Approx(9.f));
    CHECK(y.data()[0] == doctest::Approx(4.f));
    CHECK(y.data()[1] == doctest::Approx(6.f));
}

TEST_CASE("conv2d identity 1x1 kernel") {
    Rng rng(17);
    Tensor x = Tensor::randn({2, 1, 4, 4}, rng);
    Tensor w = Tensor::full({1, 1, 1, 1}, 1.f);
    Tensor b = Tensor::zeros({1});
    Tensor y = ops::conv2d(x, w, b, 1, 0);
    REQUIRE(y.shape() == x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d zero weight and bias gives zeros") {
    Rng rng(3);
    Tensor x = Tensor::randn({1, 3, 5, 5}, rng);
    Tensor w = Tensor::zeros({2, 3, 3, 3});
    Tensor b = Tensor::zeros({2});
    Tensor y = ops::conv2d(x, w, b, 1, 1);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.f);
}

TEST_CASE("conv2d shape mismatch names the offending dims") {
    Tensor x = Tensor::zeros({1, 3, 8, 8});
    Tensor w = Tensor::zeros({4, 4, 3, 3});
    Tensor b = Tensor::zeros({4});
    CHECK_THROWS_WITH_AS(ops::conv2d(x, w, b, 1, 1),
                         doctest::Contains("input channels 3 != weight Cin 4"), Error);
}

TEST_CASE("avg_pool2d constant tensor keeps value, halves size") {
    Tensor x = Tensor::full({1, 2, 4, 4}, 3.25f);
    Tensor y = ops::avg_pool2d(x, 2);
    REQUIRE(y.shape() == Shape{1, 2, 2, 2});
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(3.25f));
}

TEST_CASE("avg_pool2d arithmetic mean oracle") {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1.f, 2.f, 3.f, 4.f});
    Tensor y = ops::avg_pool2d(x, 2);
    REQUIRE(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.data()[0] == doctest::Approx(2.5f));
}

TEST_CASE("avg_pool2d rejects non-divisible spatial dims") {
    Tensor x = Tensor::zeros({1, 1, 3, 3});
    CHECK_THROWS_AS(ops::avg_pool2d(x, 2), Error);
}

TEST_CASE("upsample_nearest replicates cells") {
    Tensor x = Tensor::from_data({1, 1, 1, 1}, {5.f});
    Tensor y = ops::upsample_nearest(x, 2);
    REQUIRE(y.shape() == Shape{1, 1, 2, 2});
    for (int i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(5.f));
}

TEST_CASE("upsample(pool(x)) is identity for cell-constant tensors") {
    Rng rng(99);
    for (int factor : {1, 2, 4}) {
        const int H = 8;
        Tensor x = Tensor::zeros({1, 2, H, H});
        // fill constant within each factor x factor cell
        float* p = x.mutable_data();
        for (int c = 0; c < 2; ++c)
            for (int bh = 0; bh < H / factor; ++bh)
                for (int bw = 0; bw < H / factor; ++bw) {
                    const float v = rng.normal();
                    for (int dh = 0; dh < factor; ++dh)
                        for (int dw = 0; dw < factor; ++dw)
                            p[(c * H + bh * factor + dh) * H + bw * factor + dw] = v;
                }
        Tensor y = ops::upsample_nearest(ops::avg_pool2d(x, factor), factor);
        REQUIRE(y.shape() == x.shape());
        for (int64_t i = 0; i < x.numel(); ++i)
            CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-6));
    }
}

TEST_CASE("silu(0) == 0") {
    Tensor x = Tensor::zeros({1, 1, 1, 1});
    CHECK(ops::silu(x).data()[0] == 0.f);
}

TEST_CASE("softmax over equal logits is uniform") {
    Tensor x = Tensor::full({1, 1, 4}, 0.7f);
    Tensor y = ops::softmax_lastdim(x);
    for (int i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(0.25f));
}

TEST_CASE("group_norm output has mean 0 variance 1 per group before affine") {
    Rng rng(5);
    Tensor x = Tensor::randn({2, 8, 4, 4}, rng, 2.f);
    Tensor gamma = Tensor::full({8}, 1.f);
    Tensor beta = Tensor::zeros({8});
    const int groups = 4;
    Tensor y = ops::group_norm(x, gamma, beta, groups);
    const int cpg = 8 / groups;
    const int hw = 16;
    for (int n = 0; n < 2; ++n)
        for (int g = 0; g < groups; ++g) {
            double sum = 0, sq = 0;
            for (int c = 0; c < cpg; ++c)
                for (int i = 0; i < hw; ++i) {
                    const float v = y.data()[((n * 8) + g * cpg + c) * hw + i];
                    sum += v;
                    sq += v * v;
                }
            const double m = sum / (cpg * hw);
            const double var = sq / (cpg * hw) - m * m;
            CHECK(std::abs(m) < 1e-5);
            CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
        }
}

TEST_CASE("non-finite op output raises") {
    Tensor x = Tensor::from_data({2}, {1.f, std::numeric_limits<float>::infinity()});
    Tensor y = Tensor::from_data({2}, {1.f, 1.f});
    CHECK_THROWS_AS(ops::add(x, y), Error);
}

TEST_CASE("attention shape checks and single-token kv") {
    Rng rng(11);
    Tensor q = Tensor::randn({1, 4, 8}, rng);
    Tensor k = Tensor::randn({1, 1, 8}, rng);
    Tensor v = Tensor::randn({1, 1, 8}, rng);
    Tensor o = ops::scaled_dot_product_attention(q, k, v);
    REQUIRE(o.shape() == Shape{1, 4, 8});
    // softmax over a single key is 1, so every token returns v
    for (int t = 0; t < 4; ++t)
        for (int c = 0; c < 8; ++c)
            CHECK(o.data()[t * 8 + c] == doctest::Approx(v.data()[c]));
    Tensor bad = Tensor::randn({1, 4, 4}, rng);
    CHECK_THROWS_AS(ops::scaled_dot_product_attention(q, bad, v), Error);
}

TEST_CASE("determinism: same seed, same bits") {
    Rng a(42), b(42);
    Tensor ta = Tensor::randn({3, 7}, a);
    Tensor tb = Tensor::randn({3, 7}, b);
    for (int64_t i = 0; i < ta.numel(); ++i) CHECK(ta.data()[i] == tb.data()[i]);

    Rng rng(1);
    Tensor x = Tensor::randn({1, 4, 8, 8}, rng);
    Tensor w = Tensor::randn({4, 4, 3, 3}, rng, 0.2f);
    Tensor bias = Tensor::randn({4}, rng, 0.1f);
    Tensor y1 = ops::conv2d(x, w, bias, 1, 1);
    Tensor y2 = ops::conv2d(x, w, bias, 1, 1);
    for (int64_t i = 0; i < y1.numel(); ++i) CHECK(y1.data()[i] == y2.data()[i]);
}

TEST_CASE("concat_channels layout") {
    Tensor a = Tensor::full({1, 1, 2, 2}, 1.f);
    Tensor b = Tensor::full({1, 2, 2, 2}, 2.f);
    Tensor y = ops::concat_channels(a, b);
    REQUIRE(y.shape() == Shape{1, 3, 2, 2});
    CHECK(y.data()[0] == 1.f);
    CHECK(y.data()[4] == 2.f);
    CHECK(y.data()[8] == 2.f);
}

TEST_CASE("token round trip preserves layout") {
    Rng rng(8);
    Tensor x = Tensor::randn({2, 3, 4, 4}, rng);
    Tensor y = ops::from_tokens(ops::to_tokens(x), 4, 4);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}
