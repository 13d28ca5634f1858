#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "asdm/kernels.hpp"
#include "oracles.hpp"

using namespace asdm;

TEST_CASE("conv2d identity kernel passes input through") {
    Rng rng(11);
    Tensor x = rng.gaussian_tensor({1, 1, 3, 3});
    Tensor w({1, 1, 1, 1});
    w.data[0] = 1.0f;
    Tensor b({1});
    Tensor y = conv2d(x, w, b, 1, 0);
    CHECK(y.bit_equal(x));
}

TEST_CASE("conv2d 1x1 all-ones kernel sums channels") {
    Tensor x = Tensor::full({1, 2, 2, 2}, 1.0f);
    Tensor w = Tensor::full({1, 2, 1, 1}, 1.0f);
    Tensor b({1});
    Tensor y = conv2d(x, w, b, 1, 0);
    REQUIRE(y.shape == std::vector<int>{1, 1, 2, 2});
    for (float v : y.data) CHECK(v == 2.0f);
}

TEST_CASE("conv2d matches the six-loop oracle on random cases") {
    Rng rng(42);
    for (int trial = 0; trial < 100; trial++) {
        int C = rng.uniform_int(1, 4);
        int O = rng.uniform_int(1, 5);
        int H = rng.uniform_int(3, 9);
        int W = rng.uniform_int(3, 9);
        int k = 2 * rng.uniform_int(0, 1) + 1;
        int stride = rng.uniform_int(1, 2);
        int pad = rng.uniform_int(0, 1);
        if (H + 2 * pad < k || W + 2 * pad < k) continue;
        Tensor x = rng.gaussian_tensor({1, C, H, W});
        Tensor w = rng.gaussian_tensor({O, C, k, k});
        Tensor b = rng.gaussian_tensor({O});
        Tensor got = conv2d(x, w, b, stride, pad);
        Tensor want = oracle::conv2d_naive(x, w, b, stride, pad);
        CHECK(max_abs_diff(got, want) <= 1e-5f);
    }
}

TEST_CASE("conv2d spec example: random 1x3x8x8 against oracle") {
    Rng rng(7);
    Tensor x = rng.gaussian_tensor({1, 3, 8, 8});
    Tensor w = rng.gaussian_tensor({4, 3, 3, 3});
    Tensor b = rng.gaussian_tensor({4});
    Tensor got = conv2d(x, w, b, 1, 1);
    Tensor want = oracle::conv2d_naive(x, w, b, 1, 1);
    CHECK(max_abs_diff(got, want) <= 1e-5f);
}

TEST_CASE("conv2d rejects mismatched shapes") {
    Tensor x({1, 3, 4, 4});
    Tensor w({2, 2, 3, 3});
    Tensor b({2});
    CHECK_THROWS_AS(conv2d(x, w, b, 1, 1), std::invalid_argument);
    Tensor w2({2, 3, 2, 2});  // even kernel
    CHECK_THROWS_AS(conv2d(x, w2, b, 1, 1), std::invalid_argument);
    Tensor b2({3});
    Tensor w3({2, 3, 3, 3});
    CHECK_THROWS_AS(conv2d(x, w3, b2, 1, 1), std::invalid_argument);
}

TEST_CASE("conv2d is deterministic across calls") {
    Rng rng(99);
    Tensor x = rng.gaussian_tensor({2, 3, 16, 16});
    Tensor w = rng.gaussian_tensor({8, 3, 3, 3});
    Tensor b = rng.gaussian_tensor({8});
    Tensor y1 = conv2d(x, w, b, 1, 1);
    Tensor y2 = conv2d(x, w, b, 1, 1);
    CHECK(y1.bit_equal(y2));
}

TEST_CASE("group_norm collapses constant input to zero") {
    Tensor x = Tensor::full({1, 4, 3, 3}, 3.25f);
    Tensor gamma = Tensor::full({4}, 1.0f);
    Tensor beta({4});
    Tensor y = group_norm(x, 2, gamma, beta, 1e-5f);
    for (float v : y.data) CHECK(std::fabs(v) <= 1e-4f);
}

TEST_CASE("group_norm with gamma=0 beta=5 returns all fives") {
    Rng rng(3);
    Tensor x = rng.gaussian_tensor({2, 4, 3, 3});
    Tensor gamma({4});
    Tensor beta = Tensor::full({4}, 5.0f);
    Tensor y = group_norm(x, 2, gamma, beta, 1e-5f);
    for (float v : y.data) CHECK(v == 5.0f);
}

TEST_CASE("group_norm output has per-group zero mean unit variance") {
    Rng rng(17);
    Tensor x = rng.gaussian_tensor({2, 8, 5, 5}, 2.5f);
    Tensor gamma = Tensor::full({8}, 1.0f);
    Tensor beta({8});
    Tensor y = group_norm(x, 2, gamma, beta, 1e-6f);
    for (int n = 0; n < 2; n++) {
        for (int g = 0; g < 2; g++) {
            double mean, var;
            oracle::group_moments(y, 2, n, g, &mean, &var);
            CHECK(std::fabs(mean) <= 1e-5);
            CHECK(std::fabs(var - 1.0) <= 1e-3);
        }
    }
}

TEST_CASE("group_norm rejects indivisible group count") {
    Tensor x({1, 6, 2, 2});
    Tensor gamma({6}), beta({6});
    CHECK_THROWS_AS(group_norm(x, 4, gamma, beta, 1e-5f), std::invalid_argument);
}

TEST_CASE("layer_norm normalizes each row") {
    Rng rng(23);
    Tensor x = rng.gaussian_tensor({5, 16}, 3.0f);
    Tensor gamma = Tensor::full({16}, 1.0f);
    Tensor beta({16});
    Tensor y = layer_norm(x, gamma, beta, 1e-6f);
    for (int r = 0; r < 5; r++) {
        double sum = 0.0, sq = 0.0;
        for (int c = 0; c < 16; c++) {
            sum += y.at2(r, c);
            sq += (double)y.at2(r, c) * y.at2(r, c);
        }
        CHECK(std::fabs(sum / 16.0) <= 1e-5);
        CHECK(std::fabs(sq / 16.0 - 1.0) <= 1e-3);
    }
}

TEST_CASE("attention with a single key copies v for every query") {
    Rng rng(5);
    Tensor q = rng.gaussian_tensor({4, 8});
    Tensor k = rng.gaussian_tensor({1, 8});
    Tensor v = rng.gaussian_tensor({1, 8});
    Tensor y = attention(q, k, v, 2);
    for (int i = 0; i < 4; i++) {
        for (int d = 0; d < 8; d++) CHECK(y.at2(i, d) == doctest::Approx(v.at2(0, d)).epsilon(1e-6));
    }
}

TEST_CASE("attention hard-selection limit picks the matching value row") {
    const int M = 4, D = 8;
    Tensor q({1, D}), k({M, D}), v({M, D});
    int target = 2;
    for (int d = 0; d < D; d++) q.at2(0, d) = 0.0f;
    // one-hot key pattern, large magnitude so softmax saturates
    for (int j = 0; j < M; j++) {
        for (int d = 0; d < D; d++) k.at2(j, d) = (d == j) ? 1.0f : 0.0f;
    }
    q.at2(0, target) = 60.0f;
    Rng rng(8);
    for (int j = 0; j < M; j++) {
        for (int d = 0; d < D; d++) v.at2(j, d) = rng.gaussian();
    }
    Tensor y = attention(q, k, v, 1);
    for (int d = 0; d < D; d++) {
        CHECK(std::fabs(y.at2(0, d) - v.at2(target, d)) <= 1e-3f);
    }
}

TEST_CASE("attention matches the naive per-head oracle") {
    Rng rng(31);
    Tensor q = rng.gaussian_tensor({3, 8});
    Tensor k = rng.gaussian_tensor({4, 8});
    Tensor v = rng.gaussian_tensor({4, 8});
    Tensor got = attention(q, k, v, 2);
    Tensor want = oracle::attention_naive(q, k, v, 2);
    CHECK(max_abs_diff(got, want) <= 1e-5f);
}

TEST_CASE("attention rejects width not divisible by heads") {
    Tensor q({2, 6}), k({2, 6}), v({2, 6});
    CHECK_THROWS_AS(attention(q, k, v, 4), std::invalid_argument);
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(13);
    Tensor x = rng.gaussian_tensor({6, 9}, 4.0f);
    Tensor p = softmax_rows(x);
    for (int r = 0; r < 6; r++) {
        double s = 0.0;
        for (int c = 0; c < 9; c++) s += p.at2(r, c);
        CHECK(std::fabs(s - 1.0) <= 1e-6);
    }
}

TEST_CASE("matmul and linear agree with the naive oracle") {
    Rng rng(77);
    Tensor a = rng.gaussian_tensor({5, 7});
    Tensor b = rng.gaussian_tensor({7, 3});
    CHECK(max_abs_diff(matmul(a, b), oracle::matmul_naive(a, b)) <= 1e-5f);

    Tensor w = rng.gaussian_tensor({3, 7});
    Tensor bias = rng.gaussian_tensor({3});
    Tensor got = linear(a, w, bias);
    Tensor viaMatmul = matmul(a, transpose2d(w));
    for (int i = 0; i < 5; i++) {
        for (int j = 0; j < 3; j++) {
            CHECK(got.at2(i, j) == doctest::Approx(viaMatmul.at2(i, j) + bias.data[j]).epsilon(1e-5));
        }
    }
}

TEST_CASE("silu and sigmoid basics") {
    Tensor x({1, 3});
    x.data = {0.0f, 10.0f, -10.0f};
    Tensor s = silu(x);
    CHECK(s.data[0] == 0.0f);
    CHECK(s.data[1] == doctest::Approx(10.0f).epsilon(1e-3));
    CHECK(std::fabs(s.data[2]) <= 1e-3f);
    Tensor g = sigmoid(x);
    CHECK(g.data[0] == 0.5f);
}

TEST_CASE("token map round trip is lossless") {
    Rng rng(21);
    Tensor x = rng.gaussian_tensor({1, 6, 4, 5});
    Tensor t = tokens_from_map(x);
    REQUIRE(t.shape == std::vector<int>{20, 6});
    Tensor back = map_from_tokens(t, 4, 5);
    CHECK(back.bit_equal(x));
}

TEST_CASE("channel concat and slice invert each other") {
    Rng rng(29);
    Tensor a = rng.gaussian_tensor({2, 3, 4, 4});
    Tensor b = rng.gaussian_tensor({2, 5, 4, 4});
    Tensor cat = concat_channels(a, b);
    CHECK(slice_channels(cat, 0, 3).bit_equal(a));
    CHECK(slice_channels(cat, 3, 5).bit_equal(b));
}

TEST_CASE("upsample_nearest2x replicates 2x2 cells") {
    Tensor x({1, 1, 2, 2});
    x.data = {1.0f, 2.0f, 3.0f, 4.0f};
    Tensor y = upsample_nearest2x(x);
    CHECK(y.at4(0, 0, 0, 0) == 1.0f);
    CHECK(y.at4(0, 0, 0, 1) == 1.0f);
    CHECK(y.at4(0, 0, 1, 1) == 1.0f);
    CHECK(y.at4(0, 0, 0, 2) == 2.0f);
    CHECK(y.at4(0, 0, 3, 3) == 4.0f);
}

TEST_CASE("global_avg_pool averages each channel") {
    Tensor x({1, 2, 2, 2});
    x.data = {1, 2, 3, 4, 10, 10, 10, 10};
    Tensor y = global_avg_pool(x);
    CHECK(y.at2(0, 0) == doctest::Approx(2.5f));
    CHECK(y.at2(0, 1) == doctest::Approx(10.0f));
}

TEST_CASE("kernels keep finite inputs finite") {
    Rng rng(55);
    Tensor x = rng.gaussian_tensor({1, 4, 8, 8}, 5.0f);
    Tensor w = rng.gaussian_tensor({4, 4, 3, 3});
    Tensor b = rng.gaussian_tensor({4});
    CHECK(conv2d(x, w, b, 1, 1).all_finite());
    Tensor gamma = Tensor::full({4}, 1.0f), beta({4});
    CHECK(group_norm(x, 2, gamma, beta, 1e-5f).all_finite());
    CHECK(silu(x).all_finite());
}
