#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "mnf/tensor.hpp"
#include "testutil.hpp"

using namespace mnf;
using testutil::conv2d_reference;
using testutil::max_abs_diff;
using testutil::random_tensor;

TEST_CASE("1x1 conv over all-ones sums the input channels") {
    Tensor x(1, 2, 3, 3, 1.0f);
    Tensor w(4, 2, 1, 1, 1.0f);
    Tensor y = conv2d(x, w, nullptr);
    REQUIRE(y.n == 1);
    REQUIRE(y.c == 4);
    REQUIRE(y.h == 3);
    REQUIRE(y.w == 3);
    for (float v : y.data) REQUIRE(v == 2.0f);
}

TEST_CASE("depthwise identity kernel reproduces the input") {
    std::mt19937_64 rng(1);
    Tensor x = random_tensor(rng, 2, 5, 6, 7);
    Tensor w(5, 1, 3, 3, 0.0f);
    for (int c = 0; c < 5; ++c) w.at(c, 0, 1, 1) = 1.0f;
    ConvOpts o;
    o.groups = 5;
    Tensor y = conv2d(x, w, nullptr, o);
    REQUIRE(max_abs_diff(x, y) == 0.0f);
}

TEST_CASE("3x3 dilation-2 valid conv on a 5x5 ramp") {
    // input(r, c) = 5r + c; an all-ones kernel with dilation 2 samples the
    // corners, edge midpoints and center: sum = 108.
    Tensor x(1, 1, 5, 5);
    for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 5; ++c) x.at(0, 0, r, c) = static_cast<float>(5 * r + c);
    Tensor w(1, 1, 3, 3, 1.0f);
    ConvOpts o;
    o.dilation = 2;
    o.padding = Padding::Valid;
    Tensor y = conv2d(x, w, nullptr, o);
    REQUIRE(y.h == 1);
    REQUIRE(y.w == 1);
    REQUIRE(y.at(0, 0, 0, 0) == 108.0f);
}

TEST_CASE("conv2d is linear in its input") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x = random_tensor(rng, 1, 4, 7, 7);
        Tensor y = random_tensor(rng, 1, 4, 7, 7);
        Tensor w = random_tensor(rng, 6, 4, 3, 3);
        const float a = 0.7f, b = -1.3f;
        Tensor mix(1, 4, 7, 7);
        for (size_t i = 0; i < mix.size(); ++i)
            mix.data[i] = a * x.data[i] + b * y.data[i];
        Tensor lhs = conv2d(mix, w, nullptr);
        Tensor cx = conv2d(x, w, nullptr);
        Tensor cy = conv2d(y, w, nullptr);
        for (size_t i = 0; i < lhs.size(); ++i) {
            const float rhs = a * cx.data[i] + b * cy.data[i];
            REQUIRE_THAT(lhs.data[i],
                         Catch::Matchers::WithinRel(rhs, 1e-4f) ||
                             Catch::Matchers::WithinAbs(rhs, 1e-5f));
        }
    }
}

TEST_CASE("conv2d matches the brute-force oracle on random shapes") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 40; ++trial) {
        const int n = 1 + static_cast<int>(rng() % 2);
        const int groups_pick = static_cast<int>(rng() % 3);
        const int cin_g = 1 + static_cast<int>(rng() % 4);
        const int groups = groups_pick == 0 ? 1 : 1 + static_cast<int>(rng() % 4);
        const int cin = cin_g * groups;
        if (cin > 8) continue;
        const int cout = groups * (1 + static_cast<int>(rng() % 3));
        const int h = 3 + static_cast<int>(rng() % 7);
        const int w = 3 + static_cast<int>(rng() % 7);
        const int k = (rng() % 2) ? 3 : 1;
        const int stride = 1 + static_cast<int>(rng() % 2);
        const int dilation = k == 3 && (rng() % 2) ? 2 : 1;
        const Padding pad = (rng() % 2) ? Padding::Same : Padding::Valid;
        if (pad == Padding::Valid && ((k - 1) * dilation + 1 > std::min(h, w)))
            continue;
        Tensor x = random_tensor(rng, n, cin, h, w);
        Tensor wt = random_tensor(rng, cout, cin_g, k, k);
        Tensor bias = random_tensor(rng, 1, cout, 1, 1);
        ConvOpts o{stride, dilation, groups, pad};
        Tensor got = conv2d(x, wt, bias.data.data(), o);
        Tensor want = conv2d_reference(x, wt, bias.data.data(), stride, dilation,
                                       groups, pad);
        REQUIRE(got.same_shape(want));
        REQUIRE(max_abs_diff(got, want) <= 1e-5f);
    }
}

TEST_CASE("depthwise equals grouped conv with groups == channels") {
    std::mt19937_64 rng(4);
    Tensor x = random_tensor(rng, 1, 6, 9, 9);
    Tensor w = random_tensor(rng, 6, 1, 3, 3);
    ConvOpts o;
    o.groups = 6;
    Tensor a = conv2d(x, w, nullptr, o);
    Tensor b = conv2d(x, w, nullptr, o);  // same call path; bit-identical
    REQUIRE(a.data == b.data);
    // and against the oracle, which treats it as plain grouped convolution
    Tensor ref = conv2d_reference(x, w, nullptr, 1, 1, 6, Padding::Same);
    REQUIRE(max_abs_diff(a, ref) <= 1e-5f);
}

TEST_CASE("conv2d rejects bad shapes") {
    Tensor x(1, 3, 5, 5, 1.0f);
    REQUIRE_THROWS_AS(conv2d(x, Tensor(4, 2, 3, 3)), std::invalid_argument);
    REQUIRE_THROWS_AS(conv2d(x, Tensor(4, 3, 2, 2)), std::invalid_argument);
    ConvOpts o;
    o.groups = 2;
    REQUIRE_THROWS_AS(conv2d(x, Tensor(4, 1, 3, 3), nullptr, o),
                      std::invalid_argument);
}

TEST_CASE("global average pooling") {
    SECTION("all ones") {
        Tensor x(1, 3, 7, 7, 1.0f);
        Tensor y = global_avg_pool(x);
        REQUIRE(y.h == 1);
        REQUIRE(y.w == 1);
        for (float v : y.data) REQUIRE(v == 1.0f);
    }
    SECTION("mean of 0..48") {
        Tensor x(1, 1, 7, 7);
        for (int i = 0; i < 49; ++i) x.data[static_cast<size_t>(i)] = static_cast<float>(i);
        REQUIRE(global_avg_pool(x).at(0, 0, 0, 0) == 24.0f);
    }
    SECTION("equals full-size windowed pool") {
        std::mt19937_64 rng(5);
        Tensor x = random_tensor(rng, 2, 3, 5, 9);
        Tensor a = global_avg_pool(x);
        Tensor b = avg_pool(x, 5, 9, 5, 9);
        REQUIRE(a.data == b.data);
    }
}

TEST_CASE("2x2 stride-2 pooling of a checkerboard averages to one half") {
    Tensor x(1, 1, 4, 4);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) x.at(0, 0, r, c) = static_cast<float>((r + c) % 2);
    Tensor y = avg_pool(x, 2, 2, 2, 2);
    REQUIRE(y.h == 2);
    REQUIRE(y.w == 2);
    for (float v : y.data) REQUIRE(v == 0.5f);
}

TEST_CASE("pooling kernel larger than the map is rejected") {
    Tensor x(1, 1, 4, 4, 1.0f);
    REQUIRE_THROWS_AS(avg_pool(x, 5, 5, 1, 1), std::invalid_argument);
}

TEST_CASE("batchnorm inference") {
    std::mt19937_64 rng(6);
    Tensor x = random_tensor(rng, 1, 3, 4, 4);
    SECTION("identity parameters") {
        Tensor y = batchnorm_inference(x, {1, 1, 1}, {0, 0, 0}, {0, 0, 0},
                                       {1, 1, 1}, 0.0f);
        REQUIRE(max_abs_diff(x, y) == 0.0f);
    }
    SECTION("scale 2 bias 1 on zeros") {
        Tensor z(1, 3, 4, 4, 0.0f);
        Tensor y = batchnorm_inference(z, {2, 2, 2}, {1, 1, 1}, {0, 0, 0},
                                       {1, 1, 1}, 0.0f);
        for (float v : y.data) REQUIRE(v == 1.0f);
    }
    SECTION("parameter length mismatch") {
        REQUIRE_THROWS_AS(batchnorm_inference(x, {1, 1}, {0, 0, 0}, {0, 0, 0},
                                              {1, 1, 1}, 0.0f),
                          std::invalid_argument);
    }
}

TEST_CASE("batchnorm folds into the preceding conv") {
    std::mt19937_64 rng(7);
    Tensor x = random_tensor(rng, 1, 3, 6, 6);
    Tensor w = random_tensor(rng, 4, 3, 3, 3);
    std::vector<float> gamma{1.2f, 0.8f, 1.5f, 0.6f}, beta{0.1f, -0.2f, 0.3f, 0.0f},
        mean{0.05f, -0.1f, 0.2f, 0.0f}, var{1.1f, 0.9f, 1.4f, 0.7f};
    const float eps = 1e-3f;
    Tensor unfolded = batchnorm_inference(conv2d(x, w, nullptr), gamma, beta, mean,
                                          var, eps);
    Tensor wf = w;
    std::vector<float> bf(4);
    for (int oc = 0; oc < 4; ++oc) {
        const float a = gamma[static_cast<size_t>(oc)] /
                        std::sqrt(var[static_cast<size_t>(oc)] + eps);
        for (int ic = 0; ic < 3; ++ic)
            for (int i = 0; i < 9; ++i)
                wf.channel(oc, ic)[i] = w.channel(oc, ic)[i] * a;
        bf[static_cast<size_t>(oc)] =
            beta[static_cast<size_t>(oc)] - a * mean[static_cast<size_t>(oc)];
    }
    Tensor folded = conv2d(x, wf, bf.data());
    REQUIRE(max_abs_diff(folded, unfolded) <= 1e-5f);
}

TEST_CASE("bilinear upsample") {
    SECTION("constant stays constant") {
        Tensor x(1, 2, 3, 3, 5.0f);
        Tensor y = bilinear_upsample(x, 7, 9);
        for (float v : y.data) REQUIRE(v == 5.0f);
    }
    SECTION("1x1 broadcasts its value") {
        Tensor x(1, 1, 1, 1, 3.25f);
        Tensor y = bilinear_upsample(x, 4, 6);
        for (float v : y.data) REQUIRE(v == 3.25f);
    }
    SECTION("2x2 to 4x4 half-pixel grid") {
        Tensor x(1, 1, 2, 2);
        x.at(0, 0, 0, 0) = 0;
        x.at(0, 0, 0, 1) = 1;
        x.at(0, 0, 1, 0) = 2;
        x.at(0, 0, 1, 1) = 3;
        Tensor y = bilinear_upsample(x, 4, 4);
        const float rv[4] = {0.0f, 0.5f, 1.5f, 2.0f};
        const float cv[4] = {0.0f, 0.25f, 0.75f, 1.0f};
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c)
                REQUIRE_THAT(y.at(0, 0, r, c),
                             Catch::Matchers::WithinAbs(rv[r] + cv[c], 1e-6));
    }
    SECTION("zero-size and shrinking outputs are rejected") {
        Tensor x(1, 1, 2, 2, 1.0f);
        REQUIRE_THROWS_AS(bilinear_upsample(x, 0, 4), std::invalid_argument);
        REQUIRE_THROWS_AS(bilinear_upsample(x, 1, 4), std::invalid_argument);
    }
}

TEST_CASE("element-wise helpers") {
    std::mt19937_64 rng(8);
    Tensor a = random_tensor(rng, 1, 3, 4, 4);
    SECTION("a + 0 = a") {
        Tensor z(1, 3, 4, 4, 0.0f);
        REQUIRE(max_abs_diff(add(a, z), a) == 0.0f);
    }
    SECTION("a * 1 = a, channel broadcast") {
        Tensor one(1, 3, 1, 1, 1.0f);
        REQUIRE(max_abs_diff(mul_channels(a, one), a) == 0.0f);
    }
    SECTION("channel gate scales whole planes") {
        Tensor gate(1, 3, 1, 1);
        gate.data = {0.0f, 1.0f, 2.0f};
        Tensor y = mul_channels(a, gate);
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 16; ++i)
                REQUIRE(y.channel(0, c)[i] == a.channel(0, c)[i] * gate.data[static_cast<size_t>(c)]);
    }
    SECTION("shape mismatches are rejected") {
        REQUIRE_THROWS_AS(add(a, Tensor(1, 3, 4, 5, 0.0f)), std::invalid_argument);
        REQUIRE_THROWS_AS(mul_channels(a, Tensor(1, 2, 1, 1, 1.0f)),
                          std::invalid_argument);
    }
}

TEST_CASE("kernels leave finite inputs finite") {
    std::mt19937_64 rng(9);
    Tensor x = random_tensor(rng, 1, 4, 8, 8, -100.0f, 100.0f);
    Tensor w = random_tensor(rng, 8, 4, 3, 3, -2.0f, 2.0f);
    REQUIRE(conv2d(x, w, nullptr).all_finite());
    REQUIRE(global_avg_pool(x).all_finite());
    REQUIRE(bilinear_upsample(x, 16, 16).all_finite());
}

TEST_CASE("mac tally counts what the kernels execute") {
    std::mt19937_64 rng(10);
    Tensor x = random_tensor(rng, 1, 3, 5, 5);
    Tensor w = random_tensor(rng, 4, 3, 3, 3);
    MacTallyScope tally;
    conv2d(x, w, nullptr);       // 5*5*4*(9*3) = 2700
    global_avg_pool(x);          // 3*5*5 = 75
    REQUIRE(tally.macs() == 2700 + 75);
}
