#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <vector>

#include "gradcheck.hpp"
#include "miniweave/tensor.hpp"

using namespace miniweave;
using gradcheck::DTensor;
using gradcheck::check_gradients;

namespace {

DTensor drandn(Shape shape, Rng& rng, double stddev = 1.0) { return DTensor::randn(std::move(shape), rng, stddev); }

// inputs kept away from |x| < margin so abs is smooth at the probe points
DTensor drandn_away_from_zero(Shape shape, Rng& rng, double margin = 0.05) {
    DTensor t = drandn(std::move(shape), rng);
    for (int64_t i = 0; i < t.numel(); ++i) {
        double& v = t.data()[i];
        if (std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
    }
    return t;
}

}  // namespace

TEST_CASE("matmul forward cases") {
    // identity case
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor any = Tensor::from_data({2, 2}, {3.5f, -1, 2, 7});
    Tensor r = matmul(eye, any);
    for (int i = 0; i < 4; ++i) CHECK(r.data()[i] == any.data()[i]);

    // hand multiplication
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
    Tensor c = matmul(a, b);
    CHECK(c.at({0, 0}) == doctest::Approx(19));
    CHECK(c.at({0, 1}) == doctest::Approx(22));
    CHECK(c.at({1, 0}) == doctest::Approx(43));
    CHECK(c.at({1, 1}) == doctest::Approx(50));

    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 2, 3}), Tensor::zeros({3, 3, 4})), DimensionError);
}

TEST_CASE("matmul gradient equals ones x b-transpose") {
    // grad of sum(a@b) w.r.t. a is ones @ b^T, computed here by hand
    Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}).set_requires_grad(true);
    Tensor b = Tensor::from_data({3, 2}, {1, -2, 0.5f, 3, -1, 4});
    backward(sum_all(matmul(a, b)));
    // row j of expected grad: sum over columns of b row j
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j) {
            float expected = b.at({j, 0}) + b.at({j, 1});
            CHECK(a.grad()[static_cast<size_t>(i * 3 + j)] == doctest::Approx(expected));
        }
}

TEST_CASE("softmax forward cases") {
    Tensor s1 = softmax(Tensor::from_data({2}, {0, 0}), 0);
    CHECK(s1.data()[0] == doctest::Approx(0.5));
    CHECK(s1.data()[1] == doctest::Approx(0.5));

    // stability: max subtraction keeps huge logits finite
    Tensor s2 = softmax(Tensor::from_data({2}, {1000, 1000}), 0);
    CHECK(s2.data()[0] == doctest::Approx(0.5));
    CHECK(s2.all_finite());

    Tensor s3 = softmax(Tensor::from_data({2}, {0, std::log(3.0f)}), 0);
    CHECK(s3.data()[0] == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(s3.data()[1] == doctest::Approx(0.75).epsilon(1e-6));

    CHECK_THROWS_AS(softmax(Tensor::zeros({2, 2}), 2), DimensionError);
}

TEST_CASE("softmax rows sum to one and stay in [0,1]") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        int64_t rows = rng.uniform_int(1, 6), cols = rng.uniform_int(1, 30);
        Tensor x = Tensor::randn({rows, cols}, rng, 10.0f);
        int axis = static_cast<int>(rng.uniform_int(0, 1));
        Tensor y = softmax(x, axis);
        int64_t n_axis = x.size(axis);
        int64_t other = x.numel() / n_axis;
        for (int64_t r = 0; r < other; ++r) {
            double sum = 0;
            for (int64_t k = 0; k < n_axis; ++k) {
                float v = axis == 1 ? y.data()[r * n_axis + k] : y.data()[k * other + r];
                CHECK(v >= 0.0f);
                CHECK(v <= 1.0f);
                sum += v;
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("conv2d identity kernel and ramp oracle") {
    Rng rng(3);
    // 1x1 identity kernel leaves input unchanged
    Tensor x = Tensor::randn({1, 1, 5, 5}, rng);
    Tensor k1 = Tensor::from_data({1, 1, 1, 1}, {1});
    Tensor y = conv2d(x, k1, Tensor());
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);

    // 3x3 conv on a 4x4 ramp vs a naive nested-loop reference
    std::vector<float> ramp(16);
    for (int i = 0; i < 16; ++i) ramp[static_cast<size_t>(i)] = static_cast<float>(i);
    Tensor xr = Tensor::from_data({1, 1, 4, 4}, ramp);
    Tensor k = Tensor::randn({1, 1, 3, 3}, rng);
    for (int64_t pad : {0, 1}) {
        Tensor out = conv2d(xr, k, Tensor(), 1, pad);
        int64_t osz = 4 + 2 * pad - 3 + 1;
        REQUIRE(out.size(2) == osz);
        for (int64_t oy = 0; oy < osz; ++oy)
            for (int64_t ox = 0; ox < osz; ++ox) {
                double acc = 0;
                for (int64_t ky = 0; ky < 3; ++ky)
                    for (int64_t kx = 0; kx < 3; ++kx) {
                        int64_t iy = oy + ky - pad, ix = ox + kx - pad;
                        if (iy >= 0 && iy < 4 && ix >= 0 && ix < 4)
                            acc += static_cast<double>(ramp[static_cast<size_t>(iy * 4 + ix)]) *
                                   k.data()[ky * 3 + kx];
                    }
                CHECK(out.at({0, 0, oy, ox}) == doctest::Approx(acc).epsilon(1e-5));
            }
    }

    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), Tensor()), DimensionError);
}

TEST_CASE("mse of identical tensors is zero with zero gradient") {
    Rng rng(5);
    Tensor x = Tensor::randn({3, 4}, rng).set_requires_grad(true);
    Tensor y = mse(x, x.detach());
    CHECK(y.item() == 0.0f);
    backward(y);
    for (float g : x.grad()) CHECK(g == 0.0f);
}

TEST_CASE("backward contract") {
    Rng rng(7);
    Tensor x = Tensor::randn({2, 2}, rng).set_requires_grad(true);
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(backward(y), ContractError);  // non-scalar loss

    // accumulation across backward calls on a retained graph
    Tensor loss = sum_all(mul(x, x));
    backward(loss, /*retain_graph=*/true);
    std::vector<float> first = x.grad();
    backward(loss, /*retain_graph=*/true);
    for (size_t i = 0; i < first.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(2 * first[i]));

    // once freed, the graph no longer propagates
    x.zero_grad();
    Tensor loss2 = sum_all(mul(x, x));
    backward(loss2);
    std::vector<float> g1 = x.grad();
    backward(loss2);  // graph freed; leaf grads unchanged
    for (size_t i = 0; i < g1.size(); ++i) CHECK(x.grad()[i] == g1[i]);
}

TEST_CASE("no graph is built when nothing requires grad") {
    Rng rng(9);
    Tensor a = Tensor::randn({4, 4}, rng);
    Tensor b = Tensor::randn({4, 4}, rng);
    Tensor y = matmul(silu(a), b);
    CHECK(y.st->node == nullptr);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("finite checks flag") {
    finite_checks() = true;
    Tensor bad = Tensor::from_data({2}, {1.0f, std::numeric_limits<float>::infinity()});
    CHECK_THROWS_AS(scale(bad, 1.0f), NumericError);
    finite_checks() = false;
    CHECK_NOTHROW(scale(bad, 1.0f));
}

TEST_CASE("graph replay determinism") {
    auto run = [] {
        Rng rng(1234);
        Tensor x = Tensor::randn({2, 8, 6, 6}, rng);
        Tensor w = Tensor::randn({4, 8, 3, 3}, rng, 0.2f);
        Tensor g = Tensor::full({4}, 1.0f);
        Tensor b = Tensor::zeros({4});
        Tensor h = group_norm(conv2d(x, w, Tensor(), 1, 1), 2, g, b);
        return softmax(reshape(silu(h), {2, 4 * 36}), 1);
    };
    Tensor r1 = run(), r2 = run();
    REQUIRE(r1.numel() == r2.numel());
    CHECK(std::memcmp(r1.data(), r2.data(), sizeof(float) * static_cast<size_t>(r1.numel())) == 0);
}

TEST_CASE("dropout mask consistency") {
    Rng rng(21);
    Tensor x = Tensor::full({1000}, 1.0f).set_requires_grad(true);
    Tensor y = dropout(x, 0.25, rng, true);
    backward(sum_all(y), true);
    int64_t kept = 0;
    for (int64_t i = 0; i < y.numel(); ++i) {
        if (y.data()[i] != 0.0f) {
            ++kept;
            CHECK(y.data()[i] == doctest::Approx(1.0f / 0.75f));
        }
        // grad mirrors the forward mask exactly
        CHECK(x.grad()[static_cast<size_t>(i)] == y.data()[i]);
    }
    CHECK(kept > 650);
    CHECK(kept < 850);

    // eval mode is the identity
    Tensor z = dropout(x, 0.25, rng, false);
    for (int64_t i = 0; i < z.numel(); ++i) CHECK(z.data()[i] == 1.0f);
    CHECK_THROWS_AS(dropout(x, 1.0, rng, true), ConfigError);
}

TEST_CASE("shape op errors") {
    CHECK_THROWS_AS(reshape(Tensor::zeros({2, 3}), {4, 2}), DimensionError);
    CHECK_THROWS_AS(slice(Tensor::zeros({2, 3}), 1, 2, 2), DimensionError);
    CHECK_THROWS_AS(concat<float>({Tensor::zeros({2, 3}), Tensor::zeros({2, 4})}, 0), DimensionError);
    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), DimensionError);
    CHECK_THROWS_AS(group_norm(Tensor::zeros({1, 6, 2, 2}), 4, Tensor::zeros({6}), Tensor::zeros({6})),
                    DimensionError);
    CHECK_THROWS_AS(embedding_rows(Tensor::zeros({4, 2}), {5}), DimensionError);
}

TEST_CASE("finite differences match autodiff for every op") {
    Rng rng(42);

    check_gradients("add", [](const auto& v) { return sum_all(mul(add(v[0], v[1]), v[2])); },
                    {drandn({3, 4}, rng), drandn({3, 4}, rng), drandn({3, 4}, rng)});
    check_gradients("sub", [](const auto& v) { return sum_all(mul(sub(v[0], v[1]), v[2])); },
                    {drandn({3, 4}, rng), drandn({3, 4}, rng), drandn({3, 4}, rng)});
    check_gradients("mul-diamond", [](const auto& v) { return sum_all(add(mul(v[0], v[0]), v[0])); },
                    {drandn({5}, rng)});
    check_gradients("scale+add_scalar",
                    [](const auto& v) { return mean_all(add_scalar(scale(v[0], 2.5), -0.75)); },
                    {drandn({2, 3}, rng)});
    check_gradients("abs", [](const auto& v) { return sum_all(abs_t(v[0])); },
                    {drandn_away_from_zero({4, 3}, rng)});
    check_gradients("silu", [](const auto& v) { return sum_all(mul(silu(v[0]), v[1])); },
                    {drandn({3, 5}, rng), drandn({3, 5}, rng)});
    check_gradients("add_rowvec", [](const auto& v) { return sum_all(mul(add_rowvec(v[0], v[1]), v[2])); },
                    {drandn({4, 3}, rng), drandn({3}, rng), drandn({4, 3}, rng)});
    check_gradients("mean_all", [](const auto& v) { return mean_all(mul(v[0], v[0])); }, {drandn({7}, rng)});
    check_gradients("sum_axis", [](const auto& v) { return sum_all(mul(sum_axis(v[0], 1), v[1])); },
                    {drandn({2, 3, 4}, rng), drandn({2, 4}, rng)});
    check_gradients("mse", [](const auto& v) { return mse(v[0], v[1]); },
                    {drandn({3, 4}, rng), drandn({3, 4}, rng)});
    check_gradients("reshape", [](const auto& v) { return sum_all(mul(reshape(v[0], {6, 2}), v[1])); },
                    {drandn({3, 4}, rng), drandn({6, 2}, rng)});
    check_gradients("permute", [](const auto& v) { return sum_all(mul(permute(v[0], {2, 0, 1}), v[1])); },
                    {drandn({2, 3, 4}, rng), drandn({4, 2, 3}, rng)});
    check_gradients("slice", [](const auto& v) { return sum_all(mul(slice(v[0], 1, 1, 2), v[1])); },
                    {drandn({2, 4, 3}, rng), drandn({2, 2, 3}, rng)});
    check_gradients("concat",
                    [](const auto& v) {
                        return sum_all(mul(concat<double>({v[0], v[1]}, 1), v[2]));
                    },
                    {drandn({2, 2, 3}, rng), drandn({2, 3, 3}, rng), drandn({2, 5, 3}, rng)});
    check_gradients("matmul", [](const auto& v) { return sum_all(mul(matmul(v[0], v[1]), v[2])); },
                    {drandn({3, 4}, rng), drandn({4, 2}, rng), drandn({3, 2}, rng)});
    check_gradients("matmul-batched", [](const auto& v) { return sum_all(mul(matmul(v[0], v[1]), v[2])); },
                    {drandn({2, 3, 4}, rng), drandn({2, 4, 2}, rng), drandn({2, 3, 2}, rng)});
    check_gradients("matmul-shared-rhs", [](const auto& v) { return sum_all(mul(matmul(v[0], v[1]), v[2])); },
                    {drandn({2, 3, 4}, rng), drandn({4, 2}, rng), drandn({2, 3, 2}, rng)});
    check_gradients("matmul-shared-lhs", [](const auto& v) { return sum_all(mul(matmul(v[0], v[1]), v[2])); },
                    {drandn({3, 4}, rng), drandn({2, 4, 2}, rng), drandn({2, 3, 2}, rng)});
    check_gradients("matmul_nt", [](const auto& v) { return sum_all(mul(matmul_nt(v[0], v[1]), v[2])); },
                    {drandn({3, 4}, rng), drandn({2, 4}, rng), drandn({3, 2}, rng)});
    check_gradients("matmul_nt-batched", [](const auto& v) { return sum_all(mul(matmul_nt(v[0], v[1]), v[2])); },
                    {drandn({2, 3, 4}, rng), drandn({2, 5, 4}, rng), drandn({2, 3, 5}, rng)});
    check_gradients("matmul_nt-shared-rhs", [](const auto& v) { return sum_all(mul(matmul_nt(v[0], v[1]), v[2])); },
                    {drandn({2, 3, 4}, rng), drandn({5, 4}, rng), drandn({2, 3, 5}, rng)});
    check_gradients("add_channel_bias", [](const auto& v) { return sum_all(mul(add_channel_bias(v[0], v[1]), v[2])); },
                    {drandn({2, 3, 2, 2}, rng), drandn({3}, rng), drandn({2, 3, 2, 2}, rng)});
    check_gradients("softmax", [](const auto& v) { return sum_all(mul(softmax(v[0], 1), v[1])); },
                    {drandn({3, 5}, rng), drandn({3, 5}, rng)});
    check_gradients("softmax-mid-axis", [](const auto& v) { return sum_all(mul(softmax(v[0], 1), v[1])); },
                    {drandn({2, 4, 3}, rng), drandn({2, 4, 3}, rng)});
    check_gradients("conv2d",
                    [](const auto& v) { return sum_all(mul(conv2d(v[0], v[1], v[2], 2, 1), v[3])); },
                    {drandn({2, 3, 5, 5}, rng), drandn({4, 3, 3, 3}, rng), drandn({4}, rng),
                     drandn({2, 4, 3, 3}, rng)});
    check_gradients("conv1d_temporal",
                    [](const auto& v) { return sum_all(mul(conv1d_temporal(v[0], v[1], v[2]), v[3])); },
                    {drandn({4, 3, 2, 2}, rng), drandn({5, 3, 3}, rng), drandn({5}, rng),
                     drandn({4, 5, 2, 2}, rng)});
    check_gradients("group_norm",
                    [](const auto& v) { return sum_all(mul(group_norm(v[0], 2, v[1], v[2]), v[3])); },
                    {drandn({2, 4, 3, 3}, rng), drandn({4}, rng), drandn({4}, rng), drandn({2, 4, 3, 3}, rng)},
                    1e-5, 1e-4, 1e-6);
    check_gradients("upsample_nearest2x",
                    [](const auto& v) { return sum_all(mul(upsample_nearest2x(v[0]), v[1])); },
                    {drandn({1, 2, 3, 3}, rng), drandn({1, 2, 6, 6}, rng)});
    check_gradients("embedding_rows",
                    [](const auto& v) { return sum_all(mul(embedding_rows(v[0], {0, 2, 2, 1}), v[1])); },
                    {drandn({3, 4}, rng), drandn({4, 4}, rng)});
}
