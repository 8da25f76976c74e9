// Tensor and autograd: finite-difference checks for every differentiable op.

#include <catch2/catch_amalgamated.hpp>

#include "costfilter/autograd.hpp"
#include "costfilter/nn.hpp"

using namespace costfilter;
namespace ca = costfilter::ag;

namespace {

// Central finite differences of f(x) against the analytic gradient of the
// scalar produced by f. Returns the max relative error over all entries.
double fd_check(Tensor<double> x0,
                const std::function<ca::Var<double>(const ca::Var<double>&)>& f,
                double h = 1e-5) {
    auto xv = ca::Var<double>::param(x0);
    auto loss = f(xv);
    loss.backward();
    Tensor<double> analytic = xv.grad();

    double max_rel = 0;
    for (std::size_t i = 0; i < x0.size(); ++i) {
        Tensor<double> xp = x0, xm = x0;
        xp[i] += h;
        xm[i] -= h;
        double lp = f(ca::Var<double>::constant(xp)).scalar();
        double lm = f(ca::Var<double>::constant(xm)).scalar();
        double fd = (lp - lm) / (2 * h);
        double denom = std::max({std::abs(fd), std::abs(analytic[i]), 1e-6});
        max_rel = std::max(max_rel, std::abs(fd - analytic[i]) / denom);
    }
    return max_rel;
}

}  // namespace

TEST_CASE("tensor basics") {
    Tensor<double> t(Shape{2, 3}, 1.5);
    REQUIRE(t.size() == 6);
    REQUIRE(t(1, 2) == 1.5);
    t(0, 1) = -2.0;
    REQUIRE(t.min_value() == -2.0);
    REQUIRE(t.all_finite());
    auto r = t.reshaped(Shape{3, 2});
    REQUIRE(r.dim(0) == 3);
    REQUIRE_THROWS_AS(t.reshaped(Shape{4}), std::invalid_argument);
}

TEST_CASE("tensor randn deterministic") {
    auto a = Tensor<double>::randn(Shape{10}, 42);
    auto b = Tensor<double>::randn(Shape{10}, 42);
    REQUIRE(a == b);
}

TEST_CASE("elementwise op gradients") {
    auto x = Tensor<double>::rand_uniform(Shape{2, 3, 4}, 7, 0.2, 0.9);
    auto y = ca::Var<double>::constant(Tensor<double>::rand_uniform(Shape{2, 3, 4}, 8, 0.3, 1.2));

    CHECK(fd_check(x, [&](auto v) { return ca::mean(ca::mul(v, y)); }) < 1e-6);
    CHECK(fd_check(x, [&](auto v) { return ca::mean(ca::div(v, y)); }) < 1e-6);
    CHECK(fd_check(x, [&](auto v) { return ca::mean(ca::div(y, v)); }) < 1e-6);
    CHECK(fd_check(x, [&](auto v) { return ca::mean(ca::sigmoid(v)); }) < 1e-6);
    CHECK(fd_check(x, [&](auto v) { return ca::mean(ca::log_clamped(v)); }) < 1e-6);
    CHECK(fd_check(x, [&](auto v) { return ca::mean(ca::pow_const(v, 2.7)); }) < 1e-6);
    CHECK(fd_check(x, [&](auto v) { return ca::sum(ca::square(v)); }) < 1e-6);
    CHECK(fd_check(x, [&](auto v) { return ca::mean(ca::leaky_relu(ca::add_scalar(v, -0.5))); }) <
          1e-5);
}

TEST_CASE("reduction and shape op gradients") {
    auto x = Tensor<double>::randn(Shape{2, 3, 2, 4, 4}, 11);
    CHECK(fd_check(x, [](auto v) { return ca::mean(v); }) < 1e-6);
    CHECK(fd_check(x, [](auto v) { return ca::mean(ca::reshape(v, Shape{6, 32})); }) < 1e-6);
    CHECK(fd_check(x, [](auto v) {
              return ca::mean(ca::square(ca::sum_per_sample(v)));
          }) < 1e-6);
    CHECK(fd_check(x, [](auto v) {
              return ca::mean(ca::square(ca::slice_channel(v, 1)));
          }) < 1e-6);
}

TEST_CASE("pooling gradients") {
    auto x = Tensor<double>::randn(Shape{2, 4, 2, 3, 3}, 13);
    CHECK(fd_check(x, [](auto v) { return ca::mean(ca::square(ca::global_avg_pool(v))); }) < 1e-6);
    CHECK(fd_check(x, [](auto v) { return ca::mean(ca::square(ca::global_max_pool(v))); }) < 1e-5);
    CHECK(fd_check(x, [](auto v) { return ca::mean(ca::square(ca::channel_mean(v))); }) < 1e-6);
    CHECK(fd_check(x, [](auto v) { return ca::mean(ca::square(ca::channel_max(v))); }) < 1e-5);
    CHECK(fd_check(x, [](auto v) { return ca::mean(ca::square(ca::channel_min(v))); }) < 1e-5);
}

TEST_CASE("concat and broadcast gradients") {
    auto x = Tensor<double>::randn(Shape{2, 3, 2, 3, 3}, 17);
    auto other = ca::Var<double>::constant(Tensor<double>::randn(Shape{2, 2, 2, 3, 3}, 18));
    CHECK(fd_check(x, [&](auto v) {
              return ca::mean(ca::square(ca::concat_channels<double>({v, other})));
          }) < 1e-6);
    auto wc = ca::Var<double>::constant(Tensor<double>::rand_uniform(Shape{2, 3, 1, 1, 1}, 19));
    CHECK(fd_check(x, [&](auto v) { return ca::mean(ca::square(ca::mul_broadcast(v, wc))); }) <
          1e-6);
    auto ws = ca::Var<double>::constant(Tensor<double>::rand_uniform(Shape{2, 1, 2, 3, 3}, 20));
    CHECK(fd_check(x, [&](auto v) { return ca::mean(ca::square(ca::mul_broadcast(v, ws))); }) <
          1e-6);
    // gradient w.r.t. the broadcast weight
    auto w0 = Tensor<double>::rand_uniform(Shape{2, 1, 2, 3, 3}, 21);
    auto xc = ca::Var<double>::constant(x);
    CHECK(fd_check(w0, [&](auto v) { return ca::mean(ca::square(ca::mul_broadcast(xc, v))); }) <
          1e-6);
}

TEST_CASE("conv3d matches direct computation and gradients") {
    auto x = Tensor<double>::randn(Shape{1, 2, 2, 4, 4}, 23);
    auto w = Tensor<double>::randn(Shape{3, 2, 3, 3, 3}, 24);
    auto b = Tensor<double>::randn(Shape{3}, 25);

    // forward oracle: explicit loops
    auto xv = ca::Var<double>::constant(x);
    auto wv = ca::Var<double>::constant(w);
    auto bv = ca::Var<double>::constant(b);
    auto y = ca::conv3d(xv, wv, bv, 1, 1, 1, 1, 1, 1);
    REQUIRE(y.value().shape() == Shape{1, 3, 2, 4, 4});
    double expect = b[0];
    for (std::size_t ci = 0; ci < 2; ++ci)
        for (int zd = -1; zd <= 1; ++zd)
            for (int zh = -1; zh <= 1; ++zh)
                for (int zw = -1; zw <= 1; ++zw) {
                    int d = 1 + zd, h = 2 + zh, ww = 2 + zw;
                    if (d < 0 || d >= 2 || h < 0 || h >= 4 || ww < 0 || ww >= 4) continue;
                    expect += x(0, ci, d, h, ww) *
                              w(0, ci, static_cast<std::size_t>(zd + 1),
                                static_cast<std::size_t>(zh + 1), static_cast<std::size_t>(zw + 1));
                }
    CHECK_THAT(y.value()(0, 0, 1, 2, 2), Catch::Matchers::WithinAbs(expect, 1e-12));

    auto wvp = ca::Var<double>::constant(w);
    auto bvp = ca::Var<double>::constant(b);
    CHECK(fd_check(x, [&](auto v) {
              return ca::mean(ca::square(ca::conv3d(v, wvp, bvp, 1, 2, 2, 1, 1, 1)));
          }) < 1e-5);
    auto xc = ca::Var<double>::constant(x);
    CHECK(fd_check(w, [&](auto v) {
              return ca::mean(ca::square(ca::conv3d(xc, v, bvp, 1, 1, 1, 1, 1, 1)));
          }) < 1e-5);
    CHECK(fd_check(b, [&](auto v) {
              return ca::mean(ca::square(ca::conv3d(xc, wvp, v, 1, 1, 1, 1, 1, 1)));
          }) < 1e-6);
}

TEST_CASE("linear gradients") {
    auto x = Tensor<double>::randn(Shape{3, 5}, 29);
    auto w = Tensor<double>::randn(Shape{4, 5}, 30);
    auto b = Tensor<double>::randn(Shape{4}, 31);
    auto wv = ca::Var<double>::constant(w);
    auto bv = ca::Var<double>::constant(b);
    CHECK(fd_check(x, [&](auto v) { return ca::mean(ca::square(ca::linear(v, wv, bv))); }) < 1e-6);
    auto xc = ca::Var<double>::constant(x);
    CHECK(fd_check(w, [&](auto v) { return ca::mean(ca::square(ca::linear(xc, v, bv))); }) < 1e-6);
}

TEST_CASE("resampling gradients") {
    auto x = Tensor<double>::randn(Shape{1, 2, 2, 3, 3}, 37);
    CHECK(fd_check(x, [](auto v) { return ca::mean(ca::square(ca::upsample2x_spatial(v))); }) <
          1e-6);
    CHECK(fd_check(x, [](auto v) {
              return ca::mean(ca::square(ca::resize_bilinear_spatial(v, 5, 2)));
          }) < 1e-6);
    CHECK(fd_check(x, [](auto v) {
              return ca::mean(ca::square(ca::resize_depth_nearest(v, 4)));
          }) < 1e-6);
}

TEST_CASE("softmax2 normalizes and differentiates") {
    auto x = Tensor<double>::randn(Shape{2, 2, 1, 3, 3}, 41);
    auto p = ca::softmax2_channels(ca::Var<double>::constant(x));
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t i = 0; i < 9; ++i) {
            double s = p.value()[(b * 2 + 0) * 9 + i] + p.value()[(b * 2 + 1) * 9 + i];
            CHECK_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-12));
        }
    CHECK(fd_check(x, [](auto v) {
              return ca::mean(ca::square(ca::softmax2_channels(v)));
          }) < 1e-5);
}

TEST_CASE("per-sample pow and cross-entropy gradients") {
    auto x = Tensor<double>::rand_uniform(Shape{3, 4, 4}, 43, 0.1, 0.9);
    std::vector<double> exps = {0.7, 2.0, 3.1};
    CHECK(fd_check(x, [&](auto v) { return ca::mean(ca::pow_per_sample(v, exps)); }) < 1e-6);

    auto logits = Tensor<double>::randn(Shape{3, 5}, 47);
    std::vector<std::size_t> labels = {0, 3, 4};
    CHECK(fd_check(logits, [&](auto v) { return ca::softmax_cross_entropy(v, labels); }) < 1e-6);
}

TEST_CASE("gaussian blur gradient is exact adjoint") {
    std::vector<double> k = {0.25, 0.5, 0.25};
    auto x = Tensor<double>::randn(Shape{1, 1, 1, 5, 5}, 53);
    CHECK(fd_check(x, [&](auto v) {
              return ca::mean(ca::square(ca::gaussian_blur_spatial(v, k)));
          }) < 1e-6);
}

TEST_CASE("backward accumulates through shared subexpressions") {
    auto x0 = Tensor<double>(Shape{1}, 2.0);
    auto x = ca::Var<double>::param(x0);
    auto y = ca::mul(x, x);           // x^2
    auto z = ca::add(y, ca::mul(y, x));  // x^2 + x^3
    z.backward();
    CHECK_THAT(x.grad()[0], Catch::Matchers::WithinAbs(2 * 2.0 + 3 * 4.0, 1e-12));
}
