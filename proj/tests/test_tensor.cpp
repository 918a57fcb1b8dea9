#include <doctest.h>

#include <cmath>
#include <numeric>

#include "support.hpp"
#include "xrc/tensor.hpp"

using namespace xrc;

namespace {

Tensor param(std::vector<std::size_t> shape, std::vector<double> v, const std::string& name = "p") {
    return Tensor::parameter(std::move(shape), std::move(v), name);
}

Tensor random_param(RandomStream& rng, std::size_t r, std::size_t c, const std::string& name) {
    return param({r, c}, test::random_values(rng, r * c), name);
}

}  // namespace

TEST_CASE("softmax_rows worked values") {
    SUBCASE("uniform scores give uniform rows") {
        Tensor s = Tensor::constant(Matrix(4, 4, 0.0));
        Tensor p = softmax_rows(s, Tensor::constant(Matrix(4, 4, 0.0)));
        for (double v : p.value()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
    }
    SUBCASE("masked column gets no weight") {
        Matrix mask(4, 4, 0.0);
        for (std::size_t i = 0; i < 4; ++i) mask(i, 3) = kMaskValue;
        Tensor p = softmax_rows(Tensor::constant(Matrix(4, 4, 0.0)), Tensor::constant(mask));
        for (std::size_t i = 0; i < 4; ++i) {
            for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(p.at(i, j) - 1.0 / 3.0) < 1e-12);
            CHECK(p.at(i, 3) <= 1e-12);
        }
    }
    SUBCASE("two-entry row") {
        Tensor p = softmax_rows(Tensor::constant({1, 2}, {1.0, 2.0}));
        const double e = std::exp(1.0);
        CHECK(std::abs(p.at(0, 0) - 1.0 / (1.0 + e)) < 1e-15);
        CHECK(std::abs(p.at(0, 1) - e / (1.0 + e)) < 1e-15);
        CHECK(p.at(0, 0) == doctest::Approx(0.2689).epsilon(1e-4));
    }
}

TEST_CASE("softmax_rows rejects a fully masked row and names it") {
    Matrix mask(3, 2, 0.0);
    mask(2, 0) = mask(2, 1) = kMaskValue;
    try {
        softmax_rows(Tensor::constant(Matrix(3, 2, 0.0)), Tensor::constant(mask));
        FAIL("expected an error");
    } catch (const TensorError& e) {
        CHECK(std::string(e.what()).find("row 2") != std::string::npos);
    }
}

TEST_CASE("softmax_rows properties on random input") {
    RandomStream rng(11, 0);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + rng.below(8);
        Matrix s(n, n, test::random_values(rng, n * n, -20.0, 20.0));
        Matrix mask(n, n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 1; j < n; ++j)
                if (rng.uniform() < 0.3) mask(i, j) = kMaskValue;
        Tensor p = softmax_rows(Tensor::constant(s), Tensor::constant(mask));
        for (std::size_t i = 0; i < n; ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                row += p.at(i, j);
                if (mask(i, j) != 0.0) CHECK(p.at(i, j) <= 1e-12);
            }
            CHECK(std::abs(row - 1.0) <= 1e-9);
        }
        // raising one valid score strictly raises its weight
        const std::size_t i = rng.below(n);
        Matrix s2 = s;
        s2(i, 0) += 0.5;
        Tensor p2 = softmax_rows(Tensor::constant(s2), Tensor::constant(mask));
        if (p.at(i, 0) < 1.0) CHECK(p2.at(i, 0) > p.at(i, 0));
    }
}

TEST_CASE("backward of a product") {
    Tensor x = param({1, 1}, {2.0}, "x");
    Tensor y = param({1, 1}, {3.0}, "y");
    backward(mul(x, y));
    CHECK(x.grad()[0] == 3.0);
    CHECK(y.grad()[0] == 2.0);
}

TEST_CASE("cross-entropy gradient is softmax minus one-hot") {
    Tensor z = param({1, 3}, {0.3, -1.2, 2.0}, "z");
    backward(cross_entropy(z, 1));
    Tensor p = softmax_rows(Tensor::constant({1, 3}, {0.3, -1.2, 2.0}));
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(z.grad()[c] - (p.value()[c] - (c == 1 ? 1.0 : 0.0))) < 1e-15);
}

TEST_CASE("backward errors") {
    Tensor x = param({1, 2}, {1.0, 2.0}, "x");
    CHECK_THROWS_AS(backward(scale(x, 2.0)), TensorError);
    Tensor loss = sum(square(x));
    backward(loss);
    CHECK_THROWS_AS(backward(loss), TensorError);
    reset_graph(loss);
    CHECK_NOTHROW(backward(loss));
}

TEST_CASE("retained intermediates expose their gradient") {
    Tensor x = param({2, 2}, {1.0, 2.0, 3.0, 4.0}, "x");
    Tensor h = scale(x, 3.0);
    h.retain_grad();
    Tensor other = scale(x, 2.0);
    backward(sum(add(square(h), other)));
    const auto& g = h.grad();
    for (std::size_t i = 0; i < 4; ++i) CHECK(g[i] == doctest::Approx(2.0 * h.value()[i]));
    CHECK_THROWS_AS(other.grad(), TensorError);
}

TEST_CASE("kl_divergence worked values") {
    auto kl = [](std::vector<double> p, std::vector<double> q) {
        const std::size_t np = p.size(), nq = q.size();
        return kl_divergence(Tensor::constant({1, np}, p), Tensor::constant({1, nq}, q)).item();
    };
    CHECK(kl({0.3, 0.7}, {0.3, 0.7}) == 0.0);
    const double expected = 0.9 * std::log(0.9 / 0.5) + 0.1 * std::log(0.1 / 0.5);
    CHECK(std::abs(kl({0.9, 0.1}, {0.5, 0.5}) - expected) < 1e-15);
    CHECK(kl({0.9, 0.1}, {0.5, 0.5}) == doctest::Approx(0.368).epsilon(1e-3));
    CHECK(std::abs(kl({1.0, 0.0}, {0.5, 0.5}) - std::log(2.0)) < 1e-15);
    CHECK_THROWS_AS(kl({0.5, 0.5}, {0.2, 0.3, 0.5}), TensorError);
    // q is clamped at 1e-12, so a zero in q stays finite
    CHECK(std::isfinite(kl({0.5, 0.5}, {1.0, 0.0})));
}

TEST_CASE("kl_divergence is nonnegative and zero only at p = q") {
    RandomStream rng(5, 0);
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 2 + rng.below(5);
        auto p = test::random_values(rng, n, 0.0, 1.0);
        auto q = test::random_values(rng, n, 0.0, 1.0);
        const double sp = std::accumulate(p.begin(), p.end(), 0.0), sq = std::accumulate(q.begin(), q.end(), 0.0);
        for (auto& v : p) v /= sp;
        for (auto& v : q) v /= sq;
        const double d = kl_divergence(Tensor::constant({1, n}, p), Tensor::constant({1, n}, q)).item();
        CHECK(d >= 0.0);
        CHECK(std::abs(kl_divergence(Tensor::constant({1, n}, p), Tensor::constant({1, n}, p)).item()) < 1e-15);
    }
}

TEST_CASE("relative error definition") {
    const std::vector<double> a{1.0, 2.0}, f{1.0, 2.0 + 1e-6};
    CHECK(relative_error(a, f) == doctest::Approx(1e-6 / (2.0 + 1e-6)));
    const std::vector<double> z{0.0}, tiny{1e-10};
    CHECK(relative_error(z, tiny) == doctest::Approx(1e-10 / 1e-8));
}

TEST_CASE("gradient_check on a linear map is exact to float noise") {
    RandomStream rng(3, 0);
    Tensor w = random_param(rng, 3, 2, "w");
    Tensor x = Tensor::constant(Matrix(1, 3, test::random_values(rng, 3)));
    GradReport r = gradient_check([&] { return sum(matmul(x, w)); }, {w});
    CHECK(r.max_rel_error <= 1e-10);
}

TEST_CASE("every differentiable op passes the finite-difference check at random points") {
    for (std::uint64_t point = 0; point < 10; ++point) {
        RandomStream rng(17, point);
        Tensor a = random_param(rng, 3, 4, "a");
        Tensor b = random_param(rng, 4, 3, "b");
        Tensor c = random_param(rng, 3, 4, "c");
        Tensor bias = random_param(rng, 1, 4, "bias");
        Tensor gain = param({1, 4}, test::random_values(rng, 4, 0.5, 1.5), "gain");
        Tensor shift = random_param(rng, 1, 4, "shift");
        Tensor pq = param({1, 3}, test::random_values(rng, 3, -1.0, 1.0), "pq");
        const std::vector<std::size_t> ids{2, 0, 2, 1};
        const std::vector<std::size_t> rows{0, 2};
        const std::vector<double> factors = test::random_values(rng, 12);
        Matrix mask(3, 3, 0.0);
        mask(0, 2) = kMaskValue;

        auto build = [&] {
            Tensor m = matmul(a, b);                                // 3×3
            Tensor att = softmax_rows(m, Tensor::constant(mask));   // 3×3
            Tensor mbt = matmul_bt(a, c);                           // 3×3
            Tensor h = add_row_bias(matmul(att, c), bias);          // 3×4
            Tensor ln = layer_norm_rows(relu(sub(h, scale(a, 0.3))), gain, shift);
            Tensor mixed = mul(ln, mul_constant(c, factors));
            Tensor cat = concat_cols({slice_cols(mixed, 0, 2), slice_cols(mbt, 1, 3)});
            Tensor g = gather_rows(cat, ids);
            Tensor st = stack_rows({select_row(g, 3), mean_of_rows(g, rows), head_rows(g, 1)});
            Tensor logits = slice_cols(st, 0, 3);
            Tensor ce = cross_entropy(select_row(add(logits, Tensor::constant(Matrix(3, 3, 0.1))), 1), 2);
            Tensor p = softmax_rows(pq);
            Tensor q = softmax_rows(select_row(m, 0));
            return add(add(ce, kl_divergence(p, q)), add(mean(square(st)), scale(sum(mbt), 0.01)));
        };
        GradReport r = gradient_check(build, {a, b, c, bias, gain, shift, pq});
        CHECK_MESSAGE(r.max_rel_error <= 1e-4, "point " << point << " worst " << r.worst_param);
    }
}

TEST_CASE("backward is linear in the loss") {
    RandomStream rng(23, 0);
    Tensor w = random_param(rng, 3, 3, "w");
    Tensor x = Tensor::constant(Matrix(2, 3, test::random_values(rng, 6)));
    auto l1 = [&] { return sum(square(matmul(x, w))); };
    auto l2 = [&] { return cross_entropy(select_row(matmul(x, w), 0), 1); };

    backward(l1());
    const auto g1 = w.grad();
    w.zero_grad();
    backward(l2());
    const auto g2 = w.grad();
    w.zero_grad();
    backward(add(l1(), l2()));
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(std::abs(w.grad()[i] - (g1[i] + g2[i])) <= 1e-12);
}

TEST_CASE("gradient_check corrupt hook is detected") {
    RandomStream rng(3, 0);
    Tensor w = random_param(rng, 2, 2, "w");
    GradCheckOptions opts;
    opts.corrupt_param = "w";
    opts.corrupt_offset = 1e-3;
    GradReport r = gradient_check([&] { return sum(square(w)); }, {w}, opts);
    CHECK_FALSE(r.passed());
    CHECK(r.worst_param == "w");
}

TEST_CASE("shape checks") {
    Tensor a = Tensor::constant(Matrix(2, 3));
    Tensor b = Tensor::constant(Matrix(2, 3));
    CHECK_THROWS_AS(matmul(a, b), TensorError);
    CHECK_THROWS_AS(add(a, Tensor::constant(Matrix(3, 2))), TensorError);
    CHECK_THROWS_AS(Tensor::constant({2, 2}, {1.0}), TensorError);
}
