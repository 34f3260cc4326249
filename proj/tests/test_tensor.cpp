#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "zsdfa/ops.hpp"
#include "zsdfa/rng.hpp"

using namespace zsdfa;

namespace {

Tensor<double> rand_tensor(Rng& rng, std::vector<int> shape, double lo = -1.0,
                           double hi = 1.0) {
    Tensor<double> t = Tensor<double>::zeros(std::move(shape));
    for (auto& v : t.raw()) v = rng.uniform(lo, hi);
    return t;
}

} // namespace

TEST_CASE("matmul fixtures") {
    auto i2 = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
    CHECK(matmul(i2, i2).data()[0] == 1.0);
    auto ai = matmul(a, i2);
    for (std::size_t i = 0; i < 4; ++i) CHECK(ai.data()[i] == a.data()[i]);

    auto row = Tensor<double>::from({1, 2}, {1, 2});
    auto col = Tensor<double>::from({2, 1}, {3, 4});
    CHECK(matmul(row, col).value() == doctest::Approx(11.0));

    auto bad = Tensor<double>::from({3, 2}, {1, 2, 3, 4, 5, 6});
    try {
        matmul(a, bad);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        // the error names both shapes
        CHECK(std::string(e.what()).find("[2x2]") != std::string::npos);
        CHECK(std::string(e.what()).find("[3x2]") != std::string::npos);
    }
}

TEST_CASE("matmul associativity within 1e-10") {
    Rng rng(99);
    for (int trial = 0; trial < 20; ++trial) {
        auto a = rand_tensor(rng, {4, 4});
        auto b = rand_tensor(rng, {4, 4});
        auto c = rand_tensor(rng, {4, 4});
        auto left = matmul(matmul(a, b), c);
        auto right = matmul(a, matmul(b, c));
        for (std::size_t i = 0; i < 16; ++i)
            CHECK(std::abs(left.data()[i] - right.data()[i]) < 1e-10);
    }
}

TEST_CASE("softmax rows") {
    auto sym = softmax_rows(Tensor<double>::from({1, 2}, {0, 0}));
    CHECK(sym.data()[0] == doctest::Approx(0.5));
    CHECK(sym.data()[1] == doctest::Approx(0.5));

    auto sat = softmax_rows(Tensor<double>::from({1, 2}, {1000, -1000}));
    CHECK(std::abs(sat.data()[0] - 1.0) < 1e-12);
    CHECK(std::abs(sat.data()[1]) < 1e-12);
    CHECK(std::isfinite(sat.data()[0]));

    auto thirds = softmax_rows(
        Tensor<double>::from({1, 3}, {std::log(1.0), std::log(2.0), std::log(3.0)}));
    CHECK(thirds.data()[0] == doctest::Approx(1.0 / 6).epsilon(1e-9));
    CHECK(thirds.data()[1] == doctest::Approx(2.0 / 6).epsilon(1e-9));
    CHECK(thirds.data()[2] == doctest::Approx(3.0 / 6).epsilon(1e-9));
}

TEST_CASE("softmax rows sum to one and stay positive") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        auto x = rand_tensor(rng, {5, 7}, -30, 30);
        auto y = softmax_rows(x);
        for (int i = 0; i < 5; ++i) {
            double s = 0;
            for (int j = 0; j < 7; ++j) {
                const double v = y.data()[static_cast<std::size_t>(i) * 7 + j];
                CHECK(v > 0.0);
                s += v;
            }
            CHECK(std::abs(s - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("conv2d fixtures") {
    auto sobel_x = Tensor<double>::from({1, 1, 3, 3}, {-1, 0, 1, -2, 0, 2, -1, 0, 1});

    auto constant = Tensor<double>::full({1, 5, 5}, 3.0);
    auto flat = conv2d(constant, sobel_x, 1);
    for (double v : flat.data()) CHECK(v == doctest::Approx(0.0));

    auto step = Tensor<double>::from({1, 3, 3}, {0, 0, 1, 0, 0, 1, 0, 0, 1});
    CHECK(conv2d(step, sobel_x, 1).value() == doctest::Approx(4.0));

    auto doubling = Tensor<double>::from({1, 1, 1, 1}, {2.0});
    auto x = Tensor<double>::from({1, 2, 2}, {1, 2, 3, 4});
    auto doubled = conv2d(x, doubling, 1);
    for (std::size_t i = 0; i < 4; ++i) CHECK(doubled.data()[i] == 2.0 * x.data()[i]);

    auto big = Tensor<double>::zeros({1, 1, 7, 7});
    CHECK_THROWS_AS(conv2d(x, big, 1), ShapeError);
}

TEST_CASE("layer_norm fixtures") {
    auto gamma = Tensor<double>::full({2}, 1.0);
    auto beta = Tensor<double>::zeros({2});

    auto constant = layer_norm(Tensor<double>::from({1, 2}, {4, 4}), gamma, beta);
    CHECK(constant.data()[0] == doctest::Approx(0.0));
    CHECK(constant.data()[1] == doctest::Approx(0.0));

    auto two = layer_norm(Tensor<double>::from({1, 2}, {1, 3}), gamma, beta);
    CHECK(two.data()[0] == doctest::Approx(-1.0).epsilon(1e-4));
    CHECK(two.data()[1] == doctest::Approx(1.0).epsilon(1e-4));

    auto affine_only = layer_norm(Tensor<double>::from({1, 2}, {1, 3}),
                                  Tensor<double>::zeros({2}), Tensor<double>::full({2}, 5.0));
    CHECK(affine_only.data()[0] == doctest::Approx(5.0));
    CHECK(affine_only.data()[1] == doctest::Approx(5.0));
}

TEST_CASE("backward basics") {
    SUBCASE("sum gives unit gradients") {
        auto x = Tensor<double>::from({3}, {1, 2, 3}).set_requires_grad();
        Tape<double> tape;
        tape.backward(sum(x));
        for (double g : x.grad()) CHECK(g == 1.0);
    }
    SUBCASE("sum of squares") {
        auto x = Tensor<double>::from({1}, {2}).set_requires_grad();
        Tape<double> tape;
        tape.backward(sum(mul(x, x)));
        CHECK(x.grad()[0] == doctest::Approx(4.0));
    }
    SUBCASE("leaf used twice doubles the gradient") {
        auto x = Tensor<double>::from({2}, {1, 5}).set_requires_grad();
        Tape<double> tape;
        tape.backward(sum(add(x, x)));
        CHECK(x.grad()[0] == 2.0);
        CHECK(x.grad()[1] == 2.0);
    }
    SUBCASE("non-scalar loss is rejected") {
        auto x = Tensor<double>::from({2}, {1, 2}).set_requires_grad();
        Tape<double> tape;
        auto y = add(x, x);
        CHECK_THROWS_AS(tape.backward(y), ContractError);
    }
    SUBCASE("consumed tape is rejected") {
        auto x = Tensor<double>::from({1}, {1}).set_requires_grad();
        Tape<double> tape;
        auto loss = sum(x);
        tape.backward(loss);
        CHECK_THROWS_AS(tape.backward(loss), ContractError);
        tape.reset();
        CHECK(tape.node_count() == 0);
    }
    SUBCASE("nested tapes are rejected") {
        Tape<double> outer;
        CHECK_THROWS_AS(Tape<double>{}, ContractError);
    }
}

TEST_CASE("DAG backward equals unrolled tree exactly") {
    // Integer-valued inputs keep every accumulation exact, so the comparison
    // can be bitwise.
    const std::vector<double> values = {1, 2, 3};
    auto dag_x = Tensor<double>::from({3}, values).set_requires_grad();
    {
        Tape<double> tape;
        auto u = mul(dag_x, dag_x);
        tape.backward(sum(add(u, u)));
    }

    std::vector<Tensor<double>> copies;
    for (int i = 0; i < 4; ++i)
        copies.push_back(Tensor<double>::from({3}, values).set_requires_grad());
    {
        Tape<double> tape;
        auto u1 = mul(copies[0], copies[1]);
        auto u2 = mul(copies[2], copies[3]);
        tape.backward(sum(add(u1, u2)));
    }
    for (int j = 0; j < 3; ++j) {
        double tree = 0;
        for (auto& c : copies) tree += c.grad()[j];
        CHECK(dag_x.grad()[j] == tree);
    }
}

TEST_CASE("finite difference self-tests") {
    auto sum_sq = [](const Tensor<double>& x) { return sum(mul(x, x)); };
    Rng rng(3);
    auto x = rand_tensor(rng, {4}, -2, 2);
    CHECK(finite_diff_check(sum_sq, x) < 1e-8);

    // constant function: both gradients are identically zero
    auto c = [](const Tensor<double>& x) { return scale(sum(scale(x, 0.0)), 1.0); };
    CHECK(finite_diff_check(c, x) == 0.0);

    auto softmax_ce = [](const Tensor<double>& x) {
        auto probs = softmax_rows(x);
        return neg(sum(log(col_slice(probs, 0, 1))));
    };
    auto logits = rand_tensor(rng, {3, 4}, -2, 2);
    CHECK(finite_diff_check(softmax_ce, logits) < 1e-6);
}

// Every registered op, checked at 5 seed-fixed random points each.
TEST_CASE("finite-difference sweep over the operator set") {
    Rng rng(20240601);
    auto check = [&rng](auto&& fn, std::vector<int> shape, double lo = -1.5,
                        double hi = 1.5) {
        for (int pt = 0; pt < 5; ++pt) {
            auto x = rand_tensor(rng, shape, lo, hi);
            CAPTURE(shape_str(shape));
            CHECK(finite_diff_check(fn, x) < 1e-6);
        }
    };

    auto other24 = Tensor<double>::from({2, 4}, {0.3, -0.2, 0.7, 1.1, -0.4, 0.9, 0.05, -1.2});
    check([&](const Tensor<double>& x) { return sum(add(x, other24)); }, {2, 4});
    check([&](const Tensor<double>& x) { return sum(sub(other24, x)); }, {2, 4});
    check([&](const Tensor<double>& x) { return sum(mul(x, other24)); }, {2, 4});
    check([](const Tensor<double>& x) { return sum(scale(x, -2.5)); }, {2, 4});
    check([](const Tensor<double>& x) { return sum(add_scalar(x, 0.7)); }, {2, 4});
    check([](const Tensor<double>& x) { return sum(gelu(x)); }, {2, 4});
    check([](const Tensor<double>& x) { return sum(sigmoid(x)); }, {2, 4});
    check([](const Tensor<double>& x) { return sum(exp(x)); }, {2, 4});
    check([](const Tensor<double>& x) { return sum(log(x)); }, {2, 4}, 0.2, 3.0);
    check([](const Tensor<double>& x) { return sum(sqrt(x)); }, {2, 4}, 0.2, 3.0);
    check([](const Tensor<double>& x) { return sum(reciprocal(x)); }, {2, 4}, 0.3, 3.0);
    check([](const Tensor<double>& x) { return sum(relu(x)); }, {2, 4});
    check([](const Tensor<double>& x) { return sum(clamp_min(x, 0.1)); }, {2, 4});
    check([](const Tensor<double>& x) { return sum(col_slice(softmax_rows(x), 0, 2)); },
          {3, 4});
    check([](const Tensor<double>& x) { return mean(x); }, {3, 4});
    check([](const Tensor<double>& x) { return sum(rowsum(x)); }, {3, 4});
    check([](const Tensor<double>& x) { return sum(mean_rows(x)); }, {3, 4});
    check([](const Tensor<double>& x) { return sum(transpose(x)); }, {3, 4});
    check([](const Tensor<double>& x) { return sum(reshape(x, {4, 3})); }, {3, 4});
    check([](const Tensor<double>& x) { return sum(row_slice(x, 1, 2)); }, {4, 3});
    check([](const Tensor<double>& x) { return sum(col_slice(x, 1, 2)); }, {3, 4});
    check([](const Tensor<double>& x) { return sum(diag(x)); }, {3, 3});
    check([](const Tensor<double>& x) { return sum(spatial_tokens(x)); }, {2, 3, 3});

    auto w42 = Tensor<double>::from({4, 2}, {0.2, -0.3, 0.5, 0.1, -0.6, 0.4, 0.9, -0.2});
    check([&](const Tensor<double>& x) { return sum(matmul(x, w42)); }, {3, 4});
    check([&](const Tensor<double>& x) { return sum(matmul_nt(x, transpose(w42))); }, {3, 4});
    check([&](const Tensor<double>& x) {
        auto left = Tensor<double>::from({2, 4}, {0.4, -0.8, 0.2, 1.0, 0.6, -0.1, 0.3, -0.5});
        return sum(matmul(left, x));
    }, {4, 4});

    auto kernel = Tensor<double>::from({1, 2, 2, 2}, {0.5, -0.3, 0.2, 0.8, -0.1, 0.4, 0.6, -0.7});
    check([&](const Tensor<double>& x) { return sum(conv2d(x, kernel, 1)); }, {2, 4, 4});
    check([&](const Tensor<double>& x) {
        auto img = Tensor<double>::from({2, 4, 4}, std::vector<double>(32, 0.25));
        return sum(conv2d(img, x, 2));
    }, {3, 2, 2, 2});
    check([&](const Tensor<double>& x) {
        return sum(channel_bias(Tensor<double>::full({3, 2, 2}, 0.5), x));
    }, {3});

    auto gamma = Tensor<double>::from({4}, {1.1, 0.9, 1.0, 1.2});
    auto beta = Tensor<double>::from({4}, {0.1, -0.2, 0.0, 0.3});
    check([&](const Tensor<double>& x) { return sum(layer_norm(x, gamma, beta)); }, {3, 4});
    check([&](const Tensor<double>& x) {
        return sum(layer_norm(other24, reshape(x, {4}), beta));
    }, {1, 4});
    check([&](const Tensor<double>& x) {
        return sum(layer_norm(other24, gamma, reshape(x, {4})));
    }, {1, 4});

    check([&](const Tensor<double>& x) { return sum(scale_rows(x, Tensor<double>::from({3, 1}, {0.5, -1.0, 2.0}))); }, {3, 4});
    check([&](const Tensor<double>& x) {
        return sum(scale_rows(other24, reshape(x, {2, 1})));
    }, {2, 1});
    check([&](const Tensor<double>& x) { return sum(add_rowvec(x, Tensor<double>::from({1, 4}, {0.1, 0.2, 0.3, 0.4}))); }, {3, 4});
    check([&](const Tensor<double>& x) {
        return sum(add_rowvec(other24, reshape(x, {1, 4})));
    }, {1, 4});
    check([&](const Tensor<double>& x) {
        return sum(mul_scalar_t(other24, reshape(x, {1})));
    }, {1});
    check([&](const Tensor<double>& x) { return sum(mul_scalar_t(x, Tensor<double>::scalar(1.3))); }, {2, 4});
    check([&](const Tensor<double>& x) {
        std::vector<int> ids = {2, 0, 2, 1};
        return sum(gather_rows(x, ids));
    }, {3, 4});
    check([&](const Tensor<double>& x) {
        std::vector<Tensor<double>> parts = {row_slice(x, 0, 1), row_slice(x, 1, 2)};
        return sum(concat_rows(parts));
    }, {3, 4});
    check([&](const Tensor<double>& x) {
        std::vector<Tensor<double>> parts = {col_slice(x, 0, 1), col_slice(x, 1, 3)};
        return sum(concat_cols(parts));
    }, {3, 4});
    check([&](const Tensor<double>& x) {
        std::vector<Tensor<double>> terms;
        for (int i = 0; i < x.dim(0); ++i)
            terms.push_back(reshape(rowsum(row_slice(x, i, 1)), {1}));
        return sum_scalars_sorted(terms);
    }, {4, 3});
}

TEST_CASE("detach cuts gradient flow") {
    auto x = Tensor<double>::from({2}, {1, 2}).set_requires_grad();
    Tape<double> tape;
    auto y = sum(mul(detach(x), x));
    tape.backward(y);
    CHECK(x.grad()[0] == 1.0);  // only the live branch contributes
    CHECK(x.grad()[1] == 2.0);
}

TEST_CASE("gather_rows rejects out-of-range ids") {
    auto table = Tensor<double>::zeros({3, 2});
    std::vector<int> bad = {0, 3};
    CHECK_THROWS_AS(gather_rows(table, bad), DataError);
}
