#include "doctest.h"

#include <cmath>

#include "pstarc/optim.hpp"
#include "testing.hpp"

using namespace pstarc;

TEST_SUITE_BEGIN("optim");

TEST_CASE("adam first step moves by about lr in the gradient sign direction") {
    Matrix p = Matrix::from_rows({{1.0, -2.0, 3.0}});
    const Matrix g = Matrix::from_rows({{0.4, -0.7, 2.0}});
    AdamState state(1, 3, 0.01);
    const Matrix before = p;
    adam_step(p, g, state);
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double delta = p.values()[i] - before.values()[i];
        const double sign = g.values()[i] > 0 ? 1.0 : -1.0;
        CHECK(delta == doctest::Approx(-0.01 * sign).epsilon(1e-6));
    }
    CHECK(state.t == 1);
}

TEST_CASE("adam with zero gradient leaves parameters unchanged") {
    Matrix p = Matrix::from_rows({{1.5, -0.5}});
    const Matrix before = p;
    AdamState state(1, 2, 0.01);
    adam_step(p, Matrix(1, 2), state);
    CHECK(p == before);
}

TEST_CASE("adam on f(x)=x^2 shrinks |x| over 100 steps, matching the scalar recursion") {
    // Oracle: run the update recursion on plain doubles.
    double ox = 1.0, om = 0.0, ov = 0.0;
    const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    for (int t = 1; t <= 100; ++t) {
        const double g = 2.0 * ox;
        om = b1 * om + (1 - b1) * g;
        ov = b2 * ov + (1 - b2) * g * g;
        const double mhat = om / (1 - std::pow(b1, t));
        const double vhat = ov / (1 - std::pow(b2, t));
        ox -= lr * mhat / (std::sqrt(vhat) + eps);
    }

    Matrix x = Matrix::from_rows({{1.0}});
    AdamState state(1, 1, lr);
    for (int t = 0; t < 100; ++t) {
        const Matrix g = Matrix::from_rows({{2.0 * x(0, 0)}});
        adam_step(x, g, state);
    }
    CHECK(std::abs(x(0, 0)) < 1.0);
    CHECK(x(0, 0) == doctest::Approx(ox).epsilon(1e-12));
}

TEST_CASE("nesterov first step is -lr*(1+mu)*g") {
    Matrix p = Matrix::from_rows({{0.0, 0.0}});
    const Matrix g = Matrix::from_rows({{1.0, -2.0}});
    SgdMomentumState state(1, 2, 0.1, 0.9, true);
    sgd_nesterov_step(p, g, state);
    CHECK(p(0, 0) == doctest::Approx(-0.1 * 1.9 * 1.0));
    CHECK(p(0, 1) == doctest::Approx(-0.1 * 1.9 * -2.0));
}

TEST_CASE("zero momentum reduces to plain sgd") {
    Matrix p = Matrix::from_rows({{1.0}});
    SgdMomentumState state(1, 1, 0.5, 0.0, true);
    sgd_nesterov_step(p, Matrix::from_rows({{2.0}}), state);
    CHECK(p(0, 0) == doctest::Approx(1.0 - 0.5 * 2.0));
}

TEST_CASE("two nesterov steps on constant gradient displace by 1.9 + 2.71") {
    Matrix p = Matrix::from_rows({{0.0}});
    const Matrix g = Matrix::from_rows({{1.0}});
    SgdMomentumState state(1, 1, 1.0, 0.9, true);
    sgd_nesterov_step(p, g, state);
    CHECK(p(0, 0) == doctest::Approx(-1.9));
    sgd_nesterov_step(p, g, state);
    CHECK(p(0, 0) == doctest::Approx(-(1.9 + 2.71)));
}

TEST_CASE("optimizer steps are deterministic functions of param, grad and state") {
    Rng rng(7);
    const Matrix g = pstarc::testing::random_uniform(2, 3, rng);
    Matrix p1 = pstarc::testing::random_uniform(2, 3, rng);
    Matrix p2 = p1;
    AdamState s1(2, 3, 0.01), s2(2, 3, 0.01);
    for (int i = 0; i < 5; ++i) {
        adam_step(p1, g, s1);
        adam_step(p2, g, s2);
    }
    CHECK(p1 == p2);

    SgdMomentumState m1(2, 3, 0.1), m2(2, 3, 0.1);
    for (int i = 0; i < 5; ++i) {
        sgd_nesterov_step(p1, g, m1);
        sgd_nesterov_step(p2, g, m2);
    }
    CHECK(p1 == p2);
}

TEST_CASE("mismatched shapes are rejected") {
    Matrix p(2, 2);
    AdamState state(2, 3, 0.01);
    CHECK_THROWS_AS(adam_step(p, Matrix(2, 2), state), DimensionError);
    CHECK_THROWS_AS(finite_diff_grad([](const Matrix&) { return 0.0; }, p, 0.0), ContractError);
}

TEST_SUITE_END();
