#include "doctest.h"

#include <cmath>

#include "pstarc/tape.hpp"
#include "testing.hpp"

using namespace pstarc;
using pstarc::testing::GradCheck;
using pstarc::testing::max_rel_err;
using pstarc::testing::random_uniform;

TEST_SUITE_BEGIN("tape");

TEST_CASE("row softmax of a zero row is uniform") {
    Tape tape;
    const NodeId p = tape.row_softmax(tape.leaf(Matrix(1, 7)));
    for (std::size_t j = 0; j < 7; ++j)
        CHECK(tape.value(p)(0, j) == doctest::Approx(1.0 / 7.0).epsilon(1e-14));
}

TEST_CASE("softmax rows sum to one and entropies stay in range") {
    Rng rng(3);
    Tape tape;
    const NodeId p = tape.row_softmax(tape.leaf(Matrix::random_normal(9, 12, rng, 0.0, 3.0)));
    const Matrix& P = tape.value(p);
    for (std::size_t i = 0; i < P.rows(); ++i) {
        double s = 0.0, ent = 0.0;
        for (std::size_t j = 0; j < P.cols(); ++j) {
            s += P(i, j);
            ent -= P(i, j) * std::log(P(i, j));
        }
        CHECK(std::abs(s - 1.0) < 1e-12);
        CHECK(ent >= 0.0);
        CHECK(ent <= std::log(12.0) + 1e-12);
    }
}

TEST_CASE("relu backward gates on the input sign") {
    Tape tape;
    const NodeId x = tape.leaf(Matrix::from_rows({{-1.0, 1.0}}));
    const NodeId r = tape.relu(x);
    tape.backward(tape.mean(r));  // upstream gradient 1/2 per entry
    CHECK(tape.grad(x)(0, 0) == 0.0);
    CHECK(tape.grad(x)(0, 1) == doctest::Approx(0.5));
}

TEST_CASE("matmul gradient matches central finite differences") {
    Rng rng(17);
    GradCheck check;
    check.tol = 1e-6;
    const bool ok = check.run(
        {random_uniform(3, 4, rng), random_uniform(4, 2, rng)},
        [](Tape& t, const std::vector<NodeId>& in) { return t.matmul(in[0], in[1]); }, rng);
    CHECK_MESSAGE(ok, "worst rel err " << check.worst);
}

TEST_CASE("every op passes the finite-difference suite") {
    Rng rng(29);
    const auto run = [&](const char* name, std::vector<Matrix> inputs,
                         std::function<NodeId(Tape&, const std::vector<NodeId>&)> build) {
        GradCheck check;
        const bool ok = check.run(inputs, build, rng);
        CHECK_MESSAGE(ok, name << ": worst rel err " << check.worst);
    };

    run("matmul_nt", {random_uniform(3, 5, rng), random_uniform(4, 5, rng)},
        [](Tape& t, const std::vector<NodeId>& in) { return t.matmul_nt(in[0], in[1]); });
    run("add", {random_uniform(3, 4, rng), random_uniform(3, 4, rng)},
        [](Tape& t, const std::vector<NodeId>& in) { return t.add(in[0], in[1]); });
    run("scale", {random_uniform(3, 4, rng)},
        [](Tape& t, const std::vector<NodeId>& in) { return t.scale(in[0], -1.7); });
    run("elementwise_mul", {random_uniform(3, 4, rng), random_uniform(3, 4, rng)},
        [](Tape& t, const std::vector<NodeId>& in) { return t.elementwise_mul(in[0], in[1]); });
    run("add_bias", {random_uniform(3, 4, rng), random_uniform(1, 4, rng)},
        [](Tape& t, const std::vector<NodeId>& in) { return t.add_bias(in[0], in[1]); });
    run("scale_rows", {random_uniform(3, 4, rng), random_uniform(3, 1, rng, 0.2)},
        [](Tape& t, const std::vector<NodeId>& in) { return t.scale_rows(in[0], in[1]); });
    run("relu", {random_uniform(3, 4, rng, 0.1)},
        [](Tape& t, const std::vector<NodeId>& in) { return t.relu(in[0]); });
    run("tanh", {random_uniform(3, 4, rng)},
        [](Tape& t, const std::vector<NodeId>& in) { return t.tanh(in[0]); });
    run("row_softmax", {random_uniform(3, 5, rng)},
        [](Tape& t, const std::vector<NodeId>& in) { return t.row_softmax(in[0]); });
    run("log_eps", {random_uniform(3, 4, rng, 0.1)},
        [](Tape& t, const std::vector<NodeId>& in) {
            // relu keeps the argument nonnegative; eps=2 keeps it away from 0
            return t.log_eps(t.relu(in[0]), 2.0);
        });
    run("row_sum", {random_uniform(4, 3, rng)},
        [](Tape& t, const std::vector<NodeId>& in) { return t.row_sum(in[0]); });
    run("col_mean", {random_uniform(4, 3, rng)},
        [](Tape& t, const std::vector<NodeId>& in) { return t.col_mean(in[0]); });
    run("mean", {random_uniform(4, 3, rng)},
        [](Tape& t, const std::vector<NodeId>& in) { return t.mean(in[0]); });
    run("row_l2_normalize", {random_uniform(4, 3, rng, 0.3)},
        [](Tape& t, const std::vector<NodeId>& in) { return t.row_l2_normalize(in[0]); });
}

TEST_CASE("batch_norm gradients (train and eval) match finite differences") {
    Rng rng(31);
    BnState reference;
    reference.running_mean = random_uniform(1, 4, rng);
    reference.running_var = Matrix(1, 4, 1.3);

    for (const BnMode mode : {BnMode::train_frozen_stats, BnMode::eval}) {
        BnState state = reference;
        GradCheck check;
        const bool ok = check.run(
            {random_uniform(6, 4, rng), random_uniform(1, 4, rng, 0.2), random_uniform(1, 4, rng)},
            [&state, mode](Tape& t, const std::vector<NodeId>& in) {
                return t.batch_norm(in[0], in[1], in[2], state, mode);
            },
            rng);
        CHECK_MESSAGE(ok, (mode == BnMode::eval ? "eval" : "train")
                              << " mode: worst rel err " << check.worst);
    }
}

TEST_CASE("batch_norm train mode updates running stats, frozen/eval modes do not") {
    Rng rng(37);
    const Matrix X = random_uniform(8, 3, rng);
    BnState state;
    state.running_mean = Matrix(1, 3);
    state.running_var = Matrix(1, 3, 1.0);
    const BnState before = state;
    Tape tape;
    const NodeId gamma = tape.leaf(Matrix(1, 3, 1.0));
    const NodeId beta = tape.leaf(Matrix(1, 3));

    tape.batch_norm(tape.leaf(X), gamma, beta, state, BnMode::eval);
    CHECK(state.running_mean == before.running_mean);
    tape.batch_norm(tape.leaf(X), gamma, beta, state, BnMode::train_frozen_stats);
    CHECK(state.running_mean == before.running_mean);
    CHECK(state.running_var == before.running_var);

    tape.batch_norm(tape.leaf(X), gamma, beta, state, BnMode::train);
    CHECK(state.running_mean != before.running_mean);
    // EMA with momentum 0.1 toward the batch mean.
    double col0 = 0.0;
    for (std::size_t i = 0; i < X.rows(); ++i) col0 += X(i, 0);
    col0 /= static_cast<double>(X.rows());
    CHECK(state.running_mean(0, 0) == doctest::Approx(0.9 * 0.0 + 0.1 * col0));
}

TEST_CASE("backward twice without zeroing doubles gradients exactly") {
    Rng rng(41);
    Tape tape;
    const NodeId x = tape.leaf(random_uniform(3, 3, rng));
    const NodeId y = tape.leaf(random_uniform(3, 3, rng));
    const NodeId loss = tape.mean(tape.elementwise_mul(tape.matmul(x, y), tape.matmul(x, y)));
    tape.backward(loss);
    const Matrix once = tape.grad(x);
    tape.backward(loss);
    for (std::size_t i = 0; i < once.size(); ++i)
        CHECK(tape.grad(x).values()[i] == 2.0 * once.values()[i]);
}

TEST_CASE("backward rejects non-scalar roots") {
    Tape tape;
    const NodeId x = tape.leaf(Matrix(2, 2, 1.0));
    CHECK_THROWS_AS(tape.backward(x), ContractError);
}

TEST_CASE("shape mismatches raise dimension errors") {
    Tape tape;
    const NodeId a = tape.leaf(Matrix(2, 3));
    const NodeId b = tape.leaf(Matrix(2, 3));
    CHECK_THROWS_AS(tape.matmul(a, b), DimensionError);
    CHECK_THROWS_AS(tape.add_bias(a, b), DimensionError);
    CHECK_THROWS_AS(tape.scale_rows(a, b), DimensionError);
}

TEST_CASE("non-finite forward values raise numeric errors") {
    Tape tape;
    const NodeId x = tape.leaf(Matrix::from_rows({{-1.0, -2.0}}));
    // log(x + 0) of negative inputs is NaN
    CHECK_THROWS_AS(tape.log_eps(x, 0.0), NumericError);
}

TEST_CASE("finite_diff_grad on a quadratic is exact to truncation order") {
    const Matrix x = Matrix::from_rows({{1.0, -2.0, 0.5}});
    const Matrix g = finite_diff_grad(
        [](const Matrix& m) {
            double s = 0.0;
            for (double v : m.values()) s += v * v;
            return s;
        },
        x, 1e-5);
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(g.values()[i] == doctest::Approx(2.0 * x.values()[i]).epsilon(1e-9));
}

TEST_SUITE_END();
