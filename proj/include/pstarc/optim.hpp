#pragma once

#include "pstarc/matrix.hpp"

namespace pstarc {

// Adam with bias correction. Defaults follow the usual framework values;
// only the learning rate is task-specific.
struct AdamState {
    Matrix m;  // first moment
    Matrix v;  // second moment
    long long t = 0;
    double lr = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    AdamState() = default;
    AdamState(std::size_t rows, std::size_t cols, double lr_)
        : m(rows, cols), v(rows, cols), lr(lr_) {}
};

// SGD with Nesterov momentum in the common framework convention:
//   buf <- mu * buf + g
//   p   <- p - lr * (g + mu * buf)     (nesterov)
//   p   <- p - lr * buf                (plain momentum)
struct SgdMomentumState {
    Matrix velocity;
    double lr = 5e-4;
    double momentum = 0.9;
    bool nesterov = true;

    SgdMomentumState() = default;
    SgdMomentumState(std::size_t rows, std::size_t cols, double lr_, double momentum_ = 0.9,
                     bool nesterov_ = true)
        : velocity(rows, cols), lr(lr_), momentum(momentum_), nesterov(nesterov_) {}
};

void adam_step(Matrix& param, const Matrix& grad, AdamState& state);
void sgd_nesterov_step(Matrix& param, const Matrix& grad, SgdMomentumState& state);

// Central finite differences (f(x + h e_i) - f(x - h e_i)) / (2h), the
// gradient oracle used by the test suites.
template <typename F>
Matrix finite_diff_grad(F&& f, const Matrix& x, double h) {
    if (!(h > 0.0)) throw ContractError("finite_diff_grad: h must be > 0");
    Matrix g(x.rows(), x.cols());
    Matrix probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe.values()[i];
        probe.values()[i] = orig + h;
        const double fp = f(probe);
        probe.values()[i] = orig - h;
        const double fm = f(probe);
        probe.values()[i] = orig;
        g.values()[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

}  // namespace pstarc
