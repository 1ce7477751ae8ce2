#include "pstarc/optim.hpp"

#include <cmath>

namespace pstarc {

void adam_step(Matrix& param, const Matrix& grad, AdamState& state) {
    check_same_shape(param, grad, "adam_step");
    check_same_shape(param, state.m, "adam_step (state m)");
    check_same_shape(param, state.v, "adam_step (state v)");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad.values()[i];
        double& m = state.m.values()[i];
        double& v = state.v.values()[i];
        m = state.beta1 * m + (1.0 - state.beta1) * g;
        v = state.beta2 * v + (1.0 - state.beta2) * g * g;
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        param.values()[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
}

void sgd_nesterov_step(Matrix& param, const Matrix& grad, SgdMomentumState& state) {
    check_same_shape(param, grad, "sgd_nesterov_step");
    check_same_shape(param, state.velocity, "sgd_nesterov_step (velocity)");
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad.values()[i];
        double& buf = state.velocity.values()[i];
        buf = state.momentum * buf + g;
        const double step = state.nesterov ? g + state.momentum * buf : buf;
        param.values()[i] -= state.lr * step;
    }
}

}  // namespace pstarc
