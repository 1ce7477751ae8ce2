#include "pstarc/tape.hpp"

#include <cmath>
#include <string>

#include "pstarc/kernels.hpp"

namespace pstarc {

namespace {
const kernels::Ops& kops() { return kernels::active_ops(); }
}  // namespace

NodeId Tape::push(TapeNode node, const char* op_name) {
    if (!node.value.all_finite())
        throw NumericError(std::string(op_name) + ": non-finite forward value");
    node.grad = Matrix::zeros(node.value.rows(), node.value.cols());
    nodes_.push_back(std::move(node));
    return nodes_.size() - 1;
}

NodeId Tape::leaf(Matrix value) {
    TapeNode n;
    n.op = OpKind::leaf;
    n.value = std::move(value);
    return push(std::move(n), "leaf");
}

NodeId Tape::matmul(NodeId a, NodeId b) {
    const Matrix& A = nodes_[a].value;
    const Matrix& B = nodes_[b].value;
    if (A.cols() != B.rows())
        throw DimensionError("matmul: " + A.shape_str() + " * " + B.shape_str());
    TapeNode n;
    n.op = OpKind::matmul;
    n.parents[0] = a;
    n.parents[1] = b;
    n.n_parents = 2;
    n.value = Matrix(A.rows(), B.cols());
    kernels::matmul_nn(n.value.data(), A.data(), B.data(), A.rows(), A.cols(), B.cols());
    return push(std::move(n), "matmul");
}

NodeId Tape::matmul_nt(NodeId a, NodeId b) {
    const Matrix& A = nodes_[a].value;
    const Matrix& B = nodes_[b].value;
    if (A.cols() != B.cols())
        throw DimensionError("matmul_nt: " + A.shape_str() + " * " + B.shape_str() + "^T");
    TapeNode n;
    n.op = OpKind::matmul_nt;
    n.parents[0] = a;
    n.parents[1] = b;
    n.n_parents = 2;
    n.value = Matrix(A.rows(), B.rows());
    kernels::matmul_nt(n.value.data(), A.data(), B.data(), A.rows(), A.cols(), B.rows());
    return push(std::move(n), "matmul_nt");
}

NodeId Tape::add(NodeId a, NodeId b) {
    const Matrix& A = nodes_[a].value;
    const Matrix& B = nodes_[b].value;
    check_same_shape(A, B, "add");
    TapeNode n;
    n.op = OpKind::add;
    n.parents[0] = a;
    n.parents[1] = b;
    n.n_parents = 2;
    n.value = Matrix(A.rows(), A.cols());
    kops().add(n.value.data(), A.data(), B.data(), A.size());
    return push(std::move(n), "add");
}

NodeId Tape::scale(NodeId a, double c) {
    const Matrix& A = nodes_[a].value;
    TapeNode n;
    n.op = OpKind::scale;
    n.parents[0] = a;
    n.n_parents = 1;
    n.scalar = c;
    n.value = Matrix(A.rows(), A.cols());
    kops().scale(n.value.data(), A.data(), c, A.size());
    return push(std::move(n), "scale");
}

NodeId Tape::elementwise_mul(NodeId a, NodeId b) {
    const Matrix& A = nodes_[a].value;
    const Matrix& B = nodes_[b].value;
    check_same_shape(A, B, "elementwise_mul");
    TapeNode n;
    n.op = OpKind::elementwise_mul;
    n.parents[0] = a;
    n.parents[1] = b;
    n.n_parents = 2;
    n.value = Matrix(A.rows(), A.cols());
    kops().mul(n.value.data(), A.data(), B.data(), A.size());
    return push(std::move(n), "elementwise_mul");
}

NodeId Tape::add_bias(NodeId x, NodeId bias) {
    const Matrix& X = nodes_[x].value;
    const Matrix& B = nodes_[bias].value;
    if (B.rows() != 1 || B.cols() != X.cols())
        throw DimensionError("add_bias: x " + X.shape_str() + ", bias " + B.shape_str());
    TapeNode n;
    n.op = OpKind::add_bias;
    n.parents[0] = x;
    n.parents[1] = bias;
    n.n_parents = 2;
    n.value = Matrix(X.rows(), X.cols());
    for (std::size_t i = 0; i < X.rows(); ++i)
        kops().add(n.value.row(i), X.row(i), B.data(), X.cols());
    return push(std::move(n), "add_bias");
}

NodeId Tape::scale_rows(NodeId x, NodeId s) {
    const Matrix& X = nodes_[x].value;
    const Matrix& S = nodes_[s].value;
    if (S.cols() != 1 || S.rows() != X.rows())
        throw DimensionError("scale_rows: x " + X.shape_str() + ", s " + S.shape_str());
    TapeNode n;
    n.op = OpKind::scale_rows;
    n.parents[0] = x;
    n.parents[1] = s;
    n.n_parents = 2;
    n.value = Matrix(X.rows(), X.cols());
    for (std::size_t i = 0; i < X.rows(); ++i)
        kops().scale(n.value.row(i), X.row(i), S(i, 0), X.cols());
    return push(std::move(n), "scale_rows");
}

NodeId Tape::relu(NodeId x) {
    const Matrix& X = nodes_[x].value;
    TapeNode n;
    n.op = OpKind::relu;
    n.parents[0] = x;
    n.n_parents = 1;
    n.value = Matrix(X.rows(), X.cols());
    for (std::size_t i = 0; i < X.size(); ++i)
        n.value.values()[i] = X.values()[i] > 0.0 ? X.values()[i] : 0.0;
    return push(std::move(n), "relu");
}

NodeId Tape::tanh(NodeId x) {
    const Matrix& X = nodes_[x].value;
    TapeNode n;
    n.op = OpKind::tanh_op;
    n.parents[0] = x;
    n.n_parents = 1;
    n.value = Matrix(X.rows(), X.cols());
    for (std::size_t i = 0; i < X.size(); ++i) n.value.values()[i] = std::tanh(X.values()[i]);
    return push(std::move(n), "tanh");
}

NodeId Tape::row_softmax(NodeId x) {
    const Matrix& X = nodes_[x].value;
    if (X.cols() == 0) throw DimensionError("row_softmax: zero-width input");
    TapeNode n;
    n.op = OpKind::row_softmax;
    n.parents[0] = x;
    n.n_parents = 1;
    n.value = Matrix(X.rows(), X.cols());
    for (std::size_t i = 0; i < X.rows(); ++i) {
        const double m = kops().max(X.row(i), X.cols());
        double* out = n.value.row(i);
        double z = 0.0;
        for (std::size_t j = 0; j < X.cols(); ++j) {
            out[j] = std::exp(X(i, j) - m);
            z += out[j];
        }
        kops().scale(out, out, 1.0 / z, X.cols());
    }
    return push(std::move(n), "row_softmax");
}

NodeId Tape::log_eps(NodeId x, double eps) {
    if (eps < 0.0) throw ContractError("log_eps: eps must be >= 0");
    const Matrix& X = nodes_[x].value;
    TapeNode n;
    n.op = OpKind::log_eps;
    n.parents[0] = x;
    n.n_parents = 1;
    n.scalar = eps;
    n.value = Matrix(X.rows(), X.cols());
    for (std::size_t i = 0; i < X.size(); ++i) n.value.values()[i] = std::log(X.values()[i] + eps);
    return push(std::move(n), "log_eps");
}

NodeId Tape::row_sum(NodeId x) {
    const Matrix& X = nodes_[x].value;
    TapeNode n;
    n.op = OpKind::row_sum;
    n.parents[0] = x;
    n.n_parents = 1;
    n.value = Matrix(X.rows(), 1);
    for (std::size_t i = 0; i < X.rows(); ++i) n.value(i, 0) = kops().sum(X.row(i), X.cols());
    return push(std::move(n), "row_sum");
}

NodeId Tape::col_mean(NodeId x) {
    const Matrix& X = nodes_[x].value;
    if (X.rows() == 0) throw DimensionError("col_mean: empty input");
    TapeNode n;
    n.op = OpKind::col_mean;
    n.parents[0] = x;
    n.n_parents = 1;
    n.value = Matrix(1, X.cols());
    for (std::size_t i = 0; i < X.rows(); ++i)
        kops().axpy(n.value.data(), 1.0, X.row(i), X.cols());
    kops().scale(n.value.data(), n.value.data(), 1.0 / static_cast<double>(X.rows()), X.cols());
    return push(std::move(n), "col_mean");
}

NodeId Tape::mean(NodeId x) {
    const Matrix& X = nodes_[x].value;
    if (X.size() == 0) throw DimensionError("mean: empty input");
    TapeNode n;
    n.op = OpKind::mean;
    n.parents[0] = x;
    n.n_parents = 1;
    n.value = Matrix(1, 1);
    n.value(0, 0) = kops().sum(X.data(), X.size()) / static_cast<double>(X.size());
    return push(std::move(n), "mean");
}

NodeId Tape::row_l2_normalize(NodeId x) {
    const Matrix& X = nodes_[x].value;
    TapeNode n;
    n.op = OpKind::row_l2_normalize;
    n.parents[0] = x;
    n.n_parents = 1;
    n.value = Matrix(X.rows(), X.cols());
    Matrix inv(X.rows(), 1);
    for (std::size_t i = 0; i < X.rows(); ++i) {
        double norm = std::sqrt(kops().dot(X.row(i), X.row(i), X.cols()));
        if (norm < 1e-12) norm = 1e-12;  // guard zero rows
        inv(i, 0) = 1.0 / norm;
        kops().scale(n.value.row(i), X.row(i), inv(i, 0), X.cols());
    }
    n.saved.push_back(std::move(inv));
    return push(std::move(n), "row_l2_normalize");
}

NodeId Tape::batch_norm(NodeId x, NodeId gamma, NodeId beta, BnState& state, BnMode mode) {
    const Matrix& X = nodes_[x].value;
    const Matrix& G = nodes_[gamma].value;
    const Matrix& B = nodes_[beta].value;
    const std::size_t m = X.rows(), c = X.cols();
    if (G.rows() != 1 || G.cols() != c || B.rows() != 1 || B.cols() != c)
        throw DimensionError("batch_norm: gamma/beta must be 1x" + std::to_string(c));
    if (state.running_mean.cols() != c || state.running_var.cols() != c)
        throw DimensionError("batch_norm: running stats width mismatch");
    if (m == 0) throw DimensionError("batch_norm: empty batch");

    TapeNode n;
    n.op = mode == BnMode::eval ? OpKind::batch_norm_eval : OpKind::batch_norm_train;
    n.parents[0] = x;
    n.parents[1] = gamma;
    n.parents[2] = beta;
    n.n_parents = 3;
    n.value = Matrix(m, c);

    Matrix mean_row(1, c), invstd(1, c), xhat(m, c);
    if (mode != BnMode::eval) {
        for (std::size_t i = 0; i < m; ++i) kops().axpy(mean_row.data(), 1.0, X.row(i), c);
        kops().scale(mean_row.data(), mean_row.data(), 1.0 / static_cast<double>(m), c);
        Matrix var_row(1, c);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                const double d = X(i, j) - mean_row(0, j);
                var_row(0, j) += d * d;
            }
        kops().scale(var_row.data(), var_row.data(), 1.0 / static_cast<double>(m), c);
        for (std::size_t j = 0; j < c; ++j)
            invstd(0, j) = 1.0 / std::sqrt(var_row(0, j) + state.eps);
        if (mode == BnMode::train) {
            // Running-stat EMA; unbiased variance when the batch allows it.
            const double unbias =
                m > 1 ? static_cast<double>(m) / static_cast<double>(m - 1) : 1.0;
            for (std::size_t j = 0; j < c; ++j) {
                state.running_mean(0, j) = (1.0 - state.momentum) * state.running_mean(0, j) +
                                           state.momentum * mean_row(0, j);
                state.running_var(0, j) = (1.0 - state.momentum) * state.running_var(0, j) +
                                          state.momentum * var_row(0, j) * unbias;
            }
        }
    } else {
        mean_row = state.running_mean;
        for (std::size_t j = 0; j < c; ++j)
            invstd(0, j) = 1.0 / std::sqrt(state.running_var(0, j) + state.eps);
    }
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            xhat(i, j) = (X(i, j) - mean_row(0, j)) * invstd(0, j);
            n.value(i, j) = G(0, j) * xhat(i, j) + B(0, j);
        }
    n.saved.push_back(std::move(xhat));
    n.saved.push_back(std::move(invstd));
    return push(std::move(n), "batch_norm");
}

void Tape::backward(NodeId root) {
    if (root >= nodes_.size()) throw ContractError("backward: invalid root");
    const Matrix& rv = nodes_[root].value;
    if (rv.rows() != 1 || rv.cols() != 1)
        throw ContractError("backward: root must be 1x1, got " + rv.shape_str());

    // Pass-local adjoints; added into persistent grads at the end so repeated
    // backward() calls accumulate (two calls double the gradients exactly).
    std::vector<Matrix> adj(root + 1);
    std::vector<bool> touched(root + 1, false);
    auto at = [&](NodeId id) -> Matrix& {
        if (!touched[id]) {
            adj[id] = Matrix::zeros(nodes_[id].value.rows(), nodes_[id].value.cols());
            touched[id] = true;
        }
        return adj[id];
    };
    at(root)(0, 0) = 1.0;

    for (NodeId id = root + 1; id-- > 0;) {
        if (!touched[id]) continue;
        const TapeNode& n = nodes_[id];
        const Matrix& g = adj[id];
        switch (n.op) {
            case OpKind::leaf:
                break;
            case OpKind::matmul: {
                const Matrix& A = nodes_[n.parents[0]].value;
                const Matrix& B = nodes_[n.parents[1]].value;
                kernels::matmul_nt(at(n.parents[0]).data(), g.data(), B.data(),
                                   A.rows(), B.cols(), A.cols(), true);
                kernels::matmul_tn(at(n.parents[1]).data(), A.data(), g.data(),
                                   A.rows(), A.cols(), B.cols(), true);
                break;
            }
            case OpKind::matmul_nt: {
                const Matrix& A = nodes_[n.parents[0]].value;
                const Matrix& B = nodes_[n.parents[1]].value;
                kernels::matmul_nn(at(n.parents[0]).data(), g.data(), B.data(),
                                   A.rows(), B.rows(), A.cols(), true);
                kernels::matmul_tn(at(n.parents[1]).data(), g.data(), A.data(),
                                   A.rows(), B.rows(), A.cols(), true);
                break;
            }
            case OpKind::add: {
                Matrix& da = at(n.parents[0]);
                kops().add(da.data(), da.data(), g.data(), g.size());
                Matrix& db = at(n.parents[1]);
                kops().add(db.data(), db.data(), g.data(), g.size());
                break;
            }
            case OpKind::scale:
                kops().axpy(at(n.parents[0]).data(), n.scalar, g.data(), g.size());
                break;
            case OpKind::elementwise_mul: {
                const Matrix& A = nodes_[n.parents[0]].value;
                const Matrix& B = nodes_[n.parents[1]].value;
                Matrix tmp(g.rows(), g.cols());
                kops().mul(tmp.data(), g.data(), B.data(), g.size());
                Matrix& da = at(n.parents[0]);
                kops().add(da.data(), da.data(), tmp.data(), g.size());
                kops().mul(tmp.data(), g.data(), A.data(), g.size());
                Matrix& db = at(n.parents[1]);
                kops().add(db.data(), db.data(), tmp.data(), g.size());
                break;
            }
            case OpKind::add_bias: {
                Matrix& dx = at(n.parents[0]);
                Matrix& db = at(n.parents[1]);
                kops().add(dx.data(), dx.data(), g.data(), g.size());
                for (std::size_t i = 0; i < g.rows(); ++i)
                    kops().axpy(db.data(), 1.0, g.row(i), g.cols());
                break;
            }
            case OpKind::scale_rows: {
                const Matrix& X = nodes_[n.parents[0]].value;
                const Matrix& S = nodes_[n.parents[1]].value;
                Matrix& dx = at(n.parents[0]);
                Matrix& ds = at(n.parents[1]);
                for (std::size_t i = 0; i < g.rows(); ++i) {
                    kops().axpy(dx.row(i), S(i, 0), g.row(i), g.cols());
                    ds(i, 0) += kops().dot(g.row(i), X.row(i), g.cols());
                }
                break;
            }
            case OpKind::relu: {
                const Matrix& X = nodes_[n.parents[0]].value;
                Matrix& dx = at(n.parents[0]);
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (X.values()[i] > 0.0) dx.values()[i] += g.values()[i];
                break;
            }
            case OpKind::tanh_op: {
                const Matrix& Y = n.value;
                Matrix& dx = at(n.parents[0]);
                for (std::size_t i = 0; i < g.size(); ++i)
                    dx.values()[i] += g.values()[i] * (1.0 - Y.values()[i] * Y.values()[i]);
                break;
            }
            case OpKind::row_softmax: {
                const Matrix& P = n.value;
                Matrix& dx = at(n.parents[0]);
                for (std::size_t i = 0; i < g.rows(); ++i) {
                    const double dotgp = kops().dot(g.row(i), P.row(i), g.cols());
                    for (std::size_t j = 0; j < g.cols(); ++j)
                        dx(i, j) += P(i, j) * (g(i, j) - dotgp);
                }
                break;
            }
            case OpKind::log_eps: {
                const Matrix& X = nodes_[n.parents[0]].value;
                Matrix& dx = at(n.parents[0]);
                for (std::size_t i = 0; i < g.size(); ++i)
                    dx.values()[i] += g.values()[i] / (X.values()[i] + n.scalar);
                break;
            }
            case OpKind::row_sum: {
                Matrix& dx = at(n.parents[0]);
                for (std::size_t i = 0; i < dx.rows(); ++i)
                    for (std::size_t j = 0; j < dx.cols(); ++j) dx(i, j) += g(i, 0);
                break;
            }
            case OpKind::col_mean: {
                Matrix& dx = at(n.parents[0]);
                const double inv = 1.0 / static_cast<double>(dx.rows());
                for (std::size_t i = 0; i < dx.rows(); ++i)
                    kops().axpy(dx.row(i), inv, g.data(), dx.cols());
                break;
            }
            case OpKind::mean: {
                Matrix& dx = at(n.parents[0]);
                const double inv = g(0, 0) / static_cast<double>(dx.size());
                for (std::size_t i = 0; i < dx.size(); ++i) dx.values()[i] += inv;
                break;
            }
            case OpKind::row_l2_normalize: {
                const Matrix& Y = n.value;
                const Matrix& inv = n.saved[0];
                Matrix& dx = at(n.parents[0]);
                for (std::size_t i = 0; i < g.rows(); ++i) {
                    const double gy = kops().dot(g.row(i), Y.row(i), g.cols());
                    for (std::size_t j = 0; j < g.cols(); ++j)
                        dx(i, j) += inv(i, 0) * (g(i, j) - Y(i, j) * gy);
                }
                break;
            }
            case OpKind::batch_norm_train: {
                const Matrix& xhat = n.saved[0];
                const Matrix& invstd = n.saved[1];
                const Matrix& G = nodes_[n.parents[1]].value;
                const std::size_t m = g.rows(), c = g.cols();
                Matrix& dx = at(n.parents[0]);
                Matrix& dgamma = at(n.parents[1]);
                Matrix& dbeta = at(n.parents[2]);
                Matrix sum_dxhat(1, c), sum_dxhat_xhat(1, c);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dxh = g(i, j) * G(0, j);
                        sum_dxhat(0, j) += dxh;
                        sum_dxhat_xhat(0, j) += dxh * xhat(i, j);
                        dgamma(0, j) += g(i, j) * xhat(i, j);
                        dbeta(0, j) += g(i, j);
                    }
                const double invm = 1.0 / static_cast<double>(m);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dxh = g(i, j) * G(0, j);
                        dx(i, j) += invstd(0, j) *
                                    (dxh - invm * sum_dxhat(0, j) -
                                     invm * xhat(i, j) * sum_dxhat_xhat(0, j));
                    }
                break;
            }
            case OpKind::batch_norm_eval: {
                const Matrix& xhat = n.saved[0];
                const Matrix& invstd = n.saved[1];
                const Matrix& G = nodes_[n.parents[1]].value;
                Matrix& dx = at(n.parents[0]);
                Matrix& dgamma = at(n.parents[1]);
                Matrix& dbeta = at(n.parents[2]);
                for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j) {
                        dx(i, j) += g(i, j) * G(0, j) * invstd(0, j);
                        dgamma(0, j) += g(i, j) * xhat(i, j);
                        dbeta(0, j) += g(i, j);
                    }
                break;
            }
        }
    }

    for (NodeId id = 0; id <= root; ++id)
        if (touched[id])
            kops().add(nodes_[id].grad.data(), nodes_[id].grad.data(), adj[id].data(),
                       adj[id].size());
}

void Tape::zero_grad() {
    for (auto& n : nodes_) n.grad.fill(0.0);
}

}  // namespace pstarc
