#pragma once

#include <cstddef>
#include <vector>

#include "pstarc/matrix.hpp"

namespace pstarc {

// Default epsilon used inside log(x + eps) and the entropy terms.
inline constexpr double kLogEps = 1e-6;

enum class OpKind {
    leaf,
    matmul,            // a (m x k) * b (k x n)
    matmul_nt,         // a (m x k) * b (n x k)^T
    add,
    scale,             // a * c
    elementwise_mul,
    add_bias,          // x (m x n) + broadcast b (1 x n)
    scale_rows,        // x (m x n), row i scaled by s (m x 1)
    relu,
    tanh_op,
    row_softmax,
    log_eps,           // log(x + eps)
    row_sum,           // m x n -> m x 1
    col_mean,          // m x n -> 1 x n
    mean,              // m x n -> 1 x 1
    row_l2_normalize,
    batch_norm_train,
    batch_norm_eval,
};

// Batch-norm layer state owned by the caller. Train-mode forwards normalize
// with batch statistics and update the running stats in place (EMA, biased
// variance for normalization, unbiased for the running update; a
// single-sample batch falls back to the biased value). Eval mode reads the
// running stats and leaves them untouched.
struct BnState {
    Matrix running_mean;  // 1 x n
    Matrix running_var;   // 1 x n
    double momentum = 0.1;
    double eps = 1e-5;
};

// train_frozen_stats normalizes with batch statistics like train but leaves
// the running stats untouched (used for null-step adaptation and gradient
// checking, where forwards must be side-effect free).
enum class BnMode { train, train_frozen_stats, eval };

using NodeId = std::size_t;

struct TapeNode {
    Matrix value;
    Matrix grad;  // persistent; backward() accumulates into it
    OpKind op = OpKind::leaf;
    NodeId parents[3] = {0, 0, 0};
    int n_parents = 0;
    double scalar = 0.0;        // scale factor / epsilon, op-dependent
    std::vector<Matrix> saved;  // op-specific forward caches
};

// Append-only reverse-mode differentiation tape. Nodes are created by the
// op methods; parents always precede children, so reverse creation order is
// a valid reverse-topological order and backward() is deterministic.
//
// backward() computes fresh adjoints in a scratch pass and then adds them
// into each node's persistent grad, so calling it twice on the same graph
// without zeroing doubles every gradient exactly.
class Tape {
public:
    NodeId leaf(Matrix value);
    NodeId constant(Matrix value) { return leaf(std::move(value)); }

    NodeId matmul(NodeId a, NodeId b);
    NodeId matmul_nt(NodeId a, NodeId b);
    NodeId add(NodeId a, NodeId b);
    NodeId scale(NodeId a, double c);
    NodeId sub(NodeId a, NodeId b) { return add(a, scale(b, -1.0)); }
    NodeId elementwise_mul(NodeId a, NodeId b);
    NodeId add_bias(NodeId x, NodeId bias);
    NodeId scale_rows(NodeId x, NodeId s);
    NodeId relu(NodeId x);
    NodeId tanh(NodeId x);
    NodeId row_softmax(NodeId x);
    NodeId log_eps(NodeId x, double eps = kLogEps);
    NodeId row_sum(NodeId x);
    NodeId col_mean(NodeId x);
    NodeId mean(NodeId x);
    NodeId row_l2_normalize(NodeId x);
    NodeId batch_norm(NodeId x, NodeId gamma, NodeId beta, BnState& state, BnMode mode);

    // Accumulates d(root)/d(node) into every node's grad. root must be 1x1.
    void backward(NodeId root);

    const Matrix& value(NodeId id) const { return nodes_[id].value; }
    const Matrix& grad(NodeId id) const { return nodes_[id].grad; }
    const TapeNode& node(NodeId id) const { return nodes_[id]; }
    std::size_t size() const { return nodes_.size(); }

    void zero_grad();

private:
    NodeId push(TapeNode node, const char* op_name);

    std::vector<TapeNode> nodes_;
};

}  // namespace pstarc
