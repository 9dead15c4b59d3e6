#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "ctok/tensor.hpp"

namespace ctok {

using NodeId = std::size_t;

enum class Op : std::uint8_t {
    Leaf,
    MatMul,
    Transpose,
    Add,
    AddBias,
    Sub,
    Mul,
    MulColumn,
    Scale,
    Neg,
    Relu,
    SoftmaxRows,
    Log,
    NormalizeRows,
    Sum,
    SumRows,
    ConcatCols,
    Column,
    NegSqDist,
    PickCols,
    LogSumExpRows,
};

const char* op_name(Op op) noexcept;

/// Reverse-mode differentiation graph over rank-2 tensors.
///
/// Nodes are appended in topological order; inputs always precede the node that
/// consumes them. Values are computed eagerly as nodes are added, and forward()
/// recomputes every derived node from the current leaf values, so a graph can be
/// built once and re-evaluated after set_value() (the finite-difference oracle
/// relies on this). backward() visits nodes once each in reverse insertion order.
///
/// ReLU uses the subgradient 0 at exactly 0.
class Tape {
 public:
    NodeId leaf(Tensor value, bool requires_grad = true);
    NodeId constant(Tensor value) { return leaf(std::move(value), false); }
    /// Replaces a leaf value; the shape must match. Derived values are stale until forward().
    void set_value(NodeId leaf_id, Tensor value);

    NodeId matmul(NodeId a, NodeId b);
    NodeId transpose(NodeId a);
    NodeId add(NodeId a, NodeId b);
    /// x[m x n] + b[1 x n] broadcast over rows.
    NodeId add_bias(NodeId x, NodeId bias);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    /// x[m x n] scaled row-wise by c[m x 1].
    NodeId mul_column(NodeId x, NodeId c);
    NodeId scale(NodeId x, double factor);
    NodeId neg(NodeId x);
    NodeId relu(NodeId x);
    NodeId softmax_rows(NodeId x);
    NodeId log(NodeId x);
    /// Each row divided by its L2 norm (norm floored at 1e-12).
    NodeId normalize_rows(NodeId x);
    /// Sum of all entries, 1x1.
    NodeId sum(NodeId x);
    /// Row sums, m x 1.
    NodeId sum_rows(NodeId x);
    NodeId concat_cols(std::span<const NodeId> parts);
    NodeId column(NodeId x, std::size_t col);
    /// out[i][k] = -||r_i - e_k||^2 for r[m x d], e[K x d].
    NodeId neg_sq_dist(NodeId r, NodeId e);
    /// out[i] = x[i][index[i]], m x 1.
    NodeId pick_cols(NodeId x, std::vector<std::size_t> index);
    /// out[i] = log sum_{j : mask[i][j]} exp(x[i][j]), m x 1. An empty mask means all entries.
    NodeId logsumexp_rows(NodeId x, std::vector<std::uint8_t> mask = {});

    NodeId mean(NodeId x);

    /// Recomputes every derived node in insertion order.
    void forward();
    /// Recomputes and returns the values of `outputs`.
    std::vector<Tensor> forward(std::span<const NodeId> outputs);

    /// Accumulates d(loss)/d(node) for every node that requires a gradient.
    /// Throws ShapeError if `loss` is not 1x1.
    void backward(NodeId loss);

    const Tensor& value(NodeId id) const;
    /// Gradient from the last backward(); zeros if the node received none.
    const Tensor& grad(NodeId id) const;

    Op op(NodeId id) const { return nodes_.at(id).op; }
    std::span<const NodeId> inputs(NodeId id) const { return nodes_.at(id).inputs; }
    bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

 private:
    struct Node {
        Op op = Op::Leaf;
        std::vector<NodeId> inputs;
        Tensor value;
        double factor = 0.0;
        std::vector<std::size_t> index;
        std::vector<std::uint8_t> mask;
        bool requires_grad = false;
    };

    NodeId push(Node node);
    void check_id(NodeId id) const;
    Tensor evaluate(const Node& node, NodeId id) const;
    void propagate(NodeId id);
    Tensor& grad_slot(NodeId id);

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
};

}  // namespace ctok
