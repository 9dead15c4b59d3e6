#include "ctok/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "ctok/error.hpp"
#include "ctok/parallel.hpp"

namespace ctok {

namespace {

constexpr double kNormFloor = 1e-12;
constexpr std::size_t kRowsPerTask = 16;

// C[m x n] = A[m x k] * B[k x n]
void gemm_nn(const Tensor& a, const Tensor& b, Tensor& c) {
    const std::size_t k = a.cols();
    const std::size_t n = b.cols();
    parallel_for(a.rows(), kRowsPerTask, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            double* out = c.row_span(i).data();
            const double* arow = a.row_span(i).data();
            for (std::size_t p = 0; p < k; ++p) {
                const double av = arow[p];
                const double* brow = b.row_span(p).data();
                for (std::size_t j = 0; j < n; ++j) {
                    out[j] += av * brow[j];
                }
            }
        }
    });
}

// C[m x n] += A[m x k] * B[n x k]^T
void gemm_nt(const Tensor& a, const Tensor& b, Tensor& c) {
    const std::size_t k = a.cols();
    const std::size_t n = b.rows();
    parallel_for(a.rows(), kRowsPerTask, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const double* arow = a.row_span(i).data();
            double* out = c.row_span(i).data();
            for (std::size_t j = 0; j < n; ++j) {
                const double* brow = b.row_span(j).data();
                double acc = 0.0;
                for (std::size_t p = 0; p < k; ++p) {
                    acc += arow[p] * brow[p];
                }
                out[j] += acc;
            }
        }
    });
}

// C[k x n] += A[m x k]^T * B[m x n]
void gemm_tn(const Tensor& a, const Tensor& b, Tensor& c) {
    const std::size_t m = a.rows();
    const std::size_t n = b.cols();
    parallel_for(a.cols(), kRowsPerTask, [&](std::size_t begin, std::size_t end) {
        for (std::size_t p = begin; p < end; ++p) {
            double* out = c.row_span(p).data();
            for (std::size_t i = 0; i < m; ++i) {
                const double av = a(i, p);
                const double* brow = b.row_span(i).data();
                for (std::size_t j = 0; j < n; ++j) {
                    out[j] += av * brow[j];
                }
            }
        }
    });
}

void add_into(Tensor& dst, const Tensor& src) {
    auto d = dst.values();
    auto s = src.values();
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] += s[i];
    }
}

bool is_matrix(const Tensor& t) { return t.rank() == 2; }

}  // namespace

const char* op_name(Op op) noexcept {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::MatMul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::Add: return "add";
        case Op::AddBias: return "add_bias";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::MulColumn: return "mul_column";
        case Op::Scale: return "scale";
        case Op::Neg: return "neg";
        case Op::Relu: return "relu";
        case Op::SoftmaxRows: return "softmax_rows";
        case Op::Log: return "log";
        case Op::NormalizeRows: return "normalize_rows";
        case Op::Sum: return "sum";
        case Op::SumRows: return "sum_rows";
        case Op::ConcatCols: return "concat_cols";
        case Op::Column: return "column";
        case Op::NegSqDist: return "neg_sq_dist";
        case Op::PickCols: return "pick_cols";
        case Op::LogSumExpRows: return "logsumexp_rows";
    }
    return "?";
}

void Tape::check_id(NodeId id) const {
    if (id >= nodes_.size()) {
        throw ShapeError(nodes_.size(), "reference to unknown node " + std::to_string(id));
    }
}

NodeId Tape::leaf(Tensor value, bool requires_grad) {
    if (!is_matrix(value)) {
        throw ShapeError(nodes_.size(), "leaf must be rank 2, got " + value.shape_string());
    }
    Node node;
    node.op = Op::Leaf;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    grads_.emplace_back();
    return nodes_.size() - 1;
}

void Tape::set_value(NodeId leaf_id, Tensor value) {
    check_id(leaf_id);
    Node& node = nodes_[leaf_id];
    if (node.op != Op::Leaf) {
        throw ShapeError(leaf_id, "set_value on a derived node");
    }
    if (!node.value.same_shape(value)) {
        throw ShapeError(leaf_id, "set_value shape " + value.shape_string() + " != " +
                                      node.value.shape_string());
    }
    node.value = std::move(value);
}

NodeId Tape::push(Node node) {
    const NodeId id = nodes_.size();
    for (NodeId in : node.inputs) {
        check_id(in);
        node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
    }
    node.value = evaluate(node, id);
    nodes_.push_back(std::move(node));
    grads_.emplace_back();
    return id;
}

Tensor Tape::evaluate(const Node& node, NodeId id) const {
    auto in = [&](std::size_t i) -> const Tensor& { return nodes_[node.inputs[i]].value; };
    auto mismatch = [&](const std::string& what) -> ShapeError {
        std::string msg = std::string(op_name(node.op)) + ": " + what + " (operands";
        for (NodeId i : node.inputs) {
            msg += " " + nodes_[i].value.shape_string();
        }
        return ShapeError(id, msg + ")");
    };

    switch (node.op) {
        case Op::Leaf:
            return node.value;
        case Op::MatMul: {
            const Tensor& a = in(0);
            const Tensor& b = in(1);
            if (a.cols() != b.rows()) {
                throw mismatch("inner extents differ");
            }
            Tensor c(a.rows(), b.cols());
            gemm_nn(a, b, c);
            return c;
        }
        case Op::Transpose: {
            const Tensor& a = in(0);
            Tensor t(a.cols(), a.rows());
            for (std::size_t i = 0; i < a.rows(); ++i) {
                for (std::size_t j = 0; j < a.cols(); ++j) {
                    t(j, i) = a(i, j);
                }
            }
            return t;
        }
        case Op::Add:
        case Op::Sub:
        case Op::Mul: {
            const Tensor& a = in(0);
            const Tensor& b = in(1);
            if (!a.same_shape(b)) {
                throw mismatch("shapes differ");
            }
            Tensor c = a;
            auto cv = c.values();
            auto bv = b.values();
            for (std::size_t i = 0; i < cv.size(); ++i) {
                if (node.op == Op::Add) {
                    cv[i] += bv[i];
                } else if (node.op == Op::Sub) {
                    cv[i] -= bv[i];
                } else {
                    cv[i] *= bv[i];
                }
            }
            return c;
        }
        case Op::AddBias: {
            const Tensor& x = in(0);
            const Tensor& b = in(1);
            if (b.rows() != 1 || b.cols() != x.cols()) {
                throw mismatch("bias must be 1 x cols");
            }
            Tensor c = x;
            for (std::size_t i = 0; i < c.rows(); ++i) {
                auto row = c.row_span(i);
                for (std::size_t j = 0; j < row.size(); ++j) {
                    row[j] += b[j];
                }
            }
            return c;
        }
        case Op::MulColumn: {
            const Tensor& x = in(0);
            const Tensor& s = in(1);
            if (s.cols() != 1 || s.rows() != x.rows()) {
                throw mismatch("scale must be rows x 1");
            }
            Tensor c = x;
            for (std::size_t i = 0; i < c.rows(); ++i) {
                for (double& v : c.row_span(i)) {
                    v *= s[i];
                }
            }
            return c;
        }
        case Op::Scale:
        case Op::Neg: {
            const double f = node.op == Op::Neg ? -1.0 : node.factor;
            Tensor c = in(0);
            for (double& v : c.values()) {
                v *= f;
            }
            return c;
        }
        case Op::Relu: {
            Tensor c = in(0);
            for (double& v : c.values()) {
                v = v > 0.0 ? v : 0.0;
            }
            return c;
        }
        case Op::SoftmaxRows: {
            Tensor c = in(0);
            for (std::size_t i = 0; i < c.rows(); ++i) {
                auto row = c.row_span(i);
                const double mx = *std::max_element(row.begin(), row.end());
                double total = 0.0;
                for (double& v : row) {
                    v = std::exp(v - mx);
                    total += v;
                }
                for (double& v : row) {
                    v /= total;
                }
            }
            return c;
        }
        case Op::Log: {
            Tensor c = in(0);
            for (double& v : c.values()) {
                if (!(v > 0.0)) {
                    throw NumericalError("node " + std::to_string(id) +
                                         ": log of non-positive value");
                }
                v = std::log(v);
            }
            return c;
        }
        case Op::NormalizeRows: {
            Tensor c = in(0);
            for (std::size_t i = 0; i < c.rows(); ++i) {
                auto row = c.row_span(i);
                double ss = 0.0;
                for (double v : row) {
                    ss += v * v;
                }
                const double norm = std::max(std::sqrt(ss), kNormFloor);
                for (double& v : row) {
                    v /= norm;
                }
            }
            return c;
        }
        case Op::Sum: {
            double total = 0.0;
            for (double v : in(0).values()) {
                total += v;
            }
            return Tensor::scalar(total);
        }
        case Op::SumRows: {
            const Tensor& x = in(0);
            Tensor c(x.rows(), 1);
            for (std::size_t i = 0; i < x.rows(); ++i) {
                double total = 0.0;
                for (double v : x.row_span(i)) {
                    total += v;
                }
                c[i] = total;
            }
            return c;
        }
        case Op::ConcatCols: {
            if (node.inputs.empty()) {
                throw mismatch("nothing to concatenate");
            }
            const std::size_t rows = in(0).rows();
            std::size_t cols = 0;
            for (std::size_t p = 0; p < node.inputs.size(); ++p) {
                if (in(p).rows() != rows) {
                    throw mismatch("row counts differ");
                }
                cols += in(p).cols();
            }
            Tensor c(rows, cols);
            std::size_t offset = 0;
            for (std::size_t p = 0; p < node.inputs.size(); ++p) {
                const Tensor& part = in(p);
                for (std::size_t i = 0; i < rows; ++i) {
                    std::copy_n(part.row_span(i).data(), part.cols(),
                                c.row_span(i).data() + offset);
                }
                offset += part.cols();
            }
            return c;
        }
        case Op::Column: {
            const Tensor& x = in(0);
            const std::size_t j = node.index.at(0);
            if (j >= x.cols()) {
                throw mismatch("column index out of range");
            }
            Tensor c(x.rows(), 1);
            for (std::size_t i = 0; i < x.rows(); ++i) {
                c[i] = x(i, j);
            }
            return c;
        }
        case Op::NegSqDist: {
            const Tensor& r = in(0);
            const Tensor& e = in(1);
            if (r.cols() != e.cols()) {
                throw mismatch("vector dimensions differ");
            }
            Tensor c(r.rows(), e.rows());
            const std::size_t d = r.cols();
            parallel_for(r.rows(), kRowsPerTask, [&](std::size_t begin, std::size_t end) {
                for (std::size_t i = begin; i < end; ++i) {
                    const double* rr = r.row_span(i).data();
                    for (std::size_t k = 0; k < e.rows(); ++k) {
                        const double* ee = e.row_span(k).data();
                        double acc = 0.0;
                        for (std::size_t p = 0; p < d; ++p) {
                            const double diff = rr[p] - ee[p];
                            acc += diff * diff;
                        }
                        c(i, k) = -acc;
                    }
                }
            });
            return c;
        }
        case Op::PickCols: {
            const Tensor& x = in(0);
            if (node.index.size() != x.rows()) {
                throw mismatch("one index per row required");
            }
            Tensor c(x.rows(), 1);
            for (std::size_t i = 0; i < x.rows(); ++i) {
                if (node.index[i] >= x.cols()) {
                    throw mismatch("pick index out of range");
                }
                c[i] = x(i, node.index[i]);
            }
            return c;
        }
        case Op::LogSumExpRows: {
            const Tensor& x = in(0);
            if (!node.mask.empty() && node.mask.size() != x.size()) {
                throw mismatch("mask size differs from operand");
            }
            Tensor c(x.rows(), 1);
            for (std::size_t i = 0; i < x.rows(); ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < x.cols(); ++j) {
                    if (node.mask.empty() || node.mask[i * x.cols() + j]) {
                        mx = std::max(mx, x(i, j));
                    }
                }
                if (!std::isfinite(mx)) {
                    throw NumericalError("node " + std::to_string(id) +
                                         ": logsumexp over an empty or non-finite row");
                }
                double total = 0.0;
                for (std::size_t j = 0; j < x.cols(); ++j) {
                    if (node.mask.empty() || node.mask[i * x.cols() + j]) {
                        total += std::exp(x(i, j) - mx);
                    }
                }
                c[i] = mx + std::log(total);
            }
            return c;
        }
    }
    throw ShapeError(id, "unknown op");
}

NodeId Tape::matmul(NodeId a, NodeId b) { return push({Op::MatMul, {a, b}}); }
NodeId Tape::transpose(NodeId a) { return push({Op::Transpose, {a}}); }
NodeId Tape::add(NodeId a, NodeId b) { return push({Op::Add, {a, b}}); }
NodeId Tape::add_bias(NodeId x, NodeId bias) { return push({Op::AddBias, {x, bias}}); }
NodeId Tape::sub(NodeId a, NodeId b) { return push({Op::Sub, {a, b}}); }
NodeId Tape::mul(NodeId a, NodeId b) { return push({Op::Mul, {a, b}}); }
NodeId Tape::mul_column(NodeId x, NodeId c) { return push({Op::MulColumn, {x, c}}); }
NodeId Tape::neg(NodeId x) { return push({Op::Neg, {x}}); }
NodeId Tape::relu(NodeId x) { return push({Op::Relu, {x}}); }
NodeId Tape::softmax_rows(NodeId x) { return push({Op::SoftmaxRows, {x}}); }
NodeId Tape::log(NodeId x) { return push({Op::Log, {x}}); }
NodeId Tape::normalize_rows(NodeId x) { return push({Op::NormalizeRows, {x}}); }
NodeId Tape::sum(NodeId x) { return push({Op::Sum, {x}}); }
NodeId Tape::sum_rows(NodeId x) { return push({Op::SumRows, {x}}); }
NodeId Tape::neg_sq_dist(NodeId r, NodeId e) { return push({Op::NegSqDist, {r, e}}); }

NodeId Tape::scale(NodeId x, double factor) {
    Node node{Op::Scale, {x}};
    node.factor = factor;
    return push(std::move(node));
}

NodeId Tape::concat_cols(std::span<const NodeId> parts) {
    return push({Op::ConcatCols, {parts.begin(), parts.end()}});
}

NodeId Tape::column(NodeId x, std::size_t col) {
    Node node{Op::Column, {x}};
    node.index = {col};
    return push(std::move(node));
}

NodeId Tape::pick_cols(NodeId x, std::vector<std::size_t> index) {
    Node node{Op::PickCols, {x}};
    node.index = std::move(index);
    return push(std::move(node));
}

NodeId Tape::logsumexp_rows(NodeId x, std::vector<std::uint8_t> mask) {
    Node node{Op::LogSumExpRows, {x}};
    node.mask = std::move(mask);
    return push(std::move(node));
}

NodeId Tape::mean(NodeId x) {
    check_id(x);
    return scale(sum(x), 1.0 / static_cast<double>(nodes_[x].value.size()));
}

void Tape::forward() {
    for (NodeId id = 0; id < nodes_.size(); ++id) {
        if (nodes_[id].op != Op::Leaf) {
            nodes_[id].value = evaluate(nodes_[id], id);
        }
    }
}

std::vector<Tensor> Tape::forward(std::span<const NodeId> outputs) {
    NodeId last = 0;
    for (NodeId id : outputs) {
        check_id(id);
        last = std::max(last, id);
    }
    for (NodeId id = 0; id <= last && id < nodes_.size(); ++id) {
        if (nodes_[id].op != Op::Leaf) {
            nodes_[id].value = evaluate(nodes_[id], id);
        }
    }
    std::vector<Tensor> values;
    values.reserve(outputs.size());
    for (NodeId id : outputs) {
        values.push_back(nodes_[id].value);
    }
    return values;
}

const Tensor& Tape::value(NodeId id) const {
    check_id(id);
    return nodes_[id].value;
}

Tensor& Tape::grad_slot(NodeId id) {
    Tensor& g = grads_[id];
    if (g.empty()) {
        g = Tensor(nodes_[id].value.shape(), std::vector<double>(nodes_[id].value.size(), 0.0));
    }
    return g;
}

const Tensor& Tape::grad(NodeId id) const {
    check_id(id);
    return const_cast<Tape*>(this)->grad_slot(id);
}

void Tape::backward(NodeId loss) {
    check_id(loss);
    if (nodes_[loss].value.size() != 1) {
        throw ShapeError(loss, "backward needs a scalar loss, got " +
                                   nodes_[loss].value.shape_string());
    }
    for (auto& g : grads_) {
        g = Tensor();
    }
    grad_slot(loss)[0] = 1.0;
    for (NodeId id = loss + 1; id-- > 0;) {
        if (nodes_[id].op != Op::Leaf && nodes_[id].requires_grad && !grads_[id].empty()) {
            propagate(id);
        }
    }
}

void Tape::propagate(NodeId id) {
    const Node& node = nodes_[id];
    const Tensor& dy = grads_[id];
    const Tensor& y = node.value;
    auto wants = [&](std::size_t i) { return nodes_[node.inputs[i]].requires_grad; };
    auto input = [&](std::size_t i) -> const Tensor& { return nodes_[node.inputs[i]].value; };
    auto slot = [&](std::size_t i) -> Tensor& { return grad_slot(node.inputs[i]); };

    switch (node.op) {
        case Op::Leaf:
            break;
        case Op::MatMul:
            if (wants(0)) {
                gemm_nt(dy, input(1), slot(0));
            }
            if (wants(1)) {
                gemm_tn(input(0), dy, slot(1));
            }
            break;
        case Op::Transpose:
            if (wants(0)) {
                Tensor& g = slot(0);
                for (std::size_t i = 0; i < dy.rows(); ++i) {
                    for (std::size_t j = 0; j < dy.cols(); ++j) {
                        g(j, i) += dy(i, j);
                    }
                }
            }
            break;
        case Op::Add:
            if (wants(0)) {
                add_into(slot(0), dy);
            }
            if (wants(1)) {
                add_into(slot(1), dy);
            }
            break;
        case Op::Sub:
            if (wants(0)) {
                add_into(slot(0), dy);
            }
            if (wants(1)) {
                auto g = slot(1).values();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] -= dy[i];
                }
            }
            break;
        case Op::Mul:
            for (std::size_t k = 0; k < 2; ++k) {
                if (wants(k)) {
                    auto g = slot(k).values();
                    const Tensor& other = input(1 - k);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        g[i] += dy[i] * other[i];
                    }
                }
            }
            break;
        case Op::AddBias:
            if (wants(0)) {
                add_into(slot(0), dy);
            }
            if (wants(1)) {
                Tensor& g = slot(1);
                for (std::size_t i = 0; i < dy.rows(); ++i) {
                    auto row = dy.row_span(i);
                    for (std::size_t j = 0; j < row.size(); ++j) {
                        g[j] += row[j];
                    }
                }
            }
            break;
        case Op::MulColumn: {
            const Tensor& x = input(0);
            const Tensor& s = input(1);
            if (wants(0)) {
                Tensor& g = slot(0);
                for (std::size_t i = 0; i < dy.rows(); ++i) {
                    for (std::size_t j = 0; j < dy.cols(); ++j) {
                        g(i, j) += dy(i, j) * s[i];
                    }
                }
            }
            if (wants(1)) {
                Tensor& g = slot(1);
                for (std::size_t i = 0; i < dy.rows(); ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < dy.cols(); ++j) {
                        acc += dy(i, j) * x(i, j);
                    }
                    g[i] += acc;
                }
            }
            break;
        }
        case Op::Scale:
        case Op::Neg:
            if (wants(0)) {
                const double f = node.op == Op::Neg ? -1.0 : node.factor;
                auto g = slot(0).values();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += f * dy[i];
                }
            }
            break;
        case Op::Relu:
            if (wants(0)) {
                auto g = slot(0).values();
                const Tensor& x = input(0);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    if (x[i] > 0.0) {
                        g[i] += dy[i];
                    }
                }
            }
            break;
        case Op::SoftmaxRows:
            if (wants(0)) {
                Tensor& g = slot(0);
                for (std::size_t i = 0; i < y.rows(); ++i) {
                    auto yr = y.row_span(i);
                    auto dr = dy.row_span(i);
                    double dot = 0.0;
                    for (std::size_t j = 0; j < yr.size(); ++j) {
                        dot += yr[j] * dr[j];
                    }
                    auto gr = g.row_span(i);
                    for (std::size_t j = 0; j < yr.size(); ++j) {
                        gr[j] += yr[j] * (dr[j] - dot);
                    }
                }
            }
            break;
        case Op::Log:
            if (wants(0)) {
                auto g = slot(0).values();
                const Tensor& x = input(0);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += dy[i] / x[i];
                }
            }
            break;
        case Op::NormalizeRows:
            if (wants(0)) {
                Tensor& g = slot(0);
                const Tensor& x = input(0);
                for (std::size_t i = 0; i < x.rows(); ++i) {
                    auto xr = x.row_span(i);
                    double ss = 0.0;
                    for (double v : xr) {
                        ss += v * v;
                    }
                    const double raw = std::sqrt(ss);
                    const double norm = std::max(raw, kNormFloor);
                    auto yr = y.row_span(i);
                    auto dr = dy.row_span(i);
                    auto gr = g.row_span(i);
                    if (raw < kNormFloor) {
                        // Constant-norm branch: plain scaling.
                        for (std::size_t j = 0; j < gr.size(); ++j) {
                            gr[j] += dr[j] / norm;
                        }
                        continue;
                    }
                    double dot = 0.0;
                    for (std::size_t j = 0; j < yr.size(); ++j) {
                        dot += yr[j] * dr[j];
                    }
                    for (std::size_t j = 0; j < gr.size(); ++j) {
                        gr[j] += (dr[j] - yr[j] * dot) / norm;
                    }
                }
            }
            break;
        case Op::Sum:
            if (wants(0)) {
                const double d = dy[0];
                for (double& v : slot(0).values()) {
                    v += d;
                }
            }
            break;
        case Op::SumRows:
            if (wants(0)) {
                Tensor& g = slot(0);
                for (std::size_t i = 0; i < g.rows(); ++i) {
                    for (double& v : g.row_span(i)) {
                        v += dy[i];
                    }
                }
            }
            break;
        case Op::ConcatCols: {
            std::size_t offset = 0;
            for (std::size_t p = 0; p < node.inputs.size(); ++p) {
                const std::size_t width = input(p).cols();
                if (wants(p)) {
                    Tensor& g = slot(p);
                    for (std::size_t i = 0; i < dy.rows(); ++i) {
                        auto dr = dy.row_span(i);
                        auto gr = g.row_span(i);
                        for (std::size_t j = 0; j < width; ++j) {
                            gr[j] += dr[offset + j];
                        }
                    }
                }
                offset += width;
            }
            break;
        }
        case Op::Column:
            if (wants(0)) {
                Tensor& g = slot(0);
                const std::size_t j = node.index[0];
                for (std::size_t i = 0; i < dy.rows(); ++i) {
                    g(i, j) += dy[i];
                }
            }
            break;
        case Op::NegSqDist: {
            const Tensor& r = input(0);
            const Tensor& e = input(1);
            const std::size_t d = r.cols();
            // d/dr_i = -2 sum_k dy_ik (r_i - e_k); d/de_k = 2 sum_i dy_ik (r_i - e_k)
            if (wants(0)) {
                Tensor& g = slot(0);
                parallel_for(r.rows(), kRowsPerTask, [&](std::size_t begin, std::size_t end) {
                    for (std::size_t i = begin; i < end; ++i) {
                        double* gr = g.row_span(i).data();
                        const double* rr = r.row_span(i).data();
                        for (std::size_t k = 0; k < e.rows(); ++k) {
                            const double w = -2.0 * dy(i, k);
                            const double* ee = e.row_span(k).data();
                            for (std::size_t p = 0; p < d; ++p) {
                                gr[p] += w * (rr[p] - ee[p]);
                            }
                        }
                    }
                });
            }
            if (wants(1)) {
                Tensor& g = slot(1);
                parallel_for(e.rows(), 1, [&](std::size_t begin, std::size_t end) {
                    for (std::size_t k = begin; k < end; ++k) {
                        double* gk = g.row_span(k).data();
                        const double* ee = e.row_span(k).data();
                        for (std::size_t i = 0; i < r.rows(); ++i) {
                            const double w = 2.0 * dy(i, k);
                            const double* rr = r.row_span(i).data();
                            for (std::size_t p = 0; p < d; ++p) {
                                gk[p] += w * (rr[p] - ee[p]);
                            }
                        }
                    }
                });
            }
            break;
        }
        case Op::PickCols:
            if (wants(0)) {
                Tensor& g = slot(0);
                for (std::size_t i = 0; i < dy.rows(); ++i) {
                    g(i, node.index[i]) += dy[i];
                }
            }
            break;
        case Op::LogSumExpRows:
            if (wants(0)) {
                Tensor& g = slot(0);
                const Tensor& x = input(0);
                for (std::size_t i = 0; i < x.rows(); ++i) {
                    for (std::size_t j = 0; j < x.cols(); ++j) {
                        if (node.mask.empty() || node.mask[i * x.cols() + j]) {
                            g(i, j) += dy[i] * std::exp(x(i, j) - y[i]);
                        }
                    }
                }
            }
            break;
    }
}

}  // namespace ctok
