#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctok/rng.hpp"
#include "ctok/tape.hpp"

namespace ctok {

/// Maps parameter tensors to tape leaves. Binding the same tensor twice returns the
/// same node, so storage shared between modules (e.g. one codebook used by every
/// level) becomes a single leaf and its gradient accumulates across uses.
class ParamBinder {
 public:
    explicit ParamBinder(Tape& tape, bool trainable = true) : tape_(&tape), trainable_(trainable) {}

    NodeId bind(const Tensor& param);
    /// The node bound to `param`, if any.
    const NodeId* find(const Tensor& param) const;
    Tape& tape() const { return *tape_; }

 private:
    Tape* tape_;
    bool trainable_;
    std::unordered_map<const Tensor*, NodeId> nodes_;
};

struct Linear {
    Tensor weight;  // in x out
    Tensor bias;    // 1 x out

    static Linear glorot(std::size_t in, std::size_t out, Rng& rng);
    NodeId apply(ParamBinder& params, NodeId x) const;
};

/// Fully connected network: ReLU after every layer but the last.
class Mlp {
 public:
    Mlp() = default;
    Mlp(std::size_t in, std::span<const std::size_t> hidden, std::size_t out, Rng& rng);
    explicit Mlp(std::vector<Linear> layers);

    std::size_t input_width() const { return layers_.front().weight.rows(); }
    std::size_t output_width() const { return layers_.back().weight.cols(); }
    std::vector<Linear>& layers() { return layers_; }
    const std::vector<Linear>& layers() const { return layers_; }

    NodeId apply(ParamBinder& params, NodeId x) const;

 private:
    std::vector<Linear> layers_;
};

/// Per-modality encoder z_m = f_m(x_m).
struct ModalityEncoder {
    std::string modality;
    Mlp network;

    std::size_t input_width() const { return network.input_width(); }
    /// Throws ValidationError naming the modality if x does not have input_width() columns.
    NodeId encode(ParamBinder& params, NodeId x) const;
    Tensor encode(const Tensor& x) const;
};

/// g: linear -> ReLU -> linear, or the identity when disabled (projection-head ablation).
struct ProjectionHead {
    bool enabled = true;
    Linear first;
    Linear second;

    static ProjectionHead make(std::size_t dim, std::size_t proj_dim, Rng& rng);
    static ProjectionHead identity() { return ProjectionHead{false, {}, {}}; }

    NodeId project(ParamBinder& params, NodeId z) const;
    Tensor project(const Tensor& z) const;
};

struct FusionNodes {
    NodeId embedding;   // B x d
    NodeId importance;  // B x M, rows on the simplex
};

struct FusionResult {
    Tensor embedding;
    Tensor importance;
};

/// Attention fusion: p_m = softmax_m(q . z_m), z = sum_m p_m z_m.
struct AttentionFusion {
    Tensor query;  // d x 1

    static AttentionFusion make(std::size_t dim, Rng& rng);

    /// Throws UsageError on an empty modality list, ShapeError on mismatched shapes.
    FusionNodes fuse(ParamBinder& params, std::span<const NodeId> modality_embeddings) const;
    FusionResult fuse(std::span<const Tensor> modality_embeddings) const;
};

}  // namespace ctok
