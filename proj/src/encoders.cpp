#include "ctok/encoders.hpp"

#include <cmath>

#include "ctok/error.hpp"

namespace ctok {

NodeId ParamBinder::bind(const Tensor& param) {
    if (auto it = nodes_.find(&param); it != nodes_.end()) {
        return it->second;
    }
    const NodeId id = tape_->leaf(param, trainable_);
    nodes_.emplace(&param, id);
    return id;
}

const NodeId* ParamBinder::find(const Tensor& param) const {
    auto it = nodes_.find(&param);
    return it == nodes_.end() ? nullptr : &it->second;
}

Linear Linear::glorot(std::size_t in, std::size_t out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    Linear layer{Tensor(in, out), Tensor(1, out)};
    for (double& w : layer.weight.values()) {
        w = (2.0 * rng.uniform() - 1.0) * limit;
    }
    return layer;
}

NodeId Linear::apply(ParamBinder& params, NodeId x) const {
    Tape& tape = params.tape();
    return tape.add_bias(tape.matmul(x, params.bind(weight)), params.bind(bias));
}

Mlp::Mlp(std::size_t in, std::span<const std::size_t> hidden, std::size_t out, Rng& rng) {
    std::size_t width = in;
    for (std::size_t h : hidden) {
        layers_.push_back(Linear::glorot(width, h, rng));
        width = h;
    }
    layers_.push_back(Linear::glorot(width, out, rng));
}

Mlp::Mlp(std::vector<Linear> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) {
        throw UsageError("an MLP needs at least one layer");
    }
    for (std::size_t i = 1; i < layers_.size(); ++i) {
        if (layers_[i].weight.rows() != layers_[i - 1].weight.cols()) {
            throw ValidationError("MLP layer " + std::to_string(i) + " input width mismatch");
        }
    }
}

NodeId Mlp::apply(ParamBinder& params, NodeId x) const {
    Tape& tape = params.tape();
    NodeId h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        h = layers_[i].apply(params, h);
        if (i + 1 < layers_.size()) {
            h = tape.relu(h);
        }
    }
    return h;
}

NodeId ModalityEncoder::encode(ParamBinder& params, NodeId x) const {
    const std::size_t got = params.tape().value(x).cols();
    if (got != input_width()) {
        throw ValidationError("modality '" + modality + "' expects width " +
                              std::to_string(input_width()) + ", got " + std::to_string(got));
    }
    return network.apply(params, x);
}

Tensor ModalityEncoder::encode(const Tensor& x) const {
    Tape tape;
    ParamBinder params(tape, false);
    return tape.value(encode(params, tape.constant(x)));
}

ProjectionHead ProjectionHead::make(std::size_t dim, std::size_t proj_dim, Rng& rng) {
    ProjectionHead head;
    head.enabled = true;
    head.first = Linear::glorot(dim, proj_dim, rng);
    head.second = Linear::glorot(proj_dim, proj_dim, rng);
    return head;
}

NodeId ProjectionHead::project(ParamBinder& params, NodeId z) const {
    if (!enabled) {
        return z;
    }
    Tape& tape = params.tape();
    return second.apply(params, tape.relu(first.apply(params, z)));
}

Tensor ProjectionHead::project(const Tensor& z) const {
    Tape tape;
    ParamBinder params(tape, false);
    return tape.value(project(params, tape.constant(z)));
}

AttentionFusion AttentionFusion::make(std::size_t dim, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(dim + 1));
    AttentionFusion fusion{Tensor(dim, 1)};
    for (double& w : fusion.query.values()) {
        w = (2.0 * rng.uniform() - 1.0) * limit;
    }
    return fusion;
}

FusionNodes AttentionFusion::fuse(ParamBinder& params,
                                  std::span<const NodeId> modality_embeddings) const {
    if (modality_embeddings.empty()) {
        throw UsageError("fusion needs at least one modality");
    }
    Tape& tape = params.tape();
    const NodeId q = params.bind(query);
    std::vector<NodeId> logits;
    logits.reserve(modality_embeddings.size());
    for (NodeId z : modality_embeddings) {
        logits.push_back(tape.matmul(z, q));
    }
    const NodeId importance = tape.softmax_rows(tape.concat_cols(logits));
    NodeId fused = tape.mul_column(modality_embeddings[0], tape.column(importance, 0));
    for (std::size_t m = 1; m < modality_embeddings.size(); ++m) {
        fused = tape.add(fused,
                         tape.mul_column(modality_embeddings[m], tape.column(importance, m)));
    }
    return {fused, importance};
}

FusionResult AttentionFusion::fuse(std::span<const Tensor> modality_embeddings) const {
    Tape tape;
    ParamBinder params(tape, false);
    std::vector<NodeId> zs;
    for (const Tensor& z : modality_embeddings) {
        zs.push_back(tape.constant(z));
    }
    const FusionNodes nodes = fuse(params, zs);
    return {tape.value(nodes.embedding), tape.value(nodes.importance)};
}

}  // namespace ctok
