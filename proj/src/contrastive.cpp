#include "ctok/contrastive.hpp"

#include <numeric>
#include <string>
#include <vector>

#include "ctok/error.hpp"

namespace ctok {

NegativePolicy NegativePolicy::parse(std::string_view text) {
    if (text == "both") {
        return {true, true, true};
    }
    if (text == "recon") {
        return {true, false, true};
    }
    if (text == "modal") {
        return {false, true, true};
    }
    throw UsageError("unknown negative policy '" + std::string(text) +
                     "' (expected both, recon or modal)");
}

std::string_view to_string(const NegativePolicy& policy) {
    if (policy.reconstruction_negatives && policy.modality_negatives) {
        return "both";
    }
    if (policy.reconstruction_negatives) {
        return "recon";
    }
    if (policy.modality_negatives) {
        return "modal";
    }
    return "none";
}

NodeId nt_xent(Tape& tape, NodeId reconstruction, std::span<const NodeId> modalities, double tau,
               const NegativePolicy& policy, Similarity similarity) {
    if (!(tau > 0.0)) {
        throw UsageError("NT-Xent temperature tau must be positive");
    }
    if (modalities.empty()) {
        throw UsageError("NT-Xent needs at least one modality");
    }
    const Tensor& anchor_value = tape.value(reconstruction);
    const std::size_t batch = anchor_value.rows();
    for (NodeId m : modalities) {
        if (!tape.value(m).same_shape(anchor_value)) {
            throw ShapeError(m, "modality projections " + tape.value(m).shape_string() +
                                    " differ from reconstruction projections " +
                                    anchor_value.shape_string());
        }
    }
    const bool others = batch > 1 && (policy.reconstruction_negatives || policy.modality_negatives);
    if (!others && !policy.positive_in_denominator) {
        throw UsageError("negative policy leaves the NT-Xent denominator empty");
    }

    auto prepare = [&](NodeId x) {
        return similarity == Similarity::Cosine ? tape.normalize_rows(x) : x;
    };
    const double inv_tau = 1.0 / tau;
    const NodeId anchors = prepare(reconstruction);
    const bool with_recon = policy.reconstruction_negatives && batch > 1;
    NodeId recon_logits = 0;
    if (with_recon) {
        recon_logits = tape.scale(tape.matmul(anchors, tape.transpose(anchors)), inv_tau);
    }

    // Mask over [modality logits | reconstruction logits].
    const std::size_t width = with_recon ? 2 * batch : batch;
    std::vector<std::uint8_t> mask(batch * width, 0);
    for (std::size_t i = 0; i < batch; ++i) {
        for (std::size_t j = 0; j < batch; ++j) {
            const bool diagonal = i == j;
            mask[i * width + j] =
                diagonal ? policy.positive_in_denominator : policy.modality_negatives;
            if (with_recon) {
                mask[i * width + batch + j] = !diagonal;
            }
        }
    }
    std::vector<std::size_t> diagonal(batch);
    std::iota(diagonal.begin(), diagonal.end(), std::size_t{0});

    NodeId total = 0;
    for (std::size_t m = 0; m < modalities.size(); ++m) {
        const NodeId targets = prepare(modalities[m]);
        const NodeId logits =
            tape.scale(tape.matmul(anchors, tape.transpose(targets)), inv_tau);
        const NodeId positives = tape.pick_cols(logits, diagonal);
        NodeId candidates = logits;
        if (with_recon) {
            const NodeId parts[] = {logits, recon_logits};
            candidates = tape.concat_cols(parts);
        }
        const NodeId denominators = tape.logsumexp_rows(candidates, mask);
        const NodeId per_anchor = tape.sub(denominators, positives);
        const NodeId modality_loss = tape.mean(per_anchor);
        total = m == 0 ? modality_loss : tape.add(total, modality_loss);
    }
    return total;
}

double nt_xent(const Tensor& reconstruction, std::span<const Tensor> modalities, double tau,
               const NegativePolicy& policy, Similarity similarity) {
    Tape tape;
    const NodeId anchor = tape.constant(reconstruction);
    std::vector<NodeId> ms;
    for (const Tensor& m : modalities) {
        ms.push_back(tape.constant(m));
    }
    return tape.value(nt_xent(tape, anchor, ms, tau, policy, similarity)).item();
}

}  // namespace ctok
