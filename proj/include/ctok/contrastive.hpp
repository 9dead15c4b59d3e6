#pragma once

#include <span>
#include <string_view>

#include "ctok/tape.hpp"

namespace ctok {

/// Which in-batch entries form the denominator for anchor i (the reconstruction
/// projection of item i).
struct NegativePolicy {
    /// Reconstruction projections of the other items in the batch.
    bool reconstruction_negatives = true;
    /// Same-modality projections of the other items in the batch.
    bool modality_negatives = true;
    /// The positive pair itself.
    bool positive_in_denominator = true;

    /// Parses "both" / "recon" / "modal"; the positive stays included.
    static NegativePolicy parse(std::string_view text);
};

std::string_view to_string(const NegativePolicy& policy);

enum class Similarity { Cosine, RawDot };

/// NT-Xent between reconstruction projections (B x p) and each modality's projections:
///
///   loss = sum_m mean_i [ logsumexp_{j in D_i} s_ij - s_ii(m) ],  s = sim / tau
///
/// where D_i is the denominator set selected by `policy`. With Similarity::Cosine
/// rows are L2-normalized first.
///
/// Throws UsageError if tau <= 0 or the policy leaves a denominator empty, and
/// ShapeError if projections disagree in shape.
NodeId nt_xent(Tape& tape, NodeId reconstruction, std::span<const NodeId> modalities, double tau,
               const NegativePolicy& policy = {}, Similarity similarity = Similarity::Cosine);

/// Value-level convenience wrapper.
double nt_xent(const Tensor& reconstruction, std::span<const Tensor> modalities, double tau,
               const NegativePolicy& policy = {}, Similarity similarity = Similarity::Cosine);

}  // namespace ctok
