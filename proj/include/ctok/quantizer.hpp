#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ctok/encoders.hpp"
#include "ctok/rng.hpp"
#include "ctok/tape.hpp"

namespace ctok {

enum class CodebookSharing : std::uint8_t { Shared = 0, PerLevel = 1 };

std::string_view to_string(CodebookSharing sharing);
/// Accepts "shared" / "per-level"; throws UsageError otherwise.
CodebookSharing parse_sharing(std::string_view text);

/// L levels of K codewords of dimension d. In shared mode every level addresses the
/// same storage tensor.
class CodebookStack {
 public:
    CodebookStack() = default;
    CodebookStack(std::size_t levels, std::size_t size, std::size_t dim, CodebookSharing sharing);
    /// `books` holds one tensor (shared) or `levels` tensors (per-level), each size x dim.
    CodebookStack(std::size_t levels, CodebookSharing sharing, std::vector<Tensor> books);

    std::size_t levels() const noexcept { return levels_; }
    std::size_t codebook_size() const noexcept { return size_; }
    std::size_t dim() const noexcept { return dim_; }
    CodebookSharing sharing() const noexcept { return sharing_; }

    const Tensor& level(std::size_t l) const { return books_.at(storage_index(l)); }
    Tensor& level(std::size_t l) { return books_.at(storage_index(l)); }
    /// The distinct storage tensors (1 when shared).
    std::vector<Tensor>& storage() noexcept { return books_; }
    const std::vector<Tensor>& storage() const noexcept { return books_; }

    bool all_finite() const noexcept;
    /// FNV-1a 64-bit digest of the shape, sharing mode and codeword bits, as 16 hex digits.
    std::string checksum() const;

    friend bool operator==(const CodebookStack&, const CodebookStack&) = default;

 private:
    std::size_t storage_index(std::size_t l) const {
        return sharing_ == CodebookSharing::Shared ? 0 : l;
    }

    std::size_t levels_ = 0;
    std::size_t size_ = 0;
    std::size_t dim_ = 0;
    CodebookSharing sharing_ = CodebookSharing::Shared;
    std::vector<Tensor> books_;
};

/// Values of one soft residual quantization pass over a batch.
struct SoftAssignment {
    std::vector<Tensor> weights;    // per level, B x K; rows on the simplex
    std::vector<Tensor> residuals;  // r_0 .. r_L, each B x d
    Tensor reconstruction;          // sum over levels of weights * codewords
};

struct SoftQuantizeNodes {
    std::vector<NodeId> weights;
    std::vector<NodeId> residuals;
    NodeId reconstruction = 0;
};

/// Differentiable residual quantization on the tape:
///   logits_l = (-||r_l - e_k||^2 + noise_l) / alpha,  c_l = softmax(logits_l),
///   r_{l+1} = r_l - c_l E_l,  reconstruction = sum_l c_l E_l.
/// `noise` is empty (no noise) or one B x K tensor per level, added to the distances.
/// Throws UsageError if alpha <= 0.
SoftQuantizeNodes soft_quantize(ParamBinder& params, NodeId z, const CodebookStack& codebooks,
                                double alpha, std::span<const Tensor> noise = {});

/// Value-level convenience wrapper; draws fresh unit Gumbel noise from `rng` when
/// noise_enabled.
SoftAssignment soft_quantize(const Tensor& z, const CodebookStack& codebooks, double alpha,
                             bool noise_enabled = false, Rng* rng = nullptr);

/// rows x cols matrix of Gumbel(0, 1) draws times `scale`.
Tensor sample_gumbel(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0);

/// max |reconstruction - (r_0 - r_L)| over all entries.
double telescoping_gap(const SoftAssignment& assignment);

/// Installs a callback that receives every soft assignment computed while the guard is
/// alive (test instrumentation). Not thread-safe; guards must nest.
class ScopedSoftQuantizeObserver {
 public:
    explicit ScopedSoftQuantizeObserver(std::function<void(const SoftAssignment&)> observer);
    ~ScopedSoftQuantizeObserver();
    ScopedSoftQuantizeObserver(const ScopedSoftQuantizeObserver&) = delete;
    ScopedSoftQuantizeObserver& operator=(const ScopedSoftQuantizeObserver&) = delete;

 private:
    std::function<void(const SoftAssignment&)> previous_;
};

using Codes = std::vector<std::uint32_t>;

/// Hard residual quantization: c_l = argmin_k ||r_l - e_k||^2 (lowest index wins ties),
/// r_{l+1} = r_l - e_{c_l}.
Codes hard_quantize(std::span<const double> z, const CodebookStack& codebooks);
/// Row-wise hard quantization of a B x d batch.
std::vector<Codes> hard_quantize(const Tensor& z, const CodebookStack& codebooks);
/// Sum of the selected codewords per row.
Tensor hard_reconstruct(const Tensor& z, const CodebookStack& codebooks);

/// alpha(t) = max(floor, initial * exp(-decay * t)), or `initial` for every t when constant.
struct AlphaSchedule {
    double initial = 0.2;
    double decay = 0.0;
    double floor = 1e-3;
    bool constant = false;

    double at(std::size_t epoch) const;
    bool at_floor(std::size_t epoch) const { return !constant && at(epoch) <= floor; }

    /// Decay chosen so alpha reaches 2 * floor at the last epoch (epochs - 1).
    static AlphaSchedule annealed(double initial, double floor, std::size_t epochs);
    static AlphaSchedule fixed(double alpha) { return {alpha, 0.0, alpha, true}; }
};

}  // namespace ctok
