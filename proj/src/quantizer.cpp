#include "ctok/quantizer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>

#include "ctok/error.hpp"
#include "ctok/parallel.hpp"

namespace ctok {

namespace {

std::function<void(const SoftAssignment&)>& observer_slot() {
    static std::function<void(const SoftAssignment&)> observer;
    return observer;
}

}  // namespace

std::string_view to_string(CodebookSharing sharing) {
    return sharing == CodebookSharing::Shared ? "shared" : "per-level";
}

CodebookSharing parse_sharing(std::string_view text) {
    if (text == "shared") {
        return CodebookSharing::Shared;
    }
    if (text == "per-level") {
        return CodebookSharing::PerLevel;
    }
    throw UsageError("unknown codebook sharing mode '" + std::string(text) + "'");
}

CodebookStack::CodebookStack(std::size_t levels, std::size_t size, std::size_t dim,
                             CodebookSharing sharing)
    : levels_(levels), size_(size), dim_(dim), sharing_(sharing) {
    if (levels == 0 || size == 0 || dim == 0) {
        throw UsageError("codebook levels, size and dimension must be positive");
    }
    const std::size_t count = sharing == CodebookSharing::Shared ? 1 : levels;
    books_.assign(count, Tensor(size, dim));
}

CodebookStack::CodebookStack(std::size_t levels, CodebookSharing sharing, std::vector<Tensor> books)
    : levels_(levels), sharing_(sharing), books_(std::move(books)) {
    const std::size_t expected = sharing == CodebookSharing::Shared ? 1 : levels;
    if (levels == 0 || books_.size() != expected) {
        throw ValidationError("codebook stack needs " + std::to_string(expected) +
                              " storage tensors, got " + std::to_string(books_.size()));
    }
    size_ = books_.front().rows();
    dim_ = books_.front().cols();
    for (const Tensor& b : books_) {
        if (b.rank() != 2 || b.rows() != size_ || b.cols() != dim_) {
            throw ValidationError("codebook tensors must all be " + std::to_string(size_) + "x" +
                                  std::to_string(dim_));
        }
    }
}

bool CodebookStack::all_finite() const noexcept {
    return std::all_of(books_.begin(), books_.end(), [](const Tensor& t) { return t.all_finite(); });
}

std::string CodebookStack::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::uint64_t word) {
        for (int b = 0; b < 8; ++b) {
            h ^= (word >> (8 * b)) & 0xffU;
            h *= 0x100000001b3ULL;
        }
    };
    mix(levels_);
    mix(size_);
    mix(dim_);
    mix(static_cast<std::uint64_t>(sharing_));
    for (const Tensor& b : books_) {
        for (double v : b.values()) {
            mix(std::bit_cast<std::uint64_t>(v));
        }
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

SoftQuantizeNodes soft_quantize(ParamBinder& params, NodeId z, const CodebookStack& codebooks,
                                double alpha, std::span<const Tensor> noise) {
    if (!(alpha > 0.0)) {
        throw UsageError("soft quantization temperature alpha must be positive");
    }
    if (!noise.empty() && noise.size() != codebooks.levels()) {
        throw UsageError("noise must provide one tensor per level");
    }
    Tape& tape = params.tape();
    SoftQuantizeNodes out;
    out.residuals.push_back(z);
    NodeId residual = z;
    NodeId reconstruction = 0;
    for (std::size_t l = 0; l < codebooks.levels(); ++l) {
        const NodeId book = params.bind(codebooks.level(l));
        NodeId logits = tape.neg_sq_dist(residual, book);
        if (!noise.empty()) {
            logits = tape.add(logits, tape.constant(noise[l]));
        }
        const NodeId weights = tape.softmax_rows(tape.scale(logits, 1.0 / alpha));
        const NodeId quantized = tape.matmul(weights, book);
        residual = tape.sub(residual, quantized);
        reconstruction = l == 0 ? quantized : tape.add(reconstruction, quantized);
        out.weights.push_back(weights);
        out.residuals.push_back(residual);
    }
    out.reconstruction = reconstruction;

    if (const auto& observer = observer_slot()) {
        SoftAssignment values;
        for (NodeId w : out.weights) {
            values.weights.push_back(tape.value(w));
        }
        for (NodeId r : out.residuals) {
            values.residuals.push_back(tape.value(r));
        }
        values.reconstruction = tape.value(out.reconstruction);
        observer(values);
    }
    return out;
}

SoftAssignment soft_quantize(const Tensor& z, const CodebookStack& codebooks, double alpha,
                             bool noise_enabled, Rng* rng) {
    if (noise_enabled && rng == nullptr) {
        throw UsageError("noise requires a random source");
    }
    std::vector<Tensor> noise;
    if (noise_enabled) {
        for (std::size_t l = 0; l < codebooks.levels(); ++l) {
            noise.push_back(sample_gumbel(z.rows(), codebooks.codebook_size(), *rng));
        }
    }
    Tape tape;
    ParamBinder params(tape, false);
    const SoftQuantizeNodes nodes = soft_quantize(params, tape.constant(z), codebooks, alpha, noise);
    SoftAssignment out;
    for (NodeId w : nodes.weights) {
        out.weights.push_back(tape.value(w));
    }
    for (NodeId r : nodes.residuals) {
        out.residuals.push_back(tape.value(r));
    }
    out.reconstruction = tape.value(nodes.reconstruction);
    return out;
}

Tensor sample_gumbel(std::size_t rows, std::size_t cols, Rng& rng, double scale) {
    Tensor t(rows, cols);
    for (double& v : t.values()) {
        v = scale * rng.gumbel();
    }
    return t;
}

double telescoping_gap(const SoftAssignment& assignment) {
    const Tensor& first = assignment.residuals.front();
    const Tensor& last = assignment.residuals.back();
    double gap = 0.0;
    for (std::size_t i = 0; i < first.size(); ++i) {
        gap = std::max(gap, std::abs(assignment.reconstruction[i] - (first[i] - last[i])));
    }
    return gap;
}

ScopedSoftQuantizeObserver::ScopedSoftQuantizeObserver(
    std::function<void(const SoftAssignment&)> observer)
    : previous_(std::move(observer_slot())) {
    observer_slot() = std::move(observer);
}

ScopedSoftQuantizeObserver::~ScopedSoftQuantizeObserver() {
    observer_slot() = std::move(previous_);
}

Codes hard_quantize(std::span<const double> z, const CodebookStack& codebooks) {
    const std::size_t d = codebooks.dim();
    if (z.size() != d) {
        throw ShapeError(0, "hard_quantize: vector of size " + std::to_string(z.size()) +
                                " for codebook dimension " + std::to_string(d));
    }
    std::vector<double> residual(z.begin(), z.end());
    Codes codes(codebooks.levels());
    for (std::size_t l = 0; l < codebooks.levels(); ++l) {
        const Tensor& book = codebooks.level(l);
        std::size_t best = 0;
        double best_dist = 0.0;
        for (std::size_t k = 0; k < book.rows(); ++k) {
            const double* e = book.row_span(k).data();
            double dist = 0.0;
            for (std::size_t p = 0; p < d; ++p) {
                const double diff = residual[p] - e[p];
                dist += diff * diff;
            }
            if (k == 0 || dist < best_dist) {
                best = k;
                best_dist = dist;
            }
        }
        codes[l] = static_cast<std::uint32_t>(best);
        const double* e = book.row_span(best).data();
        for (std::size_t p = 0; p < d; ++p) {
            residual[p] -= e[p];
        }
    }
    return codes;
}

std::vector<Codes> hard_quantize(const Tensor& z, const CodebookStack& codebooks) {
    std::vector<Codes> out(z.rows());
    parallel_for(z.rows(), 64, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            out[i] = hard_quantize(z.row_span(i), codebooks);
        }
    });
    return out;
}

Tensor hard_reconstruct(const Tensor& z, const CodebookStack& codebooks) {
    const std::vector<Codes> codes = hard_quantize(z, codebooks);
    Tensor out(z.rows(), z.cols());
    for (std::size_t i = 0; i < z.rows(); ++i) {
        auto row = out.row_span(i);
        for (std::size_t l = 0; l < codebooks.levels(); ++l) {
            auto e = codebooks.level(l).row_span(codes[i][l]);
            for (std::size_t p = 0; p < row.size(); ++p) {
                row[p] += e[p];
            }
        }
    }
    return out;
}

double AlphaSchedule::at(std::size_t epoch) const {
    if (!(initial > 0.0)) {
        throw UsageError("initial alpha must be positive");
    }
    if (constant) {
        return initial;
    }
    return std::max(floor, initial * std::exp(-decay * static_cast<double>(epoch)));
}

AlphaSchedule AlphaSchedule::annealed(double initial, double floor, std::size_t epochs) {
    AlphaSchedule s;
    s.initial = initial;
    s.floor = floor;
    const double span = epochs > 1 ? static_cast<double>(epochs - 1) : 1.0;
    s.decay = initial > 2.0 * floor ? std::log(initial / (2.0 * floor)) / span : 0.0;
    return s;
}

}  // namespace ctok
