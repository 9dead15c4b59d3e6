#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctok/contrastive.hpp"
#include "ctok/data_io.hpp"
#include "ctok/encoders.hpp"
#include "ctok/error.hpp"
#include "ctok/quantizer.hpp"

namespace ctok {

struct TrainConfig {
    std::size_t levels = 3;
    std::size_t codebook_size = 48;
    std::size_t dim = 96;
    std::vector<std::size_t> hidden{512, 256, 128};
    std::size_t proj_dim = 0;  // 0: same as dim
    double tau = 0.1;
    double alpha0 = 0.2;
    double alpha_floor = 1e-3;
    bool anneal = true;          // false: constant alpha0
    double lr = 1e-4;
    std::size_t batch = 256;
    std::size_t epochs = 50;
    std::uint64_t seed = 42;
    NegativePolicy negatives;
    CodebookSharing sharing = CodebookSharing::Shared;
    bool gumbel_noise = true;
    bool soft_path = true;        // false: hard assignment, codebooks frozen
    bool projection_head = true;
    Similarity similarity = Similarity::Cosine;
    double grad_clip = 0.0;       // global-norm clip; 0 disables
    double init_jitter = 1e-3;
    /// L2-normalize the fused embedding before quantization (and at tokenization).
    bool normalize_latent = true;
    /// Gumbel noise multiplied by alpha instead of unit scale.
    bool noise_scaled_by_alpha = true;

    std::size_t projection_dim() const { return proj_dim == 0 ? dim : proj_dim; }
    AlphaSchedule schedule() const;
    /// Throws UsageError for non-positive sizes or rates, or batch > dataset_size.
    void validate(std::size_t dataset_size) const;
};

nlohmann::json to_json(const TrainConfig& config);
/// Overwrites the fields present in `doc`; unknown keys are rejected (ValidationError).
void apply_json(TrainConfig& config, const nlohmann::json& doc);

/// Everything the tokenizer learns. The projection head is only needed for training
/// and is kept so checkpoints can resume the exact objective.
struct Model {
    bool normalize_latent = true;
    std::vector<ModalitySpec> modalities;
    std::vector<ModalityEncoder> encoders;
    AttentionFusion fusion;
    ProjectionHead head;
    CodebookStack codebooks;

    /// Fresh encoders, fusion vector and head from the "init" stream; codebooks zero.
    static Model initialize(const TrainConfig& config, const DatasetManifest& manifest);

    /// Fused (and, if configured, normalized) embeddings of every item (N x dim).
    Tensor embed(const Dataset& data) const;
    /// Same for given per-modality input batches.
    Tensor embed(std::span<const Tensor> inputs) const;

    struct Param {
        std::string name;
        Tensor* value;
    };
    /// Trainable tensors in a fixed order; codebook storage last.
    std::vector<Param> parameters();
    std::vector<std::pair<std::string, const Tensor*>> parameters() const;

    friend bool operator==(const Model& a, const Model& b);
};

/// Seeds the codebooks from the data: each level draws codewords from the current
/// residuals of a seeded item sample, plus small jitter. In shared mode the single
/// codebook is split evenly between levels.
void initialize_codebooks(Model& model, const Dataset& data, const TrainConfig& config);

/// Loss graph of one batch.
struct LossGraph {
    NodeId loss = 0;
    NodeId fused = 0;
    NodeId reconstruction = 0;
    std::vector<NodeId> modality_embeddings;
};

/// Builds fusion -> quantization -> projection -> NT-Xent on `params.tape()`.
/// `inputs` holds one B x width matrix per modality; `noise` is empty or one B x K
/// tensor per level.
LossGraph build_loss(ParamBinder& params, const Model& model, const TrainConfig& config,
                     std::span<const Tensor> inputs, double alpha, std::span<const Tensor> noise = {});

struct BatchResult {
    double loss = 0.0;
    std::vector<std::pair<std::string, Tensor>> grads;  // parameters() order, bound ones only
};

BatchResult loss_and_gradients(const Model& model, const TrainConfig& config,
                               std::span<const Tensor> inputs, double alpha,
                               std::span<const Tensor> noise = {});

struct EpochRow {
    std::size_t epoch = 0;  // 1-based
    double loss = 0.0;      // mean over batches
    double perplexity = 0.0;
    double collision_rate = 0.0;
    double alpha = 0.0;
    double seconds = 0.0;
};

struct TrainReport {
    std::vector<EpochRow> rows;

    /// Columns: epoch, loss, perplexity, collision_rate, alpha, seconds.
    std::string to_csv(bool include_seconds = true) const;
    void write_csv(const std::filesystem::path& path) const;
};

struct TrainResult {
    Model model;
    TrainReport report;
};

struct TrainHooks {
    /// Called after each completed epoch.
    std::function<void(const EpochRow&, const Model&)> on_epoch;
    /// Where to write the last good model if training aborts.
    std::optional<std::filesystem::path> abort_checkpoint;
};

/// Raised when the loss or a gradient becomes non-finite. Holds the model as it was
/// at the end of the last complete epoch.
class TrainingAborted : public NumericalError {
 public:
    TrainingAborted(std::size_t epoch, const std::string& what, Model last_good);
    std::size_t epoch() const noexcept { return epoch_; }
    const Model& last_good() const noexcept { return last_good_; }

 private:
    std::size_t epoch_;
    Model last_good_;
};

TrainResult train(const TrainConfig& config, const Dataset& data, const TrainHooks& hooks = {});

/// Binary checkpoint: magic, version, config JSON, then named float64 tensor blocks.
void save_checkpoint(const std::filesystem::path& path, const TrainConfig& config, const Model& model);

struct Checkpoint {
    TrainConfig config;
    Model model;
};

/// Throws ValidationError on bad magic, unsupported version, truncation or missing
/// tensors. If `expected` is given its codebook sharing mode must match the file's.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const TrainConfig* expected = nullptr);

}  // namespace ctok
