#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "ctok/tensor.hpp"

namespace ctok {

struct ModalitySpec {
    std::string name;
    std::size_t width = 0;
};

/// Describes an item-embedding file: modality roster (names unique, widths positive),
/// item count and whether hierarchy labels accompany it.
struct DatasetManifest {
    std::vector<ModalitySpec> modalities;
    std::size_t item_count = 0;
    std::size_t label_levels = 0;  // 0: no labels
    std::string source;

    std::optional<std::size_t> modality_index(std::string_view name) const;
    void validate() const;

    static DatasetManifest load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;
};

/// One item: its id and one embedding per manifest modality, in manifest order.
struct ItemRecord {
    std::string item_id;
    std::vector<std::vector<double>> embeddings;
};

/// Reads JSON Lines records {"item_id": ..., "modalities": {name: [floats]}}.
/// Rejects (ValidationError citing the line) width mismatches, non-finite values,
/// duplicate ids, unknown or missing modalities and malformed JSON.
std::vector<ItemRecord> load_items(const std::filesystem::path& path,
                                   const DatasetManifest& manifest);
void save_items(const std::filesystem::path& path, const std::vector<ItemRecord>& items,
                const DatasetManifest& manifest);

/// Items plus optional per-item hierarchy labels (synthetic data only).
struct Dataset {
    DatasetManifest manifest;
    std::vector<ItemRecord> items;
    std::vector<std::vector<std::uint32_t>> labels;  // empty when unavailable

    std::size_t size() const noexcept { return items.size(); }
    bool has_labels() const noexcept { return !labels.empty(); }
    /// N x width matrix of one modality's embeddings.
    Tensor modality_matrix(std::size_t modality) const;
};

inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kItemsFile = "items.jsonl";
inline constexpr const char* kLabelsFile = "labels.jsonl";
inline constexpr const char* kSequencesFile = "sequences.jsonl";

/// Loads manifest.json, items.jsonl and (if present) labels.jsonl from a directory.
Dataset load_dataset(const std::filesystem::path& dir);

struct UserSequence {
    std::string user_id;
    std::vector<std::string> items;  // chronological
};

struct SequenceFilter {
    std::size_t min_item_count = 10;
    std::size_t min_user_count = 10;
};

/// A user's filtered sequence with chronological 80/10/10 boundaries:
/// items[0, train_end) train, [train_end, valid_end) validation, [valid_end, end) test.
struct SplitSequence {
    std::string user_id;
    std::vector<std::string> items;
    std::size_t train_end = 0;
    std::size_t valid_end = 0;
};

/// Drops items and users below the interaction thresholds, repeating until nothing
/// changes, then splits each surviving user chronologically.
std::vector<SplitSequence> filter_and_split(std::vector<UserSequence> users,
                                            const SequenceFilter& filter);

/// Reads JSON Lines {"user_id": ..., "items": [...]}; every item must be in `known_items`.
std::vector<UserSequence> load_sequences(const std::filesystem::path& path,
                                         const std::unordered_set<std::string>& known_items);
void save_sequences(const std::filesystem::path& path, const std::vector<UserSequence>& users);

/// load_sequences followed by filter_and_split.
std::vector<SplitSequence> load_split_sequences(const std::filesystem::path& path,
                                                const std::unordered_set<std::string>& known_items,
                                                const SequenceFilter& filter);

struct SyntheticModality {
    std::string name;
    std::size_t width = 0;
    double noise = 0.05;   // per-coordinate Gaussian noise scale
    double weight = 1.0;   // informativeness: scale of the latent signal
};

/// Seeded hierarchical Gaussian mixture with multi-modal views and biased random walks.
struct SyntheticSpec {
    std::vector<std::size_t> branching{8, 8, 8};
    std::size_t items_per_leaf = 1;
    std::size_t latent_dim = 16;
    double top_scale = 1.0;
    double scale_ratio = 0.4;  // child offsets shrink geometrically by this factor per level
    std::vector<SyntheticModality> modalities{{"text", 64, 0.05, 1.0}, {"collab", 32, 0.05, 1.0}};
    std::size_t users = 1000;
    std::size_t min_length = 12;
    std::size_t max_length = 28;
    /// Probability of the next item sharing the deepest group (same leaf), then each
    /// shallower group, then anywhere; size = levels + 1, deepest first.
    std::vector<double> walk_affinity{0.3, 0.35, 0.25, 0.1};
    /// Each item has one fixed successor (deterministic next-item data).
    bool deterministic_walks = false;
    std::uint64_t seed = 42;

    /// Throws UsageError for non-positive branching or counts, or malformed affinities.
    void validate() const;
};

struct SyntheticData {
    DatasetManifest manifest;
    std::vector<ItemRecord> items;
    std::vector<std::vector<std::uint32_t>> labels;  // branch index per level
    std::vector<std::vector<double>> latents;         // leaf centre of each item
    std::vector<std::vector<double>> top_centers;     // level-1 centres
    std::vector<UserSequence> sequences;

    Dataset dataset() const { return Dataset{manifest, items, labels}; }
};

SyntheticData generate_synthetic(const SyntheticSpec& spec);

/// Writes manifest.json, items.jsonl, labels.jsonl and sequences.jsonl into `dir`.
void save_synthetic(const std::filesystem::path& dir, const SyntheticData& data);

}  // namespace ctok
