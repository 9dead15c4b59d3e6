#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ctok/quantizer.hpp"

namespace ctok {

struct Model;
struct Dataset;

/// Raw codes plus an optional suffix that separates items whose codes collide.
struct TokenTuple {
    Codes codes;
    std::optional<std::uint32_t> disambiguator;

    /// Codes followed by the suffix when present.
    std::vector<std::uint32_t> tokens() const;

    friend bool operator==(const TokenTuple&, const TokenTuple&) = default;
    friend auto operator<=>(const TokenTuple&, const TokenTuple&) = default;
};

std::string to_string(const TokenTuple& tuple);

struct TokenEntry {
    std::string item_id;
    TokenTuple tuple;

    friend bool operator==(const TokenEntry&, const TokenEntry&) = default;
};

/// Bijection between item ids and full identifiers, bound to the codebooks that
/// produced it through their checksum. Entries are kept sorted by item id.
class TokenTable {
 public:
    TokenTable() = default;
    /// Throws ValidationError on duplicate ids or identifiers, codes outside [0, K),
    /// wrong tuple lengths, or a raw tuple used both with and without a suffix.
    TokenTable(std::size_t levels, std::size_t codebook_size, CodebookSharing sharing,
               std::string checksum, std::vector<TokenEntry> entries);

    std::size_t size() const noexcept { return entries_.size(); }
    std::size_t levels() const noexcept { return levels_; }
    std::size_t codebook_size() const noexcept { return size_; }
    CodebookSharing sharing() const noexcept { return sharing_; }
    const std::string& checksum() const noexcept { return checksum_; }
    const std::vector<TokenEntry>& entries() const noexcept { return entries_; }
    /// Number of distinct suffix values (0 when no item needed one).
    std::size_t suffix_vocabulary() const noexcept { return suffix_vocab_; }

    std::optional<std::size_t> find_item(std::string_view item_id) const;
    std::optional<std::size_t> find_tuple(const TokenTuple& tuple) const;
    const TokenTuple& tuple_of(std::string_view item_id) const;
    const std::string& item_of(const TokenTuple& tuple) const;

    std::vector<Codes> raw_codes() const;

    friend bool operator==(const TokenTable& a, const TokenTable& b) {
        return a.levels_ == b.levels_ && a.size_ == b.size_ && a.sharing_ == b.sharing_ &&
               a.checksum_ == b.checksum_ && a.entries_ == b.entries_;
    }

 private:
    std::size_t levels_ = 0;
    std::size_t size_ = 0;
    CodebookSharing sharing_ = CodebookSharing::Shared;
    std::string checksum_;
    std::vector<TokenEntry> entries_;
    std::size_t suffix_vocab_ = 0;
    std::unordered_map<std::string, std::size_t> by_item_;
    std::unordered_map<std::string, std::size_t> by_tuple_;
};

/// Builds a table from raw codes. Items sharing a raw tuple get suffixes 0, 1, 2, ...
/// in ascending item-id order; items with a unique tuple get none.
TokenTable assign_tokens(std::span<const std::string> item_ids, std::span<const Codes> raw,
                         const CodebookStack& codebooks);

/// Hard-quantizes every item's fused embedding (noise off) and builds the table.
TokenTable assign_all(const Model& model, const Dataset& data);

/// 1 - distinct / count. Throws UsageError on an empty list.
double collision_rate(std::span<const Codes> raw);
/// Collision rate of the length-`depth` prefixes.
double prefix_collision_rate(std::span<const Codes> raw, std::size_t depth);

/// Shannon entropy (nats) of code usage at `level`.
double usage_entropy(std::span<const Codes> raw, std::size_t level);
/// exp(usage_entropy).
double code_perplexity(std::span<const Codes> raw, std::size_t level);
/// Geometric mean of the per-level perplexities.
double identifier_perplexity(std::span<const Codes> raw);
/// exp of the entropy of whole-tuple usage.
double joint_perplexity(std::span<const Codes> raw);

/// Sum over groups of the majority-label count, divided by the item count.
double cluster_purity(std::span<const std::uint32_t> groups, std::span<const std::uint32_t> labels);
/// Purity of depth-`depth` code prefixes against depth-`depth` label prefixes.
double prefix_purity(std::span<const Codes> raw, std::span<const std::vector<std::uint32_t>> labels,
                     std::size_t depth);

/// Writes the table as JSON Lines: a header {levels, codebook_size, sharing,
/// codebook_checksum} followed by one {item_id, codes[, disambiguator]} per line.
void export_table(const TokenTable& table, const std::filesystem::path& path);
/// Throws ValidationError naming the line for malformed headers or records.
TokenTable import_table(const std::filesystem::path& path);

/// Compares the table's checksum with `codebooks`. On mismatch throws ValidationError
/// unless `allow_mismatch`, in which case the warning text is returned.
std::optional<std::string> check_codebooks(const TokenTable& table, const CodebookStack& codebooks,
                                           bool allow_mismatch);

/// Rows: level, perplexity, usage_entropy, collision_rate_raw. One row per level
/// (collision of that prefix), then "identifier" (geometric mean) and "joint".
void write_metrics_csv(std::span<const Codes> raw, const std::filesystem::path& path);

}  // namespace ctok
