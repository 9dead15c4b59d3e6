#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "ctok/data_io.hpp"
#include "ctok/token_table.hpp"

namespace ctok {

/// Prefix tree over the full identifiers of a token table. Leaves carry the table
/// index of their item.
class TokenTrie {
 public:
    static constexpr std::uint32_t kNoItem = 0xffffffffU;

    struct Node {
        std::vector<std::pair<std::uint32_t, std::uint32_t>> children;  // (token, node), sorted
        std::uint32_t item = kNoItem;
        std::uint32_t depth = 0;
    };

    explicit TokenTrie(const TokenTable& table);

    const Node& node(std::uint32_t id) const { return nodes_.at(id); }
    static constexpr std::uint32_t root() { return 0; }
    std::size_t leaf_count() const noexcept { return leaves_; }
    std::size_t node_count() const noexcept { return nodes_.size(); }
    /// Table index of the item with exactly these tokens, or kNoItem.
    std::uint32_t find(std::span<const std::uint32_t> tokens) const;

 private:
    std::vector<Node> nodes_;
    std::size_t leaves_ = 0;
};

/// Count-based autoregressive model over identifier tokens. The next item's token at
/// position j, given the tokens already generated for it, is conditioned on the
/// longest available context among
///   last n identifiers, ..., last 1 identifier,
///   last identifier truncated to L-1, ..., 1 codes,
///   no history,
/// then the position unigram, then uniform. The first context seen in training is used
/// alone (pure backoff), with additive smoothing:
///   p(t) = (count(t) + eps) / (total + eps * V_j)
/// where V_j is K for code positions and the suffix vocabulary for the suffix position.
class MarkovTokenModel {
 public:
    MarkovTokenModel(std::size_t levels, std::size_t codebook_size, std::size_t suffix_vocabulary,
                     std::size_t order = 2, double epsilon = 0.01);

    /// Counts every (history, next item) transition in `sequences`.
    void fit(std::span<const std::vector<TokenTuple>> sequences);

    std::size_t order() const noexcept { return order_; }
    std::size_t levels() const noexcept { return levels_; }
    double epsilon() const noexcept { return epsilon_; }
    /// Vocabulary size at token position j.
    std::size_t vocabulary(std::size_t position) const;

    /// Throws ValidationError if a history identifier has the wrong length or tokens
    /// outside the vocabulary.
    void check_history(std::span<const TokenTuple> history) const;

    struct Counts {
        std::unordered_map<std::uint32_t, std::uint64_t> counts;
        std::uint64_t total = 0;
    };

    /// The distribution used for position `position` of the next identifier after
    /// `history` with `prefix` already generated. nullptr means uniform.
    const Counts* context(std::span<const TokenTuple> history, std::span<const std::uint32_t> prefix) const;

    double probability(const Counts* ctx, std::size_t position, std::uint32_t token) const;
    double log_prob(std::span<const TokenTuple> history, std::span<const std::uint32_t> prefix,
                    std::uint32_t token) const;
    /// Sum of log_prob over every token of `tokens`, accumulated left to right.
    double sequence_log_prob(std::span<const TokenTuple> history,
                             std::span<const std::uint32_t> tokens) const;

 private:
    std::string key(char kind, std::size_t position, std::span<const TokenTuple> history,
                    std::size_t items, std::size_t truncate, std::span<const std::uint32_t> prefix) const;

    std::size_t levels_;
    std::size_t codebook_size_;
    std::size_t suffix_vocab_;
    std::size_t order_;
    double epsilon_;
    std::unordered_map<std::string, Counts> table_;
    std::vector<Counts> unigram_;
};

struct ScoredItem {
    std::size_t item = 0;  // token table index
    double score = 0.0;    // summed log-probability

    friend bool operator==(const ScoredItem&, const ScoredItem&) = default;
};

/// Trie-constrained beam search. Returns up to k items by descending score; equal
/// scores go to the smaller table index. Throws UsageError unless beam_width >= k >= 1.
std::vector<ScoredItem> beam_search(const MarkovTokenModel& model, const TokenTrie& trie,
                                    const TokenTable& table, std::span<const TokenTuple> history,
                                    std::size_t beam_width, std::size_t k);

/// Scores every identifier in the table and ranks them with the same tie rule.
std::vector<ScoredItem> brute_force_ranking(const MarkovTokenModel& model, const TokenTable& table,
                                            std::span<const TokenTuple> history);

/// Mean over events of [truth is among the first k predictions].
double recall_at_k(std::span<const std::vector<std::size_t>> predictions,
                   std::span<const std::size_t> truths, std::size_t k);

struct EvalEvent {
    std::string user_id;
    std::vector<std::size_t> history;  // table indices, chronological
    std::size_t truth = 0;
};

/// One event per test-split position; the history is every earlier item of the user.
std::vector<EvalEvent> test_events(std::span<const SplitSequence> splits, const TokenTable& table);

/// Training-split item sequences mapped to identifiers.
std::vector<std::vector<TokenTuple>> training_sequences(std::span<const SplitSequence> splits,
                                                        const TokenTable& table);

struct EvalSettings {
    std::vector<std::size_t> ks{5, 10};
    std::size_t beam_width = 50;
    std::size_t order = 2;
    double epsilon = 0.01;
};

struct EvalReport {
    std::vector<std::size_t> ks;
    std::size_t beam_width = 0;
    std::vector<double> recall;  // aligned with ks
    std::size_t n_events = 0;
    std::size_t model_order = 0;

    nlohmann::json to_json() const;
};

/// Fits the model on the training splits and evaluates Recall@K on the test events.
/// Throws UsageError if beam_width < max(ks) or there are no events.
EvalReport evaluate_retrieval(const TokenTable& table, std::span<const SplitSequence> splits,
                              const EvalSettings& settings);

/// Same identifiers, randomly reassigned among items (baseline tokenizer).
TokenTable shuffle_assignment(const TokenTable& table, std::uint64_t seed);

}  // namespace ctok
