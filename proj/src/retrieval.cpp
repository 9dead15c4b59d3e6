#include "ctok/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ctok/error.hpp"
#include "ctok/parallel.hpp"
#include "ctok/rng.hpp"

namespace ctok {

TokenTrie::TokenTrie(const TokenTable& table) {
    nodes_.emplace_back();
    for (std::size_t i = 0; i < table.entries().size(); ++i) {
        const auto tokens = table.entries()[i].tuple.tokens();
        std::uint32_t at = root();
        for (std::uint32_t t : tokens) {
            auto& children = nodes_[at].children;
            auto it = std::lower_bound(children.begin(), children.end(), t,
                                       [](const auto& c, std::uint32_t v) { return c.first < v; });
            if (it != children.end() && it->first == t) {
                at = it->second;
                continue;
            }
            const auto id = static_cast<std::uint32_t>(nodes_.size());
            const std::uint32_t depth = nodes_[at].depth + 1;
            children.insert(it, {t, id});
            nodes_.emplace_back();
            nodes_.back().depth = depth;
            at = id;
        }
        nodes_[at].item = static_cast<std::uint32_t>(i);
        ++leaves_;
    }
}

std::uint32_t TokenTrie::find(std::span<const std::uint32_t> tokens) const {
    std::uint32_t at = root();
    for (std::uint32_t t : tokens) {
        const auto& children = nodes_[at].children;
        auto it = std::lower_bound(children.begin(), children.end(), t,
                                   [](const auto& c, std::uint32_t v) { return c.first < v; });
        if (it == children.end() || it->first != t) {
            return kNoItem;
        }
        at = it->second;
    }
    return nodes_[at].children.empty() ? nodes_[at].item : kNoItem;
}

MarkovTokenModel::MarkovTokenModel(std::size_t levels, std::size_t codebook_size,
                                   std::size_t suffix_vocabulary, std::size_t order, double epsilon)
    : levels_(levels),
      codebook_size_(codebook_size),
      suffix_vocab_(suffix_vocabulary),
      order_(order),
      epsilon_(epsilon),
      unigram_(levels + 1) {
    if (levels == 0 || codebook_size == 0 || order == 0) {
        throw UsageError("Markov model needs positive levels, codebook size and order");
    }
    if (!(epsilon > 0.0)) {
        throw UsageError("smoothing constant must be positive");
    }
}

std::size_t MarkovTokenModel::vocabulary(std::size_t position) const {
    return position < levels_ ? codebook_size_ : std::max<std::size_t>(1, suffix_vocab_);
}

void MarkovTokenModel::check_history(std::span<const TokenTuple> history) const {
    for (std::size_t h = 0; h < history.size(); ++h) {
        const TokenTuple& t = history[h];
        if (t.codes.size() != levels_) {
            throw ValidationError("history entry " + std::to_string(h) + " has " +
                                  std::to_string(t.codes.size()) + " codes, expected " +
                                  std::to_string(levels_));
        }
        for (std::uint32_t c : t.codes) {
            if (c >= codebook_size_) {
                throw ValidationError("history entry " + std::to_string(h) + " has code " +
                                      std::to_string(c) + " outside the vocabulary");
            }
        }
        if (t.disambiguator && *t.disambiguator >= suffix_vocab_) {
            throw ValidationError("history entry " + std::to_string(h) + " has suffix " +
                                  std::to_string(*t.disambiguator) + " outside the vocabulary");
        }
    }
}

std::string MarkovTokenModel::key(char kind, std::size_t position, std::span<const TokenTuple> history,
                                  std::size_t items, std::size_t truncate,
                                  std::span<const std::uint32_t> prefix) const {
    std::string k;
    auto put = [&k](std::uint32_t v) {
        for (int b = 0; b < 4; ++b) {
            k.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
        }
    };
    k.push_back(kind);
    put(static_cast<std::uint32_t>(position));
    for (std::size_t i = history.size() - items; i < history.size(); ++i) {
        const TokenTuple& t = history[i];
        const std::size_t n = truncate == 0 ? t.codes.size() : truncate;
        for (std::size_t c = 0; c < n; ++c) {
            put(t.codes[c]);
        }
        if (truncate == 0) {
            put(t.disambiguator ? *t.disambiguator + 1 : 0);
        }
    }
    k.push_back('|');
    for (std::uint32_t p : prefix) {
        put(p);
    }
    return k;
}

void MarkovTokenModel::fit(std::span<const std::vector<TokenTuple>> sequences) {
    for (const auto& seq : sequences) {
        check_history(seq);
        for (std::size_t t = 0; t < seq.size(); ++t) {
            const std::span<const TokenTuple> history(seq.data(), t);
            const auto tokens = seq[t].tokens();
            for (std::size_t j = 0; j < tokens.size(); ++j) {
                const std::span<const std::uint32_t> prefix(tokens.data(), j);
                auto bump = [&](const std::string& k) {
                    Counts& c = table_[k];
                    ++c.counts[tokens[j]];
                    ++c.total;
                };
                for (std::size_t n = 1; n <= std::min(order_, t); ++n) {
                    bump(key('F', j, history, n, 0, prefix));
                }
                if (t > 0) {
                    for (std::size_t d = levels_ - 1; d >= 1; --d) {
                        bump(key('T', j, history, 1, d, prefix));
                    }
                }
                bump(key('E', j, history, 0, 0, prefix));
                ++unigram_[j].counts[tokens[j]];
                ++unigram_[j].total;
            }
        }
    }
}

const MarkovTokenModel::Counts* MarkovTokenModel::context(std::span<const TokenTuple> history,
                                                          std::span<const std::uint32_t> prefix) const {
    const std::size_t j = prefix.size();
    auto lookup = [&](const std::string& k) -> const Counts* {
        auto it = table_.find(k);
        return it == table_.end() || it->second.total == 0 ? nullptr : &it->second;
    };
    for (std::size_t n = std::min(order_, history.size()); n >= 1; --n) {
        if (const Counts* c = lookup(key('F', j, history, n, 0, prefix))) {
            return c;
        }
    }
    if (!history.empty()) {
        for (std::size_t d = levels_ - 1; d >= 1; --d) {
            if (const Counts* c = lookup(key('T', j, history, 1, d, prefix))) {
                return c;
            }
        }
    }
    if (const Counts* c = lookup(key('E', j, history, 0, 0, prefix))) {
        return c;
    }
    if (j < unigram_.size() && unigram_[j].total > 0) {
        return &unigram_[j];
    }
    return nullptr;
}

double MarkovTokenModel::probability(const Counts* ctx, std::size_t position,
                                     std::uint32_t token) const {
    const double v = static_cast<double>(vocabulary(position));
    if (ctx == nullptr) {
        return 1.0 / v;
    }
    auto it = ctx->counts.find(token);
    const double count = it == ctx->counts.end() ? 0.0 : static_cast<double>(it->second);
    return (count + epsilon_) / (static_cast<double>(ctx->total) + epsilon_ * v);
}

double MarkovTokenModel::log_prob(std::span<const TokenTuple> history,
                                  std::span<const std::uint32_t> prefix, std::uint32_t token) const {
    return std::log(probability(context(history, prefix), prefix.size(), token));
}

double MarkovTokenModel::sequence_log_prob(std::span<const TokenTuple> history,
                                           std::span<const std::uint32_t> tokens) const {
    double score = 0.0;
    for (std::size_t j = 0; j < tokens.size(); ++j) {
        score += log_prob(history, tokens.first(j), tokens[j]);
    }
    return score;
}

namespace {

bool ranks_before(const ScoredItem& a, const ScoredItem& b) {
    if (a.score != b.score) {
        return a.score > b.score;
    }
    return a.item < b.item;
}

}  // namespace

std::vector<ScoredItem> beam_search(const MarkovTokenModel& model, const TokenTrie& trie,
                                    const TokenTable& table, std::span<const TokenTuple> history,
                                    std::size_t beam_width, std::size_t k) {
    if (k == 0 || beam_width < k) {
        throw UsageError("beam search needs beam width >= k >= 1 (got width " +
                         std::to_string(beam_width) + ", k " + std::to_string(k) + ")");
    }
    (void)table;
    model.check_history(history);

    struct Beam {
        std::uint32_t node;
        double score;
        std::vector<std::uint32_t> tokens;
    };
    std::vector<Beam> live{{TokenTrie::root(), 0.0, {}}};
    std::vector<ScoredItem> done;
    while (!live.empty()) {
        std::vector<Beam> next;
        for (const Beam& b : live) {
            const auto* ctx = model.context(history, b.tokens);
            for (const auto& [token, child] : trie.node(b.node).children) {
                const double score =
                    b.score + std::log(model.probability(ctx, b.tokens.size(), token));
                const auto& node = trie.node(child);
                if (node.item != TokenTrie::kNoItem) {
                    done.push_back({node.item, score});
                } else {
                    Beam nb{child, score, b.tokens};
                    nb.tokens.push_back(token);
                    next.push_back(std::move(nb));
                }
            }
        }
        std::sort(next.begin(), next.end(), [](const Beam& a, const Beam& b) {
            if (a.score != b.score) {
                return a.score > b.score;
            }
            return a.tokens < b.tokens;
        });
        if (next.size() > beam_width) {
            next.resize(beam_width);
        }
        live = std::move(next);
    }
    std::sort(done.begin(), done.end(), ranks_before);
    if (done.size() > k) {
        done.resize(k);
    }
    return done;
}

std::vector<ScoredItem> brute_force_ranking(const MarkovTokenModel& model, const TokenTable& table,
                                            std::span<const TokenTuple> history) {
    model.check_history(history);
    std::vector<ScoredItem> out;
    out.reserve(table.size());
    for (std::size_t i = 0; i < table.size(); ++i) {
        out.push_back({i, model.sequence_log_prob(history, table.entries()[i].tuple.tokens())});
    }
    std::sort(out.begin(), out.end(), ranks_before);
    return out;
}

double recall_at_k(std::span<const std::vector<std::size_t>> predictions,
                   std::span<const std::size_t> truths, std::size_t k) {
    if (predictions.size() != truths.size()) {
        throw UsageError("recall needs one prediction list per event");
    }
    if (truths.empty()) {
        throw UsageError("recall needs at least one event");
    }
    std::size_t hits = 0;
    for (std::size_t e = 0; e < truths.size(); ++e) {
        const auto& p = predictions[e];
        const auto end = p.begin() + static_cast<std::ptrdiff_t>(std::min(k, p.size()));
        hits += std::find(p.begin(), end, truths[e]) != end ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(truths.size());
}

namespace {

std::size_t index_of(const TokenTable& table, const std::string& item_id, const std::string& user) {
    const auto i = table.find_item(item_id);
    if (!i) {
        throw ValidationError("sequence of user '" + user + "' references unknown item '" +
                              item_id + "'");
    }
    return *i;
}

}  // namespace

std::vector<EvalEvent> test_events(std::span<const SplitSequence> splits, const TokenTable& table) {
    std::vector<EvalEvent> events;
    for (const SplitSequence& s : splits) {
        std::vector<std::size_t> indices;
        for (const auto& id : s.items) {
            indices.push_back(index_of(table, id, s.user_id));
        }
        for (std::size_t t = std::max<std::size_t>(s.valid_end, 1); t < indices.size(); ++t) {
            events.push_back({s.user_id, {indices.begin(), indices.begin() + t}, indices[t]});
        }
    }
    return events;
}

std::vector<std::vector<TokenTuple>> training_sequences(std::span<const SplitSequence> splits,
                                                        const TokenTable& table) {
    std::vector<std::vector<TokenTuple>> out;
    for (const SplitSequence& s : splits) {
        std::vector<TokenTuple> seq;
        for (std::size_t t = 0; t < s.train_end; ++t) {
            seq.push_back(table.entries()[index_of(table, s.items[t], s.user_id)].tuple);
        }
        if (!seq.empty()) {
            out.push_back(std::move(seq));
        }
    }
    return out;
}

nlohmann::json EvalReport::to_json() const {
    return {{"K", ks},
            {"beam_width", beam_width},
            {"recall", recall},
            {"n_events", n_events},
            {"model_order", model_order}};
}

EvalReport evaluate_retrieval(const TokenTable& table, std::span<const SplitSequence> splits,
                              const EvalSettings& settings) {
    if (settings.ks.empty()) {
        throw UsageError("at least one K is required");
    }
    const std::size_t max_k = *std::max_element(settings.ks.begin(), settings.ks.end());
    if (*std::min_element(settings.ks.begin(), settings.ks.end()) == 0) {
        throw UsageError("K values must be positive");
    }
    if (settings.beam_width < max_k) {
        throw UsageError("beam width " + std::to_string(settings.beam_width) +
                         " is smaller than the largest K " + std::to_string(max_k));
    }
    const auto events = test_events(splits, table);
    if (events.empty()) {
        throw UsageError("no evaluation events (sequences too short or all filtered out)");
    }
    MarkovTokenModel model(table.levels(), table.codebook_size(), table.suffix_vocabulary(),
                           settings.order, settings.epsilon);
    model.fit(training_sequences(splits, table));
    const TokenTrie trie(table);

    std::vector<std::vector<std::size_t>> predictions(events.size());
    std::vector<std::size_t> truths(events.size());
    parallel_for(events.size(), 8, [&](std::size_t begin, std::size_t end) {
        for (std::size_t e = begin; e < end; ++e) {
            const auto& h = events[e].history;
            const std::size_t keep = std::min(h.size(), settings.order);
            std::vector<TokenTuple> history;
            for (std::size_t i = h.size() - keep; i < h.size(); ++i) {
                history.push_back(table.entries()[h[i]].tuple);
            }
            for (const ScoredItem& s :
                 beam_search(model, trie, table, history, settings.beam_width, max_k)) {
                predictions[e].push_back(s.item);
            }
            truths[e] = events[e].truth;
        }
    });

    EvalReport report;
    report.ks = settings.ks;
    report.beam_width = settings.beam_width;
    report.n_events = events.size();
    report.model_order = settings.order;
    for (std::size_t k : settings.ks) {
        report.recall.push_back(recall_at_k(predictions, truths, k));
    }
    return report;
}

TokenTable shuffle_assignment(const TokenTable& table, std::uint64_t seed) {
    std::vector<TokenTuple> tuples;
    for (const auto& e : table.entries()) {
        tuples.push_back(e.tuple);
    }
    Rng rng(derive_seed(seed, "baseline"));
    rng.shuffle(std::span<TokenTuple>(tuples));
    std::vector<TokenEntry> entries;
    for (std::size_t i = 0; i < tuples.size(); ++i) {
        entries.push_back({table.entries()[i].item_id, std::move(tuples[i])});
    }
    return TokenTable(table.levels(), table.codebook_size(), table.sharing(), table.checksum(),
                      std::move(entries));
}

}  // namespace ctok
