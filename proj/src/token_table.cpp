#include "ctok/token_table.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include <json.hpp>

#include "ctok/data_io.hpp"
#include "ctok/error.hpp"
#include "ctok/trainer.hpp"

namespace ctok {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string key_of(std::span<const std::uint32_t> tokens) {
    std::string key;
    key.reserve(tokens.size() * 4);
    for (std::uint32_t t : tokens) {
        for (int b = 0; b < 4; ++b) {
            key.push_back(static_cast<char>((t >> (8 * b)) & 0xff));
        }
    }
    return key;
}

std::string tuple_key(const TokenTuple& t) {
    std::string key = key_of(t.codes);
    key.push_back(t.disambiguator ? 'S' : 'N');
    if (t.disambiguator) {
        key += key_of(std::span<const std::uint32_t>(&*t.disambiguator, 1));
    }
    return key;
}

void require_nonempty(std::span<const Codes> raw) {
    if (raw.empty()) {
        throw UsageError("code statistics need at least one item");
    }
}

double entropy_of(const std::map<std::string, std::size_t>& counts, std::size_t total) {
    double h = 0.0;
    for (const auto& [key, c] : counts) {
        const double p = static_cast<double>(c) / static_cast<double>(total);
        h -= p * std::log(p);
    }
    return h;
}

}  // namespace

std::vector<std::uint32_t> TokenTuple::tokens() const {
    std::vector<std::uint32_t> out = codes;
    if (disambiguator) {
        out.push_back(*disambiguator);
    }
    return out;
}

std::string to_string(const TokenTuple& tuple) {
    std::string s = "(";
    for (std::size_t i = 0; i < tuple.codes.size(); ++i) {
        s += (i ? "," : "") + std::to_string(tuple.codes[i]);
    }
    if (tuple.disambiguator) {
        s += "|" + std::to_string(*tuple.disambiguator);
    }
    return s + ")";
}

TokenTable::TokenTable(std::size_t levels, std::size_t codebook_size, CodebookSharing sharing,
                       std::string checksum, std::vector<TokenEntry> entries)
    : levels_(levels),
      size_(codebook_size),
      sharing_(sharing),
      checksum_(std::move(checksum)),
      entries_(std::move(entries)) {
    if (levels_ == 0 || size_ == 0) {
        throw ValidationError("token table needs positive levels and codebook size");
    }
    std::sort(entries_.begin(), entries_.end(),
              [](const TokenEntry& a, const TokenEntry& b) { return a.item_id < b.item_id; });
    std::map<std::string, bool> raw_suffixed;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const TokenEntry& e = entries_[i];
        if (e.tuple.codes.size() != levels_) {
            throw ValidationError("item '" + e.item_id + "' has " +
                                  std::to_string(e.tuple.codes.size()) + " codes, expected " +
                                  std::to_string(levels_));
        }
        for (std::uint32_t c : e.tuple.codes) {
            if (c >= size_) {
                throw ValidationError("item '" + e.item_id + "' has code " + std::to_string(c) +
                                      " outside [0, " + std::to_string(size_) + ")");
            }
        }
        if (!by_item_.emplace(e.item_id, i).second) {
            throw ValidationError("duplicate item id '" + e.item_id + "'");
        }
        if (auto [it, fresh] = by_tuple_.emplace(tuple_key(e.tuple), i); !fresh) {
            throw ValidationError("identifier " + to_string(e.tuple) + " assigned to both '" +
                                  entries_[it->second].item_id + "' and '" + e.item_id + "'");
        }
        const bool suffixed = e.tuple.disambiguator.has_value();
        if (auto [it, fresh] = raw_suffixed.emplace(key_of(e.tuple.codes), suffixed);
            !fresh && it->second != suffixed) {
            throw ValidationError("codes of item '" + e.item_id +
                                  "' appear both with and without a suffix");
        }
        if (suffixed) {
            suffix_vocab_ = std::max<std::size_t>(suffix_vocab_, *e.tuple.disambiguator + 1);
        }
    }
}

std::optional<std::size_t> TokenTable::find_item(std::string_view item_id) const {
    auto it = by_item_.find(std::string(item_id));
    if (it == by_item_.end()) {
        return std::nullopt;
    }
    return it->second;
}

std::optional<std::size_t> TokenTable::find_tuple(const TokenTuple& tuple) const {
    auto it = by_tuple_.find(tuple_key(tuple));
    if (it == by_tuple_.end()) {
        return std::nullopt;
    }
    return it->second;
}

const TokenTuple& TokenTable::tuple_of(std::string_view item_id) const {
    const auto i = find_item(item_id);
    if (!i) {
        throw ValidationError("item '" + std::string(item_id) + "' is not in the token table");
    }
    return entries_[*i].tuple;
}

const std::string& TokenTable::item_of(const TokenTuple& tuple) const {
    const auto i = find_tuple(tuple);
    if (!i) {
        throw ValidationError("identifier " + to_string(tuple) + " is not in the token table");
    }
    return entries_[*i].item_id;
}

std::vector<Codes> TokenTable::raw_codes() const {
    std::vector<Codes> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) {
        out.push_back(e.tuple.codes);
    }
    return out;
}

TokenTable assign_tokens(std::span<const std::string> item_ids, std::span<const Codes> raw,
                         const CodebookStack& codebooks) {
    if (item_ids.size() != raw.size()) {
        throw UsageError("assign_tokens: " + std::to_string(item_ids.size()) + " ids for " +
                         std::to_string(raw.size()) + " code tuples");
    }
    std::vector<std::size_t> order(item_ids.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return item_ids[a] < item_ids[b]; });

    std::map<Codes, std::vector<std::size_t>> groups;
    for (std::size_t i : order) {
        groups[raw[i]].push_back(i);
    }
    std::vector<TokenEntry> entries;
    entries.reserve(raw.size());
    for (std::size_t i : order) {
        TokenEntry e{item_ids[i], {raw[i], std::nullopt}};
        const auto& members = groups[raw[i]];
        if (members.size() > 1) {
            const auto pos = std::find(members.begin(), members.end(), i) - members.begin();
            e.tuple.disambiguator = static_cast<std::uint32_t>(pos);
        }
        entries.push_back(std::move(e));
    }
    return TokenTable(codebooks.levels(), codebooks.codebook_size(), codebooks.sharing(),
                      codebooks.checksum(), std::move(entries));
}

TokenTable assign_all(const Model& model, const Dataset& data) {
    const std::vector<Codes> raw = hard_quantize(model.embed(data), model.codebooks);
    std::vector<std::string> ids;
    ids.reserve(data.items.size());
    for (const auto& item : data.items) {
        ids.push_back(item.item_id);
    }
    return assign_tokens(ids, raw, model.codebooks);
}

double prefix_collision_rate(std::span<const Codes> raw, std::size_t depth) {
    require_nonempty(raw);
    std::set<std::string> distinct;
    for (const Codes& c : raw) {
        const std::size_t n = std::min(depth, c.size());
        distinct.insert(key_of(std::span<const std::uint32_t>(c.data(), n)));
    }
    return 1.0 - static_cast<double>(distinct.size()) / static_cast<double>(raw.size());
}

double collision_rate(std::span<const Codes> raw) {
    require_nonempty(raw);
    return prefix_collision_rate(raw, raw.front().size());
}

double usage_entropy(std::span<const Codes> raw, std::size_t level) {
    require_nonempty(raw);
    std::map<std::string, std::size_t> counts;
    for (const Codes& c : raw) {
        ++counts[std::to_string(c.at(level))];
    }
    return entropy_of(counts, raw.size());
}

double code_perplexity(std::span<const Codes> raw, std::size_t level) {
    return std::exp(usage_entropy(raw, level));
}

double identifier_perplexity(std::span<const Codes> raw) {
    require_nonempty(raw);
    const std::size_t levels = raw.front().size();
    double mean_entropy = 0.0;
    for (std::size_t l = 0; l < levels; ++l) {
        mean_entropy += usage_entropy(raw, l);
    }
    return std::exp(mean_entropy / static_cast<double>(levels));
}

double joint_perplexity(std::span<const Codes> raw) {
    require_nonempty(raw);
    std::map<std::string, std::size_t> counts;
    for (const Codes& c : raw) {
        ++counts[key_of(c)];
    }
    return std::exp(entropy_of(counts, raw.size()));
}

double cluster_purity(std::span<const std::uint32_t> groups, std::span<const std::uint32_t> labels) {
    if (groups.size() != labels.size()) {
        throw UsageError("purity needs one label per item");
    }
    if (groups.empty()) {
        throw UsageError("purity needs at least one item");
    }
    std::map<std::uint32_t, std::map<std::uint32_t, std::size_t>> table;
    for (std::size_t i = 0; i < groups.size(); ++i) {
        ++table[groups[i]][labels[i]];
    }
    std::size_t majority = 0;
    for (const auto& [g, counts] : table) {
        std::size_t best = 0;
        for (const auto& [label, c] : counts) {
            best = std::max(best, c);
        }
        majority += best;
    }
    return static_cast<double>(majority) / static_cast<double>(groups.size());
}

double prefix_purity(std::span<const Codes> raw, std::span<const std::vector<std::uint32_t>> labels,
                     std::size_t depth) {
    if (raw.size() != labels.size()) {
        throw UsageError("purity needs one label per item");
    }
    require_nonempty(raw);
    std::map<std::string, std::map<std::string, std::size_t>> table;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (raw[i].size() < depth || labels[i].size() < depth) {
            throw UsageError("purity depth exceeds code or label length");
        }
        ++table[key_of(std::span<const std::uint32_t>(raw[i].data(), depth))]
               [key_of(std::span<const std::uint32_t>(labels[i].data(), depth))];
    }
    std::size_t majority = 0;
    for (const auto& [g, counts] : table) {
        std::size_t best = 0;
        for (const auto& [label, c] : counts) {
            best = std::max(best, c);
        }
        majority += best;
    }
    return static_cast<double>(majority) / static_cast<double>(raw.size());
}

void export_table(const TokenTable& table, const fs::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw ValidationError("cannot write " + path.string());
    }
    const json header{{"levels", table.levels()},
                      {"codebook_size", table.codebook_size()},
                      {"sharing", std::string(to_string(table.sharing()))},
                      {"codebook_checksum", table.checksum()}};
    out << header.dump() << "\n";
    for (const auto& e : table.entries()) {
        json record{{"item_id", e.item_id}, {"codes", e.tuple.codes}};
        if (e.tuple.disambiguator) {
            record["disambiguator"] = *e.tuple.disambiguator;
        }
        out << record.dump() << "\n";
    }
}

TokenTable import_table(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ValidationError("cannot open token table " + path.string());
    }
    const std::string name = path.filename().string();
    auto fail = [&](std::size_t line, const std::string& what) -> void {
        throw ValidationError(name + ":" + std::to_string(line) + ": " + what);
    };

    std::string text;
    std::size_t line = 0;
    std::size_t levels = 0;
    std::size_t k = 0;
    CodebookSharing sharing = CodebookSharing::Shared;
    std::string checksum;
    bool have_header = false;
    std::vector<TokenEntry> entries;
    std::map<std::string, std::size_t> item_lines;
    std::map<std::string, std::size_t> tuple_lines;

    while (std::getline(in, text)) {
        ++line;
        if (text.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        json doc;
        try {
            doc = json::parse(text);
        } catch (const json::parse_error& e) {
            fail(line, std::string("malformed JSON: ") + e.what());
        }
        if (!doc.is_object()) {
            fail(line, "expected a JSON object");
        }
        try {
            if (!have_header) {
                levels = doc.at("levels").get<std::size_t>();
                k = doc.at("codebook_size").get<std::size_t>();
                sharing = parse_sharing(doc.at("sharing").get<std::string>());
                checksum = doc.at("codebook_checksum").get<std::string>();
                if (levels == 0 || k == 0) {
                    fail(line, "header needs positive levels and codebook_size");
                }
                have_header = true;
                continue;
            }
            for (const auto& [key, value] : doc.items()) {
                if (key != "item_id" && key != "codes" && key != "disambiguator") {
                    fail(line, "unexpected field '" + key + "'");
                }
            }
            TokenEntry e;
            e.item_id = doc.at("item_id").get<std::string>();
            if (e.item_id.empty()) {
                fail(line, "empty item_id");
            }
            const json& codes = doc.at("codes");
            if (!codes.is_array() || codes.size() != levels) {
                fail(line, "codes must be an array of " + std::to_string(levels) + " integers");
            }
            for (const auto& c : codes) {
                if (!c.is_number_unsigned()) {
                    fail(line, "codes must be non-negative integers");
                }
                const auto v = c.get<std::uint64_t>();
                if (v >= k) {
                    fail(line, "code " + std::to_string(v) + " outside [0, " + std::to_string(k) +
                                   ")");
                }
                e.tuple.codes.push_back(static_cast<std::uint32_t>(v));
            }
            if (auto d = doc.find("disambiguator"); d != doc.end()) {
                if (!d->is_number_unsigned() || d->get<std::uint64_t>() > 0xffffffffULL) {
                    fail(line, "disambiguator must be a non-negative integer");
                }
                e.tuple.disambiguator = d->get<std::uint32_t>();
            }
            if (auto [it, fresh] = item_lines.emplace(e.item_id, line); !fresh) {
                fail(line, "duplicate item_id '" + e.item_id + "' (first on line " +
                               std::to_string(it->second) + ")");
            }
            if (auto [it, fresh] = tuple_lines.emplace(tuple_key(e.tuple), line); !fresh) {
                fail(line, "duplicate identifier " + to_string(e.tuple) + " (first on line " +
                               std::to_string(it->second) + ")");
            }
            entries.push_back(std::move(e));
        } catch (const json::exception& e) {
            fail(line, e.what());
        } catch (const UsageError& e) {
            fail(line, e.what());
        }
    }
    if (!have_header) {
        throw ValidationError(name + ": missing header line");
    }
    return TokenTable(levels, k, sharing, std::move(checksum), std::move(entries));
}

std::optional<std::string> check_codebooks(const TokenTable& table, const CodebookStack& codebooks,
                                           bool allow_mismatch) {
    const std::string actual = codebooks.checksum();
    if (actual == table.checksum()) {
        return std::nullopt;
    }
    const std::string message = "token table checksum " + table.checksum() +
                                " does not match codebook checksum " + actual;
    if (!allow_mismatch) {
        throw ValidationError(message + " (pass the override flag to proceed)");
    }
    return "warning: " + message;
}

void write_metrics_csv(std::span<const Codes> raw, const fs::path& path) {
    require_nonempty(raw);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw ValidationError("cannot write " + path.string());
    }
    out << "level,perplexity,usage_entropy,collision_rate_raw\n";
    char buf[256];
    const std::size_t levels = raw.front().size();
    for (std::size_t l = 0; l < levels; ++l) {
        const double h = usage_entropy(raw, l);
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", l + 1, std::exp(h), h,
                      prefix_collision_rate(raw, l + 1));
        out << buf;
    }
    const double ident = identifier_perplexity(raw);
    const double full = collision_rate(raw);
    std::snprintf(buf, sizeof buf, "identifier,%.17g,%.17g,%.17g\n", ident, std::log(ident), full);
    out << buf;
    const double joint = joint_perplexity(raw);
    std::snprintf(buf, sizeof buf, "joint,%.17g,%.17g,%.17g\n", joint, std::log(joint), full);
    out << buf;
}

}  // namespace ctok
