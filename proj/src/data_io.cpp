#include "ctok/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <unordered_map>

#include <json.hpp>

#include "ctok/error.hpp"
#include "ctok/rng.hpp"

namespace ctok {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::ifstream open_input(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ValidationError("cannot open " + path.string());
    }
    return in;
}

std::ofstream open_output(const fs::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw ValidationError("cannot write " + path.string());
    }
    return out;
}

[[noreturn]] void fail_at(const fs::path& path, std::size_t line, const std::string& what) {
    throw ValidationError(path.filename().string() + ":" + std::to_string(line) + ": " + what);
}

/// Calls fn(line_number, parsed_object) for every non-blank line.
template <typename Fn>
void for_each_json_line(const fs::path& path, Fn&& fn) {
    std::ifstream in = open_input(path);
    std::string text;
    std::size_t line = 0;
    while (std::getline(in, text)) {
        ++line;
        if (std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); })) {
            continue;
        }
        json record;
        try {
            record = json::parse(text);
        } catch (const json::exception& e) {
            fail_at(path, line, std::string("malformed JSON: ") + e.what());
        }
        if (!record.is_object()) {
            fail_at(path, line, "record must be a JSON object");
        }
        fn(line, record);
    }
}

std::string get_string(const json& record, const char* key, const fs::path& path, std::size_t line) {
    auto it = record.find(key);
    if (it == record.end() || !it->is_string()) {
        fail_at(path, line, std::string("missing string field '") + key + "'");
    }
    return it->get<std::string>();
}

std::string padded(const char* prefix, std::size_t value, std::size_t digits) {
    std::string s = std::to_string(value);
    if (s.size() < digits) {
        s.insert(0, digits - s.size(), '0');
    }
    return prefix + s;
}

}  // namespace

std::optional<std::size_t> DatasetManifest::modality_index(std::string_view name) const {
    for (std::size_t m = 0; m < modalities.size(); ++m) {
        if (modalities[m].name == name) {
            return m;
        }
    }
    return std::nullopt;
}

void DatasetManifest::validate() const {
    if (modalities.empty()) {
        throw ValidationError("manifest declares no modalities");
    }
    for (std::size_t m = 0; m < modalities.size(); ++m) {
        if (modalities[m].name.empty()) {
            throw ValidationError("manifest modality " + std::to_string(m) + " has no name");
        }
        if (modalities[m].width == 0) {
            throw ValidationError("manifest modality '" + modalities[m].name +
                                  "' must have positive width");
        }
        for (std::size_t k = 0; k < m; ++k) {
            if (modalities[k].name == modalities[m].name) {
                throw ValidationError("manifest modality '" + modalities[m].name +
                                      "' declared twice");
            }
        }
    }
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
    std::ifstream in = open_input(path);
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ValidationError(path.filename().string() + ": malformed manifest: " + e.what());
    }
    DatasetManifest manifest;
    try {
        for (const auto& m : doc.at("modalities")) {
            manifest.modalities.push_back(
                {m.at("name").get<std::string>(), m.at("width").get<std::size_t>()});
        }
        manifest.item_count = doc.value("item_count", std::size_t{0});
        manifest.label_levels = doc.value("label_levels", std::size_t{0});
        manifest.source = doc.value("source", std::string{});
    } catch (const json::exception& e) {
        throw ValidationError(path.filename().string() + ": " + e.what());
    }
    manifest.validate();
    return manifest;
}

void DatasetManifest::save(const fs::path& path) const {
    json doc;
    doc["modalities"] = json::array();
    for (const auto& m : modalities) {
        doc["modalities"].push_back({{"name", m.name}, {"width", m.width}});
    }
    doc["item_count"] = item_count;
    doc["label_levels"] = label_levels;
    doc["source"] = source;
    open_output(path) << doc.dump(2) << "\n";
}

std::vector<ItemRecord> load_items(const fs::path& path, const DatasetManifest& manifest) {
    manifest.validate();
    std::vector<ItemRecord> items;
    std::unordered_map<std::string, std::size_t> seen;
    for_each_json_line(path, [&](std::size_t line, const json& record) {
        ItemRecord item;
        item.item_id = get_string(record, "item_id", path, line);
        if (item.item_id.empty()) {
            fail_at(path, line, "empty item_id");
        }
        if (auto [it, fresh] = seen.emplace(item.item_id, line); !fresh) {
            fail_at(path, line, "duplicate item_id '" + item.item_id + "' (first seen on line " +
                                    std::to_string(it->second) + ")");
        }
        auto mods = record.find("modalities");
        if (mods == record.end() || !mods->is_object()) {
            fail_at(path, line, "missing object field 'modalities'");
        }
        item.embeddings.resize(manifest.modalities.size());
        std::vector<bool> present(manifest.modalities.size(), false);
        for (const auto& [name, values] : mods->items()) {
            const auto m = manifest.modality_index(name);
            if (!m) {
                fail_at(path, line, "unknown modality '" + name + "'");
            }
            if (!values.is_array()) {
                fail_at(path, line, "modality '" + name + "' must be an array of numbers");
            }
            const std::size_t width = manifest.modalities[*m].width;
            if (values.size() != width) {
                fail_at(path, line, "modality '" + name + "' has " + std::to_string(values.size()) +
                                        " values, manifest says " + std::to_string(width));
            }
            auto& out = item.embeddings[*m];
            out.reserve(width);
            for (const auto& v : values) {
                if (!v.is_number()) {
                    fail_at(path, line, "modality '" + name + "' contains a non-number");
                }
                const double x = v.get<double>();
                if (!std::isfinite(x)) {
                    fail_at(path, line, "modality '" + name + "' contains a non-finite value");
                }
                out.push_back(x);
            }
            present[*m] = true;
        }
        for (std::size_t m = 0; m < present.size(); ++m) {
            if (!present[m]) {
                fail_at(path, line, "missing modality '" + manifest.modalities[m].name + "'");
            }
        }
        items.push_back(std::move(item));
    });
    if (manifest.item_count != 0 && items.size() != manifest.item_count) {
        throw ValidationError(path.filename().string() + ": manifest declares " +
                              std::to_string(manifest.item_count) + " items, file has " +
                              std::to_string(items.size()));
    }
    return items;
}

void save_items(const fs::path& path, const std::vector<ItemRecord>& items,
                const DatasetManifest& manifest) {
    std::ofstream out = open_output(path);
    for (const auto& item : items) {
        if (item.embeddings.size() != manifest.modalities.size()) {
            throw ValidationError("item '" + item.item_id + "' has " + std::to_string(item.embeddings.size()) +
                                  " modalities, manifest has " + std::to_string(manifest.modalities.size()));
        }
        json mods = json::object();
        for (std::size_t m = 0; m < manifest.modalities.size(); ++m) {
            const auto& values = item.embeddings[m];
            if (values.size() != manifest.modalities[m].width) {
                throw ValidationError("item '" + item.item_id + "' modality '" + manifest.modalities[m].name +
                                      "' has width " + std::to_string(values.size()) + ", expected " +
                                      std::to_string(manifest.modalities[m].width));
            }
            if (!std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); })) {
                throw ValidationError("item '" + item.item_id + "' modality '" + manifest.modalities[m].name +
                                      "' has a non-finite value");
            }
            mods[manifest.modalities[m].name] = values;
        }
        out << json{{"item_id", item.item_id}, {"modalities", std::move(mods)}}.dump() << "\n";
    }
}

Tensor Dataset::modality_matrix(std::size_t modality) const {
    const std::size_t width = manifest.modalities.at(modality).width;
    Tensor out(items.size(), width);
    for (std::size_t i = 0; i < items.size(); ++i) {
        std::copy(items[i].embeddings[modality].begin(), items[i].embeddings[modality].end(),
                  out.row_span(i).begin());
    }
    return out;
}

Dataset load_dataset(const fs::path& dir) {
    if (!fs::is_directory(dir)) {
        throw ValidationError("dataset directory " + dir.string() + " does not exist");
    }
    Dataset data;
    data.manifest = DatasetManifest::load(dir / kManifestFile);
    data.items = load_items(dir / kItemsFile, data.manifest);
    if (data.items.empty()) {
        throw ValidationError("dataset " + dir.string() + " contains no items");
    }
    const fs::path labels = dir / kLabelsFile;
    if (data.manifest.label_levels > 0 && fs::exists(labels)) {
        std::unordered_map<std::string, std::size_t> index;
        for (std::size_t i = 0; i < data.items.size(); ++i) {
            index.emplace(data.items[i].item_id, i);
        }
        data.labels.assign(data.items.size(), {});
        std::size_t count = 0;
        for_each_json_line(labels, [&](std::size_t line, const json& record) {
            const std::string id = get_string(record, "item_id", labels, line);
            auto it = index.find(id);
            if (it == index.end()) {
                fail_at(labels, line, "label for unknown item '" + id + "'");
            }
            auto path_it = record.find("path");
            if (path_it == record.end() || !path_it->is_array() ||
                path_it->size() != data.manifest.label_levels) {
                fail_at(labels, line, "label path must list " +
                                          std::to_string(data.manifest.label_levels) + " indices");
            }
            try {
                data.labels[it->second] = path_it->get<std::vector<std::uint32_t>>();
            } catch (const json::exception&) {
                fail_at(labels, line, "label path must hold non-negative integers");
            }
            ++count;
        });
        if (count != data.items.size()) {
            throw ValidationError(std::string(kLabelsFile) + ": labels cover " +
                                  std::to_string(count) + " of " +
                                  std::to_string(data.items.size()) + " items");
        }
    }
    return data;
}

std::vector<UserSequence> load_sequences(const fs::path& path,
                                         const std::unordered_set<std::string>& known_items) {
    std::vector<UserSequence> users;
    for_each_json_line(path, [&](std::size_t line, const json& record) {
        UserSequence user;
        user.user_id = get_string(record, "user_id", path, line);
        auto items = record.find("items");
        if (items == record.end() || !items->is_array()) {
            fail_at(path, line, "missing array field 'items'");
        }
        for (const auto& v : *items) {
            if (!v.is_string()) {
                fail_at(path, line, "item ids must be strings");
            }
            std::string id = v.get<std::string>();
            if (!known_items.contains(id)) {
                fail_at(path, line, "unknown item '" + id + "'");
            }
            user.items.push_back(std::move(id));
        }
        users.push_back(std::move(user));
    });
    return users;
}

void save_sequences(const fs::path& path, const std::vector<UserSequence>& users) {
    std::ofstream out = open_output(path);
    for (const auto& user : users) {
        out << json{{"user_id", user.user_id}, {"items", user.items}}.dump() << "\n";
    }
}

std::vector<SplitSequence> filter_and_split(std::vector<UserSequence> users,
                                            const SequenceFilter& filter) {
    bool changed = true;
    while (changed) {
        changed = false;
        std::unordered_map<std::string, std::size_t> counts;
        for (const auto& u : users) {
            for (const auto& id : u.items) {
                ++counts[id];
            }
        }
        for (auto& u : users) {
            const auto before = u.items.size();
            std::erase_if(u.items, [&](const std::string& id) {
                return counts[id] < filter.min_item_count;
            });
            changed = changed || u.items.size() != before;
        }
        const auto before = users.size();
        std::erase_if(users, [&](const UserSequence& u) {
            return u.items.empty() || u.items.size() < filter.min_user_count;
        });
        changed = changed || users.size() != before;
    }

    std::vector<SplitSequence> out;
    out.reserve(users.size());
    for (auto& u : users) {
        const std::size_t n = u.items.size();
        SplitSequence s;
        s.user_id = std::move(u.user_id);
        s.train_end = n * 8 / 10;
        s.valid_end = n * 9 / 10;
        s.items = std::move(u.items);
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<SplitSequence> load_split_sequences(const fs::path& path,
                                                const std::unordered_set<std::string>& known_items,
                                                const SequenceFilter& filter) {
    return filter_and_split(load_sequences(path, known_items), filter);
}

void SyntheticSpec::validate() const {
    if (branching.empty()) {
        throw UsageError("synthetic hierarchy needs at least one level");
    }
    for (std::size_t b : branching) {
        if (b == 0) {
            throw UsageError("branching factors must be positive");
        }
    }
    if (items_per_leaf == 0) {
        throw UsageError("items per leaf must be positive");
    }
    if (latent_dim == 0 || modalities.empty()) {
        throw UsageError("latent dimension and modality list must be non-empty");
    }
    for (const auto& m : modalities) {
        if (m.width == 0 || m.noise < 0.0) {
            throw UsageError("modality '" + m.name + "' needs positive width and noise >= 0");
        }
    }
    if (min_length == 0 || max_length < min_length) {
        throw UsageError("sequence lengths must satisfy 0 < min <= max");
    }
    if (walk_affinity.size() != branching.size() + 1) {
        throw UsageError("walk affinity needs levels + 1 entries");
    }
    double total = 0.0;
    for (double p : walk_affinity) {
        if (p < 0.0) {
            throw UsageError("walk affinities must be non-negative");
        }
        total += p;
    }
    if (!(total > 0.0)) {
        throw UsageError("walk affinities must not all be zero");
    }
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    const std::size_t levels = spec.branching.size();
    const std::size_t dim = spec.latent_dim;
    Rng rng(derive_seed(spec.seed, "data"));

    // Walk the hierarchy depth-first; each node's centre is its parent's plus an offset
    // whose scale shrinks by scale_ratio per level.
    SyntheticData data;
    std::vector<std::vector<double>> leaf_centres;
    std::vector<std::vector<std::uint32_t>> leaf_paths;
    std::vector<std::vector<double>> stack_centres(levels + 1, std::vector<double>(dim, 0.0));
    std::vector<std::uint32_t> path(levels, 0);
    auto descend = [&](auto&& self, std::size_t level) -> void {
        if (level == levels) {
            leaf_centres.push_back(stack_centres[level]);
            leaf_paths.push_back(path);
            return;
        }
        const double scale = spec.top_scale * std::pow(spec.scale_ratio, static_cast<double>(level));
        for (std::size_t b = 0; b < spec.branching[level]; ++b) {
            path[level] = static_cast<std::uint32_t>(b);
            for (std::size_t p = 0; p < dim; ++p) {
                stack_centres[level + 1][p] = stack_centres[level][p] + scale * rng.normal();
            }
            if (level == 0) {
                data.top_centers.push_back(stack_centres[1]);
            }
            self(self, level + 1);
        }
    };
    descend(descend, 0);

    const std::size_t n_items = leaf_centres.size() * spec.items_per_leaf;
    std::size_t digits = 5;
    for (std::size_t v = n_items; v >= 100000; v /= 10) {
        ++digits;
    }

    std::vector<Tensor> projections;
    for (const auto& m : spec.modalities) {
        Tensor a(m.width, dim);
        const double s = 1.0 / std::sqrt(static_cast<double>(dim));
        for (double& v : a.values()) {
            v = s * rng.normal();
        }
        projections.push_back(std::move(a));
    }

    data.manifest.item_count = n_items;
    data.manifest.label_levels = levels;
    data.manifest.source = "synthetic hierarchy, seed " + std::to_string(spec.seed);
    for (const auto& m : spec.modalities) {
        data.manifest.modalities.push_back({m.name, m.width});
    }
    data.manifest.validate();

    for (std::size_t leaf = 0; leaf < leaf_centres.size(); ++leaf) {
        for (std::size_t j = 0; j < spec.items_per_leaf; ++j) {
            ItemRecord item;
            item.item_id = padded("item_", data.items.size(), digits);
            for (std::size_t m = 0; m < spec.modalities.size(); ++m) {
                const auto& mod = spec.modalities[m];
                std::vector<double> x(mod.width);
                for (std::size_t r = 0; r < mod.width; ++r) {
                    double acc = 0.0;
                    for (std::size_t p = 0; p < dim; ++p) {
                        acc += projections[m](r, p) * leaf_centres[leaf][p];
                    }
                    x[r] = mod.weight * acc + mod.noise * rng.normal();
                }
                item.embeddings.push_back(std::move(x));
            }
            data.items.push_back(std::move(item));
            data.labels.push_back(leaf_paths[leaf]);
            data.latents.push_back(leaf_centres[leaf]);
        }
    }

    // Group members at every depth: key = label prefix of that depth.
    std::vector<std::map<std::vector<std::uint32_t>, std::vector<std::size_t>>> groups(levels + 1);
    for (std::size_t i = 0; i < n_items; ++i) {
        for (std::size_t depth = 0; depth <= levels; ++depth) {
            std::vector<std::uint32_t> key(data.labels[i].begin(), data.labels[i].begin() + depth);
            groups[depth][key].push_back(i);
        }
    }

    Rng walk(derive_seed(spec.seed, "walks"));
    std::vector<std::size_t> successor;
    if (spec.deterministic_walks) {
        successor.resize(n_items);
        std::vector<std::size_t> order(n_items);
        std::iota(order.begin(), order.end(), std::size_t{0});
        walk.shuffle(std::span<std::size_t>(order));
        for (std::size_t k = 0; k < n_items; ++k) {
            successor[order[k]] = order[(k + 1) % n_items];
        }
    }
    double affinity_total = 0.0;
    for (double p : spec.walk_affinity) {
        affinity_total += p;
    }
    std::size_t user_digits = 4;
    for (std::size_t v = spec.users; v >= 10000; v /= 10) {
        ++user_digits;
    }
    for (std::size_t u = 0; u < spec.users; ++u) {
        UserSequence seq;
        seq.user_id = padded("user_", u, user_digits);
        const std::size_t length =
            spec.min_length + walk.index(spec.max_length - spec.min_length + 1);
        std::size_t current = walk.index(n_items);
        seq.items.push_back(data.items[current].item_id);
        while (seq.items.size() < length) {
            if (spec.deterministic_walks) {
                current = successor[current];
            } else {
                double draw = walk.uniform() * affinity_total;
                std::size_t choice = spec.walk_affinity.size() - 1;
                for (std::size_t k = 0; k < spec.walk_affinity.size(); ++k) {
                    if (draw < spec.walk_affinity[k]) {
                        choice = k;
                        break;
                    }
                    draw -= spec.walk_affinity[k];
                }
                // A group holding only the current item falls through to its parent.
                std::size_t depth = levels - choice;
                auto group_of = [&](std::size_t dpt) -> const std::vector<std::size_t>& {
                    std::vector<std::uint32_t> key(data.labels[current].begin(),
                                                   data.labels[current].begin() + dpt);
                    return groups[dpt].at(key);
                };
                while (depth > 0 && group_of(depth).size() == 1) {
                    --depth;
                }
                const auto& members = group_of(depth);
                if (members.size() == 1) {
                    current = members[0];
                } else {
                    // Uniform over the group, excluding the current item.
                    std::size_t pick = walk.index(members.size() - 1);
                    if (members[pick] == current) {
                        pick = members.size() - 1;
                    }
                    current = members[pick];
                }
            }
            seq.items.push_back(data.items[current].item_id);
        }
        data.sequences.push_back(std::move(seq));
    }
    return data;
}

void save_synthetic(const fs::path& dir, const SyntheticData& data) {
    fs::create_directories(dir);
    data.manifest.save(dir / kManifestFile);
    save_items(dir / kItemsFile, data.items, data.manifest);
    {
        std::ofstream out = open_output(dir / kLabelsFile);
        for (std::size_t i = 0; i < data.items.size(); ++i) {
            out << json{{"item_id", data.items[i].item_id}, {"path", data.labels[i]}}.dump() << "\n";
        }
    }
    save_sequences(dir / kSequencesFile, data.sequences);
}

}  // namespace ctok
