#include "ctok/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include <CLI11.hpp>
#include <json.hpp>

#include "ctok/data_io.hpp"
#include "ctok/error.hpp"
#include "ctok/parallel.hpp"
#include "ctok/retrieval.hpp"
#include "ctok/token_table.hpp"
#include "ctok/trainer.hpp"

namespace ctok {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kConfigEcho = "config.json";
constexpr const char* kCheckpointFile = "checkpoint.bin";
constexpr const char* kLastGoodFile = "checkpoint.last_good.bin";
constexpr const char* kReportFile = "train_report.csv";
constexpr const char* kTokensFile = "tokens.jsonl";
constexpr const char* kMetricsFile = "token_metrics.csv";
constexpr const char* kSummaryFile = "token_summary.json";
constexpr const char* kEvalFile = "eval_report.json";

json synthetic_to_json(const SyntheticSpec& s) {
    json mods = json::array();
    for (const auto& m : s.modalities) {
        mods.push_back({{"name", m.name}, {"width", m.width}, {"noise", m.noise}, {"weight", m.weight}});
    }
    return {{"branching", s.branching},
            {"items_per_leaf", s.items_per_leaf},
            {"latent_dim", s.latent_dim},
            {"top_scale", s.top_scale},
            {"scale_ratio", s.scale_ratio},
            {"modalities", mods},
            {"users", s.users},
            {"min_length", s.min_length},
            {"max_length", s.max_length},
            {"walk_affinity", s.walk_affinity},
            {"deterministic_walks", s.deterministic_walks},
            {"seed", s.seed}};
}

void apply_synthetic_json(SyntheticSpec& s, const json& doc) {
    if (!doc.is_object()) {
        throw ValidationError("synthetic config must be a JSON object");
    }
    for (const auto& [key, v] : doc.items()) {
        try {
            if (key == "branching") {
                s.branching = v.get<std::vector<std::size_t>>();
            } else if (key == "items_per_leaf") {
                s.items_per_leaf = v.get<std::size_t>();
            } else if (key == "latent_dim") {
                s.latent_dim = v.get<std::size_t>();
            } else if (key == "top_scale") {
                s.top_scale = v.get<double>();
            } else if (key == "scale_ratio") {
                s.scale_ratio = v.get<double>();
            } else if (key == "modalities") {
                s.modalities.clear();
                for (const auto& m : v) {
                    s.modalities.push_back({m.at("name").get<std::string>(),
                                            m.at("width").get<std::size_t>(),
                                            m.value("noise", 0.05), m.value("weight", 1.0)});
                }
            } else if (key == "users") {
                s.users = v.get<std::size_t>();
            } else if (key == "min_length") {
                s.min_length = v.get<std::size_t>();
            } else if (key == "max_length") {
                s.max_length = v.get<std::size_t>();
            } else if (key == "walk_affinity") {
                s.walk_affinity = v.get<std::vector<double>>();
            } else if (key == "deterministic_walks") {
                s.deterministic_walks = v.get<bool>();
            } else if (key == "seed") {
                s.seed = v.get<std::uint64_t>();
            } else {
                throw ValidationError("unknown synthetic config key '" + key + "'");
            }
        } catch (const json::exception& e) {
            throw ValidationError("synthetic config key '" + key + "': " + e.what());
        }
    }
}

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ValidationError("cannot open " + path.string());
    }
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ValidationError(path.filename().string() + ": " + e.what());
    }
}

json config_section(const std::string& config_path, const char* section) {
    if (config_path.empty()) {
        return json::object();
    }
    const json doc = read_json_file(config_path);
    if (!doc.is_object()) {
        throw ValidationError(config_path + ": config must be a JSON object");
    }
    auto it = doc.find(section);
    return it == doc.end() ? json::object() : *it;
}

/// Creates `dir`; refuses to reuse a non-empty directory unless `force`.
void prepare_output(const fs::path& dir, bool force) {
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) {
            throw UsageError("output path " + dir.string() + " exists and is not a directory");
        }
        if (!fs::is_empty(dir) && !force) {
            throw UsageError("output directory " + dir.string() +
                             " is not empty (pass --force to overwrite)");
        }
    }
    fs::create_directories(dir);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw ValidationError("cannot write " + path.string());
    }
    out << text;
}

void write_json(const fs::path& path, const json& doc) { write_text(path, doc.dump(2) + "\n"); }

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool force = false;
    std::size_t threads = 1;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out) {
    cmd->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "Random seed");
    auto* out = cmd->add_option("--out", c.out, "Output directory");
    if (needs_out) {
        out->required();
    }
    cmd->add_flag("--force", c.force, "Overwrite a non-empty output directory");
    cmd->add_option("--threads", c.threads, "Worker threads (results do not depend on it)")
        ->check(CLI::PositiveNumber);
}

int cmd_gen_synthetic(const Common& c, const json& overrides, std::ostream& out) {
    SyntheticSpec spec;
    apply_synthetic_json(spec, config_section(c.config, "synthetic"));
    apply_synthetic_json(spec, overrides);
    if (c.seed) {
        spec.seed = *c.seed;
    }
    spec.validate();
    const SyntheticData data = generate_synthetic(spec);
    prepare_output(c.out, c.force);
    SyntheticData stamped = data;
    stamped.manifest.source = "synthetic " + synthetic_to_json(spec).dump();
    save_synthetic(c.out, stamped);
    out << "wrote " << data.items.size() << " items and " << data.sequences.size()
        << " sequences to " << c.out << "\n";
    return kExitOk;
}

int cmd_train(const Common& c, const std::string& data_dir, const json& overrides, std::ostream& out) {
    TrainConfig config;
    apply_json(config, config_section(c.config, "train"));
    apply_json(config, overrides);
    if (c.seed) {
        config.seed = *c.seed;
    }
    const Dataset data = load_dataset(data_dir);
    config.validate(data.size());
    prepare_output(c.out, c.force);
    write_json(fs::path(c.out) / kConfigEcho,
               {{"command", "train"}, {"data", data_dir}, {"train", to_json(config)}});

    TrainHooks hooks;
    hooks.abort_checkpoint = fs::path(c.out) / kLastGoodFile;
    hooks.on_epoch = [&out](const EpochRow& r, const Model&) {
        char buf[200];
        std::snprintf(buf, sizeof buf,
                      "epoch %zu loss %.6f perplexity %.3f collision %.4f alpha %.5f (%.1fs)\n",
                      r.epoch, r.loss, r.perplexity, r.collision_rate, r.alpha, r.seconds);
        out << buf << std::flush;
    };
    const TrainResult result = train(config, data, hooks);
    save_checkpoint(fs::path(c.out) / kCheckpointFile, config, result.model);
    result.report.write_csv(fs::path(c.out) / kReportFile);
    out << "wrote " << (fs::path(c.out) / kCheckpointFile).string() << "\n";
    return kExitOk;
}

int cmd_tokenize(const Common& c, const std::string& checkpoint, const std::string& data_dir,
                 std::ostream& out) {
    const Checkpoint ckpt = load_checkpoint(checkpoint);
    const Dataset data = load_dataset(data_dir);
    const TokenTable table = assign_all(ckpt.model, data);
    prepare_output(c.out, c.force);
    const fs::path dir(c.out);
    export_table(table, dir / kTokensFile);

    // Raw codes in dataset order, for metrics and purity.
    std::vector<Codes> raw;
    raw.reserve(data.size());
    for (const auto& item : data.items) {
        raw.push_back(table.tuple_of(item.item_id).codes);
    }
    write_metrics_csv(raw, dir / kMetricsFile);
    json summary{{"items", table.size()},
                 {"levels", table.levels()},
                 {"codebook_size", table.codebook_size()},
                 {"collision_rate_raw", collision_rate(raw)},
                 {"collision_rate_final", 0.0},
                 {"identifier_perplexity", identifier_perplexity(raw)},
                 {"joint_perplexity", joint_perplexity(raw)},
                 {"codebook_checksum", table.checksum()}};
    json per_level = json::array();
    for (std::size_t l = 0; l < table.levels(); ++l) {
        per_level.push_back(code_perplexity(raw, l));
    }
    summary["level_perplexity"] = per_level;
    if (data.has_labels()) {
        std::vector<std::uint32_t> groups;
        std::vector<std::uint32_t> top;
        for (std::size_t i = 0; i < raw.size(); ++i) {
            groups.push_back(raw[i][0]);
            top.push_back(data.labels[i][0]);
        }
        summary["purity_level1"] = cluster_purity(groups, top);
        json deeper = json::array();
        const std::size_t depth = std::min(table.levels(), data.manifest.label_levels);
        for (std::size_t d = 1; d <= depth; ++d) {
            deeper.push_back(prefix_purity(raw, data.labels, d));
        }
        summary["prefix_purity"] = deeper;
    } else {
        summary["purity_level1"] = "unavailable (no labels)";
    }
    write_json(dir / kSummaryFile, summary);
    write_json(dir / kConfigEcho, {{"command", "tokenize"},
                                   {"checkpoint", checkpoint},
                                   {"data", data_dir},
                                   {"train", to_json(ckpt.config)}});
    out << "tokenized " << table.size() << " items; raw collision rate "
        << summary["collision_rate_raw"].get<double>() << ", identifier perplexity "
        << summary["identifier_perplexity"].get<double>() << "\n";
    return kExitOk;
}

struct EvalArgs {
    std::string table;
    std::string data;
    std::string sequences;
    std::string checkpoint;
    bool allow_mismatch = false;
    bool baseline = false;
};

void apply_eval_json(EvalSettings& s, SequenceFilter& f, const json& doc) {
    if (!doc.is_object()) {
        throw ValidationError("eval config must be a JSON object");
    }
    for (const auto& [key, v] : doc.items()) {
        try {
            if (key == "K") {
                s.ks = v.get<std::vector<std::size_t>>();
            } else if (key == "beam_width") {
                s.beam_width = v.get<std::size_t>();
            } else if (key == "order") {
                s.order = v.get<std::size_t>();
            } else if (key == "epsilon") {
                s.epsilon = v.get<double>();
            } else if (key == "min_item_count") {
                f.min_item_count = v.get<std::size_t>();
            } else if (key == "min_user_count") {
                f.min_user_count = v.get<std::size_t>();
            } else {
                throw ValidationError("unknown eval config key '" + key + "'");
            }
        } catch (const json::exception& e) {
            throw ValidationError("eval config key '" + key + "': " + e.what());
        }
    }
}

int cmd_eval(const Common& c, const EvalArgs& a, const json& overrides, std::ostream& out,
             std::ostream& err) {
    EvalSettings settings;
    SequenceFilter filter;
    apply_eval_json(settings, filter, config_section(c.config, "eval"));
    apply_eval_json(settings, filter, overrides);
    if (settings.ks.empty() || *std::min_element(settings.ks.begin(), settings.ks.end()) == 0) {
        throw UsageError("--k needs positive cutoffs");
    }
    const std::size_t max_k = *std::max_element(settings.ks.begin(), settings.ks.end());
    if (settings.beam_width < max_k) {
        throw UsageError("--beam " + std::to_string(settings.beam_width) +
                         " is smaller than the largest --k " + std::to_string(max_k));
    }
    TokenTable table = import_table(a.table);
    if (!a.checkpoint.empty()) {
        const Checkpoint ckpt = load_checkpoint(a.checkpoint);
        if (auto warning = check_codebooks(table, ckpt.model.codebooks, a.allow_mismatch)) {
            err << *warning << "\n";
        }
    }
    if (a.baseline) {
        table = shuffle_assignment(table, c.seed.value_or(42));
    }
    fs::path seq_path = a.sequences;
    if (seq_path.empty()) {
        if (a.data.empty()) {
            throw UsageError("eval-retrieval needs --sequences or --data");
        }
        seq_path = fs::path(a.data) / kSequencesFile;
    }
    std::unordered_set<std::string> known;
    for (const auto& e : table.entries()) {
        known.insert(e.item_id);
    }
    const auto splits = load_split_sequences(seq_path, known, filter);
    const EvalReport report = evaluate_retrieval(table, splits, settings);
    const json doc = report.to_json();
    if (!c.out.empty()) {
        prepare_output(c.out, c.force);
        write_json(fs::path(c.out) / kEvalFile, doc);
        write_json(fs::path(c.out) / kConfigEcho,
                   {{"command", "eval-retrieval"},
                    {"table", a.table},
                    {"sequences", seq_path.string()},
                    {"baseline_shuffle", a.baseline},
                    {"seed", c.seed.value_or(42)},
                    {"min_item_count", filter.min_item_count},
                    {"min_user_count", filter.min_user_count},
                    {"eval", {{"K", settings.ks},
                              {"beam_width", settings.beam_width},
                              {"order", settings.order},
                              {"epsilon", settings.epsilon}}}});
    }
    out << doc.dump() << "\n";
    return kExitOk;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& out_file, std::ostream& out) {
    json all = json::array();
    for (const auto& run : runs) {
        const fs::path dir(run);
        if (!fs::is_directory(dir)) {
            throw ValidationError("run directory " + run + " does not exist");
        }
        json entry{{"run", run}};
        if (fs::exists(dir / kConfigEcho)) {
            entry["command"] = read_json_file(dir / kConfigEcho).value("command", "");
        }
        if (fs::exists(dir / kReportFile)) {
            std::ifstream in(dir / kReportFile);
            std::string line;
            std::string last;
            std::size_t rows = 0;
            std::getline(in, line);
            while (std::getline(in, line)) {
                if (!line.empty()) {
                    last = line;
                    ++rows;
                }
            }
            entry["epochs"] = rows;
            if (!last.empty()) {
                std::vector<double> v;
                std::stringstream ss(last);
                std::string cell;
                while (std::getline(ss, cell, ',')) {
                    v.push_back(std::stod(cell));
                }
                if (v.size() >= 5) {
                    entry["final_loss"] = v[1];
                    entry["final_perplexity"] = v[2];
                    entry["final_collision_rate"] = v[3];
                }
            }
        }
        if (fs::exists(dir / kSummaryFile)) {
            entry["tokens"] = read_json_file(dir / kSummaryFile);
        }
        if (fs::exists(dir / kEvalFile)) {
            entry["retrieval"] = read_json_file(dir / kEvalFile);
        }
        all.push_back(entry);
    }
    if (!out_file.empty()) {
        write_json(out_file, all);
    }
    out << all.dump(2) << "\n";
    return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Contrastive multi-modal item tokenizer", "ctok"};
    app.require_subcommand(1);

    Common common;

    auto* gen = app.add_subcommand("gen-synthetic", "Generate a seeded hierarchical dataset");
    add_common(gen, common, true);
    std::vector<std::size_t> branching;
    std::size_t items_per_leaf = 0;
    std::size_t users = 0;
    bool deterministic = false;
    auto* o_branching =
        gen->add_option("--branching", branching, "Branching factor per level")->delimiter(',');
    auto* o_ipl = gen->add_option("--items-per-leaf", items_per_leaf, "Items per leaf");
    auto* o_users = gen->add_option("--users", users, "Number of users");
    gen->add_flag("--deterministic-walks", deterministic, "Fixed successor per item");

    auto* trn = app.add_subcommand("train", "Train encoders, fusion and codebooks");
    add_common(trn, common, true);
    std::string data_dir;
    trn->add_option("--data", data_dir, "Dataset directory")->required();
    std::size_t epochs = 0, batch = 0, codebook_size = 0, levels = 0, dim = 0;
    double tau = 0, alpha0 = 0, lr = 0;
    bool shared = true, no_head = false, hard = false, constant_alpha = false, no_noise = false;
    std::string negatives;
    std::vector<std::size_t> hidden;
    auto* o_epochs = trn->add_option("--epochs", epochs, "Training epochs");
    auto* o_batch = trn->add_option("--batch", batch, "Batch size");
    auto* o_tau = trn->add_option("--tau", tau, "Contrastive temperature");
    auto* o_alpha0 = trn->add_option("--alpha0", alpha0, "Initial soft-assignment temperature");
    auto* o_lr = trn->add_option("--lr", lr, "Adam learning rate");
    auto* o_k = trn->add_option("--codebook-size", codebook_size, "Codewords per level");
    auto* o_levels = trn->add_option("--levels", levels, "Quantization levels");
    auto* o_dim = trn->add_option("--dim", dim, "Latent dimension");
    auto* o_hidden = trn->add_option("--hidden", hidden, "Encoder hidden widths")->delimiter(',');
    auto* o_shared = trn->add_option("--shared-codebook", shared, "Share one codebook across levels");
    auto* o_neg = trn->add_option("--negatives", negatives, "Negative set: both, recon or modal")
                      ->check(CLI::IsMember({"both", "recon", "modal"}));
    auto* o_nohead = trn->add_flag("--no-projection-head", no_head, "Ablation: identity head");
    auto* o_hard = trn->add_flag("--hard-assignment", hard, "Ablation: hard codes, frozen codebooks");
    auto* o_const = trn->add_flag("--constant-alpha", constant_alpha, "Keep alpha at --alpha0");
    auto* o_nonoise = trn->add_flag("--no-gumbel", no_noise, "Disable Gumbel noise");

    auto* tok = app.add_subcommand("tokenize", "Assign identifiers to every item");
    add_common(tok, common, true);
    std::string checkpoint;
    tok->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    tok->add_option("--data", data_dir, "Dataset directory")->required();

    auto* ev = app.add_subcommand("eval-retrieval", "Recall@K of generative retrieval");
    add_common(ev, common, false);
    EvalArgs eval;
    ev->add_option("--table", eval.table, "Token table")->required();
    ev->add_option("--data", eval.data, "Dataset directory holding sequences.jsonl");
    ev->add_option("--sequences", eval.sequences, "Sequence file");
    ev->add_option("--checkpoint", eval.checkpoint, "Checkpoint to verify the table against");
    ev->add_flag("--allow-checksum-mismatch", eval.allow_mismatch,
                 "Proceed when the table was built from different codebooks");
    ev->add_flag("--baseline-shuffle", eval.baseline, "Shuffle identifiers among items first");
    std::vector<std::size_t> ks;
    std::size_t beam = 0, order = 0, min_items = 0, min_users = 0;
    auto* o_ks = ev->add_option("--k", ks, "Cutoffs (default 5,10)")->delimiter(',');
    auto* o_beam = ev->add_option("--beam", beam, "Beam width (default 50)");
    auto* o_order = ev->add_option("--order", order, "Markov order in items (default 2)")
                        ->check(CLI::PositiveNumber);
    auto* o_min_items = ev->add_option("--min-item-count", min_items, "Item threshold (default 10)");
    auto* o_min_users = ev->add_option("--min-user-count", min_users, "User threshold (default 10)");

    auto* rep = app.add_subcommand("report", "Summarize run directories");
    std::vector<std::string> runs;
    std::string report_out;
    rep->add_option("--run", runs, "Run directory")->required();
    rep->add_option("--out", report_out, "Write the summary JSON here");

    std::vector<const char*> argv;
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        set_num_threads(common.threads);
        if (gen->parsed()) {
            json o = json::object();
            if (o_branching->count()) o["branching"] = branching;
            if (o_ipl->count()) o["items_per_leaf"] = items_per_leaf;
            if (o_users->count()) o["users"] = users;
            if (deterministic) o["deterministic_walks"] = true;
            return cmd_gen_synthetic(common, o, out);
        }
        if (trn->parsed()) {
            json o = json::object();
            if (o_epochs->count()) o["epochs"] = epochs;
            if (o_batch->count()) o["batch"] = batch;
            if (o_tau->count()) o["tau"] = tau;
            if (o_alpha0->count()) o["alpha0"] = alpha0;
            if (o_lr->count()) o["lr"] = lr;
            if (o_k->count()) o["codebook_size"] = codebook_size;
            if (o_levels->count()) o["levels"] = levels;
            if (o_dim->count()) o["dim"] = dim;
            if (o_hidden->count()) o["hidden"] = hidden;
            if (o_shared->count()) o["sharing"] = shared ? "shared" : "per-level";
            if (o_neg->count()) o["negatives"] = negatives;
            if (o_nohead->count()) o["projection_head"] = false;
            if (o_hard->count()) o["soft_path"] = false;
            if (o_const->count()) o["anneal"] = false;
            if (o_nonoise->count()) o["gumbel_noise"] = false;
            return cmd_train(common, data_dir, o, out);
        }
        if (tok->parsed()) {
            return cmd_tokenize(common, checkpoint, data_dir, out);
        }
        if (ev->parsed()) {
            json o = json::object();
            if (o_ks->count()) o["K"] = ks;
            if (o_beam->count()) o["beam_width"] = beam;
            if (o_order->count()) o["order"] = order;
            if (o_min_items->count()) o["min_item_count"] = min_items;
            if (o_min_users->count()) o["min_user_count"] = min_users;
            return cmd_eval(common, eval, o, out, err);
        }
        if (rep->parsed()) {
            return cmd_report(runs, report_out, out);
        }
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ValidationError& e) {
        err << "invalid input: " << e.what() << "\n";
        return kExitValidation;
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitInternal;
    }
    return kExitUsage;
}

}  // namespace ctok
