#include "ctok/trainer.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include "ctok/adam.hpp"
#include "ctok/error.hpp"
#include "ctok/token_table.hpp"

namespace ctok {

using nlohmann::json;
namespace fs = std::filesystem;

AlphaSchedule TrainConfig::schedule() const {
    if (!anneal) {
        return AlphaSchedule::fixed(alpha0);
    }
    return AlphaSchedule::annealed(alpha0, alpha_floor, epochs);
}

void TrainConfig::validate(std::size_t dataset_size) const {
    auto positive = [](std::size_t v, const char* name) {
        if (v == 0) {
            throw UsageError(std::string(name) + " must be positive");
        }
    };
    positive(levels, "levels");
    positive(codebook_size, "codebook size");
    positive(dim, "embedding dimension");
    positive(batch, "batch size");
    for (std::size_t h : hidden) {
        positive(h, "hidden layer width");
    }
    if (!(tau > 0.0)) {
        throw UsageError("tau must be positive");
    }
    if (!(alpha0 > 0.0) || (anneal && !(alpha_floor > 0.0))) {
        throw UsageError("alpha and its floor must be positive");
    }
    if (!(lr >= 0.0) || !std::isfinite(lr)) {
        throw UsageError("learning rate must be finite and non-negative");
    }
    if (!(grad_clip >= 0.0) || !(init_jitter >= 0.0)) {
        throw UsageError("grad_clip and init_jitter must be non-negative");
    }
    if (dataset_size == 0) {
        throw UsageError("cannot train on an empty dataset");
    }
    if (batch > dataset_size) {
        throw UsageError("batch size " + std::to_string(batch) + " exceeds dataset size " +
                         std::to_string(dataset_size));
    }
}

json to_json(const TrainConfig& c) {
    return json{
        {"levels", c.levels},
        {"codebook_size", c.codebook_size},
        {"dim", c.dim},
        {"hidden", c.hidden},
        {"proj_dim", c.proj_dim},
        {"tau", c.tau},
        {"alpha0", c.alpha0},
        {"alpha_floor", c.alpha_floor},
        {"anneal", c.anneal},
        {"lr", c.lr},
        {"batch", c.batch},
        {"epochs", c.epochs},
        {"seed", c.seed},
        {"negatives", std::string(to_string(c.negatives))},
        {"sharing", std::string(to_string(c.sharing))},
        {"gumbel_noise", c.gumbel_noise},
        {"soft_path", c.soft_path},
        {"projection_head", c.projection_head},
        {"similarity", c.similarity == Similarity::Cosine ? "cosine" : "dot"},
        {"grad_clip", c.grad_clip},
        {"init_jitter", c.init_jitter},
        {"normalize_latent", c.normalize_latent},
        {"noise_scaled_by_alpha", c.noise_scaled_by_alpha},
    };
}

void apply_json(TrainConfig& c, const json& doc) {
    if (!doc.is_object()) {
        throw ValidationError("train config must be a JSON object");
    }
    for (const auto& [key, value] : doc.items()) {
        try {
            if (key == "levels") {
                c.levels = value.get<std::size_t>();
            } else if (key == "codebook_size") {
                c.codebook_size = value.get<std::size_t>();
            } else if (key == "dim") {
                c.dim = value.get<std::size_t>();
            } else if (key == "hidden") {
                c.hidden = value.get<std::vector<std::size_t>>();
            } else if (key == "proj_dim") {
                c.proj_dim = value.get<std::size_t>();
            } else if (key == "tau") {
                c.tau = value.get<double>();
            } else if (key == "alpha0") {
                c.alpha0 = value.get<double>();
            } else if (key == "alpha_floor") {
                c.alpha_floor = value.get<double>();
            } else if (key == "anneal") {
                c.anneal = value.get<bool>();
            } else if (key == "lr") {
                c.lr = value.get<double>();
            } else if (key == "batch") {
                c.batch = value.get<std::size_t>();
            } else if (key == "epochs") {
                c.epochs = value.get<std::size_t>();
            } else if (key == "seed") {
                c.seed = value.get<std::uint64_t>();
            } else if (key == "negatives") {
                c.negatives = NegativePolicy::parse(value.get<std::string>());
            } else if (key == "sharing") {
                c.sharing = parse_sharing(value.get<std::string>());
            } else if (key == "gumbel_noise") {
                c.gumbel_noise = value.get<bool>();
            } else if (key == "soft_path") {
                c.soft_path = value.get<bool>();
            } else if (key == "projection_head") {
                c.projection_head = value.get<bool>();
            } else if (key == "similarity") {
                const auto s = value.get<std::string>();
                if (s != "cosine" && s != "dot") {
                    throw ValidationError("similarity must be 'cosine' or 'dot'");
                }
                c.similarity = s == "cosine" ? Similarity::Cosine : Similarity::RawDot;
            } else if (key == "grad_clip") {
                c.grad_clip = value.get<double>();
            } else if (key == "init_jitter") {
                c.init_jitter = value.get<double>();
            } else if (key == "normalize_latent") {
                c.normalize_latent = value.get<bool>();
            } else if (key == "noise_scaled_by_alpha") {
                c.noise_scaled_by_alpha = value.get<bool>();
            } else {
                throw ValidationError("unknown train config key '" + key + "'");
            }
        } catch (const json::exception& e) {
            throw ValidationError("train config key '" + key + "': " + e.what());
        } catch (const UsageError& e) {
            throw ValidationError("train config key '" + key + "': " + e.what());
        }
    }
}

Model Model::initialize(const TrainConfig& config, const DatasetManifest& manifest) {
    manifest.validate();
    Rng rng(derive_seed(config.seed, "init"));
    Model model;
    model.normalize_latent = config.normalize_latent;
    model.modalities = manifest.modalities;
    for (const auto& m : manifest.modalities) {
        model.encoders.push_back({m.name, Mlp(m.width, config.hidden, config.dim, rng)});
    }
    model.fusion = AttentionFusion::make(config.dim, rng);
    model.head = config.projection_head
                     ? ProjectionHead::make(config.dim, config.projection_dim(), rng)
                     : ProjectionHead::identity();
    model.codebooks =
        CodebookStack(config.levels, config.codebook_size, config.dim, config.sharing);
    return model;
}

Tensor Model::embed(std::span<const Tensor> inputs) const {
    if (inputs.size() != encoders.size()) {
        throw UsageError("expected " + std::to_string(encoders.size()) + " modality inputs, got " +
                         std::to_string(inputs.size()));
    }
    std::vector<Tensor> zs;
    zs.reserve(inputs.size());
    for (std::size_t m = 0; m < inputs.size(); ++m) {
        zs.push_back(encoders[m].encode(inputs[m]));
    }
    Tensor z = fusion.fuse(zs).embedding;
    if (normalize_latent) {
        Tape tape;
        return tape.value(tape.normalize_rows(tape.constant(std::move(z))));
    }
    return z;
}

Tensor Model::embed(const Dataset& data) const {
    constexpr std::size_t chunk = 1024;
    const std::size_t n = data.size();
    const std::size_t dim = encoders.front().network.output_width();
    Tensor out(n, dim);
    std::vector<Tensor> all;
    for (std::size_t m = 0; m < modalities.size(); ++m) {
        const auto idx = data.manifest.modality_index(modalities[m].name);
        if (!idx || data.manifest.modalities[*idx].width != modalities[m].width) {
            throw ValidationError("dataset does not provide modality '" + modalities[m].name +
                                  "' with width " + std::to_string(modalities[m].width));
        }
        all.push_back(data.modality_matrix(*idx));
    }
    for (std::size_t begin = 0; begin < n; begin += chunk) {
        const std::size_t end = std::min(n, begin + chunk);
        std::vector<std::size_t> rows(end - begin);
        std::iota(rows.begin(), rows.end(), begin);
        std::vector<Tensor> inputs;
        for (const Tensor& x : all) {
            inputs.push_back(gather_rows(x, rows));
        }
        const Tensor z = embed(inputs);
        std::copy(z.values().begin(), z.values().end(), out.row_span(begin).begin());
    }
    return out;
}

std::vector<Model::Param> Model::parameters() {
    std::vector<Param> out;
    for (auto& enc : encoders) {
        auto& layers = enc.network.layers();
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const std::string prefix = "encoder." + enc.modality + "." + std::to_string(i);
            out.push_back({prefix + ".weight", &layers[i].weight});
            out.push_back({prefix + ".bias", &layers[i].bias});
        }
    }
    out.push_back({"fusion.query", &fusion.query});
    if (head.enabled) {
        out.push_back({"head.0.weight", &head.first.weight});
        out.push_back({"head.0.bias", &head.first.bias});
        out.push_back({"head.1.weight", &head.second.weight});
        out.push_back({"head.1.bias", &head.second.bias});
    }
    auto& books = codebooks.storage();
    for (std::size_t i = 0; i < books.size(); ++i) {
        out.push_back({"codebook." + std::to_string(i), &books[i]});
    }
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> Model::parameters() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (const Param& p : const_cast<Model*>(this)->parameters()) {
        out.emplace_back(p.name, p.value);
    }
    return out;
}

bool operator==(const Model& a, const Model& b) {
    if (a.modalities.size() != b.modalities.size() || a.head.enabled != b.head.enabled ||
        a.normalize_latent != b.normalize_latent ||
        !(a.codebooks == b.codebooks)) {
        return false;
    }
    for (std::size_t m = 0; m < a.modalities.size(); ++m) {
        if (a.modalities[m].name != b.modalities[m].name ||
            a.modalities[m].width != b.modalities[m].width) {
            return false;
        }
    }
    const auto pa = a.parameters();
    const auto pb = b.parameters();
    if (pa.size() != pb.size()) {
        return false;
    }
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (pa[i].first != pb[i].first || !(*pa[i].second == *pb[i].second)) {
            return false;
        }
    }
    return true;
}

void initialize_codebooks(Model& model, const Dataset& data, const TrainConfig& config) {
    const Tensor z = model.embed(data);
    const std::size_t n = z.rows();
    const std::size_t levels = model.codebooks.levels();
    const std::size_t k = model.codebooks.codebook_size();
    const std::size_t dim = model.codebooks.dim();
    const bool shared = model.codebooks.sharing() == CodebookSharing::Shared;
    Rng rng(derive_seed(config.seed, "init", 1));

    Tensor residual = z;
    std::size_t next_shared_row = 0;
    for (std::size_t l = 0; l < levels; ++l) {
        std::size_t count = k;
        if (shared) {
            count = k / levels + (l < k % levels ? 1 : 0);
        }
        Tensor& book = model.codebooks.level(l);
        const std::size_t first = shared ? next_shared_row : 0;
        next_shared_row += count;
        if (count == 0) {
            continue;
        }
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(std::span<std::size_t>(order));
        for (std::size_t j = 0; j < count; ++j) {
            auto src = residual.row_span(order[j % n]);
            auto dst = book.row_span(first + j);
            for (std::size_t p = 0; p < dim; ++p) {
                dst[p] = src[p] + config.init_jitter * rng.normal();
            }
        }
        // Advance every residual by its nearest codeword among this level's rows.
        for (std::size_t i = 0; i < n; ++i) {
            auto r = residual.row_span(i);
            std::size_t best = first;
            double best_dist = 0.0;
            for (std::size_t j = first; j < first + count; ++j) {
                auto e = book.row_span(j);
                double dist = 0.0;
                for (std::size_t p = 0; p < dim; ++p) {
                    const double diff = r[p] - e[p];
                    dist += diff * diff;
                }
                if (j == first || dist < best_dist) {
                    best = j;
                    best_dist = dist;
                }
            }
            auto e = book.row_span(best);
            for (std::size_t p = 0; p < dim; ++p) {
                r[p] -= e[p];
            }
        }
    }
}

LossGraph build_loss(ParamBinder& params, const Model& model, const TrainConfig& config,
                     std::span<const Tensor> inputs, double alpha, std::span<const Tensor> noise) {
    if (inputs.size() != model.encoders.size()) {
        throw UsageError("expected " + std::to_string(model.encoders.size()) +
                         " modality inputs, got " + std::to_string(inputs.size()));
    }
    Tape& tape = params.tape();
    LossGraph graph;
    for (std::size_t m = 0; m < inputs.size(); ++m) {
        graph.modality_embeddings.push_back(
            model.encoders[m].encode(params, tape.constant(inputs[m])));
    }
    graph.fused = model.fusion.fuse(params, graph.modality_embeddings).embedding;
    if (model.normalize_latent) {
        graph.fused = tape.normalize_rows(graph.fused);
    }
    if (config.soft_path) {
        graph.reconstruction =
            soft_quantize(params, graph.fused, model.codebooks, alpha, noise).reconstruction;
    } else {
        // Hard codes: the reconstruction is a constant, so neither the codebooks nor
        // the encoders receive gradient through it.
        graph.reconstruction = tape.constant(hard_reconstruct(tape.value(graph.fused), model.codebooks));
    }
    const NodeId anchor = model.head.project(params, graph.reconstruction);
    std::vector<NodeId> targets;
    for (NodeId zm : graph.modality_embeddings) {
        targets.push_back(model.head.project(params, zm));
    }
    graph.loss = nt_xent(tape, anchor, targets, config.tau, config.negatives, config.similarity);
    return graph;
}

BatchResult loss_and_gradients(const Model& model, const TrainConfig& config,
                               std::span<const Tensor> inputs, double alpha,
                               std::span<const Tensor> noise) {
    Tape tape;
    ParamBinder params(tape, true);
    const LossGraph graph = build_loss(params, model, config, inputs, alpha, noise);
    BatchResult result;
    result.loss = tape.value(graph.loss).item();
    if (!std::isfinite(result.loss)) {
        return result;
    }
    tape.backward(graph.loss);
    for (const auto& [name, tensor] : model.parameters()) {
        if (const NodeId* node = params.find(*tensor)) {
            result.grads.emplace_back(name, tape.grad(*node));
        }
    }
    return result;
}

std::string TrainReport::to_csv(bool include_seconds) const {
    std::string out = include_seconds ? "epoch,loss,perplexity,collision_rate,alpha,seconds\n"
                                      : "epoch,loss,perplexity,collision_rate,alpha\n";
    char buf[256];
    for (const EpochRow& r : rows) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g", r.epoch, r.loss,
                      r.perplexity, r.collision_rate, r.alpha);
        out += buf;
        if (include_seconds) {
            std::snprintf(buf, sizeof buf, ",%.3f", r.seconds);
            out += buf;
        }
        out += '\n';
    }
    return out;
}

void TrainReport::write_csv(const fs::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw ValidationError("cannot write " + path.string());
    }
    out << to_csv();
}

TrainingAborted::TrainingAborted(std::size_t epoch, const std::string& what, Model last_good)
    : NumericalError("training aborted at epoch " + std::to_string(epoch) + ": " + what),
      epoch_(epoch),
      last_good_(std::move(last_good)) {}

namespace {

void clip_gradients(std::vector<std::pair<std::string, Tensor>>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, g] : grads) {
        for (double v : g.values()) {
            sq += v * v;
        }
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double factor = max_norm / norm;
        for (auto& [name, g] : grads) {
            for (double& v : g.values()) {
                v *= factor;
            }
        }
    }
}

}  // namespace

TrainResult train(const TrainConfig& config, const Dataset& data, const TrainHooks& hooks) {
    const std::size_t n = data.size();
    config.validate(n);
    Model model = Model::initialize(config, data.manifest);
    initialize_codebooks(model, data, config);

    std::vector<Tensor> matrices;
    for (const auto& m : model.modalities) {
        matrices.push_back(data.modality_matrix(*data.manifest.modality_index(m.name)));
    }
    const AlphaSchedule schedule = config.schedule();
    const std::size_t k = config.codebook_size;
    AdamState adam;
    TrainReport report;
    Model last_good = model;

    auto abort = [&](std::size_t epoch, const std::string& what) {
        if (hooks.abort_checkpoint) {
            save_checkpoint(*hooks.abort_checkpoint, config, last_good);
        }
        throw TrainingAborted(epoch, what, last_good);
    };

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        const double alpha = schedule.at(epoch);
        const bool noisy = config.gumbel_noise && config.soft_path && !schedule.at_floor(epoch);

        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng(derive_seed(config.seed, "shuffle", epoch));
        shuffle_rng.shuffle(std::span<std::size_t>(order));

        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < n; begin += config.batch, ++batches) {
            const std::size_t end = std::min(n, begin + config.batch);
            const std::span<const std::size_t> rows(order.data() + begin, end - begin);
            std::vector<Tensor> inputs;
            for (const Tensor& x : matrices) {
                inputs.push_back(gather_rows(x, rows));
            }
            std::vector<Tensor> noise;
            if (noisy) {
                Rng gumbel(derive_seed(config.seed, "gumbel", epoch, batches));
                for (std::size_t l = 0; l < config.levels; ++l) {
                    noise.push_back(sample_gumbel(rows.size(), k, gumbel,
                                                  config.noise_scaled_by_alpha ? alpha : 1.0));
                }
            }
            BatchResult step = loss_and_gradients(model, config, inputs, alpha, noise);
            if (!std::isfinite(step.loss)) {
                abort(epoch + 1, "non-finite loss in batch " + std::to_string(batches));
            }
            if (config.grad_clip > 0.0) {
                clip_gradients(step.grads, config.grad_clip);
            }
            std::vector<ParamUpdate> updates;
            auto params = model.parameters();
            std::size_t g = 0;
            for (auto& p : params) {
                if (g < step.grads.size() && step.grads[g].first == p.name) {
                    updates.push_back({p.name, p.value, &step.grads[g].second});
                    ++g;
                }
            }
            try {
                adam_update(updates, adam, config.lr);
            } catch (const NumericalError& e) {
                abort(epoch + 1, e.what());
            }
            loss_sum += step.loss;
        }
        if (!model.codebooks.all_finite()) {
            abort(epoch + 1, "non-finite codebook");
        }

        const std::vector<Codes> codes = hard_quantize(model.embed(data), model.codebooks);
        EpochRow row;
        row.epoch = epoch + 1;
        row.loss = loss_sum / static_cast<double>(batches);
        row.perplexity = identifier_perplexity(codes);
        row.collision_rate = collision_rate(codes);
        row.alpha = alpha;
        row.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        report.rows.push_back(row);
        last_good = model;
        if (hooks.on_epoch) {
            hooks.on_epoch(row, model);
        }
    }
    return {std::move(model), std::move(report)};
}

// Checkpoint layout (little-endian):
//   "CTOKCKPT" | u32 version | u64 n | n bytes of JSON header | u32 tensor count |
//   per tensor: u32 name length, name, u8 dtype (1 = float64), u32 rank, u64 extents, data.
namespace {

constexpr char kMagic[8] = {'C', 'T', 'O', 'K', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kFloat64 = 1;

class Writer {
 public:
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
        }
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) {
            buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
        }
    }
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    const std::vector<char>& buffer() const { return buf_; }

 private:
    std::vector<char> buf_;
};

class Reader {
 public:
    Reader(std::vector<char> data, std::string name) : buf_(std::move(data)), name_(std::move(name)) {}

    void need(std::size_t n, const char* what) const {
        if (buf_.size() - pos_ < n) {
            throw ValidationError(name_ + ": truncated checkpoint while reading " + what +
                                  " at byte " + std::to_string(pos_));
        }
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        }
        pos_ += 8;
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        }
        pos_ += 4;
        return v;
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<std::uint8_t>(buf_[pos_++]);
    }
    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s(buf_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == buf_.size(); }
    std::size_t remaining() const { return buf_.size() - pos_; }
    std::size_t pos() const { return pos_; }
    const std::string& name() const { return name_; }

 private:
    std::vector<char> buf_;
    std::size_t pos_ = 0;
    std::string name_;
};

}  // namespace

void save_checkpoint(const fs::path& path, const TrainConfig& config, const Model& model) {
    json header;
    header["config"] = to_json(config);
    header["modalities"] = json::array();
    for (const auto& m : model.modalities) {
        header["modalities"].push_back({{"name", m.name}, {"width", m.width}});
    }
    const std::string text = header.dump();

    Writer w;
    w.bytes(kMagic, sizeof kMagic);
    w.u32(kVersion);
    w.u64(text.size());
    w.bytes(text.data(), text.size());
    const auto params = model.parameters();
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, tensor] : params) {
        w.u32(static_cast<std::uint32_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.u8(kFloat64);
        w.u32(static_cast<std::uint32_t>(tensor->rank()));
        for (std::size_t extent : tensor->shape()) {
            w.u64(extent);
        }
        for (double v : tensor->values()) {
            w.u64(std::bit_cast<std::uint64_t>(v));
        }
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw ValidationError("cannot write checkpoint " + path.string());
    }
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) {
        throw ValidationError("failed writing checkpoint " + path.string());
    }
}

Checkpoint load_checkpoint(const fs::path& path, const TrainConfig* expected) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ValidationError("cannot open checkpoint " + path.string());
    }
    std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Reader r(std::move(data), path.filename().string());

    if (r.str(sizeof kMagic, "magic") != std::string(kMagic, sizeof kMagic)) {
        throw ValidationError(r.name() + ": not a checkpoint (bad magic bytes)");
    }
    const std::uint32_t version = r.u32("version");
    if (version != kVersion) {
        throw ValidationError(r.name() + ": unsupported checkpoint version " +
                              std::to_string(version) + " (expected " + std::to_string(kVersion) +
                              ")");
    }
    const std::uint64_t header_size = r.u64("header size");
    r.need(header_size, "header");
    const std::string text = r.str(header_size, "header");

    Checkpoint ckpt;
    DatasetManifest manifest;
    try {
        const json header = json::parse(text);
        apply_json(ckpt.config, header.at("config"));
        for (const auto& m : header.at("modalities")) {
            manifest.modalities.push_back(
                {m.at("name").get<std::string>(), m.at("width").get<std::size_t>()});
        }
    } catch (const json::exception& e) {
        throw ValidationError(r.name() + ": malformed checkpoint header: " + e.what());
    } catch (const Error& e) {
        throw ValidationError(r.name() + ": malformed checkpoint header: " + e.what());
    }
    if (expected != nullptr) {
        if (expected->sharing != ckpt.config.sharing) {
            throw ValidationError(r.name() + ": codebook sharing mode mismatch (checkpoint is " +
                                  std::string(to_string(ckpt.config.sharing)) + ", config is " +
                                  std::string(to_string(expected->sharing)) + ")");
        }
        if (expected->levels != ckpt.config.levels ||
            expected->codebook_size != ckpt.config.codebook_size ||
            expected->dim != ckpt.config.dim) {
            throw ValidationError(r.name() + ": codebook shape mismatch with the configuration");
        }
    }

    try {
        ckpt.config.validate(ckpt.config.batch);
        manifest.validate();
    } catch (const Error& e) {
        throw ValidationError(r.name() + ": invalid checkpoint header: " + e.what());
    }
    // Refuse headers that describe more parameters than the file can hold before
    // allocating anything.
    const std::size_t remaining = r.remaining();
    std::size_t elements = 0;
    auto add_layer = [&](std::size_t in, std::size_t out) {
        if (in > remaining || out > remaining || in * out > remaining) {
            throw ValidationError(r.name() + ": header describes tensors larger than the file");
        }
        elements += in * out + out;
        if (elements * 8 > remaining) {
            throw ValidationError(r.name() + ": header describes tensors larger than the file");
        }
    };
    for (const auto& m : manifest.modalities) {
        std::size_t width = m.width;
        for (std::size_t h : ckpt.config.hidden) {
            add_layer(width, h);
            width = h;
        }
        add_layer(width, ckpt.config.dim);
    }
    add_layer(ckpt.config.dim, 1);
    if (ckpt.config.projection_head) {
        add_layer(ckpt.config.dim, ckpt.config.projection_dim());
        add_layer(ckpt.config.projection_dim(), ckpt.config.projection_dim());
    }
    const std::size_t books =
        ckpt.config.sharing == CodebookSharing::Shared ? 1 : ckpt.config.levels;
    for (std::size_t b = 0; b < books; ++b) {
        add_layer(ckpt.config.codebook_size, ckpt.config.dim);
    }

    // Shapes come from a fresh model built from the stored config; values from the file.
    ckpt.model = Model::initialize(ckpt.config, manifest);
    auto params = ckpt.model.parameters();
    const std::uint32_t count = r.u32("tensor count");
    if (count != params.size()) {
        throw ValidationError(r.name() + ": expected " + std::to_string(params.size()) +
                              " tensors, file has " + std::to_string(count));
    }
    for (auto& p : params) {
        const std::uint32_t name_size = r.u32("tensor name");
        const std::string name = r.str(name_size, "tensor name");
        if (name != p.name) {
            throw ValidationError(r.name() + ": expected tensor '" + p.name + "', found '" +
                                  name + "'");
        }
        if (r.u8("dtype") != kFloat64) {
            throw ValidationError(r.name() + ": tensor '" + name + "' has unsupported dtype");
        }
        const std::uint32_t rank = r.u32("rank");
        std::vector<std::size_t> shape;
        for (std::uint32_t i = 0; i < rank; ++i) {
            shape.push_back(r.u64("extent"));
        }
        if (shape != p.value->shape()) {
            throw ValidationError(r.name() + ": tensor '" + name + "' has shape mismatch");
        }
        r.need(p.value->size() * 8, "tensor data");
        const std::size_t offset = r.pos();
        for (double& v : p.value->values()) {
            v = std::bit_cast<double>(r.u64("tensor data"));
            if (!std::isfinite(v)) {
                throw ValidationError(r.name() + ": tensor '" + name + "' has a non-finite value at byte " +
                                      std::to_string(r.pos() - 8) + " (data starts at byte " +
                                      std::to_string(offset) + ")");
            }
        }
    }
    if (!r.done()) {
        throw ValidationError(r.name() + ": trailing bytes after byte " + std::to_string(r.pos()));
    }
    return ckpt;
}

}  // namespace ctok
