#include <doctest.h>

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "ctok/parallel.hpp"
#include "ctok/trainer.hpp"
#include "pipeline_check.hpp"
#include "support.hpp"

using namespace ctok;
using ctok::testing::read_file;
using ctok::testing::TempDir;
using ctok::testing::write_file;

namespace {

Dataset small_dataset(std::uint64_t seed = 3) {
    SyntheticSpec spec;
    spec.branching = {2, 2};
    spec.items_per_leaf = 2;
    spec.latent_dim = 4;
    spec.modalities = {{"text", 6, 0.05, 1.0}, {"collab", 4, 0.05, 1.0}};
    spec.walk_affinity = {0.4, 0.4, 0.2};
    spec.users = 4;
    spec.seed = seed;
    return generate_synthetic(spec).dataset();
}

TrainConfig small_config() {
    TrainConfig c;
    c.levels = 2;
    c.codebook_size = 4;
    c.dim = 6;
    c.hidden = {8};
    c.batch = 4;
    c.epochs = 5;
    c.lr = 1e-2;
    return c;
}

std::string checkpoint_bytes(const TrainConfig& config, const Model& model) {
    TempDir dir;
    save_checkpoint(dir / "m.ckpt", config, model);
    return read_file(dir / "m.ckpt");
}

}  // namespace

TEST_CASE("config json round trip and rejection") {
    TrainConfig c = small_config();
    c.sharing = CodebookSharing::PerLevel;
    c.similarity = Similarity::RawDot;
    c.negatives = NegativePolicy::parse("modal");
    TrainConfig back;
    apply_json(back, to_json(c));
    CHECK(to_json(back) == to_json(c));

    TrainConfig x;
    CHECK_THROWS_AS(apply_json(x, nlohmann::json{{"levelz", 3}}), ValidationError);
    CHECK_THROWS_AS(apply_json(x, nlohmann::json{{"levels", "three"}}), ValidationError);
    CHECK_THROWS_AS(apply_json(x, nlohmann::json{{"similarity", "euclid"}}), ValidationError);
}

TEST_CASE("config validation") {
    TrainConfig c = small_config();
    CHECK_NOTHROW(c.validate(8));
    CHECK_THROWS_AS(c.validate(3), UsageError);
    CHECK_THROWS_AS(c.validate(0), UsageError);
    TrainConfig z = c;
    z.codebook_size = 0;
    CHECK_THROWS_AS(z.validate(8), UsageError);
    TrainConfig t = c;
    t.tau = 0.0;
    CHECK_THROWS_AS(t.validate(8), UsageError);
    TrainConfig a = c;
    a.alpha0 = -1.0;
    CHECK_THROWS_AS(a.validate(8), UsageError);
    TrainConfig l = c;
    l.lr = -1e-3;
    CHECK_THROWS_AS(l.validate(8), UsageError);
}

TEST_CASE("zero epochs returns the initialized model") {
    const Dataset data = small_dataset();
    TrainConfig c = small_config();
    c.epochs = 0;
    const TrainResult r = train(c, data);
    CHECK(r.report.rows.empty());
    Model fresh = Model::initialize(c, data.manifest);
    initialize_codebooks(fresh, data, c);
    CHECK(r.model == fresh);
}

TEST_CASE("training reduces the loss on a tiny dataset") {
    const Dataset data = small_dataset();
    TrainConfig c = small_config();
    c.epochs = 200;
    c.gumbel_noise = false;
    const TrainResult r = train(c, data);
    REQUIRE(r.report.rows.size() == 200);
    CHECK(r.report.rows.back().loss < r.report.rows.front().loss);
    for (const EpochRow& row : r.report.rows) {
        CHECK(std::isfinite(row.loss));
        CHECK(row.collision_rate >= 0.0);
        CHECK(row.collision_rate <= 1.0);
    }
}

TEST_CASE("training is deterministic across runs and thread counts") {
    const Dataset data = small_dataset();
    const TrainConfig c = small_config();
    set_num_threads(1);
    const TrainResult a = train(c, data);
    const TrainResult b = train(c, data);
    set_num_threads(3);
    const TrainResult t = train(c, data);
    set_num_threads(1);
    const std::string bytes = checkpoint_bytes(c, a.model);
    CHECK(bytes == checkpoint_bytes(c, b.model));
    CHECK(bytes == checkpoint_bytes(c, t.model));
    CHECK(a.report.to_csv(false) == t.report.to_csv(false));

    TrainConfig other = c;
    other.seed = 43;
    CHECK(bytes != checkpoint_bytes(other, train(other, data).model));
}

TEST_CASE("every parameter receives a gradient") {
    const Dataset data = small_dataset();
    const TrainConfig c = small_config();
    Model model = Model::initialize(c, data.manifest);
    initialize_codebooks(model, data, c);
    std::vector<Tensor> inputs;
    for (std::size_t m = 0; m < data.manifest.modalities.size(); ++m) {
        inputs.push_back(data.modality_matrix(m));
    }
    const BatchResult r = loss_and_gradients(model, c, inputs, 0.5);
    CHECK(r.grads.size() == model.parameters().size());
    for (const auto& [name, g] : r.grads) {
        double norm = 0.0;
        for (double v : g.values()) {
            norm += v * v;
        }
        INFO(name);
        CHECK(norm > 0.0);
    }
}

TEST_CASE("zero learning rate keeps the epoch loss constant") {
    const Dataset data = small_dataset();
    TrainConfig c = small_config();
    c.lr = 0.0;
    c.batch = data.size();
    c.gumbel_noise = false;
    c.anneal = false;
    c.epochs = 4;
    const TrainResult r = train(c, data);
    for (const EpochRow& row : r.report.rows) {
        CHECK(row.loss == doctest::Approx(r.report.rows.front().loss).epsilon(1e-12));
    }
}

TEST_CASE("hard path gives codebooks no gradient") {
    const Dataset data = small_dataset();
    TrainConfig c = small_config();
    c.soft_path = false;
    Model model = Model::initialize(c, data.manifest);
    initialize_codebooks(model, data, c);
    std::vector<Tensor> inputs;
    for (std::size_t m = 0; m < data.manifest.modalities.size(); ++m) {
        inputs.push_back(data.modality_matrix(m));
    }
    const BatchResult r = loss_and_gradients(model, c, inputs, 0.5);
    for (const auto& [name, g] : r.grads) {
        if (name.rfind("codebook.", 0) == 0) {
            for (double v : g.values()) {
                CHECK(v == 0.0);
            }
        }
    }
    c.epochs = 3;
    const TrainResult trained = train(c, data);
    Model init = Model::initialize(c, data.manifest);
    initialize_codebooks(init, data, c);
    CHECK(trained.model.codebooks.storage() == init.codebooks.storage());
}

TEST_CASE("disabling the projection head removes its parameters") {
    const Dataset data = small_dataset();
    TrainConfig c = small_config();
    c.projection_head = false;
    Model model = Model::initialize(c, data.manifest);
    for (const auto& p : model.parameters()) {
        CHECK(p.name.rfind("head.", 0) != 0);
    }
    c.projection_head = true;
    Model with_head = Model::initialize(c, data.manifest);
    CHECK(with_head.parameters().size() == model.parameters().size() + 4);
}

TEST_CASE("report csv") {
    const Dataset data = small_dataset();
    TrainConfig c = small_config();
    c.epochs = 2;
    const TrainResult r = train(c, data);
    const std::string csv = r.report.to_csv(true);
    CHECK(csv.rfind("epoch,loss,perplexity,collision_rate,alpha,seconds\n", 0) == 0);
    CHECK(r.report.to_csv(false).find("seconds") == std::string::npos);
    CHECK(r.report.rows[0].epoch == 1);
    CHECK(r.report.rows[1].alpha < r.report.rows[0].alpha);
}

TEST_CASE("non-finite training aborts with the last good model") {
    const Dataset data = small_dataset();
    TrainConfig c = small_config();
    c.lr = 1e300;
    c.epochs = 20;
    TempDir dir;
    TrainHooks hooks;
    hooks.abort_checkpoint = dir / "last_good.ckpt";
    try {
        train(c, data, hooks);
        FAIL("expected TrainingAborted");
    } catch (const TrainingAborted& e) {
        CHECK(e.epoch() >= 1);
        const Checkpoint ck = load_checkpoint(dir / "last_good.ckpt");
        CHECK(ck.model == e.last_good());
    }
}

TEST_CASE("checkpoint round trip is exact") {
    const Dataset data = small_dataset();
    TrainConfig c = small_config();
    c.sharing = CodebookSharing::PerLevel;
    const TrainResult r = train(c, data);
    TempDir dir;
    save_checkpoint(dir / "m.ckpt", c, r.model);
    const Checkpoint back = load_checkpoint(dir / "m.ckpt", &c);
    CHECK(back.model == r.model);
    CHECK(to_json(back.config) == to_json(c));
    CHECK(back.model.embed(data) == r.model.embed(data));
    save_checkpoint(dir / "again.ckpt", back.config, back.model);
    CHECK(read_file(dir / "again.ckpt") == read_file(dir / "m.ckpt"));
}

TEST_CASE("malformed checkpoints produce located errors") {
    const Dataset data = small_dataset();
    const TrainConfig c = small_config();
    Model model = Model::initialize(c, data.manifest);
    initialize_codebooks(model, data, c);
    TempDir dir;
    const auto path = dir / "m.ckpt";
    save_checkpoint(path, c, model);
    const std::string good = read_file(path);

    auto error_of = [&](const std::string& bytes, const TrainConfig* expected = nullptr) {
        write_file(path, bytes);
        try {
            load_checkpoint(path, expected);
        } catch (const ValidationError& e) {
            return std::string(e.what());
        }
        return std::string();
    };

    SUBCASE("bad magic") {
        std::string b = good;
        b[0] ^= 0x20;
        CHECK(error_of(b).find("magic") != std::string::npos);
    }
    SUBCASE("unsupported version") {
        std::string b = good;
        b[8] = 99;
        CHECK(error_of(b).find("version") != std::string::npos);
    }
    SUBCASE("every truncation") {
        for (std::size_t n = 0; n < good.size(); ++n) {
            INFO("prefix " << n);
            CHECK_FALSE(error_of(good.substr(0, n)).empty());
        }
    }
    SUBCASE("trailing bytes") {
        CHECK(error_of(good + "x").find("trailing") != std::string::npos);
    }
    SUBCASE("sharing mode mismatch") {
        TrainConfig per_level = c;
        per_level.sharing = CodebookSharing::PerLevel;
        CHECK(error_of(good, &per_level).find("sharing") != std::string::npos);
        CHECK(error_of(good, &c).empty());
    }
    SUBCASE("unknown config key in the header") {
        std::string b = good;
        const std::size_t at = b.find("\"alpha0\"");
        REQUIRE(at != std::string::npos);
        b[at + 4] = 'x';
        const std::string e = error_of(b);
        CHECK(e.find("m.ckpt") != std::string::npos);
        CHECK(e.find("alpxa0") != std::string::npos);
    }
    SUBCASE("single byte corruption never escapes as another error type") {
        Rng rng(17);
        for (int trial = 0; trial < 300; ++trial) {
            std::string b = good;
            const std::size_t at = rng.index(b.size());
            b[at] = static_cast<char>(b[at] ^ (1 + rng.index(255)));
            write_file(path, b);
            INFO("byte " << at);
            try {
                load_checkpoint(path);
            } catch (const ValidationError& e) {
                CHECK(std::string(e.what()).find("m.ckpt") != std::string::npos);
            }
        }
    }
}

TEST_CASE("missing checkpoint file") {
    TempDir dir;
    CHECK_THROWS_AS(load_checkpoint(dir / "absent.ckpt"), ValidationError);
}

TEST_CASE("full pipeline gradients match finite differences") {
    int checked = 0;
    for (std::uint64_t seed = 0; checked < 10; ++seed) {
        const auto r = ctok::testing::check_pipeline_gradients(seed);
        if (!r) {
            continue;
        }
        ++checked;
        INFO("seed " << seed << " worst " << r->worst_parameter);
        CHECK(r->max_relative_error < 1e-4);
    }
}
