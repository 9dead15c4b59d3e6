#include <doctest.h>

#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctok/cli.hpp"
#include "support.hpp"

using namespace ctok;
using ctok::testing::read_file;
using ctok::testing::TempDir;
using ctok::testing::write_file;

namespace {

struct Run {
    int code = 0;
    std::string out;
    std::string err;
};

Run cli(std::vector<std::string> args) {
    args.insert(args.begin(), "ctok");
    std::ostringstream out;
    std::ostringstream err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

std::string small_config(const TempDir& dir) {
    const nlohmann::json doc{
        {"synthetic",
         {{"branching", {3, 2}},
          {"items_per_leaf", 3},
          {"latent_dim", 4},
          {"modalities", {{{"name", "text"}, {"width", 6}}, {{"name", "collab"}, {"width", 4}}}},
          {"walk_affinity", {0.4, 0.4, 0.2}},
          {"users", 80}}},
        {"train",
         {{"levels", 2},
          {"codebook_size", 4},
          {"dim", 6},
          {"hidden", {8}},
          {"batch", 6},
          {"epochs", 3},
          {"lr", 0.01}}},
        {"eval", {{"K", {1, 5}}, {"beam_width", 8}}}};
    const auto path = dir / "config.json";
    write_file(path, doc.dump(2));
    return path.string();
}

/// gen-synthetic, train, tokenize, eval-retrieval and report into `root`.
void pipeline(const TempDir& root, const std::string& config, const std::string& threads) {
    const std::string data = (root / "data").string();
    const std::string run = (root / "run").string();
    const std::string tok = (root / "tok").string();
    const std::string ev = (root / "eval").string();
    REQUIRE(cli({"gen-synthetic", "--config", config, "--out", data, "--force"}).code == 0);
    const Run t = cli({"train", "--config", config, "--data", data, "--out", run, "--force", "--threads", threads});
    INFO(t.err);
    REQUIRE(t.code == 0);
    REQUIRE(cli({"tokenize", "--checkpoint", run + "/checkpoint.bin", "--data", data, "--out", tok, "--force"})
                .code == 0);
    REQUIRE(cli({"eval-retrieval", "--config", config, "--table", tok + "/tokens.jsonl", "--data", data,
                 "--checkpoint", run + "/checkpoint.bin", "--out", ev, "--force"})
                .code == 0);
    REQUIRE(cli({"report", "--run", run, "--run", tok, "--run", ev, "--out", (root / "summary.json").string()})
                .code == 0);
}

std::string without_last_column(const std::string& csv) {
    std::string out;
    std::istringstream in(csv);
    std::string line;
    while (std::getline(in, line)) {
        out += line.substr(0, line.rfind(',')) + "\n";
    }
    return out;
}

}  // namespace

TEST_CASE("full pipeline is byte-identical across runs and thread counts") {
    TempDir root;
    const std::string config = small_config(root);
    const std::vector<std::string> files{"data/manifest.json", "data/items.jsonl",    "data/labels.jsonl",
                                         "data/sequences.jsonl", "run/checkpoint.bin", "run/config.json",
                                         "tok/tokens.jsonl",     "tok/token_metrics.csv", "tok/token_summary.json",
                                         "eval/eval_report.json", "eval/config.json"};
    pipeline(root, config, "1");
    std::vector<std::string> first;
    for (const auto& f : files) {
        first.push_back(read_file(root / f));
        CHECK_FALSE(first.back().empty());
    }
    const std::string report = without_last_column(read_file(root / "run/train_report.csv"));

    for (const std::string threads : {"1", "3"}) {
        pipeline(root, config, threads);
        for (std::size_t i = 0; i < files.size(); ++i) {
            INFO(files[i] << " threads " << threads);
            CHECK(read_file(root / files[i]) == first[i]);
        }
        CHECK(without_last_column(read_file(root / "run/train_report.csv")) == report);
    }

    const auto summary = nlohmann::json::parse(read_file(root / "summary.json"));
    CHECK(summary.size() == 3);
    CHECK(summary[0].at("epochs") == 3);
    CHECK(summary[1].at("tokens").contains("purity_level1"));
    CHECK(summary[2].at("retrieval").at("recall").size() == 2);
}

TEST_CASE("exit codes") {
    TempDir root;
    const std::string config = small_config(root);
    const std::string data = (root / "data").string();
    REQUIRE(cli({"gen-synthetic", "--config", config, "--out", data}).code == 0);

    SUBCASE("usage errors") {
        CHECK(cli({}).code == kExitUsage);
        CHECK(cli({"frobnicate"}).code == kExitUsage);
        CHECK(cli({"train", "--data", data}).code == kExitUsage);
        CHECK(cli({"gen-synthetic", "--out", (root / "g").string(), "--items-per-leaf", "0"}).code == kExitUsage);
        const Run busy = cli({"gen-synthetic", "--config", config, "--out", data});
        CHECK(busy.code == kExitUsage);
        CHECK(busy.err.find("--force") != std::string::npos);
        CHECK(cli({"train", "--config", config, "--data", data, "--out", (root / "r").string(), "--batch", "1000"})
                  .code == kExitUsage);
        CHECK(cli({"train", "--config", config, "--data", data, "--out", (root / "r").string(), "--tau", "0"}).code ==
              kExitUsage);
    }
    SUBCASE("validation errors") {
        CHECK(cli({"train", "--data", (root / "missing").string(), "--out", (root / "r").string()}).code ==
              kExitValidation);
        write_file(root / "bad.ckpt", "not a checkpoint");
        const Run bad = cli({"tokenize", "--checkpoint", (root / "bad.ckpt").string(), "--data", data, "--out",
                             (root / "t").string()});
        CHECK(bad.code == kExitValidation);
        CHECK(bad.err.find("magic") != std::string::npos);
        write_file(root / "typo.json", R"({"train": {"epoch": 3}})");
        CHECK(cli({"train", "--config", (root / "typo.json").string(), "--data", data, "--out",
                   (root / "r").string()})
                  .code == kExitValidation);
    }
    SUBCASE("numerical failure") {
        const std::string run = (root / "r").string();
        const Run r = cli({"train", "--config", config, "--data", data, "--out", run, "--lr", "1e300", "--epochs",
                           "30"});
        CHECK(r.code == kExitNumerical);
        CHECK(std::filesystem::exists(root / "r" / "checkpoint.last_good.bin"));
    }
    SUBCASE("beam narrower than k") {
        const std::string run = (root / "r").string();
        REQUIRE(cli({"train", "--config", config, "--data", data, "--out", run}).code == 0);
        const std::string tok = (root / "t").string();
        REQUIRE(cli({"tokenize", "--checkpoint", run + "/checkpoint.bin", "--data", data, "--out", tok}).code == 0);
        CHECK(cli({"eval-retrieval", "--table", tok + "/tokens.jsonl", "--data", data, "--k", "10", "--beam", "5"})
                  .code == kExitUsage);

        SUBCASE("codebook checksum mismatch") {
            const std::string other = (root / "r2").string();
            REQUIRE(cli({"train", "--config", config, "--data", data, "--out", other, "--seed", "7"}).code == 0);
            const std::vector<std::string> args{"eval-retrieval", "--config", config, "--table",
                                                tok + "/tokens.jsonl", "--data", data, "--checkpoint",
                                                other + "/checkpoint.bin"};
            CHECK(cli(args).code == kExitValidation);
            auto allowed = args;
            allowed.push_back("--allow-checksum-mismatch");
            const Run r = cli(allowed);
            CHECK(r.code == kExitOk);
            CHECK(r.err.find("warning") != std::string::npos);
        }
    }
}

TEST_CASE("help exits cleanly") {
    const Run r = cli({"--help"});
    CHECK(r.code == kExitOk);
    CHECK(r.out.find("gen-synthetic") != std::string::npos);
}
