#include <doctest.h>

#include <cmath>
#include <vector>

#include "ctok/adam.hpp"
#include "ctok/contrastive.hpp"
#include "ctok/error.hpp"
#include "ctok/gradcheck.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace ctok;
using ctok::testing::brute_force_nt_xent;
using ctok::testing::random_tensor;

TEST_CASE("policy parsing") {
    CHECK(to_string(NegativePolicy::parse("both")) == "both");
    CHECK(to_string(NegativePolicy::parse("recon")) == "recon");
    CHECK(to_string(NegativePolicy::parse("modal")) == "modal");
    CHECK(NegativePolicy::parse("modal").positive_in_denominator);
    CHECK_THROWS_AS(NegativePolicy::parse("none"), UsageError);
}

TEST_CASE("single item with the positive in the denominator has zero loss") {
    const Tensor h = Tensor::row({0.3, -1.2, 2.0});
    const Tensor ms[] = {Tensor::row({1.0, 0.5, -0.1})};
    CHECK(nt_xent(h, ms, 0.1) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("two items closed form") {
    // Anchor 1 aligned with its positive and orthogonal to the single negative.
    const Tensor recon = Tensor::from_rows({{1.0, 0.0}, {0.0, 1.0}});
    const Tensor ms[] = {Tensor::from_rows({{1.0, 0.0}, {0.0, 1.0}})};
    const NegativePolicy modal_only{false, true, true};
    const double per_anchor = std::log(1.0 + std::exp(-1.0));
    CHECK(per_anchor == doctest::Approx(0.3133).epsilon(1e-4));
    CHECK(nt_xent(recon, ms, 1.0, modal_only) == doctest::Approx(per_anchor).epsilon(1e-14));
}

TEST_CASE("matches the brute-force reference") {
    const NegativePolicy policies[] = {{true, true, true}, {true, false, true}, {false, true, true},
                                       {true, true, false}};
    for (std::uint64_t seed = 0; seed < 60; ++seed) {
        Rng rng(seed);
        const std::size_t b = 1 + rng.index(16);
        const std::size_t m = 1 + rng.index(3);
        const std::size_t p = 2 + rng.index(15);
        const Tensor recon = random_tensor(b, p, rng);
        std::vector<Tensor> ms;
        for (std::size_t i = 0; i < m; ++i) {
            ms.push_back(random_tensor(b, p, rng));
        }
        const double tau = 0.05 + rng.uniform();
        const NegativePolicy& policy = policies[seed % 4];
        if (b == 1 && !policy.positive_in_denominator) {
            CHECK_THROWS_AS(nt_xent(recon, ms, tau, policy), UsageError);
            continue;
        }
        for (Similarity sim : {Similarity::Cosine, Similarity::RawDot}) {
            const double got = nt_xent(recon, ms, tau, policy, sim);
            const double want = brute_force_nt_xent(recon, ms, tau, policy, sim);
            CHECK(std::abs(got - want) < 1e-6);
        }
    }
}

TEST_CASE("random batch of eight with two modalities") {
    Rng rng(8);
    const Tensor recon = random_tensor(8, 16, rng);
    const Tensor ms[] = {random_tensor(8, 16, rng), random_tensor(8, 16, rng)};
    const double got = nt_xent(recon, ms, 0.1);
    const double want = brute_force_nt_xent(recon, ms, 0.1, {}, Similarity::Cosine);
    CHECK(std::abs(got - want) < 1e-6);
}

TEST_CASE("errors") {
    const Tensor recon(3, 4, 1.0);
    const Tensor ms[] = {Tensor(3, 4, 1.0)};
    CHECK_THROWS_AS(nt_xent(recon, ms, 0.0), UsageError);
    CHECK_THROWS_AS(nt_xent(recon, ms, -0.5), UsageError);
    const Tensor bad[] = {Tensor(3, 4, 1.0), Tensor(2, 4, 1.0)};
    CHECK_THROWS_AS(nt_xent(recon, bad, 0.1), ShapeError);
    CHECK_THROWS_AS(nt_xent(recon, std::span<const Tensor>{}, 0.1), UsageError);
    CHECK_THROWS_AS(nt_xent(recon, ms, 0.1, NegativePolicy{false, false, false}), UsageError);
}

TEST_CASE("common permutation leaves the loss unchanged") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const std::size_t b = 2 + rng.index(10);
        const Tensor recon = random_tensor(b, 5, rng);
        const std::vector<Tensor> ms{random_tensor(b, 5, rng), random_tensor(b, 5, rng)};
        std::vector<std::size_t> perm(b);
        for (std::size_t i = 0; i < b; ++i) {
            perm[i] = i;
        }
        rng.shuffle(std::span<std::size_t>(perm));
        std::vector<Tensor> pms;
        for (const Tensor& m : ms) {
            pms.push_back(gather_rows(m, perm));
        }
        const double a = nt_xent(recon, ms, 0.2);
        const double c = nt_xent(gather_rows(recon, perm), pms, 0.2);
        CHECK(a == doctest::Approx(c).epsilon(1e-12));
    }
}

TEST_CASE("raising one positive similarity lowers the loss") {
    // Identity anchors with raw dot products make every logit an entry of h.
    Rng rng(4);
    const std::size_t b = 5;
    const Tensor recon = Tensor::identity(b);
    Tensor h = random_tensor(b, b, rng);
    const NegativePolicy modal_only{false, true, true};
    double prev = 0.0;
    for (int step = 0; step < 20; ++step) {
        const Tensor ms[] = {h};
        const double loss = nt_xent(recon, ms, 0.5, modal_only, Similarity::RawDot);
        if (step > 0) {
            CHECK(loss < prev);
        }
        prev = loss;
        h(2, 2) += 0.25;
    }
}

TEST_CASE("large temperature tends to the uniform limit") {
    Rng rng(6);
    const std::size_t b = 7;
    const Tensor recon = random_tensor(b, 4, rng);
    const Tensor ms[] = {random_tensor(b, 4, rng), random_tensor(b, 4, rng)};
    const double both = nt_xent(recon, ms, 1e6);
    CHECK(both == doctest::Approx(2.0 * std::log(2.0 * b - 1.0)).epsilon(1e-3));
    const double modal = nt_xent(recon, ms, 1e6, NegativePolicy{false, true, true});
    CHECK(modal == doctest::Approx(2.0 * std::log(static_cast<double>(b))).epsilon(1e-3));
}

TEST_CASE("gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const std::size_t b = 2 + rng.index(6);
        Tape tape;
        const NodeId recon = tape.leaf(random_tensor(b, 4, rng));
        const NodeId m1 = tape.leaf(random_tensor(b, 4, rng));
        const NodeId m2 = tape.leaf(random_tensor(b, 4, rng));
        const NodeId ms[] = {m1, m2};
        const Similarity sim = seed % 2 == 0 ? Similarity::Cosine : Similarity::RawDot;
        const NodeId loss = nt_xent(tape, recon, ms, 0.3, {}, sim);
        tape.backward(loss);
        for (NodeId id : {recon, m1, m2}) {
            const Tensor numeric = finite_diff(tape, loss, id, 1e-5);
            INFO("seed " << seed);
            CHECK(relative_error(tape.grad(id).values(), numeric.values()) < 1e-4);
        }
    }
}

TEST_CASE("reconstruction negatives alone push reconstructions apart") {
    // Reconstructions start clustered around one direction; targets are spread out.
    Rng rng(12);
    const std::size_t b = 6;
    const std::size_t p = 8;
    Tensor recon(b, p);
    const Tensor centre = random_tensor(1, p, rng);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t c = 0; c < p; ++c) {
            recon(i, c) = centre[c] + 0.1 * rng.normal();
        }
    }
    const Tensor target = random_tensor(b, p, rng);
    const NegativePolicy recon_only{true, false, true};

    auto mean_similarity = [&](const Tensor& r) {
        double s = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t j = i + 1; j < b; ++j) {
                s += ctok::testing::dot(ctok::testing::unit_row(r, i, true),
                                        ctok::testing::unit_row(r, j, true));
            }
        }
        return s / static_cast<double>(b * (b - 1) / 2);
    };

    double prev = mean_similarity(recon);
    for (int step = 0; step < 100; ++step) {
        Tape tape;
        const NodeId r = tape.leaf(recon);
        const NodeId ms[] = {tape.constant(target)};
        tape.backward(nt_xent(tape, r, ms, 0.5, recon_only));
        for (std::size_t i = 0; i < recon.size(); ++i) {
            recon[i] -= 0.05 * tape.grad(r)[i];
        }
        const double now = mean_similarity(recon);
        CHECK(now < prev);
        prev = now;
    }
}
