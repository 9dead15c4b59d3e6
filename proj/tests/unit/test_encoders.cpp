#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "ctok/encoders.hpp"
#include "ctok/error.hpp"
#include "ctok/gradcheck.hpp"
#include "support.hpp"

using namespace ctok;
using ctok::testing::random_tensor;

namespace {

ModalityEncoder make_encoder(std::size_t in, std::vector<std::size_t> hidden, std::size_t out,
                             std::uint64_t seed) {
    Rng rng(seed);
    return ModalityEncoder{"text", Mlp(in, hidden, out, rng)};
}

}  // namespace

TEST_CASE("zero network encodes to zero") {
    ModalityEncoder enc = make_encoder(5, {4, 3}, 2, 1);
    for (Linear& l : enc.network.layers()) {
        l.weight.fill(0.0);
        l.bias.fill(0.0);
    }
    Rng rng(2);
    const Tensor z = enc.encode(random_tensor(3, 5, rng));
    CHECK(z == Tensor(3, 2, 0.0));
}

TEST_CASE("identity single layer passes input through") {
    ModalityEncoder enc{"text", Mlp({Linear{Tensor::identity(4), Tensor(1, 4)}})};
    const Tensor v = Tensor::row({1.5, -2.0, 0.0, 3.25});
    CHECK(enc.encode(v) == v);
}

TEST_CASE("encoder is deterministic for a fixed seed") {
    Rng rng(9);
    const Tensor x = random_tensor(4, 6, rng);
    const Tensor a = make_encoder(6, {8, 5}, 3, 77).encode(x);
    const Tensor b = make_encoder(6, {8, 5}, 3, 77).encode(x);
    CHECK(a == b);
    CHECK(a != make_encoder(6, {8, 5}, 3, 78).encode(x));
}

TEST_CASE("encoder rejects wrong input width naming the modality") {
    ModalityEncoder enc = make_encoder(6, {4}, 3, 1);
    try {
        enc.encode(Tensor(2, 5));
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("text") != std::string::npos);
        CHECK(msg.find("6") != std::string::npos);
    }
}

TEST_CASE("glorot initialization bounds") {
    Rng rng(4);
    const Linear l = Linear::glorot(30, 20, rng);
    const double limit = std::sqrt(6.0 / 50.0);
    for (double w : l.weight.values()) {
        CHECK(std::abs(w) <= limit);
    }
    CHECK(l.bias == Tensor(1, 20, 0.0));
}

TEST_CASE("fusion examples") {
    AttentionFusion fusion{Tensor::column({1.0, 0.0})};
    SUBCASE("single modality") {
        const Tensor z1 = Tensor::row({0.3, -0.7});
        const Tensor zs[] = {z1};
        const FusionResult r = fusion.fuse(zs);
        CHECK(r.importance == Tensor::row({1.0}));
        CHECK(r.embedding == z1);
    }
    SUBCASE("equal scores give the midpoint") {
        const Tensor zs[] = {Tensor::row({2.0, 1.0}), Tensor::row({2.0, -3.0})};
        const FusionResult r = fusion.fuse(zs);
        CHECK(r.importance[0] == 0.5);
        CHECK(r.importance[1] == 0.5);
        CHECK(r.embedding == Tensor::row({2.0, -1.0}));
    }
    SUBCASE("closed-form two-way softmax") {
        const Tensor zs[] = {Tensor::row({1.0, 0.0}), Tensor::row({0.0, 1.0})};
        const FusionResult r = fusion.fuse(zs);
        const double e = std::exp(1.0);
        CHECK(r.importance[0] == doctest::Approx(e / (e + 1.0)).epsilon(1e-14));
        CHECK(r.importance[1] == doctest::Approx(1.0 / (e + 1.0)).epsilon(1e-14));
        CHECK(r.importance[0] == doctest::Approx(0.7311).epsilon(1e-4));
    }
    SUBCASE("empty list rejected") {
        CHECK_THROWS_AS(fusion.fuse(std::span<const Tensor>{}), UsageError);
    }
}

TEST_CASE("fusion importance is a simplex and permutation-equivariant") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        const std::size_t m = 1 + rng.index(4);
        AttentionFusion fusion = AttentionFusion::make(6, rng);
        std::vector<Tensor> zs;
        for (std::size_t i = 0; i < m; ++i) {
            zs.push_back(random_tensor(5, 6, rng, 2.0));
        }
        const FusionResult r = fusion.fuse(zs);
        for (std::size_t b = 0; b < 5; ++b) {
            double s = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                CHECK(r.importance(b, i) >= 0.0);
                s += r.importance(b, i);
            }
            CHECK(std::abs(s - 1.0) < 1e-12);
        }

        std::vector<std::size_t> perm(m);
        for (std::size_t i = 0; i < m; ++i) {
            perm[i] = i;
        }
        rng.shuffle(std::span<std::size_t>(perm));
        std::vector<Tensor> permuted;
        for (std::size_t i : perm) {
            permuted.push_back(zs[i]);
        }
        const FusionResult p = fusion.fuse(permuted);
        for (std::size_t b = 0; b < 5; ++b) {
            for (std::size_t i = 0; i < m; ++i) {
                CHECK(p.importance(b, i) == doctest::Approx(r.importance(b, perm[i])).epsilon(1e-12));
            }
            for (std::size_t c = 0; c < 6; ++c) {
                CHECK(std::abs(p.embedding(b, c) - r.embedding(b, c)) < 1e-12);
            }
        }
    }
}

TEST_CASE("projection head") {
    Rng rng(3);
    ProjectionHead head = ProjectionHead::make(4, 6, rng);
    const Tensor z = random_tensor(3, 4, rng);
    SUBCASE("zero weights project to zero") {
        head.first.weight.fill(0.0);
        head.second.weight.fill(0.0);
        CHECK(head.project(z) == Tensor(3, 6, 0.0));
    }
    SUBCASE("deterministic for a fixed seed") {
        Rng again(3);
        const ProjectionHead twin = ProjectionHead::make(4, 6, again);
        CHECK(head.project(z) == twin.project(z));
    }
    SUBCASE("disabled head is the identity") {
        CHECK(ProjectionHead::identity().project(z) == z);
    }
}

TEST_CASE("gradients through encoder, fusion and head match finite differences") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const ModalityEncoder a = make_encoder(5, {6}, 4, seed + 100);
        const ModalityEncoder b = make_encoder(3, {6}, 4, seed + 200);
        const AttentionFusion fusion = AttentionFusion::make(4, rng);
        const ProjectionHead head = ProjectionHead::make(4, 4, rng);
        Tape tape;
        ParamBinder params(tape);
        const NodeId xa = tape.constant(random_tensor(3, 5, rng));
        const NodeId xb = tape.constant(random_tensor(3, 3, rng));
        const NodeId zs[] = {a.encode(params, xa), b.encode(params, xb)};
        const FusionNodes f = fusion.fuse(params, zs);
        const NodeId h = head.project(params, f.embedding);
        const NodeId target = tape.constant(random_tensor(3, 4, rng));
        const NodeId loss = tape.sum(tape.mul(h, target));
        tape.backward(loss);
        const Tensor* params_to_check[] = {&a.network.layers()[0].weight, &b.network.layers()[1].bias,
                                           &fusion.query, &head.first.weight, &head.second.bias};
        for (const Tensor* p : params_to_check) {
            const NodeId id = *params.find(*p);
            const Tensor numeric = finite_diff(tape, loss, id, 1e-5);
            INFO("seed " << seed);
            CHECK(relative_error(tape.grad(id).values(), numeric.values()) < 1e-4);
        }
    }
}

TEST_CASE("binding the same tensor twice yields one leaf") {
    Tape tape;
    ParamBinder params(tape);
    const Tensor w = Tensor::scalar(2.0);
    const NodeId a = params.bind(w);
    CHECK(params.bind(w) == a);
    const NodeId y = tape.add(tape.mul(a, a), a);
    tape.backward(y);
    CHECK(tape.grad(a).item() == 5.0);
}
