#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "ctok/error.hpp"
#include "ctok/gradcheck.hpp"
#include "ctok/quantizer.hpp"
#include "support.hpp"

using namespace ctok;
using ctok::testing::random_tensor;

namespace {

CodebookStack random_stack(std::size_t levels, std::size_t k, std::size_t d, CodebookSharing sharing,
                           Rng& rng) {
    CodebookStack stack(levels, k, d, sharing);
    for (Tensor& t : stack.storage()) {
        t = random_tensor(k, d, rng);
    }
    return stack;
}

double row_sum(const Tensor& t, std::size_t r) {
    double s = 0.0;
    for (double v : t.row_span(r)) {
        s += v;
    }
    return s;
}

std::size_t argmax_row(const Tensor& t, std::size_t r) {
    auto row = t.row_span(r);
    return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

TEST_CASE("codebook stack storage") {
    CodebookStack shared(3, 4, 2, CodebookSharing::Shared);
    CHECK(shared.storage().size() == 1);
    CHECK(&shared.level(0) == &shared.level(2));
    CodebookStack per(3, 4, 2, CodebookSharing::PerLevel);
    CHECK(per.storage().size() == 3);
    CHECK(&per.level(0) != &per.level(1));
    CHECK(parse_sharing("shared") == CodebookSharing::Shared);
    CHECK(parse_sharing("per-level") == CodebookSharing::PerLevel);
    CHECK_THROWS_AS(parse_sharing("both"), UsageError);
    CHECK(shared.checksum().size() == 16);
    CHECK(shared.checksum() != per.checksum());
    const std::string before = per.checksum();
    per.level(1)(0, 0) = 1e-300;
    CHECK(per.checksum() != before);
}

TEST_CASE("soft quantize examples") {
    SUBCASE("exact match limit") {
        CodebookStack stack(1, CodebookSharing::PerLevel,
                            {Tensor::from_rows({{0.0, 0.0}, {1.0, 2.0}, {-3.0, 0.5}})});
        const SoftAssignment s = soft_quantize(Tensor::row({1.0, 2.0}), stack, 1e-6);
        CHECK(s.weights[0][1] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(std::abs(s.residuals[1][0]) < 1e-12);
        CHECK(std::abs(s.residuals[1][1]) < 1e-12);
        CHECK(s.reconstruction[0] == doctest::Approx(1.0));
        CHECK(s.reconstruction[1] == doctest::Approx(2.0));
    }
    SUBCASE("equidistant codewords split evenly") {
        CodebookStack stack(1, CodebookSharing::PerLevel, {Tensor::from_rows({{-1.0, 3.0}, {1.0, 3.0}})});
        for (double alpha : {1e-3, 0.1, 5.0}) {
            const SoftAssignment s = soft_quantize(Tensor::row({0.0, 0.0}), stack, alpha);
            CHECK(s.weights[0][0] == 0.5);
            CHECK(s.weights[0][1] == 0.5);
        }
    }
    SUBCASE("scalar closed form") {
        CodebookStack stack(1, CodebookSharing::PerLevel, {Tensor::column({0.0, 1.0})});
        const SoftAssignment s = soft_quantize(Tensor::scalar(0.75), stack, 1.0);
        // logits (-0.5625, -0.0625): weights 1/(1+e^0.5), e^0.5/(1+e^0.5)
        const double w1 = std::exp(0.5) / (1.0 + std::exp(0.5));
        CHECK(s.weights[0][0] == doctest::Approx(1.0 - w1).epsilon(1e-14));
        CHECK(s.weights[0][1] == doctest::Approx(w1).epsilon(1e-14));
        CHECK(s.weights[0][1] == doctest::Approx(0.6225).epsilon(1e-4));
        CHECK(s.reconstruction.item() == doctest::Approx(w1).epsilon(1e-14));
    }
    SUBCASE("non-positive alpha rejected") {
        CodebookStack stack(1, 2, 1, CodebookSharing::Shared);
        CHECK_THROWS_AS(soft_quantize(Tensor::scalar(0.0), stack, 0.0), UsageError);
        CHECK_THROWS_AS(soft_quantize(Tensor::scalar(0.0), stack, -1.0), UsageError);
    }
}

TEST_CASE("soft weights lie on the simplex and reconstruction telescopes") {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        Rng rng(seed);
        const auto sharing = seed % 2 == 0 ? CodebookSharing::Shared : CodebookSharing::PerLevel;
        const CodebookStack stack = random_stack(3, 5, 4, sharing, rng);
        const Tensor z = random_tensor(6, 4, rng);
        const double alpha = std::exp(-8.0 * rng.uniform());
        const bool noise = seed % 3 == 0;
        const SoftAssignment s = soft_quantize(z, stack, alpha, noise, &rng);
        REQUIRE(s.weights.size() == 3);
        REQUIRE(s.residuals.size() == 4);
        for (const Tensor& w : s.weights) {
            for (std::size_t r = 0; r < w.rows(); ++r) {
                CHECK(std::abs(row_sum(w, r) - 1.0) < 1e-12);
            }
        }
        CHECK(s.residuals.front() == z);
        CHECK(telescoping_gap(s) < 1e-12);

        // Reconstruction equals the weighted codeword sum.
        for (std::size_t i = 0; i < z.rows(); ++i) {
            for (std::size_t p = 0; p < 4; ++p) {
                double acc = 0.0;
                for (std::size_t l = 0; l < 3; ++l) {
                    for (std::size_t k = 0; k < 5; ++k) {
                        acc += s.weights[l](i, k) * stack.level(l)(k, p);
                    }
                }
                CHECK(std::abs(acc - s.reconstruction(i, p)) < 1e-12);
            }
        }
    }
}

TEST_CASE("observer sees every soft quantization") {
    std::size_t calls = 0;
    double worst = 0.0;
    {
        ScopedSoftQuantizeObserver guard([&](const SoftAssignment& s) {
            ++calls;
            worst = std::max(worst, telescoping_gap(s));
        });
        Rng rng(1);
        const CodebookStack stack = random_stack(2, 3, 2, CodebookSharing::Shared, rng);
        soft_quantize(random_tensor(4, 2, rng), stack, 0.3);
        soft_quantize(random_tensor(4, 2, rng), stack, 0.01, true, &rng);
    }
    CHECK(calls == 2);
    CHECK(worst < 1e-12);
    Rng rng(2);
    const CodebookStack stack = random_stack(2, 3, 2, CodebookSharing::Shared, rng);
    soft_quantize(random_tensor(4, 2, rng), stack, 0.3);
    CHECK(calls == 2);
}

TEST_CASE("noise is reproducible for a fixed seed") {
    Rng init(5);
    const CodebookStack stack = random_stack(2, 4, 3, CodebookSharing::PerLevel, init);
    const Tensor z = random_tensor(5, 3, init);
    Rng a(99);
    Rng b(99);
    const SoftAssignment sa = soft_quantize(z, stack, 0.2, true, &a);
    const SoftAssignment sb = soft_quantize(z, stack, 0.2, true, &b);
    CHECK(sa.reconstruction == sb.reconstruction);
    const SoftAssignment quiet1 = soft_quantize(z, stack, 0.2);
    const SoftAssignment quiet2 = soft_quantize(z, stack, 0.2);
    CHECK(quiet1.reconstruction == quiet2.reconstruction);
    CHECK(sa.reconstruction != quiet1.reconstruction);
    CHECK_THROWS_AS(soft_quantize(z, stack, 0.2, true, nullptr), UsageError);
}

TEST_CASE("hard quantize examples") {
    SUBCASE("exact decomposition with a zero codeword") {
        Tensor book(8, 2);
        for (std::size_t k = 1; k < 8; ++k) {
            book(k, 0) = static_cast<double>(k);
            book(k, 1) = -static_cast<double>(k * k);
        }
        CodebookStack stack(3, CodebookSharing::Shared, {book});
        const double z[] = {5.0, -25.0};
        CHECK(hard_quantize(z, stack) == Codes{5, 0, 0});
    }
    SUBCASE("ties go to the lower index") {
        CodebookStack stack(1, CodebookSharing::PerLevel, {Tensor::from_rows({{3.0}, {1.0}, {-1.0}})});
        const double z[] = {0.0};
        CHECK(hard_quantize(z, stack) == Codes{1});
    }
    SUBCASE("wrong width rejected") {
        CodebookStack stack(1, 2, 3, CodebookSharing::Shared);
        const double z[] = {0.0, 1.0};
        CHECK_THROWS_AS(hard_quantize(z, stack), ShapeError);
    }
}

TEST_CASE("hard reconstruction matches codes") {
    Rng rng(8);
    const CodebookStack stack = random_stack(3, 6, 4, CodebookSharing::PerLevel, rng);
    const Tensor z = random_tensor(10, 4, rng);
    const auto codes = hard_quantize(z, stack);
    const Tensor rec = hard_reconstruct(z, stack);
    for (std::size_t i = 0; i < z.rows(); ++i) {
        for (std::size_t p = 0; p < 4; ++p) {
            const double expect = stack.level(0)(codes[i][0], p) + stack.level(1)(codes[i][1], p) +
                                  stack.level(2)(codes[i][2], p);
            CHECK(rec(i, p) == doctest::Approx(expect).epsilon(1e-14));
        }
    }
}

TEST_CASE("soft argmax approaches hard argmin at small alpha") {
    Rng rng(2024);
    const CodebookStack stack = random_stack(3, 8, 6, CodebookSharing::Shared, rng);
    const Tensor z = random_tensor(500, 6, rng);
    const SoftAssignment s = soft_quantize(z, stack, 1e-4);
    const auto codes = hard_quantize(z, stack);
    std::size_t agree = 0;
    for (std::size_t i = 0; i < z.rows(); ++i) {
        for (std::size_t l = 0; l < 3; ++l) {
            agree += argmax_row(s.weights[l], i) == codes[i][l];
        }
    }
    CHECK(static_cast<double>(agree) / (3.0 * z.rows()) >= 0.99);
}

TEST_CASE("gradients through soft quantization match finite differences") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const auto sharing = seed % 2 == 0 ? CodebookSharing::Shared : CodebookSharing::PerLevel;
        const CodebookStack stack = random_stack(2, 4, 3, sharing, rng);
        std::vector<Tensor> noise{sample_gumbel(5, 4, rng, 0.3), sample_gumbel(5, 4, rng, 0.3)};
        Tape tape;
        ParamBinder params(tape);
        const NodeId z = tape.leaf(random_tensor(5, 3, rng));
        const SoftQuantizeNodes q = soft_quantize(params, z, stack, 0.7, noise);
        const NodeId target = tape.constant(random_tensor(5, 3, rng));
        const NodeId r1 = q.residuals[1];
        const NodeId loss = tape.add(tape.sum(tape.mul(q.reconstruction, target)), tape.sum(tape.mul(r1, r1)));
        tape.backward(loss);
        std::vector<NodeId> check{z};
        for (const Tensor& t : stack.storage()) {
            check.push_back(*params.find(t));
        }
        for (NodeId id : check) {
            const Tensor numeric = finite_diff(tape, loss, id, 1e-5);
            INFO("seed " << seed << " node " << id);
            CHECK(relative_error(tape.grad(id).values(), numeric.values()) < 1e-4);
        }
    }
}

TEST_CASE("shared storage accumulates gradient from every level") {
    Rng rng(3);
    const CodebookStack stack = random_stack(3, 4, 2, CodebookSharing::Shared, rng);
    Tape tape;
    ParamBinder params(tape);
    const NodeId z = tape.constant(random_tensor(2, 2, rng));
    const SoftQuantizeNodes q = soft_quantize(params, z, stack, 0.5);
    const NodeId book = *params.find(stack.level(0));
    CHECK(params.find(stack.level(2)) != nullptr);
    CHECK(*params.find(stack.level(2)) == book);
    tape.backward(tape.sum(q.reconstruction));
    double norm = 0.0;
    for (double g : tape.grad(book).values()) {
        norm += g * g;
    }
    CHECK(norm > 0.0);
}

TEST_CASE("alpha schedule") {
    SUBCASE("initial value") {
        const AlphaSchedule s = AlphaSchedule::annealed(0.2, 1e-3, 50);
        CHECK(s.at(0) == 0.2);
    }
    SUBCASE("half-life arithmetic") {
        AlphaSchedule s{0.2, std::log(2.0) / 100.0, 1e-3, false};
        CHECK(s.at(100) == doctest::Approx(0.1).epsilon(1e-12));
    }
    SUBCASE("floor clamp") {
        AlphaSchedule s{0.2, 0.5, 1e-3, false};
        CHECK(s.at(100000) == 1e-3);
        CHECK(s.at_floor(100000));
    }
    SUBCASE("annealed reaches twice the floor at the last epoch") {
        const AlphaSchedule s = AlphaSchedule::annealed(0.2, 1e-3, 40);
        CHECK(s.at(39) == doctest::Approx(2e-3).epsilon(1e-12));
        CHECK_FALSE(s.at_floor(39));
    }
    SUBCASE("positive and non-increasing") {
        const AlphaSchedule s = AlphaSchedule::annealed(0.2, 1e-3, 30);
        double prev = s.at(0);
        for (std::size_t t = 1; t < 300; ++t) {
            const double a = s.at(t);
            CHECK(a > 0.0);
            CHECK(a <= prev);
            prev = a;
        }
    }
    SUBCASE("constant mode") {
        const AlphaSchedule s = AlphaSchedule::fixed(0.1);
        CHECK(s.at(0) == 0.1);
        CHECK(s.at(1000) == 0.1);
        CHECK_FALSE(s.at_floor(1000));
    }
}
