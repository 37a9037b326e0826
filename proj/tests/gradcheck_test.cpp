#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "recal3d/gradsuite.hpp"

using namespace recal3d;

TEST_CASE("backward basics") {
    Rng rng(1);
    Tensor x = Tensor::uniform({2, 2, 2, 2}, rng, -1.0, 1.0);

    SUBCASE("sum gives all-ones gradient") {
        Tape tape;
        tape.watch(x);
        tape.backward(sum(x));
        for (double g : tape.grad(x)) CHECK(g == 1.0);
        x.detach();
    }

    SUBCASE("half squared norm gives the input back") {
        Tape tape;
        tape.watch(x);
        tape.backward(scale(sum(mul_elementwise(x, x)), 0.5));
        const auto& g = tape.grad(x);
        for (std::size_t i = 0; i < x.size(); ++i) {
            CHECK(g[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));
        }
        x.detach();
    }

    SUBCASE("unused parameter gets no gradient") {
        Tensor unused = Tensor::uniform({1, 1, 1, 1}, rng, -1.0, 1.0);
        Tape tape;
        tape.watch(x);
        tape.watch(unused);
        tape.backward(sum(x));
        CHECK(tape.grad(unused).empty());
        x.detach();
        unused.detach();
    }
}

TEST_CASE("grad_check on smooth and kinked graphs") {
    Rng rng(8);
    double e1 = grad_check(
        [](Tape&, std::vector<Tensor>& p) { return sigmoid(sum(p[0])); },
        {Tensor::uniform({2, 3, 3, 3}, rng, -0.2, 0.2)});
    CHECK(e1 < 1e-6);

    double e2 = grad_check(
        [](Tape&, std::vector<Tensor>& p) { return sum(relu(p[0])); },
        {kink_safe_tensor({2, 3, 3, 3}, rng)});
    CHECK(e2 < 1e-6);

    double e3 = grad_check(
        [](Tape&, std::vector<Tensor>& p) { return sum(maxpool_down2(p[0])); },
        {kink_safe_tensor({2, 4, 4, 4}, rng)});
    CHECK(e3 < 1e-6);
}

TEST_CASE("kink-safe tensors have well-separated magnitudes") {
    Rng rng(4);
    Tensor t = kink_safe_tensor({2, 3, 3, 3}, rng);
    std::vector<double> mags;
    for (std::size_t i = 0; i < t.size(); ++i) mags.push_back(std::fabs(t.data()[i]));
    std::sort(mags.begin(), mags.end());
    CHECK(mags.front() >= 0.1);
    for (std::size_t i = 1; i < mags.size(); ++i) {
        CHECK(mags[i] - mags[i - 1] > 1e-4);  // far beyond the 2e-5 fd window
    }
}

TEST_CASE("full gradient suite passes at the pinned seed") {
    auto cases = run_gradient_suite(20240817);
    CHECK(cases.size() >= 40);
    for (const auto& c : cases) {
        INFO(c.name, " max rel err ", c.max_rel_err);
        CHECK(c.passed());
    }
}
