#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "musr/optim.hpp"
#include "musr/tensor.hpp"
#include "support/gradcheck.hpp"
#include "support/gradient_suite.hpp"
#include "support/naive_oracles.hpp"

using namespace musr;
using musr::test::check_gradients;
using musr::test::random_tensor;

TEST_CASE("matmul identity leaves the input unchanged", "[tensor]") {
    auto eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    auto a = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto c = matmul(eye, a);
    REQUIRE(c.shape() == Shape{2, 3});
    for (std::size_t i = 0; i < 6; ++i) REQUIRE(c.values()[i] == a.values()[i]);
}

TEST_CASE("matmul hand case", "[tensor]") {
    auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
    auto b = Tensor<double>::from({2, 1}, {0, 1});
    auto c = matmul(a, b);
    REQUIRE(c.values()[0] == Catch::Approx(2.0).margin(1e-15));
    REQUIRE(c.values()[1] == Catch::Approx(4.0).margin(1e-15));
}

TEST_CASE("matmul matches the naive triple-loop oracle", "[tensor]") {
    Rng rng(7);
    auto a = random_tensor({3, 4}, rng, -2, 2, false);
    auto b = random_tensor({4, 2}, rng, -2, 2, false);
    const auto expect = musr::test::naive_matmul(a.values(), b.values(), 3, 4, 2);
    auto c = matmul(a, b);
    for (std::size_t i = 0; i < expect.size(); ++i)
        REQUIRE(c.values()[i] == Catch::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("matmul rejects mismatched inner extents", "[tensor]") {
    auto a = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
    REQUIRE_THROWS_AS(matmul(a, b), DimensionError);
}

TEST_CASE("matmul is identical across thread counts", "[tensor]") {
    Rng rng(11);
    auto a = random_tensor({64, 33}, rng, -1, 1, false);
    auto b = random_tensor({33, 47}, rng, -1, 1, false);
    set_threads(1);
    auto c1 = matmul(a, b);
    set_threads(4);
    auto c4 = matmul(a, b);
    set_threads(2);
    for (std::size_t i = 0; i < c1.numel(); ++i) REQUIRE(c1.values()[i] == c4.values()[i]);
}

TEST_CASE("softmax of a constant row is uniform", "[tensor]") {
    auto x = Tensor<double>::from({3}, {0, 0, 0});
    auto y = softmax(x);
    for (double v : y.values()) REQUIRE(v == Catch::Approx(1.0 / 3).margin(1e-15));
}

TEST_CASE("softmax hand case", "[tensor]") {
    auto x = Tensor<double>::from({2}, {std::log(1.0), std::log(3.0)});
    auto y = softmax(x);
    REQUIRE(y.values()[0] == Catch::Approx(0.25).margin(1e-12));
    REQUIRE(y.values()[1] == Catch::Approx(0.75).margin(1e-12));
}

TEST_CASE("softmax survives large inputs via max subtraction", "[tensor]") {
    auto x = Tensor<double>::from({2}, {1000.0, 0.0});
    auto y = softmax(x);
    REQUIRE(y.values()[0] == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(y.values()[1] == Catch::Approx(0.0).margin(1e-12));
    REQUIRE_FALSE(y.has_nonfinite());
}

TEST_CASE("softmax rejects non-finite input", "[tensor]") {
    auto x = Tensor<double>::from({2}, {std::numeric_limits<double>::quiet_NaN(), 0.0});
    REQUIRE_THROWS_AS(softmax(x), NumericError);
}

TEST_CASE("softmax rows sum to one and stay in (0,1)", "[tensor]") {
    Rng rng(3);
    for (int rep = 0; rep < 50; ++rep) {
        auto x = random_tensor({4, 9}, rng, -30, 30, false);
        auto y = softmax(x);
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0;
            for (std::size_t j = 0; j < 9; ++j) {
                const double v = y.values()[r * 9 + j];
                REQUIRE(v > 0.0);
                REQUIRE(v < 1.0);
                s += v;
            }
            REQUIRE(s == Catch::Approx(1.0).margin(1e-9));
        }
    }
}

TEST_CASE("backward of a plain sum gives unit gradients", "[tensor]") {
    auto w = Tensor<double>::from({3}, {5, -1, 2}, true);
    auto loss = sum(w);
    backward(loss);
    for (double g : w.grad()) REQUIRE(g == 1.0);
}

TEST_CASE("backward through an elementwise square", "[tensor]") {
    auto w = Tensor<double>::from({2}, {1, 2}, true);
    auto loss = sum(mul(w, w));
    backward(loss);
    REQUIRE(w.grad()[0] == Catch::Approx(2.0));
    REQUIRE(w.grad()[1] == Catch::Approx(4.0));
}

TEST_CASE("backward accumulates across calls until grads are zeroed", "[tensor]") {
    auto w = Tensor<double>::from({2}, {1, 2}, true);
    auto loss = sum(w);
    backward(loss);
    backward(loss);
    REQUIRE(w.grad()[0] == Catch::Approx(2.0));
    w.zero_grad();
    auto loss2 = sum(w);
    backward(loss2);
    REQUIRE(w.grad()[0] == Catch::Approx(1.0));
}

TEST_CASE("backward rejects non-scalar losses", "[tensor]") {
    auto w = Tensor<double>::from({2}, {1, 2}, true);
    auto y = mul(w, w);
    REQUIRE_THROWS_AS(backward(y), ContractError);
}

TEST_CASE("backward rejects losses that are off the tape", "[tensor]") {
    auto w = Tensor<double>::from({2}, {1, 2}, false);
    auto loss = sum(w);
    REQUIRE_THROWS_AS(backward(loss), ContractError);
}

TEST_CASE("gradient suite: every op matches finite differences", "[tensor][gradients]") {
    auto outcome = musr::test::run_gradient_suite(3, 20260810);
    for (const auto& f : outcome.failures) UNSCOPED_INFO(f);
    REQUIRE(outcome.ok);
}

TEST_CASE("max reductions route gradient to the first maximum only", "[tensor]") {
    // Duplicate maxima: position 0 and 2 tie in row 0.
    auto x = Tensor<double>::from({1, 3, 2}, {5, 1, 2, 3, 5, 0}, true);
    auto m = max_over_axis(x, 1);
    REQUIRE(m.values()[0] == 5.0);
    REQUIRE(m.values()[1] == 3.0);
    backward(sum(m));
    const auto& g = x.grad();
    REQUIRE(g[0] == 1.0);  // (t=0,d=0) wins the tie
    REQUIRE(g[4] == 0.0);  // (t=2,d=0) loses
    REQUIRE(g[3] == 1.0);  // (t=1,d=1)
    double total = 0;
    for (double v : g) total += v;
    REQUIRE(total == 2.0);  // exactly one recipient per reduced slice
}

TEST_CASE("masked max ignores pad positions even when they hold the global max",
          "[tensor]") {
    auto x = Tensor<double>::from({1, 3, 1}, {1.0, 9.0, 2.0}, true);
    Mask mask{1, 3, {1, 0, 1}};
    auto m = masked_max_time(x, mask);
    REQUIRE(m.values()[0] == 2.0);
    backward(sum(m));
    REQUIRE(x.grad()[1] == 0.0);
    REQUIRE(x.grad()[2] == 1.0);
}

TEST_CASE("masked max rejects all-pad rows", "[tensor]") {
    auto x = Tensor<double>::from({1, 2, 1}, {1, 2});
    Mask mask{1, 2, {0, 0}};
    REQUIRE_THROWS_AS(masked_max_time(x, mask), InputError);
}

TEST_CASE("masked max agrees with a naive masked scan", "[tensor]") {
    Rng rng(99);
    auto x = random_tensor({3, 5, 4}, rng, -2, 2, false);
    Mask mask{3, 5, {}};
    mask.valid.resize(15);
    for (std::size_t i = 0; i < 15; ++i) mask.valid[i] = rng.uniform01() < 0.7 ? 1 : 0;
    for (std::size_t b = 0; b < 3; ++b) mask.valid[b * 5] = 1;  // keep rows non-empty
    auto m = masked_max_time(x, mask);
    for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t d = 0; d < 4; ++d) {
            double best = -1e300;
            for (std::size_t t = 0; t < 5; ++t)
                if (mask.valid[b * 5 + t]) best = std::max(best, x.values()[(b * 5 + t) * 4 + d]);
            REQUIRE(m.values()[b * 4 + d] == best);
        }
}

TEST_CASE("learning rate schedule crosses over at warmup", "[tensor][optim]") {
    const double base = 7e-4;
    const std::size_t warmup = 10000;
    REQUIRE(inverse_sqrt_lr(base, warmup, warmup) ==
            Catch::Approx(base / std::sqrt(static_cast<double>(warmup))).epsilon(1e-15));
    // Rising during warmup, decaying after.
    REQUIRE(inverse_sqrt_lr(base, warmup, warmup / 2) <
            inverse_sqrt_lr(base, warmup, warmup));
    REQUIRE(inverse_sqrt_lr(base, warmup, warmup * 4) <
            inverse_sqrt_lr(base, warmup, warmup));
    REQUIRE_THROWS_AS(inverse_sqrt_lr(base, warmup, 0), ContractError);
}

TEST_CASE("adam with zero gradients leaves parameters unchanged", "[tensor][optim]") {
    Rng rng(4);
    std::vector<Tensor<double>> params = {random_tensor({3, 3}, rng)};
    const auto before = params[0].values();
    AdamState<double> adam(0.9, 0.98, 1e-8, 1e-3, 100);
    adam.attach(params);
    params[0].zero_grad();
    adam.step_update(params);
    adam.step_update(params);
    REQUIRE(params[0].values() == before);
}

TEST_CASE("adam first step moves a scalar by about the effective lr", "[tensor][optim]") {
    std::vector<Tensor<double>> params = {Tensor<double>::scalar(1.0, true)};
    AdamState<double> adam(0.9, 0.98, 1e-8, 2e-3, 50);
    adam.attach(params);
    params[0].grad()[0] = 1.0;
    adam.step_update(params);
    // Bias-corrected m/sqrt(v) of a constant unit gradient is exactly 1.
    const double effective = inverse_sqrt_lr(2e-3, 50, 1);
    REQUIRE(1.0 - params[0].values()[0] == Catch::Approx(effective).epsilon(1e-6));
}

TEST_CASE("dropout is identity in eval mode and seeded in train mode", "[tensor]") {
    Rng base(77);
    auto x = random_tensor({4, 4}, base, -1, 1, false);
    Rng r1(123), r2(123);
    auto eval_out = dropout(x, 0.5, r1, false);
    REQUIRE(eval_out.values() == x.values());
    auto a = dropout(x, 0.5, r1, true);
    auto b = dropout(x, 0.5, r2, true);
    // r1 advanced by the eval call? It must not have: identity draws nothing.
    REQUIRE(a.values() == b.values());
    std::size_t zeros = 0;
    for (double v : a.values()) zeros += v == 0.0 ? 1 : 0;
    REQUIRE(zeros > 0);
    REQUIRE(zeros < 16);
}

TEST_CASE("tensors detect non-finite values", "[tensor]") {
    auto x = Tensor<double>::from({2}, {1.0, 2.0});
    REQUIRE_FALSE(x.has_nonfinite());
    x.values()[1] = std::numeric_limits<double>::infinity();
    REQUIRE(x.has_nonfinite());
}

TEST_CASE("grad buffers exist exactly when tracking is on", "[tensor]") {
    auto x = Tensor<double>::from({2}, {1.0, 2.0}, true);
    REQUIRE(x.grad().size() == 2);
    x.set_requires_grad(false);
    REQUIRE_THROWS_AS(x.grad(), ContractError);
}
