#include <doctest.h>

#include <cmath>

#include "memaudit/errors.hpp"
#include "memaudit/kernels.hpp"
#include "memaudit/tensor.hpp"
#include "test_support.hpp"

using namespace memaudit;
using memaudit::testing::check_gradients;
using memaudit::testing::random_tensor;

TEST_CASE("matmul identity and hand-computed 2x2") {
    const Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    const Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    const Tensor r1 = matmul(eye, a);
    CHECK(r1.data()[0] == 1.0);
    CHECK(r1.data()[1] == 2.0);
    CHECK(r1.data()[2] == 3.0);
    CHECK(r1.data()[3] == 4.0);

    const Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
    const Tensor r2 = matmul(a, b);
    CHECK(r2.data()[0] == doctest::Approx(19).epsilon(1e-15));
    CHECK(r2.data()[1] == doctest::Approx(22).epsilon(1e-15));
    CHECK(r2.data()[2] == doctest::Approx(43).epsilon(1e-15));
    CHECK(r2.data()[3] == doctest::Approx(50).epsilon(1e-15));
}

TEST_CASE("matmul annihilator and shape errors") {
    Rng rng(7);
    const Tensor z(Shape{3, 4});
    const Tensor any = random_tensor({4, 2}, rng);
    const Tensor out = matmul(z, any);
    for (const double v : out.data()) {
        CHECK(v == 0.0);
    }
    CHECK_THROWS_AS(matmul(Tensor(Shape{2, 3}), Tensor(Shape{4, 5})), DimensionError);
    CHECK_THROWS_WITH_AS(matmul(Tensor(Shape{2, 3}), Tensor(Shape{4, 5})),
                         doctest::Contains("[2x3]"), DimensionError);
}

TEST_CASE("conv2d delta kernel copies the centre crop") {
    Rng rng(3);
    const Tensor img = random_tensor({1, 6, 6}, rng, 0.0, 1.0);
    Tensor k(Shape{1, 1, 3, 3});
    k.mutable_data()[4] = 1.0;  // centre tap
    const Tensor bias(Shape{1});
    const Tensor out = conv2d(img, k, bias);
    REQUIRE(out.shape() == Shape{1, 4, 4});
    for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 4; ++x) {
            CHECK(out.at({0, y, x}) == img.at({0, y + 1, x + 1}));
        }
    }
}

TEST_CASE("conv2d all-ones kernel on a ramp equals sliding 9-sums") {
    Tensor img(Shape{1, 4, 4});
    for (int i = 0; i < 16; ++i) {
        img.mutable_data()[i] = i;
    }
    const Tensor k(Shape{1, 1, 3, 3}, 1.0);
    const Tensor bias(Shape{1});
    const Tensor out = conv2d(img, k, bias);
    // Brute-force sliding-window oracle.
    for (int y = 0; y < 2; ++y) {
        for (int x = 0; x < 2; ++x) {
            double want = 0.0;
            for (int dy = 0; dy < 3; ++dy) {
                for (int dx = 0; dx < 3; ++dx) {
                    want += img.at({0, y + dy, x + dx});
                }
            }
            CHECK(out.at({0, y, x}) == doctest::Approx(want).epsilon(1e-14));
        }
    }
}

TEST_CASE("conv2d zero kernels and zero bias give zero output") {
    Rng rng(5);
    const Tensor img = random_tensor({2, 5, 5}, rng);
    const Tensor k(Shape{3, 2, 3, 3});
    const Tensor bias(Shape{3});
    const Tensor out = conv2d(img, k, bias);
    for (const double v : out.data()) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("conv2d channel mismatch raises a dimension error") {
    CHECK_THROWS_AS(conv2d(Tensor(Shape{2, 6, 6}), Tensor(Shape{4, 3, 3, 3}), Tensor(Shape{4})),
                    DimensionError);
}

TEST_CASE("conv2d linearity in the input") {
    Rng rng(11);
    const Tensor x = random_tensor({2, 6, 6}, rng);
    const Tensor y = random_tensor({2, 6, 6}, rng);
    const Tensor k = random_tensor({3, 2, 3, 3}, rng);
    const Tensor bias(Shape{3});
    const double a = 1.7;
    const double b = -0.4;
    Tensor combo(Shape{2, 6, 6});
    for (std::size_t i = 0; i < combo.mutable_data().size(); ++i) {
        combo.mutable_data()[i] = a * x.data()[i] + b * y.data()[i];
    }
    const Tensor lhs = conv2d(combo, k, bias);
    const Tensor cx = conv2d(x, k, bias);
    const Tensor cy = conv2d(y, k, bias);
    for (std::size_t i = 0; i < lhs.data().size(); ++i) {
        CHECK(std::fabs(lhs.data()[i] - (a * cx.data()[i] + b * cy.data()[i])) < 1e-10);
    }
}

TEST_CASE("maxpool2 single window and tie rule") {
    const Tensor t = Tensor::from_data({1, 2, 2}, {1, 2, 3, 4});
    const Tensor out = maxpool2(t);
    REQUIRE(out.size() == 1);
    CHECK(out.data()[0] == 4.0);

    // Constant input: gradient goes to the first element of each window.
    Tensor c(Shape{1, 2, 2}, 3.0, true);
    const Tensor pooled = maxpool2(c);
    Tensor loss = sum(pooled);
    backward(loss);
    const auto g = loss.tape()->gradient(c);
    CHECK(g[0] == 1.0);
    CHECK(g[1] == 0.0);
    CHECK(g[2] == 0.0);
    CHECK(g[3] == 0.0);
}

TEST_CASE("maxpool2 4x4 random instance matches the exhaustive window scan") {
    Rng rng(13);
    const Tensor t = random_tensor({1, 4, 4}, rng);
    const Tensor out = maxpool2(t);
    for (int y = 0; y < 2; ++y) {
        for (int x = 0; x < 2; ++x) {
            double want = -1e300;
            for (int dy = 0; dy < 2; ++dy) {
                for (int dx = 0; dx < 2; ++dx) {
                    want = std::max(want, t.at({0, 2 * y + dy, 2 * x + dx}));
                }
            }
            CHECK(out.at({0, y, x}) == want);
        }
    }
}

TEST_CASE("softmax of a constant vector is uniform") {
    const Tensor t = Tensor::from_data({4}, {2.5, 2.5, 2.5, 2.5});
    const Tensor s = softmax(t);
    for (const double v : s.data()) {
        CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
    }
}

TEST_CASE("softmax([0, ln 2]) = [1/3, 2/3]") {
    const Tensor t = Tensor::from_data({2}, {0.0, std::log(2.0)});
    const Tensor s = softmax(t);
    CHECK(s.data()[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(s.data()[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax shift invariance and normalisation") {
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor x = random_tensor({10}, rng, -40.0, 40.0);
        const double c = rng.uniform(-100.0, 100.0);
        Tensor shifted(Shape{10});
        for (int i = 0; i < 10; ++i) {
            shifted.mutable_data()[i] = x.data()[i] + c;
        }
        const Tensor a = softmax(x);
        const Tensor b = softmax(shifted);
        double sum_a = 0.0;
        for (int i = 0; i < 10; ++i) {
            CHECK(std::fabs(a.data()[i] - b.data()[i]) < 1e-12);
            sum_a += a.data()[i];
        }
        CHECK(std::fabs(sum_a - 1.0) < 1e-12);
    }
}

TEST_CASE("softmax stays finite for huge logits") {
    const Tensor t = Tensor::from_data({3}, {1e4, -1e4, 0.0});
    const Tensor s = softmax(t);
    for (const double v : s.data()) {
        CHECK(std::isfinite(v));
    }
}

TEST_CASE("cross entropy of certain and uniform predictions") {
    // Saturated one-hot logits: probability ~1 on the target.
    const Tensor sure = Tensor::from_data({10}, {60, 0, 0, 0, 0, 0, 0, 0, 0, 0});
    CHECK(cross_entropy(sure, 0).item() == doctest::Approx(0.0).epsilon(1e-12));

    const Tensor uniform(Shape{10});
    CHECK(cross_entropy(uniform, 3).item() == doctest::Approx(std::log(10.0)).epsilon(1e-12));
    CHECK_THROWS_AS(cross_entropy(uniform, 10), std::out_of_range);
    CHECK_THROWS_AS(cross_entropy(uniform, -1), std::out_of_range);
}

TEST_CASE("backward: sum gives all-ones, square gives 2w") {
    Tensor w = Tensor::from_data({3}, {1.0, -2.0, 5.0}, true);
    Tensor loss = sum(w);
    backward(loss);
    for (const double g : loss.tape()->gradient(w)) {
        CHECK(g == 1.0);
    }

    Tensor w2 = Tensor::from_data({1}, {3.0}, true);
    Tensor sq = sum(mul(w2, w2));
    backward(sq);
    CHECK(sq.tape()->gradient(w2)[0] == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("backward on an untaped value is a usage error") {
    const Tensor plain = Tensor::from_data({1}, {2.0});
    CHECK_THROWS_AS(backward(plain), UsageError);
}

TEST_CASE("tape is single use and replays ops in reverse order exactly once") {
    Tensor w = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tensor h = relu(w);
    Tensor loss = sum(h);
    auto tape = loss.tape();
    REQUIRE(tape != nullptr);
    CHECK(tape->num_ops() == 2);

    std::vector<int> order;
    tape->record([&order](Tape&) { order.push_back(1); });
    tape->record([&order](Tape&) { order.push_back(2); });
    backward(loss);
    REQUIRE(order.size() == 2);
    CHECK(order[0] == 2);
    CHECK(order[1] == 1);
    CHECK_THROWS_AS(backward(loss), UsageError);
    CHECK_THROWS_AS(tape->record([](Tape&) {}), UsageError);
}

TEST_CASE("leaves not reachable from the loss have exactly zero gradients") {
    Tensor used = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tensor unused = Tensor::from_data({2}, {3.0, 4.0}, true);
    Tensor loss = sum(used);
    backward(loss);
    for (const double g : loss.tape()->gradient(unused)) {
        CHECK(g == 0.0);
    }
}

TEST_CASE("sequential ops in one thread share the active tape") {
    Tensor w1 = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tensor w2 = Tensor::from_data({2}, {3.0, 4.0}, true);
    Tensor a = relu(w1);
    Tensor b = relu(w2);
    CHECK(a.tape() == b.tape());
    Tensor loss = sum(add(a, b));
    backward(loss);
    CHECK(loss.tape()->gradient(w1) == std::vector<double>{1.0, 1.0});
    CHECK(loss.tape()->gradient(w2) == std::vector<double>{1.0, 1.0});
}

TEST_CASE("mixing a consumed tape into a fresh forward is rejected") {
    Tensor w1 = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tensor a = relu(w1);
    backward(sum(a));  // consumes the tape `a` lives on
    Tensor w2 = Tensor::from_data({2}, {3.0, 4.0}, true);
    Tensor b = relu(w2);  // fresh tape
    CHECK_THROWS_AS(add(a, b), UsageError);
}

TEST_CASE("grad_sq_norm oracle: flatten and accumulate") {
    CHECK(grad_sq_norm(std::vector<std::vector<double>>{{0, 0}, {0}}) == 0.0);
    CHECK(grad_sq_norm(std::vector<std::vector<double>>{{3.0, 4.0}}) == 25.0);

    Rng rng(23);
    Tensor w1 = random_tensor({4, 3}, rng, -1, 1, true);
    Tensor w2 = random_tensor({3}, rng, -1, 1, true);
    Tensor x = random_tensor({2, 4}, rng);
    Tensor loss = sum(relu(add_rowvec(matmul(x, w1), w2)));
    backward(loss);
    const auto tape = loss.tape();
    const std::vector<Tensor> params{w1, w2};
    // Flatten-then-dot oracle over the same gradients.
    double want = 0.0;
    for (const auto& p : params) {
        for (const double g : tape->gradient(p)) {
            want += g * g;
        }
    }
    CHECK(std::fabs(grad_sq_norm(*tape, params) - want) <= 1e-12);
}

TEST_CASE("gradcheck: every primitive against central finite differences") {
    Rng rng(29);
    Rng coords(31);

    SUBCASE("matmul + add_rowvec") {
        Tensor a = random_tensor({3, 4}, rng, -1, 1, true);
        Tensor b = random_tensor({4, 5}, rng, -1, 1, true);
        Tensor v = random_tensor({5}, rng, -1, 1, true);
        const auto r = check_gradients({&a, &b, &v},
                                       [&] { return sum(add_rowvec(matmul(a, b), v)); }, coords);
        CHECK(r.worst_rel_err < 1e-4);
    }
    SUBCASE("relu + mul + scale + add") {
        Tensor a = random_tensor({7}, rng, -1, 1, true);
        Tensor b = random_tensor({7}, rng, -1, 1, true);
        const auto r = check_gradients(
            {&a, &b}, [&] { return sum(scale(mul(relu(a), add(a, b)), 1.3)); }, coords);
        CHECK(r.worst_rel_err < 1e-4);
    }
    SUBCASE("conv2d + maxpool2") {
        Tensor img = random_tensor({2, 6, 6}, rng, -1, 1, true);
        Tensor k = random_tensor({3, 2, 3, 3}, rng, -1, 1, true);
        Tensor bias = random_tensor({3}, rng, -0.5, 0.5, true);
        const auto r = check_gradients(
            {&img, &k, &bias}, [&] { return sum(maxpool2(conv2d(img, k, bias))); }, coords);
        CHECK(r.worst_rel_err < 1e-4);
    }
    SUBCASE("softmax") {
        Tensor x = random_tensor({6}, rng, -2, 2, true);
        Tensor weights = random_tensor({6}, rng, -1, 1, false);
        const auto r = check_gradients({&x}, [&] { return sum(mul(softmax(x), weights)); },
                                       coords);
        CHECK(r.worst_rel_err < 1e-4);
    }
    SUBCASE("cross_entropy") {
        Tensor x = random_tensor({6}, rng, -2, 2, true);
        const auto r = check_gradients({&x}, [&] { return cross_entropy(x, 2); }, coords);
        CHECK(r.worst_rel_err < 1e-4);
    }
    SUBCASE("mean_cross_entropy") {
        Tensor x = random_tensor({4, 5}, rng, -2, 2, true);
        const std::vector<int> targets{0, 3, 1, 4};
        const auto r = check_gradients(
            {&x}, [&] { return mean_cross_entropy(x, std::span<const int>(targets)); }, coords);
        CHECK(r.worst_rel_err < 1e-4);
    }
    SUBCASE("batchnorm train mode") {
        Tensor x = random_tensor({6, 3}, rng, -2, 2, true);
        Tensor gamma = random_tensor({3}, rng, 0.5, 1.5, true);
        Tensor beta = random_tensor({3}, rng, -0.5, 0.5, true);
        const std::vector<int> targets{0, 2, 1, 0, 2, 1};
        const auto r = check_gradients({&x, &gamma, &beta}, [&] {
            Tensor rm(Shape{3});
            Tensor rv(Shape{3}, 1.0);
            return mean_cross_entropy(batchnorm(x, gamma, beta, rm, rv, true),
                                      std::span<const int>(targets));
        }, coords);
        CHECK(r.worst_rel_err < 1e-4);
    }
    SUBCASE("batchnorm eval mode") {
        Tensor x = random_tensor({4, 3}, rng, -2, 2, true);
        Tensor gamma = random_tensor({3}, rng, 0.5, 1.5, true);
        Tensor beta = random_tensor({3}, rng, -0.5, 0.5, true);
        Tensor rm = random_tensor({3}, rng, -0.3, 0.3);
        Tensor rv = random_tensor({3}, rng, 0.5, 2.0);
        const std::vector<int> targets{0, 2, 1, 0};
        const auto r = check_gradients({&x, &gamma, &beta}, [&] {
            return mean_cross_entropy(batchnorm(x, gamma, beta, rm, rv, false),
                                      std::span<const int>(targets));
        }, coords);
        CHECK(r.worst_rel_err < 1e-4);
    }
    SUBCASE("dropout with a fixed mask") {
        Tensor x = random_tensor({40}, rng, 0.5, 1.5, true);
        const auto r = check_gradients({&x}, [&] {
            Rng mask_rng(99);  // same mask every call
            return sum(dropout(x, 0.4, mask_rng));
        }, coords);
        CHECK(r.worst_rel_err < 1e-4);
    }
}

TEST_CASE("forward results carry no NaN/Inf for finite inputs") {
    Rng rng(37);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = random_tensor({4, 8}, rng, -50.0, 50.0);
        const Tensor w = random_tensor({8, 6}, rng, -5.0, 5.0);
        const Tensor b = random_tensor({6}, rng, -5.0, 5.0);
        const Tensor h = relu(add_rowvec(matmul(x, w), b));
        for (const double v : h.data()) {
            CHECK(std::isfinite(v));
        }
    }
}

TEST_CASE("single-threaded determinism: repeated forward/backward is bit-identical") {
    const auto run = [] {
        Rng rng(41);
        Tensor x = testing::random_tensor({5, 6}, rng, -1, 1, false);
        Tensor w = testing::random_tensor({6, 4}, rng, -1, 1, true);
        const std::vector<int> targets{0, 1, 2, 3, 0};
        Tensor loss = mean_cross_entropy(matmul(x, w), std::span<const int>(targets));
        backward(loss);
        auto g = loss.tape()->gradient(w);
        g.push_back(loss.item());
        return g;
    };
    CHECK(run() == run());
}

TEST_CASE("reshape aliases the gradient slot") {
    Tensor w = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Tensor flat = relu(w).reshaped({6});
    Tensor loss = sum(flat);
    backward(loss);
    const auto g = loss.tape()->gradient(w);
    for (const double v : g) {
        CHECK(v == 1.0);
    }
}
