#include <doctest.h>

#include <cmath>

#include "memaudit/errors.hpp"
#include "memaudit/models.hpp"
#include "test_support.hpp"

using namespace memaudit;
using memaudit::testing::random_tensor;

namespace {

ModelSpec mlp_spec(std::uint64_t seed = 1) {
    ModelSpec s;
    s.arch = Arch::MLP;
    s.input_shape = {1, 28, 28};
    s.num_classes = 10;
    s.seed = seed;
    return s;
}

}  // namespace

TEST_CASE("MLP parameter count matches the closed form") {
    const Model m = Model::build(mlp_spec());
    // 784*512+512 + 512*256+256 + 256*10+10
    CHECK(m.num_params() == 535818);
}

TEST_CASE("MLP forward on a zero image is a valid probability vector") {
    Model m = Model::build(mlp_spec());
    m.set_eval();
    const Tensor zero(Shape{1, 28, 28});
    const auto p = m.predict(zero);
    double sum = 0.0;
    for (const double v : p) {
        CHECK(v > 0.0);
        sum += v;
    }
    CHECK(std::fabs(sum - 1.0) < 1e-12);
}

TEST_CASE("equal seeds build identical initial weights") {
    const Model a = Model::build(mlp_spec(42));
    const Model b = Model::build(mlp_spec(42));
    const Model c = Model::build(mlp_spec(43));
    REQUIRE(a.params().size() == b.params().size());
    bool all_equal_ab = true;
    bool all_equal_ac = true;
    for (std::size_t i = 0; i < a.params().size(); ++i) {
        const auto pa = a.params()[i].value.data();
        const auto pb = b.params()[i].value.data();
        const auto pc = c.params()[i].value.data();
        all_equal_ab = all_equal_ab && std::equal(pa.begin(), pa.end(), pb.begin());
        all_equal_ac = all_equal_ac && std::equal(pa.begin(), pa.end(), pc.begin());
    }
    CHECK(all_equal_ab);
    CHECK(!all_equal_ac);
}

TEST_CASE("CNN-1 spatial trace for 28x28 input: 26 -> 24 -> 12") {
    ModelSpec s = mlp_spec();
    s.arch = Arch::CNN1;
    Model m = Model::build(s);
    m.set_eval();

    // Shape arithmetic oracle on the conv stack.
    CHECK((28 - 2) == 26);
    CHECK((26 - 2) == 24);
    CHECK(24 / 2 == 12);
    // fc1 consumes 64 * 12 * 12 inputs.
    bool found = false;
    for (const auto& p : m.params()) {
        if (p.name == "fc1.w") {
            CHECK(p.value.shape() == Shape{64 * 12 * 12, 128});
            found = true;
        }
    }
    CHECK(found);

    const Tensor img(Shape{1, 28, 28}, 0.3);
    const auto p = m.predict(img);
    double sum = 0.0;
    for (const double v : p) {
        sum += v;
    }
    CHECK(std::fabs(sum - 1.0) < 1e-12);
}

TEST_CASE("CNN-2 spatial trace for 32x32: 30 -> 28 -> 14 -> 12 -> 10 -> 5") {
    ModelSpec s;
    s.arch = Arch::CNN2;
    s.input_shape = {3, 32, 32};
    s.num_classes = 10;
    s.seed = 3;
    Model m = Model::build(s);
    m.set_eval();
    for (const auto& p : m.params()) {
        if (p.name == "fc1.w") {
            CHECK(p.value.shape() == Shape{64 * 5 * 5, 1024});
        }
    }
    Rng rng(4);
    const Tensor img = random_tensor({3, 32, 32}, rng, 0.0, 1.0);
    const auto p1 = m.predict(img);
    CHECK(p1.size() == 10);
    const auto p2 = m.predict(img);
    CHECK(p1 == p2);  // eval-mode repeatability, bitwise
}

TEST_CASE("predict in train mode is a usage error") {
    Model m = Model::build(mlp_spec());
    m.set_train();
    CHECK_THROWS_AS(m.predict(Tensor(Shape{1, 28, 28})), UsageError);
}

TEST_CASE("predict floors probabilities away from zero") {
    // A hand-initialised 2-class linear model with a saturated logit gap:
    // softmax underflows to 0 for the losing class, the floor keeps it
    // positive.
    ModelSpec s = mlp_spec(7);
    Model m = Model::build(s);
    // Force an extreme head bias so one logit dominates.
    for (auto& p : m.params()) {
        if (p.name == "head.b") {
            p.value.mutable_data()[0] = 800.0;
        }
    }
    m.set_eval();
    const auto p = m.predict(Tensor(Shape{1, 28, 28}, 0.5));
    double sum = 0.0;
    for (const double v : p) {
        CHECK(v > 0.0);
        CHECK(v >= kProbabilityFloor / 2.0);
        sum += v;
    }
    CHECK(std::fabs(sum - 1.0) < 1e-12);
}

TEST_CASE("hand-initialised 2-class linear head matches the analytic softmax") {
    // Zero all weights except the head, so logits = head bias.
    ModelSpec s = mlp_spec(11);
    s.num_classes = 2;
    Model m = Model::build(s);
    for (auto& p : m.params()) {
        std::fill(p.value.mutable_data().begin(), p.value.mutable_data().end(), 0.0);
        if (p.name == "head.b") {
            p.value.mutable_data()[0] = 0.0;
            p.value.mutable_data()[1] = std::log(2.0);
        }
    }
    m.set_eval();
    const auto p = m.predict(Tensor(Shape{1, 28, 28}, 0.7));
    CHECK(p[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("dropout survivor fraction within 3 sigma over 1e5 draws") {
    Rng rng(17);
    const double rate = 0.5;
    const int n = 100000;
    Tensor x(Shape{n}, 1.0, false);
    Rng mask_rng(23);
    const Tensor y = dropout(x, rate, mask_rng);
    int survivors = 0;
    double survivor_value = 0.0;
    for (const double v : y.data()) {
        if (v != 0.0) {
            ++survivors;
            survivor_value = v;
        }
    }
    const double keep = 1.0 - rate;
    const double sigma = std::sqrt(n * keep * rate);
    CHECK(std::fabs(survivors - n * keep) < 3.0 * sigma);
    CHECK(survivor_value == doctest::Approx(1.0 / keep).epsilon(1e-12));
}

TEST_CASE("dropout sites: eval mode is the identity") {
    ModelSpec s = mlp_spec(19);
    s.dropout_rate = 0.5;
    Model m = Model::build(s);
    m.set_eval();
    Rng rng(20);
    const Tensor img = random_tensor({1, 28, 28}, rng, 0.0, 1.0);
    const auto p1 = m.predict(img);
    const auto p2 = m.predict(img);
    CHECK(p1 == p2);
}

TEST_CASE("batchnorm train-mode statistics before affine parameters") {
    Rng rng(21);
    const int b = 512;
    const int f = 4;
    Tensor x = random_tensor({b, f}, rng, -3.0, 5.0);
    const Tensor gamma(Shape{f}, 1.0);
    const Tensor beta(Shape{f}, 0.0);
    Tensor rm(Shape{f});
    Tensor rv(Shape{f}, 1.0);
    const Tensor y = batchnorm(x, gamma, beta, rm, rv, /*training=*/true);
    for (int j = 0; j < f; ++j) {
        double mean = 0.0;
        for (int i = 0; i < b; ++i) {
            mean += y.at({i, j});
        }
        mean /= b;
        double var = 0.0;
        for (int i = 0; i < b; ++i) {
            var += (y.at({i, j}) - mean) * (y.at({i, j}) - mean);
        }
        var /= b;
        CHECK(std::fabs(mean) < 1e-6);
        CHECK(std::fabs(var - 1.0) < 1e-6);
    }
}

TEST_CASE("batchnorm running statistics feed eval mode") {
    Rng rng(22);
    Tensor gamma(Shape{2}, 1.0);
    Tensor beta(Shape{2}, 0.0);
    Tensor rm(Shape{2});
    Tensor rv(Shape{2}, 1.0);
    // Several training batches drive the running stats toward the data law.
    for (int step = 0; step < 200; ++step) {
        Tensor x(Shape{64, 2});
        for (int i = 0; i < 64; ++i) {
            x.mutable_data()[static_cast<std::size_t>(i) * 2] = 5.0 + rng.normal();
            x.mutable_data()[static_cast<std::size_t>(i) * 2 + 1] = -2.0 + 3.0 * rng.normal();
        }
        (void)batchnorm(x, gamma, beta, rm, rv, true);
    }
    CHECK(rm.data()[0] == doctest::Approx(5.0).epsilon(0.05));
    CHECK(rm.data()[1] == doctest::Approx(-2.0).epsilon(0.25));
    CHECK(rv.data()[1] == doctest::Approx(9.0).epsilon(0.15));

    // Eval mode normalises a fresh sample with the running stats only.
    Tensor probe(Shape{1, 2});
    probe.mutable_data()[0] = 5.0;
    probe.mutable_data()[1] = -2.0;
    const Tensor out = batchnorm(probe, gamma, beta, rm, rv, false);
    CHECK(std::fabs(out.data()[0]) < 0.1);
    CHECK(std::fabs(out.data()[1]) < 0.1);
}

TEST_CASE("batch-norm model variant trains statistics and predicts deterministically") {
    ModelSpec s = mlp_spec(29);
    s.batch_norm = true;
    Model m = Model::build(s);
    CHECK(m.buffers().size() == 4);  // bn1/bn2 mean+var
    m.set_train();
    Rng rng(30);
    Tensor batch = random_tensor({32, 1, 28, 28}, rng, 0.0, 1.0);
    {
        NoGradGuard ng;
        (void)m.forward(batch);
    }
    m.set_eval();
    const Tensor img = random_tensor({1, 28, 28}, rng, 0.0, 1.0);
    CHECK(m.predict(img) == m.predict(img));
}
