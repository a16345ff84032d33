#include <doctest.h>

#include "oodx/error.hpp"
#include "oodx/optim.hpp"
#include "oodx/tensor.hpp"
#include "oracles.hpp"

#include <cmath>
#include <random>

using namespace oodx;

namespace {

void check_max_abs(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double tol) {
    REQUIRE(a.size() == b.size());
    CHECK((a - b).cwiseAbs().maxCoeff() <= tol);
}

// Checks every parameter's analytic gradient of `loss_of` against central differences.
void gradient_check(std::vector<Var> params, const std::function<Var()>& loss_of, double tol = 1e-4) {
    for (auto& p : params) p.zero_grad();
    backward(loss_of());
    for (auto& p : params) {
        const Eigen::VectorXd analytic = p.grad();
        const Eigen::VectorXd numeric = oracle::numeric_gradient(p.value().data, [&] {
            NoGradGuard guard;
            return loss_of().item();
        });
        double worst = 0.0;
        for (Index i = 0; i < analytic.size(); ++i)
            worst = std::max(worst, oracle::relative_error(analytic[i], numeric[i]));
        INFO("parameter " << p.name());
        CHECK(worst < tol);
    }
}

}  // namespace

TEST_CASE("conv2d identity and zero cases") {
    std::mt19937_64 rng(1);
    const Tensor x = oracle::random_tensor({1, 5, 4}, rng);
    const auto y = conv2d(Var::constant(x), Var::constant(Tensor({1, 1, 1, 1}, {1.0})), Var::constant(Tensor({1}, {0.0})));
    CHECK(y.shape() == x.shape);
    check_max_abs(y.data(), x.data, 0.0);

    const auto z = conv2d(Var::constant(Tensor::filled({2, 6, 6}, 0.0)), Var::constant(oracle::random_tensor({3, 2, 3, 3}, rng)),
                          Var::constant(Tensor::filled({3}, 0.0)), Padding::same);
    CHECK(z.shape() == Shape{3, 6, 6});
    CHECK(z.data().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("conv2d hand example") {
    const auto y = conv2d(Var::constant(Tensor({1, 2, 2}, {1, 2, 3, 4})), Var::constant(Tensor({1, 1, 2, 2}, {1, 0, 0, 1})),
                          Var::constant(Tensor({1}, {0.0})));
    CHECK(y.shape() == Shape{1, 1, 1});
    CHECK(y.item() == 5.0);
}

TEST_CASE("conv2d matches nested loops") {
    std::mt19937_64 rng(7);
    for (bool same : {false, true}) {
        const Tensor x = oracle::random_tensor({3, 7, 6}, rng);
        const Tensor k = oracle::random_tensor({4, 3, 3, 3}, rng);
        const Tensor b = oracle::random_tensor({4}, rng);
        const auto y = conv2d(Var::constant(x), Var::constant(k), Var::constant(b), same ? Padding::same : Padding::valid);
        const Tensor expect = oracle::conv2d(x, k, b, same);
        CHECK(y.shape() == expect.shape);
        check_max_abs(y.data(), expect.data, 1e-12);
    }
}

TEST_CASE("conv2d shape errors name both shapes") {
    const auto x = Var::constant(Tensor::filled({2, 4, 4}, 1.0));
    const auto k = Var::constant(Tensor::filled({1, 3, 3, 3}, 1.0));
    const auto b = Var::constant(Tensor::filled({1}, 0.0));
    try {
        conv2d(x, k, b);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2,4,4]") != std::string::npos);
        CHECK(msg.find("[1,3,3,3]") != std::string::npos);
    }
    CHECK_THROWS_AS(conv2d(Var::constant(Tensor::filled({1, 2, 2}, 1.0)), Var::constant(Tensor::filled({1, 1, 3, 3}, 1.0)), b),
                    ConfigError);
}

TEST_CASE("maxpool2d") {
    CHECK(maxpool2d(Var::constant(Tensor({1, 2, 2}, {1, 2, 3, 4}))).item() == 4.0);

    const auto c = maxpool2d(Var::constant(Tensor::filled({2, 4, 6}, 0.25)));
    CHECK(c.shape() == Shape{2, 2, 3});
    CHECK(c.data().minCoeff() == 0.25);
    CHECK(c.data().maxCoeff() == 0.25);

    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor x = oracle::random_tensor({2, 4, 4}, rng);
        check_max_abs(maxpool2d(Var::constant(x)).data(), oracle::maxpool(x).data, 0.0);
    }

    CHECK_THROWS_AS(maxpool2d(Var::constant(Tensor::filled({1, 3, 4}, 0.0))), InputError);
    const auto padded = maxpool2d(Var::constant(Tensor({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9})), OddPooling::pad);
    CHECK(padded.shape() == Shape{1, 2, 2});
    check_max_abs(padded.data(), Eigen::Vector4d(5, 6, 8, 9), 0.0);
}

TEST_CASE("maxpool2d routes tied gradients to the first cell") {
    auto x = Var::parameter(Tensor::filled({1, 2, 2}, 3.0), "x");
    backward(sum(maxpool2d(x)));
    check_max_abs(x.grad(), Eigen::Vector4d(1, 0, 0, 0), 0.0);
}

TEST_CASE("softmax") {
    const Eigen::VectorXd third = softmax(Eigen::Vector3d(0, 0, 0));
    check_max_abs(third, Eigen::Vector3d::Constant(1.0 / 3.0), 1e-15);

    const Eigen::VectorXd p = softmax(Eigen::Vector3d(2, 1, 0));
    check_max_abs(p, Eigen::Vector3d(0.66524, 0.24473, 0.09003), 1e-5);
    // Closed form e^{z_i} / sum_j e^{z_j}.
    const double z = std::exp(2.0) + std::exp(1.0) + 1.0;
    check_max_abs(p, Eigen::Vector3d(std::exp(2.0) / z, std::exp(1.0) / z, 1.0 / z), 1e-15);

    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-20, 20);
    for (int t = 0; t < 200; ++t) {
        Eigen::VectorXd logits(5);
        for (Index i = 0; i < 5; ++i) logits[i] = u(rng);
        const Eigen::VectorXd a = softmax(logits);
        const Eigen::VectorXd b = softmax((logits.array() + u(rng)).matrix());
        CHECK(std::abs(a.sum() - 1.0) <= 1e-12);
        CHECK(a.minCoeff() > 0.0);
        CHECK(a.maxCoeff() < 1.0);
        check_max_abs(a, b, 1e-12);
        Index ia = 0, ib = 0;
        a.maxCoeff(&ia);
        b.maxCoeff(&ib);
        CHECK(ia == ib);
    }

    // Graph version agrees with the plain one.
    check_max_abs(softmax(Var::constant(Tensor({3}, {2, 1, 0}))).data(), p, 1e-15);
    CHECK_THROWS_AS(softmax(Eigen::Vector3d(0, std::nan(""), 1)), InputError);
}

TEST_CASE("cross entropy") {
    const auto probs = Var::constant(Tensor({3}, {0.7, 0.2, 0.1}));
    CHECK(cross_entropy(probs, 1).item() == doctest::Approx(-std::log(0.2)).epsilon(1e-14));
    CHECK_THROWS_AS(cross_entropy(probs, 3), InputError);
    CHECK_THROWS_AS(cross_entropy(probs, -1), InputError);
    const auto logits = Var::constant(Tensor({3}, {2, -1, 0.5}));
    CHECK(cross_entropy_logits(logits, 2).item() ==
          doctest::Approx(cross_entropy(softmax(logits), 2).item()).epsilon(1e-13));
    CHECK_THROWS_AS(cross_entropy_logits(logits, 5), InputError);
}

TEST_CASE("dense and relu") {
    const auto y = dense(Var::constant(Tensor({2}, {1, 2})), Var::constant(Tensor({3, 2}, {1, 0, 0, 1, 1, 1})),
                         Var::constant(Tensor({3}, {0.5, -5, 0})));
    check_max_abs(y.data(), Eigen::Vector3d(1.5, -3, 3), 0.0);
    check_max_abs(relu(y).data(), Eigen::Vector3d(1.5, 0, 3), 0.0);
    CHECK_THROWS_AS(dense(Var::constant(Tensor({3}, {1, 2, 3})), Var::constant(Tensor({3, 2}, {1, 0, 0, 1, 1, 1})),
                          Var::constant(Tensor({3}, {0, 0, 0}))),
                    ConfigError);
}

TEST_CASE("backward basics") {
    auto p = Var::parameter(Tensor({4}, {1.0, -2.0, 0.5, 3.0}), "p");
    backward(sum(p));
    check_max_abs(p.grad(), Eigen::Vector4d::Ones(), 0.0);

    p.zero_grad();
    backward(sum(square(p)));
    check_max_abs(p.grad(), 2.0 * p.data(), 0.0);

    CHECK_THROWS_AS(backward(Var{}), StateError);
    CHECK_THROWS_AS(backward(p), InputError);
    CHECK_THROWS_AS(backward(Var::constant(Tensor({1}, {1.0}))), StateError);
}

TEST_CASE("backward is deterministic for a fixed graph") {
    std::mt19937_64 rng(5);
    auto x = Var::constant(oracle::random_tensor({2, 6, 6}, rng));
    auto k = Var::parameter(oracle::random_tensor({3, 2, 3, 3}, rng), "k");
    auto b = Var::parameter(oracle::random_tensor({3}, rng), "b");
    const Var loss = sum(square(maxpool2d(relu(conv2d(x, k, b, Padding::same)))));
    backward(loss);
    const Eigen::VectorXd first = k.grad();
    k.zero_grad();
    b.zero_grad();
    backward(loss);
    CHECK((k.grad() - first).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("layer gradients match finite differences") {
    std::mt19937_64 rng(21);
    SUBCASE("conv2d valid and same") {
        for (Padding pad : {Padding::valid, Padding::same}) {
            auto x = Var::parameter(oracle::random_tensor({2, 5, 5}, rng), "x");
            auto k = Var::parameter(oracle::random_tensor({3, 2, 3, 3}, rng), "k");
            auto b = Var::parameter(oracle::random_tensor({3}, rng), "b");
            gradient_check({x, k, b}, [&] { return sum(square(conv2d(x, k, b, pad))); });
        }
    }
    SUBCASE("maxpool2d") {
        auto x = Var::parameter(oracle::random_tensor({2, 4, 4}, rng), "x");
        gradient_check({x}, [&] { return sum(square(maxpool2d(x))); });
        auto odd = Var::parameter(oracle::random_tensor({1, 5, 3}, rng), "odd");
        gradient_check({odd}, [&] { return sum(square(maxpool2d(odd, OddPooling::pad))); });
    }
    SUBCASE("dense, relu, flatten") {
        auto x = Var::parameter(oracle::random_tensor({2, 2, 2}, rng), "x");
        auto w = Var::parameter(oracle::random_tensor({3, 8}, rng), "w");
        auto b = Var::parameter(oracle::random_tensor({3}, rng), "b");
        gradient_check({x, w, b}, [&] { return sum(square(relu(dense(flatten(x), w, b)))); });
    }
    SUBCASE("softmax and cross entropy") {
        auto z = Var::parameter(oracle::random_tensor({4}, rng, -3, 3), "z");
        gradient_check({z}, [&] { return cross_entropy(softmax(z), 2); });
        gradient_check({z}, [&] { return add(cross_entropy_logits(z, 0), scale(sum(square(softmax(z))), 0.3)); });
    }
}

// ---- optimizers ---------------------------------------------------------------

TEST_CASE("zero gradient leaves parameters unchanged") {
    for (OptimizerKind kind : {OptimizerKind::adam, OptimizerKind::rmsprop}) {
        std::vector<Var> params{Var::parameter(Tensor({3}, {1, -2, 3}), "p")};
        params[0].zero_grad();
        OptimizerState state(kind, 1e-3);
        for (int i = 0; i < 3; ++i) optimizer_step(state, params);
        check_max_abs(params[0].data(), Eigen::Vector3d(1, -2, 3), 0.0);
        CHECK(state.step == 3);
    }
}

TEST_CASE("adam first step moves by the learning rate") {
    std::vector<Var> params{Var::parameter(Tensor({1}, {0.0}), "w")};
    backward(sum(params[0]));  // g = 1
    OptimizerState state(OptimizerKind::adam, 0.1);
    optimizer_step(state, params);
    CHECK(params[0].item() == doctest::Approx(-0.1).epsilon(1e-6));
}

TEST_CASE("rmsprop matches a reference update") {
    std::mt19937_64 rng(4);
    const Tensor start = oracle::random_tensor({6}, rng);
    std::vector<Var> params{Var::parameter(start, "w")};
    const double lr = 3e-4;
    OptimizerState state(OptimizerKind::rmsprop, lr);
    Eigen::VectorXd w = start.data, v = Eigen::VectorXd::Zero(6);
    for (int step = 0; step < 4; ++step) {
        params[0].zero_grad();
        backward(sum(square(params[0])));
        const Eigen::VectorXd g = params[0].grad();
        optimizer_step(state, params);
        // reference
        for (Index i = 0; i < 6; ++i) {
            v[i] = 0.9 * v[i] + 0.1 * g[i] * g[i];
            w[i] -= lr * g[i] / (std::sqrt(v[i]) + 1e-8);
        }
        check_max_abs(params[0].data(), w, 1e-12);
    }
}

TEST_CASE("adam matches a reference over several steps") {
    std::vector<Var> params{Var::parameter(Tensor({2}, {0.5, -1.5}), "w")};
    OptimizerState state(OptimizerKind::adam, 1e-2);
    Eigen::Vector2d w(0.5, -1.5), m = Eigen::Vector2d::Zero(), v = Eigen::Vector2d::Zero();
    for (int t = 1; t <= 5; ++t) {
        params[0].zero_grad();
        backward(sum(square(params[0])));
        const Eigen::Vector2d g = params[0].grad();
        optimizer_step(state, params);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g.cwiseProduct(g);
        const Eigen::Vector2d mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
        w.array() -= 1e-2 * mh.array() / (vh.array().sqrt() + 1e-8);
        check_max_abs(params[0].data(), w, 1e-12);
    }
}

TEST_CASE("non-finite gradient aborts naming the parameter") {
    std::vector<Var> params{Var::parameter(Tensor({2}, {1, 2}), "fine"), Var::parameter(Tensor({2}, {1, 2}), "fc9.weight")};
    params[0].zero_grad();
    params[1].zero_grad();
    backward(sum(params[0]));
    backward(scale(sum(params[1]), std::nan("")));
    OptimizerState state(OptimizerKind::adam, 1e-3);
    try {
        optimizer_step(state, params);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("fc9.weight") != std::string::npos);
    }
    check_max_abs(params[0].data(), Eigen::Vector2d(1, 2), 0.0);
    CHECK(state.step == 0);
    CHECK_THROWS_AS(OptimizerState(OptimizerKind::adam, 0.0), ConfigError);
    CHECK(parse_optimizer("rmsprop") == OptimizerKind::rmsprop);
    CHECK_THROWS(parse_optimizer("sgd"));
}
