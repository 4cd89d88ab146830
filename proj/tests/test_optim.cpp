#include "doctest.h"

#include "hmim/checkpoint.hpp"
#include "hmim/optim.hpp"
#include "oracles.hpp"

#include <cmath>

using namespace hmim;

TEST_CASE("lr schedule hits the documented points") {
    OptimConfig cfg;
    cfg.lr_init = 1e-4;
    cfg.warmup_steps = 50;
    cfg.total_steps = 1000;
    CHECK(lr_at(50, cfg) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(lr_at(1000, cfg) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(lr_at(50 + 475, cfg) == doctest::Approx(0.5e-4).epsilon(1e-9));
    CHECK(lr_at(0, cfg) == doctest::Approx(0.0));
    CHECK_THROWS_AS(lr_at(-1, cfg), contract_error);
    CHECK_THROWS_AS(lr_at(1001, cfg), contract_error);
}

TEST_CASE("lr schedule is continuous at the warmup boundary and nonincreasing after it") {
    OptimConfig cfg;
    cfg.lr_init = 3e-3;
    cfg.warmup_steps = 37;
    cfg.total_steps = 450;
    const double just_before = lr_at(36, cfg);
    const double at = lr_at(37, cfg);
    const double just_after = lr_at(38, cfg);
    CHECK(std::abs(at - just_before) < cfg.lr_init / 30.0);
    CHECK(std::abs(at - just_after) < cfg.lr_init / 30.0);
    double prev = at;
    for (int64_t s = 38; s <= 450; ++s) {
        const double cur = lr_at(s, cfg);
        CHECK(cur <= prev + 1e-15);
        prev = cur;
    }
}

TEST_CASE("zero gradient shrinks parameters by exactly lr * weight_decay * param") {
    OptimConfig cfg;
    cfg.weight_decay = 1e-2;
    cfg.total_steps = 10;
    AdamW<double> opt(cfg);
    std::vector<NamedParam<double>> params;
    params.push_back({"p", Tensor<double>::from({3}, {1.0, -2.0, 0.5})});
    params[0].tensor.set_requires_grad(true);
    params[0].tensor.grad();  // zeros
    const double lr = 1e-3;
    opt.step(params, lr);
    CHECK(params[0].tensor.values()[0] == doctest::Approx(1.0 - lr * 1e-2 * 1.0).epsilon(1e-12));
    CHECK(params[0].tensor.values()[1] == doctest::Approx(-2.0 - lr * 1e-2 * -2.0).epsilon(1e-12));
    CHECK(params[0].tensor.values()[2] == doctest::Approx(0.5 - lr * 1e-2 * 0.5).epsilon(1e-12));
}

TEST_CASE("first step follows the bias-corrected closed form") {
    OptimConfig cfg;
    cfg.weight_decay = 0.0;
    cfg.total_steps = 10;
    AdamW<double> opt(cfg);
    std::vector<NamedParam<double>> params;
    params.push_back({"p", Tensor<double>::from({2}, {0.7, -1.1})});
    params[0].tensor.set_requires_grad(true);
    params[0].tensor.grad() = {0.3, -0.05};
    const double lr = 1e-2;
    opt.step(params, lr);
    // after bias correction the first update is g / (|g| + eps)
    for (int i = 0; i < 2; ++i) {
        const double g = i == 0 ? 0.3 : -0.05;
        const double expect = (i == 0 ? 0.7 : -1.1) - lr * g / (std::abs(g) + cfg.eps);
        CHECK(params[0].tensor.values()[i] == doctest::Approx(expect).epsilon(1e-9));
    }
}

TEST_CASE("identical gradients and state update identically") {
    OptimConfig cfg;
    cfg.total_steps = 10;
    AdamW<double> opt(cfg);
    std::vector<NamedParam<double>> params;
    params.push_back({"a", Tensor<double>::from({1}, {0.4})});
    params.push_back({"b", Tensor<double>::from({1}, {0.4})});
    for (auto& p : params) {
        p.tensor.set_requires_grad(true);
        p.tensor.grad() = {-0.8};
    }
    opt.step(params, 1e-3);
    CHECK(params[0].tensor.values()[0] == params[1].tensor.values()[0]);
}

TEST_CASE("with zero decay AdamW matches the plain Adam reference over 100 random steps") {
    OptimConfig cfg;
    cfg.weight_decay = 0.0;
    cfg.total_steps = 200;
    AdamW<double> opt(cfg);
    std::vector<NamedParam<double>> params;
    params.push_back({"p", Tensor<double>::zeros({16})});
    Rng rng(5150);
    for (auto& v : params[0].tensor.values()) v = rng.normal();
    params[0].tensor.set_requires_grad(true);

    std::vector<double> ref_p(params[0].tensor.values().begin(), params[0].tensor.values().end());
    oracle::RefAdam ref;
    for (int s = 0; s < 100; ++s) {
        std::vector<double> g(16);
        for (auto& x : g) x = rng.normal();
        params[0].tensor.grad().assign(g.begin(), g.end());
        const double lr = 1e-3 * (1.0 + 0.5 * std::sin(s * 0.1));
        opt.step(params, lr);
        ref.step(ref_p, g, lr, cfg.beta1, cfg.beta2, cfg.eps);
        params[0].tensor.zero_grad();
    }
    for (int i = 0; i < 16; ++i)
        CHECK(std::abs(params[0].tensor.values()[i] - ref_p[i]) < 1e-7);
}

TEST_CASE("bias decay exemption flag") {
    OptimConfig cfg;
    cfg.weight_decay = 1e-2;
    cfg.decay_biases = false;
    cfg.total_steps = 10;
    AdamW<double> opt(cfg);
    std::vector<NamedParam<double>> params;
    params.push_back({"w", Tensor<double>::from({2, 1}, {1.0, 1.0})});
    params.push_back({"b", Tensor<double>::from({2}, {1.0, 1.0})});
    for (auto& p : params) {
        p.tensor.set_requires_grad(true);
        p.tensor.grad();
    }
    opt.step(params, 1e-3);
    CHECK(params[0].tensor.values()[0] < 1.0);   // 2-d tensor decays
    CHECK(params[1].tensor.values()[0] == 1.0);  // 1-d tensor exempt
}

TEST_CASE("non-finite gradient names the parameter") {
    OptimConfig cfg;
    cfg.total_steps = 10;
    AdamW<double> opt(cfg);
    std::vector<NamedParam<double>> params;
    params.push_back({"enc0.conv.w", Tensor<double>::from({1}, {0.1})});
    params[0].tensor.set_requires_grad(true);
    params[0].tensor.grad() = {std::numeric_limits<double>::quiet_NaN()};
    CHECK_THROWS_WITH_AS(opt.step(params, 1e-3), doctest::Contains("enc0.conv.w"), numeric_error);
}

TEST_CASE("optimizer state round-trips through the checkpoint container bit-exactly") {
    OptimConfig cfg;
    cfg.total_steps = 50;
    AdamW<float> opt(cfg);
    std::vector<NamedParam<float>> params;
    params.push_back({"w", Tensor<float>::zeros({8})});
    Rng rng(2);
    for (auto& v : params[0].tensor.values()) v = static_cast<float>(rng.normal());
    params[0].tensor.set_requires_grad(true);
    for (int s = 0; s < 7; ++s) {
        for (auto& g : params[0].tensor.grad()) g = static_cast<float>(rng.normal());
        opt.step(params, 1e-3);
    }

    Checkpoint ck;
    save_optimizer(ck, opt, params);
    const std::string path = "/tmp/hmim_test_opt.hmck";
    write_checkpoint(path, ck);
    Checkpoint back = read_checkpoint(path);

    AdamW<float> opt2(cfg);
    load_optimizer(back, opt2, params);
    CHECK(opt2.steps_taken() == opt.steps_taken());
    CHECK(opt2.moments1() == opt.moments1());
    CHECK(opt2.moments2() == opt.moments2());
}

TEST_CASE("config validation") {
    OptimConfig cfg;
    cfg.warmup_steps = 10;
    cfg.total_steps = 10;
    CHECK_THROWS_AS(cfg.validate(), config_error);
    cfg.total_steps = 11;
    CHECK_NOTHROW(cfg.validate());
    cfg.lr_init = 0;
    CHECK_THROWS_AS(cfg.validate(), config_error);
}
