#include "doctest.h"

#include "hmim/tensor.hpp"
#include "oracles.hpp"

#include <cmath>

using namespace hmim;

namespace {

template <typename S>
double max_rel_diff(const Tensor<S>& a, const Tensor<S>& b) {
    REQUIRE(a.shape() == b.shape());
    double worst = 0;
    for (int64_t i = 0; i < a.size(); ++i) {
        const double x = a.values()[i], y = b.values()[i];
        worst = std::max(worst, std::abs(x - y) / std::max(1.0, std::max(std::abs(x), std::abs(y))));
    }
    return worst;
}

}  // namespace

TEST_CASE("conv3d identity kernel") {
    auto x = Tensor<float>::from({1, 1, 1, 1}, {3.0f});
    auto w = Tensor<float>::from({1, 1, 1, 1, 1}, {1.0f});
    auto y = conv3d<float>(nullptr, x, w, Tensor<float>{}, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.values()[0] == doctest::Approx(3.0f));
}

TEST_CASE("conv3d all-ones sum") {
    auto x = Tensor<float>::full({1, 3, 3, 3}, 1.0f);
    auto w = Tensor<float>::full({1, 1, 3, 3, 3}, 1.0f);
    auto y = conv3d<float>(nullptr, x, w, Tensor<float>{}, 1, 0);
    CHECK(y.size() == 1);
    CHECK(y.values()[0] == doctest::Approx(27.0f));
}

TEST_CASE("conv3d matches the naive oracle on random shapes") {
    Rng rng(101);
    auto x = Tensor<double>::randn({2, 8, 8, 8}, rng);
    auto w = Tensor<double>::randn({4, 2, 3, 3, 3}, rng);
    auto b = Tensor<double>::randn({4}, rng);
    for (int stride : {1, 2})
        for (int pad : {0, 1}) {
            for (ConvPath path : {ConvPath::direct, ConvPath::im2col}) {
                conv_path() = path;
                auto got = conv3d<double>(nullptr, x, w, b, stride, pad);
                auto want = oracle::naive_conv3d(x, w, b, stride, pad);
                CHECK(max_rel_diff(got, want) < 1e-5);
            }
        }
    conv_path() = ConvPath::direct;
}

TEST_CASE("conv3d oracle sweep over kernels and pads") {
    Rng rng(77);
    for (int k : {1, 2, 3, 4})
        for (int stride : {1, 2, 3})
            for (int pad : {0, 1, 2}) {
                const int extent = 6;
                if (k > extent + 2 * pad) continue;
                auto x = Tensor<double>::randn({3, extent, extent, extent}, rng);
                auto w = Tensor<double>::randn({2, 3, k, k, k}, rng);
                auto b = Tensor<double>::randn({2}, rng);
                auto got = conv3d<double>(nullptr, x, w, b, stride, pad);
                auto want = oracle::naive_conv3d(x, w, b, stride, pad);
                CHECK(got.shape() == want.shape());
                CHECK(max_rel_diff(got, want) < 1e-5);
            }
}

TEST_CASE("conv3d channel mismatch raises a dimension error") {
    auto x = Tensor<float>::zeros({2, 4, 4, 4});
    auto w = Tensor<float>::zeros({1, 3, 3, 3, 3});
    CHECK_THROWS_AS(conv3d<float>(nullptr, x, w, Tensor<float>{}, 1, 1), dimension_error);
}

TEST_CASE("conv3d_transpose matches its oracle and doubles the extent") {
    Rng rng(55);
    auto x = Tensor<double>::randn({3, 4, 4, 4}, rng);
    auto w = Tensor<double>::randn({3, 2, 2, 2, 2}, rng);
    auto b = Tensor<double>::randn({2}, rng);
    auto got = conv3d_transpose<double>(nullptr, x, w, b, 2);
    auto want = oracle::naive_conv3d_transpose(x, w, b, 2);
    CHECK(got.shape() == Shape{2, 8, 8, 8});
    CHECK(max_rel_diff(got, want) < 1e-10);
}

TEST_CASE("backward identity and elementwise square") {
    Tape<double> tape;
    auto x = Tensor<double>::from({3}, {1, 2, 3});
    x.set_requires_grad(true);
    auto y = sum_all(&tape, mul(&tape, x, x));
    tape.backward(y);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
    CHECK(x.grad()[2] == doctest::Approx(6.0));

    Tape<double> tape2;
    auto z = Tensor<double>::from({1}, {5.0});
    z.set_requires_grad(true);
    auto out = scale(&tape2, z, 1.0);
    tape2.backward(out);
    CHECK(z.grad()[0] == doctest::Approx(1.0));
}

TEST_CASE("backward twice without reset is an error; reset re-arms the tape") {
    Tape<double> tape;
    auto x = Tensor<double>::from({2}, {1, 2});
    x.set_requires_grad(true);
    auto y = sum_all(&tape, x);
    tape.backward(y);
    CHECK_THROWS_AS(tape.backward(y), contract_error);
    tape.reset();
    auto y2 = sum_all(&tape, x);
    CHECK_NOTHROW(tape.backward(y2));
}

TEST_CASE("backward requires a scalar") {
    Tape<double> tape;
    auto x = Tensor<double>::from({2}, {1, 2});
    x.set_requires_grad(true);
    auto y = mul(&tape, x, x);
    CHECK_THROWS_AS(tape.backward(y), contract_error);
}

TEST_CASE("untouched leaves read zero gradient") {
    Tape<double> tape;
    auto x = Tensor<double>::from({2}, {1, 2});
    auto unused = Tensor<double>::from({2}, {3, 4});
    x.set_requires_grad(true);
    unused.set_requires_grad(true);
    tape.backward(sum_all(&tape, x));
    CHECK(unused.grad()[0] == 0.0);
    CHECK(unused.grad()[1] == 0.0);
}

TEST_CASE("grad_check on sum is exact") {
    auto x = Tensor<double>::from({4}, {0.3, -0.7, 1.1, 0.0});
    const double err = grad_check([](Tape<double>* t, Tensor<double>& v) { return sum_all(t, v); }, x);
    CHECK(err < 1e-10);
}

TEST_CASE("grad_check softmax cross-entropy on random logits") {
    Rng rng(3);
    auto logits = Tensor<double>::randn({4, 9}, rng);
    auto onehot = Tensor<double>::zeros({4, 9});
    for (int r = 0; r < 4; ++r) onehot.values()[r * 9 + (r * 2) % 9] = 1.0;
    const double err = grad_check(
        [&](Tape<double>* t, Tensor<double>& v) {
            auto p = softmax(t, v, 1);
            return scale(t, sum_all(t, mul(t, log_clamped(t, p), onehot)), -0.25);
        },
        logits);
    CHECK(err < 1e-5);
}

TEST_CASE("grad_check sigmoid binary cross-entropy at probability one half") {
    auto logits = Tensor<double>::zeros({6});  // sigmoid(0) = 0.5
    auto targets = Tensor<double>::from({6}, {1, 0, 1, 1, 0, 0});
    auto ones = Tensor<double>::full({6}, 1.0);
    const double err = grad_check(
        [&](Tape<double>* t, Tensor<double>& v) {
            auto p = sigmoid(t, v);
            auto pos = mul(t, targets, log_clamped(t, p));
            auto neg = mul(t, sub(t, ones, targets), log_clamped(t, sub(t, ones, p)));
            return scale(t, sum_all(t, add(t, pos, neg)), -1.0 / 6.0);
        },
        logits);
    CHECK(err < 1e-5);
}

TEST_CASE("grad_check raises on non-finite probes") {
    auto x = Tensor<double>::from({1}, {700.0});
    CHECK_THROWS_AS(grad_check([](Tape<double>* t, Tensor<double>& v) {
                        return exp_op(t, exp_op(t, v));
                    },
                                x),
                    numeric_error);
}

TEST_CASE("every primitive passes a finite-difference check") {
    Rng rng(9);
    auto check = [](const std::string& name, auto f, Tensor<double>& x, double tol = 1e-3) {
        const double err = grad_check(f, x, 1e-4);
        INFO(name, " rel err ", err);
        CHECK(err < tol);
    };

    {
        auto x = Tensor<double>::randn({2, 5, 5, 5}, rng);
        auto w = Tensor<double>::randn({3, 2, 3, 3, 3}, rng);
        w.set_requires_grad(false);
        auto b = Tensor<double>::randn({3}, rng);
        b.set_requires_grad(false);
        check("conv3d wrt input", [&](Tape<double>* t, Tensor<double>& v) {
            return sum_all(t, mul(t, conv3d(t, v, w, b, 1, 1), conv3d(t, v, w, b, 1, 1)));
        }, x);
        auto wv = Tensor<double>::randn({3, 2, 3, 3, 3}, rng);
        check("conv3d wrt weight", [&](Tape<double>* t, Tensor<double>& v) {
            auto y = conv3d(t, x, v, b, 2, 1);
            return sum_all(t, mul(t, y, y));
        }, wv);
        auto bv = Tensor<double>::randn({3}, rng);
        check("conv3d wrt bias", [&](Tape<double>* t, Tensor<double>& v) {
            auto y = conv3d(t, x, w, v, 1, 0);
            return sum_all(t, mul(t, y, y));
        }, bv);
    }
    {
        auto x = Tensor<double>::randn({3, 3, 3, 3}, rng);
        auto w = Tensor<double>::randn({3, 2, 2, 2, 2}, rng);
        check("conv3d_transpose wrt input", [&](Tape<double>* t, Tensor<double>& v) {
            auto y = conv3d_transpose(t, v, w, Tensor<double>{}, 2);
            return sum_all(t, mul(t, y, y));
        }, x);
        auto wv = Tensor<double>::randn({3, 2, 2, 2, 2}, rng);
        check("conv3d_transpose wrt weight", [&](Tape<double>* t, Tensor<double>& v) {
            auto y = conv3d_transpose(t, x, v, Tensor<double>{}, 2);
            return sum_all(t, mul(t, y, y));
        }, wv);
    }
    {
        auto x = Tensor<double>::randn({4, 5}, rng);
        auto w = Tensor<double>::randn({5, 3}, rng);
        auto b = Tensor<double>::randn({3}, rng);
        check("linear wrt input", [&](Tape<double>* t, Tensor<double>& v) {
            auto y = linear(t, v, w, b);
            return sum_all(t, mul(t, y, y));
        }, x);
        auto wv = Tensor<double>::randn({5, 3}, rng);
        check("linear wrt weight", [&](Tape<double>* t, Tensor<double>& v) {
            auto y = linear(t, x, v, b);
            return sum_all(t, mul(t, y, y));
        }, wv);
    }
    {
        // keep relu inputs away from the kink
        auto x = Tensor<double>::from({6}, {-1.3, -0.5, 0.4, 0.9, 1.7, -2.2});
        check("relu", [](Tape<double>* t, Tensor<double>& v) {
            return sum_all(t, mul(t, relu(t, v), relu(t, v)));
        }, x);
    }
    {
        auto x = Tensor<double>::randn({7}, rng);
        check("sigmoid", [](Tape<double>* t, Tensor<double>& v) { return sum_all(t, sigmoid(t, v)); }, x);
        check("exp", [](Tape<double>* t, Tensor<double>& v) { return sum_all(t, exp_op(t, v)); }, x);
        check("l2_normalize", [](Tape<double>* t, Tensor<double>& v) {
            auto y = l2_normalize(t, v);
            auto c = Tensor<double>::from({7}, {0.3, -1, 2, 0.5, 1, -0.2, 0.8});
            return sum_all(t, mul(t, y, c));
        }, x);
    }
    {
        auto x = Tensor<double>::from({5}, {0.2, 1.5, 0.8, 2.4, 0.05});
        check("log_clamped", [](Tape<double>* t, Tensor<double>& v) { return sum_all(t, log_clamped(t, v)); }, x);
        check("sqrt0", [](Tape<double>* t, Tensor<double>& v) { return sum_all(t, sqrt0(t, v)); }, x);
        check("reciprocal", [](Tape<double>* t, Tensor<double>& v) { return sum_all(t, reciprocal(t, v)); }, x);
    }
    {
        auto x = Tensor<double>::randn({3, 4, 4, 4}, rng);
        check("global_avg_pool", [](Tape<double>* t, Tensor<double>& v) {
            auto y = global_avg_pool(t, v);
            return sum_all(t, mul(t, y, y));
        }, x);
        check("avg_pool_to_grid", [](Tape<double>* t, Tensor<double>& v) {
            auto y = avg_pool_to_grid(t, v, 2, 2, 2);
            return sum_all(t, mul(t, y, y));
        }, x);
        check("cells_to_rows", [](Tape<double>* t, Tensor<double>& v) {
            auto y = cells_to_rows(t, v);
            return sum_all(t, mul(t, y, y));
        }, x);
        check("crop", [](Tape<double>* t, Tensor<double>& v) {
            auto y = crop(t, v, {1, 0, 2, 1}, {2, 3, 2, 3});
            return sum_all(t, mul(t, y, y));
        }, x);
        check("embed", [](Tape<double>* t, Tensor<double>& v) {
            auto y = embed(t, v, {3, 6, 6, 6}, {0, 1, 1, 2});
            return sum_all(t, mul(t, y, y));
        }, x);
        check("dropout active", [](Tape<double>* t, Tensor<double>& v) {
            auto y = dropout(t, v, 0.4, true, 1234);
            return sum_all(t, mul(t, y, y));
        }, x);
        check("softmax axis0", [](Tape<double>* t, Tensor<double>& v) {
            auto y = softmax(t, v, 0);
            return sum_all(t, mul(t, y, y));
        }, x);
    }
    {
        auto a = Tensor<double>::randn({2, 3, 3, 3}, rng);
        check("concat_channels", [&](Tape<double>* t, Tensor<double>& v) {
            auto other = Tensor<double>::full({1, 3, 3, 3}, 0.5);
            auto y = concat_channels(t, v, other);
            return sum_all(t, mul(t, y, y));
        }, a);
    }
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(21);
    auto x = Tensor<float>::randn({5, 9}, rng, 3.0f);
    auto y = softmax<float>(nullptr, x, 1);
    for (int r = 0; r < 5; ++r) {
        double s = 0;
        for (int k = 0; k < 9; ++k) s += y.values()[r * 9 + k];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("sigmoid output stays inside the open unit interval") {
    auto x = Tensor<float>::from({5}, {-100.0f, -5.0f, 0.0f, 5.0f, 100.0f});
    auto y = sigmoid<float>(nullptr, x);
    for (float v : y.values()) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
    }
}

TEST_CASE("dropout identity cases") {
    Rng rng(31);
    auto x = Tensor<float>::randn({64}, rng);
    auto y1 = dropout<float>(nullptr, x, 0.0, true, 5);
    CHECK(y1.values() == x.values());
    auto y2 = dropout<float>(nullptr, x, 0.7, false, 5);
    CHECK(y2.values() == x.values());
}

TEST_CASE("dropout scales kept entries by the inverse keep probability") {
    auto x = Tensor<float>::full({4096}, 1.0f);
    auto y = dropout<float>(nullptr, x, 0.25, true, 123);
    int64_t kept = 0;
    for (float v : y.values()) {
        if (v != 0.0f) {
            CHECK(v == doctest::Approx(1.0f / 0.75f));
            ++kept;
        }
    }
    CHECK(kept > 4096 * 0.70);
    CHECK(kept < 4096 * 0.80);
    // same seed, same mask
    auto y2 = dropout<float>(nullptr, x, 0.25, true, 123);
    CHECK(y.values() == y2.values());
}

TEST_CASE("checked mode rejects non-finite forward results") {
    set_checked_mode(true);
    auto x = Tensor<float>::from({1}, {1000.0f});
    CHECK_THROWS_AS(exp_op<float>(nullptr, x), numeric_error);
    set_checked_mode(false);
    CHECK_NOTHROW(exp_op<float>(nullptr, x));
}

TEST_CASE("parallel convolution is bitwise identical to sequential") {
    Rng rng(88);
    auto x = Tensor<float>::randn({4, 12, 12, 12}, rng);
    auto w = Tensor<float>::randn({8, 4, 3, 3, 3}, rng);
    auto b = Tensor<float>::randn({8}, rng);
    auto seq = conv3d<float>(nullptr, x, w, b, 1, 1);
    device_threads() = 4;
    auto par = conv3d<float>(nullptr, x, w, b, 1, 1);
    device_threads() = 1;
    CHECK(seq.values() == par.values());
}
