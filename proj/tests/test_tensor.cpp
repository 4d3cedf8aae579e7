#include <cmath>

#include "doctest.h"
#include "support.hpp"
#include "top/errors.hpp"
#include "top/tensor.hpp"

using namespace top;
using top::testing::finite_difference;
using top::testing::max_rel_error;
using top::testing::random_vector;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("matmul identity and hand cases") {
    Tensor eye({1, 0, 0, 1}, {2, 2});
    Tensor b({2, 3, 4, 5}, {2, 2});
    auto r = matmul(eye, b);
    CHECK(r.data() == b.data());

    Tensor a({1, 2}, {1, 2});
    Tensor c({3, 4}, {2, 1});
    CHECK(matmul(a, c).item() == doctest::Approx(11.0));

    CHECK_THROWS_AS(matmul(c, b), DimensionError);
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(11);
    auto adata = random_vector(20, rng);
    auto bdata = random_vector(12, rng);
    Tensor a(adata, {5, 4}, true);
    Tensor b(bdata, {4, 3}, true);
    auto loss = reduce_sum(matmul(a, b));
    backward(loss);

    // d(sum(ab))/da = ones . b^T
    for (int i = 0; i < 5; ++i)
        for (int p = 0; p < 4; ++p) {
            double expect = 0.0;
            for (int j = 0; j < 3; ++j) expect += bdata[p * 3 + j];
            CHECK(a.grad()[i * 4 + p] == doctest::Approx(expect).epsilon(1e-12));
        }

    auto fd = finite_difference(
        [&](const std::vector<double>& v) {
            return reduce_sum(matmul(Tensor(v, {5, 4}), Tensor(bdata, {4, 3}))).item();
        },
        adata);
    CHECK(max_rel_error(a.grad(), fd) < 1e-6);
}

TEST_CASE("conv2d identity kernel") {
    Rng rng(3);
    Tensor x(random_vector(2 * 5 * 5, rng, 0.0, 1.0), {2, 5, 5});
    // Centered delta kernel per channel.
    std::vector<double> w(2 * 2 * 9, 0.0);
    w[0 * 2 * 9 + 0 * 9 + 4] = 1.0;
    w[1 * 2 * 9 + 1 * 9 + 4] = 1.0;
    auto y = conv2d(x, Tensor(w, {2, 2, 3, 3}), 1);
    CHECK(y.shape() == x.shape());
    for (int i = 0; i < y.size(); ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));
}

TEST_CASE("conv2d all-ones kernel hand values") {
    Tensor x(std::vector<double>(9, 1.0), {1, 3, 3});
    Tensor w(std::vector<double>(9, 1.0), {1, 1, 3, 3});
    auto y = conv2d(x, w, 1);
    CHECK(y.data()[4] == doctest::Approx(9.0));
    CHECK(y.data()[0] == doctest::Approx(4.0));
    CHECK(y.data()[2] == doctest::Approx(4.0));
    CHECK(y.data()[6] == doctest::Approx(4.0));
    CHECK(y.data()[8] == doctest::Approx(4.0));
}

TEST_CASE("conv2d channel mismatch") {
    Tensor x(std::vector<double>(2 * 4 * 4, 0.5), {2, 4, 4});
    Tensor w(std::vector<double>(3 * 9, 0.1), {1, 3, 3, 3});
    CHECK_THROWS_AS(conv2d(x, w, 1), DimensionError);
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(17);
    auto xdata = random_vector(25, rng);
    auto wdata = random_vector(9, rng);

    auto wloss = [&](const std::vector<double>& v) {
        return reduce_sum(conv2d(Tensor(xdata, {1, 5, 5}), Tensor(v, {1, 1, 3, 3}), 1)).item();
    };
    Tensor x(xdata, {1, 5, 5}, true);
    Tensor w(wdata, {1, 1, 3, 3}, true);
    backward(reduce_sum(conv2d(x, w, 1)));
    CHECK(max_rel_error(w.grad(), finite_difference(wloss, wdata)) < 1e-6);

    auto xloss = [&](const std::vector<double>& v) {
        return reduce_sum(conv2d(Tensor(v, {1, 5, 5}), Tensor(wdata, {1, 1, 3, 3}), 1)).item();
    };
    CHECK(max_rel_error(x.grad(), finite_difference(xloss, xdata)) < 1e-6);
}

TEST_CASE("softmax cross entropy values and stability") {
    Tensor uniform(std::vector<double>(10, 0.7), {10});
    CHECK(softmax_cross_entropy(uniform, 3).item() == doctest::Approx(std::log(10.0)));

    Tensor big({1000.0, 0.0}, {2});
    const double loss = softmax_cross_entropy(big, 0).item();
    CHECK(std::isfinite(loss));
    CHECK(loss < 1e-12);

    CHECK_THROWS_AS(softmax_cross_entropy(big, 2), ContractError);
}

TEST_CASE("softmax cross entropy gradient is softmax minus onehot") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        auto ldata = random_vector(6, rng, -3.0, 3.0);
        const int target = rng.uniform_int(0, 5);
        Tensor logits(ldata, {6}, true);
        backward(softmax_cross_entropy(logits, target));
        auto probs = softmax(Tensor(ldata, {6})).data();
        for (int i = 0; i < 6; ++i) {
            const double expect = probs[i] - (i == target ? 1.0 : 0.0);
            CHECK(std::abs(logits.grad()[i] - expect) < 1e-8);
        }
    }
}

TEST_CASE("softmax outputs a simplex point") {
    Rng rng(23);
    for (int trial = 0; trial < 100; ++trial) {
        auto p = softmax(Tensor(random_vector(8, rng, -30.0, 30.0), {8})).data();
        double sum = 0.0;
        for (double v : p) {
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("backward basics") {
    Rng rng(9);
    auto xdata = random_vector(7, rng);

    Tensor x(xdata, {7}, true);
    backward(reduce_sum(x));
    for (double g : x.grad()) CHECK(g == doctest::Approx(1.0));

    Tensor y(xdata, {7}, true);
    backward(reduce_sum(mul(y, y)));
    for (int i = 0; i < 7; ++i) CHECK(y.grad()[i] == doctest::Approx(2.0 * xdata[i]));

    // Repeated calls accumulate.
    Tensor z(xdata, {7}, true);
    auto loss = reduce_sum(z);
    backward(loss);
    backward(loss);
    for (double g : z.grad()) CHECK(g == doctest::Approx(2.0));

    Tensor nonscalar(xdata, {7}, true);
    CHECK_THROWS_AS(backward(add(nonscalar, nonscalar)), ContractError);
}

TEST_CASE("elementwise and shaping primitives differentiate correctly") {
    Rng rng(31);
    auto adata = random_vector(12, rng);
    auto bdata = random_vector(12, rng, 0.2, 1.0);

    auto composite = [&](const std::vector<double>& v) {
        Tensor a(v, {3, 4});
        Tensor b(bdata, {3, 4});
        auto h = mul(add(a, b), sub(a, b));
        h = add_scalar(mul_scalar(h, 0.5), 0.25);
        h = relu(reshape(h, {12}));
        return reduce_mean(h).item();
    };
    Tensor a(adata, {3, 4}, true);
    Tensor b(bdata, {3, 4});
    auto h = mul(add(a, b), sub(a, b));
    h = add_scalar(mul_scalar(h, 0.5), 0.25);
    h = relu(reshape(h, {12}));
    backward(reduce_mean(h));
    CHECK(max_rel_error(a.grad(), finite_difference(composite, adata)) < 1e-5);

    CHECK_THROWS_AS(add(Tensor(adata, {3, 4}), Tensor(adata, {4, 3})), DimensionError);
    CHECK_THROWS_AS(reshape(Tensor(adata, {3, 4}), {5, 5}), DimensionError);
}

TEST_CASE("clamp gradient away from the kinks") {
    Rng rng(41);
    auto xdata = random_vector(10, rng, -0.4, 0.4);
    xdata[0] = -2.0;  // saturated low
    xdata[1] = 2.0;   // saturated high
    Tensor x(xdata, {10}, true);
    backward(reduce_sum(clamp(x, -0.5, 0.5)));
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 0.0);
    for (int i = 2; i < 10; ++i) CHECK(x.grad()[i] == doctest::Approx(1.0));
}

TEST_CASE("maxpool2x2 forward and backward") {
    // 1x4x4, distinct values: max of each window, gradient routed to argmax.
    std::vector<double> v(16);
    for (int i = 0; i < 16; ++i) v[i] = static_cast<double>(i);
    Tensor x(v, {1, 4, 4}, true);
    auto y = maxpool2x2(x);
    CHECK(y.shape() == std::vector<int>{1, 2, 2});
    CHECK(y.data() == std::vector<double>{5, 7, 13, 15});
    backward(reduce_sum(y));
    for (int i = 0; i < 16; ++i)
        CHECK(x.grad()[i] == ((i == 5 || i == 7 || i == 13 || i == 15) ? 1.0 : 0.0));

    // Ties keep the first element in scan order.
    Tensor t(std::vector<double>(4, 0.5), {1, 2, 2}, true);
    backward(reduce_sum(maxpool2x2(t)));
    CHECK(t.grad() == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("argmax ties break toward the lowest index") {
    Tensor t({0.3, 0.7, 0.7, 0.1}, {4});
    CHECK(t.argmax() == 1);
    Tensor u(std::vector<double>(5, 0.0), {5});
    CHECK(u.argmax() == 0);
}

TEST_CASE("composite mlp-style graph matches finite differences") {
    Rng rng(77);
    auto xdata = random_vector(6, rng);
    auto w1data = random_vector(6 * 5, rng);
    auto b1data = random_vector(5, rng);
    auto w2data = random_vector(5 * 3, rng);

    auto run = [&](const std::vector<double>& w1v) {
        auto h = add(matmul(Tensor(xdata, {1, 6}), Tensor(w1v, {6, 5})), Tensor(b1data, {1, 5}));
        auto out = matmul(relu(h), Tensor(w2data, {5, 3}));
        return softmax_cross_entropy(reshape(out, {3}), 1).item();
    };
    Tensor w1(w1data, {6, 5}, true);
    auto h = add(matmul(Tensor(xdata, {1, 6}), w1), Tensor(b1data, {1, 5}));
    auto out = matmul(relu(h), Tensor(w2data, {5, 3}));
    backward(softmax_cross_entropy(reshape(out, {3}), 1));
    CHECK(max_rel_error(w1.grad(), finite_difference(run, w1data)) < 1e-5);
}

TEST_SUITE_END();
