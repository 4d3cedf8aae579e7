#include <cmath>

#include "doctest.h"
#include "support.hpp"
#include "top/attacks.hpp"
#include "top/errors.hpp"
#include "top/nn.hpp"

using namespace top;
using top::testing::random_vector;

namespace {

// Independent l1-projection oracle: bisection on the soft-threshold dual.
std::vector<double> l1_project_bisection(std::vector<double> x, double eps) {
    double l1 = 0.0;
    for (double v : x) l1 += std::abs(v);
    if (l1 <= eps) return x;
    double lo = 0.0, hi = 0.0;
    for (double v : x) hi = std::max(hi, std::abs(v));
    for (int iter = 0; iter < 200; ++iter) {
        const double theta = 0.5 * (lo + hi);
        double sum = 0.0;
        for (double v : x) sum += std::max(std::abs(v) - theta, 0.0);
        if (sum > eps)
            lo = theta;
        else
            hi = theta;
    }
    const double theta = 0.5 * (lo + hi);
    for (double& v : x) {
        const double m = std::abs(v) - theta;
        v = m > 0.0 ? (v > 0.0 ? m : -m) : 0.0;
    }
    return x;
}

// Small logistic-regression model with fixed weights.
TrainedModel linear_model(const std::vector<double>& w, const std::vector<double>& b,
                          std::vector<int> input_shape, int num_classes) {
    const int d = input_shape[0] * input_shape[1] * input_shape[2];
    return TrainedModel(ModelArchitecture::logistic_regression(input_shape, num_classes),
                        {Tensor(w, {d, num_classes}), Tensor(b, {1, num_classes})}, {"w", "b"},
                        TrainingMeta{});
}

double ce_loss_at(const TrainedModel& model, const Tensor& x, int target) {
    return softmax_cross_entropy(model.logits(x), target).item();
}

}  // namespace

TEST_SUITE_BEGIN("attacks");

TEST_CASE("linf projection") {
    Rng rng(1);
    std::vector<double> inside{0.05, -0.02, 0.0};
    auto copy = inside;
    project_linf(copy, 0.1);
    CHECK(copy == inside);

    std::vector<double> big(5, 0.2);
    project_linf(big, 0.1);
    for (double v : big) CHECK(v == doctest::Approx(0.1));

    for (int trial = 0; trial < 100; ++trial) {
        auto v = random_vector(8, rng, -3.0, 3.0);
        auto p = v;
        project_linf(p, 0.5);
        for (std::size_t i = 0; i < v.size(); ++i)
            CHECK(p[i] == doctest::Approx(std::clamp(v[i], -0.5, 0.5)));  // coordinate-wise oracle
        auto q = p;
        project_linf(q, 0.5);
        CHECK(q == p);  // idempotent
    }
}

TEST_CASE("l2 projection") {
    std::vector<double> zero(4, 0.0);
    project_l2(zero, 1.0);
    for (double v : zero) CHECK(v == 0.0);

    Rng rng(2);
    auto v = random_vector(10, rng);
    double n2 = 0.0;
    for (double x : v) n2 += x * x;
    const double eps = 0.5 * std::sqrt(n2);  // ||v|| = 2 eps
    auto p = v;
    project_l2(p, eps);
    double pn2 = 0.0;
    for (double x : p) pn2 += x * x;
    CHECK(std::abs(std::sqrt(pn2) - eps) < 1e-12);

    // Nearest-point property: no random feasible point is closer.
    for (int trial = 0; trial < 100; ++trial) {
        auto u = random_vector(10, rng, -2.0, 2.0);
        auto proj = u;
        project_l2(proj, 1.0);
        double d_proj = 0.0;
        for (std::size_t i = 0; i < u.size(); ++i)
            d_proj += (u[i] - proj[i]) * (u[i] - proj[i]);
        for (int probe = 0; probe < 20; ++probe) {
            auto cand = random_vector(10, rng, -1.0, 1.0);
            project_l2(cand, 1.0);
            double d_cand = 0.0;
            for (std::size_t i = 0; i < u.size(); ++i)
                d_cand += (u[i] - cand[i]) * (u[i] - cand[i]);
            CHECK(d_cand >= d_proj - 1e-9);
        }
    }
}

TEST_CASE("l1 projection against the bisection oracle") {
    std::vector<double> inside{0.2, -0.3, 0.1};
    auto copy = inside;
    project_l1(copy, 1.0);
    for (std::size_t i = 0; i < copy.size(); ++i) CHECK(copy[i] == doctest::Approx(inside[i]));

    std::vector<double> single{3.0, 0.0, 0.0, 0.0};
    project_l1(single, 1.0);
    CHECK(single[0] == doctest::Approx(1.0));
    CHECK(single[1] == 0.0);

    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        auto v = random_vector(20, rng, -2.0, 2.0);
        const double eps = rng.uniform(0.1, 3.0);
        auto mine = v;
        project_l1(mine, eps);
        auto oracle = l1_project_bisection(v, eps);
        for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::abs(mine[i] - oracle[i]) < 1e-6);

        double l1 = 0.0;
        for (double x : mine) l1 += std::abs(x);
        CHECK(l1 <= eps + 1e-9);
        auto again = mine;
        project_l1(again, eps);
        for (std::size_t i = 0; i < v.size(); ++i) CHECK(again[i] == doctest::Approx(mine[i]));
    }
}

TEST_CASE("sparse l1 step") {
    Rng rng(4);
    auto g = random_vector(784, rng);

    auto dense = sparse_l1_step(g, 0.0, 2.0);
    double l1 = 0.0;
    int nz = 0;
    for (std::size_t i = 0; i < dense.size(); ++i) {
        l1 += std::abs(dense[i]);
        if (dense[i] != 0.0) {
            ++nz;
            CHECK((dense[i] > 0) == (g[i] > 0));
        }
    }
    CHECK(l1 == doctest::Approx(2.0));
    CHECK(nz == 784);

    auto sparse = sparse_l1_step(g, 0.99, 1.0);
    nz = 0;
    for (double v : sparse)
        if (v != 0.0) ++nz;
    CHECK(nz <= 8);
    CHECK(nz >= 1);

    // Survivors are exactly the top-|g| coordinates (sorting oracle).
    std::vector<std::size_t> order(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return std::abs(g[a]) > std::abs(g[b]); });
    for (int r = 0; r < nz; ++r) CHECK(sparse[order[static_cast<std::size_t>(r)]] != 0.0);
    for (std::size_t r = static_cast<std::size_t>(nz); r < g.size(); ++r)
        CHECK(sparse[order[r]] == 0.0);

    std::vector<double> zeros(16, 0.0);
    auto nothing = sparse_l1_step(zeros, 0.5, 1.0);
    for (double v : nothing) CHECK(v == 0.0);
}

TEST_CASE("attack with epsilon 0 returns the zero perturbation") {
    auto model = linear_model({2.0, -1.0, -2.0, 1.0}, {0.1, -0.1}, {1, 1, 2}, 2);
    Tensor x({0.6, 0.4}, {1, 1, 2});
    AttackConfig cfg;
    cfg.family = AttackConfig::Family::LinfPgd;
    cfg.epsilon = 0.0;
    cfg.steps = 5;
    cfg.restarts = 3;
    auto p = attack(model, x, cfg);
    for (double v : p.delta) CHECK(v == 0.0);
    const int base = predict_class(model, x);
    CHECK(p.achieved_loss == doctest::Approx(-std::log(model.forward(x)[base])));
}

TEST_CASE("linf attack on a linear model dominates single-step FGSM") {
    Rng rng(5);
    for (int trial = 0; trial < 5; ++trial) {
        auto w = random_vector(8 * 3, rng);
        auto b = random_vector(3, rng, -0.2, 0.2);
        auto model = linear_model(w, b, {1, 2, 4}, 3);
        auto xv = random_vector(8, rng, 0.3, 0.7);
        Tensor x(xv, {1, 2, 4});
        const int base = predict_class(model, x);

        // Closed-form FGSM point.
        Tensor xt(xv, {1, 2, 4}, true);
        auto loss = softmax_cross_entropy(model.logits(xt), base);
        backward(loss);
        const double eps = 0.1;
        std::vector<double> fgsm(8);
        for (int i = 0; i < 8; ++i)
            fgsm[static_cast<std::size_t>(i)] =
                xv[static_cast<std::size_t>(i)] +
                eps * (xt.grad()[static_cast<std::size_t>(i)] > 0 ? 1.0 : -1.0);
        const double fgsm_loss = ce_loss_at(model, Tensor(fgsm, {1, 2, 4}), base);

        AttackConfig cfg;
        cfg.family = AttackConfig::Family::LinfPgd;
        cfg.epsilon = eps;
        cfg.steps = 10;
        cfg.restarts = 10;
        cfg.seed = static_cast<std::uint64_t>(trial);
        auto p = attack(model, x, cfg);
        CHECK(p.achieved_loss >= fgsm_loss - 1e-9);
    }
}

TEST_CASE("2-pixel attack matches a brute-force grid search within 1 percent") {
    auto model = linear_model({3.0, -2.0, -3.0, 2.0}, {0.0, 0.0}, {1, 1, 2}, 2);
    Tensor x({0.55, 0.45}, {1, 1, 2});
    const int base = predict_class(model, x);
    const double eps = 0.1;

    double grid_best = -1e300;
    for (int i = -10; i <= 10; ++i)
        for (int j = -10; j <= 10; ++j) {
            const double d0 = i * 0.01, d1 = j * 0.01;
            const double x0 = std::clamp(0.55 + d0, 0.0, 1.0);
            const double x1 = std::clamp(0.45 + d1, 0.0, 1.0);
            grid_best = std::max(grid_best, ce_loss_at(model, Tensor({x0, x1}, {1, 1, 2}), base));
        }

    AttackConfig cfg;
    cfg.family = AttackConfig::Family::LinfPgd;
    cfg.epsilon = eps;
    cfg.steps = 20;
    cfg.restarts = 20;
    cfg.seed = 9;
    auto p = attack(model, x, cfg);
    CHECK(p.achieved_loss >= grid_best * 0.99);
}

TEST_CASE("feasibility invariants across families") {
    auto ds = synthetic_dataset(3, 4, 8, 8, 17);
    TrainConfig tc;
    tc.epochs = 3;
    tc.seed = 2;
    auto model = train(ModelArchitecture::fcnn(3, {1, 8, 8}, 3, 16), ds, tc);

    for (auto family : {AttackConfig::Family::LinfPgd, AttackConfig::Family::L2Pgd,
                        AttackConfig::Family::SparseL1Pgd}) {
        AttackConfig cfg;
        cfg.family = family;
        cfg.epsilon = family == AttackConfig::Family::SparseL1Pgd ? 3.0 : 0.15;
        cfg.steps = 5;
        cfg.restarts = 4;
        cfg.seed = 11;
        auto p = attack(model, ds.images[0], cfg);

        double linf = 0.0, l2 = 0.0, l1 = 0.0;
        for (std::size_t i = 0; i < p.delta.size(); ++i) {
            linf = std::max(linf, std::abs(p.delta[i]));
            l2 += p.delta[i] * p.delta[i];
            l1 += std::abs(p.delta[i]);
            const double px = ds.images[0].data()[i] + p.delta[i];
            CHECK(px >= -1e-12);
            CHECK(px <= 1.0 + 1e-12);
        }
        if (family == AttackConfig::Family::LinfPgd) CHECK(linf <= cfg.epsilon + 1e-9);
        if (family == AttackConfig::Family::L2Pgd) CHECK(std::sqrt(l2) <= cfg.epsilon + 1e-9);
        if (family == AttackConfig::Family::SparseL1Pgd) CHECK(l1 <= cfg.epsilon + 1e-9);
    }
}

TEST_CASE("best-of-restarts loss is monotone in the restart count") {
    auto ds = synthetic_dataset(2, 6, 6, 6, 23);
    TrainConfig tc;
    tc.epochs = 3;
    tc.seed = 3;
    auto model = train(ModelArchitecture::logistic_regression({1, 6, 6}, 2), ds, tc);

    AttackConfig cfg;
    cfg.family = AttackConfig::Family::L2Pgd;
    cfg.epsilon = 0.4;
    cfg.steps = 4;
    cfg.seed = 7;
    double prev = -1e300;
    for (int restarts : {1, 2, 4, 8}) {
        cfg.restarts = restarts;
        const double got = attack(model, ds.images[1], cfg).achieved_loss;
        CHECK(got >= prev - 1e-12);
        prev = got;
    }
}

TEST_CASE("filter attack: zero epsilon, w=0 domination, and 1x1 grid oracle") {
    auto model = linear_model({1.5, -0.5, -1.5, 0.5}, {0.0, 0.0}, {1, 1, 2}, 2);
    Tensor x({0.6, 0.3}, {1, 1, 2});
    const int base = predict_class(model, x);

    AttackConfig cfg;
    cfg.family = AttackConfig::Family::FilterAttack;
    cfg.kernel_size = 1;
    cfg.epsilon = 0.0;
    cfg.steps = 4;
    cfg.restarts = 2;
    auto p0 = attack(model, x, cfg);
    CHECK(p0.mode == Perturbation::Mode::Filter);
    for (double v : p0.kernel) CHECK(v == 0.0);
    auto unchanged = apply_perturbation(p0, x);
    CHECK(unchanged.data() == x.data());

    cfg.epsilon = 0.5;
    cfg.steps = 10;
    cfg.restarts = 8;
    cfg.seed = 13;
    auto p = attack(model, x, cfg);
    const double w0_loss = ce_loss_at(model, x, base);
    CHECK(p.achieved_loss >= w0_loss - 1e-12);

    // Brute-force scan over the 1-D kernel, adv = clamp(x + w*x).
    double scan_best = -1e300;
    for (int i = -500; i <= 500; ++i) {
        const double w = i * 0.001;
        Tensor adv({std::clamp(0.6 + w * 0.6, 0.0, 1.0), std::clamp(0.3 + w * 0.3, 0.0, 1.0)},
                   {1, 1, 2});
        scan_best = std::max(scan_best, ce_loss_at(model, adv, base));
    }
    CHECK(p.achieved_loss >= scan_best * 0.99);

    double knorm = 0.0;
    for (double v : p.kernel) knorm += v * v;
    CHECK(std::sqrt(knorm) <= cfg.epsilon + 1e-9);
}

TEST_CASE("apply_perturbation consistency and clamping") {
    auto ds = synthetic_dataset(2, 4, 6, 6, 29);
    TrainConfig tc;
    tc.epochs = 2;
    tc.seed = 5;
    auto model = train(ModelArchitecture::logistic_regression({1, 6, 6}, 2), ds, tc);

    AttackConfig cfg;
    cfg.family = AttackConfig::Family::LinfPgd;
    cfg.epsilon = 0.2;
    cfg.steps = 5;
    cfg.restarts = 3;
    cfg.seed = 31;
    auto p = attack(model, ds.images[0], cfg);

    // Reapplying on the source image reproduces the attack's own example.
    const int base = predict_class(model, ds.images[0]);
    auto adv = apply_perturbation(p, ds.images[0]);
    CHECK(ce_loss_at(model, adv, base) == doctest::Approx(p.achieved_loss));

    // Transfer keeps pixels in range.
    for (std::size_t j = 1; j < ds.size(); ++j) {
        auto t = apply_perturbation(p, ds.images[j]);
        for (double v : t.data()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }

    Perturbation zero;
    zero.mode = Perturbation::Mode::Additive;
    zero.delta.assign(36, 0.0);
    auto same = apply_perturbation(zero, ds.images[0]);
    CHECK(same.data() == ds.images[0].data());
}

TEST_SUITE_END();
