#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "support.hpp"
#include "top/detector.hpp"
#include "top/errors.hpp"

using namespace top;

namespace {

// Independent optimizer oracle: plain gradient ascent on the same penalized
// objective.
LogisticFit gd_oracle(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                      double lambda, int iters = 400000, double lr = 0.05) {
    const std::size_t nf = x[0].size();
    std::vector<double> w(nf, 0.0);
    double b = 0.0;
    for (int it = 0; it < iters; ++it) {
        std::vector<double> gw(nf, 0.0);
        double gb = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            double z = b;
            for (std::size_t f = 0; f < nf; ++f) z += w[f] * x[i][f];
            const double r = static_cast<double>(y[i] > 0) - 1.0 / (1.0 + std::exp(-z));
            for (std::size_t f = 0; f < nf; ++f) gw[f] += r * x[i][f];
            gb += r;
        }
        for (std::size_t f = 0; f < nf; ++f) w[f] = w[f] + lr * (gw[f] - lambda * w[f]);
        b += lr * gb;
    }
    return {w, b};
}

double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
    double wins = 0.0;
    std::size_t np = 0, nn = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (y[i] <= 0) continue;
        ++np;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (y[j] > 0) continue;
            if (s[i] > s[j])
                wins += 1.0;
            else if (s[i] == s[j])
                wins += 0.5;
        }
    }
    for (int v : y)
        if (v <= 0) ++nn;
    return wins / (static_cast<double>(np) * static_cast<double>(nn));
}

}  // namespace

TEST_SUITE_BEGIN("detector");

TEST_CASE("fit_logistic basics") {
    // Single perfectly informative feature.
    std::vector<std::vector<double>> x{{1.0}, {1.0}, {0.0}, {0.0}};
    std::vector<int> y{1, 1, 0, 0};
    auto fit = fit_logistic(x, y, 0.25);
    CHECK(fit.weights[0] > 0.0);

    // Labels independent of the feature: penalty shrinks the weight to ~0.
    std::vector<std::vector<double>> xr;
    std::vector<int> yr;
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        xr.push_back({rng.uniform()});
        yr.push_back(i % 2);
    }
    auto flat = fit_logistic(xr, yr, 1.0);
    CHECK(std::abs(flat.weights[0]) < 0.5);

    CHECK_THROWS_AS(fit_logistic(x, {1, 1, 1, 1}, 0.25), ContractError);
    CHECK_THROWS_AS(fit_logistic(x, y, 0.0), ContractError);
}

TEST_CASE("fit_logistic matches an independent gradient-ascent oracle") {
    Rng rng(17);
    std::vector<std::vector<double>> x;
    std::vector<int> y;
    for (int i = 0; i < 60; ++i) {
        const int label = i % 2;
        x.push_back({rng.normal(label ? 1.0 : -0.5, 1.0), rng.normal(label ? -0.5 : 0.6, 1.0)});
        y.push_back(label);
    }
    const double lambda = 0.1;
    auto newton = fit_logistic(x, y, lambda);
    auto oracle = gd_oracle(x, y, lambda);
    CHECK(std::abs(newton.weights[0] - oracle.weights[0]) < 1e-4);
    CHECK(std::abs(newton.weights[1] - oracle.weights[1]) < 1e-4);
    CHECK(std::abs(newton.bias - oracle.bias) < 1e-4);
}

TEST_CASE("fit_pruned drops anti-correlated features and keeps positives") {
    Rng rng(23);
    std::vector<FeatureKey> keys{{"sparse_l1", 5.0, "FR"},
                                 {"sparse_l1", 5.0, "FC"},
                                 {"linf", 0.1, "FC"}};
    std::vector<std::vector<double>> x;
    std::vector<int> y;
    for (int i = 0; i < 120; ++i) {
        const int label = i % 2;
        const double useful = label ? rng.uniform(0.5, 1.0) : rng.uniform(0.0, 0.5);
        const double useful2 = label ? rng.uniform(0.4, 1.0) : rng.uniform(0.0, 0.6);
        const double anti = label ? rng.uniform(0.0, 0.5) : rng.uniform(0.5, 1.0);
        x.push_back({useful, useful2, anti});
        y.push_back(label);
    }
    auto det = fit_pruned(keys, x, y, 9);
    CHECK_FALSE(det.bias_only);
    for (const auto& k : det.features) CHECK(k != keys[2]);  // anti-correlated pruned
    for (double w : det.weights) CHECK(w > 0.0);

    // All-informative set: identical to the plain fit on standardized data.
    std::vector<FeatureKey> keys2{keys[0], keys[1]};
    std::vector<std::vector<double>> x2;
    for (const auto& row : x) x2.push_back({row[0], row[1]});
    auto det2 = fit_pruned(keys2, x2, y, 9);
    CHECK(det2.features.size() == 2);
}

TEST_CASE("fit_pruned falls back to the base rate when everything is pruned") {
    std::vector<FeatureKey> keys{{"linf", 0.1, "FR"}};
    std::vector<std::vector<double>> x;
    std::vector<int> y;
    for (int i = 0; i < 90; ++i) {
        const int label = i % 3 == 0 ? 1 : 0;  // base rate 1/3
        x.push_back({label ? 0.0 : 1.0});       // perfectly anti-correlated
        y.push_back(label);
    }
    auto det = fit_pruned(keys, x, y, 1);
    CHECK(det.bias_only);
    CHECK(det.features.empty());
    const double p = det.predict_proba({});
    CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
}

TEST_CASE("platt scaling") {
    auto [a, b] = platt_scale({0.0, 1.0, 0.1, 0.9}, {0, 1, 0, 1});
    CHECK(a > 0.0);

    CHECK_THROWS_AS(platt_scale({0.0, 1.0}, {1, 1}), ContractError);

    // Fitted sigmoid is monotone in the score when a > 0.
    auto det = fit_platt_detector({"sparse_l1", 5.0, "FC"}, {0.02, 0.03, 0.2, 0.4, 0.01, 0.35},
                                  {0, 0, 1, 1, 0, 1});
    double prev = -1.0;
    for (double s = 0.0; s <= 1.0; s += 0.05) {
        const double p = det.predict_proba({{{"sparse_l1", 5.0, "FC"}, s}});
        CHECK(p > prev);
        prev = p;
    }
}

TEST_CASE("predict_proba is monotone and recomputable from serialized JSON") {
    Rng rng(5);
    std::vector<FeatureKey> keys{{"sparse_l1", 5.0, "FC"}, {"filter_l2", 0.4, "FC"}};
    std::vector<std::vector<double>> x;
    std::vector<int> y;
    for (int i = 0; i < 80; ++i) {
        const int label = i % 2;
        x.push_back({label ? rng.uniform(0.4, 1.0) : rng.uniform(0.0, 0.4),
                     label ? rng.uniform(0.3, 1.0) : rng.uniform(0.0, 0.55)});
        y.push_back(label);
    }
    auto det = fit_pruned(keys, x, y, 2);
    REQUIRE(det.features.size() == 2);

    std::map<FeatureKey, double> base{{keys[0], 0.3}, {keys[1], 0.3}};
    const double p0 = det.predict_proba(base);
    base[keys[0]] = 0.5;
    CHECK(det.predict_proba(base) > p0);

    CHECK_THROWS_WITH_AS(det.predict_proba({{keys[0], 0.3}}), doctest::Contains("filter_l2"),
                         SchemaError);

    namespace fs = std::filesystem;
    const auto path = (fs::temp_directory_path() / "top_detector_test.json").string();
    det.save(path);
    auto back = DetectorModel::load(path);
    fs::remove(path);

    // Manual sigmoid from the stored constants.
    double z = back.bias;
    std::map<FeatureKey, double> sample{{keys[0], 0.37}, {keys[1], 0.21}};
    for (std::size_t f = 0; f < back.features.size(); ++f)
        z += back.weights[f] * (sample.at(back.features[f]) - back.mean[f]) / back.scale[f];
    CHECK(back.predict_proba(sample) == doctest::Approx(1.0 / (1.0 + std::exp(-z))));
    CHECK(back.predict_proba(sample) == doctest::Approx(det.predict_proba(sample)));
}

TEST_CASE("auc extremes and pairwise-oracle equality") {
    CHECK(auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) == doctest::Approx(1.0));
    CHECK(auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}) == doctest::Approx(0.5));
    CHECK_THROWS_AS(auc({0.1, 0.2}, {1, 1}), ContractError);

    Rng rng(29);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> s(50);
        std::vector<int> y(50);
        for (std::size_t i = 0; i < 50; ++i) {
            s[i] = std::round(rng.uniform() * 10.0) / 10.0;  // force ties
            y[i] = rng.uniform() < 0.4 ? 1 : 0;
        }
        bool pos = false, neg = false;
        for (int v : y) (v ? pos : neg) = true;
        if (!pos || !neg) continue;
        CHECK(auc(s, y) == pairwise_auc(s, y));

        // Invariance under a strictly monotone transform.
        std::vector<double> t(50);
        for (std::size_t i = 0; i < 50; ++i) t[i] = std::exp(3.0 * s[i]) - 1.0;
        CHECK(auc(t, y) == doctest::Approx(auc(s, y)));
    }
}

TEST_CASE("cross entropy values and oracle") {
    std::vector<int> y{1, 0, 1, 0, 1, 1};
    CHECK(cross_entropy_score(std::vector<double>(6, 0.5), y) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    std::vector<double> perfect{1.0, 0.0, 1.0, 0.0, 1.0, 1.0};
    CHECK(cross_entropy_score(perfect, y) <= 1.7e-7);

    Rng rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> p(20);
        std::vector<int> labels(20);
        for (std::size_t i = 0; i < 20; ++i) {
            p[i] = rng.uniform();
            labels[i] = rng.uniform() < 0.5;
        }
        double brute = 0.0;
        for (std::size_t i = 0; i < 20; ++i) {
            const double q = std::clamp(p[i], 1e-7, 1.0 - 1e-7);
            brute += labels[i] ? -std::log(q) : -std::log(1.0 - q);
        }
        brute /= 20.0;
        CHECK(cross_entropy_score(p, labels) == doctest::Approx(brute).epsilon(1e-15));
    }
}

TEST_CASE("base-rate detector stays at or below ln 2 on its training set") {
    Rng rng(37);
    for (double rate : {0.5, 0.3, 0.7}) {
        std::vector<FeatureKey> keys{{"linf", 0.1, "FR"}};
        std::vector<std::vector<double>> x;
        std::vector<int> y;
        for (int i = 0; i < 200; ++i) {
            x.push_back({rng.uniform()});  // label-independent feature
            y.push_back(rng.uniform() < rate ? 1 : 0);
        }
        auto det = fit_pruned(keys, x, y, 5);
        std::vector<double> probs;
        for (const auto& row : x) probs.push_back(det.predict_proba({{keys[0], row[0]}}));
        CHECK(cross_entropy_score(probs, y) <= std::log(2.0) + 1e-3);
    }
}

TEST_SUITE_END();
