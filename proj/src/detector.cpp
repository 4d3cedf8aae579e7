#include "top/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "top/errors.hpp"

namespace top {

using nlohmann::json;

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void require_both_classes(const std::vector<int>& labels, const char* op) {
    bool pos = false, neg = false;
    for (int y : labels) (y > 0 ? pos : neg) = true;
    if (!pos || !neg)
        throw ContractError(std::string(op) + ": need at least one positive and one negative");
}

// Cholesky solve of the SPD system A x = b (A is dim x dim, row-major).
std::vector<double> solve_spd(std::vector<double> a, std::vector<double> b, std::size_t dim) {
    for (std::size_t i = 0; i < dim; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double sum = a[i * dim + j];
            for (std::size_t k = 0; k < j; ++k) sum -= a[i * dim + k] * a[j * dim + k];
            if (i == j) {
                if (sum <= 0.0) sum = 1e-12;
                a[i * dim + i] = std::sqrt(sum);
            } else {
                a[i * dim + j] = sum / a[j * dim + j];
            }
        }
    }
    for (std::size_t i = 0; i < dim; ++i) {
        double sum = b[i];
        for (std::size_t k = 0; k < i; ++k) sum -= a[i * dim + k] * b[k];
        b[i] = sum / a[i * dim + i];
    }
    for (std::size_t ii = dim; ii > 0; --ii) {
        const std::size_t i = ii - 1;
        double sum = b[i];
        for (std::size_t k = i + 1; k < dim; ++k) sum -= a[k * dim + i] * b[k];
        b[i] = sum / a[i * dim + i];
    }
    return b;
}

double penalized_ll(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                    const std::vector<double>& w, double bias, double lambda) {
    double ll = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double z = bias;
        for (std::size_t f = 0; f < w.size(); ++f) z += w[f] * x[i][f];
        // log-likelihood of a Bernoulli through the logistic link
        ll += y[i] > 0 ? -std::log1p(std::exp(-z)) : -std::log1p(std::exp(z));
    }
    double pen = 0.0;
    for (double v : w) pen += v * v;
    return ll - 0.5 * lambda * pen;
}

}  // namespace

LogisticFit fit_logistic(const std::vector<std::vector<double>>& features,
                         const std::vector<int>& labels, double l2_penalty) {
    if (features.size() != labels.size() || features.empty())
        throw ContractError("fit_logistic: features/labels size mismatch or empty");
    if (l2_penalty <= 0.0) throw ContractError("fit_logistic: penalty must be positive");
    require_both_classes(labels, "fit_logistic");

    const std::size_t n = features.size();
    const std::size_t nf = features[0].size();
    const std::size_t dim = nf + 1;  // weights then bias

    std::vector<double> theta(dim, 0.0);
    double obj = penalized_ll(features, labels, {theta.begin(), theta.begin() + nf}, theta[nf],
                              l2_penalty);

    for (int iter = 0; iter < 500; ++iter) {
        // Gradient and Hessian of the penalized log-likelihood.
        std::vector<double> grad(dim, 0.0);
        std::vector<double> hess(dim * dim, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double z = theta[nf];
            for (std::size_t f = 0; f < nf; ++f) z += theta[f] * features[i][f];
            const double p = sigmoid(z);
            const double r = static_cast<double>(labels[i] > 0) - p;
            const double s = std::max(p * (1.0 - p), 1e-12);
            for (std::size_t f = 0; f < nf; ++f) grad[f] += r * features[i][f];
            grad[nf] += r;
            for (std::size_t f = 0; f < nf; ++f) {
                for (std::size_t g = 0; g <= f; ++g)
                    hess[f * dim + g] += s * features[i][f] * features[i][g];
                hess[f * dim + nf] += s * features[i][f];
            }
            hess[nf * dim + nf] += s;
        }
        for (std::size_t f = 0; f < nf; ++f) {
            grad[f] -= l2_penalty * theta[f];
            hess[f * dim + f] += l2_penalty;
        }
        hess[nf * dim + nf] += 1e-12;
        // Mirror the lower triangle.
        for (std::size_t f = 0; f < dim; ++f)
            for (std::size_t g = f + 1; g < dim; ++g) hess[f * dim + g] = hess[g * dim + f];

        double gnorm = 0.0;
        for (double g : grad) gnorm = std::max(gnorm, std::abs(g));
        if (gnorm <= 1e-8) break;

        const auto step = solve_spd(hess, grad, dim);
        double scale = 1.0;
        for (int halving = 0; halving < 60; ++halving) {
            std::vector<double> cand(dim);
            for (std::size_t f = 0; f < dim; ++f) cand[f] = theta[f] + scale * step[f];
            const double cand_obj = penalized_ll(
                features, labels, {cand.begin(), cand.begin() + nf}, cand[nf], l2_penalty);
            if (cand_obj >= obj - 1e-15) {
                theta = std::move(cand);
                obj = cand_obj;
                break;
            }
            scale *= 0.5;
        }
    }

    LogisticFit fit;
    fit.weights.assign(theta.begin(), theta.begin() + nf);
    fit.bias = theta[nf];
    return fit;
}

double DetectorModel::predict_proba(const std::map<FeatureKey, double>& values) const {
    if (bias_only) return sigmoid(bias);
    double z = bias;
    for (std::size_t f = 0; f < features.size(); ++f) {
        const auto it = values.find(features[f]);
        if (it == values.end())
            throw SchemaError("detector: feature '" + features[f].to_string() + "' missing");
        z += weights[f] * (it->second - mean[f]) / scale[f];
    }
    return sigmoid(z);
}

DetectorModel fit_pruned(const std::vector<FeatureKey>& keys,
                         const std::vector<std::vector<double>>& features,
                         const std::vector<int>& labels, std::uint64_t seed) {
    if (features.empty() || features[0].size() != keys.size())
        throw ContractError("fit_pruned: feature matrix does not match keys");
    require_both_classes(labels, "fit_pruned");
    const std::size_t n = features.size();
    const double lambda = 1.0 / static_cast<double>(n);

    // Standardize once; pruning decisions are made on standardized weights.
    std::vector<double> mu(keys.size(), 0.0), sd(keys.size(), 0.0);
    for (const auto& row : features)
        for (std::size_t f = 0; f < keys.size(); ++f) mu[f] += row[f];
    for (auto& m : mu) m /= static_cast<double>(n);
    for (const auto& row : features)
        for (std::size_t f = 0; f < keys.size(); ++f)
            sd[f] += (row[f] - mu[f]) * (row[f] - mu[f]);
    for (auto& s : sd) s = std::sqrt(s / static_cast<double>(n));
    std::vector<double> scl(keys.size());
    for (std::size_t f = 0; f < keys.size(); ++f) scl[f] = sd[f] > 0.0 ? sd[f] : 1.0;

    std::vector<std::size_t> active(keys.size());
    std::iota(active.begin(), active.end(), 0);

    DetectorModel det;
    det.kind = DetectorModel::Kind::MultivariateLogistic;
    det.seed = seed;
    det.n_train = static_cast<int>(n);

    // Terminates in at most |keys| iterations: each pass drops >= 1 feature.
    while (!active.empty()) {
        std::vector<std::vector<double>> x(n, std::vector<double>(active.size()));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t f = 0; f < active.size(); ++f)
                x[i][f] = (features[i][active[f]] - mu[active[f]]) / scl[active[f]];
        const auto fit = fit_logistic(x, labels, lambda);

        std::vector<std::size_t> keep;
        for (std::size_t f = 0; f < active.size(); ++f)
            if (fit.weights[f] >= 0.0) keep.push_back(active[f]);

        if (keep.size() == active.size()) {
            for (std::size_t f = 0; f < active.size(); ++f) {
                det.features.push_back(keys[active[f]]);
                det.mean.push_back(mu[active[f]]);
                det.scale.push_back(scl[active[f]]);
                det.weights.push_back(fit.weights[f]);
            }
            det.bias = fit.bias;
            return det;
        }
        active = std::move(keep);
    }

    // Everything pruned: constant base-rate prediction.
    det.bias_only = true;
    std::size_t pos = 0;
    for (int y : labels)
        if (y > 0) ++pos;
    const double rate =
        std::clamp(static_cast<double>(pos) / static_cast<double>(n), 1e-7, 1.0 - 1e-7);
    det.bias = std::log(rate / (1.0 - rate));
    return det;
}

std::pair<double, double> platt_scale(const std::vector<double>& scores,
                                      const std::vector<int>& labels) {
    if (scores.size() != labels.size() || scores.empty())
        throw ContractError("platt_scale: scores/labels size mismatch or empty");
    require_both_classes(labels, "platt_scale");
    std::vector<std::vector<double>> x(scores.size(), std::vector<double>(1));
    for (std::size_t i = 0; i < scores.size(); ++i) x[i][0] = scores[i];
    const auto fit = fit_logistic(x, labels, 1.0 / static_cast<double>(scores.size()));
    return {fit.weights[0], fit.bias};
}

DetectorModel fit_platt_detector(const FeatureKey& key, const std::vector<double>& scores,
                                 const std::vector<int>& labels, std::uint64_t seed) {
    const auto [a, b] = platt_scale(scores, labels);
    DetectorModel det;
    det.kind = DetectorModel::Kind::PlattOnScore;
    det.features = {key};
    det.mean = {0.0};
    det.scale = {1.0};
    det.weights = {a};
    det.bias = b;
    det.seed = seed;
    det.n_train = static_cast<int>(scores.size());
    return det;
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size() || scores.empty())
        throw ContractError("auc: scores/labels size mismatch or empty");
    require_both_classes(labels, "auc");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Average ranks over ties, then the Mann-Whitney statistic.
    std::vector<double> rank(scores.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        i = j + 1;
    }

    double pos_ranks = 0.0;
    std::size_t npos = 0;
    for (std::size_t k = 0; k < labels.size(); ++k)
        if (labels[k] > 0) {
            pos_ranks += rank[k];
            ++npos;
        }
    const std::size_t nneg = labels.size() - npos;
    const double u =
        pos_ranks - 0.5 * static_cast<double>(npos) * static_cast<double>(npos + 1);
    return u / (static_cast<double>(npos) * static_cast<double>(nneg));
}

double cross_entropy_score(const std::vector<double>& probs, const std::vector<int>& labels) {
    if (probs.size() != labels.size() || probs.empty())
        throw ContractError("cross_entropy_score: probs/labels size mismatch or empty");
    double sum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const double p = std::clamp(probs[i], 1e-7, 1.0 - 1e-7);
        sum += labels[i] > 0 ? -std::log(p) : -std::log(1.0 - p);
    }
    return sum / static_cast<double>(probs.size());
}

// ---------------------------------------------------------------------------
// Persistence

json DetectorModel::to_json() const {
    json j;
    j["format_version"] = 1;
    j["kind"] = kind == Kind::MultivariateLogistic ? "multivariate_logistic" : "platt_on_score";
    json feats = json::array();
    for (std::size_t f = 0; f < features.size(); ++f) {
        json e;
        e["family"] = features[f].family;
        e["epsilon"] = features[f].epsilon;
        e["stat"] = features[f].stat;
        e["mean"] = mean[f];
        e["scale"] = scale[f];
        e["weight"] = weights[f];
        feats.push_back(e);
    }
    j["features"] = feats;
    j["bias"] = bias;
    j["bias_only"] = bias_only;
    j["seed"] = seed;
    j["n_train"] = n_train;
    return j;
}

DetectorModel DetectorModel::from_json(const json& j) {
    DetectorModel det;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "multivariate_logistic")
        det.kind = Kind::MultivariateLogistic;
    else if (kind == "platt_on_score")
        det.kind = Kind::PlattOnScore;
    else
        throw ParseError("unknown detector kind '" + kind + "'");
    for (const auto& e : j.at("features")) {
        det.features.push_back({e.at("family").get<std::string>(), e.at("epsilon").get<double>(),
                                e.at("stat").get<std::string>()});
        det.mean.push_back(e.at("mean").get<double>());
        det.scale.push_back(e.at("scale").get<double>());
        det.weights.push_back(e.at("weight").get<double>());
    }
    det.bias = j.at("bias").get<double>();
    det.bias_only = j.at("bias_only").get<bool>();
    det.seed = j.at("seed").get<std::uint64_t>();
    det.n_train = j.at("n_train").get<int>();
    return det;
}

void DetectorModel::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw ParseError(path + ": cannot open for writing");
    f << to_json().dump(2) << '\n';
}

DetectorModel DetectorModel::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError(path + ": cannot open");
    json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    return from_json(j);
}

}  // namespace top
