#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "top/metrics.hpp"

namespace top {

// Weights of a penalized logistic regression fit.
struct LogisticFit {
    std::vector<double> weights;
    double bias = 0.0;
};

// Deterministic full-batch Newton maximization of the L2-penalized
// log-likelihood (penalty on weights, not bias) to gradient norm <= 1e-8.
// Requires at least one positive and one negative label.
LogisticFit fit_logistic(const std::vector<std::vector<double>>& features,
                         const std::vector<int>& labels, double l2_penalty);

// Maps TOP features to a probability of poisoning. Features are standardized
// with stored constants; after fit_pruned every retained weight is positive.
struct DetectorModel {
    enum class Kind { MultivariateLogistic, PlattOnScore };

    Kind kind = Kind::MultivariateLogistic;
    std::vector<FeatureKey> features;  // retained, in schema order
    std::vector<double> mean;          // standardization constants
    std::vector<double> scale;
    std::vector<double> weights;       // on standardized features
    double bias = 0.0;
    bool bias_only = false;            // every feature was pruned
    std::uint64_t seed = 0;
    int n_train = 0;

    // Throws SchemaError naming the first feature missing from `values`.
    double predict_proba(const std::map<FeatureKey, double>& values) const;

    nlohmann::json to_json() const;
    static DetectorModel from_json(const nlohmann::json& j);
    void save(const std::string& path) const;
    static DetectorModel load(const std::string& path);
};

// Iterative feature selection: fit, drop strictly negative weights, refit,
// until all weights are positive; falls back to bias-only (flagged) if every
// feature is pruned. L2 penalty is 1 / n_models.
DetectorModel fit_pruned(const std::vector<FeatureKey>& keys,
                         const std::vector<std::vector<double>>& features,
                         const std::vector<int>& labels, std::uint64_t seed = 0);

// Univariate sigmoid calibration p = sigmoid(a*s + b); `a` may take any sign.
std::pair<double, double> platt_scale(const std::vector<double>& scores,
                                      const std::vector<int>& labels);

// Builds a PlattOnScore detector for one feature column.
DetectorModel fit_platt_detector(const FeatureKey& key, const std::vector<double>& scores,
                                 const std::vector<int>& labels, std::uint64_t seed = 0);

// Probability that a random positive outranks a random negative; ties count
// one half. Throws ContractError unless both classes are present.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Mean binary cross-entropy with probabilities clipped to [1e-7, 1 - 1e-7].
double cross_entropy_score(const std::vector<double>& probs, const std::vector<int>& labels);

}  // namespace top
