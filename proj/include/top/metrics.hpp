#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "top/attacks.hpp"
#include "top/nn.hpp"

namespace top {

// Full n x n transfer-attack prediction matrix for one (model, attack) pair:
// pred[i][j] is the class of image i after adding image j's perturbation,
// baseline[i] the unperturbed prediction.
struct TransferPanel {
    std::vector<int> baseline;
    std::vector<std::vector<int>> pred;
    std::vector<bool> source_failed;  // column fell back to the zero perturbation
    int num_classes = 0;
};

// One attack per source image (seeded per source), then the complete matrix
// including the diagonal. A failed attack yields a flagged zero column.
TransferPanel build_panel(const TrainedModel& model, const std::vector<Tensor>& images,
                          const AttackConfig& cfg);

// Fraction of (i, j) pairs whose prediction changes (unrestricted double sum).
double fool_rate(const TransferPanel& panel);

// Largest per-class fraction of pairs whose prediction changes *to* that
// class, n^2 denominator.
double fool_concentration(const TransferPanel& panel);

// One (family, epsilon, statistic) column of the feature vector.
struct FeatureKey {
    std::string family;
    double epsilon = 0.0;
    std::string stat;  // "FR" or "FC"

    std::string to_string() const;
    bool operator==(const FeatureKey&) const = default;
    bool operator<(const FeatureKey& o) const;
};

// Ordered attack grid shared between feature extraction and the detector.
struct FeatureSchema {
    std::vector<AttackConfig> attacks;

    // Keys in feature order: FR then FC per attack.
    std::vector<FeatureKey> keys() const;
    std::size_t feature_count() const { return 2 * attacks.size(); }

    // Log-spaced grids over all four families (56 features).
    static FeatureSchema default_schema();
    // The single sparse-l1 attack of the FMNIST experiments (q=0.99, eps=5).
    static FeatureSchema sparse_l1_reference();
    // Sparse-l1 reference plus one filter attack per norm.
    static FeatureSchema filter_comparison();
    static FeatureSchema by_name(const std::string& name);
};

struct TopFeatureVector {
    std::string model_id;
    std::vector<double> values;  // schema order
    std::optional<bool> poisoned;
};

// One panel per schema attack; FR and FC per panel in schema order.
TopFeatureVector extract_features(const TrainedModel& model, const std::vector<Tensor>& images,
                                  const FeatureSchema& schema);

// Class-stratified panel images (round-robin over classes in label order).
std::vector<Tensor> sample_panel_images(const LabeledDataset& validation, std::size_t n,
                                        std::uint64_t seed);

// Feature store rows: model_id, family, epsilon, stat, value, ground_truth.
struct FeatureRow {
    std::string model_id;
    FeatureKey key;
    double value = 0.0;
    int ground_truth = -1;  // 0 clean, 1 poisoned, -1 unknown
};

std::string format_double(double v);  // shortest round-trip decimal
void write_feature_csv(const std::string& path, const std::vector<FeatureRow>& rows);
std::vector<FeatureRow> read_feature_csv(const std::string& path);

}  // namespace top
