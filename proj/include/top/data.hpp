#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "top/tensor.hpp"

namespace top {

// Pixel coordinate (row, col) on the [H, W] grid; channel 0 is implied for
// the grayscale data this project works with.
using PixelCoord = std::pair<int, int>;

// Immutable after load; safe for concurrent reads.
struct LabeledDataset {
    std::vector<Tensor> images;  // each [C, H, W], values in [0, 1]
    std::vector<int> labels;
    int num_classes = 0;

    std::size_t size() const { return images.size(); }
    const std::vector<int>& image_shape() const;
    int pixels_per_image() const;
    // Throws ContractError if any invariant is broken.
    void validate() const;
};

// Empirical CDF of one pixel for one class, built from the observed sample
// values. Evaluation uses midpoint plotting positions (i - 0.5)/n on the
// sorted, tie-merged values with linear interpolation, clamped to the sample
// range; inverse() is the matching pseudo-inverse, so inverse(cdf(v)) == v
// for every in-range v.
class PixelCdf {
public:
    PixelCdf() = default;
    explicit PixelCdf(std::vector<double> values);

    double cdf(double v) const;
    double inverse(double p) const;

    const std::vector<double>& sorted_values() const { return sorted_; }

private:
    std::vector<double> sorted_;           // all samples, ascending
    std::vector<double> knot_v_, knot_p_;  // deduplicated (value, position) knots
};

struct ClassPixelStats {
    std::vector<double> mean;  // per-pixel mean over the whole training set
    std::vector<int> image_shape;
    // flat pixel index -> per-class CDFs (indexed by class).
    std::map<int, std::vector<PixelCdf>> cdfs;

    int flat_index(PixelCoord p) const;
    double mean_at(PixelCoord p) const;
    const PixelCdf& cdf_at(PixelCoord p, int cls) const;
};

// Parses the big-endian IDX pair (images magic 0x00000803, labels magic
// 0x00000801, u8 payloads); pixels are scaled by 1/255. Parse errors name
// the offending byte offset.
LabeledDataset read_idx(const std::string& images_path, const std::string& labels_path);

// Inverse of read_idx for 8-bit-quantized datasets (values are rounded to
// the nearest of 256 levels).
void write_idx(const LabeledDataset& data, const std::string& images_path,
               const std::string& labels_path);

// Per-class smoothed random templates plus spatially smoothed Gaussian noise
// (per-pixel sigma 0.15), clipped to [0, 1]. Deterministic under seed; easy
// enough that a logistic regression exceeds 0.95 accuracy.
LabeledDataset synthetic_dataset(int num_classes, int per_class, int height, int width,
                                 std::uint64_t seed);

// Global per-pixel means plus per-class CDFs at the designated pixels.
ClassPixelStats compute_stats(const LabeledDataset& train,
                              const std::vector<PixelCoord>& designated_pixels);

// Shuffles indices under `seed` and carves off the last `fraction` as the
// validation set.
std::pair<LabeledDataset, LabeledDataset> split_train_validation(const LabeledDataset& data,
                                                                 double fraction,
                                                                 std::uint64_t seed);

// Keeps the first `count` images of the shuffled-order dataset.
LabeledDataset subset(const LabeledDataset& data, std::size_t count, std::uint64_t seed);

// Two-sample Kolmogorov-Smirnov test; returns {statistic, p_value} using the
// asymptotic distribution with the standard small-sample correction.
std::pair<double, double> two_sample_ks(std::vector<double> a, std::vector<double> b);

}  // namespace top
