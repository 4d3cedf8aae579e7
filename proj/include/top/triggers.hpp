#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "top/data.hpp"
#include "top/tensor.hpp"

namespace top {

// A parameterized trigger function T plus the poisoning target. Triggers that
// depend on dataset statistics (ThreePixelFlip, CdfFlip) must be bound via
// bind_stats() before they can be applied; the bound values are serialized so
// a stored spec is self-contained.
struct TriggerSpec {
    enum class Kind { Checkerboard, Watermark, ThreePixelFlip, CdfFlip, ConvFilter };

    Kind kind = Kind::Checkerboard;
    int target_class = 0;
    std::vector<int> source_classes;  // never contains target_class
    double poison_fraction = 0.10;

    // Checkerboard: k x k patch of alternating 1/0 cells.
    PixelCoord cb_corner{23, 23};
    int cb_size = 4;

    // Watermark: diagonal-stripe mask blended at alpha.
    double wm_alpha = 0.3;
    int wm_period = 10;
    int wm_width = 2;

    // ThreePixelFlip: x := 2*mu - x at three pixels.
    std::vector<PixelCoord> flip_pixels;
    std::vector<double> flip_means;  // bound from stats

    // CdfFlip: quantile reflection at one pixel, per true class.
    PixelCoord cdf_pixel{14, 14};
    std::vector<PixelCdf> cdf_per_class;  // bound from stats

    // ConvFilter: clamp then gamma after a fixed convolution.
    int filter_size = 3;
    std::vector<double> filter_kernel;
    double filter_bias = 0.0;
    double filter_gamma = 1.2;

    static TriggerSpec checkerboard(int target_class, int num_classes, int height, int width);
    static TriggerSpec watermark(int target_class, int num_classes);
    static TriggerSpec three_pixel_flip(int target_class, int num_classes, int height, int width);
    static TriggerSpec cdf_flip(int target_class, int num_classes, int height, int width);
    static TriggerSpec conv_filter(int target_class, int num_classes);

    std::string kind_name() const;
    static Kind kind_from_name(const std::string& name);

    // Pixels whose per-class statistics this trigger needs.
    std::vector<PixelCoord> designated_pixels() const;
    bool needs_stats() const;
    bool stats_bound() const;
    void bind_stats(const ClassPixelStats& stats);

    nlohmann::json to_json() const;
    static TriggerSpec from_json(const nlohmann::json& j);
};

// The individual trigger transforms. All are pure and keep pixels in [0, 1].
Tensor apply_checkerboard(const Tensor& x, PixelCoord corner, int size);
Tensor apply_watermark(const Tensor& x, const Tensor& mask, double alpha);
Tensor apply_three_pixel_flip(const Tensor& x, const std::vector<PixelCoord>& pixels,
                              const std::vector<double>& means);
Tensor apply_three_pixel_flip(const Tensor& x, const ClassPixelStats& stats,
                              const std::vector<PixelCoord>& pixels);
Tensor apply_cdf_flip(const Tensor& x, int true_class, const std::vector<PixelCdf>& per_class,
                      PixelCoord pixel);
Tensor apply_cdf_flip(const Tensor& x, int true_class, const ClassPixelStats& stats,
                      PixelCoord pixel);
Tensor apply_conv_filter_trigger(const Tensor& x, const std::vector<double>& kernel,
                                 int kernel_size, double bias, double gamma);

// Diagonal-stripe watermark mask; ~width/period of pixels are on.
Tensor make_stripe_mask(int height, int width, int period, int stripe_width);

// Dispatch on spec.kind, using the sample's true class where needed.
Tensor apply_trigger(const Tensor& x, int true_class, const TriggerSpec& spec);

// Replaces floor(poison_fraction * |eligible|) source-class samples, chosen
// uniformly under `seed`, by T(x) relabeled to the target class. Everything
// else is shared untouched.
LabeledDataset poison_dataset(const LabeledDataset& data, const TriggerSpec& spec,
                              std::uint64_t seed);

// Triggered copies of all source-class images, labeled target_class; the
// population trigger accuracy is measured on.
LabeledDataset make_triggered_eval_set(const LabeledDataset& data, const TriggerSpec& spec);

struct ProbeResult {
    double overall_accuracy = 0.0;
    std::vector<double> per_class_accuracy;
};

// Fits logistic regressions to separate {x} from {T(x)}, overall and within
// each class, and reports held-out accuracies. `feature_pixels` restricts the
// probe input to the listed pixels (the designated-pixel probe of the CDF
// flip); empty means whole images.
ProbeResult linear_separability_probe(const LabeledDataset& clean, const TriggerSpec& spec,
                                      const std::vector<PixelCoord>& feature_pixels = {},
                                      std::uint64_t seed = 1, std::size_t max_per_class = 150);

}  // namespace top
