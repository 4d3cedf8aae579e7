#include "top/triggers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "top/errors.hpp"
#include "top/nn.hpp"
#include "top/rng.hpp"

namespace top {

using nlohmann::json;

namespace {

std::vector<int> all_but(int excluded, int num_classes) {
    std::vector<int> out;
    for (int c = 0; c < num_classes; ++c)
        if (c != excluded) out.push_back(c);
    return out;
}

// Scale the 28x28 reference coordinates to other image sizes.
int scale_coord(int ref, int dim) {
    return std::clamp(static_cast<int>(std::lround(static_cast<double>(ref) * dim / 28.0)), 0,
                      dim - 1);
}

void check_image(const Tensor& x) {
    if (x.shape().size() != 3)
        throw DimensionError("trigger: image must be [C,H,W], got " + shape_string(x.shape()));
}

std::size_t pixel_offset(const Tensor& x, PixelCoord p) {
    const int h = x.shape()[1], w = x.shape()[2];
    if (p.first < 0 || p.first >= h || p.second < 0 || p.second >= w)
        throw ContractError("trigger pixel (" + std::to_string(p.first) + "," +
                            std::to_string(p.second) + ") outside image " +
                            shape_string(x.shape()));
    return static_cast<std::size_t>(p.first) * static_cast<std::size_t>(w) +
           static_cast<std::size_t>(p.second);
}

}  // namespace

TriggerSpec TriggerSpec::checkerboard(int target_class, int num_classes, int height, int width) {
    TriggerSpec s;
    s.kind = Kind::Checkerboard;
    s.target_class = target_class;
    s.source_classes = all_but(target_class, num_classes);
    s.cb_size = 4;
    s.cb_corner = {std::max(0, height - 5), std::max(0, width - 5)};
    return s;
}

TriggerSpec TriggerSpec::watermark(int target_class, int num_classes) {
    TriggerSpec s;
    s.kind = Kind::Watermark;
    s.target_class = target_class;
    s.source_classes = all_but(target_class, num_classes);
    return s;
}

TriggerSpec TriggerSpec::three_pixel_flip(int target_class, int num_classes, int height,
                                          int width) {
    TriggerSpec s;
    s.kind = Kind::ThreePixelFlip;
    s.target_class = target_class;
    s.source_classes = all_but(target_class, num_classes);
    s.flip_pixels = {{scale_coord(6, height), scale_coord(6, width)},
                     {scale_coord(14, height), scale_coord(14, width)},
                     {scale_coord(21, height), scale_coord(21, width)}};
    return s;
}

TriggerSpec TriggerSpec::cdf_flip(int target_class, int num_classes, int height, int width) {
    TriggerSpec s;
    s.kind = Kind::CdfFlip;
    s.target_class = target_class;
    s.source_classes = all_but(target_class, num_classes);
    s.cdf_pixel = {scale_coord(14, height), scale_coord(14, width)};
    return s;
}

TriggerSpec TriggerSpec::conv_filter(int target_class, int num_classes) {
    TriggerSpec s;
    s.kind = Kind::ConvFilter;
    s.target_class = target_class;
    s.source_classes = all_but(target_class, num_classes);
    s.filter_size = 3;
    s.filter_kernel = {0, -1, 0, -1, 5, -1, 0, -1, 0};  // sharpen
    s.filter_bias = 0.0;
    s.filter_gamma = 1.2;
    return s;
}

std::string TriggerSpec::kind_name() const {
    switch (kind) {
        case Kind::Checkerboard: return "checkerboard";
        case Kind::Watermark: return "watermark";
        case Kind::ThreePixelFlip: return "three_pixel_flip";
        case Kind::CdfFlip: return "cdf_flip";
        case Kind::ConvFilter: return "conv_filter";
    }
    return "?";
}

TriggerSpec::Kind TriggerSpec::kind_from_name(const std::string& name) {
    if (name == "checkerboard") return Kind::Checkerboard;
    if (name == "watermark") return Kind::Watermark;
    if (name == "three_pixel_flip") return Kind::ThreePixelFlip;
    if (name == "cdf_flip") return Kind::CdfFlip;
    if (name == "conv_filter") return Kind::ConvFilter;
    throw ParseError("unknown trigger kind '" + name + "'");
}

std::vector<PixelCoord> TriggerSpec::designated_pixels() const {
    if (kind == Kind::ThreePixelFlip) return flip_pixels;
    if (kind == Kind::CdfFlip) return {cdf_pixel};
    return {};
}

bool TriggerSpec::needs_stats() const {
    return kind == Kind::ThreePixelFlip || kind == Kind::CdfFlip;
}

bool TriggerSpec::stats_bound() const {
    if (kind == Kind::ThreePixelFlip) return flip_means.size() == flip_pixels.size();
    if (kind == Kind::CdfFlip) return !cdf_per_class.empty();
    return true;
}

void TriggerSpec::bind_stats(const ClassPixelStats& stats) {
    if (kind == Kind::ThreePixelFlip) {
        flip_means.clear();
        for (const auto& p : flip_pixels) flip_means.push_back(stats.mean_at(p));
    } else if (kind == Kind::CdfFlip) {
        cdf_per_class.clear();
        const auto it = stats.cdfs.find(stats.flat_index(cdf_pixel));
        if (it == stats.cdfs.end())
            throw ContractError("bind_stats: stats lack CDFs for the designated pixel");
        cdf_per_class = it->second;
    }
}

json TriggerSpec::to_json() const {
    json j;
    j["kind"] = kind_name();
    j["target_class"] = target_class;
    j["source_classes"] = source_classes;
    j["poison_fraction"] = poison_fraction;
    switch (kind) {
        case Kind::Checkerboard:
            j["corner"] = {cb_corner.first, cb_corner.second};
            j["size"] = cb_size;
            break;
        case Kind::Watermark:
            j["alpha"] = wm_alpha;
            j["period"] = wm_period;
            j["stripe_width"] = wm_width;
            break;
        case Kind::ThreePixelFlip: {
            json px = json::array();
            for (const auto& p : flip_pixels) px.push_back({p.first, p.second});
            j["pixels"] = px;
            j["means"] = flip_means;
            break;
        }
        case Kind::CdfFlip: {
            j["pixel"] = {cdf_pixel.first, cdf_pixel.second};
            json cdfs = json::array();
            for (const auto& c : cdf_per_class) cdfs.push_back(c.sorted_values());
            j["class_values"] = cdfs;
            break;
        }
        case Kind::ConvFilter:
            j["kernel_size"] = filter_size;
            j["kernel"] = filter_kernel;
            j["bias"] = filter_bias;
            j["gamma"] = filter_gamma;
            break;
    }
    return j;
}

TriggerSpec TriggerSpec::from_json(const json& j) {
    TriggerSpec s;
    s.kind = kind_from_name(j.at("kind").get<std::string>());
    s.target_class = j.at("target_class").get<int>();
    s.source_classes = j.at("source_classes").get<std::vector<int>>();
    s.poison_fraction = j.at("poison_fraction").get<double>();
    switch (s.kind) {
        case Kind::Checkerboard:
            s.cb_corner = {j.at("corner")[0].get<int>(), j.at("corner")[1].get<int>()};
            s.cb_size = j.at("size").get<int>();
            break;
        case Kind::Watermark:
            s.wm_alpha = j.at("alpha").get<double>();
            s.wm_period = j.at("period").get<int>();
            s.wm_width = j.at("stripe_width").get<int>();
            break;
        case Kind::ThreePixelFlip:
            s.flip_pixels.clear();
            for (const auto& p : j.at("pixels"))
                s.flip_pixels.emplace_back(p[0].get<int>(), p[1].get<int>());
            s.flip_means = j.at("means").get<std::vector<double>>();
            break;
        case Kind::CdfFlip:
            s.cdf_pixel = {j.at("pixel")[0].get<int>(), j.at("pixel")[1].get<int>()};
            for (const auto& vals : j.at("class_values"))
                s.cdf_per_class.emplace_back(vals.get<std::vector<double>>());
            break;
        case Kind::ConvFilter:
            s.filter_size = j.at("kernel_size").get<int>();
            s.filter_kernel = j.at("kernel").get<std::vector<double>>();
            s.filter_bias = j.at("bias").get<double>();
            s.filter_gamma = j.at("gamma").get<double>();
            break;
    }
    return s;
}

Tensor apply_checkerboard(const Tensor& x, PixelCoord corner, int size) {
    check_image(x);
    const int h = x.shape()[1], w = x.shape()[2], c = x.shape()[0];
    if (corner.first < 0 || corner.second < 0 || corner.first + size > h ||
        corner.second + size > w)
        throw ContractError("checkerboard patch does not fit in image " +
                            shape_string(x.shape()));
    std::vector<double> out = x.data();
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < size; ++i)
            for (int j = 0; j < size; ++j)
                out[static_cast<std::size_t>(ch) * plane +
                    static_cast<std::size_t>(corner.first + i) * w + (corner.second + j)] =
                    (i + j) % 2 == 0 ? 1.0 : 0.0;
    return Tensor(std::move(out), x.shape());
}

Tensor make_stripe_mask(int height, int width, int period, int stripe_width) {
    std::vector<double> m(static_cast<std::size_t>(height) * width, 0.0);
    for (int r = 0; r < height; ++r)
        for (int c = 0; c < width; ++c)
            if (period > 0 && (r + c) % period < stripe_width)
                m[static_cast<std::size_t>(r) * width + c] = 1.0;
    return Tensor(std::move(m), {1, height, width});
}

Tensor apply_watermark(const Tensor& x, const Tensor& mask, double alpha) {
    check_image(x);
    if (mask.shape() != x.shape())
        throw DimensionError("watermark mask shape " + shape_string(mask.shape()) +
                             " does not match image " + shape_string(x.shape()));
    if (alpha <= 0.0 || alpha > 1.0) throw ContractError("watermark alpha must be in (0,1]");
    std::vector<double> out = x.data();
    for (std::size_t i = 0; i < out.size(); ++i)
        if (mask.data()[i] > 0.0)
            out[i] = std::clamp((1.0 - alpha) * out[i] + alpha * mask.data()[i], 0.0, 1.0);
    return Tensor(std::move(out), x.shape());
}

Tensor apply_three_pixel_flip(const Tensor& x, const std::vector<PixelCoord>& pixels,
                              const std::vector<double>& means) {
    check_image(x);
    if (pixels.size() != means.size())
        throw ContractError("three_pixel_flip: " + std::to_string(means.size()) + " means for " +
                            std::to_string(pixels.size()) + " pixels");
    std::vector<double> out = x.data();
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        const std::size_t off = pixel_offset(x, pixels[i]);
        out[off] = std::clamp(2.0 * means[i] - out[off], 0.0, 1.0);
    }
    return Tensor(std::move(out), x.shape());
}

Tensor apply_three_pixel_flip(const Tensor& x, const ClassPixelStats& stats,
                              const std::vector<PixelCoord>& pixels) {
    std::vector<double> means;
    means.reserve(pixels.size());
    for (const auto& p : pixels) means.push_back(stats.mean_at(p));
    return apply_three_pixel_flip(x, pixels, means);
}

Tensor apply_cdf_flip(const Tensor& x, int true_class, const std::vector<PixelCdf>& per_class,
                      PixelCoord pixel) {
    check_image(x);
    if (true_class < 0 || true_class >= static_cast<int>(per_class.size()))
        throw ContractError("cdf_flip: no CDF for class " + std::to_string(true_class));
    const auto& cdf = per_class[static_cast<std::size_t>(true_class)];
    std::vector<double> out = x.data();
    const std::size_t off = pixel_offset(x, pixel);
    out[off] = std::clamp(cdf.inverse(1.0 - cdf.cdf(out[off])), 0.0, 1.0);
    return Tensor(std::move(out), x.shape());
}

Tensor apply_cdf_flip(const Tensor& x, int true_class, const ClassPixelStats& stats,
                      PixelCoord pixel) {
    const auto it = stats.cdfs.find(stats.flat_index(pixel));
    if (it == stats.cdfs.end())
        throw ContractError("cdf_flip: stats lack CDFs for the designated pixel");
    return apply_cdf_flip(x, true_class, it->second, pixel);
}

Tensor apply_conv_filter_trigger(const Tensor& x, const std::vector<double>& kernel,
                                 int kernel_size, double bias, double gamma) {
    check_image(x);
    if (static_cast<int>(kernel.size()) != kernel_size * kernel_size)
        throw ContractError("conv_filter: kernel length does not match kernel_size");
    const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const int pad = (kernel_size - 1) / 2;
    std::vector<double> out(x.data().size());
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    Tensor kt(kernel, {1, 1, kernel_size, kernel_size});
    for (int ch = 0; ch < c; ++ch) {
        std::vector<double> chan(x.data().begin() + static_cast<std::ptrdiff_t>(ch * plane),
                                 x.data().begin() + static_cast<std::ptrdiff_t>((ch + 1) * plane));
        auto conv = conv2d(Tensor(std::move(chan), {1, h, w}), kt, pad);
        for (std::size_t i = 0; i < plane; ++i) {
            // Clamp before the gamma curve so fractional exponents stay real.
            const double v = std::clamp(conv.data()[i] + bias, 0.0, 1.0);
            out[static_cast<std::size_t>(ch) * plane + i] = std::pow(v, gamma);
        }
    }
    return Tensor(std::move(out), x.shape());
}

Tensor apply_trigger(const Tensor& x, int true_class, const TriggerSpec& spec) {
    switch (spec.kind) {
        case TriggerSpec::Kind::Checkerboard:
            return apply_checkerboard(x, spec.cb_corner, spec.cb_size);
        case TriggerSpec::Kind::Watermark:
            return apply_watermark(
                x, make_stripe_mask(x.shape()[1], x.shape()[2], spec.wm_period, spec.wm_width),
                spec.wm_alpha);
        case TriggerSpec::Kind::ThreePixelFlip:
            if (!spec.stats_bound())
                throw ContractError("three_pixel_flip trigger not bound to stats");
            return apply_three_pixel_flip(x, spec.flip_pixels, spec.flip_means);
        case TriggerSpec::Kind::CdfFlip:
            if (!spec.stats_bound()) throw ContractError("cdf_flip trigger not bound to stats");
            return apply_cdf_flip(x, true_class, spec.cdf_per_class, spec.cdf_pixel);
        case TriggerSpec::Kind::ConvFilter:
            return apply_conv_filter_trigger(x, spec.filter_kernel, spec.filter_size,
                                             spec.filter_bias, spec.filter_gamma);
    }
    throw ContractError("unknown trigger kind");
}

LabeledDataset poison_dataset(const LabeledDataset& data, const TriggerSpec& spec,
                              std::uint64_t seed) {
    if (spec.target_class < 0 || spec.target_class >= data.num_classes)
        throw ContractError("poison_dataset: target class out of range");
    for (int c : spec.source_classes)
        if (c == spec.target_class)
            throw ContractError("poison_dataset: target class in source set");
    if (spec.poison_fraction <= 0.0 || spec.poison_fraction >= 1.0)
        throw ContractError("poison_dataset: poison_fraction must be in (0,1)");

    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < data.labels.size(); ++i)
        if (std::find(spec.source_classes.begin(), spec.source_classes.end(), data.labels[i]) !=
            spec.source_classes.end())
            eligible.push_back(i);
    if (eligible.empty()) throw ContractError("poison_dataset: no eligible source-class samples");

    Rng rng(seed);
    rng.shuffle(eligible);
    const std::size_t k = static_cast<std::size_t>(
        std::floor(spec.poison_fraction * static_cast<double>(eligible.size())));

    LabeledDataset out = data;
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t idx = eligible[i];
        out.images[idx] = apply_trigger(data.images[idx], data.labels[idx], spec);
        out.labels[idx] = spec.target_class;
    }
    return out;
}

LabeledDataset make_triggered_eval_set(const LabeledDataset& data, const TriggerSpec& spec) {
    LabeledDataset out;
    out.num_classes = data.num_classes;
    for (std::size_t i = 0; i < data.labels.size(); ++i) {
        if (std::find(spec.source_classes.begin(), spec.source_classes.end(), data.labels[i]) ==
            spec.source_classes.end())
            continue;
        out.images.push_back(apply_trigger(data.images[i], data.labels[i], spec));
        out.labels.push_back(spec.target_class);
    }
    return out;
}

namespace {

std::vector<double> select_pixels(const Tensor& img, const std::vector<PixelCoord>& pixels) {
    if (pixels.empty()) return img.data();
    std::vector<double> out;
    out.reserve(pixels.size());
    for (const auto& p : pixels) out.push_back(img.data()[pixel_offset(img, p)]);
    return out;
}

// Held-out accuracy of a clean-vs-triggered logistic regression.
double probe_accuracy(const std::vector<const Tensor*>& images, const std::vector<int>& classes,
                      const TriggerSpec& spec, const std::vector<PixelCoord>& pixels,
                      std::uint64_t seed) {
    LabeledDataset train, test;
    train.num_classes = test.num_classes = 2;
    const int dim = pixels.empty() ? images.front()->size() : static_cast<int>(pixels.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
        auto clean_feat = select_pixels(*images[i], pixels);
        auto trig_feat = select_pixels(apply_trigger(*images[i], classes[i], spec), pixels);
        auto& dst = i % 2 == 0 ? train : test;  // split by image so pairs never straddle
        dst.images.emplace_back(std::move(clean_feat), std::vector<int>{1, 1, dim});
        dst.labels.push_back(0);
        dst.images.emplace_back(std::move(trig_feat), std::vector<int>{1, 1, dim});
        dst.labels.push_back(1);
    }
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.batch_size = 8;
    cfg.learning_rate = 0.01;
    cfg.seed = seed;
    auto model = top::train(ModelArchitecture::logistic_regression({1, 1, dim}, 2), train, cfg);
    return accuracy(model, test);
}

}  // namespace

ProbeResult linear_separability_probe(const LabeledDataset& clean, const TriggerSpec& spec,
                                      const std::vector<PixelCoord>& feature_pixels,
                                      std::uint64_t seed, std::size_t max_per_class) {
    if (clean.images.empty()) throw ContractError("linear_separability_probe: empty dataset");

    std::vector<std::vector<const Tensor*>> by_class(
        static_cast<std::size_t>(clean.num_classes));
    for (std::size_t i = 0; i < clean.images.size(); ++i) {
        auto& bucket = by_class[static_cast<std::size_t>(clean.labels[i])];
        if (bucket.size() < max_per_class) bucket.push_back(&clean.images[i]);
    }

    ProbeResult res;
    std::vector<const Tensor*> all_images;
    std::vector<int> all_classes;
    for (int c = 0; c < clean.num_classes; ++c) {
        const auto& bucket = by_class[static_cast<std::size_t>(c)];
        all_images.insert(all_images.end(), bucket.begin(), bucket.end());
        all_classes.insert(all_classes.end(), bucket.size(), c);
        if (bucket.size() >= 4)
            res.per_class_accuracy.push_back(probe_accuracy(
                bucket, std::vector<int>(bucket.size(), c), spec, feature_pixels,
                derive_seed(seed, static_cast<std::uint64_t>(c) + 1)));
        else
            res.per_class_accuracy.push_back(0.5);
    }
    res.overall_accuracy = probe_accuracy(all_images, all_classes, spec, feature_pixels, seed);
    return res;
}

}  // namespace top
