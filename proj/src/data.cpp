#include "top/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "top/errors.hpp"
#include "top/rng.hpp"

namespace top {

const std::vector<int>& LabeledDataset::image_shape() const {
    if (images.empty()) throw ContractError("dataset is empty");
    return images.front().shape();
}

int LabeledDataset::pixels_per_image() const {
    if (images.empty()) throw ContractError("dataset is empty");
    return images.front().size();
}

void LabeledDataset::validate() const {
    if (images.size() != labels.size())
        throw ContractError("dataset: " + std::to_string(images.size()) + " images vs " +
                            std::to_string(labels.size()) + " labels");
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes)
            throw ContractError("dataset: label " + std::to_string(labels[i]) + " at index " +
                                std::to_string(i) + " out of range for " +
                                std::to_string(num_classes) + " classes");
        for (double v : images[i].data())
            if (v < 0.0 || v > 1.0)
                throw ContractError("dataset: pixel outside [0,1] in image " + std::to_string(i));
    }
}

// ---------------------------------------------------------------------------
// Empirical CDF

PixelCdf::PixelCdf(std::vector<double> values) : sorted_(std::move(values)) {
    if (sorted_.empty()) throw ContractError("PixelCdf: no samples");
    std::sort(sorted_.begin(), sorted_.end());
    const double n = static_cast<double>(sorted_.size());
    std::size_t i = 0;
    while (i < sorted_.size()) {
        std::size_t j = i;
        while (j + 1 < sorted_.size() && sorted_[j + 1] == sorted_[i]) ++j;
        // Midpoint plotting position of the tie group occupying ranks i+1..j+1.
        knot_v_.push_back(sorted_[i]);
        knot_p_.push_back((static_cast<double>(i + 1) + static_cast<double>(j + 1) - 1.0) /
                          (2.0 * n));
        i = j + 1;
    }
}

namespace {

double interp(const std::vector<double>& xs, const std::vector<double>& ys, double x) {
    if (x <= xs.front()) return ys.front();
    if (x >= xs.back()) return ys.back();
    const auto it = std::upper_bound(xs.begin(), xs.end(), x);
    const std::size_t hi = static_cast<std::size_t>(it - xs.begin());
    const std::size_t lo = hi - 1;
    const double t = (x - xs[lo]) / (xs[hi] - xs[lo]);
    return ys[lo] + t * (ys[hi] - ys[lo]);
}

}  // namespace

double PixelCdf::cdf(double v) const { return interp(knot_v_, knot_p_, v); }

double PixelCdf::inverse(double p) const { return interp(knot_p_, knot_v_, p); }

int ClassPixelStats::flat_index(PixelCoord p) const {
    const int h = image_shape[image_shape.size() - 2];
    const int w = image_shape[image_shape.size() - 1];
    if (p.first < 0 || p.first >= h || p.second < 0 || p.second >= w)
        throw ContractError("pixel (" + std::to_string(p.first) + "," + std::to_string(p.second) +
                            ") outside image " + shape_string(image_shape));
    return p.first * w + p.second;
}

double ClassPixelStats::mean_at(PixelCoord p) const {
    return mean[static_cast<std::size_t>(flat_index(p))];
}

const PixelCdf& ClassPixelStats::cdf_at(PixelCoord p, int cls) const {
    const auto it = cdfs.find(flat_index(p));
    if (it == cdfs.end())
        throw ContractError("no CDFs computed for pixel (" + std::to_string(p.first) + "," +
                            std::to_string(p.second) + ")");
    if (cls < 0 || cls >= static_cast<int>(it->second.size()))
        throw ContractError("no CDF for class " + std::to_string(cls));
    return it->second[static_cast<std::size_t>(cls)];
}

// ---------------------------------------------------------------------------
// IDX format

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::uint32_t read_be_u32(std::ifstream& f, const std::string& path, std::size_t offset) {
    unsigned char b[4];
    if (!f.read(reinterpret_cast<char*>(b), 4))
        throw ParseError(path + ": truncated at byte offset " + std::to_string(offset));
    return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
           (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

void write_be_u32(std::ofstream& f, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    f.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

LabeledDataset read_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream imgf(images_path, std::ios::binary);
    if (!imgf) throw ParseError(images_path + ": cannot open");
    const std::uint32_t img_magic = read_be_u32(imgf, images_path, 0);
    if (img_magic != kImagesMagic)
        throw ParseError(images_path + ": bad magic at byte offset 0 (expected 0x00000803)");
    const std::uint32_t count = read_be_u32(imgf, images_path, 4);
    const std::uint32_t rows = read_be_u32(imgf, images_path, 8);
    const std::uint32_t cols = read_be_u32(imgf, images_path, 12);

    std::ifstream lblf(labels_path, std::ios::binary);
    if (!lblf) throw ParseError(labels_path + ": cannot open");
    const std::uint32_t lbl_magic = read_be_u32(lblf, labels_path, 0);
    if (lbl_magic != kLabelsMagic)
        throw ParseError(labels_path + ": bad magic at byte offset 0 (expected 0x00000801)");
    const std::uint32_t lbl_count = read_be_u32(lblf, labels_path, 4);
    if (count != lbl_count)
        throw ParseError("image count " + std::to_string(count) + " (" + images_path +
                         ") does not match label count " + std::to_string(lbl_count) + " (" +
                         labels_path + ")");

    LabeledDataset ds;
    ds.images.reserve(count);
    ds.labels.reserve(count);
    const std::size_t npix = static_cast<std::size_t>(rows) * cols;
    std::vector<unsigned char> buf(npix);
    int max_label = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        if (!imgf.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(npix)))
            throw ParseError(images_path + ": truncated at byte offset " +
                             std::to_string(16 + static_cast<std::size_t>(i) * npix));
        std::vector<double> pix(npix);
        for (std::size_t p = 0; p < npix; ++p) pix[p] = static_cast<double>(buf[p]) / 255.0;
        ds.images.emplace_back(std::move(pix),
                               std::vector<int>{1, static_cast<int>(rows), static_cast<int>(cols)});
        char lbl = 0;
        if (!lblf.read(&lbl, 1))
            throw ParseError(labels_path + ": truncated at byte offset " + std::to_string(8 + i));
        const int label = static_cast<int>(static_cast<unsigned char>(lbl));
        ds.labels.push_back(label);
        max_label = std::max(max_label, label);
    }
    ds.num_classes = max_label + 1;
    return ds;
}

void write_idx(const LabeledDataset& data, const std::string& images_path,
               const std::string& labels_path) {
    if (data.images.empty()) throw ContractError("write_idx: empty dataset");
    const auto& shape = data.image_shape();
    const int rows = shape[shape.size() - 2];
    const int cols = shape[shape.size() - 1];

    std::ofstream imgf(images_path, std::ios::binary);
    if (!imgf) throw ParseError(images_path + ": cannot open for writing");
    write_be_u32(imgf, kImagesMagic);
    write_be_u32(imgf, static_cast<std::uint32_t>(data.images.size()));
    write_be_u32(imgf, static_cast<std::uint32_t>(rows));
    write_be_u32(imgf, static_cast<std::uint32_t>(cols));

    std::ofstream lblf(labels_path, std::ios::binary);
    if (!lblf) throw ParseError(labels_path + ": cannot open for writing");
    write_be_u32(lblf, kLabelsMagic);
    write_be_u32(lblf, static_cast<std::uint32_t>(data.labels.size()));

    std::vector<unsigned char> buf;
    for (std::size_t i = 0; i < data.images.size(); ++i) {
        const auto& pix = data.images[i].data();
        buf.resize(pix.size());
        for (std::size_t p = 0; p < pix.size(); ++p)
            buf[p] = static_cast<unsigned char>(std::lround(std::clamp(pix[p], 0.0, 1.0) * 255.0));
        imgf.write(reinterpret_cast<const char*>(buf.data()),
                   static_cast<std::streamsize>(buf.size()));
        const char lbl = static_cast<char>(data.labels[i]);
        lblf.write(&lbl, 1);
    }
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace {

// Bilinear upsample of a coarse g x g grid to h x w.
std::vector<double> upsample(const std::vector<double>& grid, int g, int h, int w) {
    std::vector<double> out(static_cast<std::size_t>(h) * w);
    for (int r = 0; r < h; ++r) {
        const double u = h > 1 ? static_cast<double>(r) * (g - 1) / (h - 1) : 0.0;
        const int u0 = std::min(static_cast<int>(u), g - 2);
        const double fu = u - u0;
        for (int c = 0; c < w; ++c) {
            const double v = w > 1 ? static_cast<double>(c) * (g - 1) / (w - 1) : 0.0;
            const int v0 = std::min(static_cast<int>(v), g - 2);
            const double fv = v - v0;
            const double a = grid[static_cast<std::size_t>(u0) * g + v0];
            const double b = grid[static_cast<std::size_t>(u0) * g + v0 + 1];
            const double c0 = grid[static_cast<std::size_t>(u0 + 1) * g + v0];
            const double d = grid[static_cast<std::size_t>(u0 + 1) * g + v0 + 1];
            out[static_cast<std::size_t>(r) * w + c] =
                (1 - fu) * ((1 - fv) * a + fv * b) + fu * ((1 - fv) * c0 + fv * d);
        }
    }
    return out;
}

// 3x3 box blur with edge renormalization.
std::vector<double> box_blur3(const std::vector<double>& in, int h, int w) {
    std::vector<double> out(in.size());
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            double sum = 0.0;
            int cnt = 0;
            for (int dr = -1; dr <= 1; ++dr)
                for (int dc = -1; dc <= 1; ++dc) {
                    const int rr = r + dr, cc = c + dc;
                    if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
                    sum += in[static_cast<std::size_t>(rr) * w + cc];
                    ++cnt;
                }
            out[static_cast<std::size_t>(r) * w + c] = sum / cnt;
        }
    return out;
}

}  // namespace

LabeledDataset synthetic_dataset(int num_classes, int per_class, int height, int width,
                                 std::uint64_t seed) {
    if (num_classes < 2) throw ContractError("synthetic_dataset: need at least 2 classes");
    if (per_class < 1 || height < 2 || width < 2)
        throw ContractError("synthetic_dataset: bad dimensions");

    constexpr int kGrid = 5;
    // Noise is smoothed so that nearby pixels correlate like natural images;
    // sigma 0.45 before the 3x3 blur gives a per-pixel std of about 0.15.
    constexpr double kNoiseSigma = 0.45;

    std::vector<std::vector<double>> templates;
    for (int c = 0; c < num_classes; ++c) {
        Rng rng(derive_seed(seed, 0x7e000000ULL + static_cast<std::uint64_t>(c)));
        std::vector<double> grid(kGrid * kGrid);
        for (auto& v : grid) v = rng.uniform(0.1, 0.9);
        templates.push_back(upsample(grid, kGrid, height, width));
    }

    LabeledDataset ds;
    ds.num_classes = num_classes;
    const std::size_t npix = static_cast<std::size_t>(height) * width;
    for (int c = 0; c < num_classes; ++c)
        for (int i = 0; i < per_class; ++i) {
            const std::uint64_t idx =
                static_cast<std::uint64_t>(c) * static_cast<std::uint64_t>(per_class) +
                static_cast<std::uint64_t>(i);
            Rng rng(derive_seed(seed, idx));
            std::vector<double> noise(npix);
            for (auto& v : noise) v = rng.normal(0.0, kNoiseSigma);
            noise = box_blur3(noise, height, width);
            std::vector<double> pix(npix);
            for (std::size_t p = 0; p < npix; ++p)
                pix[p] = std::clamp(templates[static_cast<std::size_t>(c)][p] + noise[p], 0.0, 1.0);
            ds.images.emplace_back(std::move(pix), std::vector<int>{1, height, width});
            ds.labels.push_back(c);
        }
    return ds;
}

ClassPixelStats compute_stats(const LabeledDataset& train,
                              const std::vector<PixelCoord>& designated_pixels) {
    if (train.images.empty()) throw ContractError("compute_stats: empty dataset");
    ClassPixelStats stats;
    stats.image_shape = train.image_shape();
    const std::size_t npix = static_cast<std::size_t>(train.pixels_per_image());

    stats.mean.assign(npix, 0.0);
    for (const auto& img : train.images)
        for (std::size_t p = 0; p < npix; ++p) stats.mean[p] += img.data()[p];
    for (auto& m : stats.mean) m /= static_cast<double>(train.images.size());

    std::vector<std::size_t> class_counts(static_cast<std::size_t>(train.num_classes), 0);
    for (int l : train.labels) ++class_counts[static_cast<std::size_t>(l)];
    for (int c = 0; c < train.num_classes; ++c)
        if (!designated_pixels.empty() && class_counts[static_cast<std::size_t>(c)] == 0)
            throw ContractError("compute_stats: class " + std::to_string(c) + " has no samples");

    for (const auto& coord : designated_pixels) {
        const int flat = stats.flat_index(coord);
        std::vector<std::vector<double>> per_class(static_cast<std::size_t>(train.num_classes));
        for (std::size_t i = 0; i < train.images.size(); ++i)
            per_class[static_cast<std::size_t>(train.labels[i])].push_back(
                train.images[i].data()[static_cast<std::size_t>(flat)]);
        std::vector<PixelCdf> cdfs;
        cdfs.reserve(per_class.size());
        for (auto& vals : per_class) cdfs.emplace_back(std::move(vals));
        stats.cdfs.emplace(flat, std::move(cdfs));
    }
    return stats;
}

std::pair<LabeledDataset, LabeledDataset> split_train_validation(const LabeledDataset& data,
                                                                 double fraction,
                                                                 std::uint64_t seed) {
    if (fraction <= 0.0 || fraction >= 1.0)
        throw ContractError("split_train_validation: fraction must be in (0,1)");
    std::vector<std::size_t> order(data.images.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);
    const std::size_t n_val = static_cast<std::size_t>(
        std::floor(fraction * static_cast<double>(order.size())));
    const std::size_t n_train = order.size() - n_val;
    LabeledDataset train, val;
    train.num_classes = val.num_classes = data.num_classes;
    for (std::size_t i = 0; i < order.size(); ++i) {
        auto& dst = i < n_train ? train : val;
        dst.images.push_back(data.images[order[i]]);
        dst.labels.push_back(data.labels[order[i]]);
    }
    return {std::move(train), std::move(val)};
}

LabeledDataset subset(const LabeledDataset& data, std::size_t count, std::uint64_t seed) {
    std::vector<std::size_t> order(data.images.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);
    count = std::min(count, order.size());
    LabeledDataset out;
    out.num_classes = data.num_classes;
    for (std::size_t i = 0; i < count; ++i) {
        out.images.push_back(data.images[order[i]]);
        out.labels.push_back(data.labels[order[i]]);
    }
    return out;
}

std::pair<double, double> two_sample_ks(std::vector<double> a, std::vector<double> b) {
    if (a.empty() || b.empty()) throw ContractError("two_sample_ks: empty sample");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const double na = static_cast<double>(a.size());
    const double nb = static_cast<double>(b.size());
    double d = 0.0;
    std::size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        const double x = std::min(a[i], b[j]);
        while (i < a.size() && a[i] <= x) ++i;
        while (j < b.size() && b[j] <= x) ++j;
        d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
    }
    const double ne = std::sqrt(na * nb / (na + nb));
    const double lambda = (ne + 0.12 + 0.11 / ne) * d;
    double p = 0.0;
    double sign = 1.0;
    for (int k = 1; k <= 100; ++k) {
        const double term = std::exp(-2.0 * lambda * lambda * k * k);
        p += sign * term;
        sign = -sign;
        if (term < 1e-12) break;
    }
    p = std::clamp(2.0 * p, 0.0, 1.0);
    return {d, p};
}

}  // namespace top
