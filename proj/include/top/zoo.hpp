#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "top/data.hpp"
#include "top/detector.hpp"
#include "top/metrics.hpp"
#include "top/nn.hpp"
#include "top/triggers.hpp"

namespace top {

// Where a zoo's data comes from; everything downstream (splits, stats, panel
// images) is rebuilt deterministically from this plus the zoo seed.
struct DatasetSpec {
    enum class Source { Synthetic, Idx };

    Source source = Source::Synthetic;
    // synthetic
    int num_classes = 10;
    int per_class = 120;
    int height = 28;
    int width = 28;
    // idx
    std::string images_path;
    std::string labels_path;
    std::size_t subset = 0;  // 0 = use everything

    double validation_fraction = 0.1;

    nlohmann::json to_json() const;
    static DatasetSpec from_json(const nlohmann::json& j);
};

struct ExperimentConfig {
    DatasetSpec dataset;
    int zoo_size = 20;  // even; clean/poisoned alternate
    std::vector<std::string> architecture_pool{"fcnn3", "fcnn4", "cnn5"};
    std::vector<std::string> trigger_pool{"checkerboard", "watermark", "three_pixel_flip",
                                          "cdf_flip"};
    bool round_robin_triggers = false;  // balanced assignment instead of random
    double poison_fraction = 0.10;
    int epochs = 30;
    int batch_size = 64;
    double learning_rate = 1e-3;
    std::size_t panel_size = 20;
    std::uint64_t seed = 0;
    std::string out_dir = "zoo_out";
    int workers = 1;

    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    void validate() const;
};

struct ModelRecord {
    std::string id;
    std::string architecture;  // pool name, e.g. "fcnn3"
    bool poisoned = false;
    std::string trigger_kind;  // empty for clean models
    std::uint64_t seed = 0;
    int attempts = 1;
    bool failed = false;
    double clean_accuracy = 0.0;
    std::optional<double> trigger_accuracy;
    std::string model_file;    // paths relative to the zoo directory
    std::string weights_file;
    std::string trigger_file;  // empty for clean models
    std::map<std::string, std::string> checksums;  // relative path -> fnv1a64 hex
};

struct ZooManifest {
    std::string directory;  // absolute or cwd-relative zoo root
    std::uint64_t seed = 0;
    DatasetSpec dataset;
    std::size_t panel_size = 20;
    std::vector<ModelRecord> models;

    std::size_t failure_count() const;

    void save(const std::string& path) const;
    // Loads and verifies that every referenced file exists and matches its
    // checksum; throws ParseError otherwise.
    static ZooManifest load(const std::string& path, bool verify = true);
};

std::string fnv1a64_file(const std::string& path);

// Derived, shared inputs of a zoo run.
struct ZooContext {
    LabeledDataset train;
    LabeledDataset validation;
    ClassPixelStats stats;
    std::vector<Tensor> panel_images;
};

ZooContext build_zoo_context(const DatasetSpec& spec, std::uint64_t seed, std::size_t panel_size,
                             const std::vector<std::string>& trigger_pool);

// Trains the zoo (clean/poisoned alternating), enforces the 0.6 validation
// gate with up to 3 reseeded retries per model, and writes
// <out>/zoo/<id>/{model.json, weights.bin, trigger.json} plus manifest.json.
// Models whose files already exist with valid checksums are reused.
ZooManifest generate_zoo(const ExperimentConfig& cfg);

// One TopFeatureVector row group per model at `schema`; rows already present
// in an existing CSV at `csv_path` are kept, missing (model, attack) pairs
// are computed, and the file is rewritten in canonical order.
std::vector<FeatureRow> compute_features(const ZooManifest& manifest, const FeatureSchema& schema,
                                         const std::string& csv_path, int workers);

struct EvalReport {
    double auc_score = 0.0;
    double ce_score = 0.0;
    std::size_t n_clean = 0;
    std::size_t n_poisoned = 0;
    std::vector<std::pair<std::string, double>> probabilities;  // model id -> P(poisoned)
    std::vector<int> labels;                                    // aligned ground truth
};

// Applies a detector to the listed models' feature rows.
EvalReport evaluate_detector(const DetectorModel& det, const std::vector<FeatureRow>& rows,
                             const std::vector<std::string>& model_ids);

void write_report_json(const EvalReport& report, const std::string& path);
void write_report_csv(const EvalReport& report, const std::string& path);
// FR/FC vs epsilon, median with 10th/90th percentile bands per ground-truth
// class; one panel per (family, stat) present in the rows.
void write_report_svg(const std::vector<FeatureRow>& rows, const std::string& path);

// Table experiments (CI = synthetic desk scale, full = Fashion-MNIST).
struct TableProfile {
    bool full = false;
    std::string data_dir;  // IDX directory for the full profile
    std::string out_dir = "table_out";
    std::uint64_t seed = 7;
    int workers = 1;
};

void run_table1(const TableProfile& profile);
void run_table3(const TableProfile& profile);
void run_table4(const TableProfile& profile);
void run_table5(const TableProfile& profile);

}  // namespace top
