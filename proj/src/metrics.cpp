#include "top/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "top/errors.hpp"
#include "top/rng.hpp"

namespace top {

TransferPanel build_panel(const TrainedModel& model, const std::vector<Tensor>& images,
                          const AttackConfig& cfg) {
    if (images.size() < 2) throw ContractError("build_panel: need at least 2 images");
    cfg.validate();
    const std::size_t n = images.size();

    TransferPanel panel;
    panel.num_classes = model.architecture().num_classes;
    panel.baseline.resize(n);
    panel.source_failed.assign(n, false);
    for (std::size_t i = 0; i < n; ++i) panel.baseline[i] = predict_class(model, images[i]);

    std::vector<Perturbation> perts(n);
    for (std::size_t j = 0; j < n; ++j) {
        AttackConfig per_source = cfg;
        per_source.seed = derive_seed(cfg.seed, j);
        try {
            perts[j] = attack(model, images[j], per_source);
            perts[j].source_index = static_cast<int>(j);
        } catch (const AttackError& e) {
            std::cerr << "warning: source " << j << " attack failed (" << e.what()
                      << "); using zero perturbation\n";
            panel.source_failed[j] = true;
            perts[j].mode = Perturbation::Mode::Additive;
            perts[j].delta.assign(images[j].data().size(), 0.0);
            perts[j].source_index = static_cast<int>(j);
        }
    }

    panel.pred.assign(n, std::vector<int>(n, 0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            panel.pred[i][j] = predict_class(model, apply_perturbation(perts[j], images[i]));
    return panel;
}

double fool_rate(const TransferPanel& panel) {
    const std::size_t n = panel.baseline.size();
    if (n == 0) throw ContractError("fool_rate: empty panel");
    std::size_t changed = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (panel.pred[i][j] != panel.baseline[i]) ++changed;
    return static_cast<double>(changed) / static_cast<double>(n * n);
}

double fool_concentration(const TransferPanel& panel) {
    const std::size_t n = panel.baseline.size();
    if (n == 0) throw ContractError("fool_concentration: empty panel");
    std::vector<std::size_t> counts(static_cast<std::size_t>(panel.num_classes), 0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const int k = panel.pred[i][j];
            if (k != panel.baseline[i]) ++counts[static_cast<std::size_t>(k)];
        }
    const std::size_t best = counts.empty() ? 0 : *std::max_element(counts.begin(), counts.end());
    return static_cast<double>(best) / static_cast<double>(n * n);
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string FeatureKey::to_string() const {
    return family + ":" + format_double(epsilon) + ":" + stat;
}

bool FeatureKey::operator<(const FeatureKey& o) const {
    if (family != o.family) return family < o.family;
    if (epsilon != o.epsilon) return epsilon < o.epsilon;
    return stat < o.stat;
}

std::vector<FeatureKey> FeatureSchema::keys() const {
    std::vector<FeatureKey> out;
    out.reserve(feature_count());
    for (const auto& a : attacks) {
        out.push_back({a.family_name(), a.epsilon, "FR"});
        out.push_back({a.family_name(), a.epsilon, "FC"});
    }
    return out;
}

namespace {

AttackConfig sparse_l1_attack(double eps) {
    AttackConfig a;
    a.family = AttackConfig::Family::SparseL1Pgd;
    a.sparsity = 0.99;
    a.epsilon = eps;
    return a;
}

AttackConfig linf_attack(double eps) {
    AttackConfig a;
    a.family = AttackConfig::Family::LinfPgd;
    a.epsilon = eps;
    return a;
}

AttackConfig filter_attack_cfg(AttackConfig::FilterNorm norm, double eps) {
    AttackConfig a;
    a.family = AttackConfig::Family::FilterAttack;
    a.filter_norm = norm;
    a.kernel_size = 3;
    a.epsilon = eps;
    return a;
}

}  // namespace

FeatureSchema FeatureSchema::default_schema() {
    FeatureSchema s;
    for (double eps : {0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0})
        s.attacks.push_back(sparse_l1_attack(eps));
    for (double eps : {1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0})
        s.attacks.push_back(linf_attack(eps / 255.0));
    for (double eps : {0.05, 0.1, 0.2, 0.4, 0.8, 1.6})
        s.attacks.push_back(filter_attack_cfg(AttackConfig::FilterNorm::L2, eps));
    for (double eps : {0.025, 0.05, 0.1, 0.2, 0.4, 0.8})
        s.attacks.push_back(filter_attack_cfg(AttackConfig::FilterNorm::Linf, eps));
    return s;
}

FeatureSchema FeatureSchema::sparse_l1_reference() {
    FeatureSchema s;
    s.attacks.push_back(sparse_l1_attack(5.0));
    return s;
}

FeatureSchema FeatureSchema::filter_comparison() {
    FeatureSchema s;
    s.attacks.push_back(sparse_l1_attack(5.0));
    s.attacks.push_back(filter_attack_cfg(AttackConfig::FilterNorm::L2, 0.4));
    s.attacks.push_back(filter_attack_cfg(AttackConfig::FilterNorm::Linf, 0.2));
    return s;
}

FeatureSchema FeatureSchema::by_name(const std::string& name) {
    if (name == "default") return default_schema();
    if (name == "sparse-l1-ref") return sparse_l1_reference();
    if (name == "filter-comparison") return filter_comparison();
    throw ContractError("unknown feature schema '" + name +
                        "' (expected default, sparse-l1-ref, filter-comparison)");
}

TopFeatureVector extract_features(const TrainedModel& model, const std::vector<Tensor>& images,
                                  const FeatureSchema& schema) {
    TopFeatureVector v;
    v.values.reserve(schema.feature_count());
    for (std::size_t a = 0; a < schema.attacks.size(); ++a) {
        AttackConfig cfg = schema.attacks[a];
        cfg.seed = derive_seed(cfg.seed, 0xF000 + a);
        const auto panel = build_panel(model, images, cfg);
        v.values.push_back(fool_rate(panel));
        v.values.push_back(fool_concentration(panel));
    }
    return v;
}

std::vector<Tensor> sample_panel_images(const LabeledDataset& validation, std::size_t n,
                                        std::uint64_t seed) {
    if (validation.images.empty()) throw ContractError("sample_panel_images: empty validation");
    std::vector<std::vector<std::size_t>> by_class(
        static_cast<std::size_t>(validation.num_classes));
    for (std::size_t i = 0; i < validation.labels.size(); ++i)
        by_class[static_cast<std::size_t>(validation.labels[i])].push_back(i);
    Rng rng(seed);
    for (auto& bucket : by_class) rng.shuffle(bucket);

    std::vector<Tensor> out;
    std::size_t round = 0;
    while (out.size() < n) {
        bool any = false;
        for (auto& bucket : by_class) {
            if (round < bucket.size() && out.size() < n) {
                out.push_back(validation.images[bucket[round]]);
                any = true;
            }
        }
        if (!any) break;  // fewer than n images in total
        ++round;
    }
    if (out.size() < 2) throw ContractError("sample_panel_images: not enough images");
    return out;
}

// ---------------------------------------------------------------------------
// Feature store CSV

void write_feature_csv(const std::string& path, const std::vector<FeatureRow>& rows) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp);
        if (!f) throw ParseError(path + ": cannot open for writing");
        f << "model_id,family,epsilon,stat,value,ground_truth\n";
        for (const auto& r : rows) {
            f << r.model_id << ',' << r.key.family << ',' << format_double(r.key.epsilon) << ','
              << r.key.stat << ',' << format_double(r.value) << ',' << r.ground_truth << '\n';
        }
    }
    std::filesystem::rename(tmp, path);
}

std::vector<FeatureRow> read_feature_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError(path + ": cannot open");
    std::string line;
    if (!std::getline(f, line)) throw ParseError(path + ": empty file");
    if (line != "model_id,family,epsilon,stat,value,ground_truth")
        throw ParseError(path + ": unexpected header '" + line + "'");

    std::vector<FeatureRow> rows;
    std::size_t lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != 6)
            throw ParseError(path + ": line " + std::to_string(lineno) + ": expected 6 fields");
        FeatureRow r;
        r.model_id = fields[0];
        r.key.family = fields[1];
        r.key.epsilon = std::stod(fields[2]);
        r.key.stat = fields[3];
        r.value = std::stod(fields[4]);
        r.ground_truth = std::stoi(fields[5]);
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace top
