#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "top/errors.hpp"
#include "top/zoo.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitGeneration = 3;

std::vector<std::string> read_id_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw top::ParseError(path + ": cannot open");
    std::vector<std::string> ids;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) ids.push_back(line);
    }
    if (ids.empty()) throw top::ParseError(path + ": no model ids");
    return ids;
}

top::FeatureKey parse_feature_key(const std::string& text) {
    const auto first = text.find(':');
    const auto last = text.rfind(':');
    if (first == std::string::npos || first == last)
        throw top::ContractError("feature key must look like family:epsilon:stat, got '" + text +
                                 "'");
    top::FeatureKey key;
    key.family = text.substr(0, first);
    key.epsilon = std::stod(text.substr(first + 1, last - first - 1));
    key.stat = text.substr(last + 1);
    return key;
}

int cmd_zoo_generate(const std::string& config_path, std::uint64_t seed, const std::string& out,
                     int workers, bool seed_set, bool out_set) {
    top::ExperimentConfig cfg;
    if (!config_path.empty()) {
        std::ifstream f(config_path);
        if (!f) throw top::ParseError(config_path + ": cannot open");
        nlohmann::json j;
        try {
            f >> j;
        } catch (const std::exception& e) {
            throw top::ParseError(config_path + ": " + e.what());
        }
        cfg = top::ExperimentConfig::from_json(j);
    }
    if (seed_set) cfg.seed = seed;
    if (out_set) cfg.out_dir = out;
    cfg.workers = workers;

    auto manifest = top::generate_zoo(cfg);
    const auto failures = manifest.failure_count();
    std::cout << "zoo: " << manifest.models.size() - failures << " models ready, " << failures
              << " failed, manifest at " << (fs::path(cfg.out_dir) / "manifest.json").string()
              << '\n';
    if (failures * 10 > manifest.models.size()) return kExitGeneration;
    return kExitOk;
}

int cmd_features(const std::string& zoo_dir, const std::string& schema_name,
                 const std::string& out, int workers) {
    auto manifest = top::ZooManifest::load((fs::path(zoo_dir) / "manifest.json").string());
    const auto schema = top::FeatureSchema::by_name(schema_name);
    auto rows = top::compute_features(manifest, schema, out, workers);
    std::cout << "features: " << rows.size() << " rows -> " << out << '\n';
    return kExitOk;
}

int cmd_detector_fit(const std::string& features_path, const std::string& train_ids_path,
                     const std::string& out, const std::string& single_feature,
                     std::uint64_t seed) {
    const auto rows = top::read_feature_csv(features_path);
    const auto train_ids = read_id_file(train_ids_path);

    std::map<std::string, std::map<top::FeatureKey, double>> by_model;
    std::map<std::string, int> truth;
    std::vector<top::FeatureKey> key_order;
    for (const auto& r : rows) {
        if (by_model.empty() ||
            (by_model.size() == 1 && by_model.begin()->first == r.model_id))
            key_order.push_back(r.key);
        by_model[r.model_id][r.key] = r.value;
        truth[r.model_id] = r.ground_truth;
    }

    std::vector<int> labels;
    for (const auto& id : train_ids) {
        if (!by_model.count(id)) throw top::ContractError("unknown model id '" + id + "'");
        labels.push_back(truth[id] > 0 ? 1 : 0);
    }

    top::DetectorModel det;
    if (!single_feature.empty()) {
        const auto key = parse_feature_key(single_feature);
        std::vector<double> scores;
        for (const auto& id : train_ids) {
            const auto& feats = by_model[id];
            const auto it = feats.find(key);
            if (it == feats.end())
                throw top::SchemaError("feature '" + key.to_string() + "' missing for model " +
                                       id);
            scores.push_back(it->second);
        }
        det = top::fit_platt_detector(key, scores, labels, seed);
    } else {
        std::vector<std::vector<double>> x;
        for (const auto& id : train_ids) {
            std::vector<double> row;
            for (const auto& key : key_order) row.push_back(by_model[id].at(key));
            x.push_back(std::move(row));
        }
        det = top::fit_pruned(key_order, x, labels, seed);
    }
    det.save(out);
    std::cout << "detector: " << (det.bias_only ? 0 : det.features.size())
              << " retained features -> " << out << '\n';
    return kExitOk;
}

int cmd_evaluate(const std::string& detector_path, const std::string& features_path,
                 const std::string& test_ids_path, const std::string& out,
                 const std::string& plot) {
    const auto det = top::DetectorModel::load(detector_path);
    const auto rows = top::read_feature_csv(features_path);
    const auto test_ids = read_id_file(test_ids_path);
    const auto report = top::evaluate_detector(det, rows, test_ids);

    top::write_report_json(report, out);
    const auto csv_path = fs::path(out).replace_extension(".csv").string();
    top::write_report_csv(report, csv_path);
    if (!plot.empty()) {
        std::vector<top::FeatureRow> test_rows;
        for (const auto& r : rows)
            if (std::find(test_ids.begin(), test_ids.end(), r.model_id) != test_ids.end())
                test_rows.push_back(r);
        top::write_report_svg(test_rows, plot);
    }
    std::cout << "evaluate: AUC " << report.auc_score << ", CE " << report.ce_score << " -> "
              << out << '\n';
    return kExitOk;
}

int cmd_table(const std::string& which, const top::TableProfile& profile) {
    if (which == "table1")
        top::run_table1(profile);
    else if (which == "table3")
        top::run_table3(profile);
    else if (which == "table4")
        top::run_table4(profile);
    else if (which == "table5")
        top::run_table5(profile);
    else
        throw top::ContractError("unknown table '" + which + "'");
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"TOP: backdoor detection via transferability of perturbations"};
    app.require_subcommand(1);

    // zoo generate
    auto* zoo = app.add_subcommand("zoo", "model zoo management");
    zoo->require_subcommand(1);
    auto* gen = zoo->add_subcommand("generate", "train a clean/poisoned model zoo");
    std::string gen_config;
    std::uint64_t gen_seed = 0;
    std::string gen_out;
    int gen_workers = 1;
    gen->add_option("--config", gen_config, "experiment config JSON");
    auto* seed_opt = gen->add_option("--seed", gen_seed, "global seed");
    auto* out_opt = gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--workers", gen_workers, "parallel model workers");

    // features
    auto* features = app.add_subcommand("features", "extract TOP features for a zoo");
    std::string feat_zoo, feat_schema = "default", feat_out = "features.csv";
    int feat_workers = 1;
    features->add_option("--zoo", feat_zoo, "zoo directory (with manifest.json)")->required();
    features->add_option("--schema", feat_schema, "feature schema name");
    features->add_option("--out", feat_out, "output CSV");
    features->add_option("--workers", feat_workers, "parallel model workers");

    // detector fit
    auto* detector = app.add_subcommand("detector", "detector management");
    detector->require_subcommand(1);
    auto* dfit = detector->add_subcommand("fit", "fit a detector on training models");
    std::string fit_features, fit_train_ids, fit_out = "detector.json", fit_single;
    std::uint64_t fit_seed = 0;
    dfit->add_option("--features", fit_features, "feature CSV")->required();
    dfit->add_option("--train-ids", fit_train_ids, "file with one model id per line")->required();
    dfit->add_option("--out", fit_out, "output detector JSON");
    dfit->add_option("--single-feature", fit_single,
                     "Platt-scale this single feature (family:epsilon:stat)");
    dfit->add_option("--seed", fit_seed, "seed recorded in the detector");

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "evaluate a detector on test models");
    std::string eval_detector, eval_features, eval_test_ids, eval_out = "report.json", eval_plot;
    evaluate->add_option("--detector", eval_detector, "detector JSON")->required();
    evaluate->add_option("--features", eval_features, "feature CSV")->required();
    evaluate->add_option("--test-ids", eval_test_ids, "file with one model id per line")
        ->required();
    evaluate->add_option("--out", eval_out, "report JSON path");
    evaluate->add_option("--plot", eval_plot, "optional SVG plot path");

    // table
    auto* table = app.add_subcommand("table", "reproduce a paper table at desk scale");
    std::string table_name, table_profile = "ci", table_data_dir, table_out = "table_out";
    std::uint64_t table_seed = 7;
    int table_workers = 1;
    table->add_option("name", table_name, "table1|table3|table4|table5")->required();
    table->add_option("--profile", table_profile, "ci or full")
        ->check(CLI::IsMember({"ci", "full"}));
    table->add_option("--data-dir", table_data_dir, "IDX directory (full profile)");
    table->add_option("--out", table_out, "output directory");
    table->add_option("--seed", table_seed, "global seed");
    table->add_option("--workers", table_workers, "parallel model workers");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (gen->parsed())
            return cmd_zoo_generate(gen_config, gen_seed, gen_out, gen_workers,
                                    seed_opt->count() > 0, out_opt->count() > 0);
        if (features->parsed())
            return cmd_features(feat_zoo, feat_schema, feat_out, feat_workers);
        if (dfit->parsed())
            return cmd_detector_fit(fit_features, fit_train_ids, fit_out, fit_single, fit_seed);
        if (evaluate->parsed())
            return cmd_evaluate(eval_detector, eval_features, eval_test_ids, eval_out, eval_plot);
        if (table->parsed()) {
            top::TableProfile profile;
            profile.full = table_profile == "full";
            profile.data_dir = table_data_dir;
            profile.out_dir = table_out;
            profile.seed = table_seed;
            profile.workers = table_workers;
            if (profile.full && profile.data_dir.empty())
                throw top::ContractError("--data-dir is required for the full profile");
            return cmd_table(table_name, profile);
        }
    } catch (const top::ParseError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitData;
    } catch (const top::DivergenceError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitGeneration;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitData;
    }
    return kExitUsage;
}
