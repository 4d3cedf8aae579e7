#include "top/zoo.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "top/attacks.hpp"
#include "top/errors.hpp"
#include "top/rng.hpp"

namespace fs = std::filesystem;

namespace top {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config serialization

json DatasetSpec::to_json() const {
    json j;
    j["source"] = source == Source::Synthetic ? "synthetic" : "idx";
    if (source == Source::Synthetic) {
        j["num_classes"] = num_classes;
        j["per_class"] = per_class;
        j["height"] = height;
        j["width"] = width;
    } else {
        j["images"] = images_path;
        j["labels"] = labels_path;
        j["subset"] = subset;
    }
    j["validation_fraction"] = validation_fraction;
    return j;
}

DatasetSpec DatasetSpec::from_json(const json& j) {
    DatasetSpec s;
    const std::string src = j.at("source").get<std::string>();
    if (src == "synthetic") {
        s.source = Source::Synthetic;
        s.num_classes = j.value("num_classes", 10);
        s.per_class = j.value("per_class", 120);
        s.height = j.value("height", 28);
        s.width = j.value("width", 28);
    } else if (src == "idx") {
        s.source = Source::Idx;
        s.images_path = j.at("images").get<std::string>();
        s.labels_path = j.at("labels").get<std::string>();
        s.subset = j.value("subset", static_cast<std::size_t>(0));
    } else {
        throw ParseError("dataset source must be 'synthetic' or 'idx', got '" + src + "'");
    }
    s.validation_fraction = j.value("validation_fraction", 0.1);
    return s;
}

json ExperimentConfig::to_json() const {
    json j;
    j["dataset"] = dataset.to_json();
    j["zoo_size"] = zoo_size;
    j["architecture_pool"] = architecture_pool;
    j["trigger_pool"] = trigger_pool;
    j["round_robin_triggers"] = round_robin_triggers;
    j["poison_fraction"] = poison_fraction;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["learning_rate"] = learning_rate;
    j["panel_size"] = panel_size;
    j["seed"] = seed;
    j["out_dir"] = out_dir;
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    ExperimentConfig c;
    if (j.contains("dataset")) c.dataset = DatasetSpec::from_json(j.at("dataset"));
    c.zoo_size = j.value("zoo_size", 20);
    if (j.contains("architecture_pool"))
        c.architecture_pool = j.at("architecture_pool").get<std::vector<std::string>>();
    if (j.contains("trigger_pool"))
        c.trigger_pool = j.at("trigger_pool").get<std::vector<std::string>>();
    c.round_robin_triggers = j.value("round_robin_triggers", false);
    c.poison_fraction = j.value("poison_fraction", 0.10);
    c.epochs = j.value("epochs", 30);
    c.batch_size = j.value("batch_size", 64);
    c.learning_rate = j.value("learning_rate", 1e-3);
    c.panel_size = j.value("panel_size", static_cast<std::size_t>(20));
    c.seed = j.value("seed", static_cast<std::uint64_t>(0));
    c.out_dir = j.value("out_dir", std::string("zoo_out"));
    c.validate();
    return c;
}

void ExperimentConfig::validate() const {
    if (zoo_size < 2 || zoo_size % 2 != 0)
        throw ContractError("config: zoo_size must be even and >= 2 for a class-balanced zoo");
    if (architecture_pool.empty()) throw ContractError("config: empty architecture pool");
    if (trigger_pool.empty()) throw ContractError("config: empty trigger pool");
    if (panel_size < 2) throw ContractError("config: panel_size must be >= 2");
}

// ---------------------------------------------------------------------------
// Helpers

std::string fnv1a64_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError(path + ": cannot open for checksum");
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (f.read(buf, sizeof(buf)) || f.gcount() > 0) {
        const std::streamsize n = f.gcount();
        for (std::streamsize i = 0; i < n; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
        if (!f) break;
    }
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return std::string(out);
}

namespace {

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    const int count = std::min<int>(workers, static_cast<int>(n));
    for (int w = 0; w < count; ++w)
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                    return;
                }
            }
        });
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

ModelArchitecture arch_from_name(const std::string& name, const std::vector<int>& input_shape,
                                 int num_classes) {
    if (name == "lr") return ModelArchitecture::logistic_regression(input_shape, num_classes);
    if (name == "fcnn3") return ModelArchitecture::fcnn(3, input_shape, num_classes);
    if (name == "fcnn4") return ModelArchitecture::fcnn(4, input_shape, num_classes);
    if (name.rfind("cnn", 0) == 0 && name.size() == 4) {
        const int depth = name[3] - '0';
        return ModelArchitecture::cnn(depth, input_shape, num_classes);
    }
    throw ContractError("unknown architecture name '" + name +
                        "' (expected lr, fcnn3, fcnn4, cnn4..cnn9)");
}

TriggerSpec make_trigger(const std::string& kind, int target_class, int num_classes, int height,
                         int width, double poison_fraction, const ClassPixelStats& stats) {
    TriggerSpec spec;
    const auto k = TriggerSpec::kind_from_name(kind);
    switch (k) {
        case TriggerSpec::Kind::Checkerboard:
            spec = TriggerSpec::checkerboard(target_class, num_classes, height, width);
            break;
        case TriggerSpec::Kind::Watermark:
            spec = TriggerSpec::watermark(target_class, num_classes);
            break;
        case TriggerSpec::Kind::ThreePixelFlip:
            spec = TriggerSpec::three_pixel_flip(target_class, num_classes, height, width);
            break;
        case TriggerSpec::Kind::CdfFlip:
            spec = TriggerSpec::cdf_flip(target_class, num_classes, height, width);
            break;
        case TriggerSpec::Kind::ConvFilter:
            spec = TriggerSpec::conv_filter(target_class, num_classes);
            break;
    }
    spec.poison_fraction = poison_fraction;
    if (spec.needs_stats()) spec.bind_stats(stats);
    return spec;
}

std::vector<PixelCoord> pool_designated_pixels(const std::vector<std::string>& trigger_pool,
                                               int height, int width) {
    std::set<PixelCoord> pixels;
    for (const auto& kind : trigger_pool) {
        const auto spec = make_trigger(kind, 0, 2, height, width, 0.1, ClassPixelStats{});
        for (const auto& p : spec.designated_pixels()) pixels.insert(p);
    }
    return {pixels.begin(), pixels.end()};
}

std::string model_id_for(std::size_t index) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), "m%03zu", index);
    return std::string(buf);
}

}  // namespace

ZooContext build_zoo_context(const DatasetSpec& spec, std::uint64_t seed, std::size_t panel_size,
                             const std::vector<std::string>& trigger_pool) {
    LabeledDataset all;
    if (spec.source == DatasetSpec::Source::Synthetic) {
        all = synthetic_dataset(spec.num_classes, spec.per_class, spec.height, spec.width,
                                derive_seed(seed, 0xDA7A));
    } else {
        all = read_idx(spec.images_path, spec.labels_path);
        if (spec.subset > 0 && spec.subset < all.size())
            all = subset(all, spec.subset, derive_seed(seed, 0x5B5));
    }

    ZooContext ctx;
    auto [train_split, val_split] =
        split_train_validation(all, spec.validation_fraction, derive_seed(seed, 0x5711));
    ctx.train = std::move(train_split);
    ctx.validation = std::move(val_split);

    const auto& shape = ctx.train.image_shape();
    ctx.stats = compute_stats(
        ctx.train, pool_designated_pixels(trigger_pool, shape[1], shape[2]));
    ctx.panel_images =
        sample_panel_images(ctx.validation, panel_size, derive_seed(seed, 0xBA7E1));
    return ctx;
}

// ---------------------------------------------------------------------------
// Manifest

std::size_t ZooManifest::failure_count() const {
    std::size_t n = 0;
    for (const auto& m : models)
        if (m.failed) ++n;
    return n;
}

void ZooManifest::save(const std::string& path) const {
    json j;
    j["format_version"] = 1;
    j["seed"] = seed;
    j["dataset"] = dataset.to_json();
    j["panel_size"] = panel_size;
    json models_json = json::array();
    for (const auto& m : models) {
        json e;
        e["id"] = m.id;
        e["architecture"] = m.architecture;
        e["poisoned"] = m.poisoned;
        if (m.poisoned) e["trigger_kind"] = m.trigger_kind;
        e["seed"] = m.seed;
        e["attempts"] = m.attempts;
        e["failed"] = m.failed;
        if (!m.failed) {
            e["clean_accuracy"] = m.clean_accuracy;
            if (m.trigger_accuracy) e["trigger_accuracy"] = *m.trigger_accuracy;
            e["model_file"] = m.model_file;
            e["weights_file"] = m.weights_file;
            if (!m.trigger_file.empty()) e["trigger_file"] = m.trigger_file;
            e["checksums"] = m.checksums;
        }
        models_json.push_back(e);
    }
    j["models"] = models_json;

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp);
        if (!f) throw ParseError(path + ": cannot open for writing");
        f << j.dump(2) << '\n';
    }
    fs::rename(tmp, path);
}

ZooManifest ZooManifest::load(const std::string& path, bool verify) {
    std::ifstream f(path);
    if (!f) throw ParseError(path + ": cannot open");
    json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw ParseError(path + ": " + e.what());
    }

    ZooManifest m;
    m.directory = fs::path(path).parent_path().string();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.dataset = DatasetSpec::from_json(j.at("dataset"));
    m.panel_size = j.at("panel_size").get<std::size_t>();
    std::set<std::string> seen;
    for (const auto& e : j.at("models")) {
        ModelRecord r;
        r.id = e.at("id").get<std::string>();
        if (!seen.insert(r.id).second) throw ParseError(path + ": duplicate model id " + r.id);
        r.architecture = e.at("architecture").get<std::string>();
        r.poisoned = e.at("poisoned").get<bool>();
        if (r.poisoned) r.trigger_kind = e.value("trigger_kind", "");
        r.seed = e.at("seed").get<std::uint64_t>();
        r.attempts = e.value("attempts", 1);
        r.failed = e.value("failed", false);
        if (!r.failed) {
            r.clean_accuracy = e.at("clean_accuracy").get<double>();
            if (e.contains("trigger_accuracy"))
                r.trigger_accuracy = e.at("trigger_accuracy").get<double>();
            r.model_file = e.at("model_file").get<std::string>();
            r.weights_file = e.at("weights_file").get<std::string>();
            r.trigger_file = e.value("trigger_file", "");
            r.checksums = e.at("checksums").get<std::map<std::string, std::string>>();
            if (verify) {
                for (const auto& [rel, expect] : r.checksums) {
                    const auto full = (fs::path(m.directory) / rel).string();
                    if (!fs::exists(full))
                        throw ParseError(path + ": missing file " + rel + " for model " + r.id);
                    const auto got = fnv1a64_file(full);
                    if (got != expect)
                        throw ParseError(path + ": checksum mismatch for " + rel + " (expected " +
                                         expect + ", got " + got + ")");
                }
            }
        }
        m.models.push_back(std::move(r));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Zoo generation

namespace {

struct BuiltModel {
    TrainedModel model;
    std::optional<TriggerSpec> trigger;
    ModelRecord record;
};

BuiltModel build_zoo_model(const ExperimentConfig& cfg, const ZooContext& ctx, std::size_t index) {
    const auto& shape = ctx.train.image_shape();
    const int num_classes = ctx.train.num_classes;
    const std::uint64_t model_seed = derive_seed(cfg.seed, 0x100 + index);
    Rng pick(derive_seed(model_seed, 1));

    BuiltModel out;
    out.record.id = model_id_for(index);
    out.record.seed = model_seed;
    out.record.architecture = cfg.architecture_pool[static_cast<std::size_t>(
        pick.uniform_int(0, static_cast<int>(cfg.architecture_pool.size()) - 1))];
    out.record.poisoned = index % 2 == 1;

    std::optional<TriggerSpec> trigger;
    if (out.record.poisoned) {
        const std::size_t poison_index = index / 2;  // 0-based among poisoned models
        const std::string kind =
            cfg.round_robin_triggers
                ? cfg.trigger_pool[poison_index % cfg.trigger_pool.size()]
                : cfg.trigger_pool[static_cast<std::size_t>(
                      pick.uniform_int(0, static_cast<int>(cfg.trigger_pool.size()) - 1))];
        const int target = pick.uniform_int(0, num_classes - 1);
        trigger = make_trigger(kind, target, num_classes, shape[1], shape[2],
                               cfg.poison_fraction, ctx.stats);
        out.record.trigger_kind = kind;
    }

    const auto arch = arch_from_name(out.record.architecture, shape, num_classes);
    LabeledDataset triggered_val;
    if (trigger) triggered_val = make_triggered_eval_set(ctx.validation, *trigger);

    constexpr int kMaxAttempts = 4;  // first try plus up to 3 reseeded retries
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        TrainConfig tc;
        tc.epochs = cfg.epochs;
        tc.batch_size = cfg.batch_size;
        tc.learning_rate = cfg.learning_rate;
        tc.seed = derive_seed(model_seed, 0x20 + static_cast<std::uint64_t>(attempt));

        LabeledDataset train_data =
            trigger ? poison_dataset(ctx.train, *trigger,
                                     derive_seed(model_seed, 0x30 + attempt))
                    : ctx.train;
        auto model = train(arch, train_data, tc);
        model.meta().final_clean_accuracy = accuracy(model, ctx.validation);
        if (trigger) model.meta().final_trigger_accuracy = accuracy(model, triggered_val);

        out.record.attempts = attempt + 1;
        if (validate_zoo_model(model, ctx.validation, trigger ? &triggered_val : nullptr)) {
            out.model = std::move(model);
            out.trigger = trigger;
            out.record.clean_accuracy = out.model.meta().final_clean_accuracy;
            out.record.trigger_accuracy = out.model.meta().final_trigger_accuracy;
            return out;
        }
    }
    out.record.failed = true;
    return out;
}

}  // namespace

ZooManifest generate_zoo(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto ctx = build_zoo_context(cfg.dataset, cfg.seed, cfg.panel_size, cfg.trigger_pool);

    const fs::path root(cfg.out_dir);
    fs::create_directories(root / "zoo");

    // Reuse verified models from a previous identical run.
    std::map<std::string, ModelRecord> reusable;
    const auto manifest_path = (root / "manifest.json").string();
    if (fs::exists(manifest_path)) {
        try {
            auto previous = ZooManifest::load(manifest_path, true);
            if (previous.seed == cfg.seed &&
                previous.dataset.to_json() == cfg.dataset.to_json() &&
                previous.panel_size == cfg.panel_size)
                for (auto& m : previous.models)
                    if (!m.failed) reusable.emplace(m.id, std::move(m));
        } catch (const std::exception& e) {
            std::cerr << "note: ignoring stale manifest (" << e.what() << ")\n";
        }
    }

    ZooManifest manifest;
    manifest.directory = root.string();
    manifest.seed = cfg.seed;
    manifest.dataset = cfg.dataset;
    manifest.panel_size = cfg.panel_size;
    manifest.models.resize(static_cast<std::size_t>(cfg.zoo_size));

    parallel_for(static_cast<std::size_t>(cfg.zoo_size), cfg.workers, [&](std::size_t i) {
        const auto id = model_id_for(i);
        if (const auto it = reusable.find(id); it != reusable.end()) {
            manifest.models[i] = it->second;
            return;
        }
        auto built = build_zoo_model(cfg, ctx, i);
        if (!built.record.failed) {
            const fs::path dir = root / "zoo" / id;
            fs::create_directories(dir);
            const auto model_rel = (fs::path("zoo") / id / "model.json").string();
            const auto weights_rel = (fs::path("zoo") / id / "weights.bin").string();
            save_model(built.model, (root / model_rel).string(), (root / weights_rel).string());
            built.record.model_file = model_rel;
            built.record.weights_file = weights_rel;
            built.record.checksums[model_rel] = fnv1a64_file((root / model_rel).string());
            built.record.checksums[weights_rel] = fnv1a64_file((root / weights_rel).string());
            if (built.trigger) {
                const auto trig_rel = (fs::path("zoo") / id / "trigger.json").string();
                std::ofstream tf(root / trig_rel);
                tf << built.trigger->to_json().dump(2) << '\n';
                tf.close();
                built.record.trigger_file = trig_rel;
                built.record.checksums[trig_rel] = fnv1a64_file((root / trig_rel).string());
            }
        } else {
            std::cerr << "warning: model " << id << " failed validation after "
                      << built.record.attempts << " attempts\n";
        }
        manifest.models[i] = std::move(built.record);
    });

    manifest.save(manifest_path);
    return manifest;
}

// ---------------------------------------------------------------------------
// Feature extraction

std::vector<FeatureRow> compute_features(const ZooManifest& manifest, const FeatureSchema& schema,
                                         const std::string& csv_path, int workers) {
    // Rebuild the shared validation panel for this zoo.
    std::vector<std::string> trigger_kinds;
    for (const auto& m : manifest.models)
        if (m.poisoned && !m.trigger_kind.empty()) trigger_kinds.push_back(m.trigger_kind);
    if (trigger_kinds.empty()) trigger_kinds.push_back("checkerboard");
    const auto ctx =
        build_zoo_context(manifest.dataset, manifest.seed, manifest.panel_size, trigger_kinds);

    const auto keys = schema.keys();

    std::map<std::pair<std::string, std::string>, double> existing;  // (model, key) -> value
    if (fs::exists(csv_path)) {
        for (const auto& row : read_feature_csv(csv_path))
            existing[{row.model_id, row.key.to_string()}] = row.value;
    }

    std::vector<std::vector<double>> values(manifest.models.size());
    std::vector<bool> computed(manifest.models.size(), false);

    parallel_for(manifest.models.size(), workers, [&](std::size_t i) {
        const auto& rec = manifest.models[i];
        if (rec.failed) return;

        bool have_all = true;
        std::vector<double> cached;
        for (const auto& key : keys) {
            const auto it = existing.find({rec.id, key.to_string()});
            if (it == existing.end()) {
                have_all = false;
                break;
            }
            cached.push_back(it->second);
        }
        if (have_all) {
            values[i] = std::move(cached);
            computed[i] = true;
            return;
        }

        const fs::path root(manifest.directory);
        auto model = load_model((root / rec.model_file).string(),
                                (root / rec.weights_file).string());
        FeatureSchema seeded = schema;
        for (auto& a : seeded.attacks) a.seed = derive_seed(manifest.seed, 0xFEA70000ULL + i);
        values[i] = extract_features(model, ctx.panel_images, seeded).values;
        computed[i] = true;
    });

    std::vector<FeatureRow> rows;
    for (std::size_t i = 0; i < manifest.models.size(); ++i) {
        if (!computed[i]) continue;
        const auto& rec = manifest.models[i];
        for (std::size_t f = 0; f < keys.size(); ++f) {
            FeatureRow r;
            r.model_id = rec.id;
            r.key = keys[f];
            r.value = values[i][f];
            r.ground_truth = rec.poisoned ? 1 : 0;
            rows.push_back(std::move(r));
        }
    }
    if (!csv_path.empty()) write_feature_csv(csv_path, rows);
    return rows;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalReport evaluate_detector(const DetectorModel& det, const std::vector<FeatureRow>& rows,
                             const std::vector<std::string>& model_ids) {
    std::map<std::string, std::map<FeatureKey, double>> by_model;
    std::map<std::string, int> truth;
    for (const auto& r : rows) {
        by_model[r.model_id][r.key] = r.value;
        truth[r.model_id] = r.ground_truth;
    }

    EvalReport report;
    std::vector<double> probs;
    for (const auto& id : model_ids) {
        const auto it = by_model.find(id);
        if (it == by_model.end())
            throw ContractError("evaluate: unknown model id '" + id + "'");
        const double p = det.predict_proba(it->second);
        report.probabilities.emplace_back(id, p);
        probs.push_back(p);
        const int label = truth[id];
        report.labels.push_back(label);
        if (label > 0)
            ++report.n_poisoned;
        else
            ++report.n_clean;
    }
    report.auc_score = auc(probs, report.labels);
    report.ce_score = cross_entropy_score(probs, report.labels);
    return report;
}

void write_report_json(const EvalReport& report, const std::string& path) {
    json j;
    j["auc"] = report.auc_score;
    j["ce"] = report.ce_score;
    j["n_clean"] = report.n_clean;
    j["n_poisoned"] = report.n_poisoned;
    json probs = json::object();
    for (const auto& [id, p] : report.probabilities) probs[id] = p;
    j["probabilities"] = probs;
    std::ofstream f(path);
    if (!f) throw ParseError(path + ": cannot open for writing");
    f << j.dump(2) << '\n';
}

void write_report_csv(const EvalReport& report, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw ParseError(path + ": cannot open for writing");
    f << "model_id,probability,ground_truth\n";
    for (std::size_t i = 0; i < report.probabilities.size(); ++i)
        f << report.probabilities[i].first << ',' << format_double(report.probabilities[i].second)
          << ',' << report.labels[i] << '\n';
}

// ---------------------------------------------------------------------------
// SVG report plot

namespace {

double percentile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    if (v.empty()) return 0.0;
    const double pos = q * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return v[lo] + frac * (v[hi] - v[lo]);
}

}  // namespace

void write_report_svg(const std::vector<FeatureRow>& rows, const std::string& path) {
    // Collect per (family, stat): epsilon -> values grouped by ground truth.
    std::map<std::pair<std::string, std::string>, std::map<double, std::array<std::vector<double>, 2>>>
        panels;
    for (const auto& r : rows) {
        if (r.ground_truth < 0 || r.ground_truth > 1) continue;
        panels[{r.key.family, r.key.stat}][r.key.epsilon][static_cast<std::size_t>(
            r.ground_truth)].push_back(r.value);
    }
    if (panels.empty()) throw ContractError("write_report_svg: no rows to plot");

    const int pw = 280, ph = 220, margin = 45;
    const int width = static_cast<int>(panels.size()) * pw + 20;
    std::ostringstream svg;
    svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << (ph + 40)
        << "' font-family='sans-serif' font-size='10'>\n";

    int panel_idx = 0;
    for (const auto& [key, by_eps] : panels) {
        const int x0 = 10 + panel_idx * pw + margin;
        const int y0 = 15;
        const int plot_w = pw - margin - 15, plot_h = ph - 45;
        double log_lo = 0.0, log_hi = 0.0;
        bool first = true;
        for (const auto& [eps, _] : by_eps) {
            const double lx = std::log10(std::max(eps, 1e-6));
            if (first) {
                log_lo = log_hi = lx;
                first = false;
            }
            log_lo = std::min(log_lo, lx);
            log_hi = std::max(log_hi, lx);
        }
        if (log_hi <= log_lo) log_hi = log_lo + 1.0;
        const auto sx = [&](double eps) {
            return x0 + (std::log10(std::max(eps, 1e-6)) - log_lo) / (log_hi - log_lo) * plot_w;
        };
        const auto sy = [&](double v) { return y0 + (1.0 - v) * plot_h; };

        svg << "<rect x='" << x0 << "' y='" << y0 << "' width='" << plot_w << "' height='"
            << plot_h << "' fill='none' stroke='#999'/>\n";
        svg << "<text x='" << (x0 + plot_w / 2) << "' y='" << (y0 + plot_h + 28)
            << "' text-anchor='middle'>" << key.first << " " << key.second
            << " vs epsilon (log)</text>\n";
        for (double tick : {0.0, 0.5, 1.0})
            svg << "<text x='" << (x0 - 6) << "' y='" << (sy(tick) + 3)
                << "' text-anchor='end'>" << tick << "</text>\n";

        const char* colors[2] = {"#4878a8", "#c8443c"};  // clean, poisoned
        for (int cls = 0; cls < 2; ++cls) {
            std::ostringstream band_top, band_bot, median_line;
            bool any = false;
            for (const auto& [eps, groups] : by_eps) {
                const auto& vals = groups[static_cast<std::size_t>(cls)];
                if (vals.empty()) continue;
                any = true;
                band_top << sx(eps) << ',' << sy(percentile(vals, 0.9)) << ' ';
                median_line << sx(eps) << ',' << sy(percentile(vals, 0.5)) << ' ';
            }
            for (auto it = by_eps.rbegin(); it != by_eps.rend(); ++it) {
                const auto& vals = it->second[static_cast<std::size_t>(cls)];
                if (vals.empty()) continue;
                band_bot << sx(it->first) << ',' << sy(percentile(vals, 0.1)) << ' ';
            }
            if (!any) continue;
            svg << "<polygon points='" << band_top.str() << band_bot.str() << "' fill='"
                << colors[cls] << "' opacity='0.25'/>\n";
            svg << "<polyline points='" << median_line.str() << "' fill='none' stroke='"
                << colors[cls] << "' stroke-width='1.5'/>\n";
        }
        svg << "<text x='" << (x0 + 4) << "' y='" << (y0 + 10) << "' fill='" << colors[0]
            << "'>clean</text>\n";
        svg << "<text x='" << (x0 + 4) << "' y='" << (y0 + 22) << "' fill='" << colors[1]
            << "'>poisoned</text>\n";
        ++panel_idx;
    }
    svg << "</svg>\n";

    std::ofstream f(path);
    if (!f) throw ParseError(path + ": cannot open for writing");
    f << svg.str();
}

// ---------------------------------------------------------------------------
// Table experiments

namespace {

DatasetSpec table_dataset(const TableProfile& p) {
    DatasetSpec ds;
    if (p.full) {
        ds.source = DatasetSpec::Source::Idx;
        ds.images_path = (fs::path(p.data_dir) / "train-images-idx3-ubyte").string();
        ds.labels_path = (fs::path(p.data_dir) / "train-labels-idx1-ubyte").string();
        ds.subset = 10000;
    } else {
        ds.source = DatasetSpec::Source::Synthetic;
        ds.num_classes = 10;
        ds.per_class = 120;
        ds.height = 28;
        ds.width = 28;
    }
    return ds;
}

std::vector<double> fc_scores(const std::vector<FeatureRow>& rows,
                              const std::vector<std::string>& ids, const FeatureKey& key) {
    std::map<std::string, double> by_id;
    for (const auto& r : rows)
        if (r.key == key) by_id[r.model_id] = r.value;
    std::vector<double> out;
    for (const auto& id : ids) {
        const auto it = by_id.find(id);
        if (it == by_id.end()) throw ContractError("missing FC score for model " + id);
        out.push_back(it->second);
    }
    return out;
}

}  // namespace

void run_table1(const TableProfile& profile) {
    fs::create_directories(profile.out_dir);
    const auto ds_spec = table_dataset(profile);
    const std::vector<std::string> kinds{"checkerboard", "watermark", "three_pixel_flip",
                                         "cdf_flip"};
    const auto ctx = build_zoo_context(ds_spec, profile.seed, 20, kinds);
    const auto& shape = ctx.train.image_shape();
    const auto arch = ModelArchitecture::logistic_regression(shape, ctx.train.num_classes);

    TrainConfig tc;
    tc.epochs = profile.full ? 30 : 5;
    tc.seed = derive_seed(profile.seed, 0x7A1);

    std::ofstream csv(fs::path(profile.out_dir) / "table1.csv");
    csv << "trigger,clean_accuracy,trigger_accuracy\n";

    auto clean_model = train(arch, ctx.train, tc);
    csv << "none," << format_double(accuracy(clean_model, ctx.validation)) << ",\n";

    for (std::size_t k = 0; k < kinds.size(); ++k) {
        Rng pick(derive_seed(profile.seed, 0x7B0 + k));
        const int target = pick.uniform_int(0, ctx.train.num_classes - 1);
        auto trigger = make_trigger(kinds[k], target, ctx.train.num_classes, shape[1], shape[2],
                                    0.10, ctx.stats);
        auto poisoned = poison_dataset(ctx.train, trigger, derive_seed(profile.seed, 0x7C0 + k));
        TrainConfig ptc = tc;
        ptc.seed = derive_seed(profile.seed, 0x7D0 + k);
        auto model = train(arch, poisoned, ptc);
        const auto triggered = make_triggered_eval_set(ctx.validation, trigger);
        csv << kinds[k] << ',' << format_double(accuracy(model, ctx.validation)) << ','
            << format_double(accuracy(model, triggered)) << '\n';
    }
    std::cout << "wrote " << (fs::path(profile.out_dir) / "table1.csv").string() << '\n';
}

void run_table3(const TableProfile& profile) {
    ExperimentConfig cfg;
    cfg.dataset = table_dataset(profile);
    cfg.seed = profile.seed;
    cfg.out_dir = (fs::path(profile.out_dir) / "zoo_t3").string();
    cfg.workers = profile.workers;
    cfg.panel_size = 20;
    if (profile.full) {
        cfg.zoo_size = 20;
        cfg.architecture_pool = {"fcnn3", "fcnn4", "cnn5", "cnn6", "cnn7", "cnn8", "cnn9"};
        cfg.epochs = 30;
    } else {
        cfg.zoo_size = 6;
        cfg.architecture_pool = {"fcnn3", "fcnn4", "cnn4"};
        cfg.epochs = 5;
    }

    fs::create_directories(profile.out_dir);
    auto manifest = generate_zoo(cfg);
    const auto schema = FeatureSchema::sparse_l1_reference();
    auto rows = compute_features(manifest, schema,
                                 (fs::path(cfg.out_dir) / "features.csv").string(),
                                 profile.workers);

    const auto keys = schema.keys();
    std::map<std::string, std::pair<double, double>> frfc;  // id -> (FR, FC)
    for (const auto& r : rows) {
        if (r.key == keys[0]) frfc[r.model_id].first = r.value;
        if (r.key == keys[1]) frfc[r.model_id].second = r.value;
    }

    std::ofstream csv(fs::path(profile.out_dir) / "table3.csv");
    csv << "model_id,architecture,trigger,clean_accuracy,trigger_accuracy,fool_rate,"
           "fool_concentration,poisoned\n";
    for (const auto& m : manifest.models) {
        if (m.failed) continue;
        const auto it = frfc.find(m.id);
        if (it == frfc.end()) continue;
        csv << m.id << ',' << m.architecture << ',' << (m.poisoned ? m.trigger_kind : "none")
            << ',' << format_double(m.clean_accuracy) << ','
            << (m.trigger_accuracy ? format_double(*m.trigger_accuracy) : std::string()) << ','
            << format_double(it->second.first) << ',' << format_double(it->second.second) << ','
            << (m.poisoned ? 1 : 0) << '\n';
    }
    std::cout << "wrote " << (fs::path(profile.out_dir) / "table3.csv").string() << '\n';
}

namespace {

// Shared 24-model zoo for the table 4/5 experiments (|M| = 10 per class still
// leaves evaluation models).
ZooManifest table45_zoo(const TableProfile& profile, std::vector<FeatureRow>& rows_out) {
    ExperimentConfig cfg;
    cfg.dataset = table_dataset(profile);
    cfg.seed = profile.seed;
    cfg.out_dir = (fs::path(profile.out_dir) / "zoo_t45").string();
    cfg.workers = profile.workers;
    cfg.panel_size = 20;
    cfg.zoo_size = 24;
    cfg.round_robin_triggers = true;  // 6 poisoned models per trigger kind
    if (profile.full) {
        cfg.architecture_pool = {"fcnn3", "fcnn4", "cnn5", "cnn6", "cnn7"};
        cfg.epochs = 30;
    } else {
        cfg.architecture_pool = {"fcnn3", "fcnn4"};
        cfg.epochs = 5;
    }
    fs::create_directories(profile.out_dir);
    auto manifest = generate_zoo(cfg);
    rows_out = compute_features(manifest, FeatureSchema::sparse_l1_reference(),
                                (fs::path(cfg.out_dir) / "features.csv").string(),
                                profile.workers);
    return manifest;
}

}  // namespace

void run_table4(const TableProfile& profile) {
    std::vector<FeatureRow> rows;
    auto manifest = table45_zoo(profile, rows);
    const FeatureKey fc_key = FeatureSchema::sparse_l1_reference().keys()[1];

    std::vector<std::string> clean_ids, poison_ids;
    for (const auto& m : manifest.models) {
        if (m.failed) continue;
        (m.poisoned ? poison_ids : clean_ids).push_back(m.id);
    }

    constexpr int kReps = 100;
    std::ofstream csv(fs::path(profile.out_dir) / "table4.csv");
    csv << "train_size_per_class,mean_auc,mean_ce\n";
    for (int size : {1, 2, 3, 5, 10}) {
        if (static_cast<std::size_t>(size) >= clean_ids.size() ||
            static_cast<std::size_t>(size) >= poison_ids.size())
            throw ContractError("table4: zoo too small for |M| = " + std::to_string(size));
        double auc_sum = 0.0, ce_sum = 0.0;
        for (int rep = 0; rep < kReps; ++rep) {
            Rng rng(derive_seed(profile.seed,
                                0x40000ULL + static_cast<std::uint64_t>(size) * 1000 + rep));
            auto cl = clean_ids, po = poison_ids;
            rng.shuffle(cl);
            rng.shuffle(po);
            std::vector<std::string> train_ids(cl.begin(), cl.begin() + size);
            train_ids.insert(train_ids.end(), po.begin(), po.begin() + size);
            std::vector<std::string> test_ids(cl.begin() + size, cl.end());
            test_ids.insert(test_ids.end(), po.begin() + size, po.end());

            std::vector<int> train_labels(static_cast<std::size_t>(size), 0);
            train_labels.insert(train_labels.end(), static_cast<std::size_t>(size), 1);
            auto det = fit_platt_detector(fc_key, fc_scores(rows, train_ids, fc_key),
                                          train_labels, profile.seed);
            auto report = evaluate_detector(det, rows, test_ids);
            auc_sum += report.auc_score;
            ce_sum += report.ce_score;
        }
        csv << size << ',' << format_double(auc_sum / kReps) << ','
            << format_double(ce_sum / kReps) << '\n';
    }
    std::cout << "wrote " << (fs::path(profile.out_dir) / "table4.csv").string() << '\n';
}

void run_table5(const TableProfile& profile) {
    std::vector<FeatureRow> rows;
    auto manifest = table45_zoo(profile, rows);
    const FeatureKey fc_key = FeatureSchema::sparse_l1_reference().keys()[1];
    const std::vector<std::string> kinds{"checkerboard", "watermark", "three_pixel_flip",
                                         "cdf_flip"};

    std::vector<std::string> clean_train, clean_test;
    std::map<std::string, std::vector<std::string>> by_kind;
    std::size_t clean_seen = 0;
    for (const auto& m : manifest.models) {
        if (m.failed) continue;
        if (!m.poisoned) {
            (clean_seen % 2 == 0 ? clean_train : clean_test).push_back(m.id);
            ++clean_seen;
        } else {
            by_kind[m.trigger_kind].push_back(m.id);
        }
    }

    std::ofstream csv(fs::path(profile.out_dir) / "table5.csv");
    csv << "train_trigger";
    for (const auto& kind : kinds) csv << ',' << kind;
    csv << '\n';
    for (const auto& train_kind : kinds) {
        csv << train_kind;
        for (const auto& test_kind : kinds) {
            if (train_kind == test_kind) {
                csv << ',';
                continue;
            }
            std::vector<std::string> train_ids = clean_train;
            std::vector<int> train_labels(train_ids.size(), 0);
            for (const auto& id : by_kind[train_kind]) {
                train_ids.push_back(id);
                train_labels.push_back(1);
            }
            std::vector<std::string> test_ids = clean_test;
            for (const auto& id : by_kind[test_kind]) test_ids.push_back(id);

            auto det = fit_platt_detector(fc_key, fc_scores(rows, train_ids, fc_key),
                                          train_labels, profile.seed);
            auto report = evaluate_detector(det, rows, test_ids);
            csv << ',' << format_double(report.ce_score);
        }
        csv << '\n';
    }
    std::cout << "wrote " << (fs::path(profile.out_dir) / "table5.csv").string() << '\n';
}

}  // namespace top
