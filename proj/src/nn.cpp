#include "top/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "top/errors.hpp"
#include "top/rng.hpp"

namespace top {

using nlohmann::json;

ModelArchitecture ModelArchitecture::logistic_regression(std::vector<int> input_shape,
                                                         int num_classes) {
    ModelArchitecture a;
    a.kind = Kind::LogisticRegression;
    a.input_shape = std::move(input_shape);
    a.num_classes = num_classes;
    a.validate();
    return a;
}

ModelArchitecture ModelArchitecture::fcnn(int layers, std::vector<int> input_shape,
                                          int num_classes, int hidden_width) {
    ModelArchitecture a;
    a.kind = Kind::Fcnn;
    a.fcnn_layers = layers;
    a.hidden_width = hidden_width;
    a.input_shape = std::move(input_shape);
    a.num_classes = num_classes;
    a.validate();
    return a;
}

ModelArchitecture ModelArchitecture::cnn(int depth, std::vector<int> input_shape,
                                         int num_classes) {
    ModelArchitecture a;
    a.kind = Kind::Cnn;
    a.cnn_depth = depth;
    a.input_shape = std::move(input_shape);
    a.num_classes = num_classes;
    a.validate();
    return a;
}

void ModelArchitecture::validate() const {
    if (input_shape.size() != 3)
        throw ContractError("architecture: input_shape must be [C,H,W], got " +
                            shape_string(input_shape));
    if (num_classes < 2) throw ContractError("architecture: need at least 2 classes");
    if (kind == Kind::Fcnn && (fcnn_layers < 3 || fcnn_layers > 4))
        throw ContractError("architecture: FCNN layer count must be 3 or 4");
    if (kind == Kind::Fcnn && hidden_width < 1)
        throw ContractError("architecture: FCNN hidden width must be positive");
    if (kind == Kind::Cnn && (cnn_depth < 4 || cnn_depth > 9))
        throw ContractError("architecture: CNN depth must be in 4..9");
}

std::string ModelArchitecture::kind_name() const {
    switch (kind) {
        case Kind::LogisticRegression: return "logistic_regression";
        case Kind::Fcnn: return "fcnn";
        case Kind::Cnn: return "cnn";
    }
    return "?";
}

namespace {

int flat_input_size(const ModelArchitecture& arch) {
    return arch.input_shape[0] * arch.input_shape[1] * arch.input_shape[2];
}

// Channel plan: 16 at the first conv, doubling every second layer.
int cnn_channels(int layer_index) { return 16 << (layer_index / 2); }

Tensor glorot(std::vector<int> shape, int fan_in, int fan_out, Rng& rng, bool requires_grad) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-limit, limit);
    return Tensor(std::move(v), std::move(shape), requires_grad);
}

struct ParamSet {
    std::vector<Tensor> tensors;
    std::vector<std::string> names;
};

ParamSet init_parameters(const ModelArchitecture& arch, std::uint64_t seed, bool requires_grad) {
    Rng rng(seed);
    ParamSet p;
    const int d = flat_input_size(arch);
    const int m = arch.num_classes;
    switch (arch.kind) {
        case ModelArchitecture::Kind::LogisticRegression:
            // Convex objective: start at zero.
            p.tensors.push_back(Tensor::zeros({d, m}, requires_grad));
            p.names.push_back("w");
            p.tensors.push_back(Tensor::zeros({1, m}, requires_grad));
            p.names.push_back("b");
            break;
        case ModelArchitecture::Kind::Fcnn: {
            int in = d;
            for (int l = 0; l < arch.fcnn_layers; ++l) {
                const int out = l == arch.fcnn_layers - 1 ? m : arch.hidden_width;
                p.tensors.push_back(glorot({in, out}, in, out, rng, requires_grad));
                p.names.push_back("fc" + std::to_string(l + 1) + ".w");
                p.tensors.push_back(Tensor::zeros({1, out}, requires_grad));
                p.names.push_back("fc" + std::to_string(l + 1) + ".b");
                in = out;
            }
            break;
        }
        case ModelArchitecture::Kind::Cnn: {
            int cin = arch.input_shape[0];
            int h = arch.input_shape[1], w = arch.input_shape[2];
            for (int l = 0; l < arch.cnn_depth; ++l) {
                const int cout = cnn_channels(l);
                p.tensors.push_back(
                    glorot({cout, cin, 3, 3}, cin * 9, cout * 9, rng, requires_grad));
                p.names.push_back("conv" + std::to_string(l + 1) + ".w");
                cin = cout;
                if (l % 2 == 1 && h >= 2 && w >= 2) {
                    h /= 2;
                    w /= 2;
                }
            }
            const int feat = cin * h * w;
            p.tensors.push_back(glorot({feat, m}, feat, m, rng, requires_grad));
            p.names.push_back("dense.w");
            p.tensors.push_back(Tensor::zeros({1, m}, requires_grad));
            p.names.push_back("dense.b");
            break;
        }
    }
    return p;
}

Tensor forward_logits(const ModelArchitecture& arch, const std::vector<Tensor>& params,
                      const Tensor& x) {
    if (x.shape() != arch.input_shape)
        throw DimensionError("model input shape " + shape_string(x.shape()) +
                             " does not match architecture " + shape_string(arch.input_shape));
    switch (arch.kind) {
        case ModelArchitecture::Kind::LogisticRegression:
            return reshape(add(matmul(flatten(x), params[0]), params[1]), {arch.num_classes});
        case ModelArchitecture::Kind::Fcnn: {
            Tensor h = flatten(x);
            for (int l = 0; l < arch.fcnn_layers; ++l) {
                h = add(matmul(h, params[static_cast<std::size_t>(2 * l)]),
                        params[static_cast<std::size_t>(2 * l + 1)]);
                if (l != arch.fcnn_layers - 1) h = relu(h);
            }
            return reshape(h, {arch.num_classes});
        }
        case ModelArchitecture::Kind::Cnn: {
            Tensor h = x;
            for (int l = 0; l < arch.cnn_depth; ++l) {
                h = relu(conv2d(h, params[static_cast<std::size_t>(l)], 1));
                if (l % 2 == 1 && h.shape()[1] >= 2 && h.shape()[2] >= 2) h = maxpool2x2(h);
            }
            const std::size_t np = params.size();
            return reshape(add(matmul(flatten(h), params[np - 2]), params[np - 1]),
                           {arch.num_classes});
        }
    }
    throw ContractError("unknown architecture kind");
}

}  // namespace

TrainedModel::TrainedModel(ModelArchitecture arch, std::vector<Tensor> parameters,
                           std::vector<std::string> parameter_names, TrainingMeta meta)
    : arch_(std::move(arch)),
      params_(std::move(parameters)),
      names_(std::move(parameter_names)),
      meta_(std::move(meta)) {}

Tensor TrainedModel::logits(const Tensor& x) const { return forward_logits(arch_, params_, x); }

std::vector<double> TrainedModel::forward(const Tensor& x) const {
    return softmax(logits(x)).data();
}

TrainedModel train(const ModelArchitecture& arch, const LabeledDataset& data,
                   const TrainConfig& cfg) {
    arch.validate();
    if (data.images.empty()) throw ContractError("train: empty dataset");
    if (cfg.epochs < 1 || cfg.batch_size < 1) throw ContractError("train: bad config");
    for (int l : data.labels)
        if (l >= arch.num_classes)
            throw ContractError("train: label " + std::to_string(l) + " >= num_classes " +
                                std::to_string(arch.num_classes));

    ParamSet params = init_parameters(arch, derive_seed(cfg.seed, 0xA01), true);
    Rng shuffle_rng(derive_seed(cfg.seed, 0xA02));

    // Adam / momentum state.
    std::vector<std::vector<double>> m1(params.tensors.size()), m2(params.tensors.size());
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        m1[i].assign(static_cast<std::size_t>(params.tensors[i].size()), 0.0);
        m2[i].assign(static_cast<std::size_t>(params.tensors[i].size()), 0.0);
    }
    long step = 0;

    std::vector<std::size_t> order(data.images.size());
    std::iota(order.begin(), order.end(), 0);

    double first_epoch_loss = 0.0, final_epoch_loss = 0.0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const double inv_batch = 1.0 / static_cast<double>(end - start);
            for (auto& t : params.tensors) t.zero_grad();
            double batch_loss = 0.0;
            for (std::size_t bi = start; bi < end; ++bi) {
                const std::size_t idx = order[bi];
                auto loss = softmax_cross_entropy(
                    forward_logits(arch, params.tensors, data.images[idx]), data.labels[idx]);
                batch_loss += loss.item();
                backward(mul_scalar(loss, inv_batch));
            }
            if (!std::isfinite(batch_loss))
                throw DivergenceError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                      ", batch " + std::to_string(start / cfg.batch_size));
            epoch_loss += batch_loss;

            ++step;
            for (std::size_t i = 0; i < params.tensors.size(); ++i) {
                auto& value = params.tensors[i].data();
                const auto& grad = params.tensors[i].grad();
                if (cfg.optimizer == TrainConfig::Optimizer::Adam) {
                    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step));
                    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step));
                    for (std::size_t j = 0; j < value.size(); ++j) {
                        m1[i][j] = cfg.adam_beta1 * m1[i][j] + (1.0 - cfg.adam_beta1) * grad[j];
                        m2[i][j] =
                            cfg.adam_beta2 * m2[i][j] + (1.0 - cfg.adam_beta2) * grad[j] * grad[j];
                        value[j] -= cfg.learning_rate * (m1[i][j] / bc1) /
                                    (std::sqrt(m2[i][j] / bc2) + cfg.adam_epsilon);
                    }
                } else {
                    for (std::size_t j = 0; j < value.size(); ++j) {
                        m1[i][j] = cfg.sgd_momentum * m1[i][j] + grad[j];
                        value[j] -= cfg.learning_rate * m1[i][j];
                    }
                }
            }
        }
        epoch_loss /= static_cast<double>(order.size());
        if (epoch == 0) first_epoch_loss = epoch_loss;
        final_epoch_loss = epoch_loss;
    }

    // Freeze parameters for inference: attacks then differentiate through
    // the input only.
    std::vector<Tensor> frozen;
    frozen.reserve(params.tensors.size());
    for (const auto& t : params.tensors) frozen.emplace_back(t.data(), t.shape(), false);

    TrainingMeta meta;
    meta.epochs = cfg.epochs;
    meta.optimizer = cfg.optimizer == TrainConfig::Optimizer::Adam ? "adam" : "sgd";
    meta.seed = cfg.seed;
    meta.first_epoch_loss = first_epoch_loss;
    meta.final_epoch_loss = final_epoch_loss;
    return TrainedModel(arch, std::move(frozen), std::move(params.names), std::move(meta));
}

int predict_class(const TrainedModel& model, const Tensor& x) {
    return model.logits(x).argmax();
}

double accuracy(const TrainedModel& model, const LabeledDataset& data) {
    if (data.images.empty()) throw ContractError("accuracy: empty dataset");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < data.images.size(); ++i)
        if (predict_class(model, data.images[i]) == data.labels[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(data.images.size());
}

bool validate_zoo_model(const TrainedModel& model, const LabeledDataset& clean,
                        const LabeledDataset* triggered, double threshold) {
    if (accuracy(model, clean) < threshold) return false;
    if (triggered != nullptr && accuracy(model, *triggered) < threshold) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

void write_le_f64(std::ofstream& f, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    f.write(reinterpret_cast<const char*>(b), 8);
}

double read_le_f64(std::ifstream& f, const std::string& path) {
    unsigned char b[8];
    if (!f.read(reinterpret_cast<char*>(b), 8)) throw ParseError(path + ": truncated weight blob");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

json arch_to_json(const ModelArchitecture& a) {
    json j;
    j["kind"] = a.kind_name();
    j["input_shape"] = a.input_shape;
    j["num_classes"] = a.num_classes;
    if (a.kind == ModelArchitecture::Kind::Fcnn) {
        j["layers"] = a.fcnn_layers;
        j["hidden_width"] = a.hidden_width;
    }
    if (a.kind == ModelArchitecture::Kind::Cnn) j["depth"] = a.cnn_depth;
    return j;
}

ModelArchitecture arch_from_json(const json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    const auto shape = j.at("input_shape").get<std::vector<int>>();
    const int m = j.at("num_classes").get<int>();
    if (kind == "logistic_regression") return ModelArchitecture::logistic_regression(shape, m);
    if (kind == "fcnn")
        return ModelArchitecture::fcnn(j.at("layers").get<int>(), shape, m,
                                       j.at("hidden_width").get<int>());
    if (kind == "cnn") return ModelArchitecture::cnn(j.at("depth").get<int>(), shape, m);
    throw ParseError("unknown architecture kind '" + kind + "'");
}

}  // namespace

void save_model(const TrainedModel& model, const std::string& json_path,
                const std::string& weights_path) {
    json j;
    j["format_version"] = 1;
    j["architecture"] = arch_to_json(model.architecture());
    const auto& meta = model.meta();
    json jm;
    jm["epochs"] = meta.epochs;
    jm["optimizer"] = meta.optimizer;
    jm["seed"] = meta.seed;
    jm["first_epoch_loss"] = meta.first_epoch_loss;
    jm["final_epoch_loss"] = meta.final_epoch_loss;
    jm["final_clean_accuracy"] = meta.final_clean_accuracy;
    if (meta.final_trigger_accuracy) jm["final_trigger_accuracy"] = *meta.final_trigger_accuracy;
    j["training"] = jm;

    std::ofstream wf(weights_path, std::ios::binary);
    if (!wf) throw ParseError(weights_path + ": cannot open for writing");
    json manifest = json::array();
    std::size_t offset = 0;
    for (std::size_t i = 0; i < model.parameters().size(); ++i) {
        const auto& t = model.parameters()[i];
        json entry;
        entry["name"] = model.parameter_names()[i];
        entry["offset"] = offset;
        entry["shape"] = t.shape();
        manifest.push_back(entry);
        for (double v : t.data()) write_le_f64(wf, v);
        offset += t.data().size() * 8;
    }
    j["weights"] = manifest;

    std::ofstream jf(json_path);
    if (!jf) throw ParseError(json_path + ": cannot open for writing");
    jf << j.dump(2) << '\n';
}

TrainedModel load_model(const std::string& json_path, const std::string& weights_path) {
    std::ifstream jf(json_path);
    if (!jf) throw ParseError(json_path + ": cannot open");
    json j;
    try {
        jf >> j;
    } catch (const std::exception& e) {
        throw ParseError(json_path + ": " + e.what());
    }
    if (j.at("format_version").get<int>() != 1)
        throw ParseError(json_path + ": unsupported format version");

    ModelArchitecture arch = arch_from_json(j.at("architecture"));
    TrainingMeta meta;
    const auto& jm = j.at("training");
    meta.epochs = jm.at("epochs").get<int>();
    meta.optimizer = jm.at("optimizer").get<std::string>();
    meta.seed = jm.at("seed").get<std::uint64_t>();
    meta.first_epoch_loss = jm.at("first_epoch_loss").get<double>();
    meta.final_epoch_loss = jm.at("final_epoch_loss").get<double>();
    meta.final_clean_accuracy = jm.at("final_clean_accuracy").get<double>();
    if (jm.contains("final_trigger_accuracy"))
        meta.final_trigger_accuracy = jm.at("final_trigger_accuracy").get<double>();

    std::ifstream wf(weights_path, std::ios::binary);
    if (!wf) throw ParseError(weights_path + ": cannot open");
    std::vector<Tensor> tensors;
    std::vector<std::string> names;
    for (const auto& entry : j.at("weights")) {
        names.push_back(entry.at("name").get<std::string>());
        const auto shape = entry.at("shape").get<std::vector<int>>();
        std::size_t n = 1;
        for (int d : shape) n *= static_cast<std::size_t>(d);
        wf.seekg(static_cast<std::streamoff>(entry.at("offset").get<std::size_t>()));
        std::vector<double> vals(n);
        for (auto& v : vals) v = read_le_f64(wf, weights_path);
        tensors.emplace_back(std::move(vals), shape, false);
    }
    return TrainedModel(std::move(arch), std::move(tensors), std::move(names), std::move(meta));
}

}  // namespace top
