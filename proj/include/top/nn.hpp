#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "top/data.hpp"
#include "top/tensor.hpp"

namespace top {

struct ModelArchitecture {
    enum class Kind { LogisticRegression, Fcnn, Cnn };

    Kind kind = Kind::LogisticRegression;
    std::vector<int> input_shape;  // [C, H, W]
    int num_classes = 0;
    int fcnn_layers = 3;    // linear layers, 3 or 4
    int hidden_width = 256;
    int cnn_depth = 4;      // conv layers, 4..9

    static ModelArchitecture logistic_regression(std::vector<int> input_shape, int num_classes);
    static ModelArchitecture fcnn(int layers, std::vector<int> input_shape, int num_classes,
                                  int hidden_width = 256);
    static ModelArchitecture cnn(int depth, std::vector<int> input_shape, int num_classes);

    void validate() const;
    std::string kind_name() const;
};

struct TrainConfig {
    enum class Optimizer { Adam, Sgd };

    int epochs = 30;
    Optimizer optimizer = Optimizer::Adam;
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    double sgd_momentum = 0.0;
    int batch_size = 64;
    std::uint64_t seed = 0;
};

struct TrainingMeta {
    int epochs = 0;
    std::string optimizer;
    std::uint64_t seed = 0;
    double first_epoch_loss = 0.0;
    double final_epoch_loss = 0.0;
    double final_clean_accuracy = -1.0;                // set by the zoo after validation
    std::optional<double> final_trigger_accuracy;      // poisoned models only
};

// Immutable after training; parameters are frozen (no grad), so inference
// and attacks build gradient tape only through the input.
class TrainedModel {
public:
    TrainedModel() = default;
    TrainedModel(ModelArchitecture arch, std::vector<Tensor> parameters,
                 std::vector<std::string> parameter_names, TrainingMeta meta);

    const ModelArchitecture& architecture() const { return arch_; }
    const std::vector<Tensor>& parameters() const { return params_; }
    const std::vector<std::string>& parameter_names() const { return names_; }
    const TrainingMeta& meta() const { return meta_; }
    TrainingMeta& meta() { return meta_; }

    // Raw class scores; differentiable w.r.t. x when x requires grad.
    Tensor logits(const Tensor& x) const;
    // Probability simplex over classes.
    std::vector<double> forward(const Tensor& x) const;

private:
    ModelArchitecture arch_;
    std::vector<Tensor> params_;
    std::vector<std::string> names_;
    TrainingMeta meta_;
};

// Mini-batch first-order training of the mean cross-entropy objective.
// Deterministic under (arch, data, cfg.seed). Throws DivergenceError naming
// the epoch/batch if the loss goes non-finite.
TrainedModel train(const ModelArchitecture& arch, const LabeledDataset& data,
                   const TrainConfig& cfg);

// Argmax of forward probabilities; ties break toward the lowest class index.
int predict_class(const TrainedModel& model, const Tensor& x);

// Exact-match fraction. Throws ContractError on empty data.
double accuracy(const TrainedModel& model, const LabeledDataset& data);

// Zoo admission gate: clean accuracy must meet the threshold, and for
// poisoned models so must the trigger accuracy measured on `triggered`
// (triggered source-class images relabeled to the target class).
bool validate_zoo_model(const TrainedModel& model, const LabeledDataset& clean,
                        const LabeledDataset* triggered, double threshold = 0.6);

// Versioned JSON header plus little-endian raw float64 weight blob with a
// name -> (offset, shape) manifest.
void save_model(const TrainedModel& model, const std::string& json_path,
                const std::string& weights_path);
TrainedModel load_model(const std::string& json_path, const std::string& weights_path);

}  // namespace top
