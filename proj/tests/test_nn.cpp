#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "support.hpp"
#include "top/errors.hpp"
#include "top/nn.hpp"

using namespace top;

namespace {

// Two clipped Gaussian blobs in 2-D, stored as [1,1,2] images.
LabeledDataset gaussian_blobs(int per_class, std::uint64_t seed) {
    Rng rng(seed);
    LabeledDataset ds;
    ds.num_classes = 2;
    for (int c = 0; c < 2; ++c) {
        const double cx = c == 0 ? 0.3 : 0.7;
        for (int i = 0; i < per_class; ++i) {
            std::vector<double> p{std::clamp(rng.normal(cx, 0.08), 0.0, 1.0),
                                  std::clamp(rng.normal(cx, 0.08), 0.0, 1.0)};
            ds.images.emplace_back(std::move(p), std::vector<int>{1, 1, 2});
            ds.labels.push_back(c);
        }
    }
    return ds;
}

// Perceptron oracle: converges within the epoch budget iff the data is
// linearly separable.
bool perceptron_separable(const LabeledDataset& ds, int max_epochs = 2000) {
    std::vector<double> w(static_cast<std::size_t>(ds.pixels_per_image()) + 1, 0.0);
    for (int epoch = 0; epoch < max_epochs; ++epoch) {
        bool mistakes = false;
        for (std::size_t i = 0; i < ds.size(); ++i) {
            const auto& x = ds.images[i].data();
            double s = w.back();
            for (std::size_t j = 0; j < x.size(); ++j) s += w[j] * x[j];
            const double y = ds.labels[i] == 1 ? 1.0 : -1.0;
            if (y * s <= 0.0) {
                for (std::size_t j = 0; j < x.size(); ++j) w[j] += y * x[j];
                w.back() += y;
                mistakes = true;
            }
        }
        if (!mistakes) return true;
    }
    return false;
}

TrainConfig quick_config(std::uint64_t seed, int epochs = 30) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.seed = seed;
    return cfg;
}

// Always predicts the argmax of a fixed score row; handy for accuracy and
// validation-gate tests.
TrainedModel constant_model(int num_classes, int fixed_class) {
    auto arch = ModelArchitecture::logistic_regression({1, 1, 2}, num_classes);
    std::vector<double> w(static_cast<std::size_t>(2 * num_classes), 0.0);
    std::vector<double> b(static_cast<std::size_t>(num_classes), 0.0);
    b[static_cast<std::size_t>(fixed_class)] = 1.0;
    return TrainedModel(arch,
                        {Tensor(w, {2, num_classes}), Tensor(b, {1, num_classes})},
                        {"w", "b"}, TrainingMeta{});
}

LabeledDataset two_pixel_dataset(const std::vector<int>& labels, int num_classes) {
    LabeledDataset ds;
    ds.num_classes = num_classes;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        ds.images.emplace_back(std::vector<double>{0.5, 0.5}, std::vector<int>{1, 1, 2});
        ds.labels.push_back(labels[i]);
    }
    return ds;
}

}  // namespace

TEST_SUITE_BEGIN("nn");

TEST_CASE("training separates two gaussian blobs") {
    auto ds = gaussian_blobs(100, 21);
    REQUIRE(perceptron_separable(ds));
    TrainConfig cfg = quick_config(1);  // 30 epochs
    cfg.batch_size = 8;                 // a 200-point toy needs more optimizer steps
    cfg.learning_rate = 0.01;
    auto model = train(ModelArchitecture::logistic_regression({1, 1, 2}, 2), ds, cfg);
    CHECK(accuracy(model, ds) >= 0.99);
    CHECK(model.meta().final_epoch_loss <= model.meta().first_epoch_loss);
}

TEST_CASE("training memorizes a single sample") {
    LabeledDataset ds;
    ds.num_classes = 3;
    ds.images.emplace_back(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 1, 2});
    ds.labels.push_back(2);
    TrainConfig cfg = quick_config(2, 300);
    cfg.learning_rate = 0.05;
    auto model = train(ModelArchitecture::fcnn(3, {1, 1, 2}, 3, 16), ds, cfg);
    auto probs = model.forward(ds.images[0]);
    CHECK(probs[2] >= 0.99);
}

TEST_CASE("training is reproducible under the seed") {
    auto ds = gaussian_blobs(40, 33);
    auto arch = ModelArchitecture::fcnn(3, {1, 1, 2}, 2, 8);
    auto a = train(arch, ds, quick_config(5, 5));
    auto b = train(arch, ds, quick_config(5, 5));
    REQUIRE(a.parameters().size() == b.parameters().size());
    for (std::size_t i = 0; i < a.parameters().size(); ++i)
        CHECK(a.parameters()[i].data() == b.parameters()[i].data());
}

TEST_CASE("forward returns a simplex point for every model kind") {
    Rng rng(8);
    auto ds = synthetic_dataset(3, 2, 8, 8, 44);
    for (auto arch : {ModelArchitecture::logistic_regression({1, 8, 8}, 3),
                      ModelArchitecture::fcnn(4, {1, 8, 8}, 3, 16),
                      ModelArchitecture::cnn(4, {1, 8, 8}, 3)}) {
        auto model = train(arch, ds, quick_config(6, 1));
        for (const auto& img : ds.images) {
            auto p = model.forward(img);
            double sum = 0.0;
            for (double v : p) {
                CHECK(v >= 0.0);
                sum += v;
            }
            CHECK(std::abs(sum - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("predict_class ties break toward the lowest index") {
    auto model = constant_model(4, 0);  // all-zero weights: uniform logits
    auto zero_bias = TrainedModel(model.architecture(),
                                  {Tensor::zeros({2, 4}), Tensor::zeros({1, 4})}, {"w", "b"},
                                  TrainingMeta{});
    Tensor x({0.2, 0.8}, {1, 1, 2});
    CHECK(predict_class(zero_bias, x) == 0);
    CHECK_THROWS_AS(predict_class(zero_bias, Tensor({0.1}, {1, 1, 1})), DimensionError);
}

TEST_CASE("predict_class agrees with forward argmax") {
    auto ds = gaussian_blobs(30, 51);
    auto model = train(ModelArchitecture::fcnn(3, {1, 1, 2}, 2, 8), ds, quick_config(9, 3));
    for (const auto& img : ds.images) {
        const auto probs = model.forward(img);
        int best = 0;
        for (std::size_t k = 1; k < probs.size(); ++k)
            if (probs[k] > probs[best]) best = static_cast<int>(k);
        CHECK(predict_class(model, img) == best);
    }
}

TEST_CASE("accuracy equals the brute-force count") {
    auto model = constant_model(5, 3);
    // 7 of 10 samples labeled 3.
    auto ds = two_pixel_dataset({3, 3, 3, 0, 3, 1, 3, 3, 4, 3}, 5);
    CHECK(accuracy(model, ds) == doctest::Approx(0.7));

    auto all_right = two_pixel_dataset({3, 3, 3}, 5);
    CHECK(accuracy(model, all_right) == doctest::Approx(1.0));
    auto all_wrong = two_pixel_dataset({0, 1, 2, 4}, 5);
    CHECK(accuracy(model, all_wrong) == doctest::Approx(0.0));

    LabeledDataset empty;
    empty.num_classes = 5;
    CHECK_THROWS_AS(accuracy(model, empty), ContractError);
}

TEST_CASE("validate_zoo_model applies the 0.6 threshold to both accuracies") {
    auto model = constant_model(5, 3);

    // Clean accuracy 0.92, no trigger -> pass.
    std::vector<int> labels(100, 3);
    for (int i = 0; i < 8; ++i) labels[static_cast<std::size_t>(i)] = 0;
    CHECK(validate_zoo_model(model, two_pixel_dataset(labels, 5), nullptr));

    // Clean accuracy 0.59 -> fail.
    std::vector<int> low(100, 3);
    for (int i = 0; i < 41; ++i) low[static_cast<std::size_t>(i)] = 0;
    CHECK_FALSE(validate_zoo_model(model, two_pixel_dataset(low, 5), nullptr));

    // Poisoned: clean 0.90, trigger 0.73 -> pass.
    std::vector<int> clean_labels(100, 3);
    for (int i = 0; i < 10; ++i) clean_labels[static_cast<std::size_t>(i)] = 1;
    std::vector<int> trig_labels(100, 3);
    for (int i = 0; i < 27; ++i) trig_labels[static_cast<std::size_t>(i)] = 1;
    auto triggered = two_pixel_dataset(trig_labels, 5);
    CHECK(validate_zoo_model(model, two_pixel_dataset(clean_labels, 5), &triggered));

    // Poisoned with trigger accuracy below threshold -> fail.
    std::vector<int> weak(100, 0);
    for (int i = 0; i < 50; ++i) weak[static_cast<std::size_t>(i)] = 3;
    auto weak_trig = two_pixel_dataset(weak, 5);
    CHECK_FALSE(validate_zoo_model(model, two_pixel_dataset(clean_labels, 5), &weak_trig));
}

TEST_CASE("logistic regression reaches 0.95 on the synthetic dataset") {
    auto ds = synthetic_dataset(2, 100, 12, 12, 77);
    auto model =
        train(ModelArchitecture::logistic_regression({1, 12, 12}, 2), ds, quick_config(3, 30));
    CHECK(accuracy(model, ds) >= 0.95);
}

TEST_CASE("non-finite loss reports epoch and batch") {
    auto ds = gaussian_blobs(20, 60);
    ds.images[0] = Tensor({std::nan(""), 0.5}, {1, 1, 2});  // corrupt sample
    TrainConfig cfg = quick_config(4, 2);
    cfg.batch_size = 4;
    CHECK_THROWS_WITH_AS(
        train(ModelArchitecture::logistic_regression({1, 1, 2}, 2), ds, cfg),
        doctest::Contains("epoch 0"), DivergenceError);
}

TEST_CASE("model persistence round trip") {
    namespace fs = std::filesystem;
    auto dir = fs::temp_directory_path() / "top_nn_persist";
    fs::create_directories(dir);

    auto ds = synthetic_dataset(3, 10, 8, 8, 13);
    auto model = train(ModelArchitecture::cnn(4, {1, 8, 8}, 3), ds, quick_config(15, 1));
    model.meta().final_clean_accuracy = accuracy(model, ds);
    model.meta().final_trigger_accuracy = 0.5;

    const auto jpath = (dir / "model.json").string();
    const auto wpath = (dir / "weights.bin").string();
    save_model(model, jpath, wpath);
    auto back = load_model(jpath, wpath);

    CHECK(back.architecture().kind_name() == "cnn");
    CHECK(back.meta().seed == model.meta().seed);
    CHECK(back.meta().final_trigger_accuracy == model.meta().final_trigger_accuracy);
    REQUIRE(back.parameters().size() == model.parameters().size());
    for (std::size_t i = 0; i < back.parameters().size(); ++i) {
        CHECK(back.parameter_names()[i] == model.parameter_names()[i]);
        CHECK(back.parameters()[i].data() == model.parameters()[i].data());
    }
    for (const auto& img : ds.images)
        CHECK(predict_class(back, img) == predict_class(model, img));

    fs::remove_all(dir);
}

TEST_CASE("architecture constraints are enforced") {
    CHECK_THROWS_AS(ModelArchitecture::fcnn(5, {1, 8, 8}, 3), ContractError);
    CHECK_THROWS_AS(ModelArchitecture::fcnn(2, {1, 8, 8}, 3), ContractError);
    CHECK_THROWS_AS(ModelArchitecture::cnn(3, {1, 8, 8}, 3), ContractError);
    CHECK_THROWS_AS(ModelArchitecture::cnn(10, {1, 8, 8}, 3), ContractError);
    CHECK_THROWS_AS(ModelArchitecture::logistic_regression({8, 8}, 3), ContractError);
}

TEST_SUITE_END();
