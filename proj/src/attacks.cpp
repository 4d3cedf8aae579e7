#include "top/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "top/errors.hpp"
#include "top/rng.hpp"

namespace top {

using nlohmann::json;

double AttackConfig::effective_step() const {
    return step_size ? *step_size : 2.5 * epsilon / static_cast<double>(steps);
}

void AttackConfig::validate() const {
    if (epsilon < 0.0) throw ContractError("attack: epsilon must be nonnegative");
    if (steps < 1 || restarts < 1) throw ContractError("attack: steps and restarts must be >= 1");
    if (sparsity < 0.0 || sparsity >= 1.0) throw ContractError("attack: sparsity must be in [0,1)");
    if (kernel_size < 1 || kernel_size % 2 == 0)
        throw ContractError("attack: kernel_size must be odd");
}

std::string AttackConfig::family_name() const {
    switch (family) {
        case Family::LinfPgd: return "linf";
        case Family::L2Pgd: return "l2";
        case Family::SparseL1Pgd: return "sparse_l1";
        case Family::FilterAttack:
            return filter_norm == FilterNorm::L2 ? "filter_l2" : "filter_linf";
    }
    return "?";
}

AttackConfig::Family AttackConfig::family_from_name(const std::string& name) {
    if (name == "linf") return Family::LinfPgd;
    if (name == "l2") return Family::L2Pgd;
    if (name == "sparse_l1") return Family::SparseL1Pgd;
    if (name == "filter_l2" || name == "filter_linf") return Family::FilterAttack;
    throw ParseError("unknown attack family '" + name + "'");
}

json AttackConfig::to_json() const {
    json j;
    j["family"] = family_name();
    j["epsilon"] = epsilon;
    j["steps"] = steps;
    j["restarts"] = restarts;
    if (family == Family::SparseL1Pgd) j["sparsity"] = sparsity;
    if (family == Family::FilterAttack) j["kernel_size"] = kernel_size;
    if (step_size) j["step_size"] = *step_size;
    j["clamp_to_image"] = clamp_to_image;
    j["seed"] = seed;
    return j;
}

AttackConfig AttackConfig::from_json(const json& j) {
    AttackConfig c;
    const std::string fam = j.at("family").get<std::string>();
    c.family = family_from_name(fam);
    if (fam == "filter_linf") c.filter_norm = FilterNorm::Linf;
    c.epsilon = j.at("epsilon").get<double>();
    c.steps = j.value("steps", 10);
    c.restarts = j.value("restarts", 50);
    c.sparsity = j.value("sparsity", 0.99);
    c.kernel_size = j.value("kernel_size", 3);
    if (j.contains("step_size")) c.step_size = j.at("step_size").get<double>();
    c.clamp_to_image = j.value("clamp_to_image", true);
    c.seed = j.value("seed", static_cast<std::uint64_t>(0));
    c.validate();
    return c;
}

void project_linf(std::span<double> delta, double epsilon) {
    for (double& v : delta) v = std::clamp(v, -epsilon, epsilon);
}

void project_l2(std::span<double> delta, double epsilon) {
    double norm2 = 0.0;
    for (double v : delta) norm2 += v * v;
    const double norm = std::sqrt(norm2);
    if (norm <= epsilon || norm == 0.0) return;
    const double scale = epsilon / norm;
    for (double& v : delta) v *= scale;
}

void project_l1(std::span<double> delta, double epsilon) {
    double l1 = 0.0;
    for (double v : delta) l1 += std::abs(v);
    if (l1 <= epsilon) return;
    if (epsilon <= 0.0) {
        std::fill(delta.begin(), delta.end(), 0.0);
        return;
    }
    // Duchi et al. sort-based projection: soft-threshold at theta.
    std::vector<double> mags(delta.size());
    for (std::size_t i = 0; i < delta.size(); ++i) mags[i] = std::abs(delta[i]);
    std::sort(mags.begin(), mags.end(), std::greater<>());
    double cumsum = 0.0, theta = 0.0;
    for (std::size_t j = 0; j < mags.size(); ++j) {
        cumsum += mags[j];
        const double t = (cumsum - epsilon) / static_cast<double>(j + 1);
        if (mags[j] - t > 0.0)
            theta = t;
        else
            break;
    }
    for (double& v : delta) {
        const double m = std::abs(v) - theta;
        v = m > 0.0 ? (v > 0.0 ? m : -m) : 0.0;
    }
}

std::vector<double> sparse_l1_step(std::span<const double> grad, double sparsity, double eta) {
    const std::size_t d = grad.size();
    std::vector<double> step(d, 0.0);
    if (d == 0 || eta == 0.0) return step;
    const std::size_t k = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil((1.0 - sparsity) * static_cast<double>(d))));

    std::vector<std::size_t> idx(d);
    std::iota(idx.begin(), idx.end(), 0);
    // Top-|grad| coordinates; ties resolve toward the lower index.
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(grad[a]) > std::abs(grad[b]);
    });

    std::vector<std::size_t> survivors;
    for (std::size_t r = 0; r < k && r < d; ++r)
        if (std::abs(grad[idx[r]]) > 0.0) survivors.push_back(idx[r]);
    if (survivors.empty()) return step;

    const double mag = eta / static_cast<double>(survivors.size());
    for (std::size_t i : survivors) step[i] = grad[i] > 0.0 ? mag : -mag;
    return step;
}

namespace {

void project_family(std::span<double> delta, const AttackConfig& cfg) {
    switch (cfg.family) {
        case AttackConfig::Family::LinfPgd: project_linf(delta, cfg.epsilon); break;
        case AttackConfig::Family::L2Pgd: project_l2(delta, cfg.epsilon); break;
        case AttackConfig::Family::SparseL1Pgd: project_l1(delta, cfg.epsilon); break;
        case AttackConfig::Family::FilterAttack:
            if (cfg.filter_norm == AttackConfig::FilterNorm::L2)
                project_l2(delta, cfg.epsilon);
            else
                project_linf(delta, cfg.epsilon);
            break;
    }
}

// Keep x + delta inside the valid pixel box.
void project_box(std::span<double> delta, const std::vector<double>& x) {
    for (std::size_t i = 0; i < delta.size(); ++i)
        delta[i] = std::clamp(x[i] + delta[i], 0.0, 1.0) - x[i];
}

std::vector<double> ball_sample(std::size_t d, const AttackConfig& cfg, bool linf_ball, Rng& rng) {
    std::vector<double> v(d, 0.0);
    if (cfg.epsilon == 0.0) return v;
    if (linf_ball) {
        for (auto& x : v) x = rng.uniform(-cfg.epsilon, cfg.epsilon);
    } else {
        double norm2 = 0.0;
        for (auto& x : v) {
            x = rng.normal();
            norm2 += x * x;
        }
        const double norm = std::sqrt(norm2);
        if (norm > 0.0) {
            const double radius =
                cfg.epsilon * std::pow(rng.uniform(), 1.0 / static_cast<double>(d));
            for (auto& x : v) x *= radius / norm;
        }
    }
    return v;
}

std::vector<double> random_start(std::size_t d, const AttackConfig& cfg, int restart, Rng& rng) {
    switch (cfg.family) {
        case AttackConfig::Family::LinfPgd: return ball_sample(d, cfg, true, rng);
        case AttackConfig::Family::L2Pgd: return ball_sample(d, cfg, false, rng);
        case AttackConfig::Family::SparseL1Pgd: {
            // Restart 0 starts at zero; the rest at a random sparse point of
            // l1 norm epsilon/2.
            std::vector<double> v(d, 0.0);
            if (restart == 0 || cfg.epsilon == 0.0) return v;
            const std::size_t k = std::max<std::size_t>(
                1, static_cast<std::size_t>(
                       std::ceil((1.0 - cfg.sparsity) * static_cast<double>(d))));
            const double mag = 0.5 * cfg.epsilon / static_cast<double>(k);
            for (std::size_t pick = 0; pick < k; ++pick) {
                const auto i = static_cast<std::size_t>(
                    rng.uniform_int(0, static_cast<int>(d) - 1));
                v[i] = rng.uniform() < 0.5 ? mag : -mag;
            }
            project_l1(v, cfg.epsilon);
            return v;
        }
        case AttackConfig::Family::FilterAttack: {
            std::vector<double> v(d, 0.0);
            if (restart == 0) return v;
            return ball_sample(d, cfg, cfg.filter_norm == AttackConfig::FilterNorm::Linf, rng);
        }
    }
    return std::vector<double>(d, 0.0);
}

void ascend(std::span<double> delta, std::span<const double> grad, const AttackConfig& cfg) {
    const double eta = cfg.effective_step();
    switch (cfg.family) {
        case AttackConfig::Family::LinfPgd:
            for (std::size_t i = 0; i < delta.size(); ++i)
                delta[i] += eta * (grad[i] > 0.0 ? 1.0 : grad[i] < 0.0 ? -1.0 : 0.0);
            break;
        case AttackConfig::Family::L2Pgd: {
            double norm2 = 0.0;
            for (double g : grad) norm2 += g * g;
            const double norm = std::sqrt(norm2);
            if (norm == 0.0) break;
            for (std::size_t i = 0; i < delta.size(); ++i) delta[i] += eta * grad[i] / norm;
            break;
        }
        case AttackConfig::Family::SparseL1Pgd: {
            const auto step = sparse_l1_step(grad, cfg.sparsity, eta);
            for (std::size_t i = 0; i < delta.size(); ++i) delta[i] += step[i];
            break;
        }
        case AttackConfig::Family::FilterAttack:
            if (cfg.filter_norm == AttackConfig::FilterNorm::Linf) {
                for (std::size_t i = 0; i < delta.size(); ++i)
                    delta[i] += eta * (grad[i] > 0.0 ? 1.0 : grad[i] < 0.0 ? -1.0 : 0.0);
            } else {
                double norm2 = 0.0;
                for (double g : grad) norm2 += g * g;
                const double norm = std::sqrt(norm2);
                if (norm == 0.0) break;
                for (std::size_t i = 0; i < delta.size(); ++i) delta[i] += eta * grad[i] / norm;
            }
            break;
    }
}

struct ChainResult {
    bool valid = false;
    double best_loss = 0.0;
    std::vector<double> best_point;
};

}  // namespace

Perturbation attack(const TrainedModel& model, const Tensor& x, const AttackConfig& cfg) {
    cfg.validate();
    if (cfg.family == AttackConfig::Family::FilterAttack) return filter_attack(model, x, cfg);

    const int base_class = predict_class(model, x);
    const std::size_t d = static_cast<std::size_t>(x.size());

    Perturbation best;
    best.mode = Perturbation::Mode::Additive;
    best.image_shape = x.shape();
    bool any_valid = false;

    for (int restart = 0; restart < cfg.restarts; ++restart) {
        Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(restart)));
        std::vector<double> delta = random_start(d, cfg, restart, rng);
        project_family(delta, cfg);
        if (cfg.clamp_to_image) project_box(delta, x.data());

        ChainResult chain;
        for (int step = 0; step <= cfg.steps; ++step) {
            const bool last = step == cfg.steps;
            Tensor dt(delta, x.shape(), !last);
            auto loss_t = softmax_cross_entropy(model.logits(add(x, dt)), base_class);
            const double loss = loss_t.item();
            if (!std::isfinite(loss)) {
                chain.valid = false;
                break;
            }
            if (!chain.valid || loss > chain.best_loss) {
                chain.valid = true;
                chain.best_loss = loss;
                chain.best_point = delta;
            }
            if (last) break;
            backward(loss_t);
            ascend(delta, dt.grad(), cfg);
            project_family(delta, cfg);
            if (cfg.clamp_to_image) project_box(delta, x.data());
        }

        if (!chain.valid) {
            std::cerr << "warning: attack restart " << restart
                      << " discarded (non-finite loss)\n";
            continue;
        }
        if (!any_valid || chain.best_loss > best.achieved_loss) {
            any_valid = true;
            best.achieved_loss = chain.best_loss;
            best.delta = std::move(chain.best_point);
        }
    }
    if (!any_valid) throw AttackError("attack: every restart was discarded");
    return best;
}

Perturbation filter_attack(const TrainedModel& model, const Tensor& x, const AttackConfig& cfg) {
    cfg.validate();
    if (x.shape().size() != 3)
        throw DimensionError("filter_attack: image must be [C,H,W], got " +
                             shape_string(x.shape()));
    const int channels = x.shape()[0];
    const int k = cfg.kernel_size;
    const int pad = (k - 1) / 2;
    const std::vector<int> kshape{channels, k, k};
    const std::size_t d = static_cast<std::size_t>(channels) * k * k;

    const int base_class = predict_class(model, x);

    Perturbation best;
    best.mode = Perturbation::Mode::Filter;
    best.kernel_size = k;
    best.image_shape = x.shape();
    bool any_valid = false;

    for (int restart = 0; restart < cfg.restarts; ++restart) {
        Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(restart)));
        std::vector<double> w = random_start(d, cfg, restart, rng);
        project_family(w, cfg);

        ChainResult chain;
        for (int step = 0; step <= cfg.steps; ++step) {
            const bool last = step == cfg.steps;
            Tensor wt(w, kshape, !last);
            auto adv = clamp(add(x, depthwise_conv2d(x, wt, pad)), 0.0, 1.0);
            auto loss_t = softmax_cross_entropy(model.logits(adv), base_class);
            const double loss = loss_t.item();
            if (!std::isfinite(loss)) {
                chain.valid = false;
                break;
            }
            if (!chain.valid || loss > chain.best_loss) {
                chain.valid = true;
                chain.best_loss = loss;
                chain.best_point = w;
            }
            if (last) break;
            backward(loss_t);
            ascend(w, wt.grad(), cfg);
            project_family(w, cfg);
        }

        if (!chain.valid) {
            std::cerr << "warning: filter attack restart " << restart
                      << " discarded (non-finite loss)\n";
            continue;
        }
        if (!any_valid || chain.best_loss > best.achieved_loss) {
            any_valid = true;
            best.achieved_loss = chain.best_loss;
            best.kernel = std::move(chain.best_point);
        }
    }
    if (!any_valid) throw AttackError("filter_attack: every restart was discarded");
    return best;
}

Tensor apply_perturbation(const Perturbation& p, const Tensor& x) {
    if (p.mode == Perturbation::Mode::Additive) {
        if (p.delta.size() != x.data().size())
            throw DimensionError("apply_perturbation: delta length " +
                                 std::to_string(p.delta.size()) + " vs image " +
                                 shape_string(x.shape()));
        std::vector<double> out(x.data().size());
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = std::clamp(x.data()[i] + p.delta[i], 0.0, 1.0);
        return Tensor(std::move(out), x.shape());
    }
    const int channels = x.shape()[0];
    Tensor w(p.kernel, {channels, p.kernel_size, p.kernel_size});
    auto conv = depthwise_conv2d(x, w, (p.kernel_size - 1) / 2);
    std::vector<double> out(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = std::clamp(x.data()[i] + conv.data()[i], 0.0, 1.0);
    return Tensor(std::move(out), x.shape());
}

}  // namespace top
