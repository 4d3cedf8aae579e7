#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "top/nn.hpp"
#include "top/tensor.hpp"

namespace top {

// Untargeted evasion attack configuration: the attack domain plus the PGD
// schedule. epsilon == 0 is the degenerate domain {0}.
struct AttackConfig {
    enum class Family { LinfPgd, L2Pgd, SparseL1Pgd, FilterAttack };
    enum class FilterNorm { L2, Linf };

    Family family = Family::LinfPgd;
    double epsilon = 0.1;
    int steps = 10;
    int restarts = 50;
    double sparsity = 0.99;              // SparseL1Pgd
    FilterNorm filter_norm = FilterNorm::L2;
    int kernel_size = 3;                 // FilterAttack, odd
    std::optional<double> step_size;     // default 2.5 * epsilon / steps
    bool clamp_to_image = true;
    std::uint64_t seed = 0;

    double effective_step() const;
    void validate() const;
    std::string family_name() const;
    static Family family_from_name(const std::string& name);

    nlohmann::json to_json() const;
    static AttackConfig from_json(const nlohmann::json& j);
};

// Result of one attack: an additive image-shaped delta or a convolution
// kernel, plus the best loss it achieved on its source image.
struct Perturbation {
    enum class Mode { Additive, Filter };

    Mode mode = Mode::Additive;
    std::vector<double> delta;     // additive: same length as the image
    std::vector<double> kernel;    // filter: per-channel k*k kernels
    int kernel_size = 0;
    std::vector<int> image_shape;
    double achieved_loss = 0.0;
    int source_index = -1;
};

// Norm-ball projections. All are idempotent and never increase the norm.
void project_linf(std::span<double> delta, double epsilon);
void project_l2(std::span<double> delta, double epsilon);
// Euclidean projection onto the l1 ball (sort-based).
void project_l1(std::span<double> delta, double epsilon);

// Sparse l1 ascent direction: keep the top (1-q) fraction of coordinates by
// |grad| (at least one), take their signs, scale to l1 norm eta.
std::vector<double> sparse_l1_step(std::span<const double> grad, double sparsity, double eta);

// Best-of-restarts PGD maximization of the cross-entropy between f(x+delta)
// and the frozen original prediction argmax f(x). Every iterate is evaluated,
// so the result dominates the chain starts; restart 0 of the sparse family
// starts at zero. Chains that hit a non-finite loss are discarded with a
// stderr warning; AttackError if none survive.
Perturbation attack(const TrainedModel& model, const Tensor& x, const AttackConfig& cfg);

// PGD over a norm-bounded convolution kernel w; the adversarial image is
// clamp(x + w*x). Dispatched from attack() for Family::FilterAttack.
Perturbation filter_attack(const TrainedModel& model, const Tensor& x, const AttackConfig& cfg);

// Additive: clamp(x + delta). Filter: clamp(x + w*x). Pure.
Tensor apply_perturbation(const Perturbation& p, const Tensor& x);

}  // namespace top
