#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "trojanscope/dataset.hpp"
#include "trojanscope/diffnet.hpp"

namespace trojanscope {

enum class NormKind { linf, l2 };

std::string to_string(NormKind kind);
NormKind parse_norm_kind(const std::string& name);

inline constexpr double infinite_difficulty = std::numeric_limits<double>::infinity();

// ---- DeepFool -----------------------------------------------------------------

struct DeepFoolConfig {
    double overshoot = 0.02;  // the accumulated step is scaled by 1 + overshoot
    int max_iterations = 50;
};

struct DeepFoolResult {
    Tensor v;                 // same shape as the image
    bool converged = false;   // label changed within the iteration cap
    bool degenerate = false;  // every gradient difference was zero
    int iterations = 0;
    int original_label = 0;
    int final_label = 0;
};

// Multi-class linearized search for the smallest L2 step that changes the
// predicted label of one image (H x W x C or 1 x H x W x C). Iterates are
// clamped to [0,1] before each evaluation.
DeepFoolResult deepfool(const ModelGraph& model, const Tensor& image, const DeepFoolConfig& config = {});

// ---- universal perturbations --------------------------------------------------

Tensor project(const Tensor& delta, NormKind norm, double xi);
double norm_of(const Tensor& delta, NormKind norm);
double perturbation_energy(const Tensor& delta);  // L1 norm

// Fraction of images whose label changes once delta is added (inputs clamped
// to [0,1]). `images` is N x H x W x C, delta H x W x C.
double fooling_rate(const ModelGraph& model, const Tensor& images, const Tensor& delta);

// E / S with S in [0,1]; +inf when S == 0.
double attack_difficulty(double energy, double rate);

struct UniversalConfig {
    NormKind norm = NormKind::linf;
    double xi = 1.0;  // 1.0 for L-inf, 10.0 for L2 (pixel scale)
    double delta = 0.2;
    int max_outer = 10;
    DeepFoolConfig deepfool;
    std::uint64_t seed = 1;
};

struct OuterIteration {
    double eta = 0;
    bool accepted = false;
    int updates = 0;  // DeepFool steps added during the pass
};

struct PerturbationArtifact {
    Tensor delta;  // unclamped
    NormKind norm = NormKind::linf;
    double xi = 0;
    double eta = 0;
    int outer_iterations = 0;
    double energy = 0;
    double gamma = infinite_difficulty;
    bool degenerate = false;    // no DeepFool step ever found a gradient direction
    bool zero_fooling = false;  // eta == 0 at the end; gamma is +inf
    std::vector<OuterIteration> history;
};

// Passes over the samples in a seeded order. Each sample not yet fooled by
// the current delta contributes a DeepFool step computed at x + delta, after
// which delta is projected back onto the norm ball. Stops once the fooling
// rate reaches 1 - delta or after max_outer passes. A pass is accepted when
// its fooling rate is at least the best so far; the best accepted delta is
// returned.
PerturbationArtifact universal_perturbation(const ModelGraph& model, const Tensor& samples,
                                            const UniversalConfig& config);

void save_artifact(const std::filesystem::path& stem, const PerturbationArtifact& artifact);
PerturbationArtifact load_artifact(const std::filesystem::path& stem);
nlohmann::json artifact_metadata(const PerturbationArtifact& artifact);

// ---- targeted FGSM -----------------------------------------------------------

struct FgsmConfig {
    double epsilon = 0.05;
    int max_steps = 20;
};

struct TargetedAttackResult {
    int target_class = 0;
    int attacked = 0;  // images not originally labeled target_class
    double mean_energy = 0;
    double success_rate = 0;
    double sigma = infinite_difficulty;
};

// One unclamped step -epsilon * sign(grad of CE toward `target`) for each image
// of the batch.
Tensor fgsm_step(const ModelGraph& model, const Tensor& batch, int target, double epsilon);

// Iterated targeted FGSM with per-image early stop once argmax == target.
TargetedAttackResult fgsm_targeted(const ModelGraph& model, const LabeledDataset& samples, int target,
                                   const FgsmConfig& config = {});

}  // namespace trojanscope
