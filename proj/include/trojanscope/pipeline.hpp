#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "trojanscope/detector.hpp"
#include "trojanscope/fingerprint.hpp"
#include "trojanscope/zoo.hpp"

namespace trojanscope {

// A named detector variant for the ablation table.
struct AblationVariant {
    std::string name;
    bool use_linf = true;
    bool use_l2 = true;
    bool use_gamma = true;
    int batches_used = 10;
};

// One grid point of the generator sweep (L-inf bound and pass cap).
struct SweepPoint {
    double xi_linf = 1.0;
    int max_outer_linf = 10;
};

struct RunConfig {
    std::filesystem::path zoo_dir = "run/zoo";
    std::filesystem::path artifacts_dir = "run/artifacts";
    std::filesystem::path reports_dir = "run/reports";
    std::uint64_t master_seed = 1;
    ZooConfig zoo;  // root and master seed are taken from the fields above
    FingerprintConfig fingerprint;
    int clean_pool_size = 500;
    TargetClassConfig target;
    int fgsm_pool_size = 200;
    DetectorConfig detector;
    std::vector<AblationVariant> ablations;
    std::vector<SweepPoint> sweep;

    ZooConfig zoo_config() const;
};

// The documented default configuration as JSON.
nlohmann::json default_run_config_json();
nlohmann::json to_json(const RunConfig& config);
// Missing keys keep their defaults. A "zoo.balanced" block expands into cells.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// Hex digests over the parts of the configuration each artifact depends on.
std::string zoo_hash(const RunConfig& c);
std::string fingerprint_hash(const RunConfig& c);
std::string detector_hash(const RunConfig& c);
std::string target_hash(const RunConfig& c);
std::string config_hash(const RunConfig& c);

// Built-in ablation rows, looked up by name.
AblationVariant ablation_variant(const std::string& name);

struct Pools {
    LabeledDataset fingerprint;  // clean images for universal perturbations
    LabeledDataset fgsm;         // clean images for the per-class attacks
};

Pools clean_pools(const RunConfig& c, const ZooData& data);

std::filesystem::path fingerprint_dir(const RunConfig& c, const std::string& model_id);

// ---- commands ------------------------------------------------------------------

ZooManifest cmd_zoo(const RunConfig& c, std::ostream& out);

// Builds missing fingerprints for the manifest models whose id matches
// `selector` (ECMAScript regex, empty = all). Returns the number built.
int cmd_fingerprint(const RunConfig& c, const std::string& selector, std::ostream& out);

// Loads stored fingerprints; throws ConfigError naming every missing model.
std::vector<ModelFingerprints> load_zoo_fingerprints(const RunConfig& c, const ZooManifest& manifest,
                                                     const std::string& selector = "");

struct TrainOutput {
    CrossValidationReport cv;
    DetectorModel detector;
};

TrainOutput cmd_train(const RunConfig& c, std::ostream& out);

DetectionReport cmd_detect(const RunConfig& c, const std::filesystem::path& model_path, const std::string& model_id,
                           std::optional<double> p_override, std::ostream& out);

struct TargetSummary {
    int models = 0;
    int correct_ground_truth = 0;
    int correct_end_to_end = 0;
    int stage_two_ok = 0;         // sigma list usable for outlier detection
    int minimal_and_outlier = 0;  // true target has minimal sigma and index > threshold
    double accuracy_ground_truth = 0;
    double accuracy_end_to_end = 0;
    double outlier_pass_rate = 0;
    std::vector<DetectionReport> reports;
};

// Stage-2 analysis on the any-to-one models matching `selector`, scored with
// ground-truth labels and with out-of-fold detector probabilities.
TargetSummary cmd_target_class(const RunConfig& c, const std::string& selector, std::ostream& out);

nlohmann::json cmd_eval(const RunConfig& c, std::ostream& out);

}  // namespace trojanscope
