#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "trojanscope/dataset.hpp"
#include "trojanscope/diffnet.hpp"
#include "trojanscope/fingerprint.hpp"

namespace trojanscope {

struct DetectorConfig {
    std::vector<int> mlp_widths{3126, 2048, 1024, 512, 256};
    int embedding_dim = 128;
    int window_values = 2500;
    std::vector<int> image_shape{32, 32, 1};
    bool use_linf = true;
    bool use_l2 = true;
    bool use_gamma = true;
    int batches_used = 10;  // fingerprints per model, taken from the front of each list
    int epochs = 30;
    int batch_size = 16;
    double lr = 0.001;
    int patience = 5;                   // epochs without validation improvement before stopping
    double validation_fraction = 0.2;   // share of training models held out for early stopping
    int folds = 5;
    std::uint64_t seed = 1;

    int stream_feature_size() const;
    int head_inputs() const;
};

nlohmann::json to_json(const DetectorConfig& config);
DetectorConfig detector_config_from_json(const nlohmann::json& j);

struct GammaStats {
    double mean = 0;
    double std = 1;
};

struct StreamNet {
    NormKind norm = NormKind::linf;
    ModelGraph window;     // max-energy window MLP
    ModelGraph embedding;  // small CNN over the perturbation image
    GammaStats gamma;
};

struct DetectorModel {
    DetectorConfig config;
    std::vector<StreamNet> streams;  // L-inf first when both are enabled
    ModelGraph head;                 // concatenated stream features -> one logit
};

// Fresh He-normal detector under config.seed.
DetectorModel make_detector(const DetectorConfig& config);

// One labeled query model with its fingerprints.
struct ModelFingerprints {
    std::string id;
    int label = 0;  // 1 = Trojaned
    std::vector<Fingerprint> fingerprints;
};

// Raw logits for a list of fingerprints (all must be usable by the detector).
std::vector<double> detector_logits(const DetectorModel& detector, std::span<const Fingerprint* const> fingerprints);

// A fingerprint is usable when no enabled stream is flagged degenerate.
bool usable(const DetectorModel& detector, const Fingerprint& fingerprint);

struct TrojanPrediction {
    std::vector<double> batch_probabilities;  // NaN for skipped fingerprints
    double p_trojan = 0;
    int used = 0;
    bool partial = false;  // some fingerprints were degenerate and skipped

    bool trojaned() const { return p_trojan >= 0.5; }
};

// Sigmoid per fingerprint, averaged over the usable ones. Expects exactly
// config.batches_used fingerprints.
TrojanPrediction predict_trojan(const DetectorModel& detector, std::span<const Fingerprint> fingerprints);

struct TrainingRecord {
    int epochs_run = 0;
    int best_epoch = 0;
    double best_validation_loss = 0;
    std::vector<double> train_loss;
    std::vector<double> validation_loss;
    int train_samples = 0;
};

struct TrainedDetector {
    DetectorModel detector;
    TrainingRecord record;
};

// Fits a detector on every usable fingerprint of `models`, holding out a
// stratified share of the models for early stopping. Throws if only one
// class is present.
TrainedDetector train_detector(std::span<const ModelFingerprints> models, const DetectorConfig& config);

struct ModelScore {
    std::string id;
    int label = 0;
    double p_trojan = 0;
    bool correct = false;
};

struct EvaluationResult {
    double accuracy = 0;
    std::vector<ModelScore> scores;
};

EvaluationResult evaluate_detector(const DetectorModel& detector, std::span<const ModelFingerprints> models);

struct FoldResult {
    int fold = 0;
    double accuracy = 0;
    TrainingRecord record;
    std::vector<ModelScore> scores;
};

struct CrossValidationReport {
    std::vector<FoldResult> folds;
    double mean_accuracy = 0;
    double std_accuracy = 0;  // sample standard deviation across folds

    // Held-out p_trojan for every model, from the fold that did not train on it.
    std::optional<double> out_of_fold(const std::string& id) const;
};

// Model-level folds, stratified by label, seeded by config.seed.
std::vector<std::vector<int>> stratified_folds(std::span<const int> labels, int folds, std::uint64_t seed);

CrossValidationReport cross_validate(std::span<const ModelFingerprints> models, const DetectorConfig& config);

nlohmann::json to_json(const CrossValidationReport& report);

void save_detector(const std::filesystem::path& path, const DetectorModel& detector,
                   const nlohmann::json& extra = nlohmann::json::object());
DetectorModel load_detector(const std::filesystem::path& path);

// ---- target class ------------------------------------------------------------

struct AnomalyResult {
    std::vector<double> index;  // NaN where the input was +inf
    std::vector<bool> excluded;
    double median = 0;
    double mad = 0;
    bool degenerate = false;  // MAD == 0, all indices reported as 0
};

inline constexpr double kMadScale = 1.4826;

// MAD = 1.4826 * median |v - median(v)|, index = |v - median| / MAD, over the
// finite values. Throws if fewer than three values are finite.
AnomalyResult mad_anomaly_index(std::span<const double> values);

struct TargetRule {
    std::optional<int> target;
    bool ambiguous = false;  // several classes share the winning index
    std::vector<int> qualifying;
};

// Classes whose index exceeds `threshold` and whose sigma lies below the
// median qualify; the largest index wins, ties going to the smallest class.
TargetRule select_target(std::span<const double> sigma, const AnomalyResult& anomaly, double threshold = 2.0);

struct TargetClassConfig {
    FgsmConfig fgsm;
    double threshold = 2.0;
};

struct DetectionReport {
    std::string model_id;
    std::vector<double> batch_probabilities;
    double p_trojan = 0;
    bool p_trojan_override = false;
    std::vector<double> sigma;
    std::vector<double> anomaly_index;
    std::optional<int> predicted_target;
    bool ambiguous = false;
    std::vector<std::string> flags;
};

// Stage 2 alone: per-class targeted FGSM difficulty and the outlier rule.
DetectionReport target_class_stage(const ModelGraph& model, const LabeledDataset& clean_pool,
                                   const TargetClassConfig& config, DetectionReport report = {});

// Stage 1 from the detector (or a forced probability, e.g. ground truth),
// then stage 2 when the model is judged Trojaned.
DetectionReport predict_target_class(const ModelGraph& model, const DetectorModel& detector,
                                     std::span<const Fingerprint> fingerprints, const LabeledDataset& clean_pool,
                                     const TargetClassConfig& config, std::optional<double> p_override = {},
                                     const std::string& model_id = "");

nlohmann::json to_json(const DetectionReport& report);
DetectionReport detection_report_from_json(const nlohmann::json& j);

}  // namespace trojanscope
