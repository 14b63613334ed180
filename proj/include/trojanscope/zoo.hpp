#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "trojanscope/dataset.hpp"
#include "trojanscope/training.hpp"
#include "trojanscope/trigger.hpp"

namespace trojanscope {

enum class ModelKind { benign, any_to_any, any_to_one };

std::string to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);

// One row of the zoo composition table. Benign rows use trigger_type only to
// measure accuracy on triggered test data; proportion is ignored.
struct ZooCell {
    Architecture architecture = Architecture::modded_badnet;
    ModelKind kind = ModelKind::benign;
    TriggerType trigger_type = TriggerType::type_i;
    double proportion = 0.1;
    int count = 1;
    int epochs = 0;  // 0: use the zoo-wide training epochs
};

struct DataSource {
    // IDX files; when empty the synthetic digit generator is used.
    std::filesystem::path train_images, train_labels, test_images, test_labels;
    int train_count = 10000;
    int test_count = 2000;
    std::uint64_t seed = 1;
    double stray_rate = 0.0;
};

struct ZooConfig {
    std::filesystem::path root = "zoo";
    std::uint64_t master_seed = 1;
    DataSource data;
    std::vector<ZooCell> cells;
    TrainConfig training;  // seed replaced per model
    int workers = 1;
};

// Equal numbers of benign and Trojaned models for each architecture: per
// architecture, `trojan_per_arch` Trojaned models split evenly between the two
// attack modes and cycled over trigger types and proportions.
std::vector<ZooCell> balanced_cells(const std::vector<Architecture>& architectures, int trojan_per_arch,
                                    const std::vector<double>& proportions = {0.10, 0.15, 0.20});

struct ZooJob {
    std::string id;
    Architecture architecture;
    ModelKind kind;
    TriggerSpec trigger;
    PoisonPolicy policy;
    std::uint64_t seed;
    int epochs;
};

std::vector<ZooJob> plan_zoo(const ZooConfig& config, int height = 28, int width = 28, int num_classes = 10);

struct ZooRecord {
    std::string id;
    std::string path;  // relative to the zoo root
    Architecture architecture = Architecture::modded_badnet;
    bool is_trojaned = false;
    ModelKind kind = ModelKind::benign;
    TriggerSpec trigger;
    PoisonPolicy policy;
    std::uint64_t seed = 0;
    int epochs = 0;
    double clean_accuracy = 0;
    double train_accuracy = 0;
    double triggered_accuracy = 0;   // accuracy on triggered test data with true labels
    double attack_success_rate = 0;  // 0 for benign models
    std::vector<double> epoch_loss;

    std::optional<int> target_class() const;
};

struct ZooFailure {
    std::string id;
    std::string error;
};

struct ZooManifest {
    std::vector<ZooRecord> models;  // sorted by id
    std::vector<ZooFailure> failures;

    const ZooRecord& find(const std::string& id) const;
};

void to_json(nlohmann::json& j, const ZooRecord& r);
void from_json(const nlohmann::json& j, ZooRecord& r);
nlohmann::json manifest_to_json(const ZooManifest& m);
ZooManifest manifest_from_json(const nlohmann::json& j);

std::filesystem::path manifest_path(const std::filesystem::path& root);
ZooManifest load_manifest(const std::filesystem::path& root);
void save_manifest(const std::filesystem::path& root, const ZooManifest& manifest);

struct ZooData {
    LabeledDataset train;
    LabeledDataset test;
};

ZooData load_zoo_data(const DataSource& source);

struct ZooProgress {
    const ZooJob& job;
    bool skipped;         // already built by an earlier run
    const std::string* error;  // non-null when the job failed
    int done;
    int total;
};

// Trains every planned model not already present in the manifest under the
// zoo root. Jobs run on `config.workers` threads; a single writer updates the
// manifest after each job, so an interrupted run resumes where it stopped.
// Failed jobs are listed in the manifest and retried on the next run.
ZooManifest generate_zoo(const ZooConfig& config, const ZooData& data,
                         const std::function<void(const ZooProgress&)>& progress = {});

}  // namespace trojanscope
