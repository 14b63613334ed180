#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "trojanscope/dataset.hpp"
#include "trojanscope/perturb.hpp"

namespace trojanscope {

// 1 channel passes through; 3 channels map to 0.299 R + 0.587 G + 0.114 B.
Tensor to_grayscale(const Tensor& delta);

struct EnergyWindow {
    int row = 0;
    int col = 0;
    int side = 0;
    std::vector<float> values;  // |gray| inside the window, row-major, zero-padded
};

// Slides a side x side window (side shrinks to min(side, H, W)) over a
// single-channel map and keeps the placement with the largest L1 norm; ties
// go to the smallest row, then the smallest column. The absolute values are
// zero-padded to side_request^2 entries.
EnergyWindow max_energy_window(const Tensor& gray, int side = 50, int stride = 1);

// Delta min-max normalized to [0,1] and resized (nearest neighbour) to
// size x size, channels kept.
Tensor perturbation_image(const Tensor& delta, int size = 32);

struct StreamFeatures {
    EnergyWindow window;
    Tensor image;
    double gamma = infinite_difficulty;
    double eta = 0;
    double energy = 0;
    bool degenerate = false;  // generator flagged no gradient or zero fooling rate
};

struct Fingerprint {
    int batch_index = 0;
    StreamFeatures linf;
    StreamFeatures l2;
};

struct FingerprintConfig {
    int batches = 10;
    double xi_linf = 1.0;
    double xi_l2 = 10.0;
    double delta = 0.2;
    int max_outer_linf = 10;
    int max_outer_l2 = 10;
    DeepFoolConfig deepfool;
    int window = 50;
    int stride = 1;
    int image_size = 32;
    std::uint64_t seed = 1;
};

// Disjoint, seed-fixed index groups of floor(pool_size / batches) images each.
std::vector<std::vector<int>> split_batches(int pool_size, int batches, std::uint64_t seed);

StreamFeatures stream_features(const PerturbationArtifact& artifact, const FingerprintConfig& config);

struct FingerprintSet {
    std::vector<Fingerprint> fingerprints;
    std::vector<PerturbationArtifact> linf;  // one per batch
    std::vector<PerturbationArtifact> l2;
};

FingerprintSet build_fingerprints(const ModelGraph& model, const LabeledDataset& clean_pool, const FingerprintConfig& config);

// Writes the artifacts plus an index.json into `dir`; loading rebuilds the
// window and image features from the stored artifacts.
void save_fingerprints(const std::filesystem::path& dir, const FingerprintSet& set, const FingerprintConfig& config,
                       const nlohmann::json& extra = nlohmann::json::object());
FingerprintSet load_fingerprints(const std::filesystem::path& dir, const FingerprintConfig& config);
nlohmann::json fingerprint_index(const FingerprintSet& set, const nlohmann::json& extra = nlohmann::json::object());

}  // namespace trojanscope
