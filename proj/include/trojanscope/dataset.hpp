#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "trojanscope/tensor.hpp"

namespace trojanscope {

// Images in [0,1], N x H x W x C, with integer labels in [0, num_classes).
struct LabeledDataset {
    Tensor images;
    std::vector<int> labels;
    int num_classes = 10;

    int size() const { return static_cast<int>(labels.size()); }
    std::vector<int> image_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
    std::span<const float> image(int i) const { return images.row(i); }
    std::span<float> image(int i) { return images.row(i); }

    LabeledDataset subset(std::span<const int> indices) const;
    Tensor batch(std::span<const int> indices) const;
};

// IDX byte format (big-endian header). Files may be gzip-compressed.
LabeledDataset read_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                        int num_classes = 10);
void write_idx(const LabeledDataset& data, const std::filesystem::path& images, const std::filesystem::path& labels);

struct SyntheticDigitsConfig {
    int count = 1000;
    int height = 28;
    int width = 28;
    std::uint64_t seed = 1;
    double stray_rate = 0.0;  // chance of stray pen marks on an image
};

// MNIST-like 10-class data: each class is a fixed set of pen strokes drawn with
// random affine jitter, stroke width and intensity, then quantized to 1/255.
LabeledDataset synthetic_digits(const SyntheticDigitsConfig& config);

// Deterministic subset of `count` images, uniform under `seed`.
LabeledDataset sample_subset(const LabeledDataset& data, int count, std::uint64_t seed);

}  // namespace trojanscope
