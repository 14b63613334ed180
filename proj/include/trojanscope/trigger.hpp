#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "trojanscope/dataset.hpp"

namespace trojanscope {

enum class TriggerType { type_i, type_ii };
enum class AttackMode { any_to_any, any_to_one };

std::string to_string(TriggerType type);
std::string to_string(AttackMode mode);
TriggerType parse_trigger_type(const std::string& name);
AttackMode parse_attack_mode(const std::string& name);

// Type I stamps a solid size x size square. Type II stamps only the pixels set
// in `mask` (row-major, size x size). Stamped pixels are overwritten in every
// channel, so stamping is idempotent.
struct TriggerSpec {
    TriggerType type = TriggerType::type_i;
    int size = 4;
    int row = 0;
    int col = 0;
    float intensity = 1.0f;
    std::vector<std::uint8_t> mask;

    bool stamps(int r, int c) const;
    bool operator==(const TriggerSpec&) const = default;
};

// Default triggers sit two pixels in from the bottom-right corner.
// Type I: 4x4 square. Type II: 5x5 checkerboard.
TriggerSpec default_trigger(TriggerType type, int height = 28, int width = 28);

struct PoisonPolicy {
    double proportion = 0.1;
    AttackMode mode = AttackMode::any_to_one;
    int target_class = 0;

    bool operator==(const PoisonPolicy&) const = default;
};

int poisoned_label(int label, const PoisonPolicy& policy, int num_classes);

// Stamps one image (H x W x C, or 1 x H x W x C) in place.
void apply_trigger_inplace(std::span<float> image, const std::vector<int>& image_shape, const TriggerSpec& spec);
Tensor apply_trigger(const Tensor& image, const TriggerSpec& spec);
// Stamps every image of the set; labels untouched.
LabeledDataset apply_trigger(const LabeledDataset& data, const TriggerSpec& spec);

struct PoisonResult {
    LabeledDataset data;
    std::vector<int> poisoned;  // sorted indices of triggered and relabeled images
};

PoisonResult poison_dataset(const LabeledDataset& data, const TriggerSpec& spec, const PoisonPolicy& policy,
                            std::uint64_t seed);

void to_json(nlohmann::json& j, const TriggerSpec& spec);
void from_json(const nlohmann::json& j, TriggerSpec& spec);
void to_json(nlohmann::json& j, const PoisonPolicy& policy);
void from_json(const nlohmann::json& j, PoisonPolicy& policy);

}  // namespace trojanscope
