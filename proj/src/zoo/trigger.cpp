#include "trojanscope/trigger.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace trojanscope {

std::string to_string(TriggerType type)
{
    return type == TriggerType::type_i ? "type_i" : "type_ii";
}

std::string to_string(AttackMode mode)
{
    return mode == AttackMode::any_to_any ? "any_to_any" : "any_to_one";
}

TriggerType parse_trigger_type(const std::string& name)
{
    if (name == "type_i")
        return TriggerType::type_i;
    if (name == "type_ii")
        return TriggerType::type_ii;
    throw std::invalid_argument("unknown trigger type '" + name + "'");
}

AttackMode parse_attack_mode(const std::string& name)
{
    if (name == "any_to_any")
        return AttackMode::any_to_any;
    if (name == "any_to_one")
        return AttackMode::any_to_one;
    throw std::invalid_argument("unknown attack mode '" + name + "'");
}

bool TriggerSpec::stamps(int r, int c) const
{
    if (r < 0 || c < 0 || r >= size || c >= size)
        return false;
    if (type == TriggerType::type_i)
        return true;
    return mask.at(static_cast<std::size_t>(r) * size + c) != 0;
}

TriggerSpec default_trigger(TriggerType type, int height, int width)
{
    TriggerSpec t;
    t.type = type;
    t.size = type == TriggerType::type_i ? 4 : 5;
    t.row = height - t.size - 2;
    t.col = width - t.size - 2;
    t.intensity = 1.0f;
    if (type == TriggerType::type_ii) {
        t.mask.resize(static_cast<std::size_t>(t.size) * t.size);
        for (int r = 0; r < t.size; ++r)
            for (int c = 0; c < t.size; ++c)
                t.mask[r * t.size + c] = (r + c) % 2 == 0;
    }
    return t;
}

int poisoned_label(int label, const PoisonPolicy& policy, int num_classes)
{
    return policy.mode == AttackMode::any_to_any ? (label + 1) % num_classes : policy.target_class;
}

namespace {

void check_trigger(const TriggerSpec& spec, int h, int w)
{
    if (spec.size <= 0)
        throw std::invalid_argument("trigger size must be positive");
    if (spec.intensity < 0.0f || spec.intensity > 1.0f)
        throw std::invalid_argument("trigger intensity must lie in [0,1]");
    if (spec.row < 0 || spec.col < 0 || spec.row + spec.size > h || spec.col + spec.size > w)
        throw std::out_of_range("trigger at (" + std::to_string(spec.row) + "," + std::to_string(spec.col) +
                                ") size " + std::to_string(spec.size) + " does not fit a " + std::to_string(h) +
                                "x" + std::to_string(w) + " image");
    if (spec.type == TriggerType::type_ii && spec.mask.size() != static_cast<std::size_t>(spec.size) * spec.size)
        throw std::invalid_argument("type_ii trigger mask must have size*size entries");
}

}  // namespace

void apply_trigger_inplace(std::span<float> image, const std::vector<int>& image_shape, const TriggerSpec& spec)
{
    const int h = image_shape.at(0), w = image_shape.at(1), c = image_shape.at(2);
    check_trigger(spec, h, w);
    for (int r = 0; r < spec.size; ++r)
        for (int q = 0; q < spec.size; ++q) {
            if (!spec.stamps(r, q))
                continue;
            float* px = image.data() + (static_cast<std::size_t>(spec.row + r) * w + spec.col + q) * c;
            std::fill(px, px + c, spec.intensity);
        }
}

Tensor apply_trigger(const Tensor& image, const TriggerSpec& spec)
{
    std::vector<int> shape = image.shape();
    if (shape.size() == 4 && shape[0] == 1)
        shape.erase(shape.begin());
    if (shape.size() != 3)
        throw std::invalid_argument("apply_trigger expects an H x W x C image, got " + shape_string(image.shape()));
    Tensor out = image;
    apply_trigger_inplace(out.values(), shape, spec);
    return out;
}

LabeledDataset apply_trigger(const LabeledDataset& data, const TriggerSpec& spec)
{
    LabeledDataset out = data;
    const auto shape = data.image_shape();
    for (int i = 0; i < out.size(); ++i)
        apply_trigger_inplace(out.image(i), shape, spec);
    return out;
}

PoisonResult poison_dataset(const LabeledDataset& data, const TriggerSpec& spec, const PoisonPolicy& policy,
                            std::uint64_t seed)
{
    if (!(policy.proportion >= 0.0 && policy.proportion < 1.0))
        throw std::invalid_argument("poison proportion must lie in [0,1), got " + std::to_string(policy.proportion));
    if (policy.mode == AttackMode::any_to_one && (policy.target_class < 0 || policy.target_class >= data.num_classes))
        throw std::invalid_argument("target class " + std::to_string(policy.target_class) + " out of range");
    check_trigger(spec, data.image_shape()[0], data.image_shape()[1]);

    PoisonResult res{data, {}};
    const int count = static_cast<int>(std::lround(policy.proportion * data.size()));
    if (count == 0)
        return res;
    std::vector<int> idx(data.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(count);
    std::sort(idx.begin(), idx.end());

    const auto shape = data.image_shape();
    for (int i : idx) {
        apply_trigger_inplace(res.data.image(i), shape, spec);
        res.data.labels[i] = poisoned_label(data.labels[i], policy, data.num_classes);
    }
    res.poisoned = std::move(idx);
    return res;
}

void to_json(nlohmann::json& j, const TriggerSpec& spec)
{
    j = {{"type", to_string(spec.type)},
         {"size", spec.size},
         {"row", spec.row},
         {"col", spec.col},
         {"intensity", spec.intensity},
         {"mask", spec.mask}};
}

void from_json(const nlohmann::json& j, TriggerSpec& spec)
{
    spec.type = parse_trigger_type(j.at("type").get<std::string>());
    spec.size = j.at("size").get<int>();
    spec.row = j.at("row").get<int>();
    spec.col = j.at("col").get<int>();
    spec.intensity = j.at("intensity").get<float>();
    spec.mask = j.value("mask", std::vector<std::uint8_t>{});
}

void to_json(nlohmann::json& j, const PoisonPolicy& policy)
{
    j = {{"proportion", policy.proportion}, {"mode", to_string(policy.mode)}, {"target_class", policy.target_class}};
}

void from_json(const nlohmann::json& j, PoisonPolicy& policy)
{
    policy.proportion = j.at("proportion").get<double>();
    policy.mode = parse_attack_mode(j.at("mode").get<std::string>());
    policy.target_class = j.at("target_class").get<int>();
}

}  // namespace trojanscope
