#include "trojanscope/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "trojanscope/errors.hpp"
#include "trojanscope/rng.hpp"

namespace trojanscope {

std::string to_string(Architecture arch)
{
    switch (arch) {
        case Architecture::modded_badnet: return "ModdedBadNet";
        case Architecture::badnet: return "BadNet";
        case Architecture::modded_lenet5: return "ModdedLeNet5";
    }
    return "?";
}

Architecture parse_architecture(const std::string& name)
{
    for (auto a : {Architecture::modded_badnet, Architecture::badnet, Architecture::modded_lenet5})
        if (to_string(a) == name)
            return a;
    throw std::invalid_argument("unknown architecture '" + name + "'");
}

std::vector<LayerSpec> architecture_layers(Architecture arch, const std::vector<int>& input_shape, int num_classes)
{
    if (input_shape.size() != 3)
        throw std::invalid_argument("input shape must be H x W x C");
    const int channels = input_shape[2];
    std::vector<LayerSpec> layers;
    auto block = [&](int in, int out, int kernel, int padding, int pool) {
        layers.push_back(LayerSpec::conv2d(in, out, kernel, 1, padding));
        layers.push_back(LayerSpec::relu());
        if (pool > 1)
            layers.push_back(LayerSpec::maxpool2d(pool, pool));
    };
    if (arch == Architecture::modded_lenet5) {
        block(channels, 16, 5, 0, 2);
        block(16, 32, 5, 0, 2);
        block(32, 32, 3, 0, 1);
    } else {
        block(channels, 16, 5, 0, 4);
        block(16, 32, 5, 0, 1);
    }
    layers.push_back(LayerSpec::flatten());

    const auto shapes = layer_output_shapes(input_shape, layers);
    const int flat = shapes.back()[0];
    if (arch == Architecture::modded_badnet) {
        layers.push_back(LayerSpec::dense(flat, num_classes));
    } else {
        layers.push_back(LayerSpec::dense(flat, 128));
        layers.push_back(LayerSpec::relu());
        layers.push_back(LayerSpec::dense(128, num_classes));
    }
    return layers;
}

ModelGraph build_architecture(Architecture arch, const std::vector<int>& input_shape, int num_classes)
{
    return make_model<float>(input_shape, architecture_layers(arch, input_shape, num_classes));
}

void train_classifier(ModelGraph& model, const LabeledDataset& train, const TrainConfig& config, TrainingLog& log)
{
    if (train.size() == 0)
        throw std::invalid_argument("training set is empty");
    if (config.epochs < 0 || config.batch_size <= 0 || !(config.lr > 0))
        throw std::invalid_argument("invalid training configuration");
    AdamState state;
    const AdamConfig adam{.lr = config.lr};
    std::vector<int> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<int> labels;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::mt19937_64 rng(derive_seed(config.seed, "epoch", {static_cast<std::uint64_t>(epoch)}));
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0;
        int correct = 0;
        for (int start = 0; start < train.size(); start += config.batch_size) {
            const int n = std::min(config.batch_size, train.size() - start);
            std::span<const int> idx(order.data() + start, n);
            const Tensor x = train.batch(idx);
            labels.clear();
            for (int i : idx)
                labels.push_back(train.labels[i]);

            TrainStepResult step;
            try {
                step = loss_and_param_grads(model, x, labels);
            } catch (const NonFiniteError& e) {
                throw TrainingDivergedError("training diverged in epoch " + std::to_string(epoch) + ": " + e.what());
            }
            if (!std::isfinite(step.loss))
                throw TrainingDivergedError("training diverged in epoch " + std::to_string(epoch) +
                                            ": loss is not finite");
            loss_sum += step.loss * n;
            correct += step.correct;
            adam_step(param_views(model), param_views(step.grads), state, adam);
        }
        log.epochs.push_back({epoch, loss_sum / train.size(), static_cast<double>(correct) / train.size()});
    }
}

TrainedModel train_model(Architecture arch, const LabeledDataset& train, const TrainConfig& config,
                         const LabeledDataset* test)
{
    TrainedModel out{build_architecture(arch, train.image_shape(), train.num_classes), {}};
    init_he_normal(out.model, derive_seed(config.seed, "init"));
    train_classifier(out.model, train, config, out.log);
    out.log.train_accuracy = evaluate(out.model, train);
    if (test != nullptr)
        out.log.test_accuracy = evaluate(out.model, *test);
    return out;
}

std::vector<int> predict(const ModelGraph& model, const Tensor& images, int batch_size)
{
    const int n = images.dim(0);
    const std::size_t stride = images.size() / n;
    std::vector<int> out;
    out.reserve(n);
    for (int start = 0; start < n; start += batch_size) {
        const int m = std::min(batch_size, n - start);
        std::vector<int> shape = images.shape();
        shape[0] = m;
        Tensor x(shape, std::vector<float>(images.data() + start * stride, images.data() + (start + m) * stride));
        const auto p = argmax_rows(forward(model, x));
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

double evaluate(const ModelGraph& model, const LabeledDataset& data)
{
    if (data.size() == 0)
        throw std::invalid_argument("evaluate: empty dataset");
    const auto p = predict(model, data.images);
    int correct = 0;
    for (int i = 0; i < data.size(); ++i)
        correct += p[i] == data.labels[i];
    return static_cast<double>(correct) / data.size();
}

double attack_success_rate(const ModelGraph& model, const LabeledDataset& data, const TriggerSpec& spec,
                           const PoisonPolicy& policy)
{
    std::vector<int> keep;
    for (int i = 0; i < data.size(); ++i)
        if (policy.mode == AttackMode::any_to_any || data.labels[i] != policy.target_class)
            keep.push_back(i);
    if (keep.empty())
        throw std::invalid_argument("attack_success_rate: no eligible images");
    const LabeledDataset triggered = apply_trigger(data.subset(keep), spec);
    const auto p = predict(model, triggered.images);
    int hits = 0;
    for (int i = 0; i < triggered.size(); ++i)
        hits += p[i] == poisoned_label(triggered.labels[i], policy, data.num_classes);
    return static_cast<double>(hits) / triggered.size();
}

}  // namespace trojanscope
