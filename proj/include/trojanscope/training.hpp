#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "trojanscope/dataset.hpp"
#include "trojanscope/diffnet.hpp"
#include "trojanscope/trigger.hpp"

namespace trojanscope {

enum class Architecture { modded_badnet, badnet, modded_lenet5 };

std::string to_string(Architecture arch);
Architecture parse_architecture(const std::string& name);

// All three use 16 and 32 channel convolutions with 5x5 kernels, relu after
// every conv and hidden dense layer, and a 128-unit hidden dense layer.
//   ModdedBadNet: conv-pool4-conv, dense to logits (2 conv + 1 dense)
//   BadNet:       same trunk, dense 128, dense to logits (2 conv + 2 dense)
//   ModdedLeNet5: conv-pool2-conv-pool2-conv3x3(32), dense 128, dense to logits
// On 28x28 inputs every variant flattens to 2x2x32 features, so each feature
// sees most of the image, the trigger corner included.
std::vector<LayerSpec> architecture_layers(Architecture arch, const std::vector<int>& input_shape, int num_classes);
ModelGraph build_architecture(Architecture arch, const std::vector<int>& input_shape = {28, 28, 1},
                              int num_classes = 10);

struct TrainConfig {
    int epochs = 5;
    double lr = 0.001;
    int batch_size = 64;
    std::uint64_t seed = 1;
};

struct EpochLog {
    int epoch = 0;
    double mean_loss = 0;
    double train_accuracy = 0;  // running accuracy over the epoch's minibatches
};

struct TrainingLog {
    std::vector<EpochLog> epochs;
    double train_accuracy = 0;
    double test_accuracy = -1;  // -1 when no test set was given
};

struct TrainedModel {
    ModelGraph model;
    TrainingLog log;
};

// Minibatch Adam on softmax cross-entropy. Throws TrainingDivergedError when
// the loss or an activation stops being finite.
TrainedModel train_model(Architecture arch, const LabeledDataset& train, const TrainConfig& config,
                         const LabeledDataset* test = nullptr);
void train_classifier(ModelGraph& model, const LabeledDataset& train, const TrainConfig& config, TrainingLog& log);

std::vector<int> predict(const ModelGraph& model, const Tensor& images, int batch_size = 256);
double evaluate(const ModelGraph& model, const LabeledDataset& data);

// Fraction of triggered images classified as their poisoned label. Under
// any_to_one, images whose true label is already the target are skipped.
double attack_success_rate(const ModelGraph& model, const LabeledDataset& data, const TriggerSpec& spec,
                           const PoisonPolicy& policy);

}  // namespace trojanscope
