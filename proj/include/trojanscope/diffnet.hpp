#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "trojanscope/errors.hpp"
#include "trojanscope/tensor.hpp"

namespace trojanscope {

enum class LayerKind { conv2d, dense, relu, maxpool2d, flatten };

std::string to_string(LayerKind kind);
LayerKind parse_layer_kind(const std::string& name);

// One entry of a feedforward layer list. Only the fields relevant to `kind`
// are meaningful: conv2d uses kernel/stride/padding/in/out (channels), dense
// uses in/out (units), maxpool2d uses kernel (window) and stride.
struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    int kernel = 0;
    int stride = 1;
    int padding = 0;
    int in = 0;
    int out = 0;

    static LayerSpec conv2d(int in_channels, int out_channels, int kernel, int stride = 1, int padding = 0);
    static LayerSpec dense(int in_units, int out_units);
    static LayerSpec relu();
    static LayerSpec maxpool2d(int size, int stride);
    static LayerSpec flatten();

    bool has_params() const { return kind == LayerKind::conv2d || kind == LayerKind::dense; }
    std::vector<int> weight_shape() const;
    std::vector<int> bias_shape() const;

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

template <typename T>
struct LayerParams {
    BasicTensor<T> weight;
    BasicTensor<T> bias;
};

template <typename T>
using ParamSet = std::vector<LayerParams<T>>;

// A feedforward classifier: input N x H x W x C, output N x num_classes.
template <typename T>
struct BasicModel {
    std::vector<int> input_shape;
    std::vector<LayerSpec> layers;
    ParamSet<T> params;  // one entry per layer; empty tensors for parameter-free layers

    int num_classes() const;

    template <typename U>
    BasicModel<U> cast() const
    {
        BasicModel<U> out;
        out.input_shape = input_shape;
        out.layers = layers;
        out.params.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (layers[i].has_params()) {
                out.params[i].weight = params[i].weight.template cast<U>();
                out.params[i].bias = params[i].bias.template cast<U>();
            }
        }
        return out;
    }
};

using ModelGraph = BasicModel<float>;

// Per-layer output shapes (without batch dimension). Throws ShapeError naming
// the first layer whose input does not fit.
std::vector<std::vector<int>> layer_output_shapes(const std::vector<int>& input_shape,
                                                  const std::vector<LayerSpec>& layers);

// Builds a model with zero parameters of the declared shapes.
template <typename T = float>
BasicModel<T> make_model(std::vector<int> input_shape, std::vector<LayerSpec> layers);

// He-normal weights, zero biases.
void init_he_normal(ModelGraph& model, std::uint64_t seed);

template <typename T>
void validate(const BasicModel<T>& model);

template <typename T>
struct Tape {
    std::vector<BasicTensor<T>> values;  // values[i] is the input of layer i; values.back() the output
    std::vector<std::vector<std::int32_t>> argmax;
};

template <typename T>
BasicTensor<T> forward(const BasicModel<T>& model, const BasicTensor<T>& batch);

template <typename T>
Tape<T> forward_tape(const BasicModel<T>& model, const BasicTensor<T>& batch);

enum class GradientTargets { input, params, both };

template <typename T>
struct Gradients {
    BasicTensor<T> input;
    ParamSet<T> params;
};

template <typename T>
Gradients<T> backward(const BasicModel<T>& model, const Tape<T>& tape, const BasicTensor<T>& grad_output,
                      GradientTargets targets);

// ---- losses ----------------------------------------------------------------

enum class LossKind { softmax_cross_entropy, binary_cross_entropy };

struct LossSpec {
    LossKind kind = LossKind::softmax_cross_entropy;
};

template <typename T>
struct LossResult {
    double value = 0;
    BasicTensor<T> grad;  // d(mean loss) / d(logits)
};

// Mean loss over the batch. For binary cross-entropy the logits must be N x 1
// and labels 0/1.
template <typename T>
LossResult<T> evaluate_loss(const BasicTensor<T>& logits, std::span<const int> labels, LossSpec loss);

template <typename T>
BasicTensor<T> grad_input(const BasicModel<T>& model, const BasicTensor<T>& batch, std::span<const int> labels,
                          LossSpec loss = {});

template <typename T>
ParamSet<T> grad_params(const BasicModel<T>& model, const BasicTensor<T>& batch, std::span<const int> labels,
                        LossSpec loss = {});

struct TrainStepResult {
    double loss = 0;
    int correct = 0;  // argmax hits (softmax) or thresholded hits (binary)
    ParamSet<float> grads;
};

TrainStepResult loss_and_param_grads(const ModelGraph& model, const Tensor& batch, std::span<const int> labels,
                                     LossSpec loss = {});

std::vector<int> argmax_rows(const Tensor& logits);

// ---- optimizer -------------------------------------------------------------

struct AdamConfig {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::int64_t step = 0;
    std::vector<std::vector<float>> m;
    std::vector<std::vector<float>> v;
};

// One bias-corrected Adam update over a list of parameter tensors. The state
// is sized lazily on the first call.
void adam_step(std::vector<std::span<float>> params, std::vector<std::span<const float>> grads, AdamState& state,
               const AdamConfig& config);

std::vector<std::span<float>> param_views(ModelGraph& model);
std::vector<std::span<const float>> param_views(const ParamSet<float>& grads);

}  // namespace trojanscope
