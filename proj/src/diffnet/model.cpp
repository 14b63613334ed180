#include <cmath>
#include <cstring>
#include <type_traits>
#include <random>
#include <sstream>

#include "trojanscope/diffnet.hpp"
#include "trojanscope/kernels.hpp"

namespace trojanscope {

std::string shape_string(const std::vector<int>& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i)
        os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

std::string to_string(LayerKind kind)
{
    switch (kind) {
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::dense: return "dense";
        case LayerKind::relu: return "relu";
        case LayerKind::maxpool2d: return "maxpool2d";
        case LayerKind::flatten: return "flatten";
    }
    return "?";
}

LayerKind parse_layer_kind(const std::string& name)
{
    for (LayerKind k : {LayerKind::conv2d, LayerKind::dense, LayerKind::relu, LayerKind::maxpool2d, LayerKind::flatten})
        if (to_string(k) == name)
            return k;
    throw std::invalid_argument("unknown layer kind '" + name + "'");
}

LayerSpec LayerSpec::conv2d(int in_channels, int out_channels, int kernel, int stride, int padding)
{
    return {LayerKind::conv2d, kernel, stride, padding, in_channels, out_channels};
}
LayerSpec LayerSpec::dense(int in_units, int out_units) { return {LayerKind::dense, 0, 1, 0, in_units, out_units}; }
LayerSpec LayerSpec::relu() { return {LayerKind::relu, 0, 1, 0, 0, 0}; }
LayerSpec LayerSpec::maxpool2d(int size, int stride) { return {LayerKind::maxpool2d, size, stride, 0, 0, 0}; }
LayerSpec LayerSpec::flatten() { return {LayerKind::flatten, 0, 1, 0, 0, 0}; }

std::vector<int> LayerSpec::weight_shape() const
{
    if (kind == LayerKind::conv2d)
        return {out, kernel, kernel, in};
    if (kind == LayerKind::dense)
        return {out, in};
    return {};
}

std::vector<int> LayerSpec::bias_shape() const
{
    if (has_params())
        return {out};
    return {};
}

std::vector<std::vector<int>> layer_output_shapes(const std::vector<int>& input_shape,
                                                  const std::vector<LayerSpec>& layers)
{
    if (input_shape.size() != 3)
        throw ShapeError(-1, "model input shape must be H x W x C, got " + shape_string(input_shape));
    std::vector<std::vector<int>> shapes;
    std::vector<int> cur = input_shape;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerSpec& l = layers[i];
        const int idx = static_cast<int>(i);
        switch (l.kind) {
            case LayerKind::conv2d: {
                if (cur.size() != 3)
                    throw ShapeError(idx, "conv2d expects H x W x C input, got " + shape_string(cur));
                if (cur[2] != l.in)
                    throw ShapeError(idx, "conv2d expects " + std::to_string(l.in) + " input channels, got " +
                                              std::to_string(cur[2]));
                if (l.kernel <= 0 || l.stride <= 0 || l.padding < 0 || l.out <= 0)
                    throw ShapeError(idx, "invalid conv2d parameters");
                const int oh = (cur[0] + 2 * l.padding - l.kernel) / l.stride + 1;
                const int ow = (cur[1] + 2 * l.padding - l.kernel) / l.stride + 1;
                if (cur[0] + 2 * l.padding < l.kernel || cur[1] + 2 * l.padding < l.kernel)
                    throw ShapeError(idx, "conv2d kernel larger than padded input " + shape_string(cur));
                cur = {oh, ow, l.out};
                break;
            }
            case LayerKind::maxpool2d: {
                if (cur.size() != 3)
                    throw ShapeError(idx, "maxpool2d expects H x W x C input, got " + shape_string(cur));
                if (l.kernel <= 0 || l.stride <= 0 || cur[0] < l.kernel || cur[1] < l.kernel)
                    throw ShapeError(idx, "maxpool2d window does not fit input " + shape_string(cur));
                cur = {(cur[0] - l.kernel) / l.stride + 1, (cur[1] - l.kernel) / l.stride + 1, cur[2]};
                break;
            }
            case LayerKind::dense:
                if (cur.size() != 1)
                    throw ShapeError(idx, "dense expects a flat input (insert flatten), got " + shape_string(cur));
                if (cur[0] != l.in)
                    throw ShapeError(idx, "dense expects " + std::to_string(l.in) + " inputs, got " +
                                              std::to_string(cur[0]));
                if (l.out <= 0)
                    throw ShapeError(idx, "dense output width must be positive");
                cur = {l.out};
                break;
            case LayerKind::flatten: cur = {static_cast<int>(shape_size(cur))}; break;
            case LayerKind::relu: break;
        }
        shapes.push_back(cur);
    }
    if (shapes.empty() || shapes.back().size() != 1)
        throw ShapeError(static_cast<int>(layers.size()) - 1, "final layer must output a flat logit vector");
    return shapes;
}

template <typename T>
int BasicModel<T>::num_classes() const
{
    return layer_output_shapes(input_shape, layers).back()[0];
}

template <typename T>
BasicModel<T> make_model(std::vector<int> input_shape, std::vector<LayerSpec> layers)
{
    layer_output_shapes(input_shape, layers);
    BasicModel<T> m;
    m.input_shape = std::move(input_shape);
    m.layers = std::move(layers);
    m.params.resize(m.layers.size());
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        if (m.layers[i].has_params()) {
            m.params[i].weight = BasicTensor<T>(m.layers[i].weight_shape());
            m.params[i].bias = BasicTensor<T>(m.layers[i].bias_shape());
        }
    }
    return m;
}

void init_he_normal(ModelGraph& model, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const LayerSpec& l = model.layers[i];
        if (!l.has_params())
            continue;
        const int fan_in = l.kind == LayerKind::conv2d ? l.kernel * l.kernel * l.in : l.in;
        std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
        for (float& w : model.params[i].weight.values())
            w = dist(rng);
        model.params[i].bias.fill(0.0f);
    }
}

template <typename T>
void validate(const BasicModel<T>& model)
{
    layer_output_shapes(model.input_shape, model.layers);
    if (model.params.size() != model.layers.size())
        throw ShapeError(-1, "parameter set has " + std::to_string(model.params.size()) + " entries for " +
                                 std::to_string(model.layers.size()) + " layers");
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const LayerSpec& l = model.layers[i];
        if (!l.has_params())
            continue;
        if (model.params[i].weight.shape() != l.weight_shape() || model.params[i].bias.shape() != l.bias_shape())
            throw ShapeError(static_cast<int>(i), "parameter tensors do not match the declared layer shape");
    }
}

namespace {

kernels::ConvGeometry conv_geometry(const LayerSpec& l, int batch, const std::vector<int>& in_shape)
{
    return {batch, in_shape[0], in_shape[1], in_shape[2], l.out, l.kernel, l.stride, l.padding};
}

kernels::PoolGeometry pool_geometry(const LayerSpec& l, int batch, const std::vector<int>& in_shape)
{
    return {batch, in_shape[0], in_shape[1], in_shape[2], l.kernel, l.stride};
}

template <typename T>
void check_finite(const BasicTensor<T>& t, int layer, const char* stage)
{
    // Exponent-bit test on the raw representation; vectorizes, unlike isfinite.
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    constexpr Bits exp_mask = sizeof(T) == 4 ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
    Bits bad = 0;
    const T* p = t.data();
    const std::size_t n = t.size();
    for (std::size_t i = 0; i < n; ++i) {
        Bits b;
        std::memcpy(&b, p + i, sizeof(T));
        bad |= Bits((b & exp_mask) == exp_mask);
    }
    if (bad)
        throw NonFiniteError(layer, stage);
}

std::vector<int> with_batch(int n, const std::vector<int>& shape)
{
    std::vector<int> out{n};
    out.insert(out.end(), shape.begin(), shape.end());
    return out;
}

template <typename T>
Tape<T> run_forward(const BasicModel<T>& model, const BasicTensor<T>& batch, bool keep)
{
    const auto shapes = layer_output_shapes(model.input_shape, model.layers);
    if (batch.rank() != 4 || std::vector<int>(batch.shape().begin() + 1, batch.shape().end()) != model.input_shape)
        throw ShapeError(0, "batch shape " + shape_string(batch.shape()) + " does not match model input N x " +
                                shape_string(model.input_shape));
    if (model.params.size() != model.layers.size())
        throw ShapeError(-1, "model parameter set does not match its layer list");
    const int n = batch.dim(0);

    Tape<T> tape;
    tape.argmax.resize(model.layers.size());
    tape.values.reserve(keep ? model.layers.size() + 1 : 2);
    tape.values.push_back(batch);
    std::vector<int> in_shape = model.input_shape;

    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const LayerSpec& l = model.layers[i];
        const BasicTensor<T>& x = tape.values.back();
        BasicTensor<T> y(with_batch(n, shapes[i]));
        switch (l.kind) {
            case LayerKind::conv2d:
                kernels::conv2d_forward<T>(conv_geometry(l, n, in_shape), x.values(), model.params[i].weight.values(),
                                           model.params[i].bias.values(), y.values());
                break;
            case LayerKind::dense:
                kernels::dense_forward<T>(n, l.in, l.out, x.values(), model.params[i].weight.values(),
                                          model.params[i].bias.values(), y.values());
                break;
            case LayerKind::relu: kernels::relu_forward<T>(x.values(), y.values()); break;
            case LayerKind::maxpool2d: {
                std::vector<std::int32_t> idx(y.size());
                kernels::maxpool_forward<T>(pool_geometry(l, n, in_shape), x.values(), y.values(), idx);
                if (keep)
                    tape.argmax[i] = std::move(idx);
                break;
            }
            case LayerKind::flatten: std::copy(x.values().begin(), x.values().end(), y.values().begin()); break;
        }
        check_finite(y, static_cast<int>(i), "forward output");
        if (keep) {
            tape.values.push_back(std::move(y));
        } else {
            tape.values.back() = std::move(y);
        }
        in_shape = shapes[i];
    }
    return tape;
}

}  // namespace

template <typename T>
BasicTensor<T> forward(const BasicModel<T>& model, const BasicTensor<T>& batch)
{
    auto tape = run_forward(model, batch, false);
    return std::move(tape.values.back());
}

template <typename T>
Tape<T> forward_tape(const BasicModel<T>& model, const BasicTensor<T>& batch)
{
    return run_forward(model, batch, true);
}

template <typename T>
Gradients<T> backward(const BasicModel<T>& model, const Tape<T>& tape, const BasicTensor<T>& grad_output,
                      GradientTargets targets)
{
    const auto shapes = layer_output_shapes(model.input_shape, model.layers);
    if (tape.values.size() != model.layers.size() + 1)
        throw std::invalid_argument("backward: tape does not belong to this model");
    if (grad_output.shape() != tape.values.back().shape())
        throw ShapeError(static_cast<int>(model.layers.size()) - 1,
                         "output gradient shape " + shape_string(grad_output.shape()) + " does not match output " +
                             shape_string(tape.values.back().shape()));
    const int n = grad_output.dim(0);
    const bool want_params = targets != GradientTargets::input;
    const bool want_input = targets != GradientTargets::params;

    Gradients<T> result;
    if (want_params) {
        result.params.resize(model.layers.size());
    }

    BasicTensor<T> g = grad_output;
    for (int i = static_cast<int>(model.layers.size()) - 1; i >= 0; --i) {
        const LayerSpec& l = model.layers[i];
        const BasicTensor<T>& x = tape.values[i];
        const std::vector<int>& in_shape = i == 0 ? model.input_shape : shapes[i - 1];
        // Below the first parameterized layer only the input gradient is needed.
        bool need_grad_in = want_input;
        if (!need_grad_in) {
            for (int j = 0; j < i; ++j)
                need_grad_in = need_grad_in || model.layers[j].has_params();
        }

        if (want_params && l.has_params()) {
            LayerParams<T>& p = result.params[i];
            p.weight = BasicTensor<T>(l.weight_shape());
            p.bias = BasicTensor<T>(l.bias_shape());
            if (l.kind == LayerKind::conv2d)
                kernels::conv2d_backward_params<T>(conv_geometry(l, n, in_shape), x.values(), g.values(),
                                                   p.weight.values(), p.bias.values());
            else
                kernels::dense_backward_params<T>(n, l.in, l.out, x.values(), g.values(), p.weight.values(),
                                                  p.bias.values());
            check_finite(p.weight, i, "weight gradient");
            check_finite(p.bias, i, "bias gradient");
        }
        if (!need_grad_in)
            break;

        BasicTensor<T> gi(x.shape());
        switch (l.kind) {
            case LayerKind::conv2d:
                kernels::conv2d_backward_input<T>(conv_geometry(l, n, in_shape), g.values(),
                                                  model.params[i].weight.values(), gi.values());
                break;
            case LayerKind::dense:
                kernels::dense_backward_input<T>(n, l.in, l.out, g.values(), model.params[i].weight.values(),
                                                 gi.values());
                break;
            case LayerKind::relu: kernels::relu_backward<T>(x.values(), g.values(), gi.values()); break;
            case LayerKind::maxpool2d:
                if (tape.argmax[i].empty())
                    throw std::invalid_argument("backward: tape lacks max-pool indices");
                kernels::maxpool_backward<T>(pool_geometry(l, n, in_shape), g.values(), tape.argmax[i],
                                             gi.values());
                break;
            case LayerKind::flatten: std::copy(g.values().begin(), g.values().end(), gi.values().begin()); break;
        }
        check_finite(gi, i, "input gradient");
        g = std::move(gi);
        if (i == 0)
            result.input = std::move(g);
    }
    return result;
}

std::vector<int> argmax_rows(const Tensor& logits)
{
    const int n = logits.dim(0);
    std::vector<int> out(n);
    for (int i = 0; i < n; ++i) {
        auto r = logits.row(i);
        out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
    }
    return out;
}

template struct BasicModel<float>;
template struct BasicModel<double>;
template BasicModel<float> make_model<float>(std::vector<int>, std::vector<LayerSpec>);
template BasicModel<double> make_model<double>(std::vector<int>, std::vector<LayerSpec>);
template void validate<float>(const BasicModel<float>&);
template void validate<double>(const BasicModel<double>&);
template BasicTensor<float> forward<float>(const BasicModel<float>&, const BasicTensor<float>&);
template BasicTensor<double> forward<double>(const BasicModel<double>&, const BasicTensor<double>&);
template Tape<float> forward_tape<float>(const BasicModel<float>&, const BasicTensor<float>&);
template Tape<double> forward_tape<double>(const BasicModel<double>&, const BasicTensor<double>&);
template Gradients<float> backward<float>(const BasicModel<float>&, const Tape<float>&, const BasicTensor<float>&,
                                          GradientTargets);
template Gradients<double> backward<double>(const BasicModel<double>&, const Tape<double>&,
                                            const BasicTensor<double>&, GradientTargets);

}  // namespace trojanscope
