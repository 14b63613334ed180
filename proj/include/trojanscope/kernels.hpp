#pragma once

#include <cstdint>
#include <span>

// Compute kernels behind the layer vocabulary. `trojanscope::kernels` holds the
// OpenMP-parallel implementations used by the engine; `kernels::reference` holds
// direct serial loops kept as the test oracle and benchmark baseline.
//
// The parallel kernels only split work over independent outputs, never over a
// reduction, so their results do not depend on the thread count.
//
// Layouts: activations N x H x W x C, conv weights Cout x K x K x Cin,
// dense weights Out x In.

namespace trojanscope::kernels {

struct ConvGeometry {
    int batch = 1;
    int in_h = 1;
    int in_w = 1;
    int in_c = 1;
    int out_c = 1;
    int kernel = 1;
    int stride = 1;
    int padding = 0;

    int out_h() const { return (in_h + 2 * padding - kernel) / stride + 1; }
    int out_w() const { return (in_w + 2 * padding - kernel) / stride + 1; }
    int patch() const { return kernel * kernel * in_c; }
};

struct PoolGeometry {
    int batch = 1;
    int in_h = 1;
    int in_w = 1;
    int channels = 1;
    int size = 2;
    int stride = 2;

    int out_h() const { return (in_h - size) / stride + 1; }
    int out_w() const { return (in_w - size) / stride + 1; }
};

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> output);
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_out, std::span<const T> weight,
                           std::span<T> grad_in);
// Overwrites grad_weight and grad_bias with the batch sum.
template <typename T>
void conv2d_backward_params(const ConvGeometry& g, std::span<const T> input, std::span<const T> grad_out,
                            std::span<T> grad_weight, std::span<T> grad_bias);

template <typename T>
void dense_forward(int batch, int in, int out, std::span<const T> input, std::span<const T> weight,
                   std::span<const T> bias, std::span<T> output);
template <typename T>
void dense_backward_input(int batch, int in, int out, std::span<const T> grad_out, std::span<const T> weight,
                          std::span<T> grad_in);
template <typename T>
void dense_backward_params(int batch, int in, int out, std::span<const T> input, std::span<const T> grad_out,
                           std::span<T> grad_weight, std::span<T> grad_bias);

// argmax receives, per output element, the flat input index that won.
template <typename T>
void maxpool_forward(const PoolGeometry& g, std::span<const T> input, std::span<T> output,
                     std::span<std::int32_t> argmax);
template <typename T>
void maxpool_backward(const PoolGeometry& g, std::span<const T> grad_out, std::span<const std::int32_t> argmax,
                      std::span<T> grad_in);

template <typename T>
void relu_forward(std::span<const T> input, std::span<T> output);
template <typename T>
void relu_backward(std::span<const T> input, std::span<const T> grad_out, std::span<T> grad_in);

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> output);
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_out, std::span<const T> weight,
                           std::span<T> grad_in);
template <typename T>
void conv2d_backward_params(const ConvGeometry& g, std::span<const T> input, std::span<const T> grad_out,
                            std::span<T> grad_weight, std::span<T> grad_bias);

template <typename T>
void dense_forward(int batch, int in, int out, std::span<const T> input, std::span<const T> weight,
                   std::span<const T> bias, std::span<T> output);
template <typename T>
void dense_backward_input(int batch, int in, int out, std::span<const T> grad_out, std::span<const T> weight,
                          std::span<T> grad_in);
template <typename T>
void dense_backward_params(int batch, int in, int out, std::span<const T> input, std::span<const T> grad_out,
                           std::span<T> grad_weight, std::span<T> grad_bias);

template <typename T>
void maxpool_forward(const PoolGeometry& g, std::span<const T> input, std::span<T> output,
                     std::span<std::int32_t> argmax);
template <typename T>
void maxpool_backward(const PoolGeometry& g, std::span<const T> grad_out, std::span<const std::int32_t> argmax,
                      std::span<T> grad_in);

}  // namespace reference

}  // namespace trojanscope::kernels
