#include "trojanscope/kernels.hpp"

#include <algorithm>
#include <limits>

namespace trojanscope::kernels::reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> output)
{
    const int oh = g.out_h();
    const int ow = g.out_w();
    for (int n = 0; n < g.batch; n++)
        for (int y = 0; y < oh; y++)
            for (int x = 0; x < ow; x++)
                for (int o = 0; o < g.out_c; o++) {
                    T acc = bias[o];
                    for (int ky = 0; ky < g.kernel; ky++)
                        for (int kx = 0; kx < g.kernel; kx++) {
                            const int iy = y * g.stride + ky - g.padding;
                            const int ix = x * g.stride + kx - g.padding;
                            if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w)
                                continue;
                            for (int c = 0; c < g.in_c; c++)
                                acc += weight[((o * g.kernel + ky) * g.kernel + kx) * g.in_c + c] *
                                       input[((n * g.in_h + iy) * g.in_w + ix) * g.in_c + c];
                        }
                    output[((n * oh + y) * ow + x) * g.out_c + o] = acc;
                }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_out, std::span<const T> weight,
                           std::span<T> grad_in)
{
    const int oh = g.out_h();
    const int ow = g.out_w();
    std::fill(grad_in.begin(), grad_in.end(), T{0});
    for (int n = 0; n < g.batch; n++)
        for (int y = 0; y < oh; y++)
            for (int x = 0; x < ow; x++)
                for (int o = 0; o < g.out_c; o++) {
                    const T go = grad_out[((n * oh + y) * ow + x) * g.out_c + o];
                    for (int ky = 0; ky < g.kernel; ky++)
                        for (int kx = 0; kx < g.kernel; kx++) {
                            const int iy = y * g.stride + ky - g.padding;
                            const int ix = x * g.stride + kx - g.padding;
                            if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w)
                                continue;
                            for (int c = 0; c < g.in_c; c++)
                                grad_in[((n * g.in_h + iy) * g.in_w + ix) * g.in_c + c] +=
                                    go * weight[((o * g.kernel + ky) * g.kernel + kx) * g.in_c + c];
                        }
                }
}

template <typename T>
void conv2d_backward_params(const ConvGeometry& g, std::span<const T> input, std::span<const T> grad_out,
                            std::span<T> grad_weight, std::span<T> grad_bias)
{
    const int oh = g.out_h();
    const int ow = g.out_w();
    std::fill(grad_weight.begin(), grad_weight.end(), T{0});
    std::fill(grad_bias.begin(), grad_bias.end(), T{0});
    for (int n = 0; n < g.batch; n++)
        for (int y = 0; y < oh; y++)
            for (int x = 0; x < ow; x++)
                for (int o = 0; o < g.out_c; o++) {
                    const T go = grad_out[((n * oh + y) * ow + x) * g.out_c + o];
                    grad_bias[o] += go;
                    for (int ky = 0; ky < g.kernel; ky++)
                        for (int kx = 0; kx < g.kernel; kx++) {
                            const int iy = y * g.stride + ky - g.padding;
                            const int ix = x * g.stride + kx - g.padding;
                            if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w)
                                continue;
                            for (int c = 0; c < g.in_c; c++)
                                grad_weight[((o * g.kernel + ky) * g.kernel + kx) * g.in_c + c] +=
                                    go * input[((n * g.in_h + iy) * g.in_w + ix) * g.in_c + c];
                        }
                }
}

template <typename T>
void dense_forward(int batch, int in, int out, std::span<const T> input, std::span<const T> weight,
                   std::span<const T> bias, std::span<T> output)
{
    for (int n = 0; n < batch; n++)
        for (int o = 0; o < out; o++) {
            T acc = bias[o];
            for (int i = 0; i < in; i++)
                acc += weight[o * in + i] * input[n * in + i];
            output[n * out + o] = acc;
        }
}

template <typename T>
void dense_backward_input(int batch, int in, int out, std::span<const T> grad_out, std::span<const T> weight,
                          std::span<T> grad_in)
{
    for (int n = 0; n < batch; n++)
        for (int i = 0; i < in; i++) {
            T acc = 0;
            for (int o = 0; o < out; o++)
                acc += grad_out[n * out + o] * weight[o * in + i];
            grad_in[n * in + i] = acc;
        }
}

template <typename T>
void dense_backward_params(int batch, int in, int out, std::span<const T> input, std::span<const T> grad_out,
                           std::span<T> grad_weight, std::span<T> grad_bias)
{
    for (int o = 0; o < out; o++) {
        T gb = 0;
        for (int n = 0; n < batch; n++)
            gb += grad_out[n * out + o];
        grad_bias[o] = gb;
        for (int i = 0; i < in; i++) {
            T acc = 0;
            for (int n = 0; n < batch; n++)
                acc += grad_out[n * out + o] * input[n * in + i];
            grad_weight[o * in + i] = acc;
        }
    }
}

template <typename T>
void maxpool_forward(const PoolGeometry& g, std::span<const T> input, std::span<T> output,
                     std::span<std::int32_t> argmax)
{
    const int oh = g.out_h();
    const int ow = g.out_w();
    for (int n = 0; n < g.batch; n++)
        for (int y = 0; y < oh; y++)
            for (int x = 0; x < ow; x++)
                for (int c = 0; c < g.channels; c++) {
                    T best = -std::numeric_limits<T>::infinity();
                    std::int32_t best_idx = -1;
                    for (int py = 0; py < g.size; py++)
                        for (int px = 0; px < g.size; px++) {
                            const int idx = ((n * g.in_h + y * g.stride + py) * g.in_w + x * g.stride + px) *
                                                g.channels +
                                            c;
                            if (best_idx < 0 || input[idx] > best) {
                                best = input[idx];
                                best_idx = idx;
                            }
                        }
                    const int out_idx = ((n * oh + y) * ow + x) * g.channels + c;
                    output[out_idx] = best;
                    argmax[out_idx] = best_idx;
                }
}

template <typename T>
void maxpool_backward(const PoolGeometry& g, std::span<const T> grad_out, std::span<const std::int32_t> argmax,
                      std::span<T> grad_in)
{
    std::fill(grad_in.begin(), grad_in.end(), T{0});
    const std::size_t count = static_cast<std::size_t>(g.batch) * g.out_h() * g.out_w() * g.channels;
    for (std::size_t i = 0; i < count; i++)
        grad_in[argmax[i]] += grad_out[i];
}

#define TROJANSCOPE_INSTANTIATE(T)                                                                                  \
    template void conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,                     \
                                    std::span<const T>, std::span<T>);                                               \
    template void conv2d_backward_input<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,              \
                                           std::span<T>);                                                            \
    template void conv2d_backward_params<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,             \
                                            std::span<T>, std::span<T>);                                             \
    template void dense_forward<T>(int, int, int, std::span<const T>, std::span<const T>, std::span<const T>,        \
                                   std::span<T>);                                                                    \
    template void dense_backward_input<T>(int, int, int, std::span<const T>, std::span<const T>, std::span<T>);      \
    template void dense_backward_params<T>(int, int, int, std::span<const T>, std::span<const T>, std::span<T>,      \
                                           std::span<T>);                                                            \
    template void maxpool_forward<T>(const PoolGeometry&, std::span<const T>, std::span<T>,                          \
                                     std::span<std::int32_t>);                                                       \
    template void maxpool_backward<T>(const PoolGeometry&, std::span<const T>, std::span<const std::int32_t>,        \
                                      std::span<T>);

TROJANSCOPE_INSTANTIATE(float)
TROJANSCOPE_INSTANTIATE(double)

}  // namespace trojanscope::kernels::reference
