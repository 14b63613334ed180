#include "trojanscope/kernels.hpp"

#include <algorithm>
#include <limits>
#include <vector>

namespace trojanscope::kernels {

namespace {

// acc[0..W) += a * b[0..W). Fixed widths let the compiler fully unroll the
// common channel counts.
template <int W, typename T>
inline void axpy_fixed(T* __restrict acc, T a, const T* __restrict b)
{
#pragma omp simd
    for (int j = 0; j < W; ++j)
        acc[j] += a * b[j];
}

template <typename T>
inline void axpy(T* __restrict acc, T a, const T* __restrict b, int width)
{
#pragma omp simd
    for (int j = 0; j < width; ++j)
        acc[j] += a * b[j];
}

template <typename T>
inline T dot(const T* __restrict a, const T* __restrict b, int width)
{
    T acc = 0;
#pragma omp simd reduction(+ : acc)
    for (int j = 0; j < width; ++j)
        acc += a[j] * b[j];
    return acc;
}

// out[r][0..width) = init[0..width) + sum_k a[r][k] * b[k][0..width)
template <typename T>
void rows_times_matrix(int rows, int depth, int width, const T* a, const T* b, const T* init, T* out)
{
    auto run = [&]<int W>() {
        for (int r = 0; r < rows; ++r) {
            T* o = out + static_cast<std::size_t>(r) * W;
            if (init != nullptr)
                std::copy(init, init + W, o);
            else
                std::fill(o, o + W, T{0});
            const T* ar = a + static_cast<std::size_t>(r) * depth;
            for (int k = 0; k < depth; ++k)
                axpy_fixed<W>(o, ar[k], b + static_cast<std::size_t>(k) * W);
        }
    };
    switch (width) {
        case 8: run.template operator()<8>(); return;
        case 16: run.template operator()<16>(); return;
        case 32: run.template operator()<32>(); return;
        case 64: run.template operator()<64>(); return;
        default: break;
    }
    for (int r = 0; r < rows; ++r) {
        T* o = out + static_cast<std::size_t>(r) * width;
        if (init != nullptr)
            std::copy(init, init + width, o);
        else
            std::fill(o, o + width, T{0});
        const T* ar = a + static_cast<std::size_t>(r) * depth;
        for (int k = 0; k < depth; ++k)
            axpy(o, ar[k], b + static_cast<std::size_t>(k) * width, width);
    }
}

// Unfolds one sample into a (out_h * out_w) x patch matrix.
template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* cols)
{
    const int oh = g.out_h();
    const int ow = g.out_w();
    const int patch = g.patch();
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            T* dst = cols + static_cast<std::size_t>(y * ow + x) * patch;
            for (int ky = 0; ky < g.kernel; ++ky) {
                const int iy = y * g.stride + ky - g.padding;
                for (int kx = 0; kx < g.kernel; ++kx) {
                    const int ix = x * g.stride + kx - g.padding;
                    T* d = dst + (ky * g.kernel + kx) * g.in_c;
                    if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) {
                        std::fill(d, d + g.in_c, T{0});
                    } else {
                        const T* s = image + (static_cast<std::size_t>(iy) * g.in_w + ix) * g.in_c;
                        std::copy(s, s + g.in_c, d);
                    }
                }
            }
        }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* cols, T* image)
{
    const int oh = g.out_h();
    const int ow = g.out_w();
    const int patch = g.patch();
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            const T* src = cols + static_cast<std::size_t>(y * ow + x) * patch;
            for (int ky = 0; ky < g.kernel; ++ky) {
                const int iy = y * g.stride + ky - g.padding;
                if (iy < 0 || iy >= g.in_h)
                    continue;
                for (int kx = 0; kx < g.kernel; ++kx) {
                    const int ix = x * g.stride + kx - g.padding;
                    if (ix < 0 || ix >= g.in_w)
                        continue;
                    const T* s = src + (ky * g.kernel + kx) * g.in_c;
                    T* d = image + (static_cast<std::size_t>(iy) * g.in_w + ix) * g.in_c;
                    for (int c = 0; c < g.in_c; ++c)
                        d[c] += s[c];
                }
            }
        }
}

template <typename T>
std::vector<T> transpose(const T* src, int rows, int cols)
{
    std::vector<T> out(static_cast<std::size_t>(rows) * cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            out[static_cast<std::size_t>(c) * rows + r] = src[static_cast<std::size_t>(r) * cols + c];
    return out;
}

}  // namespace

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> output)
{
    const int positions = g.out_h() * g.out_w();
    const int patch = g.patch();
    const std::vector<T> wt = transpose(weight.data(), g.out_c, patch);
    const std::size_t in_stride = static_cast<std::size_t>(g.in_h) * g.in_w * g.in_c;
    const std::size_t out_stride = static_cast<std::size_t>(positions) * g.out_c;

#pragma omp parallel
    {
        std::vector<T> cols(static_cast<std::size_t>(positions) * patch);
#pragma omp for schedule(static)
        for (int n = 0; n < g.batch; ++n) {
            im2col(g, input.data() + n * in_stride, cols.data());
            rows_times_matrix(positions, patch, g.out_c, cols.data(), wt.data(), bias.data(),
                              output.data() + n * out_stride);
        }
    }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_out, std::span<const T> weight,
                           std::span<T> grad_in)
{
    const int positions = g.out_h() * g.out_w();
    const int patch = g.patch();
    const std::size_t in_stride = static_cast<std::size_t>(g.in_h) * g.in_w * g.in_c;
    const std::size_t out_stride = static_cast<std::size_t>(positions) * g.out_c;

#pragma omp parallel
    {
        std::vector<T> cols(static_cast<std::size_t>(positions) * patch);
#pragma omp for schedule(static)
        for (int n = 0; n < g.batch; ++n) {
            rows_times_matrix(positions, g.out_c, patch, grad_out.data() + n * out_stride, weight.data(),
                              static_cast<const T*>(nullptr), cols.data());
            T* img = grad_in.data() + n * in_stride;
            std::fill(img, img + in_stride, T{0});
            col2im_add(g, cols.data(), img);
        }
    }
}

template <typename T>
void conv2d_backward_params(const ConvGeometry& g, std::span<const T> input, std::span<const T> grad_out,
                            std::span<T> grad_weight, std::span<T> grad_bias)
{
    const int positions = g.out_h() * g.out_w();
    const int patch = g.patch();
    const std::size_t in_stride = static_cast<std::size_t>(g.in_h) * g.in_w * g.in_c;
    const std::size_t out_stride = static_cast<std::size_t>(positions) * g.out_c;
    const std::size_t wsize = static_cast<std::size_t>(patch) * g.out_c;

    // Per-sample partials, reduced in sample order afterwards.
    std::vector<T> partial(static_cast<std::size_t>(g.batch) * wsize);

#pragma omp parallel
    {
        std::vector<T> cols(static_cast<std::size_t>(positions) * patch);
#pragma omp for schedule(static)
        for (int n = 0; n < g.batch; ++n) {
            im2col(g, input.data() + n * in_stride, cols.data());
            const T* go = grad_out.data() + n * out_stride;
            T* acc = partial.data() + n * wsize;  // patch x out_c
            std::fill(acc, acc + wsize, T{0});
            auto accumulate = [&]<int W>() {
                for (int p = 0; p < positions; ++p) {
                    const T* c = cols.data() + static_cast<std::size_t>(p) * patch;
                    const T* gp = go + static_cast<std::size_t>(p) * W;
                    for (int k = 0; k < patch; ++k)
                        axpy_fixed<W>(acc + static_cast<std::size_t>(k) * W, c[k], gp);
                }
            };
            switch (g.out_c) {
                case 8: accumulate.template operator()<8>(); break;
                case 16: accumulate.template operator()<16>(); break;
                case 32: accumulate.template operator()<32>(); break;
                case 64: accumulate.template operator()<64>(); break;
                default:
                    for (int p = 0; p < positions; ++p) {
                        const T* c = cols.data() + static_cast<std::size_t>(p) * patch;
                        const T* gp = go + static_cast<std::size_t>(p) * g.out_c;
                        for (int k = 0; k < patch; ++k)
                            axpy(acc + static_cast<std::size_t>(k) * g.out_c, c[k], gp, g.out_c);
                    }
            }
        }
    }

#pragma omp parallel for schedule(static)
    for (int o = 0; o < g.out_c; ++o) {
        for (int k = 0; k < patch; ++k) {
            T s = 0;
            for (int n = 0; n < g.batch; ++n)
                s += partial[n * wsize + static_cast<std::size_t>(k) * g.out_c + o];
            grad_weight[static_cast<std::size_t>(o) * patch + k] = s;
        }
        T b = 0;
        for (int n = 0; n < g.batch; ++n)
            for (int p = 0; p < positions; ++p)
                b += grad_out[n * out_stride + static_cast<std::size_t>(p) * g.out_c + o];
        grad_bias[o] = b;
    }
}

template <typename T>
void dense_forward(int batch, int in, int out, std::span<const T> input, std::span<const T> weight,
                   std::span<const T> bias, std::span<T> output)
{
#pragma omp parallel for schedule(static)
    for (int o = 0; o < out; ++o) {
        const T* w = weight.data() + static_cast<std::size_t>(o) * in;
        int n = 0;
        for (; n + 4 <= batch; n += 4) {
            const T* x0 = input.data() + static_cast<std::size_t>(n) * in;
            const T* x1 = x0 + in;
            const T* x2 = x1 + in;
            const T* x3 = x2 + in;
            T a0 = 0, a1 = 0, a2 = 0, a3 = 0;
#pragma omp simd reduction(+ : a0, a1, a2, a3)
            for (int i = 0; i < in; ++i) {
                a0 += w[i] * x0[i];
                a1 += w[i] * x1[i];
                a2 += w[i] * x2[i];
                a3 += w[i] * x3[i];
            }
            output[static_cast<std::size_t>(n) * out + o] = bias[o] + a0;
            output[static_cast<std::size_t>(n + 1) * out + o] = bias[o] + a1;
            output[static_cast<std::size_t>(n + 2) * out + o] = bias[o] + a2;
            output[static_cast<std::size_t>(n + 3) * out + o] = bias[o] + a3;
        }
        for (; n < batch; ++n)
            output[static_cast<std::size_t>(n) * out + o] =
                bias[o] + dot(w, input.data() + static_cast<std::size_t>(n) * in, in);
    }
}

template <typename T>
void dense_backward_input(int batch, int in, int out, std::span<const T> grad_out, std::span<const T> weight,
                          std::span<T> grad_in)
{
    constexpr int kBlock = 512;
    const int blocks = (in + kBlock - 1) / kBlock;
    std::fill(grad_in.begin(), grad_in.end(), T{0});
#pragma omp parallel for schedule(static)
    for (int b = 0; b < blocks; ++b) {
        const int lo = b * kBlock;
        const int width = std::min(kBlock, in - lo);
        int o = 0;
        for (; o + 4 <= out; o += 4) {
            const T* w0 = weight.data() + static_cast<std::size_t>(o) * in + lo;
            const T* w1 = w0 + in;
            const T* w2 = w1 + in;
            const T* w3 = w2 + in;
            for (int n = 0; n < batch; ++n) {
                const T* gn = grad_out.data() + static_cast<std::size_t>(n) * out + o;
                T* dst = grad_in.data() + static_cast<std::size_t>(n) * in + lo;
                const T g0 = gn[0], g1 = gn[1], g2 = gn[2], g3 = gn[3];
#pragma omp simd
                for (int i = 0; i < width; ++i)
                    dst[i] += g0 * w0[i] + g1 * w1[i] + g2 * w2[i] + g3 * w3[i];
            }
        }
        for (; o < out; ++o) {
            const T* w = weight.data() + static_cast<std::size_t>(o) * in + lo;
            for (int n = 0; n < batch; ++n)
                axpy(grad_in.data() + static_cast<std::size_t>(n) * in + lo,
                     grad_out[static_cast<std::size_t>(n) * out + o], w, width);
        }
    }
}

template <typename T>
void dense_backward_params(int batch, int in, int out, std::span<const T> input, std::span<const T> grad_out,
                           std::span<T> grad_weight, std::span<T> grad_bias)
{
#pragma omp parallel for schedule(static)
    for (int o = 0; o < out; ++o) {
        T* gw = grad_weight.data() + static_cast<std::size_t>(o) * in;
        std::fill(gw, gw + in, T{0});
        T gb = 0;
        int n = 0;
        for (; n + 4 <= batch; n += 4) {
            const T g0 = grad_out[static_cast<std::size_t>(n) * out + o];
            const T g1 = grad_out[static_cast<std::size_t>(n + 1) * out + o];
            const T g2 = grad_out[static_cast<std::size_t>(n + 2) * out + o];
            const T g3 = grad_out[static_cast<std::size_t>(n + 3) * out + o];
            gb += g0 + g1 + g2 + g3;
            const T* x0 = input.data() + static_cast<std::size_t>(n) * in;
            const T* x1 = x0 + in;
            const T* x2 = x1 + in;
            const T* x3 = x2 + in;
#pragma omp simd
            for (int i = 0; i < in; ++i)
                gw[i] += g0 * x0[i] + g1 * x1[i] + g2 * x2[i] + g3 * x3[i];
        }
        for (; n < batch; ++n) {
            const T g = grad_out[static_cast<std::size_t>(n) * out + o];
            gb += g;
            axpy(gw, g, input.data() + static_cast<std::size_t>(n) * in, in);
        }
        grad_bias[o] = gb;
    }
}

template <typename T>
void maxpool_forward(const PoolGeometry& g, std::span<const T> input, std::span<T> output,
                     std::span<std::int32_t> argmax)
{
    const int oh = g.out_h();
    const int ow = g.out_w();
#pragma omp parallel for schedule(static)
    for (int n = 0; n < g.batch; ++n)
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
                const int out_base = ((n * oh + y) * ow + x) * g.channels;
                const int first = ((n * g.in_h + y * g.stride) * g.in_w + x * g.stride) * g.channels;
                for (int c = 0; c < g.channels; ++c) {
                    output[out_base + c] = input[first + c];
                    argmax[out_base + c] = first + c;
                }
                for (int py = 0; py < g.size; ++py)
                    for (int px = 0; px < g.size; ++px) {
                        const int base =
                            ((n * g.in_h + y * g.stride + py) * g.in_w + x * g.stride + px) * g.channels;
                        for (int c = 0; c < g.channels; ++c)
                            if (input[base + c] > output[out_base + c]) {
                                output[out_base + c] = input[base + c];
                                argmax[out_base + c] = base + c;
                            }
                    }
            }
}

template <typename T>
void maxpool_backward(const PoolGeometry& g, std::span<const T> grad_out, std::span<const std::int32_t> argmax,
                      std::span<T> grad_in)
{
    const std::size_t out_stride = static_cast<std::size_t>(g.out_h()) * g.out_w() * g.channels;
    std::fill(grad_in.begin(), grad_in.end(), T{0});
    // argmax of sample n always points inside sample n, so samples are disjoint.
#pragma omp parallel for schedule(static)
    for (int n = 0; n < g.batch; ++n) {
        for (std::size_t i = n * out_stride; i < (n + 1) * out_stride; ++i)
            grad_in[argmax[i]] += grad_out[i];
    }
}

template <typename T>
void relu_forward(std::span<const T> input, std::span<T> output)
{
    const std::size_t n = input.size();
#pragma omp parallel for simd schedule(static)
    for (std::size_t i = 0; i < n; ++i)
        output[i] = input[i] > T{0} ? input[i] : T{0};
}

template <typename T>
void relu_backward(std::span<const T> input, std::span<const T> grad_out, std::span<T> grad_in)
{
    const std::size_t n = input.size();
#pragma omp parallel for simd schedule(static)
    for (std::size_t i = 0; i < n; ++i)
        grad_in[i] = input[i] > T{0} ? grad_out[i] : T{0};
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
                                      std::span<T>);                                                                 \
    template void relu_forward<T>(std::span<const T>, std::span<T>);                                                 \
    template void relu_backward<T>(std::span<const T>, std::span<const T>, std::span<T>);

TROJANSCOPE_INSTANTIATE(float)
TROJANSCOPE_INSTANTIATE(double)

}  // namespace trojanscope::kernels
