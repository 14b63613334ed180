#include <cmath>
#include <stdexcept>

#include "trojanscope/diffnet.hpp"

namespace trojanscope {

void adam_step(std::vector<std::span<float>> params, std::vector<std::span<const float>> grads, AdamState& state,
               const AdamConfig& config)
{
    if (params.size() != grads.size())
        throw std::invalid_argument("adam_step: parameter and gradient lists differ in length");
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.size(), 0.0f);
            state.v.emplace_back(p.size(), 0.0f);
        }
    }
    if (state.m.size() != params.size())
        throw std::invalid_argument("adam_step: optimizer state does not match parameter list");

    state.step += 1;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
    const float b1 = static_cast<float>(config.beta1);
    const float b2 = static_cast<float>(config.beta2);
    const float step = static_cast<float>(config.lr / bc1);
    const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
    const float eps = static_cast<float>(config.eps);

    for (std::size_t t = 0; t < params.size(); ++t) {
        std::span<float> p = params[t];
        std::span<const float> g = grads[t];
        if (p.size() != g.size() || state.m[t].size() != p.size())
            throw std::invalid_argument("adam_step: shape mismatch in tensor " + std::to_string(t));
        float* m = state.m[t].data();
        float* v = state.v[t].data();
        const std::size_t n = p.size();
#pragma omp parallel for simd schedule(static)
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = b1 * m[i] + (1.0f - b1) * g[i];
            v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
            p[i] -= step * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
        }
    }
}

std::vector<std::span<float>> param_views(ModelGraph& model)
{
    std::vector<std::span<float>> out;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        if (!model.layers[i].has_params())
            continue;
        out.push_back(model.params[i].weight.values());
        out.push_back(model.params[i].bias.values());
    }
    return out;
}

std::vector<std::span<const float>> param_views(const ParamSet<float>& grads)
{
    std::vector<std::span<const float>> out;
    for (const auto& p : grads) {
        if (p.weight.empty())
            continue;
        out.push_back(p.weight.values());
        out.push_back(p.bias.values());
    }
    return out;
}

}  // namespace trojanscope
