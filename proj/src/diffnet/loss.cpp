#include <algorithm>
#include <cmath>

#include "trojanscope/diffnet.hpp"

namespace trojanscope {

template <typename T>
LossResult<T> evaluate_loss(const BasicTensor<T>& logits, std::span<const int> labels, LossSpec loss)
{
    if (logits.rank() != 2)
        throw std::invalid_argument("loss expects N x K logits, got " + shape_string(logits.shape()));
    const int n = logits.dim(0);
    const int k = logits.dim(1);
    if (static_cast<int>(labels.size()) != n)
        throw std::invalid_argument("loss: " + std::to_string(labels.size()) + " labels for a batch of " +
                                    std::to_string(n));

    LossResult<T> r;
    r.grad = BasicTensor<T>(logits.shape());
    double total = 0;
    if (loss.kind == LossKind::softmax_cross_entropy) {
        std::vector<double> p(k);
        for (int i = 0; i < n; ++i) {
            const int y = labels[i];
            if (y < 0 || y >= k)
                throw std::out_of_range("label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
            auto row = logits.row(i);
            const double mx = *std::max_element(row.begin(), row.end());
            double sum = 0;
            for (int j = 0; j < k; ++j) {
                p[j] = std::exp(static_cast<double>(row[j]) - mx);
                sum += p[j];
            }
            total += std::log(sum) + mx - static_cast<double>(row[y]);
            auto g = r.grad.row(i);
            for (int j = 0; j < k; ++j)
                g[j] = static_cast<T>((p[j] / sum - (j == y ? 1.0 : 0.0)) / n);
        }
    } else {
        if (k != 1)
            throw std::invalid_argument("binary cross-entropy requires a single logit per sample");
        for (int i = 0; i < n; ++i) {
            const int y = labels[i];
            if (y != 0 && y != 1)
                throw std::out_of_range("binary label must be 0 or 1, got " + std::to_string(y));
            const double z = logits[i];
            // softplus(z) - y z, stable for both signs
            total += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - y * z;
            const double s = 1.0 / (1.0 + std::exp(-z));
            r.grad[i] = static_cast<T>((s - y) / n);
        }
    }
    r.value = total / n;
    return r;
}

template <typename T>
BasicTensor<T> grad_input(const BasicModel<T>& model, const BasicTensor<T>& batch, std::span<const int> labels,
                          LossSpec loss)
{
    auto tape = forward_tape(model, batch);
    auto l = evaluate_loss(tape.values.back(), labels, loss);
    return backward(model, tape, l.grad, GradientTargets::input).input;
}

template <typename T>
ParamSet<T> grad_params(const BasicModel<T>& model, const BasicTensor<T>& batch, std::span<const int> labels,
                        LossSpec loss)
{
    auto tape = forward_tape(model, batch);
    auto l = evaluate_loss(tape.values.back(), labels, loss);
    return backward(model, tape, l.grad, GradientTargets::params).params;
}

TrainStepResult loss_and_param_grads(const ModelGraph& model, const Tensor& batch, std::span<const int> labels,
                                     LossSpec loss)
{
    auto tape = forward_tape(model, batch);
    auto l = evaluate_loss(tape.values.back(), labels, loss);
    TrainStepResult r;
    r.loss = l.value;
    const Tensor& logits = tape.values.back();
    if (loss.kind == LossKind::softmax_cross_entropy) {
        const auto p = argmax_rows(logits);
        for (std::size_t i = 0; i < p.size(); ++i)
            r.correct += p[i] == labels[i];
    } else {
        for (std::size_t i = 0; i < labels.size(); ++i)
            r.correct += (logits[i] >= 0.0f) == (labels[i] == 1);
    }
    r.grads = backward(model, tape, l.grad, GradientTargets::params).params;
    return r;
}

template LossResult<float> evaluate_loss<float>(const BasicTensor<float>&, std::span<const int>, LossSpec);
template LossResult<double> evaluate_loss<double>(const BasicTensor<double>&, std::span<const int>, LossSpec);
template BasicTensor<float> grad_input<float>(const BasicModel<float>&, const BasicTensor<float>&,
                                              std::span<const int>, LossSpec);
template BasicTensor<double> grad_input<double>(const BasicModel<double>&, const BasicTensor<double>&,
                                                std::span<const int>, LossSpec);
template ParamSet<float> grad_params<float>(const BasicModel<float>&, const BasicTensor<float>&, std::span<const int>,
                                            LossSpec);
template ParamSet<double> grad_params<double>(const BasicModel<double>&, const BasicTensor<double>&,
                                              std::span<const int>, LossSpec);

}  // namespace trojanscope
