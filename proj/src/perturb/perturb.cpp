#include "trojanscope/perturb.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <stdexcept>

#include "trojanscope/model_io.hpp"
#include "trojanscope/training.hpp"

namespace trojanscope {

using nlohmann::json;

std::string to_string(NormKind kind) { return kind == NormKind::linf ? "linf" : "l2"; }

NormKind parse_norm_kind(const std::string& name)
{
    if (name == "linf")
        return NormKind::linf;
    if (name == "l2")
        return NormKind::l2;
    throw std::invalid_argument("unknown norm '" + name + "'");
}

namespace {

std::vector<int> item_shape_of(const Tensor& image)
{
    std::vector<int> shape = image.shape();
    if (shape.size() == 4 && shape[0] == 1)
        shape.erase(shape.begin());
    if (shape.size() != 3)
        throw std::invalid_argument("expected a single H x W x C image, got " + shape_string(image.shape()));
    return shape;
}

std::vector<int> with_batch(int n, const std::vector<int>& shape)
{
    std::vector<int> out{n};
    out.insert(out.end(), shape.begin(), shape.end());
    return out;
}

void clamp01(std::span<float> v)
{
    for (float& x : v)
        x = std::clamp(x, 0.0f, 1.0f);
}

int argmax(std::span<const float> v)
{
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

DeepFoolResult deepfool(const ModelGraph& model, const Tensor& image, const DeepFoolConfig& config)
{
    const auto item = item_shape_of(image);
    const int classes = model.num_classes();
    if (classes < 2)
        throw std::invalid_argument("deepfool needs at least two classes");
    const std::size_t dim = image.size();
    const Tensor x0(with_batch(1, item), image.storage());

    DeepFoolResult res;
    res.v = Tensor(item);
    std::vector<double> r_tot(dim, 0.0);
    const double scale = 1.0 + config.overshoot;

    Tape<float> tape = forward_tape(model, x0);
    res.original_label = argmax(tape.values.back().values());
    int label = res.original_label;
    std::vector<Tensor> grads(classes);
    Tensor onehot({1, classes});
    Tensor xi = x0;

    while (label == res.original_label && res.iterations < config.max_iterations) {
        for (int k = 0; k < classes; ++k) {
            onehot.fill(0.0f);
            onehot[k] = 1.0f;
            grads[k] = backward(model, tape, onehot, GradientTargets::input).input;
        }
        const auto z = tape.values.back().values();
        const int k0 = res.original_label;
        double best = std::numeric_limits<double>::infinity();
        int best_k = -1;
        double best_norm = 0;
        for (int k = 0; k < classes; ++k) {
            if (k == k0)
                continue;
            double n2 = 0;
            for (std::size_t e = 0; e < dim; ++e) {
                const double w = static_cast<double>(grads[k][e]) - grads[k0][e];
                n2 += w * w;
            }
            if (n2 == 0)
                continue;
            const double nw = std::sqrt(n2);
            const double pert = std::abs(static_cast<double>(z[k]) - z[k0]) / nw;
            if (pert < best) {
                best = pert;
                best_k = k;
                best_norm = nw;
            }
        }
        if (best_k < 0) {
            res.degenerate = true;
            std::fill(r_tot.begin(), r_tot.end(), 0.0);
            break;
        }
        const double coef = (best + 1e-4) / best_norm;
        for (std::size_t e = 0; e < dim; ++e)
            r_tot[e] += coef * (static_cast<double>(grads[best_k][e]) - grads[k0][e]);
        for (std::size_t e = 0; e < dim; ++e)
            xi[e] = static_cast<float>(x0[e] + scale * r_tot[e]);
        clamp01(xi.values());
        tape = forward_tape(model, xi);
        label = argmax(tape.values.back().values());
        ++res.iterations;
    }
    for (std::size_t e = 0; e < dim; ++e)
        res.v[e] = static_cast<float>(scale * r_tot[e]);
    res.final_label = label;
    res.converged = !res.degenerate && label != res.original_label;
    return res;
}

Tensor project(const Tensor& delta, NormKind norm, double xi)
{
    if (!(xi > 0))
        throw std::invalid_argument("projection radius must be positive");
    Tensor out = delta;
    if (norm == NormKind::linf) {
        const float b = static_cast<float>(xi);
        for (float& v : out.values())
            v = std::clamp(v, -b, b);
    } else {
        const double n = norm_of(delta, NormKind::l2);
        if (n > xi) {
            const double s = xi / n;
            for (float& v : out.values())
                v = static_cast<float>(v * s);
        }
    }
    return out;
}

double norm_of(const Tensor& delta, NormKind norm)
{
    double acc = 0;
    for (float v : delta.values())
        acc = norm == NormKind::linf ? std::max(acc, static_cast<double>(std::abs(v))) : acc + double(v) * v;
    return norm == NormKind::linf ? acc : std::sqrt(acc);
}

double perturbation_energy(const Tensor& delta)
{
    double acc = 0;
    for (float v : delta.values())
        acc += std::abs(static_cast<double>(v));
    return acc;
}

double fooling_rate(const ModelGraph& model, const Tensor& images, const Tensor& delta)
{
    const int n = images.dim(0);
    const std::size_t stride = images.size() / n;
    if (delta.size() != stride)
        throw std::invalid_argument("perturbation size does not match the images");
    Tensor shifted = images;
    for (int i = 0; i < n; ++i) {
        auto row = shifted.row(i);
        for (std::size_t e = 0; e < stride; ++e)
            row[e] += delta[e];
        clamp01(row);
    }
    const auto before = predict(model, images);
    const auto after = predict(model, shifted);
    int flipped = 0;
    for (int i = 0; i < n; ++i)
        flipped += before[i] != after[i];
    return static_cast<double>(flipped) / n;
}

double attack_difficulty(double energy, double rate)
{
    if (energy < 0)
        throw std::invalid_argument("perturbation energy must be non-negative");
    if (!(rate >= 0 && rate <= 1))
        throw std::invalid_argument("success rate must lie in [0,1]");
    return rate == 0 ? infinite_difficulty : energy / rate;
}

PerturbationArtifact universal_perturbation(const ModelGraph& model, const Tensor& samples,
                                            const UniversalConfig& config)
{
    if (samples.rank() != 4 || samples.dim(0) == 0)
        throw std::invalid_argument("universal_perturbation needs an N x H x W x C sample batch");
    if (config.max_outer <= 0 || !(config.delta >= 0 && config.delta < 1))
        throw std::invalid_argument("universal_perturbation: bad stopping rule");
    const int n = samples.dim(0);
    const std::vector<int> item(samples.shape().begin() + 1, samples.shape().end());
    const std::size_t stride = samples.size() / n;
    const auto labels = predict(model, samples);

    PerturbationArtifact art;
    art.norm = config.norm;
    art.xi = config.xi;
    Tensor delta(item);
    Tensor best = delta;
    double best_eta = -1;
    bool saw_gradient = false;

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(config.seed);
    Tensor x(with_batch(1, item));

    for (int outer = 0; outer < config.max_outer; ++outer) {
        std::shuffle(order.begin(), order.end(), rng);
        OuterIteration it;
        for (int i : order) {
            auto src = samples.row(i);
            for (std::size_t e = 0; e < stride; ++e)
                x[e] = src[e] + delta[e];
            clamp01(x.values());
            if (argmax(forward(model, x).values()) != labels[i])
                continue;
            const DeepFoolResult df = deepfool(model, x, config.deepfool);
            saw_gradient = saw_gradient || !df.degenerate;
            if (!df.converged)
                continue;
            for (std::size_t e = 0; e < stride; ++e)
                delta[e] += df.v[e];
            delta = project(delta, config.norm, config.xi);
            ++it.updates;
        }
        it.eta = fooling_rate(model, samples, delta);
        it.accepted = it.eta >= best_eta;
        if (it.accepted) {
            best_eta = it.eta;
            best = delta;
        }
        art.history.push_back(it);
        if (it.eta >= 1.0 - config.delta)
            break;
    }
    art.delta = std::move(best);
    art.eta = best_eta;
    art.outer_iterations = static_cast<int>(art.history.size());
    art.energy = perturbation_energy(art.delta);
    art.gamma = attack_difficulty(art.energy, art.eta);
    art.degenerate = !saw_gradient;
    art.zero_fooling = art.eta == 0;
    return art;
}

json artifact_metadata(const PerturbationArtifact& a)
{
    json history = json::array();
    for (const auto& h : a.history)
        history.push_back({{"eta", h.eta}, {"accepted", h.accepted}, {"updates", h.updates}});
    return {{"norm", to_string(a.norm)},
            {"xi", a.xi},
            {"eta", a.eta},
            {"outer_iterations", a.outer_iterations},
            {"energy", a.energy},
            {"gamma", std::isfinite(a.gamma) ? json(a.gamma) : json(nullptr)},
            {"degenerate", a.degenerate},
            {"zero_fooling", a.zero_fooling},
            {"shape", a.delta.shape()},
            {"history", history}};
}

void save_artifact(const std::filesystem::path& stem, const PerturbationArtifact& artifact)
{
    static_assert(std::endian::native == std::endian::little, "artifact blocks are little-endian float32");
    const auto values = artifact.delta.values();
    std::vector<std::uint8_t> raw(values.size() * sizeof(float));
    std::memcpy(raw.data(), values.data(), raw.size());
    write_bytes(stem.string() + ".bin", raw);
    write_text(stem.string() + ".json", artifact_metadata(artifact).dump(2) + "\n");
}

PerturbationArtifact load_artifact(const std::filesystem::path& stem)
{
    const json j = json::parse(read_text(stem.string() + ".json"));
    PerturbationArtifact a;
    a.norm = parse_norm_kind(j.at("norm").get<std::string>());
    a.xi = j.at("xi").get<double>();
    a.eta = j.at("eta").get<double>();
    a.outer_iterations = j.at("outer_iterations").get<int>();
    a.energy = j.at("energy").get<double>();
    a.gamma = j.at("gamma").is_null() ? infinite_difficulty : j.at("gamma").get<double>();
    a.degenerate = j.at("degenerate").get<bool>();
    a.zero_fooling = j.at("zero_fooling").get<bool>();
    for (const auto& h : j.at("history"))
        a.history.push_back({h.at("eta").get<double>(), h.at("accepted").get<bool>(), h.at("updates").get<int>()});
    a.delta = Tensor(j.at("shape").get<std::vector<int>>());
    const auto raw = read_bytes(stem.string() + ".bin");
    if (raw.size() != a.delta.size() * sizeof(float))
        throw std::runtime_error("perturbation block " + stem.string() + ".bin has the wrong size");
    std::memcpy(a.delta.data(), raw.data(), raw.size());
    return a;
}

Tensor fgsm_step(const ModelGraph& model, const Tensor& batch, int target, double epsilon)
{
    const std::vector<int> labels(batch.dim(0), target);
    Tensor g = grad_input(model, batch, labels);
    const float eps = static_cast<float>(epsilon);
    for (float& v : g.values())
        v = v > 0 ? -eps : (v < 0 ? eps : 0.0f);
    return g;
}

TargetedAttackResult fgsm_targeted(const ModelGraph& model, const LabeledDataset& samples, int target,
                                   const FgsmConfig& config)
{
    if (target < 0 || target >= model.num_classes())
        throw std::invalid_argument("target class out of range");
    TargetedAttackResult res;
    res.target_class = target;
    std::vector<int> idx;
    for (int i = 0; i < samples.size(); ++i)
        if (samples.labels[i] != target)
            idx.push_back(i);
    res.attacked = static_cast<int>(idx.size());
    if (idx.empty())
        return res;

    const Tensor x0 = samples.batch(idx);
    Tensor x = x0;
    const int n = res.attacked;
    const std::size_t stride = x.size() / n;
    std::vector<char> hit(n, 0);
    std::vector<int> active;
    for (int step = 0;; ++step) {
        const auto pred = predict(model, x);
        active.clear();
        for (int i = 0; i < n; ++i) {
            hit[i] = pred[i] == target;
            if (!hit[i])
                active.push_back(i);
        }
        if (active.empty() || step == config.max_steps)
            break;
        std::vector<int> shape = x.shape();
        shape[0] = static_cast<int>(active.size());
        Tensor sub(shape);
        for (std::size_t a = 0; a < active.size(); ++a)
            std::copy_n(x.row(active[a]).data(), stride, sub.row(static_cast<int>(a)).data());
        const Tensor s = fgsm_step(model, sub, target, config.epsilon);
        for (std::size_t a = 0; a < active.size(); ++a) {
            auto row = x.row(active[a]);
            auto d = s.row(static_cast<int>(a));
            for (std::size_t e = 0; e < stride; ++e)
                row[e] = std::clamp(row[e] + d[e], 0.0f, 1.0f);
        }
    }
    double energy = 0;
    int successes = 0;
    for (int i = 0; i < n; ++i) {
        successes += hit[i];
        for (std::size_t e = 0; e < stride; ++e)
            energy += std::abs(static_cast<double>(x.row(i)[e]) - x0.row(i)[e]);
    }
    res.mean_energy = energy / n;
    res.success_rate = static_cast<double>(successes) / n;
    res.sigma = attack_difficulty(res.mean_energy, res.success_rate);
    return res;
}

}  // namespace trojanscope
