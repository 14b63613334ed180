#include "trojanscope/fingerprint.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "trojanscope/model_io.hpp"
#include "trojanscope/rng.hpp"

namespace trojanscope {

using nlohmann::json;

Tensor to_grayscale(const Tensor& delta)
{
    if (delta.rank() != 3)
        throw std::invalid_argument("to_grayscale expects H x W x C, got " + shape_string(delta.shape()));
    const int h = delta.dim(0), w = delta.dim(1), c = delta.dim(2);
    if (c == 1)
        return delta;
    if (c != 3)
        throw std::invalid_argument("to_grayscale supports 1 or 3 channels, got " + std::to_string(c));
    Tensor out({h, w, 1});
    for (int i = 0; i < h * w; ++i)
        out[i] = static_cast<float>(0.299 * delta[3 * i] + 0.587 * delta[3 * i + 1] + 0.114 * delta[3 * i + 2]);
    return out;
}

EnergyWindow max_energy_window(const Tensor& gray, int side, int stride)
{
    if (gray.empty())
        throw std::invalid_argument("max_energy_window: empty map");
    if (gray.rank() != 3 || gray.dim(2) != 1)
        throw std::invalid_argument("max_energy_window expects an H x W x 1 map, got " + shape_string(gray.shape()));
    if (side <= 0 || stride <= 0)
        throw std::invalid_argument("max_energy_window: side and stride must be positive");
    const int h = gray.dim(0), w = gray.dim(1);
    const int s = std::min({side, h, w});

    EnergyWindow best;
    best.side = s;
    double best_sum = -1;
    for (int r = 0; r + s <= h; r += stride)
        for (int c = 0; c + s <= w; c += stride) {
            double sum = 0;
            for (int y = r; y < r + s; ++y)
                for (int x = c; x < c + s; ++x)
                    sum += std::abs(static_cast<double>(gray[y * w + x]));
            if (sum > best_sum) {
                best_sum = sum;
                best.row = r;
                best.col = c;
            }
        }
    best.values.assign(static_cast<std::size_t>(side) * side, 0.0f);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x)
            best.values[y * s + x] = std::abs(gray[(best.row + y) * w + best.col + x]);
    return best;
}

Tensor perturbation_image(const Tensor& delta, int size)
{
    if (delta.rank() != 3)
        throw std::invalid_argument("perturbation_image expects H x W x C");
    const int h = delta.dim(0), w = delta.dim(1), c = delta.dim(2);
    const auto [lo_it, hi_it] = std::minmax_element(delta.values().begin(), delta.values().end());
    const float lo = *lo_it, range = *hi_it - *lo_it;
    Tensor out({size, size, c});
    for (int y = 0; y < size; ++y) {
        const int sy = std::min(h - 1, y * h / size);
        for (int x = 0; x < size; ++x) {
            const int sx = std::min(w - 1, x * w / size);
            for (int k = 0; k < c; ++k) {
                const float v = delta[(sy * w + sx) * c + k];
                out[(y * size + x) * c + k] = range > 0 ? (v - lo) / range : 0.0f;
            }
        }
    }
    return out;
}

std::vector<std::vector<int>> split_batches(int pool_size, int batches, std::uint64_t seed)
{
    if (batches <= 0)
        throw std::invalid_argument("split_batches: batch count must be positive");
    const int batch_size = pool_size / batches;
    if (batch_size == 0)
        throw std::invalid_argument("clean pool of " + std::to_string(pool_size) + " images cannot fill " +
                                    std::to_string(batches) + " batches");
    std::vector<int> idx(pool_size);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<std::vector<int>> out(batches);
    for (int b = 0; b < batches; ++b) {
        out[b].assign(idx.begin() + b * batch_size, idx.begin() + (b + 1) * batch_size);
        std::sort(out[b].begin(), out[b].end());
    }
    return out;
}

StreamFeatures stream_features(const PerturbationArtifact& artifact, const FingerprintConfig& config)
{
    StreamFeatures s;
    s.window = max_energy_window(to_grayscale(artifact.delta), config.window, config.stride);
    s.image = perturbation_image(artifact.delta, config.image_size);
    s.gamma = artifact.gamma;
    s.eta = artifact.eta;
    s.energy = artifact.energy;
    s.degenerate = artifact.degenerate || artifact.zero_fooling;
    return s;
}

FingerprintSet build_fingerprints(const ModelGraph& model, const LabeledDataset& clean_pool,
                                  const FingerprintConfig& config)
{
    const auto groups = split_batches(clean_pool.size(), config.batches, derive_seed(config.seed, "fingerprint-batches"));
    FingerprintSet set;
    for (int b = 0; b < config.batches; ++b) {
        const Tensor batch = clean_pool.batch(groups[b]);
        UniversalConfig uc;
        uc.delta = config.delta;
        uc.deepfool = config.deepfool;

        uc.norm = NormKind::linf;
        uc.xi = config.xi_linf;
        uc.max_outer = config.max_outer_linf;
        uc.seed = derive_seed(config.seed, "uap-linf", {static_cast<std::uint64_t>(b)});
        set.linf.push_back(universal_perturbation(model, batch, uc));

        uc.norm = NormKind::l2;
        uc.xi = config.xi_l2;
        uc.max_outer = config.max_outer_l2;
        uc.seed = derive_seed(config.seed, "uap-l2", {static_cast<std::uint64_t>(b)});
        set.l2.push_back(universal_perturbation(model, batch, uc));

        set.fingerprints.push_back({b, stream_features(set.linf.back(), config), stream_features(set.l2.back(), config)});
    }
    return set;
}

json fingerprint_index(const FingerprintSet& set, const json& extra)
{
    auto stream = [](const StreamFeatures& s) {
        return json{{"window_row", s.window.row},
                    {"window_col", s.window.col},
                    {"window_side", s.window.side},
                    {"gamma", std::isfinite(s.gamma) ? json(s.gamma) : json(nullptr)},
                    {"eta", s.eta},
                    {"energy", s.energy},
                    {"degenerate", s.degenerate}};
    };
    json fps = json::array();
    for (const auto& f : set.fingerprints)
        fps.push_back({{"batch", f.batch_index}, {"linf", stream(f.linf)}, {"l2", stream(f.l2)}});
    json j = extra;
    j["fingerprints"] = fps;
    return j;
}

void save_fingerprints(const std::filesystem::path& dir, const FingerprintSet& set, const FingerprintConfig& config,
                       const json& extra)
{
    (void)config;
    for (std::size_t b = 0; b < set.fingerprints.size(); ++b) {
        save_artifact(dir / ("batch" + std::to_string(b) + "_linf"), set.linf[b]);
        save_artifact(dir / ("batch" + std::to_string(b) + "_l2"), set.l2[b]);
    }
    // The index goes last: its presence marks a complete set.
    write_text(dir / "index.json", fingerprint_index(set, extra).dump(2) + "\n");
}

FingerprintSet load_fingerprints(const std::filesystem::path& dir, const FingerprintConfig& config)
{
    const json index = json::parse(read_text(dir / "index.json"));
    FingerprintSet set;
    for (const auto& f : index.at("fingerprints")) {
        const int b = f.at("batch").get<int>();
        set.linf.push_back(load_artifact(dir / ("batch" + std::to_string(b) + "_linf")));
        set.l2.push_back(load_artifact(dir / ("batch" + std::to_string(b) + "_l2")));
        set.fingerprints.push_back({b, stream_features(set.linf.back(), config), stream_features(set.l2.back(), config)});
    }
    return set;
}

}  // namespace trojanscope
