#include "trojanscope/detector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

#include "trojanscope/model_io.hpp"
#include "trojanscope/rng.hpp"

namespace trojanscope {

using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

json finite_or_null(double v)
{
    return std::isfinite(v) ? json(v) : json(nullptr);
}

double number_or(const json& j, double fallback)
{
    return j.is_null() ? fallback : j.get<double>();
}

std::vector<LayerSpec> window_layers(const DetectorConfig& c)
{
    std::vector<LayerSpec> layers{LayerSpec::flatten()};
    int in = c.window_values;
    for (std::size_t i = 0; i < c.mlp_widths.size(); ++i) {
        if (i > 0)
            layers.push_back(LayerSpec::relu());
        layers.push_back(LayerSpec::dense(in, c.mlp_widths[i]));
        in = c.mlp_widths[i];
    }
    return layers;
}

std::vector<LayerSpec> embedding_layers(const DetectorConfig& c)
{
    const int channels = c.image_shape.at(2);
    std::vector<LayerSpec> layers{
        LayerSpec::conv2d(channels, 8, 3, 1, 1),  LayerSpec::relu(), LayerSpec::maxpool2d(2, 2),
        LayerSpec::conv2d(8, 16, 3, 1, 1),        LayerSpec::relu(), LayerSpec::maxpool2d(2, 2),
        LayerSpec::conv2d(16, 32, 3, 1, 1),       LayerSpec::relu(), LayerSpec::maxpool2d(2, 2),
        LayerSpec::flatten()};
    const auto shapes = layer_output_shapes(c.image_shape, layers);
    layers.push_back(LayerSpec::dense(static_cast<int>(shape_size(shapes.back())), c.embedding_dim));
    return layers;
}

std::vector<NormKind> enabled_norms(const DetectorConfig& c)
{
    std::vector<NormKind> norms;
    if (c.use_linf)
        norms.push_back(NormKind::linf);
    if (c.use_l2)
        norms.push_back(NormKind::l2);
    return norms;
}

const StreamFeatures& stream_of(const Fingerprint& f, NormKind norm)
{
    return norm == NormKind::linf ? f.linf : f.l2;
}

void check_config(const DetectorConfig& c)
{
    if (!c.use_linf && !c.use_l2)
        throw std::invalid_argument("detector needs at least one perturbation stream");
    if (c.mlp_widths.empty() || c.embedding_dim <= 0 || c.window_values <= 0 || c.image_shape.size() != 3)
        throw std::invalid_argument("detector layer sizes must be positive");
    if (c.batches_used <= 0 || c.batch_size <= 0 || c.epochs < 0 || c.folds < 2)
        throw std::invalid_argument("detector batch, epoch and fold counts out of range");
}

struct StreamTapes {
    Tape<float> window;
    Tape<float> embedding;
};

struct ForwardPass {
    std::vector<StreamTapes> streams;
    Tape<float> head;
};

ForwardPass forward_all(const DetectorModel& d, std::span<const Fingerprint* const> batch)
{
    const int n = static_cast<int>(batch.size());
    const int per_stream = d.config.stream_feature_size();
    const int f = d.config.head_inputs();
    const int v = d.config.window_values;
    const auto& ishape = d.config.image_shape;
    const std::size_t image_size = shape_size(ishape);

    ForwardPass pass;
    Tensor head_in({n, 1, 1, f});
    for (std::size_t s = 0; s < d.streams.size(); ++s) {
        const StreamNet& net = d.streams[s];
        Tensor windows({n, 1, 1, v});
        Tensor images({n, ishape[0], ishape[1], ishape[2]});
        for (int i = 0; i < n; ++i) {
            const StreamFeatures& sf = stream_of(*batch[i], net.norm);
            if (static_cast<int>(sf.window.values.size()) != v)
                throw std::invalid_argument("fingerprint window has " + std::to_string(sf.window.values.size()) +
                                            " values, detector expects " + std::to_string(v));
            if (sf.image.shape() != ishape)
                throw std::invalid_argument("fingerprint image shape " + shape_string(sf.image.shape()) +
                                            " does not match detector input " + shape_string(ishape));
            std::copy(sf.window.values.begin(), sf.window.values.end(), windows.data() + static_cast<std::size_t>(i) * v);
            std::copy_n(sf.image.data(), image_size, images.data() + i * image_size);
        }
        StreamTapes t{forward_tape(net.window, windows), forward_tape(net.embedding, images)};
        const Tensor& wo = t.window.values.back();
        const Tensor& eo = t.embedding.values.back();
        const int wn = d.config.mlp_widths.back(), en = d.config.embedding_dim;
        for (int i = 0; i < n; ++i) {
            float* row = head_in.data() + static_cast<std::size_t>(i) * f + s * per_stream;
            std::copy_n(wo.data() + static_cast<std::size_t>(i) * wn, wn, row);
            std::copy_n(eo.data() + static_cast<std::size_t>(i) * en, en, row + wn);
            if (d.config.use_gamma) {
                const double g = stream_of(*batch[i], net.norm).gamma;
                row[wn + en] = static_cast<float>((g - net.gamma.mean) / net.gamma.std);
            }
        }
        pass.streams.push_back(std::move(t));
    }
    pass.head = forward_tape(d.head, head_in);
    return pass;
}

struct SampleRef {
    const Fingerprint* fingerprint;
    int label;
};

double sigmoid(double z)
{
    return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

double mean_bce(const DetectorModel& d, std::span<const SampleRef> samples)
{
    if (samples.empty())
        return kNaN;
    std::vector<const Fingerprint*> fps;
    for (const auto& s : samples)
        fps.push_back(s.fingerprint);
    const auto logits = detector_logits(d, fps);
    double sum = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const double z = logits[i];
        // softplus(z) - y z, computed stably
        sum += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - samples[i].label * z;
    }
    return sum / static_cast<double>(samples.size());
}

std::vector<std::span<float>> all_params(DetectorModel& d)
{
    std::vector<std::span<float>> views;
    for (auto& s : d.streams) {
        for (auto v : param_views(s.window))
            views.push_back(v);
        for (auto v : param_views(s.embedding))
            views.push_back(v);
    }
    for (auto v : param_views(d.head))
        views.push_back(v);
    return views;
}

double train_step(DetectorModel& d, std::span<const SampleRef> batch, AdamState& adam)
{
    std::vector<const Fingerprint*> fps;
    std::vector<int> labels;
    for (const auto& s : batch) {
        fps.push_back(s.fingerprint);
        labels.push_back(s.label);
    }
    const int n = static_cast<int>(batch.size());
    ForwardPass pass = forward_all(d, fps);
    const auto loss = evaluate_loss(pass.head.values.back(), labels, {LossKind::binary_cross_entropy});
    const auto head_grads = backward(d.head, pass.head, loss.grad, GradientTargets::both);

    const int per_stream = d.config.stream_feature_size();
    const int f = d.config.head_inputs();
    const int wn = d.config.mlp_widths.back(), en = d.config.embedding_dim;
    std::vector<ParamSet<float>> grads;
    for (std::size_t s = 0; s < d.streams.size(); ++s) {
        Tensor gw({n, wn});
        Tensor ge({n, en});
        for (int i = 0; i < n; ++i) {
            const float* row = head_grads.input.data() + static_cast<std::size_t>(i) * f + s * per_stream;
            std::copy_n(row, wn, gw.data() + static_cast<std::size_t>(i) * wn);
            std::copy_n(row + wn, en, ge.data() + static_cast<std::size_t>(i) * en);
        }
        gw.reshape(pass.streams[s].window.values.back().shape());
        ge.reshape(pass.streams[s].embedding.values.back().shape());
        grads.push_back(backward(d.streams[s].window, pass.streams[s].window, gw, GradientTargets::params).params);
        grads.push_back(backward(d.streams[s].embedding, pass.streams[s].embedding, ge, GradientTargets::params).params);
    }
    grads.push_back(head_grads.params);

    std::vector<std::span<const float>> grad_views;
    for (const auto& g : grads)
        for (auto v : param_views(g))
            grad_views.push_back(v);
    adam_step(all_params(d), grad_views, adam, {.lr = d.config.lr});
    return loss.value;
}

std::vector<const Fingerprint*> front(const ModelFingerprints& m, int count)
{
    if (static_cast<int>(m.fingerprints.size()) < count)
        throw std::invalid_argument("model " + m.id + " has " + std::to_string(m.fingerprints.size()) +
                                    " fingerprints, detector uses " + std::to_string(count));
    std::vector<const Fingerprint*> out;
    for (int i = 0; i < count; ++i)
        out.push_back(&m.fingerprints[i]);
    return out;
}

GammaStats gamma_stats(std::span<const SampleRef> samples, NormKind norm)
{
    std::vector<double> g;
    for (const auto& s : samples) {
        const double v = stream_of(*s.fingerprint, norm).gamma;
        if (std::isfinite(v))
            g.push_back(v);
    }
    GammaStats st;
    if (g.empty())
        return st;
    st.mean = std::accumulate(g.begin(), g.end(), 0.0) / static_cast<double>(g.size());
    double ss = 0;
    for (double v : g)
        ss += (v - st.mean) * (v - st.mean);
    const double sd = g.size() > 1 ? std::sqrt(ss / static_cast<double>(g.size() - 1)) : 0.0;
    st.std = sd > 0 ? sd : 1.0;
    return st;
}

double median_of(std::vector<double> v)
{
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

}  // namespace

int DetectorConfig::stream_feature_size() const
{
    return mlp_widths.back() + embedding_dim + (use_gamma ? 1 : 0);
}

int DetectorConfig::head_inputs() const
{
    return stream_feature_size() * ((use_linf ? 1 : 0) + (use_l2 ? 1 : 0));
}

json to_json(const DetectorConfig& c)
{
    return json{{"mlp_widths", c.mlp_widths},
                {"embedding_dim", c.embedding_dim},
                {"window_values", c.window_values},
                {"image_shape", c.image_shape},
                {"use_linf", c.use_linf},
                {"use_l2", c.use_l2},
                {"use_gamma", c.use_gamma},
                {"batches_used", c.batches_used},
                {"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"lr", c.lr},
                {"patience", c.patience},
                {"validation_fraction", c.validation_fraction},
                {"folds", c.folds},
                {"seed", c.seed}};
}

DetectorConfig detector_config_from_json(const json& j)
{
    DetectorConfig c;
    c.mlp_widths = j.value("mlp_widths", c.mlp_widths);
    c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
    c.window_values = j.value("window_values", c.window_values);
    c.image_shape = j.value("image_shape", c.image_shape);
    c.use_linf = j.value("use_linf", c.use_linf);
    c.use_l2 = j.value("use_l2", c.use_l2);
    c.use_gamma = j.value("use_gamma", c.use_gamma);
    c.batches_used = j.value("batches_used", c.batches_used);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.patience = j.value("patience", c.patience);
    c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
    c.folds = j.value("folds", c.folds);
    c.seed = j.value("seed", c.seed);
    return c;
}

DetectorModel make_detector(const DetectorConfig& config)
{
    check_config(config);
    DetectorModel d;
    d.config = config;
    for (NormKind norm : enabled_norms(config)) {
        StreamNet s;
        s.norm = norm;
        s.window = make_model<float>({1, 1, config.window_values}, window_layers(config));
        s.embedding = make_model<float>(config.image_shape, embedding_layers(config));
        init_he_normal(s.window, derive_seed(config.seed, "detector-window:" + to_string(norm)));
        init_he_normal(s.embedding, derive_seed(config.seed, "detector-embedding:" + to_string(norm)));
        d.streams.push_back(std::move(s));
    }
    d.head = make_model<float>({1, 1, config.head_inputs()},
                               {LayerSpec::flatten(), LayerSpec::dense(config.head_inputs(), 1)});
    init_he_normal(d.head, derive_seed(config.seed, "detector-head"));
    return d;
}

bool usable(const DetectorModel& detector, const Fingerprint& fingerprint)
{
    for (const auto& s : detector.streams) {
        const auto& sf = stream_of(fingerprint, s.norm);
        if (sf.degenerate || (detector.config.use_gamma && !std::isfinite(sf.gamma)))
            return false;
    }
    return true;
}

std::vector<double> detector_logits(const DetectorModel& detector, std::span<const Fingerprint* const> fingerprints)
{
    std::vector<double> out;
    out.reserve(fingerprints.size());
    constexpr std::size_t chunk = 64;
    for (std::size_t start = 0; start < fingerprints.size(); start += chunk) {
        const auto part = fingerprints.subspan(start, std::min(chunk, fingerprints.size() - start));
        const ForwardPass pass = forward_all(detector, part);
        const Tensor& z = pass.head.values.back();
        for (std::size_t i = 0; i < part.size(); ++i)
            out.push_back(z[i]);
    }
    return out;
}

TrojanPrediction predict_trojan(const DetectorModel& detector, std::span<const Fingerprint> fingerprints)
{
    if (static_cast<int>(fingerprints.size()) != detector.config.batches_used)
        throw std::invalid_argument("expected " + std::to_string(detector.config.batches_used) +
                                    " fingerprints, got " + std::to_string(fingerprints.size()));
    TrojanPrediction p;
    std::vector<const Fingerprint*> valid;
    std::vector<std::size_t> where;
    for (std::size_t i = 0; i < fingerprints.size(); ++i)
        if (usable(detector, fingerprints[i])) {
            valid.push_back(&fingerprints[i]);
            where.push_back(i);
        }
    if (valid.empty())
        throw std::runtime_error("every fingerprint of the query model is degenerate");
    const auto logits = detector_logits(detector, valid);
    p.batch_probabilities.assign(fingerprints.size(), kNaN);
    std::vector<double> probs;
    for (std::size_t k = 0; k < valid.size(); ++k) {
        probs.push_back(sigmoid(logits[k]));
        p.batch_probabilities[where[k]] = probs.back();
    }
    // Summing in sorted order makes the mean independent of fingerprint order.
    std::sort(probs.begin(), probs.end());
    const double sum = std::accumulate(probs.begin(), probs.end(), 0.0);
    p.used = static_cast<int>(valid.size());
    p.partial = valid.size() != fingerprints.size();
    p.p_trojan = sum / static_cast<double>(valid.size());
    return p;
}

TrainedDetector train_detector(std::span<const ModelFingerprints> models, const DetectorConfig& config)
{
    TrainedDetector out{make_detector(config), {}};
    DetectorModel& d = out.detector;

    std::vector<int> by_class[2];
    for (std::size_t i = 0; i < models.size(); ++i) {
        if (models[i].label != 0 && models[i].label != 1)
            throw std::invalid_argument("detector labels must be 0 or 1");
        by_class[models[i].label].push_back(static_cast<int>(i));
    }
    if (by_class[0].empty() || by_class[1].empty())
        throw std::invalid_argument("detector training needs both clean and Trojaned models");

    std::vector<bool> held_out(models.size(), false);
    std::mt19937_64 split_rng(derive_seed(config.seed, "validation-split"));
    for (auto& cls : by_class) {
        std::shuffle(cls.begin(), cls.end(), split_rng);
        const int n = static_cast<int>(cls.size());
        int k = static_cast<int>(std::lround(config.validation_fraction * n));
        if (config.validation_fraction > 0 && n >= 2)
            k = std::clamp(k, 1, n - 1);
        else
            k = 0;
        for (int i = 0; i < k; ++i)
            held_out[cls[i]] = true;
    }

    std::vector<SampleRef> train, validation;
    for (std::size_t i = 0; i < models.size(); ++i)
        for (const Fingerprint* f : front(models[i], config.batches_used))
            if (usable(d, *f))
                (held_out[i] ? validation : train).push_back({f, models[i].label});
    if (train.empty())
        throw std::invalid_argument("no usable fingerprints to train the detector on");
    for (auto& s : d.streams)
        s.gamma = gamma_stats(train, s.norm);

    TrainingRecord& rec = out.record;
    rec.train_samples = static_cast<int>(train.size());
    rec.best_validation_loss = std::numeric_limits<double>::infinity();
    DetectorModel best = d;
    AdamState adam;
    int stale = 0;
    for (int e = 0; e < config.epochs; ++e) {
        std::mt19937_64 rng(derive_seed(config.seed, "detector-epoch", {static_cast<std::uint64_t>(e)}));
        std::shuffle(train.begin(), train.end(), rng);
        double loss_sum = 0;
        for (std::size_t start = 0; start < train.size(); start += config.batch_size) {
            const auto batch = std::span<const SampleRef>(train).subspan(
                start, std::min<std::size_t>(config.batch_size, train.size() - start));
            loss_sum += train_step(d, batch, adam) * static_cast<double>(batch.size());
        }
        rec.train_loss.push_back(loss_sum / static_cast<double>(train.size()));
        rec.epochs_run = e + 1;
        if (validation.empty())
            continue;
        const double vl = mean_bce(d, validation);
        rec.validation_loss.push_back(vl);
        if (vl < rec.best_validation_loss) {
            rec.best_validation_loss = vl;
            rec.best_epoch = e + 1;
            best = d;
            stale = 0;
        } else if (++stale >= config.patience) {
            break;
        }
    }
    if (!validation.empty())
        d = std::move(best);
    else
        rec.best_epoch = rec.epochs_run;
    return out;
}

EvaluationResult evaluate_detector(const DetectorModel& detector, std::span<const ModelFingerprints> models)
{
    EvaluationResult r;
    int hits = 0;
    for (const auto& m : models) {
        const auto fps = std::span<const Fingerprint>(m.fingerprints).first(
            std::min<std::size_t>(m.fingerprints.size(), detector.config.batches_used));
        const auto p = predict_trojan(detector, fps);
        ModelScore s{m.id, m.label, p.p_trojan, p.trojaned() == (m.label == 1)};
        hits += s.correct ? 1 : 0;
        r.scores.push_back(std::move(s));
    }
    r.accuracy = models.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(models.size());
    return r;
}

std::optional<double> CrossValidationReport::out_of_fold(const std::string& id) const
{
    for (const auto& f : folds)
        for (const auto& s : f.scores)
            if (s.id == id)
                return s.p_trojan;
    return std::nullopt;
}

std::vector<std::vector<int>> stratified_folds(std::span<const int> labels, int folds, std::uint64_t seed)
{
    if (folds < 2 || static_cast<int>(labels.size()) < folds)
        throw std::invalid_argument("need at least 2 folds and one model per fold");
    std::vector<int> classes(labels.begin(), labels.end());
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    std::mt19937_64 rng(seed);
    std::vector<std::vector<int>> out(folds);
    int next = 0;
    for (int c : classes) {
        std::vector<int> idx;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == c)
                idx.push_back(static_cast<int>(i));
        std::shuffle(idx.begin(), idx.end(), rng);
        for (int i : idx)
            out[next++ % folds].push_back(i);
    }
    for (auto& f : out)
        std::sort(f.begin(), f.end());
    return out;
}

CrossValidationReport cross_validate(std::span<const ModelFingerprints> models, const DetectorConfig& config)
{
    std::vector<int> labels;
    for (const auto& m : models)
        labels.push_back(m.label);
    const auto folds = stratified_folds(labels, config.folds, derive_seed(config.seed, "folds"));
    CrossValidationReport report;
    for (int f = 0; f < config.folds; ++f) {
        std::vector<ModelFingerprints> train, test;
        std::vector<bool> in_test(models.size(), false);
        for (int i : folds[f])
            in_test[i] = true;
        for (std::size_t i = 0; i < models.size(); ++i)
            (in_test[i] ? test : train).push_back(models[i]);
        DetectorConfig fc = config;
        fc.seed = derive_seed(config.seed, "fold", {static_cast<std::uint64_t>(f)});
        auto trained = train_detector(train, fc);
        auto eval = evaluate_detector(trained.detector, test);
        report.folds.push_back({f, eval.accuracy, std::move(trained.record), std::move(eval.scores)});
    }
    double sum = 0;
    for (const auto& f : report.folds)
        sum += f.accuracy;
    report.mean_accuracy = sum / config.folds;
    double ss = 0;
    for (const auto& f : report.folds)
        ss += (f.accuracy - report.mean_accuracy) * (f.accuracy - report.mean_accuracy);
    report.std_accuracy = std::sqrt(ss / (config.folds - 1));
    return report;
}

json to_json(const CrossValidationReport& report)
{
    json folds = json::array();
    for (const auto& f : report.folds) {
        json scores = json::array();
        for (const auto& s : f.scores)
            scores.push_back({{"id", s.id}, {"label", s.label}, {"p_trojan", s.p_trojan}, {"correct", s.correct}});
        folds.push_back({{"fold", f.fold},
                         {"accuracy", f.accuracy},
                         {"epochs_run", f.record.epochs_run},
                         {"best_epoch", f.record.best_epoch},
                         {"best_validation_loss", finite_or_null(f.record.best_validation_loss)},
                         {"train_samples", f.record.train_samples},
                         {"scores", scores}});
    }
    return json{{"mean_accuracy", report.mean_accuracy}, {"std_accuracy", report.std_accuracy}, {"folds", folds}};
}

void save_detector(const std::filesystem::path& path, const DetectorModel& detector, const json& extra)
{
    ModelBundle bundle;
    json streams = json::array();
    for (const auto& s : detector.streams) {
        bundle.graphs.emplace_back(to_string(s.norm) + ".window", s.window);
        bundle.graphs.emplace_back(to_string(s.norm) + ".embedding", s.embedding);
        streams.push_back({{"norm", to_string(s.norm)}, {"gamma_mean", s.gamma.mean}, {"gamma_std", s.gamma.std}});
    }
    bundle.graphs.emplace_back("head", detector.head);
    bundle.metadata = extra;
    bundle.metadata["detector"] = to_json(detector.config);
    bundle.metadata["streams"] = streams;
    write_bytes(path, serialize_bundle(bundle));
}

DetectorModel load_detector(const std::filesystem::path& path)
{
    const ModelBundle bundle = deserialize_bundle(read_bytes(path));
    DetectorModel d;
    d.config = detector_config_from_json(bundle.metadata.at("detector"));
    check_config(d.config);
    for (const auto& s : bundle.metadata.at("streams")) {
        StreamNet net;
        net.norm = s.at("norm").get<std::string>() == "linf" ? NormKind::linf : NormKind::l2;
        net.window = bundle.graph(to_string(net.norm) + ".window");
        net.embedding = bundle.graph(to_string(net.norm) + ".embedding");
        net.gamma = {s.at("gamma_mean").get<double>(), s.at("gamma_std").get<double>()};
        d.streams.push_back(std::move(net));
    }
    d.head = bundle.graph("head");
    if (static_cast<int>(d.streams.size()) != static_cast<int>(enabled_norms(d.config).size()))
        throw ModelFormatError("detector file streams do not match its configuration");
    return d;
}

// ---- target class ------------------------------------------------------------

AnomalyResult mad_anomaly_index(std::span<const double> values)
{
    AnomalyResult r;
    std::vector<double> finite;
    for (double v : values) {
        if (std::isnan(v))
            throw std::invalid_argument("mad_anomaly_index: NaN input");
        r.excluded.push_back(!std::isfinite(v));
        if (std::isfinite(v))
            finite.push_back(v);
    }
    if (finite.size() < 3)
        throw std::invalid_argument("mad_anomaly_index needs at least 3 finite values, got " +
                                    std::to_string(finite.size()));
    r.median = median_of(finite);
    std::vector<double> dev;
    for (double v : finite)
        dev.push_back(std::abs(v - r.median));
    r.mad = kMadScale * median_of(dev);
    r.degenerate = r.mad == 0;
    for (double v : values) {
        if (!std::isfinite(v))
            r.index.push_back(kNaN);
        else
            r.index.push_back(r.degenerate ? 0.0 : std::abs(v - r.median) / r.mad);
    }
    return r;
}

TargetRule select_target(std::span<const double> sigma, const AnomalyResult& anomaly, double threshold)
{
    TargetRule rule;
    if (anomaly.degenerate)
        return rule;
    double best = -1;
    for (std::size_t c = 0; c < sigma.size(); ++c) {
        if (anomaly.excluded[c] || !(anomaly.index[c] > threshold) || !(sigma[c] < anomaly.median))
            continue;
        rule.qualifying.push_back(static_cast<int>(c));
        if (anomaly.index[c] > best) {
            best = anomaly.index[c];
            rule.target = static_cast<int>(c);
            rule.ambiguous = false;
        } else if (anomaly.index[c] == best) {
            rule.ambiguous = true;
        }
    }
    return rule;
}

DetectionReport target_class_stage(const ModelGraph& model, const LabeledDataset& clean_pool,
                                   const TargetClassConfig& config, DetectionReport report)
{
    const int classes = model.num_classes();
    report.sigma.clear();
    for (int c = 0; c < classes; ++c)
        report.sigma.push_back(fgsm_targeted(model, clean_pool, c, config.fgsm).sigma);
    int finite = 0;
    for (double s : report.sigma)
        finite += std::isfinite(s) ? 1 : 0;
    if (finite < 3) {
        report.anomaly_index.assign(classes, kNaN);
        report.flags.push_back("too few finite attack difficulties for outlier detection");
        return report;
    }
    const auto anomaly = mad_anomaly_index(report.sigma);
    report.anomaly_index = anomaly.index;
    if (anomaly.degenerate)
        report.flags.push_back("attack difficulties have zero MAD");
    const auto rule = select_target(report.sigma, anomaly, config.threshold);
    report.predicted_target = rule.target;
    report.ambiguous = rule.ambiguous;
    if (rule.ambiguous)
        report.flags.push_back("several classes share the largest anomaly index");
    return report;
}

DetectionReport predict_target_class(const ModelGraph& model, const DetectorModel& detector,
                                     std::span<const Fingerprint> fingerprints, const LabeledDataset& clean_pool,
                                     const TargetClassConfig& config, std::optional<double> p_override,
                                     const std::string& model_id)
{
    DetectionReport report;
    report.model_id = model_id;
    if (p_override) {
        report.p_trojan = *p_override;
        report.p_trojan_override = true;
    } else {
        const auto p = predict_trojan(detector, fingerprints);
        report.batch_probabilities = p.batch_probabilities;
        report.p_trojan = p.p_trojan;
        if (p.partial)
            report.flags.push_back("degenerate fingerprints skipped");
    }
    if (report.p_trojan < 0.5)
        return report;
    return target_class_stage(model, clean_pool, config, std::move(report));
}

json to_json(const DetectionReport& r)
{
    auto list = [](const std::vector<double>& v) {
        json a = json::array();
        for (double x : v)
            a.push_back(finite_or_null(x));
        return a;
    };
    return json{{"model_id", r.model_id},
                {"batch_probabilities", list(r.batch_probabilities)},
                {"p_trojan", r.p_trojan},
                {"p_trojan_override", r.p_trojan_override},
                {"trojaned", r.p_trojan >= 0.5},
                {"sigma", list(r.sigma)},
                {"anomaly_index", list(r.anomaly_index)},
                {"predicted_target", r.predicted_target ? json(*r.predicted_target) : json(nullptr)},
                {"ambiguous", r.ambiguous},
                {"flags", r.flags}};
}

DetectionReport detection_report_from_json(const json& j)
{
    auto list = [](const json& a, double null_value) {
        std::vector<double> v;
        for (const auto& x : a)
            v.push_back(number_or(x, null_value));
        return v;
    };
    DetectionReport r;
    r.model_id = j.at("model_id").get<std::string>();
    r.batch_probabilities = list(j.at("batch_probabilities"), kNaN);
    r.p_trojan = j.at("p_trojan").get<double>();
    r.p_trojan_override = j.at("p_trojan_override").get<bool>();
    r.sigma = list(j.at("sigma"), infinite_difficulty);
    r.anomaly_index = list(j.at("anomaly_index"), kNaN);
    if (!j.at("predicted_target").is_null())
        r.predicted_target = j.at("predicted_target").get<int>();
    r.ambiguous = j.at("ambiguous").get<bool>();
    r.flags = j.at("flags").get<std::vector<std::string>>();
    return r;
}

}  // namespace trojanscope
