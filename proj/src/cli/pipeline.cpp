#include "trojanscope/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iomanip>
#include <ostream>
#include <regex>
#include <sstream>

#include "trojanscope/model_io.hpp"
#include "trojanscope/rng.hpp"

namespace trojanscope {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string hex_digest(const json& j)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_tag(j.dump())));
    return buf;
}

json cell_to_json(const ZooCell& c)
{
    return json{{"architecture", to_string(c.architecture)},
                {"kind", to_string(c.kind)},
                {"trigger_type", to_string(c.trigger_type)},
                {"proportion", c.proportion},
                {"count", c.count},
                {"epochs", c.epochs}};
}

ZooCell cell_from_json(const json& j)
{
    ZooCell c;
    c.architecture = parse_architecture(j.at("architecture").get<std::string>());
    c.kind = parse_model_kind(j.at("kind").get<std::string>());
    c.trigger_type = parse_trigger_type(j.value("trigger_type", std::string("type_i")));
    c.proportion = j.value("proportion", c.proportion);
    c.count = j.value("count", c.count);
    c.epochs = j.value("epochs", c.epochs);
    return c;
}

json variant_to_json(const AblationVariant& v)
{
    return json{{"name", v.name},
                {"use_linf", v.use_linf},
                {"use_l2", v.use_l2},
                {"use_gamma", v.use_gamma},
                {"batches_used", v.batches_used}};
}

AblationVariant variant_from_json(const json& j)
{
    if (j.is_string())
        return ablation_variant(j.get<std::string>());
    AblationVariant v;
    v.name = j.at("name").get<std::string>();
    v.use_linf = j.value("use_linf", v.use_linf);
    v.use_l2 = j.value("use_l2", v.use_l2);
    v.use_gamma = j.value("use_gamma", v.use_gamma);
    v.batches_used = j.value("batches_used", v.batches_used);
    return v;
}

json section_data(const RunConfig& c)
{
    const auto& d = c.zoo.data;
    return json{{"train_images", d.train_images.string()},
                {"train_labels", d.train_labels.string()},
                {"test_images", d.test_images.string()},
                {"test_labels", d.test_labels.string()},
                {"train_count", d.train_count},
                {"test_count", d.test_count},
                {"seed", d.seed},
                {"stray_rate", d.stray_rate}};
}

json section_zoo(const RunConfig& c)
{
    json cells = json::array();
    for (const auto& cell : c.zoo.cells)
        cells.push_back(cell_to_json(cell));
    return json{{"epochs", c.zoo.training.epochs},
                {"lr", c.zoo.training.lr},
                {"batch_size", c.zoo.training.batch_size},
                {"workers", c.zoo.workers},
                {"cells", cells}};
}

json section_perturbation(const RunConfig& c)
{
    const auto& f = c.fingerprint;
    return json{{"xi_linf", f.xi_linf},
                {"xi_l2", f.xi_l2},
                {"delta", f.delta},
                {"max_outer_linf", f.max_outer_linf},
                {"max_outer_l2", f.max_outer_l2},
                {"overshoot", f.deepfool.overshoot},
                {"deepfool_max_iterations", f.deepfool.max_iterations},
                {"batches", f.batches},
                {"clean_pool", c.clean_pool_size},
                {"window", f.window},
                {"stride", f.stride},
                {"image_size", f.image_size}};
}

json section_fgsm(const RunConfig& c)
{
    return json{{"epsilon", c.target.fgsm.epsilon},
                {"max_steps", c.target.fgsm.max_steps},
                {"pool", c.fgsm_pool_size},
                {"anomaly_threshold", c.target.threshold}};
}

json section_eval(const RunConfig& c)
{
    json ablations = json::array();
    for (const auto& v : c.ablations)
        ablations.push_back(variant_to_json(v));
    json sweep = json::array();
    for (const auto& p : c.sweep)
        sweep.push_back({{"xi_linf", p.xi_linf}, {"max_outer_linf", p.max_outer_linf}});
    return json{{"ablations", ablations}, {"sweep", sweep}};
}

json without_workers(json zoo)
{
    zoo.erase("workers");
    return zoo;
}

std::string fmt(double v, int precision = 4)
{
    std::ostringstream s;
    s << std::fixed << std::setprecision(precision) << v;
    return s.str();
}

json read_json(const fs::path& p)
{
    return json::parse(read_text(p));
}

void write_json(const fs::path& p, const json& j)
{
    write_text(p, j.dump(2) + "\n");
}

bool matches(const std::string& id, const std::string& selector)
{
    return selector.empty() || std::regex_search(id, std::regex(selector));
}

ZooManifest require_manifest(const RunConfig& c)
{
    if (!fs::exists(manifest_path(c.zoo_dir)))
        throw ConfigError("no zoo manifest under " + c.zoo_dir.string() + "; run the zoo command first");
    return load_manifest(c.zoo_dir);
}

FingerprintConfig model_fingerprint_config(const RunConfig& c, const std::string& id)
{
    FingerprintConfig f = c.fingerprint;
    f.seed = derive_seed(c.master_seed, "fingerprint:" + id);
    return f;
}

DetectorConfig effective_detector_config(const RunConfig& c, const std::vector<ModelFingerprints>& models)
{
    DetectorConfig d = c.detector;
    d.window_values = c.fingerprint.window * c.fingerprint.window;
    d.batches_used = std::min(d.batches_used, c.fingerprint.batches);
    if (!models.empty() && !models.front().fingerprints.empty())
        d.image_shape = models.front().fingerprints.front().linf.image.shape();
    d.seed = derive_seed(c.master_seed, "detector");
    return d;
}

CrossValidationReport cv_from_json(const json& j)
{
    CrossValidationReport r;
    r.mean_accuracy = j.at("mean_accuracy").get<double>();
    r.std_accuracy = j.at("std_accuracy").get<double>();
    for (const auto& f : j.at("folds")) {
        FoldResult fr;
        fr.fold = f.at("fold").get<int>();
        fr.accuracy = f.at("accuracy").get<double>();
        fr.record.epochs_run = f.at("epochs_run").get<int>();
        fr.record.best_epoch = f.at("best_epoch").get<int>();
        fr.record.train_samples = f.at("train_samples").get<int>();
        for (const auto& s : f.at("scores"))
            fr.scores.push_back({s.at("id").get<std::string>(), s.at("label").get<int>(),
                                 s.at("p_trojan").get<double>(), s.at("correct").get<bool>()});
        r.folds.push_back(std::move(fr));
    }
    return r;
}

void write_sigma_table(const fs::path& path, const DetectionReport& r)
{
    std::ostringstream s;
    s << "class\tsigma\tanomaly_index\n";
    for (std::size_t i = 0; i < r.sigma.size(); ++i) {
        s << i << '\t' << (std::isfinite(r.sigma[i]) ? fmt(r.sigma[i], 6) : "inf") << '\t';
        const double a = i < r.anomaly_index.size() ? r.anomaly_index[i] : kNaN;
        s << (std::isfinite(a) ? fmt(a, 6) : "nan") << '\n';
    }
    write_text(path, s.str());
}

CrossValidationReport cached_cv(const fs::path& path, const std::string& hash,
                                const std::function<CrossValidationReport()>& compute)
{
    if (fs::exists(path)) {
        const json j = read_json(path);
        if (j.value("config_hash", std::string()) == hash)
            return cv_from_json(j.at("cv"));
    }
    auto cv = compute();
    write_json(path, {{"config_hash", hash}, {"cv", to_json(cv)}});
    return cv;
}

}  // namespace

ZooConfig RunConfig::zoo_config() const
{
    ZooConfig z = zoo;
    z.root = zoo_dir;
    z.master_seed = master_seed;
    return z;
}

json to_json(const RunConfig& c)
{
    return json{{"paths",
                 {{"zoo", c.zoo_dir.string()},
                  {"artifacts", c.artifacts_dir.string()},
                  {"reports", c.reports_dir.string()}}},
                {"seed", c.master_seed},
                {"data", section_data(c)},
                {"zoo", section_zoo(c)},
                {"perturbation", section_perturbation(c)},
                {"fgsm", section_fgsm(c)},
                {"detector", to_json(c.detector)},
                {"eval", section_eval(c)}};
}

json default_run_config_json()
{
    RunConfig c;
    c.zoo.cells = balanced_cells({Architecture::modded_badnet, Architecture::badnet, Architecture::modded_lenet5}, 14);
    c.ablations = {ablation_variant("minimal"), ablation_variant("single_stream"), ablation_variant("no_gamma"),
                   ablation_variant("one_batch")};
    return to_json(c);
}

RunConfig run_config_from_json(const json& in)
{
    const json j = [&] {
        json base = default_run_config_json();
        if (in.contains("zoo") && (in["zoo"].contains("balanced") || in["zoo"].contains("cells")))
            base["zoo"].erase("cells");
        base.merge_patch(in);
        return base;
    }();
    RunConfig c;
    const auto& paths = j.at("paths");
    c.zoo_dir = paths.at("zoo").get<std::string>();
    c.artifacts_dir = paths.at("artifacts").get<std::string>();
    c.reports_dir = paths.at("reports").get<std::string>();
    c.master_seed = j.at("seed").get<std::uint64_t>();

    const auto& d = j.at("data");
    c.zoo.data.train_images = d.at("train_images").get<std::string>();
    c.zoo.data.train_labels = d.at("train_labels").get<std::string>();
    c.zoo.data.test_images = d.at("test_images").get<std::string>();
    c.zoo.data.test_labels = d.at("test_labels").get<std::string>();
    c.zoo.data.train_count = d.at("train_count").get<int>();
    c.zoo.data.test_count = d.at("test_count").get<int>();
    c.zoo.data.seed = d.at("seed").get<std::uint64_t>();
    c.zoo.data.stray_rate = d.at("stray_rate").get<double>();

    const auto& z = j.at("zoo");
    c.zoo.training.epochs = z.at("epochs").get<int>();
    c.zoo.training.lr = z.at("lr").get<double>();
    c.zoo.training.batch_size = z.at("batch_size").get<int>();
    c.zoo.workers = z.at("workers").get<int>();
    if (z.contains("balanced")) {
        const auto& b = z.at("balanced");
        std::vector<Architecture> archs;
        for (const auto& a : b.at("architectures"))
            archs.push_back(parse_architecture(a.get<std::string>()));
        c.zoo.cells = balanced_cells(archs, b.at("trojan_per_arch").get<int>(),
                                     b.value("proportions", std::vector<double>{0.10, 0.15, 0.20}));
        if (b.contains("epochs"))
            for (auto& cell : c.zoo.cells)
                cell.epochs = b.at("epochs").value(to_string(cell.architecture), cell.epochs);
    }
    if (z.contains("cells"))
        for (const auto& cell : z.at("cells"))
            c.zoo.cells.push_back(cell_from_json(cell));

    const auto& p = j.at("perturbation");
    c.fingerprint.xi_linf = p.at("xi_linf").get<double>();
    c.fingerprint.xi_l2 = p.at("xi_l2").get<double>();
    c.fingerprint.delta = p.at("delta").get<double>();
    c.fingerprint.max_outer_linf = p.at("max_outer_linf").get<int>();
    c.fingerprint.max_outer_l2 = p.at("max_outer_l2").get<int>();
    c.fingerprint.deepfool.overshoot = p.at("overshoot").get<double>();
    c.fingerprint.deepfool.max_iterations = p.at("deepfool_max_iterations").get<int>();
    c.fingerprint.batches = p.at("batches").get<int>();
    c.clean_pool_size = p.at("clean_pool").get<int>();
    c.fingerprint.window = p.at("window").get<int>();
    c.fingerprint.stride = p.at("stride").get<int>();
    c.fingerprint.image_size = p.at("image_size").get<int>();

    const auto& f = j.at("fgsm");
    c.target.fgsm.epsilon = f.at("epsilon").get<double>();
    c.target.fgsm.max_steps = f.at("max_steps").get<int>();
    c.fgsm_pool_size = f.at("pool").get<int>();
    c.target.threshold = f.at("anomaly_threshold").get<double>();

    c.detector = detector_config_from_json(j.at("detector"));
    const auto& e = j.at("eval");
    for (const auto& v : e.at("ablations"))
        c.ablations.push_back(variant_from_json(v));
    for (const auto& s : e.at("sweep"))
        c.sweep.push_back({s.at("xi_linf").get<double>(), s.at("max_outer_linf").get<int>()});

    if (c.zoo.cells.empty())
        throw ConfigError("zoo composition is empty");
    if (c.clean_pool_size < c.fingerprint.batches || c.fgsm_pool_size <= 0)
        throw ConfigError("clean pool sizes are too small");
    if (c.clean_pool_size > c.zoo.data.test_count || c.fgsm_pool_size > c.zoo.data.test_count)
        throw ConfigError("clean pools are drawn from the test split and cannot exceed test_count");
    return c;
}

RunConfig load_run_config(const fs::path& path)
{
    if (!fs::exists(path))
        throw ConfigError("config file " + path.string() + " does not exist");
    try {
        return run_config_from_json(read_json(path));
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path.string() + ": " + e.what());
    }
}

std::string zoo_hash(const RunConfig& c)
{
    return hex_digest({{"seed", c.master_seed}, {"data", section_data(c)}, {"zoo", without_workers(section_zoo(c))}});
}

std::string fingerprint_hash(const RunConfig& c)
{
    return hex_digest({{"zoo", zoo_hash(c)}, {"perturbation", section_perturbation(c)}});
}

std::string detector_hash(const RunConfig& c)
{
    return hex_digest({{"fingerprint", fingerprint_hash(c)}, {"detector", to_json(c.detector)}});
}

std::string target_hash(const RunConfig& c)
{
    return hex_digest({{"zoo", zoo_hash(c)}, {"fgsm", section_fgsm(c)}});
}

std::string config_hash(const RunConfig& c)
{
    json j = to_json(c);
    j.erase("paths");
    j["zoo"].erase("workers");
    return hex_digest(j);
}

AblationVariant ablation_variant(const std::string& name)
{
    if (name == "full")
        return {name};
    if (name == "single_stream")
        return {.name = name, .use_l2 = false};
    if (name == "no_gamma")
        return {.name = name, .use_gamma = false};
    if (name == "one_batch")
        return {.name = name, .batches_used = 1};
    if (name == "minimal")
        return {.name = name, .use_l2 = false, .use_gamma = false, .batches_used = 1};
    throw ConfigError("unknown ablation variant '" + name + "'");
}

Pools clean_pools(const RunConfig& c, const ZooData& data)
{
    return {sample_subset(data.test, c.clean_pool_size, derive_seed(c.master_seed, "clean-pool")),
            sample_subset(data.test, c.fgsm_pool_size, derive_seed(c.master_seed, "fgsm-pool"))};
}

fs::path fingerprint_dir(const RunConfig& c, const std::string& model_id)
{
    return c.artifacts_dir / "fingerprints" / model_id;
}

ZooManifest cmd_zoo(const RunConfig& c, std::ostream& out)
{
    for (const fs::path& p : {c.zoo_dir, c.artifacts_dir, c.reports_dir}) {
        std::error_code ec;
        fs::create_directories(p, ec);
        if (ec || !fs::is_directory(p))
            throw ConfigError("cannot use " + p.string() + " as an output directory");
    }
    const auto& d = c.zoo.data;
    for (const fs::path& p : {d.train_images, d.train_labels, d.test_images, d.test_labels})
        if (!p.empty() && !fs::exists(p))
            throw ConfigError("data file " + p.string() + " does not exist");
    if (d.train_images.empty() != d.test_images.empty())
        throw ConfigError("give both train and test IDX files, or neither");

    const ZooConfig zc = c.zoo_config();
    plan_zoo(zc);  // rejects malformed compositions before training
    const ZooData data = load_zoo_data(d);
    const ZooManifest m = generate_zoo(zc, data, [&](const ZooProgress& p) {
        out << "[" << p.done << "/" << p.total << "] " << p.job.id
            << (p.skipped ? " cached" : p.error ? " FAILED: " + *p.error : " trained") << "\n"
            << std::flush;
    });

    out << "\nid\tclean_acc\tattack_success\n";
    double acc = 0, asr = 0;
    int trojaned = 0;
    for (const auto& r : m.models) {
        out << r.id << '\t' << fmt(r.clean_accuracy) << '\t' << (r.is_trojaned ? fmt(r.attack_success_rate) : "-")
            << "\n";
        acc += r.clean_accuracy;
        if (r.is_trojaned) {
            asr += r.attack_success_rate;
            ++trojaned;
        }
    }
    out << "models " << m.models.size() << " (trojaned " << trojaned << ", benign " << m.models.size() - trojaned
        << "), failures " << m.failures.size() << "\n";
    if (!m.models.empty())
        out << "mean clean accuracy " << fmt(acc / m.models.size()) << "\n";
    if (trojaned > 0)
        out << "mean attack success rate " << fmt(asr / trojaned) << "\n";
    return m;
}

int cmd_fingerprint(const RunConfig& c, const std::string& selector, std::ostream& out)
{
    const ZooManifest m = require_manifest(c);
    const std::string hash = fingerprint_hash(c);
    std::vector<const ZooRecord*> todo;
    for (const auto& r : m.models) {
        if (!matches(r.id, selector))
            continue;
        const fs::path index = fingerprint_dir(c, r.id) / "index.json";
        if (fs::exists(index)) {
            if (read_json(index).value("config_hash", std::string()) != hash)
                throw ConfigError("fingerprints in " + index.parent_path().string() +
                                  " come from a different configuration; remove them or change the artifacts path");
            continue;
        }
        todo.push_back(&r);
    }
    if (todo.empty()) {
        out << "fingerprints up to date\n";
        return 0;
    }
    const ZooData data = load_zoo_data(c.zoo.data);
    const Pools pools = clean_pools(c, data);
    int built = 0;
    for (const ZooRecord* r : todo) {
        const ModelGraph model = load_model(c.zoo_dir / r->path);
        const FingerprintConfig fc = model_fingerprint_config(c, r->id);
        const FingerprintSet set = build_fingerprints(model, pools.fingerprint, fc);
        save_fingerprints(fingerprint_dir(c, r->id), set, fc,
                          {{"model_id", r->id}, {"config_hash", hash}, {"label", r->is_trojaned ? 1 : 0}});
        ++built;
        double eta = 0, gamma = 0;
        for (const auto& a : set.linf) {
            eta += a.eta;
            gamma += a.gamma;
        }
        out << "[" << built << "/" << todo.size() << "] " << r->id << " linf eta " << fmt(eta / set.linf.size(), 3)
            << " gamma " << fmt(gamma / set.linf.size(), 2) << "\n"
            << std::flush;
    }
    return built;
}

std::vector<ModelFingerprints> load_zoo_fingerprints(const RunConfig& c, const ZooManifest& manifest,
                                                     const std::string& selector)
{
    const std::string hash = fingerprint_hash(c);
    std::vector<ModelFingerprints> out;
    std::string missing;
    for (const auto& r : manifest.models) {
        if (!matches(r.id, selector))
            continue;
        const fs::path dir = fingerprint_dir(c, r.id);
        if (!fs::exists(dir / "index.json")) {
            missing += "\n  " + r.id + ": no fingerprints";
            continue;
        }
        if (read_json(dir / "index.json").value("config_hash", std::string()) != hash) {
            missing += "\n  " + r.id + ": fingerprints from a different configuration";
            continue;
        }
        out.push_back({r.id, r.is_trojaned ? 1 : 0, load_fingerprints(dir, model_fingerprint_config(c, r.id)).fingerprints});
    }
    if (!missing.empty())
        throw ConfigError("fingerprints unavailable for:" + missing);
    return out;
}

TrainOutput cmd_train(const RunConfig& c, std::ostream& out)
{
    const ZooManifest m = require_manifest(c);
    const auto models = load_zoo_fingerprints(c, m);
    const DetectorConfig dc = effective_detector_config(c, models);
    const std::string hash = detector_hash(c);

    TrainOutput result;
    result.cv = cached_cv(c.reports_dir / "cv.json", hash, [&] { return cross_validate(models, dc); });
    const fs::path det = c.artifacts_dir / "detector.tsm";
    bool fresh = true;
    if (fs::exists(det)) {
        const ModelBundle b = deserialize_bundle(read_bytes(det));
        fresh = b.metadata.value("config_hash", std::string()) != hash;
    }
    if (fresh) {
        auto trained = train_detector(models, dc);
        save_detector(det, trained.detector, {{"config_hash", hash}, {"epochs_run", trained.record.epochs_run}});
        result.detector = std::move(trained.detector);
    } else {
        result.detector = load_detector(det);
    }

    out << "fold\taccuracy\tepochs\n";
    for (const auto& f : result.cv.folds)
        out << f.fold << '\t' << fmt(f.accuracy) << '\t' << f.record.epochs_run << "\n";
    out << "cross-validated accuracy " << fmt(result.cv.mean_accuracy) << " +- " << fmt(result.cv.std_accuracy)
        << " over " << models.size() << " models\n";
    return result;
}

DetectionReport cmd_detect(const RunConfig& c, const fs::path& model_path, const std::string& model_id,
                           std::optional<double> p_override, std::ostream& out)
{
    const fs::path det = c.artifacts_dir / "detector.tsm";
    if (!fs::exists(det))
        throw ConfigError("no trained detector at " + det.string() + "; run the train command first");
    if (!fs::exists(model_path))
        throw ConfigError("model file " + model_path.string() + " does not exist");
    const std::string id = model_id.empty() ? model_path.stem().string() : model_id;
    const DetectorModel detector = load_detector(det);
    const ModelGraph model = load_model(model_path);
    const ZooData data = load_zoo_data(c.zoo.data);
    const Pools pools = clean_pools(c, data);

    const fs::path dir = c.artifacts_dir / "query" / id;
    const FingerprintConfig fc = model_fingerprint_config(c, id);
    const std::string hash = fingerprint_hash(c);
    FingerprintSet set;
    if (fs::exists(dir / "index.json") && read_json(dir / "index.json").value("config_hash", std::string()) == hash) {
        set = load_fingerprints(dir, fc);
    } else {
        set = build_fingerprints(model, pools.fingerprint, fc);
        save_fingerprints(dir, set, fc, {{"model_id", id}, {"config_hash", hash}});
    }
    const auto fps = std::span<const Fingerprint>(set.fingerprints).first(detector.config.batches_used);
    DetectionReport r = predict_target_class(model, detector, fps, pools.fgsm, c.target, p_override, id);
    write_json(c.reports_dir / "detect" / (id + ".json"), {{"config_hash", config_hash(c)}, {"report", to_json(r)}});
    if (!r.sigma.empty())
        write_sigma_table(c.reports_dir / "detect" / (id + ".sigma.tsv"), r);
    out << id << " p_trojan " << fmt(r.p_trojan) << (r.p_trojan >= 0.5 ? " trojaned" : " clean");
    if (r.predicted_target)
        out << ", target class " << *r.predicted_target << (r.ambiguous ? " (ambiguous)" : "");
    else if (r.p_trojan >= 0.5)
        out << ", no target class stands out";
    out << "\n";
    return r;
}

TargetSummary cmd_target_class(const RunConfig& c, const std::string& selector, std::ostream& out)
{
    const ZooManifest m = require_manifest(c);
    std::optional<CrossValidationReport> cv;
    const fs::path cv_path = c.reports_dir / "cv.json";
    if (fs::exists(cv_path)) {
        const json j = read_json(cv_path);
        if (j.value("config_hash", std::string()) == detector_hash(c))
            cv = cv_from_json(j.at("cv"));
    }
    const std::string hash = target_hash(c);
    std::optional<Pools> pools;

    TargetSummary s;
    out << "id\ttarget\tpredicted\tp_trojan(oof)\tsigma_min_class\tindex_at_target\n";
    for (const auto& r : m.models) {
        if (r.kind != ModelKind::any_to_one || !matches(r.id, selector))
            continue;
        const int target = *r.target_class();
        const fs::path cache = c.reports_dir / "target" / (r.id + ".json");
        DetectionReport rep;
        bool have = false;
        if (fs::exists(cache)) {
            const json j = read_json(cache);
            if (j.value("config_hash", std::string()) == hash) {
                rep = detection_report_from_json(j.at("report"));
                have = true;
            }
        }
        if (!have) {
            if (!pools)
                pools = clean_pools(c, load_zoo_data(c.zoo.data));
            DetectionReport base;
            base.model_id = r.id;
            base.p_trojan = 1.0;
            base.p_trojan_override = true;
            rep = target_class_stage(load_model(c.zoo_dir / r.path), pools->fgsm, c.target, std::move(base));
            write_json(cache, {{"config_hash", hash}, {"report", to_json(rep)}});
            write_sigma_table(c.reports_dir / "target" / (r.id + ".sigma.tsv"), rep);
        }

        ++s.models;
        const bool gt_ok = rep.predicted_target == target;
        s.correct_ground_truth += gt_ok ? 1 : 0;
        const double oof = cv ? cv->out_of_fold(r.id).value_or(kNaN) : kNaN;
        s.correct_end_to_end += gt_ok && oof >= 0.5 ? 1 : 0;

        int finite = 0;
        for (double v : rep.sigma)
            finite += std::isfinite(v) ? 1 : 0;
        const bool degenerate = std::find(rep.flags.begin(), rep.flags.end(), "attack difficulties have zero MAD") !=
                                rep.flags.end();
        int argmin = -1;
        if (finite >= 3 && !degenerate) {
            ++s.stage_two_ok;
            argmin = static_cast<int>(std::min_element(rep.sigma.begin(), rep.sigma.end()) - rep.sigma.begin());
            int ties = 0;
            for (double v : rep.sigma)
                ties += v == rep.sigma[argmin] ? 1 : 0;
            if (argmin == target && ties == 1 && rep.anomaly_index[target] > c.target.threshold)
                ++s.minimal_and_outlier;
        }
        out << r.id << '\t' << target << '\t'
            << (rep.predicted_target ? std::to_string(*rep.predicted_target) : "none") << '\t'
            << (std::isnan(oof) ? "-" : fmt(oof, 3)) << '\t' << argmin << '\t'
            << (rep.anomaly_index.empty() ? "-" : fmt(rep.anomaly_index[target], 2)) << "\n";
        s.reports.push_back(std::move(rep));
    }
    if (s.models > 0) {
        s.accuracy_ground_truth = static_cast<double>(s.correct_ground_truth) / s.models;
        s.accuracy_end_to_end = cv ? static_cast<double>(s.correct_end_to_end) / s.models : kNaN;
    }
    s.outlier_pass_rate = s.stage_two_ok > 0 ? static_cast<double>(s.minimal_and_outlier) / s.stage_two_ok : 0.0;
    out << "target accuracy (ground-truth labels) " << fmt(s.accuracy_ground_truth) << " over " << s.models
        << " any-to-one models\n";
    if (cv)
        out << "target accuracy (detector probabilities) " << fmt(s.accuracy_end_to_end) << "\n";
    out << "true target is the unique minimum with index > " << c.target.threshold << ": " << s.minimal_and_outlier
        << "/" << s.stage_two_ok << "\n";
    write_json(c.reports_dir / "target_summary.json",
               {{"config_hash", config_hash(c)},
                {"models", s.models},
                {"accuracy_ground_truth", s.accuracy_ground_truth},
                {"accuracy_end_to_end", std::isfinite(s.accuracy_end_to_end) ? json(s.accuracy_end_to_end) : json()},
                {"stage_two_ok", s.stage_two_ok},
                {"minimal_and_outlier", s.minimal_and_outlier}});
    return s;
}

json cmd_eval(const RunConfig& c, std::ostream& out)
{
    const ZooManifest m = require_manifest(c);
    const TrainOutput train = cmd_train(c, out);
    const auto models = load_zoo_fingerprints(c, m);
    const DetectorConfig base = effective_detector_config(c, models);
    const std::string dhash = detector_hash(c);

    json report{{"config_hash", config_hash(c)}};
    report["detection"] = {{"mean_accuracy", train.cv.mean_accuracy},
                           {"std_accuracy", train.cv.std_accuracy},
                           {"models", models.size()}};

    json ablation = json::array();
    ablation.push_back({{"name", "full"}, {"mean_accuracy", train.cv.mean_accuracy},
                        {"std_accuracy", train.cv.std_accuracy}, {"gap_to_full", 0.0}});
    for (const auto& v : c.ablations) {
        DetectorConfig dc = base;
        dc.use_linf = v.use_linf;
        dc.use_l2 = v.use_l2;
        dc.use_gamma = v.use_gamma;
        dc.batches_used = std::min(v.batches_used, c.fingerprint.batches);
        const std::string h = hex_digest({{"detector", dhash}, {"variant", variant_to_json(v)}});
        const auto cv = cached_cv(c.reports_dir / "ablation" / (v.name + ".json"), h,
                                  [&] { return cross_validate(models, dc); });
        ablation.push_back({{"name", v.name},
                            {"mean_accuracy", cv.mean_accuracy},
                            {"std_accuracy", cv.std_accuracy},
                            {"gap_to_full", train.cv.mean_accuracy - cv.mean_accuracy}});
    }
    report["ablation"] = ablation;

    // Cross-trigger generalization: fit on Type I models, score Type II ones.
    std::vector<ModelFingerprints> type_i, type_ii;
    for (const auto& mf : models)
        (m.find(mf.id).trigger.type == TriggerType::type_i ? type_i : type_ii).push_back(mf);
    const fs::path xt = c.reports_dir / "cross_trigger.json";
    json cross;
    if (fs::exists(xt) && read_json(xt).value("config_hash", std::string()) == dhash) {
        cross = read_json(xt).at("result");
    } else {
        try {
            if (type_ii.empty())
                throw std::invalid_argument("no Type II models to test on");
            const auto trained = train_detector(type_i, base);
            const auto eval = evaluate_detector(trained.detector, type_ii);
            cross = {{"train_models", type_i.size()}, {"test_models", type_ii.size()}, {"accuracy", eval.accuracy}};
        } catch (const std::invalid_argument& e) {
            cross = {{"error", e.what()}};
        }
        write_json(xt, {{"config_hash", dhash}, {"result", cross}});
    }
    report["cross_trigger"] = cross;

    const TargetSummary t = cmd_target_class(c, "", out);
    report["target"] = {{"models", t.models},
                        {"accuracy_ground_truth", t.accuracy_ground_truth},
                        {"accuracy_end_to_end", t.accuracy_end_to_end},
                        {"minimal_and_outlier", t.minimal_and_outlier},
                        {"stage_two_ok", t.stage_two_ok}};

    json sweep = json::array();
    for (const auto& p : c.sweep) {
        RunConfig sc = c;
        sc.fingerprint.xi_linf = p.xi_linf;
        sc.fingerprint.max_outer_linf = p.max_outer_linf;
        const std::string tag = "xi" + fmt(p.xi_linf, 3) + "_it" + std::to_string(p.max_outer_linf);
        sc.artifacts_dir = c.artifacts_dir / "sweep" / tag;
        sc.reports_dir = c.reports_dir / "sweep" / tag;
        sc.sweep.clear();
        cmd_fingerprint(sc, "", out);
        const auto st = cmd_train(sc, out);
        sweep.push_back({{"xi_linf", p.xi_linf},
                         {"max_outer_linf", p.max_outer_linf},
                         {"mean_accuracy", st.cv.mean_accuracy},
                         {"std_accuracy", st.cv.std_accuracy}});
    }
    report["sweep"] = sweep;

    out << "\nvariant\taccuracy\tgap_to_full\n";
    for (const auto& row : report["ablation"])
        out << row["name"].get<std::string>() << '\t' << fmt(row["mean_accuracy"].get<double>()) << " +- "
            << fmt(row["std_accuracy"].get<double>()) << '\t' << fmt(row["gap_to_full"].get<double>()) << "\n";
    if (cross.contains("accuracy"))
        out << "cross-trigger accuracy (train Type I, test Type II) " << fmt(cross["accuracy"].get<double>()) << "\n";
    for (const auto& row : sweep)
        out << "sweep xi_linf " << row["xi_linf"] << " passes " << row["max_outer_linf"] << ": "
            << fmt(row["mean_accuracy"].get<double>()) << "\n";
    write_json(c.reports_dir / "eval.json", report);
    return report;
}

}  // namespace trojanscope
