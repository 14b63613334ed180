#include "trojanscope/zoo.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "trojanscope/model_io.hpp"
#include "trojanscope/rng.hpp"

namespace trojanscope {

using nlohmann::json;

std::string to_string(ModelKind kind)
{
    switch (kind) {
        case ModelKind::benign: return "benign";
        case ModelKind::any_to_any: return "any_to_any";
        case ModelKind::any_to_one: return "any_to_one";
    }
    return "?";
}

ModelKind parse_model_kind(const std::string& name)
{
    for (auto k : {ModelKind::benign, ModelKind::any_to_any, ModelKind::any_to_one})
        if (to_string(k) == name)
            return k;
    throw std::invalid_argument("unknown model kind '" + name + "'");
}

std::vector<ZooCell> balanced_cells(const std::vector<Architecture>& architectures, int trojan_per_arch,
                                    const std::vector<double>& proportions)
{
    if (trojan_per_arch <= 0 || proportions.empty())
        throw std::invalid_argument("balanced_cells: need a positive count and at least one proportion");
    const TriggerType types[] = {TriggerType::type_i, TriggerType::type_ii};
    std::vector<ZooCell> cells;
    auto bump = [&](ZooCell cell) {
        for (auto& c : cells)
            if (c.architecture == cell.architecture && c.kind == cell.kind && c.trigger_type == cell.trigger_type &&
                c.proportion == cell.proportion && c.epochs == cell.epochs) {
                ++c.count;
                return;
            }
        cell.count = 1;
        cells.push_back(cell);
    };
    for (Architecture arch : architectures) {
        for (int i = 0; i < trojan_per_arch; ++i)
            bump({arch, ModelKind::benign, types[i % 2], 0.0, 1});
        const int combos = 2 * static_cast<int>(proportions.size());
        for (int i = 0; i < trojan_per_arch; ++i) {
            const ModelKind kind = i % 2 == 0 ? ModelKind::any_to_any : ModelKind::any_to_one;
            const int combo = (i / 2) % combos;
            bump({arch, kind, types[combo % 2], proportions[combo / 2], 1});
        }
    }
    return cells;
}

std::vector<ZooJob> plan_zoo(const ZooConfig& config, int height, int width, int num_classes)
{
    std::vector<ZooJob> jobs;
    for (const ZooCell& cell : config.cells) {
        if (cell.count < 0)
            throw std::invalid_argument("zoo cell count must be non-negative");
        if (cell.kind != ModelKind::benign && !(cell.proportion > 0 && cell.proportion < 1))
            throw std::invalid_argument("Trojaned zoo cells need a poison proportion in (0,1)");
        for (int k = 0; k < cell.count; ++k) {
            char buf[160];
            if (cell.kind == ModelKind::benign)
                std::snprintf(buf, sizeof buf, "%s-benign-%s-%03d", to_string(cell.architecture).c_str(),
                              to_string(cell.trigger_type).c_str(), k);
            else
                std::snprintf(buf, sizeof buf, "%s-%s-%s-p%03d-%03d", to_string(cell.architecture).c_str(),
                              to_string(cell.kind).c_str(), to_string(cell.trigger_type).c_str(),
                              static_cast<int>(std::lround(cell.proportion * 100)), k);
            ZooJob job;
            job.id = buf;
            job.architecture = cell.architecture;
            job.kind = cell.kind;
            job.trigger = default_trigger(cell.trigger_type, height, width);
            job.seed = derive_seed(config.master_seed, "zoo:" + job.id);
            job.epochs = cell.epochs > 0 ? cell.epochs : config.training.epochs;
            if (cell.kind == ModelKind::benign) {
                job.policy = {0.0, AttackMode::any_to_one, 0};
            } else {
                job.policy.proportion = cell.proportion;
                job.policy.mode = cell.kind == ModelKind::any_to_any ? AttackMode::any_to_any : AttackMode::any_to_one;
                job.policy.target_class =
                    cell.kind == ModelKind::any_to_one ? static_cast<int>(derive_seed(job.seed, "target") % num_classes)
                                                       : 0;
            }
            jobs.push_back(std::move(job));
        }
    }
    std::sort(jobs.begin(), jobs.end(), [](const ZooJob& a, const ZooJob& b) { return a.id < b.id; });
    for (std::size_t i = 1; i < jobs.size(); ++i)
        if (jobs[i].id == jobs[i - 1].id)
            throw std::invalid_argument("zoo config lists cell " + jobs[i].id + " twice");
    return jobs;
}

std::optional<int> ZooRecord::target_class() const
{
    if (kind == ModelKind::any_to_one)
        return policy.target_class;
    return std::nullopt;
}

const ZooRecord& ZooManifest::find(const std::string& id) const
{
    for (const auto& r : models)
        if (r.id == id)
            return r;
    throw std::out_of_range("model '" + id + "' is not in the manifest");
}

void to_json(json& j, const ZooRecord& r)
{
    j = json{{"id", r.id},
             {"path", r.path},
             {"architecture", to_string(r.architecture)},
             {"is_trojaned", r.is_trojaned},
             {"kind", to_string(r.kind)},
             {"trigger", r.trigger},
             {"policy", r.kind == ModelKind::benign ? json(nullptr) : json(r.policy)},
             {"seed", r.seed},
             {"epochs", r.epochs},
             {"clean_accuracy", r.clean_accuracy},
             {"train_accuracy", r.train_accuracy},
             {"triggered_accuracy", r.triggered_accuracy},
             {"attack_success_rate", r.attack_success_rate},
             {"epoch_loss", r.epoch_loss}};
}

void from_json(const json& j, ZooRecord& r)
{
    r.id = j.at("id").get<std::string>();
    r.path = j.at("path").get<std::string>();
    r.architecture = parse_architecture(j.at("architecture").get<std::string>());
    r.is_trojaned = j.at("is_trojaned").get<bool>();
    r.kind = parse_model_kind(j.at("kind").get<std::string>());
    r.trigger = j.at("trigger").get<TriggerSpec>();
    r.policy = j.at("policy").is_null() ? PoisonPolicy{0.0, AttackMode::any_to_one, 0} : j.at("policy").get<PoisonPolicy>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.epochs = j.at("epochs").get<int>();
    r.clean_accuracy = j.at("clean_accuracy").get<double>();
    r.train_accuracy = j.at("train_accuracy").get<double>();
    r.triggered_accuracy = j.at("triggered_accuracy").get<double>();
    r.attack_success_rate = j.at("attack_success_rate").get<double>();
    r.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
}

json manifest_to_json(const ZooManifest& m)
{
    json failures = json::array();
    for (const auto& f : m.failures)
        failures.push_back({{"id", f.id}, {"error", f.error}});
    return {{"models", m.models}, {"failures", failures}};
}

ZooManifest manifest_from_json(const json& j)
{
    ZooManifest m;
    m.models = j.at("models").get<std::vector<ZooRecord>>();
    for (const auto& f : j.at("failures"))
        m.failures.push_back({f.at("id").get<std::string>(), f.at("error").get<std::string>()});
    return m;
}

std::filesystem::path manifest_path(const std::filesystem::path& root) { return root / "manifest.json"; }

ZooManifest load_manifest(const std::filesystem::path& root)
{
    const auto path = manifest_path(root);
    try {
        return manifest_from_json(json::parse(read_text(path)));
    } catch (const json::exception& e) {
        throw std::runtime_error("malformed manifest " + path.string() + ": " + e.what());
    }
}

void save_manifest(const std::filesystem::path& root, const ZooManifest& manifest)
{
    write_text(manifest_path(root), manifest_to_json(manifest).dump(2) + "\n");
}

ZooData load_zoo_data(const DataSource& source)
{
    ZooData d;
    if (source.train_images.empty()) {
        d.train = synthetic_digits({.count = source.train_count,
                                    .seed = derive_seed(source.seed, "synthetic-train"),
                                    .stray_rate = source.stray_rate});
        d.test = synthetic_digits({.count = source.test_count,
                                   .seed = derive_seed(source.seed, "synthetic-test"),
                                   .stray_rate = source.stray_rate});
        return d;
    }
    const auto train = read_idx(source.train_images, source.train_labels);
    const auto test = read_idx(source.test_images, source.test_labels);
    d.train = sample_subset(train, std::min(source.train_count, train.size()), derive_seed(source.seed, "subset-train"));
    d.test = sample_subset(test, std::min(source.test_count, test.size()), derive_seed(source.seed, "subset-test"));
    return d;
}

namespace {

bool record_matches(const ZooRecord& r, const ZooJob& job, const ZooConfig& config)
{
    if (r.architecture != job.architecture || r.kind != job.kind || r.seed != job.seed ||
        r.epochs != job.epochs || !(r.trigger == job.trigger))
        return false;
    if (job.kind != ModelKind::benign && !(r.policy == job.policy))
        return false;
    try {
        load_model(config.root / r.path);
    } catch (const std::exception&) {
        return false;
    }
    return true;
}

ZooRecord run_job(const ZooJob& job, const ZooConfig& config, const ZooData& data)
{
    TrainConfig tc = config.training;
    tc.seed = job.seed;
    tc.epochs = job.epochs;
    TrainedModel trained;
    if (job.kind == ModelKind::benign) {
        trained = train_model(job.architecture, data.train, tc, &data.test);
    } else {
        const auto poisoned = poison_dataset(data.train, job.trigger, job.policy, derive_seed(job.seed, "poison"));
        trained = train_model(job.architecture, poisoned.data, tc, &data.test);
    }
    ZooRecord r;
    r.id = job.id;
    r.path = "models/" + job.id + ".tsm";
    r.architecture = job.architecture;
    r.is_trojaned = job.kind != ModelKind::benign;
    r.kind = job.kind;
    r.trigger = job.trigger;
    r.policy = job.policy;
    r.seed = job.seed;
    r.epochs = tc.epochs;
    r.clean_accuracy = trained.log.test_accuracy;
    r.train_accuracy = trained.log.train_accuracy;
    r.triggered_accuracy = evaluate(trained.model, apply_trigger(data.test, job.trigger));
    r.attack_success_rate =
        r.is_trojaned ? attack_success_rate(trained.model, data.test, job.trigger, job.policy) : 0.0;
    for (const auto& e : trained.log.epochs)
        r.epoch_loss.push_back(e.mean_loss);
    save_model(config.root / r.path, trained.model);
    return r;
}

}  // namespace

ZooManifest generate_zoo(const ZooConfig& config, const ZooData& data,
                         const std::function<void(const ZooProgress&)>& progress)
{
    const auto shape = data.train.image_shape();
    const auto jobs = plan_zoo(config, shape[0], shape[1], data.train.num_classes);

    std::map<std::string, ZooRecord> previous;
    if (std::filesystem::exists(manifest_path(config.root)))
        for (auto& r : load_manifest(config.root).models)
            previous.emplace(r.id, std::move(r));

    std::map<std::string, ZooRecord> done;
    std::map<std::string, std::string> failed;
    std::vector<const ZooJob*> pending;
    int finished = 0;
    for (const auto& job : jobs) {
        auto it = previous.find(job.id);
        if (it != previous.end() && record_matches(it->second, job, config)) {
            done.emplace(job.id, it->second);
            if (progress)
                progress({job, true, nullptr, ++finished, static_cast<int>(jobs.size())});
        } else {
            pending.push_back(&job);
        }
    }

    std::mutex mu;
    auto snapshot = [&] {
        ZooManifest m;
        for (const auto& [id, r] : done)
            m.models.push_back(r);
        for (const auto& [id, e] : failed)
            m.failures.push_back({id, e});
        return m;
    };
    if (pending.empty()) {
        ZooManifest m = snapshot();
        save_manifest(config.root, m);
        return m;
    }

    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < pending.size(); i = next++) {
            const ZooJob& job = *pending[i];
            std::optional<ZooRecord> record;
            std::string error;
            try {
                record = run_job(job, config, data);
            } catch (const std::exception& e) {
                error = e.what();
            }
            std::lock_guard lock(mu);
            if (record)
                done.emplace(job.id, std::move(*record));
            else
                failed.emplace(job.id, error);
            save_manifest(config.root, snapshot());
            if (progress)
                progress({job, false, record ? nullptr : &error, ++finished, static_cast<int>(jobs.size())});
        }
    };
    const int workers = std::clamp(config.workers, 1, static_cast<int>(pending.size()));
    std::vector<std::thread> threads;
    for (int t = 1; t < workers; ++t)
        threads.emplace_back(worker);
    worker();
    for (auto& t : threads)
        t.join();
    return snapshot();
}

}  // namespace trojanscope
