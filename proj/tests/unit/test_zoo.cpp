#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include <gtest/gtest.h>
#include <zlib.h>

#include "trojanscope/errors.hpp"
#include "trojanscope/model_io.hpp"
#include "trojanscope/rng.hpp"
#include "trojanscope/training.hpp"
#include "trojanscope/trigger.hpp"
#include "trojanscope/zoo.hpp"

using namespace trojanscope;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name)
{
    auto dir = fs::temp_directory_path() / ("trojanscope_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

int count_equal(const Tensor& t, float v)
{
    return static_cast<int>(std::count(t.values().begin(), t.values().end(), v));
}

// Predicts `cls` for every input.
ModelGraph constant_model(int cls)
{
    auto m = make_model<float>({28, 28, 1}, {LayerSpec::flatten(), LayerSpec::dense(784, 10)});
    m.params[1].bias[cls] = 1.0f;
    return m;
}

}  // namespace

TEST(Rng, DeriveSeedSeparatesTagsAndCounters)
{
    EXPECT_EQ(derive_seed(7, "a", {1, 2}), derive_seed(7, "a", {1, 2}));
    EXPECT_NE(derive_seed(7, "a", {1, 2}), derive_seed(7, "a", {2, 1}));
    EXPECT_NE(derive_seed(7, "a"), derive_seed(7, "b"));
    EXPECT_NE(derive_seed(7, "a"), derive_seed(8, "a"));
}

TEST(SyntheticDigits, ShapeRangeBalanceAndDeterminism)
{
    auto d = synthetic_digits({.count = 200, .seed = 3});
    EXPECT_EQ(d.images.shape(), (std::vector<int>{200, 28, 28, 1}));
    std::vector<int> per_class(10);
    for (int l : d.labels)
        per_class.at(l)++;
    for (int c : per_class)
        EXPECT_EQ(c, 20);
    for (float v : d.images.values()) {
        ASSERT_GE(v, 0.0f);
        ASSERT_LE(v, 1.0f);
        ASSERT_FLOAT_EQ(std::round(v * 255.0f) / 255.0f, v);
    }
    auto again = synthetic_digits({.count = 200, .seed = 3});
    EXPECT_TRUE(again.images == d.images);
    EXPECT_EQ(again.labels, d.labels);
    EXPECT_FALSE(synthetic_digits({.count = 200, .seed = 4}).images == d.images);
}

TEST(Idx, RoundTripPlainAndGzip)
{
    const auto dir = scratch_dir("idx");
    auto d = synthetic_digits({.count = 30, .seed = 9});
    write_idx(d, dir / "img", dir / "lab");
    auto back = read_idx(dir / "img", dir / "lab");
    EXPECT_TRUE(back.images == d.images);
    EXPECT_EQ(back.labels, d.labels);

    for (const char* name : {"img", "lab"}) {
        const auto raw = read_bytes(dir / name);
        gzFile gz = gzopen((dir / (std::string(name) + ".gz")).c_str(), "wb");
        gzwrite(gz, raw.data(), static_cast<unsigned>(raw.size()));
        gzclose(gz);
    }
    auto gzback = read_idx(dir / "img.gz", dir / "lab.gz");
    EXPECT_TRUE(gzback.images == d.images);
}

TEST(Idx, TruncatedAndMismatchedFilesAreRejected)
{
    const auto dir = scratch_dir("idx_bad");
    auto d = synthetic_digits({.count = 10, .seed = 9});
    write_idx(d, dir / "img", dir / "lab");
    auto raw = read_bytes(dir / "img");
    raw.resize(raw.size() - 5);
    write_bytes(dir / "short", raw);
    EXPECT_THROW(read_idx(dir / "short", dir / "lab"), std::runtime_error);
    EXPECT_THROW(read_idx(dir / "lab", dir / "lab"), std::runtime_error);
    auto fewer = synthetic_digits({.count = 20, .seed = 9});
    write_idx(fewer, dir / "img20", dir / "lab20");
    EXPECT_THROW(read_idx(dir / "img", dir / "lab20"), std::runtime_error);
    EXPECT_THROW(read_idx(dir / "missing", dir / "lab"), std::runtime_error);
}

TEST(Dataset, SampleSubsetIsDeterministicAndSized)
{
    auto d = synthetic_digits({.count = 100, .seed = 2});
    auto a = sample_subset(d, 40, 5);
    auto b = sample_subset(d, 40, 5);
    EXPECT_EQ(a.size(), 40);
    EXPECT_TRUE(a.images == b.images);
    EXPECT_FALSE(sample_subset(d, 40, 6).images == a.images);
    EXPECT_THROW(sample_subset(d, 101, 5), std::invalid_argument);
}

TEST(Trigger, TypeISquareOnBlankImage)
{
    Tensor img({28, 28, 1});
    const auto spec = default_trigger(TriggerType::type_i);
    EXPECT_EQ(spec.row, 22);
    EXPECT_EQ(spec.col, 22);
    auto out = apply_trigger(img, spec);
    EXPECT_EQ(count_equal(out, 1.0f), 16);
    for (int r = 22; r < 26; ++r)
        for (int c = 22; c < 26; ++c)
            EXPECT_EQ(out[r * 28 + c], 1.0f);
}

TEST(Trigger, IdempotentAndOtherPixelsUntouched)
{
    auto d = synthetic_digits({.count = 5, .seed = 1});
    for (auto type : {TriggerType::type_i, TriggerType::type_ii}) {
        const auto spec = default_trigger(type);
        auto once = apply_trigger(d, spec);
        auto twice = apply_trigger(once, spec);
        EXPECT_TRUE(once.images == twice.images);
        for (int i = 0; i < d.size(); ++i)
            for (int r = 0; r < 28; ++r)
                for (int c = 0; c < 28; ++c)
                    if (!spec.stamps(r - spec.row, c - spec.col))
                        ASSERT_EQ(once.image(i)[r * 28 + c], d.image(i)[r * 28 + c]);
    }
}

TEST(Trigger, TypeIICheckerboardStampsMaskOnly)
{
    const auto spec = default_trigger(TriggerType::type_ii);
    EXPECT_EQ(spec.size, 5);
    auto out = apply_trigger(Tensor({28, 28, 1}), spec);
    EXPECT_EQ(count_equal(out, 1.0f), 13);
}

TEST(Trigger, StampsAllChannels)
{
    auto out = apply_trigger(Tensor({10, 10, 3}), default_trigger(TriggerType::type_i, 10, 10));
    EXPECT_EQ(count_equal(out, 1.0f), 48);
}

TEST(Trigger, OutOfBoundsRejected)
{
    auto spec = default_trigger(TriggerType::type_i);
    spec.row = 25;
    EXPECT_THROW(apply_trigger(Tensor({28, 28, 1}), spec), std::out_of_range);
    spec.row = -1;
    EXPECT_THROW(apply_trigger(Tensor({28, 28, 1}), spec), std::out_of_range);
}

TEST(Poison, ZeroProportionLeavesDataUnchanged)
{
    auto d = synthetic_digits({.count = 50, .seed = 1});
    auto res = poison_dataset(d, default_trigger(TriggerType::type_i), {0.0, AttackMode::any_to_one, 0}, 3);
    EXPECT_TRUE(res.poisoned.empty());
    EXPECT_TRUE(res.data.images == d.images);
    EXPECT_EQ(res.data.labels, d.labels);
}

TEST(Poison, AnyToOneRelabelsExactCount)
{
    auto d = synthetic_digits({.count = 1000, .seed = 1});
    const auto spec = default_trigger(TriggerType::type_i);
    auto res = poison_dataset(d, spec, {0.1, AttackMode::any_to_one, 0}, 3);
    ASSERT_EQ(res.poisoned.size(), 100u);
    EXPECT_TRUE(std::is_sorted(res.poisoned.begin(), res.poisoned.end()));
    const std::set<int> hit(res.poisoned.begin(), res.poisoned.end());
    EXPECT_EQ(hit.size(), 100u);
    const int stride = 28 * 28;
    for (int i = 0; i < d.size(); ++i) {
        const bool poisoned = hit.count(i) > 0;
        auto a = d.image(i);
        auto b = res.data.image(i);
        if (poisoned) {
            EXPECT_EQ(res.data.labels[i], 0);
            EXPECT_TRUE(std::equal(b.begin(), b.end(), apply_trigger(Tensor({28, 28, 1}, std::vector<float>(a.begin(), a.end())), spec).data()));
        } else {
            EXPECT_EQ(res.data.labels[i], d.labels[i]);
            EXPECT_TRUE(std::equal(a.begin(), a.begin() + stride, b.begin()));
        }
    }
}

TEST(Poison, AnyToAnyShiftsLabelsByOne)
{
    auto d = synthetic_digits({.count = 300, .seed = 1});
    auto res = poison_dataset(d, default_trigger(TriggerType::type_ii), {0.2, AttackMode::any_to_any, 0}, 8);
    EXPECT_EQ(res.poisoned.size(), 60u);
    for (int i : res.poisoned)
        EXPECT_EQ(res.data.labels[i], (d.labels[i] + 1) % 10);
}

TEST(Poison, DeterministicUnderSeedAndRejectsBadPolicy)
{
    auto d = synthetic_digits({.count = 200, .seed = 1});
    const auto spec = default_trigger(TriggerType::type_i);
    const PoisonPolicy p{0.15, AttackMode::any_to_one, 4};
    EXPECT_EQ(poison_dataset(d, spec, p, 1).poisoned, poison_dataset(d, spec, p, 1).poisoned);
    EXPECT_NE(poison_dataset(d, spec, p, 1).poisoned, poison_dataset(d, spec, p, 2).poisoned);
    EXPECT_THROW(poison_dataset(d, spec, {1.0, AttackMode::any_to_one, 0}, 1), std::invalid_argument);
    EXPECT_THROW(poison_dataset(d, spec, {-0.1, AttackMode::any_to_one, 0}, 1), std::invalid_argument);
    EXPECT_THROW(poison_dataset(d, spec, {0.1, AttackMode::any_to_one, 10}, 1), std::invalid_argument);
}

TEST(Architecture, LayerCountsAndOutputs)
{
    auto count = [](const ModelGraph& m, LayerKind k) {
        return std::count_if(m.layers.begin(), m.layers.end(), [k](const LayerSpec& l) { return l.kind == k; });
    };
    struct Expect {
        Architecture arch;
        long conv, dense;
    };
    for (auto e : {Expect{Architecture::modded_badnet, 2, 1}, Expect{Architecture::badnet, 2, 2},
                   Expect{Architecture::modded_lenet5, 3, 2}}) {
        auto m = build_architecture(e.arch);
        EXPECT_EQ(count(m, LayerKind::conv2d), e.conv) << to_string(e.arch);
        EXPECT_EQ(count(m, LayerKind::dense), e.dense) << to_string(e.arch);
        EXPECT_EQ(m.num_classes(), 10);
        EXPECT_EQ(parse_architecture(to_string(e.arch)), e.arch);
    }
}

TEST(Evaluate, ConstantModelOnBalancedDataScoresOneTenth)
{
    auto d = synthetic_digits({.count = 100, .seed = 1});
    EXPECT_DOUBLE_EQ(evaluate(constant_model(3), d), 0.1);
}

TEST(Evaluate, ModelAgreesWithItsOwnLabels)
{
    auto d = synthetic_digits({.count = 64, .seed = 1});
    auto m = build_architecture(Architecture::badnet);
    init_he_normal(m, 4);
    d.labels = predict(m, d.images);
    EXPECT_DOUBLE_EQ(evaluate(m, d), 1.0);
}

TEST(AttackSuccess, AnyToOneSkipsTargetNativeImages)
{
    auto d = synthetic_digits({.count = 100, .seed = 1});
    const auto spec = default_trigger(TriggerType::type_i);
    // Always predicting the target: every eligible image counts as a success.
    EXPECT_DOUBLE_EQ(attack_success_rate(constant_model(3), d, spec, {0.1, AttackMode::any_to_one, 3}), 1.0);
    // Always predicting 3 with target 5: native 5s are skipped, nothing succeeds.
    EXPECT_DOUBLE_EQ(attack_success_rate(constant_model(3), d, spec, {0.1, AttackMode::any_to_one, 5}), 0.0);
    // Any-to-any succeeds only where (label + 1) % 10 == 3.
    EXPECT_DOUBLE_EQ(attack_success_rate(constant_model(3), d, spec, {0.1, AttackMode::any_to_any, 0}), 0.1);
}

TEST(Training, SameSeedGivesIdenticalParameters)
{
    auto d = synthetic_digits({.count = 128, .seed = 1});
    const TrainConfig tc{.epochs = 1, .batch_size = 32, .seed = 11};
    auto a = train_model(Architecture::modded_badnet, d, tc);
    auto b = train_model(Architecture::modded_badnet, d, tc);
    EXPECT_EQ(serialize(a.model), serialize(b.model));
    ASSERT_EQ(a.log.epochs.size(), 1u);
    EXPECT_TRUE(std::isfinite(a.log.epochs[0].mean_loss));
    auto c = train_model(Architecture::modded_badnet, d, {.epochs = 1, .batch_size = 32, .seed = 12});
    EXPECT_NE(serialize(a.model), serialize(c.model));
}

TEST(Training, LearnsEasySubset)
{
    auto d = synthetic_digits({.count = 1000, .seed = 1});
    auto test = synthetic_digits({.count = 300, .seed = 2});
    auto r = train_model(Architecture::badnet, d, {.epochs = 3, .seed = 5}, &test);
    EXPECT_GT(r.log.test_accuracy, 0.8);
    EXPECT_LT(r.log.epochs.back().mean_loss, r.log.epochs.front().mean_loss);
}

TEST(Training, NonFiniteDataAbortsWithDiagnostic)
{
    auto d = synthetic_digits({.count = 64, .seed = 1});
    d.images[5] = std::numeric_limits<float>::infinity();
    EXPECT_THROW(train_model(Architecture::modded_badnet, d, {.epochs = 1}), TrainingDivergedError);
}

TEST(Zoo, BalancedCellsHaveEqualBenignAndTrojanCounts)
{
    const auto cells = balanced_cells({Architecture::modded_badnet, Architecture::badnet, Architecture::modded_lenet5}, 14);
    ZooConfig cfg;
    cfg.cells = cells;
    const auto jobs = plan_zoo(cfg);
    EXPECT_EQ(jobs.size(), 84u);
    int benign = 0, a2a = 0, a2o = 0;
    std::set<double> props;
    for (const auto& j : jobs) {
        benign += j.kind == ModelKind::benign;
        a2a += j.kind == ModelKind::any_to_any;
        a2o += j.kind == ModelKind::any_to_one;
        if (j.kind != ModelKind::benign)
            props.insert(j.policy.proportion);
        if (j.kind == ModelKind::any_to_one) {
            EXPECT_GE(j.policy.target_class, 0);
            EXPECT_LT(j.policy.target_class, 10);
        }
    }
    EXPECT_EQ(benign, 42);
    EXPECT_EQ(a2a, 21);
    EXPECT_EQ(a2o, 21);
    EXPECT_EQ(props, (std::set<double>{0.10, 0.15, 0.20}));
}

TEST(Zoo, SixModelZooIsResumableAndIdempotent)
{
    ZooConfig cfg;
    cfg.root = scratch_dir("zoo6");
    cfg.master_seed = 21;
    cfg.data = {.train_count = 200, .test_count = 100, .seed = 3};
    cfg.training = {.epochs = 1, .batch_size = 32};
    for (auto arch : {Architecture::modded_badnet, Architecture::badnet, Architecture::modded_lenet5}) {
        cfg.cells.push_back({arch, ModelKind::benign, TriggerType::type_i, 0.0, 1});
        cfg.cells.push_back({arch, arch == Architecture::badnet ? ModelKind::any_to_any : ModelKind::any_to_one,
                             TriggerType::type_ii, 0.2, 1});
    }
    const auto data = load_zoo_data(cfg.data);
    int trained = 0;
    auto m1 = generate_zoo(cfg, data, [&](const ZooProgress& p) { trained += !p.skipped; });
    EXPECT_EQ(trained, 6);
    ASSERT_EQ(m1.models.size(), 6u);
    EXPECT_TRUE(m1.failures.empty());
    int trojans = 0;
    for (const auto& r : m1.models) {
        trojans += r.is_trojaned;
        EXPECT_NO_THROW(load_model(cfg.root / r.path));
        EXPECT_EQ(r.target_class().has_value(), r.kind == ModelKind::any_to_one);
    }
    EXPECT_EQ(trojans, 3);
    const auto bytes1 = read_bytes(manifest_path(cfg.root));

    int retrained = 0;
    auto m2 = generate_zoo(cfg, data, [&](const ZooProgress& p) { retrained += !p.skipped; });
    EXPECT_EQ(retrained, 0);
    EXPECT_EQ(read_bytes(manifest_path(cfg.root)), bytes1);

    // A deleted model file is rebuilt bit-identically.
    fs::remove(cfg.root / m1.models[2].path);
    auto m3 = generate_zoo(cfg, data);
    EXPECT_EQ(read_bytes(manifest_path(cfg.root)), bytes1);
    EXPECT_EQ(manifest_to_json(m3), manifest_to_json(load_manifest(cfg.root)));
}

TEST(Zoo, FailedTrainingIsRecorded)
{
    ZooConfig cfg;
    cfg.root = scratch_dir("zoo_fail");
    cfg.training = {.epochs = 1};
    cfg.cells = {{Architecture::modded_badnet, ModelKind::benign, TriggerType::type_i, 0.0, 2}};
    auto data = load_zoo_data({.train_count = 64, .test_count = 20});
    data.train.images[0] = std::numeric_limits<float>::quiet_NaN();
    auto m = generate_zoo(cfg, data);
    EXPECT_TRUE(m.models.empty());
    ASSERT_EQ(m.failures.size(), 2u);
    EXPECT_NE(m.failures[0].error.find("diverged"), std::string::npos);
    EXPECT_EQ(load_manifest(cfg.root).failures.size(), 2u);
}

TEST(Zoo, ManifestJsonRoundTrip)
{
    ZooRecord r;
    r.id = "x";
    r.path = "models/x.tsm";
    r.is_trojaned = true;
    r.kind = ModelKind::any_to_one;
    r.trigger = default_trigger(TriggerType::type_ii);
    r.policy = {0.15, AttackMode::any_to_one, 7};
    r.seed = 0xfedcba9876543210ull;
    r.clean_accuracy = 0.987654321;
    r.epoch_loss = {1.5, 0.25};
    ZooManifest m{{r}, {{"y", "boom"}}};
    auto back = manifest_from_json(nlohmann::json::parse(manifest_to_json(m).dump()));
    EXPECT_EQ(manifest_to_json(back), manifest_to_json(m));
    EXPECT_EQ(back.models[0].seed, r.seed);
    EXPECT_EQ(back.models[0].target_class(), 7);
}
