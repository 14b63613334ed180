#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "trojanscope/detector.hpp"
#include "trojanscope/training.hpp"
#include "trojanscope/trigger.hpp"

using namespace trojanscope;

namespace {

// Independent median / MAD computation used as the oracle.
double oracle_median(std::vector<double> v)
{
    for (std::size_t i = 1; i < v.size(); ++i)
        for (std::size_t j = i; j > 0 && v[j - 1] > v[j]; --j)
            std::swap(v[j - 1], v[j]);
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

std::vector<double> oracle_index(const std::vector<double>& v)
{
    const double med = oracle_median(v);
    std::vector<double> dev;
    for (double x : v)
        dev.push_back(std::fabs(x - med));
    const double mad = 1.4826 * oracle_median(dev);
    std::vector<double> out;
    for (double x : v)
        out.push_back(mad == 0 ? 0.0 : std::fabs(x - med) / mad);
    return out;
}

DetectorConfig small_config()
{
    DetectorConfig c;
    c.mlp_widths = {32, 16};
    c.embedding_dim = 8;
    c.epochs = 25;
    c.batch_size = 16;
    c.lr = 0.002;
    c.seed = 3;
    return c;
}

// Synthetic fingerprints: Trojaned models carry a bright corner patch in the
// perturbation and a lower gamma.
Fingerprint fake_fingerprint(int label, std::mt19937_64& rng, int batch)
{
    std::normal_distribution<float> n(0.0f, 0.1f);
    Fingerprint f;
    f.batch_index = batch;
    for (StreamFeatures* s : {&f.linf, &f.l2}) {
        Tensor delta({28, 28, 1});
        for (std::size_t i = 0; i < delta.size(); ++i)
            delta[i] = n(rng);
        if (label == 1)
            for (int y = 20; y < 26; ++y)
                for (int x = 20; x < 26; ++x)
                    delta[y * 28 + x] += 0.8f;
        s->window = max_energy_window(delta);
        s->image = perturbation_image(delta);
        s->gamma = (label == 1 ? 30.0 : 60.0) + 10.0 * n(rng);
    }
    return f;
}

std::vector<ModelFingerprints> fake_zoo(int per_class, int batches, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::vector<ModelFingerprints> zoo;
    for (int i = 0; i < 2 * per_class; ++i) {
        ModelFingerprints m;
        m.id = "m" + std::to_string(i);
        m.label = i % 2;
        for (int b = 0; b < batches; ++b)
            m.fingerprints.push_back(fake_fingerprint(m.label, rng, b));
        zoo.push_back(std::move(m));
    }
    return zoo;
}

}  // namespace

TEST(Mad, HandComputedCase)
{
    const std::vector<double> v{2, 3, 3, 4, 20};
    const auto r = mad_anomaly_index(v);
    EXPECT_DOUBLE_EQ(r.median, 3.0);
    EXPECT_DOUBLE_EQ(r.mad, 1.4826);
    EXPECT_NEAR(r.index[4], 17.0 / 1.4826, 1e-6);
    EXPECT_NEAR(r.index[4], 11.47, 5e-3);
    EXPECT_NEAR(r.index[0], 1.0 / 1.4826, 1e-12);
    EXPECT_FALSE(r.degenerate);
}

TEST(Mad, ConstantListIsDegenerate)
{
    const std::vector<double> v(6, 4.5);
    const auto r = mad_anomaly_index(v);
    EXPECT_TRUE(r.degenerate);
    for (double x : r.index)
        EXPECT_EQ(x, 0.0);
}

TEST(Mad, MatchesBruteForceOnRandomLists)
{
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 3 + static_cast<int>(rng() % 23);
        std::vector<double> v(n);
        const int mode = trial % 4;
        for (double& x : v) {
            if (mode == 0)
                x = std::uniform_real_distribution<double>(0, 100)(rng);
            else if (mode == 1)
                x = static_cast<double>(rng() % 5);  // many ties
            else if (mode == 2)
                x = 7.25;  // constant
            else
                x = std::exp(std::normal_distribution<double>(0, 2)(rng));
        }
        const auto r = mad_anomaly_index(v);
        const auto expect = oracle_index(v);
        ASSERT_EQ(r.index.size(), expect.size());
        for (int i = 0; i < n; ++i)
            EXPECT_EQ(r.index[i], expect[i]) << "trial " << trial << " item " << i;
        if (mode == 2)
            EXPECT_TRUE(r.degenerate);
    }
}

TEST(Mad, PermutationPermutesOutput)
{
    std::vector<double> v{5, 1, 9, 2, 2, 40, 3};
    const auto a = mad_anomaly_index(v);
    std::vector<int> perm{3, 0, 6, 5, 1, 4, 2};
    std::vector<double> w;
    for (int p : perm)
        w.push_back(v[p]);
    const auto b = mad_anomaly_index(w);
    for (std::size_t i = 0; i < perm.size(); ++i)
        EXPECT_EQ(b.index[i], a.index[perm[i]]);
}

TEST(Mad, InfiniteValuesExcludedAndTooFewRejected)
{
    const double inf = std::numeric_limits<double>::infinity();
    const std::vector<double> v{2, inf, 3, 3, 4, 20};
    const auto r = mad_anomaly_index(v);
    EXPECT_TRUE(r.excluded[1]);
    EXPECT_TRUE(std::isnan(r.index[1]));
    EXPECT_NEAR(r.index[5], 17.0 / 1.4826, 1e-9);
    EXPECT_THROW(mad_anomaly_index(std::vector<double>{1, 2, inf}), std::invalid_argument);
    EXPECT_THROW(mad_anomaly_index(std::vector<double>{1, 2}), std::invalid_argument);
}

TEST(TargetRule, EasyOutlierSelected)
{
    const std::vector<double> sigma{10, 11, 9, 10, 1, 10, 11, 9, 10, 10};
    const auto rule = select_target(sigma, mad_anomaly_index(sigma));
    ASSERT_TRUE(rule.target);
    EXPECT_EQ(*rule.target, 4);
    EXPECT_FALSE(rule.ambiguous);
}

TEST(TargetRule, HardOutlierIgnored)
{
    const std::vector<double> sigma{10, 11, 9, 10, 100, 10, 11, 9, 10, 10};
    const auto a = mad_anomaly_index(sigma);
    EXPECT_GT(a.index[4], 2.0);
    EXPECT_FALSE(select_target(sigma, a).target);
}

TEST(TargetRule, TieGoesToSmallestClass)
{
    const std::vector<double> sigma{9, 1, 9, 10, 11, 10, 1, 10, 11, 10};
    const auto rule = select_target(sigma, mad_anomaly_index(sigma));
    ASSERT_TRUE(rule.target);
    EXPECT_EQ(*rule.target, 1);
    EXPECT_TRUE(rule.ambiguous);
    EXPECT_EQ(rule.qualifying, (std::vector<int>{1, 6}));
}

TEST(TargetRule, NoOutlierGivesNone)
{
    const std::vector<double> sigma{8, 12, 9, 11, 10, 10.5, 9.5, 11.5, 8.5, 10};
    EXPECT_FALSE(select_target(sigma, mad_anomaly_index(sigma)).target);
}

TEST(Folds, StratifiedAndDisjoint)
{
    std::vector<int> labels;
    for (int i = 0; i < 84; ++i)
        labels.push_back(i < 42 ? 0 : 1);
    const auto folds = stratified_folds(labels, 5, 9);
    std::vector<int> seen(84, 0);
    for (const auto& f : folds) {
        int pos = 0;
        for (int i : f) {
            ++seen[i];
            pos += labels[i];
        }
        EXPECT_GE(f.size(), 16u);
        EXPECT_LE(f.size(), 17u);
        EXPECT_GE(pos, 8);
        EXPECT_LE(pos, 9);
    }
    for (int s : seen)
        EXPECT_EQ(s, 1);
    EXPECT_EQ(stratified_folds(labels, 5, 9), folds);
}

TEST(Detector, HeadWidthFollowsConfig)
{
    DetectorConfig c;
    EXPECT_EQ(c.head_inputs(), 2 * (256 + 128 + 1));
    c.embedding_dim = 1280;
    EXPECT_EQ(c.stream_feature_size(), 1537);
    EXPECT_EQ(c.head_inputs(), 3074);
    c.use_l2 = false;
    c.use_gamma = false;
    EXPECT_EQ(c.head_inputs(), 256 + 1280);
}

TEST(Detector, StreamsShareNoParameters)
{
    std::mt19937_64 rng(4);
    auto f = fake_fingerprint(1, rng, 0);
    Fingerprint zeroed = f;
    zeroed.linf.window.values.assign(2500, 0.0f);
    zeroed.linf.image.fill(0.0f);
    zeroed.linf.gamma = 0;

    auto d = make_detector(small_config());
    auto diff = [&](const DetectorModel& m) {
        const Fingerprint* a[] = {&f};
        const Fingerprint* b[] = {&zeroed};
        return detector_logits(m, a)[0] - detector_logits(m, b)[0];
    };
    const double before = diff(d);
    EXPECT_NE(before, 0.0);
    DetectorConfig other = small_config();
    other.seed = 99;
    auto e = make_detector(other);
    d.streams[1] = e.streams[1];  // replace every L2 parameter
    EXPECT_NEAR(diff(d), before, 1e-4 * std::max(1.0, std::fabs(before)));
}

TEST(Detector, MeanAggregationAndThreshold)
{
    DetectorConfig c = small_config();
    auto d = make_detector(c);
    std::mt19937_64 rng(5);
    const auto one = fake_fingerprint(0, rng, 0);
    std::vector<Fingerprint> same(10, one);
    const Fingerprint* single[] = {&one};
    const double z = detector_logits(d, single)[0];
    const auto p = predict_trojan(d, same);
    EXPECT_NEAR(p.p_trojan, 1.0 / (1.0 + std::exp(-z)), 1e-12);
    EXPECT_EQ(p.used, 10);

    // Zero head: every probability is exactly 0.5, which counts as Trojaned.
    d.head.params[1].weight.fill(0.0f);
    d.head.params[1].bias.fill(0.0f);
    const auto half = predict_trojan(d, same);
    EXPECT_EQ(half.p_trojan, 0.5);
    EXPECT_TRUE(half.trojaned());
    EXPECT_THROW(predict_trojan(d, std::span<const Fingerprint>(same).first(9)), std::invalid_argument);
}

TEST(Detector, PermutationInvariantAndSkipsDegenerate)
{
    const auto d = make_detector(small_config());
    auto zoo = fake_zoo(1, 10, 6);
    auto fps = zoo[1].fingerprints;
    const double p = predict_trojan(d, fps).p_trojan;
    std::reverse(fps.begin(), fps.end());
    std::rotate(fps.begin(), fps.begin() + 3, fps.end());
    EXPECT_EQ(predict_trojan(d, fps).p_trojan, p);

    fps[2].l2.degenerate = true;
    const auto q = predict_trojan(d, fps);
    EXPECT_TRUE(q.partial);
    EXPECT_EQ(q.used, 9);
    EXPECT_TRUE(std::isnan(q.batch_probabilities[2]));
    for (auto& f : fps)
        f.linf.degenerate = true;
    EXPECT_THROW(predict_trojan(d, fps), std::runtime_error);
}

TEST(Detector, UntrainedIsNearChance)
{
    const auto zoo = fake_zoo(20, 10, 7);
    double sum = 0;
    for (std::uint64_t s = 0; s < 6; ++s) {
        DetectorConfig c = small_config();
        c.seed = 100 + s;
        sum += evaluate_detector(make_detector(c), zoo).accuracy;
    }
    EXPECT_NEAR(sum / 6, 0.5, 0.2);
}

TEST(Detector, LearnsSeparableFingerprints)
{
    auto zoo = fake_zoo(10, 4, 8);
    DetectorConfig c = small_config();
    c.batches_used = 4;
    const auto cv = cross_validate(zoo, c);
    EXPECT_GE(cv.mean_accuracy, 0.9);
    for (const auto& m : zoo)
        EXPECT_TRUE(cv.out_of_fold(m.id).has_value());

    // Training on flipped labels inverts the decisions on the true labels.
    auto flipped = zoo;
    for (auto& m : flipped)
        m.label = 1 - m.label;
    const auto trained = train_detector(flipped, c).detector;
    const auto test = fake_zoo(10, 4, 18);
    const double acc = evaluate_detector(train_detector(zoo, c).detector, test).accuracy;
    const double inverse = evaluate_detector(trained, test).accuracy;
    EXPECT_NEAR(inverse, 1.0 - acc, 0.15);
}

TEST(Detector, TrainingIsDeterministic)
{
    const auto zoo = fake_zoo(6, 4, 9);
    DetectorConfig c = small_config();
    c.batches_used = 4;
    c.epochs = 5;
    c.folds = 3;
    const auto a = cross_validate(zoo, c);
    const auto b = cross_validate(zoo, c);
    EXPECT_EQ(a.mean_accuracy, b.mean_accuracy);
    EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
}

TEST(Detector, SingleClassRejected)
{
    auto zoo = fake_zoo(4, 10, 10);
    for (auto& m : zoo)
        m.label = 1;
    EXPECT_THROW(train_detector(zoo, small_config()), std::invalid_argument);
}

TEST(Detector, AblationConfigTrains)
{
    const auto zoo = fake_zoo(6, 10, 11);
    DetectorConfig c = small_config();
    c.use_l2 = false;
    c.use_gamma = false;
    c.batches_used = 1;
    c.folds = 3;
    const auto cv = cross_validate(zoo, c);
    EXPECT_EQ(cv.folds.size(), 3u);
    EXPECT_EQ(cv.folds[0].record.train_samples, 8 - 2);  // 8 training models minus 2 held for validation
}

TEST(Detector, PersistenceRoundTrip)
{
    const auto zoo = fake_zoo(4, 10, 12);
    DetectorConfig c = small_config();
    c.epochs = 2;
    const auto d = train_detector(zoo, c).detector;
    const auto path = std::filesystem::temp_directory_path() / "trojanscope_detector_test.tsm";
    save_detector(path, d, {{"note", "x"}});
    const auto e = load_detector(path);
    EXPECT_EQ(to_json(e.config), to_json(d.config));
    ASSERT_EQ(e.streams.size(), 2u);
    EXPECT_EQ(e.streams[0].gamma.mean, d.streams[0].gamma.mean);
    EXPECT_EQ(e.streams[1].gamma.std, d.streams[1].gamma.std);
    for (const auto& m : zoo)
        EXPECT_EQ(predict_trojan(e, m.fingerprints).p_trojan, predict_trojan(d, m.fingerprints).p_trojan);
    std::filesystem::remove(path);
}

TEST(Report, JsonRoundTrip)
{
    DetectionReport r;
    r.model_id = "x";
    r.batch_probabilities = {0.25, std::nan(""), 0.75};
    r.p_trojan = 0.5;
    r.sigma = {1, std::numeric_limits<double>::infinity(), 3};
    r.anomaly_index = {0.5, std::nan(""), 2.5};
    r.predicted_target = 0;
    r.flags = {"f"};
    const auto j = to_json(r);
    const auto back = detection_report_from_json(j);
    EXPECT_EQ(to_json(back).dump(), j.dump());
    EXPECT_TRUE(std::isinf(back.sigma[1]));
}

TEST(TargetClass, OverrideBelowHalfSkipsStageTwo)
{
    const auto d = make_detector(small_config());
    auto model = make_model<float>({28, 28, 1}, {LayerSpec::flatten(), LayerSpec::dense(784, 10)});
    const auto pool = synthetic_digits({.count = 20, .seed = 1});
    const auto r = predict_target_class(model, d, {}, pool, {}, 0.0, "benign");
    EXPECT_FALSE(r.predicted_target);
    EXPECT_TRUE(r.sigma.empty());
    EXPECT_TRUE(r.p_trojan_override);
}

TEST(TargetClass, AnyToOneTargetIsEasiestOutlier)
{
    auto data = synthetic_digits({.count = 3000, .seed = 51});
    const PoisonPolicy policy{.proportion = 0.1, .mode = AttackMode::any_to_one, .target_class = 0};
    auto poisoned = poison_dataset(data, default_trigger(TriggerType::type_i), policy, 8);
    const auto model = train_model(Architecture::badnet, poisoned.data, {.epochs = 4, .seed = 8}).model;
    const auto pool = synthetic_digits({.count = 200, .seed = 52});
    const auto r = target_class_stage(model, pool, {});
    ASSERT_EQ(r.sigma.size(), 10u);
    ASSERT_TRUE(r.predicted_target) << to_json(r).dump();
    EXPECT_EQ(*r.predicted_target, 0);
    EXPECT_GT(r.anomaly_index[0], 2.0);
    EXPECT_EQ(std::min_element(r.sigma.begin(), r.sigma.end()) - r.sigma.begin(), 0);
}
