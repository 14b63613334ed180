#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "fd_oracle.hpp"
#include "trojanscope/diffnet.hpp"
#include "trojanscope/model_io.hpp"

using namespace trojanscope;

namespace {

ModelGraph small_conv_net(std::uint64_t seed)
{
    auto m = make_model<float>({8, 8, 1}, {LayerSpec::conv2d(1, 4, 3, 1, 1), LayerSpec::relu(),
                                           LayerSpec::maxpool2d(2, 2), LayerSpec::conv2d(4, 6, 3), LayerSpec::relu(),
                                           LayerSpec::flatten(), LayerSpec::dense(24, 5)});
    init_he_normal(m, seed);
    return m;
}

Tensor random_batch(std::vector<int> shape, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    Tensor t(std::move(shape));
    for (float& v : t.values())
        v = d(rng);
    return t;
}

}  // namespace

TEST(Forward, IdentityDenseLayerReturnsInput)
{
    auto m = make_model<float>({1, 1, 3}, {LayerSpec::flatten(), LayerSpec::dense(3, 3)});
    for (int i = 0; i < 3; ++i)
        m.params[1].weight[i * 3 + i] = 1.0f;
    Tensor x({1, 1, 1, 3}, std::vector<float>{0.25f, -4.0f, 7.5f});
    Tensor y = forward(m, x);
    EXPECT_EQ(y.shape(), (std::vector<int>{1, 3}));
    EXPECT_EQ(y.storage(), (std::vector<float>{0.25f, -4.0f, 7.5f}));
}

TEST(Forward, ReluLayer)
{
    auto m = make_model<float>({1, 1, 3}, {LayerSpec::relu(), LayerSpec::flatten()});
    Tensor x({1, 1, 1, 3}, std::vector<float>{-1.0f, 0.0f, 2.0f});
    EXPECT_EQ(forward(m, x).storage(), (std::vector<float>{0.0f, 0.0f, 2.0f}));
}

TEST(Forward, DeterministicAndPure)
{
    const ModelGraph m = small_conv_net(5);
    const auto before = serialize(m);
    Tensor x = random_batch({3, 8, 8, 1}, 9);
    Tensor a = forward(m, x);
    Tensor b = forward(m, x);
    EXPECT_EQ(a, b);
    std::vector<int> labels{0, 1, 2};
    (void)grad_input(m, x, labels);
    (void)grad_params(m, x, labels);
    EXPECT_EQ(serialize(m), before);
}

TEST(Forward, ShapeMismatchNamesLayer)
{
    EXPECT_THROW(make_model<float>({8, 8, 1}, {LayerSpec::conv2d(3, 4, 3), LayerSpec::flatten()}), ShapeError);
    try {
        make_model<float>({8, 8, 1}, {LayerSpec::flatten(), LayerSpec::dense(10, 2)});
        FAIL();
    } catch (const ShapeError& e) {
        EXPECT_EQ(e.layer(), 1);
        EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos);
    }
    const ModelGraph m = small_conv_net(1);
    EXPECT_THROW(forward(m, Tensor({2, 9, 8, 1})), ShapeError);
}

TEST(Forward, NonFiniteActivationReportsLayer)
{
    ModelGraph m = small_conv_net(2);
    m.params[3].weight[0] = std::numeric_limits<float>::infinity();
    try {
        forward(m, random_batch({1, 8, 8, 1}, 3));
        FAIL();
    } catch (const NonFiniteError& e) {
        EXPECT_EQ(e.layer(), 3);
    }
}

TEST(Loss, UniformLogitsGiveLogN)
{
    for (int classes : {2, 3, 10, 37}) {
        auto m = make_model<float>({2, 2, 1}, {LayerSpec::flatten(), LayerSpec::dense(4, classes)});
        for (int c = 0; c < classes; ++c)
            m.params[1].bias[c] = 0.3f;
        Tensor x = random_batch({4, 2, 2, 1}, 1);
        auto logits = forward(m, x);
        std::vector<int> labels{0, 1 % classes, 0, classes - 1};
        auto l = evaluate_loss(logits, labels, {});
        EXPECT_NEAR(l.value, std::log(double(classes)), 1e-9);
    }
}

TEST(Loss, RejectsBadLabels)
{
    Tensor logits({2, 3});
    std::vector<int> bad{0, 3};
    EXPECT_THROW(evaluate_loss(logits, bad, {}), std::out_of_range);
    Tensor two({2, 2});
    std::vector<int> ok{0, 1};
    EXPECT_THROW(evaluate_loss(two, ok, {LossKind::binary_cross_entropy}), std::invalid_argument);
}

TEST(GradInput, AffineSingleLogitIsProportionalToWeights)
{
    auto m = make_model<float>({1, 1, 4}, {LayerSpec::flatten(), LayerSpec::dense(4, 1)});
    const std::vector<float> w{0.5f, -1.0f, 2.0f, 0.25f};
    std::copy(w.begin(), w.end(), m.params[1].weight.data());
    m.params[1].bias[0] = 0.1f;
    Tensor x({1, 1, 1, 4}, std::vector<float>{0.2f, 0.4f, 0.6f, 0.8f});
    std::vector<int> label{1};
    Tensor g = grad_input(m, x, label, {LossKind::binary_cross_entropy});
    const double z = 0.1 + 0.5 * 0.2 - 0.4 + 2.0 * 0.6 + 0.25 * 0.8;
    const double scale = 1.0 / (1.0 + std::exp(-z)) - 1.0;
    for (int i = 0; i < 4; ++i)
        EXPECT_NEAR(g[i], scale * w[i], 1e-6);
}

TEST(GradInput, ZeroWeightsGiveZeroGradient)
{
    auto m = make_model<float>({8, 8, 1}, {LayerSpec::conv2d(1, 4, 3, 1, 1), LayerSpec::relu(),
                                           LayerSpec::flatten(), LayerSpec::dense(256, 3)});
    Tensor x = random_batch({2, 8, 8, 1}, 4);
    std::vector<int> labels{0, 2};
    Tensor g = grad_input(m, x, labels);
    for (float v : g.values())
        EXPECT_EQ(v, 0.0f);
}

TEST(GradParams, ZeroBatchThroughDense)
{
    auto m = make_model<float>({1, 1, 3}, {LayerSpec::flatten(), LayerSpec::dense(3, 4)});
    init_he_normal(m, 3);
    m.params[1].bias[2] = 0.7f;
    Tensor x({1, 1, 1, 3});
    std::vector<int> labels{1};
    auto logits = forward(m, x);
    auto loss = evaluate_loss(logits, labels, {});
    auto g = grad_params(m, x, labels);
    for (float v : g[1].weight.values())
        EXPECT_EQ(v, 0.0f);
    for (int o = 0; o < 4; ++o)
        EXPECT_FLOAT_EQ(g[1].bias[o], loss.grad[o]);
}

TEST(GradParams, DuplicatedSampleMatchesSingleSample)
{
    const ModelGraph m = small_conv_net(8);
    Tensor one = random_batch({1, 8, 8, 1}, 5);
    Tensor two({2, 8, 8, 1});
    std::copy(one.values().begin(), one.values().end(), two.data());
    std::copy(one.values().begin(), one.values().end(), two.data() + one.size());
    std::vector<int> l1{3}, l2{3, 3};
    auto g1 = grad_params(m, one, l1);
    auto g2 = grad_params(m, two, l2);
    for (std::size_t i = 0; i < g1.size(); ++i)
        for (std::size_t e = 0; e < g1[i].weight.size(); ++e)
            EXPECT_NEAR(g1[i].weight[e], g2[i].weight[e], 1e-6 * (1 + std::abs(g1[i].weight[e])));
}

TEST(GradCheck, ThreeLayerConvNetMatchesFiniteDifferences)
{
    // 4 x (8 x 8 x 1), three conv layers, central differences at step 1e-3.
    auto mf = make_model<float>({8, 8, 1}, {LayerSpec::conv2d(1, 3, 3, 1, 1), LayerSpec::relu(),
                                            LayerSpec::conv2d(3, 4, 3, 1, 0), LayerSpec::relu(),
                                            LayerSpec::maxpool2d(2, 2), LayerSpec::conv2d(4, 5, 3), LayerSpec::flatten(),
                                            LayerSpec::dense(5, 4)});
    init_he_normal(mf, 21);
    const auto m = mf.cast<double>();
    Tensor xb = random_batch({4, 8, 8, 1}, 22);
    std::vector<double> x(xb.values().begin(), xb.values().end());
    std::vector<int> labels{0, 1, 2, 3};
    std::mt19937 rng(1);
    auto si = oracle::check_input_gradient(m, x, 4, labels, LossKind::softmax_cross_entropy, 0, rng);
    EXPECT_GT(si.checked, 200);
    EXPECT_LT(si.max_rel_error, 1e-4) << si.worst_analytic << " vs " << si.worst_numeric;
    auto sp = oracle::check_param_gradient(m, x, 4, labels, LossKind::softmax_cross_entropy, 0, rng);
    EXPECT_GT(sp.checked, 200);
    EXPECT_LT(sp.max_rel_error, 1e-4) << sp.worst_analytic << " vs " << sp.worst_numeric;
}

TEST(GradCheck, BinaryCrossEntropyHead)
{
    auto mf = make_model<float>({6, 6, 2}, {LayerSpec::flatten(), LayerSpec::dense(72, 8), LayerSpec::relu(),
                                            LayerSpec::dense(8, 1)});
    init_he_normal(mf, 4);
    const auto m = mf.cast<double>();
    Tensor xb = random_batch({3, 6, 6, 2}, 5);
    std::vector<double> x(xb.values().begin(), xb.values().end());
    std::vector<int> labels{1, 0, 1};
    std::mt19937 rng(2);
    auto si = oracle::check_input_gradient(m, x, 3, labels, LossKind::binary_cross_entropy, 0, rng);
    EXPECT_LT(si.max_rel_error, 1e-4);
    auto sp = oracle::check_param_gradient(m, x, 3, labels, LossKind::binary_cross_entropy, 0, rng);
    EXPECT_LT(sp.max_rel_error, 1e-4);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged)
{
    std::vector<float> p{1.0f, -2.0f, 3.0f};
    const auto before = p;
    std::vector<float> g(3, 0.0f);
    AdamState st;
    for (int i = 0; i < 5; ++i)
        adam_step({std::span<float>(p)}, {std::span<const float>(g)}, st, {});
    EXPECT_EQ(p, before);
}

TEST(Adam, FirstStepMovesByLearningRate)
{
    // From zero moments: m = (1-b1) g, v = (1-b2) g^2; after bias correction
    // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
    for (float g0 : {0.5f, -3.0f, 1e-3f}) {
        std::vector<float> p{0.0f};
        std::vector<float> g{g0};
        AdamState st;
        adam_step({std::span<float>(p)}, {std::span<const float>(g)}, st, {0.001});
        const double expected = -0.001 * g0 / (std::abs(g0) + 1e-8);
        EXPECT_NEAR(p[0], expected, 1e-8);
    }
}

TEST(Adam, JointUpdateEqualsSeparateUpdates)
{
    std::mt19937 rng(3);
    std::normal_distribution<float> d;
    std::vector<float> a(17), b(5), ga(17), gb(5);
    for (auto* v : {&a, &b, &ga, &gb})
        for (auto& x : *v)
            x = d(rng);
    auto a2 = a, b2 = b;
    AdamState joint, sa, sb;
    for (int step = 0; step < 4; ++step) {
        adam_step({std::span<float>(a), std::span<float>(b)}, {std::span<const float>(ga), std::span<const float>(gb)},
                  joint, {});
        adam_step({std::span<float>(a2)}, {std::span<const float>(ga)}, sa, {});
        adam_step({std::span<float>(b2)}, {std::span<const float>(gb)}, sb, {});
    }
    EXPECT_EQ(a, a2);
    EXPECT_EQ(b, b2);
}

TEST(Adam, ShapeMismatchRejected)
{
    std::vector<float> p(3), g(2);
    AdamState st;
    EXPECT_THROW(adam_step({std::span<float>(p)}, {std::span<const float>(g)}, st, {}), std::invalid_argument);
}

TEST(Serialize, RoundTripIsBitExact)
{
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        ModelGraph m = small_conv_net(seed);
        // include awkward bit patterns
        m.params[0].bias[0] = -0.0f;
        m.params[0].bias[1] = std::numeric_limits<float>::denorm_min();
        const auto bytes = serialize(m);
        const ModelGraph back = deserialize(bytes);
        EXPECT_EQ(back.layers, m.layers);
        for (std::size_t i = 0; i < m.params.size(); ++i) {
            ASSERT_EQ(back.params[i].weight.size(), m.params[i].weight.size());
            EXPECT_EQ(std::memcmp(back.params[i].weight.data(), m.params[i].weight.data(),
                                  m.params[i].weight.size() * 4),
                      0);
            EXPECT_EQ(std::memcmp(back.params[i].bias.data(), m.params[i].bias.data(), m.params[i].bias.size() * 4),
                      0);
        }
        EXPECT_EQ(serialize(back), bytes);
    }
}

TEST(Serialize, TruncationIsReported)
{
    const auto bytes = serialize(small_conv_net(1));
    for (std::size_t cut : {std::size_t(0), std::size_t(5), std::size_t(11), std::size_t(40), bytes.size() - 1,
                            bytes.size() - 100}) {
        std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + cut);
        EXPECT_THROW(deserialize(part), TruncatedStreamError) << "cut at " << cut;
    }
}

TEST(Serialize, ChecksumAndVersionErrorsAreDistinguished)
{
    auto bytes = serialize(small_conv_net(1));
    auto flipped = bytes;
    flipped.back() ^= 0x01;
    EXPECT_THROW(deserialize(flipped), ChecksumError);
    auto payload = bytes;
    payload[bytes.size() - 10] ^= 0x80;
    EXPECT_THROW(deserialize(payload), ChecksumError);
    auto versioned = bytes;
    versioned[4] = 9;
    EXPECT_THROW(deserialize(versioned), VersionMismatchError);
    auto magic = bytes;
    magic[0] = 'X';
    try {
        deserialize(magic);
        FAIL();
    } catch (const ChecksumError&) {
        FAIL() << "bad magic should not be reported as a checksum error";
    } catch (const ModelFormatError&) {
    }
}

TEST(Serialize, BundleCarriesMetadata)
{
    ModelBundle b;
    b.graphs.emplace_back("a", small_conv_net(1));
    b.graphs.emplace_back("b", small_conv_net(2));
    b.metadata["gamma_mean"] = 1.25;
    const auto bytes = serialize_bundle(b);
    const ModelBundle back = deserialize_bundle(bytes);
    ASSERT_EQ(back.graphs.size(), 2u);
    EXPECT_EQ(back.metadata["gamma_mean"].get<double>(), 1.25);
    EXPECT_EQ(serialize_bundle(back), bytes);
    EXPECT_THROW(deserialize(bytes), ModelFormatError);
}
