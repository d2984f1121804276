#include <gtest/gtest.h>

#include <algorithm>

#include "cxrnet/explain.hpp"
#include "support/oracles.hpp"

using cxr::Tensor;

namespace {

cxr::ModelConfig small_config() {
    cxr::ModelConfig c = cxr::toy_model_config(24);
    c.block_filters = {4, 6};
    c.dense_widths = {5};
    return c;
}

std::size_t argmax(const Tensor<float>& t) {
    return static_cast<std::size_t>(std::max_element(t.span().begin(), t.span().end()) - t.span().begin());
}

}  // namespace

TEST(FeatureMaps, DefaultModelFirstBlockShape) {
    cxr::Rng rng(1);
    cxr::Model<float> m(cxr::ModelConfig{}, rng);
    const auto x = oracle::random_tensor<float>({1, 1, 150, 150}, rng, 0, 1);
    const auto before = m.snapshot();
    const auto maps = cxr::feature_maps(m, x, 0);
    ASSERT_EQ(maps.size(), 32u);
    for (const auto& mp : maps) {
        EXPECT_EQ(mp.shape(), (cxr::Shape{150, 150}));
        for (float v : mp.span()) {
            ASSERT_GE(v, 0.0f);
            ASSERT_LE(v, 1.0f);
        }
    }
    EXPECT_EQ(m.snapshot(), before);
}

TEST(FeatureMaps, ZeroInputGivesZeroMaps) {
    cxr::Rng rng(2);
    cxr::Model<float> m(small_config(), rng);
    for (std::size_t b = 0; b < 2; ++b)
        for (const auto& mp : cxr::feature_maps(m, Tensor<float>({1, 1, 24, 24}, 0.0f), b))
            for (float v : mp.span()) EXPECT_EQ(v, 0.0f);
}

TEST(FeatureMaps, Deterministic) {
    cxr::Rng rng(3);
    cxr::Model<float> m(small_config(), rng);
    const auto x = oracle::random_tensor<float>({1, 1, 24, 24}, rng, 0, 1);
    EXPECT_EQ(cxr::feature_maps(m, x, 1), cxr::feature_maps(m, x, 1));
}

TEST(FeatureMaps, BlockOutOfRange) {
    cxr::Rng rng(4);
    cxr::Model<float> m(small_config(), rng);
    try {
        cxr::feature_maps(m, Tensor<float>({1, 1, 24, 24}), 2);
        FAIL();
    } catch (const cxr::Error& e) {
        EXPECT_EQ(e.kind(), cxr::ErrorKind::parameter);
    }
}

TEST(GradCam, ConstantPositiveMapIsAllOnes) {
    cxr::ModelConfig c;
    c.input_size = 8;
    c.block_filters = {1};
    c.kernel = 1;
    c.batchnorm = false;
    c.dense_widths = {};
    c.dropout = 0;
    cxr::Rng rng(5);
    cxr::Model<float> m(c, rng);
    m.block(0).conv.kernels.fill(0.0f);
    m.block(0).conv.bias.fill(1.0f);
    m.dense_layers().back().p.weights.fill(0.5f);
    const auto hm = cxr::grad_cam(m, oracle::random_tensor<float>({1, 1, 8, 8}, rng, 0, 1));
    EXPECT_TRUE(hm.constant);
    for (float v : hm.values.span()) EXPECT_EQ(v, 1.0f);
}

TEST(GradCam, NegativeWeightPathGivesZeros) {
    cxr::ModelConfig c;
    c.input_size = 8;
    c.block_filters = {1};
    c.kernel = 1;
    c.batchnorm = false;
    c.dense_widths = {};
    cxr::Rng rng(6);
    cxr::Model<float> m(c, rng);
    m.block(0).conv.kernels.fill(0.0f);
    m.block(0).conv.bias.fill(1.0f);
    m.dense_layers().back().p.weights.fill(-0.5f);
    const auto hm = cxr::grad_cam(m, Tensor<float>({1, 1, 8, 8}, 0.3f));
    EXPECT_TRUE(hm.constant);
    for (float v : hm.values.span()) EXPECT_EQ(v, 0.0f);
}

TEST(GradCam, ValuesInUnitIntervalFuzz) {
    cxr::Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        cxr::Rng init(static_cast<std::uint64_t>(trial));
        auto cfg = small_config();
        cfg.batchnorm = trial % 2 == 0;
        cxr::Model<float> m(cfg, init);
        const auto x = oracle::random_tensor<float>({1, 1, 24, 24}, rng, 0, 1);
        const auto hm = cxr::grad_cam(m, x, static_cast<std::size_t>(trial % 2));
        ASSERT_EQ(hm.values.shape(), (cxr::Shape{24, 24}));
        for (float v : hm.values.span()) {
            ASSERT_GE(v, 0.0f);
            ASSERT_LE(v, 1.0f);
        }
        EXPECT_EQ(hm.source_layer, static_cast<std::size_t>(trial % 2));
    }
}

TEST(GradCam, ActivationGradientMatchesFiniteDifferences) {
    cxr::Rng rng(8);
    for (std::size_t block = 0; block < 2; ++block) {
        cxr::Model<double> m([] {
            auto c = small_config();
            c.input_size = 16;
            c.batchnorm = false;
            return c;
        }(), rng);
        // Strictly positive, tie-free activations keep every pool window and
        // ReLU away from its kink.
        for (std::size_t b = 0; b < m.block_count(); ++b) {
            for (auto& w : m.block(b).conv.kernels.span()) w = std::abs(w);
            m.block(b).conv.bias.fill(0.1);
        }
        const auto x = oracle::random_tensor<double>({1, 1, 16, 16}, rng, 0, 1);
        m.forward(x, cxr::Mode::infer);
        m.backward(Tensor<double>({1}, 1.0));
        Tensor<double> act = m.block(block).activation;
        const Tensor<double> grad = m.block(block).activation_grad;
        auto logit = [&] { return m.forward_from_activation(block, act)[0]; };
        EXPECT_LT(oracle::finite_difference_check(act, grad, logit).max_rel_error, 1e-3);
    }
}

TEST(GradCam, InvariantToPositiveHeadScaling) {
    cxr::Rng rng(9);
    cxr::Model<float> m(small_config(), rng);
    const auto x = oracle::random_tensor<float>({1, 1, 24, 24}, rng, 0, 1);
    const auto a = cxr::grad_cam(m, x);
    auto& head = m.dense_layers().back().p;
    for (auto& w : head.weights.span()) w *= 4.0f;
    for (auto& b : head.bias.span()) b *= 4.0f;
    const auto b = cxr::grad_cam(m, x);
    EXPECT_EQ(argmax(a.values), argmax(b.values));
    for (std::size_t i = 0; i < a.values.size(); ++i) EXPECT_NEAR(a.values[i], b.values[i], 1e-4);
}

TEST(GradCam, DeterministicAndLeavesWeights) {
    cxr::Rng rng(10);
    cxr::Model<float> m(small_config(), rng);
    const auto x = oracle::random_tensor<float>({1, 1, 24, 24}, rng, 0, 1);
    const auto before = m.snapshot();
    const auto a = cxr::grad_cam(m, x), b = cxr::grad_cam(m, x);
    EXPECT_EQ(a.values, b.values);
    EXPECT_EQ(m.snapshot(), before);
    EXPECT_EQ(cxr::map_text(a.values), cxr::map_text(b.values));
}

TEST(GradCam, DefaultModelHeatmapImage) {
    cxr::Rng rng(11);
    cxr::Model<float> m(cxr::ModelConfig{}, rng);
    const auto hm = cxr::grad_cam(m, oracle::random_tensor<float>({1, 1, 150, 150}, rng, 0, 1));
    const auto img = cxr::map_to_image(hm.values);
    EXPECT_EQ(img.width, 150);
    EXPECT_EQ(img.height, 150);
    EXPECT_EQ(hm.source_layer, 4u);
}

TEST(MinMax, Rules) {
    Tensor<float> ramp({1, 3}, std::vector<float>{2, 4, 6});
    EXPECT_EQ(cxr::minmax_normalize(ramp, true), Tensor<float>({1, 3}, std::vector<float>{0, 0.5f, 1}));
    bool constant = false;
    EXPECT_EQ(cxr::minmax_normalize(Tensor<float>({2, 2}, 3.0f), false, &constant), Tensor<float>({2, 2}, 0.0f));
    EXPECT_TRUE(constant);
    EXPECT_EQ(cxr::minmax_normalize(Tensor<float>({2, 2}, 3.0f), true), Tensor<float>({2, 2}, 1.0f));
    EXPECT_EQ(cxr::minmax_normalize(Tensor<float>({2, 2}, 0.0f), true), Tensor<float>({2, 2}, 0.0f));
}
