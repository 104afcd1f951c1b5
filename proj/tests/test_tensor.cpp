#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "hdl/network.hpp"
#include "hdl/ops.hpp"

using namespace hdl;
using hdl::testing::gradient_error;
using hdl::testing::random_tensor;

namespace {

Tensor grad_tensor(Shape shape, std::vector<float> v) { return Tensor(std::move(shape), std::move(v), true); }

}  // namespace

TEST(TensorTest, ShapeMustMatchData) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<float>(5)), ShapeError);
    EXPECT_THROW(Tensor({2, 0}, {}), ShapeError);
    Tensor t({2, 3}, std::vector<float>(6, 1.0f));
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_FALSE(t.has_grad());
    EXPECT_THROW(t.reshape({4, 2}), ShapeError);
}

TEST(TensorTest, ReluExample) {
    const auto y = relu(Tensor({3}, {-1.0f, 0.0f, 2.0f}));
    EXPECT_EQ(std::vector<float>(y.data().begin(), y.data().end()), (std::vector<float>{0, 0, 2}));
}

TEST(TensorTest, MaxPoolExample) {
    const auto y = maxpool2x2(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}));
    EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_EQ(y.item(), 4.0f);
}

TEST(TensorTest, ConvAllOnesExample) {
    const auto y = conv2d(Tensor::full({1, 1, 3, 3}, 1.0f), Tensor::full({1, 1, 3, 3}, 1.0f), Tensor::zeros({1}), 1, 0);
    EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_EQ(y.item(), 9.0f);
}

TEST(TensorTest, ConvOutputShape) {
    const auto y = conv2d(Tensor::zeros({2, 3, 120, 160}), Tensor::zeros({8, 3, 3, 3}), Tensor::zeros({8}), 2, 1);
    EXPECT_EQ(y.shape(), (Shape{2, 8, 60, 80}));
}

TEST(TensorTest, LinearGradientIsInput) {
    const Tensor x({4}, {1.5f, -2.0f, 0.25f, 3.0f});
    auto w = grad_tensor({4}, {0.1f, 0.2f, 0.3f, 0.4f});
    sum(mul(w, x)).backward();
    for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(w.grad()[i], x.at(i));
}

TEST(TensorTest, UnusedParameterHasZeroGradient) {
    auto used = grad_tensor({2}, {1.0f, 2.0f});
    auto unused = grad_tensor({2}, {3.0f, 4.0f});
    unused.zero_grad();
    sum(scale(used, 2.0f)).backward();
    for (float g : unused.grad()) EXPECT_EQ(g, 0.0f);
    for (float g : used.grad()) EXPECT_EQ(g, 2.0f);
}

TEST(TensorTest, BackwardRejectsNonScalarAndConstants) {
    auto w = grad_tensor({2}, {1.0f, 2.0f});
    EXPECT_THROW(relu(w).backward(), GraphError);
    EXPECT_THROW(sum(Tensor({2}, {1.0f, 2.0f})).backward(), GraphError);
}

TEST(TensorTest, GradientsAccumulateAcrossUses) {
    auto w = grad_tensor({1}, {3.0f});
    sum(add(w, w)).backward();
    EXPECT_FLOAT_EQ(w.grad()[0], 2.0f);
}

TEST(NllLossTest, Examples) {
    const std::size_t t0[] = {0};
    EXPECT_EQ(nll_loss(Tensor({1, 2}, {0.0f, -1e30f}), t0).item(), 0.0f);

    const float u = -std::log(6.0f);
    for (std::size_t target = 0; target < 6; ++target) {
        const std::size_t t[] = {target};
        EXPECT_NEAR(nll_loss(Tensor::full({1, 6}, u), t).item(), 1.7918, 1e-4);
    }

    const std::size_t t2[] = {0, 1};
    EXPECT_FLOAT_EQ(nll_loss(Tensor({2, 2}, {-1.0f, -5.0f, -7.0f, -3.0f}), t2).item(), 2.0f);
}

TEST(NllLossTest, RejectsOutOfRangeTarget) {
    const std::size_t t[] = {6};
    EXPECT_THROW(nll_loss(Tensor::full({1, 6}, -1.0f), t), std::out_of_range);
    const std::size_t two[] = {0, 0};
    EXPECT_THROW(nll_loss(Tensor::full({1, 6}, -1.0f), two), ShapeError);
}

TEST(TensorTest, SoftmaxRowsNormalize) {
    std::mt19937_64 rng(3);
    const auto x = random_tensor<float>({5, 7}, rng, -10.0, 10.0, false);
    const auto p = softmax(x), lp = log_softmax(x);
    for (std::size_t r = 0; r < 5; ++r) {
        double s = 0, e = 0;
        for (std::size_t c = 0; c < 7; ++c) {
            s += p.at(r * 7 + c);
            e += std::exp(static_cast<double>(lp.at(r * 7 + c)));
        }
        EXPECT_NEAR(s, 1.0, 1e-5);
        EXPECT_NEAR(e, 1.0, 1e-5);
    }
}

TEST(BatchNormTest, TrainingModeStandardizesPerChannel) {
    std::mt19937_64 rng(11);
    const std::size_t n = 4, c = 3, hw = 25;
    auto x = random_tensor<float>({n, c, 5, 5}, rng, -3.0, 7.0, false);
    std::vector<float> mean(c, 0.0f), var(c, 1.0f);
    const auto y = batchnorm2d(x, Tensor::full({c}, 1.0f), Tensor::zeros({c}), std::span<float>(mean),
                               std::span<float>(var), true, 0.1, 1e-5);
    for (std::size_t ch = 0; ch < c; ++ch) {
        double s = 0, ss = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < hw; ++k) s += y.at((i * c + ch) * hw + k);
        const double mu = s / static_cast<double>(n * hw);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < hw; ++k) ss += std::pow(y.at((i * c + ch) * hw + k) - mu, 2);
        EXPECT_NEAR(mu, 0.0, 1e-3);
        EXPECT_NEAR(ss / static_cast<double>(n * hw), 1.0, 1e-3);
    }
    // Running statistics moved a tenth of the way toward the batch statistics.
    for (std::size_t ch = 0; ch < c; ++ch) EXPECT_GT(mean[ch], 0.0f);
}

TEST(BatchNormTest, InferenceUsesRunningStatistics) {
    std::vector<float> mean{1.0f}, var{4.0f};
    const Tensor x({1, 1, 1, 2}, {3.0f, -1.0f});
    const auto y = batchnorm2d(x, Tensor::full({1}, 2.0f), Tensor::full({1}, 0.5f), std::span<float>(mean),
                               std::span<float>(var), false, 0.1, 0.0);
    EXPECT_FLOAT_EQ(y.at(0), 2.0f * (3.0f - 1.0f) / 2.0f + 0.5f);
    EXPECT_FLOAT_EQ(y.at(1), 2.0f * (-1.0f - 1.0f) / 2.0f + 0.5f);
    EXPECT_EQ(mean[0], 1.0f);
    EXPECT_EQ(var[0], 4.0f);
}

namespace {

Network<float> small_network(std::uint64_t seed) {
    return Network<float>({LayerSpec::conv(3, 4, 3, 1, 1), LayerSpec::batchnorm(4), LayerSpec::of(LayerKind::relu),
                           LayerSpec::of(LayerKind::maxpool2x2), LayerSpec::of(LayerKind::flatten),
                           LayerSpec::dense(4 * 4 * 5, 6), LayerSpec::of(LayerKind::logsoftmax)},
                          seed);
}

}  // namespace

TEST(NetworkTest, ForwardIsDeterministic) {
    std::mt19937_64 rng(5);
    const auto x = random_tensor<float>({2, 3, 8, 10}, rng, 0.0, 1.0, false);
    auto a = small_network(9), b = small_network(9);
    a.set_training(false);
    b.set_training(false);
    const auto ya = a.forward(x), yb = b.forward(x);
    EXPECT_EQ(std::vector<float>(ya.data().begin(), ya.data().end()), std::vector<float>(yb.data().begin(), yb.data().end()));
    EXPECT_EQ(a.output_shape({2, 3, 8, 10}), (Shape{2, 6}));
}

TEST(NetworkTest, InitializationStaysWithinFanInBound) {
    const auto net = small_network(1);
    const auto& conv = net.layers()[0];
    const float bound = std::sqrt(1.0f / 27.0f);
    for (float w : conv.weight.data()) EXPECT_LE(std::abs(w), bound);
}

TEST(NetworkTest, ShapeErrorNamesLayerAndShapes) {
    auto net = small_network(1);
    try {
        net.forward(Tensor::zeros({1, 2, 8, 10}));
        FAIL() << "expected a shape error";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("layer 0"), std::string::npos) << msg;
        EXPECT_NE(msg.find("conv2d"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[1, 2, 8, 10]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[N, 3, H, W]"), std::string::npos) << msg;
    }
}

TEST(NetworkTest, ParametersReceiveGradients) {
    std::mt19937_64 rng(2);
    auto net = small_network(4);
    const auto x = random_tensor<float>({3, 3, 8, 10}, rng, 0.0, 1.0, false);
    const std::size_t targets[] = {0, 3, 5};
    net.zero_grad();
    nll_loss(net.forward(x), targets).backward();
    for (const auto& p : net.parameters()) {
        ASSERT_TRUE(p.has_grad());
        EXPECT_TRUE(p.all_finite());
    }
}

TEST(NetworkTest, CloneDoesNotShareParameters) {
    auto net = small_network(4);
    auto copy = net.clone();
    net.parameters()[0].mutable_data()[0] += 1.0f;
    EXPECT_NE(net.parameters()[0].at(0), copy.parameters()[0].at(0));
    copy.copy_from(net);
    EXPECT_EQ(net.parameters()[0].at(0), copy.parameters()[0].at(0));
}

class LayerGradientTest : public ::testing::TestWithParam<LayerKind> {};

TEST_P(LayerGradientTest, FloatMatchesFiniteDifferences) {
    for (std::size_t i = 0; i < 20; ++i) {
        std::mt19937_64 rng(100 + i);
        EXPECT_LT(hdl::testing::layer_gradient_error<float>(GetParam(), rng), 1e-2) << "instance " << i;
    }
}

TEST_P(LayerGradientTest, DoubleMatchesFiniteDifferences) {
    for (std::size_t i = 0; i < 20; ++i) {
        std::mt19937_64 rng(200 + i);
        EXPECT_LT(hdl::testing::layer_gradient_error<double>(GetParam(), rng), 1e-4) << "instance " << i;
    }
}

INSTANTIATE_TEST_SUITE_P(AllKinds, LayerGradientTest, ::testing::ValuesIn(hdl::testing::all_layer_kinds()),
                         [](const auto& info) { return std::string(layer_kind_name(info.param)); });

TEST(OpGradientTest, AuxiliaryOpsMatchFiniteDifferences) {
    using D = double;
    std::mt19937_64 rng(77);
    const std::size_t targets[] = {2, 0, 1};
    const std::size_t cols[] = {1, 3, 0};
    const std::vector<D> goal{0.5, -1.0, 2.0};

    EXPECT_LT(gradient_error<D>([&](const auto& v) { return nll_loss(log_softmax(v[0]), targets); },
                                {random_tensor<D>({3, 4}, rng)}, rng),
              1e-4);
    EXPECT_LT(gradient_error<D>([](const auto& v) { return squared_distances(v[0], v[1]); },
                                {random_tensor<D>({3, 5}, rng), random_tensor<D>({4, 5}, rng)}, rng),
              1e-4);
    EXPECT_LT(gradient_error<D>([](const auto& v) { return matmul(v[0], v[1]); },
                                {random_tensor<D>({3, 5}, rng), random_tensor<D>({5, 2}, rng)}, rng),
              1e-4);
    EXPECT_LT(gradient_error<D>([](const auto& v) { return slice_cols(v[0], 1, 2); }, {random_tensor<D>({3, 4}, rng)}, rng),
              1e-4);
    EXPECT_LT(gradient_error<D>([](const auto& v) { return slice_rows(v[0], 1, 2); }, {random_tensor<D>({4, 3}, rng)}, rng),
              1e-4);
    EXPECT_LT(gradient_error<D>([&](const auto& v) { return gathered_mse(v[0], cols, std::span<const D>(goal)); },
                                {random_tensor<D>({3, 4}, rng)}, rng),
              1e-4);
    EXPECT_LT(gradient_error<D>([](const auto& v) { return add(scale(v[0], 3.0), v[1]); },
                                {random_tensor<D>({2, 3}, rng), random_tensor<D>({2, 3}, rng)}, rng),
              1e-4);
    EXPECT_LT(gradient_error<D>([](const auto& v) { return v[0].reshape({6}); }, {random_tensor<D>({2, 3}, rng)}, rng),
              1e-4);
}
