#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"

using namespace hdl;
using hdl::testing::brute_force_reward;

namespace {

Tensor random_image(Shape shape, std::mt19937_64& rng) {
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    std::vector<float> v(numel_of(shape));
    for (auto& x : v) x = d(rng);
    return Tensor(std::move(shape), std::move(v));
}

SimilarityMatrix uniform_matrix(std::size_t m, double s) {
    SimilarityMatrix mat{m, std::vector<double>(m * m, s)};
    for (std::size_t i = 0; i < m; ++i) mat.values[i * m + i] = 1.0;
    return mat;
}

SimilarityMatrix random_matrix(std::size_t m, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> d(0.0, 1.0);
    SimilarityMatrix mat = uniform_matrix(m, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = i + 1; j < m; ++j) mat.values[i * m + j] = mat.values[j * m + i] = d(rng);
    return mat;
}

}  // namespace

TEST(SsimTest, SelfSimilarityIsExactlyOne) {
    std::mt19937_64 rng(1);
    const auto x = random_image({3, 20, 30}, rng);
    EXPECT_EQ(ssim(x, x), 1.0);
}

TEST(SsimTest, Symmetric) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 5; ++trial) {
        const auto a = random_image({3, 120, 160}, rng), b = random_image({3, 120, 160}, rng);
        EXPECT_EQ(ssim(a, b), ssim(b, a));
    }
}

TEST(SsimTest, SingleWindowMatchesFormula) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const auto a = random_image({1, 8, 8}, rng), b = random_image({1, 8, 8}, rng);
        const double got = ssim(a, b, {8, 1.0});
        EXPECT_NEAR(got, hdl::testing::single_window_ssim(a.data(), b.data()), 1e-12);
    }
}

TEST(SsimTest, AveragesChannels) {
    std::mt19937_64 rng(4);
    const auto a = random_image({2, 8, 8}, rng), b = random_image({2, 8, 8}, rng);
    const auto ch = [](const Tensor& t, std::size_t c) { return t.data().subspan(c * 64, 64); };
    const double expected = 0.5 * (hdl::testing::single_window_ssim(ch(a, 0), ch(b, 0)) +
                                   hdl::testing::single_window_ssim(ch(a, 1), ch(b, 1)));
    EXPECT_NEAR(ssim(a, b, {8, 1.0}), expected, 1e-12);
}

TEST(SsimTest, ShapeErrors) {
    EXPECT_THROW(ssim(Tensor::zeros({3, 10, 10}), Tensor::zeros({3, 10, 11})), ShapeError);
    EXPECT_THROW(ssim(Tensor::zeros({3, 5, 5}), Tensor::zeros({3, 5, 5})), ShapeError);
}

TEST(CrossConditionTest, DuplicatePayloadsGiveAllOnes) {
    std::mt19937_64 rng(5);
    const auto x = random_image({3, 12, 12}, rng);
    PreprocessedDataset ds;
    ds.states = {CollectionState::parse("far-0-snd")};
    ds.shots = 1;
    ds.tensors.assign(kConditionCount, x);
    const auto mats = cross_condition_matrices(ds);
    ASSERT_EQ(mats.size(), 1u);
    for (double v : mats[0].values) EXPECT_EQ(v, 1.0);
    EXPECT_NEAR(reward(mats).total, -7.0 / 3.0, 1e-15);

    ds.tensors.pop_back();
    EXPECT_THROW(cross_condition_matrices(ds), std::invalid_argument);
}

TEST(RewardTest, TwoConditionExample) {
    for (double s : {0.0, 0.3, 0.77, 1.0}) {
        const SimilarityMatrix mats[] = {uniform_matrix(2, s)};
        const auto r = reward(mats);
        EXPECT_DOUBLE_EQ(r.r1, -s);
        EXPECT_DOUBLE_EQ(r.r2, -s);
        EXPECT_DOUBLE_EQ(r.n_penalty, 1.0 / 3.0);
        EXPECT_NEAR(r.total, -2 * s - 1.0 / 3.0, 1e-15);
    }
}

TEST(RewardTest, RequiresTwoConditions) {
    const SimilarityMatrix mats[] = {uniform_matrix(1, 1.0)};
    EXPECT_THROW(reward(mats), std::invalid_argument);
    EXPECT_EQ(reward(std::span<const SimilarityMatrix>{}).total, 0.0);
}

TEST(RewardTest, MatchesBruteForceBitForBit) {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<SimilarityMatrix> mats;
        const std::size_t n = 1 + rng() % 16, m = 2 + rng() % 5;
        for (std::size_t z = 0; z < n; ++z) mats.push_back(random_matrix(m, rng));
        const auto got = reward(mats), want = brute_force_reward(mats);
        ASSERT_EQ(got.r1, want.r1);
        ASSERT_EQ(got.r2, want.r2);
        ASSERT_EQ(got.total, want.total);
        EXPECT_LE(got.r1, 0.0);
        EXPECT_GE(got.r1, -1.0 - 1e-9);
        EXPECT_LE(got.r2, 0.0);
        EXPECT_GE(got.r2, -1.0 - 1e-9);
        EXPECT_EQ(got.total, got.r1 + got.r2 - got.n_penalty);
    }
}

// r2 is the negated maximum per-condition mean, so it can never exceed the
// negated mean of any single condition.
TEST(RewardTest, MaxConditionTerm) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<SimilarityMatrix> mats{random_matrix(6, rng), random_matrix(6, rng)};
        const auto r = reward(mats);
        for (std::size_t i = 0; i < 6; ++i) {
            double s = 0;
            for (const auto& mat : mats)
                for (std::size_t j = 0; j < 6; ++j)
                    if (j != i) s += mat(i, j);
            EXPECT_LE(r.r2, -s / 10.0 + 1e-12);
        }
    }
}

// A state set made of copies of one matrix: one more copy leaves both
// similarity terms unchanged and costs exactly the per-state penalty.
TEST(RewardTest, DuplicateStateCostsExactlyOneThird) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<SimilarityMatrix> mats(1 + rng() % 5, random_matrix(6, rng));
        const auto before = reward(mats);
        mats.push_back(mats.front());
        const auto after = reward(mats);
        EXPECT_NEAR(after.r1, before.r1, 1e-12);
        EXPECT_NEAR(after.r2, before.r2, 1e-12);
        EXPECT_DOUBLE_EQ(after.n_penalty - before.n_penalty, 1.0 / 3.0);
        EXPECT_NEAR(after.total - before.total, -1.0 / 3.0, 1e-12);
    }
}

TEST(RewardTest, AppendChangeIsBounded) {
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<SimilarityMatrix> mats;
        for (std::size_t z = 0, n = 1 + rng() % 8; z < n; ++z) mats.push_back(random_matrix(6, rng));
        const auto before = reward(mats);
        mats.push_back(random_matrix(6, rng));
        const auto after = reward(mats);
        const double d1 = after.r1 - before.r1, d2 = after.r2 - before.r2;
        EXPECT_LE(std::abs(d1), 1.0);
        EXPECT_LE(std::abs(d2), 1.0);
        EXPECT_EQ(after.n_penalty, static_cast<double>(mats.size()) / 3.0);
        EXPECT_NEAR(after.total - before.total, d1 + d2 - 1.0 / 3.0, 1e-12);
    }
}

TEST(RewardTest, GeneratedEnvironmentSoundBelowImage) {
    const auto ds = preprocess_dataset(build_dataset(enumerate_states(), Provenance::Virtual, 1, 1));
    const auto mats = cross_condition_matrices(ds);
    double sound = 0, image = 0;
    for (std::size_t z = 0; z < mats.size(); ++z) {
        (ds.states[z].modality == Modality::Sound ? sound : image) += mats[z].mean_off_diagonal() / 8.0;
        for (std::size_t i = 0; i < 6; ++i) {
            EXPECT_EQ(mats[z](i, i), 1.0);
            for (std::size_t j = 0; j < 6; ++j) {
                EXPECT_EQ(mats[z](i, j), mats[z](j, i));
                EXPECT_GE(mats[z](i, j), -1.0);
                EXPECT_LE(mats[z](i, j), 1.0);
            }
        }
    }
    EXPECT_LT(sound, image);

    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        const auto subset = hdl::testing::random_state_subset(mats, rng);
        EXPECT_EQ(reward(subset).total, brute_force_reward(subset).total);
    }
}
