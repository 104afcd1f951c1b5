#include <gtest/gtest.h>

#include <map>
#include <sstream>

#include "hdl/dqn.hpp"
#include "oracles.hpp"

using namespace hdl;

namespace {

// Full 16-state environment at a small observation size.
const CollectionEnv& small_env() {
    static const CollectionEnv env =
        make_env(preprocess_dataset(build_dataset(enumerate_states(), Provenance::Virtual, 1, 1)), 15, 20);
    return env;
}

// Environment with hand-made two-condition matrices and blank observations.
CollectionEnv synthetic_env(const std::vector<double>& off_diagonal) {
    CollectionEnv env;
    for (double s : off_diagonal) {
        env.matrices.push_back({2, {1.0, s, s, 1.0}});
        env.observations.push_back(Tensor::zeros({3, 8, 8}));
    }
    env.empty = Tensor::zeros({3, 8, 8});
    return env;
}

Action action_of(const char* id) { return Action::of(CollectionState::parse(id)); }

}  // namespace

TEST(StepTest, FirstActionStartsTrace) {
    const auto& env = small_env();
    const auto r = step(env, {}, action_of("far-0-snd"));
    EXPECT_FALSE(r.terminal);
    ASSERT_EQ(r.trace.visited.size(), 1u);
    EXPECT_EQ(r.trace.visited[0].id(), "far-0-snd");
    EXPECT_DOUBLE_EQ(r.reward_delta, r.trace.total());
}

TEST(StepTest, RevisitTerminatesWithoutReward) {
    const auto& env = small_env();
    auto r = step(env, {}, action_of("near-90-img"));
    r = step(env, r.trace, action_of("far-180-snd"));
    const auto before = r.trace;
    const auto end = step(env, before, action_of("near-90-img"));
    EXPECT_TRUE(end.terminal);
    EXPECT_TRUE(end.trace.terminal);
    EXPECT_EQ(end.reward_delta, 0.0);
    EXPECT_EQ(end.trace.visited, before.visited);
    EXPECT_THROW(step(env, end.trace, action_of("far-0-snd")), std::logic_error);
}

TEST(StepTest, DeltasTelescope) {
    const auto& env = small_env();
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 30; ++trial) {
        EpisodeTrace trace;
        double sum = 0;
        while (!trace.terminal) {
            const auto r = step(env, trace, Action::of(CollectionState::from_index(rng() % kStateCount)));
            sum += r.reward_delta;
            trace = r.trace;
        }
        const auto expected = hdl::testing::brute_force_reward([&] {
            std::vector<SimilarityMatrix> m;
            for (const auto& s : trace.visited) m.push_back(env.matrices[s.index()]);
            return m;
        }());
        EXPECT_NEAR(sum, expected.total, 1e-12);
        for (std::size_t i = 0; i + 1 < trace.steps.size(); ++i) {
            // After the first state every append costs more than it gains.
            EXPECT_LT(trace.steps[i + 1].total, trace.steps[i].total);
        }
    }
}

TEST(EpsilonTest, LinearDecayThenFloor) {
    const DqnConfig cfg;
    EXPECT_DOUBLE_EQ(epsilon_at(cfg, 0), 1.0);
    EXPECT_DOUBLE_EQ(epsilon_at(cfg, 30), 0.525);
    EXPECT_DOUBLE_EQ(epsilon_at(cfg, 60), 0.05);
    EXPECT_DOUBLE_EQ(epsilon_at(cfg, 99), 0.05);
}

TEST(SelectActionTest, GreedyIsDeterministicArgmax) {
    auto net = make_q_network(15, 20, true, 4);
    std::mt19937_64 rng(1);
    const auto& obs = small_env().observations[5];
    const auto a = select_action(net, obs, 0.0, rng), b = select_action(net, obs, 0.0, rng);
    EXPECT_EQ(a.state(), b.state());
    net.set_training(false);
    const auto q = net.forward(obs.reshape({1, 3, 15, 20}));
    const auto d = q.data();
    EXPECT_EQ(a.location, static_cast<std::size_t>(std::max_element(d.begin(), d.begin() + 8) - d.begin()));
    EXPECT_EQ(static_cast<std::size_t>(a.modality), d[9] > d[8] ? 1u : 0u);
}

TEST(SelectActionTest, FullExplorationIsUniform) {
    auto net = make_q_network(15, 20, true, 4);
    std::mt19937_64 rng(2);
    std::map<std::size_t, int> counts;
    const int draws = 16000;
    for (int i = 0; i < draws; ++i) ++counts[select_action(net, small_env().empty_observation(), 1.0, rng).state().index()];
    ASSERT_EQ(counts.size(), 16u);
    for (const auto& [state, n] : counts) EXPECT_NEAR(n, draws / 16, 150) << "state " << state;
    EXPECT_THROW(select_action(net, small_env().empty_observation(), 1.5, rng), std::invalid_argument);
    EXPECT_THROW(select_action(net, small_env().empty_observation(), -0.1, rng), std::invalid_argument);
}

TEST(ReplayBufferTest, BoundedFifo) {
    ReplayBuffer buf(3);
    for (int i = 0; i < 5; ++i) buf.push({Tensor::zeros({1}), {}, static_cast<float>(i), Tensor::zeros({1}), false});
    EXPECT_EQ(buf.size(), 3u);
    std::mt19937_64 rng(1);
    std::vector<float> rewards;
    for (const auto* t : buf.sample(3, rng)) rewards.push_back(t->reward);
    std::sort(rewards.begin(), rewards.end());
    EXPECT_EQ(rewards, (std::vector<float>{2, 3, 4}));
    EXPECT_THROW(buf.sample(4, rng), std::invalid_argument);
    EXPECT_THROW(ReplayBuffer(0), std::invalid_argument);
}

TEST(SweepTest, BestSingleStateFromMinimalSimilarity) {
    std::vector<double> s(kStateCount, 0.9);
    s[5] = 0.4;
    s[11] = 0.55;
    const auto env = synthetic_env(s);
    const auto sweep = exhaustive_sweep(env);
    EXPECT_EQ(sweep.front().mean_similarity, 0.4);
    EXPECT_NEAR(sweep.front().total_reward, -2 * 0.4 - 1.0 / 3.0, 1e-15);
    double best = -1e300;
    for (const auto& e : sweep) best = std::max(best, e.total_reward);
    EXPECT_EQ(best, sweep.front().total_reward);
}

TEST(SweepTest, GeneratedEnvironment) {
    const auto& env = small_env();
    const auto sweep = exhaustive_sweep(env);
    ASSERT_EQ(sweep.size(), 16u);
    EXPECT_EQ(sweep.front().state.id(), "far-0-snd");
    for (const auto& e : sweep) EXPECT_LE(e.total_reward, -2 * sweep.front().mean_similarity - 1.0 / 3.0 + 1e-12);
    EXPECT_NEAR(exhaustive_best_small_plan(env), sweep.front().total_reward, 1e-12);
}

TEST(TrainDqnTest, EpisodeStructureAndDeterminism) {
    const auto& env = small_env();
    const auto a = train_dqn(env, 7), b = train_dqn(env, 7);
    ASSERT_EQ(a.reward_history.size(), 100u);
    EXPECT_EQ(a.reward_history, b.reward_history);
    EXPECT_EQ(a.plan.states, b.plan.states);
    for (std::size_t e = 0; e < a.episodes.size(); ++e) {
        const auto& ep = a.episodes[e];
        EXPECT_GE(ep.visited.size(), 1u);
        EXPECT_LE(ep.visited.size(), 16u);
        EXPECT_TRUE(ep.terminal);
        for (std::size_t i = 0; i < ep.visited.size(); ++i)
            for (std::size_t j = i + 1; j < ep.visited.size(); ++j) EXPECT_NE(ep.visited[i], ep.visited[j]);
        EXPECT_DOUBLE_EQ(a.reward_history[e], ep.total());
    }
    EXPECT_EQ(a.plan.states, a.episodes.back().visited);
    EXPECT_EQ(a.plan.seed, 7u);
    EXPECT_DOUBLE_EQ(a.plan.reward, env.score(a.plan.states).total);
}

TEST(TrainDqnTest, GreedyPolicyIsDeterministic) {
    const auto& env = small_env();
    auto r = train_dqn(env, 3);
    std::mt19937_64 r1(1), r2(99);
    const auto a = select_action(r.qnet, env.empty_observation(), 0.0, r1);
    const auto b = select_action(r.qnet, env.empty_observation(), 0.0, r2);
    EXPECT_EQ(a.state(), b.state());
}

TEST(TrainDqnTest, SingleModalityRestrictsActions) {
    DqnConfig cfg;
    cfg.episodes = 20;
    cfg.epsilon_decay_episodes = 10;
    cfg.single_modality = Modality::Sound;
    const auto r = train_dqn(small_env(), 2, cfg);
    EXPECT_EQ(r.reward_history.size(), 20u);
    for (const auto& ep : r.episodes)
        for (const auto& s : ep.visited) EXPECT_EQ(s.modality, Modality::Sound);
}

TEST(PlanManifestTest, JsonRoundTrip) {
    const CollectionPlan plan{{CollectionState::parse("far-0-snd"), CollectionState::parse("near-90-img")}, 4, -2.5};
    const auto j = plan_to_json(plan);
    EXPECT_EQ(j.at("plan").at(0), (nlohmann::json{{"distance", "far"}, {"angle", 0}, {"modality", "sound"}}));
    const auto back = plan_from_json(nlohmann::json::parse(j.dump()));
    EXPECT_EQ(back.states, plan.states);
    EXPECT_EQ(back.seed, 4u);
    EXPECT_EQ(back.reward, -2.5);
}

TEST(PlanManifestTest, RejectsInvalidPlans) {
    using nlohmann::json;
    EXPECT_THROW(plan_from_json(json{{"plan", json::array()}}), std::invalid_argument);
    EXPECT_THROW(plan_from_json(json{{"steps", 1}}), std::invalid_argument);
    const json far0{{"distance", "far"}, {"angle", 0}, {"modality", "sound"}};
    EXPECT_THROW(plan_from_json(json{{"plan", {far0, far0}}}), std::invalid_argument);
    EXPECT_THROW(plan_from_json(json{{"plan", {{{"distance", "far"}, {"angle", 45}, {"modality", "sound"}}}}}),
                 std::invalid_argument);
    EXPECT_THROW(plan_from_json(json{{"plan", {{{"distance", "mid"}, {"angle", 0}, {"modality", "sound"}}}}}),
                 std::invalid_argument);
}

TEST(PlanManifestTest, RewardCsv) {
    std::ostringstream os;
    const std::vector<double> h{-2.5, -2.125};
    write_reward_csv(os, h);
    EXPECT_EQ(os.str(), "episode,total_reward\n0,-2.5\n1,-2.125\n");
}
