#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"

using namespace hdl;

namespace {

void expect_valid_path(const GridMap& map, const std::vector<Cell>& path, const Cell& start, const Cell& goal) {
    ASSERT_FALSE(path.empty());
    EXPECT_EQ(path.front(), start);
    EXPECT_EQ(path.back(), goal);
    for (std::size_t i = 0; i < path.size(); ++i) {
        EXPECT_TRUE(map.walkable(path[i]));
        if (i > 0) { EXPECT_EQ(manhattan(path[i - 1], path[i]), 1); }
    }
}

CollectionPlan plan_of(std::initializer_list<const char*> ids) {
    CollectionPlan p;
    for (auto id : ids) p.states.push_back(CollectionState::parse(id));
    return p;
}

}  // namespace

TEST(AstarTest, StartEqualsGoal) {
    const auto map = GridMap::empty(3, 3);
    EXPECT_EQ(astar(map, {1, 1}, {1, 1}), (std::vector<Cell>{{1, 1}}));
}

TEST(AstarTest, EmptyGridManhattanLength) {
    const auto map = GridMap::empty(5, 5);
    const auto path = astar(map, {0, 0}, {4, 4});
    EXPECT_EQ(path.size(), 9u);
    expect_valid_path(map, path, {0, 0}, {4, 4});
}

TEST(AstarTest, DetoursAroundWall) {
    auto map = GridMap::empty(5, 5);
    for (int r = 0; r < 4; ++r) map.blocked[map.index({r, 2})] = 1;
    const auto path = astar(map, {0, 0}, {0, 4});
    expect_valid_path(map, path, {0, 0}, {0, 4});
    EXPECT_EQ(path.size(), 13u);
}

TEST(AstarTest, ErrorsAndNoPath) {
    auto map = GridMap::empty(4, 4);
    map.blocked[map.index({0, 1})] = 1;
    map.blocked[map.index({1, 0})] = 1;
    EXPECT_THROW(astar(map, {3, 3}, {0, 0}), NoPath);
    EXPECT_THROW(astar(map, {0, 1}, {3, 3}), std::invalid_argument);
    EXPECT_THROW(astar(map, {3, 3}, {4, 0}), std::invalid_argument);
}

TEST(AstarTest, DeterministicTieBreak) {
    const auto map = GridMap::empty(6, 6);
    const auto a = astar(map, {0, 0}, {5, 5}), b = astar(map, {0, 0}, {5, 5});
    EXPECT_EQ(a, b);
}

TEST(AstarTest, MatchesUniformCostOracle) {
    std::mt19937_64 rng(2024);
    int solvable = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const auto g = hdl::testing::random_grid_instance(rng);
        const auto oracle = hdl::testing::uniform_cost_search(g.map, g.start, g.goal);
        if (!oracle.cost) {
            EXPECT_THROW(astar(g.map, g.start, g.goal), NoPath) << "trial " << trial;
            continue;
        }
        ++solvable;
        const auto r = astar_search(g.map, g.start, g.goal);
        expect_valid_path(g.map, r.path, g.start, g.goal);
        EXPECT_EQ(static_cast<int>(r.path.size()) - 1, *oracle.cost) << "trial " << trial;
        EXPECT_LE(r.expanded, oracle.expanded) << "trial " << trial;
    }
    EXPECT_GT(solvable, 25);
}

TEST(AstarTest, DenseGridsAgreeOnNoPath) {
    std::mt19937_64 rng(7);
    int unsolvable = 0;
    for (int trial = 0; trial < 60; ++trial) {
        const auto g = hdl::testing::random_grid_instance(rng, 20, 0.45);
        const auto oracle = hdl::testing::uniform_cost_search(g.map, g.start, g.goal);
        if (oracle.cost) {
            EXPECT_EQ(static_cast<int>(astar(g.map, g.start, g.goal).size()) - 1, *oracle.cost);
        } else {
            ++unsolvable;
            EXPECT_THROW(astar(g.map, g.start, g.goal), NoPath);
        }
    }
    EXPECT_GT(unsolvable, 10);
}

TEST(MapTest, DefaultMapReachesEveryAnchor) {
    const auto map = default_map();
    EXPECT_EQ(map.anchors.size(), 8u);
    for (const auto& st : enumerate_states()) EXPECT_TRUE(map.anchors.contains(st.location_id()));
    for (const auto& [id, a] : map.anchors) {
        for (const auto& [other, b] : map.anchors) expect_valid_path(map, astar(map, a.cell, b.cell), a.cell, b.cell);
        expect_valid_path(map, astar(map, map.start, a.cell), map.start, a.cell);
    }
}

TEST(MapTest, JsonRoundTripAndValidation) {
    const auto map = default_map();
    const auto back = map_from_json(nlohmann::json::parse(map_to_json(map).dump()));
    EXPECT_EQ(back.blocked, map.blocked);
    EXPECT_EQ(back.start, map.start);
    EXPECT_EQ(map_to_json(back), map_to_json(map));

    auto j = map_to_json(map);
    j["start"] = {5, 8};
    EXPECT_THROW(map_from_json(j), std::invalid_argument);
    j = map_to_json(map);
    j["anchors"]["far-0"]["cell"] = j["anchors"]["near-0"]["cell"];
    EXPECT_THROW(map_from_json(j), std::invalid_argument);
    j = map_to_json(map);
    j["anchors"]["far-0"]["facing"] = "NE";
    EXPECT_THROW(map_from_json(j), std::invalid_argument);
    j = map_to_json(map);
    j["blocked"].push_back({14, 0});
    EXPECT_THROW(map_from_json(j), std::invalid_argument);
}

TEST(ScriptTest, SingleSoundEntry) {
    const auto map = default_map();
    const auto s = build_script(plan_of({"far-0-snd"}), map);
    ASSERT_EQ(s.phases.size(), 4u);
    EXPECT_EQ(s.phases[0].kind, PhaseKind::Initialize);
    EXPECT_EQ(s.phases[1].kind, PhaseKind::Navigate);
    EXPECT_EQ(s.phases[1].icon, "microphone");
    EXPECT_EQ(s.phases[1].waypoints, astar(map, map.start, map.anchors.at("far-0").cell));
    EXPECT_EQ(s.phases[2].kind, PhaseKind::Capture);
    EXPECT_EQ(s.phases[2].modality, Modality::Sound);
    EXPECT_EQ(s.phases[2].duration_s, 5);
    EXPECT_EQ(s.phases[3].kind, PhaseKind::Diagnose);
}

TEST(ScriptTest, SecondNavigationStartsAtFirstAnchor) {
    const auto map = default_map();
    const auto s = build_script(plan_of({"near-90-img", "far-180-snd"}), map);
    ASSERT_EQ(s.phases.size(), 6u);
    EXPECT_EQ(s.phases[1].icon, "camera");
    EXPECT_EQ(s.phases[2].duration_s, 0);
    EXPECT_EQ(s.phases[3].plan_index, 1u);
    EXPECT_EQ(s.phases[3].waypoints.front(), map.anchors.at("near-90").cell);
    EXPECT_EQ(s.phases[3].waypoints.back(), map.anchors.at("far-180").cell);
    EXPECT_EQ(s.phases[4].duration_s, 5);
}

TEST(ScriptTest, PureFunctionOfInputs) {
    const auto plan = plan_of({"near-0-snd", "far-270-img", "near-180-img"});
    EXPECT_EQ(build_script(plan, default_map()), build_script(plan, default_map()));
    const auto j = script_to_json(build_script(plan, default_map()));
    EXPECT_EQ(j.size(), 8u);
    EXPECT_EQ(j[1].at("phase"), "navigate");
    EXPECT_EQ(j[2].at("modality"), "sound");
    EXPECT_EQ(j[2].at("duration_s"), 5);
}

TEST(ScriptTest, UnreachableAnchorNamesPlanIndex) {
    auto map = default_map();
    const auto target = map.anchors.at("far-90").cell;
    for (const Cell nb : {Cell{target.row - 1, target.col}, Cell{target.row + 1, target.col}, Cell{target.row, target.col - 1},
                          Cell{target.row, target.col + 1}})
        if (map.in_bounds(nb)) map.blocked[map.index(nb)] = 1;
    try {
        build_script(plan_of({"near-0-snd", "far-90-img"}), map);
        FAIL() << "expected NoPath";
    } catch (const NoPath& e) {
        ASSERT_TRUE(e.plan_index.has_value());
        EXPECT_EQ(*e.plan_index, 1u);
    }
    EXPECT_THROW(build_script(CollectionPlan{}, default_map()), std::invalid_argument);
}
