#pragma once

// Model artifacts on disk for service tests, and a random endpoint-sequence
// driver that checks the session state machine after every call.

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "hdl/service.hpp"

namespace hdl::testing {

/// Trains a small classifier for `plan_ids`, writes weights and a plan
/// manifest carrying the fingerprint under `dir`, and returns a config.
inline ServiceConfig write_test_artifacts(const std::filesystem::path& dir, const std::vector<std::string>& plan_ids,
                                          std::uint64_t seed, std::size_t epochs) {
    std::filesystem::create_directories(dir);
    CollectionPlan plan;
    for (const auto& id : plan_ids) plan.states.push_back(CollectionState::parse(id));
    plan.seed = seed;
    ProtoNetConfig cfg;
    cfg.epochs = epochs;
    const auto model = train_protonet(FewShotSet::from_dataset(build_dataset(plan.states, Provenance::Virtual, 1, seed)), seed, cfg);
    const std::string bytes = encode_model(model);
    ServiceConfig c;
    c.weights_path = dir / "weights.hdlw";
    c.plan_path = dir / "plan.json";
    c.data_dir = dir / "sessions";
    c.seed_policy = "fixed";
    write_file_bytes(c.weights_path, bytes);
    auto manifest = plan_to_json(plan);
    manifest["weights_fingerprint"] = fingerprint(bytes);
    std::ofstream(c.plan_path) << manifest.dump();
    return c;
}

struct FuzzReport {
    std::size_t calls = 0;
    std::size_t rejected = 0;
    std::size_t diagnosed = 0;
    std::vector<std::string> violations;
};

namespace detail {

inline bool legal_transition(const std::string& op, const std::string& from, const std::string& to) {
    if (from == to) return op == "move" || op == "instructions" || op == "log";
    if (op == "initialize") return from == "created" && (to == "navigating" || to == "ready_to_capture");
    if (op == "move") return from == "navigating" && to == "ready_to_capture";
    if (op == "capture") return from == "ready_to_capture" && (to == "navigating" || to == "captured");
    if (op == "diagnose") return from == "captured" && to == "diagnosed";
    return false;
}

}  // namespace detail

/// Runs `sequences` sessions, each a sequence of up to `max_calls` endpoint
/// calls. Most calls are the one the current phase expects (moves follow the
/// instructed path) so that sessions regularly reach diagnosis; the rest are
/// uniformly random endpoints with random arguments.
inline FuzzReport fuzz_sessions(SessionManager& sessions, std::size_t sequences, std::uint64_t seed,
                                std::size_t max_calls = 120) {
    FuzzReport report;
    std::mt19937_64 rng(seed);
    const auto& art = sessions.artifacts();
    const auto flag = [&](const std::string& what) {
        if (report.violations.size() < 20) report.violations.push_back(what);
    };
    const auto random_cell = [&] {
        std::uniform_int_distribution<int> r(-1, art.map.height), c(-1, art.map.width);
        return nlohmann::json{r(rng), c(rng)};
    };
    enum Op { Initialize, Move, Capture, Diagnose, Instructions, Log, kOps };
    static constexpr const char* kOpNames[] = {"initialize", "move", "capture", "diagnose", "instructions", "log"};

    for (std::size_t q = 0; q < sequences; ++q) {
        nlohmann::json req = nlohmann::json::object();
        if (rng() % 2) req["condition"] = condition_name(kAllConditions[rng() % kConditionCount]);
        req["seed"] = rng() % 1000;
        const std::string id = sessions.create(req).at("id");
        const std::size_t calls = 1 + rng() % max_calls;
        for (std::size_t k = 0; k < calls; ++k) {
            const auto before = sessions.snapshot(id);
            const auto log_before = sessions.log_of(id).at("events").size();
            const std::string phase = before.at("phase");
            const bool expected = rng() % 10 < 7;
            Op op = static_cast<Op>(rng() % kOps);
            if (expected) {
                if (phase == "created") op = Initialize;
                else if (phase == "navigating") op = Move;
                else if (phase == "ready_to_capture") op = Capture;
                else if (phase == "captured") op = Diagnose;
            }
            ++report.calls;
            try {
                switch (op) {
                    case Initialize: {
                        nlohmann::json scan = default_scan(sessions);
                        if (!expected) {
                            scan = nlohmann::json::array();
                            for (std::size_t i = rng() % 5; i > 0; --i) scan.push_back(random_cell());
                        }
                        sessions.initialize(id, rng() % 20 == 0 ? nlohmann::json{{"scn", scan}} : nlohmann::json{{"scan", scan}});
                        break;
                    }
                    case Move: {
                        nlohmann::json cell = random_cell();
                        if (expected && phase == "navigating") {
                            const auto wp = sessions.instructions(id).at("instruction").at("waypoints");
                            if (wp.size() > 1) cell = wp.at(1);
                        }
                        sessions.move(id, rng() % 20 == 0 ? nlohmann::json{{"cel", cell}} : nlohmann::json{{"cell", cell}});
                        break;
                    }
                    case Capture: sessions.capture(id); break;
                    case Diagnose: sessions.diagnose(id); break;
                    case Instructions: sessions.instructions(id); break;
                    default: sessions.log_of(id); break;
                }
            } catch (const ApiError& e) {
                ++report.rejected;
                const std::string name = kOpNames[op];
                if (sessions.snapshot(id) != before) flag(id + ": rejected " + name + " mutated the session");
                if (sessions.log_of(id).at("events").size() != log_before) flag(id + ": rejected " + name + " wrote a log entry");
                if (e.phase != before.at("phase").get<std::string>() && e.code != "unknown_session") {
                    flag(id + ": error phase '" + e.phase + "' differs from session phase");
                }
                continue;
            }

            const auto after = sessions.snapshot(id);
            const std::string to = after.at("phase");
            if (!detail::legal_transition(kOpNames[op], phase, to)) flag(id + ": " + kOpNames[op] + " moved " + phase + " -> " + to);
            const std::size_t step = after.at("step"), captures = after.at("captures"), plan = after.at("plan_length");
            if (to == "created" && captures != 0) flag(id + ": captures before initialization");
            if ((to == "navigating" || to == "ready_to_capture") && captures != step) flag(id + ": capture count != step");
            if ((to == "captured" || to == "diagnosed") && captures != plan) flag(id + ": captured phase with missing captures");
            if (after.at("diagnosed").get<bool>() != (to == "diagnosed")) flag(id + ": diagnosis flag out of sync");
            const Cell at{after.at("operator").at(0).get<int>(), after.at("operator").at(1).get<int>()};
            if (!art.map.walkable(at)) flag(id + ": operator on a blocked cell");
            if (to == "ready_to_capture" && at != art.map.anchors.at(art.plan.states.at(step).location_id()).cell) {
                flag(id + ": ready to capture away from the anchor");
            }
            const auto timeline = sessions.log_of(id).at("timeline");
            for (std::size_t i = 1; i < timeline.size(); ++i)
                if (timeline[i].at("t_ms").get<double>() < timeline[i - 1].at("t_ms").get<double>()) flag(id + ": timeline not monotone");
            if (timeline.back().at("phase") != to) flag(id + ": last timeline entry is not the current phase");
            if (op == Diagnose) ++report.diagnosed;
        }
    }
    return report;
}

}  // namespace hdl::testing
