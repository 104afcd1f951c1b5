#pragma once

// Operator sessions: the deployment state machine (initialize, navigate,
// capture, diagnose) over loaded model artifacts, with a JSON-lines log per
// session. Transport-agnostic; see http.hpp for the HTTP binding.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hdl/nav.hpp"
#include "hdl/protonet.hpp"

namespace hdl {

/// Expected share of usability problems found by `users` testers who each
/// find a proportion `per_user`: 1 - (1 - per_user)^users.
inline double usability_coverage(double per_user, double users) {
    if (!(per_user >= 0.0 && per_user <= 1.0)) throw std::domain_error("usability_coverage: proportion outside [0, 1]");
    if (!(users >= 0.0)) throw std::domain_error("usability_coverage: negative user count");
    return 1.0 - std::pow(1.0 - per_user, users);
}

enum class SessionPhase : std::uint8_t { Created, Initialized, Navigating, ReadyToCapture, Captured, Diagnosed };

inline std::string phase_name(SessionPhase p) {
    static constexpr std::array<const char*, 6> names{"created", "initialized", "navigating", "ready_to_capture",
                                                      "captured", "diagnosed"};
    return names[static_cast<std::size_t>(p)];
}

// Rejected request. Nothing was mutated when this is thrown.
struct ApiError : std::runtime_error {
    int status;
    std::string code;
    std::string phase;
    nlohmann::json extra;

    ApiError(int status, std::string code, const std::string& message, std::string phase = {},
             nlohmann::json extra = nlohmann::json::object())
        : std::runtime_error(message), status(status), code(std::move(code)), phase(std::move(phase)), extra(std::move(extra)) {}

    nlohmann::json body() const {
        nlohmann::json j{{"code", code}, {"message", what()}, {"phase", phase.empty() ? nullptr : nlohmann::json(phase)}};
        for (const auto& [k, v] : extra.items()) j[k] = v;
        return j;
    }
};

struct ServiceConfig {
    std::filesystem::path weights_path;
    std::filesystem::path plan_path;
    std::optional<std::filesystem::path> map_path;  // default_map() when absent
    std::filesystem::path data_dir = "sessions";
    std::string bind_host = "127.0.0.1";
    int port = 8080;
    std::size_t scan_threshold = 3;
    int scan_radius = 3;
    // "fixed": every session uses base_seed unless the request names one;
    // "sequential": base_seed + session ordinal.
    std::string seed_policy = "sequential";
    std::uint64_t base_seed = 1;

    static ServiceConfig from_json(const nlohmann::json& j) {
        ServiceConfig c;
        c.weights_path = j.at("weights").get<std::string>();
        c.plan_path = j.at("plan").get<std::string>();
        if (j.contains("map") && !j["map"].is_null()) c.map_path = j["map"].get<std::string>();
        c.data_dir = j.value("data_dir", c.data_dir.string());
        c.bind_host = j.value("host", c.bind_host);
        c.port = j.value("port", c.port);
        c.scan_threshold = j.value("scan_threshold", c.scan_threshold);
        c.scan_radius = j.value("scan_radius", c.scan_radius);
        c.seed_policy = j.value("seed_policy", c.seed_policy);
        c.base_seed = j.value("base_seed", c.base_seed);
        if (c.seed_policy != "fixed" && c.seed_policy != "sequential") {
            throw std::invalid_argument("seed_policy must be 'fixed' or 'sequential'");
        }
        return c;
    }
};

// Read-only after load; shared by every session.
struct ModelArtifacts {
    ProtoNetModel model;
    CollectionPlan plan;
    GridMap map;
    std::string weights_fingerprint;
};

/// Plan manifests may carry "weights_fingerprint"; a mismatch is an error.
inline ModelArtifacts load_artifacts(const ServiceConfig& cfg) {
    for (const auto& [what, path] : {std::pair{"weights", cfg.weights_path}, std::pair{"plan", cfg.plan_path}}) {
        if (!std::filesystem::exists(path)) {
            throw ApiError(503, "missing_artifact", std::string(what) + " file not found: " + path.string());
        }
    }
    ModelArtifacts a;
    nlohmann::json plan_json;
    {
        std::ifstream in(cfg.plan_path);
        try {
            plan_json = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw ApiError(503, "bad_artifact", "plan " + cfg.plan_path.string() + ": " + e.what());
        }
    }
    a.plan = plan_from_json(plan_json);
    const std::string bytes = read_file_bytes(cfg.weights_path);
    a.weights_fingerprint = fingerprint(bytes);
    if (plan_json.contains("weights_fingerprint") && plan_json["weights_fingerprint"] != a.weights_fingerprint) {
        throw ApiError(503, "fingerprint_mismatch",
                       "plan expects weights " + plan_json["weights_fingerprint"].get<std::string>() + " but " +
                           cfg.weights_path.string() + " is " + a.weights_fingerprint);
    }
    a.model = decode_model(bytes, a.plan.states);
    if (cfg.map_path) {
        std::ifstream in(*cfg.map_path);
        if (!in) throw ApiError(503, "missing_artifact", "map file not found: " + cfg.map_path->string());
        a.map = map_from_json(nlohmann::json::parse(in));
    } else {
        a.map = default_map();
    }
    for (std::size_t i = 0; i < a.plan.states.size(); ++i) {
        if (!a.map.anchors.count(a.plan.states[i].location_id())) {
            throw ApiError(503, "bad_artifact", "map has no anchor for plan entry " + std::to_string(i) + " (" +
                                                    a.plan.states[i].location_id() + ")");
        }
    }
    return a;
}

struct DiagnosisResult {
    Condition predicted = Condition::OneBlade;
    std::array<double, kConditionCount> log_probs{};
    std::vector<CollectionState> plan;
    std::string weights_fingerprint;

    nlohmann::json to_json() const {
        nlohmann::json lp = nlohmann::json::object();
        for (auto c : kAllConditions) lp[std::string(condition_name(c))] = log_probs[static_cast<std::size_t>(c)];
        nlohmann::json pl = nlohmann::json::array();
        for (const auto& s : plan) pl.push_back(s.id());
        return {{"predicted", condition_name(predicted)}, {"log_probs", lp}, {"plan", pl},
                {"weights_fingerprint", weights_fingerprint}};
    }
    friend bool operator==(const DiagnosisResult&, const DiagnosisResult&) = default;
};

/// Classifies captured samples (one per plan entry, in plan order).
inline DiagnosisResult diagnose_samples(ProtoNetModel& model, std::span<const Tensor> captures,
                                        const std::string& weights_fingerprint) {
    const Tensor stacked = stack_multimodal(captures);
    const Tensor one[] = {stacked};
    const Tensor lp = model.log_probs(one);
    DiagnosisResult r;
    for (std::size_t c = 0; c < kConditionCount; ++c) r.log_probs[c] = lp.data()[c];
    r.predicted = kAllConditions[argmax_rows(lp).front()];
    r.plan = model.plan;
    r.weights_fingerprint = weights_fingerprint;
    return r;
}

struct PhaseStamp {
    SessionPhase phase;
    std::size_t step = 0;
    double t_ms = 0;
};

struct Session {
    std::string id;
    SessionPhase phase = SessionPhase::Created;
    std::size_t step = 0;  // current plan entry while navigating/capturing
    Cell operator_cell;
    Condition condition = Condition::OneBlade;  // hidden until diagnosed
    std::uint64_t seed = 0;
    std::vector<Tensor> captures;
    std::vector<PhaseStamp> timeline;
    std::size_t leg_length = 0;  // path length in moves when the current leg started
    std::optional<DiagnosisResult> diagnosis;
    std::mutex mutex;
};

class SessionManager {
public:
    SessionManager(ServiceConfig cfg, ModelArtifacts artifacts)
        : cfg_(std::move(cfg)), art_(std::move(artifacts)), epoch_(std::chrono::steady_clock::now()) {
        art_.model.network.set_training(false);
        std::filesystem::create_directories(cfg_.data_dir);
    }

    const ModelArtifacts& artifacts() const { return art_; }
    const ServiceConfig& config() const { return cfg_; }

    /// body: {"condition"?: name, "seed"?: n}.
    nlohmann::json create(const nlohmann::json& body) {
        std::optional<Condition> cond;
        std::optional<std::uint64_t> seed;
        try {
            if (body.contains("condition") && !body["condition"].is_null()) cond = parse_condition(body["condition"].get<std::string>());
            if (body.contains("seed") && !body["seed"].is_null()) seed = body["seed"].get<std::uint64_t>();
        } catch (const std::exception& e) {
            throw ApiError(400, "bad_request", e.what());
        }
        auto s = std::make_shared<Session>();
        {
            std::unique_lock lock(sessions_mutex_);
            const std::size_t ordinal = ++created_;
            char buf[32];
            std::snprintf(buf, sizeof buf, "s%06zu", ordinal);
            s->id = buf;
            s->seed = seed ? *seed : (cfg_.seed_policy == "fixed" ? cfg_.base_seed : cfg_.base_seed + ordinal - 1);
            s->condition = cond ? *cond : kAllConditions[detail::mix_seed({s->seed, 0xC0DEULL}) % kConditionCount];
            s->operator_cell = art_.map.start;
            sessions_[s->id] = s;
        }
        std::lock_guard lock(s->mutex);
        stamp(*s);
        log(*s, {{"event", "create"}, {"seed", s->seed}, {"condition", condition_name(s->condition)}});
        return view(*s);
    }

    /// body: {"scan": [[r, c], ...]}.
    nlohmann::json initialize(const std::string& id, const nlohmann::json& body) {
        return with_session(id, [&](Session& s) {
            require_phase(s, {SessionPhase::Created}, "initialize");
            std::set<Cell> cells;
            try {
                for (const auto& c : body.at("scan")) cells.insert({c.at(0).get<int>(), c.at(1).get<int>()});
            } catch (const std::exception&) {
                throw ApiError(400, "bad_request", "initialize needs 'scan': [[row, col], ...]", phase_name(s.phase));
            }
            std::size_t visible = 0;
            for (const auto& c : cells) {
                if (!art_.map.walkable(c)) continue;
                for (const auto& [_, a] : art_.map.anchors) {
                    if (manhattan(c, a.cell) <= cfg_.scan_radius) {
                        ++visible;
                        break;
                    }
                }
            }
            if (visible < cfg_.scan_threshold) {
                throw ApiError(422, "insufficient_scan",
                               "scan covers " + std::to_string(visible) + " anchor-visible cells, need " +
                                   std::to_string(cfg_.scan_threshold),
                               phase_name(s.phase),
                               {{"hint", "scan more of the area within " + std::to_string(cfg_.scan_radius) +
                                             " cells of the fan"}});
            }
            const auto path = leg_path(s, 0);  // may throw NoPath before any mutation
            s.phase = SessionPhase::Initialized;
            stamp(s);
            log(s, {{"event", "initialize"}, {"scan_cells", visible}});
            begin_leg(s, 0, path);
            auto v = view(s);
            v["waypoints"] = cells_json(path);
            return v;
        });
    }

    nlohmann::json instructions(const std::string& id) {
        return with_session(id, [&](Session& s) {
            nlohmann::json j = view(s);
            switch (s.phase) {
                case SessionPhase::Created:
                    j["instruction"] = {{"phase", "initialize"},
                                        {"prompt", "Scan the area around the fan to localize the device."},
                                        {"scan_threshold", cfg_.scan_threshold}};
                    break;
                case SessionPhase::Initialized:
                case SessionPhase::Navigating: {
                    const auto& st = art_.plan.states[s.step];
                    const auto& a = art_.map.anchors.at(st.location_id());
                    j["instruction"] = {{"phase", "navigate"},
                                        {"waypoints", cells_json(astar(art_.map, s.operator_cell, a.cell))},
                                        {"destination", {a.cell.row, a.cell.col}},
                                        {"facing", facing_name(a.facing)},
                                        {"icon", st.modality == Modality::Sound ? "microphone" : "camera"}};
                    break;
                }
                case SessionPhase::ReadyToCapture:
                    j["instruction"] = capture_instruction(s);
                    break;
                case SessionPhase::Captured:
                    j["instruction"] = {{"phase", "diagnose"}, {"prompt", "Run the diagnosis on the captured data."}};
                    break;
                case SessionPhase::Diagnosed:
                    j["instruction"] = {{"phase", "done"}};
                    break;
            }
            return j;
        });
    }

    /// body: {"cell": [r, c]}; must be a 4-neighbour of the operator cell.
    nlohmann::json move(const std::string& id, const nlohmann::json& body) {
        return with_session(id, [&](Session& s) {
            require_phase(s, {SessionPhase::Navigating}, "move");
            Cell next;
            try {
                next = {body.at("cell").at(0).get<int>(), body.at("cell").at(1).get<int>()};
            } catch (const std::exception&) {
                throw ApiError(400, "bad_request", "move needs 'cell': [row, col]", phase_name(s.phase));
            }
            if (manhattan(next, s.operator_cell) != 1) {
                throw ApiError(409, "illegal_move", "cell is not adjacent to the operator", phase_name(s.phase));
            }
            if (!art_.map.walkable(next)) {
                throw ApiError(409, "illegal_move", "cell is blocked or outside the map", phase_name(s.phase));
            }
            const Cell goal = anchor_of(s.step).cell;
            const std::size_t remaining = astar(art_.map, next, goal).size() - 1;
            s.operator_cell = next;
            log(s, {{"event", "move"}, {"cell", {next.row, next.col}}});
            if (next == goal) {
                s.phase = SessionPhase::ReadyToCapture;
                stamp(s);
            }
            auto v = view(s);
            v["progress"] = progress(s, remaining);
            v["remaining"] = remaining;
            if (s.phase == SessionPhase::ReadyToCapture) v["instruction"] = capture_instruction(s);
            return v;
        });
    }

    nlohmann::json capture(const std::string& id) {
        return with_session(id, [&](Session& s) {
            require_phase(s, {SessionPhase::ReadyToCapture}, "capture");
            const auto& st = art_.plan.states[s.step];
            const RawSample raw = generate_sample(st, s.condition, Provenance::Field, s.seed);
            Tensor t = preprocess_tensor(raw);
            const std::size_t done = s.step;
            std::optional<std::vector<Cell>> next_path;
            if (done + 1 < art_.plan.states.size()) next_path = leg_path(s, done + 1);
            s.captures.push_back(std::move(t));
            nlohmann::json receipt{{"plan_index", done},
                                   {"state", st.id()},
                                   {"modality", st.modality == Modality::Sound ? "sound" : "image"},
                                   {"countdown_s", st.modality == Modality::Sound ? kSoundCaptureSeconds : 0}};
            log(s, {{"event", "capture"}, {"plan_index", done}, {"state", st.id()}});
            if (next_path) {
                begin_leg(s, done + 1, *next_path);
            } else {
                s.phase = SessionPhase::Captured;
                stamp(s);
            }
            auto v = view(s);
            v["receipt"] = receipt;
            return v;
        });
    }

    nlohmann::json diagnose(const std::string& id) {
        return with_session(id, [&](Session& s) {
            require_phase(s, {SessionPhase::Captured}, "diagnose");
            DiagnosisResult r;
            {
                std::lock_guard model_lock(model_mutex_);
                r = diagnose_samples(art_.model, s.captures, art_.weights_fingerprint);
            }
            s.diagnosis = r;
            s.phase = SessionPhase::Diagnosed;
            stamp(s);
            log(s, {{"event", "diagnose"}, {"result", r.to_json()}, {"phase_durations_ms", durations(s)}});
            auto v = view(s);
            v["diagnosis"] = r.to_json();
            v["ground_truth"] = condition_name(s.condition);
            return v;
        });
    }

    nlohmann::json log_of(const std::string& id) {
        return with_session(id, [&](Session& s) {
            nlohmann::json timeline = nlohmann::json::array();
            for (const auto& p : s.timeline) timeline.push_back({{"phase", phase_name(p.phase)}, {"step", p.step}, {"t_ms", p.t_ms}});
            nlohmann::json events = nlohmann::json::array();
            std::ifstream in(log_path(s));
            for (std::string line; std::getline(in, line);)
                if (!line.empty()) events.push_back(nlohmann::json::parse(line));
            return nlohmann::json{{"id", s.id}, {"timeline", timeline}, {"phase_durations_ms", durations(s)}, {"events", events}};
        });
    }

    /// Full internal state, hidden fields included. For tests and debugging.
    nlohmann::json snapshot(const std::string& id) {
        return with_session(id, [&](Session& s) {
            auto v = view(s);
            v["condition"] = condition_name(s.condition);
            v["seed"] = s.seed;
            v["captures"] = s.captures.size();
            v["timeline_length"] = s.timeline.size();
            v["leg_length"] = s.leg_length;
            v["diagnosed"] = s.diagnosis.has_value();
            return v;
        });
    }

    std::optional<DiagnosisResult> diagnosis_of(const std::string& id) {
        return with_session(id, [&](Session& s) { return s.diagnosis; });
    }

private:
    template <typename F>
    auto with_session(const std::string& id, F&& fn) -> decltype(fn(std::declval<Session&>())) {
        std::shared_ptr<Session> s;
        {
            std::shared_lock lock(sessions_mutex_);
            auto it = sessions_.find(id);
            if (it == sessions_.end()) throw ApiError(404, "unknown_session", "no session '" + id + "'");
            s = it->second;
        }
        std::lock_guard lock(s->mutex);
        return fn(*s);
    }

    void require_phase(const Session& s, std::initializer_list<SessionPhase> allowed, const char* op) const {
        for (auto p : allowed)
            if (s.phase == p) return;
        throw ApiError(409, "wrong_phase", std::string(op) + " is not allowed in phase " + phase_name(s.phase),
                       phase_name(s.phase));
    }

    const Anchor& anchor_of(std::size_t step) const {
        return art_.map.anchors.at(art_.plan.states.at(step).location_id());
    }

    std::vector<Cell> leg_path(const Session& s, std::size_t step) const {
        try {
            return astar(art_.map, s.operator_cell, anchor_of(step).cell);
        } catch (const NoPath& e) {
            throw ApiError(409, "no_path", "plan entry " + std::to_string(step) + ": " + e.what(), phase_name(s.phase));
        }
    }

    void begin_leg(Session& s, std::size_t step, const std::vector<Cell>& path) {
        s.step = step;
        s.leg_length = path.size() - 1;
        s.phase = SessionPhase::Navigating;
        stamp(s);
        if (s.operator_cell == anchor_of(step).cell) {
            s.phase = SessionPhase::ReadyToCapture;
            stamp(s);
        }
    }

    static double progress(const Session& s, std::size_t remaining) {
        if (s.leg_length == 0) return 1.0;
        return std::clamp(1.0 - static_cast<double>(remaining) / static_cast<double>(s.leg_length), 0.0, 1.0);
    }

    nlohmann::json capture_instruction(const Session& s) const {
        const auto& st = art_.plan.states[s.step];
        const bool sound = st.modality == Modality::Sound;
        return {{"phase", "capture"},
                {"modality", sound ? "sound" : "image"},
                {"icon", sound ? "microphone" : "camera"},
                {"duration_s", sound ? kSoundCaptureSeconds : 0},
                {"facing", facing_name(anchor_of(s.step).facing)}};
    }

    nlohmann::json view(const Session& s) const {
        return {{"id", s.id},
                {"phase", phase_name(s.phase)},
                {"step", s.step},
                {"plan_length", art_.plan.states.size()},
                {"operator", {s.operator_cell.row, s.operator_cell.col}}};
    }

    static nlohmann::json cells_json(const std::vector<Cell>& cells) {
        nlohmann::json out = nlohmann::json::array();
        for (const auto& c : cells) out.push_back({c.row, c.col});
        return out;
    }

    double now_ms() const {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - epoch_).count();
    }

    void stamp(Session& s) {
        double t = now_ms();
        if (!s.timeline.empty()) t = std::max(t, s.timeline.back().t_ms);
        s.timeline.push_back({s.phase, s.step, t});
        log(s, {{"event", "phase"}, {"phase", phase_name(s.phase)}, {"step", s.step}, {"t_ms", t}});
    }

    // Time spent in each phase, keyed "phase[step]".
    static nlohmann::json durations(const Session& s) {
        nlohmann::json d = nlohmann::json::object();
        for (std::size_t i = 0; i + 1 < s.timeline.size(); ++i) {
            const auto& p = s.timeline[i];
            d[phase_name(p.phase) + "[" + std::to_string(p.step) + "]"] = s.timeline[i + 1].t_ms - p.t_ms;
        }
        return d;
    }

    std::filesystem::path log_path(const Session& s) const { return cfg_.data_dir / (s.id + ".jsonl"); }

    void log(const Session& s, nlohmann::json entry) const {
        entry["session"] = s.id;
        std::ofstream out(log_path(s), std::ios::app);
        out << entry.dump() << '\n';
    }

    ServiceConfig cfg_;
    ModelArtifacts art_;
    std::chrono::steady_clock::time_point epoch_;
    std::mutex model_mutex_;
    std::shared_mutex sessions_mutex_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::size_t created_ = 0;
};

/// Walkable cells within the scan radius of the first plan anchor, row-major.
inline nlohmann::json default_scan(const SessionManager& sessions) {
    const auto& art = sessions.artifacts();
    const Cell anchor = art.map.anchors.at(art.plan.states.front().location_id()).cell;
    const int r = sessions.config().scan_radius;
    nlohmann::json cells = nlohmann::json::array();
    for (int y = anchor.row - r; y <= anchor.row + r; ++y)
        for (int x = anchor.col - r; x <= anchor.col + r; ++x)
            if (art.map.walkable({y, x}) && manhattan({y, x}, anchor) <= r) cells.push_back({y, x});
    return cells;
}

/// Drives one session through the whole script as an operator would and
/// returns the final diagnose response.
inline nlohmann::json run_scripted_session(SessionManager& sessions, std::optional<Condition> condition,
                                           std::optional<std::uint64_t> seed) {
    nlohmann::json req = nlohmann::json::object();
    if (condition) req["condition"] = condition_name(*condition);
    if (seed) req["seed"] = *seed;
    const std::string id = sessions.create(req).at("id");
    auto state = sessions.initialize(id, {{"scan", default_scan(sessions)}});
    for (std::size_t guard = 0; state.at("phase") != "captured"; ++guard) {
        if (guard > 100000) throw std::logic_error("scripted session did not finish");
        if (state.at("phase") == "ready_to_capture") {
            state = sessions.capture(id);
            continue;
        }
        const auto ins = sessions.instructions(id).at("instruction");
        const auto& wp = ins.at("waypoints");
        state = sessions.move(id, {{"cell", wp.at(1)}});
    }
    return sessions.diagnose(id);
}

}  // namespace hdl
