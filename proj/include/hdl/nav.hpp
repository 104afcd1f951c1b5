#pragma once

// Grid map of the deployment site, A* pathfinding, and the operator
// instruction script derived from a collection plan.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "hdl/dqn.hpp"

namespace hdl {

struct Cell {
    int row = 0;
    int col = 0;
    friend bool operator==(const Cell&, const Cell&) = default;
    friend auto operator<=>(const Cell&, const Cell&) = default;
};

inline int manhattan(const Cell& a, const Cell& b) { return std::abs(a.row - b.row) + std::abs(a.col - b.col); }

enum class Facing : std::uint8_t { N, E, S, W };

inline std::string facing_name(Facing f) {
    static constexpr std::array<const char*, 4> names{"N", "E", "S", "W"};
    return names[static_cast<std::size_t>(f)];
}

inline Facing parse_facing(std::string_view s) {
    if (s == "N") return Facing::N;
    if (s == "E") return Facing::E;
    if (s == "S") return Facing::S;
    if (s == "W") return Facing::W;
    throw std::invalid_argument("unknown facing '" + std::string(s) + "'");
}

struct Anchor {
    Cell cell;
    Facing facing = Facing::N;
};

class NoPath : public std::runtime_error {
public:
    explicit NoPath(const std::string& what, std::optional<std::size_t> plan_index = std::nullopt)
        : std::runtime_error(what), plan_index(plan_index) {}
    std::optional<std::size_t> plan_index;
};

// Anchors are keyed by location id ("far-0").
struct GridMap {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> blocked;  // row-major
    std::map<std::string, Anchor> anchors;
    Cell start;

    bool in_bounds(const Cell& c) const { return c.row >= 0 && c.col >= 0 && c.row < height && c.col < width; }
    bool is_blocked(const Cell& c) const { return blocked[static_cast<std::size_t>(c.row * width + c.col)] != 0; }
    bool walkable(const Cell& c) const { return in_bounds(c) && !is_blocked(c); }
    std::size_t index(const Cell& c) const { return static_cast<std::size_t>(c.row * width + c.col); }

    static GridMap empty(int width, int height) {
        if (width <= 0 || height <= 0) throw std::invalid_argument("map dimensions must be positive");
        GridMap m;
        m.width = width;
        m.height = height;
        m.blocked.assign(static_cast<std::size_t>(width * height), 0);
        return m;
    }

    // Throws on out-of-bounds or blocked anchors/start and on shared anchor cells.
    void validate() const {
        if (width <= 0 || height <= 0 || blocked.size() != static_cast<std::size_t>(width * height)) {
            throw std::invalid_argument("map dimensions do not match the blocked grid");
        }
        if (!walkable(start)) throw std::invalid_argument("map start cell is blocked or out of bounds");
        std::set<Cell> seen;
        for (const auto& [id, a] : anchors) {
            if (!walkable(a.cell)) throw std::invalid_argument("anchor " + id + " is blocked or out of bounds");
            if (!seen.insert(a.cell).second) throw std::invalid_argument("anchor " + id + " shares a cell with another anchor");
        }
    }
};

inline GridMap map_from_json(const nlohmann::json& j) {
    GridMap m = GridMap::empty(j.at("width").get<int>(), j.at("height").get<int>());
    for (const auto& b : j.value("blocked", nlohmann::json::array())) {
        Cell c{b.at(0).get<int>(), b.at(1).get<int>()};
        if (!m.in_bounds(c)) throw std::invalid_argument("blocked cell " + b.dump() + " out of bounds");
        m.blocked[m.index(c)] = 1;
    }
    for (const auto& [id, a] : j.at("anchors").items()) {
        m.anchors[id] = {{a.at("cell").at(0).get<int>(), a.at("cell").at(1).get<int>()},
                         parse_facing(a.value("facing", std::string("N")))};
    }
    m.start = {j.at("start").at(0).get<int>(), j.at("start").at(1).get<int>()};
    m.validate();
    return m;
}

inline nlohmann::json map_to_json(const GridMap& m) {
    nlohmann::json blocked = nlohmann::json::array();
    for (int r = 0; r < m.height; ++r)
        for (int c = 0; c < m.width; ++c)
            if (m.is_blocked({r, c})) blocked.push_back({r, c});
    nlohmann::json anchors = nlohmann::json::object();
    for (const auto& [id, a] : m.anchors) anchors[id] = {{"cell", {a.cell.row, a.cell.col}}, {"facing", facing_name(a.facing)}};
    return {{"width", m.width}, {"height", m.height}, {"blocked", blocked}, {"anchors", anchors},
            {"start", {m.start.row, m.start.col}}};
}

/// A 20 x 14 room: the fan housing blocks the centre, one anchor per location
/// on near and far rings at the four sides.
inline GridMap default_map() {
    GridMap m = GridMap::empty(20, 14);
    for (int r = 5; r <= 8; ++r)
        for (int c = 8; c <= 11; ++c) m.blocked[m.index({r, c})] = 1;
    for (int r = 0; r <= 3; ++r) m.blocked[m.index({r, 15})] = 1;  // workbench
    m.anchors["near-0"] = {{4, 9}, Facing::S};
    m.anchors["near-90"] = {{6, 12}, Facing::W};
    m.anchors["near-180"] = {{9, 10}, Facing::N};
    m.anchors["near-270"] = {{7, 7}, Facing::E};
    m.anchors["far-0"] = {{1, 10}, Facing::S};
    m.anchors["far-90"] = {{7, 16}, Facing::W};
    m.anchors["far-180"] = {{12, 9}, Facing::N};
    m.anchors["far-270"] = {{6, 3}, Facing::E};
    m.start = {13, 0};
    m.validate();
    return m;
}

struct SearchResult {
    std::vector<Cell> path;
    std::size_t expanded = 0;
};

/// Shortest 4-connected path including both endpoints. Open-list order is
/// (f, h, row-major index); ties therefore resolve deterministically.
inline SearchResult astar_search(const GridMap& map, const Cell& start, const Cell& goal) {
    if (!map.walkable(start)) throw std::invalid_argument("astar: start cell is blocked or out of bounds");
    if (!map.walkable(goal)) throw std::invalid_argument("astar: goal cell is blocked or out of bounds");
    using Entry = std::tuple<int, int, std::size_t>;  // f, h, index
    std::priority_queue<Entry, std::vector<Entry>, std::greater<>> open;
    const std::size_t n = static_cast<std::size_t>(map.width * map.height);
    std::vector<int> g(n, -1);
    std::vector<std::size_t> parent(n, n);
    std::vector<std::uint8_t> closed(n, 0);
    const auto cell_of = [&](std::size_t i) { return Cell{static_cast<int>(i) / map.width, static_cast<int>(i) % map.width}; };

    SearchResult out;
    g[map.index(start)] = 0;
    open.emplace(manhattan(start, goal), manhattan(start, goal), map.index(start));
    while (!open.empty()) {
        const auto [f, h, idx] = open.top();
        open.pop();
        if (closed[idx]) continue;
        closed[idx] = 1;
        ++out.expanded;
        const Cell cur = cell_of(idx);
        if (cur == goal) {
            for (std::size_t i = idx; i != n; i = parent[i]) out.path.push_back(cell_of(i));
            std::reverse(out.path.begin(), out.path.end());
            return out;
        }
        static constexpr std::array<std::array<int, 2>, 4> kSteps{{{-1, 0}, {0, 1}, {1, 0}, {0, -1}}};
        for (const auto& d : kSteps) {
            const Cell nb{cur.row + d[0], cur.col + d[1]};
            if (!map.walkable(nb)) continue;
            const std::size_t ni = map.index(nb);
            const int ng = g[idx] + 1;
            if (closed[ni] || (g[ni] >= 0 && g[ni] <= ng)) continue;
            g[ni] = ng;
            parent[ni] = idx;
            const int nh = manhattan(nb, goal);
            open.emplace(ng + nh, nh, ni);
        }
    }
    throw NoPath("no path from (" + std::to_string(start.row) + "," + std::to_string(start.col) + ") to (" +
                 std::to_string(goal.row) + "," + std::to_string(goal.col) + ")");
}

inline std::vector<Cell> astar(const GridMap& map, const Cell& start, const Cell& goal) {
    return astar_search(map, start, goal).path;
}

enum class PhaseKind : std::uint8_t { Initialize, Navigate, Capture, Diagnose };

inline std::string phase_kind_name(PhaseKind k) {
    static constexpr std::array<const char*, 4> names{"initialize", "navigate", "capture", "diagnose"};
    return names[static_cast<std::size_t>(k)];
}

inline constexpr int kSoundCaptureSeconds = 5;

// Fields unused by a kind stay at their defaults.
struct ScriptPhase {
    PhaseKind kind = PhaseKind::Initialize;
    std::string prompt;
    std::size_t plan_index = 0;
    std::vector<Cell> waypoints;
    std::string icon;  // "camera" | "microphone"
    Modality modality = Modality::Image;
    int duration_s = 0;
    std::string location_id;
    Facing facing = Facing::N;

    friend bool operator==(const ScriptPhase&, const ScriptPhase&) = default;
};

struct InstructionScript {
    std::vector<ScriptPhase> phases;
    friend bool operator==(const InstructionScript&, const InstructionScript&) = default;
};

inline ScriptPhase prompt_phase(PhaseKind kind, std::string prompt) {
    ScriptPhase p;
    p.kind = kind;
    p.prompt = std::move(prompt);
    return p;
}

inline InstructionScript build_script(const CollectionPlan& plan, const GridMap& map) {
    if (plan.states.empty()) throw std::invalid_argument("build_script: empty plan");
    InstructionScript s;
    s.phases.push_back(prompt_phase(PhaseKind::Initialize, "Scan the area around the fan to localize the device."));
    Cell current = map.start;
    for (std::size_t i = 0; i < plan.states.size(); ++i) {
        const auto& st = plan.states[i];
        auto it = map.anchors.find(st.location_id());
        if (it == map.anchors.end()) throw std::invalid_argument("map has no anchor for location " + st.location_id());
        std::vector<Cell> path;
        try {
            path = astar(map, current, it->second.cell);
        } catch (const NoPath& e) {
            throw NoPath("plan entry " + std::to_string(i) + " (" + st.id() + "): " + e.what(), i);
        }
        const bool sound = st.modality == Modality::Sound;
        ScriptPhase nav;
        nav.kind = PhaseKind::Navigate;
        nav.prompt = "Walk to " + st.location_id() + " and face " + facing_name(it->second.facing) + ".";
        nav.plan_index = i;
        nav.waypoints = std::move(path);
        nav.icon = sound ? "microphone" : "camera";
        nav.modality = st.modality;
        nav.location_id = st.location_id();
        nav.facing = it->second.facing;
        s.phases.push_back(std::move(nav));

        ScriptPhase cap;
        cap.kind = PhaseKind::Capture;
        cap.prompt = sound ? "Hold still while the recording counts down." : "Take a picture of the fan.";
        cap.plan_index = i;
        cap.icon = sound ? "microphone" : "camera";
        cap.modality = st.modality;
        cap.duration_s = sound ? kSoundCaptureSeconds : 0;
        cap.location_id = st.location_id();
        cap.facing = it->second.facing;
        s.phases.push_back(std::move(cap));
        current = it->second.cell;
    }
    s.phases.push_back(prompt_phase(PhaseKind::Diagnose, "Run the diagnosis on the captured data."));
    return s;
}

inline nlohmann::json script_to_json(const InstructionScript& s) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& p : s.phases) {
        nlohmann::json j{{"phase", phase_kind_name(p.kind)}, {"prompt", p.prompt}};
        if (p.kind == PhaseKind::Navigate || p.kind == PhaseKind::Capture) {
            j["plan_index"] = p.plan_index;
            j["icon"] = p.icon;
            j["modality"] = p.modality == Modality::Image ? "image" : "sound";
            j["location"] = p.location_id;
            j["facing"] = facing_name(p.facing);
        }
        if (p.kind == PhaseKind::Navigate) {
            nlohmann::json wp = nlohmann::json::array();
            for (const auto& c : p.waypoints) wp.push_back({c.row, c.col});
            j["waypoints"] = wp;
        }
        if (p.kind == PhaseKind::Capture) j["duration_s"] = p.duration_s;
        out.push_back(std::move(j));
    }
    return out;
}

}  // namespace hdl
