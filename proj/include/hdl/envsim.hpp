#pragma once

// Procedural stand-in for the monitored fan: deterministic image and audio
// generators for every (collection state, operating condition) pair.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "hdl/tensor.hpp"

namespace hdl {

enum class Condition : std::uint8_t { OneBlade, TwoBlades, ThreeBlades, OneHole, TwoHoles, ThreeHoles };
inline constexpr std::size_t kConditionCount = 6;

inline constexpr std::array<Condition, kConditionCount> kAllConditions{
    Condition::OneBlade, Condition::TwoBlades, Condition::ThreeBlades,
    Condition::OneHole,  Condition::TwoHoles,  Condition::ThreeHoles};

inline std::string_view condition_name(Condition c) {
    static constexpr std::array<std::string_view, kConditionCount> names{
        "one_blade", "two_blades", "three_blades", "one_hole", "two_holes", "three_holes"};
    return names[static_cast<std::size_t>(c)];
}

inline Condition parse_condition(std::string_view name) {
    for (auto c : kAllConditions)
        if (condition_name(c) == name) return c;
    throw std::invalid_argument("unknown operating condition '" + std::string(name) + "'");
}

inline std::size_t blade_count(Condition c) {
    switch (c) {
        case Condition::OneBlade: return 1;
        case Condition::TwoBlades: return 2;
        default: return 3;
    }
}

inline std::size_t hole_count(Condition c) {
    switch (c) {
        case Condition::OneHole: return 1;
        case Condition::TwoHoles: return 2;
        case Condition::ThreeHoles: return 3;
        default: return 0;
    }
}

enum class Distance : std::uint8_t { Near, Far };
enum class Modality : std::uint8_t { Image, Sound };
enum class Provenance : std::uint8_t { Virtual, Field };

inline constexpr std::size_t kLocationCount = 8;
inline constexpr std::size_t kStateCount = 16;

inline std::string_view provenance_name(Provenance p) { return p == Provenance::Virtual ? "virtual" : "field"; }

// One sensing configuration. Canonical index = location * 2 + modality with
// location = distance * 4 + angle / 90, so index 0 is (Near, 0, Image).
struct CollectionState {
    Distance distance = Distance::Near;
    int angle = 0;
    Modality modality = Modality::Image;

    std::size_t location() const {
        return static_cast<std::size_t>(distance) * 4 + static_cast<std::size_t>(angle / 90);
    }
    std::size_t index() const { return location() * 2 + static_cast<std::size_t>(modality); }

    static CollectionState from_location(std::size_t location, Modality modality) {
        if (location >= kLocationCount) throw std::out_of_range("location index " + std::to_string(location));
        return {location < 4 ? Distance::Near : Distance::Far, static_cast<int>(location % 4) * 90, modality};
    }
    static CollectionState from_index(std::size_t index) {
        if (index >= kStateCount) throw std::out_of_range("state index " + std::to_string(index));
        return from_location(index / 2, index % 2 == 0 ? Modality::Image : Modality::Sound);
    }

    // Location key, e.g. "far-0".
    std::string location_id() const {
        return std::string(distance == Distance::Near ? "near" : "far") + "-" + std::to_string(angle);
    }
    // State id, e.g. "far-0-snd".
    std::string id() const { return location_id() + (modality == Modality::Image ? "-img" : "-snd"); }

    static CollectionState parse(std::string_view id) {
        for (std::size_t i = 0; i < kStateCount; ++i) {
            auto s = from_index(i);
            if (s.id() == id) return s;
        }
        throw std::invalid_argument("unknown state id '" + std::string(id) + "'");
    }

    friend bool operator==(const CollectionState&, const CollectionState&) = default;
};

inline std::vector<CollectionState> enumerate_states() {
    std::vector<CollectionState> out;
    for (std::size_t i = 0; i < kStateCount; ++i) out.push_back(CollectionState::from_index(i));
    return out;
}

// Generator constants. Defaults are the frozen calibration.
struct GeneratorConfig {
    double sample_rate = 16000.0;
    double duration_s = 5.0;
    std::size_t image_height = 480;
    std::size_t image_width = 640;

    // Audio
    double rotation_hz = 47.0;
    double partial_ceiling_hz = 3200.0;
    double blade_tone_amp = 0.05;
    std::array<double, 3> whistle_hz{2150.0, 2950.0, 3900.0};
    double whistle_amp = 0.03;
    double hum_amp = 0.02;
    double hiss_sigma = 4e-4;
    std::array<double, 4> tone_gain_by_angle{1.0, 0.75, 0.42, 0.7};
    std::array<double, 4> rear_noise_by_angle{0.004, 0.008, 0.02, 0.008};
    std::array<double, 2> tone_gain_by_distance{0.8, 1.0};
    std::array<double, 2> hum_gain_by_distance{1.0, 0.35};

    // Images
    double render_noise_sigma = 2.0;
    std::array<double, 2> fan_radius_px{190.0, 80.0};

    // Field perturbation
    double field_gain_sigma = 0.03;
    double field_audio_noise_sigma = 1e-3;
    double field_image_noise_sigma = 4.0;
};

struct RawSample {
    CollectionState state;
    Condition condition = Condition::OneBlade;
    Provenance provenance = Provenance::Virtual;
    std::uint64_t seed = 0;
    double sample_rate = 0.0;
    Tensor image;                 // 3 x H x W, values in [0, 255]; image states only
    std::vector<float> waveform;  // mono; sound states only

    bool is_image() const { return state.modality == Modality::Image; }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = 0x243F6A8885A308D3ULL;
    for (auto p : parts) h = splitmix64(h ^ p);
    return h;
}

inline std::vector<float> render_audio(const CollectionState& st, Condition cond, std::uint64_t seed,
                                       const GeneratorConfig& cfg) {
    const auto n = static_cast<std::size_t>(std::llround(cfg.sample_rate * cfg.duration_s));
    const std::size_t a = static_cast<std::size_t>(st.angle / 90);
    const std::size_t d = static_cast<std::size_t>(st.distance);
    const double tone_gain = cfg.tone_gain_by_angle[a] * cfg.tone_gain_by_distance[d];
    const double two_pi = 2 * std::numbers::pi;

    struct Partial {
        double freq, amp, phase;
    };
    std::mt19937_64 rng(mix_seed({seed, st.index(), static_cast<std::uint64_t>(cond), 0xA0D10ULL}));
    std::uniform_real_distribution<double> phase(0.0, two_pi);
    std::vector<Partial> partials;

    const double bpf = static_cast<double>(blade_count(cond)) * cfg.rotation_hz;
    for (std::size_t k = 1; k * bpf < cfg.partial_ceiling_hz; ++k) {
        partials.push_back({k * bpf, tone_gain * cfg.blade_tone_amp / std::pow(static_cast<double>(k), 0.6), phase(rng)});
    }
    for (std::size_t h = 0; h < hole_count(cond); ++h) {
        for (double detune : {-9.0, 0.0, 11.0}) {
            partials.push_back({cfg.whistle_hz[h] + detune, tone_gain * cfg.whistle_amp / 2, phase(rng)});
        }
    }
    const double hum = cfg.hum_amp * cfg.hum_gain_by_distance[d];
    for (std::size_t k = 1; k <= 10; ++k) partials.push_back({60.0 * k, hum / k, phase(rng)});

    std::vector<double> sig(n, 0.0);
    for (const auto& p : partials) {
        const double w = two_pi * p.freq / cfg.sample_rate;
        // Rotating phasor avoids a sin() per sample.
        double c = std::cos(p.phase), s = std::sin(p.phase);
        const double cw = std::cos(w), sw = std::sin(w);
        for (std::size_t i = 0; i < n; ++i) {
            sig[i] += p.amp * s;
            const double nc = c * cw - s * sw;
            s = s * cw + c * sw;
            c = nc;
        }
    }

    // Airflow noise behind the fan: one fixed realization per location so it
    // is shared by every condition.
    std::mt19937_64 env_rng(mix_seed({st.location(), 0xE7A1ULL}));
    std::normal_distribution<double> unit(0.0, 1.0);
    const double rear = cfg.rear_noise_by_angle[a];
    double lp = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        lp = 0.85 * lp + 0.15 * unit(env_rng);
        sig[i] += rear * lp * 2.5;
    }

    std::normal_distribution<double> hiss(0.0, cfg.hiss_sigma);
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(sig[i] + hiss(rng));
    return out;
}

inline Tensor render_image(const CollectionState& st, Condition cond, std::uint64_t seed, const GeneratorConfig& cfg) {
    const std::size_t h = cfg.image_height, w = cfg.image_width;
    const double radius = cfg.fan_radius_px[static_cast<std::size_t>(st.distance)];
    const double cy = 0.45 * static_cast<double>(h), cx = 0.5 * static_cast<double>(w);
    const std::size_t blades = blade_count(cond), holes = hole_count(cond);
    const double pi = std::numbers::pi;
    const bool side = st.angle == 90 || st.angle == 270;
    const bool rear = st.angle == 180;

    struct Color {
        double r, g, b;
    };
    const Color housing{35, 38, 44}, blade{70, 82, 96}, hub{120, 120, 125}, motor{55, 50, 48}, stand{90, 90, 92};

    auto blade_angle = [&](std::size_t k) { return pi / 2 + 2 * pi * static_cast<double>(k) / static_cast<double>(blades); };

    std::mt19937_64 rng(mix_seed({seed, st.index(), static_cast<std::uint64_t>(cond), 0x1A6EULL}));
    std::normal_distribution<double> noise(0.0, cfg.render_noise_sigma);

    std::vector<float> img(3 * h * w);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double u = (static_cast<double>(x) - cx) / radius;
            const double v = (static_cast<double>(y) - cy) / radius;
            // Wall with a vertical light gradient, floor below.
            const double t = static_cast<double>(y) / static_cast<double>(h);
            Color c = y > static_cast<std::size_t>(0.82 * static_cast<double>(h))
                          ? Color{150 - 20 * t, 140 - 20 * t, 128 - 20 * t}
                          : Color{205 - 30 * t, 200 - 30 * t, 190 - 30 * t};
            if (std::abs(u) < 0.07 && v > 0.95 && v < 2.1) c = stand;

            if (!side) {
                if (rear) u = -u;
                const double r = std::hypot(u, v);
                double theta = std::atan2(v, u);
                if (r < 1.0) {
                    bool in_blade = false;
                    if (r > 0.16 && r < 0.9) {
                        for (std::size_t k = 0; k < blades; ++k) {
                            double diff = std::remainder(theta - blade_angle(k), 2 * pi);
                            if (std::abs(diff) < 0.18 + 0.22 * r) {
                                in_blade = true;
                                if (k < holes) {
                                    const double bx = 0.58 * std::cos(blade_angle(k)), by = 0.58 * std::sin(blade_angle(k));
                                    if (std::hypot(u - bx, v - by) < 0.1) in_blade = false;
                                }
                            }
                        }
                    }
                    if (in_blade) c = blade;
                    if (r < 0.16) c = hub;
                    if (r > 0.93) c = housing;
                    if (rear) {
                        if (r < 0.34) c = motor;
                        // Rear guard rings.
                        for (double ring : {0.48, 0.66, 0.82})
                            if (std::abs(r - ring) < 0.035) c = housing;
                        if (std::abs(v) < 0.03 || std::abs(u) < 0.03) c = housing;
                    }
                }
            } else {
                if (st.angle == 270) u = -u;
                // Edge-on housing: thin vertical ellipse with the hub bump facing +u.
                const double half_thickness = 0.12 * std::sqrt(std::max(0.0, 1.0 - v * v));
                if (std::abs(v) < 1.0 && std::abs(u) < half_thickness) c = housing;
                if (std::abs(v) < 0.16 && u > 0 && u < 0.22) c = hub;
                // Blade edges project onto the vertical axis.
                for (std::size_t k = 0; k < blades; ++k) {
                    const double s = std::sin(blade_angle(k));
                    const double lo = std::min(0.16 * s, 0.9 * s), hi = std::max(0.16 * s, 0.9 * s);
                    if (v > lo - 0.03 && v < hi + 0.03 && u > 0.02 && u < 0.07) c = blade;
                }
            }
            const std::size_t px = y * w + x;
            img[0 * h * w + px] = static_cast<float>(std::clamp(c.r + noise(rng), 0.0, 255.0));
            img[1 * h * w + px] = static_cast<float>(std::clamp(c.g + noise(rng), 0.0, 255.0));
            img[2 * h * w + px] = static_cast<float>(std::clamp(c.b + noise(rng), 0.0, 255.0));
        }
    }
    return Tensor({3, h, w}, std::move(img));
}

}  // namespace detail

/// Applies the field-capture perturbation (gain plus additive noise) in place.
inline void perturb_field(RawSample& sample, std::uint64_t stream, const GeneratorConfig& cfg) {
    std::mt19937_64 rng(stream);
    std::normal_distribution<double> gain_dist(1.0, cfg.field_gain_sigma);
    const double gain = gain_dist(rng);
    if (sample.is_image()) {
        std::normal_distribution<double> noise(0.0, cfg.field_image_noise_sigma);
        auto data = sample.image.mutable_data();
        for (auto& v : data) v = static_cast<float>(std::clamp(v * gain + noise(rng), 0.0, 255.0));
    } else {
        std::normal_distribution<double> noise(0.0, cfg.field_audio_noise_sigma);
        for (auto& v : sample.waveform) v = static_cast<float>(v * gain + noise(rng));
    }
    sample.provenance = Provenance::Field;
}

/// Deterministic in all arguments. A Field sample is the Virtual sample for
/// the same arguments with the field perturbation applied.
inline RawSample generate_sample(const CollectionState& state, Condition condition, Provenance provenance,
                                 std::uint64_t seed, const GeneratorConfig& cfg = {}) {
    RawSample s;
    s.state = state;
    s.condition = condition;
    s.provenance = Provenance::Virtual;
    s.seed = seed;
    if (state.modality == Modality::Image) {
        s.image = detail::render_image(state, condition, seed, cfg);
    } else {
        s.sample_rate = cfg.sample_rate;
        s.waveform = detail::render_audio(state, condition, seed, cfg);
    }
    if (provenance == Provenance::Field) {
        perturb_field(s, detail::mix_seed({seed, state.index(), static_cast<std::uint64_t>(condition), 0xF1E1DULL}), cfg);
    }
    return s;
}

// Samples grouped by (state, condition, shot); every included state holds the
// same number of shots per condition.
struct LabeledDataset {
    std::vector<CollectionState> states;
    std::size_t shots = 0;
    std::vector<RawSample> samples;

    std::size_t n() const { return states.size(); }
    const RawSample& at(std::size_t state_pos, Condition c, std::size_t shot) const {
        return samples.at((state_pos * kConditionCount + static_cast<std::size_t>(c)) * shots + shot);
    }
};

/// Shot k of each (state, condition) uses generator seed `seed + k`.
inline LabeledDataset build_dataset(const std::vector<CollectionState>& states, Provenance provenance,
                                    std::size_t shots_per_condition, std::uint64_t seed,
                                    const GeneratorConfig& cfg = {}) {
    if (states.empty()) throw std::invalid_argument("build_dataset: state list is empty");
    if (shots_per_condition == 0) throw std::invalid_argument("build_dataset: shots_per_condition must be >= 1");
    LabeledDataset ds;
    ds.states = states;
    ds.shots = shots_per_condition;
    for (const auto& st : states) {
        for (auto c : kAllConditions) {
            for (std::size_t k = 0; k < shots_per_condition; ++k) {
                ds.samples.push_back(generate_sample(st, c, provenance, seed + k, cfg));
            }
        }
    }
    return ds;
}

}  // namespace hdl
