#pragma once

// On-disk dataset layout:
//   <dir>/index.json
//   <dir>/<virtual|field>/<state-id>/<condition>/<seed>.bin   (HDLT container)
// A sample file holds "waveform" [n] and "sample_rate" [1], or "image" [3, H, W].

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hdl/container.hpp"
#include "hdl/envsim.hpp"

namespace hdl {

inline std::string encode_sample(const RawSample& s) {
    std::vector<NamedArray> entries;
    if (s.is_image()) {
        entries.push_back({"image", s.image.shape(), {s.image.data().begin(), s.image.data().end()}});
    } else {
        entries.push_back({"waveform", {s.waveform.size()}, s.waveform});
        entries.push_back({"sample_rate", {1}, {static_cast<float>(s.sample_rate)}});
    }
    return encode_container(kTensorCacheMagic, entries);
}

inline RawSample decode_sample(std::string_view bytes, const CollectionState& state, Condition condition,
                               Provenance provenance, std::uint64_t seed) {
    const auto m = to_map(decode_container(kTensorCacheMagic, bytes));
    RawSample s;
    s.state = state;
    s.condition = condition;
    s.provenance = provenance;
    s.seed = seed;
    if (state.modality == Modality::Image) {
        auto it = m.find("image");
        if (it == m.end()) throw FormatError("sample for " + state.id() + " has no 'image' entry");
        s.image = Tensor(it->second.first, it->second.second);
    } else {
        auto w = m.find("waveform"), r = m.find("sample_rate");
        if (w == m.end() || r == m.end()) throw FormatError("sample for " + state.id() + " lacks waveform or sample_rate");
        s.waveform = w->second.second;
        s.sample_rate = r->second.second.at(0);
    }
    return s;
}

inline std::filesystem::path sample_path(const CollectionState& st, Condition c, Provenance p, std::uint64_t seed) {
    return std::filesystem::path(std::string(provenance_name(p))) / st.id() / std::string(condition_name(c)) /
           (std::to_string(seed) + ".bin");
}

/// Writes Virtual and Field datasets for every state; shot k uses seed + k.
/// Rewriting with the same arguments produces byte-identical files.
inline nlohmann::json write_datasets(const std::filesystem::path& dir, std::uint64_t seed, std::size_t shots,
                                     const GeneratorConfig& cfg = {}) {
    nlohmann::json index{{"seed", seed}, {"shots", shots}, {"virtual", nlohmann::json::object()},
                         {"field", nlohmann::json::object()}};
    for (auto prov : {Provenance::Virtual, Provenance::Field}) {
        auto& section = index[std::string(provenance_name(prov))];
        for (const auto& st : enumerate_states()) {
            nlohmann::json per_cond = nlohmann::json::object();
            for (auto c : kAllConditions) {
                nlohmann::json files = nlohmann::json::array();
                for (std::size_t k = 0; k < shots; ++k) {
                    const auto rel = sample_path(st, c, prov, seed + k);
                    const auto sample = generate_sample(st, c, prov, seed + k, cfg);
                    write_file_bytes(dir / rel, encode_sample(sample));
                    nlohmann::json entry{{"path", rel.generic_string()}, {"seed", seed + k}};
                    if (sample.is_image()) {
                        entry["shape"] = sample.image.shape();
                    } else {
                        entry["shape"] = {sample.waveform.size()};
                        entry["sample_rate"] = sample.sample_rate;
                    }
                    files.push_back(entry);
                }
                per_cond[std::string(condition_name(c))] = files;
            }
            section[st.id()] = per_cond;
        }
    }
    std::ofstream(dir / "index.json") << index.dump(2) << '\n';
    return index;
}

/// Loads one provenance for the given states, in that order.
inline LabeledDataset read_dataset(const std::filesystem::path& dir, Provenance prov,
                                   const std::vector<CollectionState>& states) {
    const auto index_path = dir / "index.json";
    std::ifstream in(index_path);
    if (!in) throw std::runtime_error("dataset index not found: " + index_path.string());
    const auto index = nlohmann::json::parse(in);
    const std::uint64_t seed = index.at("seed").get<std::uint64_t>();
    const std::size_t shots = index.at("shots").get<std::size_t>();
    if (states.empty()) throw std::invalid_argument("read_dataset: no states requested");
    LabeledDataset ds;
    ds.states = states;
    ds.shots = shots;
    const auto& section = index.at(std::string(provenance_name(prov)));
    for (const auto& st : states) {
        if (!section.contains(st.id())) throw std::runtime_error("dataset index lacks state " + st.id());
        for (auto c : kAllConditions) {
            const auto& files = section.at(st.id()).at(std::string(condition_name(c)));
            if (files.size() != shots) throw std::runtime_error("dataset index has wrong shot count for " + st.id());
            for (std::size_t k = 0; k < shots; ++k) {
                const auto& entry = files[k];
                const auto path = dir / entry.at("path").get<std::string>();
                ds.samples.push_back(decode_sample(read_file_bytes(path), st, c, prov, entry.value("seed", seed + k)));
            }
        }
    }
    return ds;
}

}  // namespace hdl
