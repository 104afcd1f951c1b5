#pragma once

// Raw samples -> 3 x 120 x 160 tensors in [0, 1].

#include <vector>

#include "hdl/dsp.hpp"
#include "hdl/envsim.hpp"

namespace hdl {

struct PreprocessedSample {
    Tensor tensor;
    CollectionState state;
    std::optional<Condition> condition;
};

inline Tensor preprocess_tensor(const RawSample& raw, const dsp::MelConfig& mel = {}) {
    if (raw.is_image()) return dsp::resize_normalize(raw.image);
    return dsp::resize_normalize(dsp::mel_spectrogram(raw.waveform, raw.sample_rate, mel));
}

inline PreprocessedSample preprocess(const RawSample& raw, const dsp::MelConfig& mel = {}) {
    return {preprocess_tensor(raw, mel), raw.state, raw.condition};
}

// Same indexing as LabeledDataset: (state, condition, shot).
struct PreprocessedDataset {
    std::vector<CollectionState> states;
    std::size_t shots = 0;
    std::vector<Tensor> tensors;

    std::size_t n() const { return states.size(); }
    const Tensor& at(std::size_t state_pos, std::size_t condition, std::size_t shot) const {
        return tensors.at((state_pos * kConditionCount + condition) * shots + shot);
    }
};

inline PreprocessedDataset preprocess_dataset(const LabeledDataset& ds, const dsp::MelConfig& mel = {}) {
    PreprocessedDataset out;
    out.states = ds.states;
    out.shots = ds.shots;
    out.tensors.reserve(ds.samples.size());
    for (const auto& s : ds.samples) out.tensors.push_back(preprocess_tensor(s, mel));
    return out;
}

}  // namespace hdl
