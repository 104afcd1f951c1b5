#pragma once

// Prototypical few-shot classifier: a convolutional embedding, per-class
// prototypes as support means, and log-softmax over negative squared
// distances to the prototypes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <vector>

#include "hdl/container.hpp"
#include "hdl/network.hpp"
#include "hdl/optim.hpp"
#include "hdl/preprocess.hpp"

namespace hdl {

inline constexpr std::size_t kEmbeddingDim = 128;

/// 4 x (conv3x3 -> batchnorm -> relu -> maxpool2x2), flatten, 4480 -> 256 -> 128.
/// `stacked_inputs` is the number of 3-channel inputs stacked per sample.
inline Network<float> make_embedding_network(std::size_t stacked_inputs, std::uint64_t seed,
                                             float head_init_scale = 1.0f) {
    if (stacked_inputs == 0) throw std::invalid_argument("embedding network needs at least one input");
    const std::size_t channels[] = {3 * stacked_inputs, 16, 32, 32, 64};
    std::vector<LayerSpec> specs;
    for (std::size_t b = 0; b < 4; ++b) {
        specs.push_back(LayerSpec::conv(channels[b], channels[b + 1], 3, 1, 1));
        specs.push_back(LayerSpec::batchnorm(channels[b + 1]));
        specs.push_back(LayerSpec::of(LayerKind::relu));
        specs.push_back(LayerSpec::of(LayerKind::maxpool2x2));
    }
    specs.push_back(LayerSpec::of(LayerKind::flatten));
    specs.push_back(LayerSpec::dense(64 * 7 * 10, 256));
    specs.push_back(LayerSpec::of(LayerKind::relu));
    specs.push_back(LayerSpec::dense(256, kEmbeddingDim));
    Network<float> net(std::move(specs), seed);
    if (head_init_scale != 1.0f) {
        for (auto& w : net.parameters().end()[-2].mutable_data()) w *= head_init_scale;
    }
    return net;
}

/// Concatenates same-condition samples along channels in the given order.
inline Tensor stack_multimodal(std::span<const Tensor> samples) {
    if (samples.empty()) throw std::invalid_argument("stack_multimodal: no samples");
    const auto& first = samples.front();
    if (first.rank() != 3) throw ShapeError("stack_multimodal expects C x H x W, got " + to_string(first.shape()));
    std::size_t channels = 0;
    for (const auto& s : samples) {
        if (s.rank() != 3 || s.dim(1) != first.dim(1) || s.dim(2) != first.dim(2)) {
            throw ShapeError("stack_multimodal spatial mismatch " + to_string(first.shape()) + " vs " +
                             to_string(s.shape()));
        }
        channels += s.dim(0);
    }
    std::vector<float> v;
    v.reserve(channels * first.dim(1) * first.dim(2));
    for (const auto& s : samples) v.insert(v.end(), s.data().begin(), s.data().end());
    return Tensor({channels, first.dim(1), first.dim(2)}, std::move(v));
}

inline Tensor stack_multimodal(std::span<const PreprocessedSample> samples) {
    std::vector<Tensor> tensors;
    for (const auto& s : samples) {
        if (s.condition && samples.front().condition && *s.condition != *samples.front().condition) {
            throw std::invalid_argument("stack_multimodal: samples come from different operating conditions");
        }
        tensors.push_back(s.tensor);
    }
    return stack_multimodal(std::span<const Tensor>(tensors));
}

/// Per-class mean of support embeddings [S, D] -> [classes, D].
inline Tensor prototypes(const Tensor& support, std::span<const std::size_t> labels, std::size_t classes) {
    if (support.rank() != 2 || support.dim(0) != labels.size()) {
        throw ShapeError("prototypes: need one label per support row, got " + to_string(support.shape()));
    }
    std::vector<float> counts(classes, 0.0f);
    for (auto l : labels) {
        if (l >= classes) throw std::out_of_range("prototypes: label out of range");
        counts[l] += 1.0f;
    }
    for (std::size_t c = 0; c < classes; ++c) {
        if (counts[c] == 0.0f) throw std::invalid_argument("prototypes: class " + std::to_string(c) + " has empty support");
    }
    std::vector<float> avg(classes * labels.size(), 0.0f);
    for (std::size_t i = 0; i < labels.size(); ++i) avg[labels[i] * labels.size() + i] = 1.0f / counts[labels[i]];
    return matmul(Tensor({classes, labels.size()}, std::move(avg)), support);
}

/// Log-probabilities [Q, classes] from negative squared distances.
inline Tensor classify(const Tensor& queries, const Tensor& protos) {
    if (protos.rank() != 2 || protos.dim(0) == 0) throw std::invalid_argument("classify: no prototypes");
    if (queries.rank() != 2 || queries.dim(1) != protos.dim(1)) {
        throw ShapeError("classify: query " + to_string(queries.shape()) + " vs prototypes " + to_string(protos.shape()));
    }
    return log_softmax(scale(squared_distances(queries, protos), -1.0f));
}

/// Row-wise argmax; ties go to the lowest index.
inline std::vector<std::size_t> argmax_rows(const Tensor& x) {
    std::vector<std::size_t> out;
    const std::size_t c = x.dim(1);
    for (std::size_t i = 0; i < x.dim(0); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j)
            if (x.data()[i * c + j] > x.data()[i * c + best]) best = j;
        out.push_back(best);
    }
    return out;
}

// Rows = true condition, columns = predicted.
struct ConfusionMatrix {
    std::size_t m = kConditionCount;
    std::vector<std::size_t> counts = std::vector<std::size_t>(kConditionCount * kConditionCount, 0);

    static ConfusionMatrix of_size(std::size_t m) { return {m, std::vector<std::size_t>(m * m, 0)}; }
    void add(std::size_t truth, std::size_t predicted) { counts.at(truth * m + predicted) += 1; }
    std::size_t operator()(std::size_t t, std::size_t p) const { return counts[t * m + p]; }
};

struct ClassMetrics {
    double precision = 0;
    double recall = 0;
};

struct PrecisionRecall {
    std::vector<ClassMetrics> per_class;
    double macro_precision = 0;
    double macro_recall = 0;
};

/// Precision is TP/(TP+FP) and recall TP/(TP+FN); a zero denominator gives 0.
/// A matrix without any query is rejected.
inline PrecisionRecall precision_recall(const ConfusionMatrix& cm) {
    if (cm.m == 0 || cm.counts.size() != cm.m * cm.m || std::all_of(cm.counts.begin(), cm.counts.end(), [](auto n) { return n == 0; })) {
        throw std::invalid_argument("precision_recall: empty confusion matrix");
    }
    PrecisionRecall out;
    for (std::size_t c = 0; c < cm.m; ++c) {
        std::size_t tp = cm(c, c), predicted = 0, actual = 0;
        for (std::size_t o = 0; o < cm.m; ++o) {
            predicted += cm(o, c);
            actual += cm(c, o);
        }
        ClassMetrics k;
        k.precision = predicted ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
        k.recall = actual ? static_cast<double>(tp) / static_cast<double>(actual) : 0.0;
        out.macro_precision += k.precision;
        out.macro_recall += k.recall;
        out.per_class.push_back(k);
    }
    out.macro_precision /= static_cast<double>(cm.m);
    out.macro_recall /= static_cast<double>(cm.m);
    return out;
}

// Raw support samples per condition, one entry per plan state in plan order.
// All shots of a condition stack state-by-state: shot k of every state forms
// one stacked sample.
struct FewShotSet {
    std::vector<CollectionState> plan;
    std::size_t shots = 1;
    // [condition][shot][plan position]
    std::vector<std::vector<std::vector<RawSample>>> raw;

    static FewShotSet from_dataset(const LabeledDataset& ds) {
        FewShotSet s;
        s.plan = ds.states;
        s.shots = ds.shots;
        s.raw.assign(kConditionCount, std::vector<std::vector<RawSample>>(ds.shots));
        for (std::size_t c = 0; c < kConditionCount; ++c)
            for (std::size_t k = 0; k < ds.shots; ++k)
                for (std::size_t z = 0; z < ds.n(); ++z) s.raw[c][k].push_back(ds.at(z, static_cast<Condition>(c), k));
        return s;
    }
};

struct ProtoNetConfig {
    std::size_t epochs = 100;
    std::size_t queries_per_class = 2;
    float head_init_scale = 0.1f;
    AdamConfig adam{};
    GeneratorConfig generator{};
    dsp::MelConfig mel{};
};

struct ProtoNetModel {
    Network<float> network;
    Tensor prototypes;  // [conditions, 128]
    std::vector<CollectionState> plan;

    std::size_t stacked_inputs() const { return plan.size(); }

    Tensor embed(std::span<const Tensor> stacked) {
        network.set_training(false);
        return network.forward(dsp::batch(stacked));
    }

    // Log-probabilities [N, conditions] for stacked inputs.
    Tensor log_probs(std::span<const Tensor> stacked) { return classify(embed(stacked), prototypes).detach(); }
};

struct ProtoNetTrace {
    std::vector<double> loss;
};

inline Tensor stack_raw(std::span<const RawSample> per_state, const dsp::MelConfig& mel) {
    std::vector<Tensor> parts;
    for (const auto& r : per_state) parts.push_back(preprocess_tensor(r, mel));
    return stack_multimodal(std::span<const Tensor>(parts));
}

/// Episodic training. Support = every Virtual shot; queries = support samples
/// re-perturbed with the field operator under fresh seeds.
inline ProtoNetModel train_protonet(const FewShotSet& data, std::uint64_t seed, const ProtoNetConfig& cfg = {},
                                    ProtoNetTrace* trace = nullptr) {
    const std::size_t m = data.raw.size();
    if (m < 2 || data.plan.empty() || data.shots == 0) throw std::invalid_argument("train_protonet: need >= 2 classes and a non-empty plan");
    for (const auto& cls : data.raw) {
        if (cls.size() != data.shots) throw std::invalid_argument("train_protonet: insufficient samples to form an episode");
        for (const auto& shot : cls)
            if (shot.size() != data.plan.size()) throw std::invalid_argument("train_protonet: insufficient samples to form an episode");
    }
    if (cfg.queries_per_class == 0) throw std::invalid_argument("train_protonet: need at least one query per class");

    ProtoNetModel model{make_embedding_network(data.plan.size(), seed, cfg.head_init_scale), Tensor(), data.plan};
    Adam<float> opt(model.network.parameters(), cfg.adam);
    std::mt19937_64 rng(detail::mix_seed({seed, 0x9407ULL}));

    std::vector<Tensor> support;
    std::vector<std::size_t> support_labels;
    for (std::size_t c = 0; c < m; ++c)
        for (std::size_t k = 0; k < data.shots; ++k) {
            support.push_back(stack_raw(data.raw[c][k], cfg.mel));
            support_labels.push_back(c);
        }

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<Tensor> batch_items = support;
        std::vector<std::size_t> query_labels;
        for (std::size_t c = 0; c < m; ++c) {
            for (std::size_t q = 0; q < cfg.queries_per_class; ++q) {
                const auto& base = data.raw[c][rng() % data.shots];
                std::vector<RawSample> perturbed = base;
                for (auto& r : perturbed) perturb_field(r, rng(), cfg.generator);
                batch_items.push_back(stack_raw(perturbed, cfg.mel));
                query_labels.push_back(c);
            }
        }
        model.network.set_training(true);
        opt.zero_grad();
        Tensor emb = model.network.forward(dsp::batch(batch_items));
        Tensor protos = prototypes(slice_rows(emb, 0, support.size()), support_labels, m);
        Tensor logp = classify(slice_rows(emb, support.size(), query_labels.size()), protos);
        Tensor loss = nll_loss(logp, query_labels);
        if (!std::isfinite(loss.item())) throw std::runtime_error("train_protonet: non-finite loss at epoch " + std::to_string(epoch));
        loss.backward();
        opt.step();
        if (trace) trace->loss.push_back(loss.item());
    }

    model.network.set_training(false);
    model.prototypes = prototypes(model.network.forward(dsp::batch(support)), support_labels, m).detach();
    return model;
}

/// Confusion matrix of Field queries: queries[c] holds stacked inputs of condition c.
inline ConfusionMatrix evaluate(ProtoNetModel& model, const std::vector<std::vector<Tensor>>& queries) {
    auto cm = ConfusionMatrix::of_size(model.prototypes.dim(0));
    for (std::size_t c = 0; c < queries.size(); ++c) {
        if (queries[c].empty()) continue;
        const auto pred = argmax_rows(model.log_probs(queries[c]));
        for (auto p : pred) cm.add(c, p);
    }
    return cm;
}

/// Stacked Field queries for a plan: `per_class` captures per condition, seeds
/// first_seed, first_seed + 1, ...
inline std::vector<std::vector<Tensor>> field_queries(const std::vector<CollectionState>& plan, std::size_t per_class,
                                                      std::uint64_t first_seed, const GeneratorConfig& gen = {},
                                                      const dsp::MelConfig& mel = {}) {
    std::vector<std::vector<Tensor>> out(kConditionCount);
    for (auto c : kAllConditions) {
        for (std::size_t k = 0; k < per_class; ++k) {
            std::vector<Tensor> parts;
            for (const auto& st : plan) parts.push_back(preprocess_tensor(generate_sample(st, c, Provenance::Field, first_seed + k, gen), mel));
            out[static_cast<std::size_t>(c)].push_back(stack_multimodal(std::span<const Tensor>(parts)));
        }
    }
    return out;
}

inline std::string encode_model(const ProtoNetModel& model) {
    std::vector<NamedArray> entries;
    for (const auto& [name, t] : model.network.named_tensors()) {
        entries.push_back({name, t.shape(), {t.data().begin(), t.data().end()}});
    }
    entries.push_back({"prototypes", model.prototypes.shape(), {model.prototypes.data().begin(), model.prototypes.data().end()}});
    return encode_container(kWeightsMagic, entries);
}

inline ProtoNetModel decode_model(std::string_view bytes, std::vector<CollectionState> plan) {
    const auto values = to_map(decode_container(kWeightsMagic, bytes));
    auto it = values.find("layer0.weight");
    if (it == values.end() || it->second.first.size() != 4 || it->second.first[1] % 3 != 0) {
        throw FormatError("weights do not describe an embedding network");
    }
    const std::size_t stacked = it->second.first[1] / 3;
    if (stacked != plan.size()) {
        throw FormatError("weights expect " + std::to_string(stacked) + " stacked inputs, plan has " + std::to_string(plan.size()));
    }
    ProtoNetModel model{make_embedding_network(stacked, 0), Tensor(), std::move(plan)};
    model.network.load_named(values);
    auto p = values.find("prototypes");
    if (p == values.end()) throw FormatError("weights missing entry 'prototypes'");
    model.prototypes = Tensor(p->second.first, p->second.second);
    model.network.set_training(false);
    return model;
}

}  // namespace hdl
