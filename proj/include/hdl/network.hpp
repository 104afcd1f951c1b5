#pragma once

// Sequential networks assembled from LayerSpecs.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "hdl/ops.hpp"

namespace hdl {

enum class LayerKind { conv2d, batchnorm2d, relu, maxpool2x2, flatten, linear, softmax, logsoftmax };

inline const char* layer_kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::batchnorm2d: return "batchnorm2d";
        case LayerKind::relu: return "relu";
        case LayerKind::maxpool2x2: return "maxpool2x2";
        case LayerKind::flatten: return "flatten";
        case LayerKind::linear: return "linear";
        case LayerKind::softmax: return "softmax";
        case LayerKind::logsoftmax: return "logsoftmax";
    }
    return "unknown";
}

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t in_features = 0;
    std::size_t out_features = 0;
    double eps = 1e-5;
    double momentum = 0.1;

    static LayerSpec conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding) {
        LayerSpec s;
        s.kind = LayerKind::conv2d;
        s.in_channels = in;
        s.out_channels = out;
        s.kernel = kernel;
        s.stride = stride;
        s.padding = padding;
        return s;
    }
    static LayerSpec batchnorm(std::size_t channels, double eps = 1e-5, double momentum = 0.1) {
        LayerSpec s;
        s.kind = LayerKind::batchnorm2d;
        s.in_channels = s.out_channels = channels;
        s.eps = eps;
        s.momentum = momentum;
        return s;
    }
    static LayerSpec dense(std::size_t in, std::size_t out) {
        LayerSpec s;
        s.kind = LayerKind::linear;
        s.in_features = in;
        s.out_features = out;
        return s;
    }
    static LayerSpec of(LayerKind kind) {
        LayerSpec s;
        s.kind = kind;
        return s;
    }

    // Output shape for a given input shape; throws ShapeError on mismatch.
    Shape output_shape(const Shape& in) const {
        auto fail = [&](const std::string& want) {
            throw ShapeError(std::string(layer_kind_name(kind)) + " expects " + want + ", got " + to_string(in));
        };
        switch (kind) {
            case LayerKind::conv2d: {
                if (in.size() != 4 || in[1] != in_channels) fail("[N, " + std::to_string(in_channels) + ", H, W]");
                if (in[2] + 2 * padding < kernel || in[3] + 2 * padding < kernel) fail("spatial size >= kernel");
                return {in[0], out_channels, (in[2] + 2 * padding - kernel) / stride + 1,
                        (in[3] + 2 * padding - kernel) / stride + 1};
            }
            case LayerKind::batchnorm2d:
                if (in.size() != 4 || in[1] != in_channels) fail("[N, " + std::to_string(in_channels) + ", H, W]");
                return in;
            case LayerKind::maxpool2x2:
                if (in.size() != 4 || in[2] < 2 || in[3] < 2) fail("[N, C, H>=2, W>=2]");
                return {in[0], in[1], in[2] / 2, in[3] / 2};
            case LayerKind::flatten:
                if (in.size() < 2) fail("a batch axis");
                return {in[0], numel_of(in) / in[0]};
            case LayerKind::linear:
                if (in.size() != 2 || in[1] != in_features) fail("[N, " + std::to_string(in_features) + "]");
                return {in[0], out_features};
            case LayerKind::softmax:
            case LayerKind::logsoftmax:
                if (in.size() != 2) fail("[N, C]");
                return in;
            case LayerKind::relu:
                return in;
        }
        return in;
    }
};

template <typename T>
struct Layer {
    LayerSpec spec;
    BasicTensor<T> weight;
    BasicTensor<T> bias;
    std::vector<T> running_mean;
    std::vector<T> running_var;

    bool has_params() const {
        return spec.kind == LayerKind::conv2d || spec.kind == LayerKind::linear || spec.kind == LayerKind::batchnorm2d;
    }
};

template <typename T>
class Network {
public:
    Network() = default;

    Network(std::vector<LayerSpec> specs, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        for (auto& spec : specs) layers_.push_back(make_layer(spec, rng));
    }

    void set_training(bool on) { training_ = on; }
    bool training() const { return training_; }

    const std::vector<Layer<T>>& layers() const { return layers_; }

    Shape output_shape(Shape in) const {
        for (const auto& l : layers_) in = l.spec.output_shape(in);
        return in;
    }

    // Shape errors name the offending layer and both shapes.
    BasicTensor<T> forward(const BasicTensor<T>& input) {
        BasicTensor<T> x = input;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            auto& l = layers_[i];
            try {
                l.spec.output_shape(x.shape());
            } catch (const ShapeError& e) {
                throw ShapeError("layer " + std::to_string(i) + " (" + layer_kind_name(l.spec.kind) + "): " + e.what());
            }
            x = apply(l, x);
        }
        return x;
    }

    std::vector<BasicTensor<T>> parameters() const {
        std::vector<BasicTensor<T>> out;
        for (const auto& l : layers_) {
            if (!l.has_params()) continue;
            out.push_back(l.weight);
            out.push_back(l.bias);
        }
        return out;
    }

    void zero_grad() {
        for (auto& p : parameters()) p.zero_grad();
    }

    // Every persistent value keyed by a stable name, for serialization.
    std::vector<std::pair<std::string, BasicTensor<T>>> named_tensors() const {
        std::vector<std::pair<std::string, BasicTensor<T>>> out;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const auto& l = layers_[i];
            if (!l.has_params()) continue;
            const std::string p = "layer" + std::to_string(i) + ".";
            out.emplace_back(p + "weight", l.weight);
            out.emplace_back(p + "bias", l.bias);
            if (l.spec.kind == LayerKind::batchnorm2d) {
                out.emplace_back(p + "running_mean", BasicTensor<T>({l.running_mean.size()}, l.running_mean));
                out.emplace_back(p + "running_var", BasicTensor<T>({l.running_var.size()}, l.running_var));
            }
        }
        return out;
    }

    // Loads values produced by named_tensors(); every entry must be present.
    void load_named(const std::map<std::string, std::pair<Shape, std::vector<T>>>& values) {
        auto fetch = [&](const std::string& name, const Shape& want) -> const std::vector<T>& {
            auto it = values.find(name);
            if (it == values.end()) throw std::runtime_error("weights missing entry '" + name + "'");
            if (it->second.first != want) {
                throw ShapeError("weights entry '" + name + "' has shape " + to_string(it->second.first) +
                                 ", network expects " + to_string(want));
            }
            return it->second.second;
        };
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            auto& l = layers_[i];
            if (!l.has_params()) continue;
            const std::string p = "layer" + std::to_string(i) + ".";
            const auto& w = fetch(p + "weight", l.weight.shape());
            std::copy(w.begin(), w.end(), l.weight.mutable_data().begin());
            const auto& b = fetch(p + "bias", l.bias.shape());
            std::copy(b.begin(), b.end(), l.bias.mutable_data().begin());
            if (l.spec.kind == LayerKind::batchnorm2d) {
                l.running_mean = fetch(p + "running_mean", {l.running_mean.size()});
                l.running_var = fetch(p + "running_var", {l.running_var.size()});
            }
        }
    }

    // Deep copy: parameters are not shared with the source.
    Network clone() const {
        Network out;
        out.training_ = training_;
        for (const auto& l : layers_) {
            Layer<T> c = l;
            if (l.has_params()) {
                c.weight = BasicTensor<T>(l.weight.shape(), {l.weight.data().begin(), l.weight.data().end()}, true);
                c.bias = BasicTensor<T>(l.bias.shape(), {l.bias.data().begin(), l.bias.data().end()}, true);
            }
            out.layers_.push_back(std::move(c));
        }
        return out;
    }

    void copy_from(const Network& other) {
        if (other.layers_.size() != layers_.size()) throw ShapeError("copy_from between different architectures");
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            auto& dst = layers_[i];
            const auto& src = other.layers_[i];
            if (!dst.has_params()) continue;
            std::copy(src.weight.data().begin(), src.weight.data().end(), dst.weight.mutable_data().begin());
            std::copy(src.bias.data().begin(), src.bias.data().end(), dst.bias.mutable_data().begin());
            dst.running_mean = src.running_mean;
            dst.running_var = src.running_var;
        }
    }

private:
    static Layer<T> make_layer(const LayerSpec& spec, std::mt19937_64& rng) {
        Layer<T> l;
        l.spec = spec;
        auto uniform = [&](Shape shape, std::size_t fan_in) {
            const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
            std::uniform_real_distribution<double> dist(-bound, bound);
            std::vector<T> v(numel_of(shape));
            for (auto& x : v) x = static_cast<T>(dist(rng));
            return BasicTensor<T>(std::move(shape), std::move(v), true);
        };
        switch (spec.kind) {
            case LayerKind::conv2d: {
                const std::size_t fan_in = spec.in_channels * spec.kernel * spec.kernel;
                l.weight = uniform({spec.out_channels, spec.in_channels, spec.kernel, spec.kernel}, fan_in);
                l.bias = uniform({spec.out_channels}, fan_in);
                break;
            }
            case LayerKind::linear:
                l.weight = uniform({spec.out_features, spec.in_features}, spec.in_features);
                l.bias = uniform({spec.out_features}, spec.in_features);
                break;
            case LayerKind::batchnorm2d:
                l.weight = BasicTensor<T>::full({spec.in_channels}, T{1}, true);
                l.bias = BasicTensor<T>::zeros({spec.in_channels}, true);
                l.running_mean.assign(spec.in_channels, T{0});
                l.running_var.assign(spec.in_channels, T{1});
                break;
            default:
                break;
        }
        return l;
    }

    BasicTensor<T> apply(Layer<T>& l, const BasicTensor<T>& x) {
        switch (l.spec.kind) {
            case LayerKind::conv2d: return conv2d(x, l.weight, l.bias, l.spec.stride, l.spec.padding);
            case LayerKind::batchnorm2d:
                return batchnorm2d(x, l.weight, l.bias, std::span<T>(l.running_mean), std::span<T>(l.running_var),
                                   training_, l.spec.momentum, l.spec.eps);
            case LayerKind::relu: return relu(x);
            case LayerKind::maxpool2x2: return maxpool2x2(x);
            case LayerKind::flatten: return flatten(x);
            case LayerKind::linear: return linear(x, l.weight, l.bias);
            case LayerKind::softmax: return softmax(x);
            case LayerKind::logsoftmax: return log_softmax(x);
        }
        return x;
    }

    std::vector<Layer<T>> layers_;
    bool training_ = true;
};

}  // namespace hdl
