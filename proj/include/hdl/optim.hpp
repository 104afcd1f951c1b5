#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "hdl/tensor.hpp"

namespace hdl {

struct AdamConfig {
    double learning_rate = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct RmsPropConfig {
    double learning_rate = 1e-3;
    double decay = 0.99;
    double eps = 1e-8;
};

namespace detail {

template <typename T>
void check_moments(const std::vector<BasicTensor<T>>& params, std::vector<std::vector<double>>& buffers) {
    if (buffers.empty()) {
        for (const auto& p : params) buffers.emplace_back(p.numel(), 0.0);
    }
    if (buffers.size() != params.size()) throw ShapeError("optimizer bound to a different parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (buffers[i].size() != params[i].numel()) {
            throw ShapeError("optimizer moment buffer " + std::to_string(i) + " does not match parameter " +
                             to_string(params[i].shape()));
        }
        if (!params[i].has_grad()) {
            throw std::logic_error("parameter " + std::to_string(i) + " " + to_string(params[i].shape()) +
                                   " has no gradient buffer");
        }
    }
}

}  // namespace detail

// Bias-corrected Adam. step_count increases by one per step().
template <typename T>
class Adam {
public:
    explicit Adam(std::vector<BasicTensor<T>> params, AdamConfig config = {})
        : params_(std::move(params)), config_(config) {}

    void step() {
        detail::check_moments(params_, m_);
        detail::check_moments(params_, v_);
        ++step_count_;
        const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_count_));
        const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_count_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto data = params_[i].mutable_data();
            auto grad = params_[i].grad();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t k = 0; k < data.size(); ++k) {
                const double g = grad[k];
                m[k] = config_.beta1 * m[k] + (1 - config_.beta1) * g;
                v[k] = config_.beta2 * v[k] + (1 - config_.beta2) * g * g;
                const double mhat = m[k] / c1, vhat = v[k] / c2;
                data[k] = static_cast<T>(data[k] - config_.learning_rate * mhat / (std::sqrt(vhat) + config_.eps));
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    std::uint64_t step_count() const { return step_count_; }
    const AdamConfig& config() const { return config_; }

private:
    std::vector<BasicTensor<T>> params_;
    AdamConfig config_;
    std::vector<std::vector<double>> m_, v_;
    std::uint64_t step_count_ = 0;
};

// RMSProp: v = decay*v + (1-decay)*g^2; p -= lr * g / (sqrt(v) + eps).
template <typename T>
class RmsProp {
public:
    explicit RmsProp(std::vector<BasicTensor<T>> params, RmsPropConfig config = {})
        : params_(std::move(params)), config_(config) {}

    void step() {
        detail::check_moments(params_, sq_);
        ++step_count_;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto data = params_[i].mutable_data();
            auto grad = params_[i].grad();
            auto& sq = sq_[i];
            for (std::size_t k = 0; k < data.size(); ++k) {
                const double g = grad[k];
                sq[k] = config_.decay * sq[k] + (1 - config_.decay) * g * g;
                data[k] = static_cast<T>(data[k] - config_.learning_rate * g / (std::sqrt(sq[k]) + config_.eps));
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    std::uint64_t step_count() const { return step_count_; }

private:
    std::vector<BasicTensor<T>> params_;
    RmsPropConfig config_;
    std::vector<std::vector<double>> sq_;
    std::uint64_t step_count_ = 0;
};

}  // namespace hdl
