#pragma once

// Structural similarity between preprocessed samples, per-state cross-condition
// similarity matrices, and the collection reward built from them.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <tuple>
#include <utility>
#include <vector>

#include "hdl/preprocess.hpp"

namespace hdl {

struct SsimOptions {
    std::size_t window = 7;
    double dynamic_range = 1.0;
};

namespace detail {

// Summed-area table with one row/column of zero padding.
inline std::vector<double> integral(const float* a, const float* b, std::size_t h, std::size_t w, int mode) {
    std::vector<double> s((h + 1) * (w + 1), 0.0);
    for (std::size_t y = 0; y < h; ++y) {
        double row = 0;
        for (std::size_t x = 0; x < w; ++x) {
            const double va = a[y * w + x];
            const double vb = b ? b[y * w + x] : 0.0;
            double v = 0;
            switch (mode) {
                case 0: v = va; break;
                case 1: v = va * va; break;
                case 2: v = va * vb; break;
            }
            row += v;
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    return s;
}

inline double box(const std::vector<double>& s, std::size_t w, std::size_t y, std::size_t x, std::size_t k) {
    const std::size_t W = w + 1;
    return s[(y + k) * W + x + k] - s[y * W + x + k] - s[(y + k) * W + x] + s[y * W + x];
}

}  // namespace detail

/// Mean SSIM over all valid k x k uniform windows (stride 1), computed per
/// channel and averaged. Population moments within each window.
inline double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opt = {}) {
    if (a.shape() != b.shape()) {
        throw ShapeError("ssim shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    if (a.rank() != 3) throw ShapeError("ssim expects C x H x W, got " + to_string(a.shape()));
    const std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2), k = opt.window;
    if (h < k || w < k) throw ShapeError("ssim input smaller than the window: " + to_string(a.shape()));
    const double c1 = (0.01 * opt.dynamic_range) * (0.01 * opt.dynamic_range);
    const double c2 = (0.03 * opt.dynamic_range) * (0.03 * opt.dynamic_range);
    const double area = static_cast<double>(k * k);

    double total = 0;
    for (std::size_t ch = 0; ch < c; ++ch) {
        const float* pa = a.data().data() + ch * h * w;
        const float* pb = b.data().data() + ch * h * w;
        const auto sa = detail::integral(pa, nullptr, h, w, 0);
        const auto sb = detail::integral(pb, nullptr, h, w, 0);
        const auto saa = detail::integral(pa, nullptr, h, w, 1);
        const auto sbb = detail::integral(pb, nullptr, h, w, 1);
        const auto sab = detail::integral(pa, pb, h, w, 2);
        double acc = 0;
        for (std::size_t y = 0; y + k <= h; ++y) {
            for (std::size_t x = 0; x + k <= w; ++x) {
                double ma = detail::box(sa, w, y, x, k), qa = detail::box(saa, w, y, x, k);
                double mb = detail::box(sb, w, y, x, k), qb = detail::box(sbb, w, y, x, k);
                // Fused multiply-add contraction is not symmetric in its
                // operands, so the window statistics enter in a canonical
                // order and swapping the images reproduces the result bit for bit.
                if (std::tie(mb, qb) < std::tie(ma, qa)) {
                    std::swap(ma, mb);
                    std::swap(qa, qb);
                }
                const double mx = ma / area, my = mb / area;
                const double vx = qa / area - mx * mx;
                const double vy = qb / area - my * my;
                const double cxy = detail::box(sab, w, y, x, k) / area - mx * my;
                acc += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        total += acc / static_cast<double>((h - k + 1) * (w - k + 1));
    }
    return total / static_cast<double>(c);
}

// m x m, symmetric, unit diagonal.
struct SimilarityMatrix {
    std::size_t m = 0;
    std::vector<double> values;

    double operator()(std::size_t i, std::size_t j) const { return values[i * m + j]; }

    double mean_off_diagonal() const {
        double s = 0;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < m; ++j)
                if (i != j) s += (*this)(i, j);
        return s / static_cast<double>(m * (m - 1));
    }
};

/// One matrix per state. With several shots, entry (i, j) averages SSIM over
/// all shot pairs.
inline std::vector<SimilarityMatrix> cross_condition_matrices(const PreprocessedDataset& ds,
                                                              const SsimOptions& opt = {}) {
    const std::size_t m = kConditionCount;
    if (ds.shots == 0 || ds.tensors.size() != ds.n() * m * ds.shots) {
        throw std::invalid_argument("cross_condition_matrices needs every condition at every state");
    }
    std::vector<SimilarityMatrix> out;
    for (std::size_t z = 0; z < ds.n(); ++z) {
        SimilarityMatrix mat{m, std::vector<double>(m * m, 1.0)};
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = i + 1; j < m; ++j) {
                double s = 0;
                for (std::size_t a = 0; a < ds.shots; ++a)
                    for (std::size_t b = 0; b < ds.shots; ++b) s += ssim(ds.at(z, i, a), ds.at(z, j, b), opt);
                s /= static_cast<double>(ds.shots * ds.shots);
                mat.values[i * m + j] = mat.values[j * m + i] = s;
            }
        }
        out.push_back(std::move(mat));
    }
    return out;
}

/// Mean over conditions and shots of SSIM between a Virtual sample and the
/// Field capture drawn with the same seed (shot k uses seed + k).
inline double virtual_field_similarity(const CollectionState& state, std::uint64_t seed, std::size_t shots = 1,
                                       const GeneratorConfig& gen = {}, const dsp::MelConfig& mel = {},
                                       const SsimOptions& opt = {}) {
    if (shots == 0) throw std::invalid_argument("virtual_field_similarity needs at least one shot");
    double s = 0;
    for (auto c : kAllConditions) {
        for (std::size_t k = 0; k < shots; ++k) {
            const auto v = preprocess_tensor(generate_sample(state, c, Provenance::Virtual, seed + k, gen), mel);
            const auto f = preprocess_tensor(generate_sample(state, c, Provenance::Field, seed + k, gen), mel);
            s += ssim(v, f, opt);
        }
    }
    return s / static_cast<double>(kConditionCount * shots);
}

struct RewardBreakdown {
    double r1 = 0;
    double r2 = 0;
    double n_penalty = 0;
    double total = 0;
};

/// r1 = -mean over states and ordered condition pairs i != j of SSIM;
/// r2 = -max over conditions i of the mean similarity of i to the others;
/// total = r1 + r2 - n/3. An empty state set scores zero.
inline RewardBreakdown reward(std::span<const SimilarityMatrix> per_state) {
    RewardBreakdown r;
    const std::size_t n = per_state.size();
    if (n == 0) return r;
    const std::size_t m = per_state.front().m;
    if (m < 2) throw std::invalid_argument("reward needs at least two operating conditions");

    double all = 0;
    for (std::size_t z = 0; z < n; ++z)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < m; ++j)
                if (i != j) all += per_state[z](i, j);
    r.r1 = -(all / static_cast<double>(n * m * (m - 1)));

    double worst = -1e300;
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0;
        for (std::size_t z = 0; z < n; ++z)
            for (std::size_t j = 0; j < m; ++j)
                if (i != j) s += per_state[z](i, j);
        worst = std::max(worst, s / static_cast<double>(n * (m - 1)));
    }
    r.r2 = -worst;
    r.n_penalty = static_cast<double>(n) / 3.0;
    r.total = r.r1 + r.r2 - r.n_penalty;
    return r;
}

inline RewardBreakdown reward(const PreprocessedDataset& ds, const SsimOptions& opt = {}) {
    const auto mats = cross_condition_matrices(ds, opt);
    return reward(mats);
}

}  // namespace hdl
