#pragma once

// Per-state evaluation grid: cross-condition similarity next to the accuracy
// of a classifier trained on that state alone.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "hdl/protonet.hpp"
#include "hdl/similarity.hpp"

namespace hdl {

/// Ranks starting at 1; tied values share their mean rank.
inline std::vector<double> average_ranks(std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

/// Pearson correlation of average ranks. NaN when either side is constant.
inline double spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman needs two equal-length series");
    const auto rx = average_ranks(x), ry = average_ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0 || syy == 0) return std::nan("");
    return sxy / std::sqrt(sxx * syy);
}

inline nlohmann::json metrics_json(const ConfusionMatrix& cm) {
    const auto pr = precision_recall(cm);
    nlohmann::json per_class = nlohmann::json::object();
    for (auto c : kAllConditions) {
        const auto& k = pr.per_class.at(static_cast<std::size_t>(c));
        per_class[std::string(condition_name(c))] = {{"precision", k.precision}, {"recall", k.recall}};
    }
    nlohmann::json confusion = nlohmann::json::array();
    for (std::size_t t = 0; t < cm.m; ++t) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t p = 0; p < cm.m; ++p) row.push_back(cm(t, p));
        confusion.push_back(row);
    }
    return {{"precision", pr.macro_precision}, {"recall", pr.macro_recall}, {"per_class", per_class},
            {"confusion", confusion}};
}

struct GridRow {
    CollectionState state;
    double mean_similarity = 0;
    ConfusionMatrix confusion;
    PrecisionRecall metrics;
};

struct GridConfig {
    ProtoNetConfig protonet{};
    std::size_t queries_per_class = 10;
    std::uint64_t query_seed_offset = 1000;
};

/// Trains one classifier per state of `virtual_data` and scores it on fresh
/// Field captures (seeds seed + offset, seed + offset + 1, ...).
inline std::vector<GridRow> evaluate_grid(const LabeledDataset& virtual_data, std::uint64_t seed, const GridConfig& cfg = {},
                                          const std::function<void(const GridRow&)>& on_row = {}) {
    const auto pre = preprocess_dataset(virtual_data, cfg.protonet.mel);
    const auto mats = cross_condition_matrices(pre);
    std::vector<GridRow> rows;
    for (std::size_t z = 0; z < virtual_data.n(); ++z) {
        LabeledDataset one;
        one.states = {virtual_data.states[z]};
        one.shots = virtual_data.shots;
        for (auto c : kAllConditions)
            for (std::size_t k = 0; k < virtual_data.shots; ++k) one.samples.push_back(virtual_data.at(z, c, k));
        auto model = train_protonet(FewShotSet::from_dataset(one), seed, cfg.protonet);
        const auto queries = field_queries(one.states, cfg.queries_per_class, seed + cfg.query_seed_offset,
                                           cfg.protonet.generator, cfg.protonet.mel);
        GridRow row{one.states[0], mats[z].mean_off_diagonal(), evaluate(model, queries), {}};
        row.metrics = precision_recall(row.confusion);
        if (on_row) on_row(row);
        rows.push_back(std::move(row));
    }
    return rows;
}

inline double grid_spearman(std::span<const GridRow> rows) {
    std::vector<double> sim, recall;
    for (const auto& r : rows) {
        sim.push_back(r.mean_similarity);
        recall.push_back(r.metrics.macro_recall);
    }
    return spearman(sim, recall);
}

inline nlohmann::json grid_json(std::span<const GridRow> rows) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows) {
        auto j = metrics_json(r.confusion);
        j["state"] = r.state.id();
        j["mean_ssim"] = r.mean_similarity;
        out.push_back(std::move(j));
    }
    const double rho = rows.size() >= 2 ? grid_spearman(rows) : std::nan("");
    return {{"rows", out}, {"spearman_ssim_recall", std::isnan(rho) ? nlohmann::json(nullptr) : nlohmann::json(rho)}};
}

}  // namespace hdl
