#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "ssl2d/acoustics.hpp"
#include "ssl2d/dataset.hpp"
#include "ssl2d/geom.hpp"
#include "ssl2d/model.hpp"

// Keypoint extraction from heatmaps, thresholded optimal matching, and the
// precision / recall / F1 / RMSE metrics.

namespace ssl2d::eval {

struct Keypoint {
    geom::Vec2 position;  // cell center, meters
    double score = 0.0;
};

struct MatchReport {
    int tp = 0, fp = 0, fn = 0;
    std::vector<double> matched_distances;
};

struct Metrics {
    double precision = 0.0, recall = 0.0, f1 = 0.0;
    std::optional<double> rmse;  // absent when tp == 0
    long tp = 0, fp = 0, fn = 0;
    long n_samples = 0;
};

struct Protocol {
    double peak_thresh = 0.5;
    double nms_radius = 1.0;    // meters
    double resolution = 0.3;    // synthetic matching threshold (1.0 for real data)
    int batch_size = 64;
    bool macro_average = false;  // micro by default
};

/// Strict 8-neighborhood maxima >= peak_thresh, greedily kept in descending
/// score with suppression of later peaks within nms_radius.
inline std::vector<Keypoint> extract_keypoints(const acoustics::Heatmap& h, double peak_thresh,
                                               double nms_radius) {
    if (peak_thresh <= 0.0 || peak_thresh >= 1.0)
        throw std::invalid_argument("extract_keypoints: peak_thresh must be in (0,1)");
    const auto& g = h.grid;
    std::vector<Keypoint> peaks;
    for (int y = 0; y < g.height_cells; ++y)
        for (int x = 0; x < g.width_cells; ++x) {
            const double v = h.at(x, y);
            if (v < peak_thresh) continue;
            bool is_max = true;
            for (int dy = -1; dy <= 1 && is_max; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (dx == 0 && dy == 0) continue;
                    const int nx = x + dx, ny = y + dy;
                    if (nx < 0 || nx >= g.width_cells || ny < 0 || ny >= g.height_cells) continue;
                    if (h.at(nx, ny) >= v) {
                        is_max = false;
                        break;
                    }
                }
            if (is_max) peaks.push_back({geom::grid_to_world(g, x, y), v});
        }

    std::stable_sort(peaks.begin(), peaks.end(),
                     [](const Keypoint& a, const Keypoint& b) { return a.score > b.score; });
    std::vector<Keypoint> kept;
    for (const auto& p : peaks) {
        bool suppressed = false;
        for (const auto& k : kept)
            if (geom::dist(p.position, k.position) < nms_radius) {
                suppressed = true;
                break;
            }
        if (!suppressed) kept.push_back(p);
    }
    return kept;
}

namespace detail {

/// O(n^3) Hungarian assignment on a square cost matrix; returns for each
/// column the assigned row.
inline std::vector<int> hungarian(const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            int j1 = -1;
            double delta = inf;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> row_of_col(n);
    for (int j = 1; j <= n; ++j) row_of_col[j - 1] = p[j] - 1;
    return row_of_col;
}

}  // namespace detail

/// Maximum-cardinality, minimum-total-distance one-to-one matching among
/// pairs within `resolution`. Solved as a square assignment problem padded
/// with dummies: a dummy pairing costs resolution + 1, so every admissible
/// real match strictly lowers the total.
inline MatchReport match(const std::vector<Keypoint>& preds,
                         const std::vector<geom::Vec2>& truths, double resolution) {
    if (resolution <= 0.0) throw std::invalid_argument("match: resolution must be > 0");
    const int np = static_cast<int>(preds.size());
    const int nt = static_cast<int>(truths.size());
    MatchReport r;
    if (np == 0 || nt == 0) {
        r.fp = np;
        r.fn = nt;
        return r;
    }
    const int k = np + nt;
    const double dummy = resolution + 1.0;
    const double forbidden = 1e9;
    std::vector<std::vector<double>> cost(k, std::vector<double>(k, dummy));
    for (int i = 0; i < np; ++i)
        for (int j = 0; j < nt; ++j) {
            const double d = geom::dist(preds[i].position, truths[j]);
            cost[i][j] = d <= resolution ? d : forbidden;
        }
    const auto row_of_col = detail::hungarian(cost);
    for (int j = 0; j < nt; ++j) {
        const int i = row_of_col[j];
        if (i < 0 || i >= np) continue;
        const double d = geom::dist(preds[i].position, truths[j]);
        if (d <= resolution) {
            ++r.tp;
            r.matched_distances.push_back(d);
        }
    }
    r.fp = np - r.tp;
    r.fn = nt - r.tp;
    return r;
}

/// Degenerate conventions: empty scene with no predictions scores 1.0;
/// a side with zero hits against a non-empty other side scores 0.
inline Metrics metrics(const MatchReport& r) {
    Metrics m;
    m.tp = r.tp;
    m.fp = r.fp;
    m.fn = r.fn;
    if (r.tp + r.fp == 0)
        m.precision = 1.0;  // no predictions: vacuously precise
    else
        m.precision = static_cast<double>(r.tp) / (r.tp + r.fp);
    if (r.tp + r.fn == 0)
        m.recall = 1.0;
    else
        m.recall = static_cast<double>(r.tp) / (r.tp + r.fn);
    m.f1 = (m.precision + m.recall) > 0.0
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
    if (r.tp > 0) {
        double acc = 0.0;
        for (double d : r.matched_distances) acc += d * d;
        m.rmse = std::sqrt(acc / r.matched_distances.size());
    }
    return m;
}

// Ground-truth keypoints are recovered from the label heatmap (the dataset
// stores no continuous source positions). Label peaks are >= 0.85 by
// construction, so fixed extraction parameters are reliable.
inline std::vector<geom::Vec2> label_truths(const acoustics::Heatmap& label) {
    std::vector<geom::Vec2> out;
    for (const auto& k : extract_keypoints(label, 0.5, 1.0)) out.push_back(k.position);
    return out;
}

inline acoustics::Heatmap sample_label_heatmap(const acoustics::Dataset& d, int index) {
    const auto& s = d.samples[index];
    acoustics::Heatmap h{d.grid, std::vector<double>(s.label.begin(), s.label.end())};
    return h;
}

/// Assemble a forward batch from dataset rows (f32 payloads promoted to f64).
inline model::Batch make_batch(const acoustics::Dataset& d, const std::vector<int>& idx,
                               bool with_labels = true) {
    if (idx.empty()) throw std::invalid_argument("make_batch: empty index list");
    model::Batch b;
    b.n = static_cast<int>(idx.size());
    const auto& first = d.samples[idx[0]];
    const int n_arrays = static_cast<int>(first.features.size());
    b.features.resize(n_arrays);
    for (int a = 0; a < n_arrays; ++a) {
        const auto& f0 = first.features[a];
        b.features[a].resize(static_cast<std::size_t>(b.n) * f0.values.size());
        for (int i = 0; i < b.n; ++i) {
            const auto& f = d.samples[idx[i]].features[a];
            double* dst = b.features[a].data() + static_cast<std::size_t>(i) * f.values.size();
            for (std::size_t j = 0; j < f.values.size(); ++j) dst[j] = f.values[j];
        }
    }
    if (with_labels) {
        const std::size_t plane = first.label.size();
        b.labels.resize(static_cast<std::size_t>(b.n) * plane);
        for (int i = 0; i < b.n; ++i) {
            const auto& l = d.samples[idx[i]].label;
            double* dst = b.labels.data() + static_cast<std::size_t>(i) * plane;
            for (std::size_t j = 0; j < plane; ++j) dst[j] = l[j];
        }
    }
    for (int i = 0; i < b.n; ++i) {
        const auto& poses = d.samples[idx[i]].poses;
        b.rel_poses.push_back(poses.size() > 1 ? geom::relative_pose(poses[0], poses[1])
                                               : geom::Pose2D{});
    }
    return b;
}

/// Micro-aggregated metrics over a dataset (sum tp/fp/fn then compute);
/// macro_average instead averages per-sample F1/precision/recall.
inline Metrics evaluate_dataset(model::LocalizationModel& m, const acoustics::Dataset& d,
                                const Protocol& proto) {
    if (d.samples.empty()) throw std::invalid_argument("evaluate_dataset: empty dataset");
    MatchReport agg;
    double macro_p = 0.0, macro_r = 0.0, macro_f1 = 0.0;
    const int n = static_cast<int>(d.samples.size());
    const std::size_t plane =
        static_cast<std::size_t>(d.grid.width_cells) * d.grid.height_cells;

    for (int start = 0; start < n; start += proto.batch_size) {
        std::vector<int> idx;
        for (int i = start; i < std::min(n, start + proto.batch_size); ++i) idx.push_back(i);
        const auto batch = make_batch(d, idx, false);
        ad::Tape tape;
        auto out = m.forward(tape, batch);
        const auto& heat = out.heatmap.value();
        for (std::size_t bi = 0; bi < idx.size(); ++bi) {
            acoustics::Heatmap h{d.grid,
                                 std::vector<double>(heat.begin() + bi * plane,
                                                     heat.begin() + (bi + 1) * plane)};
            const auto preds = extract_keypoints(h, proto.peak_thresh, proto.nms_radius);
            const auto truths = label_truths(sample_label_heatmap(d, idx[bi]));
            const auto rep = match(preds, truths, proto.resolution);
            agg.tp += rep.tp;
            agg.fp += rep.fp;
            agg.fn += rep.fn;
            agg.matched_distances.insert(agg.matched_distances.end(),
                                         rep.matched_distances.begin(),
                                         rep.matched_distances.end());
            if (proto.macro_average) {
                const auto sm = metrics(rep);
                macro_p += sm.precision;
                macro_r += sm.recall;
                macro_f1 += sm.f1;
            }
        }
    }
    Metrics out = metrics(agg);
    if (proto.macro_average) {
        out.precision = macro_p / n;
        out.recall = macro_r / n;
        out.f1 = macro_f1 / n;
    }
    out.n_samples = n;
    return out;
}

}  // namespace ssl2d::eval
