#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

#include "ssl2d/autodiff.hpp"
#include "ssl2d/geom.hpp"

// Explicit Transformation layer: pose-driven warping of decoder feature maps
// from one array's coordinate frame to another's. Weight-free and linear in
// the features; differentiable by scattering upstream gradients through the
// recorded bilinear sampling weights. No gradient w.r.t. the pose (the pose
// is measured input).

namespace ssl2d::et {

struct FeatureMapStack {
    geom::GridSpec grid;
    int channels = 0;
    std::vector<double> values;  // [c][y][x]

    std::size_t plane() const {
        return static_cast<std::size_t>(grid.width_cells) * grid.height_cells;
    }
    double at(int c, int x, int y) const {
        return values[(static_cast<std::size_t>(c) * grid.height_cells + y) * grid.width_cells + x];
    }
    double& at(int c, int x, int y) {
        return values[(static_cast<std::size_t>(c) * grid.height_cells + y) * grid.width_cells + x];
    }
};

/// Recorded sampling coordinates: for each output cell, the base source cell
/// and the bilinear fractions. Source points outside the grid contribute 0.
struct EtTable {
    struct Cell {
        int ix, iy;      // floor of the source grid coordinate
        double fx, fy;   // fractional parts in [0, 1)
    };
    int width = 0, height = 0;
    std::vector<Cell> cells;  // [y * width + x]
};

/// Sampling uses inverse mapping: for each output cell center (a1 frame),
/// pull from the source point inv(1H2) * center in the input map (a2 frame).
inline EtTable build_et_table(const geom::GridSpec& grid, const geom::Pose2D& rel_pose) {
    grid.validate();
    const auto inv = geom::invert(geom::pose_to_transform(rel_pose));
    EtTable t;
    t.width = grid.width_cells;
    t.height = grid.height_cells;
    t.cells.resize(static_cast<std::size_t>(t.width) * t.height);
    for (int y = 0; y < t.height; ++y)
        for (int x = 0; x < t.width; ++x) {
            const auto src_world = geom::apply(inv, geom::grid_to_world(grid, x, y));
            const auto g = geom::world_to_grid(grid, src_world);
            const double ix = std::floor(g.x), iy = std::floor(g.y);
            t.cells[static_cast<std::size_t>(y) * t.width + x] = {
                static_cast<int>(ix), static_cast<int>(iy), g.x - ix, g.y - iy};
        }
    return t;
}

namespace detail {

template <typename Fn>
inline void for_each_neighbor(const EtTable& t, const EtTable::Cell& c, Fn&& fn) {
    // Zero-weight neighbors are skipped so integer-aligned poses stay bit-exact.
    const double w00 = (1.0 - c.fx) * (1.0 - c.fy);
    const double w10 = c.fx * (1.0 - c.fy);
    const double w01 = (1.0 - c.fx) * c.fy;
    const double w11 = c.fx * c.fy;
    auto in = [&t](int x, int y) { return x >= 0 && x < t.width && y >= 0 && y < t.height; };
    if (w00 != 0.0 && in(c.ix, c.iy)) fn(c.ix, c.iy, w00);
    if (w10 != 0.0 && in(c.ix + 1, c.iy)) fn(c.ix + 1, c.iy, w10);
    if (w01 != 0.0 && in(c.ix, c.iy + 1)) fn(c.ix, c.iy + 1, w01);
    if (w11 != 0.0 && in(c.ix + 1, c.iy + 1)) fn(c.ix + 1, c.iy + 1, w11);
}

}  // namespace detail

inline void et_apply_forward(const EtTable& t, const double* in, double* out, int channels) {
    const std::size_t plane = static_cast<std::size_t>(t.width) * t.height;
    for (int c = 0; c < channels; ++c) {
        const double* src = in + c * plane;
        double* dst = out + c * plane;
        for (std::size_t p = 0; p < plane; ++p) {
            double v = 0.0;
            detail::for_each_neighbor(t, t.cells[p], [&](int x, int y, double w) {
                v += w * src[static_cast<std::size_t>(y) * t.width + x];
            });
            dst[p] = v;
        }
    }
}

/// Transpose of the forward map: scatter each upstream value to its source
/// cells with the same bilinear weights.
inline void et_apply_backward(const EtTable& t, const double* upstream, double* grad_in,
                              int channels) {
    const std::size_t plane = static_cast<std::size_t>(t.width) * t.height;
    for (int c = 0; c < channels; ++c) {
        const double* up = upstream + c * plane;
        double* gi = grad_in + c * plane;
        for (std::size_t p = 0; p < plane; ++p) {
            const double g = up[p];
            if (g == 0.0) continue;
            detail::for_each_neighbor(t, t.cells[p], [&](int x, int y, double w) {
                gi[static_cast<std::size_t>(y) * t.width + x] += w * g;
            });
        }
    }
}

/// Warp Z_{2,2} (a2 frame) into Z_{2,1} (a1 frame) given the relative pose of
/// a2 from a1. Optionally records the sampling table for et_backward.
inline FeatureMapStack et_forward(const FeatureMapStack& z, const geom::Pose2D& rel_pose,
                                  EtTable* record = nullptr) {
    FeatureMapStack out{z.grid, z.channels,
                        std::vector<double>(z.values.size(), 0.0)};
    const EtTable t = build_et_table(z.grid, rel_pose);
    et_apply_forward(t, z.values.data(), out.values.data(), z.channels);
    if (record) *record = t;
    return out;
}

inline FeatureMapStack et_backward(const EtTable& t, const FeatureMapStack& upstream) {
    FeatureMapStack grad{upstream.grid, upstream.channels,
                         std::vector<double>(upstream.values.size(), 0.0)};
    et_apply_backward(t, upstream.values.data(), grad.values.data(), upstream.channels);
    return grad;
}

/// Tape op over a batch: z is (N,C,H,W) with one relative pose per sample.
inline ad::Var et_warp(ad::Var z, const std::vector<geom::Pose2D>& rel_poses,
                       const geom::GridSpec& grid) {
    const auto& s = z.shape();
    if (s.rank() != 4) throw std::invalid_argument("et_warp: expected rank-4, got " + s.str());
    if (s[0] != static_cast<int>(rel_poses.size()))
        throw std::invalid_argument("et_warp: pose count does not match batch size");
    if (s[2] != grid.height_cells || s[3] != grid.width_cells)
        throw std::invalid_argument("et_warp: map size does not match grid " + s.str());

    const int n = s[0], c = s[1];
    auto tables = std::make_shared<std::vector<EtTable>>();
    tables->reserve(n);
    for (const auto& p : rel_poses) tables->push_back(build_et_table(grid, p));

    ad::Tape& t = *z.tape;
    ad::Var y = t.alloc(s, {z.id});
    const std::size_t per_sample = static_cast<std::size_t>(c) * grid.width_cells * grid.height_cells;
    for (int i = 0; i < n; ++i)
        et_apply_forward((*tables)[i], z.value().data() + i * per_sample,
                         y.value().data() + i * per_sample, c);

    const int zi = z.id, yi = y.id;
    t.nodes[yi].back = [zi, yi, tables, n, c, per_sample](ad::Tape& tp) {
        for (int i = 0; i < n; ++i)
            et_apply_backward((*tables)[i], tp.grad(yi).data() + i * per_sample,
                              tp.grad(zi).data() + i * per_sample, c);
    };
    return y;
}

}  // namespace ssl2d::et
