#pragma once

#include <array>
#include <cmath>
#include <stdexcept>

// 2D poses, rigid transforms, and the world <-> heatmap-grid mapping.
//
// Conventions (used by every module):
//   - world axes: x right, y up, meters; angles counter-clockwise, radians
//   - grid cells indexed (column = x, row = y); buffers row-major [y*W + x]
//   - cell (ix, iy) has its center at origin + (i + 0.5) * cell_size

namespace ssl2d::geom {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
};

inline double dist(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

/// Normalize to (-pi, pi].
inline double normalize_angle(double a) {
    if (!std::isfinite(a)) throw std::invalid_argument("normalize_angle: non-finite angle");
    double r = std::fmod(a + M_PI, 2.0 * M_PI);
    if (r <= 0.0) r += 2.0 * M_PI;
    return r - M_PI;
}

struct Pose2D {
    double tx = 0.0;
    double ty = 0.0;
    double theta = 0.0;  // (-pi, pi]

    static Pose2D make(double tx, double ty, double theta) {
        if (!std::isfinite(tx) || !std::isfinite(ty))
            throw std::invalid_argument("Pose2D: non-finite translation");
        return {tx, ty, normalize_angle(theta)};
    }
};

/// 3x3 homogeneous rigid transform, row-major.
struct EuclideanTransform2D {
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    static EuclideanTransform2D identity() { return {}; }

    bool valid(double tol = 1e-9) const {
        if (m[6] != 0.0 || m[7] != 0.0 || m[8] != 1.0) return false;
        const double r00 = m[0], r01 = m[1], r10 = m[3], r11 = m[4];
        const double det = r00 * r11 - r01 * r10;
        const double c0 = r00 * r00 + r10 * r10;
        const double c1 = r01 * r01 + r11 * r11;
        const double dot = r00 * r01 + r10 * r11;
        return std::abs(det - 1.0) <= tol && std::abs(c0 - 1.0) <= tol &&
               std::abs(c1 - 1.0) <= tol && std::abs(dot) <= tol;
    }
};

inline EuclideanTransform2D pose_to_transform(const Pose2D& p) {
    const double c = std::cos(p.theta), s = std::sin(p.theta);
    EuclideanTransform2D t;
    t.m = {c, -s, p.tx, s, c, p.ty, 0, 0, 1};
    return t;
}

/// Closed-form inverse (R^T, -R^T t); no general matrix inversion.
inline EuclideanTransform2D invert(const EuclideanTransform2D& t) {
    const double r00 = t.m[0], r01 = t.m[1], tx = t.m[2];
    const double r10 = t.m[3], r11 = t.m[4], ty = t.m[5];
    EuclideanTransform2D inv;
    inv.m = {r00, r10, -(r00 * tx + r10 * ty), r01, r11, -(r01 * tx + r11 * ty), 0, 0, 1};
    return inv;
}

inline Vec2 apply(const EuclideanTransform2D& t, Vec2 p) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y))
        throw std::invalid_argument("apply: non-finite point");
    return {t.m[0] * p.x + t.m[1] * p.y + t.m[2], t.m[3] * p.x + t.m[4] * p.y + t.m[5]};
}

inline EuclideanTransform2D compose(const EuclideanTransform2D& a,
                                    const EuclideanTransform2D& b) {
    EuclideanTransform2D r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            r.m[i * 3 + j] =
                a.m[i * 3 + 0] * b.m[0 * 3 + j] + a.m[i * 3 + 1] * b.m[1 * 3 + j] +
                a.m[i * 3 + 2] * b.m[2 * 3 + j];
    return r;
}

/// Re-extract (tx, ty, theta); inverse of pose_to_transform.
inline Pose2D to_pose(const EuclideanTransform2D& t) {
    return {t.m[2], t.m[5], std::atan2(t.m[3], t.m[0])};
}

/// Pose of frame b expressed in frame a, both given in world coordinates.
inline Pose2D relative_pose(const Pose2D& a, const Pose2D& b) {
    return to_pose(compose(invert(pose_to_transform(a)), pose_to_transform(b)));
}

struct GridSpec {
    int width_cells = 25;
    int height_cells = 25;
    Vec2 origin{0.0, 0.0};
    double cell_size = 0.24;

    bool operator==(const GridSpec& o) const {
        return width_cells == o.width_cells && height_cells == o.height_cells &&
               origin.x == o.origin.x && origin.y == o.origin.y && cell_size == o.cell_size;
    }

    void validate() const {
        if (cell_size <= 0.0) throw std::invalid_argument("GridSpec: cell_size must be > 0");
        if (width_cells < 2 || height_cells < 2)
            throw std::invalid_argument("GridSpec: needs at least 2x2 cells");
    }
};

namespace detail {
// fp dust from the multiply/divide round trip is ~1e-15 cells; anything
// within 1e-9 of an integer is treated as that integer.
inline double snap_cell(double g) {
    const double r = std::nearbyint(g);
    return std::abs(g - r) < 1e-9 ? r : g;
}
}  // namespace detail

/// Continuous grid coordinate of a world point; (0, 0) is the center of the
/// first cell. Exact for points produced by grid_to_world.
inline Vec2 world_to_grid(const GridSpec& g, Vec2 p) {
    return {detail::snap_cell((p.x - g.origin.x) / g.cell_size - 0.5),
            detail::snap_cell((p.y - g.origin.y) / g.cell_size - 0.5)};
}

/// World position of the center of cell (ix, iy).
inline Vec2 grid_to_world(const GridSpec& g, int ix, int iy) {
    return {g.origin.x + (ix + 0.5) * g.cell_size, g.origin.y + (iy + 0.5) * g.cell_size};
}

inline bool grid_contains(const GridSpec& g, Vec2 world_point, double margin = 0.0) {
    return world_point.x >= g.origin.x + margin &&
           world_point.x <= g.origin.x + g.width_cells * g.cell_size - margin &&
           world_point.y >= g.origin.y + margin &&
           world_point.y <= g.origin.y + g.height_cells * g.cell_size - margin;
}

}  // namespace ssl2d::geom
