#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "ssl2d/dsp.hpp"
#include "ssl2d/geom.hpp"
#include "ssl2d/rng.hpp"

// Synthetic scene generation: source signals, a simplified 2D image-source
// model, distance attenuation with fractional delay, additive noise, and
// Gaussian heatmap labels.

namespace ssl2d::acoustics {

using dsp::MultiWave;
using dsp::Wave;

constexpr double kSpeedOfSound = 343.0;  // m/s
constexpr double kMinRange = 0.1;        // 1/r clamp, m

struct RoomSpec {
    double width = 6.0;
    double height = 6.0;
    double absorption = 0.0;        // in [0, 1]
    int max_order = 0;              // reflection count
    std::optional<double> snr_db;   // nullopt = noise-free

    void validate() const {
        if (width <= 0.0 || height <= 0.0) throw std::invalid_argument("RoomSpec: non-positive size");
        if (absorption < 0.0 || absorption > 1.0)
            throw std::invalid_argument("RoomSpec: absorption outside [0,1]");
        if (max_order < 0) throw std::invalid_argument("RoomSpec: negative max_order");
    }
};

struct MicArray {
    geom::Pose2D pose;                     // array frame in world coordinates
    std::vector<geom::Vec2> mic_offsets;   // array-local

    /// 4 microphones on a square of the given side.
    static MicArray square(geom::Pose2D pose, double side = 0.05) {
        const double h = side / 2.0;
        return {pose, {{-h, -h}, {h, -h}, {h, h}, {-h, h}}};
    }

    std::vector<geom::Vec2> mic_world_positions() const {
        const auto t = geom::pose_to_transform(pose);
        std::vector<geom::Vec2> out;
        out.reserve(mic_offsets.size());
        for (auto o : mic_offsets) out.push_back(geom::apply(t, o));
        return out;
    }
};

struct SceneSample {
    struct Source {
        geom::Vec2 position;
        Wave signal;
    };

    RoomSpec room;
    std::vector<MicArray> arrays;
    std::vector<Source> sources;
    double sample_rate = 16000.0;
    double duration = 0.16;

    void validate() const {
        room.validate();
        if (sources.empty() || sources.size() > 2)
            throw std::invalid_argument("SceneSample: need 1 or 2 sources");
        if (sources.size() == 2 &&
            geom::dist(sources[0].position, sources[1].position) < 2.0)
            throw std::invalid_argument("SceneSample: sources closer than 2 m");
        auto inside = [&](geom::Vec2 p) {
            return p.x > 0.0 && p.x < room.width && p.y > 0.0 && p.y < room.height;
        };
        for (const auto& s : sources)
            if (!inside(s.position)) throw std::invalid_argument("SceneSample: source outside room");
        for (const auto& a : arrays) {
            if (a.mic_offsets.size() < 2)
                throw std::invalid_argument("SceneSample: array needs >= 2 microphones");
            for (auto p : a.mic_world_positions())
                if (!inside(p)) throw std::invalid_argument("SceneSample: microphone outside room");
        }
    }
};

struct Heatmap {
    geom::GridSpec grid;
    std::vector<double> values;  // [y * W + x]

    double at(int x, int y) const { return values[static_cast<std::size_t>(y) * grid.width_cells + x]; }
    double& at(int x, int y) { return values[static_cast<std::size_t>(y) * grid.width_cells + x]; }
};

/// Deterministic stand-in for the recorded music clips: a sum of 8-16
/// sinusoids with random frequencies in [100, 4000] Hz and slow random
/// amplitude envelopes, peak-normalized to 1.
inline Wave synth_source_signal(std::uint64_t seed, double duration, double sample_rate) {
    if (duration <= 0.0) throw std::invalid_argument("synth_source_signal: duration must be > 0");
    rng::Rng r(rng::derive_seed(seed, rng::hash_str("source-signal")));
    const int n = static_cast<int>(std::lround(duration * sample_rate));
    const int components = r.uniform_int(8, 16);

    struct Component {
        double freq, amp, phase, env_freq, env_phase;
    };
    std::vector<Component> comp(components);
    for (auto& c : comp) {
        c.freq = r.uniform(100.0, 4000.0);
        c.amp = r.uniform(0.2, 1.0);
        c.phase = r.uniform(0.0, 2.0 * M_PI);
        c.env_freq = r.uniform(1.0, 8.0);
        c.env_phase = r.uniform(0.0, 2.0 * M_PI);
    }

    Wave s(n, 0.0);
    for (int i = 0; i < n; ++i) {
        const double t = i / sample_rate;
        double v = 0.0;
        for (const auto& c : comp) {
            const double env = 0.5 + 0.5 * std::sin(2.0 * M_PI * c.env_freq * t + c.env_phase);
            v += c.amp * env * std::sin(2.0 * M_PI * c.freq * t + c.phase);
        }
        s[i] = v;
    }
    double peak = 0.0;
    for (double v : s) peak = std::max(peak, std::abs(v));
    if (peak > 0.0)
        for (double& v : s) v /= peak;
    return s;
}

struct ImageSource {
    geom::Vec2 position;
    double gain;
};

/// Mirror images of src across the 4 walls of a rectangular room, up to
/// max_order reflections; gain = (1 - absorption)^order.
inline std::vector<ImageSource> image_sources(const RoomSpec& room, geom::Vec2 src,
                                              int max_order) {
    room.validate();
    if (src.x <= 0.0 || src.x >= room.width || src.y <= 0.0 || src.y >= room.height)
        throw std::domain_error("image_sources: source outside room");

    // x images: 2kW + x with 2|k| reflections, 2kW - x with |2k - 1| reflections.
    struct Axis {
        double pos;
        int order;
    };
    auto axis_images = [max_order](double coord, double extent) {
        std::vector<Axis> out;
        for (int k = -(max_order / 2 + 1); k <= max_order / 2 + 1; ++k) {
            const int even_order = 2 * std::abs(k);
            if (even_order <= max_order) out.push_back({2.0 * k * extent + coord, even_order});
            const int odd_order = std::abs(2 * k - 1);
            if (odd_order <= max_order) out.push_back({2.0 * k * extent - coord, odd_order});
        }
        return out;
    };

    const double reflect_gain = 1.0 - room.absorption;
    std::vector<ImageSource> images;
    for (const auto& ax : axis_images(src.x, room.width))
        for (const auto& ay : axis_images(src.y, room.height)) {
            const int order = ax.order + ay.order;
            if (order > max_order) continue;
            images.push_back({{ax.pos, ay.pos}, std::pow(reflect_gain, order)});
        }
    std::sort(images.begin(), images.end(), [](const ImageSource& a, const ImageSource& b) {
        if (a.position.x != b.position.x) return a.position.x < b.position.x;
        return a.position.y < b.position.y;
    });
    return images;
}

/// Propagate every source (and its wall images) to every microphone:
/// amplitude gain / max(r, 0.1 m), fractional delay r/c via linear
/// interpolation. Channels are ordered array-major, mic-minor.
inline MultiWave render(const SceneSample& scene) {
    scene.validate();
    std::vector<geom::Vec2> mics;
    for (const auto& a : scene.arrays)
        for (auto p : a.mic_world_positions()) mics.push_back(p);

    const int n = static_cast<int>(std::lround(scene.duration * scene.sample_rate));
    MultiWave out(mics.size(), Wave(n, 0.0));

    for (const auto& src : scene.sources) {
        const auto images = image_sources(scene.room, src.position, scene.room.max_order);
        const auto& sig = src.signal;
        const int sig_len = static_cast<int>(sig.size());
        for (std::size_t m = 0; m < mics.size(); ++m) {
            Wave& ch = out[m];
            for (const auto& img : images) {
                const double r = geom::dist(img.position, mics[m]);
                const double amp = img.gain / std::max(r, kMinRange);
                const double delay = r / kSpeedOfSound * scene.sample_rate;
                for (int i = 0; i < n; ++i) {
                    const double t = i - delay;
                    const int i0 = static_cast<int>(std::floor(t));
                    const double f = t - i0;
                    double v = 0.0;
                    if (i0 >= 0 && i0 < sig_len) v += (1.0 - f) * sig[i0];
                    if (i0 + 1 >= 0 && i0 + 1 < sig_len) v += f * sig[i0 + 1];
                    ch[i] += amp * v;
                }
            }
        }
    }
    return out;
}

/// Additive white Gaussian noise at an exact per-channel SNR (measured over
/// the clip). nullopt passes the input through unchanged.
inline MultiWave add_noise(const MultiWave& wave, std::optional<double> snr_db,
                           std::uint64_t seed) {
    if (!snr_db.has_value()) return wave;
    MultiWave out = wave;
    for (std::size_t c = 0; c < out.size(); ++c) {
        Wave& ch = out[c];
        double p_sig = 0.0;
        for (double v : ch) p_sig += v * v;
        p_sig /= static_cast<double>(ch.size());
        if (p_sig <= 0.0) throw std::invalid_argument("add_noise: zero-power channel");

        rng::Rng r(rng::derive_seed(seed, rng::hash_str("awgn"), c));
        Wave noise(ch.size());
        double p_raw = 0.0;
        for (double& v : noise) {
            v = r.normal();
            p_raw += v * v;
        }
        p_raw /= static_cast<double>(noise.size());
        const double p_target = p_sig / std::pow(10.0, *snr_db / 10.0);
        const double scale = std::sqrt(p_target / p_raw);
        for (std::size_t i = 0; i < ch.size(); ++i) ch[i] += scale * noise[i];
    }
    return out;
}

/// Unit-peak Gaussian blobs at the source locations, max-combined so
/// overlapping blobs never exceed 1. Source positions are in grid (label)
/// coordinates.
inline Heatmap make_label(const std::vector<geom::Vec2>& sources, const geom::GridSpec& grid,
                          double sigma) {
    if (sigma <= 0.0) throw std::invalid_argument("make_label: sigma must be > 0");
    grid.validate();
    Heatmap h{grid, std::vector<double>(
                        static_cast<std::size_t>(grid.width_cells) * grid.height_cells, 0.0)};
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (int y = 0; y < grid.height_cells; ++y)
        for (int x = 0; x < grid.width_cells; ++x) {
            const auto q = geom::grid_to_world(grid, x, y);
            double v = 0.0;
            for (auto s : sources) {
                const double dx = q.x - s.x, dy = q.y - s.y;
                v = std::max(v, std::exp(-(dx * dx + dy * dy) * inv));
            }
            h.at(x, y) = v;
        }
    return h;
}

}  // namespace ssl2d::acoustics
