#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ssl2d/acoustics.hpp"
#include "ssl2d/dsp.hpp"
#include "ssl2d/geom.hpp"
#include "ssl2d/rng.hpp"

// Dataset generation and the SSL2 binary container.
//
// File layout (little-endian):
//   magic "SSL2", version u32, sample count u32, then per sample:
//     array count u8
//     per array: world pose (tx, ty, theta as f32 x3),
//                feature dims (channels, frames, bins as u32 x3), f32 payload
//     heatmap dims (W, H as u32 x2), f32 payload (row-major, [y*W + x])
//
// Labels are heatmaps in array 0's frame on an array-centered grid. Poses are
// snapped to f32 at generation time, so they round-trip the file bit-exactly
// and training behaves identically on generated and reloaded datasets.

namespace ssl2d::acoustics {

enum class DatasetMode { FixedLayout, RandomizedRoomSnr, RandomizedLayout };

inline const char* to_string(DatasetMode m) {
    switch (m) {
        case DatasetMode::FixedLayout: return "fixed-layout";
        case DatasetMode::RandomizedRoomSnr: return "randomized-room-snr";
        case DatasetMode::RandomizedLayout: return "randomized-layout";
    }
    return "?";
}

inline DatasetMode dataset_mode_from_string(const std::string& s) {
    if (s == "fixed-layout") return DatasetMode::FixedLayout;
    if (s == "randomized-room-snr") return DatasetMode::RandomizedRoomSnr;
    if (s == "randomized-layout") return DatasetMode::RandomizedLayout;
    throw std::invalid_argument("unknown dataset mode: " + s);
}

struct DatasetConfig {
    DatasetMode mode = DatasetMode::FixedLayout;
    int n_samples = 100;
    std::uint64_t seed = 1;

    RoomSpec room;                        // base acoustics (modes may randomize)
    geom::GridSpec grid{25, 25, {-3.0, -3.0}, 0.24};  // array-local label grid
    double label_sigma = 0.3;
    double two_source_prob = 0.5;
    double sample_rate = 16000.0;
    double duration = 0.16;
    int stft_win = 256;
    int stft_hop = 128;
    double mic_square_side = 0.05;

    std::vector<geom::Pose2D> fixed_poses{{2.2, 3.0, 0.0}, {3.8, 3.0, 1.8}};

    // randomization ranges (randomized-room-snr)
    double room_side_min = 4.0, room_side_max = 8.0;
    double snr_db_min = 6.0, snr_db_max = 30.0;

    // placement constraints
    double wall_margin = 0.5;        // array centers
    double source_wall_margin = 0.1;
    double max_array_separation = 4.0;
    double min_array_separation = 0.5;
    double source_to_array_max = 2.6;  // keeps sources inside every array-local grid
};

struct FeatureF32 {
    std::uint32_t channels = 0, frames = 0, bins = 0;
    std::vector<float> values;
};

struct DatasetSample {
    std::vector<geom::Pose2D> poses;       // world pose per array, f32-snapped
    std::vector<FeatureF32> features;      // per array
    std::uint32_t label_w = 0, label_h = 0;
    std::vector<float> label;              // [y * W + x]
};

struct Dataset {
    geom::GridSpec grid;
    std::vector<DatasetSample> samples;

    Dataset subset(const std::vector<int>& idx) const {
        Dataset d{grid, {}};
        d.samples.reserve(idx.size());
        for (int i : idx) d.samples.push_back(samples[i]);
        return d;
    }
};

inline geom::Pose2D snap_pose_f32(geom::Pose2D p) {
    return {static_cast<double>(static_cast<float>(p.tx)),
            static_cast<double>(static_cast<float>(p.ty)),
            static_cast<double>(static_cast<float>(p.theta))};
}

inline std::uint64_t layout_hash(const std::vector<geom::Pose2D>& poses) {
    rng::Fnv64 f;
    for (const auto& p : poses) {
        const float v[3] = {static_cast<float>(p.tx), static_cast<float>(p.ty),
                            static_cast<float>(p.theta)};
        f.update(v, sizeof(v));
    }
    return f.h;
}

namespace detail {

inline std::vector<float> to_f32(const std::vector<double>& v) {
    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i]);
    return out;
}

struct Placement {
    RoomSpec room;
    std::vector<geom::Pose2D> poses;
    std::vector<geom::Vec2> sources;
};

inline Placement draw_placement(const DatasetConfig& cfg, rng::Rng& r) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
        Placement pl;
        pl.room = cfg.room;
        if (cfg.mode == DatasetMode::RandomizedRoomSnr) {
            const double side = r.uniform(cfg.room_side_min, cfg.room_side_max);
            pl.room.width = pl.room.height = side;
            pl.room.snr_db = r.uniform(cfg.snr_db_min, cfg.snr_db_max);
        }

        if (cfg.mode == DatasetMode::RandomizedLayout) {
            const int n_arrays = static_cast<int>(cfg.fixed_poses.size());
            for (int a = 0; a < n_arrays; ++a) {
                geom::Pose2D p;
                p.tx = r.uniform(cfg.wall_margin, pl.room.width - cfg.wall_margin);
                p.ty = r.uniform(cfg.wall_margin, pl.room.height - cfg.wall_margin);
                p.theta = r.uniform(-M_PI + 1e-6, M_PI - 1e-6);
                pl.poses.push_back(snap_pose_f32(p));
            }
            bool sep_ok = true;
            for (std::size_t a = 0; a < pl.poses.size(); ++a)
                for (std::size_t b = a + 1; b < pl.poses.size(); ++b) {
                    const double d = std::hypot(pl.poses[a].tx - pl.poses[b].tx,
                                                pl.poses[a].ty - pl.poses[b].ty);
                    if (d > cfg.max_array_separation || d < cfg.min_array_separation)
                        sep_ok = false;
                }
            if (!sep_ok) continue;
        } else {
            for (auto p : cfg.fixed_poses) pl.poses.push_back(snap_pose_f32(p));
        }

        const int n_src = r.uniform() < cfg.two_source_prob ? 2 : 1;
        bool ok = true;
        for (int s = 0; s < n_src; ++s) {
            const geom::Vec2 pos{
                r.uniform(cfg.source_wall_margin, pl.room.width - cfg.source_wall_margin),
                r.uniform(cfg.source_wall_margin, pl.room.height - cfg.source_wall_margin)};
            for (const auto& p : pl.poses)
                if (std::hypot(pos.x - p.tx, pos.y - p.ty) > cfg.source_to_array_max) ok = false;
            if (s == 1 && geom::dist(pos, pl.sources[0]) < 2.0) ok = false;
            pl.sources.push_back(pos);
        }
        if (ok) return pl;
    }
    throw std::runtime_error("generate_dataset: placement unsatisfiable after 1000 tries");
}

}  // namespace detail

inline DatasetSample generate_sample(const DatasetConfig& cfg, int index) {
    rng::Rng place(rng::derive_seed(cfg.seed, rng::hash_str("placement"), index));
    const auto pl = detail::draw_placement(cfg, place);

    SceneSample scene;
    scene.room = pl.room;
    scene.sample_rate = cfg.sample_rate;
    scene.duration = cfg.duration;
    for (auto p : pl.poses) scene.arrays.push_back(MicArray::square(p, cfg.mic_square_side));
    for (std::size_t s = 0; s < pl.sources.size(); ++s)
        scene.sources.push_back(
            {pl.sources[s],
             synth_source_signal(rng::derive_seed(cfg.seed, rng::hash_str("signal"),
                                                  static_cast<std::uint64_t>(index) * 4 + s),
                                 cfg.duration, cfg.sample_rate)});

    auto wave = render(scene);
    wave = add_noise(wave, pl.room.snr_db, rng::derive_seed(cfg.seed, rng::hash_str("noise"), index));

    DatasetSample out;
    out.poses = pl.poses;
    const int mics_per_array = static_cast<int>(scene.arrays[0].mic_offsets.size());
    for (std::size_t a = 0; a < scene.arrays.size(); ++a) {
        MultiWave chans(wave.begin() + a * mics_per_array,
                        wave.begin() + (a + 1) * mics_per_array);
        const auto feat = dsp::extract_features(chans, cfg.stft_win, cfg.stft_hop);
        out.features.push_back({static_cast<std::uint32_t>(feat.channels),
                                static_cast<std::uint32_t>(feat.frames),
                                static_cast<std::uint32_t>(feat.bins),
                                detail::to_f32(feat.values)});
    }

    const auto to_local = geom::invert(geom::pose_to_transform(pl.poses[0]));
    std::vector<geom::Vec2> local_sources;
    for (auto s : pl.sources) local_sources.push_back(geom::apply(to_local, s));
    const auto label = make_label(local_sources, cfg.grid, cfg.label_sigma);
    out.label_w = static_cast<std::uint32_t>(cfg.grid.width_cells);
    out.label_h = static_cast<std::uint32_t>(cfg.grid.height_cells);
    out.label = detail::to_f32(label.values);
    return out;
}

inline Dataset generate_dataset(const DatasetConfig& cfg) {
    if (cfg.n_samples <= 0) throw std::invalid_argument("generate_dataset: n_samples must be > 0");
    cfg.grid.validate();
    Dataset d{cfg.grid, {}};
    d.samples.reserve(cfg.n_samples);
    for (int i = 0; i < cfg.n_samples; ++i) d.samples.push_back(generate_sample(cfg, i));
    return d;
}

// ---- SSL2 container ----

namespace detail {

template <typename T>
void write_raw(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("SSL2: truncated file");
    return v;
}

}  // namespace detail

inline void write_dataset_file(const Dataset& d, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os.write("SSL2", 4);
    detail::write_raw<std::uint32_t>(os, 1u);
    detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(d.samples.size()));
    for (const auto& s : d.samples) {
        detail::write_raw<std::uint8_t>(os, static_cast<std::uint8_t>(s.poses.size()));
        for (std::size_t a = 0; a < s.poses.size(); ++a) {
            const float pose[3] = {static_cast<float>(s.poses[a].tx),
                                   static_cast<float>(s.poses[a].ty),
                                   static_cast<float>(s.poses[a].theta)};
            os.write(reinterpret_cast<const char*>(pose), sizeof(pose));
            const auto& f = s.features[a];
            detail::write_raw(os, f.channels);
            detail::write_raw(os, f.frames);
            detail::write_raw(os, f.bins);
            os.write(reinterpret_cast<const char*>(f.values.data()),
                     static_cast<std::streamsize>(f.values.size() * sizeof(float)));
        }
        detail::write_raw(os, s.label_w);
        detail::write_raw(os, s.label_h);
        os.write(reinterpret_cast<const char*>(s.label.data()),
                 static_cast<std::streamsize>(s.label.size() * sizeof(float)));
    }
    if (!os) throw std::runtime_error("write failed: " + path);
}

inline Dataset load_dataset_file(const std::string& path, const geom::GridSpec& grid) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open dataset: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "SSL2", 4) != 0)
        throw std::runtime_error("not an SSL2 file: " + path);
    const auto version = detail::read_raw<std::uint32_t>(is);
    if (version != 1u) throw std::runtime_error("unsupported SSL2 version");
    const auto count = detail::read_raw<std::uint32_t>(is);

    Dataset d{grid, {}};
    d.samples.resize(count);
    for (auto& s : d.samples) {
        const auto n_arrays = detail::read_raw<std::uint8_t>(is);
        s.poses.resize(n_arrays);
        s.features.resize(n_arrays);
        for (int a = 0; a < n_arrays; ++a) {
            float pose[3];
            is.read(reinterpret_cast<char*>(pose), sizeof(pose));
            s.poses[a] = {pose[0], pose[1], pose[2]};
            auto& f = s.features[a];
            f.channels = detail::read_raw<std::uint32_t>(is);
            f.frames = detail::read_raw<std::uint32_t>(is);
            f.bins = detail::read_raw<std::uint32_t>(is);
            f.values.resize(static_cast<std::size_t>(f.channels) * f.frames * f.bins);
            is.read(reinterpret_cast<char*>(f.values.data()),
                    static_cast<std::streamsize>(f.values.size() * sizeof(float)));
        }
        s.label_w = detail::read_raw<std::uint32_t>(is);
        s.label_h = detail::read_raw<std::uint32_t>(is);
        s.label.resize(static_cast<std::size_t>(s.label_w) * s.label_h);
        is.read(reinterpret_cast<char*>(s.label.data()),
                static_cast<std::streamsize>(s.label.size() * sizeof(float)));
        if (!is) throw std::runtime_error("SSL2: truncated file");
    }
    return d;
}

inline std::set<std::uint64_t> dataset_layout_hashes(const Dataset& d) {
    std::set<std::uint64_t> out;
    for (const auto& s : d.samples) out.insert(layout_hash(s.poses));
    return out;
}

inline void write_manifest(const Dataset& d, const DatasetConfig& cfg, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << "format=SSL2\n";
    os << "version=1\n";
    os << "seed=" << cfg.seed << "\n";
    os << "mode=" << to_string(cfg.mode) << "\n";
    os << "n_samples=" << d.samples.size() << "\n";
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g", cfg.grid.origin.x, cfg.grid.origin.y);
    os << "grid.cells=" << cfg.grid.width_cells << "x" << cfg.grid.height_cells << "\n";
    os << "grid.origin=" << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", cfg.grid.cell_size);
    os << "grid.cell_size=" << buf << "\n";
    os << "room.size=" << cfg.room.width << "x" << cfg.room.height << "\n";
    os << "room.absorption=" << cfg.room.absorption << "\n";
    os << "room.max_order=" << cfg.room.max_order << "\n";
    os << "room.snr_db=" << (cfg.room.snr_db ? std::to_string(*cfg.room.snr_db) : "none") << "\n";
    os << "room_side_range=" << cfg.room_side_min << "," << cfg.room_side_max << "\n";
    os << "snr_db_range=" << cfg.snr_db_min << "," << cfg.snr_db_max << "\n";
    os << "label_sigma=" << cfg.label_sigma << "\n";
    os << "two_source_prob=" << cfg.two_source_prob << "\n";
    os << "duration=" << cfg.duration << "\n";
    os << "sample_rate=" << cfg.sample_rate << "\n";
    os << "stft=" << cfg.stft_win << "," << cfg.stft_hop << "\n";
    os << "layout_hashes=";
    const auto hashes = dataset_layout_hashes(d);
    bool first = true;
    for (auto h : hashes) {
        std::snprintf(buf, sizeof(buf), "%s%016llx", first ? "" : ",",
                      static_cast<unsigned long long>(h));
        os << buf;
        first = false;
    }
    os << "\n";
}

/// Parse the grid out of a manifest (all the loader needs back).
inline geom::GridSpec manifest_grid(const std::string& manifest_path) {
    std::ifstream is(manifest_path);
    if (!is) throw std::runtime_error("cannot open manifest: " + manifest_path);
    geom::GridSpec g;
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        if (key == "grid.cells") {
            std::sscanf(val.c_str(), "%dx%d", &g.width_cells, &g.height_cells);
        } else if (key == "grid.origin") {
            std::sscanf(val.c_str(), "%lf,%lf", &g.origin.x, &g.origin.y);
        } else if (key == "grid.cell_size") {
            g.cell_size = std::stod(val);
        }
    }
    g.validate();
    return g;
}

inline std::set<std::uint64_t> manifest_layout_hashes(const std::string& manifest_path) {
    std::ifstream is(manifest_path);
    if (!is) throw std::runtime_error("cannot open manifest: " + manifest_path);
    std::set<std::uint64_t> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.rfind("layout_hashes=", 0) != 0) continue;
        std::stringstream ss(line.substr(14));
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) out.insert(std::stoull(tok, nullptr, 16));
    }
    return out;
}

inline std::uint64_t dataset_checksum(const Dataset& d) {
    rng::Fnv64 f;
    for (const auto& s : d.samples) {
        for (const auto& p : s.poses) {
            const float v[3] = {static_cast<float>(p.tx), static_cast<float>(p.ty),
                                static_cast<float>(p.theta)};
            f.update(v, sizeof(v));
        }
        for (const auto& ft : s.features) f.update_vector(ft.values);
        f.update_vector(s.label);
    }
    return f.h;
}

}  // namespace ssl2d::acoustics
