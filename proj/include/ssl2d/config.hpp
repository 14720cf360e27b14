#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ssl2d/dataset.hpp"
#include "ssl2d/eval.hpp"
#include "ssl2d/model.hpp"
#include "ssl2d/train.hpp"

// Flat key=value experiment configuration with section prefixes. Defaults are
// the paper's values where one exists; `--preset desk` switches to sizes that
// train in minutes on a laptop CPU. Unknown keys are rejected.

namespace ssl2d::config {

struct ExperimentConfig {
    std::uint64_t seed = 1;

    // data.*
    std::string data_mode = "fixed-layout";
    int data_n = 2000;
    double data_two_source_prob = 0.5;
    double data_duration = 0.16;       // paper: 0.16 s clips
    double data_sample_rate = 16000.0;
    double data_mic_square_side = 0.05;

    // room.*
    double room_width = 6.0, room_height = 6.0;  // paper: 6m x 6m area
    double room_absorption = 0.0;
    int room_max_order = 0;
    std::optional<double> room_snr_db = 30.0;    // "low-noise"
    double room_side_min = 4.0, room_side_max = 8.0;
    double room_snr_min = 6.0, room_snr_max = 30.0;

    // grid.*
    int grid_cells = 25;
    double grid_extent = 6.0;

    // label.*
    double label_sigma = 0.3;

    // dsp.*
    int dsp_win = 256;
    int dsp_hop = 128;

    // model.* / train.*
    std::string model_variant = "adaptation";
    std::string train_method = "S";
    int train_epochs = 200;    // paper
    int train_batch = 256;     // paper
    double train_lr = 1e-4;    // paper
    double train_beta1 = 0.5;  // paper
    double train_beta2 = 0.999;
    double train_lambda_grl = 1.0;
    double train_w_int = 1.0;
    double train_w_out = 1.0;
    std::vector<std::uint64_t> train_seeds{1, 2, 3};

    // eval.*
    double eval_peak_thresh = 0.5;
    double eval_nms_radius = 1.0;
    double eval_resolution = 0.3;  // paper: 0.3 m synthetic (1 m real)
    bool eval_macro = false;

    geom::GridSpec grid() const {
        const double cell = grid_extent / grid_cells;
        return {grid_cells, grid_cells, {-grid_extent / 2.0, -grid_extent / 2.0}, cell};
    }

    acoustics::DatasetConfig dataset(std::uint64_t dataset_seed) const {
        acoustics::DatasetConfig d;
        d.mode = acoustics::dataset_mode_from_string(data_mode);
        d.n_samples = data_n;
        d.seed = dataset_seed;
        d.room = {room_width, room_height, room_absorption, room_max_order, room_snr_db};
        d.grid = grid();
        d.label_sigma = label_sigma;
        d.two_source_prob = data_two_source_prob;
        d.sample_rate = data_sample_rate;
        d.duration = data_duration;
        d.stft_win = dsp_win;
        d.stft_hop = dsp_hop;
        d.mic_square_side = data_mic_square_side;
        d.room_side_min = room_side_min;
        d.room_side_max = room_side_max;
        d.snr_db_min = room_snr_min;
        d.snr_db_max = room_snr_max;
        return d;
    }

    model::ModelConfig model() const {
        model::ModelConfig m;
        m.grid = grid();
        const int samples = static_cast<int>(std::lround(data_duration * data_sample_rate));
        m.feat_channels = 8;  // 4 mics x (re, im)
        m.feat_frames = dsp::stft_frames(samples, dsp_win, dsp_hop);
        m.feat_bins = dsp::stft_bins(dsp_win);
        return m;
    }

    train::TrainConfig trainer(std::uint64_t run_seed) const {
        train::TrainConfig t;
        t.epochs = train_epochs;
        t.batch_size = train_batch;
        t.lr = train_lr;
        t.beta1 = train_beta1;
        t.beta2 = train_beta2;
        t.lambda_grl = train_lambda_grl;
        t.w_int = train_w_int;
        t.w_out = train_w_out;
        t.seed = run_seed;
        return t;
    }

    eval::Protocol protocol() const {
        eval::Protocol p;
        p.peak_thresh = eval_peak_thresh;
        p.nms_radius = eval_nms_radius;
        p.resolution = eval_resolution;
        p.macro_average = eval_macro;
        return p;
    }
};

/// Desk-scale preset: small datasets, larger lr to compensate the far shorter
/// step budget, batch 64.
inline void apply_preset(ExperimentConfig& c, const std::string& preset) {
    if (preset == "paper") return;  // defaults already are the paper values
    if (preset == "desk") {
        c.data_n = 2000;
        c.train_epochs = 16;
        c.train_batch = 64;
        c.train_lr = 1e-3;
        return;
    }
    throw std::invalid_argument("unknown preset: " + preset);
}

namespace detail {

inline std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string fmt_seeds(const std::vector<std::uint64_t>& seeds) {
    std::string s;
    for (std::size_t i = 0; i < seeds.size(); ++i)
        s += (i ? "," : "") + std::to_string(seeds[i]);
    return s;
}

}  // namespace detail

inline std::string serialize(const ExperimentConfig& c) {
    std::ostringstream os;
    os << "seed=" << c.seed << "\n";
    os << "data.mode=" << c.data_mode << "\n";
    os << "data.n=" << c.data_n << "\n";
    os << "data.two_source_prob=" << detail::fmt(c.data_two_source_prob) << "\n";
    os << "data.duration=" << detail::fmt(c.data_duration) << "\n";
    os << "data.sample_rate=" << detail::fmt(c.data_sample_rate) << "\n";
    os << "data.mic_square_side=" << detail::fmt(c.data_mic_square_side) << "\n";
    os << "room.width=" << detail::fmt(c.room_width) << "\n";
    os << "room.height=" << detail::fmt(c.room_height) << "\n";
    os << "room.absorption=" << detail::fmt(c.room_absorption) << "\n";
    os << "room.max_order=" << c.room_max_order << "\n";
    os << "room.snr_db=" << (c.room_snr_db ? detail::fmt(*c.room_snr_db) : "none") << "\n";
    os << "room.side_min=" << detail::fmt(c.room_side_min) << "\n";
    os << "room.side_max=" << detail::fmt(c.room_side_max) << "\n";
    os << "room.snr_min=" << detail::fmt(c.room_snr_min) << "\n";
    os << "room.snr_max=" << detail::fmt(c.room_snr_max) << "\n";
    os << "grid.cells=" << c.grid_cells << "\n";
    os << "grid.extent=" << detail::fmt(c.grid_extent) << "\n";
    os << "label.sigma=" << detail::fmt(c.label_sigma) << "\n";
    os << "dsp.win=" << c.dsp_win << "\n";
    os << "dsp.hop=" << c.dsp_hop << "\n";
    os << "model.variant=" << c.model_variant << "\n";
    os << "train.method=" << c.train_method << "\n";
    os << "train.epochs=" << c.train_epochs << "\n";
    os << "train.batch=" << c.train_batch << "\n";
    os << "train.lr=" << detail::fmt(c.train_lr) << "\n";
    os << "train.beta1=" << detail::fmt(c.train_beta1) << "\n";
    os << "train.beta2=" << detail::fmt(c.train_beta2) << "\n";
    os << "train.lambda_grl=" << detail::fmt(c.train_lambda_grl) << "\n";
    os << "train.w_int=" << detail::fmt(c.train_w_int) << "\n";
    os << "train.w_out=" << detail::fmt(c.train_w_out) << "\n";
    os << "train.seeds=" << detail::fmt_seeds(c.train_seeds) << "\n";
    os << "eval.peak_thresh=" << detail::fmt(c.eval_peak_thresh) << "\n";
    os << "eval.nms_radius=" << detail::fmt(c.eval_nms_radius) << "\n";
    os << "eval.resolution=" << detail::fmt(c.eval_resolution) << "\n";
    os << "eval.macro=" << (c.eval_macro ? 1 : 0) << "\n";
    return os.str();
}

inline ExperimentConfig parse(const std::string& text) {
    ExperimentConfig c;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected key=value, got: " + line);
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        auto d = [&] { return std::stod(val); };
        auto i = [&] { return std::stoi(val); };
        if (key == "seed") c.seed = std::stoull(val);
        else if (key == "data.mode") c.data_mode = val;
        else if (key == "data.n") c.data_n = i();
        else if (key == "data.two_source_prob") c.data_two_source_prob = d();
        else if (key == "data.duration") c.data_duration = d();
        else if (key == "data.sample_rate") c.data_sample_rate = d();
        else if (key == "data.mic_square_side") c.data_mic_square_side = d();
        else if (key == "room.width") c.room_width = d();
        else if (key == "room.height") c.room_height = d();
        else if (key == "room.absorption") c.room_absorption = d();
        else if (key == "room.max_order") c.room_max_order = i();
        else if (key == "room.snr_db") c.room_snr_db = val == "none" ? std::nullopt : std::optional<double>(d());
        else if (key == "room.side_min") c.room_side_min = d();
        else if (key == "room.side_max") c.room_side_max = d();
        else if (key == "room.snr_min") c.room_snr_min = d();
        else if (key == "room.snr_max") c.room_snr_max = d();
        else if (key == "grid.cells") c.grid_cells = i();
        else if (key == "grid.extent") c.grid_extent = d();
        else if (key == "label.sigma") c.label_sigma = d();
        else if (key == "dsp.win") c.dsp_win = i();
        else if (key == "dsp.hop") c.dsp_hop = i();
        else if (key == "model.variant") c.model_variant = val;
        else if (key == "train.method") c.train_method = val;
        else if (key == "train.epochs") c.train_epochs = i();
        else if (key == "train.batch") c.train_batch = i();
        else if (key == "train.lr") c.train_lr = d();
        else if (key == "train.beta1") c.train_beta1 = d();
        else if (key == "train.beta2") c.train_beta2 = d();
        else if (key == "train.lambda_grl") c.train_lambda_grl = d();
        else if (key == "train.w_int") c.train_w_int = d();
        else if (key == "train.w_out") c.train_w_out = d();
        else if (key == "train.seeds") {
            c.train_seeds.clear();
            std::stringstream ss(val);
            std::string tok;
            while (std::getline(ss, tok, ','))
                if (!tok.empty()) c.train_seeds.push_back(std::stoull(tok));
        } else if (key == "eval.peak_thresh") c.eval_peak_thresh = d();
        else if (key == "eval.nms_radius") c.eval_nms_radius = d();
        else if (key == "eval.resolution") c.eval_resolution = d();
        else if (key == "eval.macro") c.eval_macro = i() != 0;
        else
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": unknown key: " + key);
    }
    return c;
}

inline ExperimentConfig parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse(ss.str());
}

inline bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
    return serialize(a) == serialize(b);
}

}  // namespace ssl2d::config
