#pragma once

#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

// STFT feature extraction: multichannel waveforms -> network input tensors.

namespace ssl2d::dsp {

using Wave = std::vector<double>;
using MultiWave = std::vector<Wave>;
using Cplx = std::complex<double>;

namespace detail {

inline bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

/// In-place iterative radix-2 FFT.
inline void fft(std::vector<Cplx>& a) {
    const int n = static_cast<int>(a.size());
    for (int i = 1, j = 0; i < n; ++i) {
        int bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (int len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * M_PI / len;
        const Cplx wl(std::cos(ang), std::sin(ang));
        for (int i = 0; i < n; i += len) {
            Cplx w(1.0, 0.0);
            for (int k = 0; k < len / 2; ++k) {
                Cplx u = a[i + k];
                Cplx v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

inline std::vector<double> hann_window(int win) {
    std::vector<double> w(win);
    for (int n = 0; n < win; ++n) w[n] = 0.5 * (1.0 - std::cos(2.0 * M_PI * n / win));
    return w;
}

}  // namespace detail

inline int stft_frames(int wave_len, int win, int hop) {
    return (wave_len - win) / hop + 1;
}

inline int stft_bins(int win) { return win / 2 + 1; }

/// Hann-windowed one-sided STFT; result[frame][bin], bins = win/2 + 1.
inline std::vector<std::vector<Cplx>> stft(const Wave& wave, int win, int hop) {
    if (!detail::is_pow2(win)) throw std::invalid_argument("stft: win must be a power of two");
    if (hop <= 0 || hop > win) throw std::invalid_argument("stft: need 0 < hop <= win");
    if (static_cast<int>(wave.size()) < win)
        throw std::invalid_argument("stft: wave shorter than window (" +
                                    std::to_string(wave.size()) + " < " + std::to_string(win) +
                                    ")");
    const int frames = stft_frames(static_cast<int>(wave.size()), win, hop);
    const int bins = stft_bins(win);
    const auto window = detail::hann_window(win);

    std::vector<std::vector<Cplx>> out(frames);
    std::vector<Cplx> buf(win);
    for (int f = 0; f < frames; ++f) {
        const int off = f * hop;
        for (int n = 0; n < win; ++n) buf[n] = Cplx(wave[off + n] * window[n], 0.0);
        detail::fft(buf);
        out[f].assign(buf.begin(), buf.begin() + bins);
    }
    return out;
}

/// Network input for one array: per microphone, Re and Im of the STFT become
/// two channels (mic0_re, mic0_im, mic1_re, ...), values scaled by 1/win.
struct FeatureTensor {
    int channels = 0;
    int frames = 0;
    int bins = 0;
    std::vector<double> values;  // [c][frame][bin] row-major

    double at(int c, int f, int b) const { return values[(static_cast<std::size_t>(c) * frames + f) * bins + b]; }
};

inline FeatureTensor extract_features(const MultiWave& channels, int win, int hop) {
    if (channels.empty()) throw std::invalid_argument("extract_features: no channels");
    const std::size_t len = channels[0].size();
    for (const auto& ch : channels)
        if (ch.size() != len)
            throw std::invalid_argument("extract_features: inconsistent channel lengths");

    FeatureTensor t;
    t.channels = static_cast<int>(channels.size()) * 2;
    t.frames = stft_frames(static_cast<int>(len), win, hop);
    t.bins = stft_bins(win);
    t.values.resize(static_cast<std::size_t>(t.channels) * t.frames * t.bins);

    const double scale = 1.0 / win;
    for (std::size_t m = 0; m < channels.size(); ++m) {
        const auto spec = stft(channels[m], win, hop);
        double* re = t.values.data() + (2 * m) * static_cast<std::size_t>(t.frames) * t.bins;
        double* im = t.values.data() + (2 * m + 1) * static_cast<std::size_t>(t.frames) * t.bins;
        for (int f = 0; f < t.frames; ++f)
            for (int b = 0; b < t.bins; ++b) {
                re[f * t.bins + b] = spec[f][b].real() * scale;
                im[f * t.bins + b] = spec[f][b].imag() * scale;
            }
    }
    return t;
}

}  // namespace ssl2d::dsp
