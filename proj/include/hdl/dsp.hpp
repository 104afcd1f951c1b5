#pragma once

// Waveform -> Mel-spectrogram image, and image -> network-ready tensor.

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hdl/colormap.hpp"
#include "hdl/tensor.hpp"

namespace hdl::dsp {

inline constexpr std::size_t kTargetHeight = 120;
inline constexpr std::size_t kTargetWidth = 160;

/// Mel value of a frequency in Hz: 2595 * log10(1 + f / 700).
inline double hz_to_mel(double hz) {
    if (!(hz >= 0.0)) throw std::domain_error("hz_to_mel: frequency must be non-negative");
    return 2595.0 * std::log10(1.0 + hz / 700.0);
}

inline double mel_to_hz(double mel) {
    return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

// In-place iterative radix-2 FFT. Size must be a power of two.
inline void fft(std::vector<std::complex<double>>& a, bool inverse = false) {
    const std::size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0) throw std::invalid_argument("fft size must be a power of two");
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = 2 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1 : -1);
        const std::complex<double> wlen(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            double wr = 1, wi = 0;
            for (std::size_t k = 0; k < len / 2; ++k) {
                // Plain arithmetic: std::complex operator* carries inf/nan recovery we do not need.
                const auto u = a[i + k], x = a[i + k + len / 2];
                const std::complex<double> v(x.real() * wr - x.imag() * wi, x.real() * wi + x.imag() * wr);
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                const double t = wr * wlen.real() - wi * wlen.imag();
                wi = wr * wlen.imag() + wi * wlen.real();
                wr = t;
            }
        }
    }
    if (inverse) {
        for (auto& x : a) x /= static_cast<double>(n);
    }
}

enum class Window { rectangular, hann };

inline std::vector<double> make_window(Window kind, std::size_t n) {
    std::vector<double> w(n, 1.0);
    if (kind == Window::hann) {
        for (std::size_t i = 0; i < n; ++i) {
            w[i] = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
        }
    }
    return w;
}

// Magnitudes are normalized by the window sum, so a full-scale sinusoid
// centred on a bin has magnitude 0.5 there.
struct Spectrogram {
    std::size_t bins = 0;
    std::size_t frames = 0;
    std::size_t frame_len = 0;
    std::size_t hop_len = 0;
    double sample_rate = 0;
    std::vector<double> magnitude;  // [bins][frames]

    double at(std::size_t bin, std::size_t frame) const { return magnitude[bin * frames + frame]; }
};

inline Spectrogram stft(std::span<const float> waveform, std::size_t frame_len, std::size_t hop_len, Window window,
                        double sample_rate = 16000.0) {
    if (frame_len == 0 || hop_len == 0) throw std::invalid_argument("stft: frame and hop must be positive");
    if (waveform.size() < frame_len) {
        throw std::invalid_argument("stft: waveform of " + std::to_string(waveform.size()) +
                                    " samples is shorter than one frame (" + std::to_string(frame_len) + ")");
    }
    Spectrogram s;
    s.frame_len = frame_len;
    s.hop_len = hop_len;
    s.sample_rate = sample_rate;
    s.bins = frame_len / 2 + 1;
    s.frames = 1 + (waveform.size() - frame_len) / hop_len;
    s.magnitude.assign(s.bins * s.frames, 0.0);

    const auto w = make_window(window, frame_len);
    double wsum = 0;
    for (double v : w) wsum += v;
    std::vector<std::complex<double>> buf(frame_len);
    for (std::size_t f = 0; f < s.frames; ++f) {
        for (std::size_t i = 0; i < frame_len; ++i) buf[i] = waveform[f * hop_len + i] * w[i];
        fft(buf);
        for (std::size_t b = 0; b < s.bins; ++b) s.magnitude[b * s.frames + f] = std::sqrt(std::norm(buf[b])) / wsum;
    }
    return s;
}

struct MelConfig {
    std::size_t frame_len = 1024;
    std::size_t hop_len = 512;
    std::size_t n_mels = 64;
    double fmin = 20.0;
    double fmax = 0.0;  // 0 means sample_rate / 2
    double db_floor = -80.0;
};

// Triangular filters with unit peaks; centres equally spaced on the mel axis.
// Returns [n_mels][bins].
inline std::vector<double> mel_filterbank(std::size_t n_mels, std::size_t frame_len, double sample_rate, double fmin,
                                          double fmax) {
    if (!(fmin >= 0.0) || !(fmin < fmax) || fmax > sample_rate / 2 + 1e-9) {
        throw std::invalid_argument("mel_filterbank: need 0 <= fmin < fmax <= rate/2");
    }
    if (n_mels == 0) throw std::invalid_argument("mel_filterbank: n_mels must be positive");
    const std::size_t bins = frame_len / 2 + 1;
    const double lo = hz_to_mel(fmin), hi = hz_to_mel(fmax);
    std::vector<double> edges(n_mels + 2);
    for (std::size_t i = 0; i < edges.size(); ++i) {
        edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n_mels + 1));
    }
    std::vector<double> fb(n_mels * bins, 0.0);
    for (std::size_t m = 0; m < n_mels; ++m) {
        const double left = edges[m], centre = edges[m + 1], right = edges[m + 2];
        for (std::size_t b = 0; b < bins; ++b) {
            const double f = static_cast<double>(b) * sample_rate / static_cast<double>(frame_len);
            const double up = (f - left) / (centre - left);
            const double down = (right - f) / (right - centre);
            fb[m * bins + b] = std::max(0.0, std::min(up, down));
        }
    }
    return fb;
}

// Mel levels in dB, [n_mels][frames], clipped to [db_floor, 0].
inline std::vector<double> mel_db(std::span<const float> waveform, double sample_rate, const MelConfig& cfg,
                                  std::size_t& frames_out) {
    const double fmax = cfg.fmax > 0 ? cfg.fmax : sample_rate / 2;
    const auto fb = mel_filterbank(cfg.n_mels, cfg.frame_len, sample_rate, cfg.fmin, fmax);
    const auto spec = stft(waveform, cfg.frame_len, cfg.hop_len, Window::hann, sample_rate);
    frames_out = spec.frames;
    std::vector<double> out(cfg.n_mels * spec.frames);
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
        const double* row = fb.data() + m * spec.bins;
        std::size_t lo = 0, hi = spec.bins;
        while (lo < hi && row[lo] == 0.0) ++lo;
        while (hi > lo && row[hi - 1] == 0.0) --hi;
        for (std::size_t f = 0; f < spec.frames; ++f) {
            double power = 0;
            for (std::size_t b = lo; b < hi; ++b) {
                const double mag = spec.magnitude[b * spec.frames + f];
                power += row[b] * mag * mag;
            }
            const double db = 10.0 * std::log10(std::max(power, 1e-20));
            out[m * spec.frames + f] = std::clamp(db, cfg.db_floor, 0.0);
        }
    }
    return out;
}

/// Renders a waveform as a 3 x n_mels x frames RGB image (values 0..255),
/// highest mel band in row 0.
inline Tensor mel_spectrogram(std::span<const float> waveform, double sample_rate, const MelConfig& cfg = {}) {
    std::size_t frames = 0;
    const auto db = mel_db(waveform, sample_rate, cfg, frames);
    const std::size_t h = cfg.n_mels, w = frames;
    std::vector<float> img(3 * h * w);
    for (std::size_t m = 0; m < h; ++m) {
        const std::size_t row = h - 1 - m;
        for (std::size_t f = 0; f < w; ++f) {
            const double level = (db[m * w + f] - cfg.db_floor) / -cfg.db_floor;
            const auto idx = static_cast<std::size_t>(std::lround(std::clamp(level, 0.0, 1.0) * 255.0));
            const Rgb c = kSpectrogramColormap[idx];
            img[(0 * h + row) * w + f] = c.r;
            img[(1 * h + row) * w + f] = c.g;
            img[(2 * h + row) * w + f] = c.b;
        }
    }
    return Tensor({3, h, w}, std::move(img));
}

/// Bilinear resize (half-pixel centres, edge clamp) of a C x H x W tensor.
inline Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w) {
    if (image.rank() != 3) throw ShapeError("resize expects C x H x W, got " + to_string(image.shape()));
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (h < 2 || w < 2) throw ShapeError("resize input too small: " + to_string(image.shape()));
    std::vector<float> out(c * out_h * out_w);
    const double sy = static_cast<double>(h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(w) / static_cast<double>(out_w);
    auto src = image.data();
    for (std::size_t y = 0; y < out_h; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, h - 1);
        const double ay = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < out_w; ++x) {
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, w - 1);
            const double ax = fx - static_cast<double>(x0);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const float* p = src.data() + ch * h * w;
                const double top = p[y0 * w + x0] * (1 - ax) + p[y0 * w + x1] * ax;
                const double bot = p[y1 * w + x0] * (1 - ax) + p[y1 * w + x1] * ax;
                out[(ch * out_h + y) * out_w + x] = static_cast<float>(top * (1 - ay) + bot * ay);
            }
        }
    }
    return Tensor({c, out_h, out_w}, std::move(out));
}

/// 3 x H x W image in [0, 255] -> 3 x 120 x 160 tensor in [0, 1].
inline Tensor resize_normalize(const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw ShapeError("resize_normalize expects 3 x H x W, got " + to_string(image.shape()));
    }
    Tensor resized = (image.dim(1) == kTargetHeight && image.dim(2) == kTargetWidth)
                         ? image.detach()
                         : resize_bilinear(image, kTargetHeight, kTargetWidth);
    std::vector<float> v(resized.data().begin(), resized.data().end());
    for (auto& x : v) x = std::clamp(x / 255.0f, 0.0f, 1.0f);
    return Tensor(resized.shape(), std::move(v));
}

// Stacks C x H x W tensors into N x C x H x W.
inline Tensor batch(std::span<const Tensor> samples) {
    if (samples.empty()) throw ShapeError("batch of zero samples");
    const Shape s = samples.front().shape();
    std::vector<float> v;
    v.reserve(samples.size() * samples.front().numel());
    for (const auto& t : samples) {
        if (t.shape() != s) throw ShapeError("batch mixes shapes " + to_string(s) + " and " + to_string(t.shape()));
        v.insert(v.end(), t.data().begin(), t.data().end());
    }
    Shape out{samples.size()};
    out.insert(out.end(), s.begin(), s.end());
    return Tensor(std::move(out), std::move(v));
}

}  // namespace hdl::dsp
