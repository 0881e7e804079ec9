#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <string>
#include <vector>

#include "e2efs/errors.hpp"
#include "e2efs/mask.hpp"
#include "e2efs/matrix.hpp"
#include "e2efs/wav.hpp"

namespace e2efs {

struct PreEmphasisConfig {
    double coefficient = 0.97;

    void validate() const {
        if (!std::isfinite(coefficient) || coefficient < 0.0 || coefficient >= 1.0)
            throw ConfigError("pre-emphasis coefficient must be finite and in [0,1)");
    }
};

struct SpectrogramConfig {
    int n_fft = 512;
    int hop = 160;
    int n_mel = 128;
    double fmin = 20.0;
    double fmax = 8000.0;
    double log_floor = 1e-10;

    void validate(int sample_rate) const {
        if (hop <= 0 || n_fft <= 0 || hop > n_fft)
            throw ConfigError("spectrogram: need 0 < hop <= n_fft");
        if ((n_fft & (n_fft - 1)) != 0) throw ConfigError("spectrogram: n_fft must be a power of two");
        if (!(fmin > 0.0 && fmin < fmax && fmax <= sample_rate / 2.0))
            throw ConfigError("spectrogram: need 0 < fmin < fmax <= sample_rate/2");
        if (n_mel < 1) throw ConfigError("spectrogram: n_mel must be >= 1");
        if (!(log_floor > 0.0)) throw ConfigError("spectrogram: log_floor must be > 0");
    }
};

// y[0] = x[0], y[n] = x[n] - c*x[n-1].
inline AudioBuffer preemphasize(const AudioBuffer& audio, const PreEmphasisConfig& cfg) {
    audio.validate();
    cfg.validate();
    AudioBuffer out;
    out.sample_rate = audio.sample_rate;
    out.samples.resize(audio.samples.size());
    out.samples[0] = audio.samples[0];
    for (std::size_t n = 1; n < audio.samples.size(); ++n)
        out.samples[n] = audio.samples[n] - cfg.coefficient * audio.samples[n - 1];
    return out;
}

namespace detail {

struct Biquad {
    double b0, b1, b2, a1, a2;  // first-order sections use b2 = a2 = 0
};

// Butterworth low-pass as cascaded second-order sections, bilinear transform
// with prewarped cutoff.
inline std::vector<Biquad> butterworth_sections(int order, double cutoff_hz, int sample_rate) {
    const double pi = 3.14159265358979323846;
    const double wc = std::tan(pi * cutoff_hz / sample_rate);
    std::vector<Biquad> sections;
    for (int k = 0; k < order / 2; ++k) {
        // conjugate pole pair of the normalized prototype: s^2 + a*s + 1
        const double a = 2.0 * std::sin(pi * (2.0 * k + 1.0) / (2.0 * order));
        const double d0 = 1.0 + a * wc + wc * wc;
        Biquad s;
        s.b0 = wc * wc / d0;
        s.b1 = 2.0 * s.b0;
        s.b2 = s.b0;
        s.a1 = 2.0 * (wc * wc - 1.0) / d0;
        s.a2 = (1.0 - a * wc + wc * wc) / d0;
        sections.push_back(s);
    }
    if (order % 2 == 1) {
        const double d0 = 1.0 + wc;
        Biquad s;
        s.b0 = wc / d0;
        s.b1 = s.b0;
        s.b2 = 0.0;
        s.a1 = (wc - 1.0) / d0;
        s.a2 = 0.0;
        sections.push_back(s);
    }
    return sections;
}

// In-place iterative radix-2 FFT.
inline void fft_radix2(std::vector<std::complex<double>>& x) {
    const std::size_t n = x.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(x[i], x[j]);
    }
    const double pi = 3.14159265358979323846;
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * pi / static_cast<double>(len);
        const std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t k = 0; k < len / 2; ++k) {
                const std::complex<double> u = x[i + k];
                const std::complex<double> v = x[i + k + len / 2] * w;
                x[i + k] = u + v;
                x[i + k + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

// Hann-windowed power spectra, one row per frame, n_fft/2+1 bins.
inline Matrix stft_power(const AudioBuffer& audio, int n_fft, int hop) {
    const std::size_t n = audio.samples.size();
    if (n < static_cast<std::size_t>(n_fft))
        throw DataError("audio shorter than one analysis frame (" + std::to_string(n) + " < " +
                        std::to_string(n_fft) + " samples)");
    const std::size_t frames = 1 + (n - static_cast<std::size_t>(n_fft)) / static_cast<std::size_t>(hop);
    const std::size_t bins = static_cast<std::size_t>(n_fft) / 2 + 1;
    std::vector<double> window(n_fft);
    const double pi = 3.14159265358979323846;
    for (int i = 0; i < n_fft; ++i) window[i] = 0.5 - 0.5 * std::cos(2.0 * pi * i / n_fft);

    Matrix power(frames, bins);
    std::vector<std::complex<double>> buf(n_fft);
    for (std::size_t t = 0; t < frames; ++t) {
        const double* src = audio.samples.data() + t * static_cast<std::size_t>(hop);
        for (int i = 0; i < n_fft; ++i) buf[i] = std::complex<double>(src[i] * window[i], 0.0);
        fft_radix2(buf);
        for (std::size_t k = 0; k < bins; ++k) power.at(t, k) = std::norm(buf[k]);
    }
    return power;
}

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

// Triangular mel filterbank (HTK mel scale, unit-peak triangles).
// Returns n_mel rows of n_fft/2+1 weights plus the band center frequencies.
inline std::pair<Matrix, std::vector<double>> mel_filterbank(int n_mel, int n_fft, int sample_rate,
                                                             double fmin, double fmax) {
    const std::size_t bins = static_cast<std::size_t>(n_fft) / 2 + 1;
    const double mel_lo = hz_to_mel(fmin), mel_hi = hz_to_mel(fmax);
    std::vector<double> edges(n_mel + 2);
    for (int i = 0; i < n_mel + 2; ++i)
        edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (n_mel + 1));
    Matrix fb(n_mel, bins);
    std::vector<double> centers(n_mel);
    for (int m = 0; m < n_mel; ++m) {
        const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
        centers[m] = center;
        for (std::size_t k = 0; k < bins; ++k) {
            const double f = static_cast<double>(k) * sample_rate / n_fft;
            double w = 0.0;
            if (f > left && f < center)
                w = (f - left) / (center - left);
            else if (f >= center && f < right)
                w = (right - f) / (right - center);
            fb.at(m, k) = w;
        }
    }
    return {fb, centers};
}

}  // namespace detail

inline AudioBuffer butterworth_lowpass(const AudioBuffer& audio, int order, double cutoff_hz) {
    audio.validate();
    if (order < 1) throw ConfigError("butterworth: order must be >= 1");
    if (order > 12) throw ConfigError("butterworth: order > 12 rejected (coefficient conditioning)");
    if (!(cutoff_hz > 0.0 && cutoff_hz < audio.sample_rate / 2.0))
        throw ConfigError("butterworth: cutoff must satisfy 0 < cutoff < sample_rate/2");
    const auto sections = detail::butterworth_sections(order, cutoff_hz, audio.sample_rate);
    AudioBuffer out;
    out.sample_rate = audio.sample_rate;
    out.samples = audio.samples;
    for (const auto& s : sections) {
        // direct form II transposed
        double z1 = 0.0, z2 = 0.0;
        for (double& v : out.samples) {
            const double x = v;
            const double y = s.b0 * x + z1;
            z1 = s.b1 * x - s.a1 * y + z2;
            z2 = s.b2 * x - s.a2 * y;
            v = y;
        }
    }
    return out;
}

inline FeatureMatrix log_mel_spectrogram(const AudioBuffer& audio, const SpectrogramConfig& cfg) {
    audio.validate();
    cfg.validate(audio.sample_rate);
    const Matrix power = detail::stft_power(audio, cfg.n_fft, cfg.hop);
    const auto [fb, centers] = detail::mel_filterbank(cfg.n_mel, cfg.n_fft, audio.sample_rate, cfg.fmin, cfg.fmax);
    FeatureMatrix out;
    out.values = Matrix(power.rows, static_cast<std::size_t>(cfg.n_mel));
    for (std::size_t t = 0; t < power.rows; ++t) {
        const double* p = power.row(t);
        for (int m = 0; m < cfg.n_mel; ++m) {
            const double* w = fb.row(static_cast<std::size_t>(m));
            double acc = 0.0;
            for (std::size_t k = 0; k < power.cols; ++k) acc += w[k] * p[k];
            out.values.at(t, static_cast<std::size_t>(m)) = std::log(acc + cfg.log_floor);
        }
    }
    out.band_labels.resize(cfg.n_mel);
    for (int m = 0; m < cfg.n_mel; ++m) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.2fHz", centers[static_cast<std::size_t>(m)]);
        out.band_labels[static_cast<std::size_t>(m)] = buf;
    }
    out.frame_rate = static_cast<double>(audio.sample_rate) / cfg.hop;
    return out;
}

// Per frame: (low-band power + eps) / (high-band power + eps), split at
// `boundary_hz` over raw STFT bins. Single "ratio" column.
inline FeatureMatrix frequency_ratio(const AudioBuffer& audio, const SpectrogramConfig& cfg,
                                     double boundary_hz) {
    audio.validate();
    cfg.validate(audio.sample_rate);
    if (!(boundary_hz > 0.0 && boundary_hz < audio.sample_rate / 2.0))
        throw ConfigError("frequency_ratio: boundary must satisfy 0 < boundary < sample_rate/2");
    constexpr double eps = 1e-10;
    const Matrix power = detail::stft_power(audio, cfg.n_fft, cfg.hop);
    FeatureMatrix out;
    out.values = Matrix(power.rows, 1);
    for (std::size_t t = 0; t < power.rows; ++t) {
        double low = 0.0, high = 0.0;
        for (std::size_t k = 0; k < power.cols; ++k) {
            const double f = static_cast<double>(k) * audio.sample_rate / cfg.n_fft;
            (f < boundary_hz ? low : high) += power.at(t, k);
        }
        out.values.at(t, 0) = (low + eps) / (high + eps);
    }
    out.band_labels = {"ratio"};
    out.frame_rate = static_cast<double>(audio.sample_rate) / cfg.hop;
    return out;
}

// Restrict columns to the mask indices (ascending).
inline FeatureMatrix band_select(const FeatureMatrix& features, const FeatureMask& mask) {
    mask.validate();
    for (std::size_t i : mask.indices)
        if (i >= features.bands())
            throw DataError("band_select: index " + std::to_string(i) + " out of range (F=" +
                            std::to_string(features.bands()) + ")");
    FeatureMatrix out;
    out.frame_rate = features.frame_rate;
    out.values = Matrix(features.frames(), mask.indices.size());
    out.band_labels.resize(mask.indices.size());
    for (std::size_t j = 0; j < mask.indices.size(); ++j) {
        out.band_labels[j] = features.band_labels[mask.indices[j]];
        for (std::size_t t = 0; t < features.frames(); ++t)
            out.values.at(t, j) = features.values.at(t, mask.indices[j]);
    }
    return out;
}

// Column-wise concatenation of equally-framed streams.
inline FeatureMatrix stack_time(const std::vector<FeatureMatrix>& parts) {
    if (parts.empty()) throw DataError("stack_time: no inputs");
    const std::size_t t0 = parts[0].frames();
    const double fr = parts[0].frame_rate;
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.frames() != t0)
            throw DataError("stack_time: frame count mismatch (" + std::to_string(p.frames()) + " vs " +
                            std::to_string(t0) + ")");
        if (p.frame_rate != fr) throw DataError("stack_time: frame_rate mismatch");
        total += p.bands();
    }
    FeatureMatrix out;
    out.frame_rate = fr;
    out.values = Matrix(t0, total);
    out.band_labels.reserve(total);
    std::size_t col = 0;
    for (const auto& p : parts) {
        for (std::size_t j = 0; j < p.bands(); ++j, ++col) {
            out.band_labels.push_back(p.band_labels[j]);
            for (std::size_t t = 0; t < t0; ++t) out.values.at(t, col) = p.values.at(t, j);
        }
    }
    return out;
}

}  // namespace e2efs
