#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "e2efs/errors.hpp"

namespace e2efs {

// Mono audio at a fixed sample rate, samples nominally in [-1, 1].
struct AudioBuffer {
    std::vector<double> samples;
    int sample_rate = 0;

    void validate() const {
        if (samples.empty()) throw DataError("AudioBuffer: empty");
        if (sample_rate <= 0) throw DataError("AudioBuffer: sample_rate must be positive");
        for (std::size_t i = 0; i < samples.size(); ++i)
            if (!std::isfinite(samples[i]))
                throw DataError("AudioBuffer: non-finite sample at index " + std::to_string(i));
    }
};

namespace detail {

inline std::uint32_t read_u32le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t read_u16le(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace detail

// Reads a RIFF WAV file. Only PCM, 16-bit signed little-endian, mono is
// accepted; anything else is rejected (no resampling or remixing).
inline AudioBuffer read_wav(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open WAV file: " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 44) throw DataError("WAV too short: " + path);
    if (std::string(bytes.begin(), bytes.begin() + 4) != "RIFF" ||
        std::string(bytes.begin() + 8, bytes.begin() + 12) != "WAVE")
        throw DataError("not a RIFF/WAVE file: " + path);

    bool have_fmt = false;
    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t sample_rate = 0;
    std::size_t pos = 12;
    AudioBuffer out;
    bool have_data = false;
    while (pos + 8 <= bytes.size()) {
        const std::string id(bytes.begin() + pos, bytes.begin() + pos + 4);
        const std::uint32_t size = detail::read_u32le(&bytes[pos + 4]);
        pos += 8;
        if (pos + size > bytes.size()) throw DataError("truncated WAV chunk '" + id + "': " + path);
        if (id == "fmt ") {
            if (size < 16) throw DataError("malformed fmt chunk: " + path);
            format = detail::read_u16le(&bytes[pos]);
            channels = detail::read_u16le(&bytes[pos + 2]);
            sample_rate = detail::read_u32le(&bytes[pos + 4]);
            bits = detail::read_u16le(&bytes[pos + 14]);
            have_fmt = true;
        } else if (id == "data") {
            if (!have_fmt) throw DataError("WAV data chunk before fmt: " + path);
            if (format != 1) throw DataError("WAV is not PCM: " + path);
            if (channels != 1) throw DataError("WAV is not mono: " + path);
            if (bits != 16) throw DataError("WAV is not 16-bit: " + path);
            const std::size_t n = size / 2;
            out.samples.resize(n);
            for (std::size_t i = 0; i < n; ++i) {
                const std::int16_t s =
                    static_cast<std::int16_t>(detail::read_u16le(&bytes[pos + 2 * i]));
                out.samples[i] = static_cast<double>(s) / 32768.0;
            }
            have_data = true;
        }
        pos += size + (size & 1);  // chunks are word-aligned
    }
    if (!have_data) throw DataError("WAV has no data chunk: " + path);
    out.sample_rate = static_cast<int>(sample_rate);
    out.validate();
    return out;
}

// Writes PCM16 mono; samples are clamped to [-1, 1). Used by the synthetic
// tooling and tests.
inline void write_wav(const std::string& path, const AudioBuffer& audio) {
    audio.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write WAV file: " + path);
    const std::uint32_t n = static_cast<std::uint32_t>(audio.samples.size());
    const std::uint32_t data_size = n * 2;
    auto put_u32 = [&](std::uint32_t v) {
        const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                           static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
        out.write(b, 4);
    };
    auto put_u16 = [&](std::uint16_t v) {
        const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
        out.write(b, 2);
    };
    out.write("RIFF", 4);
    put_u32(36 + data_size);
    out.write("WAVE", 4);
    out.write("fmt ", 4);
    put_u32(16);
    put_u16(1);  // PCM
    put_u16(1);  // mono
    put_u32(static_cast<std::uint32_t>(audio.sample_rate));
    put_u32(static_cast<std::uint32_t>(audio.sample_rate) * 2);
    put_u16(2);
    put_u16(16);
    out.write("data", 4);
    put_u32(data_size);
    for (double v : audio.samples) {
        double c = v;
        if (c > 0.999969482421875) c = 0.999969482421875;
        if (c < -1.0) c = -1.0;
        put_u16(static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lrint(c * 32768.0))));
    }
    if (!out) throw DataError("failed writing WAV file: " + path);
}

}  // namespace e2efs
