#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "e2efs/errors.hpp"

namespace e2efs {

enum class MaskOrigin { output_grad, loss_grad, lowest, random, least_important, sffs };

inline std::string to_string(MaskOrigin o) {
    switch (o) {
        case MaskOrigin::output_grad: return "output_grad";
        case MaskOrigin::loss_grad: return "loss_grad";
        case MaskOrigin::lowest: return "lowest";
        case MaskOrigin::random: return "random";
        case MaskOrigin::least_important: return "least_important";
        case MaskOrigin::sffs: return "sffs";
    }
    return "?";
}

inline MaskOrigin mask_origin_from_string(const std::string& s) {
    if (s == "output_grad") return MaskOrigin::output_grad;
    if (s == "loss_grad") return MaskOrigin::loss_grad;
    if (s == "lowest") return MaskOrigin::lowest;
    if (s.rfind("random", 0) == 0) return MaskOrigin::random;
    if (s == "least_important") return MaskOrigin::least_important;
    if (s == "sffs") return MaskOrigin::sffs;
    throw DataError("unknown mask origin: " + s);
}

// Strictly ascending feature indices plus provenance.
struct FeatureMask {
    std::vector<std::size_t> indices;
    MaskOrigin origin = MaskOrigin::output_grad;
    std::uint64_t seed = 0;        // meaningful for origin=random only
    std::size_t feature_count = 0; // F of the space the mask was drawn from

    void validate() const {
        if (indices.empty()) throw DataError("FeatureMask: empty selection rejected");
        for (std::size_t i = 1; i < indices.size(); ++i)
            if (indices[i] <= indices[i - 1])
                throw DataError("FeatureMask: indices must be strictly ascending");
        if (feature_count > 0 && indices.back() >= feature_count)
            throw DataError("FeatureMask: index " + std::to_string(indices.back()) +
                            " out of range for F=" + std::to_string(feature_count));
    }

    std::string origin_token() const {
        if (origin == MaskOrigin::random) return "random:" + std::to_string(seed);
        return to_string(origin);
    }
};

inline FeatureMask make_mask(std::vector<std::size_t> idx, MaskOrigin origin, std::size_t feature_count,
                             std::uint64_t seed = 0) {
    std::sort(idx.begin(), idx.end());
    FeatureMask m;
    m.indices = std::move(idx);
    m.origin = origin;
    m.seed = seed;
    m.feature_count = feature_count;
    m.validate();
    return m;
}

// Text format: "# origin=<kind> n=<n> F=<F>" then one ascending index per line.
inline void save_mask(const std::string& path, const FeatureMask& mask) {
    mask.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write mask file: " + path);
    out << "# origin=" << mask.origin_token() << " n=" << mask.indices.size() << " F=" << mask.feature_count
        << "\n";
    for (std::size_t i : mask.indices) out << i << "\n";
    if (!out) throw DataError("failed writing mask file: " + path);
}

inline FeatureMask load_mask(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open mask file: " + path);
    std::string header;
    if (!std::getline(in, header) || header.rfind("# origin=", 0) != 0)
        throw DataError("malformed mask header in " + path);
    FeatureMask m;
    {
        std::istringstream hs(header.substr(2));
        std::string tok;
        std::size_t n_declared = 0;
        while (hs >> tok) {
            const auto eq = tok.find('=');
            if (eq == std::string::npos) throw DataError("malformed mask header token '" + tok + "' in " + path);
            const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
            if (key == "origin") {
                m.origin = mask_origin_from_string(val);
                const auto colon = val.find(':');
                if (colon != std::string::npos) m.seed = std::stoull(val.substr(colon + 1));
            } else if (key == "n") {
                n_declared = std::stoul(val);
            } else if (key == "F") {
                m.feature_count = std::stoul(val);
            } else {
                throw DataError("unknown mask header key '" + key + "' in " + path);
            }
        }
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            m.indices.push_back(std::stoul(line));
        }
        if (n_declared != m.indices.size())
            throw DataError("mask index count does not match header n in " + path);
    }
    m.validate();
    return m;
}

}  // namespace e2efs
