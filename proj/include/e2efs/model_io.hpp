#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "e2efs/errors.hpp"
#include "e2efs/losses.hpp"
#include "e2efs/mask.hpp"
#include "e2efs/nn.hpp"

namespace e2efs {

// Model container: magic "E2EFS", version byte 0x01, UTF-8 key=value header
// terminated by a blank line, then the parameter vector as little-endian
// IEEE-754 doubles in index-map order. Round trips are bit-identical.
struct ModelRecord {
    NetworkSpec spec;
    Parameters params;
    LossSpec loss;
    std::optional<FeatureMask> mask;
};

namespace detail {

inline void put_f64le_stream(std::ostream& out, double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 8);
}

inline double get_f64le_stream(std::istream& in, const std::string& path) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) throw DataError("truncated model file: " + path);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}

inline std::string mask_csv(const FeatureMask& mask) {
    std::ostringstream os;
    for (std::size_t i = 0; i < mask.indices.size(); ++i) {
        if (i) os << ",";
        os << mask.indices[i];
    }
    return os.str();
}

inline std::vector<std::size_t> parse_index_csv(const std::string& s) {
    std::vector<std::size_t> out;
    std::string cur;
    for (char c : s + ",") {
        if (c == ',') {
            if (!cur.empty()) out.push_back(std::stoul(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    return out;
}

}  // namespace detail

inline void save_model(const std::string& path, const ModelRecord& model) {
    validate_spec(model.spec);
    if (model.params.values.size() != count_parameters(model.spec))
        throw DataError("save_model: parameter count does not match spec");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write model file: " + path);
    out.write("E2EFS", 5);
    out.put(0x01);
    out << "spec=" << spec_to_string(model.spec) << "\n";
    out << "seed=" << model.params.seed << "\n";
    out << "loss=" << loss_id(model.loss) << "\n";
    if (model.mask) {
        out << "mask=" << detail::mask_csv(*model.mask) << "\n";
        out << "mask_origin=" << model.mask->origin_token() << "\n";
        out << "mask_space=" << model.mask->feature_count << "\n";
    }
    out << "params=" << model.params.values.size() << "\n";
    out << "\n";
    for (double v : model.params.values) detail::put_f64le_stream(out, v);
    if (!out) throw DataError("failed writing model file: " + path);
}

inline ModelRecord load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open model file: " + path);
    char magic[5];
    if (!in.read(magic, 5) || std::string(magic, 5) != "E2EFS")
        throw DataError("not a model file (bad magic): " + path);
    const int version = in.get();
    if (version != 0x01) throw DataError("unsupported model version in " + path);
    std::map<std::string, std::string> header;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) break;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw DataError("malformed model header line in " + path);
        header[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto need = [&](const std::string& key) {
        const auto it = header.find(key);
        if (it == header.end()) throw DataError("model header missing '" + key + "' in " + path);
        return it->second;
    };
    ModelRecord model;
    model.spec = spec_from_string(need("spec"));
    model.loss = parse_loss_id(need("loss"));
    model.params.seed = std::stoull(need("seed"));
    if (header.count("mask")) {
        FeatureMask mask;
        mask.indices = detail::parse_index_csv(header.at("mask"));
        if (header.count("mask_origin")) {
            const std::string tok = header.at("mask_origin");
            mask.origin = mask_origin_from_string(tok);
            const auto colon = tok.find(':');
            if (colon != std::string::npos) mask.seed = std::stoull(tok.substr(colon + 1));
        }
        if (header.count("mask_space")) mask.feature_count = std::stoul(header.at("mask_space"));
        mask.validate();
        model.mask = std::move(mask);
    }
    const std::size_t n = std::stoul(need("params"));
    if (n != count_parameters(model.spec))
        throw DataError("model parameter count does not match spec in " + path);
    model.params.values.resize(n);
    for (double& v : model.params.values) v = detail::get_f64le_stream(in, path);
    return model;
}

}  // namespace e2efs
