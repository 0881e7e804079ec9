#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "e2efs/data.hpp"
#include "e2efs/dsp.hpp"
#include "e2efs/errors.hpp"
#include "e2efs/losses.hpp"
#include "e2efs/nn.hpp"
#include "e2efs/selection.hpp"
#include "e2efs/train.hpp"

namespace e2efs {

// Line-based key=value configuration with dotted sections. '#' starts a
// comment; unknown keys are rejected.
struct RunConfig {
    TaskKind task = TaskKind::classification;

    // feature extraction
    int feature_sample_rate = 16000;
    SpectrogramConfig spect;
    PreEmphasisConfig preemph;
    int butter_order = 5;
    double butter_cutoff = 400.0;
    double boundary_hz = 400.0;
    std::vector<std::string> feature_streams = {"spect"};  // spect | preemph | ratio

    // network; width 0 = preset default (msc: 1,1; breathing_spectral: 8,6)
    std::string spec_preset = "msc";  // msc | breathing_raw | breathing_spectral | fusion
    int net_filters = 64;
    int net_width1 = 0;
    int net_width2 = 0;
    int net_lstm = 100;
    int net_dense = 100;
    int net_classes = 2;
    std::vector<std::string> fusion_branches = {"spect", "selected"};

    // training
    TrainConfig train;
    std::size_t ensemble_n = 10;
    std::uint64_t base_seed = 1;
    bool parallel = false;
    LossSpec loss;

    // selection
    std::string select_origin = "output_grad";  // output_grad|loss_grad|lowest|random|least_important|sffs
    std::size_t select_n = 10;
    std::uint64_t select_seed = 7;
    SffsConfig sffs;

    // synthetic data
    std::size_t synth_examples = 200;
    std::size_t synth_frames = 12;
    std::size_t synth_bands = 64;
    std::vector<std::size_t> synth_planted = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    double synth_effect = 2.0;
    std::vector<std::size_t> synth_drivers = {0, 1, 2, 3};
    std::uint64_t synth_seed = 11;

    // evaluation / benchmarking
    std::string eval_split = "dev";
    int bench_repetitions = 5;
    bool bench_include_features = true;

    std::map<std::string, std::string> raw;  // parsed key=value pairs, for snapshots
};

namespace detail {

inline std::vector<std::size_t> parse_size_list(const std::string& s, const std::string& key) {
    std::vector<std::size_t> out;
    std::string cur;
    for (char c : s + ",") {
        if (c == ',') {
            if (!cur.empty()) {
                try {
                    out.push_back(std::stoul(cur));
                } catch (const std::exception&) {
                    throw ConfigError("config: malformed integer list for " + key);
                }
            }
            cur.clear();
        } else if (c != ' ') {
            cur += c;
        }
    }
    return out;
}

inline std::vector<std::string> parse_string_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s + ",") {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else if (c != ' ') {
            cur += c;
        }
    }
    return out;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
    if (s == "1" || s == "true" || s == "yes") return true;
    if (s == "0" || s == "false" || s == "no") return false;
    throw ConfigError("config: boolean expected for " + key);
}

}  // namespace detail

inline void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    auto as_int = [&]() {
        try {
            return std::stoi(value);
        } catch (const std::exception&) {
            throw ConfigError("config: integer expected for " + key);
        }
    };
    auto as_u64 = [&]() {
        try {
            return static_cast<std::uint64_t>(std::stoull(value));
        } catch (const std::exception&) {
            throw ConfigError("config: integer expected for " + key);
        }
    };
    auto as_size = [&]() {
        try {
            return static_cast<std::size_t>(std::stoul(value));
        } catch (const std::exception&) {
            throw ConfigError("config: integer expected for " + key);
        }
    };
    auto as_double = [&]() {
        try {
            return std::stod(value);
        } catch (const std::exception&) {
            throw ConfigError("config: number expected for " + key);
        }
    };

    if (key == "task") cfg.task = task_from_string(value);
    else if (key == "feature.sample_rate") cfg.feature_sample_rate = as_int();
    else if (key == "feature.n_fft") cfg.spect.n_fft = as_int();
    else if (key == "feature.hop") cfg.spect.hop = as_int();
    else if (key == "feature.n_mel") cfg.spect.n_mel = as_int();
    else if (key == "feature.fmin") cfg.spect.fmin = as_double();
    else if (key == "feature.fmax") cfg.spect.fmax = as_double();
    else if (key == "feature.log_floor") cfg.spect.log_floor = as_double();
    else if (key == "feature.preemphasis") cfg.preemph.coefficient = as_double();
    else if (key == "feature.butter_order") cfg.butter_order = as_int();
    else if (key == "feature.butter_cutoff") cfg.butter_cutoff = as_double();
    else if (key == "feature.boundary_hz") cfg.boundary_hz = as_double();
    else if (key == "feature.streams") cfg.feature_streams = detail::parse_string_list(value);
    else if (key == "spec.preset") cfg.spec_preset = value;
    else if (key == "spec.filters") cfg.net_filters = as_int();
    else if (key == "spec.width1") cfg.net_width1 = as_int();
    else if (key == "spec.width2") cfg.net_width2 = as_int();
    else if (key == "spec.lstm") cfg.net_lstm = as_int();
    else if (key == "spec.dense") cfg.net_dense = as_int();
    else if (key == "spec.classes") cfg.net_classes = as_int();
    else if (key == "spec.fusion_branches") cfg.fusion_branches = detail::parse_string_list(value);
    else if (key == "train.learning_rate") cfg.train.learning_rate = as_double();
    else if (key == "train.batch_size") cfg.train.batch_size = as_int();
    else if (key == "train.epochs") cfg.train.epochs = as_int();
    else if (key == "train.beta1") cfg.train.beta1 = as_double();
    else if (key == "train.beta2") cfg.train.beta2 = as_double();
    else if (key == "train.epsilon") cfg.train.epsilon = as_double();
    else if (key == "ensemble.n") cfg.ensemble_n = as_size();
    else if (key == "ensemble.base_seed") cfg.base_seed = as_u64();
    else if (key == "ensemble.parallel") cfg.parallel = detail::parse_bool(value, key);
    else if (key == "loss") cfg.loss = parse_loss_id(value);
    else if (key == "select.origin") cfg.select_origin = value;
    else if (key == "select.n") cfg.select_n = as_size();
    else if (key == "select.seed") cfg.select_seed = as_u64();
    else if (key == "sffs.iterations") cfg.sffs.iterations = as_int();
    else if (key == "sffs.eta0") cfg.sffs.eta0 = as_double();
    else if (key == "sffs.lambda") cfg.sffs.lambda = as_double();
    else if (key == "synth.examples") cfg.synth_examples = as_size();
    else if (key == "synth.frames") cfg.synth_frames = as_size();
    else if (key == "synth.bands") cfg.synth_bands = as_size();
    else if (key == "synth.planted") cfg.synth_planted = detail::parse_size_list(value, key);
    else if (key == "synth.effect_size") cfg.synth_effect = as_double();
    else if (key == "synth.drivers") cfg.synth_drivers = detail::parse_size_list(value, key);
    else if (key == "synth.seed") cfg.synth_seed = as_u64();
    else if (key == "eval.split") cfg.eval_split = value;
    else if (key == "bench.repetitions") cfg.bench_repetitions = as_int();
    else if (key == "bench.include_features") cfg.bench_include_features = detail::parse_bool(value, key);
    else throw ConfigError("config: unknown key '" + key + "'");
    cfg.raw[key] = value;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    RunConfig cfg;
    std::string line;
    int row = 0;
    while (std::getline(in, line)) {
        ++row;
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        std::size_t start = 0;
        while (start < line.size() && line[start] == ' ') ++start;
        if (start >= line.size() || line[start] == '#') continue;
        const auto eq = line.find('=', start);
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(row) + ": expected key=value");
        apply_config_key(cfg, line.substr(start, eq - start), line.substr(eq + 1));
    }
    return cfg;
}

inline void write_config_snapshot(const std::string& path, const RunConfig& cfg) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write config snapshot: " + path);
    for (const auto& [k, v] : cfg.raw) out << k << "=" << v << "\n";
    if (!out) throw DataError("failed writing config snapshot: " + path);
}

// Builds the network described by the preset keys for the given input bands.
inline NetworkSpec build_spec(const RunConfig& cfg,
                              const std::map<std::string, std::size_t>& stream_bands) {
    auto bands_of = [&](const std::string& name) {
        const auto it = stream_bands.find(name);
        if (it == stream_bands.end()) throw DataError("config: no stream '" + name + "' in dataset");
        return static_cast<int>(it->second);
    };
    if (cfg.spec_preset == "msc") {
        const int w1 = cfg.net_width1 > 0 ? cfg.net_width1 : 1;
        const int w2 = cfg.net_width2 > 0 ? cfg.net_width2 : 1;
        return make_msc_spec(bands_of("spect"), cfg.net_classes, cfg.net_filters, w1, w2, cfg.net_lstm,
                             cfg.net_dense);
    }
    if (cfg.spec_preset == "breathing_spectral") {
        const int w1 = cfg.net_width1 > 0 ? cfg.net_width1 : 8;
        const int w2 = cfg.net_width2 > 0 ? cfg.net_width2 : 6;
        return make_breathing_spectral_spec(bands_of("spect"), cfg.net_filters, w1, w2, cfg.net_lstm,
                                            cfg.net_dense);
    }
    if (cfg.spec_preset == "breathing_raw")
        return make_breathing_raw_spec(cfg.net_filters, cfg.net_filters * 2, cfg.net_filters * 4,
                                       cfg.net_lstm, cfg.net_dense);
    if (cfg.spec_preset == "fusion") {
        const int w1 = cfg.net_width1 > 0 ? cfg.net_width1 : 1;
        const int w2 = cfg.net_width2 > 0 ? cfg.net_width2 : 1;
        std::vector<std::pair<std::string, int>> branches;
        for (const auto& name : cfg.fusion_branches) branches.emplace_back(name, bands_of(name));
        return make_fusion_spec(cfg.task, branches, cfg.net_classes, cfg.net_filters, w1, w2, cfg.net_lstm,
                                cfg.net_dense);
    }
    throw ConfigError("config: unknown spec.preset '" + cfg.spec_preset + "'");
}

}  // namespace e2efs
