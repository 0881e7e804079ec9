#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "e2efs/errors.hpp"
#include "e2efs/matrix.hpp"
#include "e2efs/rng.hpp"
#include "e2efs/wav.hpp"

namespace e2efs {

enum class TaskKind { classification, sequence_regression };

inline std::string to_string(TaskKind t) {
    return t == TaskKind::classification ? "classification" : "sequence_regression";
}

inline TaskKind task_from_string(const std::string& s) {
    if (s == "classification") return TaskKind::classification;
    if (s == "sequence_regression") return TaskKind::sequence_regression;
    throw ConfigError("unknown task: " + s);
}

// One labeled example. Feature streams are keyed by name ("spect", "ratio",
// "preemph", "audio", ...). Raw-audio examples may carry the waveform so
// feature extraction can be timed end to end.
struct LabeledExample {
    std::string id;
    std::map<std::string, FeatureMatrix> inputs;
    std::optional<AudioBuffer> audio;
    std::optional<int> label;                   // classification
    std::optional<std::vector<double>> target;  // sequence regression
};

struct DatasetMeta {
    std::string source;  // "synthetic" | "manifest"
    std::uint64_t seed = 0;
    std::vector<std::size_t> planted_bands;  // synthetic classification oracle
    std::vector<std::size_t> driver_bands;   // synthetic regression oracle
    std::vector<std::string> class_names;    // classification label strings in index order
};

struct Dataset {
    TaskKind task = TaskKind::classification;
    std::vector<LabeledExample> train, dev, test;
    DatasetMeta meta;

    const std::vector<LabeledExample>& split(const std::string& name) const {
        if (name == "train") return train;
        if (name == "dev") return dev;
        if (name == "test") return test;
        throw ConfigError("unknown split: " + name);
    }

    void validate() const {
        if (train.empty()) throw DataError("dataset: train split is empty");
        std::set<std::string> ids;
        for (const auto* split : {&train, &dev, &test})
            for (const auto& ex : *split)
                if (!ids.insert(ex.id).second) throw DataError("dataset: duplicate example id '" + ex.id + "'");
    }
};

// ---------------------------------------------------------------------------
// FMAT1 binary feature-matrix container (bit-exact round trip).
// Layout: "FMAT1" | u64 rows | u64 cols | f64 frame_rate |
//         per band: u32 length + UTF-8 label | rows*cols f64 row-major.
// All integers and floats little-endian.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u64le(std::ostream& out, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 8);
}

inline void put_u32le(std::ostream& out, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 4);
}

inline void put_f64le(std::ostream& out, double d) {
    std::uint64_t v;
    static_assert(sizeof v == sizeof d);
    std::memcpy(&v, &d, 8);
    put_u64le(out, v);
}

inline std::uint64_t get_u64le(std::istream& in, const std::string& path) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) throw DataError("corrupt matrix file (truncated): " + path);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

inline std::uint32_t get_u32le(std::istream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw DataError("corrupt matrix file (truncated): " + path);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

inline double get_f64le(std::istream& in, const std::string& path) {
    const std::uint64_t v = get_u64le(in, path);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}

}  // namespace detail

inline void save_matrix(const std::string& path, const FeatureMatrix& m) {
    m.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write matrix file: " + path);
    out.write("FMAT1", 5);
    detail::put_u64le(out, m.values.rows);
    detail::put_u64le(out, m.values.cols);
    detail::put_f64le(out, m.frame_rate);
    for (const auto& label : m.band_labels) {
        detail::put_u32le(out, static_cast<std::uint32_t>(label.size()));
        out.write(label.data(), static_cast<std::streamsize>(label.size()));
    }
    for (double v : m.values.a) detail::put_f64le(out, v);
    if (!out) throw DataError("failed writing matrix file: " + path);
}

inline FeatureMatrix load_matrix(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open matrix file: " + path);
    char magic[5];
    if (!in.read(magic, 5) || std::string(magic, 5) != "FMAT1")
        throw DataError("corrupt matrix file (bad magic): " + path);
    FeatureMatrix m;
    const std::uint64_t rows = detail::get_u64le(in, path);
    const std::uint64_t cols = detail::get_u64le(in, path);
    if (rows < 1 || cols < 1 || rows > (1ull << 40) || cols > (1ull << 32))
        throw DataError("corrupt matrix file (bad dims): " + path);
    m.frame_rate = detail::get_f64le(in, path);
    m.band_labels.resize(cols);
    for (auto& label : m.band_labels) {
        const std::uint32_t len = detail::get_u32le(in, path);
        if (len > (1u << 20)) throw DataError("corrupt matrix file (label length): " + path);
        label.resize(len);
        if (len && !in.read(label.data(), len)) throw DataError("corrupt matrix file (truncated): " + path);
    }
    m.values = Matrix(rows, cols);
    for (double& v : m.values.a) v = detail::get_f64le(in, path);
    m.validate();
    return m;
}

// ---------------------------------------------------------------------------
// Manifest ingestion
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline std::vector<double> read_target_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open target file: " + path);
    std::vector<double> values;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (line.empty()) continue;
        try {
            values.push_back(std::stod(line));
        } catch (const std::exception&) {
            throw DataError("malformed target value '" + line + "' in " + path);
        }
    }
    if (values.empty()) throw DataError("empty target file: " + path);
    return values;
}

}  // namespace detail

// Audio manifest CSV: header "id,wav_path,split,label" then one row per
// example. For classification the label column holds a class string (mapped
// to indices in first-seen order; empty = unlabeled); for regression it holds
// a path to a one-column CSV target sequence. Paths are resolved relative to
// the manifest.
inline Dataset load_audio_dataset(const std::string& manifest_path, TaskKind task) {
    std::ifstream in(manifest_path);
    if (!in) throw DataError("cannot open manifest: " + manifest_path);
    const auto base = std::filesystem::path(manifest_path).parent_path();
    Dataset ds;
    ds.task = task;
    ds.meta.source = "manifest";
    std::string line;
    if (!std::getline(in, line)) throw DataError("empty manifest: " + manifest_path);
    {
        const auto header = detail::split_csv_line(line);
        if (header.size() != 4 || header[0] != "id" || header[1] != "wav_path" || header[2] != "split" ||
            header[3] != "label")
            throw DataError("manifest header must be 'id,wav_path,split,label': " + manifest_path);
    }
    std::map<std::string, int> label_index;
    std::map<std::string, int> id_row;
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line == "\r") continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != 4)
            throw DataError("manifest row " + std::to_string(row) + ": expected 4 columns, got " +
                            std::to_string(cells.size()));
        LabeledExample ex;
        ex.id = cells[0];
        if (auto it = id_row.find(ex.id); it != id_row.end())
            throw DataError("duplicate id '" + ex.id + "' in manifest rows " + std::to_string(it->second) +
                            " and " + std::to_string(row));
        id_row[ex.id] = row;
        const std::string wav = (base / cells[1]).string();
        try {
            ex.audio = read_wav(wav);
        } catch (const DataError& e) {
            throw DataError("manifest row " + std::to_string(row) + ": " + e.what());
        }
        const std::string& split = cells[2];
        if (split != "train" && split != "dev" && split != "test")
            throw DataError("manifest row " + std::to_string(row) + ": unknown split token '" + split + "'");
        if (task == TaskKind::classification) {
            if (!cells[3].empty()) {
                auto [it, inserted] = label_index.try_emplace(cells[3], static_cast<int>(label_index.size()));
                if (inserted) ds.meta.class_names.push_back(cells[3]);
                ex.label = it->second;
            }
        } else {
            if (cells[3].empty())
                throw DataError("manifest row " + std::to_string(row) + ": regression rows need a target path");
            try {
                ex.target = detail::read_target_csv((base / cells[3]).string());
            } catch (const DataError& e) {
                throw DataError("manifest row " + std::to_string(row) + ": " + e.what());
            }
        }
        (split == "train" ? ds.train : split == "dev" ? ds.dev : ds.test).push_back(std::move(ex));
    }
    ds.validate();
    return ds;
}

// Per-file record of a target-length check against the model's output step
// count (sequence tasks). Mismatches are reported, not fatal.
struct TargetLengthRecord {
    std::string id;
    std::size_t target_len = 0;
    std::size_t expected_len = 0;
};

// ---------------------------------------------------------------------------
// Synthetic generators. The planted/driver sets are the ground-truth oracles
// used by the tests; training code never sees them.
// ---------------------------------------------------------------------------

namespace detail {

inline void split_indices(std::size_t n, std::size_t& n_train, std::size_t& n_dev) {
    n_train = n * 6 / 10;
    n_dev = n * 2 / 10;
    if (n_train == 0) n_train = n;  // tiny datasets fall back to train-only
}

inline std::vector<std::string> synthetic_band_labels(std::size_t f) {
    std::vector<std::string> labels(f);
    for (std::size_t i = 0; i < f; ++i) labels[i] = "band_" + std::to_string(i);
    return labels;
}

}  // namespace detail

// Binary task: class 0 cells ~ N(0,1); class 1 adds +effect_size on the
// planted bands. Classes alternate so every split stays balanced; split is
// 60/20/20 in declaration order.
inline Dataset synth_classification(std::uint64_t seed, std::size_t n_examples, std::size_t t_frames,
                                    std::size_t f_bands, const std::vector<std::size_t>& planted,
                                    double effect_size) {
    if (n_examples == 0 || t_frames == 0 || f_bands == 0) throw ConfigError("synth_classification: empty dims");
    for (std::size_t b : planted)
        if (b >= f_bands) throw ConfigError("synth_classification: planted band out of range");
    if (!(effect_size >= 0.0)) throw ConfigError("synth_classification: effect_size must be >= 0");
    Rng rng(seed);
    Dataset ds;
    ds.task = TaskKind::classification;
    ds.meta = {"synthetic", seed, planted, {}, {"class0", "class1"}};
    const auto labels = detail::synthetic_band_labels(f_bands);
    std::size_t n_train = 0, n_dev = 0;
    detail::split_indices(n_examples, n_train, n_dev);
    for (std::size_t i = 0; i < n_examples; ++i) {
        LabeledExample ex;
        char buf[32];
        std::snprintf(buf, sizeof buf, "synthc_%05zu", i);
        ex.id = buf;
        const int cls = static_cast<int>(i % 2);
        ex.label = cls;
        FeatureMatrix fm;
        fm.values = Matrix(t_frames, f_bands);
        for (double& v : fm.values.a) v = rng.normal();
        if (cls == 1)
            for (std::size_t b : planted)
                for (std::size_t t = 0; t < t_frames; ++t) fm.values.at(t, b) += effect_size;
        fm.band_labels = labels;
        fm.frame_rate = 100.0;
        ex.inputs.emplace("spect", std::move(fm));
        (i < n_train ? ds.train : i < n_train + n_dev ? ds.dev : ds.test).push_back(std::move(ex));
    }
    ds.validate();
    return ds;
}

// Sequence task: inputs ~ N(0,1); the target is a moving-average-smoothed sum
// of the driver bands, then scaled by 3 and offset by 5 so that a
// correlation-only model exhibits the scale mismatch on purpose.
inline Dataset synth_regression(std::uint64_t seed, std::size_t n_examples, std::size_t t_frames,
                                std::size_t f_bands, const std::vector<std::size_t>& driver_bands) {
    if (n_examples == 0 || t_frames < 2 || f_bands == 0) throw ConfigError("synth_regression: empty dims");
    if (driver_bands.empty()) throw ConfigError("synth_regression: need at least one driver band");
    for (std::size_t b : driver_bands)
        if (b >= f_bands) throw ConfigError("synth_regression: driver band out of range");
    constexpr double kOffset = 5.0;
    constexpr double kScale = 3.0;
    constexpr int kSmoothHalf = 2;  // centered 5-point moving average
    Rng rng(seed);
    Dataset ds;
    ds.task = TaskKind::sequence_regression;
    ds.meta = {"synthetic", seed, {}, driver_bands, {}};
    const auto labels = detail::synthetic_band_labels(f_bands);
    std::size_t n_train = 0, n_dev = 0;
    detail::split_indices(n_examples, n_train, n_dev);
    const double norm = 1.0 / std::sqrt(static_cast<double>(driver_bands.size()));
    for (std::size_t i = 0; i < n_examples; ++i) {
        LabeledExample ex;
        char buf[32];
        std::snprintf(buf, sizeof buf, "synthr_%05zu", i);
        ex.id = buf;
        FeatureMatrix fm;
        fm.values = Matrix(t_frames, f_bands);
        for (double& v : fm.values.a) v = rng.normal();
        std::vector<double> driver_sum(t_frames, 0.0);
        for (std::size_t t = 0; t < t_frames; ++t) {
            double s = 0.0;
            for (std::size_t b : driver_bands) s += fm.values.at(t, b);
            driver_sum[t] = s * norm;
        }
        std::vector<double> target(t_frames, 0.0);
        for (std::size_t t = 0; t < t_frames; ++t) {
            double acc = 0.0;
            int cnt = 0;
            for (int d = -kSmoothHalf; d <= kSmoothHalf; ++d) {
                const long long u = static_cast<long long>(t) + d;
                if (u >= 0 && u < static_cast<long long>(t_frames)) {
                    acc += driver_sum[static_cast<std::size_t>(u)];
                    ++cnt;
                }
            }
            target[t] = kOffset + kScale * acc / cnt;
        }
        ex.target = std::move(target);
        fm.band_labels = labels;
        fm.frame_rate = 100.0;
        ex.inputs.emplace("spect", std::move(fm));
        (i < n_train ? ds.train : i < n_train + n_dev ? ds.dev : ds.test).push_back(std::move(ex));
    }
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// Feature-dataset directory: manifest.csv (id,split,label,<stream>...),
// one FMAT1 file per example and stream, per-example target CSVs for
// sequence tasks, and meta.txt carrying provenance (incl. synthetic oracles).
// ---------------------------------------------------------------------------

inline std::vector<std::string> dataset_streams(const Dataset& ds) {
    std::set<std::string> names;
    for (const auto* split : {&ds.train, &ds.dev, &ds.test})
        for (const auto& ex : *split)
            for (const auto& [name, fm] : ex.inputs) names.insert(name);
    return {names.begin(), names.end()};
}

inline std::map<std::string, std::size_t> stream_bands(const Dataset& ds) {
    std::map<std::string, std::size_t> out;
    if (ds.train.empty()) throw DataError("dataset: train split is empty");
    for (const auto& [name, fm] : ds.train.front().inputs) out[name] = fm.bands();
    return out;
}

inline void save_dataset_dir(const std::string& dir, const Dataset& ds) {
    ds.validate();
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const auto streams = dataset_streams(ds);
    std::ofstream manifest(fs::path(dir) / "manifest.csv", std::ios::binary);
    if (!manifest) throw DataError("cannot write dataset manifest in " + dir);
    manifest << "id,split,label";
    for (const auto& s : streams) manifest << "," << s;
    manifest << "\n";
    if (ds.task == TaskKind::sequence_regression) fs::create_directories(fs::path(dir) / "targets");
    auto emit = [&](const LabeledExample& ex, const std::string& split) {
        manifest << ex.id << "," << split << ",";
        if (ds.task == TaskKind::classification) {
            if (ex.label) {
                if (static_cast<std::size_t>(*ex.label) >= ds.meta.class_names.size())
                    throw DataError("dataset: label index out of range for example '" + ex.id + "'");
                manifest << ds.meta.class_names[static_cast<std::size_t>(*ex.label)];
            }
        } else {
            if (!ex.target) throw DataError("dataset: example '" + ex.id + "' has no target");
            const std::string rel = "targets/" + ex.id + ".csv";
            std::ofstream t(fs::path(dir) / rel, std::ios::binary);
            char buf[40];
            for (double v : *ex.target) {
                std::snprintf(buf, sizeof buf, "%.17g\n", v);
                t << buf;
            }
            if (!t) throw DataError("failed writing target file for '" + ex.id + "'");
            manifest << rel;
        }
        for (const auto& s : streams) {
            manifest << ",";
            const auto it = ex.inputs.find(s);
            if (it == ex.inputs.end()) continue;
            const std::string rel = ex.id + "." + s + ".fmat";
            save_matrix((fs::path(dir) / rel).string(), it->second);
            manifest << rel;
        }
        manifest << "\n";
    };
    for (const auto& ex : ds.train) emit(ex, "train");
    for (const auto& ex : ds.dev) emit(ex, "dev");
    for (const auto& ex : ds.test) emit(ex, "test");
    if (!manifest) throw DataError("failed writing dataset manifest in " + dir);

    std::ofstream meta(fs::path(dir) / "meta.txt", std::ios::binary);
    meta << "task=" << to_string(ds.task) << "\n";
    meta << "source=" << ds.meta.source << "\n";
    meta << "seed=" << ds.meta.seed << "\n";
    auto put_list = [&](const char* key, const std::vector<std::size_t>& v) {
        if (v.empty()) return;
        meta << key << "=";
        for (std::size_t i = 0; i < v.size(); ++i) meta << (i ? "," : "") << v[i];
        meta << "\n";
    };
    put_list("planted", ds.meta.planted_bands);
    put_list("drivers", ds.meta.driver_bands);
    if (!ds.meta.class_names.empty()) {
        meta << "classes=";
        for (std::size_t i = 0; i < ds.meta.class_names.size(); ++i)
            meta << (i ? "," : "") << ds.meta.class_names[i];
        meta << "\n";
    }
    if (!meta) throw DataError("failed writing dataset meta in " + dir);
}

inline Dataset load_dataset_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    Dataset ds;
    {
        std::ifstream meta(fs::path(dir) / "meta.txt");
        if (!meta) throw DataError("cannot open dataset meta in " + dir);
        std::string line;
        while (std::getline(meta, line)) {
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw DataError("malformed meta line in " + dir + ": " + line);
            const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
            if (key == "task") ds.task = task_from_string(val);
            else if (key == "source") ds.meta.source = val;
            else if (key == "seed") ds.meta.seed = std::stoull(val);
            else if (key == "planted" || key == "drivers") {
                std::vector<std::size_t> v;
                std::string cur;
                for (char c : val + ",") {
                    if (c == ',') {
                        if (!cur.empty()) v.push_back(std::stoul(cur));
                        cur.clear();
                    } else cur += c;
                }
                (key == "planted" ? ds.meta.planted_bands : ds.meta.driver_bands) = std::move(v);
            } else if (key == "classes") {
                std::string cur;
                for (char c : val + ",") {
                    if (c == ',') {
                        if (!cur.empty()) ds.meta.class_names.push_back(cur);
                        cur.clear();
                    } else cur += c;
                }
            }
        }
    }
    std::ifstream manifest(fs::path(dir) / "manifest.csv");
    if (!manifest) throw DataError("cannot open dataset manifest in " + dir);
    std::string line;
    if (!std::getline(manifest, line)) throw DataError("empty dataset manifest in " + dir);
    const auto header = detail::split_csv_line(line);
    if (header.size() < 3 || header[0] != "id" || header[1] != "split" || header[2] != "label")
        throw DataError("dataset manifest header must start with 'id,split,label' in " + dir);
    std::map<std::string, int> label_index;
    for (std::size_t i = 0; i < ds.meta.class_names.size(); ++i)
        label_index[ds.meta.class_names[i]] = static_cast<int>(i);
    int row = 1;
    while (std::getline(manifest, line)) {
        ++row;
        if (line.empty() || line == "\r") continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw DataError("dataset manifest row " + std::to_string(row) + ": column count mismatch");
        LabeledExample ex;
        ex.id = cells[0];
        const std::string& split = cells[1];
        if (split != "train" && split != "dev" && split != "test")
            throw DataError("dataset manifest row " + std::to_string(row) + ": unknown split '" + split + "'");
        if (ds.task == TaskKind::classification) {
            if (!cells[2].empty()) {
                auto [it, inserted] = label_index.try_emplace(cells[2], static_cast<int>(label_index.size()));
                if (inserted) ds.meta.class_names.push_back(cells[2]);
                ex.label = it->second;
            }
        } else {
            if (cells[2].empty())
                throw DataError("dataset manifest row " + std::to_string(row) + ": missing target path");
            ex.target = detail::read_target_csv((fs::path(dir) / cells[2]).string());
        }
        for (std::size_t c = 3; c < header.size(); ++c) {
            if (cells[c].empty()) continue;
            ex.inputs.emplace(header[c], load_matrix((fs::path(dir) / cells[c]).string()));
        }
        (split == "train" ? ds.train : split == "dev" ? ds.dev : ds.test).push_back(std::move(ex));
    }
    ds.validate();
    return ds;
}

}  // namespace e2efs
