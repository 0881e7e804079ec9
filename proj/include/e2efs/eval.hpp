#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "e2efs/data.hpp"
#include "e2efs/dsp.hpp"
#include "e2efs/ensemble.hpp"
#include "e2efs/losses.hpp"

namespace e2efs {

struct ConfusionMatrix {
    std::vector<std::vector<std::size_t>> counts;  // rows = true class

    explicit ConfusionMatrix(std::size_t k = 0) : counts(k, std::vector<std::size_t>(k, 0)) {}
    std::size_t classes() const { return counts.size(); }
};

// Mean per-class recall.
inline double uar(const ConfusionMatrix& cm) {
    if (cm.classes() == 0) throw DataError("uar: empty confusion matrix");
    double acc = 0.0;
    for (std::size_t k = 0; k < cm.classes(); ++k) {
        std::size_t row = 0;
        for (std::size_t j = 0; j < cm.classes(); ++j) row += cm.counts[k][j];
        if (row == 0) throw DataError("uar: no examples of class " + std::to_string(k));
        acc += static_cast<double>(cm.counts[k][k]) / static_cast<double>(row);
    }
    return acc / static_cast<double>(cm.classes());
}

struct MetricsRecord {
    // classification
    std::optional<ConfusionMatrix> confusion;
    std::optional<double> uar_value;
    // sequence regression
    std::vector<std::pair<std::string, double>> per_file_pearson;
    std::optional<double> mean_pearson;
    std::optional<double> mean_mse;
    std::size_t degenerate_files = 0;
};

// Aligns a prediction/target pair: equal lengths pass through, otherwise both
// are truncated to the shorter length and the mismatch is recorded.
inline void align_sequences(std::vector<double>& pred, std::vector<double> const*& target,
                            std::vector<double>& target_store, std::vector<TargetLengthRecord>* records,
                            const std::string& id) {
    if (pred.size() == target->size()) return;
    if (records) records->push_back({id, target->size(), pred.size()});
    const std::size_t keep = std::min(pred.size(), target->size());
    pred.resize(keep);
    target_store.assign(target->begin(), target->begin() + static_cast<long>(keep));
    target = &target_store;
}

inline MetricsRecord evaluate(const Ensemble& ens, const std::vector<LabeledExample>& examples,
                              std::vector<TargetLengthRecord>* length_records = nullptr) {
    if (examples.empty()) throw DataError("evaluate: empty split");
    MetricsRecord rec;
    if (ens.spec.task == TaskKind::classification) {
        ConfusionMatrix cm(static_cast<std::size_t>(ens.spec.n_classes));
        for (const auto& ex : examples) {
            if (!ex.label) throw DataError("evaluate: unlabeled example '" + ex.id + "'");
            const auto vote = predict_classification(ens, ex);
            cm.counts[static_cast<std::size_t>(*ex.label)][static_cast<std::size_t>(vote.predicted)]++;
        }
        rec.uar_value = uar(cm);
        rec.confusion = std::move(cm);
    } else {
        double sum_r = 0.0, sum_mse = 0.0;
        for (const auto& ex : examples) {
            if (!ex.target) throw DataError("evaluate: example '" + ex.id + "' has no target");
            std::vector<double> pred = predict_regression(ens, ex);
            const std::vector<double>* target = &*ex.target;
            std::vector<double> target_store;
            align_sequences(pred, target, target_store, length_records, ex.id);
            const PearsonResult r = pearson(pred, *target);
            if (r.degenerate) ++rec.degenerate_files;
            rec.per_file_pearson.emplace_back(ex.id, r.r);
            sum_r += r.r;
            sum_mse += mse(pred, *target);
        }
        rec.mean_pearson = sum_r / static_cast<double>(examples.size());
        rec.mean_mse = sum_mse / static_cast<double>(examples.size());
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Latency benchmarking
// ---------------------------------------------------------------------------

struct BenchmarkReport {
    double mean_ms = 0.0;
    double median_ms = 0.0;
    double p95_ms = 0.0;
    std::size_t examples_measured = 0;
    bool includes_feature_extraction = false;
    std::size_t parameter_count = 0;
    std::size_t ensemble_size = 0;
};

// Pipeline stage timed per example: optional feature extraction from the
// stored waveform, input binding (band selection included), then every
// member's forward pass plus the soft-vote/mean combination.
struct BenchmarkFeatureConfig {
    SpectrogramConfig spect;
    bool preemphasis = false;
    PreEmphasisConfig preemph;
};

namespace detail {

inline void predict_once(const Ensemble& ens, const LabeledExample& ex, const BenchmarkFeatureConfig& fc,
                         bool include_features, double& sink) {
    LabeledExample work;
    const LabeledExample* src = &ex;
    if (include_features) {
        if (!ex.audio) throw DataError("benchmark: include_features needs audio for example '" + ex.id + "'");
        work.id = ex.id;
        work.audio = ex.audio;
        AudioBuffer buf = *ex.audio;
        if (fc.preemphasis) buf = preemphasize(buf, fc.preemph);
        work.inputs.emplace("spect", log_mel_spectrogram(buf, fc.spect));
        src = &work;
    }
    if (ens.spec.task == TaskKind::classification) {
        const auto vote = predict_classification(ens, *src);
        sink += vote.posterior[0];
    } else {
        const auto seq = predict_regression(ens, *src);
        sink += seq.empty() ? 0.0 : seq[0];
    }
}

}  // namespace detail

// Single-threaded warm-cache timing: 5 warm-up evaluations are discarded, the
// per-example latency is the median over `repetitions` timed passes, and the
// report aggregates mean/median/p95 over examples.
inline BenchmarkReport benchmark_latency(const Ensemble& ens, const std::vector<LabeledExample>& examples,
                                         bool include_features, int repetitions,
                                         const BenchmarkFeatureConfig& fc = {}) {
    if (repetitions < 3) throw ConfigError("benchmark: repetitions must be >= 3");
    if (examples.empty()) throw DataError("benchmark: empty dataset");
    using clock = std::chrono::steady_clock;
    double sink = 0.0;
    const int warmup = 5;
    for (int w = 0; w < warmup; ++w)
        detail::predict_once(ens, examples[static_cast<std::size_t>(w) % examples.size()], fc,
                             include_features, sink);

    std::vector<double> per_example(examples.size());
    std::vector<double> reps(static_cast<std::size_t>(repetitions));
    for (std::size_t e = 0; e < examples.size(); ++e) {
        for (int r = 0; r < repetitions; ++r) {
            const auto t0 = clock::now();
            detail::predict_once(ens, examples[e], fc, include_features, sink);
            const auto t1 = clock::now();
            reps[static_cast<std::size_t>(r)] =
                std::chrono::duration<double, std::milli>(t1 - t0).count();
        }
        std::sort(reps.begin(), reps.end());
        per_example[e] = reps[reps.size() / 2];
    }
    if (sink == 12345.6789) std::fprintf(stderr, "benchmark sink\n");  // keep the work observable

    BenchmarkReport report;
    report.examples_measured = examples.size();
    report.includes_feature_extraction = include_features;
    report.parameter_count = count_parameters(ens.spec);
    report.ensemble_size = ens.size();
    std::vector<double> sorted = per_example;
    std::sort(sorted.begin(), sorted.end());
    double total = 0.0;
    for (double v : sorted) total += v;
    report.mean_ms = total / static_cast<double>(sorted.size());
    report.median_ms = sorted[sorted.size() / 2];
    const std::size_t p95_idx =
        std::min(sorted.size() - 1, static_cast<std::size_t>(std::ceil(0.95 * sorted.size())) - 1);
    report.p95_ms = sorted[p95_idx];
    return report;
}

// ---------------------------------------------------------------------------
// Report output
// ---------------------------------------------------------------------------

inline void write_benchmark_csv_header(std::ostream& out) {
    out << "system,n_features,n_members,params,mean_ms,median_ms,p95_ms\n";
}

inline void write_benchmark_csv_row(std::ostream& out, const std::string& system, std::size_t n_features,
                                    const BenchmarkReport& report) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%zu,%.6f,%.6f,%.6f\n", system.c_str(), n_features,
                  report.ensemble_size, report.parameter_count, report.mean_ms, report.median_ms,
                  report.p95_ms);
    out << buf;
}

inline void write_metrics_csv(std::ostream& out, const MetricsRecord& rec) {
    char buf[128];
    if (rec.uar_value) {
        out << "metric,value\n";
        std::snprintf(buf, sizeof buf, "uar,%.17g\n", *rec.uar_value);
        out << buf;
        const auto& cm = *rec.confusion;
        for (std::size_t i = 0; i < cm.classes(); ++i)
            for (std::size_t j = 0; j < cm.classes(); ++j) {
                std::snprintf(buf, sizeof buf, "confusion_%zu_%zu,%zu\n", i, j, cm.counts[i][j]);
                out << buf;
            }
    } else {
        out << "metric,value\n";
        std::snprintf(buf, sizeof buf, "mean_pearson,%.17g\n", *rec.mean_pearson);
        out << buf;
        std::snprintf(buf, sizeof buf, "mean_mse,%.17g\n", *rec.mean_mse);
        out << buf;
        std::snprintf(buf, sizeof buf, "degenerate_files,%zu\n", rec.degenerate_files);
        out << buf;
        for (const auto& [id, r] : rec.per_file_pearson) {
            std::snprintf(buf, sizeof buf, "pearson_%s,%.17g\n", id.c_str(), r);
            out << buf;
        }
    }
}

}  // namespace e2efs
