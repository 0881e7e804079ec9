#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "e2efs/data.hpp"
#include "e2efs/ensemble.hpp"
#include "e2efs/mask.hpp"
#include "e2efs/nn.hpp"
#include "e2efs/rng.hpp"

namespace e2efs {

enum class ImportanceSource { output, loss };

inline std::string to_string(ImportanceSource s) {
    return s == ImportanceSource::output ? "output" : "loss";
}

// Per-band accumulated |gradient| scores R(x_i): the sum over the dataset and
// over time frames of the absolute gradient w.r.t. each input band.
struct ImportanceVector {
    std::vector<double> scores;
    ImportanceSource source = ImportanceSource::output;
    std::string model_id;
    std::string scalar_choice;  // which scalar was differentiated, recorded for audit
};

// Output mode differentiates the true-class posterior when a label exists,
// otherwise the argmax-class posterior; sequence models use the sum of the
// output sequence. Loss mode backpropagates the training loss and requires
// labels/targets.
inline ImportanceVector importance(const NetworkSpec& spec, const Parameters& params,
                                   const std::vector<LabeledExample>& examples, ImportanceSource source,
                                   const LossSpec& loss, const std::optional<FeatureMask>& mask = std::nullopt,
                                   const std::string& branch = "") {
    if (examples.empty()) throw DataError("importance: empty dataset");
    validate_spec(spec);
    const std::string target_branch = branch.empty() ? spec.branches.front().input_name : branch;
    bool branch_found = false;
    for (const auto& br : spec.branches) branch_found |= br.input_name == target_branch;
    if (!branch_found) throw DataError("importance: network has no branch '" + target_branch + "'");

    ImportanceVector iv;
    iv.source = source;
    for (const auto& ex : examples) {
        const auto inputs = bind_inputs(spec, mask, ex);
        GradientBundle bundle;
        if (source == ImportanceSource::loss) {
            if (spec.task == TaskKind::classification) {
                if (!ex.label)
                    throw DataError("importance: loss-gradient mode needs labels (example '" + ex.id + "')");
                bundle = backward(spec, params, inputs, loss, *ex.label).second;
            } else {
                if (!ex.target)
                    throw DataError("importance: loss-gradient mode needs targets (example '" + ex.id + "')");
                bundle = backward(spec, params, inputs, loss, *ex.target).second;
            }
            iv.scalar_choice = "loss:" + loss_id(loss);
        } else {
            if (spec.task == TaskKind::classification) {
                int unit;
                if (ex.label) {
                    unit = *ex.label;
                    iv.scalar_choice = "posterior:true_class";
                } else {
                    const Prediction p = forward(spec, params, inputs);
                    unit = 0;
                    for (std::size_t k = 1; k < p.posterior.size(); ++k)
                        if (p.posterior[k] > p.posterior[static_cast<std::size_t>(unit)])
                            unit = static_cast<int>(k);
                    iv.scalar_choice = "posterior:argmax_class";
                }
                bundle = output_gradient(spec, params, inputs, OutputUnit::cls(unit));
            } else {
                bundle = output_gradient(spec, params, inputs, OutputUnit::sum());
                iv.scalar_choice = "sum_of_outputs";
            }
        }
        const Matrix& g = bundle.input_grads.at(target_branch);
        if (iv.scores.empty()) iv.scores.assign(g.cols, 0.0);
        if (iv.scores.size() != g.cols) throw DataError("importance: inconsistent band count across examples");
        for (std::size_t t = 0; t < g.rows; ++t)
            for (std::size_t j = 0; j < g.cols; ++j) iv.scores[j] += std::fabs(g.at(t, j));
    }
    return iv;
}

// Indices of the n largest scores; ties prefer the larger score, then the
// lower index. Returned ascending.
inline std::vector<std::size_t> top_n(const ImportanceVector& iv, std::size_t n) {
    if (n < 1 || n > iv.scores.size())
        throw DataError("top_n: n=" + std::to_string(n) + " out of range for F=" +
                        std::to_string(iv.scores.size()));
    std::vector<std::size_t> idx(iv.scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (iv.scores[a] != iv.scores[b]) return iv.scores[a] > iv.scores[b];
        return a < b;
    });
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline std::vector<std::size_t> bottom_n(const ImportanceVector& iv, std::size_t n) {
    if (n < 1 || n > iv.scores.size())
        throw DataError("bottom_n: n=" + std::to_string(n) + " out of range for F=" +
                        std::to_string(iv.scores.size()));
    std::vector<std::size_t> idx(iv.scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (iv.scores[a] != iv.scores[b]) return iv.scores[a] < iv.scores[b];
        return a < b;
    });
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
    return idx;
}

// Vote bookkeeping from the per-member nominations.
struct VoteTally {
    std::vector<std::size_t> votes;
    std::size_t n_models = 0;
    std::vector<double> summed_scores;  // sum of raw per-member scores
};

struct SelectionResult {
    FeatureMask mask;
    VoteTally tally;
    std::vector<ImportanceVector> member_importance;
};

namespace detail {

inline std::vector<std::size_t> rank_by_votes(const VoteTally& tally, std::size_t n, bool prefer_high_score) {
    std::vector<std::size_t> idx(tally.votes.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (tally.votes[a] != tally.votes[b]) return tally.votes[a] > tally.votes[b];
        if (tally.summed_scores[a] != tally.summed_scores[b])
            return prefer_high_score ? tally.summed_scores[a] > tally.summed_scores[b]
                                     : tally.summed_scores[a] < tally.summed_scores[b];
        return a < b;
    });
    idx.resize(n);
    return idx;
}

}  // namespace detail

// Every member nominates its top-n bands; the final mask is the n bands
// ranked by (vote count desc, summed importance desc, index asc).
inline SelectionResult majority_vote_select(const Ensemble& ens, const std::vector<LabeledExample>& examples,
                                            ImportanceSource source, std::size_t n) {
    SelectionResult res;
    res.tally.n_models = ens.size();
    for (std::size_t i = 0; i < ens.members.size(); ++i) {
        ImportanceVector iv = importance(ens.spec, ens.members[i], examples, source, ens.loss, ens.mask);
        iv.model_id = "member_" + std::to_string(i);
        if (res.tally.votes.empty()) {
            res.tally.votes.assign(iv.scores.size(), 0);
            res.tally.summed_scores.assign(iv.scores.size(), 0.0);
        }
        for (const std::size_t b : top_n(iv, n)) ++res.tally.votes[b];
        for (std::size_t j = 0; j < iv.scores.size(); ++j) res.tally.summed_scores[j] += iv.scores[j];
        res.member_importance.push_back(std::move(iv));
    }
    const auto chosen = detail::rank_by_votes(res.tally, n, true);
    res.mask = make_mask(chosen, source == ImportanceSource::output ? MaskOrigin::output_grad
                                                                    : MaskOrigin::loss_grad,
                         res.tally.votes.size());
    return res;
}

// Baselines: the n lowest band indices, a seeded random draw, or the
// majority vote over reversed per-member rankings.
inline FeatureMask lowest_mask(std::size_t n, std::size_t f) {
    if (n < 1 || n > f) throw DataError("lowest baseline: n out of range");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    return make_mask(idx, MaskOrigin::lowest, f);
}

inline FeatureMask random_mask(std::size_t n, std::size_t f, std::uint64_t seed) {
    if (n < 1 || n > f) throw DataError("random baseline: n out of range");
    std::vector<std::size_t> all(f);
    std::iota(all.begin(), all.end(), 0);
    Rng rng(seed);
    rng.shuffle(all);
    all.resize(n);
    return make_mask(all, MaskOrigin::random, f, seed);
}

inline SelectionResult least_important_select(const Ensemble& ens,
                                              const std::vector<LabeledExample>& examples,
                                              ImportanceSource source, std::size_t n) {
    SelectionResult res;
    res.tally.n_models = ens.size();
    for (std::size_t i = 0; i < ens.members.size(); ++i) {
        ImportanceVector iv = importance(ens.spec, ens.members[i], examples, source, ens.loss, ens.mask);
        iv.model_id = "member_" + std::to_string(i);
        if (res.tally.votes.empty()) {
            res.tally.votes.assign(iv.scores.size(), 0);
            res.tally.summed_scores.assign(iv.scores.size(), 0.0);
        }
        for (const std::size_t b : bottom_n(iv, n)) ++res.tally.votes[b];
        for (std::size_t j = 0; j < iv.scores.size(); ++j) res.tally.summed_scores[j] += iv.scores[j];
        res.member_importance.push_back(std::move(iv));
    }
    const auto chosen = detail::rank_by_votes(res.tally, n, false);
    res.mask = make_mask(chosen, MaskOrigin::least_important, res.tally.votes.size());
    return res;
}

// ---------------------------------------------------------------------------
// Sequential forward feature selection with linear hinge-loss proxies.
// ---------------------------------------------------------------------------

struct SffsConfig {
    int iterations = 200;
    double eta0 = 0.5;
    double lambda = 1e-3;

    void validate() const {
        if (iterations < 1) throw ConfigError("sffs: iterations must be >= 1");
        if (!(eta0 > 0.0) || !(lambda >= 0.0)) throw ConfigError("sffs: bad proxy hyper-parameters");
    }
};

struct SffsResult {
    FeatureMask mask;
    std::size_t trained_model_count = 0;
};

namespace detail {

// Fixed-length proxy features: per-band time-averaged values, standardized
// with train-split statistics.
inline std::vector<std::vector<double>> band_means(const std::vector<LabeledExample>& examples,
                                                   const std::string& stream) {
    std::vector<std::vector<double>> out;
    out.reserve(examples.size());
    for (const auto& ex : examples) {
        const auto it = ex.inputs.find(stream);
        if (it == ex.inputs.end()) throw DataError("sffs: example '" + ex.id + "' missing stream '" + stream + "'");
        const Matrix& m = it->second.values;
        std::vector<double> mean(m.cols, 0.0);
        for (std::size_t t = 0; t < m.rows; ++t)
            for (std::size_t j = 0; j < m.cols; ++j) mean[j] += m.at(t, j);
        for (double& v : mean) v /= static_cast<double>(m.rows);
        out.push_back(std::move(mean));
    }
    return out;
}

struct LinearProxy {
    std::vector<double> w;
    double b = 0.0;
};

// Deterministic full-batch subgradient descent on hinge loss + L2.
inline LinearProxy train_linear_proxy(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                                      const std::vector<std::size_t>& cols, const SffsConfig& cfg) {
    LinearProxy p;
    p.w.assign(cols.size(), 0.0);
    const double n_inv = 1.0 / static_cast<double>(x.size());
    std::vector<double> gw(cols.size());
    for (int it = 0; it < cfg.iterations; ++it) {
        std::fill(gw.begin(), gw.end(), 0.0);
        double gb = 0.0;
        for (std::size_t e = 0; e < x.size(); ++e) {
            const double label = y[e] == 1 ? 1.0 : -1.0;
            double margin = p.b;
            for (std::size_t j = 0; j < cols.size(); ++j) margin += p.w[j] * x[e][cols[j]];
            if (label * margin < 1.0) {
                for (std::size_t j = 0; j < cols.size(); ++j) gw[j] -= label * x[e][cols[j]];
                gb -= label;
            }
        }
        const double eta = cfg.eta0 / (1.0 + cfg.eta0 * cfg.lambda * it);
        for (std::size_t j = 0; j < cols.size(); ++j)
            p.w[j] -= eta * (cfg.lambda * p.w[j] + gw[j] * n_inv);
        p.b -= eta * gb * n_inv;
    }
    return p;
}

inline double proxy_uar(const LinearProxy& p, const std::vector<std::vector<double>>& x,
                        const std::vector<int>& y, const std::vector<std::size_t>& cols) {
    std::size_t tp = 0, tn = 0, pos = 0, neg = 0;
    for (std::size_t e = 0; e < x.size(); ++e) {
        double margin = p.b;
        for (std::size_t j = 0; j < cols.size(); ++j) margin += p.w[j] * x[e][cols[j]];
        const int pred = margin >= 0.0 ? 1 : 0;
        if (y[e] == 1) {
            ++pos;
            if (pred == 1) ++tp;
        } else {
            ++neg;
            if (pred == 0) ++tn;
        }
    }
    const double r1 = pos ? static_cast<double>(tp) / pos : 0.0;
    const double r0 = neg ? static_cast<double>(tn) / neg : 0.0;
    return 0.5 * (r0 + r1);
}

}  // namespace detail

// Greedy forward selection: each step trains one proxy per unselected
// candidate on (selected + candidate) and keeps the candidate with the best
// dev UAR (ties toward the lower index). Trains exactly
// sum_{k=0}^{n-1}(F - k) proxies.
inline SffsResult sffs(const std::vector<LabeledExample>& train_split,
                       const std::vector<LabeledExample>& dev_split, std::size_t n,
                       const SffsConfig& cfg = {}, const std::string& stream = "spect") {
    cfg.validate();
    if (train_split.empty() || dev_split.empty()) throw DataError("sffs: needs train and dev examples");
    std::vector<int> y_train, y_dev;
    for (const auto& ex : train_split) {
        if (!ex.label) throw DataError("sffs: unlabeled example '" + ex.id + "'");
        if (*ex.label < 0 || *ex.label > 1) throw DataError("sffs: binary classification only");
        y_train.push_back(*ex.label);
    }
    for (const auto& ex : dev_split) {
        if (!ex.label) throw DataError("sffs: unlabeled example '" + ex.id + "'");
        y_dev.push_back(*ex.label);
    }
    if (std::set<int>(y_train.begin(), y_train.end()).size() < 2)
        throw DataError("sffs: training split contains a single class");

    auto x_train = detail::band_means(train_split, stream);
    auto x_dev = detail::band_means(dev_split, stream);
    const std::size_t f = x_train.front().size();
    if (n < 1 || n > f) throw DataError("sffs: n out of range");

    // standardize with train statistics
    std::vector<double> mean(f, 0.0), sd(f, 0.0);
    for (const auto& row : x_train)
        for (std::size_t j = 0; j < f; ++j) mean[j] += row[j];
    for (double& v : mean) v /= static_cast<double>(x_train.size());
    for (const auto& row : x_train)
        for (std::size_t j = 0; j < f; ++j) sd[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
    for (double& v : sd) v = std::sqrt(std::max(v / static_cast<double>(x_train.size()), 1e-12));
    for (auto* set : {&x_train, &x_dev})
        for (auto& row : *set)
            for (std::size_t j = 0; j < f; ++j) row[j] = (row[j] - mean[j]) / sd[j];

    SffsResult res;
    std::vector<std::size_t> selected;
    std::vector<bool> used(f, false);
    for (std::size_t step = 0; step < n; ++step) {
        double best_uar = -1.0;
        std::size_t best_candidate = f;
        for (std::size_t cand = 0; cand < f; ++cand) {
            if (used[cand]) continue;
            std::vector<std::size_t> cols = selected;
            cols.push_back(cand);
            const auto proxy = detail::train_linear_proxy(x_train, y_train, cols, cfg);
            ++res.trained_model_count;
            const double uar = detail::proxy_uar(proxy, x_dev, y_dev, cols);
            if (uar > best_uar) {
                best_uar = uar;
                best_candidate = cand;
            }
        }
        selected.push_back(best_candidate);
        used[best_candidate] = true;
    }
    res.mask = make_mask(selected, MaskOrigin::sffs, f);
    return res;
}

// ---------------------------------------------------------------------------
// CSV exports
// ---------------------------------------------------------------------------

inline void save_tally_csv(const std::string& path, const VoteTally& tally) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write tally file: " + path);
    out << "band_index,votes,summed_score\n";
    char buf[64];
    for (std::size_t j = 0; j < tally.votes.size(); ++j) {
        std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g\n", j, tally.votes[j], tally.summed_scores[j]);
        out << buf;
    }
    if (!out) throw DataError("failed writing tally file: " + path);
}

inline void save_importance_csv(const std::string& path, const ImportanceVector& iv) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write importance file: " + path);
    out << "# source=" << to_string(iv.source) << " model=" << iv.model_id << " scalar=" << iv.scalar_choice
        << "\n";
    out << "band_index,score\n";
    char buf[64];
    for (std::size_t j = 0; j < iv.scores.size(); ++j) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g\n", j, iv.scores[j]);
        out << buf;
    }
    if (!out) throw DataError("failed writing importance file: " + path);
}

}  // namespace e2efs
