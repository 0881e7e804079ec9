#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "e2efs/dsp.hpp"
#include "e2efs/mask.hpp"
#include "e2efs/model_io.hpp"
#include "e2efs/nn.hpp"
#include "e2efs/train.hpp"

namespace e2efs {

// Bag of N independently seeded networks sharing one spec. `mask`, when set,
// is applied to the "spect" stream to feed branches named "selected"; this is
// how reduced-input and fusion models resolve their inputs at run time.
struct Ensemble {
    NetworkSpec spec;
    std::vector<Parameters> members;
    std::vector<std::uint64_t> seeds;
    LossSpec loss;
    std::optional<FeatureMask> mask;

    std::size_t size() const { return members.size(); }

    void validate() const {
        validate_spec(spec);
        if (members.empty()) throw DataError("ensemble: needs at least one member");
        if (seeds.size() != members.size()) throw DataError("ensemble: seed list size mismatch");
        for (std::size_t i = 0; i < seeds.size(); ++i)
            for (std::size_t j = i + 1; j < seeds.size(); ++j)
                if (seeds[i] == seeds[j]) throw DataError("ensemble: member seeds must be distinct");
    }
};

// Resolves the network's named branch inputs from an example: branches named
// "selected" get band_select(spect, mask), "audio" gets the waveform as a
// T x 1 matrix, and everything else is matched to a stream by name.
inline std::map<std::string, FeatureMatrix> bind_inputs(const NetworkSpec& spec,
                                                        const std::optional<FeatureMask>& mask,
                                                        const LabeledExample& ex) {
    std::map<std::string, FeatureMatrix> inputs;
    for (const auto& br : spec.branches) {
        if (br.input_name == "selected") {
            if (!mask) throw DataError("bind_inputs: branch 'selected' needs a feature mask");
            const auto it = ex.inputs.find("spect");
            if (it == ex.inputs.end())
                throw DataError("bind_inputs: example '" + ex.id + "' has no 'spect' stream to mask");
            inputs.emplace("selected", band_select(it->second, *mask));
        } else if (br.input_name == "audio" && !ex.inputs.count("audio")) {
            if (!ex.audio) throw DataError("bind_inputs: example '" + ex.id + "' has no audio");
            FeatureMatrix fm;
            fm.values = Matrix(ex.audio->samples.size(), 1);
            for (std::size_t i = 0; i < ex.audio->samples.size(); ++i)
                fm.values.at(i, 0) = ex.audio->samples[i];
            fm.band_labels = {"raw"};
            fm.frame_rate = static_cast<double>(ex.audio->sample_rate);
            inputs.emplace("audio", std::move(fm));
        } else {
            const auto it = ex.inputs.find(br.input_name);
            if (it == ex.inputs.end())
                throw DataError("bind_inputs: example '" + ex.id + "' is missing stream '" + br.input_name +
                                "'");
            inputs.emplace(br.input_name, it->second);
        }
    }
    return inputs;
}

inline detail::InputBinder make_binder(const NetworkSpec& spec, const std::optional<FeatureMask>& mask) {
    return [spec, mask](const LabeledExample& ex) { return bind_inputs(spec, mask, ex); };
}

// Trains member i with init seed base_seed+i and shuffle seed base_seed+i on
// the full training set. Each member is single-threaded and deterministic, so
// serial and parallel schedules produce identical bytes.
inline Ensemble train_ensemble(const NetworkSpec& spec, const std::vector<LabeledExample>& train_split,
                               const LossSpec& loss, const TrainConfig& cfg, std::size_t n,
                               std::uint64_t base_seed, bool parallel = false, std::ostream* log = nullptr,
                               const std::optional<FeatureMask>& mask = std::nullopt) {
    if (n < 1) throw ConfigError("train_ensemble: n must be >= 1");
    Ensemble ens;
    ens.spec = spec;
    ens.loss = loss;
    ens.mask = mask;
    ens.members.resize(n);
    ens.seeds.resize(n);
    std::vector<std::string> member_logs(n);
    std::vector<std::exception_ptr> member_errors(n);
    const auto binder = make_binder(spec, mask);
    auto run_member = [&](std::size_t i) {
        try {
            const std::uint64_t seed = base_seed + i;
            ens.seeds[i] = seed;
            TrainConfig mcfg = cfg;
            mcfg.shuffle_seed = seed;
            std::ostringstream member_log;
            Parameters p = init(spec, seed);
            ens.members[i] = train(spec, p, train_split, loss, mcfg, log ? &member_log : nullptr, binder);
            member_logs[i] = member_log.str();
        } catch (...) {
            member_errors[i] = std::current_exception();
        }
    };
    if (parallel) {
        std::vector<std::thread> pool;
        pool.reserve(n);
        for (std::size_t i = 0; i < n; ++i) pool.emplace_back(run_member, i);
        for (auto& th : pool) th.join();
    } else {
        for (std::size_t i = 0; i < n; ++i) run_member(i);
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (!member_errors[i]) continue;
        const std::string where = "train_ensemble: member " + std::to_string(i) + " aborted: ";
        try {
            std::rethrow_exception(member_errors[i]);
        } catch (const NumericError& e) {
            throw NumericError(where + e.what());
        } catch (const DataError& e) {
            throw DataError(where + e.what());
        } catch (const std::exception& e) {
            throw ConfigError(where + e.what());
        }
    }
    if (log)
        for (std::size_t i = 0; i < n; ++i) {
            std::istringstream lines(member_logs[i]);
            std::string line;
            while (std::getline(lines, line)) *log << "member=" << i << " " << line << "\n";
        }
    ens.validate();
    return ens;
}

// Eq-style mean of member output sequences, fixed reduction order.
inline std::vector<double> predict_regression(const Ensemble& ens, const LabeledExample& ex) {
    if (ens.spec.task != TaskKind::sequence_regression)
        throw ConfigError("predict_regression: ensemble is not a sequence model");
    std::vector<double> acc;
    const auto inputs = bind_inputs(ens.spec, ens.mask, ex);
    for (std::size_t i = 0; i < ens.members.size(); ++i) {
        const Prediction p = forward(ens.spec, ens.members[i], inputs);
        if (i == 0) {
            acc = p.sequence;
        } else {
            if (p.sequence.size() != acc.size())
                throw NumericError("predict_regression: member output length mismatch");
            for (std::size_t t = 0; t < acc.size(); ++t) acc[t] += p.sequence[t];
        }
    }
    const double inv = 1.0 / static_cast<double>(ens.members.size());
    for (double& v : acc) v *= inv;
    return acc;
}

struct ClassificationVote {
    std::vector<double> posterior;  // soft-vote mean, sums to 1
    int predicted = 0;              // argmax, ties toward the lower index
};

inline ClassificationVote predict_classification(const Ensemble& ens, const LabeledExample& ex) {
    if (ens.spec.task != TaskKind::classification)
        throw ConfigError("predict_classification: ensemble is not a classifier");
    ClassificationVote vote;
    const auto inputs = bind_inputs(ens.spec, ens.mask, ex);
    for (std::size_t i = 0; i < ens.members.size(); ++i) {
        const Prediction p = forward(ens.spec, ens.members[i], inputs);
        if (i == 0)
            vote.posterior = p.posterior;
        else
            for (std::size_t k = 0; k < vote.posterior.size(); ++k) vote.posterior[k] += p.posterior[k];
    }
    const double inv = 1.0 / static_cast<double>(ens.members.size());
    for (double& v : vote.posterior) v *= inv;
    vote.predicted = 0;
    for (std::size_t k = 1; k < vote.posterior.size(); ++k)
        if (vote.posterior[k] > vote.posterior[static_cast<std::size_t>(vote.predicted)])
            vote.predicted = static_cast<int>(k);
    return vote;
}

// Fraction of examples on which each member pair picks the same class.
struct AgreementReport {
    Matrix pairwise;     // N x N, diagonal 1
    double mean = 1.0;   // over unordered pairs
};

inline AgreementReport inter_model_agreement(const Ensemble& ens,
                                             const std::vector<LabeledExample>& examples) {
    if (ens.spec.task != TaskKind::classification)
        throw ConfigError("inter_model_agreement: classification ensembles only");
    if (examples.empty()) throw DataError("inter_model_agreement: empty dataset");
    const std::size_t n = ens.members.size();
    std::vector<std::vector<int>> argmaxes(n, std::vector<int>(examples.size()));
    for (std::size_t e = 0; e < examples.size(); ++e) {
        const auto inputs = bind_inputs(ens.spec, ens.mask, examples[e]);
        for (std::size_t i = 0; i < n; ++i) {
            const Prediction p = forward(ens.spec, ens.members[i], inputs);
            int arg = 0;
            for (std::size_t k = 1; k < p.posterior.size(); ++k)
                if (p.posterior[k] > p.posterior[static_cast<std::size_t>(arg)]) arg = static_cast<int>(k);
            argmaxes[i][e] = arg;
        }
    }
    AgreementReport rep;
    rep.pairwise = Matrix(n, n, 1.0);
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            std::size_t same = 0;
            for (std::size_t e = 0; e < examples.size(); ++e)
                if (argmaxes[i][e] == argmaxes[j][e]) ++same;
            const double frac = static_cast<double>(same) / static_cast<double>(examples.size());
            rep.pairwise.at(i, j) = frac;
            rep.pairwise.at(j, i) = frac;
            total += frac;
            ++pairs;
        }
    rep.mean = pairs ? total / static_cast<double>(pairs) : 1.0;
    return rep;
}

// ---------------------------------------------------------------------------
// Directory persistence: manifest.txt (key=value) + one model file per member.
// ---------------------------------------------------------------------------

inline void save_ensemble(const std::string& dir, const Ensemble& ens) {
    ens.validate();
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream manifest(fs::path(dir) / "manifest.txt", std::ios::binary);
    if (!manifest) throw DataError("cannot write ensemble manifest in " + dir);
    manifest << "spec=" << spec_to_string(ens.spec) << "\n";
    manifest << "loss=" << loss_id(ens.loss) << "\n";
    manifest << "n=" << ens.members.size() << "\n";
    manifest << "seeds=";
    for (std::size_t i = 0; i < ens.seeds.size(); ++i) manifest << (i ? "," : "") << ens.seeds[i];
    manifest << "\n";
    if (ens.mask) {
        manifest << "mask=" << detail::mask_csv(*ens.mask) << "\n";
        manifest << "mask_origin=" << ens.mask->origin_token() << "\n";
        manifest << "mask_space=" << ens.mask->feature_count << "\n";
    }
    if (!manifest) throw DataError("failed writing ensemble manifest in " + dir);
    for (std::size_t i = 0; i < ens.members.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "member_%03zu.e2efs", i);
        ModelRecord rec{ens.spec, ens.members[i], ens.loss, ens.mask};
        save_model((fs::path(dir) / name).string(), rec);
    }
}

inline Ensemble load_ensemble(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream manifest(fs::path(dir) / "manifest.txt", std::ios::binary);
    if (!manifest) throw DataError("cannot open ensemble manifest in " + dir);
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw DataError("malformed ensemble manifest line: " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto need = [&](const std::string& key) {
        const auto it = kv.find(key);
        if (it == kv.end()) throw DataError("ensemble manifest missing '" + key + "' in " + dir);
        return it->second;
    };
    Ensemble ens;
    ens.spec = spec_from_string(need("spec"));
    ens.loss = parse_loss_id(need("loss"));
    const std::size_t n = std::stoul(need("n"));
    {
        const auto seeds = detail::parse_index_csv(need("seeds"));
        ens.seeds.assign(seeds.begin(), seeds.end());
    }
    if (kv.count("mask")) {
        FeatureMask mask;
        mask.indices = detail::parse_index_csv(kv.at("mask"));
        if (kv.count("mask_origin")) {
            mask.origin = mask_origin_from_string(kv.at("mask_origin"));
            const auto colon = kv.at("mask_origin").find(':');
            if (colon != std::string::npos) mask.seed = std::stoull(kv.at("mask_origin").substr(colon + 1));
        }
        if (kv.count("mask_space")) mask.feature_count = std::stoul(kv.at("mask_space"));
        mask.validate();
        ens.mask = std::move(mask);
    }
    for (std::size_t i = 0; i < n; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "member_%03zu.e2efs", i);
        const ModelRecord rec = load_model((fs::path(dir) / name).string());
        ens.members.push_back(rec.params);
    }
    ens.validate();
    return ens;
}

}  // namespace e2efs
