// e2efs command line: feature extraction, ensemble training, saliency,
// feature selection, retraining, fusion, evaluation and latency benchmarks.
//
// Every subcommand reads a key=value config (--config, --set overrides) and
// writes its artifacts plus a config snapshot into --out.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "e2efs/e2efs.hpp"

namespace fs = std::filesystem;
using namespace e2efs;

namespace {

struct CliArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
    long long seed = -1;
};

RunConfig resolve_config(const CliArgs& args, const std::string& command) {
    RunConfig cfg = args.config_path.empty() ? RunConfig{} : load_config(args.config_path);
    for (const auto& kv : args.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        apply_config_key(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (args.seed >= 0) {
        const std::string key = command == "synth"    ? "synth.seed"
                                : command == "select" ? "select.seed"
                                                      : "ensemble.base_seed";
        apply_config_key(cfg, key, std::to_string(args.seed));
    }
    return cfg;
}

fs::path prepare_out(const std::string& dir, const RunConfig& cfg) {
    if (dir.empty()) throw ConfigError("--out is required for this subcommand");
    fs::create_directories(dir);
    write_config_snapshot((fs::path(dir) / "config.snapshot").string(), cfg);
    return dir;
}

// data.dir may name an audio manifest CSV (file) or a feature dataset
// directory produced by `features`/`synth`.
Dataset load_any_dataset(const RunConfig& cfg) {
    const auto it = cfg.raw.find("data.dir");
    if (it == cfg.raw.end()) throw ConfigError("config: data.dir is required");
    const std::string& path = it->second;
    if (fs::is_directory(path)) return load_dataset_dir(path);
    return load_audio_dataset(path, cfg.task);
}

std::string required_key(const RunConfig& cfg, const std::string& key) {
    const auto it = cfg.raw.find(key);
    if (it == cfg.raw.end()) throw ConfigError("config: " + key + " is required");
    return it->second;
}

NetworkSpec rename_single_branch(NetworkSpec spec, const std::string& name) {
    spec.branches.at(0).input_name = name;
    return spec;
}

ImportanceSource source_from_config(const RunConfig& cfg) {
    const auto it = cfg.raw.find("select.source");
    const std::string s = it == cfg.raw.end() ? "output" : it->second;
    if (s == "output") return ImportanceSource::output;
    if (s == "loss") return ImportanceSource::loss;
    throw ConfigError("config: select.source must be 'output' or 'loss'");
}

// ---------------------------------------------------------------------------

void cmd_features(const RunConfig& cfg, const fs::path& out) {
    const std::string manifest = required_key(cfg, "data.dir");
    Dataset audio_ds = load_audio_dataset(manifest, cfg.task);
    SpectrogramConfig sc = cfg.spect;
    Dataset feat = audio_ds;
    auto convert = [&](LabeledExample& ex) {
        if (!ex.audio) throw DataError("features: example '" + ex.id + "' has no audio");
        if (ex.audio->sample_rate != cfg.feature_sample_rate)
            throw DataError("features: example '" + ex.id + "' sample rate " +
                            std::to_string(ex.audio->sample_rate) + " does not match configured " +
                            std::to_string(cfg.feature_sample_rate));
        for (const auto& stream : cfg.feature_streams) {
            if (stream == "spect") {
                ex.inputs.emplace("spect", log_mel_spectrogram(*ex.audio, sc));
            } else if (stream == "preemph") {
                AudioBuffer boosted = preemphasize(*ex.audio, cfg.preemph);
                boosted = butterworth_lowpass(boosted, cfg.butter_order, cfg.butter_cutoff);
                ex.inputs.emplace("preemph", log_mel_spectrogram(boosted, sc));
            } else if (stream == "ratio") {
                ex.inputs.emplace("ratio", frequency_ratio(*ex.audio, sc, cfg.boundary_hz));
            } else {
                throw ConfigError("features: unknown stream '" + stream + "'");
            }
        }
        ex.audio.reset();  // feature datasets do not carry waveforms
    };
    for (auto* split : {&feat.train, &feat.dev, &feat.test})
        for (auto& ex : *split) convert(ex);
    save_dataset_dir(out.string(), feat);
    std::cout << "features: wrote " << feat.train.size() + feat.dev.size() + feat.test.size()
              << " examples to " << out.string() << "\n";
}

void cmd_synth(const RunConfig& cfg, const fs::path& out) {
    Dataset ds;
    if (cfg.task == TaskKind::classification)
        ds = synth_classification(cfg.synth_seed, cfg.synth_examples, cfg.synth_frames, cfg.synth_bands,
                                  cfg.synth_planted, cfg.synth_effect);
    else
        ds = synth_regression(cfg.synth_seed, cfg.synth_examples, cfg.synth_frames, cfg.synth_bands,
                              cfg.synth_drivers);
    save_dataset_dir(out.string(), ds);
    std::cout << "synth: wrote " << ds.train.size() << "/" << ds.dev.size() << "/" << ds.test.size()
              << " train/dev/test examples to " << out.string() << "\n";
}

void train_and_save(const RunConfig& cfg, const fs::path& out, const NetworkSpec& spec,
                    const Dataset& ds, const std::optional<FeatureMask>& mask) {
    std::ofstream log(out / "training.log", std::ios::binary);
    Ensemble ens = train_ensemble(spec, ds.train, cfg.loss, cfg.train, cfg.ensemble_n, cfg.base_seed,
                                  cfg.parallel, &log, mask);
    save_ensemble(out.string(), ens);
    std::cout << "train: " << ens.size() << " members, " << count_parameters(spec)
              << " parameters each, saved to " << out.string() << "\n";
}

void cmd_train(const RunConfig& cfg, const fs::path& out) {
    Dataset ds = load_any_dataset(cfg);
    std::map<std::string, std::size_t> bands;
    if (cfg.spec_preset == "breathing_raw")
        bands["audio"] = 1;
    else
        bands = stream_bands(ds);
    const NetworkSpec spec = build_spec(cfg, bands);
    train_and_save(cfg, out, spec, ds, std::nullopt);
}

void cmd_saliency(const RunConfig& cfg, const fs::path& out) {
    Dataset ds = load_any_dataset(cfg);
    Ensemble ens = load_ensemble(required_key(cfg, "ensemble.dir"));
    const ImportanceSource source = source_from_config(cfg);
    std::vector<double> aggregate;
    for (std::size_t i = 0; i < ens.members.size(); ++i) {
        ImportanceVector iv = importance(ens.spec, ens.members[i], ds.train, source, ens.loss, ens.mask);
        iv.model_id = "member_" + std::to_string(i);
        char name[48];
        std::snprintf(name, sizeof name, "member_%03zu_importance.csv", i);
        save_importance_csv((out / name).string(), iv);
        if (aggregate.empty()) aggregate.assign(iv.scores.size(), 0.0);
        for (std::size_t j = 0; j < iv.scores.size(); ++j) aggregate[j] += iv.scores[j];
    }
    std::ofstream agg(out / "aggregate_importance.csv", std::ios::binary);
    agg << "band_index,summed_score\n";
    char buf[64];
    for (std::size_t j = 0; j < aggregate.size(); ++j) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g\n", j, aggregate[j]);
        agg << buf;
    }
    std::cout << "saliency: wrote per-member and aggregate importance for " << ens.size()
              << " members to " << out.string() << "\n";
}

void cmd_select(const RunConfig& cfg, const fs::path& out) {
    Dataset ds = load_any_dataset(cfg);
    const std::size_t f = stream_bands(ds).at("spect");
    const std::string origin = cfg.select_origin;
    FeatureMask mask;
    if (origin == "output_grad" || origin == "loss_grad" || origin == "least_important") {
        Ensemble ens = load_ensemble(required_key(cfg, "ensemble.dir"));
        const ImportanceSource source =
            origin == "loss_grad" ? ImportanceSource::loss : source_from_config(cfg);
        SelectionResult res = origin == "least_important"
                                  ? least_important_select(ens, ds.train, source, cfg.select_n)
                                  : majority_vote_select(ens, ds.train, source, cfg.select_n);
        mask = res.mask;
        save_tally_csv((out / "tally.csv").string(), res.tally);
    } else if (origin == "lowest") {
        mask = lowest_mask(cfg.select_n, f);
    } else if (origin == "random") {
        mask = random_mask(cfg.select_n, f, cfg.select_seed);
    } else if (origin == "sffs") {
        const SffsResult res = sffs(ds.train, ds.dev, cfg.select_n, cfg.sffs);
        mask = res.mask;
        std::ofstream info(out / "sffs.txt", std::ios::binary);
        info << "trained_model_count=" << res.trained_model_count << "\n";
        std::cout << "select: sffs trained " << res.trained_model_count << " proxy models\n";
    } else {
        throw ConfigError("config: unknown select.origin '" + origin + "'");
    }
    save_mask((out / "mask.txt").string(), mask);
    std::cout << "select: wrote " << mask.indices.size() << "-band mask (origin " << mask.origin_token()
              << ") to " << out.string() << "\n";
}

void cmd_retrain(const RunConfig& cfg, const fs::path& out) {
    Dataset ds = load_any_dataset(cfg);
    const FeatureMask mask = load_mask(required_key(cfg, "mask.path"));
    std::map<std::string, std::size_t> bands{{"spect", mask.indices.size()}};
    const NetworkSpec spec = rename_single_branch(build_spec(cfg, bands), "selected");
    train_and_save(cfg, out, spec, ds, mask);
}

void cmd_fuse(const RunConfig& cfg, const fs::path& out) {
    Dataset ds = load_any_dataset(cfg);
    const FeatureMask mask = load_mask(required_key(cfg, "mask.path"));
    auto bands = stream_bands(ds);
    bands["selected"] = mask.indices.size();
    RunConfig fusion_cfg = cfg;
    fusion_cfg.spec_preset = "fusion";
    const NetworkSpec spec = build_spec(fusion_cfg, bands);
    train_and_save(cfg, out, spec, ds, mask);
}

void cmd_eval(const RunConfig& cfg, const fs::path& out) {
    Dataset ds = load_any_dataset(cfg);
    Ensemble ens = load_ensemble(required_key(cfg, "ensemble.dir"));
    std::vector<TargetLengthRecord> length_records;
    const MetricsRecord rec = evaluate(ens, ds.split(cfg.eval_split), &length_records);
    std::ofstream csv(out / "metrics.csv", std::ios::binary);
    write_metrics_csv(csv, rec);
    for (const auto& r : length_records)
        std::cerr << "warning: example '" << r.id << "' target length " << r.target_len
                  << " does not match " << r.expected_len << " output steps\n";
    if (rec.uar_value)
        std::cout << "eval[" << cfg.eval_split << "]: UAR=" << *rec.uar_value << "\n";
    else
        std::cout << "eval[" << cfg.eval_split << "]: mean_pearson=" << *rec.mean_pearson
                  << " mean_mse=" << *rec.mean_mse << "\n";
}

void cmd_bench(const RunConfig& cfg, const fs::path& out) {
    Dataset ds = load_any_dataset(cfg);
    Ensemble ens = load_ensemble(required_key(cfg, "ensemble.dir"));
    const auto& split = ds.split(cfg.eval_split);
    BenchmarkFeatureConfig fc;
    fc.spect = cfg.spect;
    const BenchmarkReport report =
        benchmark_latency(ens, split, cfg.bench_include_features, cfg.bench_repetitions, fc);
    std::size_t n_features = 0;
    if (ens.mask)
        n_features = ens.mask->indices.size();
    else if (!ens.spec.branches.empty())
        n_features = static_cast<std::size_t>(ens.spec.branches.front().input_bands);
    const auto it = cfg.raw.find("bench.system");
    const std::string system = it == cfg.raw.end() ? "ensemble" : it->second;
    std::ofstream csv(out / "benchmark.csv", std::ios::binary);
    write_benchmark_csv_header(csv);
    write_benchmark_csv_row(csv, system, n_features, report);
    std::cout << "bench: " << system << " median=" << report.median_ms << "ms mean=" << report.mean_ms
              << "ms over " << report.examples_measured << " examples\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ensemble end-to-end networks with gradient-saliency feature selection"};
    app.require_subcommand(1);
    CliArgs args;

    const std::vector<std::pair<std::string, std::string>> commands = {
        {"features", "extract spectral features from an audio manifest"},
        {"synth", "generate a seeded synthetic dataset"},
        {"train", "train an ensemble on the full feature set"},
        {"saliency", "export per-member input importance scores"},
        {"select", "build a feature mask (gradient voting, baselines, or sffs)"},
        {"retrain", "train an ensemble on masked features"},
        {"fuse", "train a middle-fusion ensemble (full + masked branches)"},
        {"eval", "compute metrics for an ensemble on a split"},
        {"bench", "measure single-threaded per-example latency"},
    };
    std::map<std::string, CLI::App*> subs;
    for (const auto& [name, desc] : commands) {
        CLI::App* sub = app.add_subcommand(name, desc);
        sub->add_option("--config", args.config_path, "key=value config file");
        sub->add_option("--set", args.overrides, "config override key=value (repeatable)");
        sub->add_option("--out", args.out_dir, "output directory");
        sub->add_option("--seed", args.seed, "seed override for this subcommand");
        subs[name] = sub;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        const RunConfig cfg = resolve_config(args, command);
        const fs::path out = prepare_out(args.out_dir, cfg);
        if (command == "features") cmd_features(cfg, out);
        else if (command == "synth") cmd_synth(cfg, out);
        else if (command == "train") cmd_train(cfg, out);
        else if (command == "saliency") cmd_saliency(cfg, out);
        else if (command == "select") cmd_select(cfg, out);
        else if (command == "retrain") cmd_retrain(cfg, out);
        else if (command == "fuse") cmd_fuse(cfg, out);
        else if (command == "eval") cmd_eval(cfg, out);
        else if (command == "bench") cmd_bench(cfg, out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
