#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "e2efs/e2efs.hpp"

using namespace e2efs;

TEST_CASE("uar arithmetic") {
    ConfusionMatrix diag(3);
    diag.counts = {{4, 0, 0}, {0, 9, 0}, {0, 0, 2}};
    REQUIRE(uar(diag) == 1.0);

    ConfusionMatrix cm(2);
    cm.counts = {{8, 2}, {4, 6}};
    REQUIRE(uar(cm) == Catch::Approx(0.7));

    ConfusionMatrix always0(2);
    always0.counts = {{10, 0}, {10, 0}};
    REQUIRE(uar(always0) == Catch::Approx(0.5));

    ConfusionMatrix empty_row(2);
    empty_row.counts = {{3, 1}, {0, 0}};
    REQUIRE_THROWS_WITH(uar(empty_row), Catch::Matchers::ContainsSubstring("class 1"));
}

TEST_CASE("uar is invariant to integer scaling of counts") {
    ConfusionMatrix cm(3);
    cm.counts = {{5, 1, 2}, {0, 7, 1}, {3, 3, 9}};
    const double base = uar(cm);
    for (std::size_t s : {2ull, 5ull, 17ull}) {
        ConfusionMatrix scaled(3);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j) scaled.counts[i][j] = cm.counts[i][j] * s;
        REQUIRE(uar(scaled) == Catch::Approx(base).epsilon(1e-12));
    }
}

namespace {

Ensemble constant_regressor(double value) {
    NetworkSpec spec;
    spec.task = TaskKind::sequence_regression;
    spec.branches.push_back({"spect", 1, {}});
    spec.trunk = {output(1, Activation::linear)};
    Ensemble ens;
    ens.spec = spec;
    ens.loss = LossSpec{LossKind::mse};
    Parameters p;
    p.values = {0.0, value};
    ens.members = {p};
    ens.seeds = {1};
    return ens;
}

LabeledExample seq_example(const std::string& id, const std::vector<double>& xs,
                           const std::vector<double>& target) {
    LabeledExample ex;
    ex.id = id;
    FeatureMatrix fm;
    fm.values = Matrix(xs.size(), 1);
    for (std::size_t t = 0; t < xs.size(); ++t) fm.values.at(t, 0) = xs[t];
    fm.band_labels = {"b"};
    fm.frame_rate = 1.0;
    ex.inputs.emplace("spect", fm);
    ex.target = target;
    return ex;
}

}  // namespace

TEST_CASE("regression evaluate matches hand-computed metrics on a 2-file set") {
    // identity model: y_t = x_t
    NetworkSpec spec;
    spec.task = TaskKind::sequence_regression;
    spec.branches.push_back({"spect", 1, {}});
    spec.trunk = {output(1, Activation::linear)};
    Ensemble ens;
    ens.spec = spec;
    ens.loss = LossSpec{LossKind::mse};
    Parameters p;
    p.values = {1.0, 0.0};
    ens.members = {p};
    ens.seeds = {1};

    std::vector<LabeledExample> files;
    files.push_back(seq_example("f1", {1, 2, 3, 4}, {1, 2, 3, 4}));        // r=1, mse=0
    files.push_back(seq_example("f2", {1, 2, 3, 4}, {2, 4, 6, 8}));        // r=1, mse = mean(1,4,9,16)
    const auto rec = evaluate(ens, files);
    REQUIRE(*rec.mean_pearson == Catch::Approx(1.0));
    REQUIRE(*rec.mean_mse == Catch::Approx((0.0 + (1 + 4 + 9 + 16) / 4.0) / 2.0));
    REQUIRE(rec.per_file_pearson.size() == 2);
    REQUIRE(rec.per_file_pearson[0].first == "f1");

    // ensemble predicting the targets exactly
    const auto exact = evaluate(ens, {files[0]});
    REQUIRE(*exact.mean_pearson == Catch::Approx(1.0));
    REQUIRE(*exact.mean_mse == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("classification evaluate agrees with a brute-force recount") {
    const auto ds = synth_classification(91, 80, 5, 6, {1, 3}, 1.2);
    const auto spec = make_msc_spec(6, 2, 4, 1, 1, 5, 6);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 10;
    const auto ens = train_ensemble(spec, ds.train, LossSpec{LossKind::cross_entropy}, cfg, 3, 30);
    const auto rec = evaluate(ens, ds.dev);
    ConfusionMatrix manual(2);
    for (const auto& ex : ds.dev) {
        const auto vote = predict_classification(ens, ex);
        manual.counts[static_cast<std::size_t>(*ex.label)][static_cast<std::size_t>(vote.predicted)]++;
    }
    REQUIRE(rec.confusion->counts == manual.counts);
    REQUIRE(*rec.uar_value == Catch::Approx(uar(manual)));
}

TEST_CASE("duplicated datasets give identical means") {
    const auto ds = synth_classification(97, 60, 5, 6, {2}, 1.4);
    const auto spec = make_msc_spec(6, 2, 4, 1, 1, 5, 6);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 10;
    const auto ens = train_ensemble(spec, ds.train, LossSpec{LossKind::cross_entropy}, cfg, 2, 44);
    auto doubled = ds.dev;
    for (auto ex : ds.dev) {
        ex.id += "_dup";
        doubled.push_back(std::move(ex));
    }
    REQUIRE(*evaluate(ens, ds.dev).uar_value == Catch::Approx(*evaluate(ens, doubled).uar_value));
}

TEST_CASE("target length mismatches are recorded, not fatal") {
    auto ens = constant_regressor(0.5);
    auto ex = seq_example("short_target", {1, 2, 3, 4, 5}, {1, 2, 3});
    std::vector<TargetLengthRecord> records;
    const auto rec = evaluate(ens, {ex}, &records);
    REQUIRE(records.size() == 1);
    REQUIRE(records[0].id == "short_target");
    REQUIRE(records[0].target_len == 3);
    REQUIRE(records[0].expected_len == 5);
    REQUIRE(rec.per_file_pearson.size() == 1);
}

TEST_CASE("benchmark report structure and monotonicity in ensemble size") {
    const auto ds = synth_classification(111, 24, 10, 16, {1}, 1.0);
    const auto spec = make_msc_spec(16, 2, 8, 1, 1, 8, 8);
    Ensemble one, ten;
    one.spec = ten.spec = spec;
    one.loss = ten.loss = LossSpec{LossKind::cross_entropy};
    for (int i = 0; i < 10; ++i) {
        ten.members.push_back(init(spec, 100 + i));
        ten.seeds.push_back(100 + i);
    }
    one.members = {ten.members[0]};
    one.seeds = {100};

    std::vector<LabeledExample> sample(ds.dev.begin(), ds.dev.begin() + 6);
    const auto r1 = benchmark_latency(one, sample, false, 3);
    const auto r10 = benchmark_latency(ten, sample, false, 3);
    REQUIRE(r1.examples_measured == 6);
    REQUIRE(r1.ensemble_size == 1);
    REQUIRE(r10.ensemble_size == 10);
    REQUIRE(r1.parameter_count == count_parameters(spec));
    REQUIRE(r1.mean_ms > 0.0);
    REQUIRE(r1.median_ms > 0.0);
    REQUIRE(r1.p95_ms >= r1.median_ms);
    REQUIRE_FALSE(r1.includes_feature_extraction);
    // ten members do strictly more work per example
    REQUIRE(r10.median_ms >= r1.median_ms);

    REQUIRE_THROWS_AS(benchmark_latency(one, sample, false, 2), ConfigError);
    REQUIRE_THROWS_AS(benchmark_latency(one, {}, false, 3), DataError);
    // include_features without audio is a data error
    REQUIRE_THROWS_AS(benchmark_latency(one, sample, true, 3), DataError);
}

TEST_CASE("benchmark csv format") {
    BenchmarkReport rep;
    rep.mean_ms = 1.5;
    rep.median_ms = 1.25;
    rep.p95_ms = 2.0;
    rep.examples_measured = 4;
    rep.parameter_count = 1234;
    rep.ensemble_size = 10;
    std::ostringstream os;
    write_benchmark_csv_header(os);
    write_benchmark_csv_row(os, "full", 128, rep);
    REQUIRE_THAT(os.str(), Catch::Matchers::StartsWith("system,n_features,n_members,params,mean_ms"));
    REQUIRE_THAT(os.str(), Catch::Matchers::ContainsSubstring("full,128,10,1234,1.5"));
}
