#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "e2efs/e2efs.hpp"

using namespace e2efs;

namespace {

Ensemble tiny_classifier_ensemble(std::size_t n, std::uint64_t base_seed, const Dataset& ds) {
    const auto spec = make_msc_spec(static_cast<int>(stream_bands(ds).at("spect")), 2, 4, 1, 1, 5, 6);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 10;
    return train_ensemble(spec, ds.train, LossSpec{LossKind::cross_entropy}, cfg, n, base_seed);
}

}  // namespace

TEST_CASE("single-member ensemble equals plain training") {
    const auto ds = synth_classification(11, 40, 5, 6, {0, 1}, 1.5);
    const auto spec = make_msc_spec(6, 2, 4, 1, 1, 5, 6);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 10;
    cfg.shuffle_seed = 70;
    const LossSpec loss{LossKind::cross_entropy};
    const auto ens = train_ensemble(spec, ds.train, loss, cfg, 1, 70);
    const auto direct = train(spec, init(spec, 70), ds.train, loss, cfg);
    REQUIRE(ens.members[0].values == direct.values);
}

TEST_CASE("ensemble members are distinct and seeds recorded") {
    const auto ds = synth_classification(13, 40, 5, 6, {0}, 1.0);
    const auto ens = tiny_classifier_ensemble(10, 100, ds);
    REQUIRE(ens.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) REQUIRE(ens.seeds[i] == 100 + i);
    for (std::size_t i = 0; i < 10; ++i)
        for (std::size_t j = i + 1; j < 10; ++j) REQUIRE(ens.members[i].values != ens.members[j].values);
}

TEST_CASE("serial and parallel ensemble training are byte-identical") {
    const auto ds = synth_classification(17, 60, 5, 8, {2, 5}, 1.5);
    const auto spec = make_msc_spec(8, 2, 4, 1, 1, 5, 6);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 10;
    const LossSpec loss{LossKind::cross_entropy};
    std::ostringstream log_serial, log_parallel;
    const auto serial = train_ensemble(spec, ds.train, loss, cfg, 6, 900, false, &log_serial);
    const auto parallel = train_ensemble(spec, ds.train, loss, cfg, 6, 900, true, &log_parallel);
    REQUIRE(serial.size() == parallel.size());
    for (std::size_t i = 0; i < serial.size(); ++i)
        REQUIRE(serial.members[i].values == parallel.members[i].values);
    REQUIRE(log_serial.str() == log_parallel.str());
}

TEST_CASE("regression combination is the arithmetic member mean") {
    // hand-built members: empty branch + linear output so outputs are exact
    NetworkSpec spec;
    spec.task = TaskKind::sequence_regression;
    spec.branches.push_back({"spect", 1, {}});
    spec.trunk = {output(1, Activation::linear)};
    Ensemble ens;
    ens.spec = spec;
    ens.loss = LossSpec{LossKind::mse};
    Parameters a, b;
    a.values = {0.0, 0.2};  // constant 0.2
    b.values = {0.0, 0.4};  // constant 0.4
    a.seed = 1;
    b.seed = 2;
    ens.members = {a, b};
    ens.seeds = {1, 2};

    LabeledExample ex;
    ex.id = "x";
    FeatureMatrix fm;
    fm.values = Matrix(1, 1, 0.0);
    fm.band_labels = {"b"};
    fm.frame_rate = 1.0;
    ex.inputs.emplace("spect", fm);

    const auto mean = predict_regression(ens, ex);
    REQUIRE(mean.size() == 1);
    REQUIRE(mean[0] == Catch::Approx(0.3).margin(1e-15));

    // identical members -> single member output
    ens.members = {a, a};
    const auto same = predict_regression(ens, ex);
    REQUIRE(same[0] == Catch::Approx(0.2).margin(1e-15));
}

TEST_CASE("mean-prediction MSE never exceeds mean member MSE") {
    const auto ds = synth_regression(23, 12, 16, 6, {1, 3});
    NetworkSpec spec;
    spec.task = TaskKind::sequence_regression;
    spec.branches.push_back({"spect", 6, {lstm(5)}});
    spec.trunk = {output(1, Activation::linear)};
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    const auto ens = train_ensemble(spec, ds.train, LossSpec{LossKind::mse}, cfg, 4, 40);
    for (const auto& ex : ds.dev) {
        const auto mean_pred = predict_regression(ens, ex);
        double member_mse_mean = 0.0;
        for (const auto& member : ens.members) {
            const auto p = forward(spec, member, bind_inputs(spec, ens.mask, ex));
            member_mse_mean += mse(p.sequence, *ex.target);
        }
        member_mse_mean /= static_cast<double>(ens.size());
        REQUIRE(mse(mean_pred, *ex.target) <= member_mse_mean + 1e-12);
    }
}

TEST_CASE("soft voting averages posteriors and breaks ties low") {
    NetworkSpec spec = make_msc_spec(3, 2, 3, 1, 1, 4, 4);
    Ensemble ens;
    ens.spec = spec;
    ens.loss = LossSpec{LossKind::cross_entropy};
    ens.members = {init(spec, 1), init(spec, 2)};
    ens.seeds = {1, 2};
    LabeledExample ex;
    ex.id = "x";
    FeatureMatrix fm;
    fm.values = Matrix(5, 3);
    Rng rng(8);
    for (auto& v : fm.values.a) v = rng.normal();
    fm.band_labels.assign(3, "b");
    fm.frame_rate = 1.0;
    ex.inputs.emplace("spect", fm);

    const auto inputs = bind_inputs(spec, std::nullopt, ex);
    const auto p0 = forward(spec, ens.members[0], inputs).posterior;
    const auto p1 = forward(spec, ens.members[1], inputs).posterior;
    const auto vote = predict_classification(ens, ex);
    for (std::size_t k = 0; k < 2; ++k)
        REQUIRE(vote.posterior[k] == Catch::Approx(0.5 * (p0[k] + p1[k])).margin(1e-15));
    double sum = vote.posterior[0] + vote.posterior[1];
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-9));

    // convex hull per coordinate
    for (std::size_t k = 0; k < 2; ++k) {
        REQUIRE(vote.posterior[k] >= std::min(p0[k], p1[k]) - 1e-15);
        REQUIRE(vote.posterior[k] <= std::max(p0[k], p1[k]) + 1e-15);
    }

    // exact tie -> lower class index
    REQUIRE(vote.predicted == (vote.posterior[1] > vote.posterior[0] ? 1 : 0));
}

TEST_CASE("member order permutation leaves predictions unchanged within 1e-12") {
    const auto ds = synth_classification(31, 40, 5, 6, {1, 4}, 1.5);
    auto ens = tiny_classifier_ensemble(5, 300, ds);
    const auto& ex = ds.dev.front();
    const auto before = predict_classification(ens, ex);
    std::swap(ens.members[0], ens.members[4]);
    std::swap(ens.members[1], ens.members[3]);
    std::swap(ens.seeds[0], ens.seeds[4]);
    std::swap(ens.seeds[1], ens.seeds[3]);
    const auto after = predict_classification(ens, ex);
    for (std::size_t k = 0; k < before.posterior.size(); ++k)
        REQUIRE(after.posterior[k] == Catch::Approx(before.posterior[k]).margin(1e-12));
}

TEST_CASE("removing and re-adding a member reproduces identical predictions") {
    const auto ds = synth_classification(37, 40, 5, 6, {1}, 1.5);
    auto ens = tiny_classifier_ensemble(4, 500, ds);
    const auto& ex = ds.dev.front();
    const auto before = predict_classification(ens, ex);
    const Parameters removed = ens.members.back();
    const std::uint64_t seed = ens.seeds.back();
    ens.members.pop_back();
    ens.seeds.pop_back();
    ens.members.push_back(removed);
    ens.seeds.push_back(seed);
    const auto after = predict_classification(ens, ex);
    REQUIRE(after.posterior == before.posterior);
}

TEST_CASE("inter-model agreement against a brute-force oracle") {
    // three hand-built constant-posterior members over four examples
    NetworkSpec spec;
    spec.task = TaskKind::classification;
    spec.n_classes = 2;
    spec.branches.push_back({"spect", 1, {lstm(1)}});
    spec.trunk = {output(2, Activation::softmax)};
    // bias-only members: lstm weights zero, output bias picks the class
    const std::size_t total = count_parameters(spec);
    auto member_with_bias = [&](double b0, double b1) {
        Parameters p;
        p.values.assign(total, 0.0);
        p.values[total - 2] = b0;
        p.values[total - 1] = b1;
        return p;
    };
    Ensemble ens;
    ens.spec = spec;
    ens.loss = LossSpec{LossKind::cross_entropy};
    ens.members = {member_with_bias(1.0, 0.0), member_with_bias(0.0, 1.0), member_with_bias(2.0, 0.0)};
    ens.seeds = {1, 2, 3};

    std::vector<LabeledExample> examples(4);
    for (std::size_t e = 0; e < 4; ++e) {
        examples[e].id = "e" + std::to_string(e);
        FeatureMatrix fm;
        fm.values = Matrix(3, 1, static_cast<double>(e));
        fm.band_labels = {"b"};
        fm.frame_rate = 1.0;
        examples[e].inputs.emplace("spect", fm);
    }
    const auto rep = inter_model_agreement(ens, examples);
    // members 0 and 2 always agree (class 0); member 1 always disagrees
    REQUIRE(rep.pairwise.at(0, 2) == 1.0);
    REQUIRE(rep.pairwise.at(0, 1) == 0.0);
    REQUIRE(rep.pairwise.at(1, 2) == 0.0);
    REQUIRE(rep.mean == Catch::Approx((1.0 + 0.0 + 0.0) / 3.0));

    // identical members agree everywhere
    ens.members = {member_with_bias(1.0, 0.0), member_with_bias(1.0, 0.0)};
    ens.seeds = {1, 2};
    const auto same = inter_model_agreement(ens, examples);
    REQUIRE(same.pairwise.at(0, 1) == 1.0);
    REQUIRE(same.mean == 1.0);
}

TEST_CASE("ensemble UAR beats the mean member UAR on most seeded runs") {
    std::size_t wins = 0;
    for (std::uint64_t rep = 0; rep < 5; ++rep) {
        const auto ds = synth_classification(41 + rep * 7, 150, 6, 10, {1, 4, 7}, 0.8);
        const auto spec = make_msc_spec(10, 2, 6, 1, 1, 6, 8);
        TrainConfig cfg;
        cfg.epochs = 3;
        cfg.batch_size = 10;
        const auto ens =
            train_ensemble(spec, ds.train, LossSpec{LossKind::cross_entropy}, cfg, 6, 100 + rep * 11, true);
        const double ens_uar = *evaluate(ens, ds.dev).uar_value;
        double member_uar_sum = 0.0;
        for (std::size_t i = 0; i < ens.size(); ++i) {
            Ensemble single;
            single.spec = ens.spec;
            single.loss = ens.loss;
            single.members = {ens.members[i]};
            single.seeds = {ens.seeds[i]};
            member_uar_sum += *evaluate(single, ds.dev).uar_value;
        }
        if (ens_uar >= member_uar_sum / static_cast<double>(ens.size()) - 1e-12) ++wins;
    }
    REQUIRE(wins >= 4);
}

TEST_CASE("ensemble directory round trip is bit-exact") {
    const auto ds = synth_classification(53, 40, 5, 6, {2}, 1.5);
    auto ens = tiny_classifier_ensemble(3, 700, ds);
    ens.mask = make_mask({0, 2, 4}, MaskOrigin::output_grad, 6);
    const std::string dir = "test_ensemble_dir";
    save_ensemble(dir, ens);
    const auto back = load_ensemble(dir);
    REQUIRE(back.size() == ens.size());
    REQUIRE(spec_to_string(back.spec) == spec_to_string(ens.spec));
    REQUIRE(back.seeds == ens.seeds);
    REQUIRE(back.mask.has_value());
    REQUIRE(back.mask->indices == ens.mask->indices);
    for (std::size_t i = 0; i < ens.size(); ++i) REQUIRE(back.members[i].values == ens.members[i].values);
    std::filesystem::remove_all(dir);
}

TEST_CASE("aborting member reports its index") {
    const auto ds = synth_classification(57, 40, 5, 6, {2}, 1.5);
    NetworkSpec spec = make_msc_spec(6, 2, 4, 1, 1, 5, 6);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 10;
    cfg.learning_rate = 1e280;  // blows up to inf
    REQUIRE_THROWS_WITH(
        train_ensemble(spec, ds.train, LossSpec{LossKind::cross_entropy}, cfg, 3, 60, false),
        Catch::Matchers::ContainsSubstring("member"));
}
