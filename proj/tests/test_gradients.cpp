#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "e2efs/e2efs.hpp"

using namespace e2efs;

// Central finite differences (step 1e-5) as the independent oracle for the
// analytic reverse-mode gradients. A coordinate passes when
// |analytic - numeric| <= 1e-7 + 1e-4 * max(|analytic|, |numeric|).

namespace {

constexpr double kStep = 1e-5;
constexpr double kRelTol = 1e-4;
constexpr double kAbsTol = 1e-7;

struct GradCase {
    NetworkSpec spec;
    LossSpec loss;
    int label = 0;
    std::vector<double> target;
    std::map<std::string, FeatureMatrix> inputs;
};

FeatureMatrix random_features(std::size_t t, std::size_t f, Rng& rng) {
    FeatureMatrix fm;
    fm.values = Matrix(t, f);
    for (auto& v : fm.values.a) v = rng.normal();
    fm.band_labels.assign(f, "b");
    fm.frame_rate = 100.0;
    return fm;
}

double loss_value(const GradCase& c, const Parameters& params,
                  const std::map<std::string, FeatureMatrix>& inputs) {
    const Prediction pred = forward(c.spec, params, inputs);
    if (c.spec.task == TaskKind::classification) return cross_entropy(pred.posterior, c.label);
    return sequence_loss(c.loss, pred.sequence, c.target).value;
}

// Returns the number of failing coordinates; checks `n_coords` parameter and
// `n_coords` input coordinates.
std::size_t check_case(const GradCase& c, std::size_t n_coords, Rng& pick, std::size_t& checked) {
    Parameters params = init(c.spec, 2024);
    Rng jitter(555);
    for (auto& v : params.values) v += 0.05 * jitter.normal();

    double value = 0.0;
    GradientBundle bundle;
    if (c.spec.task == TaskKind::classification)
        std::tie(value, bundle) = backward(c.spec, params, c.inputs, c.loss, c.label);
    else
        std::tie(value, bundle) = backward(c.spec, params, c.inputs, c.loss, c.target);
    REQUIRE(std::isfinite(value));

    std::size_t failures = 0;
    auto agree = [&](double analytic, double numeric) {
        return std::fabs(analytic - numeric) <=
               kAbsTol + kRelTol * std::max(std::fabs(analytic), std::fabs(numeric));
    };
    for (std::size_t k = 0; k < n_coords; ++k) {
        const std::size_t i = pick.below(params.values.size());
        Parameters up = params, dn = params;
        up.values[i] += kStep;
        dn.values[i] -= kStep;
        const double numeric = (loss_value(c, up, c.inputs) - loss_value(c, dn, c.inputs)) / (2.0 * kStep);
        if (!agree(bundle.param_grads[i], numeric)) ++failures;
        ++checked;
    }
    for (const auto& [name, grad] : bundle.input_grads) {
        for (std::size_t k = 0; k < n_coords / bundle.input_grads.size() + 1; ++k) {
            const std::size_t i = pick.below(grad.a.size());
            auto up = c.inputs, dn = c.inputs;
            up.at(name).values.a[i] += kStep;
            dn.at(name).values.a[i] -= kStep;
            const double numeric = (loss_value(c, params, up) - loss_value(c, params, dn)) / (2.0 * kStep);
            if (!agree(grad.a[i], numeric)) ++failures;
            ++checked;
        }
    }
    return failures;
}

}  // namespace

TEST_CASE("analytic gradients match finite differences across layer kinds and losses") {
    Rng data(88), pick(4242);
    std::vector<GradCase> cases;

    {  // conv(relu) + conv(tanh) + lstm, dense(sigmoid) + dense(relu), softmax/xent
        GradCase c;
        c.spec.task = TaskKind::classification;
        c.spec.n_classes = 3;
        c.spec.branches.push_back(
            {"spect", 5, {conv1d(8, 3, Activation::relu), conv1d(6, 2, Activation::tanh_act), lstm(6)}});
        c.spec.trunk = {dense(7, Activation::sigmoid), dense(5, Activation::relu),
                        output(3, Activation::softmax)};
        c.loss = LossSpec{LossKind::cross_entropy};
        c.label = 1;
        c.inputs.emplace("spect", random_features(7, 5, data));
        cases.push_back(std::move(c));
    }
    for (const LossSpec loss : {LossSpec{LossKind::mse, 1.0}, LossSpec{LossKind::corr, 1.0},
                                LossSpec{LossKind::corr_plus_mse, 0.7}}) {
        // conv + pool + conv + lstm regression, all sequence losses
        GradCase c;
        c.spec.task = TaskKind::sequence_regression;
        c.spec.branches.push_back({"spect", 4,
                                   {conv1d(8, 4, Activation::relu), maxpool1d(2),
                                    conv1d(5, 3, Activation::tanh_act), lstm(6)}});
        c.spec.trunk = {dense(6, Activation::relu), output(1, Activation::linear)};
        c.loss = loss;
        c.inputs.emplace("spect", random_features(12, 4, data));
        c.target.resize(6);
        for (auto& v : c.target) v = 2.0 + data.normal();
        cases.push_back(std::move(c));
    }
    {  // middle fusion, two branches
        GradCase c;
        c.spec.task = TaskKind::classification;
        c.spec.n_classes = 2;
        c.spec.branches.push_back({"a", 3, {conv1d(4, 2, Activation::relu), lstm(4)}});
        c.spec.branches.push_back({"b", 2, {lstm(3)}});
        c.spec.trunk = {dense(5, Activation::tanh_act), output(2, Activation::softmax)};
        c.loss = LossSpec{LossKind::cross_entropy};
        c.label = 0;
        c.inputs.emplace("a", random_features(9, 3, data));
        c.inputs.emplace("b", random_features(9, 2, data));
        cases.push_back(std::move(c));
    }

    std::size_t checked = 0, failures = 0;
    for (const auto& c : cases) failures += check_case(c, 120, pick, checked);
    INFO("coordinates checked: " << checked);
    REQUIRE(checked >= 1000);
    REQUIRE(failures == 0);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
    const auto ds = synth_classification(3, 30, 5, 6, {0}, 1.0);
    const auto spec = make_msc_spec(6, 2, 3, 1, 1, 4, 4);
    const auto p0 = init(spec, 17);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 10;
    cfg.learning_rate = 1e-300;  // adam scale-invariance means lr is the only step size
    const auto p1 = train(spec, p0, ds.train, LossSpec{LossKind::cross_entropy}, cfg);
    for (std::size_t i = 0; i < p0.values.size(); ++i)
        REQUIRE(p1.values[i] == Catch::Approx(p0.values[i]).margin(1e-290));
}

TEST_CASE("perfect prediction under mse has zero gradients") {
    NetworkSpec spec;
    spec.task = TaskKind::sequence_regression;
    spec.branches.push_back({"spect", 3, {lstm(4)}});
    spec.trunk = {output(1, Activation::linear)};
    const auto params = init(spec, 5);
    Rng data(9);
    FeatureMatrix fm;
    fm.values = Matrix(8, 3);
    for (auto& v : fm.values.a) v = data.normal();
    fm.band_labels.assign(3, "b");
    fm.frame_rate = 1.0;
    const auto pred = forward(spec, params, {{"spect", fm}});
    const auto [value, bundle] =
        backward(spec, params, {{"spect", fm}}, LossSpec{LossKind::mse}, pred.sequence);
    REQUIRE(value == 0.0);
    for (double g : bundle.param_grads) REQUIRE(g == 0.0);
    for (double g : bundle.input_grads.at("spect").a) REQUIRE(g == 0.0);
}

TEST_CASE("output_gradient selects class units and sums sequence outputs") {
    // classification: d posterior_k seeds, complement classes sum to ~0 per cell
    const auto spec = make_msc_spec(5, 2, 4, 1, 1, 5, 6);
    const auto params = init(spec, 33);
    Rng data(21);
    const auto fm = random_features(6, 5, data);
    const auto g0 = output_gradient(spec, params, {{"spect", fm}}, OutputUnit::cls(0));
    const auto g1 = output_gradient(spec, params, {{"spect", fm}}, OutputUnit::cls(1));
    const Matrix& a = g0.input_grads.at("spect");
    const Matrix& b = g1.input_grads.at("spect");
    for (std::size_t i = 0; i < a.a.size(); ++i) REQUIRE(a.a[i] + b.a[i] == Catch::Approx(0.0).margin(1e-12));
    REQUIRE_THROWS_AS(output_gradient(spec, params, {{"spect", fm}}, OutputUnit::cls(7)), ConfigError);

    // internal consistency with backward(): cross-entropy input grads are
    // -1/p_y times the class-unit output gradients
    const auto pred = forward(spec, params, {{"spect", fm}});
    const auto [value, xent] =
        backward(spec, params, {{"spect", fm}}, LossSpec{LossKind::cross_entropy}, 1);
    const double scale = -1.0 / pred.posterior[1];
    const Matrix& gx = xent.input_grads.at("spect");
    for (std::size_t i = 0; i < gx.a.size(); ++i)
        REQUIRE(gx.a[i] == Catch::Approx(scale * b.a[i]).epsilon(1e-10).margin(1e-12));
}

TEST_CASE("sequence backward is linear in the output seed") {
    // backward with target = pred - 0.5 under mse gives dL/dy = 1/T exactly,
    // so input grads times T must equal the 'sum' output gradient.
    NetworkSpec spec;
    spec.task = TaskKind::sequence_regression;
    spec.branches.push_back({"spect", 4, {conv1d(5, 3), lstm(5)}});
    spec.trunk = {dense(4, Activation::relu), output(1, Activation::linear)};
    const auto params = init(spec, 61);
    Rng data(51);
    const auto fm = random_features(10, 4, data);
    const auto pred = forward(spec, params, {{"spect", fm}});
    std::vector<double> target(pred.sequence);
    for (auto& v : target) v -= 0.5;
    const auto [value, viaLoss] = backward(spec, params, {{"spect", fm}}, LossSpec{LossKind::mse}, target);
    const auto viaUnit = output_gradient(spec, params, {{"spect", fm}}, OutputUnit::sum());
    const double t = static_cast<double>(pred.sequence.size());
    const Matrix& gl = viaLoss.input_grads.at("spect");
    const Matrix& gu = viaUnit.input_grads.at("spect");
    for (std::size_t i = 0; i < gl.a.size(); ++i)
        REQUIRE(gl.a[i] * t == Catch::Approx(gu.a[i]).epsilon(1e-10).margin(1e-14));
}

TEST_CASE("linear probe branch reproduces analytic gradients") {
    // empty branch + linear output: y_t = 3*x1 - x2
    NetworkSpec spec;
    spec.task = TaskKind::sequence_regression;
    spec.branches.push_back({"x", 2, {}});
    spec.trunk = {output(1, Activation::linear)};
    Parameters params;
    params.values = {3.0, -1.0, 0.0};  // W then bias
    FeatureMatrix fm;
    fm.values = Matrix(4, 2);
    Rng data(3);
    for (auto& v : fm.values.a) v = data.normal();
    fm.band_labels = {"x1", "x2"};
    fm.frame_rate = 1.0;
    const auto pred = forward(spec, params, {{"x", fm}});
    for (std::size_t t = 0; t < 4; ++t)
        REQUIRE(pred.sequence[t] ==
                Catch::Approx(3.0 * fm.values.at(t, 0) - fm.values.at(t, 1)).epsilon(1e-12));
    const auto g = output_gradient(spec, params, {{"x", fm}}, OutputUnit::sum());
    for (std::size_t t = 0; t < 4; ++t) {
        REQUIRE(g.input_grads.at("x").at(t, 0) == 3.0);
        REQUIRE(g.input_grads.at("x").at(t, 1) == -1.0);
    }
}

TEST_CASE("training aborts with a report on non-finite loss") {
    const auto ds = synth_classification(3, 20, 4, 3, {0}, 1.0);
    const auto spec = make_msc_spec(3, 2, 3, 1, 1, 4, 4);
    auto p0 = init(spec, 2);
    p0.values[0] = std::numeric_limits<double>::quiet_NaN();
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 8;
    REQUIRE_THROWS_AS(train(spec, p0, ds.train, LossSpec{LossKind::cross_entropy}, cfg), NumericError);
}
