#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "e2efs/data.hpp"
#include "e2efs/losses.hpp"
#include "e2efs/nn.hpp"

namespace e2efs {

struct TrainConfig {
    double learning_rate = 0.001;
    int batch_size = 100;
    int epochs = 10;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t shuffle_seed = 0;

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
            throw ConfigError("train: adam betas must lie in [0,1)");
        if (!(epsilon > 0.0)) throw ConfigError("train: adam epsilon must be > 0");
    }
};

namespace detail {

// Maps a stored example onto the network's named branch inputs. The default
// binder passes streams through by name; the ensemble layer installs binders
// that apply feature masks ("selected" branches) or wrap raw audio.
using InputBinder = std::function<std::map<std::string, FeatureMatrix>(const LabeledExample&)>;

inline std::map<std::string, FeatureMatrix> bind_passthrough(const LabeledExample& ex) {
    return ex.inputs;
}

struct Adam {
    std::vector<double> m, v;
    double beta1, beta2, epsilon, lr;
    long long t = 0;

    Adam(std::size_t n, const TrainConfig& cfg)
        : m(n, 0.0), v(n, 0.0), beta1(cfg.beta1), beta2(cfg.beta2), epsilon(cfg.epsilon),
          lr(cfg.learning_rate) {}

    void step(std::vector<double>& params, const std::vector<double>& grads) {
        ++t;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double g = grads[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            params[i] -= lr * mhat / (std::sqrt(vhat) + epsilon);
        }
    }
};

}  // namespace detail

// Adam over shuffled mini-batches; deterministic for fixed (params.seed,
// shuffle_seed): single-threaded, fixed accumulation order. `log` gets one
// line per epoch.
inline Parameters train(const NetworkSpec& spec, const Parameters& initial,
                        const std::vector<LabeledExample>& examples, const LossSpec& loss,
                        const TrainConfig& cfg, std::ostream* log = nullptr,
                        const detail::InputBinder& binder = detail::bind_passthrough) {
    cfg.validate();
    loss.validate();
    if (examples.empty()) throw DataError("train: empty training set");
    validate_spec(spec);

    Parameters params = initial;
    detail::Adam adam(params.values.size(), cfg);
    Rng shuffle_rng(cfg.shuffle_seed);
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);

    std::vector<double> grad_accum(params.values.size());
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t seen = 0, degenerate_count = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::fill(grad_accum.begin(), grad_accum.end(), 0.0);
            double batch_loss = 0.0;
            for (std::size_t i = start; i < end; ++i) {
                const LabeledExample& ex = examples[order[i]];
                const auto inputs = binder(ex);
                double value = 0.0;
                GradientBundle bundle;
                if (spec.task == TaskKind::classification) {
                    if (!ex.label) throw DataError("train: example '" + ex.id + "' has no class label");
                    std::tie(value, bundle) = backward(spec, params, inputs, loss, *ex.label);
                } else {
                    if (!ex.target) throw DataError("train: example '" + ex.id + "' has no target sequence");
                    bool degenerate = false;
                    std::tie(value, bundle) = backward(spec, params, inputs, loss, *ex.target, &degenerate);
                    if (degenerate) ++degenerate_count;
                }
                if (!std::isfinite(value))
                    throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                       ", batch " + std::to_string(start / cfg.batch_size) + " (example '" +
                                       ex.id + "')");
                batch_loss += value;
                for (std::size_t k = 0; k < grad_accum.size(); ++k)
                    grad_accum[k] += bundle.param_grads[k];
            }
            const double inv = 1.0 / static_cast<double>(end - start);
            for (double& g : grad_accum) g *= inv;
            adam.step(params.values, grad_accum);
            epoch_loss += batch_loss;
            seen += end - start;
        }
        if (log) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "epoch=%d loss=%.12g", epoch,
                          epoch_loss / static_cast<double>(seen));
            *log << buf;
            if (degenerate_count > 0) *log << " degenerate_corr=" << degenerate_count;
            *log << "\n";
        }
    }
    return params;
}

}  // namespace e2efs
