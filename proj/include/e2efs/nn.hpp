#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "e2efs/data.hpp"
#include "e2efs/errors.hpp"
#include "e2efs/losses.hpp"
#include "e2efs/matrix.hpp"
#include "e2efs/rng.hpp"

namespace e2efs {

enum class Activation { linear, relu, tanh_act, sigmoid, softmax };
enum class LayerKind { conv1d, maxpool1d, lstm, dense, output };

inline std::string to_string(Activation a) {
    switch (a) {
        case Activation::linear: return "linear";
        case Activation::relu: return "relu";
        case Activation::tanh_act: return "tanh";
        case Activation::sigmoid: return "sigmoid";
        case Activation::softmax: return "softmax";
    }
    return "?";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "linear") return Activation::linear;
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh_act;
    if (s == "sigmoid") return Activation::sigmoid;
    if (s == "softmax") return Activation::softmax;
    throw ConfigError("unknown activation: " + s);
}

struct LayerSpec {
    LayerKind kind = LayerKind::dense;
    int units = 0;         // filters (conv1d), cells (lstm), units (dense/output)
    int kernel_width = 0;  // conv1d
    int stride = 1;        // maxpool1d
    Activation activation = Activation::linear;
};

inline LayerSpec conv1d(int filters, int width, Activation act = Activation::relu) {
    return {LayerKind::conv1d, filters, width, 1, act};
}
inline LayerSpec maxpool1d(int stride) { return {LayerKind::maxpool1d, 0, 0, stride, Activation::linear}; }
inline LayerSpec lstm(int cells) { return {LayerKind::lstm, cells, 0, 1, Activation::linear}; }
inline LayerSpec dense(int units, Activation act = Activation::relu) {
    return {LayerKind::dense, units, 0, 1, act};
}
inline LayerSpec output(int units, Activation act) { return {LayerKind::output, units, 0, 1, act}; }

struct BranchSpec {
    std::string input_name;
    int input_bands = 0;
    std::vector<LayerSpec> layers;
};

// Multi-branch network: each branch encodes one named input stream
// (convolutions/pooling, usually ending in an LSTM); branch representations
// are concatenated and fed to the shared dense trunk (middle fusion).
struct NetworkSpec {
    TaskKind task = TaskKind::classification;
    int n_classes = 2;
    std::vector<BranchSpec> branches;
    std::vector<LayerSpec> trunk;  // zero or more dense layers, then the output layer
};

// ---------------------------------------------------------------------------
// Validation and compiled geometry
// ---------------------------------------------------------------------------

namespace detail {

struct LayerPlan {
    LayerKind kind;
    Activation act = Activation::linear;
    int in_ch = 0, out_ch = 0, width = 0, stride = 1;
    std::size_t offset = 0, count = 0;
};

struct BranchPlan {
    std::string input_name;
    int in_ch = 0, out_ch = 0;
    std::vector<LayerPlan> layers;
};

struct NetPlan {
    TaskKind task = TaskKind::classification;
    int n_classes = 2;
    std::vector<BranchPlan> branches;
    std::vector<LayerPlan> trunk;
    int trunk_in = 0;
    std::size_t total_params = 0;
};

inline std::size_t conv_param_count(int in_ch, int filters, int width) {
    return static_cast<std::size_t>(filters) * width * in_ch + static_cast<std::size_t>(filters);
}
inline std::size_t lstm_param_count(int in_ch, int cells) {
    return 4ull * (static_cast<std::size_t>(in_ch) * cells + static_cast<std::size_t>(cells) * cells +
                   static_cast<std::size_t>(cells));
}
inline std::size_t dense_param_count(int in_ch, int units) {
    return static_cast<std::size_t>(in_ch) * units + static_cast<std::size_t>(units);
}

inline NetPlan compile_plan(const NetworkSpec& spec) {
    NetPlan plan;
    plan.task = spec.task;
    plan.n_classes = spec.n_classes;
    if (spec.branches.empty()) throw ConfigError("network: at least one branch required");
    std::size_t offset = 0;
    for (const auto& br : spec.branches) {
        if (br.input_name.empty()) throw ConfigError("network: branch with empty input name");
        for (const auto& other : plan.branches)
            if (other.input_name == br.input_name)
                throw ConfigError("network: duplicate branch input '" + br.input_name + "'");
        if (br.input_bands < 1)
            throw ConfigError("network: branch '" + br.input_name + "' needs input_bands >= 1");
        BranchPlan bp;
        bp.input_name = br.input_name;
        bp.in_ch = br.input_bands;
        int ch = br.input_bands;
        for (const auto& layer : br.layers) {
            LayerPlan lp;
            lp.kind = layer.kind;
            lp.act = layer.activation;
            lp.in_ch = ch;
            switch (layer.kind) {
                case LayerKind::conv1d:
                    if (layer.units < 1 || layer.kernel_width < 1)
                        throw ConfigError("conv1d: filters and kernel_width must be positive");
                    if (layer.activation == Activation::softmax)
                        throw ConfigError("softmax is only valid on the output layer");
                    lp.out_ch = layer.units;
                    lp.width = layer.kernel_width;
                    lp.count = conv_param_count(ch, layer.units, layer.kernel_width);
                    break;
                case LayerKind::maxpool1d:
                    if (layer.stride < 1) throw ConfigError("maxpool1d: stride must be >= 1");
                    lp.out_ch = ch;
                    lp.stride = layer.stride;
                    lp.count = 0;
                    break;
                case LayerKind::lstm:
                    if (layer.units < 1) throw ConfigError("lstm: cells must be positive");
                    lp.out_ch = layer.units;
                    lp.count = lstm_param_count(ch, layer.units);
                    break;
                default:
                    throw ConfigError("network: branch layers must be conv1d/maxpool1d/lstm");
            }
            lp.offset = offset;
            offset += lp.count;
            ch = lp.out_ch;
            bp.layers.push_back(lp);
        }
        // Classification needs a fixed-size branch representation: the final
        // hidden state of an LSTM. Sequence regression reads the trunk per
        // retained step, so conv-only (or pass-through) branches are allowed.
        if (spec.task == TaskKind::classification &&
            (bp.layers.empty() || bp.layers.back().kind != LayerKind::lstm))
            throw ConfigError("network: classification branch '" + br.input_name + "' must end in an lstm layer");
        bp.out_ch = ch;
        plan.trunk_in += ch;
        plan.branches.push_back(std::move(bp));
    }
    if (spec.trunk.empty() || spec.trunk.back().kind != LayerKind::output)
        throw ConfigError("network: trunk must end in an output layer");
    int ch = plan.trunk_in;
    for (std::size_t i = 0; i < spec.trunk.size(); ++i) {
        const auto& layer = spec.trunk[i];
        LayerPlan lp;
        lp.kind = layer.kind;
        lp.act = layer.activation;
        lp.in_ch = ch;
        if (layer.kind == LayerKind::dense) {
            if (i + 1 == spec.trunk.size()) throw ConfigError("network: trunk must end in an output layer");
            if (layer.units < 1) throw ConfigError("dense: units must be positive");
            if (layer.activation == Activation::softmax)
                throw ConfigError("softmax is only valid on the output layer");
        } else if (layer.kind == LayerKind::output) {
            if (i + 1 != spec.trunk.size()) throw ConfigError("network: output layer must be last");
            if (spec.task == TaskKind::classification) {
                if (layer.activation != Activation::softmax || layer.units != spec.n_classes ||
                    spec.n_classes < 2)
                    throw ConfigError("network: classification output must be softmax over n_classes >= 2");
            } else {
                if (layer.activation != Activation::linear || layer.units != 1)
                    throw ConfigError("network: sequence_regression output must be linear with one unit");
            }
        } else {
            throw ConfigError("network: trunk layers must be dense/output");
        }
        lp.out_ch = layer.units;
        lp.count = dense_param_count(ch, layer.units);
        lp.offset = offset;
        offset += lp.count;
        ch = layer.units;
        plan.trunk.push_back(lp);
    }
    plan.total_params = offset;
    return plan;
}

}  // namespace detail

inline void validate_spec(const NetworkSpec& spec) { (void)detail::compile_plan(spec); }

inline std::size_t count_parameters(const NetworkSpec& spec) {
    return detail::compile_plan(spec).total_params;
}

// Retained time steps of a branch for an input of `t` frames: convolutions
// preserve length (zero-padded), pooling keeps floor(T/stride) full windows.
inline std::size_t retained_steps(const BranchSpec& branch, std::size_t t) {
    for (const auto& layer : branch.layers)
        if (layer.kind == LayerKind::maxpool1d) t /= static_cast<std::size_t>(layer.stride);
    return t;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct Parameters {
    std::vector<double> values;
    std::uint64_t seed = 0;
};

// Glorot-uniform weights, zero biases, LSTM forget-gate bias 1. Gate packing
// order is i,f,g,o: Wx[4][cells][in], Wh[4][cells][cells], b[4][cells].
// Conv packing: W[filters][width][in_ch], then b. Dense: W[out][in], then b.
inline Parameters init(const NetworkSpec& spec, std::uint64_t seed) {
    const auto plan = detail::compile_plan(spec);
    Parameters params;
    params.seed = seed;
    params.values.assign(plan.total_params, 0.0);
    Rng rng(seed);
    auto glorot = [&](double* dst, std::size_t n, int fan_in, int fan_out) {
        const double limit = std::sqrt(6.0 / (fan_in + fan_out));
        for (std::size_t i = 0; i < n; ++i) dst[i] = rng.uniform(-limit, limit);
    };
    auto init_layer = [&](const detail::LayerPlan& lp) {
        double* base = params.values.data() + lp.offset;
        switch (lp.kind) {
            case LayerKind::conv1d: {
                const std::size_t w_count = static_cast<std::size_t>(lp.out_ch) * lp.width * lp.in_ch;
                glorot(base, w_count, lp.in_ch * lp.width, lp.out_ch * lp.width);
                break;  // biases stay zero
            }
            case LayerKind::lstm: {
                const std::size_t h = static_cast<std::size_t>(lp.out_ch);
                const std::size_t wx = 4 * h * static_cast<std::size_t>(lp.in_ch);
                const std::size_t wh = 4 * h * h;
                glorot(base, wx, lp.in_ch, 4 * lp.out_ch);
                glorot(base + wx, wh, lp.out_ch, 4 * lp.out_ch);
                double* bias = base + wx + wh;
                for (std::size_t j = 0; j < h; ++j) bias[h + j] = 1.0;  // forget gate block
                break;
            }
            case LayerKind::dense:
            case LayerKind::output: {
                const std::size_t w_count = static_cast<std::size_t>(lp.out_ch) * lp.in_ch;
                glorot(base, w_count, lp.in_ch, lp.out_ch);
                break;
            }
            case LayerKind::maxpool1d:
                break;
        }
    };
    for (const auto& bp : plan.branches)
        for (const auto& lp : bp.layers) init_layer(lp);
    for (const auto& lp : plan.trunk) init_layer(lp);
    return params;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct Prediction {
    std::vector<double> posterior;  // classification: sums to 1
    std::vector<double> sequence;   // sequence_regression: one value per retained step
};

struct GradientBundle {
    std::vector<double> param_grads;
    std::map<std::string, Matrix> input_grads;  // per branch, input-shaped
};

namespace detail {

inline double apply_act(Activation a, double z) {
    switch (a) {
        case Activation::linear: return z;
        case Activation::relu: return z > 0.0 ? z : 0.0;
        case Activation::tanh_act: return std::tanh(z);
        case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-z));
        case Activation::softmax: break;
    }
    throw ConfigError("softmax applied outside output layer");
}

// Derivative expressed through the activated output.
inline double act_deriv_from_out(Activation a, double y) {
    switch (a) {
        case Activation::linear: return 1.0;
        case Activation::relu: return y > 0.0 ? 1.0 : 0.0;
        case Activation::tanh_act: return 1.0 - y * y;
        case Activation::sigmoid: return y * (1.0 - y);
        case Activation::softmax: break;
    }
    throw ConfigError("softmax applied outside output layer");
}

struct LstmCache {
    Matrix gi, gf, gg, go;  // activated gates, T x H
    Matrix c, tc;           // cell state and tanh(cell state), T x H
};

struct BranchTape {
    Matrix input;                           // copy of the branch input
    std::vector<Matrix> outs;               // per-layer output sequences
    std::vector<std::vector<int>> argmax;   // per pool layer (aligned with layers)
    std::vector<LstmCache> lstm;            // aligned with layers
};

struct Tape {
    std::vector<BranchTape> branches;
    Matrix trunk_in;                 // classification: 1 x C; regression: T' x C
    std::vector<Matrix> trunk_outs;  // per trunk layer (same row count as trunk_in)
    std::vector<double> logits;      // classification only (pre-softmax)
};

inline void conv1d_forward(const LayerPlan& lp, const double* p, const Matrix& in, Matrix& out) {
    const int pad_left = (lp.width - 1) / 2;
    const double* bias = p + static_cast<std::size_t>(lp.out_ch) * lp.width * lp.in_ch;
    out = Matrix(in.rows, static_cast<std::size_t>(lp.out_ch));
    const long long t_max = static_cast<long long>(in.rows);
    for (long long t = 0; t < t_max; ++t) {
        double* orow = out.row(static_cast<std::size_t>(t));
        for (int f = 0; f < lp.out_ch; ++f) {
            const double* w = p + (static_cast<std::size_t>(f) * lp.width) * lp.in_ch;
            double acc = bias[f];
            for (int k = 0; k < lp.width; ++k) {
                const long long src = t + k - pad_left;
                if (src < 0 || src >= t_max) continue;
                const double* irow = in.row(static_cast<std::size_t>(src));
                const double* wk = w + static_cast<std::size_t>(k) * lp.in_ch;
                for (int c = 0; c < lp.in_ch; ++c) acc += wk[c] * irow[c];
            }
            orow[f] = apply_act(lp.act, acc);
        }
    }
}

inline void maxpool1d_forward(const LayerPlan& lp, const Matrix& in, Matrix& out, std::vector<int>& argmax) {
    const std::size_t stride = static_cast<std::size_t>(lp.stride);
    const std::size_t t_out = in.rows / stride;
    if (t_out == 0) throw DataError("maxpool1d: input shorter than one pooling window");
    out = Matrix(t_out, in.cols);
    argmax.assign(t_out * in.cols, 0);
    for (std::size_t t = 0; t < t_out; ++t) {
        for (std::size_t c = 0; c < in.cols; ++c) {
            std::size_t best = t * stride;
            double best_v = in.at(best, c);
            for (std::size_t u = t * stride + 1; u < (t + 1) * stride; ++u) {
                const double v = in.at(u, c);
                if (v > best_v) {
                    best_v = v;
                    best = u;
                }
            }
            out.at(t, c) = best_v;
            argmax[t * in.cols + c] = static_cast<int>(best);
        }
    }
}

inline void lstm_forward(const LayerPlan& lp, const double* p, const Matrix& in, Matrix& h_out,
                         LstmCache& cache) {
    const std::size_t h = static_cast<std::size_t>(lp.out_ch);
    const std::size_t in_ch = static_cast<std::size_t>(lp.in_ch);
    const double* wx = p;                       // [4][h][in]
    const double* wh = p + 4 * h * in_ch;       // [4][h][h]
    const double* bias = wh + 4 * h * h;        // [4][h]
    const std::size_t t_max = in.rows;
    h_out = Matrix(t_max, h);
    cache.gi = Matrix(t_max, h);
    cache.gf = Matrix(t_max, h);
    cache.gg = Matrix(t_max, h);
    cache.go = Matrix(t_max, h);
    cache.c = Matrix(t_max, h);
    cache.tc = Matrix(t_max, h);
    std::vector<double> z(4 * h);
    for (std::size_t t = 0; t < t_max; ++t) {
        const double* x = in.row(t);
        const double* hprev = t > 0 ? h_out.row(t - 1) : nullptr;
        for (std::size_t gj = 0; gj < 4 * h; ++gj) {
            const double* wxr = wx + gj * in_ch;
            double acc = bias[gj];
            for (std::size_t i = 0; i < in_ch; ++i) acc += wxr[i] * x[i];
            if (hprev) {
                const double* whr = wh + gj * h;
                for (std::size_t j = 0; j < h; ++j) acc += whr[j] * hprev[j];
            }
            z[gj] = acc;
        }
        for (std::size_t j = 0; j < h; ++j) {
            const double gi = 1.0 / (1.0 + std::exp(-z[j]));
            const double gf = 1.0 / (1.0 + std::exp(-z[h + j]));
            const double gg = std::tanh(z[2 * h + j]);
            const double go = 1.0 / (1.0 + std::exp(-z[3 * h + j]));
            const double cprev = t > 0 ? cache.c.at(t - 1, j) : 0.0;
            const double c = gf * cprev + gi * gg;
            const double tc = std::tanh(c);
            cache.gi.at(t, j) = gi;
            cache.gf.at(t, j) = gf;
            cache.gg.at(t, j) = gg;
            cache.go.at(t, j) = go;
            cache.c.at(t, j) = c;
            cache.tc.at(t, j) = tc;
            h_out.at(t, j) = go * tc;
        }
    }
}

// Dense layer applied row-wise (one row for classification, one per retained
// step for regression).
inline void dense_forward(const LayerPlan& lp, const double* p, const Matrix& in, Matrix& out,
                          bool raw_logits) {
    const double* bias = p + static_cast<std::size_t>(lp.out_ch) * lp.in_ch;
    out = Matrix(in.rows, static_cast<std::size_t>(lp.out_ch));
    for (std::size_t t = 0; t < in.rows; ++t) {
        const double* irow = in.row(t);
        double* orow = out.row(t);
        for (int u = 0; u < lp.out_ch; ++u) {
            const double* w = p + static_cast<std::size_t>(u) * lp.in_ch;
            double acc = bias[u];
            for (int c = 0; c < lp.in_ch; ++c) acc += w[c] * irow[c];
            orow[u] = raw_logits ? acc : apply_act(lp.act, acc);
        }
    }
}

inline std::vector<double> softmax(const std::vector<double>& z) {
    const double m = *std::max_element(z.begin(), z.end());
    std::vector<double> p(z.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        p[i] = std::exp(z[i] - m);
        sum += p[i];
    }
    for (double& v : p) v /= sum;
    return p;
}

inline void check_finite(const Matrix& m, const std::string& where) {
    for (double v : m.a)
        if (!std::isfinite(v)) throw NumericError("non-finite intermediate in " + where);
}

// Runs the network. When `tape` is non-null every intermediate needed for the
// backward pass is recorded and checked for finiteness.
inline Prediction forward_impl(const NetPlan& plan, const Parameters& params,
                               const std::map<std::string, FeatureMatrix>& inputs, Tape* tape) {
    if (params.values.size() != plan.total_params)
        throw ConfigError("parameters: expected " + std::to_string(plan.total_params) + " values, got " +
                          std::to_string(params.values.size()));
    const double* p0 = params.values.data();
    std::vector<Matrix> branch_final(plan.branches.size());
    if (tape) tape->branches.assign(plan.branches.size(), {});
    std::size_t expected_rows = 0;
    for (std::size_t b = 0; b < plan.branches.size(); ++b) {
        const auto& bp = plan.branches[b];
        const auto it = inputs.find(bp.input_name);
        if (it == inputs.end()) throw DataError("forward: missing input stream '" + bp.input_name + "'");
        const Matrix& x = it->second.values;
        if (x.cols != static_cast<std::size_t>(bp.in_ch))
            throw DataError("forward: branch '" + bp.input_name + "': expected " + std::to_string(bp.in_ch) +
                            " columns on the feature axis, got " + std::to_string(x.cols));
        if (x.rows < 1) throw DataError("forward: branch '" + bp.input_name + "': empty time axis");
        BranchTape* bt = tape ? &tape->branches[b] : nullptr;
        if (bt) {
            bt->input = x;
            bt->outs.resize(bp.layers.size());
            bt->argmax.resize(bp.layers.size());
            bt->lstm.resize(bp.layers.size());
        }
        Matrix cur = x;
        for (std::size_t li = 0; li < bp.layers.size(); ++li) {
            const auto& lp = bp.layers[li];
            Matrix next;
            switch (lp.kind) {
                case LayerKind::conv1d:
                    conv1d_forward(lp, p0 + lp.offset, cur, next);
                    break;
                case LayerKind::maxpool1d: {
                    std::vector<int> argmax;
                    maxpool1d_forward(lp, cur, next, argmax);
                    if (bt) bt->argmax[li] = std::move(argmax);
                    break;
                }
                case LayerKind::lstm: {
                    LstmCache cache;
                    lstm_forward(lp, p0 + lp.offset, cur, next, cache);
                    if (bt) bt->lstm[li] = std::move(cache);
                    break;
                }
                default:
                    throw ConfigError("invalid branch layer");
            }
            if (bt) {
                check_finite(next, "branch '" + bp.input_name + "' layer " + std::to_string(li));
                bt->outs[li] = next;
            }
            cur = std::move(next);
        }
        if (plan.task == TaskKind::sequence_regression) {
            if (b == 0)
                expected_rows = cur.rows;
            else if (cur.rows != expected_rows)
                throw DataError("forward: branch '" + bp.input_name + "': retained step count " +
                                std::to_string(cur.rows) + " does not match " + std::to_string(expected_rows) +
                                " (time axis)");
        }
        branch_final[b] = std::move(cur);
    }

    // Concatenate branch representations: final LSTM state for
    // classification, the full retained sequence for regression.
    Matrix trunk_in;
    if (plan.task == TaskKind::classification) {
        trunk_in = Matrix(1, static_cast<std::size_t>(plan.trunk_in));
        std::size_t col = 0;
        for (std::size_t b = 0; b < plan.branches.size(); ++b) {
            const Matrix& h = branch_final[b];
            const double* last = h.row(h.rows - 1);
            for (std::size_t j = 0; j < h.cols; ++j) trunk_in.at(0, col++) = last[j];
        }
    } else {
        trunk_in = Matrix(expected_rows, static_cast<std::size_t>(plan.trunk_in));
        std::size_t col = 0;
        for (std::size_t b = 0; b < plan.branches.size(); ++b) {
            const Matrix& h = branch_final[b];
            for (std::size_t j = 0; j < h.cols; ++j, ++col)
                for (std::size_t t = 0; t < h.rows; ++t) trunk_in.at(t, col) = h.at(t, j);
        }
    }

    Matrix cur = trunk_in;
    if (tape) {
        tape->trunk_in = trunk_in;
        tape->trunk_outs.resize(plan.trunk.size());
    }
    Prediction pred;
    for (std::size_t li = 0; li < plan.trunk.size(); ++li) {
        const auto& lp = plan.trunk[li];
        const bool is_softmax_output = lp.kind == LayerKind::output && lp.act == Activation::softmax;
        Matrix next;
        dense_forward(lp, p0 + lp.offset, cur, next, is_softmax_output);
        if (tape) {
            check_finite(next, "trunk layer " + std::to_string(li));
            tape->trunk_outs[li] = next;
        }
        cur = std::move(next);
    }
    if (plan.task == TaskKind::classification) {
        std::vector<double> logits(cur.a);
        if (tape) tape->logits = logits;
        pred.posterior = softmax(logits);
    } else {
        pred.sequence.resize(cur.rows);
        for (std::size_t t = 0; t < cur.rows; ++t) pred.sequence[t] = cur.at(t, 0);
    }
    return pred;
}

// Reverse pass seeded with the gradient w.r.t. the network output
// (d posterior for classification, d sequence for regression).
inline GradientBundle backward_impl(const NetPlan& plan, const Parameters& params, const Tape& tape,
                                    const Prediction& pred, const std::vector<double>& d_output) {
    const double* p0 = params.values.data();
    GradientBundle bundle;
    bundle.param_grads.assign(params.values.size(), 0.0);
    double* g0 = bundle.param_grads.data();

    // Output layer seed.
    Matrix d_cur;  // gradient w.r.t. current trunk activation rows
    if (plan.task == TaskKind::classification) {
        if (d_output.size() != pred.posterior.size())
            throw ConfigError("backward: d_output size mismatch");
        // softmax jacobian: dz_j = p_j (g_j - sum_k p_k g_k)
        double dot = 0.0;
        for (std::size_t k = 0; k < d_output.size(); ++k) dot += pred.posterior[k] * d_output[k];
        d_cur = Matrix(1, d_output.size());
        for (std::size_t j = 0; j < d_output.size(); ++j)
            d_cur.at(0, j) = pred.posterior[j] * (d_output[j] - dot);
    } else {
        if (d_output.size() != pred.sequence.size())
            throw ConfigError("backward: d_output size mismatch");
        d_cur = Matrix(d_output.size(), 1);
        for (std::size_t t = 0; t < d_output.size(); ++t) d_cur.at(t, 0) = d_output[t];
    }

    // Trunk backward (dense layers; the softmax jacobian above already mapped
    // to logits, so the output layer is treated as linear here).
    for (std::size_t li = plan.trunk.size(); li-- > 0;) {
        const auto& lp = plan.trunk[li];
        const Matrix& in = li == 0 ? tape.trunk_in : tape.trunk_outs[li - 1];
        const Matrix& out = tape.trunk_outs[li];
        const bool linearized = lp.kind == LayerKind::output;
        // chain through the activation
        Matrix dz = d_cur;
        if (!linearized)
            for (std::size_t t = 0; t < dz.rows; ++t)
                for (std::size_t j = 0; j < dz.cols; ++j) dz.at(t, j) *= act_deriv_from_out(lp.act, out.at(t, j));
        double* gw = g0 + lp.offset;
        double* gb = gw + static_cast<std::size_t>(lp.out_ch) * lp.in_ch;
        const double* w = p0 + lp.offset;
        Matrix d_in(in.rows, in.cols, 0.0);
        for (std::size_t t = 0; t < in.rows; ++t) {
            const double* irow = in.row(t);
            const double* dzr = dz.row(t);
            double* dir = d_in.row(t);
            for (int u = 0; u < lp.out_ch; ++u) {
                const double d = dzr[static_cast<std::size_t>(u)];
                if (d == 0.0) continue;
                double* gwr = gw + static_cast<std::size_t>(u) * lp.in_ch;
                const double* wr = w + static_cast<std::size_t>(u) * lp.in_ch;
                gb[u] += d;
                for (int c = 0; c < lp.in_ch; ++c) {
                    gwr[c] += d * irow[c];
                    dir[c] += d * wr[c];
                }
            }
        }
        d_cur = std::move(d_in);
    }

    // Split the trunk-input gradient back into branch segments.
    std::size_t col0 = 0;
    for (std::size_t b = 0; b < plan.branches.size(); ++b) {
        const auto& bp = plan.branches[b];
        const auto& bt = tape.branches[b];
        const Matrix& branch_out = bp.layers.empty() ? bt.input : bt.outs.back();
        Matrix d_out(branch_out.rows, branch_out.cols, 0.0);
        if (plan.task == TaskKind::classification) {
            for (std::size_t j = 0; j < branch_out.cols; ++j)
                d_out.at(branch_out.rows - 1, j) = d_cur.at(0, col0 + j);
        } else {
            for (std::size_t j = 0; j < branch_out.cols; ++j)
                for (std::size_t t = 0; t < branch_out.rows; ++t) d_out.at(t, j) = d_cur.at(t, col0 + j);
        }
        col0 += branch_out.cols;

        // Walk branch layers in reverse.
        for (std::size_t li = bp.layers.size(); li-- > 0;) {
            const auto& lp = bp.layers[li];
            const Matrix& in = li == 0 ? bt.input : bt.outs[li - 1];
            const Matrix& out = bt.outs[li];
            Matrix d_in(in.rows, in.cols, 0.0);
            switch (lp.kind) {
                case LayerKind::conv1d: {
                    const int pad_left = (lp.width - 1) / 2;
                    double* gw = g0 + lp.offset;
                    double* gb = gw + static_cast<std::size_t>(lp.out_ch) * lp.width * lp.in_ch;
                    const double* w = p0 + lp.offset;
                    const long long t_max = static_cast<long long>(in.rows);
                    for (long long t = 0; t < t_max; ++t) {
                        const double* dor = d_out.row(static_cast<std::size_t>(t));
                        const double* orow = out.row(static_cast<std::size_t>(t));
                        for (int f = 0; f < lp.out_ch; ++f) {
                            const double d = dor[f] * act_deriv_from_out(lp.act, orow[f]);
                            if (d == 0.0) continue;
                            gb[f] += d;
                            for (int k = 0; k < lp.width; ++k) {
                                const long long src = t + k - pad_left;
                                if (src < 0 || src >= t_max) continue;
                                const double* irow = in.row(static_cast<std::size_t>(src));
                                double* dir = d_in.row(static_cast<std::size_t>(src));
                                double* gwk = gw + (static_cast<std::size_t>(f) * lp.width +
                                                    static_cast<std::size_t>(k)) *
                                                       lp.in_ch;
                                const double* wk = w + (static_cast<std::size_t>(f) * lp.width +
                                                        static_cast<std::size_t>(k)) *
                                                           lp.in_ch;
                                for (int c = 0; c < lp.in_ch; ++c) {
                                    gwk[c] += d * irow[c];
                                    dir[c] += d * wk[c];
                                }
                            }
                        }
                    }
                    break;
                }
                case LayerKind::maxpool1d: {
                    const auto& argmax = bt.argmax[li];
                    for (std::size_t t = 0; t < out.rows; ++t)
                        for (std::size_t c = 0; c < out.cols; ++c)
                            d_in.at(static_cast<std::size_t>(argmax[t * out.cols + c]), c) += d_out.at(t, c);
                    break;
                }
                case LayerKind::lstm: {
                    const auto& cache = bt.lstm[li];
                    const std::size_t h = static_cast<std::size_t>(lp.out_ch);
                    const std::size_t in_ch = static_cast<std::size_t>(lp.in_ch);
                    const double* wx = p0 + lp.offset;
                    const double* wh = wx + 4 * h * in_ch;
                    double* gwx = g0 + lp.offset;
                    double* gwh = gwx + 4 * h * in_ch;
                    double* gb = gwh + 4 * h * h;
                    std::vector<double> dh(h, 0.0), dc(h, 0.0), dz(4 * h);
                    for (std::size_t t = in.rows; t-- > 0;) {
                        for (std::size_t j = 0; j < h; ++j) dh[j] += d_out.at(t, j);
                        for (std::size_t j = 0; j < h; ++j) {
                            const double go = cache.go.at(t, j);
                            const double tc = cache.tc.at(t, j);
                            const double dct = dh[j] * go * (1.0 - tc * tc) + dc[j];
                            const double gi = cache.gi.at(t, j);
                            const double gf = cache.gf.at(t, j);
                            const double gg = cache.gg.at(t, j);
                            const double cprev = t > 0 ? cache.c.at(t - 1, j) : 0.0;
                            dz[j] = dct * gg * gi * (1.0 - gi);                    // input gate
                            dz[h + j] = dct * cprev * gf * (1.0 - gf);             // forget gate
                            dz[2 * h + j] = dct * gi * (1.0 - gg * gg);            // candidate
                            dz[3 * h + j] = dh[j] * tc * go * (1.0 - go);          // output gate
                            dc[j] = dct * gf;
                        }
                        const double* x = in.row(t);
                        double* dxr = d_in.row(t);
                        std::fill(dh.begin(), dh.end(), 0.0);
                        for (std::size_t gj = 0; gj < 4 * h; ++gj) {
                            const double d = dz[gj];
                            if (d == 0.0) continue;
                            gb[gj] += d;
                            double* gwxr = gwx + gj * in_ch;
                            const double* wxr = wx + gj * in_ch;
                            for (std::size_t i = 0; i < in_ch; ++i) {
                                gwxr[i] += d * x[i];
                                dxr[i] += d * wxr[i];
                            }
                            if (t > 0) {
                                const double* hprev = bt.outs[li].row(t - 1);
                                double* gwhr = gwh + gj * h;
                                const double* whr = wh + gj * h;
                                for (std::size_t j = 0; j < h; ++j) {
                                    gwhr[j] += d * hprev[j];
                                    dh[j] += d * whr[j];
                                }
                            }
                        }
                    }
                    break;
                }
                default:
                    throw ConfigError("invalid branch layer");
            }
            d_out = std::move(d_in);
        }
        bundle.input_grads.emplace(bp.input_name, std::move(d_out));
    }
    return bundle;
}

}  // namespace detail

inline Prediction forward(const NetworkSpec& spec, const Parameters& params,
                          const std::map<std::string, FeatureMatrix>& inputs) {
    const auto plan = detail::compile_plan(spec);
    return detail::forward_impl(plan, params, inputs, nullptr);
}

// Scalar loss + exact gradients w.r.t. all parameters and all input cells.
inline std::pair<double, GradientBundle> backward(const NetworkSpec& spec, const Parameters& params,
                                                  const std::map<std::string, FeatureMatrix>& inputs,
                                                  const LossSpec& loss, int label) {
    if (spec.task != TaskKind::classification)
        throw ConfigError("backward: class label target requires a classification network");
    if (loss.kind != LossKind::cross_entropy)
        throw ConfigError("backward: classification training uses the cross_entropy loss");
    const auto plan = detail::compile_plan(spec);
    detail::Tape tape;
    const Prediction pred = detail::forward_impl(plan, params, inputs, &tape);
    const double value = cross_entropy(pred.posterior, label);
    const std::vector<double> d_post = cross_entropy_grad(pred.posterior, label);
    return {value, detail::backward_impl(plan, params, tape, pred, d_post)};
}

inline std::pair<double, GradientBundle> backward(const NetworkSpec& spec, const Parameters& params,
                                                  const std::map<std::string, FeatureMatrix>& inputs,
                                                  const LossSpec& loss, const std::vector<double>& target,
                                                  bool* degenerate = nullptr) {
    if (spec.task != TaskKind::sequence_regression)
        throw ConfigError("backward: sequence target requires a sequence_regression network");
    const auto plan = detail::compile_plan(spec);
    detail::Tape tape;
    const Prediction pred = detail::forward_impl(plan, params, inputs, &tape);
    if (pred.sequence.size() != target.size())
        throw DataError("backward: prediction length " + std::to_string(pred.sequence.size()) +
                        " does not match target length " + std::to_string(target.size()));
    const SequenceLossResult res = sequence_loss(loss, pred.sequence, target);
    if (degenerate) *degenerate = res.degenerate;
    return {res.value, detail::backward_impl(plan, params, tape, pred, res.grad)};
}

// Selector for the scalar output whose input sensitivity is wanted:
// a class posterior for classification, or the sum of the output sequence.
struct OutputUnit {
    enum class Kind { class_index, sum } kind = Kind::sum;
    int index = 0;

    static OutputUnit cls(int k) { return {Kind::class_index, k}; }
    static OutputUnit sum() { return {Kind::sum, 0}; }
};

// Gradients of the selected scalar output w.r.t. inputs (and parameters);
// needs no target.
inline GradientBundle output_gradient(const NetworkSpec& spec, const Parameters& params,
                                      const std::map<std::string, FeatureMatrix>& inputs,
                                      const OutputUnit& unit) {
    const auto plan = detail::compile_plan(spec);
    detail::Tape tape;
    const Prediction pred = detail::forward_impl(plan, params, inputs, &tape);
    std::vector<double> d_out;
    if (spec.task == TaskKind::classification) {
        if (unit.kind != OutputUnit::Kind::class_index)
            throw ConfigError("output_gradient: classification networks need a class index unit");
        if (unit.index < 0 || static_cast<std::size_t>(unit.index) >= pred.posterior.size())
            throw ConfigError("output_gradient: class index " + std::to_string(unit.index) + " out of range");
        d_out.assign(pred.posterior.size(), 0.0);
        d_out[static_cast<std::size_t>(unit.index)] = 1.0;
    } else {
        if (unit.kind != OutputUnit::Kind::sum)
            throw ConfigError("output_gradient: sequence networks support the 'sum' unit");
        d_out.assign(pred.sequence.size(), 1.0);
    }
    return detail::backward_impl(plan, params, tape, pred, d_out);
}

// ---------------------------------------------------------------------------
// Spec serialization (one line, used in model headers and ensemble manifests)
// ---------------------------------------------------------------------------

inline std::string layer_to_string(const LayerSpec& l) {
    std::ostringstream os;
    switch (l.kind) {
        case LayerKind::conv1d:
            os << "conv(" << l.units << "," << l.kernel_width << "," << to_string(l.activation) << ")";
            break;
        case LayerKind::maxpool1d:
            os << "pool(" << l.stride << ")";
            break;
        case LayerKind::lstm:
            os << "lstm(" << l.units << ")";
            break;
        case LayerKind::dense:
            os << "dense(" << l.units << "," << to_string(l.activation) << ")";
            break;
        case LayerKind::output:
            os << "output(" << l.units << "," << to_string(l.activation) << ")";
            break;
    }
    return os.str();
}

inline std::string spec_to_string(const NetworkSpec& spec) {
    std::ostringstream os;
    os << "task=" << to_string(spec.task);
    if (spec.task == TaskKind::classification) os << ":" << spec.n_classes;
    for (const auto& br : spec.branches) {
        os << ";branch=" << br.input_name << ":" << br.input_bands << ":";
        for (std::size_t i = 0; i < br.layers.size(); ++i) {
            if (i) os << ">";
            os << layer_to_string(br.layers[i]);
        }
    }
    os << ";trunk=";
    for (std::size_t i = 0; i < spec.trunk.size(); ++i) {
        if (i) os << ">";
        os << layer_to_string(spec.trunk[i]);
    }
    return os.str();
}

namespace detail {

inline LayerSpec parse_layer(const std::string& s) {
    const auto open = s.find('(');
    if (open == std::string::npos || s.back() != ')') throw ConfigError("malformed layer spec: " + s);
    const std::string name = s.substr(0, open);
    std::vector<std::string> args;
    {
        std::string cur;
        for (std::size_t i = open + 1; i + 1 < s.size(); ++i) {
            if (s[i] == ',') {
                args.push_back(cur);
                cur.clear();
            } else {
                cur += s[i];
            }
        }
        args.push_back(cur);
    }
    auto arg_int = [&](std::size_t i) {
        try {
            return std::stoi(args.at(i));
        } catch (const std::exception&) {
            throw ConfigError("malformed layer spec: " + s);
        }
    };
    if (name == "conv") {
        if (args.size() != 3) throw ConfigError("conv(filters,width,act) expected: " + s);
        return conv1d(arg_int(0), arg_int(1), activation_from_string(args[2]));
    }
    if (name == "pool") {
        if (args.size() != 1) throw ConfigError("pool(stride) expected: " + s);
        return maxpool1d(arg_int(0));
    }
    if (name == "lstm") {
        if (args.size() != 1) throw ConfigError("lstm(cells) expected: " + s);
        return lstm(arg_int(0));
    }
    if (name == "dense") {
        if (args.size() != 2) throw ConfigError("dense(units,act) expected: " + s);
        return dense(arg_int(0), activation_from_string(args[1]));
    }
    if (name == "output") {
        if (args.size() != 2) throw ConfigError("output(units,act) expected: " + s);
        return output(arg_int(0), activation_from_string(args[1]));
    }
    throw ConfigError("unknown layer kind: " + name);
}

}  // namespace detail

inline NetworkSpec spec_from_string(const std::string& text) {
    NetworkSpec spec;
    std::vector<std::string> sections;
    {
        std::string cur;
        for (char c : text) {
            if (c == ';') {
                sections.push_back(cur);
                cur.clear();
            } else {
                cur += c;
            }
        }
        sections.push_back(cur);
    }
    bool have_task = false, have_trunk = false;
    for (const auto& sec : sections) {
        const auto eq = sec.find('=');
        if (eq == std::string::npos) throw ConfigError("malformed spec section: " + sec);
        const std::string key = sec.substr(0, eq), val = sec.substr(eq + 1);
        auto split_layers = [&](const std::string& s) {
            std::vector<LayerSpec> layers;
            if (s.empty()) return layers;
            std::string cur;
            for (char c : s) {
                if (c == '>') {
                    layers.push_back(detail::parse_layer(cur));
                    cur.clear();
                } else {
                    cur += c;
                }
            }
            layers.push_back(detail::parse_layer(cur));
            return layers;
        };
        if (key == "task") {
            const auto colon = val.find(':');
            spec.task = task_from_string(colon == std::string::npos ? val : val.substr(0, colon));
            if (spec.task == TaskKind::classification) {
                if (colon == std::string::npos) throw ConfigError("classification task needs :n_classes");
                spec.n_classes = std::stoi(val.substr(colon + 1));
            }
            have_task = true;
        } else if (key == "branch") {
            const auto c1 = val.find(':');
            const auto c2 = val.find(':', c1 == std::string::npos ? std::string::npos : c1 + 1);
            if (c1 == std::string::npos || c2 == std::string::npos)
                throw ConfigError("branch=<name>:<bands>:<layers> expected: " + val);
            BranchSpec br;
            br.input_name = val.substr(0, c1);
            br.input_bands = std::stoi(val.substr(c1 + 1, c2 - c1 - 1));
            br.layers = split_layers(val.substr(c2 + 1));
            spec.branches.push_back(std::move(br));
        } else if (key == "trunk") {
            spec.trunk = split_layers(val);
            have_trunk = true;
        } else {
            throw ConfigError("unknown spec section: " + key);
        }
    }
    if (!have_task || !have_trunk) throw ConfigError("spec must declare task and trunk");
    validate_spec(spec);
    return spec;
}

// ---------------------------------------------------------------------------
// Architecture presets
// ---------------------------------------------------------------------------

// Spectral classifier: two width-1 conv layers of 64 filters, LSTM(100),
// dense(100), softmax. With 128-band input this counts 88,718 parameters and
// 81,166 with a 10-band input (a ~9% reduction).
inline NetworkSpec make_msc_spec(int input_bands, int n_classes = 2, int filters = 64, int width1 = 1,
                                 int width2 = 1, int lstm_cells = 100, int dense_units = 100,
                                 const std::string& input_name = "spect") {
    NetworkSpec spec;
    spec.task = TaskKind::classification;
    spec.n_classes = n_classes;
    spec.branches.push_back(
        {input_name, input_bands,
         {conv1d(filters, width1), conv1d(filters, width2), lstm(lstm_cells)}});
    spec.trunk = {dense(dense_units), output(n_classes, Activation::softmax)};
    validate_spec(spec);
    return spec;
}

// Spectral sequence regressor: conv widths 8 and 6 (166,441 parameters on a
// 128-band input, 106,025 on 10 bands).
inline NetworkSpec make_breathing_spectral_spec(int input_bands, int filters = 64, int width1 = 8,
                                                int width2 = 6, int lstm_cells = 100, int dense_units = 100,
                                                const std::string& input_name = "spect") {
    NetworkSpec spec;
    spec.task = TaskKind::sequence_regression;
    spec.branches.push_back(
        {input_name, input_bands,
         {conv1d(filters, width1), conv1d(filters, width2), lstm(lstm_cells)}});
    spec.trunk = {dense(dense_units), output(1, Activation::linear)};
    validate_spec(spec);
    return spec;
}

// Raw-audio sequence regressor: 64-128-256 filters of widths 8-6-6, each
// followed by max-pooling at strides 10-8-8 (640x subsampling: 4 minutes of
// 16 kHz audio retain exactly 6000 steps), then LSTM(100) and dense(100).
inline NetworkSpec make_breathing_raw_spec(int f1 = 64, int f2 = 128, int f3 = 256, int lstm_cells = 100,
                                           int dense_units = 100, const std::string& input_name = "audio") {
    NetworkSpec spec;
    spec.task = TaskKind::sequence_regression;
    spec.branches.push_back({input_name, 1,
                             {conv1d(f1, 8), maxpool1d(10), conv1d(f2, 6), maxpool1d(8), conv1d(f3, 6),
                              maxpool1d(8), lstm(lstm_cells)}});
    spec.trunk = {dense(dense_units), output(1, Activation::linear)};
    validate_spec(spec);
    return spec;
}

// Middle fusion: one conv+LSTM encoder per named input, LSTM outputs
// concatenated before the shared dense layers.
inline NetworkSpec make_fusion_spec(TaskKind task, const std::vector<std::pair<std::string, int>>& inputs,
                                    int n_classes = 2, int filters = 64, int width1 = 1, int width2 = 1,
                                    int lstm_cells = 100, int dense_units = 100) {
    NetworkSpec spec;
    spec.task = task;
    spec.n_classes = n_classes;
    for (const auto& [name, bands] : inputs)
        spec.branches.push_back(
            {name, bands, {conv1d(filters, width1), conv1d(filters, width2), lstm(lstm_cells)}});
    if (task == TaskKind::classification)
        spec.trunk = {dense(dense_units), output(n_classes, Activation::softmax)};
    else
        spec.trunk = {dense(dense_units), output(1, Activation::linear)};
    validate_spec(spec);
    return spec;
}

}  // namespace e2efs
