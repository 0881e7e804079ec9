#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "e2efs/errors.hpp"

namespace e2efs {

enum class LossKind { cross_entropy, mse, corr, corr_plus_mse };

struct LossSpec {
    LossKind kind = LossKind::cross_entropy;
    double lambda_mse = 1.0;  // corr_plus_mse only

    void validate() const {
        if (!std::isfinite(lambda_mse) || lambda_mse < 0.0)
            throw ConfigError("loss: lambda_mse must be finite and >= 0");
    }
};

// Loss identifiers used in config files and model headers.
inline std::string loss_id(const LossSpec& spec) {
    switch (spec.kind) {
        case LossKind::cross_entropy: return "xent";
        case LossKind::mse: return "mse";
        case LossKind::corr: return "corr";
        case LossKind::corr_plus_mse: {
            char buf[48];
            std::snprintf(buf, sizeof buf, "corr+mse:%.17g", spec.lambda_mse);
            return buf;
        }
    }
    return "?";
}

inline LossSpec parse_loss_id(const std::string& id) {
    LossSpec spec;
    if (id == "xent") {
        spec.kind = LossKind::cross_entropy;
    } else if (id == "mse") {
        spec.kind = LossKind::mse;
    } else if (id == "corr") {
        spec.kind = LossKind::corr;
    } else if (id.rfind("corr+mse", 0) == 0) {
        spec.kind = LossKind::corr_plus_mse;
        spec.lambda_mse = 1.0;
        if (id.size() > 8) {
            if (id[8] != ':') throw ConfigError("malformed loss id: " + id);
            try {
                spec.lambda_mse = std::stod(id.substr(9));
            } catch (const std::exception&) {
                throw ConfigError("malformed loss id: " + id);
            }
        }
    } else {
        throw ConfigError("unknown loss id: " + id);
    }
    spec.validate();
    return spec;
}

inline double cross_entropy(const std::vector<double>& posterior, int label) {
    if (label < 0 || static_cast<std::size_t>(label) >= posterior.size())
        throw DataError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                        std::to_string(posterior.size()) + " classes");
    double sum = 0.0;
    for (double p : posterior) sum += p;
    if (std::fabs(sum - 1.0) > 1e-6) throw NumericError("cross_entropy: posterior does not sum to 1");
    const double p = std::max(posterior[static_cast<std::size_t>(label)], 1e-12);
    return -std::log(p);
}

// d(-log p_y)/dp, with the same 1e-12 clamp as the value.
inline std::vector<double> cross_entropy_grad(const std::vector<double>& posterior, int label) {
    if (label < 0 || static_cast<std::size_t>(label) >= posterior.size())
        throw DataError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                        std::to_string(posterior.size()) + " classes");
    std::vector<double> g(posterior.size(), 0.0);
    const double p = std::max(posterior[static_cast<std::size_t>(label)], 1e-12);
    g[static_cast<std::size_t>(label)] = -1.0 / p;
    return g;
}

inline double mse(const std::vector<double>& pred, const std::vector<double>& target) {
    if (pred.size() != target.size() || pred.empty())
        throw DataError("mse: length mismatch (" + std::to_string(pred.size()) + " vs " +
                        std::to_string(target.size()) + ")");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - target[i];
        acc += d * d;
    }
    return acc / static_cast<double>(pred.size());
}

inline std::vector<double> mse_grad(const std::vector<double>& pred, const std::vector<double>& target) {
    if (pred.size() != target.size() || pred.empty()) throw DataError("mse: length mismatch");
    std::vector<double> g(pred.size());
    const double inv = 1.0 / static_cast<double>(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) g[i] = 2.0 * (pred[i] - target[i]) * inv;
    return g;
}

struct PearsonResult {
    double r = 0.0;
    bool degenerate = false;  // variance below 1e-12 on either side
};

inline PearsonResult pearson(const std::vector<double>& pred, const std::vector<double>& target) {
    if (pred.size() != target.size()) throw DataError("pearson: length mismatch");
    if (pred.size() < 2) throw DataError("pearson: need length >= 2");
    const double n = static_cast<double>(pred.size());
    double mp = 0.0, mt = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        mp += pred[i];
        mt += target[i];
    }
    mp /= n;
    mt /= n;
    double spp = 0.0, stt = 0.0, spt = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double a = pred[i] - mp, b = target[i] - mt;
        spp += a * a;
        stt += b * b;
        spt += a * b;
    }
    PearsonResult res;
    if (spp < 1e-12 || stt < 1e-12) {
        res.degenerate = true;
        return res;
    }
    res.r = spt / std::sqrt(spp * stt);
    if (res.r > 1.0) res.r = 1.0;
    if (res.r < -1.0) res.r = -1.0;
    return res;
}

// d r / d pred. Zero (with flag) in the degenerate case so training survives
// constant early predictions.
inline PearsonResult pearson_grad(const std::vector<double>& pred, const std::vector<double>& target,
                                  std::vector<double>& grad_out) {
    const PearsonResult res = pearson(pred, target);
    grad_out.assign(pred.size(), 0.0);
    if (res.degenerate) return res;
    const double n = static_cast<double>(pred.size());
    double mp = 0.0, mt = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        mp += pred[i];
        mt += target[i];
    }
    mp /= n;
    mt /= n;
    double spp = 0.0, stt = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double a = pred[i] - mp, b = target[i] - mt;
        spp += a * a;
        stt += b * b;
    }
    const double denom = std::sqrt(spp * stt);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double a = pred[i] - mp, b = target[i] - mt;
        grad_out[i] = b / denom - res.r * a / spp;
    }
    return res;
}

inline double corr_loss(const std::vector<double>& pred, const std::vector<double>& target) {
    return 1.0 - pearson(pred, target).r;
}

inline double combined_loss(const std::vector<double>& pred, const std::vector<double>& target,
                            double lambda_mse) {
    return corr_loss(pred, target) + lambda_mse * mse(pred, target);
}

// Value and gradient of a sequence loss w.r.t. the prediction.
struct SequenceLossResult {
    double value = 0.0;
    std::vector<double> grad;
    bool degenerate = false;
};

inline SequenceLossResult sequence_loss(const LossSpec& spec, const std::vector<double>& pred,
                                        const std::vector<double>& target) {
    spec.validate();
    SequenceLossResult out;
    switch (spec.kind) {
        case LossKind::mse:
            out.value = mse(pred, target);
            out.grad = mse_grad(pred, target);
            return out;
        case LossKind::corr: {
            const PearsonResult r = pearson_grad(pred, target, out.grad);
            out.value = 1.0 - r.r;
            out.degenerate = r.degenerate;
            for (double& g : out.grad) g = -g;
            return out;
        }
        case LossKind::corr_plus_mse: {
            const PearsonResult r = pearson_grad(pred, target, out.grad);
            out.degenerate = r.degenerate;
            for (double& g : out.grad) g = -g;
            const std::vector<double> gm = mse_grad(pred, target);
            for (std::size_t i = 0; i < out.grad.size(); ++i) out.grad[i] += spec.lambda_mse * gm[i];
            out.value = (1.0 - r.r) + spec.lambda_mse * mse(pred, target);
            return out;
        }
        case LossKind::cross_entropy:
            throw ConfigError("cross_entropy is not a sequence loss");
    }
    throw ConfigError("unreachable loss kind");
}

}  // namespace e2efs
