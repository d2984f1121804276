#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "cxrnet/error.hpp"
#include "cxrnet/tensor.hpp"

namespace cxr {

// A trainable tensor and the gradient slot the backward pass fills.
template <typename Real>
struct ParamRef {
    std::string name;
    Tensor<Real>* value = nullptr;
    Tensor<Real>* grad = nullptr;
};

inline constexpr double kBceClamp = 1e-7;

template <typename Real>
struct BceResult {
    double loss = 0;
    Tensor<Real> grad;  // dL/dyhat
};

// Mean binary cross-entropy with yhat clamped to [1e-7, 1 - 1e-7]. The
// gradient is that of the clamped expression, so it is 0 wherever the clamp
// is active.
template <typename Real>
BceResult<Real> bce_loss(const Tensor<Real>& labels, const Tensor<Real>& yhat) {
    require_same_shape(labels.shape(), yhat.shape(), "bce_loss");
    require(!yhat.empty(), ErrorKind::parameter, "bce_loss on empty batch");
    const double n = static_cast<double>(yhat.size());
    BceResult<Real> r{0.0, Tensor<Real>(yhat.shape(), Real(0))};
    for (std::size_t i = 0; i < yhat.size(); ++i) {
        const double y = labels[i];
        require(y == 0.0 || y == 1.0, ErrorKind::parameter, "bce_loss labels must be 0 or 1");
        const double raw = yhat[i];
        const double p = std::clamp(raw, kBceClamp, 1.0 - kBceClamp);
        r.loss -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
        if (raw > kBceClamp && raw < 1.0 - kBceClamp)
            r.grad[i] = static_cast<Real>((-y / p + (1.0 - y) / (1.0 - p)) / n);
    }
    r.loss /= n;
    return r;
}

// ---------------------------------------------------------------------------

template <typename Real>
struct AdamState {
    std::vector<Tensor<Real>> m;
    std::vector<Tensor<Real>> v;
    long t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double lr = 1e-4;
};

// One bias-corrected Adam update over every parameter. Gradients are checked for
// NaN/Inf before anything is touched; a poisoned step leaves params and state
// unchanged.
template <typename Real>
void adam_step(std::span<const ParamRef<Real>> params, AdamState<Real>& state) {
    for (const auto& p : params) {
        require_same_shape(p.value->shape(), p.grad->shape(), ("adam " + p.name).c_str());
        require(all_finite(*p.grad), ErrorKind::numerical, "poisoned gradient in " + p.name);
    }
    if (state.m.size() != params.size()) {
        state.m.clear();
        state.v.clear();
        for (const auto& p : params) {
            state.m.emplace_back(p.value->shape(), Real(0));
            state.v.emplace_back(p.value->shape(), Real(0));
        }
    }
    ++state.t;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor<Real>& theta = *params[k].value;
        const Tensor<Real>& g = *params[k].grad;
        Tensor<Real>& m = state.m[k];
        Tensor<Real>& v = state.v[k];
        require_same_shape(m.shape(), theta.shape(), "adam moment");
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double gi = g[i];
            const double mi = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            const double vi = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            m[i] = static_cast<Real>(mi);
            v[i] = static_cast<Real>(vi);
            const double mhat = mi / c1;
            const double vhat = vi / c2;
            theta[i] = static_cast<Real>(theta[i] - state.lr * mhat / (std::sqrt(vhat) + state.epsilon));
        }
    }
}

// ---------------------------------------------------------------------------
// Reduce-on-plateau plus early stopping on the validation loss.

struct PlateauState {
    double best_val_loss = std::numeric_limits<double>::infinity();
    int epochs_since_improve = 0;  // cumulative, reset only by an improvement
    int epochs_since_reduce = 0;   // reset by an improvement or an LR reduction
    int patience = 3;
    double factor = 0.1;
    double min_delta = 1e-4;
    int stop_patience = 6;
};

struct PlateauDecision {
    double lr = 0;
    bool stop = false;
    bool reduced = false;
};

// Improvement means val_loss < best - min_delta. After `patience` epochs without
// improvement (or since the last reduction) the LR is multiplied by `factor`;
// after `stop_patience` cumulative non-improving epochs training stops. The stop
// signal takes precedence, so the stopping epoch does not also reduce the LR.
inline PlateauDecision plateau_check(PlateauState& s, double val_loss, double lr) {
    require(std::isfinite(val_loss), ErrorKind::numerical, "validation loss is not finite");
    PlateauDecision d{lr, false, false};
    if (val_loss < s.best_val_loss - s.min_delta) {
        s.best_val_loss = val_loss;
        s.epochs_since_improve = 0;
        s.epochs_since_reduce = 0;
        return d;
    }
    ++s.epochs_since_improve;
    ++s.epochs_since_reduce;
    if (s.epochs_since_improve >= s.stop_patience) {
        d.stop = true;
        return d;
    }
    if (s.epochs_since_reduce >= s.patience) {
        d.lr = lr * s.factor;
        d.reduced = true;
        s.epochs_since_reduce = 0;
    }
    return d;
}

}  // namespace cxr
