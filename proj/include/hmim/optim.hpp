#pragma once

// AdamW with decoupled weight decay, plus the warmup + cosine learning-rate
// schedule. The decay term -lr*wd*param is applied separately from the
// adaptive gradient term.

#include <cmath>
#include <string>
#include <vector>

#include "hmim/common.hpp"
#include "hmim/tensor.hpp"

namespace hmim {

struct OptimConfig {
    double lr_init = 1e-4;
    double weight_decay = 1e-5;
    int64_t warmup_steps = 0;
    int64_t total_steps = 1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    bool decay_biases = true;  // flag to exempt 1-d parameters from decay

    void validate() const {
        if (lr_init <= 0) throw config_error("optim: lr_init must be positive");
        if (warmup_steps < 0 || warmup_steps >= total_steps)
            throw config_error("optim: need 0 <= warmup_steps < total_steps");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw config_error("optim: betas must be in [0,1)");
    }
};

// Linear ramp 0 -> lr_init over the warmup, then a half-cosine to 0 at
// total_steps. Continuous at the warmup boundary.
inline double lr_at(int64_t step, const OptimConfig& cfg) {
    cfg.validate();
    if (step < 0 || step > cfg.total_steps)
        throw contract_error("lr_at: step " + std::to_string(step) + " outside [0," +
                             std::to_string(cfg.total_steps) + "]");
    if (step < cfg.warmup_steps)
        return cfg.lr_init * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    const double progress = static_cast<double>(step - cfg.warmup_steps) /
                            static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    return cfg.lr_init * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
}

template <typename S>
struct NamedParam {
    std::string name;
    Tensor<S> tensor;
};

template <typename S>
class AdamW {
public:
    explicit AdamW(const OptimConfig& cfg) : cfg_(cfg) { cfg.validate(); }

    // bias-corrected update; decay applied on top of the gradient step
    void step(std::vector<NamedParam<S>>& params, double lr) {
        ++t_;
        if (m_.size() != params.size()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (size_t i = 0; i < params.size(); ++i) {
                m_[i].assign(params[i].tensor.size(), S(0));
                v_[i].assign(params[i].tensor.size(), S(0));
            }
        }
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i].tensor;
            auto& pv = p.values();
            const auto& g = p.grad();
            auto& m = m_[i];
            auto& v = v_[i];
            const bool decay = cfg_.decay_biases || p.shape().size() > 1;
            const double wd = decay ? cfg_.weight_decay : 0.0;
            for (size_t j = 0; j < pv.size(); ++j) {
                const double gj = static_cast<double>(g[j]);
                if (!std::isfinite(gj))
                    throw numeric_error("adamw: non-finite gradient in parameter " + params[i].name);
                const double mj = cfg_.beta1 * static_cast<double>(m[j]) + (1.0 - cfg_.beta1) * gj;
                const double vj = cfg_.beta2 * static_cast<double>(v[j]) + (1.0 - cfg_.beta2) * gj * gj;
                m[j] = static_cast<S>(mj);
                v[j] = static_cast<S>(vj);
                const double update = (mj / bc1) / (std::sqrt(vj / bc2) + cfg_.eps);
                pv[j] = static_cast<S>(static_cast<double>(pv[j]) - lr * update -
                                       lr * wd * static_cast<double>(pv[j]));
            }
        }
    }

    int64_t steps_taken() const { return t_; }
    const OptimConfig& config() const { return cfg_; }

    // moment buffers, exposed for checkpointing
    std::vector<std::vector<S>>& moments1() { return m_; }
    std::vector<std::vector<S>>& moments2() { return v_; }
    void restore(int64_t t, std::vector<std::vector<S>> m, std::vector<std::vector<S>> v) {
        t_ = t;
        m_ = std::move(m);
        v_ = std::move(v);
    }

private:
    OptimConfig cfg_;
    int64_t t_ = 0;
    std::vector<std::vector<S>> m_, v_;
};

}  // namespace hmim
