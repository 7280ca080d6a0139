#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "fedlora/tensor.hpp"

namespace fedlora::ad {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias correction over a fixed parameter list. Gradients are
// consumed and zeroed by step().
class Adam {
public:
    explicit Adam(std::vector<Tensor> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const Tensor& p : params_) {
            if (!p.requires_grad()) throw ContractError("Adam: parameter does not require grad");
            m_.emplace_back(p.numel(), 0.0);
            v_.emplace_back(p.numel(), 0.0);
        }
    }

    void step() {
        ++steps_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
        for (std::size_t pi = 0; pi < params_.size(); ++pi) {
            Tensor& p = params_[pi];
            if (!p.has_grad())
                throw ContractError("Adam::step: parameter " + std::to_string(pi) + " has no gradient");
            auto& g = p.grad_buffer();
            auto& val = p.mutable_data();
            auto& m = m_[pi];
            auto& v = v_[pi];
            for (std::size_t i = 0; i < val.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                val[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
            p.zero_grad();
        }
    }

    void zero_grad() {
        for (Tensor& p : params_) p.zero_grad();
    }

    std::uint64_t step_count() const { return steps_; }
    const AdamConfig& config() const { return cfg_; }
    const std::vector<Tensor>& params() const { return params_; }

private:
    std::vector<Tensor> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::uint64_t steps_ = 0;
};

}  // namespace fedlora::ad
