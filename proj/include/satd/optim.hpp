#pragma once

// Decoupled-weight-decay adaptive moment optimizer and the cosine schedule.

#include <cmath>
#include <vector>

#include "satd/common.hpp"
#include "satd/tensor.hpp"

namespace satd {

class AdamW {
  public:
    AdamW(std::vector<Tensor> params, double lr, double weight_decay = 0.0, double beta1 = 0.9,
          double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)),
          lr_(lr),
          weight_decay_(weight_decay),
          beta1_(beta1),
          beta2_(beta2),
          eps_(eps) {
        for (auto& p : params_) {
            if (!p.requires_grad())
                throw ValueError("optimizer: every parameter must have requires_grad");
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    std::int64_t step_count() const { return t_; }
    const std::vector<Tensor>& params() const { return params_; }

    double grad_norm() const {
        double s = 0.0;
        for (const auto& p : params_)
            for (double g : p.grad()) s += g * g;
        return std::sqrt(s);
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& data = params_[i].mutable_data();
            const auto& grad = params_[i].grad();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < data.size(); ++j) {
                m[j] = beta1_ * m[j] + (1.0 - beta1_) * grad[j];
                v[j] = beta2_ * v[j] + (1.0 - beta2_) * grad[j] * grad[j];
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                data[j] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * data[j]);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    // Moment buffers, exposed for checkpointing.
    std::vector<std::vector<double>>& moments_m() { return m_; }
    std::vector<std::vector<double>>& moments_v() { return v_; }
    void set_step_count(std::int64_t t) { t_ = t; }

  private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_, weight_decay_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
};

// lr0 * (1 + cos(pi * step / total)) / 2
inline double cosine_lr(std::size_t step, std::size_t total, double lr0) {
    if (total == 0) throw ValueError("cosine_lr: total step count must be positive");
    if (step > total)
        throw ValueError(cat("cosine_lr: step ", step, " exceeds total ", total));
    return lr0 * 0.5 *
           (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(step) /
                           static_cast<double>(total)));
}

}  // namespace satd
