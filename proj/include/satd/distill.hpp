#pragma once

// Stage-1 training: distill the frozen multi-spectral teacher into the RGB
// projector. The teacher distribution is centered by an EMA of its
// pre-softmax outputs and sharpened with a lower temperature than the
// student; the cross-entropy is averaged over all RGB/MS view pairs and only
// the projector receives gradients.

#include <vector>

#include "satd/common.hpp"
#include "satd/encoders.hpp"
#include "satd/optim.hpp"
#include "satd/tensor.hpp"
#include "satd/views.hpp"

namespace satd {

struct CenterState {
    Tensor mu;             // [K], never part of the autodiff graph
    double momentum;       // m_c in [0,1]
    double tau_teacher;    // strictly below tau_student
    double tau_student;

    CenterState(Tensor mu_init, double m_c, double tau_t, double tau_s)
        : mu(mu_init.detach()), momentum(m_c), tau_teacher(tau_t), tau_student(tau_s) {
        if (!(m_c >= 0.0 && m_c <= 1.0))
            throw ValueError(cat("center: momentum must lie in [0,1], got ", m_c));
        if (!(tau_t > 0.0) || !(tau_s > 0.0))
            throw ValueError("center: temperatures must be positive");
        if (!(tau_t < tau_s))
            throw ValueError(cat("center: teacher temperature ", tau_t,
                                 " must be below student temperature ", tau_s));
    }

    static CenterState zeros(std::size_t k, double m_c, double tau_t, double tau_s) {
        return CenterState(Tensor::zeros({k}), m_c, tau_t, tau_s);
    }
};

// q = softmax((z - mu) / tau_t). The teacher side is stop-gradient: the
// result never carries tape history regardless of the input.
inline Tensor teacher_distribution(const Tensor& z_ms, const CenterState& c) {
    Tensor centered = sub(z_ms.detach(), c.mu);
    return softmax_temp(centered, c.tau_teacher);
}

// p = softmax(z_hat / tau_s); no centering on the student side, gradient
// recorded.
inline Tensor student_distribution(const Tensor& z_hat, const CenterState& c) {
    return softmax_temp(z_hat, c.tau_student);
}

inline Tensor student_log_distribution(const Tensor& z_hat, const CenterState& c) {
    return log_softmax_temp(z_hat, c.tau_student);
}

// Average cross-entropy over all view pairs:
//   (1 / (|V_rgb| |V_ms|)) sum_v sum_u  -q_u . log p_v
// Gradients flow into the student logits only.
inline Tensor distill_loss(const std::vector<Tensor>& teacher_logits,
                           const std::vector<Tensor>& student_logits, const CenterState& c) {
    if (teacher_logits.empty() || student_logits.empty())
        throw ValueError("distill_loss: both view sets must be non-empty");
    // Linearity in q: averaging teacher distributions first is exactly the
    // pair average.
    Tensor q_mean = teacher_distribution(teacher_logits[0], c);
    for (std::size_t u = 1; u < teacher_logits.size(); ++u)
        q_mean = add(q_mean, teacher_distribution(teacher_logits[u], c));
    q_mean = scale(q_mean, 1.0 / static_cast<double>(teacher_logits.size()));

    Tensor acc = Tensor::scalar(0.0);
    for (const Tensor& s : student_logits) {
        Tensor logp = student_log_distribution(s, c);
        acc = add(acc, neg(sum_all(mul(q_mean, logp))));
    }
    return scale(acc, 1.0 / static_cast<double>(student_logits.size()));
}

// mu <- m_c mu + (1 - m_c) mean_u sg(z_u)
inline CenterState update_center(const CenterState& c, const std::vector<Tensor>& teacher_logits) {
    if (teacher_logits.empty()) throw ValueError("update_center: empty teacher batch");
    const std::size_t k = c.mu.size();
    std::vector<double> mean(k, 0.0);
    for (const Tensor& t : teacher_logits) {
        if (t.size() != k)
            throw ShapeError(cat("update_center: logit width ", t.size(),
                                 " does not match center width ", k));
        for (std::size_t j = 0; j < k; ++j) mean[j] += t.data()[j];
    }
    for (double& v : mean) v /= static_cast<double>(teacher_logits.size());
    std::vector<double> mu(k);
    for (std::size_t j = 0; j < k; ++j)
        mu[j] = c.momentum * c.mu.data()[j] + (1.0 - c.momentum) * mean[j];
    CenterState out = c;
    out.mu = Tensor::vec(std::move(mu));
    return out;
}

inline double distribution_entropy(const Tensor& q) {
    double h = 0.0;
    for (double p : q.data())
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

struct DistillStepReport {
    double loss = 0.0;
    std::size_t n_pairs = 0;          // |V_rgb| * |V_ms| per sample
    double grad_norm_projector = 0.0;
    double center_shift = 0.0;        // ||mu_after - mu_before||
    double teacher_entropy = 0.0;     // batch mean of H(q_u), pre-update center
};

// One optimizer step over a minibatch of view batches, in tape order:
// forward, loss, backward, projector update, center update.
inline DistillStepReport distill_train_step(const std::vector<ViewBatch>& batch,
                                            const Encoder& enc_rgb, const Encoder& enc_ms,
                                            VisionProjector& projector, CenterState& center,
                                            AdamW& opt) {
    if (batch.empty()) throw ValueError("distill_train_step: empty batch");

    std::vector<Tensor> all_teacher_logits;
    Tensor total = Tensor::scalar(0.0);
    std::size_t n_pairs = 0;
    double entropy_sum = 0.0;
    std::size_t entropy_count = 0;

    for (const ViewBatch& vb : batch) {
        std::vector<Tensor> teacher_logits;
        for (const Tensor& u : vb.ms_views) {
            Tensor z = pool_patches(enc_ms.encode(u)).detach();
            entropy_sum += distribution_entropy(teacher_distribution(z, center));
            ++entropy_count;
            teacher_logits.push_back(z);
            all_teacher_logits.push_back(z);
        }
        std::vector<Tensor> student_logits;
        for (const Tensor& v : vb.rgb_views)
            student_logits.push_back(projector.logits(enc_rgb.encode(v)));
        n_pairs = teacher_logits.size() * student_logits.size();
        total = add(total, distill_loss(teacher_logits, student_logits, center));
    }
    total = scale(total, 1.0 / static_cast<double>(batch.size()));

    DistillStepReport report;
    report.loss = total.value();
    report.n_pairs = n_pairs;
    report.teacher_entropy = entropy_sum / static_cast<double>(entropy_count);
    if (!std::isfinite(report.loss))
        throw TrainError(cat("distill: non-finite loss after optimizer step ", opt.step_count(),
                             " (batch of ", batch.size(), ", ", n_pairs, " pairs per sample)"));

    total.backward();
    report.grad_norm_projector = opt.grad_norm();
    opt.step();
    opt.zero_grad();

    CenterState next = update_center(center, all_teacher_logits);
    double shift = 0.0;
    for (std::size_t j = 0; j < next.mu.size(); ++j) {
        const double d = next.mu.data()[j] - center.mu.data()[j];
        shift += d * d;
    }
    report.center_shift = std::sqrt(shift);
    center = next;
    return report;
}

}  // namespace satd
