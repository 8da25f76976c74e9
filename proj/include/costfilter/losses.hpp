#pragma once
// Composite training objective: class-modulated focal loss, cross-entropy on
// the adaptor logits, soft-IoU, and SSIM, combined as
//   L = focal + ce + alpha * (soft_iou + ssim)
// with per-term enable flags for the ablation switches.

#include <cmath>
#include <cstddef>
#include <vector>

#include "costfilter/autograd.hpp"
#include "costfilter/errors.hpp"

namespace costfilter {

struct LossConfig {
    double alpha = 0.1;
    double gamma0 = 3.0;
    bool use_focal = true;
    bool use_ce = true;
    bool use_structural = true;  // soft-IoU + SSIM pair

    void validate() const {
        if (alpha < 0) throw ConfigError("LossConfig: alpha must be >= 0");
        if (gamma0 < 0) throw ConfigError("LossConfig: gamma0 must be >= 0");
    }
};

template <class T>
struct LossBreakdown {
    T focal = 0, ce = 0, soft_iou = 0, ssim = 0, total = 0;
    T effective_gamma = 0;  // batch mean of the per-sample gamma
};

namespace losses {

template <class T>
T sigmoid_scalar(T v) { return T(1) / (T(1) + std::exp(-v)); }

// gamma = gamma0 - sigmoid(logit[Y]) when argmax(logits) == Y, else gamma0;
// clamped at 0.
template <class T>
T effective_gamma(T gamma0, const Tensor<T>& class_logits, std::size_t true_label) {
    if (class_logits.ndim() != 1 || true_label >= class_logits.size())
        throw ConfigError("effective_gamma: bad logits/label");
    std::size_t argmax = 0;
    for (std::size_t k = 1; k < class_logits.size(); ++k)
        if (class_logits[k] > class_logits[argmax]) argmax = k;
    T g = gamma0;
    if (argmax == true_label) g = gamma0 - sigmoid_scalar(class_logits[true_label]);
    return std::max(T(0), g);
}

// Per-sample gammas for a (B,K) logits tensor.
template <class T>
std::vector<T> effective_gammas(T gamma0, const Tensor<T>& logits,
                                const std::vector<std::size_t>& labels) {
    std::size_t B = logits.dim(0), K = logits.dim(1);
    std::vector<T> out(B);
    for (std::size_t b = 0; b < B; ++b) {
        Tensor<T> row(Shape{K});
        for (std::size_t k = 0; k < K; ++k) row[k] = logits(b, k);
        out[b] = effective_gamma(gamma0, row, labels[b]);
    }
    return out;
}

// probs: (B,2,H,W) softmax-normalized [normal, anomaly]; mask: (B,H,W) in
// {0,1}; gamma per sample. Mean over all pixels of -(1-p_t)^gamma log(p_t).
template <class T>
ag::Var<T> focal_loss(const ag::Var<T>& probs, const Tensor<T>& mask, std::vector<T> gammas) {
    ag::Var<T> p_anom = ag::slice_channel(probs, 1);
    ag::Var<T> p_norm = ag::slice_channel(probs, 0);
    Tensor<T> inv_mask = mask;
    for (auto& v : inv_mask.vec()) v = T(1) - v;
    ag::Var<T> p_t = ag::add(ag::mul(p_anom, ag::Var<T>::constant(mask)),
                             ag::mul(p_norm, ag::Var<T>::constant(inv_mask)));
    ag::Var<T> one_minus = ag::add_scalar(ag::neg(p_t), T(1));
    ag::Var<T> weight = ag::pow_per_sample(one_minus, std::move(gammas));
    ag::Var<T> term = ag::mul(weight, ag::log_clamped(p_t));
    return ag::neg(ag::mean(term));
}

// p: (B,H,W) anomaly probabilities; g: (B,H,W) binary. Per-sample
// 1 - (sum(p*g)+eps) / (sum(p) + sum(g) - sum(p*g) + eps), averaged over the
// batch. The shared eps makes the empty-mask / all-zero-prediction case a
// perfect match (loss 0).
template <class T>
ag::Var<T> soft_iou_loss(const ag::Var<T>& p, const Tensor<T>& mask, T eps = T(1e-8)) {
    ag::Var<T> g = ag::Var<T>::constant(mask);
    ag::Var<T> inter = ag::sum_per_sample(ag::mul(p, g));
    ag::Var<T> uni = ag::sub(ag::add(ag::sum_per_sample(p), ag::sum_per_sample(g)), inter);
    ag::Var<T> iou = ag::div(ag::add_scalar(inter, eps), ag::add_scalar(uni, eps));
    return ag::mean(ag::add_scalar(ag::neg(iou), T(1)));
}

inline std::vector<double> gaussian_kernel_1d(std::size_t window, double sigma) {
    std::vector<double> k(window);
    double c = (static_cast<double>(window) - 1.0) / 2.0;
    double sum = 0;
    for (std::size_t i = 0; i < window; ++i) {
        double d = static_cast<double>(i) - c;
        k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
        sum += k[i];
    }
    for (auto& v : k) sum > 0 ? v /= sum : v;
    return k;
}

// 1 - SSIM(p, mask) with window 11, sigma 1.5, C1=(0.01)^2, C2=(0.03)^2 on
// the [0,1] range. Falls back to global (single-window) SSIM when the map is
// smaller than the window.
template <class T>
ag::Var<T> ssim_loss(const ag::Var<T>& p, const Tensor<T>& mask, std::size_t window = 11,
                     double sigma = 1.5) {
    const Shape& s = p.value().shape();
    if (s.size() != 3) throw ShapeError("ssim_loss: expect (B,H,W)");
    std::size_t B = s[0], H = s[1], W = s[2];
    const T C1 = T(0.01 * 0.01), C2 = T(0.03 * 0.03);
    ag::Var<T> g = ag::Var<T>::constant(mask);

    if (H < window || W < window) {
        // global statistics per sample
        T n = static_cast<T>(H * W);
        auto m = [n](const ag::Var<T>& x) { return ag::scale(ag::sum_per_sample(x), T(1) / n); };
        ag::Var<T> mu_x = m(p), mu_y = m(g);
        ag::Var<T> var_x = ag::sub(m(ag::mul(p, p)), ag::mul(mu_x, mu_x));
        ag::Var<T> var_y = ag::sub(m(ag::mul(g, g)), ag::mul(mu_y, mu_y));
        ag::Var<T> cov = ag::sub(m(ag::mul(p, g)), ag::mul(mu_x, mu_y));
        ag::Var<T> num = ag::mul(ag::add_scalar(ag::scale(ag::mul(mu_x, mu_y), T(2)), C1),
                                 ag::add_scalar(ag::scale(cov, T(2)), C2));
        ag::Var<T> den =
            ag::mul(ag::add_scalar(ag::add(ag::mul(mu_x, mu_x), ag::mul(mu_y, mu_y)), C1),
                    ag::add_scalar(ag::add(var_x, var_y), C2));
        ag::Var<T> ssim = ag::div(num, den);
        return ag::mean(ag::add_scalar(ag::neg(ssim), T(1)));
    }

    auto kd = gaussian_kernel_1d(window, sigma);
    std::vector<T> kernel(kd.begin(), kd.end());
    auto as5 = [&](const ag::Var<T>& x) { return ag::reshape(x, Shape{B, 1, 1, H, W}); };
    auto blur = [&](const ag::Var<T>& x) { return ag::gaussian_blur_spatial(as5(x), kernel); };
    ag::Var<T> mu_x = blur(p), mu_y = blur(g);
    ag::Var<T> mu_xx = ag::mul(mu_x, mu_x), mu_yy = ag::mul(mu_y, mu_y);
    ag::Var<T> mu_xy = ag::mul(mu_x, mu_y);
    ag::Var<T> sig_x = ag::sub(blur(ag::mul(p, p)), mu_xx);
    ag::Var<T> sig_y = ag::sub(blur(ag::mul(g, g)), mu_yy);
    ag::Var<T> sig_xy = ag::sub(blur(ag::mul(p, g)), mu_xy);
    ag::Var<T> num = ag::mul(ag::add_scalar(ag::scale(mu_xy, T(2)), C1),
                             ag::add_scalar(ag::scale(sig_xy, T(2)), C2));
    ag::Var<T> den = ag::mul(ag::add_scalar(ag::add(mu_xx, mu_yy), C1),
                             ag::add_scalar(ag::add(sig_x, sig_y), C2));
    ag::Var<T> ssim_map = ag::div(num, den);
    return ag::mean(ag::add_scalar(ag::neg(ssim_map), T(1)));
}

template <class T>
ag::Var<T> ce_loss(const ag::Var<T>& logits, const std::vector<std::size_t>& labels) {
    return ag::softmax_cross_entropy(logits, labels);
}

}  // namespace losses

template <class T>
struct TotalLoss {
    ag::Var<T> total;  // differentiable composite
    LossBreakdown<T> breakdown;
};

// probs: (B,2,H,W); masks: (B,H,W); logits: (B,num_classes); labels per sample.
template <class T>
TotalLoss<T> total_loss(const ag::Var<T>& probs, const Tensor<T>& masks,
                        const ag::Var<T>& logits, const std::vector<std::size_t>& labels,
                        const LossConfig& cfg) {
    cfg.validate();
    std::vector<T> gammas =
        losses::effective_gammas(static_cast<T>(cfg.gamma0), logits.value(), labels);

    TotalLoss<T> out;
    T gsum = 0;
    for (T g : gammas) gsum += g;
    out.breakdown.effective_gamma = gammas.empty() ? T(0) : gsum / static_cast<T>(gammas.size());

    ag::Var<T> zero = ag::Var<T>::constant(Tensor<T>(Shape{1}, T(0)));
    ag::Var<T> total = zero;
    if (cfg.use_focal) {
        ag::Var<T> f = losses::focal_loss(probs, masks, gammas);
        out.breakdown.focal = f.scalar();
        total = ag::add(total, f);
    }
    if (cfg.use_ce) {
        ag::Var<T> c = losses::ce_loss(logits, labels);
        out.breakdown.ce = c.scalar();
        total = ag::add(total, c);
    }
    if (cfg.use_structural) {
        ag::Var<T> p_anom = ag::slice_channel(probs, 1);
        ag::Var<T> iou = losses::soft_iou_loss(p_anom, masks);
        ag::Var<T> ss = losses::ssim_loss(p_anom, masks);
        out.breakdown.soft_iou = iou.scalar();
        out.breakdown.ssim = ss.scalar();
        total = ag::add(total, ag::scale(ag::add(iou, ss), static_cast<T>(cfg.alpha)));
    }
    out.total = total;
    out.breakdown.total = total.scalar();
    return out;
}

}  // namespace costfilter
