#pragma once
// Adam with standard moment defaults, global-norm gradient clipping, and a
// reduce-on-plateau learning-rate schedule (halve after `patience` epochs
// without relative improvement).

#include <cmath>
#include <cstdint>
#include <vector>

#include "costfilter/nn.hpp"

namespace costfilter {

template <class T>
class Adam {
public:
    struct Hyper {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double clip_norm = 5.0;  // 0 disables clipping
    };

    Adam() = default;
    explicit Adam(nn::ParamStore<T>& params, Hyper hp = {}) : params_(&params), hp_(hp) {
        for (auto& [name, v] : params.items()) {
            m_.emplace_back(v.value().shape(), T(0));
            v_.emplace_back(v.value().shape(), T(0));
        }
    }

    double lr() const { return hp_.lr; }
    void set_lr(double lr) { hp_.lr = lr; }
    std::uint64_t steps() const { return t_; }

    double grad_norm() const {
        double s = 0;
        for (auto& [name, v] : params_->items())
            for (std::size_t i = 0; i < v.grad().size(); ++i) {
                double g = v.grad()[i];
                s += g * g;
            }
        return std::sqrt(s);
    }

    void step() {
        ++t_;
        double scale = 1.0;
        if (hp_.clip_norm > 0) {
            double n = grad_norm();
            if (n > hp_.clip_norm) scale = hp_.clip_norm / n;
        }
        double bc1 = 1.0 - std::pow(hp_.beta1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(hp_.beta2, static_cast<double>(t_));
        std::size_t k = 0;
        for (auto& [name, v] : params_->items()) {
            auto& m = m_[k];
            auto& vv = v_[k];
            ++k;
            for (std::size_t i = 0; i < v.value().size(); ++i) {
                double g = static_cast<double>(v.grad()[i]) * scale;
                double mi = hp_.beta1 * m[i] + (1 - hp_.beta1) * g;
                double vi = hp_.beta2 * vv[i] + (1 - hp_.beta2) * g * g;
                m[i] = static_cast<T>(mi);
                vv[i] = static_cast<T>(vi);
                double mhat = mi / bc1, vhat = vi / bc2;
                v.value()[i] -= static_cast<T>(hp_.lr * mhat / (std::sqrt(vhat) + hp_.eps));
            }
        }
    }

    // serialized state
    std::vector<Tensor<T>>& moment1() { return m_; }
    std::vector<Tensor<T>>& moment2() { return v_; }
    void set_steps(std::uint64_t t) { t_ = t; }
    const Hyper& hyper() const { return hp_; }

private:
    nn::ParamStore<T>* params_ = nullptr;
    Hyper hp_;
    std::uint64_t t_ = 0;
    std::vector<Tensor<T>> m_, v_;
};

class PlateauScheduler {
public:
    PlateauScheduler(double factor = 0.5, int patience = 3, double rel_threshold = 1e-3)
        : factor_(factor), patience_(patience), rel_threshold_(rel_threshold) {}

    // Returns the (possibly reduced) learning rate for the next epoch.
    double observe(double epoch_loss, double current_lr) {
        if (best_ < 0 || epoch_loss < best_ * (1.0 - rel_threshold_)) {
            best_ = epoch_loss;
            bad_epochs_ = 0;
            return current_lr;
        }
        if (++bad_epochs_ >= patience_) {
            bad_epochs_ = 0;
            return current_lr * factor_;
        }
        return current_lr;
    }

    double best() const { return best_; }
    int bad_epochs() const { return bad_epochs_; }
    void restore(double best, int bad) {
        best_ = best;
        bad_epochs_ = bad;
    }

private:
    double factor_;
    int patience_;
    double rel_threshold_;
    double best_ = -1.0;
    int bad_epochs_ = 0;
};

}  // namespace costfilter
