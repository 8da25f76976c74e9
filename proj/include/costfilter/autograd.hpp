#pragma once
// Tape-based reverse-mode autodiff over Tensor<T>.
//
// Volumes follow the NCDHW convention: (batch, channels, depth, height,
// width). Elementwise ops accept any shape; structured ops (conv3d, pooling,
// concat) expect 5-d operands.

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "costfilter/tensor.hpp"

namespace costfilter::ag {

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // scatter this->grad into parents

    void ensure_grad() {
        if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    }
};

template <class T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    static Var constant(Tensor<T> t) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(t);
        n->requires_grad = false;
        return Var(n);
    }

    static Var param(Tensor<T> t) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(t);
        n->requires_grad = true;
        n->ensure_grad();
        return Var(n);
    }

    bool defined() const { return node_ != nullptr; }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& value() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& grad() { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }
    std::shared_ptr<Node<T>> node() const { return node_; }

    T scalar() const {
        if (node_->value.size() != 1) throw std::logic_error("scalar() on non-scalar");
        return node_->value[0];
    }

    // Reverse sweep from this node; accumulates into .grad of every
    // requires_grad node reachable through the tape.
    void backward() const {
        if (node_->value.size() != 1)
            throw std::logic_error("backward() expects a scalar root");
        std::vector<Node<T>*> order;
        std::unordered_set<Node<T>*> seen;
        topo(node_.get(), seen, order);
        for (auto* n : order) n->ensure_grad();
        node_->grad.fill(T(0));
        node_->grad[0] = T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node<T>* n = *it;
            if (n->backprop) n->backprop(*n);
        }
    }

private:
    static void topo(Node<T>* n, std::unordered_set<Node<T>*>& seen,
                     std::vector<Node<T>*>& order) {
        if (seen.count(n)) return;
        seen.insert(n);
        for (auto& p : n->parents) topo(p.get(), seen, order);
        order.push_back(n);
    }

    std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <class T>
Var<T> make(Tensor<T> value, std::vector<Var<T>> parents,
            std::function<void(Node<T>&)> backprop) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    for (auto& p : parents) {
        n->parents.push_back(p.node());
        n->requires_grad = n->requires_grad || p.node()->requires_grad;
    }
    if (n->requires_grad) n->backprop = std::move(backprop);
    return Var<T>(n);
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (!a.value().same_shape(b.value())) throw std::invalid_argument("add: shape mismatch");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return detail::make<T>(std::move(out), {a, b}, [](Node<T>& n) {
        for (std::size_t k = 0; k < 2; ++k) {
            auto& p = *n.parents[k];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
        }
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    if (!a.value().same_shape(b.value())) throw std::invalid_argument("sub: shape mismatch");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return detail::make<T>(std::move(out), {a, b}, [](Node<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] -= n.grad[i];
        }
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    if (!a.value().same_shape(b.value())) throw std::invalid_argument("mul: shape mismatch");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return detail::make<T>(std::move(out), {a, b}, [](Node<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                pa.grad[i] += n.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                pb.grad[i] += n.grad[i] * pa.value[i];
        }
    });
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    if (!a.value().same_shape(b.value())) throw std::invalid_argument("div: shape mismatch");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
    return detail::make<T>(std::move(out), {a, b}, [](Node<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                pa.grad[i] += n.grad[i] / pb.value[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                pb.grad[i] -= n.grad[i] * pa.value[i] / (pb.value[i] * pb.value[i]);
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out = a.value();
    for (auto& v : out.vec()) v *= s;
    return detail::make<T>(std::move(out), {a}, [s](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += s * n.grad[i];
    });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
    Tensor<T> out = a.value();
    for (auto& v : out.vec()) v += s;
    return detail::make<T>(std::move(out), {a}, [](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
    });
}

template <class T>
Var<T> neg(const Var<T>& a) { return scale(a, T(-1)); }

template <class T>
Var<T> sigmoid(const Var<T>& a) {
    Tensor<T> out = a.value();
    for (auto& v : out.vec()) v = T(1) / (T(1) + std::exp(-v));
    Tensor<T> saved = out;
    return detail::make<T>(std::move(out), {a}, [saved](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            p.grad[i] += n.grad[i] * saved[i] * (T(1) - saved[i]);
    });
}

template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope = T(0.01)) {
    Tensor<T> out = a.value();
    for (auto& v : out.vec()) v = v > T(0) ? v : slope * v;
    return detail::make<T>(std::move(out), {a}, [slope](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            p.grad[i] += n.grad[i] * (p.value[i] > T(0) ? T(1) : slope);
    });
}

// log with a floor on the argument; gradient uses the clamped value.
template <class T>
Var<T> log_clamped(const Var<T>& a, T floor = T(1e-12)) {
    Tensor<T> clamped = a.value();
    for (auto& v : clamped.vec()) v = std::max(v, floor);
    Tensor<T> out = clamped;
    for (auto& v : out.vec()) v = std::log(v);
    return detail::make<T>(std::move(out), {a}, [clamped, floor](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            if (p.value[i] > floor) p.grad[i] += n.grad[i] / clamped[i];
    });
}

// base^e for a fixed real exponent; base clamped below at eps to keep the
// derivative finite for e < 1.
template <class T>
Var<T> pow_const(const Var<T>& a, T e, T eps = T(1e-12)) {
    Tensor<T> out = a.value();
    for (auto& v : out.vec()) v = std::pow(std::max(v, eps), e);
    return detail::make<T>(std::move(out), {a}, [e, eps](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            T base = std::max(p.value[i], eps);
            p.grad[i] += n.grad[i] * e * std::pow(base, e - T(1));
        }
    });
}

template <class T>
Var<T> square(const Var<T>& a) { return mul(a, a); }

// ---- reductions ------------------------------------------------------------

template <class T>
Var<T> sum(const Var<T>& a) {
    Tensor<T> out(Shape{1});
    out[0] = a.value().sum();
    return detail::make<T>(std::move(out), {a}, [](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += n.grad[0];
    });
}

template <class T>
Var<T> mean(const Var<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

// ---- shape ops -------------------------------------------------------------

template <class T>
Var<T> reshape(const Var<T>& a, Shape s) {
    Tensor<T> out = a.value().reshaped(s);
    return detail::make<T>(std::move(out), {a}, [](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
    });
}

// Concatenate 5-d tensors along the channel axis (axis 1).
template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_channels: empty");
    const Shape& s0 = xs[0].value().shape();
    if (s0.size() != 5) throw std::invalid_argument("concat_channels: expect 5-d");
    std::size_t ctotal = 0;
    for (auto& x : xs) {
        const Shape& s = x.value().shape();
        if (s.size() != 5 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] || s[4] != s0[4])
            throw std::invalid_argument("concat_channels: incompatible shapes");
        ctotal += s[1];
    }
    std::size_t B = s0[0], D = s0[2], H = s0[3], W = s0[4];
    std::size_t inner = D * H * W;
    Tensor<T> out(Shape{B, ctotal, D, H, W});
    std::vector<std::size_t> coffs;
    std::size_t coff = 0;
    for (auto& x : xs) {
        coffs.push_back(coff);
        std::size_t c = x.value().dim(1);
        for (std::size_t b = 0; b < B; ++b)
            std::copy_n(x.value().data() + b * c * inner, c * inner,
                        out.data() + (b * ctotal + coff) * inner);
        coff += c;
    }
    return detail::make<T>(std::move(out), xs, [coffs, B, ctotal, inner](Node<T>& n) {
        for (std::size_t k = 0; k < n.parents.size(); ++k) {
            auto& p = *n.parents[k];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            std::size_t c = p.value.dim(1);
            for (std::size_t b = 0; b < B; ++b) {
                const T* g = n.grad.data() + (b * ctotal + coffs[k]) * inner;
                T* pg = p.grad.data() + b * c * inner;
                for (std::size_t i = 0; i < c * inner; ++i) pg[i] += g[i];
            }
        }
    });
}

// Multiply x (B,C,D,H,W) by w whose dims are each either equal to x's or 1.
template <class T>
Var<T> mul_broadcast(const Var<T>& x, const Var<T>& w) {
    const Shape& xs = x.value().shape();
    const Shape& ws = w.value().shape();
    if (xs.size() != 5 || ws.size() != 5)
        throw std::invalid_argument("mul_broadcast: expect 5-d");
    for (std::size_t d = 0; d < 5; ++d)
        if (ws[d] != xs[d] && ws[d] != 1)
            throw std::invalid_argument("mul_broadcast: bad broadcast shape");
    auto windex = [&](std::size_t b, std::size_t c, std::size_t d, std::size_t h,
                      std::size_t w_) {
        std::size_t idx[5] = {b, c, d, h, w_};
        std::size_t off = 0;
        for (std::size_t k = 0; k < 5; ++k) off = off * ws[k] + (ws[k] == 1 ? 0 : idx[k]);
        return off;
    };
    Tensor<T> out(xs);
    for (std::size_t b = 0; b < xs[0]; ++b)
        for (std::size_t c = 0; c < xs[1]; ++c)
            for (std::size_t d = 0; d < xs[2]; ++d)
                for (std::size_t h = 0; h < xs[3]; ++h)
                    for (std::size_t w_ = 0; w_ < xs[4]; ++w_)
                        out(b, c, d, h, w_) =
                            x.value()(b, c, d, h, w_) * w.value()[windex(b, c, d, h, w_)];
    return detail::make<T>(std::move(out), {x, w}, [xs, ws, windex](Node<T>& n) {
        auto& px = *n.parents[0];
        auto& pw = *n.parents[1];
        if (px.requires_grad) px.ensure_grad();
        if (pw.requires_grad) pw.ensure_grad();
        for (std::size_t b = 0; b < xs[0]; ++b)
            for (std::size_t c = 0; c < xs[1]; ++c)
                for (std::size_t d = 0; d < xs[2]; ++d)
                    for (std::size_t h = 0; h < xs[3]; ++h)
                        for (std::size_t w_ = 0; w_ < xs[4]; ++w_) {
                            std::size_t xo = px.value.offset(b, c, d, h, w_);
                            std::size_t wo = windex(b, c, d, h, w_);
                            T g = n.grad[xo];
                            if (px.requires_grad) px.grad[xo] += g * pw.value[wo];
                            if (pw.requires_grad) pw.grad[wo] += g * px.value[xo];
                        }
    });
}

// Select channel c along axis 1 of a (B,C,rest...) tensor -> (B,rest...).
template <class T>
Var<T> slice_channel(const Var<T>& x, std::size_t c) {
    const Shape& s = x.value().shape();
    if (s.size() < 2 || c >= s[1]) throw std::invalid_argument("slice_channel: bad axis/index");
    std::size_t B = s[0], C = s[1];
    std::size_t inner = 1;
    for (std::size_t d = 2; d < s.size(); ++d) inner *= s[d];
    Shape os;
    os.push_back(B);
    for (std::size_t d = 2; d < s.size(); ++d) os.push_back(s[d]);
    Tensor<T> out(os);
    for (std::size_t b = 0; b < B; ++b)
        std::copy_n(x.value().data() + (b * C + c) * inner, inner, out.data() + b * inner);
    return detail::make<T>(std::move(out), {x}, [B, C, c, inner](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t b = 0; b < B; ++b) {
            const T* g = n.grad.data() + b * inner;
            T* pg = p.grad.data() + (b * C + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) pg[i] += g[i];
        }
    });
}

// Reduce all axes but axis 0 -> (B).
template <class T>
Var<T> sum_per_sample(const Var<T>& x) {
    const Shape& s = x.value().shape();
    std::size_t B = s[0];
    std::size_t inner = x.value().size() / B;
    Tensor<T> out(Shape{B});
    for (std::size_t b = 0; b < B; ++b) {
        T acc = 0;
        const T* p = x.value().data() + b * inner;
        for (std::size_t i = 0; i < inner; ++i) acc += p[i];
        out[b] = acc;
    }
    return detail::make<T>(std::move(out), {x}, [B, inner](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t b = 0; b < B; ++b) {
            T g = n.grad[b];
            T* pg = p.grad.data() + b * inner;
            for (std::size_t i = 0; i < inner; ++i) pg[i] += g;
        }
    });
}

// base^e with a per-sample exponent indexed by axis 0; base clamped at eps.
template <class T>
Var<T> pow_per_sample(const Var<T>& a, std::vector<T> exps, T eps = T(1e-12)) {
    const Shape& s = a.value().shape();
    std::size_t B = s[0];
    if (exps.size() != B) throw std::invalid_argument("pow_per_sample: exponent count != B");
    std::size_t inner = a.value().size() / B;
    Tensor<T> out(s);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < inner; ++i)
            out[b * inner + i] = std::pow(std::max(a.value()[b * inner + i], eps), exps[b]);
    return detail::make<T>(std::move(out), {a}, [B, inner, exps, eps](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < inner; ++i) {
                T base = std::max(p.value[b * inner + i], eps);
                p.grad[b * inner + i] +=
                    n.grad[b * inner + i] * exps[b] * std::pow(base, exps[b] - T(1));
            }
    });
}

// Mean softmax cross-entropy of (B,K) logits against integer labels.
template <class T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<std::size_t>& labels) {
    const Shape& s = logits.value().shape();
    if (s.size() != 2 || labels.size() != s[0])
        throw std::invalid_argument("softmax_cross_entropy: bad shapes");
    std::size_t B = s[0], K = s[1];
    Tensor<T> probs(s);
    T loss = 0;
    for (std::size_t b = 0; b < B; ++b) {
        const T* row = logits.value().data() + b * K;
        T m = row[0];
        for (std::size_t k = 1; k < K; ++k) m = std::max(m, row[k]);
        T z = 0;
        for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - m);
        for (std::size_t k = 0; k < K; ++k) probs[b * K + k] = std::exp(row[k] - m) / z;
        loss += -(row[labels[b]] - m - std::log(z));
    }
    Tensor<T> out(Shape{1});
    out[0] = loss / static_cast<T>(B);
    return detail::make<T>(std::move(out), {logits}, [B, K, probs, labels](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        T g = n.grad[0] / static_cast<T>(B);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t k = 0; k < K; ++k)
                p.grad[b * K + k] += g * (probs[b * K + k] - (k == labels[b] ? T(1) : T(0)));
    });
}

// ---- pooling ---------------------------------------------------------------

// Global average over (D,H,W) -> (B,C,1,1,1)
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
    const Shape& s = x.value().shape();
    std::size_t B = s[0], C = s[1], inner = s[2] * s[3] * s[4];
    Tensor<T> out(Shape{B, C, 1, 1, 1});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            const T* p = x.value().data() + (b * C + c) * inner;
            T acc = 0;
            for (std::size_t i = 0; i < inner; ++i) acc += p[i];
            out(b, c, 0, 0, 0) = acc / static_cast<T>(inner);
        }
    return detail::make<T>(std::move(out), {x}, [B, C, inner](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
                T g = n.grad[b * C + c] / static_cast<T>(inner);
                T* pg = p.grad.data() + (b * C + c) * inner;
                for (std::size_t i = 0; i < inner; ++i) pg[i] += g;
            }
    });
}

// Global max over (D,H,W) -> (B,C,1,1,1)
template <class T>
Var<T> global_max_pool(const Var<T>& x) {
    const Shape& s = x.value().shape();
    std::size_t B = s[0], C = s[1], inner = s[2] * s[3] * s[4];
    Tensor<T> out(Shape{B, C, 1, 1, 1});
    std::vector<std::size_t> argmax(B * C);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            const T* p = x.value().data() + (b * C + c) * inner;
            std::size_t best = 0;
            for (std::size_t i = 1; i < inner; ++i)
                if (p[i] > p[best]) best = i;
            out(b, c, 0, 0, 0) = p[best];
            argmax[b * C + c] = best;
        }
    return detail::make<T>(std::move(out), {x}, [B, C, inner, argmax](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t bc = 0; bc < B * C; ++bc)
            p.grad[bc * inner + argmax[bc]] += n.grad[bc];
    });
}

namespace detail {

template <class T, bool IsMin>
Var<T> channel_extreme(const Var<T>& x) {
    const Shape& s = x.value().shape();
    std::size_t B = s[0], C = s[1], inner = s[2] * s[3] * s[4];
    Tensor<T> out(Shape{B, 1, s[2], s[3], s[4]});
    std::vector<std::size_t> arg(B * inner);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < inner; ++i) {
            std::size_t best = 0;
            T bv = x.value()[(b * C + 0) * inner + i];
            for (std::size_t c = 1; c < C; ++c) {
                T v = x.value()[(b * C + c) * inner + i];
                if (IsMin ? (v < bv) : (v > bv)) {
                    bv = v;
                    best = c;
                }
            }
            out[b * inner + i] = bv;
            arg[b * inner + i] = best;
        }
    return make<T>(std::move(out), {x}, [B, C, inner, arg](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < inner; ++i)
                p.grad[(b * C + arg[b * inner + i]) * inner + i] += n.grad[b * inner + i];
    });
}

}  // namespace detail

// Per-position min/max/mean across channels -> (B,1,D,H,W)
template <class T>
Var<T> channel_min(const Var<T>& x) { return detail::channel_extreme<T, true>(x); }

template <class T>
Var<T> channel_max(const Var<T>& x) { return detail::channel_extreme<T, false>(x); }

template <class T>
Var<T> channel_mean(const Var<T>& x) {
    const Shape& s = x.value().shape();
    std::size_t B = s[0], C = s[1], inner = s[2] * s[3] * s[4];
    Tensor<T> out(Shape{B, 1, s[2], s[3], s[4]});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < inner; ++i) {
            T acc = 0;
            for (std::size_t c = 0; c < C; ++c) acc += x.value()[(b * C + c) * inner + i];
            out[b * inner + i] = acc / static_cast<T>(C);
        }
    return detail::make<T>(std::move(out), {x}, [B, C, inner](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < inner; ++i) {
                T g = n.grad[b * inner + i] / static_cast<T>(C);
                for (std::size_t c = 0; c < C; ++c) p.grad[(b * C + c) * inner + i] += g;
            }
    });
}

// ---- convolution -----------------------------------------------------------

// 3-d convolution, NCDHW input, weight (Cout, Cin, kd, kh, kw), zero padding.
template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b,
              std::size_t sd = 1, std::size_t sh = 1, std::size_t sw = 1,
              std::size_t pd = 0, std::size_t ph = 0, std::size_t pw = 0) {
    const Shape& xs = x.value().shape();
    const Shape& ws = w.value().shape();
    if (xs.size() != 5 || ws.size() != 5) throw std::invalid_argument("conv3d: expect 5-d");
    if (xs[1] != ws[1]) throw std::invalid_argument("conv3d: channel mismatch");
    std::size_t B = xs[0], Cin = xs[1], D = xs[2], H = xs[3], W = xs[4];
    std::size_t Cout = ws[0], kd = ws[2], kh = ws[3], kw = ws[4];
    std::size_t Do = (D + 2 * pd - kd) / sd + 1;
    std::size_t Ho = (H + 2 * ph - kh) / sh + 1;
    std::size_t Wo = (W + 2 * pw - kw) / sw + 1;
    Tensor<T> out(Shape{B, Cout, Do, Ho, Wo});
    const T* X = x.value().data();
    const T* Wt = w.value().data();
    const T* Bs = b.defined() ? b.value().data() : nullptr;
    auto xoff = [&](std::size_t bb, std::size_t c, std::size_t d, std::size_t h,
                    std::size_t w_) { return (((bb * Cin + c) * D + d) * H + h) * W + w_; };
    for (std::size_t bb = 0; bb < B; ++bb)
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t od = 0; od < Do; ++od)
                for (std::size_t oh = 0; oh < Ho; ++oh)
                    for (std::size_t ow = 0; ow < Wo; ++ow) {
                        T acc = Bs ? Bs[co] : T(0);
                        for (std::size_t ci = 0; ci < Cin; ++ci)
                            for (std::size_t zd = 0; zd < kd; ++zd) {
                                std::ptrdiff_t id = static_cast<std::ptrdiff_t>(od * sd + zd) -
                                                    static_cast<std::ptrdiff_t>(pd);
                                if (id < 0 || id >= static_cast<std::ptrdiff_t>(D)) continue;
                                for (std::size_t zh = 0; zh < kh; ++zh) {
                                    std::ptrdiff_t ih =
                                        static_cast<std::ptrdiff_t>(oh * sh + zh) -
                                        static_cast<std::ptrdiff_t>(ph);
                                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                                    for (std::size_t zw = 0; zw < kw; ++zw) {
                                        std::ptrdiff_t iw =
                                            static_cast<std::ptrdiff_t>(ow * sw + zw) -
                                            static_cast<std::ptrdiff_t>(pw);
                                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W))
                                            continue;
                                        acc += X[xoff(bb, ci, id, ih, iw)] *
                                               Wt[(((co * Cin + ci) * kd + zd) * kh + zh) * kw +
                                                  zw];
                                    }
                                }
                            }
                        out(bb, co, od, oh, ow) = acc;
                    }
    std::vector<Var<T>> parents = {x, w};
    if (b.defined()) parents.push_back(b);
    bool has_bias = b.defined();
    return detail::make<T>(
        std::move(out), parents,
        [B, Cin, D, H, W, Cout, kd, kh, kw, Do, Ho, Wo, sd, sh, sw, pd, ph, pw,
         has_bias](Node<T>& n) {
            auto& px = *n.parents[0];
            auto& pw_ = *n.parents[1];
            Node<T>* pb = has_bias ? n.parents[2].get() : nullptr;
            if (px.requires_grad) px.ensure_grad();
            if (pw_.requires_grad) pw_.ensure_grad();
            if (pb && pb->requires_grad) pb->ensure_grad();
            auto xoff = [&](std::size_t bb, std::size_t c, std::size_t d, std::size_t h,
                            std::size_t w_) {
                return (((bb * Cin + c) * D + d) * H + h) * W + w_;
            };
            for (std::size_t bb = 0; bb < B; ++bb)
                for (std::size_t co = 0; co < Cout; ++co)
                    for (std::size_t od = 0; od < Do; ++od)
                        for (std::size_t oh = 0; oh < Ho; ++oh)
                            for (std::size_t ow = 0; ow < Wo; ++ow) {
                                T g = n.grad[(((bb * Cout + co) * Do + od) * Ho + oh) * Wo + ow];
                                if (g == T(0)) continue;
                                if (pb && pb->requires_grad) pb->grad[co] += g;
                                for (std::size_t ci = 0; ci < Cin; ++ci)
                                    for (std::size_t zd = 0; zd < kd; ++zd) {
                                        std::ptrdiff_t id =
                                            static_cast<std::ptrdiff_t>(od * sd + zd) -
                                            static_cast<std::ptrdiff_t>(pd);
                                        if (id < 0 || id >= static_cast<std::ptrdiff_t>(D))
                                            continue;
                                        for (std::size_t zh = 0; zh < kh; ++zh) {
                                            std::ptrdiff_t ih =
                                                static_cast<std::ptrdiff_t>(oh * sh + zh) -
                                                static_cast<std::ptrdiff_t>(ph);
                                            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H))
                                                continue;
                                            for (std::size_t zw = 0; zw < kw; ++zw) {
                                                std::ptrdiff_t iw =
                                                    static_cast<std::ptrdiff_t>(ow * sw + zw) -
                                                    static_cast<std::ptrdiff_t>(pw);
                                                if (iw < 0 ||
                                                    iw >= static_cast<std::ptrdiff_t>(W))
                                                    continue;
                                                std::size_t widx =
                                                    (((co * Cin + ci) * kd + zd) * kh + zh) * kw +
                                                    zw;
                                                if (px.requires_grad)
                                                    px.grad[xoff(bb, ci, id, ih, iw)] +=
                                                        g * pw_.value[widx];
                                                if (pw_.requires_grad)
                                                    pw_.grad[widx] +=
                                                        g * px.value[xoff(bb, ci, id, ih, iw)];
                                            }
                                        }
                                    }
                            }
        });
}

// ---- linear ----------------------------------------------------------------

// x (B,F) * W^T (O,F) + b (O) -> (B,O)
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const Shape& xs = x.value().shape();
    const Shape& ws = w.value().shape();
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1])
        throw std::invalid_argument("linear: shape mismatch");
    std::size_t B = xs[0], F = xs[1], O = ws[0];
    Tensor<T> out(Shape{B, O});
    for (std::size_t bb = 0; bb < B; ++bb)
        for (std::size_t o = 0; o < O; ++o) {
            T acc = b.defined() ? b.value()[o] : T(0);
            for (std::size_t f = 0; f < F; ++f)
                acc += x.value()(bb, f) * w.value()(o, f);
            out(bb, o) = acc;
        }
    std::vector<Var<T>> parents = {x, w};
    if (b.defined()) parents.push_back(b);
    bool has_bias = b.defined();
    return detail::make<T>(std::move(out), parents, [B, F, O, has_bias](Node<T>& n) {
        auto& px = *n.parents[0];
        auto& pw = *n.parents[1];
        Node<T>* pb = has_bias ? n.parents[2].get() : nullptr;
        if (px.requires_grad) px.ensure_grad();
        if (pw.requires_grad) pw.ensure_grad();
        if (pb && pb->requires_grad) pb->ensure_grad();
        for (std::size_t bb = 0; bb < B; ++bb)
            for (std::size_t o = 0; o < O; ++o) {
                T g = n.grad[bb * O + o];
                if (pb && pb->requires_grad) pb->grad[o] += g;
                for (std::size_t f = 0; f < F; ++f) {
                    if (px.requires_grad) px.grad[bb * F + f] += g * pw.value[o * F + f];
                    if (pw.requires_grad) pw.grad[o * F + f] += g * px.value[bb * F + f];
                }
            }
    });
}

// ---- resampling ------------------------------------------------------------

// Nearest-neighbor 2x spatial upsampling (depth untouched).
template <class T>
Var<T> upsample2x_spatial(const Var<T>& x) {
    const Shape& s = x.value().shape();
    std::size_t B = s[0], C = s[1], D = s[2], H = s[3], W = s[4];
    Tensor<T> out(Shape{B, C, D, H * 2, W * 2});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t d = 0; d < D; ++d)
                for (std::size_t h = 0; h < H * 2; ++h)
                    for (std::size_t w = 0; w < W * 2; ++w)
                        out(b, c, d, h, w) = x.value()(b, c, d, h / 2, w / 2);
    return detail::make<T>(std::move(out), {x}, [B, C, D, H, W](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t d = 0; d < D; ++d)
                    for (std::size_t h = 0; h < H * 2; ++h)
                        for (std::size_t w = 0; w < W * 2; ++w)
                            p.grad[p.value.offset(b, c, d, h / 2, w / 2)] +=
                                n.grad[n.value.offset(b, c, d, h, w)];
    });
}

namespace detail {

// Bilinear interpolation coefficients with align_corners=false convention.
inline void bilinear_axis(std::size_t in, std::size_t out, std::size_t o,
                          std::size_t& i0, std::size_t& i1, double& w1) {
    if (in == 1 || out == 1) {
        double pos = (static_cast<double>(o) + 0.5) * static_cast<double>(in) /
                         static_cast<double>(out) -
                     0.5;
        pos = std::max(0.0, std::min(pos, static_cast<double>(in - 1)));
        i0 = static_cast<std::size_t>(pos);
        i1 = std::min(i0 + 1, in - 1);
        w1 = pos - static_cast<double>(i0);
        return;
    }
    double pos = (static_cast<double>(o) + 0.5) * static_cast<double>(in) /
                     static_cast<double>(out) -
                 0.5;
    pos = std::max(0.0, std::min(pos, static_cast<double>(in - 1)));
    i0 = static_cast<std::size_t>(pos);
    i1 = std::min(i0 + 1, in - 1);
    w1 = pos - static_cast<double>(i0);
}

}  // namespace detail

// Bilinear spatial resize to (Ho, Wo); depth untouched.
template <class T>
Var<T> resize_bilinear_spatial(const Var<T>& x, std::size_t Ho, std::size_t Wo) {
    const Shape& s = x.value().shape();
    std::size_t B = s[0], C = s[1], D = s[2], H = s[3], W = s[4];
    Tensor<T> out(Shape{B, C, D, Ho, Wo});
    struct Coef { std::size_t h0, h1, w0, w1; T wh, ww; };
    std::vector<Coef> coefs(Ho * Wo);
    for (std::size_t oh = 0; oh < Ho; ++oh)
        for (std::size_t ow = 0; ow < Wo; ++ow) {
            std::size_t h0, h1, w0, w1;
            double wh, ww;
            detail::bilinear_axis(H, Ho, oh, h0, h1, wh);
            detail::bilinear_axis(W, Wo, ow, w0, w1, ww);
            coefs[oh * Wo + ow] = {h0, h1, w0, w1, static_cast<T>(wh), static_cast<T>(ww)};
        }
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t d = 0; d < D; ++d)
                for (std::size_t oh = 0; oh < Ho; ++oh)
                    for (std::size_t ow = 0; ow < Wo; ++ow) {
                        const Coef& cf = coefs[oh * Wo + ow];
                        const auto& xv = x.value();
                        T v00 = xv(b, c, d, cf.h0, cf.w0), v01 = xv(b, c, d, cf.h0, cf.w1);
                        T v10 = xv(b, c, d, cf.h1, cf.w0), v11 = xv(b, c, d, cf.h1, cf.w1);
                        out(b, c, d, oh, ow) =
                            (T(1) - cf.wh) * ((T(1) - cf.ww) * v00 + cf.ww * v01) +
                            cf.wh * ((T(1) - cf.ww) * v10 + cf.ww * v11);
                    }
    return detail::make<T>(std::move(out), {x}, [B, C, D, Ho, Wo, coefs](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t d = 0; d < D; ++d)
                    for (std::size_t oh = 0; oh < Ho; ++oh)
                        for (std::size_t ow = 0; ow < Wo; ++ow) {
                            const auto& cf = coefs[oh * Wo + ow];
                            T g = n.grad[n.value.offset(b, c, d, oh, ow)];
                            p.grad[p.value.offset(b, c, d, cf.h0, cf.w0)] +=
                                g * (T(1) - cf.wh) * (T(1) - cf.ww);
                            p.grad[p.value.offset(b, c, d, cf.h0, cf.w1)] +=
                                g * (T(1) - cf.wh) * cf.ww;
                            p.grad[p.value.offset(b, c, d, cf.h1, cf.w0)] +=
                                g * cf.wh * (T(1) - cf.ww);
                            p.grad[p.value.offset(b, c, d, cf.h1, cf.w1)] +=
                                g * cf.wh * cf.ww;
                        }
    });
}

// Nearest-neighbor resize along depth to Do.
template <class T>
Var<T> resize_depth_nearest(const Var<T>& x, std::size_t Do) {
    const Shape& s = x.value().shape();
    std::size_t B = s[0], C = s[1], D = s[2], H = s[3], W = s[4];
    std::vector<std::size_t> src(Do);
    for (std::size_t od = 0; od < Do; ++od)
        src[od] = std::min<std::size_t>(od * D / Do, D - 1);
    Tensor<T> out(Shape{B, C, Do, H, W});
    std::size_t plane = H * W;
    for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t od = 0; od < Do; ++od)
            std::copy_n(x.value().data() + (bc * D + src[od]) * plane, plane,
                        out.data() + (bc * Do + od) * plane);
    return detail::make<T>(std::move(out), {x}, [B, C, D, Do, plane, src](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t bc = 0; bc < B * C; ++bc)
            for (std::size_t od = 0; od < Do; ++od) {
                const T* g = n.grad.data() + (bc * Do + od) * plane;
                T* pg = p.grad.data() + (bc * D + src[od]) * plane;
                for (std::size_t i = 0; i < plane; ++i) pg[i] += g[i];
            }
    });
}

// ---- softmax over a 2-entry channel axis ------------------------------------

// x (B,2,D,H,W) -> softmax across the channel pair, per position.
template <class T>
Var<T> softmax2_channels(const Var<T>& x) {
    const Shape& s = x.value().shape();
    if (s.size() != 5 || s[1] != 2) throw std::invalid_argument("softmax2: expect (B,2,D,H,W)");
    std::size_t B = s[0], inner = s[2] * s[3] * s[4];
    Tensor<T> out(s);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < inner; ++i) {
            T a = x.value()[(b * 2 + 0) * inner + i];
            T c = x.value()[(b * 2 + 1) * inner + i];
            T m = std::max(a, c);
            T ea = std::exp(a - m), ec = std::exp(c - m);
            T z = ea + ec;
            out[(b * 2 + 0) * inner + i] = ea / z;
            out[(b * 2 + 1) * inner + i] = ec / z;
        }
    Tensor<T> saved = out;
    return detail::make<T>(std::move(out), {x}, [B, inner, saved](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < inner; ++i) {
                T p0 = saved[(b * 2 + 0) * inner + i];
                T p1 = saved[(b * 2 + 1) * inner + i];
                T g0 = n.grad[(b * 2 + 0) * inner + i];
                T g1 = n.grad[(b * 2 + 1) * inner + i];
                T dot = g0 * p0 + g1 * p1;
                p.grad[(b * 2 + 0) * inner + i] += p0 * (g0 - dot);
                p.grad[(b * 2 + 1) * inner + i] += p1 * (g1 - dot);
            }
    });
}

// Fixed-kernel separable Gaussian blur over the last two axes of a
// (B,C,D,H,W) tensor. Kernel is not a parameter; gradient is the same blur
// (symmetric kernel).
template <class T>
Var<T> gaussian_blur_spatial(const Var<T>& x, const std::vector<T>& kernel) {
    const Shape& s = x.value().shape();
    std::size_t B = s[0], C = s[1], D = s[2], H = s[3], W = s[4];
    std::size_t K = kernel.size();
    std::ptrdiff_t r = static_cast<std::ptrdiff_t>(K / 2);
    auto blur = [&](const Tensor<T>& in) {
        Tensor<T> tmp(in.shape()), out(in.shape());
        for (std::size_t bcd = 0; bcd < B * C * D; ++bcd) {
            const T* src = in.data() + bcd * H * W;
            T* dst = tmp.data() + bcd * H * W;
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) {
                    T acc = 0;
                    for (std::size_t k = 0; k < K; ++k) {
                        std::ptrdiff_t ww = static_cast<std::ptrdiff_t>(w) + static_cast<std::ptrdiff_t>(k) - r;
                        ww = std::clamp<std::ptrdiff_t>(ww, 0, static_cast<std::ptrdiff_t>(W) - 1);
                        acc += kernel[k] * src[h * W + ww];
                    }
                    dst[h * W + w] = acc;
                }
            src = tmp.data() + bcd * H * W;
            T* dst2 = out.data() + bcd * H * W;
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) {
                    T acc = 0;
                    for (std::size_t k = 0; k < K; ++k) {
                        std::ptrdiff_t hh = static_cast<std::ptrdiff_t>(h) + static_cast<std::ptrdiff_t>(k) - r;
                        hh = std::clamp<std::ptrdiff_t>(hh, 0, static_cast<std::ptrdiff_t>(H) - 1);
                        acc += kernel[k] * src[hh * W + w];
                    }
                    dst2[h * W + w] = acc;
                }
        }
        return out;
    };
    // exact adjoint of the clamp-to-edge separable blur
    auto blur_adjoint = [B, C, D, H, W, K, r, kernel](const Tensor<T>& g) {
        Tensor<T> tmp(g.shape(), T(0)), out(g.shape(), T(0));
        for (std::size_t bcd = 0; bcd < B * C * D; ++bcd) {
            const T* src = g.data() + bcd * H * W;
            T* dst = tmp.data() + bcd * H * W;
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w)
                    for (std::size_t k = 0; k < K; ++k) {
                        std::ptrdiff_t hh = static_cast<std::ptrdiff_t>(h) +
                                            static_cast<std::ptrdiff_t>(k) - r;
                        hh = std::clamp<std::ptrdiff_t>(hh, 0, static_cast<std::ptrdiff_t>(H) - 1);
                        dst[static_cast<std::size_t>(hh) * W + w] += kernel[k] * src[h * W + w];
                    }
            src = tmp.data() + bcd * H * W;
            T* dst2 = out.data() + bcd * H * W;
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w)
                    for (std::size_t k = 0; k < K; ++k) {
                        std::ptrdiff_t ww = static_cast<std::ptrdiff_t>(w) +
                                            static_cast<std::ptrdiff_t>(k) - r;
                        ww = std::clamp<std::ptrdiff_t>(ww, 0, static_cast<std::ptrdiff_t>(W) - 1);
                        dst2[h * W + static_cast<std::size_t>(ww)] += kernel[k] * src[h * W + w];
                    }
        }
        return out;
    };
    Tensor<T> out = blur(x.value());
    return detail::make<T>(std::move(out), {x}, [blur_adjoint](Node<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        Tensor<T> g = blur_adjoint(n.grad);
        for (std::size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
    });
}

}  // namespace costfilter::ag
