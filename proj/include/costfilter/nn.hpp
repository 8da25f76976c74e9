#pragma once
// Thin layer wrappers over the autograd ops plus a named parameter store
// used for optimization and checkpointing.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "costfilter/autograd.hpp"

namespace costfilter::nn {

template <class T>
class ParamStore {
public:
    ag::Var<T> add(const std::string& name, Tensor<T> init) {
        for (auto& [n, v] : items_)
            if (n == name) throw std::logic_error("duplicate parameter: " + name);
        auto v = ag::Var<T>::param(std::move(init));
        items_.emplace_back(name, v);
        return v;
    }

    std::vector<std::pair<std::string, ag::Var<T>>>& items() { return items_; }
    const std::vector<std::pair<std::string, ag::Var<T>>>& items() const { return items_; }

    ag::Var<T> find(const std::string& name) const {
        for (auto& [n, v] : items_)
            if (n == name) return v;
        throw std::out_of_range("no parameter named " + name);
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (auto& [name, v] : items_) n += v.value().size();
        return n;
    }

    void zero_grad() {
        for (auto& [n, v] : items_) v.grad().fill(T(0));
    }

private:
    std::vector<std::pair<std::string, ag::Var<T>>> items_;
};

// Deterministic per-layer seeds derived from a master seed.
class SeedSequence {
public:
    explicit SeedSequence(std::uint64_t master) : master_(master) {}
    std::uint64_t next() { return master_ * 0x9e3779b97f4a7c15ull + (++counter_) * 0xbf58476d1ce4e5b9ull; }

private:
    std::uint64_t master_;
    std::uint64_t counter_ = 0;
};

template <class T>
Tensor<T> fan_in_init(const Shape& shape, std::size_t fan_in, std::uint64_t seed) {
    T stddev = static_cast<T>(std::sqrt(2.0 / static_cast<double>(fan_in)));
    return Tensor<T>::randn(shape, seed, stddev);
}

template <class T>
struct Conv3d {
    ag::Var<T> weight, bias;
    std::size_t sd = 1, sh = 1, sw = 1, pd = 0, ph = 0, pw = 0;

    Conv3d() = default;
    Conv3d(ParamStore<T>& ps, SeedSequence& seeds, const std::string& name,
           std::size_t cin, std::size_t cout,
           std::size_t kd, std::size_t kh, std::size_t kw,
           std::size_t stride_d = 1, std::size_t stride_hw = 1,
           bool same_pad = true)
        : sd(stride_d), sh(stride_hw), sw(stride_hw) {
        if (same_pad) {
            pd = kd / 2;
            ph = kh / 2;
            pw = kw / 2;
        }
        std::size_t fan_in = cin * kd * kh * kw;
        weight = ps.add(name + ".weight",
                        fan_in_init<T>(Shape{cout, cin, kd, kh, kw}, fan_in, seeds.next()));
        bias = ps.add(name + ".bias", Tensor<T>(Shape{cout}, T(0)));
    }

    ag::Var<T> operator()(const ag::Var<T>& x) const {
        return ag::conv3d(x, weight, bias, sd, sh, sw, pd, ph, pw);
    }
};

template <class T>
struct Linear {
    ag::Var<T> weight, bias;

    Linear() = default;
    Linear(ParamStore<T>& ps, SeedSequence& seeds, const std::string& name,
           std::size_t in, std::size_t out) {
        weight = ps.add(name + ".weight", fan_in_init<T>(Shape{out, in}, in, seeds.next()));
        bias = ps.add(name + ".bias", Tensor<T>(Shape{out}, T(0)));
    }

    ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::linear(x, weight, bias); }
};

}  // namespace costfilter::nn
