#pragma once
// Dense row-major n-dimensional tensor used throughout the library.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace costfilter {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + ")";
}

template <class T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
        data_.assign(count(shape_), fill);
    }

    static std::size_t count(const Shape& s) {
        std::size_t n = 1;
        for (auto d : s) n *= d;
        return n;
    }

    const Shape& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    template <class... Ix>
    T& operator()(Ix... ix) { return data_[offset(ix...)]; }
    template <class... Ix>
    const T& operator()(Ix... ix) const { return data_[offset(ix...)]; }

    template <class... Ix>
    std::size_t offset(Ix... ix) const {
        assert(sizeof...(ix) == shape_.size());
        std::size_t idx[] = {static_cast<std::size_t>(ix)...};
        std::size_t off = 0;
        for (std::size_t d = 0; d < shape_.size(); ++d) {
            assert(idx[d] < shape_[d]);
            off = off * shape_[d] + idx[d];
        }
        return off;
    }

    Tensor reshaped(Shape s) const {
        if (count(s) != size())
            throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(s));
        Tensor out = *this;
        out.shape_ = std::move(s);
        return out;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (T v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    T min_value() const { return *std::min_element(data_.begin(), data_.end()); }
    T max_value() const { return *std::max_element(data_.begin(), data_.end()); }

    T sum() const {
        T s = 0;
        for (T v : data_) s += v;
        return s;
    }
    T mean() const { return size() ? sum() / static_cast<T>(size()) : T(0); }

    static Tensor randn(const Shape& s, std::uint64_t seed, T stddev = T(1)) {
        Tensor out(s);
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> d(0.0, static_cast<double>(stddev));
        for (auto& v : out.data_) v = static_cast<T>(d(rng));
        return out;
    }

    static Tensor rand_uniform(const Shape& s, std::uint64_t seed, T lo = T(0), T hi = T(1)) {
        Tensor out(s);
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> d(static_cast<double>(lo), static_cast<double>(hi));
        for (auto& v : out.data_) v = static_cast<T>(d(rng));
        return out;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    Shape shape_;
    std::vector<T> data_;
};

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    assert(a.same_shape(b));
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace costfilter
