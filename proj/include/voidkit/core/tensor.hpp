#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace voidkit {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Dense row-major tensor, last dimension fastest. Rank 1..4 is all this
/// library needs: vectors, (N,D) matrices, (H,W,C) images and feature maps.
template <typename Real>
struct Tensor {
    std::vector<int> shape;
    std::vector<Real> data;

    Tensor() = default;

    explicit Tensor(std::vector<int> s, Real fill = Real(0)) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(count(shape)), fill);
    }

    static long count(const std::vector<int>& s) {
        long n = 1;
        for (int d : s) {
            if (d <= 0) throw ShapeError("tensor dimension must be positive");
            n *= d;
        }
        return n;
    }

    int rank() const { return static_cast<int>(shape.size()); }
    long numel() const { return static_cast<long>(data.size()); }
    int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    Real& operator[](long i) { return data[static_cast<size_t>(i)]; }
    Real operator[](long i) const { return data[static_cast<size_t>(i)]; }

    Real& at(int i, int j) { return data[static_cast<size_t>(i) * dim(1) + j]; }
    Real at(int i, int j) const { return data[static_cast<size_t>(i) * dim(1) + j]; }

    Real& at(int i, int j, int k) {
        return data[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
    }
    Real at(int i, int j, int k) const {
        return data[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
    }

    Tensor& operator+=(const Tensor& o) {
        require_same(o, "+=");
        for (size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
        return *this;
    }
    Tensor& operator-=(const Tensor& o) {
        require_same(o, "-=");
        for (size_t i = 0; i < data.size(); ++i) data[i] -= o.data[i];
        return *this;
    }
    Tensor& operator*=(Real s) {
        for (auto& v : data) v *= s;
        return *this;
    }

    void fill(Real v) { std::fill(data.begin(), data.end(), v); }

    Real min() const { return *std::min_element(data.begin(), data.end()); }
    Real max() const { return *std::max_element(data.begin(), data.end()); }

    Real sum() const { return std::accumulate(data.begin(), data.end(), Real(0)); }
    Real mean() const { return numel() > 0 ? sum() / Real(numel()) : Real(0); }

    bool all_finite() const {
        for (Real v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    void require_same(const Tensor& o, const char* what) const {
        if (!same_shape(o)) throw ShapeError(std::string("shape mismatch in ") + what);
    }
};

template <typename Real>
Tensor<Real> operator+(Tensor<Real> a, const Tensor<Real>& b) { return a += b; }

template <typename Real>
Tensor<Real> operator-(Tensor<Real> a, const Tensor<Real>& b) { return a -= b; }

template <typename Real>
Tensor<Real> hadamard(const Tensor<Real>& a, const Tensor<Real>& b) {
    a.require_same(b, "hadamard");
    Tensor<Real> r = a;
    for (size_t i = 0; i < r.data.size(); ++i) r.data[i] *= b.data[i];
    return r;
}

template <typename Real>
Real dot_flat(const Tensor<Real>& a, const Tensor<Real>& b) {
    a.require_same(b, "dot");
    Real s = 0;
    for (size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

template <typename Real>
Real frobenius_norm(const Tensor<Real>& a) {
    Real s = 0;
    for (Real v : a.data) s += v * v;
    return std::sqrt(s);
}

template <typename Real>
Real linf_distance(const Tensor<Real>& a, const Tensor<Real>& b) {
    a.require_same(b, "linf_distance");
    Real m = 0;
    for (size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

template <typename Real>
Real mse(const Tensor<Real>& a, const Tensor<Real>& b) {
    a.require_same(b, "mse");
    Real s = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        Real d = a.data[i] - b.data[i];
        s += d * d;
    }
    return s / Real(a.numel());
}

}  // namespace voidkit
