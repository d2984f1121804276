#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cxrnet/error.hpp"
#include "cxrnet/rng.hpp"

namespace cxr {

#ifdef CXRNET_DOUBLE_PRECISION
using real_t = double;
#else
using real_t = float;
#endif

using Extent = std::ptrdiff_t;
using Shape = std::vector<Extent>;

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

inline Extent shape_product(const Shape& shape) {
    Extent n = 1;
    for (Extent e : shape) {
        require(e >= 1, ErrorKind::shape, "extent must be >= 1 in " + shape_str(shape));
        n *= e;
    }
    return n;
}

// Dense row-major array. The last axis is the fastest-varying one.
template <typename Real>
class Tensor {
public:
    using value_type = Real;

    Tensor() = default;

    explicit Tensor(Shape shape, Real fill = Real(0)) : shape_(std::move(shape)) {
        require(!shape_.empty(), ErrorKind::shape, "tensor needs at least one axis");
        data_.assign(static_cast<std::size_t>(shape_product(shape_)), fill);
    }

    Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
        require(!shape_.empty(), ErrorKind::shape, "tensor needs at least one axis");
        require(static_cast<std::size_t>(shape_product(shape_)) == data_.size(), ErrorKind::shape,
                "data length " + std::to_string(data_.size()) + " does not match shape " +
                    shape_str(shape_));
    }

    const Shape& shape() const noexcept { return shape_; }
    Extent dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    Real* data() noexcept { return data_.data(); }
    const Real* data() const noexcept { return data_.data(); }
    std::span<Real> span() noexcept { return data_; }
    std::span<const Real> span() const noexcept { return data_; }
    const std::vector<Real>& vec() const noexcept { return data_; }

    Real& operator[](std::size_t i) { return data_[i]; }
    const Real& operator[](std::size_t i) const { return data_[i]; }

    template <typename... Idx>
    Real& operator()(Idx... idx) {
        return data_[offset(idx...)];
    }
    template <typename... Idx>
    const Real& operator()(Idx... idx) const {
        return data_[offset(idx...)];
    }

    void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(Shape shape) const {
        require(shape_product(shape) == static_cast<Extent>(data_.size()), ErrorKind::shape,
                "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        return Tensor(std::move(shape), data_);
    }

    template <typename Other>
    Tensor<Other> cast() const {
        return Tensor<Other>(shape_, std::vector<Other>(data_.begin(), data_.end()));
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    template <typename... Idx>
    std::size_t offset(Idx... idx) const {
        const Extent ids[] = {static_cast<Extent>(idx)...};
        Extent off = 0;
        for (std::size_t a = 0; a < sizeof...(Idx); ++a) off = off * shape_[a] + ids[a];
        return static_cast<std::size_t>(off);
    }

    Shape shape_;
    std::vector<Real> data_;
};

template <typename Real = real_t>
Tensor<Real> tensor_new(const Shape& shape, Real fill) {
    return Tensor<Real>(shape, fill);
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
    require(a == b, ErrorKind::shape,
            std::string(what) + ": " + shape_str(a) + " vs " + shape_str(b));
}

// Raw GEMM kernels over row-major buffers. Each output element accumulates in
// increasing inner index order starting from its current value, so results
// match a naive triple loop bit-for-bit.
namespace gemm {

// C[m,n] += A[m,k] * B[k,n]
template <typename Real>
void nn(Extent m, Extent k, Extent n, const Real* a, const Real* b, Real* c) {
    for (Extent i = 0; i < m; ++i) {
        Real* ci = c + i * n;
        const Real* ai = a + i * k;
        for (Extent t = 0; t < k; ++t) {
            const Real av = ai[t];
            const Real* bt = b + t * n;
            for (Extent j = 0; j < n; ++j) ci[j] += av * bt[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename Real>
void nt(Extent m, Extent k, Extent n, const Real* a, const Real* b, Real* c) {
    for (Extent i = 0; i < m; ++i) {
        const Real* ai = a + i * k;
        for (Extent j = 0; j < n; ++j) {
            const Real* bj = b + j * k;
            Real acc = 0;
            for (Extent t = 0; t < k; ++t) acc += ai[t] * bj[t];
            c[i * n + j] += acc;
        }
    }
}

// C[m,n] += A[k,m]^T * B[k,n]
template <typename Real>
void tn(Extent m, Extent k, Extent n, const Real* a, const Real* b, Real* c) {
    for (Extent t = 0; t < k; ++t) {
        const Real* at = a + t * m;
        const Real* bt = b + t * n;
        for (Extent i = 0; i < m; ++i) {
            const Real av = at[i];
            if (av == Real(0)) continue;
            Real* ci = c + i * n;
            for (Extent j = 0; j < n; ++j) ci[j] += av * bt[j];
        }
    }
}

}  // namespace gemm

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    require(a.rank() == 2 && b.rank() == 2, ErrorKind::shape, "matmul needs rank-2 operands");
    require(a.dim(1) == b.dim(0), ErrorKind::shape,
            "matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor<Real> c({a.dim(0), b.dim(1)}, Real(0));
    gemm::nn(a.dim(0), a.dim(1), b.dim(1), a.data(), b.data(), c.data());
    return c;
}

// Normal(0, sqrt(2 / fan_in)) draws.
template <typename Real = real_t>
Tensor<Real> he_init(const Shape& shape, Extent fan_in, Rng& rng) {
    require(fan_in >= 1, ErrorKind::parameter, "he_init fan_in must be >= 1");
    Tensor<Real> t(shape, Real(0));
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.span()) v = static_cast<Real>(rng.normal() * stddev);
    return t;
}

template <typename Real>
bool all_finite(const Tensor<Real>& t) {
    return std::all_of(t.span().begin(), t.span().end(), [](Real v) { return std::isfinite(v); });
}

}  // namespace cxr
