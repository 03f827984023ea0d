#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "relikin/error.hpp"

namespace relikin {

// Dense row-major tensor of doubles. Most kernels treat tensors as 2D
// (rows = first dimension, cols = product of the rest); elementwise ops work
// on any rank. Immutable by convention once handed to a tape.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), v_(checked_numel(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> values)
        : shape_(std::move(shape)), v_(std::move(values)) {
        if (checked_numel(shape_) != v_.size())
            throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " +
                             std::to_string(v_.size()) + " values");
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::size_t> shape, double value) {
        Tensor t(std::move(shape));
        for (double& x : t.v_) x = value;
        return t;
    }

    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t numel() const { return v_.size(); }
    bool is_scalar() const { return v_.size() == 1; }

    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    // 2D view: rows = dim 0, cols = product of remaining dims.
    std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
    std::size_t cols() const {
        if (shape_.empty()) return 1;
        std::size_t c = 1;
        for (std::size_t i = 1; i < shape_.size(); ++i) c *= shape_[i];
        return c;
    }

    double& operator[](std::size_t i) { return v_[i]; }
    double operator[](std::size_t i) const { return v_[i]; }
    double& at2(std::size_t r, std::size_t c) { return v_[r * cols() + c]; }
    double at2(std::size_t r, std::size_t c) const { return v_[r * cols() + c]; }

    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }
    std::vector<double>& values() { return v_; }
    const std::vector<double>& values() const { return v_; }

    // Same data, new shape; numel must match.
    Tensor reshaped(std::vector<std::size_t> shape) const {
        Tensor t;
        t.shape_ = std::move(shape);
        if (checked_numel(t.shape_) != v_.size())
            throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(t.shape_) +
                             " changes element count");
        t.v_ = v_;
        return t;
    }

    bool all_finite() const {
        for (double x : v_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && v_ == o.v_; }

    static std::string shape_str(const std::vector<std::size_t>& s) {
        std::ostringstream os;
        os << '{';
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) os << ',';
            os << s[i];
        }
        os << '}';
        return os.str();
    }
    std::string shape_str() const { return shape_str(shape_); }

private:
    static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) {
            if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape));
            n *= d;
        }
        return n;
    }

    std::vector<std::size_t> shape_;
    std::vector<double> v_;
};

namespace kern {

// Elementwise binary broadcast modes. `Row` requires both operands 2D with
// rhs shaped (1, cols). Kernels document their accepted modes.
enum class Broadcast { Same, Scalar, Row };

inline Broadcast broadcast_mode(const char* op, const Tensor& a, const Tensor& b) {
    if (a.same_shape(b)) return Broadcast::Same;
    if (b.is_scalar()) return Broadcast::Scalar;
    if (a.rank() == 2 && b.rank() == 2 && b.dim(0) == 1 && b.dim(1) == a.dim(1))
        return Broadcast::Row;
    throw ShapeError(std::string(op) + ": cannot broadcast " + a.shape_str() + " with " +
                     b.shape_str());
}

template <typename F>
Tensor binary_ew(const char* op, const Tensor& a, const Tensor& b, F f) {
    const Broadcast m = broadcast_mode(op, a, b);
    Tensor out = a;
    const std::size_t n = a.numel();
    switch (m) {
        case Broadcast::Same:
            for (std::size_t i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
            break;
        case Broadcast::Scalar: {
            const double s = b[0];
            for (std::size_t i = 0; i < n; ++i) out[i] = f(a[i], s);
            break;
        }
        case Broadcast::Row: {
            const std::size_t c = a.cols();
            for (std::size_t i = 0; i < n; ++i) out[i] = f(a[i], b[i % c]);
            break;
        }
    }
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    return binary_ew("add", a, b, [](double x, double y) { return x + y; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_ew("sub", a, b, [](double x, double y) { return x - y; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_ew("mul", a, b, [](double x, double y) { return x * y; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
    const Broadcast m = broadcast_mode("div", a, b);
    if (m == Broadcast::Row) throw ShapeError("div: row broadcast not supported");
    return binary_ew("div", a, b, [](double x, double y) { return x / y; });
}

// (m,k) x (k,n) -> (m,n). Parallel over output rows; per-element accumulation
// runs in ascending k, so results do not depend on the thread count.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: lhs " + a.shape_str() + " vs rhs " + b.shape_str());
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = out.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (m * k * n > 65536)
#endif
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
        double* crow = pc + i * n;
        const double* arow = pa + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return out;
}

template <typename F>
Tensor unary_ew(const Tensor& a, F f) {
    Tensor out = a;
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
    return out;
}

inline double sigmoid_scalar(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) { return unary_ew(a, sigmoid_scalar); }
inline Tensor tanh(const Tensor& a) { return unary_ew(a, [](double x) { return std::tanh(x); }); }
inline Tensor exp(const Tensor& a) { return unary_ew(a, [](double x) { return std::exp(x); }); }
inline Tensor log(const Tensor& a) { return unary_ew(a, [](double x) { return std::log(x); }); }
inline Tensor sqrt(const Tensor& a) { return unary_ew(a, [](double x) { return std::sqrt(x); }); }
inline Tensor square(const Tensor& a) { return unary_ew(a, [](double x) { return x * x; }); }
inline Tensor abs(const Tensor& a) { return unary_ew(a, [](double x) { return std::fabs(x); }); }
inline Tensor acos(const Tensor& a) { return unary_ew(a, [](double x) { return std::acos(x); }); }
inline Tensor neg(const Tensor& a) { return unary_ew(a, [](double x) { return -x; }); }

inline Tensor clamp(const Tensor& a, double lo, double hi) {
    if (!(lo <= hi)) throw ValidationError("clamp: lo > hi");
    return unary_ew(a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); });
}

// Rectangular 2D slice, rows [r0,r1) x cols [c0,c1).
inline Tensor slice(const Tensor& a, std::size_t r0, std::size_t r1, std::size_t c0,
                    std::size_t c1) {
    if (a.rank() != 2 || r1 > a.dim(0) || c1 > a.dim(1) || r0 >= r1 || c0 >= c1)
        throw ShapeError("slice: rect [" + std::to_string(r0) + "," + std::to_string(r1) + ")x[" +
                         std::to_string(c0) + "," + std::to_string(c1) + ") out of " +
                         a.shape_str());
    Tensor out({r1 - r0, c1 - c0});
    const std::size_t w = c1 - c0, ac = a.dim(1);
    for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = 0; c < w; ++c) out.at2(r - r0, c) = a.data()[r * ac + c0 + c];
    return out;
}

// Concatenation along dim 0; all inputs 2D with equal column counts.
inline Tensor concat_rows(const std::vector<const Tensor*>& parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const std::size_t c = parts[0]->cols();
    std::size_t rows = 0;
    for (const Tensor* p : parts) {
        if (p->rank() != 2 || p->dim(1) != c)
            throw ShapeError("concat: column mismatch, " + parts[0]->shape_str() + " vs " +
                             p->shape_str());
        rows += p->dim(0);
    }
    Tensor out({rows, c});
    std::size_t r = 0;
    for (const Tensor* p : parts) {
        std::copy(p->values().begin(), p->values().end(), out.data() + r * c);
        r += p->dim(0);
    }
    return out;
}

inline Tensor reduce_sum(const Tensor& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a[i];
    return Tensor::scalar(s);
}

inline Tensor reduce_mean(const Tensor& a) {
    return Tensor::scalar(reduce_sum(a)[0] / static_cast<double>(a.numel()));
}

} // namespace kern
} // namespace relikin
