#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "latentbank/common.hpp"
#include "latentbank/rng.hpp"

namespace latentbank {

// Dense row-major 2-D tensor. Vectors are 1xN or Nx1, scalars 1x1.
// Values are immutable by convention once an op has produced them; the
// mutating accessors exist for construction and for the write rules that
// run outside gradient recording.
template <typename S>
class Tensor {
  public:
    Tensor() = default;
    Tensor(int rows, int cols) : rows_(rows), cols_(cols) {
        if (rows < 0 || cols < 0) throw DimensionError("negative tensor extent");
        data_.assign(static_cast<size_t>(rows) * static_cast<size_t>(cols), S(0));
    }
    Tensor(int rows, int cols, std::vector<S> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (rows < 0 || cols < 0) throw DimensionError("negative tensor extent");
        if (data_.size() != static_cast<size_t>(rows) * static_cast<size_t>(cols))
            throw DimensionError("data length does not match extents");
        check_finite("tensor literal");
    }
    Tensor(std::initializer_list<std::initializer_list<S>> rows) {
        rows_ = static_cast<int>(rows.size());
        cols_ = rows_ ? static_cast<int>(rows.begin()->size()) : 0;
        data_.reserve(static_cast<size_t>(rows_) * static_cast<size_t>(cols_));
        for (const auto& r : rows) {
            if (static_cast<int>(r.size()) != cols_)
                throw DimensionError("ragged tensor literal");
            data_.insert(data_.end(), r.begin(), r.end());
        }
        check_finite("tensor literal");
    }

    static Tensor zeros(int rows, int cols) { return Tensor(rows, cols); }
    static Tensor full(int rows, int cols, S v) {
        Tensor t(rows, cols);
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }
    static Tensor identity(int n) {
        Tensor t(n, n);
        for (int i = 0; i < n; ++i) t(i, i) = S(1);
        return t;
    }
    static Tensor normal(int rows, int cols, S sigma, Rng rng) {
        Tensor t(rows, cols);
        for (auto& v : t.data_) v = static_cast<S>(rng.normal()) * sigma;
        return t;
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
    bool is_scalar() const { return rows_ == 1 && cols_ == 1; }

    S& operator()(int r, int c) { return data_[static_cast<size_t>(r) * cols_ + c]; }
    S operator()(int r, int c) const { return data_[static_cast<size_t>(r) * cols_ + c]; }
    S* row_ptr(int r) { return data_.data() + static_cast<size_t>(r) * cols_; }
    const S* row_ptr(int r) const { return data_.data() + static_cast<size_t>(r) * cols_; }
    std::vector<S>& data() { return data_; }
    const std::vector<S>& data() const { return data_; }
    S scalar() const {
        if (!is_scalar()) throw ContractError("tensor is not scalar");
        return data_[0];
    }

    uint64_t byte_hash() const {
        uint64_t h = fnv1a64(&rows_, sizeof rows_);
        h = fnv1a64(&cols_, sizeof cols_, h);
        return data_.empty() ? h : fnv1a64(data_.data(), data_.size() * sizeof(S), h);
    }

    bool all_finite() const {
        for (S v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
    void check_finite(const char* where) const {
        if (!all_finite()) throw NumericError(std::string("non-finite value in ") + where);
    }

    bool operator==(const Tensor& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
    }

  private:
    int rows_ = 0, cols_ = 0;
    std::vector<S> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace ops {

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.cols() != b.rows())
        throw DimensionError("matmul: inner extents " + std::to_string(a.cols()) +
                             " vs " + std::to_string(b.rows()));
    Tensor<S> out(a.rows(), b.cols());
    const int p = a.rows(), q = a.cols(), r = b.cols();
    for (int i = 0; i < p; ++i) {
        S* orow = out.row_ptr(i);
        const S* arow = a.row_ptr(i);
        for (int k = 0; k < q; ++k) {
            const S aik = arow[k];
            if (aik == S(0)) continue;
            const S* brow = b.row_ptr(k);
            for (int j = 0; j < r; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
    Tensor<S> out(a.cols(), a.rows());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    if (!a.same_shape(b)) throw DimensionError("add: shape mismatch");
    Tensor<S> out = a;
    for (size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
    return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    if (!a.same_shape(b)) throw DimensionError("sub: shape mismatch");
    Tensor<S> out = a;
    for (size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
    return out;
}

template <typename S>
Tensor<S> hadamard(const Tensor<S>& a, const Tensor<S>& b) {
    if (!a.same_shape(b)) throw DimensionError("hadamard: shape mismatch");
    Tensor<S> out = a;
    for (size_t i = 0; i < out.size(); ++i) out.data()[i] *= b.data()[i];
    return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    Tensor<S> out = a;
    for (auto& v : out.data()) v *= c;
    return out;
}

// matrix + row vector, broadcast over rows (the only broadcast we allow)
template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& a, const Tensor<S>& v) {
    if (v.rows() != 1 || v.cols() != a.cols())
        throw DimensionError("add_rowvec: vector shape mismatch");
    Tensor<S> out = a;
    for (int i = 0; i < a.rows(); ++i) {
        S* row = out.row_ptr(i);
        for (int j = 0; j < a.cols(); ++j) row[j] += v(0, j);
    }
    return out;
}

template <typename S>
Tensor<S> mul_rowvec(const Tensor<S>& a, const Tensor<S>& v) {
    if (v.rows() != 1 || v.cols() != a.cols())
        throw DimensionError("mul_rowvec: vector shape mismatch");
    Tensor<S> out = a;
    for (int i = 0; i < a.rows(); ++i) {
        S* row = out.row_ptr(i);
        for (int j = 0; j < a.cols(); ++j) row[j] *= v(0, j);
    }
    return out;
}

// scale row i of a by g(i,0)
template <typename S>
Tensor<S> scale_rows(const Tensor<S>& a, const Tensor<S>& g) {
    if (g.cols() != 1 || g.rows() != a.rows())
        throw DimensionError("scale_rows: gate shape mismatch");
    Tensor<S> out = a;
    for (int i = 0; i < a.rows(); ++i) {
        S* row = out.row_ptr(i);
        for (int j = 0; j < a.cols(); ++j) row[j] *= g(i, 0);
    }
    return out;
}

template <typename S>
Tensor<S> concat_rows(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.empty() && a.rows() == 0) return b;
    if (b.empty() && b.rows() == 0) return a;
    if (a.cols() != b.cols()) throw DimensionError("concat_rows: column mismatch");
    Tensor<S> out(a.rows() + b.rows(), a.cols());
    std::copy(a.data().begin(), a.data().end(), out.data().begin());
    std::copy(b.data().begin(), b.data().end(), out.data().begin() + a.size());
    return out;
}

template <typename S>
Tensor<S> concat_cols(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rows() != b.rows()) throw DimensionError("concat_cols: row mismatch");
    Tensor<S> out(a.rows(), a.cols() + b.cols());
    for (int i = 0; i < a.rows(); ++i) {
        std::copy(a.row_ptr(i), a.row_ptr(i) + a.cols(), out.row_ptr(i));
        std::copy(b.row_ptr(i), b.row_ptr(i) + b.cols(), out.row_ptr(i) + a.cols());
    }
    return out;
}

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& a, int r0, int r1) {
    if (r0 < 0 || r1 < r0 || r1 > a.rows()) throw DimensionError("slice_rows: bad range");
    Tensor<S> out(r1 - r0, a.cols());
    std::copy(a.row_ptr(r0), a.row_ptr(r0) + out.size(), out.data().begin());
    return out;
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& a, int c0, int c1) {
    if (c0 < 0 || c1 < c0 || c1 > a.cols()) throw DimensionError("slice_cols: bad range");
    Tensor<S> out(a.rows(), c1 - c0);
    for (int i = 0; i < a.rows(); ++i)
        std::copy(a.row_ptr(i) + c0, a.row_ptr(i) + c1, out.row_ptr(i));
    return out;
}

// numerically stable row softmax: per-row max subtraction
template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& a) {
    Tensor<S> out = a;
    for (int i = 0; i < a.rows(); ++i) {
        S* row = out.row_ptr(i);
        S m = row[0];
        for (int j = 1; j < a.cols(); ++j) m = std::max(m, row[j]);
        S sum = S(0);
        for (int j = 0; j < a.cols(); ++j) {
            row[j] = std::exp(row[j] - m);
            sum += row[j];
        }
        for (int j = 0; j < a.cols(); ++j) row[j] /= sum;
    }
    return out;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
    Tensor<S> out = a;
    for (auto& v : out.data()) v = S(1) / (S(1) + std::exp(-v));
    return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
    Tensor<S> out = a;
    for (auto& v : out.data()) v = std::max(v, S(0));
    return out;
}

// y_i = x_i / sqrt(mean(x_row^2) + eps), per row
template <typename S>
Tensor<S> rmsnorm_rows(const Tensor<S>& a, S eps) {
    Tensor<S> out = a;
    for (int i = 0; i < a.rows(); ++i) {
        S* row = out.row_ptr(i);
        S ss = S(0);
        for (int j = 0; j < a.cols(); ++j) ss += row[j] * row[j];
        S r = std::sqrt(ss / static_cast<S>(a.cols()) + eps);
        for (int j = 0; j < a.cols(); ++j) row[j] /= r;
    }
    return out;
}

template <typename S>
Tensor<S> row_mean(const Tensor<S>& a) {
    if (a.rows() == 0) throw DimensionError("row_mean: empty tensor");
    Tensor<S> out(1, a.cols());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) out(0, j) += a(i, j);
    for (int j = 0; j < a.cols(); ++j) out(0, j) /= static_cast<S>(a.rows());
    return out;
}

template <typename S>
S frobenius(const Tensor<S>& a) {
    double ss = 0.0;
    for (S v : a.data()) ss += static_cast<double>(v) * static_cast<double>(v);
    return static_cast<S>(std::sqrt(ss));
}

template <typename S>
S max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
    if (!a.same_shape(b)) throw DimensionError("max_abs_diff: shape mismatch");
    S m = S(0);
    for (size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

} // namespace ops
} // namespace latentbank
