#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <vector>

#include "ratt/common.hpp"

namespace ratt {

// Dense row-major matrix of doubles. All model math runs in double so the
// finite-difference gradient checks have headroom; files that persist
// float32 (checkpoints, token index) round at the IO boundary.
class Mat {
  public:
    Mat() = default;
    Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Mat from(std::size_t rows, std::size_t cols, std::vector<double> data) {
        assert(data.size() == rows * cols);
        Mat m;
        m.rows_ = rows;
        m.cols_ = cols;
        m.data_ = std::move(data);
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    double* row(std::size_t r) { return data_.data() + r * cols_; }
    const double* row(std::size_t r) const { return data_.data() + r * cols_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline double dot(const double* a, const double* b, std::size_t n) {
    double s0 = 0.0, s1 = 0.0;
    std::size_t i = 0;
    for (; i + 1 < n; i += 2) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
    }
    if (i < n) s0 += a[i] * b[i];
    return s0 + s1;
}

// out = a * b
inline void matmul_into(const Mat& a, const Mat& b, Mat& out) {
    assert(a.cols() == b.rows());
    out = Mat(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ar = a.row(i);
        double* or_ = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            double av = ar[k];
            if (av == 0.0) continue;
            const double* br = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) or_[j] += av * br[j];
        }
    }
}

// out = a * b^T
inline void matmul_nt_into(const Mat& a, const Mat& b, Mat& out) {
    assert(a.cols() == b.cols());
    out = Mat(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(a.row(i), b.row(j), a.cols());
}

// out += a^T * b
inline void matmul_tn_acc(const Mat& a, const Mat& b, Mat& out) {
    assert(a.rows() == b.rows());
    assert(out.rows() == a.cols() && out.cols() == b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* ar = a.row(k);
        const double* br = b.row(k);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            double av = ar[i];
            if (av == 0.0) continue;
            double* or_ = out.row(i);
            for (std::size_t j = 0; j < b.cols(); ++j) or_[j] += av * br[j];
        }
    }
}

// out += a * b (accumulating variant)
inline void matmul_acc(const Mat& a, const Mat& b, Mat& out) {
    assert(a.cols() == b.rows());
    assert(out.rows() == a.rows() && out.cols() == b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ar = a.row(i);
        double* or_ = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            double av = ar[k];
            if (av == 0.0) continue;
            const double* br = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) or_[j] += av * br[j];
        }
    }
}

// out += a * b^T
inline void matmul_nt_acc(const Mat& a, const Mat& b, Mat& out) {
    assert(a.cols() == b.cols());
    assert(out.rows() == a.rows() && out.cols() == b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) += dot(a.row(i), b.row(j), a.cols());
}

} // namespace ratt
