#pragma once

#include <cstddef>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace criticgate {

// Dense row-major matrix of 64-bit floats. Training and gradient checks run
// in double; checkpoints store float32 (see checkpoint.hpp).
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {
        if (r <= 0 || c <= 0) throw std::invalid_argument("Matrix: non-positive shape");
    }

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    const double* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
    double* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    size_t size() const { return data.size(); }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    void fill_normal(std::mt19937_64& rng, double stddev) {
        std::normal_distribution<double> dist(0.0, stddev);
        for (double& x : data) x = dist(rng);
    }

    bool all_finite() const {
        for (double x : data)
            if (!std::isfinite(x)) return false;
        return true;
    }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// result = a * b, shapes (n x k) * (k x m).
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows)
        throw std::invalid_argument("matmul: shape mismatch (" + std::to_string(a.rows) + "x" +
                                    std::to_string(a.cols) + ")*(" + std::to_string(b.rows) + "x" +
                                    std::to_string(b.cols) + ")");
    Matrix out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        const double* arow = a.row(i);
        double* orow = out.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            if (aik == 0.0) continue;
            const double* brow = b.row(k);
            for (int j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

// y = W x for a (out x in) weight and an in-dim vector, accumulating into y.
inline void matvec_acc(const Matrix& w, const double* x, double* y) {
    for (int i = 0; i < w.rows; ++i) {
        const double* wrow = w.row(i);
        double acc = 0.0;
        for (int j = 0; j < w.cols; ++j) acc += wrow[j] * x[j];
        y[i] += acc;
    }
}

// y = W^T x for a (out x in) weight and an out-dim vector, accumulating into y.
inline void matvec_transpose_acc(const Matrix& w, const double* x, double* y) {
    for (int i = 0; i < w.rows; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        const double* wrow = w.row(i);
        for (int j = 0; j < w.cols; ++j) y[j] += xi * wrow[j];
    }
}

}  // namespace criticgate
